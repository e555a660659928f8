//! Dense distance matrices between two task lists.
//!
//! Binary layout inside the shared container: rows and cols as `u64`, the
//! row ids, the col ids, then the values row-major as `f64`. The CSV form has
//! a header `task_id,<col ids...>` and one line per row.

use std::path::Path;

use ndarray::Array2;

use crate::binio::{write_atomic, Kind, Reader, Writer, MAGIC};
use crate::error::{Error, Result};

pub const MATRIX_VERSION: u32 = 1;

/// OT losses with rows indexed by `row_ids` and columns by `col_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
    pub values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn new(row_ids: Vec<u64>, col_ids: Vec<u64>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (row_ids.len(), col_ids.len()) {
            return Err(Error::shape(format!(
                "{}x{} values for {} row ids and {} col ids",
                values.nrows(),
                values.ncols(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "distance matrix entry {v} is not a finite nonnegative number"
            )));
        }
        Ok(Self { row_ids, col_ids, values })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::DistanceMatrix, MATRIX_VERSION);
        w.len(self.row_ids.len());
        w.len(self.col_ids.len());
        for id in self.row_ids.iter().chain(&self.col_ids) {
            w.u64(*id);
        }
        w.f64s(self.values.iter());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, Kind::DistanceMatrix, MATRIX_VERSION)?;
        let rows = r.len("row count", 8)?;
        let cols = r.len("col count", 8)?;
        let row_ids = (0..rows).map(|_| r.u64("row id")).collect::<Result<Vec<_>>>()?;
        let col_ids = (0..cols).map(|_| r.u64("col id")).collect::<Result<Vec<_>>>()?;
        let total = rows.checked_mul(cols).ok_or_else(|| r.fail(r.offset(), "matrix too large"))?;
        let at = r.offset();
        let values = r.f64s(total, "values")?;
        r.finish()?;
        let values = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        Self::new(row_ids, col_ids, values)
            .map_err(|e| Error::Parse { offset: at as u64, message: e.to_string() })
    }

    /// CSV text; values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id");
        for id in &self.col_ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        for (id, row) in self.row_ids.iter().zip(self.values.rows()) {
            out.push_str(&id.to_string());
            for v in row {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lines = Vec::new();
        for line in text.split_inclusive('\n') {
            lines.push((offset, line.trim_end_matches(['\n', '\r'])));
            offset += line.len();
        }
        let bad = |at: usize, msg: String| Error::Parse { offset: at as u64, message: msg };
        let Some(&(_, header)) = lines.first() else {
            return Err(bad(0, "empty CSV".into()));
        };
        let mut head = header.split(',');
        if head.next() != Some("task_id") {
            return Err(bad(0, "header must start with task_id".into()));
        }
        let col_ids = head
            .map(|f| f.parse::<u64>().map_err(|e| bad(0, format!("col id {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for &(at, line) in &lines[1..] {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or_default();
            row_ids.push(id.parse::<u64>().map_err(|e| bad(at, format!("row id {id:?}: {e}")))?);
            let before = values.len();
            for f in fields {
                values.push(f.parse::<f64>().map_err(|e| bad(at, format!("value {f:?}: {e}")))?);
            }
            if values.len() - before != col_ids.len() {
                return Err(bad(at, format!("expected {} values", col_ids.len())));
            }
        }
        let values =
            Array2::from_shape_vec((row_ids.len(), col_ids.len()), values).expect("row lengths checked");
        Self::new(row_ids, col_ids, values).map_err(|e| bad(0, e.to_string()))
    }
}

/// Write binary, or CSV if the path ends in `.csv`.
pub fn write_distance_matrix(path: &Path, m: &DistanceMatrix) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        write_atomic(path, m.to_csv().as_bytes())
    } else {
        write_atomic(path, &m.to_bytes())
    }
}

/// Read either form; binary is recognized by its magic bytes.
pub fn read_distance_matrix(path: &Path) -> Result<DistanceMatrix> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        DistanceMatrix::from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            offset: e.utf8_error().valid_up_to() as u64,
            message: "matrix file is neither binary nor UTF-8 CSV".into(),
        })?;
        DistanceMatrix::from_csv(&text)
    }
}
