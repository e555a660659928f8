//! Corpus files.
//!
//! The text form is a directory holding `manifest.json` and `tasks.jsonl`.
//! The JSON-lines file starts with a header line
//! `{"format":"otts-tasks","version":1,"tasks":N}` followed by exactly `N`
//! task lines. The header makes truncation and format drift detectable.
//! Floats are written in shortest round-trip form, so reading gives back the
//! identical bits. The binary form is one file in the shared `OTTS`
//! container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Manifest};
use crate::binio::{write_atomic, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::{Sample, Task};

pub const CORPUS_VERSION: u32 = 1;
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const TASKS_FORMAT: &str = "otts-tasks";
pub(super) const MANIFEST_FORMAT: &str = "otts-manifest";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    tasks: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    task_id: u64,
    n_way: usize,
    k_shot: usize,
    #[serde(default)]
    domain_tag: Option<String>,
    labels: Vec<usize>,
    features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    query_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    query_features: Vec<Vec<f64>>,
}

fn zip_samples(labels: Vec<usize>, features: Vec<Vec<f64>>) -> Result<Vec<Sample>> {
    if labels.len() != features.len() {
        return Err(Error::invalid(format!("{} labels for {} feature rows", labels.len(), features.len())));
    }
    Ok(features.into_iter().zip(labels).map(|(f, l)| Sample::new(f, l)).collect())
}

impl TaskRecord {
    fn from_task(t: &Task) -> Self {
        Self {
            task_id: t.task_id,
            n_way: t.n_way,
            k_shot: t.k_shot,
            domain_tag: t.domain_tag.clone(),
            labels: t.samples.iter().map(|s| s.label).collect(),
            features: t.samples.iter().map(|s| s.features.clone()).collect(),
            query_labels: t.queries.iter().map(|s| s.label).collect(),
            query_features: t.queries.iter().map(|s| s.features.clone()).collect(),
        }
    }

    fn into_task(self) -> Result<Task> {
        let samples = zip_samples(self.labels, self.features)?;
        let queries = zip_samples(self.query_labels, self.query_features)?;
        Task::new(self.task_id, self.n_way, self.k_shot, samples, self.domain_tag)?.with_queries(queries)
    }
}

/// JSON-lines text for `tasks`, header first.
pub fn tasks_to_jsonl(tasks: &[Task]) -> String {
    let header = Header { format: TASKS_FORMAT.to_string(), version: CORPUS_VERSION, tasks: tasks.len() };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for t in tasks {
        out.push_str(&serde_json::to_string(&TaskRecord::from_task(t)).expect("task serializes"));
        out.push('\n');
    }
    out
}

fn json_error(line_start: usize, e: &serde_json::Error) -> Error {
    Error::Parse { offset: (line_start + e.column().saturating_sub(1)) as u64, message: e.to_string() }
}

/// Parse JSON-lines text written by [`tasks_to_jsonl`]. Nothing is returned
/// unless the whole file is well formed.
pub fn read_tasks_jsonl(text: &str) -> Result<Vec<Task>> {
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n').map(|line| {
        let start = offset;
        offset += line.len();
        (start, line)
    });
    let (start, first) = lines
        .next()
        .ok_or(Error::Parse { offset: 0, message: "empty file, expected a header line".into() })?;
    let header: Header = serde_json::from_str(first).map_err(|e| json_error(start, &e))?;
    if header.format != TASKS_FORMAT {
        return Err(Error::Parse {
            offset: start as u64,
            message: format!("unknown format {:?}", header.format),
        });
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::Version { found: header.version, expected: CORPUS_VERSION });
    }
    let mut tasks = Vec::with_capacity(header.tasks.min(1 << 20));
    for (start, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if !line.ends_with('\n') {
            return Err(Error::Parse {
                offset: (start + line.len()) as u64,
                message: "last task line is not newline-terminated (truncated file?)".into(),
            });
        }
        let record: TaskRecord = serde_json::from_str(line).map_err(|e| json_error(start, &e))?;
        let id = record.task_id;
        let task = record
            .into_task()
            .map_err(|e| Error::Parse { offset: start as u64, message: format!("task {id}: {e}") })?;
        tasks.push(task);
    }
    if tasks.len() != header.tasks {
        return Err(Error::Parse {
            offset: text.len() as u64,
            message: format!("header announces {} tasks, found {}", header.tasks, tasks.len()),
        });
    }
    Ok(tasks)
}

pub fn write_tasks_jsonl(path: &Path, tasks: &[Task]) -> Result<()> {
    write_atomic(path, tasks_to_jsonl(tasks).as_bytes())
}

/// Write `dir/tasks.jsonl` and, if present, `dir/manifest.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_tasks_jsonl(&dir.join(TASKS_FILE), &corpus.tasks)?;
    if let Some(m) = &corpus.manifest {
        let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    }
    Ok(())
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text)
        .map_err(|e| Error::Parse { offset: 0, message: format!("manifest: {e}") })?;
    if m.version != CORPUS_VERSION {
        return Err(Error::Version { found: m.version, expected: CORPUS_VERSION });
    }
    Ok(m)
}

/// Read a corpus from a directory (text form), a binary corpus file, or a
/// bare JSON-lines task file.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let corpus = if path.is_dir() {
        let text = std::fs::read_to_string(path.join(TASKS_FILE))?;
        let tasks = read_tasks_jsonl(&text)?;
        let manifest_path = path.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            Some(parse_manifest(&std::fs::read_to_string(manifest_path)?)?)
        } else {
            None
        };
        Corpus { manifest, tasks }
    } else {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(crate::binio::MAGIC) {
            corpus_from_binary(&bytes)?
        } else {
            let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
                offset: e.utf8_error().valid_up_to() as u64,
                message: "task file is not UTF-8".into(),
            })?;
            Corpus { manifest: None, tasks: read_tasks_jsonl(&text)? }
        }
    };
    corpus.validate()?;
    Ok(corpus)
}

fn encode_samples(w: &mut Writer, samples: &[Sample]) {
    w.len(samples.len());
    w.len(samples.first().map_or(0, |s| s.features.len()));
    for s in samples {
        w.len(s.label);
        w.f64s(&s.features);
    }
}

fn decode_samples(r: &mut Reader<'_>) -> Result<Vec<Sample>> {
    let n = r.len("sample count", 8)?;
    let dim = r.len("feature dimension", 0)?;
    (0..n)
        .map(|_| {
            let label = r.u64("label")? as usize;
            Ok(Sample::new(r.f64s(dim, "features")?, label))
        })
        .collect()
}

/// Binary form of a corpus.
pub fn corpus_to_binary(corpus: &Corpus) -> Vec<u8> {
    let mut w = Writer::new(Kind::Corpus, CORPUS_VERSION);
    let manifest = corpus
        .manifest
        .as_ref()
        .map(|m| serde_json::to_string(m).expect("manifest serializes"))
        .unwrap_or_default();
    w.str(&manifest);
    w.len(corpus.tasks.len());
    for t in &corpus.tasks {
        w.u64(t.task_id);
        w.len(t.n_way);
        w.len(t.k_shot);
        match &t.domain_tag {
            Some(tag) => {
                w.u8(1);
                w.str(tag);
            }
            None => w.u8(0),
        }
        encode_samples(&mut w, &t.samples);
        encode_samples(&mut w, &t.queries);
    }
    w.into_bytes()
}

pub fn corpus_from_binary(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::open(bytes, Kind::Corpus, CORPUS_VERSION)?;
    let manifest_text = r.str("manifest")?;
    let manifest = if manifest_text.is_empty() { None } else { Some(parse_manifest(&manifest_text)?) };
    let n = r.len("task count", 8)?;
    let mut tasks = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let task_id = r.u64("task id")?;
        let n_way = r.u64("n_way")? as usize;
        let k_shot = r.u64("k_shot")? as usize;
        let domain_tag = match r.u8("tag flag")? {
            0 => None,
            _ => Some(r.str("domain tag")?),
        };
        let samples = decode_samples(&mut r)?;
        let queries = decode_samples(&mut r)?;
        let task = Task::new(task_id, n_way, k_shot, samples, domain_tag)
            .and_then(|t| t.with_queries(queries))
            .map_err(|e| r.fail(at, &format!("task {task_id}: {e}")))?;
        tasks.push(task);
    }
    r.finish()?;
    Ok(Corpus { manifest, tasks })
}

pub fn write_corpus_binary(corpus: &Corpus, path: &Path) -> Result<()> {
    write_atomic(path, &corpus_to_binary(corpus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusSpec};

    fn corpus() -> Corpus {
        let mut spec = CorpusSpec::with_domains(2, 6, 3);
        spec.n_query = 2;
        let mut c = generate_corpus(&spec).unwrap();
        c.tasks[0].samples[0].features[0] = -0.0;
        c.tasks[1].samples[0].features[1] = 1e-300;
        c
    }

    fn bits(c: &Corpus) -> Vec<u64> {
        c.tasks
            .iter()
            .flat_map(|t| t.samples.iter().chain(&t.queries))
            .flat_map(|s| s.features.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        write_corpus(&c, dir.path()).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = corpus();
        write_corpus_binary(&c, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn empty_corpus_is_valid() {
        let c = Corpus { manifest: None, tasks: vec![] };
        assert_eq!(read_tasks_jsonl(&tasks_to_jsonl(&[])).unwrap(), vec![]);
        assert_eq!(corpus_from_binary(&corpus_to_binary(&c)).unwrap(), c);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let text = tasks_to_jsonl(&corpus().tasks);
        for cut in [5, text.len() / 2, text.len() - 1] {
            let err = read_tasks_jsonl(&text[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
        // Cut exactly at a line boundary: caught by the task count.
        let boundary = text[..text.len() - 1].rfind('\n').unwrap() + 1;
        assert!(matches!(read_tasks_jsonl(&text[..boundary]), Err(Error::Parse { .. })));
        let bin = corpus_to_binary(&corpus());
        for cut in [3, 30, bin.len() - 1] {
            assert!(matches!(corpus_from_binary(&bin[..cut]), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn parse_error_reports_byte_offset() {
        let text = tasks_to_jsonl(&corpus().tasks);
        let second_line = text.find('\n').unwrap() + 1;
        let mut broken = text.clone();
        broken.replace_range(second_line..second_line + 1, "#");
        match read_tasks_jsonl(&broken).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset as usize, second_line),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = tasks_to_jsonl(&[]).replace("\"version\":1", "\"version\":7");
        assert!(matches!(read_tasks_jsonl(&text), Err(Error::Version { found: 7, expected: 1 })));
    }
}
