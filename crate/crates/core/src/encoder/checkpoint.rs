use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, EncoderParams, Layer};
use crate::binio::{write_atomic, Kind, Reader, Writer};
use crate::error::Result;

/// Current encoder checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn encode_params(w: &mut Writer, p: &EncoderParams) {
    w.u64(p.param_version);
    w.len(p.layers.len());
    for l in &p.layers {
        w.len(l.output_dim());
        w.len(l.input_dim());
        w.u8(l.activation.code());
        w.f64s(l.weight.iter());
        w.f64s(l.bias.iter());
    }
}

pub(crate) fn decode_params(r: &mut Reader<'_>) -> Result<EncoderParams> {
    let param_version = r.u64("param version")?;
    let n_layers = r.len("layer count", 17)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = r.offset();
        let rows = r.len("layer rows", 8)?;
        let cols = r.len("layer cols", 8)?;
        let code_at = r.offset();
        let activation = Activation::from_code(r.u8("activation")?)
            .ok_or_else(|| r.fail(code_at, "unknown activation code"))?;
        let weight = r.f64s(rows.saturating_mul(cols), "weights")?;
        let bias = r.f64s(rows, "bias")?;
        let weight = Array2::from_shape_vec((rows, cols), weight)
            .map_err(|_| r.fail(at, "inconsistent layer shape"))?;
        layers.push(Layer { weight, bias: Array1::from(bias), activation });
    }
    let at = r.offset();
    let mut p = EncoderParams::new(layers).map_err(|e| r.fail(at, &e.to_string()))?;
    p.param_version = param_version;
    Ok(p)
}

/// Serialize encoder parameters.
pub fn checkpoint_bytes(p: &EncoderParams) -> Vec<u8> {
    let mut w = Writer::new(Kind::Encoder, CHECKPOINT_VERSION);
    encode_params(&mut w, p);
    w.into_bytes()
}

/// Parse encoder parameters written by [`checkpoint_bytes`].
pub fn params_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let mut r = Reader::open(bytes, Kind::Encoder, CHECKPOINT_VERSION)?;
    let p = decode_params(&mut r)?;
    r.finish()?;
    Ok(p)
}

/// Atomically write an encoder checkpoint.
pub fn write_checkpoint(path: &Path, p: &EncoderParams) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(p))
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderParams> {
    params_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn bit_exact_round_trip() {
        let mut p = EncoderParams::default_mlp(11);
        p.param_version = 77;
        p.layers[0].weight[[0, 0]] = -0.0;
        p.layers[1].bias[3] = f64::MIN_POSITIVE / 4.0;
        let q = params_from_bytes(&checkpoint_bytes(&p)).unwrap();
        assert_eq!(q.param_version, 77);
        let bits = |p: &EncoderParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(p.layers[1].activation, q.layers[1].activation);
    }

    #[test]
    fn truncation_and_version_detected() {
        let bytes = checkpoint_bytes(&EncoderParams::default_mlp(1));
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(params_from_bytes(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(params_from_bytes(&bad), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let p = EncoderParams::default_mlp(5);
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
    }
}
