use std::path::Path;

use crate::binio::{write_atomic, Kind, Reader, Writer};
use crate::encoder::{decode_params, encode_params, AdamState, EncoderParams};
use crate::error::{Error, Result};

pub const TRAIN_STATE_VERSION: u32 = 1;

/// Everything needed to resume training after the last completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: EncoderParams,
    pub xi: EncoderParams,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    /// Start of training: the target begins as a copy of the online encoder.
    pub fn new(theta: EncoderParams) -> Self {
        Self { xi: theta.clone(), adam: AdamState::new(theta.num_params()), theta, epoch: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::TrainState, TRAIN_STATE_VERSION);
        w.len(self.epoch);
        encode_params(&mut w, &self.theta);
        encode_params(&mut w, &self.xi);
        w.u64(self.adam.t);
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);
        w.len(self.adam.m.len());
        w.f64s(&self.adam.m);
        w.f64s(&self.adam.v);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, Kind::TrainState, TRAIN_STATE_VERSION)?;
        let epoch = r.u64("epoch")? as usize;
        let theta = decode_params(&mut r)?;
        let xi = decode_params(&mut r)?;
        let t = r.u64("adam step")?;
        let beta1 = r.f64("beta1")?;
        let beta2 = r.f64("beta2")?;
        let eps = r.f64("adam eps")?;
        let at = r.offset();
        let n = r.len("moment length", 16)?;
        if n != theta.num_params() || !theta.same_shape(&xi) {
            return Err(Error::Parse {
                offset: at as u64,
                message: "moment and encoder shapes disagree".into(),
            });
        }
        let m = r.f64s(n, "first moment")?;
        let v = r.f64s(n, "second moment")?;
        r.finish()?;
        Ok(Self { theta, xi, adam: AdamState { m, v, t, beta1, beta2, eps }, epoch })
    }
}

pub fn write_train_state(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &state.to_bytes())
}

pub fn read_train_state(path: &Path) -> Result<TrainState> {
    TrainState::from_bytes(&std::fs::read(path)?)
}
