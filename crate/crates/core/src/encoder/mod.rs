//! Trainable feature extractor.
//!
//! A small multilayer perceptron maps raw sample features to embeddings. The
//! same parameter layout serves both the online encoder (updated by Adam) and
//! the target encoder (an exponential moving average of the online one).
//! Gradients are computed by hand-written backpropagation.

mod adam;
mod checkpoint;
mod ema;
mod grad;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    checkpoint_bytes, params_from_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::{decode_params, encode_params};
pub use ema::{ema_update, EmaConfig};
pub use grad::{grad_ot_loss, pair_loss, PairGradient};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// One affine layer `y = act(W x + b)` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Default encoder shape.
pub const DEFAULT_INPUT_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 32;
pub const DEFAULT_OUTPUT_DIM: usize = 8;

/// Weights of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    /// Incremented by every optimizer or EMA update.
    pub param_version: u64,
}

/// Gradient with respect to every parameter, flattened in [`EncoderParams::flatten`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrad(pub Vec<f64>);

impl EncoderGrad {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &EncoderGrad) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }
}

impl EncoderParams {
    /// Validate layer chaining and finiteness.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let p = Self { layers, param_version: 0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() || l.input_dim() == 0 || l.output_dim() == 0 {
                return Err(Error::shape(format!("layer {k}: bias/weight shapes disagree")));
            }
            if k > 0 && self.layers[k - 1].output_dim() != l.input_dim() {
                return Err(Error::shape(format!("layer {k}: input does not chain")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {k}: non-finite parameter")));
            }
        }
        Ok(())
    }

    /// Multilayer perceptron over `dims` (`dims[0]` inputs, `dims[last]`
    /// outputs) with tanh hidden layers and a linear output layer. Weights are
    /// drawn uniformly from `±sqrt(6 / fan_in)`, biases start at zero.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("mlp needs at least two positive layer widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let activation = if k + 2 == dims.len() { Activation::Identity } else { Activation::Tanh };
                Layer { weight, bias: Array1::zeros(fan_out), activation }
            })
            .collect();
        Self::new(layers)
    }

    /// The default `16 -> 32 -> 8` encoder.
    pub fn default_mlp(seed: u64) -> Self {
        Self::mlp(&[DEFAULT_INPUT_DIM, DEFAULT_HIDDEN_DIM, DEFAULT_OUTPUT_DIM], seed)
            .expect("default dims are valid")
    }

    /// Single linear layer with identity weights: the raw-feature extractor.
    pub fn identity(dim: usize) -> Self {
        Self::new(vec![Layer {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation: Activation::Identity,
        }])
        .expect("identity layer is valid")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Same shapes, new values (in [`flatten`](Self::flatten) order).
    pub fn with_flat(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut rest = values;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, tail) = rest.split_at(l.weight.len());
            let (b, tail) = tail.split_at(l.bias.len());
            rest = tail;
            layers.push(Layer {
                weight: Array2::from_shape_vec(l.weight.dim(), w.to_vec()).expect("shape checked"),
                bias: Array1::from(b.to_vec()),
                activation: l.activation,
            });
        }
        Ok(Self { layers, param_version: self.param_version })
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.activation == b.activation)
    }

    /// Embed one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        Ok(self.forward_batch(&batch)?.into_raw_vec_and_offset().0)
    }

    /// Embed every row of `x`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x)?.pop().expect("at least one layer"))
    }

    /// Layer outputs for every layer, input first.
    fn forward_trace(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has dimension {}, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_owned());
        for l in &self.layers {
            let h = trace.last().expect("non-empty");
            let mut a = h.dot(&l.weight.t());
            a += &l.bias;
            a.mapv_inplace(|v| l.activation.apply(v));
            trace.push(a);
        }
        Ok(trace)
    }

    /// Gradient of a scalar loss given `d loss / d output` for every row of `x`.
    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Result<EncoderGrad> {
        let trace = self.forward_trace(x)?;
        let out = trace.last().expect("non-empty");
        if grad_out.dim() != out.dim() {
            return Err(Error::shape("output gradient does not match output shape"));
        }
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.to_owned();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let output = &trace[k + 1];
            let input = &trace[k];
            let mut delta = upstream;
            delta.zip_mut_with(output, |d, o| *d *= l.activation.derivative_from_output(*o));
            let dw = delta.t().dot(input);
            let db = delta.sum_axis(Axis(0));
            upstream = delta.dot(&l.weight);
            per_layer.push((dw, db));
        }
        per_layer.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in per_layer {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Ok(EncoderGrad(flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_layer_is_identity() {
        let p = EncoderParams::identity(3);
        assert_eq!(p.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_weights_give_activated_bias() {
        let p = EncoderParams::new(vec![Layer {
            weight: Array2::zeros((2, 3)),
            bias: array![0.3, -1.2],
            activation: Activation::Tanh,
        }])
        .unwrap();
        let out = p.forward(&[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(out, vec![0.3f64.tanh(), (-1.2f64).tanh()]);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let p = EncoderParams::default_mlp(3);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut h = x.clone();
        for l in &p.layers {
            let mut next = vec![0.0; l.output_dim()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (i, hv) in h.iter().enumerate() {
                    s += l.weight[[o, i]] * hv;
                }
                *slot = match l.activation {
                    Activation::Identity => s,
                    Activation::Tanh => s.tanh(),
                };
            }
            h = next;
        }
        let out = p.forward(&x).unwrap();
        for (a, b) in out.iter().zip(&h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = EncoderParams::default_mlp(0);
        assert!(matches!(p.forward(&[1.0; 3]), Err(Error::ShapeMismatch(_))));
        let bad =
            Layer { weight: Array2::zeros((2, 3)), bias: Array1::zeros(3), activation: Activation::Identity };
        assert!(EncoderParams::new(vec![bad]).is_err());
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let p = EncoderParams::default_mlp(9);
        assert_eq!(p.num_params(), 16 * 32 + 32 + 32 * 8 + 8);
        let q = p.with_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = EncoderParams::mlp(&[3, 4, 2], 5).unwrap();
        let x = array![[0.1, -0.4, 0.8], [1.0, 0.3, -0.2]];
        let w = array![[0.5, -1.0], [2.0, 0.25]];
        let loss = |p: &EncoderParams| (p.forward_batch(&x).unwrap() * &w).sum();
        let g = p.backward(&x, &w).unwrap();
        let flat = p.flatten();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut up = flat.clone();
            up[k] += h;
            let mut dn = flat.clone();
            dn[k] -= h;
            let fd = (loss(&p.with_flat(&up).unwrap()) - loss(&p.with_flat(&dn).unwrap())) / (2.0 * h);
            assert!((fd - g.0[k]).abs() < 1e-7, "param {k}: {fd} vs {}", g.0[k]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = EncoderParams::default_mlp(42);
        let b = EncoderParams::default_mlp(42);
        assert_eq!(a, b);
        let x = [0.25; 16];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }
}
