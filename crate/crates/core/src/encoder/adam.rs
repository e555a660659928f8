use super::{EncoderGrad, EncoderParams};
use crate::error::{Error, Result};

/// Adam moment estimates, carried explicitly between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the usual coefficients (0.9, 0.999, 1e-8).
    pub fn new(num_params: usize) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `p` along `grad` with learning rate `eta`.
pub fn adam_step(
    p: &EncoderParams,
    grad: &EncoderGrad,
    state: &AdamState,
    eta: f64,
) -> Result<(EncoderParams, AdamState)> {
    let n = p.num_params();
    if grad.0.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(format!(
            "adam: {n} parameters, {} gradient entries, {} moment entries",
            grad.0.len(),
            state.m.len()
        )));
    }
    if let Some(k) = grad.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::invalid(format!("non-finite gradient at parameter {k}")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {eta}")));
    }
    let mut next = state.clone();
    next.t += 1;
    let t = i32::try_from(next.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut values = p.flatten();
    for k in 0..n {
        let g = grad.0[k];
        next.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        next.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = next.m[k] / c1;
        let v_hat = next.v[k] / c2;
        values[k] -= eta * m_hat / (v_hat.sqrt() + state.eps);
    }
    let mut updated = p.with_flat(&values)?;
    updated.param_version = p.param_version + 1;
    Ok((updated, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, Layer};
    use ndarray::{array, Array1};

    fn scalar(v: f64) -> EncoderParams {
        EncoderParams::new(vec![Layer {
            weight: array![[v]],
            bias: Array1::zeros(1),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let p = EncoderParams::default_mlp(4);
        let mut s = AdamState::new(p.num_params());
        s.m.iter_mut().for_each(|m| *m = 0.5);
        let (q, s2) = adam_step(&p, &EncoderGrad::zeros(p.num_params()), &s, 1e-3).unwrap();
        // Moments decay; with m != 0 the parameters would move, so check the pure case too.
        assert!(s2.m.iter().all(|m| (*m - 0.45).abs() < 1e-15));
        let fresh = AdamState::new(p.num_params());
        let (r, _) = adam_step(&p, &EncoderGrad::zeros(p.num_params()), &fresh, 1e-3).unwrap();
        assert_eq!(r.flatten(), p.flatten());
        assert_ne!(q.flatten(), p.flatten());
    }

    #[test]
    fn hand_computed_scalar_step() {
        let p = scalar(1.0);
        let mut s = AdamState::new(2);
        s.m = vec![0.2, 0.0];
        s.v = vec![0.05, 0.0];
        s.t = 3;
        let g = EncoderGrad(vec![0.4, 0.0]);
        let (q, s2) = adam_step(&p, &g, &s, 0.01).unwrap();
        let m = 0.9 * 0.2 + 0.1 * 0.4;
        let v = 0.999 * 0.05 + 0.001 * 0.16;
        let m_hat = m / (1.0 - 0.9f64.powi(4));
        let v_hat = v / (1.0 - 0.999f64.powi(4));
        let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((q.layers[0].weight[[0, 0]] - expected).abs() < 1e-12);
        assert_eq!(s2.t, 4);
        assert_eq!(q.param_version, 1);
    }

    #[test]
    fn constant_gradient_gives_eta_sized_steps() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(2);
        let g = EncoderGrad(vec![-3.7, 0.0]);
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p.layers[0].weight[[0, 0]];
            let (q, s2) = adam_step(&p, &g, &s, 0.01).unwrap();
            last = q.layers[0].weight[[0, 0]] - before;
            p = q;
            s = s2;
        }
        assert!((last - 0.01).abs() < 1e-6, "step {last}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let p = scalar(1.0);
        let s = AdamState::new(2);
        assert!(adam_step(&p, &EncoderGrad(vec![f64::NAN, 0.0]), &s, 0.01).is_err());
    }
}
