//! Leaky integrate-and-fire dynamics with an arctan surrogate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    /// Leak factor in [0, 1].
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Argument(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Argument(format!(
                "v_th {} must exceed v_reset {}",
                self.v_th, self.v_reset
            )));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::Argument("surrogate alpha must be positive".into()));
        }
        Ok(())
    }

    /// Charge: `H = V - tau (V - V_reset) + I`.
    #[inline]
    pub fn charge(&self, v_prev: f64, current: f64) -> f64 {
        v_prev - self.tau * (v_prev - self.v_reset) + current
    }

    #[inline]
    pub fn fire(&self, h: f64) -> f64 {
        if h - self.v_th >= 0.0 {
            1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn reset(&self, h: f64, spike: f64) -> f64 {
        h * (1.0 - spike) + self.v_reset * spike
    }
}

/// Membrane potentials of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
}

impl LifState {
    pub fn resting(shape: &[usize], p: &LifParams) -> Self {
        Self {
            v: Tensor::filled(shape, p.v_reset),
        }
    }
}

/// One LIF update. Returns the new state and the binary spike tensor.
pub fn lif_step(state: &LifState, input_current: &Tensor, p: &LifParams) -> Result<(LifState, Tensor)> {
    state.v.check_same_shape(input_current)?;
    if !input_current.is_finite() || !state.v.is_finite() {
        return Err(Error::Numeric("non-finite membrane input".into()));
    }
    let n = input_current.len();
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    for i in 0..n {
        let h = p.charge(state.v.data()[i], input_current.data()[i]);
        s[i] = p.fire(h);
        v[i] = p.reset(h, s[i]);
    }
    let shape = input_current.shape().to_vec();
    Ok((
        LifState {
            v: Tensor::new(shape.clone(), v)?,
        },
        Tensor::new(shape, s)?,
    ))
}

/// Derivative of the arctan surrogate `0.5 + atan(pi*alpha*x/2)/pi`.
#[inline]
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = PI * alpha * x / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}

/// The smooth step whose derivative is [`surrogate_grad`].
#[inline]
pub fn surrogate_step(x: f64, alpha: f64) -> f64 {
    0.5 + (PI * alpha * x / 2.0).atan() / PI
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step1(v: f64, i: f64, p: &LifParams) -> (f64, f64, f64) {
        let state = LifState {
            v: Tensor::new(vec![1], vec![v]).unwrap(),
        };
        let (next, s) = lif_step(&state, &Tensor::new(vec![1], vec![i]).unwrap(), p).unwrap();
        (p.charge(v, i), s.data()[0], next.v.data()[0])
    }

    #[test]
    fn quiescent() {
        assert_eq!(step1(0.0, 0.0, &LifParams::default()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_cases() {
        let p = LifParams::default();
        let (h, s, v) = step1(0.8, 0.5, &p);
        assert!((h - 0.9).abs() < 1e-15 && s == 0.0 && (v - 0.9).abs() < 1e-15);
        let (h, s, v) = step1(0.8, 0.7, &p);
        assert!((h - 1.1).abs() < 1e-15 && s == 1.0 && v == 0.0);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_grad(0.0, 2.0), 1.0);
        let expected = 2.0 / (2.0 * (1.0 + PI * PI));
        assert!((surrogate_grad(1.0, 2.0) - expected).abs() < 1e-15);
        assert!((surrogate_grad(1.0, 2.0) - 0.09199).abs() < 1e-5);
        assert!(surrogate_grad(1e9, 2.0) < 1e-15);
        assert!(surrogate_grad(-1e9, 2.0) < 1e-15);
        // derivative of the smooth step
        let h = 1e-6;
        let fd = (surrogate_step(0.3 + h, 2.0) - surrogate_step(0.3 - h, 2.0)) / (2.0 * h);
        assert!((fd - surrogate_grad(0.3, 2.0)).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        let p = LifParams::default();
        let state = LifState::resting(&[2], &p);
        assert!(matches!(
            lif_step(&state, &Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).unwrap(), &p),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            lif_step(&state, &Tensor::zeros(&[3]), &p),
            Err(Error::Shape(_))
        ));
        assert!(LifParams { v_th: 0.0, ..p }.validate().is_err());
    }
}
