//! Dense linear algebra and hand-differentiated layers.
//!
//! Every layer exposes an explicit forward and backward pass. Training and
//! gradient checking run in `f64`; central finite differences are not
//! meaningful at single precision.

mod gradcheck;
mod layers;
mod lstm;
mod tensor;

pub use gradcheck::{grad_check, CoordError, GradCheckConfig, GradCheckReport};
pub use layers::{
    linear_backward, linear_backward_into, linear_forward, relu, relu_backward, LayerGrads,
    Linear,
};
pub use lstm::{
    lstm_sequence_backward, lstm_sequence_forward, lstm_step, lstm_step_backward, LstmCache,
    LstmParams, FORGET_BIAS,
};
pub use tensor::{add_assign, axpy, dot, squared_distance, Tensor2};

use thiserror::Error;

/// Scale of the uniform initialisation used for every weight matrix.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("training diverged: non-finite value in `{name}` at index {index}")]
    Divergence { name: String, index: usize },
    #[error("invalid learning rate {0}")]
    LearningRate(f64),
}

/// A collection of named, flat parameter buffers.
///
/// Implementors must list buffers in a fixed order; gradient containers and
/// the parameters they update are matched position by position.
pub trait Params {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NumericsError> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(NumericsError::Dimension(format!(
                "flat buffer of length {} for {n} parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += other`, buffer by buffer.
    fn accumulate(&mut self, other: &Self) -> Result<(), NumericsError>
    where
        Self: Sized,
    {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(NumericsError::Dimension(format!(
                "accumulating {} buffers into {}",
                src.len(),
                dst.len()
            )));
        }
        for ((dn, d), (sn, s)) in dst.iter_mut().zip(&src) {
            if d.len() != s.len() {
                return Err(NumericsError::Dimension(format!(
                    "`{dn}` has {} entries but `{sn}` has {}",
                    d.len(),
                    s.len()
                )));
            }
            add_assign(d, s);
        }
        Ok(())
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Plain SGD: `p ← p − lr·g` for every parameter.
///
/// Gradients are validated before any parameter is touched, so a divergence
/// error leaves `params` unchanged.
pub fn sgd_step<P: Params + ?Sized, G: Params + ?Sized>(
    params: &mut P,
    grads: &G,
    learning_rate: f64,
) -> Result<(), NumericsError> {
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(NumericsError::LearningRate(learning_rate));
    }
    let grads = grads.tensors();
    for (name, g) in &grads {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::Divergence {
                name: name.clone(),
                index,
            });
        }
    }
    let mut targets = params.tensors_mut();
    if targets.len() != grads.len() {
        return Err(NumericsError::Dimension(format!(
            "{} parameter buffers but {} gradient buffers",
            targets.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in targets.iter().zip(&grads) {
        if p.len() != g.len() || pn != gn {
            return Err(NumericsError::Dimension(format!(
                "parameter `{pn}` ({}) does not match gradient `{gn}` ({})",
                p.len(),
                g.len()
            )));
        }
    }
    if learning_rate == 0.0 {
        return Ok(());
    }
    for ((_, p), (_, g)) in targets.iter_mut().zip(&grads) {
        axpy(-learning_rate, g, p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat(Vec<f64>);

    impl Params for Flat {
        fn tensors(&self) -> Vec<(String, &[f64])> {
            vec![("p".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
            vec![("p".into(), &mut self.0)]
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Flat(vec![1.0]);
        sgd_step(&mut p, &Flat(vec![0.5]), 0.1).unwrap();
        assert!((p.0[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_rate_is_identity() {
        let mut p = Flat(vec![1.0, -2.0, 3.5]);
        sgd_step(&mut p, &Flat(vec![9.0, 9.0, 9.0]), 0.0).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_without_partial_update() {
        let mut p = Flat(vec![1.0, 1.0]);
        let err = sgd_step(&mut p, &Flat(vec![1.0, f64::NAN]), 0.1).unwrap_err();
        assert!(matches!(err, NumericsError::Divergence { index: 1, .. }));
        assert_eq!(p.0, vec![1.0, 1.0]);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = Flat(vec![1.0, 1.0]);
        assert!(sgd_step(&mut p, &Flat(vec![1.0]), 0.1).is_err());
    }
}
