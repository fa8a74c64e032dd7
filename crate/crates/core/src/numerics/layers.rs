use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Params, Tensor2, INIT_SCALE};

/// Gradients of a layer: one entry per parameter plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

/// Affine layer `W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor2::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor2::uniform(outputs, inputs, INIT_SCALE, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NumericsError> {
        linear_forward(&self.weight, &self.bias, x)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    pub fn backward_into(
        &self,
        x: &[f64],
        upstream: &[f64],
        grads: &mut Linear,
    ) -> Result<Vec<f64>, NumericsError> {
        linear_backward_into(&self.weight, x, upstream, &mut grads.weight, &mut grads.bias)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.weight"), self.weight.data()));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut [f64])>,
    ) {
        out.push((format!("{prefix}.weight"), self.weight.data_mut()));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors("linear", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut("linear", &mut out);
        out
    }
}

pub fn linear_forward(weight: &Tensor2, bias: &[f64], x: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if weight.cols() != x.len() || weight.rows() != bias.len() {
        return Err(NumericsError::Dimension(format!(
            "weight {}x{}, bias {}, input {}",
            weight.rows(),
            weight.cols(),
            bias.len(),
            x.len()
        )));
    }
    let mut y = weight.matvec(x)?;
    for (yi, bi) in y.iter_mut().zip(bias) {
        *yi += bi;
    }
    Ok(y)
}

pub fn linear_backward(
    weight: &Tensor2,
    bias: &[f64],
    x: &[f64],
    upstream: &[f64],
) -> Result<LayerGrads, NumericsError> {
    if bias.len() != weight.rows() {
        return Err(NumericsError::Dimension(format!(
            "weight {}x{} with bias {}",
            weight.rows(),
            weight.cols(),
            bias.len()
        )));
    }
    let mut gw = Tensor2::zeros(weight.rows(), weight.cols());
    let mut gb = vec![0.0; bias.len()];
    let input = linear_backward_into(weight, x, upstream, &mut gw, &mut gb)?;
    Ok(LayerGrads {
        weight: gw,
        bias: gb,
        input,
    })
}

/// `gw += upstream·xᵀ`, `gb += upstream`; returns `Wᵀ·upstream`.
pub fn linear_backward_into(
    weight: &Tensor2,
    x: &[f64],
    upstream: &[f64],
    grad_weight: &mut Tensor2,
    grad_bias: &mut [f64],
) -> Result<Vec<f64>, NumericsError> {
    if upstream.len() != weight.rows() || x.len() != weight.cols() {
        return Err(NumericsError::Dimension(format!(
            "weight {}x{}, input {}, upstream {}",
            weight.rows(),
            weight.cols(),
            x.len(),
            upstream.len()
        )));
    }
    if grad_weight.shape() != weight.shape() || grad_bias.len() != weight.rows() {
        return Err(NumericsError::Dimension(format!(
            "gradient buffers {:?}/{} for weight {:?}",
            grad_weight.shape(),
            grad_bias.len(),
            weight.shape()
        )));
    }
    grad_weight.add_outer(1.0, upstream, x)?;
    for (g, u) in grad_bias.iter_mut().zip(upstream) {
        *g += u;
    }
    weight.matvec_transposed(upstream)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Passes `upstream` where the forward input was positive. The subgradient at
/// exactly zero is taken as 0.
pub fn relu_backward(x: &[f64], upstream: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(upstream)
        .map(|(&xi, &u)| if xi > 0.0 { u } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_forward() {
        let y = linear_forward(&Tensor2::identity(2), &[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
    }

    #[test]
    fn hand_forward() {
        let w = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(linear_forward(&w, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn zero_input_returns_bias() {
        let w = Tensor2::from_rows(&[vec![1.5, -2.0], vec![3.0, 4.0], vec![0.1, 0.2]]).unwrap();
        let b = [0.25, -1.0, 7.0];
        assert_eq!(linear_forward(&w, &b, &[0.0, 0.0]).unwrap(), b.to_vec());
    }

    #[test]
    fn forward_shape_error_names_shapes() {
        let err = linear_forward(&Tensor2::zeros(2, 3), &[0.0, 0.0], &[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("input 1"), "{msg}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let w = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = linear_backward(&w, &[1.0, 1.0], &[5.0, 6.0], &[0.0, 0.0]).unwrap();
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.bias, vec![0.0, 0.0]);
        assert_eq!(g.input, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_backward_passes_upstream() {
        let g = linear_backward(&Tensor2::identity(3), &[0.0; 3], &[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0])
            .unwrap();
        assert_eq!(g.input, vec![0.5, -1.0, 2.0]);
        assert_eq!(g.bias, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        assert!(linear_backward(&Tensor2::zeros(2, 2), &[0.0, 0.0], &[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0, 2.0, 0.0]), vec![0.0, 2.0, 0.0]);
        assert_eq!(relu_backward(&[-1.0, 2.0], &[5.0, 5.0]), vec![0.0, 5.0]);
    }
}
