use rand::Rng;

use super::Activation;
use crate::numerics::{relu, relu_backward, Linear, NumericsError, Params};

/// Two-layer network mapping a temporal context input into the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualBranch {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl VisualBranch {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::init(input, hidden, rng),
            second: Linear::init(hidden, output, rng),
            activation,
        }
    }

    pub fn zeros_like(other: &VisualBranch) -> Self {
        Self {
            first: Linear::zeros(other.first.inputs(), other.first.outputs()),
            second: Linear::zeros(other.second.inputs(), other.second.outputs()),
            activation: other.activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.first.inputs()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, BranchCache), NumericsError> {
        let pre = self.first.forward(input)?;
        let hidden = match self.activation {
            Activation::Relu => relu(&pre),
            Activation::Identity => pre.clone(),
        };
        let out = self.second.forward(&hidden)?;
        Ok((
            out,
            BranchCache {
                input: input.to_vec(),
                pre_activation: pre,
                hidden,
            },
        ))
    }

    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>, NumericsError> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Accumulates weight gradients into `grads`.
    pub fn backward(
        &self,
        cache: &BranchCache,
        upstream: &[f64],
        grads: &mut VisualBranch,
    ) -> Result<(), NumericsError> {
        let d_hidden = self
            .second
            .backward_into(&cache.hidden, upstream, &mut grads.second)?;
        let d_pre = match self.activation {
            Activation::Relu => relu_backward(&cache.pre_activation, &d_hidden),
            Activation::Identity => d_hidden,
        };
        self.first.backward_into(&cache.input, &d_pre, &mut grads.first)?;
        Ok(())
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.first.push_tensors(&format!("{prefix}.first"), out);
        self.second.push_tensors(&format!("{prefix}.second"), out);
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut [f64])>,
    ) {
        self.first.push_tensors_mut(&format!("{prefix}.first"), out);
        self.second.push_tensors_mut(&format!("{prefix}.second"), out);
    }
}

impl Params for VisualBranch {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors("branch", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut("branch", &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;

    #[test]
    fn zero_weights_embed_to_zero() {
        let b = VisualBranch {
            first: Linear::zeros(6, 4),
            second: Linear::zeros(4, 3),
            activation: Activation::Relu,
        };
        assert_eq!(b.embed(&[1.0, -2.0, 3.0, 0.5, 0.0, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hand_computed_forward() {
        // hidden = relu([x0 - x1, x1 - x0]) ; out = [h0 + h1 + 1]
        let b = VisualBranch {
            first: Linear {
                weight: Tensor2::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap(),
                bias: vec![0.0, 0.0],
            },
            second: Linear {
                weight: Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap(),
                bias: vec![1.0],
            },
            activation: Activation::Relu,
        };
        assert_eq!(b.embed(&[3.0, 1.0]).unwrap(), vec![3.0]);
        assert_eq!(b.embed(&[1.0, 4.0]).unwrap(), vec![4.0]);
        let linear = VisualBranch {
            activation: Activation::Identity,
            ..b
        };
        assert_eq!(linear.embed(&[3.0, 1.0]).unwrap(), vec![1.0]);
    }
}
