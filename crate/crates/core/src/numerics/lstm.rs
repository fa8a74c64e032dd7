use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Params, Tensor2, INIT_SCALE};

/// Initial bias of the forget gate.
pub const FORGET_BIAS: f64 = 1.0;

/// Weights of a standard LSTM cell (no peepholes).
///
/// Gate pre-activations are stacked as `[input; forget; output; candidate]`,
/// each block `hidden` rows tall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_weight: Tensor2,
    pub hidden_weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    input_gate: Vec<f64>,
    forget_gate: Vec<f64>,
    output_gate: Vec<f64>,
    candidate: Vec<f64>,
    pub c: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input_weight: Tensor2::zeros(4 * hidden, input),
            hidden_weight: Tensor2::zeros(4 * hidden, hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = FORGET_BIAS);
        Self {
            input_weight: Tensor2::uniform(4 * hidden, input, INIT_SCALE, rng),
            hidden_weight: Tensor2::uniform(4 * hidden, hidden, INIT_SCALE, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_weight.cols()
    }

    pub fn input(&self) -> usize {
        self.input_weight.cols()
    }

    fn check(&self) -> Result<(), NumericsError> {
        let h = self.hidden();
        if self.hidden_weight.rows() != 4 * h
            || self.input_weight.rows() != 4 * h
            || self.bias.len() != 4 * h
        {
            return Err(NumericsError::Dimension(format!(
                "inconsistent LSTM weights: input {:?}, hidden {:?}, bias {}",
                self.input_weight.shape(),
                self.hidden_weight.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.input_weight"), self.input_weight.data()));
        out.push((format!("{prefix}.hidden_weight"), self.hidden_weight.data()));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut [f64])>,
    ) {
        out.push((format!("{prefix}.input_weight"), self.input_weight.data_mut()));
        out.push((format!("{prefix}.hidden_weight"), self.hidden_weight.data_mut()));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl Params for LstmParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.push_tensors("lstm", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.push_tensors_mut("lstm", &mut out);
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One LSTM step. Returns the cache, whose `h` and `c` fields are the new state.
pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<LstmCache, NumericsError> {
    params.check()?;
    let hid = params.hidden();
    if x.len() != params.input() || h_prev.len() != hid || c_prev.len() != hid {
        return Err(NumericsError::Dimension(format!(
            "LSTM with input {} and hidden {hid} given x {}, h {}, c {}",
            params.input(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = params.input_weight.matvec(x)?;
    let zh = params.hidden_weight.matvec(h_prev)?;
    for ((zi, zhi), bi) in z.iter_mut().zip(&zh).zip(&params.bias) {
        *zi += zhi + bi;
    }
    let input_gate: Vec<f64> = z[..hid].iter().map(|&v| sigmoid(v)).collect();
    let forget_gate: Vec<f64> = z[hid..2 * hid].iter().map(|&v| sigmoid(v)).collect();
    let output_gate: Vec<f64> = z[2 * hid..3 * hid].iter().map(|&v| sigmoid(v)).collect();
    let candidate: Vec<f64> = z[3 * hid..].iter().map(|v| v.tanh()).collect();
    let c: Vec<f64> = (0..hid)
        .map(|k| forget_gate[k] * c_prev[k] + input_gate[k] * candidate[k])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h = (0..hid).map(|k| output_gate[k] * tanh_c[k]).collect();
    Ok(LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        input_gate,
        forget_gate,
        output_gate,
        candidate,
        c,
        tanh_c,
        h,
    })
}

/// Backward through one step given gradients flowing into `h` and `c`.
///
/// Accumulates weight gradients into `grads`; returns `(∂x, ∂h_prev, ∂c_prev)`.
pub fn lstm_step_backward(
    params: &LstmParams,
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), NumericsError> {
    let hid = params.hidden();
    if dh.len() != hid || dc.len() != hid {
        return Err(NumericsError::Dimension(format!(
            "LSTM hidden {hid} given dh {} and dc {}",
            dh.len(),
            dc.len()
        )));
    }
    if grads.input_weight.shape() != params.input_weight.shape()
        || grads.hidden_weight.shape() != params.hidden_weight.shape()
    {
        return Err(NumericsError::Dimension(
            "LSTM gradient buffers do not match parameters".into(),
        ));
    }
    let mut dz = vec![0.0; 4 * hid];
    let mut dc_prev = vec![0.0; hid];
    for k in 0..hid {
        let (i, f, o, g) = (
            cache.input_gate[k],
            cache.forget_gate[k],
            cache.output_gate[k],
            cache.candidate[k],
        );
        let tc = cache.tanh_c[k];
        let d_out = dh[k] * tc;
        let dc_total = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dc_total * g * i * (1.0 - i);
        dz[hid + k] = dc_total * cache.c_prev[k] * f * (1.0 - f);
        dz[2 * hid + k] = d_out * o * (1.0 - o);
        dz[3 * hid + k] = dc_total * i * (1.0 - g * g);
        dc_prev[k] = dc_total * f;
    }
    grads.input_weight.add_outer(1.0, &dz, &cache.x)?;
    grads.hidden_weight.add_outer(1.0, &dz, &cache.h_prev)?;
    for (b, d) in grads.bias.iter_mut().zip(&dz) {
        *b += d;
    }
    let dx = params.input_weight.matvec_transposed(&dz)?;
    let dh_prev = params.hidden_weight.matvec_transposed(&dz)?;
    Ok((dx, dh_prev, dc_prev))
}

/// Runs the cell over `inputs` from a zero state.
pub fn lstm_sequence_forward<X: AsRef<[f64]>>(
    params: &LstmParams,
    inputs: &[X],
) -> Result<Vec<LstmCache>, NumericsError> {
    let hid = params.hidden();
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let step = lstm_step(params, x.as_ref(), &h, &c)?;
        h.clone_from(&step.h);
        c.clone_from(&step.c);
        caches.push(step);
    }
    Ok(caches)
}

/// Backpropagation through time from a gradient on the final hidden state.
/// Returns the gradient for every input vector.
pub fn lstm_sequence_backward(
    params: &LstmParams,
    caches: &[LstmCache],
    dh_final: &[f64],
    grads: &mut LstmParams,
) -> Result<Vec<Vec<f64>>, NumericsError> {
    let hid = params.hidden();
    let mut dh = dh_final.to_vec();
    let mut dc = vec![0.0; hid];
    let mut dxs = vec![Vec::new(); caches.len()];
    for (t, cache) in caches.iter().enumerate().rev() {
        let (dx, dh_prev, dc_prev) = lstm_step_backward(params, cache, &dh, &dc, grads)?;
        dxs[t] = dx;
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok(dxs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_fixed_point() {
        let p = LstmParams::zeros(3, 4);
        let s = lstm_step(&p, &[1.0, -2.0, 0.5], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(s.h.iter().all(|&v| v == 0.0));
        assert!(s.c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_reference() {
        let mut p = LstmParams::zeros(1, 1);
        p.input_weight.fill(1.0);
        p.hidden_weight.fill(1.0);
        let s = lstm_step(&p, &[1.0], &[0.0], &[0.0]).unwrap();
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        let c = sig1 * 1.0f64.tanh();
        assert!((s.c[0] - c).abs() < 1e-15);
        assert!((s.h[0] - sig1 * c.tanh()).abs() < 1e-15);
    }

    #[test]
    fn forget_bias_initialised() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let p = LstmParams::init(2, 3, &mut rng);
        assert_eq!(&p.bias[3..6], &[FORGET_BIAS; 3]);
        assert!(p.bias[..3].iter().chain(&p.bias[6..]).all(|&b| b == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let p = LstmParams::zeros(2, 3);
        assert!(lstm_step(&p, &[1.0], &[0.0; 3], &[0.0; 3]).is_err());
        assert!(lstm_step(&p, &[1.0, 2.0], &[0.0; 2], &[0.0; 3]).is_err());
    }
}
