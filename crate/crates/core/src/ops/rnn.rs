use serde::{Deserialize, Serialize};

use super::{binary_ref, elementwise_ref, gemm_ref, EpiRef, GemmParams, OpCtx};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elman RNN, `h_t = tanh(W_ih x_t + b_ih + W_hh h_{t-1} + b_hh)`.
/// With `zero_initial_state` the first step skips the recurrent product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub seq_len: usize,
    pub has_bias: bool,
    pub zero_initial_state: bool,
}

/// Weights in GEMM orientation: `w_ih` is `[input, hidden]`, `w_hh` is
/// `[hidden, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnWeights {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Option<Tensor>,
    pub b_hh: Option<Tensor>,
}

impl RnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidParams("RNN sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn ih_gemm(&self) -> GemmParams {
        GemmParams::tiled(1, self.input_size, self.hidden_size, 1, self.input_size.div_ceil(8))
    }

    pub fn hh_gemm(&self) -> GemmParams {
        GemmParams::tiled(1, self.hidden_size, self.hidden_size, 1, self.hidden_size.div_ceil(8))
    }

    fn recurrent_steps(&self) -> usize {
        self.seq_len - usize::from(self.zero_initial_state)
    }

    pub fn kernel_count(&self) -> usize {
        self.seq_len + 2 * self.recurrent_steps()
    }

    pub fn macs(&self) -> u64 {
        let (i, h) = (self.input_size as u64, self.hidden_size as u64);
        self.seq_len as u64 * h * i + self.recurrent_steps() as u64 * h * h
    }

    pub fn params(&self) -> u64 {
        let (i, h) = (self.input_size as u64, self.hidden_size as u64);
        h * i + h * h + if self.has_bias { 2 * h } else { 0 }
    }
}

/// All hidden states, `[seq_len, hidden]`. `x` holds `seq_len * input`
/// values in step-major order.
pub fn rnn_ref(x: &Tensor, p: &RnnParams, wt: &RnnWeights, h0: Option<&Tensor>, ctx: OpCtx) -> Result<Tensor> {
    p.validate()?;
    if x.len() != p.seq_len * p.input_size {
        return Err(Error::Shape(format!(
            "RNN input has {} elements, expected {}x{}",
            x.len(),
            p.seq_len,
            p.input_size
        )));
    }
    if p.zero_initial_state && h0.is_some_and(|h| h.data.iter().any(|&v| v != 0.0)) {
        return Err(Error::InvalidParams("zero_initial_state with a non-zero h0".into()));
    }
    let (ih, hh) = (p.ih_gemm(), p.hh_gemm());
    let h_shape = [1, p.hidden_size];
    let mut h = match h0 {
        Some(t) => t.clone().reshape(&h_shape)?,
        None => Tensor::zeros(&h_shape),
    };
    let mut out = Vec::with_capacity(p.seq_len * p.hidden_size);
    for t in 0..p.seq_len {
        let xt = Tensor::from_vec(
            &[1, p.input_size],
            x.data[t * p.input_size..(t + 1) * p.input_size].to_vec(),
        )?;
        let mut ih_epi: Vec<EpiRef> = wt.b_ih.iter().map(EpiRef::Add).collect();
        h = if t == 0 && p.zero_initial_state {
            ih_epi.extend(wt.b_hh.iter().map(EpiRef::Add));
            ih_epi.push(EpiRef::Tanh);
            gemm_ref(&xt, &wt.w_ih, None, &ih, &ih_epi, ctx)?
        } else {
            let a = gemm_ref(&xt, &wt.w_ih, None, &ih, &ih_epi, ctx)?;
            let hh_epi: Vec<EpiRef> = wt.b_hh.iter().map(EpiRef::Add).collect();
            let b = gemm_ref(&h, &wt.w_hh, None, &hh, &hh_epi, ctx)?;
            let s = binary_ref(&a, &b, false, ctx)?;
            elementwise_ref(&s, &[EpiRef::Tanh], ctx)?
        };
        out.extend_from_slice(&h.data);
    }
    Tensor::from_vec(&[p.seq_len, p.hidden_size], out)
}
