//! Operator parameters, golden reference implementations and subgraph
//! builders.
//!
//! Reference operators and graph kernels share the same accumulation
//! helpers: a kernel shard accumulates sequentially over its slice of the
//! reduction, shards are combined by a balanced binary adder tree, and the
//! result is finalized (bias, store rounding, epilogues) once. A reference
//! call given the same partition parameters therefore reproduces the
//! partitioned graph bit for bit.

mod build;
mod conv;
mod gemm;
mod pool;
mod rnn;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{tanh_approx, Rounding, SiluLut};
use crate::tensor::{strides, Region, Tensor};

pub use build::{
    build_conv_subgraph, build_gemm_subgraph, build_simple_subgraph, conv_layer, elementwise_layer,
    gemm_layer, pool_layer, rnn_layer, GemmInput, RnnConsts, SimpleOp,
};
pub use conv::{conv_accumulate, conv_ref, ConvParams, ConvPartition};
pub use gemm::{gemm_accumulate, gemm_ref, GemmParams, TILE_K, TILE_M, TILE_N};
pub use pool::{adaptive_avgpool_ref, adaptive_window, maxpool2d_ref, pool_shard, PoolKind, PoolParams};
pub use rnn::{rnn_ref, RnnParams, RnnWeights};

/// Numeric context for one stored tensor.
#[derive(Debug, Clone, Copy)]
pub struct OpCtx<'a> {
    pub store: Rounding,
    pub lut: &'a SiluLut,
}

/// An epilogue with its constant operand resolved.
#[derive(Debug, Clone, Copy)]
pub enum EpiRef<'a> {
    Silu,
    Tanh,
    Add(&'a Tensor),
    Mul(&'a Tensor),
}

/// Split `n` items into `parts` contiguous ranges whose sizes differ by at
/// most one (larger ranges first).
pub fn split_even(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Elementwise sum of partial-sum buffers over a balanced binary tree: the
/// first `ceil(n/2)` leaves form the left subtree.
pub fn tree_reduce(parts: &[Vec<f32>]) -> Vec<f32> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let mid = n.div_ceil(2);
            let l = tree_reduce(&parts[..mid]);
            let r = tree_reduce(&parts[mid..]);
            l.iter().zip(&r).map(|(a, b)| a + b).collect()
        }
    }
}

/// Expand a constant to the elements of `region` of a tensor shaped
/// `out_shape`. Constants either match the output shape, are scalars, or
/// are vectors broadcast along the channel axis (rank >= 3) or the last
/// axis (rank < 3).
pub fn broadcast_const(c: &Tensor, out_shape: &[usize], region: &Region) -> Result<Vec<f32>> {
    if c.shape == out_shape {
        return Ok(c.read(region)?.data);
    }
    let n = region.len(out_shape);
    if c.len() == 1 {
        return Ok(vec![c.data[0]; n]);
    }
    let axis = if out_shape.len() >= 3 { 1 } else { out_shape.len().saturating_sub(1) };
    if c.rank() != 1 || out_shape.get(axis) != Some(&c.len()) {
        return Err(Error::Shape(format!(
            "constant of shape {:?} does not broadcast to {out_shape:?}",
            c.shape
        )));
    }
    let st = strides(out_shape);
    let dim = out_shape[axis];
    let mut out = Vec::with_capacity(n);
    for run in region.flat_runs(out_shape) {
        for off in run {
            out.push(c.data[(off / st[axis]) % dim]);
        }
    }
    Ok(out)
}

/// Turn raw accumulators for `region` into stored values: add the bias in
/// FP32, round to the store type, then apply each epilogue followed by
/// another rounding. INT8 ranges describe the final value only, so INT8
/// rounds once, after the last epilogue.
pub fn finalize(
    acc: &mut [f32],
    bias: Option<&Tensor>,
    epilogues: &[EpiRef],
    out_shape: &[usize],
    region: &Region,
    ctx: OpCtx,
) -> Result<()> {
    if let Some(b) = bias {
        let b = broadcast_const(b, out_shape, region)?;
        for (v, b) in acc.iter_mut().zip(b) {
            *v += b;
        }
    }
    let n = epilogues.len();
    let step = |i: usize| match ctx.store {
        Rounding::Int8(_) if i < n => Rounding::F32,
        r => r,
    };
    step(0).apply_slice(acc);
    for (i, e) in epilogues.iter().enumerate() {
        let r = step(i + 1);
        match e {
            EpiRef::Silu => {
                for v in acc.iter_mut() {
                    *v = r.apply(ctx.lut.silu(*v));
                }
            }
            EpiRef::Tanh => {
                for v in acc.iter_mut() {
                    *v = r.apply(tanh_approx(*v));
                }
            }
            EpiRef::Add(c) | EpiRef::Mul(c) => {
                let c = broadcast_const(c, out_shape, region)?;
                let add = matches!(e, EpiRef::Add(_));
                for (v, c) in acc.iter_mut().zip(c) {
                    *v = r.apply(if add { *v + c } else { *v * c });
                }
            }
        }
    }
    Ok(())
}

/// Apply epilogues to a whole tensor (used by reference elementwise ops).
pub fn elementwise_ref(x: &Tensor, epilogues: &[EpiRef], ctx: OpCtx) -> Result<Tensor> {
    let mut out = x.clone();
    let region = Region::full(&x.shape);
    let shape = x.shape.clone();
    // stored inputs are already rounded; only epilogues round here
    apply_epilogues(&mut out.data, epilogues, &shape, &region, ctx)?;
    Ok(out)
}

pub(crate) fn apply_epilogues(
    vals: &mut [f32],
    epilogues: &[EpiRef],
    out_shape: &[usize],
    region: &Region,
    ctx: OpCtx,
) -> Result<()> {
    finalize(vals, None, epilogues, out_shape, region, ctx)
}

/// Elementwise binary sum or product, rounded to the store type.
pub fn binary_ref(a: &Tensor, b: &Tensor, mul: bool, ctx: OpCtx) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ctx.store.apply(if mul { x * y } else { x + y }))
        .collect();
    Tensor::from_vec(&a.shape, data)
}
