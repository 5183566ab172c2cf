use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{split_even, OpCtx};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    AdaptiveAvg,
}

/// Pooling over `[frames, channels, spatial...]`, sharded into a grid of
/// frame groups by channel groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub dims: usize,
    pub frames: usize,
    pub channels: usize,
    pub in_spatial: Vec<usize>,
    pub out_spatial: Vec<usize>,
    /// Max pooling only.
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub frame_splits: usize,
    pub channel_splits: usize,
}

impl PoolParams {
    pub fn maxpool2d(frames: usize, channels: usize, in_hw: [usize; 2], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let mut out = Vec::new();
        for &d in &in_hw {
            if d + 2 * padding < kernel || kernel == 0 || stride == 0 {
                return Err(Error::InvalidParams(format!(
                    "pooling window {kernel} exceeds padded input {}",
                    d + 2 * padding
                )));
            }
            out.push((d + 2 * padding - kernel) / stride + 1);
        }
        Ok(Self {
            kind: PoolKind::Max,
            dims: 2,
            frames,
            channels,
            in_spatial: in_hw.to_vec(),
            out_spatial: out,
            kernel: vec![kernel; 2],
            stride: vec![stride; 2],
            padding: vec![padding; 2],
            frame_splits: 1,
            channel_splits: 1,
        })
    }

    pub fn adaptive(frames: usize, channels: usize, in_spatial: &[usize], out_spatial: &[usize]) -> Result<Self> {
        if in_spatial.len() != out_spatial.len() || !(1..=3).contains(&in_spatial.len()) {
            return Err(Error::InvalidParams("adaptive pooling needs matching 1-3 D extents".into()));
        }
        for (&i, &o) in in_spatial.iter().zip(out_spatial) {
            if o == 0 || o > i {
                return Err(Error::InvalidParams(format!("adaptive pooling output {o} must be in 1..={i}")));
            }
        }
        Ok(Self {
            kind: PoolKind::AdaptiveAvg,
            dims: in_spatial.len(),
            frames,
            channels,
            in_spatial: in_spatial.to_vec(),
            out_spatial: out_spatial.to_vec(),
            kernel: Vec::new(),
            stride: Vec::new(),
            padding: Vec::new(),
            frame_splits: 1,
            channel_splits: 1,
        })
    }

    pub fn with_grid(mut self, frame_splits: usize, channel_splits: usize) -> Self {
        self.frame_splits = frame_splits;
        self.channel_splits = channel_splits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_splits == 0 || self.frame_splits > self.frames || self.channel_splits == 0 || self.channel_splits > self.channels {
            return Err(Error::InvalidParams(format!(
                "pooling grid {}x{} does not fit {} frames x {} channels",
                self.frame_splits, self.channel_splits, self.frames, self.channels
            )));
        }
        Ok(())
    }

    pub fn in_shape(&self) -> Vec<usize> {
        let mut s = vec![self.frames, self.channels];
        s.extend(&self.in_spatial);
        s
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.frames, self.channels];
        s.extend(&self.out_spatial);
        s
    }

    pub fn frame_ranges(&self) -> Vec<Range<usize>> {
        split_even(self.frames, self.frame_splits)
    }

    pub fn channel_ranges(&self) -> Vec<Range<usize>> {
        split_even(self.channels, self.channel_splits)
    }

    pub fn kernel_count(&self) -> usize {
        self.frame_splits * self.channel_splits
    }

    /// Input elements read per inference.
    pub fn elem_ops(&self) -> u64 {
        (self.frames * self.channels * self.in_spatial.iter().product::<usize>()) as u64
    }
}

/// `[floor(i*In/Out), ceil((i+1)*In/Out))`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> Range<usize> {
    (i * input / output)..((i + 1) * input).div_ceil(output)
}

/// Pool one shard: `x` is `[nf, nc, in_spatial]`, result `[nf, nc, out_spatial]`.
pub fn pool_shard(x: &Tensor, p: &PoolParams, ctx: OpCtx) -> Vec<f32> {
    let off = 3 - p.dims;
    let mut inp = [1usize; 3];
    let mut out = [1usize; 3];
    for d in 0..p.dims {
        inp[off + d] = p.in_spatial[d];
        out[off + d] = p.out_spatial[d];
    }
    let planes = x.shape[0] * x.shape[1];
    let in_plane = inp.iter().product::<usize>();
    let out_plane = out.iter().product::<usize>();
    let mut res = Vec::with_capacity(planes * out_plane);
    for pl in 0..planes {
        let xb = &x.data[pl * in_plane..(pl + 1) * in_plane];
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let (wd, wh, ww) = match p.kind {
                        PoolKind::AdaptiveAvg => (
                            adaptive_window(od, inp[0], out[0]),
                            adaptive_window(oh, inp[1], out[1]),
                            adaptive_window(ow, inp[2], out[2]),
                        ),
                        PoolKind::Max => {
                            let win = |o: usize, d: usize| -> Range<usize> {
                                let i = d - off;
                                let s = (o * p.stride[i]) as isize - p.padding[i] as isize;
                                let e = s + p.kernel[i] as isize;
                                s.max(0) as usize..(e.min(inp[d] as isize)) as usize
                            };
                            (if off == 0 { win(od, 0) } else { 0..1 }, win(oh, 1), win(ow, 2))
                        }
                    };
                    let v = match p.kind {
                        PoolKind::Max => {
                            let mut m = f32::NEG_INFINITY;
                            for d in wd.clone() {
                                for h in wh.clone() {
                                    for w in ww.clone() {
                                        m = m.max(xb[(d * inp[1] + h) * inp[2] + w]);
                                    }
                                }
                            }
                            m
                        }
                        PoolKind::AdaptiveAvg => {
                            let mut s = 0.0f32;
                            for d in wd.clone() {
                                for h in wh.clone() {
                                    for w in ww.clone() {
                                        s += xb[(d * inp[1] + h) * inp[2] + w];
                                    }
                                }
                            }
                            s / (wd.len() * wh.len() * ww.len()) as f32
                        }
                    };
                    res.push(ctx.store.apply(v));
                }
            }
        }
    }
    res
}

pub fn maxpool2d_ref(x: &Tensor, p: &PoolParams, ctx: OpCtx) -> Result<Tensor> {
    if p.kind != PoolKind::Max {
        return Err(Error::InvalidParams("expected max pooling parameters".into()));
    }
    pool_ref(x, p, ctx)
}

pub fn adaptive_avgpool_ref(x: &Tensor, p: &PoolParams, ctx: OpCtx) -> Result<Tensor> {
    if p.kind != PoolKind::AdaptiveAvg {
        return Err(Error::InvalidParams("expected adaptive pooling parameters".into()));
    }
    pool_ref(x, p, ctx)
}

fn pool_ref(x: &Tensor, p: &PoolParams, ctx: OpCtx) -> Result<Tensor> {
    if x.shape != p.in_shape() {
        return Err(Error::Shape(format!("pool input {:?}, expected {:?}", x.shape, p.in_shape())));
    }
    Tensor::from_vec(&p.out_shape(), pool_shard(x, p, ctx))
}
