use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{finalize, split_even, tree_reduce, EpiRef, OpCtx};
use crate::error::{Error, Result};
use crate::tensor::{Region, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvPartition {
    pub frame_splits: usize,
    pub in_channel_splits: usize,
    pub out_channel_splits: usize,
}

impl Default for ConvPartition {
    fn default() -> Self {
        Self { frame_splits: 1, in_channel_splits: 1, out_channel_splits: 1 }
    }
}

/// 2-D or 3-D convolution over a batch of `frames` independent inputs that
/// share weights. Input layout `[frames, c_in, (D,) H, W]`, weights
/// `[c_out, c_in, (kd,) kh, kw]`, bias `[c_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub dims: usize,
    pub frames: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_spatial: Vec<usize>,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub has_bias: bool,
    pub partition: ConvPartition,
}

impl ConvParams {
    /// Stride 1, given padding, no bias, single shard.
    pub fn new(frames: usize, c_in: usize, c_out: usize, in_spatial: &[usize], kernel: &[usize], padding: &[usize]) -> Self {
        Self {
            dims: in_spatial.len(),
            frames,
            c_in,
            c_out,
            in_spatial: in_spatial.to_vec(),
            kernel: kernel.to_vec(),
            stride: vec![1; in_spatial.len()],
            padding: padding.to_vec(),
            has_bias: false,
            partition: ConvPartition::default(),
        }
    }

    pub fn with_partition(mut self, frame_splits: usize, in_channel_splits: usize, out_channel_splits: usize) -> Self {
        self.partition = ConvPartition { frame_splits, in_channel_splits, out_channel_splits };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.dims == 2 || self.dims == 3) {
            return bad(format!("convolution must be 2-D or 3-D, got {}", self.dims));
        }
        for (name, v) in [("in_spatial", &self.in_spatial), ("kernel", &self.kernel), ("stride", &self.stride), ("padding", &self.padding)] {
            if v.len() != self.dims {
                return bad(format!("{name} has {} entries, expected {}", v.len(), self.dims));
            }
        }
        if self.frames == 0 || self.c_in == 0 || self.c_out == 0 {
            return bad("frames and channel counts must be positive".into());
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.in_spatial.contains(&0) {
            return bad("kernel, stride and input extents must be positive".into());
        }
        for d in 0..self.dims {
            if self.in_spatial[d] + 2 * self.padding[d] < self.kernel[d] {
                return bad(format!(
                    "kernel extent {} exceeds padded input {} on axis {d}",
                    self.kernel[d],
                    self.in_spatial[d] + 2 * self.padding[d]
                ));
            }
        }
        let p = &self.partition;
        for (name, s, n) in [
            ("frame_splits", p.frame_splits, self.frames),
            ("in_channel_splits", p.in_channel_splits, self.c_in),
            ("out_channel_splits", p.out_channel_splits, self.c_out),
        ] {
            if s == 0 || s > n {
                return bad(format!("{name} = {s} must be in 1..={n}"));
            }
        }
        Ok(())
    }

    pub fn out_spatial(&self) -> Vec<usize> {
        (0..self.dims)
            .map(|d| (self.in_spatial[d] + 2 * self.padding[d] - self.kernel[d]) / self.stride[d] + 1)
            .collect()
    }

    pub fn in_shape(&self) -> Vec<usize> {
        let mut s = vec![self.frames, self.c_in];
        s.extend(&self.in_spatial);
        s
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.frames, self.c_out];
        s.extend(self.out_spatial());
        s
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.c_out, self.c_in];
        s.extend(&self.kernel);
        s
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn params(&self) -> u64 {
        (self.c_out * self.c_in * self.kernel_volume() + if self.has_bias { self.c_out } else { 0 }) as u64
    }

    pub fn macs(&self) -> u64 {
        let out: usize = self.out_spatial().iter().product();
        (self.frames * self.c_out * out * self.c_in * self.kernel_volume()) as u64
    }

    pub fn frame_ranges(&self) -> Vec<Range<usize>> {
        split_even(self.frames, self.partition.frame_splits)
    }

    pub fn in_channel_ranges(&self) -> Vec<Range<usize>> {
        split_even(self.c_in, self.partition.in_channel_splits)
    }

    pub fn out_channel_ranges(&self) -> Vec<Range<usize>> {
        split_even(self.c_out, self.partition.out_channel_splits)
    }

    /// Compute kernels plus adder-tree kernels.
    pub fn kernel_count(&self) -> usize {
        let p = &self.partition;
        p.frame_splits * (p.in_channel_splits * p.out_channel_splits + p.out_channel_splits * (p.in_channel_splits - 1))
    }

    // normalized 3-D geometry: (in, kernel, pad, stride, out)
    fn geom3(&self) -> [[usize; 3]; 5] {
        let off = 3 - self.dims;
        let mut g = [[1, 1, 1], [1, 1, 1], [0, 0, 0], [1, 1, 1], [1, 1, 1]];
        let out = self.out_spatial();
        for d in 0..self.dims {
            g[0][off + d] = self.in_spatial[d];
            g[1][off + d] = self.kernel[d];
            g[2][off + d] = self.padding[d];
            g[3][off + d] = self.stride[d];
            g[4][off + d] = out[d];
        }
        g
    }
}

/// Raw FP32 accumulators for one shard. `x` holds the shard's input
/// (`[frames, in_ch.len(), spatial]`); `w` is the full weight tensor. Each
/// output accumulates sequentially over input channels, then taps.
/// Out-of-bounds (padding) taps contribute nothing.
pub fn conv_accumulate(x: &Tensor, w: &Tensor, p: &ConvParams, in_ch: Range<usize>, out_ch: Range<usize>) -> Vec<f32> {
    let [inp, ker, pad, st, out] = p.geom3();
    let nf = x.shape[0];
    let nic = in_ch.len();
    let noc = out_ch.len();
    let in_plane = inp[0] * inp[1] * inp[2];
    let out_plane = out[0] * out[1] * out[2];
    let kvol = ker[0] * ker[1] * ker[2];
    let mut acc = vec![0.0f32; nf * noc * out_plane];
    for f in 0..nf {
        for (oi, oc) in out_ch.clone().enumerate() {
            let obase = (f * noc + oi) * out_plane;
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut s = 0.0f32;
                        for (ii, ic) in in_ch.clone().enumerate() {
                            let xbase = (f * nic + ii) * in_plane;
                            let wbase = (oc * p.c_in + ic) * kvol;
                            for kd in 0..ker[0] {
                                let id = (od * st[0] + kd) as isize - pad[0] as isize;
                                if id < 0 || id >= inp[0] as isize {
                                    continue;
                                }
                                for kh in 0..ker[1] {
                                    let ih = (oh * st[1] + kh) as isize - pad[1] as isize;
                                    if ih < 0 || ih >= inp[1] as isize {
                                        continue;
                                    }
                                    let xrow = xbase + (id as usize * inp[1] + ih as usize) * inp[2];
                                    let wrow = wbase + (kd * ker[1] + kh) * ker[2];
                                    for kw in 0..ker[2] {
                                        let iw = (ow * st[2] + kw) as isize - pad[2] as isize;
                                        if iw < 0 || iw >= inp[2] as isize {
                                            continue;
                                        }
                                        s += x.data[xrow + iw as usize] * w.data[wrow + kw];
                                    }
                                }
                            }
                        }
                        acc[obase + (od * out[1] + oh) * out[2] + ow] = s;
                    }
                }
            }
        }
    }
    acc
}

/// Region `[frames, ch, full spatial...]` of a rank-(2 + dims) tensor.
pub(crate) fn fc_region(frames: Range<usize>, ch: Range<usize>, spatial: &[usize]) -> Region {
    let mut r = vec![frames, ch];
    r.extend(spatial.iter().map(|&d| 0..d));
    Region::Box(r)
}

/// Reference convolution following the partition's reduction order.
/// Inputs and weights must already be rounded to the working type.
pub fn conv_ref(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    p: &ConvParams,
    epilogues: &[EpiRef],
    ctx: OpCtx,
) -> Result<Tensor> {
    p.validate()?;
    if x.shape != p.in_shape() {
        return Err(Error::Shape(format!("conv input {:?}, expected {:?}", x.shape, p.in_shape())));
    }
    if w.shape != p.weight_shape() {
        return Err(Error::Shape(format!("conv weights {:?}, expected {:?}", w.shape, p.weight_shape())));
    }
    let out_shape = p.out_shape();
    let mut out = Tensor::zeros(&out_shape);
    let out_sp = p.out_spatial();
    for fr in p.frame_ranges() {
        for oc in p.out_channel_ranges() {
            let parts: Vec<Vec<f32>> = p
                .in_channel_ranges()
                .into_iter()
                .map(|ic| {
                    let xs = x.read(&fc_region(fr.clone(), ic.clone(), &p.in_spatial))?;
                    Ok(conv_accumulate(&xs, w, p, ic, oc.clone()))
                })
                .collect::<Result<_>>()?;
            let mut acc = tree_reduce(&parts);
            let region = fc_region(fr.clone(), oc.clone(), &out_sp);
            finalize(&mut acc, bias, epilogues, &out_shape, &region, ctx)?;
            out.write(&region, &acc)?;
        }
    }
    Ok(out)
}
