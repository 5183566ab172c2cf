use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{finalize, split_even, tree_reduce, EpiRef, OpCtx};
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::tensor::{Region, Tensor};

/// Base MMUL tile (M x K x N).
pub const TILE_M: usize = 8;
pub const TILE_K: usize = 8;
pub const TILE_N: usize = 4;

/// `out[M,N] = A[M,K] . W[K,N]`, with K split into `k_clusters` cascade
/// chains of `cascade_len` engines (each owning `k_tiles_per_kernel` K-tiles)
/// and N split into `n_splits` independent column groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmParams {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub k_clusters: usize,
    pub cascade_len: usize,
    #[serde(default = "one")]
    pub k_tiles_per_kernel: usize,
    #[serde(default = "one")]
    pub n_splits: usize,
    #[serde(default)]
    pub has_bias: bool,
}

fn one() -> usize {
    1
}

impl GemmParams {
    /// One cascade chain with one K-tile per engine.
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        Self::tiled(m, k, n, 1, 1)
    }

    pub fn with_clusters(m: usize, k: usize, n: usize, k_clusters: usize) -> Self {
        Self::tiled(m, k, n, k_clusters, 1)
    }

    /// Chain length derived from the cluster count and tiles per engine.
    pub fn tiled(m: usize, k: usize, n: usize, k_clusters: usize, k_tiles_per_kernel: usize) -> Self {
        let t = k.div_ceil(TILE_K);
        let per = (k_clusters * k_tiles_per_kernel).max(1);
        Self {
            m,
            k,
            n,
            k_clusters,
            cascade_len: t.div_ceil(per).max(1),
            k_tiles_per_kernel,
            n_splits: 1,
            has_bias: false,
        }
    }

    pub fn with_n_splits(mut self, n_splits: usize) -> Self {
        self.n_splits = n_splits;
        self
    }

    pub fn k_tiles(&self) -> usize {
        self.k.div_ceil(TILE_K)
    }

    /// Base-tile multiplies for the whole product.
    pub fn tile_multiplies(&self) -> usize {
        self.m.div_ceil(TILE_M) * self.k.div_ceil(TILE_K) * self.n.div_ceil(TILE_N)
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return bad(format!("GEMM dimensions must be positive, got {}x{}x{}", self.m, self.k, self.n));
        }
        if self.k_clusters == 0 || self.cascade_len == 0 || self.k_tiles_per_kernel == 0 {
            return bad("k_clusters, cascade_len and k_tiles_per_kernel must be positive".into());
        }
        if self.n_splits == 0 || self.n_splits > self.n {
            return bad(format!("n_splits = {} must be in 1..={}", self.n_splits, self.n));
        }
        let t = self.k_tiles();
        let engines = self.k_clusters * self.cascade_len;
        if engines * self.k_tiles_per_kernel < t {
            return bad(format!(
                "{} clusters x {} engines x {} tiles do not cover {t} K-tiles",
                self.k_clusters, self.cascade_len, self.k_tiles_per_kernel
            ));
        }
        if (engines - 1) * self.k_tiles_per_kernel >= t {
            return bad(format!("partition leaves idle engines ({engines} engines for {t} K-tiles)"));
        }
        let limit = arch.cascade_max_length as usize;
        if self.cascade_len > limit {
            let min_clusters = t.div_ceil(self.k_tiles_per_kernel * limit);
            return Err(Error::CascadeTooLong {
                k: self.k,
                required: self.cascade_len,
                limit,
                min_clusters,
            });
        }
        Ok(())
    }

    pub fn kernel_count(&self) -> usize {
        self.n_splits * (self.k_clusters * self.cascade_len + self.k_clusters - 1)
    }

    /// K range owned by engine `pos` of chain `cluster` (may be empty only
    /// for invalid parameters).
    pub fn kernel_k_range(&self, cluster: usize, pos: usize) -> Range<usize> {
        let t = self.k_tiles();
        let t0 = ((cluster * self.cascade_len + pos) * self.k_tiles_per_kernel).min(t);
        let t1 = (t0 + self.k_tiles_per_kernel).min(t);
        (t0 * TILE_K).min(self.k)..(t1 * TILE_K).min(self.k)
    }

    pub fn cluster_k_range(&self, cluster: usize) -> Range<usize> {
        let a = self.kernel_k_range(cluster, 0);
        let b = self.kernel_k_range(cluster, self.cascade_len - 1);
        a.start..b.end
    }

    pub fn n_ranges(&self) -> Vec<Range<usize>> {
        split_even(self.n, self.n_splits)
    }

    pub fn macs(&self) -> u64 {
        (self.m * self.k * self.n) as u64
    }

    pub fn params(&self) -> u64 {
        (self.k * self.n + if self.has_bias { self.n } else { 0 }) as u64
    }
}

/// Accumulate `a[M, k_range] . w[k_range, n_range]` into `acc[M, n_range]`
/// in ascending k order. `a` holds only the `k_range` columns.
pub fn gemm_accumulate(a: &[f32], m: usize, w: &Tensor, k_range: Range<usize>, n_range: Range<usize>, acc: &mut [f32]) {
    let n_full = w.shape[1];
    let kr = k_range.len();
    let nr = n_range.len();
    for i in 0..m {
        let row = &mut acc[i * nr..(i + 1) * nr];
        for (kk, k) in k_range.clone().enumerate() {
            let av = a[i * kr + kk];
            let wrow = &w.data[k * n_full + n_range.start..k * n_full + n_range.end];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += av * wv;
            }
        }
    }
}

/// Reference GEMM following the cascade / adder-tree reduction order.
/// `a` is `[M, K]` (any shape with M*K elements for M = 1).
pub fn gemm_ref(
    a: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    p: &GemmParams,
    epilogues: &[EpiRef],
    ctx: OpCtx,
) -> Result<Tensor> {
    if a.len() != p.m * p.k {
        return Err(Error::Shape(format!("GEMM input has {} elements, expected {}x{}", a.len(), p.m, p.k)));
    }
    if w.shape != [p.k, p.n] {
        return Err(Error::Shape(format!("GEMM weights {:?}, expected [{}, {}]", w.shape, p.k, p.n)));
    }
    let out_shape = [p.m, p.n];
    let mut out = Tensor::zeros(&out_shape);
    for nr in p.n_ranges() {
        let parts: Vec<Vec<f32>> = (0..p.k_clusters)
            .map(|c| {
                let mut acc = vec![0.0f32; p.m * nr.len()];
                for pos in 0..p.cascade_len {
                    let kr = p.kernel_k_range(c, pos);
                    let cols = slice_cols(&a.data, p.m, p.k, kr.clone());
                    gemm_accumulate(&cols, p.m, w, kr, nr.clone(), &mut acc);
                }
                acc
            })
            .collect();
        let mut acc = tree_reduce(&parts);
        let region = Region::Box(vec![0..p.m, nr.clone()]);
        finalize(&mut acc, bias, epilogues, &out_shape, &region, ctx)?;
        out.write(&region, &acc)?;
    }
    Ok(out)
}

pub(crate) fn slice_cols(a: &[f32], m: usize, k: usize, kr: Range<usize>) -> Vec<f32> {
    let mut out = Vec::with_capacity(m * kr.len());
    for i in 0..m {
        out.extend_from_slice(&a[i * k + kr.start..i * k + kr.end]);
    }
    out
}
