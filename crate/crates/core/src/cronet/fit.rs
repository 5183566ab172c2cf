//! Reverse-fitting of CRONet hyperparameters to published per-layer
//! parameter counts and MAC/memory figures.
//!
//! The search runs stage by stage (layer by layer) and keeps a beam of the
//! best partial configurations. Parameter counts must print identically to
//! the targets; MACs must be within 10% for every size. Memory only enters
//! the ranking score.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{
    AdaptivePoolLayer, BranchConfig, ConvLayer, LinearLayer, MaxPoolLayer, ModelConfig, RnnLayer, Size,
    TrunkConfig,
};
use crate::characterize::{compare, Check, Printed, TargetLayer, Targets, MAC_TOL};
use crate::error::{Error, Result};
use crate::ops::ConvPartition;

const BYTES: f64 = 2.0;
const MEM_WEIGHT: f64 = 0.1;
const MAX_KERNEL: usize = 4;
const MAX_CHANNELS: usize = 64;
const MAX_HIDDEN: usize = 64;
const MAX_SEQ: usize = 16;
const MAX_DEPTH: usize = 4;
const MAX_FEATURES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Partial configurations kept after each stage.
    pub beam: usize,
    /// Complete candidates reported.
    pub max_candidates: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { beam: 64, max_candidates: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCandidate {
    pub config: ModelConfig,
    pub score: f64,
    pub max_mac_err: f64,
    pub total_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sizes: Vec<Size>,
    pub candidates: Vec<FitCandidate>,
    /// Whether the shipped hyperparameters satisfy every fit constraint.
    pub shipped_admissible: bool,
    pub shipped_score: Option<f64>,
    /// Comparison of the best candidate against the targets.
    pub best_checks: Vec<Check>,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn best(&self) -> Option<&FitCandidate> {
        self.candidates.first()
    }
}

/// Score contribution and worst MAC error of one layer.
#[derive(Debug, Clone, Copy, Default)]
struct Err2 {
    score: f64,
    max: f64,
}

impl Err2 {
    fn add(self, o: Err2) -> Err2 {
        Err2 { score: self.score + o.score, max: self.max.max(o.max) }
    }
}

struct LayerTarget {
    params: Printed,
    macs: Vec<Printed>,
    memory: Vec<Printed>,
}

impl LayerTarget {
    fn new(t: &TargetLayer) -> Result<Self> {
        Ok(Self {
            params: Printed::parse(&t.params)?,
            macs: t.macs.iter().map(|s| Printed::parse(s)).collect::<Result<_>>()?,
            memory: t.memory.iter().map(|s| Printed::parse(s)).collect::<Result<_>>()?,
        })
    }

    /// None when any size misses the MAC tolerance.
    fn eval(&self, params: u64, macs: &[u64], out_elems: &[u64]) -> Option<Err2> {
        let mut e = Err2::default();
        for (i, &m) in macs.iter().enumerate() {
            let me = self.macs[i].rel_err(m as f64);
            if me > MAC_TOL {
                return None;
            }
            let mem = (params + out_elems[i]) as f64 * BYTES;
            let we = self.memory[i].rel_err(mem);
            e.score += me * me + MEM_WEIGHT * we * we;
            e.max = e.max.max(me);
        }
        Some(e)
    }
}

#[derive(Debug, Clone)]
struct ConvCand {
    kernel: Vec<usize>,
    padding: Vec<usize>,
    c_out: usize,
    /// Output spatial extents per size.
    out: Vec<Vec<usize>>,
    err: Err2,
}

fn tuples(dims: usize, max: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for d in 0..dims {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..max[d]).map(move |x| {
                    let mut v = v.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    out
}

fn conv_stage(frames: usize, c_in: usize, inputs: &[Vec<usize>], t: &LayerTarget) -> Vec<ConvCand> {
    let dims = inputs[0].len();
    let mut out = Vec::new();
    for k0 in tuples(dims, &vec![MAX_KERNEL; dims]) {
        let kernel: Vec<usize> = k0.iter().map(|k| k + 1).collect();
        let kvol: usize = kernel.iter().product();
        let c_outs: Vec<usize> = (1..=MAX_CHANNELS).filter(|&c| t.params.matches((kvol * c_in * c) as f64)).collect();
        if c_outs.is_empty() {
            continue;
        }
        for padding in tuples(dims, &kernel) {
            let sp: Option<Vec<Vec<usize>>> = inputs
                .iter()
                .map(|inp| {
                    (0..dims)
                        .map(|d| (inp[d] + 2 * padding[d]).checked_sub(kernel[d]).map(|v| v + 1))
                        .collect::<Option<Vec<usize>>>()
                })
                .collect();
            let Some(sp) = sp else { continue };
            for &c in &c_outs {
                let params = (kvol * c_in * c) as u64;
                let elems: Vec<u64> = sp.iter().map(|s| (frames * c * s.iter().product::<usize>()) as u64).collect();
                let macs: Vec<u64> = elems.iter().map(|e| e * (c_in * kvol) as u64).collect();
                if let Some(err) = t.eval(params, &macs, &elems) {
                    out.push(ConvCand { kernel: kernel.clone(), padding: padding.clone(), c_out: c, out: sp.clone(), err });
                }
            }
        }
    }
    out
}

fn cmp_score(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

fn keep_best<T>(mut v: Vec<T>, beam: usize, score: impl Fn(&T) -> f64) -> Vec<T> {
    // stable sort: ties keep enumeration order
    v.sort_by(|a, b| cmp_score(score(a), score(b)));
    v.truncate(beam);
    v
}

fn conv_layer(c: &ConvCand) -> ConvLayer {
    ConvLayer { out_channels: c.c_out, kernel: c.kernel.clone(), padding: c.padding.clone(), partition: ConvPartition::default() }
}

fn linear(out: usize, k: usize) -> LinearLayer {
    LinearLayer { out, k_clusters: 1, k_tiles_per_kernel: k.div_ceil(8), n_splits: 1 }
}

#[derive(Debug, Clone)]
struct TrunkCand {
    depth: usize,
    conv1: ConvCand,
    conv2: ConvCand,
    pool: Vec<usize>,
    k: usize,
    n1: usize,
    err: Err2,
}

#[derive(Debug, Clone)]
struct BranchCand {
    history: usize,
    conv1: ConvCand,
    conv2: ConvCand,
    maxpool: (usize, usize),
    pool: Vec<usize>,
    hidden: usize,
    n1: usize,
    err: Err2,
}

fn min_dims(out: &[Vec<usize>]) -> Vec<usize> {
    (0..out[0].len()).map(|d| out.iter().map(|o| o[d]).min().unwrap_or(0)).collect()
}

/// Dense layer of `k x n` with batch 1, as a stage evaluation.
fn eval_linear(t: &LayerTarget, k: usize, n: usize, sizes: usize) -> Option<Err2> {
    let p = (k * n) as u64;
    if !t.params.matches(p as f64) {
        return None;
    }
    t.eval(p, &vec![p; sizes], &vec![n as u64; sizes])
}

fn trunk_stage(sizes: &[Size], t: &[LayerTarget], beam: usize) -> Vec<TrunkCand> {
    let ns = sizes.len();
    let mut c1s = Vec::new();
    for depth in 1..=MAX_DEPTH {
        let inputs: Vec<Vec<usize>> = sizes.iter().map(|s| vec![depth, s.nely + 1, s.nelx + 1]).collect();
        c1s.extend(conv_stage(1, 1, &inputs, &t[0]).into_iter().map(|c| (depth, c)));
    }
    let c1s = keep_best(c1s, beam, |(_, c)| c.err.score);
    let mut c2s = Vec::new();
    for (depth, c1) in &c1s {
        for c2 in conv_stage(1, c1.c_out, &c1.out, &t[1]) {
            c2s.push((*depth, c1.clone(), c2));
        }
    }
    let c2s = keep_best(c2s, beam, |(_, a, b)| a.err.score + b.err.score);
    let mut out = Vec::new();
    for (depth, c1, c2) in c2s {
        let lim = min_dims(&c2.out);
        for p0 in tuples(3, &lim) {
            let pool: Vec<usize> = p0.iter().map(|x| x + 1).collect();
            let k = c2.c_out * pool.iter().product::<usize>();
            for n1 in 1..=MAX_CHANNELS {
                if let Some(e) = eval_linear(&t[2], k, n1, ns) {
                    let err = c1.err.add(c2.err).add(e);
                    out.push(TrunkCand { depth, conv1: c1.clone(), conv2: c2.clone(), pool: pool.clone(), k, n1, err });
                }
            }
        }
    }
    keep_best(out, beam, |c| c.err.score)
}

fn branch_stage(sizes: &[Size], t: &[LayerTarget], beam: usize) -> Vec<BranchCand> {
    let ns = sizes.len();
    let inputs: Vec<Vec<usize>> = sizes.iter().map(|s| vec![s.nely, s.nelx]).collect();
    // beam per history length; the sequence length only pays off at the RNN
    let mut c2s = Vec::new();
    for history in 1..=MAX_SEQ {
        let c1s = keep_best(conv_stage(history, 1, &inputs, &t[4]), beam, |c| c.err.score);
        let mut hs = Vec::new();
        for c1 in &c1s {
            for c2 in conv_stage(history, c1.c_out, &c1.out, &t[5]) {
                hs.push((history, c1.clone(), c2));
            }
        }
        c2s.extend(keep_best(hs, beam, |(_, a, b)| a.err.score + b.err.score));
    }
    let mut rnns = Vec::new();
    for (history, c1, c2) in c2s {
        for mk in 1..=MAX_KERNEL {
            for ms in 1..=MAX_KERNEL {
                let mp: Option<Vec<Vec<usize>>> = c2
                    .out
                    .iter()
                    .map(|o| o.iter().map(|&d| d.checked_sub(mk).map(|v| v / ms + 1)).collect())
                    .collect();
                let Some(mp) = mp else { continue };
                let lim = min_dims(&mp);
                for p0 in tuples(2, &lim) {
                    let pool: Vec<usize> = p0.iter().map(|x| x + 1).collect();
                    let input = c2.c_out * pool.iter().product::<usize>();
                    for hidden in 1..=MAX_HIDDEN {
                        let params = (hidden * input + hidden * hidden) as u64;
                        if !t[6].params.matches(params as f64) {
                            continue;
                        }
                        let macs = (history * hidden * input + (history - 1) * hidden * hidden) as u64;
                        let elems = (history * hidden) as u64;
                        let Some(e) = t[6].eval(params, &vec![macs; ns], &vec![elems; ns]) else { continue };
                        rnns.push(BranchCand {
                            history,
                            conv1: c1.clone(),
                            conv2: c2.clone(),
                            maxpool: (mk, ms),
                            pool: pool.clone(),
                            hidden,
                            n1: 0,
                            err: c1.err.add(c2.err).add(e),
                        });
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for c in rnns {
        for n1 in 1..=MAX_CHANNELS {
            if let Some(e) = eval_linear(&t[7], c.hidden, n1, ns) {
                out.push(BranchCand { n1, err: c.err.add(e), ..c.clone() });
            }
        }
    }
    keep_best(out, beam, |c| c.err.score)
}

fn assemble(tc: &TrunkCand, bc: &BranchCand, nout: usize) -> ModelConfig {
    ModelConfig {
        name: "cronet".into(),
        version: 1,
        seed: 2024,
        join_width: 1,
        trunk: TrunkConfig {
            input_depth: tc.depth,
            conv1: conv_layer(&tc.conv1),
            conv2: conv_layer(&tc.conv2),
            pool: AdaptivePoolLayer { out: tc.pool.clone(), grid: [1, 1] },
            fc1: linear(tc.n1, tc.k),
            fc2: linear(nout, tc.n1),
        },
        branch: BranchConfig {
            history: bc.history,
            conv1: conv_layer(&bc.conv1),
            conv2: conv_layer(&bc.conv2),
            maxpool: MaxPoolLayer { kernel: bc.maxpool.0, stride: bc.maxpool.1, padding: 0, grid: [1, 1] },
            pool: AdaptivePoolLayer { out: bc.pool.clone(), grid: [1, 1] },
            rnn: RnnLayer { hidden: bc.hidden },
            fc1: linear(bc.n1, bc.hidden),
            fc2: linear(nout, bc.n1),
        },
    }
}

/// Hyperparameters only: partitions, grids, seed and join width cleared.
pub fn hyperparameters(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.seed = 0;
    c.join_width = 1;
    for l in [&mut c.trunk.conv1, &mut c.trunk.conv2, &mut c.branch.conv1, &mut c.branch.conv2] {
        l.partition = ConvPartition::default();
    }
    c.trunk.pool.grid = [1, 1];
    c.branch.pool.grid = [1, 1];
    c.branch.maxpool.grid = [1, 1];
    let k_trunk = c.trunk.conv2.out_channels * c.trunk.pool.out.iter().product::<usize>();
    c.trunk.fc1 = linear(c.trunk.fc1.out, k_trunk);
    c.trunk.fc2 = linear(c.trunk.fc2.out, c.trunk.fc1.out);
    c.branch.fc1 = linear(c.branch.fc1.out, c.branch.rnn.hidden);
    c.branch.fc2 = linear(c.branch.fc2.out, c.branch.fc1.out);
    c
}

/// Score of a fixed configuration under the fit rules; None if it
/// violates a constraint.
pub fn score_config(cfg: &ModelConfig, targets: &Targets) -> Result<Option<f64>> {
    let checks = compare(cfg, targets)?;
    if checks.iter().any(|c| !c.pass) {
        return Ok(None);
    }
    let sizes = targets.sizes()?;
    let t: Vec<LayerTarget> = targets.layer.iter().map(LayerTarget::new).collect::<Result<_>>()?;
    let mut score = 0.0;
    let reports: Vec<_> = sizes
        .iter()
        .map(|&s| crate::characterize::characterize(cfg, s, crate::numerics::ElemType::Bf16))
        .collect::<Result<_>>()?;
    for (li, lt) in t.iter().enumerate() {
        let macs: Vec<u64> = reports.iter().map(|r| r.layers[li].macs).collect();
        let elems: Vec<u64> = reports.iter().map(|r| r.layers[li].activation_bytes / 2).collect();
        match lt.eval(reports[0].layers[li].parameter_count, &macs, &elems) {
            Some(e) => score += e.score,
            None => return Ok(None),
        }
    }
    Ok(Some(score))
}

/// Search hyperparameters matching `targets`. The layer template is fixed:
/// trunk Conv3D, Conv3D, Linear, Linear; branch Conv2D, Conv2D, RNN,
/// Linear, Linear (pooling layers carry no parameters).
pub fn fit_config_to_table(targets: &Targets, opts: &FitOptions) -> Result<FitReport> {
    let kinds: Vec<&str> = targets.layer.iter().map(|l| l.kind.as_str()).collect();
    let template = ["conv3d", "conv3d", "linear", "linear", "conv2d", "conv2d", "rnn", "linear", "linear"];
    if kinds != template {
        return Err(Error::InvalidParams(format!("target layers {kinds:?} do not follow the model template")));
    }
    let sizes = targets.sizes()?;
    let t: Vec<LayerTarget> = targets.layer.iter().map(LayerTarget::new).collect::<Result<_>>()?;
    let total_params = Printed::parse(&targets.total.params)?;
    let beam = opts.beam.max(1);

    let trunks = trunk_stage(&sizes, &t, beam);
    let branches = branch_stage(&sizes, &t, beam);
    if trunks.is_empty() || branches.is_empty() {
        let which = if trunks.is_empty() { "trunk" } else { "branch" };
        return Err(Error::FitFailed(format!("no {which} layers satisfy the parameter and MAC constraints")));
    }
    let ns = sizes.len();
    let mut cands = Vec::new();
    let mut nearest: Option<(f64, String)> = None;
    for tc in &trunks {
        for bc in &branches {
            for nout in 1..=MAX_FEATURES {
                let (Some(et), Some(eb)) = (eval_linear(&t[3], tc.n1, nout, ns), eval_linear(&t[8], bc.n1, nout, ns)) else {
                    continue;
                };
                let cfg = assemble(tc, bc, nout);
                let err = tc.err.add(bc.err).add(et).add(eb);
                let params = sum_params(&cfg);
                if !total_params.matches(params as f64) {
                    let d = (params as f64 - total_params.value).abs();
                    if nearest.as_ref().is_none_or(|(x, _)| d < *x) {
                        nearest = Some((d, format!("{params} parameters")));
                    }
                    continue;
                }
                cands.push(FitCandidate { config: cfg, score: err.score, max_mac_err: err.max, total_params: params });
            }
        }
    }
    if cands.is_empty() {
        let near = nearest.map_or_else(|| "no joinable output width".to_string(), |(_, s)| s);
        return Err(Error::FitFailed(format!("totals never match; nearest candidate has {near}")));
    }
    cands.sort_by(|a, b| cmp_score(a.score, b.score));
    cands.truncate(opts.max_candidates.max(1));

    let best_checks = compare(&cands[0].config, targets)?;
    let shipped = ModelConfig::shipped();
    let shipped_score = score_config(&shipped, targets)?;
    Ok(FitReport { sizes, candidates: cands, shipped_admissible: shipped_score.is_some(), shipped_score, best_checks })
}

fn sum_params(cfg: &ModelConfig) -> u64 {
    super::layer_plan(cfg, Size::SMALL).map(|p| p.iter().map(|l| l.op.params()).sum()).unwrap_or(0)
}
