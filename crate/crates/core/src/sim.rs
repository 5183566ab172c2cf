//! Functional executor and analytical performance model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{percent, ArchSpec};
use crate::error::{Error, Result};
use crate::graph::{Epilogue, Graph, KernelId, KernelOp, Net, NetKind, OpKind, TensorClass};
use crate::numerics::{ElemType, QuantParams, Rounding, SiluLut};
use crate::ops::{self, EpiRef, OpCtx};
use crate::place::Placement;
use crate::tensor::Tensor;

/// Per-tensor INT8 ranges, keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tensors: BTreeMap<String, QuantParams>,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub etype: ElemType,
    pub calibration: Option<Calibration>,
    pub lut: SiluLut,
    /// Keep every intermediate tensor in the result.
    pub keep_tensors: bool,
}

impl ExecOptions {
    pub fn new(etype: ElemType) -> Self {
        Self { etype, calibration: None, lut: SiluLut::default(), keep_tensors: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireEvent {
    pub kernel: KernelId,
    pub name: String,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecTrace {
    pub fires: Vec<FireEvent>,
    /// Bytes moved per net per inference, keyed by net name.
    pub net_bytes: BTreeMap<String, u64>,
    pub bytes_by_kind: BTreeMap<String, u64>,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    /// DRAM bytes of tensors that are neither model inputs nor outputs.
    pub intermediate_dram_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ExecResult {
    pub outputs: BTreeMap<String, Tensor>,
    pub tensors: BTreeMap<String, Tensor>,
    pub trace: ExecTrace,
}

fn rounding_for(g: &Graph, t: usize, opts: &ExecOptions) -> Result<Rounding> {
    let decl = &g.tensors[t];
    if decl.class == TensorClass::Accumulator {
        return Ok(Rounding::F32);
    }
    Ok(match opts.etype {
        ElemType::F32 => Rounding::F32,
        ElemType::Bf16 => Rounding::Bf16,
        ElemType::Int8 => {
            let cal = opts.calibration.as_ref().ok_or(Error::UnsupportedElemType {
                etype: ElemType::Int8,
                context: "execution without calibration data".into(),
            })?;
            let q = cal.tensors.get(&decl.name).ok_or_else(|| {
                Error::InvalidParams(format!("no INT8 calibration for tensor `{}`", decl.name))
            })?;
            Rounding::Int8(*q)
        }
    })
}

/// Round every constant to the working element type (INT8: per-constant
/// range).
pub fn round_constants(consts: &BTreeMap<String, Tensor>, etype: ElemType) -> BTreeMap<String, Tensor> {
    consts
        .iter()
        .map(|(k, t)| {
            let r = match etype {
                ElemType::F32 => Rounding::F32,
                ElemType::Bf16 => Rounding::Bf16,
                ElemType::Int8 => Rounding::Int8(QuantParams::calibrate(&t.data)),
            };
            (k.clone(), t.map(|x| r.apply(x)))
        })
        .collect()
}

fn epi_refs<'a>(epis: &[Epilogue], consts: &'a BTreeMap<String, Tensor>) -> Result<Vec<EpiRef<'a>>> {
    epis.iter()
        .map(|e| {
            let get = |n: &str| consts.get(n).ok_or_else(|| Error::InvalidGraph(format!("missing constant `{n}`")));
            Ok(match e {
                Epilogue::Silu => EpiRef::Silu,
                Epilogue::Tanh => EpiRef::Tanh,
                Epilogue::AddConst(n) => EpiRef::Add(get(n)?),
                Epilogue::MulConst(n) => EpiRef::Mul(get(n)?),
            })
        })
        .collect()
}

/// Fire every kernel once in topological order. Operands are rounded to
/// `opts.etype` on store, accumulation is FP32, fused epilogues run in
/// order after the store rounding.
pub fn execute(g: &Graph, inputs: &BTreeMap<String, Tensor>, opts: &ExecOptions) -> Result<ExecResult> {
    let order = g.topo_order().ok_or_else(|| Error::InvalidGraph("kernel graph has a cycle".into()))?;
    let consts = round_constants(&g.constants, opts.etype);
    let mut store: Vec<Option<Tensor>> = vec![None; g.tensors.len()];
    for (name, t) in &g.inputs {
        let x = inputs.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
        let shape = &g.tensors[*t].shape;
        if x.shape.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("input `{name}` has shape {:?}, expected {shape:?}", x.shape)));
        }
        let r = rounding_for(g, *t, opts)?;
        store[*t] = Some(Tensor { shape: shape.clone(), data: x.data.iter().map(|&v| r.apply(v)).collect() });
    }
    let get_const = |n: &str| consts.get(n).ok_or_else(|| Error::InvalidGraph(format!("missing constant `{n}`")));

    for &kid in &order {
        let k = &g.kernels[kid];
        let out_t = k.output.tensor;
        let out_shape = g.tensors[out_t].shape.clone();
        let ctx = OpCtx { store: rounding_for(g, out_t, opts)?, lut: &opts.lut };
        let read = |i: usize| -> Result<Tensor> {
            let a = &k.inputs[i];
            store[a.tensor]
                .as_ref()
                .ok_or_else(|| Error::InvalidGraph(format!("kernel {} reads unwritten tensor", k.name)))?
                .read(&a.region)
        };
        let epis = epi_refs(&k.fused_epilogues, &consts)?;
        let region = &k.output.region;
        let vals: Vec<f32> = match &k.op {
            KernelOp::Conv { params, in_ch, out_ch, weights, bias, partial, .. } => {
                let x = read(0)?;
                let mut acc = ops::conv_accumulate(&x, get_const(weights)?, params, in_ch.clone(), out_ch.clone());
                if !partial {
                    let b = bias.as_deref().map(get_const).transpose()?;
                    ops::finalize(&mut acc, b, &epis, &out_shape, region, ctx)?;
                }
                acc
            }
            KernelOp::Gemm { params, k_range, n_range, weights, bias, cascade_in, partial, .. } => {
                let a = read(0)?;
                let mut acc = if *cascade_in { read(1)?.data } else { vec![0.0; params.m * n_range.len()] };
                ops::gemm_accumulate(&a.data, params.m, get_const(weights)?, k_range.clone(), n_range.clone(), &mut acc);
                if !partial {
                    let b = bias.as_deref().map(get_const).transpose()?;
                    ops::finalize(&mut acc, b, &epis, &out_shape, region, ctx)?;
                }
                acc
            }
            KernelOp::Pool { params, .. } => {
                let x = read(0)?;
                let mut v = ops::pool_shard(&x, params, ctx);
                ops::finalize(&mut v, None, &epis, &out_shape, region, ctx)?;
                v
            }
            KernelOp::Unary(e) => {
                let mut v = read(0)?.data;
                let mut all = epi_refs(std::slice::from_ref(e), &consts)?;
                all.extend(epis.iter().copied());
                ops::finalize(&mut v, None, &all, &out_shape, region, ctx)?;
                v
            }
            KernelOp::Add | KernelOp::Mul => {
                let (a, b) = (read(0)?, read(1)?);
                let mul = matches!(k.op, KernelOp::Mul);
                let mut v: Vec<f32> = a.data.iter().zip(&b.data).map(|(x, y)| if mul { x * y } else { x + y }).collect();
                ops::finalize(&mut v, None, &epis, &out_shape, region, ctx)?;
                v
            }
            KernelOp::Adder { bias, partial } => {
                let (a, b) = (read(0)?, read(1)?);
                let mut v: Vec<f32> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
                if !partial {
                    let b = bias.as_deref().map(get_const).transpose()?;
                    ops::finalize(&mut v, b, &epis, &out_shape, region, ctx)?;
                }
                v
            }
        };
        store[out_t].get_or_insert_with(|| Tensor::zeros(&out_shape)).write(region, &vals)?;
    }

    let mut outputs = BTreeMap::new();
    for (name, t) in &g.outputs {
        let v = store[*t].clone().ok_or_else(|| Error::InvalidGraph(format!("output `{name}` never written")))?;
        outputs.insert(name.clone(), v);
    }
    let tensors = if opts.keep_tensors {
        g.tensors
            .iter()
            .filter_map(|d| store[d.id].clone().map(|t| (d.name.clone(), t)))
            .collect()
    } else {
        BTreeMap::new()
    };
    let trace = build_trace(g, opts.etype, &order);
    Ok(ExecResult { outputs, tensors, trace })
}

fn build_trace(g: &Graph, etype: ElemType, order: &[KernelId]) -> ExecTrace {
    let arch = ArchSpec::default();
    let cm = CostModel::new(etype);
    let sched = schedule(g, &arch, &cm);
    let fires = order
        .iter()
        .map(|&k| FireEvent { kernel: k, name: g.kernels[k].name.clone(), start: sched[k].0, end: sched[k].1 })
        .collect();
    let act = etype.size_bytes();
    let elem = |t: usize| match g.tensors[t].class {
        TensorClass::Accumulator => 4,
        TensorClass::Activation => act,
    };
    let mut net_bytes = BTreeMap::new();
    let mut by_kind: BTreeMap<String, u64> = BTreeMap::new();
    let (mut read, mut write, mut intermediate) = (0, 0, 0);
    for n in &g.nets {
        let shape = &g.tensors[n.tensor].shape;
        let bytes: u64 = if n.kind == NetKind::ExternalIn {
            let mut seen = Vec::new();
            let mut total = 0;
            for c in &n.consumers {
                let r = &g.kernels[c.kernel].inputs[c.port as usize].region;
                if !seen.contains(&r) {
                    seen.push(r);
                    total += r.len(shape) as u64 * elem(n.tensor);
                }
            }
            total
        } else {
            n.producers.iter().map(|p| g.kernels[p.kernel].output.region.len(shape) as u64 * elem(n.tensor)).sum()
        };
        net_bytes.insert(n.name.clone(), bytes);
        *by_kind.entry(n.kind.name().to_string()).or_default() += bytes;
        match n.kind {
            NetKind::ExternalIn if g.is_graph_input(n.tensor) => read += bytes,
            NetKind::ExternalOut if g.is_graph_output(n.tensor) => write += bytes,
            k if k.is_external() => intermediate += bytes,
            _ => {}
        }
    }
    ExecTrace {
        fires,
        net_bytes,
        bytes_by_kind: by_kind,
        dram_read_bytes: read,
        dram_write_bytes: write,
        intermediate_dram_bytes: intermediate,
    }
}

/// Per-tensor INT8 ranges from an FP32 run on `inputs`.
pub fn calibrate(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<Calibration> {
    let mut opts = ExecOptions::new(ElemType::F32);
    opts.keep_tensors = true;
    let r = execute(g, inputs, &opts)?;
    let tensors = r
        .tensors
        .iter()
        .filter(|(name, _)| g.tensor_by_name(name).is_some_and(|d| d.class == TensorClass::Activation))
        .map(|(name, t)| (name.clone(), QuantParams::calibrate(&t.data)))
        .collect();
    Ok(Calibration { tensors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Efficiency {
    pub gemm: f64,
    pub conv: f64,
    pub pooling: f64,
    pub elementwise: f64,
}

impl Default for Efficiency {
    fn default() -> Self {
        Self { gemm: 0.85, conv: 0.6, pooling: 0.4, elementwise: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub etype: ElemType,
    pub efficiency: Efficiency,
    pub stream_bytes_per_cycle: f64,
    pub local_bytes_per_cycle: f64,
    pub cascade_bytes_per_cycle: f64,
    pub memtile_bytes_per_cycle: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::new(ElemType::Bf16)
    }
}

impl CostModel {
    pub fn new(etype: ElemType) -> Self {
        Self {
            etype,
            efficiency: Efficiency::default(),
            stream_bytes_per_cycle: 4.0,
            local_bytes_per_cycle: 32.0,
            cascade_bytes_per_cycle: 64.0,
            memtile_bytes_per_cycle: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.efficiency;
        for (n, v) in [("gemm", e.gemm), ("conv", e.conv), ("pooling", e.pooling), ("elementwise", e.elementwise)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParams(format!("efficiency `{n}` = {v} must be in (0, 1]")));
            }
        }
        for v in [
            self.stream_bytes_per_cycle,
            self.local_bytes_per_cycle,
            self.cascade_bytes_per_cycle,
            self.memtile_bytes_per_cycle,
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParams("transfer rates must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn efficiency_of(&self, kind: OpKind) -> f64 {
        let e = &self.efficiency;
        match kind {
            OpKind::Gemm => e.gemm,
            OpKind::Conv2d | OpKind::Conv3d => e.conv,
            OpKind::Maxpool2d | OpKind::Aap2d | OpKind::Aap3d => e.pooling,
            _ => e.elementwise,
        }
    }

    /// `ceil(ops / macs_per_cycle) / efficiency`, with ops = MACs for
    /// convolutions and GEMMs and elements processed otherwise.
    pub fn compute_cycles_for(&self, kind: OpKind, ops: u64, arch: &ArchSpec) -> f64 {
        let rate = arch.macs_per_cycle.get(&self.etype).copied().unwrap_or(1).max(1) as u64;
        ops.div_ceil(rate) as f64 / self.efficiency_of(kind)
    }

    pub fn compute_cycles(&self, g: &Graph, k: KernelId, arch: &ArchSpec) -> f64 {
        let kern = &g.kernels[k];
        let ops = if kern.macs > 0 { kern.macs } else { kern.elem_ops };
        self.compute_cycles_for(kern.kind(), ops, arch)
    }

    pub fn rate(&self, kind: NetKind) -> Option<f64> {
        match kind {
            NetKind::Stream => Some(self.stream_bytes_per_cycle),
            NetKind::LocalBuffer => Some(self.local_bytes_per_cycle),
            NetKind::Cascade => Some(self.cascade_bytes_per_cycle),
            NetKind::Memtile => Some(self.memtile_bytes_per_cycle),
            // DRAM transfers are overlapped with the previous inference
            NetKind::ExternalIn | NetKind::ExternalOut => None,
        }
    }

    /// `payload_bytes / rate` for one on-chip net; None for DRAM nets.
    pub fn transfer_cycles(&self, n: &Net) -> Option<f64> {
        self.rate(n.kind).map(|r| n.payload_bytes as f64 / r)
    }

    /// Transfer cycles summed over the on-chip nets a kernel reads.
    pub fn inbound_cycles(&self, g: &Graph, k: KernelId) -> f64 {
        g.nets
            .iter()
            .filter(|n| n.consumers.iter().any(|c| c.kernel == k))
            .filter_map(|n| self.transfer_cycles(n))
            .sum()
    }

    pub fn kernel_weight(&self, g: &Graph, k: KernelId, arch: &ArchSpec) -> f64 {
        self.compute_cycles(g, k, arch).max(self.inbound_cycles(g, k))
    }
}

/// Longest-path schedule: `(start, end)` cycles per kernel.
pub fn schedule(g: &Graph, arch: &ArchSpec, cm: &CostModel) -> Vec<(u64, u64)> {
    let order = g.topo_order().unwrap_or_default();
    let mut preds: Vec<Vec<KernelId>> = vec![Vec::new(); g.kernels.len()];
    for (a, b) in g.kernel_edges() {
        preds[b].push(a);
    }
    let mut finish = vec![0.0f64; g.kernels.len()];
    let mut out = vec![(0u64, 0u64); g.kernels.len()];
    for k in order {
        let start = preds[k].iter().map(|&p| finish[p]).fold(0.0, f64::max);
        finish[k] = start + cm.kernel_weight(g, k, arch);
        out[k] = (start.round() as u64, finish[k].round() as u64);
    }
    out
}

/// Longest weighted path through the kernels of one sub-network, ignoring
/// every other kernel.
pub fn network_cycles(g: &Graph, network: &str, arch: &ArchSpec, cm: &CostModel) -> f64 {
    let inside = |k: KernelId| g.subgraphs[g.kernels[k].subgraph].network == network;
    let mut preds: Vec<Vec<KernelId>> = vec![Vec::new(); g.kernels.len()];
    for (a, b) in g.kernel_edges() {
        if inside(a) && inside(b) {
            preds[b].push(a);
        }
    }
    let mut finish = vec![0.0f64; g.kernels.len()];
    for k in g.topo_order().unwrap_or_default() {
        if inside(k) {
            finish[k] = preds[k].iter().map(|&p| finish[p]).fold(0.0, f64::max) + cm.kernel_weight(g, k, arch);
        }
    }
    finish.into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphLatency {
    pub layer: String,
    pub network: String,
    /// Sum of kernel weights.
    pub busy_cycles: f64,
    /// Share of total busy cycles.
    pub share: f64,
    /// Longest path inside the subgraph.
    pub stage_cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub cycles: f64,
    pub seconds: f64,
    pub breakdown: Vec<SubgraphLatency>,
}

impl LatencyReport {
    pub fn dominant(&self) -> Option<&SubgraphLatency> {
        self.breakdown.iter().max_by(|a, b| a.share.total_cmp(&b.share))
    }
}

pub fn estimate_latency(g: &Graph, p: &Placement, arch: &ArchSpec, cm: &CostModel) -> Result<LatencyReport> {
    cm.validate()?;
    if let Some(k) = g.kernels.iter().find(|k| !p.assignment.contains_key(&k.id)) {
        return Err(Error::Placement(format!("kernel {} is not placed", k.name)));
    }
    let order = g.topo_order().ok_or_else(|| Error::InvalidGraph("kernel graph has a cycle".into()))?;
    let weights: Vec<f64> = (0..g.kernels.len()).map(|k| cm.kernel_weight(g, k, arch)).collect();
    let mut preds: Vec<Vec<KernelId>> = vec![Vec::new(); g.kernels.len()];
    for (a, b) in g.kernel_edges() {
        preds[b].push(a);
    }
    let mut finish = vec![0.0f64; g.kernels.len()];
    let mut local = vec![0.0f64; g.kernels.len()];
    for &k in &order {
        let sg = g.kernels[k].subgraph;
        finish[k] = preds[k].iter().map(|&p| finish[p]).fold(0.0, f64::max) + weights[k];
        local[k] = preds[k]
            .iter()
            .filter(|&&p| g.kernels[p].subgraph == sg)
            .map(|&p| local[p])
            .fold(0.0, f64::max)
            + weights[k];
    }
    let cycles = finish.iter().copied().fold(0.0, f64::max);
    let total_busy: f64 = weights.iter().sum();
    let breakdown = g
        .subgraphs
        .iter()
        .map(|s| {
            let busy: f64 = s.kernels.iter().map(|&k| weights[k]).sum();
            SubgraphLatency {
                layer: s.layer_name.clone(),
                network: s.network.clone(),
                busy_cycles: busy,
                share: if total_busy > 0.0 { busy / total_busy } else { 0.0 },
                stage_cycles: s.kernels.iter().map(|&k| local[k]).fold(0.0, f64::max),
            }
        })
        .collect();
    Ok(LatencyReport { cycles, seconds: cycles / arch.clock_hz, breakdown })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerResources {
    pub layer: String,
    pub network: String,
    pub engines: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkResources {
    pub network: String,
    pub engines: usize,
    pub memtiles: usize,
    pub gmio: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub layers: Vec<LayerResources>,
    pub networks: Vec<NetworkResources>,
    pub engines: usize,
    pub memtiles: usize,
    pub gmio: usize,
    pub engine_pct: u32,
    pub memtile_pct: u32,
    pub gmio_pct: u32,
}

impl ResourceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Engines per layer, memory tiles per sub-network domain, GMIO channels
/// per sub-network of the attached kernels.
pub fn resource_report(g: &Graph, _p: &Placement, arch: &ArchSpec) -> ResourceReport {
    let layers: Vec<LayerResources> = g
        .subgraphs
        .iter()
        .map(|s| LayerResources { layer: s.layer_name.clone(), network: s.network.clone(), engines: s.kernels.len() })
        .collect();
    let mut nets: Vec<String> = Vec::new();
    for s in &g.subgraphs {
        if !nets.contains(&s.network) {
            nets.push(s.network.clone());
        }
    }
    let networks: Vec<NetworkResources> = nets
        .iter()
        .map(|n| {
            let engines = layers.iter().filter(|l| &l.network == n).map(|l| l.engines).sum();
            let memtiles = g.memtile_plan.iter().filter(|m| &m.network == n).count();
            let gmio = g
                .external_nets()
                .filter(|net| {
                    let e = net.producers.first().or(net.consumers.first());
                    e.is_some_and(|e| &g.subgraphs[g.kernels[e.kernel].subgraph].network == n)
                })
                .map(|net| net.gmio_channels())
                .sum();
            NetworkResources { network: n.clone(), engines, memtiles, gmio }
        })
        .collect();
    let engines = g.engine_demand();
    let memtiles = g.memtile_plan.len();
    let gmio = g.gmio_channels();
    ResourceReport {
        layers,
        networks,
        engines,
        memtiles,
        gmio,
        engine_pct: percent(engines as u64, arch.engine_count() as u64),
        memtile_pct: percent(memtiles as u64, arch.memtile_total as u64),
        gmio_pct: percent(gmio as u64, arch.gmio_total as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    pub intermediate_dram_bytes: u64,
    pub on_chip_bytes: BTreeMap<String, u64>,
}

pub fn traffic_report(trace: &ExecTrace) -> TrafficReport {
    let on_chip = trace
        .bytes_by_kind
        .iter()
        .filter(|(k, _)| !k.starts_with("external"))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    TrafficReport {
        dram_read_bytes: trace.dram_read_bytes,
        dram_write_bytes: trace.dram_write_bytes,
        intermediate_dram_bytes: trace.intermediate_dram_bytes,
        on_chip_bytes: on_chip,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{build_conv_subgraph, build_gemm_subgraph, conv_ref, gemm_ref, ConvParams, GemmParams};
    use crate::place::place_custom;

    fn ramp(shape: &[usize], seed: u32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn rnd(e: ElemType) -> Rounding {
        if e == ElemType::Bf16 { Rounding::Bf16 } else { Rounding::F32 }
    }

    fn inputs(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn conv_graph_matches_reference() {
        let arch = ArchSpec::default();
        let p = ConvParams::new(2, 3, 4, &[5, 6], &[3, 3], &[1, 1]).with_partition(2, 1, 2);
        let w = ramp(&p.weight_shape(), 7);
        let g = build_conv_subgraph(&p, w.clone(), None, &[Epilogue::Silu], &arch).unwrap();
        let x = ramp(&p.in_shape(), 3);
        let lut = SiluLut::default();
        for etype in [ElemType::F32, ElemType::Bf16] {
            let r = execute(&g, &inputs("X", x.clone()), &ExecOptions::new(etype)).unwrap();
            let ctx = OpCtx { store: rnd(etype), lut: &lut };
            let wr = round_constants(&BTreeMap::from([("W".to_string(), w.clone())]), etype);
            let xr = x.map(|v| rnd(etype).apply(v));
            let want = conv_ref(&xr, &wr["W"], None, &p, &[EpiRef::Silu], ctx).unwrap();
            assert!(r.outputs["Y"].bitwise_eq(&want), "{etype:?}");
        }
    }

    #[test]
    fn gemm_graph_matches_reference() {
        let arch = ArchSpec::default();
        let p = GemmParams::tiled(1, 64, 12, 2, 2).with_n_splits(3);
        let w = ramp(&[64, 12], 11);
        let g = build_gemm_subgraph(&p, w.clone(), None, &[], &arch).unwrap();
        let x = ramp(&[1, 64], 5);
        let r = execute(&g, &inputs("X", x.clone()), &ExecOptions::new(ElemType::F32)).unwrap();
        let lut = SiluLut::default();
        let want = gemm_ref(&x, &w, None, &p, &[], OpCtx { store: Rounding::F32, lut: &lut }).unwrap();
        assert!(r.outputs["Y"].bitwise_eq(&want));
    }

    #[test]
    fn missing_input_is_rejected() {
        let arch = ArchSpec::default();
        let p = GemmParams::new(1, 8, 4);
        let g = build_gemm_subgraph(&p, ramp(&[8, 4], 1), None, &[], &arch).unwrap();
        assert!(execute(&g, &BTreeMap::new(), &ExecOptions::new(ElemType::F32)).is_err());
    }

    #[test]
    fn trace_counts_only_model_io_in_dram() {
        let arch = ArchSpec::default();
        let p = ConvParams::new(1, 2, 2, &[4, 4], &[3, 3], &[1, 1]);
        let g = build_conv_subgraph(&p, ramp(&p.weight_shape(), 2), None, &[], &arch).unwrap();
        let r = execute(&g, &inputs("X", ramp(&p.in_shape(), 1)), &ExecOptions::new(ElemType::F32)).unwrap();
        let t = traffic_report(&r.trace);
        assert_eq!(t.intermediate_dram_bytes, 0);
        assert_eq!(t.dram_read_bytes, 2 * 16 * 4);
        assert_eq!(t.dram_write_bytes, 2 * 16 * 4);
    }

    #[test]
    fn cost_model_validation() {
        let mut cm = CostModel::new(ElemType::Bf16);
        assert!(cm.validate().is_ok());
        cm.efficiency.conv = 0.0;
        assert!(cm.validate().is_err());
        let mut cm = CostModel::new(ElemType::Bf16);
        cm.stream_bytes_per_cycle = -1.0;
        assert!(cm.validate().is_err());
        assert!(cm.rate(NetKind::ExternalIn).is_none());
    }

    #[test]
    fn compute_cycles_round_up_then_scale() {
        let arch = ArchSpec::default();
        let cm = CostModel::new(ElemType::Bf16);
        let rate = arch.macs_per_cycle[&ElemType::Bf16] as u64;
        let c = cm.compute_cycles_for(OpKind::Gemm, rate + 1, &arch);
        assert!((c - 2.0 / 0.85).abs() < 1e-12);
    }

    #[test]
    fn latency_requires_full_placement() {
        let arch = ArchSpec::default();
        let p = GemmParams::new(1, 16, 8);
        let g = build_gemm_subgraph(&p, ramp(&[16, 8], 1), None, &[], &arch).unwrap();
        let mut pl = place_custom(&g, &arch).unwrap();
        let cm = CostModel::new(ElemType::Bf16);
        let full = estimate_latency(&g, &pl, &arch, &cm).unwrap();
        assert!(full.cycles > 0.0);
        let shares: f64 = full.breakdown.iter().map(|b| b.share).sum();
        assert!((shares - 1.0).abs() < 1e-9);
        pl.assignment.clear();
        assert!(estimate_latency(&g, &pl, &arch, &cm).is_err());
    }

    #[test]
    fn parallel_branches_cost_their_max() {
        use crate::graph::GraphBuilder;
        use crate::ops::{conv_layer, elementwise_layer, SimpleOp};
        let arch = ArchSpec::default();
        let p = ConvParams::new(1, 2, 4, &[8, 8], &[3, 3], &[1, 1]).with_partition(1, 1, 2);
        let mut b = GraphBuilder::new("par");
        let x = b.input("X", &p.in_shape());
        b.constant("w", ramp(&p.weight_shape(), 4));
        let mut outs = Vec::new();
        for net in ["a", "b"] {
            b.network = net.into();
            outs.push(conv_layer(&mut b, &format!("{net}.conv"), x, &p, "w", None, &[], &arch).unwrap());
        }
        b.network = "join".into();
        let y = elementwise_layer(&mut b, "join.mul", &outs, &SimpleOp::Mul, 4, &arch).unwrap();
        b.mark_output("Y", y);
        let g = b.finish();
        let cm = CostModel::new(ElemType::Bf16);
        let pl = place_custom(&g, &arch).unwrap();
        let total = estimate_latency(&g, &pl, &arch, &cm).unwrap().cycles;
        let (a, bb, j) = (
            network_cycles(&g, "a", &arch, &cm),
            network_cycles(&g, "b", &arch, &cm),
            network_cycles(&g, "join", &arch, &cm),
        );
        assert_eq!(a, bb);
        assert!((total - (a + j)).abs() < 1e-9, "{total} vs {a} + {j}");
        assert!(total < a + bb + j);
    }
}
