//! Dataflow IR: kernels grouped into layer subgraphs, connected by typed
//! nets.
//!
//! Data semantics live on *logical tensors*: every kernel writes one region
//! of one tensor and reads regions of others. Nets are the physical view of
//! the same information: for each tensor, producers and consumers whose
//! regions overlap are grouped into connected components and each component
//! becomes one net. This keeps the functional executor independent of how
//! nets are later streamed, staged or placed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::numerics::ElemType;
use crate::ops::{ConvParams, GemmParams, PoolKind, PoolParams};
use crate::tensor::{Region, Tensor};

pub type KernelId = usize;
pub type NetId = usize;
pub type TensorId = usize;
pub type SubgraphId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    Conv3d,
    Gemm,
    Maxpool2d,
    Aap2d,
    Aap3d,
    Silu,
    Tanh,
    AddConst,
    MulConst,
    Add,
    Mul,
    Adder,
}

impl OpKind {
    pub fn is_elementwise_unary(self) -> bool {
        matches!(self, OpKind::Silu | OpKind::Tanh | OpKind::AddConst | OpKind::MulConst)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::Gemm => "gemm",
            OpKind::Maxpool2d => "maxpool2d",
            OpKind::Aap2d => "aap2d",
            OpKind::Aap3d => "aap3d",
            OpKind::Silu => "silu",
            OpKind::Tanh => "tanh",
            OpKind::AddConst => "add_const",
            OpKind::MulConst => "mul_const",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Adder => "adder",
        }
    }
}

/// Elementwise operation applied to a kernel's output before it is stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epilogue {
    Silu,
    Tanh,
    /// Add a named constant (same shape as the output tensor, or a vector
    /// broadcast along its last axis).
    AddConst(String),
    MulConst(String),
}

impl Epilogue {
    pub fn kind(&self) -> OpKind {
        match self {
            Epilogue::Silu => OpKind::Silu,
            Epilogue::Tanh => OpKind::Tanh,
            Epilogue::AddConst(_) => OpKind::AddConst,
            Epilogue::MulConst(_) => OpKind::MulConst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelOp {
    /// One shard of a convolution. With `partial` set the kernel emits raw
    /// FP32 partial sums for an adder; otherwise it finalizes the output.
    Conv {
        params: ConvParams,
        frames: Range<usize>,
        in_ch: Range<usize>,
        out_ch: Range<usize>,
        weights: String,
        bias: Option<String>,
        partial: bool,
    },
    /// One engine of a cascade chain. Port 0 is the activation, port 1 (if
    /// `cascade_in`) the accumulator arriving over the cascade.
    Gemm {
        params: GemmParams,
        cluster: usize,
        position: usize,
        k_range: Range<usize>,
        n_range: Range<usize>,
        weights: String,
        bias: Option<String>,
        cascade_in: bool,
        partial: bool,
    },
    Pool {
        params: PoolParams,
        frames: Range<usize>,
        channels: Range<usize>,
    },
    /// A standalone elementwise kernel (what L1 fusion absorbs).
    Unary(Epilogue),
    /// Sum of two activation tensors.
    Add,
    /// Product of two activation tensors.
    Mul,
    /// Node of a binary reduction tree over FP32 partial sums.
    Adder { bias: Option<String>, partial: bool },
}

impl KernelOp {
    pub fn kind(&self) -> OpKind {
        match self {
            KernelOp::Conv { params, .. } => {
                if params.dims == 3 {
                    OpKind::Conv3d
                } else {
                    OpKind::Conv2d
                }
            }
            KernelOp::Gemm { .. } => OpKind::Gemm,
            KernelOp::Pool { params, .. } => match (params.kind, params.dims) {
                (PoolKind::Max, _) => OpKind::Maxpool2d,
                (PoolKind::AdaptiveAvg, 3) => OpKind::Aap3d,
                (PoolKind::AdaptiveAvg, _) => OpKind::Aap2d,
            },
            KernelOp::Unary(e) => e.kind(),
            KernelOp::Add => OpKind::Add,
            KernelOp::Mul => OpKind::Mul,
            KernelOp::Adder { .. } => OpKind::Adder,
        }
    }

    /// Whether the kernel's output is raw FP32 accumulator data.
    pub fn emits_partial(&self) -> bool {
        match self {
            KernelOp::Conv { partial, .. }
            | KernelOp::Gemm { partial, .. }
            | KernelOp::Adder { partial, .. } => *partial,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: TensorId,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub id: KernelId,
    pub name: String,
    pub subgraph: SubgraphId,
    pub op: KernelOp,
    pub inputs: Vec<Access>,
    pub output: Access,
    /// Resident constants (weights, biases) in bytes.
    pub weight_bytes: u64,
    /// Working buffers in bytes, excluding inbound stream buffers.
    pub scratch_bytes: u64,
    pub fused_epilogues: Vec<Epilogue>,
    /// Multiply-accumulates per inference.
    pub macs: u64,
    /// Elements touched by non-MAC work (pooling, elementwise, adders).
    pub elem_ops: u64,
    /// Output firings per inference (row-streamed operators fire per row).
    pub firings: u64,
    /// Local memory reserved for inbound direct-stream buffers (L2).
    #[serde(default)]
    pub stream_buffer_bytes: u64,
}

impl Kernel {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    LocalBuffer,
    Stream,
    Cascade,
    Memtile,
    ExternalIn,
    ExternalOut,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::LocalBuffer => "local_buffer",
            NetKind::Stream => "stream",
            NetKind::Cascade => "cascade",
            NetKind::Memtile => "memtile",
            NetKind::ExternalIn => "external_in",
            NetKind::ExternalOut => "external_out",
        }
    }

    pub fn is_external(self) -> bool {
        matches!(self, NetKind::ExternalIn | NetKind::ExternalOut)
    }
}

/// Why a producer/consumer layout mismatch forces memory-tile staging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReshapeReason {
    /// Consumer needs a zero-padded halo the producer does not emit.
    Padding,
    /// Multi-dimensional activations flattened into a GEMM operand.
    Flatten,
    /// Batched frames split into per-step sequence elements.
    SequenceSplit,
    /// Operand buffered until the other input of a join arrives.
    JoinStaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub kernel: KernelId,
    pub port: u32,
    /// Endpoints of one net with equal slice ids carry identical data.
    pub slice: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub id: NetId,
    pub name: String,
    pub kind: NetKind,
    pub tensor: TensorId,
    pub producers: Vec<Endpoint>,
    pub consumers: Vec<Endpoint>,
    /// Bytes per firing.
    pub payload_bytes: u64,
    /// Memory tiles staging this net (memtile nets after L3).
    pub memtiles: Vec<u32>,
    pub reshape: Option<ReshapeReason>,
}

impl Net {
    pub fn producer_slices(&self) -> usize {
        self.producers.iter().map(|e| e.slice).collect::<BTreeSet<_>>().len()
    }

    pub fn consumer_slices(&self) -> usize {
        self.consumers.iter().map(|e| e.slice).collect::<BTreeSet<_>>().len()
    }

    /// GMIO channels an external net occupies: one per distinct slice.
    pub fn gmio_channels(&self) -> usize {
        match self.kind {
            NetKind::ExternalIn => self.consumer_slices(),
            NetKind::ExternalOut => self.producer_slices(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorClass {
    /// Stored in the graph's element type.
    Activation,
    /// Raw FP32 partial sums.
    Accumulator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Stream,
    Cascade,
    LocalBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub id: TensorId,
    pub name: String,
    pub shape: Vec<usize>,
    pub class: TensorClass,
    /// Physical link used when producer and consumers share a subgraph.
    pub link: Link,
    pub reshape: Option<ReshapeReason>,
}

impl TensorDecl {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub id: SubgraphId,
    pub layer_name: String,
    /// Sub-network this layer belongs to; memory tiles are shared only
    /// within one sub-network's column region.
    pub network: String,
    pub kernels: Vec<KernelId>,
    pub boundary_in: Vec<NetId>,
    pub boundary_out: Vec<NetId>,
}

/// Which fusion passes have run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassState {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub name: String,
    /// Element type used for byte accounting of activations and weights.
    pub storage: ElemType,
    pub tensors: Vec<TensorDecl>,
    pub kernels: Vec<Kernel>,
    pub nets: Vec<Net>,
    pub subgraphs: Vec<Subgraph>,
    pub inputs: Vec<(String, TensorId)>,
    pub outputs: Vec<(String, TensorId)>,
    pub constants: BTreeMap<String, Tensor>,
    pub passes: PassState,
    /// Memory tiles in use and their port/capacity accounting (L3).
    #[serde(default)]
    pub memtile_plan: Vec<MemtileAlloc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemtileAlloc {
    pub id: u32,
    pub network: String,
    pub in_ports: u32,
    pub out_ports: u32,
    pub bytes: u64,
    pub nets: Vec<NetId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: String,
    pub message: String,
}

impl Finding {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }
}

impl Graph {
    pub fn empty(name: &str) -> Self {
        Self {
            name: name.into(),
            storage: ElemType::Bf16,
            tensors: Vec::new(),
            kernels: Vec::new(),
            nets: Vec::new(),
            subgraphs: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            constants: BTreeMap::new(),
            passes: PassState::default(),
            memtile_plan: Vec::new(),
        }
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.len()
    }

    /// Engines required: one kernel per engine, no time sharing.
    pub fn engine_demand(&self) -> usize {
        self.kernels.len()
    }

    pub fn subgraph_by_name(&self, layer: &str) -> Option<&Subgraph> {
        self.subgraphs.iter().find(|s| s.layer_name == layer)
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_graph_input(&self, t: TensorId) -> bool {
        self.inputs.iter().any(|(_, id)| *id == t)
    }

    pub fn is_graph_output(&self, t: TensorId) -> bool {
        self.outputs.iter().any(|(_, id)| *id == t)
    }

    pub fn external_nets(&self) -> impl Iterator<Item = &Net> {
        self.nets.iter().filter(|n| n.kind.is_external())
    }

    pub fn gmio_channels(&self) -> usize {
        self.nets.iter().map(Net::gmio_channels).sum()
    }

    pub fn memtiles_used(&self) -> BTreeSet<u32> {
        self.nets.iter().flat_map(|n| n.memtiles.iter().copied()).collect()
    }

    pub fn elem_bytes(&self, t: TensorId) -> u64 {
        match self.tensors[t].class {
            TensorClass::Accumulator => 4,
            TensorClass::Activation => self.storage.size_bytes(),
        }
    }

    /// Kernel-level dependency edges (producer -> consumer), deduplicated.
    pub fn kernel_edges(&self) -> BTreeSet<(KernelId, KernelId)> {
        let mut edges = BTreeSet::new();
        for net in &self.nets {
            for p in &net.producers {
                for c in &net.consumers {
                    edges.insert((p.kernel, c.kernel));
                }
            }
        }
        edges
    }

    /// Deterministic topological order (Kahn, smallest id first), or `None`
    /// if the kernel graph has a cycle.
    pub fn topo_order(&self) -> Option<Vec<KernelId>> {
        let n = self.kernels.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<KernelId>> = vec![Vec::new(); n];
        for (a, b) in self.kernel_edges() {
            if a >= n || b >= n {
                continue;
            }
            succ[a].push(b);
            indeg[b] += 1;
        }
        let mut ready: BTreeSet<KernelId> = (0..n).filter(|&k| indeg[k] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(k) = ready.pop_first() {
            order.push(k);
            for &s in &succ[k] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Subgraph-level order derived from the kernel order.
    pub fn subgraph_order(&self) -> Vec<SubgraphId> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        if let Some(order) = self.topo_order() {
            for k in order {
                let s = self.kernels[k].subgraph;
                if seen.insert(s) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn validate(&self, arch: &ArchSpec) -> ValidationReport {
        validate_graph(self, arch)
    }

    /// Recompute nets, slices, payloads and subgraph boundaries from the
    /// kernels' tensor accesses. Net kinds are taken from tensor links and
    /// subgraph membership; inter-subgraph nets start as (unassigned)
    /// memory-tile staging.
    pub fn rebuild_nets(&mut self) {
        self.nets = derive_nets(self);
        self.refresh_boundaries();
    }

    pub fn refresh_boundaries(&mut self) {
        for sg in &mut self.subgraphs {
            sg.boundary_in.clear();
            sg.boundary_out.clear();
        }
        for net in &self.nets {
            let prod: BTreeSet<SubgraphId> =
                net.producers.iter().map(|e| self.kernels[e.kernel].subgraph).collect();
            let cons: BTreeSet<SubgraphId> =
                net.consumers.iter().map(|e| self.kernels[e.kernel].subgraph).collect();
            for &s in &cons {
                if net.kind == NetKind::ExternalIn || prod.iter().any(|&p| p != s) {
                    self.subgraphs[s].boundary_in.push(net.id);
                }
            }
            for &s in &prod {
                if net.kind == NetKind::ExternalOut || cons.iter().any(|&c| c != s) {
                    self.subgraphs[s].boundary_out.push(net.id);
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph is serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Remove kernels flagged in `dead`, renumbering kernel ids and
    /// dropping tensors nobody references. Nets are rebuilt.
    pub(crate) fn remove_kernels(&mut self, dead: &BTreeSet<KernelId>) {
        let mut remap = vec![usize::MAX; self.kernels.len()];
        let mut kept = Vec::with_capacity(self.kernels.len() - dead.len());
        for k in std::mem::take(&mut self.kernels) {
            if dead.contains(&k.id) {
                continue;
            }
            remap[k.id] = kept.len();
            kept.push(k);
        }
        for (i, k) in kept.iter_mut().enumerate() {
            k.id = i;
        }
        self.kernels = kept;
        for sg in &mut self.subgraphs {
            sg.kernels = sg
                .kernels
                .iter()
                .filter(|&&k| remap[k] != usize::MAX)
                .map(|&k| remap[k])
                .collect();
        }
        self.compact_tensors();
        self.rebuild_nets();
    }

    fn compact_tensors(&mut self) {
        let mut used = BTreeSet::new();
        for k in &self.kernels {
            used.insert(k.output.tensor);
            for a in &k.inputs {
                used.insert(a.tensor);
            }
        }
        for (_, t) in self.inputs.iter().chain(&self.outputs) {
            used.insert(*t);
        }
        let mut remap = vec![usize::MAX; self.tensors.len()];
        let mut kept = Vec::new();
        for t in std::mem::take(&mut self.tensors) {
            if used.contains(&t.id) {
                remap[t.id] = kept.len();
                kept.push(t);
            }
        }
        for (i, t) in kept.iter_mut().enumerate() {
            t.id = i;
        }
        self.tensors = kept;
        for k in &mut self.kernels {
            k.output.tensor = remap[k.output.tensor];
            for a in &mut k.inputs {
                a.tensor = remap[a.tensor];
            }
        }
        for (_, t) in self.inputs.iter_mut().chain(self.outputs.iter_mut()) {
            *t = remap[*t];
        }
    }
}

/// Firing count for a kernel writing `region` of a tensor with `shape`:
/// row-streamed tensors (rank >= 3, layout [frames, channels, .., W]) fire
/// once per row of every frame and depth plane.
pub fn row_firings(region: &Region, shape: &[usize]) -> u64 {
    match region {
        Region::Box(rs) if shape.len() >= 3 => rs
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != 1 && *d != shape.len() - 1)
            .map(|(_, r)| r.len() as u64)
            .product::<u64>()
            .max(1),
        _ => 1,
    }
}

fn derive_nets(g: &Graph) -> Vec<Net> {
    // (tensor) -> producer/consumer endpoints with their regions
    let mut writers: Vec<Vec<(Endpoint, Region)>> = vec![Vec::new(); g.tensors.len()];
    let mut readers: Vec<Vec<(Endpoint, Region, u64)>> = vec![Vec::new(); g.tensors.len()];
    for k in &g.kernels {
        writers[k.output.tensor].push((
            Endpoint { kernel: k.id, port: 0, slice: 0 },
            k.output.region.clone(),
        ));
        for (port, a) in k.inputs.iter().enumerate() {
            readers[a.tensor].push((
                Endpoint { kernel: k.id, port: port as u32, slice: 0 },
                a.region.clone(),
                k.firings,
            ));
        }
    }

    let mut nets = Vec::new();
    for t in &g.tensors {
        let w = &writers[t.id];
        let r = &readers[t.id];
        let nw = w.len();
        let total = nw + r.len();
        if total == 0 {
            continue;
        }
        // union-find over endpoints: writers first, then readers
        let mut parent: Vec<usize> = (0..total).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (i, (_, wr)) in w.iter().enumerate() {
            for (j, (_, rr, _)) in r.iter().enumerate() {
                if wr.overlaps(rr, &t.shape) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, nw + j));
                    if a != b {
                        parent[b] = a;
                    }
                }
            }
        }
        // readers of a graph input share a net when their regions overlap
        if nw == 0 {
            for i in 0..r.len() {
                for j in i + 1..r.len() {
                    if r[i].1.overlaps(&r[j].1, &t.shape) {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        if a != b {
                            parent[b] = a;
                        }
                    }
                }
            }
        }
        // group by root, ordered by first member
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut root_order: Vec<usize> = Vec::new();
        for i in 0..total {
            let root = find(&mut parent, i);
            if !groups.contains_key(&root) {
                root_order.push(root);
            }
            groups.entry(root).or_default().push(i);
        }
        let is_in = g.is_graph_input(t.id);
        let is_out = g.is_graph_output(t.id);
        let bytes = g.elem_bytes(t.id);
        for (gi, root) in root_order.iter().enumerate() {
            let members = &groups[root];
            let mut producers = Vec::new();
            let mut consumers = Vec::new();
            let mut prod_regions: Vec<Region> = Vec::new();
            let mut cons_regions: Vec<Region> = Vec::new();
            let mut payload = 0u64;
            for &m in members {
                if m < nw {
                    let (mut ep, reg) = w[m].clone();
                    let k = &g.kernels[ep.kernel];
                    let len = reg.len(&t.shape) as u64;
                    payload = payload.max(len * bytes / k.firings.max(1));
                    ep.slice = slice_id(&mut prod_regions, &reg);
                    producers.push(ep);
                } else {
                    let (mut ep, reg, firings) = r[m - nw].clone();
                    if is_in {
                        let len = reg.len(&t.shape) as u64;
                        payload = payload.max(len * bytes / firings.max(1));
                    }
                    ep.slice = slice_id(&mut cons_regions, &reg);
                    consumers.push(ep);
                }
            }
            let kind = if is_in {
                NetKind::ExternalIn
            } else if is_out {
                NetKind::ExternalOut
            } else {
                let subgraphs: BTreeSet<SubgraphId> = producers
                    .iter()
                    .chain(&consumers)
                    .map(|e| g.kernels[e.kernel].subgraph)
                    .collect();
                if subgraphs.len() > 1 {
                    NetKind::Memtile
                } else {
                    match t.link {
                        Link::Stream => NetKind::Stream,
                        Link::Cascade => NetKind::Cascade,
                        Link::LocalBuffer => NetKind::LocalBuffer,
                    }
                }
            };
            let name = if root_order.len() == 1 {
                t.name.clone()
            } else {
                format!("{}#{gi}", t.name)
            };
            nets.push(Net {
                id: nets.len(),
                name,
                kind,
                tensor: t.id,
                producers,
                consumers,
                payload_bytes: payload.max(1),
                memtiles: Vec::new(),
                reshape: if kind == NetKind::Memtile { t.reshape } else { None },
            });
        }
    }
    nets
}

fn slice_id(seen: &mut Vec<Region>, r: &Region) -> u32 {
    if let Some(i) = seen.iter().position(|x| x == r) {
        return i as u32;
    }
    seen.push(r.clone());
    (seen.len() - 1) as u32
}

pub fn validate_graph(g: &Graph, arch: &ArchSpec) -> ValidationReport {
    let mut findings = Vec::new();

    for k in &g.kernels {
        let need = k.weight_bytes + k.scratch_bytes + k.stream_buffer_bytes;
        if need > arch.aie_local_mem {
            findings.push(Finding::new(
                "local_memory_overflow",
                format!(
                    "kernel {} needs {need} bytes (weights {} + scratch {} + stream buffers {}) > {}",
                    k.name, k.weight_bytes, k.scratch_bytes, k.stream_buffer_bytes, arch.aie_local_mem
                ),
            ));
        }
        if k.fused_epilogues.iter().any(|e| !e.kind().is_elementwise_unary()) {
            findings.push(Finding::new("bad_epilogue", format!("kernel {}", k.name)));
        }
        if k.subgraph >= g.subgraphs.len() {
            findings.push(Finding::new("dangling_subgraph", format!("kernel {}", k.name)));
        }
        for a in k.inputs.iter().chain(std::iter::once(&k.output)) {
            if a.tensor >= g.tensors.len() {
                findings.push(Finding::new("dangling_tensor", format!("kernel {}", k.name)));
            }
        }
    }

    // every kernel port on exactly one net
    let mut port_uses: BTreeMap<(KernelId, bool, u32), usize> = BTreeMap::new();
    for net in &g.nets {
        for p in &net.producers {
            *port_uses.entry((p.kernel, true, p.port)).or_default() += 1;
        }
        for c in &net.consumers {
            *port_uses.entry((c.kernel, false, c.port)).or_default() += 1;
        }
    }
    for k in &g.kernels {
        let mut ports = vec![(true, 0u32)];
        ports.extend((0..k.inputs.len() as u32).map(|p| (false, p)));
        for (out, port) in ports {
            let uses = port_uses.get(&(k.id, out, port)).copied().unwrap_or(0);
            if uses != 1 {
                findings.push(Finding::new(
                    "port_connectivity",
                    format!(
                        "kernel {} {} port {port} is on {uses} nets",
                        k.name,
                        if out { "output" } else { "input" }
                    ),
                ));
            }
        }
    }

    for net in &g.nets {
        let bad = |msg: &str| Finding::new("net_invariant", format!("net {}: {msg}", net.name));
        if net.payload_bytes == 0 {
            findings.push(bad("zero payload"));
        }
        match net.kind {
            NetKind::Cascade => {
                if net.consumers.len() != 1 || net.producers.len() != 1 {
                    findings.push(bad("cascade nets need exactly one producer and one consumer"));
                }
            }
            NetKind::ExternalIn => {
                if !net.producers.is_empty() {
                    findings.push(bad("external input has a producer kernel"));
                }
            }
            NetKind::ExternalOut => {
                if !net.consumers.is_empty() {
                    findings.push(bad("external output has a consumer kernel"));
                }
            }
            _ => {
                if net.producers.is_empty() || net.consumers.is_empty() {
                    findings.push(bad("internal net without producer or consumer"));
                }
                if !net.memtiles.is_empty() && net.kind != NetKind::Memtile {
                    findings.push(bad("memory tile assigned to a non-memtile net"));
                }
            }
        }
    }

    for sg in &g.subgraphs {
        if sg.kernels.is_empty() {
            findings.push(Finding::new("empty_subgraph", format!("subgraph {}", sg.layer_name)));
        }
        for &n in sg.boundary_in.iter().chain(&sg.boundary_out) {
            let Some(net) = g.nets.get(n) else {
                findings.push(Finding::new("dangling_net", format!("subgraph {}", sg.layer_name)));
                continue;
            };
            let inside = net
                .producers
                .iter()
                .chain(&net.consumers)
                .all(|e| g.kernels.get(e.kernel).map(|k| k.subgraph) == Some(sg.id));
            if inside && !net.kind.is_external() {
                findings.push(Finding::new(
                    "boundary_net_internal",
                    format!("net {} does not cross subgraph {}", net.name, sg.layer_name),
                ));
            }
        }
    }

    if g.topo_order().is_none() {
        findings.push(Finding::new("not_a_dag", "kernel connectivity contains a cycle"));
    }

    ValidationReport { findings }
}

/// Incremental graph construction used by the operator builders.
#[derive(Debug)]
pub struct GraphBuilder {
    pub graph: Graph,
    /// Current sub-network label for new subgraphs.
    pub network: String,
    /// Emit activations as separate kernels instead of fused epilogues.
    pub unfused_activations: bool,
}

impl GraphBuilder {
    pub fn new(name: &str) -> Self {
        Self { graph: Graph::empty(name), network: "main".into(), unfused_activations: false }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], class: TensorClass, link: Link) -> TensorId {
        let id = self.graph.tensors.len();
        self.graph.tensors.push(TensorDecl {
            id,
            name: name.into(),
            shape: shape.to_vec(),
            class,
            link,
            reshape: None,
        });
        id
    }

    pub fn activation(&mut self, name: &str, shape: &[usize]) -> TensorId {
        self.tensor(name, shape, TensorClass::Activation, Link::Stream)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> TensorId {
        let t = self.activation(name, shape);
        self.graph.inputs.push((name.into(), t));
        t
    }

    pub fn mark_output(&mut self, name: &str, t: TensorId) {
        self.graph.outputs.push((name.into(), t));
    }

    pub fn mark_reshape(&mut self, t: TensorId, reason: ReshapeReason) {
        self.graph.tensors[t].reshape = Some(reason);
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> String {
        self.graph.constants.insert(name.into(), value);
        name.into()
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.graph.tensors[t].shape
    }

    pub fn begin_subgraph(&mut self, layer_name: &str) -> SubgraphId {
        let id = self.graph.subgraphs.len();
        self.graph.subgraphs.push(Subgraph {
            id,
            layer_name: layer_name.into(),
            network: self.network.clone(),
            kernels: Vec::new(),
            boundary_in: Vec::new(),
            boundary_out: Vec::new(),
        });
        id
    }

    pub fn current_subgraph(&self) -> SubgraphId {
        self.graph.subgraphs.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn kernel(
        &mut self,
        name: String,
        op: KernelOp,
        inputs: Vec<Access>,
        output: Access,
        weight_bytes: u64,
        scratch_bytes: u64,
        macs: u64,
        elem_ops: u64,
    ) -> KernelId {
        let id = self.graph.kernels.len();
        let shape = &self.graph.tensors[output.tensor].shape;
        let firings = match op {
            KernelOp::Gemm { .. } => 1,
            _ => row_firings(&output.region, shape),
        };
        let sg = self.current_subgraph();
        self.graph.kernels.push(Kernel {
            id,
            name,
            subgraph: sg,
            op,
            inputs,
            output,
            weight_bytes,
            scratch_bytes,
            fused_epilogues: Vec::new(),
            macs,
            elem_ops,
            firings,
            stream_buffer_bytes: 0,
        });
        self.graph.subgraphs[sg].kernels.push(id);
        id
    }

    /// Attach `epilogues` to the kernels producing `t`: as fused epilogues,
    /// or (in unfused mode) as one standalone kernel per producer writing a
    /// fresh tensor, which is returned.
    pub fn finish_activations(&mut self, producers: &[KernelId], t: TensorId, epilogues: &[Epilogue]) -> TensorId {
        if epilogues.is_empty() {
            return t;
        }
        if !self.unfused_activations {
            for &k in producers {
                self.graph.kernels[k].fused_epilogues.extend_from_slice(epilogues);
            }
            return t;
        }
        let shape = self.graph.tensors[t].shape.clone();
        let base = self.graph.tensors[t].name.clone();
        let mut cur = t;
        for (i, e) in epilogues.iter().enumerate() {
            let next = self.tensor(
                &format!("{base}.{}{i}", e.kind().name()),
                &shape,
                TensorClass::Activation,
                Link::LocalBuffer,
            );
            // the pre-activation hop is a neighbour-shared buffer
            self.graph.tensors[cur].link = Link::LocalBuffer;
            for &k in producers {
                let region = self.graph.kernels[k].output.region.clone();
                let elems = region.len(&shape) as u64;
                let bytes = self.graph.storage.size_bytes();
                let pname = self.graph.kernels[k].name.clone();
                self.kernel(
                    format!("{pname}.{}", e.kind().name()),
                    KernelOp::Unary(e.clone()),
                    vec![Access { tensor: cur, region: region.clone() }],
                    Access { tensor: next, region },
                    0,
                    2 * elems.min(1024) * bytes,
                    0,
                    elems,
                );
            }
            cur = next;
        }
        // producers of the final tensor are the last unary kernels; callers
        // that need them can look them up through the tensor.
        self.graph.tensors[cur].link = Link::Stream;
        cur
    }

    pub fn producers_of(&self, t: TensorId) -> Vec<KernelId> {
        self.graph.kernels.iter().filter(|k| k.output.tensor == t).map(|k| k.id).collect()
    }

    pub fn finish(mut self) -> Graph {
        // activations emitted as epilogues are already in L1 form
        self.graph.passes.l1 = !self.unfused_activations;
        self.graph.rebuild_nets();
        self.graph
    }
}

/// Shorthand: full-tensor access.
pub fn full(t: TensorId, shape: &[usize]) -> Access {
    Access { tensor: t, region: Region::full(shape) }
}

/// Breadth-first reachability used by tests and the placer.
pub fn reachable(g: &Graph, from: KernelId) -> BTreeSet<KernelId> {
    let edges = g.kernel_edges();
    let mut succ: BTreeMap<KernelId, Vec<KernelId>> = BTreeMap::new();
    for (a, b) in edges {
        succ.entry(a).or_default().push(b);
    }
    let mut seen = BTreeSet::from([from]);
    let mut q = VecDeque::from([from]);
    while let Some(k) = q.pop_front() {
        for &s in succ.get(&k).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(s) {
                q.push_back(s);
            }
        }
    }
    seen
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{build_conv_subgraph, build_simple_subgraph, ConvParams, SimpleOp};
    use crate::tensor::Tensor;

    fn conv_graph(arch: &ArchSpec) -> Graph {
        let p = ConvParams::new(1, 2, 4, &[5, 5], &[3, 3], &[1, 1]).with_partition(1, 1, 2);
        build_conv_subgraph(&p, Tensor::filled(&p.weight_shape(), 0.1), None, &[Epilogue::Silu], arch).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let arch = ArchSpec::default();
        let g = conv_graph(&arch);
        let back = Graph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json(), g.to_json());
    }

    #[test]
    fn readers_of_a_model_input_share_one_net() {
        let arch = ArchSpec::default();
        let g = conv_graph(&arch);
        assert!(g.validate(&arch).is_clean());
        let ext_in: Vec<&Net> = g.nets.iter().filter(|n| n.kind == NetKind::ExternalIn).collect();
        assert_eq!(ext_in.len(), 1);
        assert_eq!(ext_in[0].consumers.len(), 2);
        assert_eq!(g.gmio_channels(), ext_in[0].gmio_channels() + g.nets.iter().filter(|n| n.kind == NetKind::ExternalOut).map(|n| n.gmio_channels()).sum::<usize>());
    }

    #[test]
    fn topo_order_covers_every_kernel() {
        let arch = ArchSpec::default();
        let g = conv_graph(&arch);
        let order = g.topo_order().unwrap();
        assert_eq!(order.len(), g.kernel_count());
        let pos: BTreeMap<KernelId, usize> = order.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        for (a, b) in g.kernel_edges() {
            assert!(pos[&a] < pos[&b]);
        }
    }

    #[test]
    fn validation_flags_memory_overflow() {
        let arch = ArchSpec::default();
        let mut g = build_simple_subgraph(&SimpleOp::Add, &[2, 8], 2, &arch).unwrap();
        assert!(g.validate(&arch).is_clean());
        g.kernels[0].weight_bytes = arch.aie_local_mem + 1;
        assert!(g.validate(&arch).has("local_memory_overflow"));
    }

    #[test]
    fn validation_flags_dangling_subgraph() {
        let arch = ArchSpec::default();
        let mut g = conv_graph(&arch);
        g.kernels[0].subgraph = 99;
        assert!(g.validate(&arch).has("dangling_subgraph"));
    }

    #[test]
    fn row_firings_count_frames_and_rows() {
        let r = Region::Box(vec![0..2, 0..4, 0..3, 0..7]);
        assert_eq!(row_firings(&r, &[2, 4, 3, 7]), 6);
        assert_eq!(row_firings(&Region::Flat(0..10), &[10]), 1);
    }
}
