//! CRONet: a TrunkNet (Conv3D stack over the load configuration) and a
//! BranchNet (Conv2D stack plus RNN over the material history) joined by an
//! elementwise product.

pub mod fit;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::graph::{Epilogue, Graph, GraphBuilder, ReshapeReason};
use crate::numerics::{ElemType, Rounding, SiluLut};
use crate::ops::{
    self, ConvParams, ConvPartition, EpiRef, GemmInput, GemmParams, OpCtx, PoolParams, RnnConsts, RnnParams,
    RnnWeights, SimpleOp,
};
use crate::sim::{round_constants, Calibration};
use crate::tensor::Tensor;

pub const CONFIG_V1: &str = include_str!("../../assets/cronet/v1/cronet.toml");
pub const TABLE_V1: &str = include_str!("../../assets/cronet/v1/table2.toml");

/// Material-distribution size `nelx x nely`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Size {
    pub nelx: usize,
    pub nely: usize,
}

impl Size {
    pub const SMALL: Size = Size { nelx: 30, nely: 10 };
    pub const MEDIUM: Size = Size { nelx: 30, nely: 20 };
    pub const LARGE: Size = Size { nelx: 60, nely: 20 };
    pub const ALL: [Size; 3] = [Size::SMALL, Size::MEDIUM, Size::LARGE];
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.nelx, self.nely)
    }
}

impl FromStr for Size {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("size `{s}` must look like 30x20"));
        let (a, b) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
        let nelx: usize = a.trim().parse().map_err(|_| bad())?;
        let nely: usize = b.trim().parse().map_err(|_| bad())?;
        if nelx < 2 || nely < 2 {
            return Err(Error::InvalidParams(format!("size {s} is too small")));
        }
        Ok(Size { nelx, nely })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub padding: Vec<usize>,
    #[serde(default)]
    pub partition: ConvPartition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptivePoolLayer {
    pub out: Vec<usize>,
    /// Kernel grid: frame groups x channel groups.
    #[serde(default = "unit_grid")]
    pub grid: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxPoolLayer {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "unit_grid")]
    pub grid: [usize; 2],
}

fn unit_grid() -> [usize; 2] {
    [1, 1]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearLayer {
    pub out: usize,
    #[serde(default = "one")]
    pub k_clusters: usize,
    pub k_tiles_per_kernel: usize,
    #[serde(default = "one")]
    pub n_splits: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnLayer {
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkConfig {
    /// Depth of the load-configuration volume (one plane per load component).
    pub input_depth: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub pool: AdaptivePoolLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    /// Number of past material distributions fed to the RNN.
    pub history: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub maxpool: MaxPoolLayer,
    pub pool: AdaptivePoolLayer,
    pub rnn: RnnLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub version: u32,
    /// Default seed for synthetic weights and inputs.
    pub seed: u64,
    pub join_width: usize,
    pub trunk: TrunkConfig,
    pub branch: BranchConfig,
}

impl ModelConfig {
    /// The shipped configuration.
    pub fn shipped() -> Self {
        Self::from_toml(CONFIG_V1).expect("shipped config parses")
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(doc).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Shape checks for every size the model is used at.
    pub fn validate(&self) -> Result<()> {
        for s in Size::ALL {
            layer_plan(self, s)?;
        }
        Ok(())
    }
}

/// Resolves a `--model` argument: `cronet` (or empty) for the shipped
/// config, otherwise a TOML file path.
pub fn resolve_model(arg: &str) -> Result<ModelConfig> {
    if arg.is_empty() || arg == "cronet" {
        Ok(ModelConfig::shipped())
    } else {
        ModelConfig::load(std::path::Path::new(arg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Conv(ConvParams),
    MaxPool(PoolParams),
    AdaptivePool(PoolParams),
    Linear(GemmParams),
    Rnn(RnnParams),
    Mul { width: usize },
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Conv(p) if p.dims == 3 => "conv3d",
            LayerOp::Conv(_) => "conv2d",
            LayerOp::MaxPool(_) => "maxpool2d",
            LayerOp::AdaptivePool(p) if p.dims == 3 => "aap3d",
            LayerOp::AdaptivePool(_) => "aap2d",
            LayerOp::Linear(_) => "linear",
            LayerOp::Rnn(_) => "rnn",
            LayerOp::Mul { .. } => "mul",
        }
    }

    pub fn params(&self) -> u64 {
        match self {
            LayerOp::Conv(p) => p.params(),
            LayerOp::Linear(p) => p.params(),
            LayerOp::Rnn(p) => p.params(),
            _ => 0,
        }
    }

    pub fn macs(&self) -> u64 {
        match self {
            LayerOp::Conv(p) => p.macs(),
            LayerOp::Linear(p) => p.macs(),
            LayerOp::Rnn(p) => p.macs(),
            _ => 0,
        }
    }

    pub fn kernel_count(&self) -> usize {
        match self {
            LayerOp::Conv(p) => p.kernel_count(),
            LayerOp::MaxPool(p) | LayerOp::AdaptivePool(p) => p.kernel_count(),
            LayerOp::Linear(p) => p.kernel_count(),
            LayerOp::Rnn(p) => p.kernel_count(),
            LayerOp::Mul { width } => *width,
        }
    }
}

/// One layer of the model at a given size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub network: String,
    pub name: String,
    pub op: LayerOp,
    pub silu: bool,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

pub fn x_shape(cfg: &ModelConfig, s: Size) -> Vec<usize> {
    vec![cfg.branch.history, 1, s.nely, s.nelx]
}

pub fn f_shape(cfg: &ModelConfig, s: Size) -> Vec<usize> {
    vec![1, 1, cfg.trunk.input_depth, s.nely + 1, s.nelx + 1]
}

fn conv_params(frames: usize, c_in: usize, spatial: &[usize], l: &ConvLayer) -> Result<ConvParams> {
    let pt = l.partition;
    let p = ConvParams::new(frames, c_in, l.out_channels, spatial, &l.kernel, &l.padding).with_partition(
        pt.frame_splits,
        pt.in_channel_splits,
        pt.out_channel_splits,
    );
    p.validate()?;
    Ok(p)
}

fn linear_params(k: usize, l: &LinearLayer) -> GemmParams {
    GemmParams::tiled(1, k, l.out, l.k_clusters, l.k_tiles_per_kernel).with_n_splits(l.n_splits)
}

/// The layer sequence at size `s`: trunk, branch, join.
pub fn layer_plan(cfg: &ModelConfig, s: Size) -> Result<Vec<LayerPlan>> {
    let mut out = Vec::new();
    let mut push = |network: &str, name: &str, op: LayerOp, silu: bool, in_shape: Vec<usize>, out_shape: Vec<usize>| {
        out.push(LayerPlan {
            network: network.into(),
            name: format!("{network}.{name}"),
            op,
            silu,
            in_shape,
            out_shape,
        });
    };

    let t = &cfg.trunk;
    let f = f_shape(cfg, s);
    let c1 = conv_params(1, 1, &f[2..], &t.conv1)?;
    push("trunk", "conv1", LayerOp::Conv(c1.clone()), true, f.clone(), c1.out_shape());
    let c2 = conv_params(1, t.conv1.out_channels, &c1.out_spatial(), &t.conv2)?;
    push("trunk", "conv2", LayerOp::Conv(c2.clone()), true, c1.out_shape(), c2.out_shape());
    let ap = PoolParams::adaptive(1, c2.c_out, &c2.out_spatial(), &t.pool.out)?.with_grid(t.pool.grid[0], t.pool.grid[1]);
    ap.validate()?;
    push("trunk", "aap3d", LayerOp::AdaptivePool(ap.clone()), false, c2.out_shape(), ap.out_shape());
    let k: usize = ap.out_shape().iter().product();
    let l1 = linear_params(k, &t.fc1);
    push("trunk", "fc1", LayerOp::Linear(l1.clone()), true, ap.out_shape(), vec![1, l1.n]);
    let l2 = linear_params(l1.n, &t.fc2);
    push("trunk", "fc2", LayerOp::Linear(l2.clone()), false, vec![1, l1.n], vec![1, l2.n]);

    let b = &cfg.branch;
    let x = x_shape(cfg, s);
    let c1 = conv_params(b.history, 1, &x[2..], &b.conv1)?;
    push("branch", "conv1", LayerOp::Conv(c1.clone()), true, x.clone(), c1.out_shape());
    let c2 = conv_params(b.history, c1.c_out, &c1.out_spatial(), &b.conv2)?;
    push("branch", "conv2", LayerOp::Conv(c2.clone()), true, c1.out_shape(), c2.out_shape());
    let sp = c2.out_spatial();
    let mp = PoolParams::maxpool2d(b.history, c2.c_out, [sp[0], sp[1]], b.maxpool.kernel, b.maxpool.stride, b.maxpool.padding)?
        .with_grid(b.maxpool.grid[0], b.maxpool.grid[1]);
    mp.validate()?;
    push("branch", "maxpool", LayerOp::MaxPool(mp.clone()), false, c2.out_shape(), mp.out_shape());
    let ap = PoolParams::adaptive(b.history, c2.c_out, &mp.out_spatial, &b.pool.out)?.with_grid(b.pool.grid[0], b.pool.grid[1]);
    ap.validate()?;
    push("branch", "aap2d", LayerOp::AdaptivePool(ap.clone()), false, mp.out_shape(), ap.out_shape());
    let input_size: usize = ap.out_shape()[1..].iter().product();
    let rp = RnnParams {
        input_size,
        hidden_size: b.rnn.hidden,
        seq_len: b.history,
        has_bias: false,
        zero_initial_state: true,
    };
    rp.validate()?;
    push("branch", "rnn", LayerOp::Rnn(rp.clone()), false, ap.out_shape(), vec![1, rp.hidden_size]);
    let l1 = linear_params(rp.hidden_size, &b.fc1);
    push("branch", "fc1", LayerOp::Linear(l1.clone()), true, vec![1, rp.hidden_size], vec![1, l1.n]);
    let l2 = linear_params(l1.n, &b.fc2);
    push("branch", "fc2", LayerOp::Linear(l2.clone()), false, vec![1, l1.n], vec![1, l2.n]);

    let (tn, bn) = (t.fc2.out, b.fc2.out);
    if tn != bn {
        return Err(Error::Shape(format!("trunk output {tn} and branch output {bn} differ")));
    }
    if cfg.join_width == 0 || cfg.join_width > tn {
        return Err(Error::InvalidParams(format!("join width {} must be in 1..={tn}", cfg.join_width)));
    }
    push("join", "mul", LayerOp::Mul { width: cfg.join_width }, false, vec![1, tn], vec![1, tn]);
    Ok(out)
}

/// Deterministic synthetic weights, uniform in `+-sqrt(6 / fan_in)` for
/// SiLU layers and `+-1/sqrt(fan_in)` otherwise. Conv weights are
/// `[c_out, c_in, k..]`, linear and RNN weights `[K, N]`.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BTreeMap::new();
    let mut draw = |shape: &[usize], fan_in: usize, silu: bool| {
        let bound = if silu { (6.0 / fan_in as f64).sqrt() } else { 1.0 / (fan_in as f64).sqrt() } as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    };
    for l in layer_plan(cfg, Size::SMALL)? {
        match &l.op {
            LayerOp::Conv(p) => {
                let fan = p.c_in * p.kernel_volume();
                w.insert(format!("{}.w", l.name), draw(&p.weight_shape(), fan, l.silu));
            }
            LayerOp::Linear(p) => {
                w.insert(format!("{}.w", l.name), draw(&[p.k, p.n], p.k, l.silu));
            }
            LayerOp::Rnn(p) => {
                let h = p.hidden_size;
                w.insert(format!("{}.w_ih", l.name), draw(&[p.input_size, h], h, false));
                w.insert(format!("{}.w_hh", l.name), draw(&[h, h], h, false));
            }
            _ => {}
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOptions {
    pub seed: u64,
    /// Emit activations as separate kernels (pre-L1 form).
    pub unfused_activations: bool,
}

/// Build the shipped model at `size` with its default seed.
pub fn build_cronet(size: Size, arch: &ArchSpec) -> Result<Graph> {
    let cfg = ModelConfig::shipped();
    let opts = BuildOptions { seed: cfg.seed, unfused_activations: false };
    build_with(&cfg, size, arch, &opts)
}

fn check_capacity(plan: &[LayerPlan], arch: &ArchSpec) -> Result<()> {
    let demand: usize = plan.iter().map(|l| l.op.kernel_count()).sum();
    let avail = arch.engine_count() as usize;
    if demand > avail {
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for l in plan {
            *per.entry(&l.network).or_default() += l.op.kernel_count();
        }
        let detail: Vec<String> = per.iter().map(|(k, v)| format!("{k} {v}")).collect();
        let cols = demand.div_ceil(arch.rows.max(1) as usize);
        return Err(Error::Infeasible(format!(
            "graph needs {demand} engines ({}), the {}x{} array has {avail}; minimal array with {} rows: {cols} columns",
            detail.join(", "),
            arch.columns,
            arch.rows,
            arch.rows
        )));
    }
    Ok(())
}

pub fn build_with(cfg: &ModelConfig, size: Size, arch: &ArchSpec, opts: &BuildOptions) -> Result<Graph> {
    let plan = layer_plan(cfg, size)?;
    check_capacity(&plan, arch)?;
    let weights = init_weights(cfg, opts.seed)?;
    let mut b = GraphBuilder::new(&format!("{}-{size}", cfg.name));
    b.unfused_activations = opts.unfused_activations;
    for (k, v) in weights {
        b.constant(&k, v);
    }
    let f = b.input("F", &f_shape(cfg, size));
    let x = b.input("X", &x_shape(cfg, size));
    let mut heads = BTreeMap::from([("trunk", f), ("branch", x)]);
    let mut outs = BTreeMap::new();
    for l in &plan {
        b.network = l.network.clone();
        let epi: Vec<Epilogue> = if l.silu { vec![Epilogue::Silu] } else { Vec::new() };
        let wname = format!("{}.w", l.name);
        let t = match &l.op {
            LayerOp::Mul { width } => {
                let ins = [outs["trunk"], outs["branch"]];
                ops::elementwise_layer(&mut b, &l.name, &ins, &SimpleOp::Mul, *width, arch)?
            }
            op => {
                let input = heads[l.network.as_str()];
                match op {
                    LayerOp::Conv(p) => ops::conv_layer(&mut b, &l.name, input, p, &wname, None, &epi, arch)?,
                    LayerOp::MaxPool(p) | LayerOp::AdaptivePool(p) => ops::pool_layer(&mut b, &l.name, input, p, arch)?,
                    LayerOp::Linear(p) => {
                        ops::gemm_layer(&mut b, &l.name, GemmInput::whole(input), p, &wname, None, &epi, arch)?
                    }
                    LayerOp::Rnn(p) => {
                        let (ih, hh) = (format!("{}.w_ih", l.name), format!("{}.w_hh", l.name));
                        let c = RnnConsts { w_ih: &ih, w_hh: &hh, b_ih: None, b_hh: None };
                        ops::rnn_layer(&mut b, &l.name, input, p, &c, arch)?
                    }
                    LayerOp::Mul { .. } => unreachable!(),
                }
            }
        };
        if l.network != "join" {
            heads.insert(if l.network == "trunk" { "trunk" } else { "branch" }, t);
            outs.insert(if l.network == "trunk" { "trunk" } else { "branch" }, t);
        } else {
            b.mark_output("U", t);
        }
    }
    b.mark_reshape(outs["branch"], ReshapeReason::JoinStaging);
    Ok(b.finish())
}

/// Inputs for one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialCase {
    pub size: Size,
    /// Material history `[history, 1, nely, nelx]`, densities in `[0, 1]`.
    pub x: Tensor,
    /// Nodal loads `[1, 1, depth, nely + 1, nelx + 1]`.
    pub f: Tensor,
    pub u_shape: Vec<usize>,
}

impl MaterialCase {
    /// A random density history that anneals toward a random target, and a
    /// few point loads.
    pub fn generate(cfg: &ModelConfig, size: Size, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let xs = x_shape(cfg, size);
        let plane = size.nelx * size.nely;
        let target: Vec<f32> = (0..plane).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut data = Vec::with_capacity(xs.iter().product());
        for t in 0..cfg.branch.history {
            let a = (t + 1) as f32 / cfg.branch.history as f32;
            for &v in &target {
                let noise: f32 = rng.gen_range(-0.05..0.05);
                data.push(((1.0 - a) * 0.5 + a * v + noise).clamp(0.0, 1.0));
            }
        }
        let x = Tensor { shape: xs, data };
        let fs = f_shape(cfg, size);
        let mut f = Tensor::zeros(&fs);
        let nodes = (size.nelx + 1) * (size.nely + 1);
        for _ in 0..3 {
            let comp = rng.gen_range(0..cfg.trunk.input_depth);
            let node = rng.gen_range(0..nodes);
            f.data[comp * nodes + node] = rng.gen_range(-1.0..1.0);
        }
        MaterialCase { size, x, f, u_shape: vec![1, cfg.trunk.fc2.out] }
    }

    pub fn inputs(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("X".to_string(), self.x.clone()), ("F".to_string(), self.f.clone())])
    }
}

/// Name of the graph tensor holding a layer's final output.
fn output_tensor_name(l: &LayerPlan) -> String {
    match &l.op {
        LayerOp::Rnn(p) if p.seq_len > 1 || !p.zero_initial_state => format!("{}.t{}.h", l.name, p.seq_len - 1),
        LayerOp::Rnn(_) => format!("{}.t0.ih.out", l.name),
        _ => format!("{}.out", l.name),
    }
}

/// Plain layer-by-layer forward pass built from the reference operators.
/// INT8 rounds each layer output with the calibration of the matching
/// graph tensor (RNN internals use the final hidden state's range).
pub fn reference_forward(
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor>,
    case: &MaterialCase,
    etype: ElemType,
    calibration: Option<&Calibration>,
) -> Result<Tensor> {
    let plan = layer_plan(cfg, case.size)?;
    if case.x.shape != x_shape(cfg, case.size) || case.f.shape != f_shape(cfg, case.size) {
        return Err(Error::Shape(format!(
            "inputs {:?} / {:?} do not match size {}",
            case.x.shape, case.f.shape, case.size
        )));
    }
    let lut = SiluLut::default();
    let rounding = |name: &str| -> Result<Rounding> {
        Ok(match etype {
            ElemType::F32 => Rounding::F32,
            ElemType::Bf16 => Rounding::Bf16,
            ElemType::Int8 => {
                let cal = calibration.ok_or(Error::UnsupportedElemType {
                    etype,
                    context: "reference forward without calibration data".into(),
                })?;
                Rounding::Int8(
                    *cal.tensors
                        .get(name)
                        .ok_or_else(|| Error::InvalidParams(format!("no INT8 calibration for `{name}`")))?,
                )
            }
        })
    };
    let w = round_constants(weights, etype);
    let get = |n: String| w.get(&n).ok_or_else(|| Error::InvalidGraph(format!("missing weight `{n}`")));
    let rx = rounding("X")?;
    let rf = rounding("F")?;
    let mut cur: BTreeMap<&str, Tensor> = BTreeMap::from([
        ("trunk", case.f.map(|v| rf.apply(v))),
        ("branch", case.x.map(|v| rx.apply(v))),
    ]);
    for l in &plan {
        let ctx = OpCtx { store: rounding(&output_tensor_name(l))?, lut: &lut };
        let epi: Vec<EpiRef> = if l.silu { vec![EpiRef::Silu] } else { Vec::new() };
        let y = match &l.op {
            LayerOp::Mul { .. } => {
                return ops::binary_ref(&cur["trunk"], &cur["branch"], true, ctx);
            }
            op => {
                let x = &cur[l.network.as_str()];
                match op {
                    LayerOp::Conv(p) => ops::conv_ref(x, get(format!("{}.w", l.name))?, None, p, &epi, ctx)?,
                    LayerOp::MaxPool(p) => ops::maxpool2d_ref(x, p, ctx)?,
                    LayerOp::AdaptivePool(p) => ops::adaptive_avgpool_ref(x, p, ctx)?,
                    LayerOp::Linear(p) => ops::gemm_ref(x, get(format!("{}.w", l.name))?, None, p, &epi, ctx)?,
                    LayerOp::Rnn(p) => {
                        let wt = RnnWeights {
                            w_ih: get(format!("{}.w_ih", l.name))?.clone(),
                            w_hh: get(format!("{}.w_hh", l.name))?.clone(),
                            b_ih: None,
                            b_hh: None,
                        };
                        let hs = ops::rnn_ref(x, p, &wt, None, ctx)?;
                        let h = p.hidden_size;
                        Tensor::from_vec(&[1, h], hs.data[(p.seq_len - 1) * h..].to_vec())?
                    }
                    LayerOp::Mul { .. } => unreachable!(),
                }
            }
        };
        let key = if l.network == "trunk" { "trunk" } else { "branch" };
        cur.insert(key, y);
    }
    Err(Error::InvalidGraph("model has no join layer".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!("30x20".parse::<Size>().unwrap(), Size::MEDIUM);
        assert_eq!("60×20".parse::<Size>().unwrap(), Size::LARGE);
        assert!("30".parse::<Size>().is_err());
        assert_eq!(Size::SMALL.to_string(), "30x10");
    }

    #[test]
    fn shipped_param_counts() {
        let plan = layer_plan(&ModelConfig::shipped(), Size::MEDIUM).unwrap();
        let p: Vec<u64> = plan.iter().map(|l| l.op.params()).filter(|&p| p > 0).collect();
        assert_eq!(p, vec![288, 9216, 192_192, 102_102, 144, 4608, 6144, 2496, 102_102]);
        assert_eq!(p.iter().sum::<u64>(), 419_292);
    }

    #[test]
    fn shipped_kernel_counts() {
        let plan = layer_plan(&ModelConfig::shipped(), Size::MEDIUM).unwrap();
        let k: Vec<usize> = plan.iter().map(|l| l.op.kernel_count()).collect();
        assert_eq!(k, vec![16, 24, 8, 23, 11, 5, 40, 40, 5, 28, 1, 11, 11]);
    }

    #[test]
    fn config_round_trips() {
        let cfg = ModelConfig::shipped();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn mismatched_outputs_rejected() {
        let mut cfg = ModelConfig::shipped();
        cfg.branch.fc2.out = 100;
        cfg.branch.fc2.n_splits = 1;
        assert!(matches!(layer_plan(&cfg, Size::SMALL), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_are_seeded() {
        let cfg = ModelConfig::shipped();
        let a = init_weights(&cfg, 1).unwrap();
        assert_eq!(a, init_weights(&cfg, 1).unwrap());
        assert_ne!(a, init_weights(&cfg, 2).unwrap());
        assert_eq!(a["trunk.conv1.w"].shape, vec![16, 1, 2, 3, 3]);
    }
}
