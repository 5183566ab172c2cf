//! Random small graphs with standalone activation kernels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilegraph::fusion::fuse_all;
use tilegraph::graph::{Epilogue, GraphBuilder, KernelOp, NetKind, TensorId};
use tilegraph::ops::{conv_layer, elementwise_layer, gemm_layer, pool_layer, ConvParams, GemmInput, GemmParams, PoolParams, SimpleOp};
use tilegraph::sim::{execute, traffic_report, ExecOptions};
use tilegraph::{ArchSpec, ElemType, Graph, Tensor};

const MAX_SLICES: usize = 4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn epilogues(rng: &mut ChaCha8Rng) -> Vec<Epilogue> {
    match rng.gen_range(0..4) {
        0 => vec![],
        1 => vec![Epilogue::Silu],
        2 => vec![Epilogue::Tanh],
        _ => vec![Epilogue::Silu, Epilogue::Tanh],
    }
}

struct Layers<'a> {
    b: GraphBuilder,
    rng: ChaCha8Rng,
    arch: &'a ArchSpec,
    n: usize,
}

impl Layers<'_> {
    fn name(&mut self, kind: &str) -> String {
        self.n += 1;
        format!("net.{kind}{}", self.n)
    }

    fn conv(&mut self, x: TensorId, c_out: usize, same: bool) -> TensorId {
        let s = self.b.shape(x).to_vec();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (k, pad) = if same {
            if self.rng.gen_bool(0.5) { (3, 1) } else { (1, 0) }
        } else {
            let k = self.rng.gen_range(1..=3.min(h).min(w));
            (k, self.rng.gen_range(0..=k / 2))
        };
        // distinct input slices stay within the memory-tile port budget
        let fs = self.rng.gen_range(1..=f);
        let ics = self.rng.gen_range(1..=c.min(MAX_SLICES / fs));
        let p = ConvParams::new(f, c, c_out, &[h, w], &[k, k], &[pad, pad]).with_partition(fs, ics, self.rng.gen_range(1..=c_out));
        let name = self.name("conv");
        let wname = format!("{name}.w");
        let wt = random(&p.weight_shape(), &mut self.rng);
        self.b.constant(&wname, wt);
        let epi = epilogues(&mut self.rng);
        conv_layer(&mut self.b, &name, x, &p, &wname, None, &epi, self.arch).unwrap()
    }

    fn pool(&mut self, x: TensorId) -> TensorId {
        let s = self.b.shape(x).to_vec();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = if h >= 2 && w >= 2 && self.rng.gen_bool(0.5) {
            PoolParams::maxpool2d(f, c, [h, w], 2, 2, 0).unwrap()
        } else {
            PoolParams::adaptive(f, c, &[h, w], &[self.rng.gen_range(1..=h), self.rng.gen_range(1..=w)]).unwrap()
        }
        .with_grid(self.rng.gen_range(1..=f), self.rng.gen_range(1..=c.min(MAX_SLICES / f)));
        let name = self.name("pool");
        pool_layer(&mut self.b, &name, x, &p, self.arch).unwrap()
    }

    fn gemm(&mut self, x: TensorId) -> TensorId {
        let k: usize = self.b.shape(x).iter().product();
        let n = self.rng.gen_range(1..=12);
        let splits = self.rng.gen_range(1..=n.min(3));
        let tiles = k.div_ceil(8);
        let valid: Vec<GemmParams> = (1..=3)
            .flat_map(|kc| (1..=tiles).map(move |tpk| (kc, tpk)))
            .map(|(kc, tpk)| GemmParams::tiled(1, k, n, kc, tpk).with_n_splits(splits))
            .filter(|p| p.validate(self.arch).is_ok() && p.k_clusters * p.cascade_len <= MAX_SLICES)
            .collect();
        let p = valid[self.rng.gen_range(0..valid.len())].clone();
        let name = self.name("fc");
        let wname = format!("{name}.w");
        let wt = random(&[k, n], &mut self.rng);
        self.b.constant(&wname, wt);
        let epi = epilogues(&mut self.rng);
        gemm_layer(&mut self.b, &name, GemmInput::whole(x), &p, &wname, None, &epi, self.arch).unwrap()
    }
}

/// A random chain of convolutions, pools, an optional two-branch join and
/// an optional dense head, with activations as standalone kernels.
pub fn random_graph(seed: u64, arch: &ArchSpec) -> (Graph, BTreeMap<String, Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=7), rng.gen_range(3..=7)];
    let mut l = Layers { b: GraphBuilder::new("random"), rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), arch, n: 0 };
    l.b.unfused_activations = true;
    let mut x = l.b.input("X", &shape);
    for _ in 0..rng.gen_range(1..=3) {
        x = match rng.gen_range(0..4) {
            0 | 1 => {
                let c = rng.gen_range(1..=4);
                l.conv(x, c, false)
            }
            2 => l.pool(x),
            _ => {
                let c = rng.gen_range(1..=3);
                let a = l.conv(x, c, true);
                let b = l.conv(x, c, true);
                let op = if rng.gen_bool(0.5) { SimpleOp::Add } else { SimpleOp::Mul };
                let w = rng.gen_range(1..=l.b.shape(a)[3].min(MAX_SLICES));
                let name = l.name("join");
                elementwise_layer(&mut l.b, &name, &[a, b], &op, w, arch).unwrap()
            }
        };
    }
    if rng.gen_bool(0.5) {
        x = l.gemm(x);
    }
    l.b.mark_output("Y", x);
    let inputs = BTreeMap::from([("X".to_string(), random(&shape, &mut rng))]);
    (l.b.finish(), inputs)
}

/// Fuse `g` and compare against the unfused graph.
pub fn check_equivalent(g: &Graph, inputs: &BTreeMap<String, Tensor>, arch: &ArchSpec) -> Result<(), String> {
    let f = fuse_all(g, arch).map_err(|e| e.to_string())?;
    let report = f.validate(arch);
    ensure(report.is_clean(), &format!("{:?}", report.findings))?;
    let unary = g.kernels.iter().filter(|k| matches!(k.op, KernelOp::Unary(_))).count();
    ensure(f.kernel_count() == g.kernel_count() - unary, "unary kernels survived fusion")?;
    for n in f.external_nets() {
        ensure(f.is_graph_input(n.tensor) || f.is_graph_output(n.tensor), &format!("net {} leaves the array", n.name))?;
    }
    for n in &f.nets {
        if n.kind == NetKind::Memtile {
            ensure(!n.memtiles.is_empty(), &format!("net {} has no memory tile", n.name))?;
        }
    }
    for e in [ElemType::F32, ElemType::Bf16] {
        let a = execute(g, inputs, &ExecOptions::new(e)).unwrap();
        let b = execute(&f, inputs, &ExecOptions::new(e)).unwrap();
        for (name, t) in &a.outputs {
            ensure(t.bitwise_eq(&b.outputs[name]), &format!("{e:?} output {name} differs"))?;
        }
        ensure(traffic_report(&b.trace).intermediate_dram_bytes == 0, "intermediate DRAM traffic")?;
    }
    Ok(())
}

fn ensure(ok: bool, msg: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}
