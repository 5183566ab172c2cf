//! Lowering of operators into kernels on a [`GraphBuilder`].

use std::ops::Range;

use super::conv::fc_region;
use super::{ConvParams, GemmParams, PoolKind, PoolParams, RnnParams};
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::graph::{
    full, Access, Epilogue, Graph, GraphBuilder, KernelId, KernelOp, Link, ReshapeReason, TensorClass, TensorId,
};
use crate::tensor::{Region, Tensor};

fn check_mem(arch: &ArchSpec, what: &str, weight: u64, scratch: u64, suggestion: impl FnOnce() -> String) -> Result<()> {
    let needed = weight + scratch;
    if needed > arch.aie_local_mem {
        return Err(Error::LocalMemoryOverflow {
            what: what.into(),
            needed,
            available: arch.aie_local_mem,
            suggestion: suggestion(),
        });
    }
    Ok(())
}

fn conv_kernel_mem(p: &ConvParams, nic: usize, noc: usize, bytes: u64) -> (u64, u64) {
    let kvol = p.kernel_volume();
    let bias = if p.has_bias { noc } else { 0 };
    let weight = (noc * nic * kvol + bias) as u64 * bytes;
    let w_in = p.in_spatial[p.dims - 1] + 2 * p.padding[p.dims - 1];
    let rows: usize = p.kernel[..p.dims - 1].iter().product();
    let w_out = p.out_spatial()[p.dims - 1];
    let scratch = (nic * rows * w_in) as u64 * bytes + (noc * w_out) as u64 * 4;
    (weight, scratch)
}

/// Balanced adder tree over accumulator `leaves` (all shaped `shape`).
/// The root writes `out` with `bias` and returns its kernel id.
#[allow(clippy::too_many_arguments)]
fn adder_tree(
    b: &mut GraphBuilder,
    name: &str,
    leaves: &[TensorId],
    shape: &[usize],
    out: Access,
    bias: Option<String>,
    bias_bytes: u64,
    counter: &mut usize,
) -> KernelId {
    fn node(
        b: &mut GraphBuilder,
        name: &str,
        leaves: &[TensorId],
        shape: &[usize],
        out: Option<(Access, Option<String>, u64)>,
        counter: &mut usize,
    ) -> (Access, Option<KernelId>) {
        if leaves.len() == 1 && out.is_none() {
            return (full(leaves[0], shape), None);
        }
        let mid = leaves.len().div_ceil(2);
        let (l, _) = node(b, name, &leaves[..mid], shape, None, counter);
        let (r, _) = node(b, name, &leaves[mid..], shape, None, counter);
        let elems: usize = shape.iter().product();
        let idx = *counter;
        *counter += 1;
        let (output, bias, bias_bytes, partial) = match out {
            Some((acc, bias, bb)) => (acc, bias, bb, false),
            None => {
                let t = b.tensor(&format!("{name}.sum{idx}"), shape, TensorClass::Accumulator, Link::Stream);
                (full(t, shape), None, 0, true)
            }
        };
        let row = shape.last().copied().unwrap_or(1) * shape.get(1).copied().unwrap_or(1);
        let k = b.kernel(
            format!("{name}.add{idx}"),
            KernelOp::Adder { bias, partial },
            vec![l, r],
            output.clone(),
            bias_bytes,
            (3 * row.min(elems) * 4) as u64,
            0,
            elems as u64,
        );
        (output, Some(k))
    }
    node(b, name, leaves, shape, Some((out, bias, bias_bytes)), counter).1.expect("root adder")
}

/// Lower a convolution layer into its own subgraph. Returns the output
/// tensor (after epilogues).
#[allow(clippy::too_many_arguments)]
pub fn conv_layer(
    b: &mut GraphBuilder,
    name: &str,
    input: TensorId,
    p: &ConvParams,
    weights: &str,
    bias: Option<&str>,
    epilogues: &[Epilogue],
    arch: &ArchSpec,
) -> Result<TensorId> {
    p.validate()?;
    if b.shape(input) != p.in_shape().as_slice() {
        return Err(Error::Shape(format!("{name}: input {:?}, expected {:?}", b.shape(input), p.in_shape())));
    }
    let bytes = b.graph.storage.size_bytes();
    // memory feasibility of the largest shard
    let icmax = p.in_channel_ranges()[0].len();
    let ocmax = p.out_channel_ranges()[0].len();
    let (w, s) = conv_kernel_mem(p, icmax, ocmax, bytes);
    check_mem(arch, name, w, s, || {
        for oc in p.partition.out_channel_splits..=p.c_out {
            for ic in p.partition.in_channel_splits..=p.c_in {
                let (w, s) = conv_kernel_mem(p, p.c_in.div_ceil(ic), p.c_out.div_ceil(oc), bytes);
                if w + s <= arch.aie_local_mem {
                    return format!("in_channel_splits = {ic}, out_channel_splits = {oc}");
                }
            }
        }
        "none (a single output channel does not fit)".into()
    })?;

    if p.padding.iter().any(|&x| x > 0) && !b.graph.is_graph_input(input) {
        b.mark_reshape(input, ReshapeReason::Padding);
    }
    b.begin_subgraph(name);
    let out_shape = p.out_shape();
    let out_sp = p.out_spatial();
    let out = b.activation(&format!("{name}.out"), &out_shape);
    let kvol = p.kernel_volume();
    let out_plane: usize = out_sp.iter().product();
    let bias_name = bias.map(str::to_string);
    let mut producers = Vec::new();
    let mut counter = 0;
    for (fi, fr) in p.frame_ranges().into_iter().enumerate() {
        for (oi, oc) in p.out_channel_ranges().into_iter().enumerate() {
            let out_region = fc_region(fr.clone(), oc.clone(), &out_sp);
            let ics = p.in_channel_ranges();
            let bias_bytes = if p.has_bias { oc.len() as u64 * bytes } else { 0 };
            let mut leaves = Vec::new();
            for (ii, ic) in ics.iter().enumerate() {
                let (mut w, s) = conv_kernel_mem(p, ic.len(), oc.len(), bytes);
                let single = ics.len() == 1;
                if !single {
                    w -= bias_bytes;
                }
                let acc_shape = {
                    let mut v = vec![fr.len(), oc.len()];
                    v.extend(&out_sp);
                    v
                };
                let output = if single {
                    Access { tensor: out, region: out_region.clone() }
                } else {
                    let t = b.tensor(
                        &format!("{name}.f{fi}.o{oi}.i{ii}"),
                        &acc_shape,
                        TensorClass::Accumulator,
                        Link::Stream,
                    );
                    leaves.push(t);
                    full(t, &acc_shape)
                };
                let k = b.kernel(
                    format!("{name}.f{fi}.o{oi}.i{ii}"),
                    KernelOp::Conv {
                        params: p.clone(),
                        frames: fr.clone(),
                        in_ch: ic.clone(),
                        out_ch: oc.clone(),
                        weights: weights.into(),
                        bias: if single { bias_name.clone() } else { None },
                        partial: !single,
                    },
                    vec![Access { tensor: input, region: fc_region(fr.clone(), ic.clone(), &p.in_spatial) }],
                    output,
                    w,
                    s,
                    (fr.len() * oc.len() * out_plane * ic.len() * kvol) as u64,
                    0,
                );
                if single {
                    producers.push(k);
                }
            }
            if !leaves.is_empty() {
                let mut acc_shape = vec![fr.len(), oc.len()];
                acc_shape.extend(&out_sp);
                let root = adder_tree(
                    b,
                    &format!("{name}.f{fi}.o{oi}"),
                    &leaves,
                    &acc_shape,
                    Access { tensor: out, region: out_region },
                    bias_name.clone(),
                    bias_bytes,
                    &mut counter,
                );
                producers.push(root);
            }
        }
    }
    Ok(b.finish_activations(&producers, out, epilogues))
}

/// Where a GEMM reads its `A` operand.
#[derive(Debug, Clone, Copy)]
pub struct GemmInput {
    pub tensor: TensorId,
    /// Flat element offset of row 0 (M = 1 operands only).
    pub base: usize,
}

impl GemmInput {
    pub fn whole(tensor: TensorId) -> Self {
        Self { tensor, base: 0 }
    }

    fn region(&self, m: usize, kr: Range<usize>) -> Region {
        if m == 1 {
            Region::Flat(self.base + kr.start..self.base + kr.end)
        } else {
            Region::Box(vec![0..m, kr])
        }
    }
}

fn gemm_kernel_mem(m: usize, kr: usize, nr: usize, bytes: u64) -> (u64, u64) {
    ((kr * nr) as u64 * bytes, (m * kr) as u64 * bytes + (m * nr) as u64 * 4)
}

/// Lower a GEMM into its own subgraph: per N split, `k_clusters` cascade
/// chains reduced by an adder tree.
#[allow(clippy::too_many_arguments)]
pub fn gemm_layer(
    b: &mut GraphBuilder,
    name: &str,
    input: GemmInput,
    p: &GemmParams,
    weights: &str,
    bias: Option<&str>,
    epilogues: &[Epilogue],
    arch: &ArchSpec,
) -> Result<TensorId> {
    gemm_layer_in(b, name, input, p, weights, bias, epilogues, arch, true)
}

#[allow(clippy::too_many_arguments)]
fn gemm_layer_in(
    b: &mut GraphBuilder,
    name: &str,
    input: GemmInput,
    p: &GemmParams,
    weights: &str,
    bias: Option<&str>,
    epilogues: &[Epilogue],
    arch: &ArchSpec,
    own_subgraph: bool,
) -> Result<TensorId> {
    p.validate(arch)?;
    let in_shape = b.shape(input.tensor).to_vec();
    let in_elems: usize = in_shape.iter().product();
    if p.m == 1 {
        if input.base + p.k > in_elems {
            return Err(Error::Shape(format!("{name}: operand has {in_elems} elements, need {}", input.base + p.k)));
        }
    } else if in_shape != [p.m, p.k] || input.base != 0 {
        return Err(Error::Shape(format!("{name}: operand {in_shape:?}, expected [{}, {}]", p.m, p.k)));
    }
    let bytes = b.graph.storage.size_bytes();
    let nmax = p.n_ranges()[0].len();
    let kmax = p.kernel_k_range(0, 0).len();
    let (w, s) = gemm_kernel_mem(p.m, kmax, nmax, bytes);
    check_mem(arch, name, w, s, || {
        for ns in p.n_splits..=p.n {
            let (w, s) = gemm_kernel_mem(p.m, kmax, p.n.div_ceil(ns), bytes);
            if w + s <= arch.aie_local_mem {
                return format!("n_splits = {ns}");
            }
        }
        "reduce k_tiles_per_kernel".into()
    })?;
    if own_subgraph {
        if in_shape.len() >= 3 && !b.graph.is_graph_input(input.tensor) {
            b.mark_reshape(input.tensor, ReshapeReason::Flatten);
        }
        b.begin_subgraph(name);
    }
    let out_shape = [p.m, p.n];
    let out = b.activation(&format!("{name}.out"), &out_shape);
    let bias_name = bias.map(str::to_string);
    let mut producers = Vec::new();
    let mut counter = 0;
    for (si, nr) in p.n_ranges().into_iter().enumerate() {
        let acc_shape = [p.m, nr.len()];
        let out_region = Region::Box(vec![0..p.m, nr.clone()]);
        let bias_bytes = if p.has_bias { nr.len() as u64 * bytes } else { 0 };
        let mut chain_ends = Vec::new();
        for c in 0..p.k_clusters {
            let mut cascade: Option<TensorId> = None;
            for pos in 0..p.cascade_len {
                let kr = p.kernel_k_range(c, pos);
                let last = pos + 1 == p.cascade_len;
                let finalizes = last && p.k_clusters == 1;
                let output = if finalizes {
                    Access { tensor: out, region: out_region.clone() }
                } else {
                    let link = if last { Link::Stream } else { Link::Cascade };
                    let t = b.tensor(&format!("{name}.n{si}.c{c}.p{pos}"), &acc_shape, TensorClass::Accumulator, link);
                    if last {
                        chain_ends.push(t);
                    }
                    full(t, &acc_shape)
                };
                let mut inputs = vec![Access { tensor: input.tensor, region: input.region(p.m, kr.clone()) }];
                if let Some(t) = cascade {
                    inputs.push(full(t, &acc_shape));
                }
                let (mut w, s) = gemm_kernel_mem(p.m, kr.len(), nr.len(), bytes);
                if finalizes {
                    w += bias_bytes;
                }
                let next = output.tensor;
                let k = b.kernel(
                    format!("{name}.n{si}.c{c}.p{pos}"),
                    KernelOp::Gemm {
                        params: p.clone(),
                        cluster: c,
                        position: pos,
                        k_range: kr.clone(),
                        n_range: nr.clone(),
                        weights: weights.into(),
                        bias: if finalizes { bias_name.clone() } else { None },
                        cascade_in: cascade.is_some(),
                        partial: !finalizes,
                    },
                    inputs,
                    output,
                    w,
                    s,
                    (p.m * kr.len() * nr.len()) as u64,
                    0,
                );
                if finalizes {
                    producers.push(k);
                }
                cascade = Some(next);
            }
        }
        if !chain_ends.is_empty() {
            let root = adder_tree(
                b,
                &format!("{name}.n{si}"),
                &chain_ends,
                &acc_shape,
                Access { tensor: out, region: out_region },
                bias_name.clone(),
                bias_bytes,
                &mut counter,
            );
            producers.push(root);
        }
    }
    Ok(b.finish_activations(&producers, out, epilogues))
}

/// Lower a pooling layer into a grid of frame-group x channel-group kernels.
pub fn pool_layer(b: &mut GraphBuilder, name: &str, input: TensorId, p: &PoolParams, arch: &ArchSpec) -> Result<TensorId> {
    p.validate()?;
    if b.shape(input) != p.in_shape().as_slice() {
        return Err(Error::Shape(format!("{name}: input {:?}, expected {:?}", b.shape(input), p.in_shape())));
    }
    b.begin_subgraph(name);
    let out = b.activation(&format!("{name}.out"), &p.out_shape());
    let bytes = b.graph.storage.size_bytes();
    let in_plane: usize = p.in_spatial.iter().product();
    let out_plane: usize = p.out_spatial.iter().product();
    let w_in = *p.in_spatial.last().unwrap();
    for (fi, fr) in p.frame_ranges().into_iter().enumerate() {
        for (ci, cr) in p.channel_ranges().into_iter().enumerate() {
            let planes = fr.len() * cr.len();
            let rows = match p.kind {
                PoolKind::Max => p.kernel[0],
                PoolKind::AdaptiveAvg => 1,
            };
            let scratch = (cr.len() * rows * w_in) as u64 * bytes + (planes * out_plane) as u64 * 4;
            check_mem(arch, name, 0, scratch, || "more channel splits".into())?;
            b.kernel(
                format!("{name}.f{fi}.c{ci}"),
                KernelOp::Pool { params: p.clone(), frames: fr.clone(), channels: cr.clone() },
                vec![Access { tensor: input, region: fc_region(fr.clone(), cr.clone(), &p.in_spatial) }],
                Access { tensor: out, region: fc_region(fr.clone(), cr.clone(), &p.out_spatial) },
                0,
                scratch,
                0,
                (planes * in_plane) as u64,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimpleOp {
    Unary(Epilogue),
    Add,
    Mul,
}

/// Lower an elementwise operator over same-shaped inputs into `width`
/// kernels, each owning a slice of the last axis.
pub fn elementwise_layer(b: &mut GraphBuilder, name: &str, inputs: &[TensorId], op: &SimpleOp, width: usize, arch: &ArchSpec) -> Result<TensorId> {
    let arity = match op {
        SimpleOp::Unary(_) => 1,
        _ => 2,
    };
    if inputs.len() != arity {
        return Err(Error::InvalidParams(format!("{name}: expected {arity} inputs, got {}", inputs.len())));
    }
    let shape = b.shape(inputs[0]).to_vec();
    if inputs.iter().any(|&t| b.shape(t) != shape.as_slice()) {
        return Err(Error::Shape(format!("{name}: operand shapes differ")));
    }
    let last = *shape.last().ok_or_else(|| Error::Shape("scalar operand".into()))?;
    if width == 0 || width > last {
        return Err(Error::InvalidParams(format!("{name}: width {width} must be in 1..={last}")));
    }
    b.begin_subgraph(name);
    let out = b.activation(&format!("{name}.out"), &shape);
    let bytes = b.graph.storage.size_bytes();
    for (i, r) in super::split_even(last, width).into_iter().enumerate() {
        let mut rs: Vec<Range<usize>> = shape.iter().map(|&d| 0..d).collect();
        *rs.last_mut().unwrap() = r;
        let region = Region::Box(rs);
        let elems = region.len(&shape) as u64;
        let kop = match op {
            SimpleOp::Unary(e) => KernelOp::Unary(e.clone()),
            SimpleOp::Add => KernelOp::Add,
            SimpleOp::Mul => KernelOp::Mul,
        };
        let scratch = elems.min(1024) * bytes * (arity as u64 + 1);
        check_mem(arch, name, 0, scratch, || "wider split".into())?;
        b.kernel(
            format!("{name}.w{i}"),
            kop,
            inputs.iter().map(|&t| Access { tensor: t, region: region.clone() }).collect(),
            Access { tensor: out, region },
            0,
            scratch,
            0,
            elems,
        );
    }
    Ok(out)
}

/// Constant names of an RNN layer.
#[derive(Debug, Clone)]
pub struct RnnConsts<'a> {
    pub w_ih: &'a str,
    pub w_hh: &'a str,
    pub b_ih: Option<&'a str>,
    pub b_hh: Option<&'a str>,
}

/// Lower an unrolled RNN: one input GEMM per step, and for recurrent
/// steps a hidden GEMM plus an add kernel carrying the tanh epilogue.
/// Returns the last hidden state `[1, hidden]`.
pub fn rnn_layer(b: &mut GraphBuilder, name: &str, input: TensorId, p: &RnnParams, c: &RnnConsts, arch: &ArchSpec) -> Result<TensorId> {
    p.validate()?;
    let in_elems: usize = b.shape(input).iter().product();
    if in_elems != p.seq_len * p.input_size {
        return Err(Error::Shape(format!("{name}: input has {in_elems} elements, expected {}", p.seq_len * p.input_size)));
    }
    if !b.graph.is_graph_input(input) {
        b.mark_reshape(input, ReshapeReason::SequenceSplit);
    }
    b.begin_subgraph(name);
    let (ih, hh) = (p.ih_gemm(), p.hh_gemm());
    let add_c = |s: Option<&str>| s.map(|n| Epilogue::AddConst(n.into()));
    let mut h: Option<TensorId> = None;
    let shape = [1, p.hidden_size];
    for t in 0..p.seq_len {
        let x = GemmInput { tensor: input, base: t * p.input_size };
        let step = format!("{name}.t{t}");
        if t == 0 && p.zero_initial_state {
            let epi: Vec<Epilogue> = add_c(c.b_ih).into_iter().chain(add_c(c.b_hh)).chain([Epilogue::Tanh]).collect();
            h = Some(gemm_layer_in(b, &format!("{step}.ih"), x, &ih, c.w_ih, None, &epi, arch, false)?);
            continue;
        }
        let prev = match h {
            Some(t) => t,
            None => b.input(&format!("{name}.h0"), &shape),
        };
        let epi_ih: Vec<Epilogue> = add_c(c.b_ih).into_iter().collect();
        let epi_hh: Vec<Epilogue> = add_c(c.b_hh).into_iter().collect();
        let a = gemm_layer_in(b, &format!("{step}.ih"), x, &ih, c.w_ih, None, &epi_ih, arch, false)?;
        let r = gemm_layer_in(b, &format!("{step}.hh"), GemmInput::whole(prev), &hh, c.w_hh, None, &epi_hh, arch, false)?;
        let s = b.activation(&format!("{step}.h"), &shape);
        let elems = p.hidden_size as u64;
        let bytes = b.graph.storage.size_bytes();
        let k = b.kernel(
            format!("{step}.add"),
            KernelOp::Add,
            vec![full(a, &shape), full(r, &shape)],
            full(s, &shape),
            0,
            3 * elems * bytes,
            0,
            elems,
        );
        h = Some(b.finish_activations(&[k], s, &[Epilogue::Tanh]));
    }
    Ok(h.expect("seq_len > 0"))
}

/// A standalone graph holding one convolution layer, input `X`, output `Y`.
pub fn build_conv_subgraph(p: &ConvParams, w: Tensor, bias: Option<Tensor>, epilogues: &[Epilogue], arch: &ArchSpec) -> Result<Graph> {
    let mut b = GraphBuilder::new("conv");
    let x = b.input("X", &p.in_shape());
    b.constant("W", w);
    let bname = bias.map(|t| b.constant("B", t));
    let y = conv_layer(&mut b, "conv", x, p, "W", bname.as_deref(), epilogues, arch)?;
    b.mark_output("Y", y);
    Ok(b.finish())
}

/// A standalone graph holding one GEMM layer, input `X` (`[M, K]`), output `Y`.
pub fn build_gemm_subgraph(p: &GemmParams, w: Tensor, bias: Option<Tensor>, epilogues: &[Epilogue], arch: &ArchSpec) -> Result<Graph> {
    let mut b = GraphBuilder::new("gemm");
    let x = b.input("X", &[p.m, p.k]);
    b.constant("W", w);
    let bname = bias.map(|t| b.constant("B", t));
    let y = gemm_layer(&mut b, "gemm", GemmInput::whole(x), p, "W", bname.as_deref(), epilogues, arch)?;
    b.mark_output("Y", y);
    Ok(b.finish())
}

/// A standalone graph holding one elementwise layer over inputs `X0..`.
pub fn build_simple_subgraph(op: &SimpleOp, shape: &[usize], width: usize, arch: &ArchSpec) -> Result<Graph> {
    let mut b = GraphBuilder::new("simple");
    let arity = if matches!(op, SimpleOp::Unary(_)) { 1 } else { 2 };
    let inputs: Vec<TensorId> = (0..arity).map(|i| b.input(&format!("X{i}"), shape)).collect();
    let y = elementwise_layer(&mut b, "simple", &inputs, op, width, arch)?;
    b.mark_output("Y", y);
    Ok(b.finish())
}
