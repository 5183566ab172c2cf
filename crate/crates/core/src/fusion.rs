//! The three fusion levels: L1 absorbs elementwise kernels into their
//! producers, L2 turns inter-subgraph staging into direct streams where the
//! consumer has room, L3 assigns the remaining staged nets to memory tiles.

use std::collections::{BTreeMap, BTreeSet};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::graph::{Epilogue, Graph, KernelId, KernelOp, MemtileAlloc, NetId, NetKind};

/// Find one absorbable `(producer, unary)` pair per unary kernel.
fn l1_candidates(g: &Graph) -> Vec<(KernelId, KernelId)> {
    let mut writers: BTreeMap<usize, Vec<KernelId>> = BTreeMap::new();
    let mut readers: BTreeMap<usize, Vec<(KernelId, usize)>> = BTreeMap::new();
    for k in &g.kernels {
        writers.entry(k.output.tensor).or_default().push(k.id);
        for (i, a) in k.inputs.iter().enumerate() {
            readers.entry(a.tensor).or_default().push((k.id, i));
        }
    }
    let mut used = BTreeSet::new();
    let mut out = Vec::new();
    for u in &g.kernels {
        if !matches!(u.op, KernelOp::Unary(_)) || u.inputs.len() != 1 {
            continue;
        }
        let inp = &u.inputs[0];
        if g.is_graph_output(inp.tensor) || g.is_graph_input(inp.tensor) {
            continue;
        }
        let shape = &g.tensors[inp.tensor].shape;
        let prods: Vec<KernelId> = writers
            .get(&inp.tensor)
            .map(|w| {
                w.iter()
                    .copied()
                    .filter(|&p| g.kernels[p].output.region.overlaps(&inp.region, shape))
                    .collect()
            })
            .unwrap_or_default();
        let [p] = prods.as_slice() else { continue };
        let pk = &g.kernels[*p];
        if pk.output.region != inp.region || pk.op.emits_partial() {
            continue;
        }
        let consumers = readers
            .get(&inp.tensor)
            .map(|r| {
                r.iter()
                    .filter(|(c, i)| g.kernels[*c].inputs[*i].region.overlaps(&pk.output.region, shape))
                    .count()
            })
            .unwrap_or(0);
        if consumers != 1 || used.contains(p) || used.contains(&u.id) {
            continue;
        }
        used.insert(*p);
        used.insert(u.id);
        out.push((*p, u.id));
    }
    out
}

/// L1: absorb unary elementwise kernels into their sole producer until
/// no candidate remains.
pub fn fuse_l1(g: &Graph) -> Graph {
    let mut g = g.clone();
    loop {
        let pairs = l1_candidates(&g);
        if pairs.is_empty() {
            break;
        }
        let mut dead = BTreeSet::new();
        for (p, u) in pairs {
            let uk = g.kernels[u].clone();
            let KernelOp::Unary(e) = uk.op else { unreachable!() };
            let pk = &mut g.kernels[p];
            pk.fused_epilogues.push(e);
            pk.fused_epilogues.extend(uk.fused_epilogues);
            pk.output = uk.output;
            pk.elem_ops += uk.elem_ops;
            dead.insert(u);
        }
        g.remove_kernels(&dead);
    }
    g.passes.l1 = true;
    g
}

/// Whether every epilogue of every kernel is a plain elementwise op.
pub fn epilogues_are_elementwise(g: &Graph) -> bool {
    g.kernels.iter().all(|k| {
        k.fused_epilogues
            .iter()
            .all(|e| matches!(e, Epilogue::Silu | Epilogue::Tanh | Epilogue::AddConst(_) | Epilogue::MulConst(_)))
    })
}

/// Local memory a kernel has left for inbound stream buffers.
pub fn spare_memory(g: &Graph, k: KernelId, arch: &ArchSpec) -> u64 {
    let k = &g.kernels[k];
    arch.aie_local_mem
        .saturating_sub(k.weight_bytes + k.scratch_bytes + k.stream_buffer_bytes)
}

/// L2: convert unstaged, non-reshape inter-subgraph nets to direct streams
/// when every consumer can hold a double-buffered payload.
pub fn fuse_l2(g: &Graph, arch: &ArchSpec) -> Result<Graph> {
    if !g.passes.l1 {
        return Err(Error::InvalidGraph("L2 fusion requires L1 to have run first".into()));
    }
    let mut g = g.clone();
    for n in 0..g.nets.len() {
        let net = &g.nets[n];
        if net.kind != NetKind::Memtile || net.reshape.is_some() || !net.memtiles.is_empty() {
            continue;
        }
        let need = 2 * net.payload_bytes;
        let consumers: BTreeSet<KernelId> = net.consumers.iter().map(|e| e.kernel).collect();
        if consumers.iter().all(|&c| spare_memory(&g, c, arch) >= need) {
            for &c in &consumers {
                g.kernels[c].stream_buffer_bytes += need;
            }
            g.nets[n].kind = NetKind::Stream;
        }
    }
    g.passes.l2 = true;
    Ok(g)
}

struct TileState {
    id: u32,
    network: String,
    in_used: u32,
    out_used: u32,
    bytes: u64,
    nets: Vec<NetId>,
    // slices of the current net already served from this tile
    served: BTreeSet<u32>,
}

/// L3: first-fit memory-tile allocation for every staged net without one.
/// Tiles are shared only within one sub-network. Each producer takes an
/// input port; each distinct consumer slice fed from a tile takes an output
/// port there.
pub fn fuse_l3(g: &Graph, arch: &ArchSpec) -> Result<Graph> {
    let mut g = g.clone();
    let mut tiles: Vec<TileState> = g
        .memtile_plan
        .iter()
        .map(|m| TileState {
            id: m.id,
            network: m.network.clone(),
            in_used: m.in_ports,
            out_used: m.out_ports,
            bytes: m.bytes,
            nets: m.nets.clone(),
            served: BTreeSet::new(),
        })
        .collect();
    let cap = arch.memtile_capacity;
    let (pin, pout) = (arch.memtile_in_ports, arch.memtile_out_ports);

    for n in 0..g.nets.len() {
        let net = g.nets[n].clone();
        if net.kind != NetKind::Memtile || !net.memtiles.is_empty() {
            continue;
        }
        let Some(first) = net.producers.first() else { continue };
        let network = g.subgraphs[g.kernels[first.kernel].subgraph].network.clone();
        let shape = g.tensors[net.tensor].shape.clone();
        let bytes = g.elem_bytes(net.tensor);
        for t in &mut tiles {
            t.served.clear();
        }
        let mut used_tiles = BTreeSet::new();
        for p in &net.producers {
            let preg = &g.kernels[p.kernel].output.region;
            let slices: BTreeSet<u32> = net
                .consumers
                .iter()
                .filter(|c| g.kernels[c.kernel].inputs[c.port as usize].region.overlaps(preg, &shape))
                .map(|c| c.slice)
                .collect();
            let mut remaining = preg.len(&shape) as u64 * bytes;
            // oversized producers spill over several tiles
            while remaining > 0 {
                let chunk = remaining.min(cap);
                let fits = |t: &TileState| {
                    let new = slices.difference(&t.served).count() as u32;
                    t.network == network && t.in_used < pin && t.out_used + new <= pout && t.bytes + chunk <= cap
                };
                let idx = match tiles.iter().position(fits) {
                    Some(i) => i,
                    None => {
                        let id = tiles.len() as u32;
                        tiles.push(TileState {
                            id,
                            network: network.clone(),
                            in_used: 0,
                            out_used: 0,
                            bytes: 0,
                            nets: Vec::new(),
                            served: BTreeSet::new(),
                        });
                        if slices.len() as u32 > pout {
                            return Err(Error::Infeasible(format!(
                                "producer {} feeds {} slices, above the {pout} memory-tile output ports",
                                g.kernels[p.kernel].name,
                                slices.len()
                            )));
                        }
                        tiles.len() - 1
                    }
                };
                let t = &mut tiles[idx];
                t.in_used += 1;
                t.out_used += slices.difference(&t.served).count() as u32;
                t.served.extend(slices.iter().copied());
                t.bytes += chunk;
                if !t.nets.contains(&n) {
                    t.nets.push(n);
                }
                used_tiles.insert(t.id);
                remaining -= chunk;
            }
        }
        g.nets[n].memtiles = used_tiles.into_iter().collect();
    }

    if tiles.len() > arch.memtile_total as usize {
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &tiles {
            *per.entry(&t.network).or_default() += 1;
        }
        let report = per.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(", ");
        return Err(Error::MemtileExhausted { demand: tiles.len(), available: arch.memtile_total as usize, report });
    }
    g.memtile_plan = tiles
        .into_iter()
        .map(|t| MemtileAlloc {
            id: t.id,
            network: t.network,
            in_ports: t.in_used,
            out_ports: t.out_used,
            bytes: t.bytes,
            nets: t.nets,
        })
        .collect();
    g.passes.l3 = true;
    Ok(g)
}

/// L1, then L2, then L3.
pub fn fuse_all(g: &Graph, arch: &ArchSpec) -> Result<Graph> {
    let g = fuse_l1(g);
    let g = fuse_l2(&g, arch)?;
    fuse_l3(&g, arch)
}
