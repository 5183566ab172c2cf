//! Kernel placement on the engine grid and a capacity-model routing check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Coord};
use crate::error::{Error, Result};
use crate::graph::{Graph, KernelId, NetId, NetKind, SubgraphId};

/// Overflow penalty per excess channel in [`congestion_cost`].
pub const OVERFLOW_PENALTY: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub strategy: String,
    pub assignment: BTreeMap<KernelId, Coord>,
    pub memtile_binding: BTreeMap<NetId, Vec<u32>>,
    pub gmio_binding: BTreeMap<NetId, Vec<u32>>,
}

impl Placement {
    pub fn coord(&self, k: KernelId) -> Option<Coord> {
        self.assignment.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement is serializable")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dir {
    East,
    West,
    North,
    South,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeLoad {
    pub from: Coord,
    pub dir: Dir,
    pub load: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overflow {
    pub resource: String,
    pub demand: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteReport {
    pub feasible: bool,
    pub edge_loads: Vec<EdgeLoad>,
    pub overflows: Vec<Overflow>,
    pub total_wirelength: u64,
}

impl RouteReport {
    pub fn max_edge_load(&self) -> u32 {
        self.edge_loads.iter().map(|e| e.load).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("route report is serializable")
    }
}

/// `wirelength + penalty * sum(demand - capacity)`.
pub fn congestion_cost(r: &RouteReport) -> u64 {
    r.total_wirelength + OVERFLOW_PENALTY * r.overflows.iter().map(|o| o.demand.saturating_sub(o.capacity)).sum::<u64>()
}

/// Cascade chains as ordered kernel lists (singletons excluded).
pub fn cascade_chains(g: &Graph) -> Vec<Vec<KernelId>> {
    let mut next: BTreeMap<KernelId, KernelId> = BTreeMap::new();
    let mut has_prev = BTreeSet::new();
    for n in g.nets.iter().filter(|n| n.kind == NetKind::Cascade) {
        if let (Some(p), Some(c)) = (n.producers.first(), n.consumers.first()) {
            next.insert(p.kernel, c.kernel);
            has_prev.insert(c.kernel);
        }
    }
    let mut chains = Vec::new();
    for &head in next.keys() {
        if has_prev.contains(&head) {
            continue;
        }
        let mut chain = vec![head];
        let mut cur = head;
        while let Some(&n) = next.get(&cur) {
            if chain.contains(&n) {
                break;
            }
            chain.push(n);
            cur = n;
        }
        chains.push(chain);
    }
    chains
}

fn precheck(g: &Graph, arch: &ArchSpec) -> Result<Vec<Vec<KernelId>>> {
    if g.engine_demand() > arch.engine_count() as usize {
        return Err(Error::Placement(format!(
            "{} kernels need more engines than the {} available",
            g.engine_demand(),
            arch.engine_count()
        )));
    }
    let chains = cascade_chains(g);
    for c in &chains {
        if c.len() > arch.cascade_max_length as usize || c.len() > arch.columns as usize {
            return Err(Error::Placement(format!(
                "cascade chain of {} kernels exceeds the limit of {}",
                c.len(),
                arch.cascade_max_length.min(arch.columns)
            )));
        }
    }
    Ok(chains)
}

fn bindings(g: &Graph, assignment: BTreeMap<KernelId, Coord>, strategy: &str) -> Placement {
    let mut memtile_binding = BTreeMap::new();
    let mut gmio_binding = BTreeMap::new();
    let mut ch = 0u32;
    for n in &g.nets {
        if !n.memtiles.is_empty() {
            memtile_binding.insert(n.id, n.memtiles.clone());
        }
        if n.kind.is_external() {
            let k = n.gmio_channels() as u32;
            gmio_binding.insert(n.id, (ch..ch + k).collect());
            ch += k;
        }
    }
    Placement { strategy: strategy.into(), assignment, memtile_binding, gmio_binding }
}

struct Grid {
    cols: u32,
    rows: u32,
    used: Vec<bool>,
}

impl Grid {
    fn new(arch: &ArchSpec) -> Self {
        Self { cols: arch.columns, rows: arch.rows, used: vec![false; (arch.columns * arch.rows) as usize] }
    }

    fn free(&self, c: u32, r: u32) -> bool {
        c < self.cols && r < self.rows && !self.used[(r * self.cols + c) as usize]
    }

    fn take(&mut self, c: u32, r: u32) {
        self.used[(r * self.cols + c) as usize] = true;
    }
}

/// Column-major fill of `kernels` (declaration order) into columns
/// `[c0, c1)`; chain heads pull their chain into one row.
fn fill_region(
    grid: &mut Grid,
    c0: u32,
    c1: u32,
    kernels: &[KernelId],
    chain_of: &BTreeMap<KernelId, Vec<KernelId>>,
    member: &BTreeSet<KernelId>,
    out: &mut BTreeMap<KernelId, Coord>,
) -> bool {
    for &k in kernels {
        if out.contains_key(&k) {
            continue;
        }
        if let Some(chain) = chain_of.get(&k) {
            let len = chain.len() as u32;
            let mut spot = None;
            'scan: for c in c0..c1 {
                if c + len > c1 {
                    break;
                }
                for r in 0..grid.rows {
                    if (0..len).all(|i| grid.free(c + i, r)) {
                        spot = Some((c, r));
                        break 'scan;
                    }
                }
            }
            let Some((c, r)) = spot else { return false };
            for (i, &m) in chain.iter().enumerate() {
                grid.take(c + i as u32, r);
                out.insert(m, Coord::new(c + i as u32, r));
            }
        } else if member.contains(&k) {
            // placed with its chain head
            continue;
        } else {
            let mut spot = None;
            'scan2: for c in c0..c1 {
                for r in 0..grid.rows {
                    if grid.free(c, r) {
                        spot = Some((c, r));
                        break 'scan2;
                    }
                }
            }
            let Some((c, r)) = spot else { return false };
            grid.take(c, r);
            out.insert(k, Coord::new(c, r));
        }
    }
    true
}

fn chain_maps(chains: &[Vec<KernelId>]) -> (BTreeMap<KernelId, Vec<KernelId>>, BTreeSet<KernelId>) {
    let heads = chains.iter().map(|c| (c[0], c.clone())).collect();
    let members = chains.iter().flat_map(|c| c[1..].iter().copied()).collect();
    (heads, members)
}

/// Band order: with a join fed by two sub-networks, the larger one runs
/// left to right, then the join, then the smaller one right to left, so
/// both feeders end next to the join. Otherwise topological order.
fn band_order(g: &Graph) -> Vec<SubgraphId> {
    let order = g.subgraph_order();
    let net_of = |s: SubgraphId| g.subgraphs[s].network.as_str();
    let mut feeders: BTreeMap<SubgraphId, BTreeSet<String>> = BTreeMap::new();
    for n in &g.nets {
        for p in &n.producers {
            for c in &n.consumers {
                let (sp, sc) = (g.kernels[p.kernel].subgraph, g.kernels[c.kernel].subgraph);
                if net_of(sp) != net_of(sc) {
                    feeders.entry(sc).or_default().insert(net_of(sp).to_string());
                }
            }
        }
    }
    let join = order.iter().copied().find(|s| feeders.get(s).is_some_and(|f| f.len() == 2));
    let Some(j) = join else { return order };
    let f: Vec<String> = feeders[&j].iter().cloned().collect();
    let size = |net: &str| g.kernels.iter().filter(|k| net_of(k.subgraph) == net).count();
    let (left, right) = if size(&f[0]) >= size(&f[1]) { (&f[0], &f[1]) } else { (&f[1], &f[0]) };
    let jn = net_of(j).to_string();
    let mut out: Vec<SubgraphId> = order.iter().copied().filter(|&s| net_of(s) == left).collect();
    out.extend(order.iter().copied().filter(|&s| net_of(s) == jn));
    out.extend(order.iter().rev().copied().filter(|&s| net_of(s) == right));
    out.extend(order.iter().copied().filter(|&s| {
        let n = net_of(s);
        n != left && n != right && n != jn
    }));
    out
}

/// Locality-driven placement: each subgraph gets a full-height column band
/// next to the subgraphs it exchanges data with; kernels fill their band
/// column-major in declaration order; cascade chains stay in one row. A
/// bounded sweep then mirrors bands vertically when that lowers
/// [`congestion_cost`].
pub fn place_custom(g: &Graph, arch: &ArchSpec) -> Result<Placement> {
    let chains = precheck(g, arch)?;
    let (heads, members) = chain_maps(&chains);
    let bands = band_order(g);
    let mut assignment = BTreeMap::new();
    let mut grid = Grid::new(arch);
    let mut spans: Vec<(SubgraphId, u32, u32)> = Vec::new();
    let mut col = 0u32;
    let mut banded = true;
    for &s in &bands {
        let ks = &g.subgraphs[s].kernels;
        let longest = ks.iter().filter_map(|k| heads.get(k)).map(|c| c.len()).max().unwrap_or(1) as u32;
        let mut w = (ks.len() as u32).div_ceil(arch.rows).max(longest);
        loop {
            if col + w > arch.columns {
                banded = false;
                break;
            }
            let mut trial_grid = Grid { cols: grid.cols, rows: grid.rows, used: grid.used.clone() };
            let mut trial = assignment.clone();
            if fill_region(&mut trial_grid, col, col + w, ks, &heads, &members, &mut trial) {
                grid = trial_grid;
                assignment = trial;
                spans.push((s, col, col + w));
                col += w;
                break;
            }
            w += 1;
        }
        if !banded {
            break;
        }
    }
    if !banded {
        // too many bands: pack subgraphs back to back in band order
        assignment.clear();
        grid = Grid::new(arch);
        spans.clear();
        let order: Vec<KernelId> = bands.iter().flat_map(|&s| g.subgraphs[s].kernels.iter().copied()).collect();
        if !fill_region(&mut grid, 0, arch.columns, &order, &heads, &members, &mut assignment) {
            return Err(Error::Placement("cascade chains cannot be packed into rows".into()));
        }
    }
    let mut best = route_check(g, &bindings(g, assignment.clone(), "custom"), arch)?;
    for &(s, c0, c1) in &spans {
        let mut trial = assignment.clone();
        for k in &g.subgraphs[s].kernels {
            let c = trial[k];
            debug_assert!(c.col >= c0 && c.col < c1);
            trial.insert(*k, Coord::new(c.col, arch.rows - 1 - c.row));
        }
        let r = route_check(g, &bindings(g, trial.clone(), "custom"), arch)?;
        if congestion_cost(&r) < congestion_cost(&best) {
            best = r;
            assignment = trial;
        }
    }
    Ok(bindings(g, assignment, "custom"))
}

/// Row-major fill in kernel declaration order, ignoring connectivity
/// except that a cascade chain never wraps across rows.
pub fn place_naive(g: &Graph, arch: &ArchSpec) -> Result<Placement> {
    let chains = precheck(g, arch)?;
    let (heads, members) = chain_maps(&chains);
    let mut grid = Grid::new(arch);
    let mut assignment = BTreeMap::new();
    let (mut c, mut r) = (0u32, 0u32);
    let advance = |c: &mut u32, r: &mut u32| {
        *c += 1;
        if *c == arch.columns {
            *c = 0;
            *r += 1;
        }
    };
    for k in &g.kernels {
        if members.contains(&k.id) {
            continue;
        }
        let len = heads.get(&k.id).map_or(1, |ch| ch.len() as u32);
        loop {
            if r >= arch.rows {
                return Err(Error::Placement("row-major fill ran out of engines".into()));
            }
            if c + len <= arch.columns && (0..len).all(|i| grid.free(c + i, r)) {
                break;
            }
            advance(&mut c, &mut r);
        }
        let chain = heads.get(&k.id).cloned().unwrap_or_else(|| vec![k.id]);
        for m in chain {
            grid.take(c, r);
            assignment.insert(m, Coord::new(c, r));
            advance(&mut c, &mut r);
        }
    }
    Ok(bindings(g, assignment, "naive"))
}

/// Edges of the X-then-Y path between two tiles.
fn xy_path(a: Coord, b: Coord) -> Vec<(Coord, Dir)> {
    let mut out = Vec::new();
    let mut cur = a;
    while cur.col != b.col {
        if cur.col < b.col {
            out.push((cur, Dir::East));
            cur.col += 1;
        } else {
            out.push((cur, Dir::West));
            cur.col -= 1;
        }
    }
    while cur.row != b.row {
        if cur.row < b.row {
            out.push((cur, Dir::North));
            cur.row += 1;
        } else {
            out.push((cur, Dir::South));
            cur.row -= 1;
        }
    }
    out
}

/// Route stream nets X-then-Y, tally per-edge channel demand, and check
/// cascade adjacency, memory-tile port budgets and the GMIO pool.
pub fn route_check(g: &Graph, p: &Placement, arch: &ArchSpec) -> Result<RouteReport> {
    let coord = |k: KernelId| {
        p.coord(k).ok_or_else(|| Error::Placement(format!("kernel {} is not placed", g.kernels[k].name)))
    };
    for k in &g.kernels {
        let c = coord(k.id)?;
        if !arch.contains(c) {
            return Err(Error::OutOfGrid { coord: c, columns: arch.columns, rows: arch.rows });
        }
    }
    let mut loads: BTreeMap<(Coord, Dir), u32> = BTreeMap::new();
    let mut overflows = Vec::new();
    let mut wirelength = 0u64;
    for net in &g.nets {
        match net.kind {
            NetKind::Stream | NetKind::LocalBuffer => {
                let mut edges = BTreeSet::new();
                for pr in &net.producers {
                    for cn in &net.consumers {
                        let (a, b) = (coord(pr.kernel)?, coord(cn.kernel)?);
                        if net.kind == NetKind::LocalBuffer && a.manhattan(b) <= 1 {
                            continue;
                        }
                        edges.extend(xy_path(a, b));
                    }
                }
                wirelength += edges.len() as u64;
                for e in edges {
                    *loads.entry(e).or_default() += 1;
                }
            }
            NetKind::Cascade => {
                for pr in &net.producers {
                    for cn in &net.consumers {
                        let (a, b) = (coord(pr.kernel)?, coord(cn.kernel)?);
                        if a.row != b.row || a.col.abs_diff(b.col) != 1 {
                            overflows.push(Overflow {
                                resource: format!("cascade {a}->{b} not adjacent"),
                                demand: 1,
                                capacity: 0,
                            });
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let cap = arch.stream_channels_per_edge;
    for (&(from, dir), &load) in &loads {
        if load > cap {
            overflows.push(Overflow {
                resource: format!("edge {from} {dir:?}"),
                demand: load as u64,
                capacity: cap as u64,
            });
        }
    }
    for m in &g.memtile_plan {
        for (what, used, budget) in [
            ("in-ports", m.in_ports as u64, arch.memtile_in_ports as u64),
            ("out-ports", m.out_ports as u64, arch.memtile_out_ports as u64),
            ("bytes", m.bytes, arch.memtile_capacity),
        ] {
            if used > budget {
                overflows.push(Overflow { resource: format!("memtile {} {what}", m.id), demand: used, capacity: budget });
            }
        }
    }
    if g.memtile_plan.len() > arch.memtile_total as usize {
        overflows.push(Overflow {
            resource: "memtile pool".into(),
            demand: g.memtile_plan.len() as u64,
            capacity: arch.memtile_total as u64,
        });
    }
    let gmio = g.gmio_channels() as u64;
    if gmio > arch.gmio_total as u64 {
        overflows.push(Overflow { resource: "gmio channels".into(), demand: gmio, capacity: arch.gmio_total as u64 });
    }
    let edge_loads = loads.into_iter().map(|((from, dir), load)| EdgeLoad { from, dir, load }).collect();
    Ok(RouteReport { feasible: overflows.is_empty(), edge_loads, overflows, total_wirelength: wirelength })
}

/// `branch.conv2` -> `bc2`, `join.mul` -> `jm`.
fn short_label(name: &str) -> String {
    let mut out = String::new();
    for part in name.split('.') {
        out.extend(part.chars().next());
        out.extend(part.chars().filter(|c| c.is_ascii_digit()));
    }
    out.chars().take(4).collect()
}

/// Text map of the array, top row first; each cell shows its kernel's
/// layer label.
pub fn render_text(g: &Graph, p: &Placement, arch: &ArchSpec) -> String {
    let mut cells: BTreeMap<Coord, String> = BTreeMap::new();
    for (&k, &c) in &p.assignment {
        cells.insert(c, short_label(&g.subgraphs[g.kernels[k].subgraph].layer_name));
    }
    let mut s = String::new();
    for r in (0..arch.rows).rev() {
        let _ = write!(s, "{r:>2} ");
        for c in 0..arch.columns {
            let label = cells.get(&Coord::new(c, r)).map_or(".", String::as_str);
            let _ = write!(s, "{label:>5}");
        }
        s.push('\n');
    }
    s.push_str("   ");
    for c in 0..arch.columns {
        let _ = write!(s, "{c:>5}");
    }
    s.push('\n');
    s
}

/// SVG map of the array, one coloured square per engine.
pub fn render_svg(g: &Graph, p: &Placement, arch: &ArchSpec) -> String {
    const CELL: u32 = 28;
    let palette = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1"];
    let networks: Vec<&str> = g
        .subgraphs
        .iter()
        .map(|s| s.network.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (w, h) = (arch.columns * CELL, arch.rows * CELL);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"7\">\n"
    );
    for c in 0..arch.columns {
        for r in 0..arch.rows {
            let y = (arch.rows - 1 - r) * CELL;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#eeeeee\" stroke=\"#999999\"/>",
                c * CELL
            );
        }
    }
    for (&k, &c) in &p.assignment {
        let sg = &g.subgraphs[g.kernels[k].subgraph];
        let ni = networks.iter().position(|n| *n == sg.network).unwrap_or(0);
        let (x, y) = (c.col * CELL, (arch.rows - 1 - c.row) * CELL);
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" stroke=\"#333333\"/><text x=\"{}\" y=\"{}\">{}</text>",
            palette[ni % palette.len()],
            x + 2,
            y + CELL / 2 + 3,
            short_label(&sg.layer_name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{build_gemm_subgraph, GemmParams};
    use crate::tensor::Tensor;
    use std::collections::BTreeSet;

    fn gemm_graph(arch: &ArchSpec) -> Graph {
        let p = GemmParams::tiled(1, 128, 16, 2, 2).with_n_splits(2);
        build_gemm_subgraph(&p, Tensor::filled(&[128, 16], 0.5), None, &[], arch).unwrap()
    }

    fn check_legal(g: &Graph, p: &Placement, arch: &ArchSpec) {
        assert_eq!(p.assignment.len(), g.kernel_count());
        let tiles: BTreeSet<Coord> = p.assignment.values().copied().collect();
        assert_eq!(tiles.len(), p.assignment.len(), "two kernels share a tile");
        assert!(tiles.iter().all(|&c| arch.contains(c)));
        for chain in cascade_chains(g) {
            for w in chain.windows(2) {
                let (a, b) = (p.coord(w[0]).unwrap(), p.coord(w[1]).unwrap());
                assert_eq!(a.row, b.row);
                assert_eq!(a.manhattan(b), 1);
            }
        }
    }

    #[test]
    fn both_strategies_are_legal() {
        let arch = ArchSpec::default();
        let g = gemm_graph(&arch);
        assert!(!cascade_chains(&g).is_empty());
        for p in [place_custom(&g, &arch).unwrap(), place_naive(&g, &arch).unwrap()] {
            check_legal(&g, &p, &arch);
            let r = route_check(&g, &p, &arch).unwrap();
            assert!(r.feasible);
            assert_eq!(congestion_cost(&r), r.total_wirelength);
        }
    }

    #[test]
    fn placement_is_deterministic() {
        let arch = ArchSpec::default();
        let g = gemm_graph(&arch);
        assert_eq!(place_custom(&g, &arch).unwrap().to_json(), place_custom(&g, &arch).unwrap().to_json());
    }

    #[test]
    fn too_small_array_is_rejected() {
        let arch = ArchSpec::default();
        let g = gemm_graph(&arch);
        let mut small = arch.clone();
        small.columns = 2;
        small.rows = 2;
        assert!(place_custom(&g, &small).is_err());
        assert!(place_naive(&g, &small).is_err());
    }

    #[test]
    fn labels_and_maps() {
        assert_eq!(short_label("branch.conv2"), "bc2");
        assert_eq!(short_label("trunk.fc1"), "tf1");
        let arch = ArchSpec::default();
        let g = gemm_graph(&arch);
        let p = place_custom(&g, &arch).unwrap();
        let text = render_text(&g, &p, &arch);
        assert_eq!(text.lines().count(), arch.rows as usize + 1);
        let svg = render_svg(&g, &p, &arch);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
