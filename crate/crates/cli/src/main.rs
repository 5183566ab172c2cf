//! `tilegraph` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tilegraph::characterize::{characterize, compare, render_table, Targets};
use tilegraph::cronet::fit::{fit_config_to_table, FitOptions};
use tilegraph::cronet::{build_with, resolve_model, BuildOptions, MaterialCase, ModelConfig, Size};
use tilegraph::fusion;
use tilegraph::place::{self, Placement};
use tilegraph::sim::{self, CostModel, ExecOptions};
use tilegraph::{ArchSpec, ElemType, Graph};

#[derive(Parser, Debug)]
#[command(name = "tilegraph", version, about = "Map CNN-RNN graphs onto a tiled vector-engine array")]
struct Cli {
    /// Architecture description (TOML). Defaults to the built-in 38x8 array.
    #[arg(long, global = true, env = "TILEGRAPH_ARCH")]
    arch: Option<PathBuf>,
    /// Seed for weights and inputs (defaults to the model's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// `cronet` or a model TOML file.
    #[arg(long, default_value = "cronet")]
    model: String,
    #[arg(long, default_value = "30x20")]
    size: String,
}

#[derive(Args, Debug, Clone)]
struct GraphArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Read a graph dump instead of building the model.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Custom,
    Naive,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Etype {
    Fp32,
    Bf16,
    Int8,
}

impl From<Etype> for ElemType {
    fn from(e: Etype) -> Self {
        match e {
            Etype::Fp32 => ElemType::F32,
            Etype::Bf16 => ElemType::Bf16,
            Etype::Int8 => ElemType::Int8,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameters, MACs and memory.
    Characterize {
        #[command(flatten)]
        model: ModelArgs,
        /// Report every shipped size side by side.
        #[arg(long)]
        all_sizes: bool,
        #[arg(long, value_enum, default_value = "bf16")]
        etype: Etype,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Compare against the published targets.
        #[arg(long)]
        check: bool,
    },
    /// Lower the model to a kernel graph.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        /// Emit activations as separate kernels.
        #[arg(long)]
        unfused: bool,
        #[arg(long)]
        emit_graph: Option<PathBuf>,
    },
    /// Run fusion passes on the unfused graph.
    Fuse {
        #[command(flatten)]
        model: ModelArgs,
        /// Highest fusion level to apply (0 = none).
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(0..=3))]
        level: u8,
        #[arg(long)]
        emit_graph: Option<PathBuf>,
    },
    /// Place the fused graph and report routability.
    Place {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum, default_value = "custom")]
        strategy: Strategy,
        /// Write the array map (`.svg` or text).
        #[arg(long)]
        emit_map: Option<PathBuf>,
        /// Write the placement as JSON.
        #[arg(long)]
        emit_placement: Option<PathBuf>,
    },
    /// Route check with per-edge loads.
    Route {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum, default_value = "custom")]
        strategy: Strategy,
    },
    /// Execute the graph and estimate latency.
    Simulate {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum, default_value = "bf16")]
        etype: Etype,
        /// Reference element type for error metrics.
        #[arg(long, value_enum)]
        compare: Option<Etype>,
    },
    /// Engine, memory-tile and GMIO usage.
    Report {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        json: bool,
    },
    /// Search hyperparameters matching a characterization table.
    Fit {
        /// Targets TOML; defaults to the shipped table.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        beam: usize,
        /// Write the best configuration as TOML.
        #[arg(long)]
        emit_config: Option<PathBuf>,
    },
}

macro_rules! out {
    ($($t:tt)*) => { emit(&format!($($t)*)) };
}

macro_rules! outln {
    ($($t:tt)*) => { emit(&format!("{}\n", format_args!($($t)*))) };
}

/// Write to stdout; a closed pipe ends the process quietly.
fn emit(s: &str) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().lock().write_all(s.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(1);
    }
}

struct Ctx {
    arch: ArchSpec,
    seed: Option<u64>,
}

impl Ctx {
    fn model(&self, m: &ModelArgs) -> Result<(ModelConfig, Size)> {
        let cfg = resolve_model(&m.model)?;
        let size: Size = m.size.parse()?;
        Ok((cfg, size))
    }

    fn seed(&self, cfg: &ModelConfig) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }

    fn build(&self, m: &ModelArgs, unfused: bool) -> Result<(ModelConfig, Size, Graph)> {
        let (cfg, size) = self.model(m)?;
        let opts = BuildOptions { seed: self.seed(&cfg), unfused_activations: unfused };
        let g = build_with(&cfg, size, &self.arch, &opts)?;
        Ok((cfg, size, g))
    }

    fn fused(&self, a: &GraphArgs) -> Result<(ModelConfig, Size, Graph)> {
        let (cfg, size) = self.model(&a.model)?;
        if let Some(p) = &a.graph {
            let doc = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let g = Graph::from_json(&doc)?;
            let g = if g.passes.l3 { g } else { fusion::fuse_all(&g, &self.arch)? };
            return Ok((cfg, size, g));
        }
        let (cfg, size, g) = self.build(&a.model, false)?;
        Ok((cfg, size, fusion::fuse_all(&g, &self.arch)?))
    }

    fn place(&self, g: &Graph, s: Strategy) -> Result<Placement> {
        Ok(match s {
            Strategy::Custom => place::place_custom(g, &self.arch)?,
            Strategy::Naive => place::place_naive(g, &self.arch)?,
        })
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value")
}

fn graph_summary(g: &Graph, arch: &ArchSpec) -> serde_json::Value {
    let mut kinds = std::collections::BTreeMap::new();
    for n in &g.nets {
        *kinds.entry(n.kind.name()).or_insert(0usize) += 1;
    }
    let v = g.validate(arch);
    json!({
        "name": g.name,
        "kernels": g.kernel_count(),
        "subgraphs": g.subgraphs.len(),
        "nets": kinds,
        "memtiles": g.memtile_plan.len(),
        "gmio": g.gmio_channels(),
        "passes": g.passes,
        "valid": v.is_clean(),
        "findings": v.findings,
    })
}

fn run(cli: Cli) -> Result<()> {
    let arch = match &cli.arch {
        Some(p) => ArchSpec::load(p)?,
        None => ArchSpec::default(),
    };
    arch.validate()?;
    let ctx = Ctx { arch, seed: cli.seed };
    match cli.cmd {
        Command::Characterize { model, all_sizes, etype, json, check } => {
            let (cfg, size) = ctx.model(&model)?;
            let sizes = if all_sizes { Size::ALL.to_vec() } else { vec![size] };
            let reports = sizes
                .iter()
                .map(|&s| characterize(&cfg, s, etype.into()))
                .collect::<tilegraph::Result<Vec<_>>>()?;
            if json {
                outln!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                out!("{}", render_table(&reports));
            }
            if check {
                let checks = compare(&cfg, &Targets::shipped())?;
                for c in &checks {
                    let mark = if c.pass { "ok  " } else { "FAIL" };
                    outln!("{mark} {:<32} expected {:>7} actual {:>12.0} err {:>6.2}%", c.what, c.expected, c.actual, c.rel_err * 100.0);
                }
                if checks.iter().any(|c| !c.pass) {
                    bail!("characterization does not match the targets");
                }
            }
        }
        Command::Build { model, unfused, emit_graph } => {
            let (_, _, g) = ctx.build(&model, unfused)?;
            if let Some(p) = emit_graph {
                write(&p, &g.to_json())?;
            }
            outln!("{}", pretty(&graph_summary(&g, &ctx.arch)));
        }
        Command::Fuse { model, level, emit_graph } => {
            let (_, _, g) = ctx.build(&model, true)?;
            let before = graph_summary(&g, &ctx.arch);
            let mut f = g;
            if level >= 1 {
                f = fusion::fuse_l1(&f);
            }
            if level >= 2 {
                f = fusion::fuse_l2(&f, &ctx.arch)?;
            }
            if level >= 3 {
                f = fusion::fuse_l3(&f, &ctx.arch)?;
            }
            if let Some(p) = emit_graph {
                write(&p, &f.to_json())?;
            }
            outln!("{}", pretty(&json!({ "before": before, "after": graph_summary(&f, &ctx.arch) })));
        }
        Command::Place { graph, strategy, emit_map, emit_placement } => {
            let (_, _, g) = ctx.fused(&graph)?;
            let p = ctx.place(&g, strategy)?;
            let r = place::route_check(&g, &p, &ctx.arch)?;
            if let Some(path) = emit_map {
                let body = if path.extension().is_some_and(|e| e == "svg") {
                    place::render_svg(&g, &p, &ctx.arch)
                } else {
                    place::render_text(&g, &p, &ctx.arch)
                };
                write(&path, &body)?;
            }
            if let Some(path) = emit_placement {
                write(&path, &p.to_json())?;
            }
            outln!(
                "{}",
                pretty(&json!({
                    "strategy": p.strategy,
                    "kernels_placed": p.assignment.len(),
                    "feasible": r.feasible,
                    "total_wirelength": r.total_wirelength,
                    "max_edge_load": r.max_edge_load(),
                    "congestion_cost": place::congestion_cost(&r),
                    "overflows": r.overflows,
                }))
            );
        }
        Command::Route { graph, strategy } => {
            let (_, _, g) = ctx.fused(&graph)?;
            let p = ctx.place(&g, strategy)?;
            outln!("{}", place::route_check(&g, &p, &ctx.arch)?.to_json());
        }
        Command::Simulate { graph, etype, compare } => {
            let (cfg, size, g) = ctx.fused(&graph)?;
            let case = MaterialCase::generate(&cfg, size, ctx.seed(&cfg));
            let inputs = case.inputs();
            let etype: ElemType = etype.into();
            let opts_for = |e: ElemType| -> Result<ExecOptions> {
                let mut o = ExecOptions::new(e);
                if e == ElemType::Int8 {
                    o.calibration = Some(sim::calibrate(&g, &inputs)?);
                }
                Ok(o)
            };
            let run = sim::execute(&g, &inputs, &opts_for(etype)?)?;
            let u = &run.outputs["U"];
            let errors = match compare {
                Some(c) => {
                    let r = sim::execute(&g, &inputs, &opts_for(c.into())?)?;
                    let base = &r.outputs["U"];
                    json!({
                        "reference": ElemType::from(c).name(),
                        "rel_l2_error": u.rel_l2_error(base),
                        "max_abs_diff": u.max_abs_diff(base),
                    })
                }
                None => serde_json::Value::Null,
            };
            let p = place::place_custom(&g, &ctx.arch)?;
            let lat = sim::estimate_latency(&g, &p, &ctx.arch, &CostModel::new(etype))?;
            outln!(
                "{}",
                pretty(&json!({
                    "etype": etype.name(),
                    "size": size.to_string(),
                    "output_shape": u.shape,
                    "errors": errors,
                    "latency": lat,
                    "traffic": sim::traffic_report(&run.trace),
                }))
            );
        }
        Command::Report { graph, json } => {
            let (_, _, g) = ctx.fused(&graph)?;
            let p = place::place_custom(&g, &ctx.arch)?;
            let r = sim::resource_report(&g, &p, &ctx.arch);
            if json {
                outln!("{}", r.to_json());
            } else {
                outln!("{:<8} {:<16} {:>7}", "network", "layer", "engines");
                for l in &r.layers {
                    outln!("{:<8} {:<16} {:>7}", l.network, l.layer, l.engines);
                }
                for n in &r.networks {
                    outln!("{:<8} engines {:>4} memtiles {:>3} gmio {:>3}", n.network, n.engines, n.memtiles, n.gmio);
                }
                outln!(
                    "total    engines {:>4} ({}%) memtiles {:>3} ({}%) gmio {:>3} ({}%)",
                    r.engines, r.engine_pct, r.memtiles, r.memtile_pct, r.gmio, r.gmio_pct
                );
            }
        }
        Command::Fit { table, beam, emit_config } => {
            let targets = match table {
                Some(p) => {
                    let doc = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Targets::from_toml(&doc)?
                }
                None => Targets::shipped(),
            };
            let report = fit_config_to_table(&targets, &FitOptions { beam, ..FitOptions::default() })?;
            if let (Some(p), Some(best)) = (emit_config, report.best()) {
                write(&p, &best.config.to_toml())?;
            }
            outln!("{}", report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
