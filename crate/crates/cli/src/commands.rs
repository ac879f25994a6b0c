//! Subcommand definitions and their implementations. Each command returns a
//! JSON summary that `main` prints to stdout.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use bpurf_core::bench::{run_bench, scaled_city_config, BenchConfig};
use bpurf_core::downstream::{evaluate, EvalConfig, ModelEmbedder, NoiseEmbedder, RegionEmbedder, TaskDataset, TaskHead};
use bpurf_core::embedding::{init_transr, TokenEmbeddingTable, TransrConfig};
use bpurf_core::graph::{build_graph, build_graph_with, GraphBundle};
use bpurf_core::prompt::parse_prompt_collection;
use bpurf_core::region::RegionModel;
use bpurf_core::schema::{load_city, validate};
use bpurf_core::synth::{generate_city, SynthConfig};
use bpurf_core::trainer::{train, TrainingConfig};
use bpurf_core::trips::load_trips;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::exit::usage;
use crate::output::EmbedResponse;
use crate::service::{serve, ServiceState};

#[derive(Debug, Parser)]
#[command(name = "bpurf", version, about = "Region embeddings from boundary prompts over a spatial token graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic city bundle.
    Synth(SynthArgs),
    /// Build the token graph and its indexes from a schema file.
    BuildGraph(BuildGraphArgs),
    /// Pre-train token embeddings with TransR.
    InitEmbed(InitEmbedArgs),
    /// Train the encoder and region model.
    Train(TrainArgs),
    /// Embed boundaries from a GeoJSON file.
    Embed(EmbedArgs),
    /// Ridge evaluation on sampled region batches.
    Eval(EvalArgs),
    /// Time indexed against brute-force extraction.
    Bench(BenchArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_poi: Option<usize>,
    #[arg(long)]
    pub n_road: Option<usize>,
    #[arg(long)]
    pub n_junction: Option<usize>,
    #[arg(long)]
    pub trips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// R-tree node capacity.
    #[arg(long)]
    pub branching: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitEmbedArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub neg_per_pos: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub embed: PathBuf,
    #[arg(long)]
    pub trips: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Cycle over a fixed set of pre-sampled batches.
    #[arg(long)]
    pub mini: bool,
    #[arg(long)]
    pub n_batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Graph directory; defaults to the one recorded in the model.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub boundaries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Events CSV with x, y, value columns.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub batches: usize,
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Replace embeddings with seeded Gaussian noise of the same width.
    #[arg(long)]
    pub noise: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub graph: Option<PathBuf>,
    /// Generate a synthetic graph with about this many tokens instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    #[arg(long)]
    pub min_area_frac: Option<f64>,
    #[arg(long)]
    pub max_area_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Overridden by BPURF_PORT when set.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Task event files, as `PATH` or `NAME=PATH`.
    #[arg(long, num_args = 1..)]
    pub tasks: Vec<String>,
    #[arg(long)]
    pub cors_origin: Option<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<Value> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildGraph(a) => build(a),
        Command::InitEmbed(a) => init_embed(a),
        Command::Train(a) => train_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|_| bpurf_core::Error::MissingFile(path.to_path_buf()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<Value> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_poi {
        cfg.n_poi = n;
    }
    if let Some(n) = a.n_road {
        cfg.n_road = n;
    }
    if let Some(n) = a.n_junction {
        cfg.n_junction = n;
    }
    if let Some(n) = a.trips {
        cfg.trip_count = n;
    }
    let city = generate_city(&cfg)?;
    city.write_bundle(&a.out)?;
    Ok(json!({
        "out": a.out,
        "seed": cfg.seed,
        "pois": city.pois.len(),
        "roads": city.roads.len(),
        "junctions": city.junctions.len(),
        "trips": city.trips.len(),
    }))
}

fn build(a: BuildGraphArgs) -> anyhow::Result<Value> {
    let city = load_city(&a.schema)?;
    let report = validate(&city.schema, &city.entities, &city.datasets);
    let bundle = match a.branching {
        Some(0 | 1) => return Err(usage("--branching must be at least 2")),
        Some(b) => build_graph_with(&city, b)?,
        None => build_graph(&city)?,
    };
    bundle.save(&a.out)?;
    let g = &bundle.graph;
    Ok(json!({
        "out": a.out,
        "n_spatial": g.spatial_count(),
        "n_virtual": g.virtual_count(),
        "n_edges": g.edge_count(),
        "validation": report,
    }))
}

fn init_embed(a: InitEmbedArgs) -> anyhow::Result<Value> {
    if a.dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    let bundle = GraphBundle::load(&a.graph)?;
    let d = TransrConfig::default();
    let cfg = TransrConfig {
        dim: a.dim,
        epochs: a.epochs.unwrap_or(d.epochs),
        margin: a.margin.unwrap_or(d.margin),
        neg_per_pos: a.neg_per_pos.unwrap_or(d.neg_per_pos),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let table = init_transr(&bundle.graph, &cfg)?;
    table.save(&a.out)?;
    Ok(json!({"out": a.out, "dim": table.dim, "types": table.type_names}))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<Value> {
    let mut cfg: TrainingConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainingConfig::default(),
    };
    if a.mini {
        cfg.mini_mode = true;
    }
    if let Some(n) = a.n_batch {
        cfg.n_batch = n;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let bundle = GraphBundle::load(&a.graph)?;
    let table = TokenEmbeddingTable::load(&a.embed)?;
    let trips = load_trips(&a.trips)?;
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut outcome = train(&bundle, table, &trips, &cfg, Some(&mut log))?;
    drop(log);
    outcome.model.manifest.graph_dir = Some(fs::canonicalize(&a.graph)?);
    outcome.model.save(&a.out)?;
    let first = outcome.log.first().map(|s| s.l_total);
    let last = outcome.log.last().map(|s| s.l_total);
    Ok(json!({
        "out": a.out,
        "steps": outcome.log.len(),
        "first_loss": first,
        "last_loss": last,
        "log": log_path,
    }))
}

/// Load a model and the graph it was trained on.
pub fn load_model(model_dir: &Path, graph: Option<&Path>) -> anyhow::Result<(RegionModel, GraphBundle)> {
    let model = RegionModel::load(model_dir)?;
    let graph_dir = match graph {
        Some(g) => g.to_path_buf(),
        None => model
            .manifest
            .graph_dir
            .clone()
            .ok_or_else(|| usage("model records no graph directory; pass --graph"))?,
    };
    let bundle = GraphBundle::load(&graph_dir)?;
    model.table.check_against(&bundle.graph)?;
    Ok((model, bundle))
}

fn embed(a: EmbedArgs) -> anyhow::Result<Value> {
    let (model, bundle) = load_model(&a.model, a.graph.as_deref())?;
    let text = fs::read_to_string(&a.boundaries).map_err(|_| bpurf_core::Error::MissingFile(a.boundaries.clone()))?;
    let prompts = parse_prompt_collection(&text)?;
    let results = model.embed_regions(&prompts, &bundle)?;
    let resp = EmbedResponse::new(model.d_region(), &bundle.graph, &results);
    write_json(&a.out, &resp)?;
    let failed = resp.errors.iter().filter(|e| e.is_some()).count();
    Ok(json!({"out": a.out, "rows": resp.embeddings.len(), "failed": failed}))
}

fn eval(a: EvalArgs) -> anyhow::Result<Value> {
    if a.batches == 0 {
        return Err(usage("--batches must be positive"));
    }
    let (model, bundle) = load_model(&a.model, a.graph.as_deref())?;
    let task = TaskDataset::load(&a.task)?;
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        n_batches: a.batches,
        batch_size: a.batch_size,
        seed: a.seed.unwrap_or(d.seed),
        lambda: a.lambda.unwrap_or(d.lambda),
        ..d
    };
    let model_emb = ModelEmbedder {
        model: &model,
        bundle: &bundle,
    };
    let noise_emb = NoiseEmbedder {
        dim: model.d_region(),
        seed: cfg.seed,
    };
    let embedder: &dyn RegionEmbedder = if a.noise { &noise_emb } else { &model_emb };
    let report = evaluate(embedder, &bundle, &task, &cfg)?;
    let mut v = serde_json::to_value(&report)?;
    v["embedder"] = json!(if a.noise { "noise" } else { "model" });
    write_json(&a.out, &v)?;
    Ok(json!({
        "out": a.out,
        "mean_mae": report.mean_mae,
        "mean_rmse": report.mean_rmse,
        "mean_r2": report.mean_r2,
    }))
}

fn bench(a: BenchArgs) -> anyhow::Result<Value> {
    let bundle = match (&a.graph, a.synthetic) {
        (Some(g), None) => GraphBundle::load(g)?,
        (None, Some(m)) => {
            let city = generate_city(&scaled_city_config(m, a.seed.unwrap_or(17)))?;
            build_graph(&city.to_city_data())?
        }
        _ => return Err(usage("pass exactly one of --graph and --synthetic")),
    };
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        n_queries: a.queries,
        min_area_frac: a.min_area_frac.unwrap_or(d.min_area_frac),
        max_area_frac: a.max_area_frac.unwrap_or(d.max_area_frac),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let report = run_bench(&bundle, &cfg)?;
    write_json(&a.out, &json!({"config": cfg, "report": report}))?;
    Ok(json!({"out": a.out, "speedup": report.speedup, "mean_m_q": report.mean_m_q, "mismatches": report.mismatches}))
}

/// `NAME=PATH`, or a bare path whose stem names the task.
pub fn parse_task_spec(s: &str) -> (Option<String>, PathBuf) {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains('/') => (Some(name.to_string()), PathBuf::from(path)),
        _ => (None, PathBuf::from(s)),
    }
}

/// Fit a ridge head per task on one evaluation batch.
pub fn fit_heads(model: &RegionModel, bundle: &GraphBundle, tasks: &[String]) -> anyhow::Result<BTreeMap<String, TaskHead>> {
    let embedder = ModelEmbedder { model, bundle };
    let mut heads = BTreeMap::new();
    for spec in tasks {
        let (name, path) = parse_task_spec(spec);
        let mut task = TaskDataset::load(&path)?;
        if let Some(n) = name {
            task.name = n;
        }
        let head = TaskHead::fit(&embedder, bundle, &task, &EvalConfig::default())?;
        heads.insert(task.name.clone(), head);
    }
    Ok(heads)
}

/// Port from BPURF_PORT if set, else the flag.
pub fn effective_port(flag: u16, env: Option<&str>) -> anyhow::Result<u16> {
    match env {
        Some(v) => v.trim().parse().map_err(|_| usage(format!("BPURF_PORT is not a port: {v}"))),
        None => Ok(flag),
    }
}

fn serve_cmd(a: ServeArgs) -> anyhow::Result<Value> {
    let port = effective_port(a.port, std::env::var("BPURF_PORT").ok().as_deref())?;
    let addr: SocketAddr = format!("{}:{}", a.host, port)
        .parse()
        .map_err(|_| usage(format!("bad listen address {}:{port}", a.host)))?;
    let (model, bundle) = load_model(&a.model, a.graph.as_deref())?;
    let heads = fit_heads(&model, &bundle, &a.tasks)?;
    let state = Arc::new(ServiceState::new(model, bundle, heads)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state, addr, a.cors_origin.as_deref()))?;
    Ok(json!({"stopped": true}))
}
