//! Command implementations behind the `ago` binary.
//!
//! Every command reads a graph document, runs the corresponding pipeline
//! stage, and emits machine-readable JSON (schema_version 1). Identical
//! inputs, flags, and seed produce byte-identical outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::fusion::{self, FusionVerdict, IterSpace, TileSpec};
use crate::graph::{emit_dot, Graph, GraphError};
use crate::interp::{self, InterpError, MAX_EXTENT};
use crate::partition::{
    baseline_partition, cluster, is_acyclic_partition, partition_stats, Partition, PartitionError,
    PartitionStats,
};
use crate::reformer::{run_divide_and_conquer, DncConfig, ReformerError};
use crate::tuner::{
    cost, tune, CostConfig, FusionMode, Schedule, ScheduleError, SearchSpace, TuneHistory,
};
use crate::weight::{fit, BudgetObservation, WeightError, WeightParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes: 1 usage, 2 parse, 3 validation.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Parse(_) => CliError::Parse(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PartitionError> for CliError {
    fn from(e: PartitionError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<InterpError> for CliError {
    fn from(e: InterpError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ReformerError> for CliError {
    fn from(e: ReformerError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn read_graph(path: &Path) -> Result<Graph, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Graph::from_json(&text)?)
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    text
}

/// Weight parameters from explicit (c, b) or a budget-observation CSV.
pub fn resolve_params(
    c: f64,
    b: f64,
    fit_csv: Option<&Path>,
) -> Result<WeightParams, CliError> {
    match fit_csv {
        None => WeightParams::new(c, b).map_err(CliError::from),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let obs = parse_fit_csv(&text)?;
            Ok(fit(&obs)?)
        }
    }
}

/// CSV rows are `budget,EXTENTSxEXTENTS,...` with one x-separated loop
/// nest per remaining field, e.g. `120,1x64x28x28x32x3x3`.
pub fn parse_fit_csv(text: &str) -> Result<Vec<BudgetObservation>, CliError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let budget: f64 = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| CliError::Parse(format!("fit csv line {}: {e}", lineno + 1)))?;
        let nests: Result<Vec<_>, CliError> = fields
            .map(|field| {
                let extents: Result<Vec<u64>, _> =
                    field.trim().split('x').map(|v| v.trim().parse()).collect();
                let extents = extents
                    .map_err(|e| CliError::Parse(format!("fit csv line {}: {e}", lineno + 1)))?;
                Ok(crate::graph::LoopNest {
                    spatial: extents
                        .iter()
                        .enumerate()
                        .map(|(i, e)| (format!("d{i}"), *e))
                        .collect(),
                    reduction: Vec::new(),
                })
            })
            .collect();
        let obs = BudgetObservation::new(nests?, budget)?;
        out.push(obs);
    }
    if out.is_empty() {
        return Err(CliError::Parse("fit csv contains no observations".into()));
    }
    Ok(out)
}

/// `o=1,h=1,w=16` into a TileSpec.
pub fn parse_tile(text: &str) -> Result<TileSpec, CliError> {
    let mut tiles = TileSpec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("bad tile entry \"{part}\"")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("bad tile entry \"{part}\": {e}")))?;
        tiles.set(name.trim(), value);
    }
    Ok(tiles)
}

fn check_interp_cap(graph: &Graph) -> Result<(), CliError> {
    for node in graph.nodes() {
        let nest = node.loop_nest()?;
        for (name, extent) in nest.spatial.iter().chain(nest.reduction.iter()) {
            if *extent > MAX_EXTENT {
                return Err(CliError::Validation(format!(
                    "node \"{}\": loop \"{name}\" extent {extent} exceeds the interpreter cap {MAX_EXTENT}",
                    node.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PartitionDoc<'a> {
    schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    subgraphs: &'a [crate::partition::Subgraph],
    stats: PartitionStats,
}

#[derive(Debug, Serialize)]
struct SideBySide {
    schema_version: u32,
    ago: SummaryEntry,
    baseline: SummaryEntry,
}

#[derive(Debug, Serialize)]
struct SummaryEntry {
    subgraphs: usize,
    stats: PartitionStats,
}

pub struct PartitionConfig {
    pub input: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub threshold: f64,
    pub max_complex: Option<usize>,
    pub params: WeightParams,
}

fn partition_both(
    graph: &Graph,
    cfg: &PartitionConfig,
) -> Result<(Partition, Partition), CliError> {
    if !(cfg.threshold > 0.0) {
        return Err(CliError::Usage(format!(
            "--threshold must be positive, got {}",
            cfg.threshold
        )));
    }
    let ago = cluster(graph, &cfg.params, cfg.threshold, cfg.max_complex);
    debug_assert!(is_acyclic_partition(graph, &ago).unwrap_or(false));
    let baseline = baseline_partition(graph, &cfg.params);
    Ok((ago, baseline))
}

/// Partition a graph, write partition/baseline JSON plus DOT, and print
/// both sets of stats side by side.
pub fn cmd_partition(cfg: &PartitionConfig) -> Result<String, CliError> {
    let graph = read_graph(&cfg.input)?;
    let (ago, baseline) = partition_both(&graph, cfg)?;
    let summary = SideBySide {
        schema_version: SCHEMA_VERSION,
        ago: SummaryEntry {
            subgraphs: ago.len(),
            stats: partition_stats(&ago),
        },
        baseline: SummaryEntry {
            subgraphs: baseline.len(),
            stats: partition_stats(&baseline),
        },
    };
    if let Some(dir) = &cfg.out_dir {
        write_out(
            dir,
            "partition.json",
            &to_json(&PartitionDoc {
                schema_version: SCHEMA_VERSION,
                threshold: Some(cfg.threshold),
                subgraphs: &ago.subgraphs,
                stats: partition_stats(&ago),
            }),
        )?;
        write_out(
            dir,
            "baseline.json",
            &to_json(&PartitionDoc {
                schema_version: SCHEMA_VERSION,
                threshold: None,
                subgraphs: &baseline.subgraphs,
                stats: partition_stats(&baseline),
            }),
        )?;
        write_out(dir, "partition.dot", &emit_dot(&graph, Some(&ago)))?;
    }
    Ok(to_json(&summary))
}

/// Stats only, no files.
pub fn cmd_stats(cfg: &PartitionConfig) -> Result<String, CliError> {
    let graph = read_graph(&cfg.input)?;
    let (ago, baseline) = partition_both(&graph, cfg)?;
    Ok(to_json(&SideBySide {
        schema_version: SCHEMA_VERSION,
        ago: SummaryEntry {
            subgraphs: ago.len(),
            stats: partition_stats(&ago),
        },
        baseline: SummaryEntry {
            subgraphs: baseline.len(),
            stats: partition_stats(&baseline),
        },
    }))
}

#[derive(Debug, Serialize)]
struct FuseReport {
    schema_version: u32,
    pairs: Vec<FusePair>,
}

#[derive(Debug, Serialize)]
struct FusePair {
    producer: String,
    consumer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<FusionVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    analysis: Option<PairAnalysis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intensive_boundary: Option<TileSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct PairAnalysis {
    tile: TileSpec,
    outer: IterSpace,
    footprint: IterSpace,
    symbolic: String,
    fused_trips: u64,
    unfused_trips: u64,
    oracle_fused_trips: u64,
    ratio: f64,
    cond1: bool,
    cond2: bool,
}

pub struct FuseConfig {
    pub input: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub tile: Option<TileSpec>,
}

fn render_product(space: &IterSpace) -> String {
    space
        .loops
        .iter()
        .map(|(name, e)| format!("{name}:{e}"))
        .collect::<Vec<_>>()
        .join("*")
}

/// Analyze every complex-to-complex edge: fusion verdict, trip counts
/// under the requested tiling (all-ones boundary by default), redundancy
/// conditions, and the derived redundancy-free boundary when one exists.
pub fn cmd_fuse_analyze(cfg: &FuseConfig) -> Result<String, CliError> {
    let graph = read_graph(&cfg.input)?;
    let mut pairs = Vec::new();
    for (src, dst) in graph.edges() {
        let up = graph.node(src)?;
        let down = graph.node(dst)?;
        if !up.kind.is_complex() || !down.kind.is_complex() {
            continue;
        }
        let mut pair = FusePair {
            producer: src.to_string(),
            consumer: dst.to_string(),
            verdict: None,
            analysis: None,
            intensive_boundary: None,
            error: None,
        };
        match fusion::intensive_fusion_legal(up, down) {
            Ok(verdict) => {
                if verdict.category != fusion::FusionCategory::NotApplicable {
                    if let Ok(schedule) =
                        fusion::derive_intensive_schedule(up, down, &TileSpec::new())
                    {
                        pair.intensive_boundary =
                            Some(schedule.tile_of(&down.id).boundary.clone());
                    }
                }
                pair.verdict = Some(verdict);
                let tiles = match &cfg.tile {
                    Some(t) => t.clone(),
                    None => {
                        let nest = down.loop_nest()?;
                        let mut ones = TileSpec::new();
                        for (name, _) in &nest.spatial {
                            ones.set(name, 1);
                        }
                        ones
                    }
                };
                match fusion::trips_breakdown(up, down, &tiles) {
                    Ok(breakdown) => {
                        let red = fusion::redundancy(up, down, &tiles)
                            .expect("breakdown succeeded, redundancy must too");
                        let oracle = interp::count_pair_trips(up, down, &tiles)?;
                        pair.analysis = Some(PairAnalysis {
                            tile: tiles,
                            symbolic: format!(
                                "({}) x ({})",
                                render_product(&breakdown.outer),
                                render_product(&breakdown.footprint)
                            ),
                            outer: breakdown.outer,
                            footprint: breakdown.footprint,
                            fused_trips: breakdown.fused,
                            unfused_trips: breakdown.unfused,
                            oracle_fused_trips: oracle.upstream,
                            ratio: red.ratio,
                            cond1: red.cond1,
                            cond2: red.cond2,
                        });
                    }
                    Err(e) => pair.error = Some(e.to_string()),
                }
            }
            Err(e) => pair.error = Some(e.to_string()),
        }
        pairs.push(pair);
    }
    let report = to_json(&FuseReport {
        schema_version: SCHEMA_VERSION,
        pairs,
    });
    if let Some(dir) = &cfg.out_dir {
        write_out(dir, "fuse_report.json", &report)?;
    }
    Ok(report)
}

pub struct TuneCliConfig {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub budget: usize,
    pub seed: u64,
    pub cost: CostConfig,
    pub space: SearchSpace,
}

#[derive(Debug, Serialize)]
struct TuneSummary {
    schema_version: u32,
    seed: u64,
    budget: usize,
    trials: usize,
    best_cost: f64,
    best_digest: String,
}

fn history_csv(history: &TuneHistory) -> String {
    let mut out = String::from("trial,cost,best\n");
    for t in &history.trials {
        out.push_str(&format!("{},{},{}\n", t.index, t.cost, t.best));
    }
    out
}

/// Tune the whole graph as one subgraph; writes history.csv and
/// schedule.json under the output directory.
pub fn cmd_tune(cfg: &TuneCliConfig) -> Result<String, CliError> {
    if cfg.budget < 1 {
        return Err(CliError::Usage("--budget must be at least 1".into()));
    }
    let graph = read_graph(&cfg.input)?;
    check_interp_cap(&graph)?;
    let nodes: BTreeSet<String> = graph.nodes().iter().map(|n| n.id.clone()).collect();
    let (schedule, history) = tune(
        &graph,
        &nodes,
        cfg.budget,
        cfg.seed,
        None,
        &cfg.cost,
        &cfg.space,
    )?;
    write_out(&cfg.out_dir, "history.csv", &history_csv(&history))?;
    write_out(&cfg.out_dir, "schedule.json", &to_json(&schedule))?;
    Ok(to_json(&TuneSummary {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        budget: cfg.budget,
        trials: history.len(),
        best_cost: history.best().unwrap_or(f64::NAN),
        best_digest: schedule.digest(),
    }))
}

pub struct PipelineCliConfig {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub threshold: f64,
    pub mini_threshold: f64,
    pub mini_budget: usize,
    pub join_budget: usize,
    pub window: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub max_complex: Option<usize>,
    pub params: WeightParams,
    pub cost: CostConfig,
    pub space: SearchSpace,
}

#[derive(Debug, Serialize)]
struct PipelineReport {
    schema_version: u32,
    seed: u64,
    threshold: f64,
    mini_threshold: f64,
    mini_budget: usize,
    join_budget: usize,
    partition: PartitionSection,
    subgraphs: Vec<SubgraphReport>,
    total_cost: f64,
}

#[derive(Debug, Serialize)]
struct PartitionSection {
    subgraphs: Vec<crate::partition::Subgraph>,
    stats: PartitionStats,
}

#[derive(Debug, Serialize)]
struct SubgraphReport {
    id: usize,
    nodes: Vec<String>,
    weight: f64,
    minis: Vec<MiniSection>,
    join_evals: usize,
    total_evals: usize,
    final_cost: f64,
    schedule: Schedule,
    fusion_pairs: Vec<PairStatus>,
    history: Vec<HistoryRow>,
}

#[derive(Debug, Serialize)]
struct MiniSection {
    nodes: Vec<String>,
    evals: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_cost: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PairStatus {
    producer: String,
    consumer: String,
    mode: FusionMode,
    category: fusion::FusionCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    trial: usize,
    cost: f64,
    best: f64,
}

fn history_rows(history: &TuneHistory) -> Vec<HistoryRow> {
    history
        .trials
        .iter()
        .map(|t| HistoryRow {
            trial: t.index,
            cost: t.cost,
            best: t.best,
        })
        .collect()
}

/// Oracle-measured redundancy ratio of a complex pair under the
/// consumer's boundary tiling in `schedule`.
fn oracle_ratio(
    graph: &Graph,
    schedule: &Schedule,
    producer: &str,
    consumer: &str,
) -> Option<f64> {
    let up = graph.node(producer).ok()?;
    let down = graph.node(consumer).ok()?;
    let tiles = schedule.tile_of(consumer).boundary;
    let trips = interp::count_pair_trips(up, down, &tiles).ok()?;
    let unfused = up.loop_nest().ok()?.spatial_size();
    Some(trips.upstream as f64 / unfused as f64)
}

/// The full workflow: partition, divide-and-conquer tune every subgraph,
/// and write a deterministic report with per-pair fusion outcomes.
pub fn cmd_pipeline(cfg: &PipelineCliConfig) -> Result<String, CliError> {
    if cfg.mini_budget < 1 || cfg.join_budget < 1 {
        return Err(CliError::Usage("budgets must be at least 1".into()));
    }
    if !(cfg.threshold > 0.0) || !(cfg.mini_threshold > 0.0) {
        return Err(CliError::Usage("thresholds must be positive".into()));
    }
    if cfg.mini_threshold > cfg.threshold {
        return Err(CliError::Usage(format!(
            "--mini-threshold ({}) must not exceed --threshold ({})",
            cfg.mini_threshold, cfg.threshold
        )));
    }
    let graph = read_graph(&cfg.input)?;
    check_interp_cap(&graph)?;
    let partition = cluster(&graph, &cfg.params, cfg.threshold, cfg.max_complex);
    let dnc = DncConfig {
        params: cfg.params,
        td_mini: cfg.mini_threshold,
        mini_budget: cfg.mini_budget,
        join_budget: cfg.join_budget,
        window: cfg.window,
        epsilon: cfg.epsilon,
        cost: cfg.cost,
        space: cfg.space,
    };
    let mut subgraph_reports = Vec::new();
    let mut total_cost = 0.0;
    for sg in &partition.subgraphs {
        let outcome = run_divide_and_conquer(&graph, sg, &dnc, cfg.seed)?;
        let final_cost = cost(&graph, &sg.nodes, &outcome.schedule, &cfg.cost)?;
        total_cost += final_cost;
        let fusion_pairs = outcome
            .schedule
            .fusions
            .iter()
            .filter_map(|d| {
                let up = graph.node(&d.producer).ok()?;
                let down = graph.node(&d.consumer).ok()?;
                if !up.kind.is_complex() || !down.kind.is_complex() {
                    return None;
                }
                let category = fusion::intensive_fusion_legal(up, down)
                    .map(|v| v.category)
                    .unwrap_or(fusion::FusionCategory::NotApplicable);
                Some(PairStatus {
                    producer: d.producer.clone(),
                    consumer: d.consumer.clone(),
                    mode: d.mode,
                    category,
                    oracle_ratio: oracle_ratio(&graph, &outcome.schedule, &d.producer, &d.consumer),
                })
            })
            .collect();
        subgraph_reports.push(SubgraphReport {
            id: sg.id,
            nodes: sg.nodes.iter().cloned().collect(),
            weight: sg.weight,
            minis: outcome
                .minis
                .iter()
                .map(|m| MiniSection {
                    nodes: m.nodes.iter().cloned().collect(),
                    evals: m.history.len(),
                    best_cost: m.history.best(),
                })
                .collect(),
            join_evals: outcome.history.len(),
            total_evals: outcome.evals,
            final_cost,
            schedule: outcome.schedule,
            fusion_pairs,
            history: history_rows(&outcome.history),
        });
    }
    let report = to_json(&PipelineReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        threshold: cfg.threshold,
        mini_threshold: cfg.mini_threshold,
        mini_budget: cfg.mini_budget,
        join_budget: cfg.join_budget,
        partition: PartitionSection {
            stats: partition_stats(&partition),
            subgraphs: partition.subgraphs.clone(),
        },
        subgraphs: subgraph_reports,
        total_cost,
    });
    write_out(&cfg.out_dir, "report.json", &report)?;
    write_out(&cfg.out_dir, "partition.dot", &emit_dot(&graph, Some(&partition)))?;
    Ok(report)
}
