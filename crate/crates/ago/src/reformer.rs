//! Divide-and-conquer tuning.
//!
//! A complicated subgraph is split into mini-subgraphs of at most one
//! complex operator each (re-using the clustering algorithm with a tighter
//! weight threshold), every mini is tuned until its best cost stabilizes
//! or its budget share runs out, and the minis are joined back with their
//! tuned tilings composed into the initial schedule for the joint phase.
//! Unused mini budget rolls into the join phase, so the total number of
//! cost evaluations is always mini_budget + join_budget.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::graph::Graph;
use crate::interp::InterpError;
use crate::partition::{cluster, Subgraph};
use crate::tuner::{
    intra_edges, stabilized, tune, tune_with_stop, CostConfig, FusionDecision, FusionMode,
    Schedule, ScheduleError, SearchSpace, TuneHistory,
};
use crate::weight::WeightParams;

#[derive(Debug, Error)]
pub enum ReformerError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("minis belong to different parents ({0} vs {1})")]
    DifferentParents(usize, usize),
    #[error("expected one tuned schedule per mini ({minis} minis, {schedules} schedules)")]
    MissingSchedule { minis: usize, schedules: usize },
    #[error("join requires at least one mini-subgraph")]
    NoMinis,
}

/// A tuning unit split from a parent subgraph: at most one complex
/// operator, acyclic within the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniSubgraph {
    pub nodes: BTreeSet<String>,
    pub parent: usize,
}

/// Split/Join configuration: the mini weight threshold, budget split,
/// stabilization window, and the shared cost-model settings.
#[derive(Debug, Clone)]
pub struct DncConfig {
    pub params: WeightParams,
    pub td_mini: f64,
    pub mini_budget: usize,
    pub join_budget: usize,
    pub window: usize,
    pub epsilon: f64,
    pub cost: CostConfig,
    pub space: SearchSpace,
}

/// Split a parent subgraph into mini-subgraphs via clustering with
/// max_complex = 1 and the tighter threshold.
pub fn split(graph: &Graph, parent: &Subgraph, cfg: &DncConfig) -> Vec<MiniSubgraph> {
    let induced = graph.induced(&parent.nodes);
    cluster(&induced, &cfg.params, cfg.td_mini, Some(1))
        .subgraphs
        .into_iter()
        .map(|sg| MiniSubgraph {
            nodes: sg.nodes,
            parent: parent.id,
        })
        .collect()
}

/// Combine tuned minis back into the parent: per-operator tilings are
/// copied verbatim, intra-mini fusion decisions carried over, and every
/// cross-mini edge starts unfused (the joint phase discovers those).
pub fn join(
    graph: &Graph,
    minis: &[MiniSubgraph],
    tuned: &[Schedule],
) -> Result<(BTreeSet<String>, Schedule), ReformerError> {
    if minis.is_empty() {
        return Err(ReformerError::NoMinis);
    }
    if minis.len() != tuned.len() {
        return Err(ReformerError::MissingSchedule {
            minis: minis.len(),
            schedules: tuned.len(),
        });
    }
    let parent_id = minis[0].parent;
    for mini in minis {
        if mini.parent != parent_id {
            return Err(ReformerError::DifferentParents(parent_id, mini.parent));
        }
    }
    let mut nodes = BTreeSet::new();
    let mut schedule = Schedule::default();
    for (mini, sched) in minis.iter().zip(tuned) {
        nodes.extend(mini.nodes.iter().cloned());
        for (id, tile) in &sched.tiles {
            schedule.tiles.insert(id.clone(), tile.clone());
        }
    }
    let mini_of = |id: &str| minis.iter().position(|m| m.nodes.contains(id));
    for (p, c) in intra_edges(graph, &nodes) {
        let mode = match (mini_of(&p), mini_of(&c)) {
            (Some(a), Some(b)) if a == b => tuned[a]
                .fusions
                .iter()
                .find(|d| d.producer == p && d.consumer == c)
                .map(|d| d.mode)
                .unwrap_or(FusionMode::None),
            _ => FusionMode::None,
        };
        schedule.fusions.push(FusionDecision {
            producer: p,
            consumer: c,
            mode,
        });
    }
    schedule.validate(graph, &nodes)?;
    Ok((nodes, schedule))
}

#[derive(Debug, Clone)]
pub struct MiniReport {
    pub nodes: BTreeSet<String>,
    pub schedule: Schedule,
    pub history: TuneHistory,
}

#[derive(Debug, Clone)]
pub struct DncOutcome {
    pub schedule: Schedule,
    /// Joint-phase history (the whole run when the parent has one mini).
    pub history: TuneHistory,
    pub minis: Vec<MiniReport>,
    /// Composed initial schedule fed into the joint phase, if one existed.
    pub initial: Option<Schedule>,
    pub evals: usize,
}

fn derive_seed(seed: u64, lane: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(lane as u64 + 1)
}

/// Split, tune each mini until stabilized or its share is spent, join, and
/// finish tuning the parent from the composed initial schedule. A parent
/// with a single mini degenerates to a plain tune over the total budget.
pub fn run_divide_and_conquer(
    graph: &Graph,
    parent: &Subgraph,
    cfg: &DncConfig,
    seed: u64,
) -> Result<DncOutcome, ReformerError> {
    let minis = split(graph, parent, cfg);
    let total = cfg.mini_budget + cfg.join_budget;
    if minis.len() == 1 {
        let (schedule, history) = tune(
            graph,
            &parent.nodes,
            total,
            seed,
            None,
            &cfg.cost,
            &cfg.space,
        )?;
        let evals = history.len();
        return Ok(DncOutcome {
            schedule,
            history,
            minis: vec![MiniReport {
                nodes: minis[0].nodes.clone(),
                schedule: Schedule::default(),
                history: TuneHistory::default(),
            }],
            initial: None,
            evals,
        });
    }

    let m = minis.len();
    let mut reports = Vec::with_capacity(m);
    let mut tuned = Vec::with_capacity(m);
    let mut leftover = 0usize;
    for (i, mini) in minis.iter().enumerate() {
        let share = cfg.mini_budget / m + usize::from(i < cfg.mini_budget % m);
        if share == 0 {
            tuned.push(Schedule::unfused(graph, &mini.nodes));
            reports.push(MiniReport {
                nodes: mini.nodes.clone(),
                schedule: Schedule::unfused(graph, &mini.nodes),
                history: TuneHistory::default(),
            });
            continue;
        }
        let (schedule, history) = tune_with_stop(
            graph,
            &mini.nodes,
            share,
            derive_seed(seed, i),
            None,
            &cfg.cost,
            &cfg.space,
            |h| stabilized(h, cfg.window, cfg.epsilon),
        )?;
        leftover += share - history.len();
        tuned.push(schedule.clone());
        reports.push(MiniReport {
            nodes: mini.nodes.clone(),
            schedule,
            history,
        });
    }

    let (nodes, composed) = join(graph, &minis, &tuned)?;
    debug_assert_eq!(nodes, parent.nodes);
    let (schedule, history) = tune(
        graph,
        &parent.nodes,
        cfg.join_budget + leftover,
        derive_seed(seed, m),
        Some(&composed),
        &cfg.cost,
        &cfg.space,
    )?;
    let evals = reports.iter().map(|r| r.history.len()).sum::<usize>() + history.len();
    Ok(DncOutcome {
        schedule,
        history,
        minis: reports,
        initial: Some(composed),
        evals,
    })
}
