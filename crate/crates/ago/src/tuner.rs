//! Schedule space and seeded search.
//!
//! A schedule picks two-level tile factors per operator plus a fusion mode
//! per intra-subgraph edge. Cost is a deterministic stand-in for on-device
//! measurement: weighted multiply-accumulate count plus LRU cache misses
//! simulated over the interpreter's memory trace. Search is a small
//! evolutionary loop (tournament size 2, single mutation per child) with an
//! optional initial schedule, which is how the divide-and-conquer layer
//! warm-starts joined subgraphs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::{self, FusionCategory, TileSpec};
use crate::graph::{Graph, GraphError, OpKind};
use crate::interp::{self, AccessTrace, InterpError};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error("schedule tiles reference node \"{0}\" outside the subgraph")]
    UnknownTileTarget(String),
    #[error("node \"{node}\": tile {tile} on loop \"{name}\" does not divide {extent}")]
    BadTile {
        node: String,
        name: String,
        tile: u64,
        extent: u64,
    },
    #[error("fusion edge {producer} -> {consumer}: {reason}")]
    BadFusionEdge {
        producer: String,
        consumer: String,
        reason: String,
    },
    #[error("fused groups form a cycle through \"{0}\"")]
    GroupCycle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Conventional,
    Intensive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDecision {
    pub producer: String,
    pub consumer: String,
    pub mode: FusionMode,
}

/// Boundary tile (the fusion-level granularity) plus a free inner tile
/// that must divide it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoLevelTile {
    pub boundary: TileSpec,
    pub inner: TileSpec,
}

/// Tiling factors per operator plus one fusion decision per edge.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub tiles: BTreeMap<String, TwoLevelTile>,
    pub fusions: Vec<FusionDecision>,
}

impl Schedule {
    /// The do-nothing schedule: full-extent tiles, every edge unfused.
    pub fn unfused(graph: &Graph, nodes: &BTreeSet<String>) -> Schedule {
        Schedule {
            tiles: BTreeMap::new(),
            fusions: intra_edges(graph, nodes)
                .into_iter()
                .map(|(p, c)| FusionDecision {
                    producer: p,
                    consumer: c,
                    mode: FusionMode::None,
                })
                .collect(),
        }
    }

    pub fn tile_of(&self, id: &str) -> TwoLevelTile {
        self.tiles.get(id).cloned().unwrap_or_default()
    }

    /// Stable content digest (first 8 bytes of SHA-256 over the JSON form).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("schedule serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self, graph: &Graph, nodes: &BTreeSet<String>) -> Result<(), ScheduleError> {
        // Tile divisibility at both levels.
        for (id, tile) in &self.tiles {
            if !nodes.contains(id) {
                return Err(ScheduleError::UnknownTileTarget(id.clone()));
            }
            let nest = graph.node(id)?.loop_nest()?;
            tile.boundary.validate(&nest)?;
            for (name, extent) in &nest.spatial {
                let boundary = tile.boundary.get(name, *extent);
                let inner = tile.inner.get(name, boundary);
                if inner == 0 || boundary % inner != 0 {
                    return Err(ScheduleError::BadTile {
                        node: id.clone(),
                        name: name.clone(),
                        tile: inner,
                        extent: boundary,
                    });
                }
            }
            // Inner entries must name real spatial loops too.
            for (name, _) in tile.inner.entries() {
                if nest.spatial_extent(name).is_none() {
                    return Err(ScheduleError::Fusion(fusion::FusionError::UnknownLoop(
                        name.to_string(),
                    )));
                }
            }
        }

        let bad = |p: &str, c: &str, reason: &str| ScheduleError::BadFusionEdge {
            producer: p.to_string(),
            consumer: c.to_string(),
            reason: reason.to_string(),
        };
        let mut seen: HashSet<(&str, &str)> = HashSet::new();
        let mut fused_out: HashMap<&str, &str> = HashMap::new();
        let mut fused_in: HashMap<&str, FusionMode> = HashMap::new();
        for d in &self.fusions {
            if !seen.insert((&d.producer, &d.consumer)) {
                return Err(bad(&d.producer, &d.consumer, "duplicate decision"));
            }
            if d.mode == FusionMode::None {
                continue;
            }
            if !nodes.contains(&d.producer) || !nodes.contains(&d.consumer) {
                return Err(bad(&d.producer, &d.consumer, "outside the subgraph"));
            }
            if !graph.succs(&d.producer).contains(&d.consumer.as_str()) {
                return Err(bad(&d.producer, &d.consumer, "no such edge"));
            }
            if fused_out.insert(&d.producer, &d.consumer).is_some() {
                return Err(bad(&d.producer, &d.consumer, "producer already fused"));
            }
            if fused_in.insert(&d.consumer, d.mode).is_some() {
                return Err(bad(&d.producer, &d.consumer, "consumer already fused"));
            }
            let consumer = graph.node(&d.consumer)?;
            match d.mode {
                FusionMode::Conventional => {
                    if consumer.kind.is_complex() {
                        return Err(bad(
                            &d.producer,
                            &d.consumer,
                            "conventional fusion requires a simple consumer",
                        ));
                    }
                    if consumer.kind == OpKind::Pad {
                        return Err(bad(&d.producer, &d.consumer, "pad is not fusable"));
                    }
                }
                FusionMode::Intensive => {
                    let producer = graph.node(&d.producer)?;
                    let verdict = fusion::intensive_fusion_legal(producer, consumer)?;
                    if verdict.category == FusionCategory::NotApplicable {
                        return Err(bad(
                            &d.producer,
                            &d.consumer,
                            "intensive fusion not applicable",
                        ));
                    }
                    if consumer.stride()? != 1 || consumer.pad()? != 0 {
                        return Err(bad(
                            &d.producer,
                            &d.consumer,
                            "intensive fusion requires stride 1 and pad 0 downstream",
                        ));
                    }
                    if graph.preds(&d.consumer).first() != Some(&d.producer.as_str()) {
                        return Err(bad(
                            &d.producer,
                            &d.consumer,
                            "producer must be the consumer's primary input",
                        ));
                    }
                    let nest = consumer.loop_nest()?;
                    let tile = self.tile_of(&d.consumer);
                    for name in &verdict.required_untiled {
                        let full = nest.spatial_extent(name).unwrap();
                        if tile.boundary.get(name, full) != full {
                            return Err(bad(
                                &d.producer,
                                &d.consumer,
                                "reused dims must stay untiled at the boundary",
                            ));
                        }
                    }
                }
                FusionMode::None => unreachable!(),
            }
        }
        // An intensive producer must head its chain.
        for d in &self.fusions {
            if d.mode == FusionMode::Intensive && fused_in.contains_key(d.producer.as_str()) {
                return Err(bad(
                    &d.producer,
                    &d.consumer,
                    "intensive producer cannot be fused into another chain",
                ));
            }
        }
        self.check_group_quotient(graph, nodes)
    }

    fn check_group_quotient(
        &self,
        graph: &Graph,
        nodes: &BTreeSet<String>,
    ) -> Result<(), ScheduleError> {
        let members: Vec<&str> = nodes.iter().map(String::as_str).collect();
        let idx: HashMap<&str, usize> = members.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        // Union by fused edge.
        let mut parent: Vec<usize> = (0..members.len()).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for d in &self.fusions {
            if d.mode == FusionMode::None {
                continue;
            }
            let (a, b) = (idx[d.producer.as_str()], idx[d.consumer.as_str()]);
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let mut edges: HashSet<(usize, usize)> = HashSet::new();
        for (s, t) in graph.edges() {
            if nodes.contains(s) && nodes.contains(t) {
                let (gs, gt) = (find(&mut parent, idx[s]), find(&mut parent, idx[t]));
                if gs != gt {
                    edges.insert((gs, gt));
                }
            }
        }
        let roots: BTreeSet<usize> = (0..members.len())
            .map(|i| find(&mut parent, i))
            .collect();
        let mut indeg: HashMap<usize, usize> = roots.iter().map(|&r| (r, 0)).collect();
        let mut succs: HashMap<usize, Vec<usize>> =
            roots.iter().map(|&r| (r, Vec::new())).collect();
        for &(s, t) in &edges {
            *indeg.get_mut(&t).unwrap() += 1;
            succs.get_mut(&s).unwrap().push(t);
        }
        let mut queue: VecDeque<usize> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&r, _)| r)
            .collect();
        let mut visited = 0;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            for &v in &succs[&u] {
                let d = indeg.get_mut(&v).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(v);
                }
            }
        }
        if visited < roots.len() {
            let stuck = indeg.iter().find(|(_, &d)| d > 0).unwrap().0;
            return Err(ScheduleError::GroupCycle(members[*stuck].to_string()));
        }
        Ok(())
    }
}

/// Intra-subgraph edges in document order.
pub fn intra_edges(graph: &Graph, nodes: &BTreeSet<String>) -> Vec<(String, String)> {
    graph
        .edges()
        .filter(|(s, d)| nodes.contains(*s) && nodes.contains(*d))
        .map(|(s, d)| (s.to_string(), d.to_string()))
        .collect()
}

/// Cache geometry and cost weights for the deterministic cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub cache_lines: usize,
    pub line_elems: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            cache_lines: 512,
            line_elems: 8,
            alpha: 1.0,
            beta: 16.0,
        }
    }
}

/// Misses of a fully associative LRU cache (write-allocate) replayed over
/// an access trace.
pub fn lru_misses(trace: &AccessTrace, cfg: &CostConfig) -> u64 {
    let mut stamp_of: HashMap<u64, u64> = HashMap::new();
    let mut by_stamp: BTreeMap<u64, u64> = BTreeMap::new();
    let mut misses = 0u64;
    let mut clock = 0u64;
    for event in &trace.events {
        let line = ((event.tensor as u64) << 40) | (event.index as u64 / cfg.line_elems as u64);
        clock += 1;
        match stamp_of.get(&line).copied() {
            Some(old) => {
                by_stamp.remove(&old);
            }
            None => {
                misses += 1;
                if stamp_of.len() >= cfg.cache_lines {
                    let (&old_stamp, &old_line) = by_stamp.iter().next().unwrap();
                    by_stamp.remove(&old_stamp);
                    stamp_of.remove(&old_line);
                }
            }
        }
        stamp_of.insert(line, clock);
        by_stamp.insert(clock, line);
    }
    misses
}

/// Deterministic schedule cost: alpha * multiply-accumulate count +
/// beta * simulated LRU misses over the memory trace.
pub fn cost(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    schedule: &Schedule,
    cfg: &CostConfig,
) -> Result<f64, InterpError> {
    let (trace, trips) = interp::trace_and_trips(graph, nodes, schedule)?;
    let mut macs = 0.0;
    for (id, t) in &trips {
        let red = graph.node(id)?.loop_nest()?.reduction_size();
        macs += (*t as f64) * (red as f64);
    }
    Ok(cfg.alpha * macs + cfg.beta * lru_misses(&trace, cfg) as f64)
}

/// Which fusion modes the sampler may propose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchSpace {
    pub allow_conventional: bool,
    pub allow_intensive: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            allow_conventional: true,
            allow_intensive: true,
        }
    }
}

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn conventional_ok(graph: &Graph, consumer: &str) -> bool {
    let kind = graph.node(consumer).unwrap().kind;
    !kind.is_complex() && kind != OpKind::Pad
}

fn intensive_ok(graph: &Graph, producer: &str, consumer: &str) -> bool {
    let p = graph.node(producer).unwrap();
    let c = graph.node(consumer).unwrap();
    if !p.kind.is_complex() || !c.kind.is_complex() {
        return false;
    }
    if c.stride().map(|s| s != 1).unwrap_or(true) || c.pad().map(|p| p != 0).unwrap_or(true) {
        return false;
    }
    if graph.preds(consumer).first() != Some(&producer) {
        return false;
    }
    matches!(
        fusion::intensive_fusion_legal(p, c),
        Ok(v) if v.category != FusionCategory::NotApplicable
    )
}

/// Force the reused dims of every intensive consumer back to full extent.
fn repair_untiled(graph: &Graph, schedule: &mut Schedule) {
    let fixes: Vec<(String, Vec<(String, u64)>)> = schedule
        .fusions
        .iter()
        .filter(|d| d.mode == FusionMode::Intensive)
        .map(|d| {
            let p = graph.node(&d.producer).unwrap();
            let c = graph.node(&d.consumer).unwrap();
            let verdict = fusion::intensive_fusion_legal(p, c).unwrap();
            let nest = c.loop_nest().unwrap();
            let dims = verdict
                .required_untiled
                .iter()
                .map(|name| (name.clone(), nest.spatial_extent(name).unwrap()))
                .collect();
            (d.consumer.clone(), dims)
        })
        .collect();
    for (consumer, dims) in fixes {
        let tile = schedule.tiles.entry(consumer).or_default();
        for (name, full) in dims {
            tile.boundary.set(&name, full);
        }
    }
}

fn quotient_ok(graph: &Graph, nodes: &BTreeSet<String>, schedule: &Schedule) -> bool {
    schedule.check_group_quotient(graph, nodes).is_ok()
}

fn sample_fresh(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
    space: &SearchSpace,
) -> Schedule {
    let mut schedule = Schedule::default();
    for node in graph.nodes().iter().filter(|n| nodes.contains(&n.id)) {
        let nest = node.loop_nest().unwrap();
        let mut tile = TwoLevelTile::default();
        for (name, extent) in &nest.spatial {
            let divs = divisors(*extent);
            let boundary = divs[rng.gen_range(0..divs.len())];
            let inner_divs = divisors(boundary);
            let inner = inner_divs[rng.gen_range(0..inner_divs.len())];
            tile.boundary.set(name, boundary);
            tile.inner.set(name, inner);
        }
        schedule.tiles.insert(node.id.clone(), tile);
    }
    let mut fused_in: HashSet<String> = HashSet::new();
    let mut fused_out: HashSet<String> = HashSet::new();
    let mut intensive_producers: HashSet<String> = HashSet::new();
    for (p, c) in intra_edges(graph, nodes) {
        let mut modes = vec![FusionMode::None];
        if !fused_out.contains(&p) && !fused_in.contains(&c) {
            if space.allow_conventional && conventional_ok(graph, &c) {
                modes.push(FusionMode::Conventional);
            }
            // An intensive edge must head its chain: the producer cannot be
            // fused into anything, and the consumer cannot already drive an
            // intensive pair of its own.
            if space.allow_intensive
                && !fused_in.contains(&p)
                && !intensive_producers.contains(&c)
                && intensive_ok(graph, &p, &c)
            {
                modes.push(FusionMode::Intensive);
            }
        }
        let mut mode = modes[rng.gen_range(0..modes.len())];
        if mode != FusionMode::None {
            // Tentatively fuse; a quotient cycle reverts the decision.
            schedule.fusions.push(FusionDecision {
                producer: p.clone(),
                consumer: c.clone(),
                mode,
            });
            if quotient_ok(graph, nodes, &schedule) {
                fused_out.insert(p.clone());
                fused_in.insert(c.clone());
                if mode == FusionMode::Intensive {
                    intensive_producers.insert(p.clone());
                }
            } else {
                schedule.fusions.pop();
                mode = FusionMode::None;
            }
        }
        if mode == FusionMode::None {
            schedule.fusions.push(FusionDecision {
                producer: p,
                consumer: c,
                mode: FusionMode::None,
            });
        }
    }
    repair_untiled(graph, &mut schedule);
    schedule
}

fn mutate(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
    base: &Schedule,
    space: &SearchSpace,
) -> Schedule {
    let mut schedule = base.clone();
    // Enumerate mutation slots: every (node, dim, level) plus every edge.
    let members: Vec<&str> = graph
        .nodes()
        .iter()
        .filter(|n| nodes.contains(&n.id))
        .map(|n| n.id.as_str())
        .collect();
    let mut tile_slots: Vec<(String, String, u64, bool)> = Vec::new(); // node, loop, extent, is_inner
    for &id in &members {
        let nest = graph.node(id).unwrap().loop_nest().unwrap();
        for (name, extent) in &nest.spatial {
            tile_slots.push((id.to_string(), name.clone(), *extent, false));
            tile_slots.push((id.to_string(), name.clone(), *extent, true));
        }
    }
    let edge_count = schedule.fusions.len();
    let total = tile_slots.len() + edge_count;
    let pick = rng.gen_range(0..total.max(1));
    if pick < tile_slots.len() {
        let (node, name, extent, is_inner) = tile_slots[pick].clone();
        let tile = schedule.tiles.entry(node).or_default();
        if is_inner {
            let boundary = tile.boundary.get(&name, extent);
            let divs = divisors(boundary);
            tile.inner.set(&name, divs[rng.gen_range(0..divs.len())]);
        } else {
            let divs = divisors(extent);
            let boundary = divs[rng.gen_range(0..divs.len())];
            let inner = tile.inner.get(&name, boundary);
            tile.boundary.set(&name, boundary);
            if boundary % inner != 0 {
                tile.inner.set(&name, gcd(inner, boundary));
            }
        }
    } else {
        let e = pick - tile_slots.len();
        let (p, c) = (
            schedule.fusions[e].producer.clone(),
            schedule.fusions[e].consumer.clone(),
        );
        let mut fused_in: HashSet<&str> = HashSet::new();
        let mut fused_out: HashSet<&str> = HashSet::new();
        let mut intensive_producers: HashSet<&str> = HashSet::new();
        for (i, d) in schedule.fusions.iter().enumerate() {
            if i != e && d.mode != FusionMode::None {
                fused_out.insert(&d.producer);
                fused_in.insert(&d.consumer);
                if d.mode == FusionMode::Intensive {
                    intensive_producers.insert(&d.producer);
                }
            }
        }
        let mut modes = vec![FusionMode::None];
        if !fused_out.contains(p.as_str()) && !fused_in.contains(c.as_str()) {
            if space.allow_conventional && conventional_ok(graph, &c) {
                modes.push(FusionMode::Conventional);
            }
            if space.allow_intensive
                && !fused_in.contains(p.as_str())
                && !intensive_producers.contains(c.as_str())
                && intensive_ok(graph, &p, &c)
            {
                modes.push(FusionMode::Intensive);
            }
        }
        let old = schedule.fusions[e].mode;
        schedule.fusions[e].mode = modes[rng.gen_range(0..modes.len())];
        if !quotient_ok(graph, nodes, &schedule) {
            schedule.fusions[e].mode = old;
        }
    }
    repair_untiled(graph, &mut schedule);
    schedule
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sample_with_rng(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    rng: &mut ChaCha8Rng,
    base: Option<&Schedule>,
    space: &SearchSpace,
) -> Schedule {
    match base {
        Some(b) => mutate(graph, nodes, rng, b, space),
        None => sample_fresh(graph, nodes, rng, space),
    }
}

/// Uniformly sample a valid schedule (or mutate `base` in one spot),
/// deterministically per seed.
pub fn sample_schedule(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    seed: u64,
    base: Option<&Schedule>,
) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(graph, nodes, &mut rng, base, &SearchSpace::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub digest: String,
    pub cost: f64,
    pub best: f64,
}

/// Trial-by-trial record; `best` is the running minimum, so the curve is
/// non-increasing by construction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneHistory {
    pub trials: Vec<Trial>,
}

impl TuneHistory {
    pub fn push(&mut self, digest: String, cost: f64) {
        let best = self
            .trials
            .last()
            .map(|t| t.best.min(cost))
            .unwrap_or(cost);
        self.trials.push(Trial {
            index: self.trials.len(),
            digest,
            cost,
            best,
        });
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn best(&self) -> Option<f64> {
        self.trials.last().map(|t| t.best)
    }
}

/// True iff the relative best-cost improvement over the last `k` trials is
/// below `epsilon`. Histories shorter than `k` are never stabilized.
pub fn stabilized(history: &TuneHistory, k: usize, epsilon: f64) -> bool {
    let n = history.trials.len();
    if k == 0 || n < k {
        return false;
    }
    let start = history.trials[n - k].best;
    let end = history.trials[n - 1].best;
    if start <= 0.0 {
        return true;
    }
    (start - end) / start < epsilon
}

const POPULATION: usize = 16;

/// Evolutionary search with an early-stop predicate checked before every
/// evaluation; performs at most `budget` cost evaluations and exactly
/// `budget` when `stop` never fires.
pub fn tune_with_stop(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    budget: usize,
    seed: u64,
    initial: Option<&Schedule>,
    cfg: &CostConfig,
    space: &SearchSpace,
    stop: impl Fn(&TuneHistory) -> bool,
) -> Result<(Schedule, TuneHistory), InterpError> {
    assert!(budget >= 1, "tuning budget must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = TuneHistory::default();
    let mut pop: Vec<(Schedule, f64)> = Vec::new();
    let mut best: Option<(Schedule, f64)> = None;
    while history.len() < budget && !stop(&history) {
        let schedule = if history.is_empty() && initial.is_some() {
            initial.unwrap().clone()
        } else if pop.len() < POPULATION {
            sample_with_rng(graph, nodes, &mut rng, None, space)
        } else {
            let i = rng.gen_range(0..pop.len());
            let j = rng.gen_range(0..pop.len());
            let parent = if pop[i].1 <= pop[j].1 {
                pop[i].0.clone()
            } else {
                pop[j].0.clone()
            };
            sample_with_rng(graph, nodes, &mut rng, Some(&parent), space)
        };
        let c = cost(graph, nodes, &schedule, cfg)?;
        history.push(schedule.digest(), c);
        if best.as_ref().map_or(true, |(_, bc)| c < *bc) {
            best = Some((schedule.clone(), c));
        }
        if pop.len() < POPULATION {
            pop.push((schedule, c));
        } else {
            let (worst_idx, worst_cost) = pop
                .iter()
                .enumerate()
                .map(|(i, (_, c))| (i, *c))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            if c < worst_cost {
                pop[worst_idx] = (schedule, c);
            }
        }
    }
    let (schedule, _) = best.expect("at least one evaluation");
    Ok((schedule, history))
}

/// Search the schedule space for `budget` cost evaluations and return the
/// argmin plus the full history; deterministic per seed, and with an
/// initial schedule the final best never exceeds its cost.
pub fn tune(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    budget: usize,
    seed: u64,
    initial: Option<&Schedule>,
    cfg: &CostConfig,
    space: &SearchSpace,
) -> Result<(Schedule, TuneHistory), InterpError> {
    tune_with_stop(graph, nodes, budget, seed, initial, cfg, space, |_| false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OperatorNode;
    use crate::interp::{AccessEvent, AccessKind};

    fn all_nodes(graph: &Graph) -> BTreeSet<String> {
        graph.nodes().iter().map(|n| n.id.clone()).collect()
    }

    fn load(name: &str) -> Graph {
        let path = format!("{}/../../data/{}.json", env!("CARGO_MANIFEST_DIR"), name);
        Graph::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn huge_cache_sees_compulsory_misses_only() {
        let g = Graph::new(
            vec![OperatorNode::new("r", OpKind::Relu, &[("d0", 16)])],
            vec![],
        )
        .unwrap();
        let nodes = all_nodes(&g);
        let trace = interp::trace_memory(&g, &nodes, &Schedule::unfused(&g, &nodes)).unwrap();
        let cfg = CostConfig::default();
        // 16 input elements + 16 output elements at 8 per line = 4 lines.
        assert_eq!(lru_misses(&trace, &cfg), 4);
    }

    #[test]
    fn one_line_cache_thrashes() {
        let n = 50;
        let mut events = Vec::new();
        for _ in 0..n {
            events.push(AccessEvent {
                tensor: 0,
                index: 0,
                kind: AccessKind::Read,
            });
            events.push(AccessEvent {
                tensor: 0,
                index: 1000,
                kind: AccessKind::Read,
            });
        }
        let trace = AccessTrace {
            tensor_names: vec!["t".to_string()],
            events,
        };
        let cfg = CostConfig {
            cache_lines: 1,
            ..CostConfig::default()
        };
        assert!(lru_misses(&trace, &cfg) >= 2 * n as u64 - 1);
    }

    #[test]
    fn conventional_fusion_beats_unfused_on_small_cache() {
        // conv + bias + relu with the intermediate much larger than cache.
        let nodes = vec![
            OperatorNode::new(
                "c",
                OpKind::Conv2d,
                &[
                    ("N", 1),
                    ("I", 2),
                    ("O", 8),
                    ("H", 8),
                    ("W", 8),
                    ("R", 3),
                    ("C", 3),
                    ("pad", 1),
                ],
            ),
            OperatorNode::new(
                "b",
                OpKind::BiasAdd,
                &[("d0", 1), ("d1", 8), ("d2", 8), ("d3", 8)],
            ),
            OperatorNode::new(
                "r",
                OpKind::Relu,
                &[("d0", 1), ("d1", 8), ("d2", 8), ("d3", 8)],
            ),
        ];
        let g = Graph::new(
            nodes,
            vec![
                ("c".to_string(), "b".to_string()),
                ("b".to_string(), "r".to_string()),
            ],
        )
        .unwrap();
        let members = all_nodes(&g);
        // Cache holds the conv window working set but not the 64-line
        // intermediate tensor.
        let cfg = CostConfig {
            cache_lines: 32,
            ..CostConfig::default()
        };
        let unfused = Schedule::unfused(&g, &members);
        let mut fused = unfused.clone();
        for d in &mut fused.fusions {
            d.mode = FusionMode::Conventional;
        }
        fused.validate(&g, &members).unwrap();
        let cost_unfused = cost(&g, &members, &unfused, &cfg).unwrap();
        let cost_fused = cost(&g, &members, &fused, &cfg).unwrap();
        assert!(
            cost_fused < cost_unfused,
            "fused {cost_fused} vs unfused {cost_unfused}"
        );
    }

    #[test]
    fn same_seed_same_schedule() {
        let g = load("mnsn_block");
        let nodes = all_nodes(&g);
        let a = sample_schedule(&g, &nodes, 42, None);
        let b = sample_schedule(&g, &nodes, 42, None);
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn prime_extents_only_offer_trivial_tiles() {
        let g = Graph::new(
            vec![OperatorNode::new("r", OpKind::Relu, &[("d0", 7)])],
            vec![],
        )
        .unwrap();
        let nodes = all_nodes(&g);
        for seed in 0..20 {
            let s = sample_schedule(&g, &nodes, seed, None);
            let tile = s.tile_of("r");
            let b = tile.boundary.get("d0", 7);
            assert!(b == 1 || b == 7);
        }
    }

    #[test]
    fn sampled_schedules_validate() {
        for name in ["mnsn_block", "mbv2_block", "attention_block"] {
            let g = load(name);
            let nodes = all_nodes(&g);
            for seed in 0..250 {
                let s = sample_schedule(&g, &nodes, seed, None);
                s.validate(&g, &nodes)
                    .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            }
        }
    }

    #[test]
    fn thousand_conv_pair_samples_all_valid() {
        let up = OperatorNode::new(
            "conv",
            OpKind::Conv2d,
            &[
                ("N", 1),
                ("I", 4),
                ("O", 8),
                ("H", 8),
                ("W", 8),
                ("R", 3),
                ("C", 3),
                ("pad", 1),
            ],
        );
        let down = OperatorNode::new(
            "pw",
            OpKind::PointwiseConv2d,
            &[("N", 1), ("I", 8), ("O", 16), ("H", 8), ("W", 8)],
        );
        let g = Graph::new(
            vec![up, down],
            vec![("conv".to_string(), "pw".to_string())],
        )
        .unwrap();
        let nodes = all_nodes(&g);
        let mut intensive_seen = 0;
        for seed in 0..1000 {
            let s = sample_schedule(&g, &nodes, seed, None);
            s.validate(&g, &nodes)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            if s.fusions.iter().any(|d| d.mode == FusionMode::Intensive) {
                intensive_seen += 1;
            }
        }
        assert!(intensive_seen > 100, "intensive sampled {intensive_seen}x");
    }

    #[test]
    fn mutations_stay_valid() {
        let g = load("mnsn_block");
        let nodes = all_nodes(&g);
        let mut s = sample_schedule(&g, &nodes, 1, None);
        for seed in 0..300 {
            s = sample_schedule(&g, &nodes, seed, Some(&s));
            s.validate(&g, &nodes)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn budget_one_returns_single_sample() {
        let g = load("mnsn_block");
        let nodes = all_nodes(&g);
        let cfg = CostConfig::default();
        let (_, history) =
            tune(&g, &nodes, 1, 5, None, &cfg, &SearchSpace::default()).unwrap();
        assert_eq!(history.len(), 1);
    }

    #[test]
    fn initial_schedule_bounds_final_cost() {
        let g = load("mnsn_block");
        let nodes = all_nodes(&g);
        let cfg = CostConfig::default();
        let initial = Schedule::unfused(&g, &nodes);
        let init_cost = cost(&g, &nodes, &initial, &cfg).unwrap();
        let (_, history) =
            tune(&g, &nodes, 30, 7, Some(&initial), &cfg, &SearchSpace::default()).unwrap();
        assert_eq!(history.len(), 30);
        assert!(history.best().unwrap() <= init_cost);
        assert_eq!(history.trials[0].cost, init_cost);
        // Best-so-far curve is non-increasing.
        for pair in history.trials.windows(2) {
            assert!(pair[1].best <= pair[0].best);
        }
    }

    #[test]
    fn stabilized_on_flat_history() {
        let mut h = TuneHistory::default();
        for _ in 0..5 {
            h.push("x".to_string(), 10.0);
        }
        assert!(stabilized(&h, 5, 0.01));
        assert!(!stabilized(&h, 6, 0.01));
    }

    #[test]
    fn not_stabilized_while_improving() {
        let mut h = TuneHistory::default();
        let mut c = 100.0;
        for _ in 0..10 {
            h.push("x".to_string(), c);
            c *= 0.9;
        }
        assert!(!stabilized(&h, 5, 0.01));
    }

    #[test]
    fn schedule_digest_distinguishes_tiles() {
        let g = load("mnsn_block");
        let nodes = all_nodes(&g);
        let a = Schedule::unfused(&g, &nodes);
        let mut b = a.clone();
        b.tiles
            .entry("dw".to_string())
            .or_default()
            .boundary
            .set("h", 4);
        assert_ne!(a.digest(), b.digest());
    }
}
