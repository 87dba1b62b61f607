//! Acyclic graph partitioning.
//!
//! A node's topological stage is its longest-path depth from any root.
//! The affix set of a node collects the undirected neighbors whose stage
//! differs by exactly one; merging a node with an affix neighbor can never
//! create a cycle in the condensed graph, which is what the greedy
//! weighted clustering below relies on. A Relay-like baseline partitioner
//! and partition statistics round out the module.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};
use crate::weight::{op_weight, WeightError, WeightParams};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error("cycle in condensed graph through \"{0}\"")]
    Cycle(String),
    #[error("unknown hyper node \"{0}\"")]
    NoSuchNode(String),
    #[error("\"{u}\" is not in the affix set of \"{v}\"")]
    NotAffix { u: String, v: String },
    #[error("partition does not cover the graph: {0}")]
    Coverage(String),
}

/// Longest-path depth per node; roots sit at stage 1 and every edge goes
/// from a lower stage to a strictly higher one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMap(BTreeMap<String, usize>);

impl StageMap {
    pub fn get(&self, id: &str) -> Option<usize> {
        self.0.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> + '_ {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// One node of the condensed graph: a set of original operators acting as
/// a single clustering unit.
#[derive(Debug, Clone)]
pub struct HyperNode {
    pub id: String,
    pub members: BTreeSet<String>,
    pub weight: f64,
    pub complex: usize,
    min_doc: usize,
}

/// Condensed view of an operator graph used during clustering. Parallel
/// edges are deduplicated and self loops dropped on merge.
#[derive(Debug, Clone)]
pub struct HyperGraph {
    nodes: BTreeMap<String, HyperNode>,
    edges: BTreeSet<(String, String)>,
}

impl HyperGraph {
    pub fn from_graph(graph: &Graph, params: &WeightParams) -> Result<Self, PartitionError> {
        let mut nodes = BTreeMap::new();
        for (doc, node) in graph.nodes().iter().enumerate() {
            nodes.insert(
                node.id.clone(),
                HyperNode {
                    id: node.id.clone(),
                    members: BTreeSet::from([node.id.clone()]),
                    weight: op_weight(&node.loop_nest()?, params),
                    complex: usize::from(node.kind.is_complex()),
                    min_doc: doc,
                },
            );
        }
        let edges = graph
            .edges()
            .map(|(s, d)| (s.to_string(), d.to_string()))
            .collect();
        Ok(HyperGraph { nodes, edges })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Result<&HyperNode, PartitionError> {
        self.nodes
            .get(id)
            .ok_or_else(|| PartitionError::NoSuchNode(id.to_string()))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.nodes.keys().map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges.iter().map(|(s, d)| (s.as_str(), d.as_str()))
    }

    /// Longest-path stages via Kahn's algorithm; errors if the condensed
    /// graph contains a cycle.
    pub fn stages(&self) -> Result<StageMap, PartitionError> {
        let mut indeg: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        let mut succs: BTreeMap<&str, Vec<&str>> =
            self.nodes.keys().map(|k| (k.as_str(), Vec::new())).collect();
        for (s, d) in &self.edges {
            *indeg.get_mut(d.as_str()).unwrap() += 1;
            succs.get_mut(s.as_str()).unwrap().push(d);
        }
        let mut stage: BTreeMap<String, usize> = BTreeMap::new();
        let mut queue: VecDeque<&str> = indeg
            .iter()
            .filter(|(_, &deg)| deg == 0)
            .map(|(&id, _)| id)
            .collect();
        for &id in &queue {
            stage.insert(id.to_string(), 1);
        }
        while let Some(u) = queue.pop_front() {
            let su = stage[u];
            for &v in &succs[u] {
                let entry = stage.entry(v.to_string()).or_insert(0);
                *entry = (*entry).max(su + 1);
                let deg = indeg.get_mut(v).unwrap();
                *deg -= 1;
                if *deg == 0 {
                    queue.push_back(v);
                }
            }
        }
        if stage.len() < self.nodes.len() {
            let stuck = indeg.iter().find(|(_, &d)| d > 0).unwrap().0;
            return Err(PartitionError::Cycle(stuck.to_string()));
        }
        Ok(StageMap(stage))
    }

    pub fn is_dag(&self) -> bool {
        self.stages().is_ok()
    }

    /// Undirected neighbors of `v` whose stage differs by exactly one.
    pub fn affix_set(
        &self,
        stages: &StageMap,
        v: &str,
    ) -> Result<BTreeSet<String>, PartitionError> {
        self.node(v)?;
        let ts_v = stages
            .get(v)
            .ok_or_else(|| PartitionError::NoSuchNode(v.to_string()))?;
        let mut found = BTreeSet::new();
        for (s, d) in &self.edges {
            let other = if s == v {
                d
            } else if d == v {
                s
            } else {
                continue;
            };
            let ts_u = stages
                .get(other)
                .ok_or_else(|| PartitionError::NoSuchNode(other.clone()))?;
            if ts_u.abs_diff(ts_v) == 1 {
                found.insert(other.clone());
            }
        }
        Ok(found)
    }

    /// Merge `u` and `v` (requires `u` in the affix set of `v`) into one
    /// hyper node and recompute stages. The condensed graph stays a DAG.
    pub fn merge_affix(
        &self,
        stages: &StageMap,
        u: &str,
        v: &str,
    ) -> Result<(HyperGraph, StageMap), PartitionError> {
        if !self.affix_set(stages, v)?.contains(u) {
            return Err(PartitionError::NotAffix {
                u: u.to_string(),
                v: v.to_string(),
            });
        }
        let merged = self.merge_forced(u, v)?;
        let stages = merged.stages()?;
        Ok((merged, stages))
    }

    /// Merge without the affix precondition. The result can be cyclic;
    /// exposed so the unsafe-merge counter-case is constructible.
    pub fn merge_forced(&self, u: &str, v: &str) -> Result<HyperGraph, PartitionError> {
        let hu = self.node(u)?.clone();
        let hv = self.node(v)?.clone();
        let new_id = hu.id.clone().min(hv.id.clone());
        let merged = HyperNode {
            id: new_id.clone(),
            members: hu.members.union(&hv.members).cloned().collect(),
            weight: hu.weight + hv.weight,
            complex: hu.complex + hv.complex,
            min_doc: hu.min_doc.min(hv.min_doc),
        };
        let mut nodes = self.nodes.clone();
        nodes.remove(u);
        nodes.remove(v);
        nodes.insert(new_id.clone(), merged);
        let rename = |id: &String| -> String {
            if id == u || id == v {
                new_id.clone()
            } else {
                id.clone()
            }
        };
        let edges = self
            .edges
            .iter()
            .map(|(s, d)| (rename(s), rename(d)))
            .filter(|(s, d)| s != d)
            .collect();
        Ok(HyperGraph { nodes, edges })
    }
}

/// Longest-path stages of an operator graph. Graphs are validated DAGs,
/// so this cannot fail.
pub fn topological_stages(graph: &Graph) -> StageMap {
    let hg = HyperGraph::from_graph(graph, &WeightParams::default())
        .expect("validated graph has loop nests");
    hg.stages().expect("validated graph is acyclic")
}

/// Affix set of `v` in an operator graph.
pub fn affix_set(
    graph: &Graph,
    stages: &StageMap,
    v: &str,
) -> Result<BTreeSet<String>, PartitionError> {
    graph.node(v)?;
    let hg = HyperGraph::from_graph(graph, &WeightParams::default())?;
    hg.affix_set(stages, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub id: usize,
    pub nodes: BTreeSet<String>,
    pub weight: f64,
}

/// Disjoint node sets covering the graph, with per-subgraph weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub subgraphs: Vec<Subgraph>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgraphs.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.subgraphs.iter().map(|s| s.weight).collect()
    }

    /// The subgraph containing `id`, if any.
    pub fn find(&self, id: &str) -> Option<&Subgraph> {
        self.subgraphs.iter().find(|s| s.nodes.contains(id))
    }
}

fn hyper_to_partition(hg: HyperGraph) -> Partition {
    let mut hypers: Vec<HyperNode> = hg.nodes.into_values().collect();
    hypers.sort_by_key(|h| h.min_doc);
    Partition {
        subgraphs: hypers
            .into_iter()
            .enumerate()
            .map(|(id, h)| Subgraph {
                id,
                nodes: h.members,
                weight: h.weight,
            })
            .collect(),
    }
}

/// Greedy weighted clustering. Repeatedly takes the heaviest candidate,
/// merges it with the lightest affix neighbor while the combined weight
/// stays below `td` (and, when `max_complex` is set, the combined complex
/// count stays within it), and drops candidates with no viable partner.
/// Ties break on lexicographic node id, so the result is deterministic.
pub fn cluster(
    graph: &Graph,
    params: &WeightParams,
    td: f64,
    max_complex: Option<usize>,
) -> Partition {
    let mut hg = HyperGraph::from_graph(graph, params).expect("validated graph has loop nests");
    if hg.is_empty() {
        return Partition {
            subgraphs: Vec::new(),
        };
    }
    let mut stages = hg.stages().expect("validated graph is acyclic");
    let mut cand: BTreeSet<String> = hg.node_ids().map(str::to_string).collect();
    while !cand.is_empty() {
        // Heaviest candidate; ascending iteration keeps the smallest id on ties.
        let mut heaviest: Option<(&String, f64)> = None;
        for id in &cand {
            let w = hg.node(id).unwrap().weight;
            if heaviest.map_or(true, |(_, bw)| w > bw) {
                heaviest = Some((id, w));
            }
        }
        let v = heaviest.unwrap().0.clone();
        let wv = hg.node(&v).unwrap().weight;
        let cv = hg.node(&v).unwrap().complex;

        let mut partner: Option<(String, f64)> = None;
        for u in hg.affix_set(&stages, &v).unwrap() {
            let hu = hg.node(&u).unwrap();
            if wv + hu.weight >= td {
                continue;
            }
            if let Some(mc) = max_complex {
                if cv + hu.complex > mc {
                    continue;
                }
            }
            if partner.as_ref().map_or(true, |(_, bw)| hu.weight < *bw) {
                partner = Some((u.clone(), hu.weight));
            }
        }
        match partner {
            Some((u, _)) => {
                let merged_id = u.clone().min(v.clone());
                let (next, next_stages) = hg
                    .merge_affix(&stages, &u, &v)
                    .expect("affix merge of live nodes");
                cand.remove(&u);
                cand.remove(&v);
                cand.insert(merged_id);
                hg = next;
                stages = next_stages;
            }
            None => {
                cand.remove(&v);
            }
        }
    }
    hyper_to_partition(hg)
}

/// True iff the quotient graph (subgraphs as nodes) is a DAG. Errors when
/// the partition does not cover the graph exactly.
pub fn is_acyclic_partition(graph: &Graph, partition: &Partition) -> Result<bool, PartitionError> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for sg in &partition.subgraphs {
        for id in &sg.nodes {
            if !graph.contains(id) {
                return Err(PartitionError::Coverage(format!(
                    "subgraph {} references unknown node \"{id}\"",
                    sg.id
                )));
            }
            if owner.insert(id.as_str(), sg.id).is_some() {
                return Err(PartitionError::Coverage(format!(
                    "node \"{id}\" appears in more than one subgraph"
                )));
            }
        }
    }
    if owner.len() != graph.len() {
        let missing = graph
            .nodes()
            .iter()
            .find(|n| !owner.contains_key(n.id.as_str()))
            .unwrap();
        return Err(PartitionError::Coverage(format!(
            "node \"{}\" is not covered",
            missing.id
        )));
    }
    // Kahn over the quotient graph.
    let mut quotient_edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (s, d) in graph.edges() {
        let (qs, qd) = (owner[s], owner[d]);
        if qs != qd {
            quotient_edges.insert((qs, qd));
        }
    }
    let ids: Vec<usize> = partition.subgraphs.iter().map(|s| s.id).collect();
    let mut indeg: BTreeMap<usize, usize> = ids.iter().map(|&i| (i, 0)).collect();
    let mut succs: BTreeMap<usize, Vec<usize>> = ids.iter().map(|&i| (i, Vec::new())).collect();
    for &(s, d) in &quotient_edges {
        *indeg.get_mut(&d).unwrap() += 1;
        succs.get_mut(&s).unwrap().push(d);
    }
    let mut queue: VecDeque<usize> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&i, _)| i)
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
    Ok(visited == ids.len())
}

/// Relay-like reference partitioner: a greedy forward pass where each
/// group absorbs its downstream single-pred/single-succ chain of simple
/// operators, stopping at complex operators and branch points; a reshape
/// or transpose is absorbed and then closes the group, and one heading a
/// group stays alone.
pub fn baseline_partition(graph: &Graph, params: &WeightParams) -> Partition {
    let order: Vec<String> = topo_order_doc(graph);
    let mut assigned: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<BTreeSet<String>> = Vec::new();
    for id in &order {
        if assigned.contains_key(id) {
            continue;
        }
        let mut group = vec![id.clone()];
        let head = graph.node(id).unwrap();
        if !head.kind.is_delimiter() {
            let mut cur = id.clone();
            loop {
                let succs = graph.succs(&cur);
                if succs.len() != 1 {
                    break;
                }
                let next = succs[0].to_string();
                if assigned.contains_key(&next) || graph.preds(&next).len() != 1 {
                    break;
                }
                let kind = graph.node(&next).unwrap().kind;
                if kind.is_complex() {
                    break;
                }
                group.push(next.clone());
                if kind.is_delimiter() {
                    break;
                }
                cur = next;
            }
        }
        for member in &group {
            assigned.insert(member.clone(), groups.len());
        }
        groups.push(group.into_iter().collect());
    }
    let subgraphs = groups
        .into_iter()
        .enumerate()
        .map(|(id, nodes)| {
            let weight = nodes
                .iter()
                .map(|n| {
                    op_weight(
                        &graph.node(n).unwrap().loop_nest().unwrap(),
                        params,
                    )
                })
                .sum();
            Subgraph { id, nodes, weight }
        })
        .collect();
    Partition { subgraphs }
}

/// Topological order with document-index tie-breaking.
fn topo_order_doc(graph: &Graph) -> Vec<String> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let n = graph.len();
    let mut indeg = vec![0usize; n];
    let mut succs = vec![Vec::new(); n];
    for (s, d) in graph.edges() {
        let (si, di) = (graph.doc_index(s).unwrap(), graph.doc_index(d).unwrap());
        indeg[di] += 1;
        succs[si].push(di);
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(u)) = heap.pop() {
        order.push(graph.nodes()[u].id.clone());
        for &v in &succs[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                heap.push(Reverse(v));
            }
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin: i32,
    pub count: usize,
}

/// Count, mean/median weight, Jain's fairness index, and a log2-scaled
/// weight histogram (bin k covers [2^k, 2^(k+1))).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub jain: f64,
    pub hist: Vec<HistBin>,
}

pub fn partition_stats(partition: &Partition) -> PartitionStats {
    let mut weights = partition.weights();
    let n = weights.len();
    if n == 0 {
        return PartitionStats {
            count: 0,
            mean: 0.0,
            median: 0.0,
            jain: 0.0,
            hist: Vec::new(),
        };
    }
    weights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let mean = sum / n as f64;
    let median = if n % 2 == 1 {
        weights[n / 2]
    } else {
        (weights[n / 2 - 1] + weights[n / 2]) / 2.0
    };
    let jain = sum * sum / (n as f64 * sum_sq);
    let mut bins: BTreeMap<i32, usize> = BTreeMap::new();
    for &w in &weights {
        if w > 0.0 {
            *bins.entry(w.log2().floor() as i32).or_insert(0) += 1;
        }
    }
    PartitionStats {
        count: n,
        mean,
        median,
        jain,
        hist: bins
            .into_iter()
            .map(|(bin, count)| HistBin { bin, count })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{OpKind, OperatorNode};

    fn relu(id: &str, extent: i64) -> OperatorNode {
        OperatorNode::new(id, OpKind::Relu, &[("d0", extent)])
    }

    fn chain_graph(ids: &[&str], extent: i64) -> Graph {
        let nodes = ids.iter().map(|id| relu(id, extent)).collect();
        let edges = ids
            .windows(2)
            .map(|w| (w[0].to_string(), w[1].to_string()))
            .collect();
        Graph::new(nodes, edges).unwrap()
    }

    fn diamond_graph() -> Graph {
        let nodes = ["a", "b", "c", "d"].iter().map(|id| relu(id, 4)).collect();
        let edges = [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]
            .iter()
            .map(|(s, d)| (s.to_string(), d.to_string()))
            .collect();
        Graph::new(nodes, edges).unwrap()
    }

    fn fig9_graph() -> Graph {
        let conv = |id: &str| {
            OperatorNode::new(
                id,
                OpKind::Conv2d,
                &[
                    ("N", 1),
                    ("I", 4),
                    ("O", 4),
                    ("H", 8),
                    ("W", 8),
                    ("R", 3),
                    ("C", 3),
                    ("pad", 1),
                ],
            )
        };
        Graph::new(
            vec![conv("Conv1"), conv("Conv2"), conv("Conv3")],
            vec![
                ("Conv1".to_string(), "Conv2".to_string()),
                ("Conv2".to_string(), "Conv3".to_string()),
                ("Conv1".to_string(), "Conv3".to_string()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn stages_on_chain() {
        let g = chain_graph(&["a", "b", "c"], 4);
        let stages = topological_stages(&g);
        assert_eq!(stages.get("a"), Some(1));
        assert_eq!(stages.get("b"), Some(2));
        assert_eq!(stages.get("c"), Some(3));
    }

    #[test]
    fn stages_on_diamond() {
        let stages = topological_stages(&diamond_graph());
        assert_eq!(stages.get("a"), Some(1));
        assert_eq!(stages.get("b"), Some(2));
        assert_eq!(stages.get("c"), Some(2));
        assert_eq!(stages.get("d"), Some(3));
    }

    #[test]
    fn stages_on_fig9_longest_path() {
        let stages = topological_stages(&fig9_graph());
        assert_eq!(stages.get("Conv1"), Some(1));
        assert_eq!(stages.get("Conv2"), Some(2));
        assert_eq!(stages.get("Conv3"), Some(3));
    }

    #[test]
    fn affix_on_diamond_root() {
        let g = diamond_graph();
        let stages = topological_stages(&g);
        let affix = affix_set(&g, &stages, "a").unwrap();
        assert_eq!(affix, BTreeSet::from(["b".to_string(), "c".to_string()]));
    }

    #[test]
    fn affix_excludes_stage_gap_of_two() {
        let g = fig9_graph();
        let stages = topological_stages(&g);
        let affix = affix_set(&g, &stages, "Conv1").unwrap();
        assert_eq!(affix, BTreeSet::from(["Conv2".to_string()]));
    }

    #[test]
    fn affix_of_isolated_node_is_empty() {
        let g = Graph::new(vec![relu("solo", 4)], vec![]).unwrap();
        let stages = topological_stages(&g);
        assert!(affix_set(&g, &stages, "solo").unwrap().is_empty());
    }

    #[test]
    fn merge_diamond_pair() {
        let g = diamond_graph();
        let params = WeightParams::default();
        let hg = HyperGraph::from_graph(&g, &params).unwrap();
        let stages = hg.stages().unwrap();
        let (merged, _) = hg.merge_affix(&stages, "b", "a").unwrap();
        assert_eq!(merged.len(), 3);
        let edges: BTreeSet<(String, String)> = merged
            .edges()
            .map(|(s, d)| (s.to_string(), d.to_string()))
            .collect();
        let expect: BTreeSet<(String, String)> = [("a", "c"), ("a", "d"), ("c", "d")]
            .iter()
            .map(|(s, d)| (s.to_string(), d.to_string()))
            .collect();
        assert_eq!(edges, expect);
        assert!(merged.is_dag());
    }

    #[test]
    fn forced_fig9_merge_creates_cycle() {
        let g = fig9_graph();
        let params = WeightParams::default();
        let hg = HyperGraph::from_graph(&g, &params).unwrap();
        let stages = hg.stages().unwrap();
        // The precondition rejects the merge...
        assert!(matches!(
            hg.merge_affix(&stages, "Conv3", "Conv1"),
            Err(PartitionError::NotAffix { .. })
        ));
        // ...and bypassing it produces the two-cycle with Conv2.
        let forced = hg.merge_forced("Conv3", "Conv1").unwrap();
        assert!(!forced.is_dag());
    }

    #[test]
    fn merge_chain_tail() {
        let g = chain_graph(&["a", "b", "c"], 4);
        let params = WeightParams::default();
        let hg = HyperGraph::from_graph(&g, &params).unwrap();
        let stages = hg.stages().unwrap();
        let (merged, stages) = hg.merge_affix(&stages, "c", "b").unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(stages.get("a"), Some(1));
        assert_eq!(stages.get("b"), Some(2));
    }

    /// All set partitions of a small id slice (Bell enumeration).
    fn enumerate_partitions(ids: &[&str]) -> Vec<Vec<BTreeSet<String>>> {
        let mut out: Vec<Vec<BTreeSet<String>>> = vec![Vec::new()];
        for id in ids {
            let mut next = Vec::new();
            for partial in &out {
                for k in 0..=partial.len() {
                    let mut candidate = partial.clone();
                    if k == partial.len() {
                        candidate.push(BTreeSet::from([id.to_string()]));
                    } else {
                        candidate[k].insert(id.to_string());
                    }
                    next.push(candidate);
                }
            }
            out = next;
        }
        out
    }

    #[test]
    fn cluster_chain_matches_exhaustive_oracle() {
        // Three relu(32) nodes have weight 5 each; Td = 12.
        let g = chain_graph(&["a", "b", "c"], 32);
        let params = WeightParams::default();
        let got = cluster(&g, &params, 12.0, None);
        let sets: Vec<BTreeSet<String>> = got.subgraphs.iter().map(|s| s.nodes.clone()).collect();
        let ab: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let c: BTreeSet<String> = ["c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(sets, vec![ab, c]);

        // Oracle: the output must be among the acyclic partitions whose
        // multi-node subgraphs stay under Td.
        let valid: Vec<Vec<BTreeSet<String>>> = enumerate_partitions(&["a", "b", "c"])
            .into_iter()
            .filter(|p| {
                let partition = Partition {
                    subgraphs: p
                        .iter()
                        .enumerate()
                        .map(|(id, nodes)| Subgraph {
                            id,
                            nodes: nodes.clone(),
                            weight: 5.0 * nodes.len() as f64,
                        })
                        .collect(),
                };
                let acyclic = is_acyclic_partition(&g, &partition).unwrap();
                let under_td = partition
                    .subgraphs
                    .iter()
                    .all(|s| s.nodes.len() == 1 || s.weight < 12.0);
                acyclic && under_td
            })
            .collect();
        let got_sets: BTreeSet<BTreeSet<String>> = sets.into_iter().collect();
        assert!(valid
            .iter()
            .any(|p| p.iter().cloned().collect::<BTreeSet<_>>() == got_sets));
    }

    #[test]
    fn tiny_threshold_yields_singletons() {
        let g = diamond_graph();
        let params = WeightParams::default();
        // Every node weighs 2; Td = 3 < 2 * 2 blocks every merge.
        let part = cluster(&g, &params, 3.0, None);
        assert_eq!(part.len(), 4);
        assert!(part.subgraphs.iter().all(|s| s.nodes.len() == 1));
    }

    #[test]
    fn fig2_generous_threshold_groups_op5_op6_op7() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/fig2.json"
        ))
        .unwrap();
        let g = Graph::from_json(&text).unwrap();
        let part = cluster(&g, &WeightParams::default(), 1e9, None);
        let s5 = part.find("op5").unwrap();
        assert!(s5.nodes.contains("op6"));
        assert!(s5.nodes.contains("op7"));
        assert!(is_acyclic_partition(&g, &part).unwrap());
    }

    #[test]
    fn singleton_partition_is_acyclic() {
        let g = diamond_graph();
        let partition = Partition {
            subgraphs: g
                .nodes()
                .iter()
                .enumerate()
                .map(|(id, n)| Subgraph {
                    id,
                    nodes: BTreeSet::from([n.id.clone()]),
                    weight: 1.0,
                })
                .collect(),
        };
        assert!(is_acyclic_partition(&g, &partition).unwrap());
    }

    #[test]
    fn fig9_bad_partition_detected() {
        let g = fig9_graph();
        let partition = Partition {
            subgraphs: vec![
                Subgraph {
                    id: 0,
                    nodes: ["Conv1", "Conv3"].iter().map(|s| s.to_string()).collect(),
                    weight: 2.0,
                },
                Subgraph {
                    id: 1,
                    nodes: BTreeSet::from(["Conv2".to_string()]),
                    weight: 1.0,
                },
            ],
        };
        assert!(!is_acyclic_partition(&g, &partition).unwrap());
    }

    #[test]
    fn coverage_violation_is_an_error() {
        let g = diamond_graph();
        let partition = Partition {
            subgraphs: vec![Subgraph {
                id: 0,
                nodes: BTreeSet::from(["a".to_string()]),
                weight: 1.0,
            }],
        };
        assert!(matches!(
            is_acyclic_partition(&g, &partition),
            Err(PartitionError::Coverage(_))
        ));
    }

    #[test]
    fn baseline_separates_complex_ops_on_fig2() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/fig2.json"
        ))
        .unwrap();
        let g = Graph::from_json(&text).unwrap();
        let part = baseline_partition(&g, &WeightParams::default());
        assert!(part.len() >= 4);
        let owner = |id: &str| part.find(id).unwrap().id;
        let complex_owners = [owner("op1"), owner("op2"), owner("op5"), owner("op7")];
        let distinct: BTreeSet<usize> = complex_owners.iter().copied().collect();
        assert_eq!(distinct.len(), 4);
        assert!(is_acyclic_partition(&g, &part).unwrap());
    }

    #[test]
    fn baseline_fragments_attention_into_five() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/attention_block.json"
        ))
        .unwrap();
        let g = Graph::from_json(&text).unwrap();
        let part = baseline_partition(&g, &WeightParams::default());
        assert_eq!(part.len(), 5);
        assert!(is_acyclic_partition(&g, &part).unwrap());
    }

    #[test]
    fn baseline_simple_chain_is_one_subgraph() {
        let g = chain_graph(&["a", "b", "c"], 4);
        let part = baseline_partition(&g, &WeightParams::default());
        assert_eq!(part.len(), 1);
        assert_eq!(part.subgraphs[0].nodes.len(), 3);
    }

    #[test]
    fn jain_of_equal_weights_is_one() {
        let partition = Partition {
            subgraphs: (0..3)
                .map(|id| Subgraph {
                    id,
                    nodes: BTreeSet::from([format!("n{id}")]),
                    weight: 7.0,
                })
                .collect(),
        };
        let stats = partition_stats(&partition);
        assert!((stats.jain - 1.0).abs() < 1e-12);
        assert_eq!(stats.mean, 7.0);
        assert_eq!(stats.median, 7.0);
    }

    #[test]
    fn jain_of_one_three() {
        let partition = Partition {
            subgraphs: [1.0, 3.0]
                .iter()
                .enumerate()
                .map(|(id, &weight)| Subgraph {
                    id,
                    nodes: BTreeSet::from([format!("n{id}")]),
                    weight,
                })
                .collect(),
        };
        let stats = partition_stats(&partition);
        assert!((stats.jain - 0.8).abs() < 1e-12);
    }

    #[test]
    fn jain_of_skewed_weights() {
        let partition = Partition {
            subgraphs: [1.0, 1.0, 1.0, 97.0]
                .iter()
                .enumerate()
                .map(|(id, &weight)| Subgraph {
                    id,
                    nodes: BTreeSet::from([format!("n{id}")]),
                    weight,
                })
                .collect(),
        };
        let stats = partition_stats(&partition);
        // 10000 / 37648, evaluated independently.
        assert!((stats.jain - 0.2656183595410115).abs() < 1e-12);
    }

    #[test]
    fn cluster_respects_max_complex() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/mbv2_block.json"
        ))
        .unwrap();
        let g = Graph::from_json(&text).unwrap();
        let part = cluster(&g, &WeightParams::default(), 1e9, Some(1));
        for sg in &part.subgraphs {
            let complex = sg
                .nodes
                .iter()
                .filter(|n| g.node(n).unwrap().kind.is_complex())
                .count();
            assert!(complex <= 1, "subgraph {:?}", sg.nodes);
        }
        assert!(is_acyclic_partition(&g, &part).unwrap());
    }

    #[test]
    fn multi_node_subgraphs_stay_under_threshold() {
        for name in ["fig2", "mbv2_block", "mnsn_block", "attention_block"] {
            let path = format!("{}/../../data/{}.json", env!("CARGO_MANIFEST_DIR"), name);
            let g = Graph::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
            for td in [10.0, 50.0, 120.0, 400.0] {
                let part = cluster(&g, &WeightParams::default(), td, None);
                for sg in &part.subgraphs {
                    assert!(
                        sg.nodes.len() == 1 || sg.weight < td,
                        "{name}: weight {} >= Td {td}",
                        sg.weight
                    );
                }
            }
        }
    }
}
