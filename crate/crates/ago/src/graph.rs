//! Computational graph IR.
//!
//! Operators are nodes, tensors are edges. Each operator carries an integer
//! attribute map describing its iteration domain; [`OperatorNode::loop_nest`]
//! turns that into the spatial/reduction loop structure the rest of the
//! pipeline works on. Graphs are validated DAGs, serializable to JSON and
//! exportable to DOT.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::Partition;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate node id \"{0}\"")]
    DuplicateNode(String),
    #[error("edge {src} -> {dst} references unknown node \"{unknown}\"")]
    UnknownNode {
        src: String,
        dst: String,
        unknown: String,
    },
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("self loop on node \"{0}\"")]
    SelfLoop(String),
    #[error("cycle detected through node \"{0}\"")]
    Cycle(String),
    #[error("node \"{node}\": missing attribute \"{attr}\"")]
    MissingAttr { node: String, attr: String },
    #[error("node \"{node}\": {reason}")]
    BadNode { node: String, reason: String },
    #[error("unknown node id \"{0}\"")]
    NoSuchNode(String),
}

/// Operator kind. Convolution variants and matmul are the complex operators;
/// the rest are simple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv2d,
    Matmul,
    Add,
    Relu,
    BiasAdd,
    Mul,
    Pad,
    Reshape,
    Transpose,
}

impl OpKind {
    /// True for operators with a reduction nest (convolutions, matmul).
    pub fn is_complex(self) -> bool {
        matches!(
            self,
            OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::PointwiseConv2d | OpKind::Matmul
        )
    }

    pub fn is_elementwise(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Relu | OpKind::BiasAdd | OpKind::Mul)
    }

    /// Data-movement operators the baseline partitioner treats as delimiters.
    pub fn is_delimiter(self) -> bool {
        matches!(self, OpKind::Reshape | OpKind::Transpose)
    }
}

/// Named loops of one operator: spatial loops span the output tensor,
/// reduction loops are the accumulation dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopNest {
    pub spatial: Vec<(String, u64)>,
    pub reduction: Vec<(String, u64)>,
}

impl LoopNest {
    pub fn spatial_size(&self) -> u64 {
        self.spatial.iter().map(|(_, e)| e).product()
    }

    pub fn reduction_size(&self) -> u64 {
        self.reduction.iter().map(|(_, e)| e).product()
    }

    /// All loop extents, spatial then reduction.
    pub fn extents(&self) -> impl Iterator<Item = u64> + '_ {
        self.spatial
            .iter()
            .chain(self.reduction.iter())
            .map(|(_, e)| *e)
    }

    pub fn spatial_extent(&self, name: &str) -> Option<u64> {
        self.spatial
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| *e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    #[serde(rename = "op")]
    pub kind: OpKind,
    pub attrs: BTreeMap<String, i64>,
}

impl OperatorNode {
    pub fn new(id: &str, kind: OpKind, attrs: &[(&str, i64)]) -> Self {
        OperatorNode {
            id: id.to_string(),
            kind,
            attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn attr(&self, name: &str) -> Result<u64, GraphError> {
        match self.attrs.get(name) {
            Some(v) if *v >= 0 => Ok(*v as u64),
            Some(v) => Err(GraphError::BadNode {
                node: self.id.clone(),
                reason: format!("attribute \"{name}\" is negative ({v})"),
            }),
            None => Err(GraphError::MissingAttr {
                node: self.id.clone(),
                attr: name.to_string(),
            }),
        }
    }

    fn attr_or(&self, name: &str, default: u64) -> Result<u64, GraphError> {
        if self.attrs.contains_key(name) {
            self.attr(name)
        } else {
            Ok(default)
        }
    }

    /// Zero-padding amount (convolutions and pad); defaults to 0.
    pub fn pad(&self) -> Result<u64, GraphError> {
        self.attr_or("pad", 0)
    }

    /// Convolution stride; defaults to 1.
    pub fn stride(&self) -> Result<u64, GraphError> {
        self.attr_or("stride", 1)
    }

    /// Kernel window height/width; pointwise convolutions default to 1.
    pub fn window(&self) -> Result<(u64, u64), GraphError> {
        match self.kind {
            OpKind::PointwiseConv2d | OpKind::Matmul => {
                Ok((self.attr_or("R", 1)?, self.attr_or("C", 1)?))
            }
            _ => Ok((self.attr("R")?, self.attr("C")?)),
        }
    }

    /// Output-shape dims d0..dk of a simple operator, in axis order.
    pub fn dims(&self) -> Result<Vec<u64>, GraphError> {
        let mut dims = Vec::new();
        loop {
            let key = format!("d{}", dims.len());
            if !self.attrs.contains_key(&key) {
                break;
            }
            dims.push(self.attr(&key)?);
        }
        if dims.is_empty() {
            return Err(GraphError::MissingAttr {
                node: self.id.clone(),
                attr: "d0".to_string(),
            });
        }
        Ok(dims)
    }

    /// Transpose permutation p0..pk: output axis i reads input axis p_i.
    pub fn perm(&self) -> Result<Vec<usize>, GraphError> {
        let rank = self.dims()?.len();
        let mut perm = Vec::with_capacity(rank);
        for i in 0..rank {
            perm.push(self.attr(&format!("p{i}"))? as usize);
        }
        let mut seen = vec![false; rank];
        for &p in &perm {
            if p >= rank || seen[p] {
                return Err(GraphError::BadNode {
                    node: self.id.clone(),
                    reason: format!("p0..p{} is not a permutation of 0..{}", rank - 1, rank - 1),
                });
            }
            seen[p] = true;
        }
        Ok(perm)
    }

    pub fn output_shape(&self) -> Result<Vec<u64>, GraphError> {
        match self.kind {
            OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::PointwiseConv2d => Ok(vec![
                self.attr("N")?,
                self.attr("O")?,
                self.attr("H")?,
                self.attr("W")?,
            ]),
            OpKind::Matmul => Ok(vec![self.attr("M")?, self.attr("N")?]),
            _ => self.dims(),
        }
    }

    /// Shape of the primary data input. For reshape the input shape is not
    /// recoverable from attributes, so the flat element count is returned.
    pub fn input_shape(&self) -> Result<Vec<u64>, GraphError> {
        match self.kind {
            OpKind::Conv2d | OpKind::PointwiseConv2d | OpKind::DepthwiseConv2d => {
                let channels = match self.kind {
                    OpKind::DepthwiseConv2d => self.attr("O")?,
                    _ => self.attr("I")?,
                };
                let (h_in, w_in) = self.input_hw()?;
                Ok(vec![self.attr("N")?, channels, h_in, w_in])
            }
            OpKind::Matmul => Ok(vec![self.attr("M")?, self.attr("K")?]),
            OpKind::Pad => {
                let mut dims = self.dims()?;
                let pad = self.pad()?;
                let rank = dims.len();
                for d in dims.iter_mut().skip(rank.saturating_sub(2)) {
                    *d = d.checked_sub(2 * pad).unwrap_or(0);
                }
                Ok(dims)
            }
            OpKind::Transpose => {
                let dims = self.dims()?;
                let perm = self.perm()?;
                let mut input = vec![0u64; dims.len()];
                for (i, &p) in perm.iter().enumerate() {
                    input[p] = dims[i];
                }
                Ok(input)
            }
            OpKind::Reshape => Ok(vec![self.dims()?.iter().product()]),
            _ => self.dims(),
        }
    }

    /// Input spatial extent of a convolution, from output extent, window,
    /// pad, and stride: H_in = (H_out - 1) * stride + R - 2 * pad.
    pub fn input_hw(&self) -> Result<(u64, u64), GraphError> {
        let (r, c) = self.window()?;
        let pad = self.pad()?;
        let stride = self.stride()?;
        let back = |out: u64, win: u64| -> Result<u64, GraphError> {
            ((out - 1) * stride + win)
                .checked_sub(2 * pad)
                .filter(|v| *v >= 1)
                .ok_or_else(|| GraphError::BadNode {
                    node: self.id.clone(),
                    reason: format!(
                        "output extent {out} inconsistent with window {win}, pad {pad}, stride {stride}"
                    ),
                })
        };
        Ok((back(self.attr("H")?, r)?, back(self.attr("W")?, c)?))
    }

    /// The loop structure of this operator: conv2d spans n,o,h,w spatially
    /// and ri,rr,rc in reduction; simple operators have no reduction loops.
    pub fn loop_nest(&self) -> Result<LoopNest, GraphError> {
        let nest = |spatial: Vec<(&str, u64)>, reduction: Vec<(&str, u64)>| LoopNest {
            spatial: spatial
                .into_iter()
                .map(|(n, e)| (n.to_string(), e))
                .collect(),
            reduction: reduction
                .into_iter()
                .map(|(n, e)| (n.to_string(), e))
                .collect(),
        };
        match self.kind {
            OpKind::Conv2d => Ok(nest(
                vec![
                    ("n", self.attr("N")?),
                    ("o", self.attr("O")?),
                    ("h", self.attr("H")?),
                    ("w", self.attr("W")?),
                ],
                vec![
                    ("ri", self.attr("I")?),
                    ("rr", self.attr("R")?),
                    ("rc", self.attr("C")?),
                ],
            )),
            OpKind::DepthwiseConv2d => Ok(nest(
                vec![
                    ("n", self.attr("N")?),
                    ("c", self.attr("O")?),
                    ("h", self.attr("H")?),
                    ("w", self.attr("W")?),
                ],
                vec![("rr", self.attr("R")?), ("rc", self.attr("C")?)],
            )),
            OpKind::PointwiseConv2d => Ok(nest(
                vec![
                    ("n", self.attr("N")?),
                    ("o", self.attr("O")?),
                    ("h", self.attr("H")?),
                    ("w", self.attr("W")?),
                ],
                vec![("ri", self.attr("I")?)],
            )),
            OpKind::Matmul => Ok(nest(
                vec![("m", self.attr("M")?), ("n", self.attr("N")?)],
                vec![("rk", self.attr("K")?)],
            )),
            _ => {
                let dims = self.dims()?;
                Ok(LoopNest {
                    spatial: dims
                        .iter()
                        .enumerate()
                        .map(|(i, e)| (format!("d{i}"), *e))
                        .collect(),
                    reduction: Vec::new(),
                })
            }
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        let bad = |reason: String| GraphError::BadNode {
            node: self.id.clone(),
            reason,
        };
        let positive = |name: &str, v: u64| -> Result<(), GraphError> {
            if v == 0 {
                Err(bad(format!("attribute \"{name}\" must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::PointwiseConv2d => {
                for name in ["N", "I", "O", "H", "W"] {
                    positive(name, self.attr(name)?)?;
                }
                let (r, c) = self.window()?;
                positive("R", r)?;
                positive("C", c)?;
                positive("stride", self.stride()?)?;
                if self.kind == OpKind::PointwiseConv2d && (r != 1 || c != 1) {
                    return Err(bad("pointwise convolution requires R = C = 1".to_string()));
                }
                if self.kind == OpKind::DepthwiseConv2d && self.attr("I")? != self.attr("O")? {
                    return Err(bad("depthwise convolution requires I = O".to_string()));
                }
                self.input_hw()?;
            }
            OpKind::Matmul => {
                for name in ["M", "N", "K"] {
                    positive(name, self.attr(name)?)?;
                }
            }
            OpKind::Transpose => {
                for (i, d) in self.dims()?.iter().enumerate() {
                    positive(&format!("d{i}"), *d)?;
                }
                self.perm()?;
            }
            OpKind::Pad => {
                let dims = self.dims()?;
                if dims.len() < 2 {
                    return Err(bad("pad requires rank >= 2".to_string()));
                }
                for (i, d) in dims.iter().enumerate() {
                    positive(&format!("d{i}"), *d)?;
                }
                let pad = self.pad()?;
                for d in dims.iter().rev().take(2) {
                    if *d < 2 * pad + 1 {
                        return Err(bad(format!("pad {pad} exceeds output extent {d}")));
                    }
                }
            }
            _ => {
                for (i, d) in self.dims()?.iter().enumerate() {
                    positive(&format!("d{i}"), *d)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EdgeDoc {
    src: String,
    dst: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<OperatorNode>,
    edges: Vec<EdgeDoc>,
}

/// A validated operator DAG. Node and edge order follow the source document.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<OperatorNode>,
    edges: Vec<(usize, usize)>,
    index: HashMap<String, usize>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl Graph {
    pub fn new(nodes: Vec<OperatorNode>, edges: Vec<(String, String)>) -> Result<Self, GraphError> {
        let mut index = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(node.id.clone()));
            }
            node.validate()?;
        }
        let mut edge_idx = Vec::with_capacity(edges.len());
        let mut seen = HashSet::new();
        for (src, dst) in &edges {
            let unknown = |id: &String| GraphError::UnknownNode {
                src: src.clone(),
                dst: dst.clone(),
                unknown: id.clone(),
            };
            let s = *index.get(src).ok_or_else(|| unknown(src))?;
            let d = *index.get(dst).ok_or_else(|| unknown(dst))?;
            if s == d {
                return Err(GraphError::SelfLoop(src.clone()));
            }
            if !seen.insert((s, d)) {
                return Err(GraphError::DuplicateEdge(src.clone(), dst.clone()));
            }
            edge_idx.push((s, d));
        }
        let graph = Graph {
            nodes,
            edges: edge_idx,
            index,
        };
        graph.check_acyclic()?;
        Ok(graph)
    }

    /// Parse and validate a serialized graph document.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        Graph::new(
            doc.nodes,
            doc.edges.into_iter().map(|e| (e.src, e.dst)).collect(),
        )
    }

    /// Serialize back to the document format; `from_json(to_json(g)) == g`.
    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(s, d)| EdgeDoc {
                    src: self.nodes[s].id.clone(),
                    dst: self.nodes[d].id.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succs = vec![Vec::new(); n];
        for &(s, d) in &self.edges {
            indeg[d] += 1;
            succs[s].push(d);
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut visited = 0;
        while let Some(u) = queue.pop_front() {
            visited += 1;
            for &v in &succs[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if visited < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(GraphError::Cycle(self.nodes[stuck].id.clone()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Result<&OperatorNode, GraphError> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| GraphError::NoSuchNode(id.to_string()))
    }

    /// Document position of a node, used for deterministic tie-breaking.
    pub fn doc_index(&self, id: &str) -> Result<usize, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::NoSuchNode(id.to_string()))
    }

    /// Edges as (src id, dst id) in document order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges
            .iter()
            .map(|&(s, d)| (self.nodes[s].id.as_str(), self.nodes[d].id.as_str()))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Predecessors of `id` in document edge order.
    pub fn preds(&self, id: &str) -> Vec<&str> {
        let Some(&i) = self.index.get(id) else {
            return Vec::new();
        };
        self.edges
            .iter()
            .filter(|&&(_, d)| d == i)
            .map(|&(s, _)| self.nodes[s].id.as_str())
            .collect()
    }

    /// Successors of `id` in document edge order.
    pub fn succs(&self, id: &str) -> Vec<&str> {
        let Some(&i) = self.index.get(id) else {
            return Vec::new();
        };
        self.edges
            .iter()
            .filter(|&&(s, _)| s == i)
            .map(|&(_, d)| self.nodes[d].id.as_str())
            .collect()
    }

    /// The induced subgraph over `keep`: nodes and internal edges, document
    /// order preserved.
    pub fn induced(&self, keep: &BTreeSet<String>) -> Graph {
        let nodes: Vec<OperatorNode> = self
            .nodes
            .iter()
            .filter(|n| keep.contains(&n.id))
            .cloned()
            .collect();
        let edges: Vec<(String, String)> = self
            .edges
            .iter()
            .filter(|&&(s, d)| {
                keep.contains(&self.nodes[s].id) && keep.contains(&self.nodes[d].id)
            })
            .map(|&(s, d)| (self.nodes[s].id.clone(), self.nodes[d].id.clone()))
            .collect();
        Graph::new(nodes, edges).expect("induced subgraph of a valid graph is valid")
    }
}

/// Render a graph as a DOT digraph. Complex operators are filled boxes;
/// when a partition is given, each subgraph becomes a cluster.
pub fn emit_dot(graph: &Graph, partition: Option<&Partition>) -> String {
    let mut out = String::from("digraph G {\n");
    if let Some(part) = partition {
        for sg in &part.subgraphs {
            out.push_str(&format!(
                "  subgraph cluster_{} {{\n    label=\"S{} w={:.3}\";\n",
                sg.id, sg.id, sg.weight
            ));
            for id in &sg.nodes {
                out.push_str(&format!("    \"{id}\";\n"));
            }
            out.push_str("  }\n");
        }
    }
    for node in graph.nodes() {
        let style = if node.kind.is_complex() {
            " [shape=box,style=filled,fillcolor=palegreen]"
        } else {
            " [shape=ellipse]"
        };
        out.push_str(&format!("  \"{}\"{};\n", node.id, style));
    }
    for (src, dst) in graph.edges() {
        out.push_str(&format!("  \"{src}\" -> \"{dst}\";\n"));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str) -> OperatorNode {
        OperatorNode::new(
            id,
            OpKind::Conv2d,
            &[
                ("N", 1),
                ("I", 32),
                ("O", 64),
                ("H", 28),
                ("W", 28),
                ("R", 3),
                ("C", 3),
                ("pad", 1),
                ("stride", 1),
            ],
        )
    }

    #[test]
    fn load_minimal_two_node_graph() {
        let text = r#"{
            "nodes": [
                {"id": "c", "op": "conv2d",
                 "attrs": {"N":1,"I":3,"O":8,"H":8,"W":8,"R":3,"C":3,"pad":1,"stride":1}},
                {"id": "r", "op": "relu", "attrs": {"d0":1,"d1":8,"d2":8,"d3":8}}
            ],
            "edges": [{"src": "c", "dst": "r"}]
        }"#;
        let g = Graph::from_json(text).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.succs("c"), vec!["r"]);
    }

    #[test]
    fn unknown_edge_target_names_the_offender() {
        let text = r#"{
            "nodes": [{"id": "a", "op": "relu", "attrs": {"d0": 4}}],
            "edges": [{"src": "a", "dst": "x"}]
        }"#;
        let err = Graph::from_json(text).unwrap_err();
        match err {
            GraphError::UnknownNode { unknown, .. } => assert_eq!(unknown, "x"),
            other => panic!("expected UnknownNode, got {other:?}"),
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let nodes = vec![
            OperatorNode::new("a", OpKind::Relu, &[("d0", 4)]),
            OperatorNode::new("b", OpKind::Relu, &[("d0", 4)]),
        ];
        let edges = vec![
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "a".to_string()),
        ];
        assert!(matches!(
            Graph::new(nodes, edges),
            Err(GraphError::Cycle(_))
        ));
    }

    #[test]
    fn duplicate_edge_and_self_loop_rejected() {
        let nodes = vec![
            OperatorNode::new("a", OpKind::Relu, &[("d0", 4)]),
            OperatorNode::new("b", OpKind::Relu, &[("d0", 4)]),
        ];
        let dup = vec![
            ("a".to_string(), "b".to_string()),
            ("a".to_string(), "b".to_string()),
        ];
        assert!(matches!(
            Graph::new(nodes.clone(), dup),
            Err(GraphError::DuplicateEdge(..))
        ));
        let selfloop = vec![("a".to_string(), "a".to_string())];
        assert!(matches!(
            Graph::new(nodes, selfloop),
            Err(GraphError::SelfLoop(_))
        ));
    }

    #[test]
    fn inconsistent_conv_dims_rejected() {
        // Output 8x8 with window 3, pad 5 implies an input extent of 0.
        let node = OperatorNode::new(
            "c",
            OpKind::Conv2d,
            &[
                ("N", 1),
                ("I", 2),
                ("O", 2),
                ("H", 8),
                ("W", 8),
                ("R", 3),
                ("C", 3),
                ("pad", 5),
            ],
        );
        assert!(matches!(
            Graph::new(vec![node], vec![]),
            Err(GraphError::BadNode { .. })
        ));
    }

    #[test]
    fn fig2_corpus_loads() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/fig2.json"
        ))
        .unwrap();
        let g = Graph::from_json(&text).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(g.edge_count(), 7);
        // op1 and op2 are both roots (they share the graph input tensor).
        assert!(g.preds("op1").is_empty());
        assert!(g.preds("op2").is_empty());
        assert_eq!(g.succs("op5"), vec!["op6"]);
        assert_eq!(g.succs("op6"), vec!["op7"]);
    }

    #[test]
    fn conv_loop_nest_matches_fig4_structure() {
        let nest = conv("c").loop_nest().unwrap();
        let spatial: Vec<&str> = nest.spatial.iter().map(|(n, _)| n.as_str()).collect();
        let reduction: Vec<&str> = nest.reduction.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(spatial, vec!["n", "o", "h", "w"]);
        assert_eq!(reduction, vec!["ri", "rr", "rc"]);
        let spatial_ext: Vec<u64> = nest.spatial.iter().map(|(_, e)| *e).collect();
        let red_ext: Vec<u64> = nest.reduction.iter().map(|(_, e)| *e).collect();
        assert_eq!(spatial_ext, vec![1, 64, 28, 28]);
        assert_eq!(red_ext, vec![32, 3, 3]);
    }

    #[test]
    fn relu_has_no_reduction() {
        let relu = OperatorNode::new(
            "r",
            OpKind::Relu,
            &[("d0", 1), ("d1", 64), ("d2", 28), ("d3", 28)],
        );
        let nest = relu.loop_nest().unwrap();
        let ext: Vec<u64> = nest.spatial.iter().map(|(_, e)| *e).collect();
        assert_eq!(ext, vec![1, 64, 28, 28]);
        assert!(nest.reduction.is_empty());
    }

    #[test]
    fn matmul_loop_nest() {
        let mm = OperatorNode::new("m", OpKind::Matmul, &[("M", 128), ("N", 128), ("K", 64)]);
        let nest = mm.loop_nest().unwrap();
        assert_eq!(
            nest.spatial,
            vec![("m".to_string(), 128), ("n".to_string(), 128)]
        );
        assert_eq!(nest.reduction, vec![("rk".to_string(), 64)]);
    }

    #[test]
    fn spatial_product_equals_output_element_count() {
        let corpus = ["fig2", "mbv2_block", "mnsn_block", "attention_block"];
        for name in corpus {
            let path = format!(
                "{}/../../data/{}.json",
                env!("CARGO_MANIFEST_DIR"),
                name
            );
            let g = Graph::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
            for node in g.nodes() {
                let nest = node.loop_nest().unwrap();
                let elems: u64 = node.output_shape().unwrap().iter().product();
                assert_eq!(nest.spatial_size(), elems, "node {}", node.id);
            }
        }
    }

    #[test]
    fn complexity_split_matches_kind_set() {
        use OpKind::*;
        for kind in [Conv2d, DepthwiseConv2d, PointwiseConv2d, Matmul] {
            assert!(kind.is_complex());
        }
        for kind in [Add, Relu, BiasAdd, Mul, Pad, Reshape, Transpose] {
            assert!(!kind.is_complex());
        }
    }

    #[test]
    fn json_round_trip_is_identity() {
        for name in ["fig2", "mbv2_block", "mnsn_block", "attention_block"] {
            let path = format!("{}/../../data/{}.json", env!("CARGO_MANIFEST_DIR"), name);
            let g = Graph::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
            let again = Graph::from_json(&g.to_json()).unwrap();
            assert_eq!(g, again);
        }
    }

    #[test]
    fn dot_has_one_statement_per_node_and_edge() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/fig2.json"
        ))
        .unwrap();
        let g = Graph::from_json(&text).unwrap();
        let dot = emit_dot(&g, None);
        let node_stmts = dot.lines().filter(|l| l.contains("[shape=")).count();
        let edge_stmts = dot.lines().filter(|l| l.contains("->")).count();
        assert_eq!(node_stmts, 7);
        assert_eq!(edge_stmts, 7);
        assert_eq!(dot.matches("subgraph cluster_").count(), 0);
        // Deterministic output.
        assert_eq!(dot, emit_dot(&g, None));
    }

    #[test]
    fn single_node_dot_no_clusters() {
        let g = Graph::new(
            vec![OperatorNode::new("only", OpKind::Relu, &[("d0", 4)])],
            vec![],
        )
        .unwrap();
        let dot = emit_dot(&g, None);
        assert_eq!(dot.lines().filter(|l| l.contains("[shape=")).count(), 1);
        assert_eq!(dot.matches("cluster_").count(), 0);
    }

    #[test]
    fn transpose_input_shape_inverts_perm() {
        let t = OperatorNode::new(
            "t",
            OpKind::Transpose,
            &[("d0", 4), ("d1", 2), ("p0", 1), ("p1", 0)],
        );
        assert_eq!(t.input_shape().unwrap(), vec![2, 4]);
    }

    #[test]
    fn depthwise_requires_matching_channels() {
        let bad = OperatorNode::new(
            "d",
            OpKind::DepthwiseConv2d,
            &[
                ("N", 1),
                ("I", 8),
                ("O", 16),
                ("H", 4),
                ("W", 4),
                ("R", 3),
                ("C", 3),
                ("pad", 1),
            ],
        );
        assert!(Graph::new(vec![bad], vec![]).is_err());
    }
}
