//! Deterministic loop-nest interpreter.
//!
//! Executes a subgraph under a schedule on small concrete tensors, counts
//! how often each operator's reduction nest is entered, and records the
//! full memory access trace. Interpretation (rather than code generation)
//! keeps every quantity observable: trips are counted one loop iteration
//! at a time, so they serve as a brute-force oracle for the analytic
//! fusion formulas, and traces feed the cache cost model.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fusion::TileSpec;
use crate::graph::{Graph, GraphError, OpKind, OperatorNode};
use crate::tuner::{FusionMode, Schedule, ScheduleError};

/// Desk-scale cap on loop extents; keeps brute-force oracles tractable.
pub const MAX_EXTENT: u64 = 64;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("node \"{node}\": loop \"{name}\" extent {extent} exceeds the desk-scale cap {MAX_EXTENT}")]
    ExtentCap {
        node: String,
        name: String,
        extent: u64,
    },
    #[error("missing input tensor \"{0}\"")]
    MissingInput(String),
    #[error("tensor \"{name}\": expected shape {expect:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expect: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node \"{node}\": expected at most {max} incoming edges, got {got}")]
    TooManyInputs {
        node: String,
        max: usize,
        got: usize,
    },
    #[error("fusion analysis requires stride 1 and pad 0 downstream, got stride {stride}, pad {pad}")]
    UnsupportedStridePad { stride: u64, pad: u64 },
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Option<Tensor> {
        if shape.iter().product::<usize>() == data.len() {
            Some(Tensor {
                shape: shape.to_vec(),
                data,
            })
        } else {
            None
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut out = 0;
        for (i, d) in idx.iter().zip(&self.shape) {
            debug_assert!(i < d);
            out = out * d + i;
        }
        out
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let flat = self.flat(idx);
        self.data[flat] = v;
    }
}

fn unflatten(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    let mut out = 0;
    for (i, d) in idx.iter().zip(shape) {
        out = out * d + i;
    }
    out
}

pub type TensorId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessEvent {
    pub tensor: TensorId,
    pub index: usize,
    pub kind: AccessKind,
}

/// Ordered record of every tensor element touched during interpretation.
#[derive(Debug, Clone, Default)]
pub struct AccessTrace {
    pub tensor_names: Vec<String>,
    pub events: Vec<AccessEvent>,
}

impl AccessTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn name(&self, id: TensorId) -> &str {
        &self.tensor_names[id as usize]
    }

    pub fn count(&self, name: &str, kind: AccessKind) -> usize {
        let Some(id) = self.tensor_names.iter().position(|n| n == name) else {
            return 0;
        };
        self.events
            .iter()
            .filter(|e| e.tensor == id as TensorId && e.kind == kind)
            .count()
    }
}

/// Every external tensor a subgraph execution needs, as (name, shape).
/// Covers outside producers, primary inputs of boundary nodes, weights,
/// biases, and second operands.
pub fn required_inputs(
    graph: &Graph,
    nodes: &BTreeSet<String>,
) -> Result<BTreeMap<String, Vec<usize>>, InterpError> {
    let mut out = BTreeMap::new();
    for id in nodes {
        let node = graph.node(id)?;
        let in_edges: Vec<&str> = graph.preds(id);
        let max_in = match node.kind {
            OpKind::Add | OpKind::Mul | OpKind::Matmul => 2,
            _ => 1,
        };
        if in_edges.len() > max_in {
            return Err(InterpError::TooManyInputs {
                node: id.clone(),
                max: max_in,
                got: in_edges.len(),
            });
        }
        let to_usize = |shape: Vec<u64>| shape.into_iter().map(|d| d as usize).collect::<Vec<_>>();
        // Primary data input.
        match in_edges.first() {
            Some(producer) if !nodes.contains(*producer) => {
                out.insert(
                    producer.to_string(),
                    to_usize(graph.node(producer)?.output_shape()?),
                );
            }
            Some(_) => {}
            None => {
                out.insert(format!("{id}.in"), to_usize(node.input_shape()?));
            }
        }
        // Secondary operand.
        match node.kind {
            OpKind::Add | OpKind::Mul => match in_edges.get(1) {
                Some(producer) if !nodes.contains(*producer) => {
                    out.insert(
                        producer.to_string(),
                        to_usize(graph.node(producer)?.output_shape()?),
                    );
                }
                Some(_) => {}
                None => {
                    out.insert(format!("{id}.rhs"), to_usize(node.output_shape()?));
                }
            },
            OpKind::Matmul => match in_edges.get(1) {
                Some(producer) if !nodes.contains(*producer) => {
                    out.insert(
                        producer.to_string(),
                        to_usize(graph.node(producer)?.output_shape()?),
                    );
                }
                Some(_) => {}
                None => {
                    out.insert(
                        format!("{id}.weight"),
                        vec![node.attr("K")? as usize, node.attr("N")? as usize],
                    );
                }
            },
            OpKind::Conv2d => {
                out.insert(
                    format!("{id}.weight"),
                    to_usize(vec![
                        node.attr("O")?,
                        node.attr("I")?,
                        node.attr("R")?,
                        node.attr("C")?,
                    ]),
                );
            }
            OpKind::DepthwiseConv2d => {
                out.insert(
                    format!("{id}.weight"),
                    to_usize(vec![node.attr("O")?, node.attr("R")?, node.attr("C")?]),
                );
            }
            OpKind::PointwiseConv2d => {
                out.insert(
                    format!("{id}.weight"),
                    to_usize(vec![node.attr("O")?, node.attr("I")?]),
                );
            }
            OpKind::BiasAdd => {
                let shape = node.output_shape()?;
                let channels = if shape.len() >= 2 { shape[1] } else { shape[0] };
                out.insert(format!("{id}.bias"), vec![channels as usize]);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Zero-filled (seed `None`) or seeded uniform [-1, 1) tensors for every
/// external input the subgraph needs.
pub fn synthesize_inputs(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    seed: Option<u64>,
) -> Result<BTreeMap<String, Tensor>, InterpError> {
    let shapes = required_inputs(graph, nodes)?;
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    Ok(shapes
        .into_iter()
        .map(|(name, shape)| {
            let tensor = match rng.as_mut() {
                Some(rng) => Tensor::random(&shape, rng),
                None => Tensor::zeros(&shape),
            };
            (name, tensor)
        })
        .collect())
}

struct TiledDim {
    extent: usize,
    boundary: usize,
    inner: usize,
}

struct NodeExec {
    id: String,
    kind: OpKind,
    out: TensorId,
    out_shape: Vec<usize>,
    /// Primary data input tensor.
    data_in: Option<TensorId>,
    /// Weight / bias / second operand tensor.
    aux_in: Option<TensorId>,
    dims: Vec<TiledDim>,
    window: (usize, usize),
    pad: usize,
    stride: usize,
    in_shape: Vec<usize>,
    perm: Vec<usize>,
}

struct Machine<'a> {
    tensors: Vec<Tensor>,
    trips: BTreeMap<String, u64>,
    trace: Vec<AccessEvent>,
    want_trace: bool,
    compute: bool,
    execs: &'a [NodeExec],
}

impl Machine<'_> {
    fn read(&mut self, tensor: TensorId, idx: usize) -> f64 {
        if self.want_trace {
            self.trace.push(AccessEvent {
                tensor,
                index: idx,
                kind: AccessKind::Read,
            });
        }
        if self.compute {
            self.tensors[tensor as usize].data[idx]
        } else {
            0.0
        }
    }

    fn write(&mut self, tensor: TensorId, idx: usize, v: f64) {
        if self.want_trace {
            self.trace.push(AccessEvent {
                tensor,
                index: idx,
                kind: AccessKind::Write,
            });
        }
        if self.compute {
            self.tensors[tensor as usize].data[idx] = v;
        }
    }

    fn flat(&self, tensor: TensorId, idx: &[usize]) -> usize {
        self.tensors[tensor as usize].flat(idx)
    }

    /// One spatial point of `node`: enters the reduction nest (or the
    /// elementwise body), returning the computed value.
    fn element(&mut self, node: &NodeExec, idx: &[usize]) -> f64 {
        *self.trips.get_mut(&node.id).unwrap() += 1;
        if !self.compute && !self.want_trace {
            return 0.0;
        }
        let data = node.data_in;
        let aux = node.aux_in;
        match node.kind {
            OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::PointwiseConv2d => {
                let (n, o, h, w) = (idx[0], idx[1], idx[2], idx[3]);
                let (r, c) = node.window;
                let (h_in, w_in) = (node.in_shape[2], node.in_shape[3]);
                let channels = match node.kind {
                    OpKind::DepthwiseConv2d => 1, // one input channel per output channel
                    _ => node.in_shape[1],
                };
                let mut acc = 0.0;
                for ri in 0..channels {
                    for rr in 0..r {
                        for rc in 0..c {
                            let ih = (h * node.stride + rr) as isize - node.pad as isize;
                            let iw = (w * node.stride + rc) as isize - node.pad as isize;
                            let v = if ih >= 0
                                && iw >= 0
                                && (ih as usize) < h_in
                                && (iw as usize) < w_in
                            {
                                let channel = if node.kind == OpKind::DepthwiseConv2d {
                                    o
                                } else {
                                    ri
                                };
                                let flat = self.flat(
                                    data.unwrap(),
                                    &[n, channel, ih as usize, iw as usize],
                                );
                                self.read(data.unwrap(), flat)
                            } else {
                                0.0
                            };
                            let wflat = match node.kind {
                                OpKind::Conv2d => {
                                    self.flat(aux.unwrap(), &[o, ri, rr, rc])
                                }
                                OpKind::DepthwiseConv2d => self.flat(aux.unwrap(), &[o, rr, rc]),
                                _ => self.flat(aux.unwrap(), &[o, ri]),
                            };
                            let wv = self.read(aux.unwrap(), wflat);
                            acc += v * wv;
                        }
                    }
                }
                acc
            }
            OpKind::Matmul => {
                let (m, n) = (idx[0], idx[1]);
                let k = node.in_shape[1];
                let mut acc = 0.0;
                for rk in 0..k {
                    let aflat = self.flat(data.unwrap(), &[m, rk]);
                    let a = self.read(data.unwrap(), aflat);
                    let bflat = self.flat(aux.unwrap(), &[rk, n]);
                    let b = self.read(aux.unwrap(), bflat);
                    acc += a * b;
                }
                acc
            }
            OpKind::Add | OpKind::Mul => {
                let lf = self.flat(data.unwrap(), idx);
                let l = self.read(data.unwrap(), lf);
                let rf = self.flat(aux.unwrap(), idx);
                let r = self.read(aux.unwrap(), rf);
                if node.kind == OpKind::Add {
                    l + r
                } else {
                    l * r
                }
            }
            OpKind::BiasAdd => {
                let lf = self.flat(data.unwrap(), idx);
                let l = self.read(data.unwrap(), lf);
                let channel = if idx.len() >= 2 { idx[1] } else { idx[0] };
                let b = self.read(aux.unwrap(), channel);
                l + b
            }
            OpKind::Relu => {
                let lf = self.flat(data.unwrap(), idx);
                self.read(data.unwrap(), lf).max(0.0)
            }
            OpKind::Reshape => {
                let flat = flat_index(&node.out_shape, idx);
                self.read(data.unwrap(), flat)
            }
            OpKind::Transpose => {
                let mut in_idx = vec![0; idx.len()];
                for (k, &p) in node.perm.iter().enumerate() {
                    in_idx[p] = idx[k];
                }
                let flat = self.flat(data.unwrap(), &in_idx);
                self.read(data.unwrap(), flat)
            }
            OpKind::Pad => {
                let rank = idx.len();
                let mut in_idx = idx.to_vec();
                let mut inside = true;
                for d in rank.saturating_sub(2)..rank {
                    let shifted = idx[d] as isize - node.pad as isize;
                    if shifted < 0 || shifted as usize >= node.in_shape[d] {
                        inside = false;
                        break;
                    }
                    in_idx[d] = shifted as usize;
                }
                if inside {
                    let flat = self.flat(data.unwrap(), &in_idx);
                    self.read(data.unwrap(), flat)
                } else {
                    0.0
                }
            }
        }
    }

    /// Push a freshly computed element through the conventional epilogue
    /// chain: each member consumes the value in-register (no re-read of the
    /// just-produced element) and stores its own output.
    fn forward(&mut self, chain: &[usize], mut idx: Vec<usize>, mut v: f64) {
        for &member in chain {
            let node = &self.execs[member];
            idx = match node.kind {
                OpKind::Reshape => {
                    let prev = node.data_in.unwrap();
                    let flat = flat_index(self.tensors[prev as usize].shape(), &idx);
                    unflatten(&node.out_shape, flat)
                }
                OpKind::Transpose => {
                    let mut out_idx = vec![0; idx.len()];
                    for (k, &p) in node.perm.iter().enumerate() {
                        out_idx[k] = idx[p];
                    }
                    out_idx
                }
                _ => idx,
            };
            *self.trips.get_mut(&node.id).unwrap() += 1;
            if self.compute || self.want_trace {
                v = match node.kind {
                    OpKind::Relu => v.max(0.0),
                    OpKind::BiasAdd => {
                        let channel = if idx.len() >= 2 { idx[1] } else { idx[0] };
                        v + self.read(node.aux_in.unwrap(), channel)
                    }
                    OpKind::Add | OpKind::Mul => {
                        // The forwarded value replaces whichever operand the
                        // fused producer feeds; the other one is a real read.
                        let other = node.aux_in.unwrap();
                        let of = self.flat(other, &idx);
                        let o = self.read(other, of);
                        if node.kind == OpKind::Add {
                            v + o
                        } else {
                            v * o
                        }
                    }
                    OpKind::Reshape | OpKind::Transpose => v,
                    _ => unreachable!("validated epilogue members are simple"),
                };
                let flat = self.flat(node.out, &idx);
                self.write(node.out, flat, v);
            }
        }
    }
}

fn odometer(counts: &[usize], mut f: impl FnMut(&[usize])) {
    if counts.iter().any(|&c| c == 0) {
        return;
    }
    let mut idx = vec![0; counts.len()];
    loop {
        f(&idx);
        let mut d = counts.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

struct Group {
    /// Fused chain in producer-to-consumer order.
    path: Vec<usize>,
    /// Path starts with a complex pair executed tile-by-tile.
    intensive: bool,
    min_doc: usize,
}

pub struct RunOutput {
    pub outputs: BTreeMap<String, Tensor>,
    pub trips: BTreeMap<String, u64>,
    pub trace: AccessTrace,
}

fn check_extent_cap(node: &OperatorNode) -> Result<(), InterpError> {
    let nest = node.loop_nest()?;
    for (name, extent) in nest.spatial.iter().chain(nest.reduction.iter()) {
        if *extent > MAX_EXTENT {
            return Err(InterpError::ExtentCap {
                node: node.id.clone(),
                name: name.clone(),
                extent: *extent,
            });
        }
    }
    Ok(())
}

fn interpret(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    schedule: &Schedule,
    inputs: Option<&BTreeMap<String, Tensor>>,
    want_trace: bool,
) -> Result<RunOutput, InterpError> {
    schedule.validate(graph, nodes)?;
    for id in nodes {
        check_extent_cap(graph.node(id)?)?;
    }
    let compute = inputs.is_some() || want_trace;

    // Tensor registry: externals first, then one output per member node.
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, TensorId> = HashMap::new();
    let mut tensors: Vec<Tensor> = Vec::new();
    let mut register = |name: &str, tensor: Tensor| -> TensorId {
        let id = names.len() as TensorId;
        names.push(name.to_string());
        tensors.push(tensor);
        id
    };
    let required = required_inputs(graph, nodes)?;
    for (name, shape) in &required {
        let tensor = match inputs.and_then(|m| m.get(name)) {
            Some(t) => {
                if t.shape() != shape.as_slice() {
                    return Err(InterpError::ShapeMismatch {
                        name: name.clone(),
                        expect: shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            None if inputs.is_some() => return Err(InterpError::MissingInput(name.clone())),
            None => Tensor::zeros(shape),
        };
        let id = register(name, tensor);
        ids.insert(name.clone(), id);
    }
    // Member outputs in document order.
    let member_order: Vec<&OperatorNode> = graph
        .nodes()
        .iter()
        .filter(|n| nodes.contains(&n.id))
        .collect();
    for node in &member_order {
        let shape: Vec<usize> = node
            .output_shape()?
            .into_iter()
            .map(|d| d as usize)
            .collect();
        let id = register(&node.id, Tensor::zeros(&shape));
        ids.insert(node.id.clone(), id);
    }

    // Per-node execution info.
    let mut execs: Vec<NodeExec> = Vec::new();
    let mut exec_of: HashMap<String, usize> = HashMap::new();
    for node in &member_order {
        let in_edges = graph.preds(&node.id);
        let primary = match in_edges.first() {
            Some(p) => ids[*p],
            None => ids[&format!("{}.in", node.id)],
        };
        let aux_in = match node.kind {
            OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::PointwiseConv2d => {
                Some(ids[&format!("{}.weight", node.id)])
            }
            OpKind::Matmul => Some(match in_edges.get(1) {
                Some(p) => ids[*p],
                None => ids[&format!("{}.weight", node.id)],
            }),
            OpKind::Add | OpKind::Mul => Some(match in_edges.get(1) {
                Some(p) => ids[*p],
                None => ids[&format!("{}.rhs", node.id)],
            }),
            OpKind::BiasAdd => Some(ids[&format!("{}.bias", node.id)]),
            _ => None,
        };
        let data_in = Some(primary);
        // Validate incoming tensor shapes against the operator contract.
        let expect_in: Vec<usize> = node.input_shape()?.into_iter().map(|d| d as usize).collect();
        let got_in = tensors[data_in.unwrap() as usize].shape().to_vec();
        let in_ok = match node.kind {
            OpKind::Reshape => {
                got_in.iter().product::<usize>() == expect_in.iter().product::<usize>()
            }
            _ => got_in == expect_in,
        };
        if !in_ok {
            return Err(InterpError::ShapeMismatch {
                name: format!("{} input", node.id),
                expect: expect_in,
                got: got_in,
            });
        }
        if matches!(node.kind, OpKind::Add | OpKind::Mul) {
            let got_rhs = tensors[aux_in.unwrap() as usize].shape().to_vec();
            if got_rhs != expect_in {
                return Err(InterpError::ShapeMismatch {
                    name: format!("{} second operand", node.id),
                    expect: expect_in,
                    got: got_rhs,
                });
            }
        }

        let nest = node.loop_nest()?;
        let tile = schedule.tile_of(&node.id);
        let dims = nest
            .spatial
            .iter()
            .map(|(name, extent)| {
                let boundary = tile.boundary.get(name, *extent) as usize;
                let inner = tile.inner.get(name, boundary as u64) as usize;
                TiledDim {
                    extent: *extent as usize,
                    boundary,
                    inner,
                }
            })
            .collect();
        let (r, c) = node.window().unwrap_or((1, 1));
        exec_of.insert(node.id.clone(), execs.len());
        execs.push(NodeExec {
            id: node.id.clone(),
            kind: node.kind,
            out: ids[&node.id],
            out_shape: node
                .output_shape()?
                .into_iter()
                .map(|d| d as usize)
                .collect(),
            data_in,
            aux_in,
            dims,
            window: (r as usize, c as usize),
            pad: node.pad()? as usize,
            stride: node.stride()? as usize,
            in_shape: {
                let t = tensors[data_in.unwrap() as usize].shape().to_vec();
                t
            },
            perm: if node.kind == OpKind::Transpose {
                node.perm()?
            } else {
                Vec::new()
            },
        });
    }

    // Assemble fused chains.
    let mut fused_next: HashMap<&str, &str> = HashMap::new();
    let mut fused_prev: HashMap<&str, FusionMode> = HashMap::new();
    for decision in &schedule.fusions {
        if decision.mode == FusionMode::None {
            continue;
        }
        if nodes.contains(&decision.producer) && nodes.contains(&decision.consumer) {
            fused_next.insert(&decision.producer, &decision.consumer);
            fused_prev.insert(&decision.consumer, decision.mode);
        }
    }
    let mut groups: Vec<Group> = Vec::new();
    let mut group_of: HashMap<usize, usize> = HashMap::new();
    for node in &member_order {
        if fused_prev.contains_key(node.id.as_str()) {
            continue; // not a chain head
        }
        let mut path = vec![exec_of[&node.id]];
        let mut cur = node.id.as_str();
        let mut intensive = false;
        while let Some(&next) = fused_next.get(cur) {
            if fused_prev[next] == FusionMode::Intensive {
                intensive = true;
            }
            path.push(exec_of[next]);
            cur = next;
        }
        let min_doc = path
            .iter()
            .map(|&e| graph.doc_index(&execs[e].id).unwrap())
            .min()
            .unwrap();
        for &m in &path {
            group_of.insert(m, groups.len());
        }
        groups.push(Group {
            path,
            intensive,
            min_doc,
        });
    }

    // Topological order over the group quotient, ties by document index.
    let order = {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let mut edges: HashSet<(usize, usize)> = HashSet::new();
        for (s, d) in graph.edges() {
            if nodes.contains(s) && nodes.contains(d) {
                let (gs, gd) = (group_of[&exec_of[s]], group_of[&exec_of[d]]);
                if gs != gd {
                    edges.insert((gs, gd));
                }
            }
        }
        let mut indeg = vec![0usize; groups.len()];
        let mut succs = vec![Vec::new(); groups.len()];
        for &(s, d) in &edges {
            indeg[d] += 1;
            succs[s].push(d);
        }
        let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..groups.len())
            .filter(|&i| indeg[i] == 0)
            .map(|i| Reverse((groups[i].min_doc, i)))
            .collect();
        let mut order = Vec::with_capacity(groups.len());
        while let Some(Reverse((_, g))) = heap.pop() {
            order.push(g);
            for &v in &succs[g] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    heap.push(Reverse((groups[v].min_doc, v)));
                }
            }
        }
        order
    };

    let mut machine = Machine {
        tensors,
        trips: nodes.iter().map(|id| (id.clone(), 0)).collect(),
        trace: Vec::new(),
        want_trace,
        compute,
        execs: &execs,
    };

    for &g in &order {
        let group = &groups[g];
        if group.intensive {
            run_intensive_group(&mut machine, group);
            continue;
        }
        let head = &execs[group.path[0]];
        let outer: Vec<usize> = head.dims.iter().map(|d| d.extent / d.boundary).collect();
        let mid: Vec<usize> = head.dims.iter().map(|d| d.boundary / d.inner).collect();
        let inner: Vec<usize> = head.dims.iter().map(|d| d.inner).collect();
        let counts: Vec<usize> = outer
            .iter()
            .chain(mid.iter())
            .chain(inner.iter())
            .copied()
            .collect();
        let k = head.dims.len();
        odometer(&counts, |combo| {
            let idx: Vec<usize> = (0..k)
                .map(|d| {
                    combo[d] * head.dims[d].boundary
                        + combo[k + d] * head.dims[d].inner
                        + combo[2 * k + d]
                })
                .collect();
            let v = machine.element(head, &idx);
            if machine.compute || machine.want_trace {
                let flat = machine.flat(head.out, &idx);
                machine.write(head.out, flat, v);
            }
            machine.forward(&group.path[1..], idx, v);
        });
    }

    let outputs = member_order
        .iter()
        .map(|n| {
            (
                n.id.clone(),
                machine.tensors[ids[&n.id] as usize].clone(),
            )
        })
        .collect();
    Ok(RunOutput {
        outputs,
        trips: machine.trips,
        trace: AccessTrace {
            tensor_names: names,
            events: machine.trace,
        },
    })
}

/// Fuse-after-tile execution of an intensive pair: per downstream boundary
/// tile, compute the upstream region the tile needs (re-entering the
/// upstream reduction nest once per element), then the tile itself, then
/// the epilogue chain.
fn run_intensive_group(machine: &mut Machine, group: &Group) {
    let execs = machine.execs;
    let u_exec = &execs[group.path[0]];
    let d_exec = &execs[group.path[1]];
    let outer_counts: Vec<usize> = d_exec.dims.iter().map(|d| d.extent / d.boundary).collect();
    let k = d_exec.dims.len();
    let mid: Vec<usize> = d_exec.dims.iter().map(|d| d.boundary / d.inner).collect();
    let inner: Vec<usize> = d_exec.dims.iter().map(|d| d.inner).collect();
    let tile_counts: Vec<usize> = mid.iter().chain(inner.iter()).copied().collect();
    odometer(&outer_counts, |outer_idx| {
        let origin: Vec<usize> = outer_idx
            .iter()
            .zip(&d_exec.dims)
            .map(|(o, d)| o * d.boundary)
            .collect();
        let spans: Vec<usize> = d_exec.dims.iter().map(|d| d.boundary).collect();

        // Upstream region (start, len) per upstream output dim, derived
        // from the downstream operator's read pattern.
        let (r, c) = d_exec.window;
        let region: Vec<(usize, usize)> = match d_exec.kind {
            OpKind::Conv2d | OpKind::PointwiseConv2d => vec![
                (origin[0], spans[0]),
                (0, d_exec.in_shape[1]),
                (origin[2], spans[2] + r - 1),
                (origin[3], spans[3] + c - 1),
            ],
            OpKind::DepthwiseConv2d => vec![
                (origin[0], spans[0]),
                (origin[1], spans[1]),
                (origin[2], spans[2] + r - 1),
                (origin[3], spans[3] + c - 1),
            ],
            OpKind::Matmul => vec![(origin[0], spans[0]), (0, d_exec.in_shape[1])],
            _ => unreachable!("validated intensive consumers are complex"),
        };
        let lens: Vec<usize> = region.iter().map(|&(_, l)| l).collect();
        odometer(&lens, |off| {
            let idx: Vec<usize> = off.iter().zip(&region).map(|(o, &(s, _))| s + o).collect();
            let v = machine.element(u_exec, &idx);
            if machine.compute || machine.want_trace {
                let flat = machine.flat(u_exec.out, &idx);
                machine.write(u_exec.out, flat, v);
            }
        });

        // Downstream tile, honoring its inner tiling.
        odometer(&tile_counts, |combo| {
            let idx: Vec<usize> = (0..k)
                .map(|d| origin[d] + combo[d] * d_exec.dims[d].inner + combo[k + d])
                .collect();
            let v = machine.element(d_exec, &idx);
            if machine.compute || machine.want_trace {
                let flat = machine.flat(d_exec.out, &idx);
                machine.write(d_exec.out, flat, v);
            }
            machine.forward(&group.path[2..], idx, v);
        });
    });
}

/// Execute a subgraph under a schedule. All external inputs must be
/// provided; returns every member's output tensor.
pub fn execute(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    schedule: &Schedule,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, InterpError> {
    Ok(interpret(graph, nodes, schedule, Some(inputs), false)?.outputs)
}

/// Exact number of times each operator's reduction nest is entered under
/// the schedule (output elements computed, with duplication under fusion).
pub fn count_trips(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    schedule: &Schedule,
) -> Result<BTreeMap<String, u64>, InterpError> {
    Ok(interpret(graph, nodes, schedule, None, false)?.trips)
}

/// Complete ordered access trace of the interpreted loops, over synthetic
/// zero inputs.
pub fn trace_memory(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    schedule: &Schedule,
) -> Result<AccessTrace, InterpError> {
    Ok(interpret(graph, nodes, schedule, None, true)?.trace)
}

/// Both trace and trips in one pass (the cost model needs both).
pub fn trace_and_trips(
    graph: &Graph,
    nodes: &BTreeSet<String>,
    schedule: &Schedule,
) -> Result<(AccessTrace, BTreeMap<String, u64>), InterpError> {
    let run = interpret(graph, nodes, schedule, None, true)?;
    Ok((run.trace, run.trips))
}

/// Counts for one producer-consumer pair under fuse-after-tile with the
/// given downstream tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTrips {
    pub upstream: u64,
    pub downstream: u64,
}

/// Brute-force fuse-after-tile trip counts for a complex pair: enumerates
/// every downstream element of every tile and collects the distinct
/// upstream elements its reduction nest reads. Independent of the analytic
/// footprint formulas, so it serves as their oracle — including for pairs
/// (like conv -> conv) whose fusion no valid schedule would ever emit.
pub fn count_pair_trips(
    upstream: &OperatorNode,
    downstream: &OperatorNode,
    tiles: &TileSpec,
) -> Result<PairTrips, InterpError> {
    if !downstream.kind.is_complex() || !upstream.kind.is_complex() {
        return Err(InterpError::Graph(GraphError::BadNode {
            node: downstream.id.clone(),
            reason: "pair trip counting requires two complex operators".to_string(),
        }));
    }
    check_extent_cap(upstream)?;
    check_extent_cap(downstream)?;
    let stride = downstream.stride()?;
    let pad = downstream.pad()?;
    if stride != 1 || pad != 0 {
        return Err(InterpError::UnsupportedStridePad { stride, pad });
    }
    let up_shape: Vec<usize> = upstream
        .output_shape()?
        .into_iter()
        .map(|d| d as usize)
        .collect();
    let up_tensor = Tensor::zeros(&up_shape);
    let nest = downstream.loop_nest()?;
    let extents: Vec<usize> = nest.spatial.iter().map(|(_, e)| *e as usize).collect();
    let tile_sizes: Vec<usize> = nest
        .spatial
        .iter()
        .map(|(name, e)| tiles.get(name, *e) as usize)
        .collect();
    for (d, (&extent, &tile)) in extents.iter().zip(&tile_sizes).enumerate() {
        if tile == 0 || extent % tile != 0 {
            return Err(InterpError::Schedule(ScheduleError::BadTile {
                node: downstream.id.clone(),
                name: nest.spatial[d].0.clone(),
                tile: tile as u64,
                extent: extent as u64,
            }));
        }
    }
    let reduction: Vec<usize> = nest.reduction.iter().map(|(_, e)| *e as usize).collect();

    let outer_counts: Vec<usize> = extents
        .iter()
        .zip(&tile_sizes)
        .map(|(e, t)| e / t)
        .collect();
    let mut upstream_trips = 0u64;
    let mut downstream_trips = 0u64;
    let kind = downstream.kind;
    odometer(&outer_counts, |outer_idx| {
        let mut needed: HashSet<usize> = HashSet::new();
        odometer(&tile_sizes, |off| {
            downstream_trips += 1;
            let idx: Vec<usize> = outer_idx
                .iter()
                .zip(off)
                .zip(&tile_sizes)
                .map(|((o, i), t)| o * t + i)
                .collect();
            odometer(&reduction, |red| match kind {
                OpKind::Conv2d => {
                    let (n, _, h, w) = (idx[0], idx[1], idx[2], idx[3]);
                    let (ri, rr, rc) = (red[0], red[1], red[2]);
                    needed.insert(up_tensor.flat(&[n, ri, h + rr, w + rc]));
                }
                OpKind::DepthwiseConv2d => {
                    let (n, ch, h, w) = (idx[0], idx[1], idx[2], idx[3]);
                    let (rr, rc) = (red[0], red[1]);
                    needed.insert(up_tensor.flat(&[n, ch, h + rr, w + rc]));
                }
                OpKind::PointwiseConv2d => {
                    let (n, _, h, w) = (idx[0], idx[1], idx[2], idx[3]);
                    needed.insert(up_tensor.flat(&[n, red[0], h, w]));
                }
                OpKind::Matmul => {
                    needed.insert(up_tensor.flat(&[idx[0], red[0]]));
                }
                _ => {}
            });
        });
        upstream_trips += needed.len() as u64;
    });
    Ok(PairTrips {
        upstream: upstream_trips,
        downstream: downstream_trips,
    })
}
