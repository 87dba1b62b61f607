//! Iteration-space analysis for operator fusion.
//!
//! Fusing a complex producer under a tiled complex consumer re-executes the
//! producer once per consumer tile footprint. This module computes the
//! GS/TS decomposition, the upstream footprint a downstream tile pulls in,
//! the resulting analytic trip count, and the two redundancy conditions;
//! `intensive_fusion_legal` classifies the pairs where leaving the reused
//! dimensions untiled provably removes all re-computation.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, LoopNest, OpKind, OperatorNode};
use crate::tuner::{FusionDecision, FusionMode, Schedule, TwoLevelTile};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("loop \"{name}\": tile {tile} does not divide extent {extent}")]
    NonDivisorTile { name: String, tile: u64, extent: u64 },
    #[error("\"{0}\" is not a spatial loop of this nest")]
    UnknownLoop(String),
    #[error("operator kind {0:?} is not supported by fusion analysis")]
    UnsupportedKind(OpKind),
    #[error("fusion analysis requires stride 1 and pad 0 downstream, got stride {stride}, pad {pad}")]
    UnsupportedStridePad { stride: u64, pad: u64 },
    #[error("upstream output shape {up:?} does not match downstream input shape {down:?}")]
    IncompatiblePair { up: Vec<u64>, down: Vec<u64> },
    #[error("intensive fusion is not applicable to this pair")]
    NotApplicablePair,
    #[error("inner tiles must not touch reserved dim \"{0}\"")]
    ReservedDim(String),
}

/// A named multi-dimensional iteration space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterSpace {
    pub loops: Vec<(String, u64)>,
}

impl IterSpace {
    pub fn size(&self) -> u64 {
        self.loops.iter().map(|(_, e)| e).product()
    }

    pub fn extent(&self, name: &str) -> Option<u64> {
        self.loops.iter().find(|(n, _)| n == name).map(|(_, e)| *e)
    }
}

/// Per-spatial-loop tile extents; loops without an entry are untiled
/// (tile = full extent). Reduction loops are never tiled.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    tiles: BTreeMap<String, u64>,
}

impl TileSpec {
    pub fn new() -> Self {
        TileSpec::default()
    }

    pub fn with(mut self, name: &str, tile: u64) -> Self {
        self.tiles.insert(name.to_string(), tile);
        self
    }

    pub fn set(&mut self, name: &str, tile: u64) {
        self.tiles.insert(name.to_string(), tile);
    }

    /// Tile extent for `name`, defaulting to the full extent.
    pub fn get(&self, name: &str, full: u64) -> u64 {
        self.tiles.get(name).copied().unwrap_or(full)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> + '_ {
        self.tiles.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn validate(&self, nest: &LoopNest) -> Result<(), FusionError> {
        for (name, tile) in &self.tiles {
            let extent = nest
                .spatial_extent(name)
                .ok_or_else(|| FusionError::UnknownLoop(name.clone()))?;
            if *tile == 0 || extent % tile != 0 {
                return Err(FusionError::NonDivisorTile {
                    name: name.clone(),
                    tile: *tile,
                    extent,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionCategory {
    DepthwiseDownstream,
    PointwiseDownstream,
    NotApplicable,
}

/// Outcome of the intensive-fusion legality check: which dimensions of the
/// downstream operator reuse the upstream tensor, and which must stay
/// untiled at the fusion boundary for a redundancy-free schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionVerdict {
    pub category: FusionCategory,
    pub reused_dims: BTreeSet<String>,
    pub required_untiled: BTreeSet<String>,
}

/// Split a loop nest into its global space, intra-tile space, and outer
/// (inter-tile) space: |outer| * |TS| = |GS|.
pub fn decompose(
    nest: &LoopNest,
    tiles: &TileSpec,
) -> Result<(IterSpace, IterSpace, IterSpace), FusionError> {
    tiles.validate(nest)?;
    let gs = IterSpace {
        loops: nest.spatial.clone(),
    };
    let ts = IterSpace {
        loops: nest
            .spatial
            .iter()
            .map(|(n, e)| (n.clone(), tiles.get(n, *e)))
            .collect(),
    };
    let outer = IterSpace {
        loops: nest
            .spatial
            .iter()
            .map(|(n, e)| (n.clone(), e / tiles.get(n, *e)))
            .collect(),
    };
    Ok((gs, ts, outer))
}

fn require_unit_stride_pad(node: &OperatorNode) -> Result<(), FusionError> {
    let stride = node.stride()?;
    let pad = node.pad()?;
    if stride != 1 || pad != 0 {
        return Err(FusionError::UnsupportedStridePad { stride, pad });
    }
    Ok(())
}

/// The upstream-tensor region one downstream output tile reads, derived
/// from the downstream operator's data mapping (unit stride, no padding).
pub fn footprint(downstream: &OperatorNode, tiles: &TileSpec) -> Result<IterSpace, FusionError> {
    if !downstream.kind.is_complex() {
        return Err(FusionError::UnsupportedKind(downstream.kind));
    }
    let nest = downstream.loop_nest()?;
    tiles.validate(&nest)?;
    require_unit_stride_pad(downstream)?;
    let span = |name: &str| -> u64 {
        let full = nest.spatial_extent(name).unwrap();
        tiles.get(name, full)
    };
    let loops = match downstream.kind {
        // A conv tile needs every upstream channel plus a window-widened
        // h/w region.
        OpKind::Conv2d => {
            let (r, c) = downstream.window()?;
            vec![
                ("n".to_string(), span("n")),
                ("o1".to_string(), downstream.attr("I")?),
                ("h1".to_string(), span("h") + r - 1),
                ("w1".to_string(), span("w") + c - 1),
            ]
        }
        // Depthwise preserves channels (o1 = o2) and widens h/w.
        OpKind::DepthwiseConv2d => {
            let (r, c) = downstream.window()?;
            vec![
                ("n".to_string(), span("n")),
                ("o1".to_string(), span("c")),
                ("h1".to_string(), span("h") + r - 1),
                ("w1".to_string(), span("w") + c - 1),
            ]
        }
        // Pointwise reads all input channels at the tile's own h/w.
        OpKind::PointwiseConv2d => vec![
            ("n".to_string(), span("n")),
            ("o1".to_string(), downstream.attr("I")?),
            ("h1".to_string(), span("h")),
            ("w1".to_string(), span("w")),
        ],
        // Matmul behaves like pointwise: an output tile needs the full
        // reduction extent of its operand rows.
        OpKind::Matmul => vec![
            ("m1".to_string(), span("m")),
            ("k1".to_string(), downstream.attr("K")?),
        ],
        _ => unreachable!("complex kinds handled above"),
    };
    Ok(IterSpace { loops })
}

fn check_pair(upstream: &OperatorNode, downstream: &OperatorNode) -> Result<(), FusionError> {
    if !upstream.kind.is_complex() {
        return Err(FusionError::UnsupportedKind(upstream.kind));
    }
    if !downstream.kind.is_complex() {
        return Err(FusionError::UnsupportedKind(downstream.kind));
    }
    let up = upstream.output_shape()?;
    let down = downstream.input_shape()?;
    if up != down {
        return Err(FusionError::IncompatiblePair { up, down });
    }
    Ok(())
}

/// Outer tile count and per-tile footprint behind the analytic trip count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripsBreakdown {
    pub outer: IterSpace,
    pub footprint: IterSpace,
    /// Upstream elements computed under fuse-after-tile.
    pub fused: u64,
    /// Upstream elements computed without fusion (its spatial size).
    pub unfused: u64,
}

pub fn trips_breakdown(
    upstream: &OperatorNode,
    downstream: &OperatorNode,
    tiles: &TileSpec,
) -> Result<TripsBreakdown, FusionError> {
    check_pair(upstream, downstream)?;
    let down_nest = downstream.loop_nest()?;
    let (_, _, outer) = decompose(&down_nest, tiles)?;
    let fp = footprint(downstream, tiles)?;
    let fused = outer.size() * fp.size();
    let unfused = upstream.loop_nest()?.spatial_size();
    Ok(TripsBreakdown {
        outer,
        footprint: fp,
        fused,
        unfused,
    })
}

/// Number of upstream output elements computed when the upstream operator
/// is fused under the downstream tiling: (downstream outer tiles) x
/// (upstream footprint per tile). Each element costs one full execution of
/// the upstream reduction nest.
pub fn fused_upstream_trips(
    upstream: &OperatorNode,
    downstream: &OperatorNode,
    tiles: &TileSpec,
) -> Result<u64, FusionError> {
    Ok(trips_breakdown(upstream, downstream, tiles)?.fused)
}

/// Downstream dims that correspond to an upstream tensor dimension; outer
/// iteration over any other dim re-reads (hence re-computes) the upstream.
fn mapped_dims(kind: OpKind) -> &'static [&'static str] {
    match kind {
        OpKind::Conv2d => &["n", "h", "w"],
        OpKind::DepthwiseConv2d => &["n", "c", "h", "w"],
        OpKind::PointwiseConv2d => &["n", "h", "w"],
        OpKind::Matmul => &["m"],
        _ => &[],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    /// Fused upstream compute over unfused upstream compute; 1 means no
    /// re-computation.
    pub ratio: f64,
    /// A downstream outer loop iterates a dimension the upstream does not
    /// have, re-computing the whole footprint per iteration.
    pub cond1: bool,
    /// Sliding-window overlap with more than one tile along an h/w dim:
    /// neighboring footprints share elements.
    pub cond2: bool,
}

pub fn redundancy(
    upstream: &OperatorNode,
    downstream: &OperatorNode,
    tiles: &TileSpec,
) -> Result<Redundancy, FusionError> {
    let breakdown = trips_breakdown(upstream, downstream, tiles)?;
    let ratio = breakdown.fused as f64 / breakdown.unfused as f64;
    let nest = downstream.loop_nest()?;
    let mapped = mapped_dims(downstream.kind);
    let outer_of = |name: &str| breakdown.outer.extent(name).unwrap_or(1);
    let cond1 = nest
        .spatial
        .iter()
        .any(|(name, _)| outer_of(name) > 1 && !mapped.contains(&name.as_str()));
    let cond2 = match downstream.kind {
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            let (r, c) = downstream.window()?;
            (r > 1 && outer_of("h") > 1) || (c > 1 && outer_of("w") > 1)
        }
        _ => false,
    };
    Ok(Redundancy { ratio, cond1, cond2 })
}

/// Classify a complex pair for intensive fusion. Depthwise downstream
/// reuses the upstream only on h/w; pointwise (and matmul) only on the
/// output-channel dim; a general conv reuses on all three at once, so no
/// reasonably sized untiled boundary exists.
pub fn intensive_fusion_legal(
    upstream: &OperatorNode,
    downstream: &OperatorNode,
) -> Result<FusionVerdict, FusionError> {
    check_pair(upstream, downstream)?;
    let set = |names: &[&str]| -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    };
    let verdict = match downstream.kind {
        OpKind::DepthwiseConv2d => FusionVerdict {
            category: FusionCategory::DepthwiseDownstream,
            reused_dims: set(&["h", "w"]),
            required_untiled: set(&["h", "w"]),
        },
        OpKind::PointwiseConv2d => FusionVerdict {
            category: FusionCategory::PointwiseDownstream,
            reused_dims: set(&["o"]),
            required_untiled: set(&["o"]),
        },
        OpKind::Matmul => FusionVerdict {
            category: FusionCategory::PointwiseDownstream,
            reused_dims: set(&["n"]),
            required_untiled: set(&["n"]),
        },
        OpKind::Conv2d => FusionVerdict {
            category: FusionCategory::NotApplicable,
            reused_dims: set(&["o", "h", "w"]),
            required_untiled: BTreeSet::new(),
        },
        other => return Err(FusionError::UnsupportedKind(other)),
    };
    Ok(verdict)
}

/// Build a redundancy-free intensive schedule for a legal pair: the
/// downstream boundary tile keeps every reused dim untiled, `inner_tiles`
/// sets the remaining boundary dims, and the upstream boundary tile is the
/// matching footprint. Inner tiling below the boundary is unconstrained.
pub fn derive_intensive_schedule(
    upstream: &OperatorNode,
    downstream: &OperatorNode,
    inner_tiles: &TileSpec,
) -> Result<Schedule, FusionError> {
    let verdict = intensive_fusion_legal(upstream, downstream)?;
    if verdict.category == FusionCategory::NotApplicable {
        return Err(FusionError::NotApplicablePair);
    }
    require_unit_stride_pad(downstream)?;
    let down_nest = downstream.loop_nest()?;
    inner_tiles.validate(&down_nest)?;
    for (name, tile) in inner_tiles.entries() {
        let full = down_nest.spatial_extent(name).unwrap();
        if verdict.required_untiled.contains(name) && tile != full {
            return Err(FusionError::ReservedDim(name.to_string()));
        }
    }

    let mut down_boundary = TileSpec::new();
    for (name, extent) in &down_nest.spatial {
        let tile = if verdict.required_untiled.contains(name) {
            *extent
        } else {
            inner_tiles.get(name, *extent)
        };
        down_boundary.set(name, tile);
    }

    // Upstream boundary tile = footprint of one downstream boundary tile,
    // expressed in the upstream's own loop names.
    let fp = footprint(downstream, &down_boundary)?;
    let up_nest = upstream.loop_nest()?;
    let mut up_boundary = TileSpec::new();
    match upstream.kind {
        OpKind::Matmul => {
            up_boundary.set("m", fp.extent("m1").unwrap());
            up_boundary.set("n", fp.extent("k1").unwrap());
        }
        _ => {
            let channel = if upstream.kind == OpKind::DepthwiseConv2d {
                "c"
            } else {
                "o"
            };
            up_boundary.set("n", fp.extent("n").unwrap());
            up_boundary.set(channel, fp.extent("o1").unwrap());
            up_boundary.set("h", fp.extent("h1").unwrap());
            up_boundary.set("w", fp.extent("w1").unwrap());
        }
    }
    up_boundary.validate(&up_nest)?;

    let mut tiles = BTreeMap::new();
    tiles.insert(
        upstream.id.clone(),
        TwoLevelTile {
            boundary: up_boundary,
            inner: TileSpec::new(),
        },
    );
    tiles.insert(
        downstream.id.clone(),
        TwoLevelTile {
            boundary: down_boundary,
            inner: TileSpec::new(),
        },
    );
    Ok(Schedule {
        tiles,
        fusions: vec![FusionDecision {
            producer: upstream.id.clone(),
            consumer: downstream.id.clone(),
            mode: FusionMode::Intensive,
        }],
    })
}
