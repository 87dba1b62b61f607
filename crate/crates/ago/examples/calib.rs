// Scratch harness: how often does tuning a conv3x3 -> pointwise pair end
// with an intensive-fused best schedule, across shapes and cost settings?

use std::collections::BTreeSet;

use ago::graph::Graph;
use ago::tuner::{tune, CostConfig, FusionMode, SearchSpace};

fn pair(hw: u64, o2: u64) -> Graph {
    let doc = format!(
        r#"{{
      "nodes": [
        {{ "id": "conv", "op": "conv2d", "attrs": {{ "N": 1, "I": 4, "O": 8, "H": {hw}, "W": {hw}, "R": 3, "C": 3, "pad": 1, "stride": 1 }} }},
        {{ "id": "pw", "op": "pointwise_conv2d", "attrs": {{ "N": 1, "I": 8, "O": {o2}, "H": {hw}, "W": {hw} }} }}
      ],
      "edges": [ {{ "src": "conv", "dst": "pw" }} ]
    }}"#
    );
    Graph::from_json(&doc).unwrap()
}

fn main() {
    for (hw, o2) in [(8u64, 16u64), (8, 32), (16, 16), (16, 32)] {
        let graph = pair(hw, o2);
        let nodes: BTreeSet<String> = graph.nodes().iter().map(|n| n.id.clone()).collect();
        for cache_lines in [8usize, 16, 32] {
            for beta in [16.0f64, 64.0] {
                let cfg = CostConfig {
                    cache_lines,
                    beta,
                    ..CostConfig::default()
                };
                let mut intensive = 0;
                for seed in 0..20u64 {
                    let (best, _) = tune(
                        &graph,
                        &nodes,
                        200,
                        seed,
                        None,
                        &cfg,
                        &SearchSpace::default(),
                    )
                    .unwrap();
                    if best.fusions.iter().any(|d| d.mode == FusionMode::Intensive) {
                        intensive += 1;
                    }
                }
                println!(
                    "hw={hw} o2={o2} cache={cache_lines} beta={beta}: intensive {intensive}/20"
                );
            }
        }
    }
}
