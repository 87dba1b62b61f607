//! Shared helpers for the integration suites.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ago::graph::{Graph, OpKind, OperatorNode};

pub fn corpus_path(name: &str) -> String {
    format!("{}/../../data/{}.json", env!("CARGO_MANIFEST_DIR"), name)
}

pub fn load_corpus(name: &str) -> Graph {
    let text = std::fs::read_to_string(corpus_path(name)).unwrap();
    Graph::from_json(&text).unwrap()
}

pub fn all_nodes(graph: &Graph) -> BTreeSet<String> {
    graph.nodes().iter().map(|n| n.id.clone()).collect()
}

/// Random operator DAG: nodes are mostly relu with a sprinkling of convs,
/// edges go from lower to higher index with the given density.
pub fn random_dag(rng: &mut ChaCha8Rng, max_nodes: usize, density: f64) -> Graph {
    let n = rng.gen_range(2..=max_nodes);
    let nodes: Vec<OperatorNode> = (0..n)
        .map(|i| {
            let id = format!("n{i:02}");
            if rng.gen_bool(0.25) {
                let ch = 1i64 << rng.gen_range(1..=3);
                let hw = 1i64 << rng.gen_range(2..=4);
                OperatorNode::new(
                    &id,
                    OpKind::Conv2d,
                    &[
                        ("N", 1),
                        ("I", ch),
                        ("O", ch),
                        ("H", hw),
                        ("W", hw),
                        ("R", 3),
                        ("C", 3),
                        ("pad", 1),
                        ("stride", 1),
                    ],
                )
            } else {
                let extent = 1i64 << rng.gen_range(1..=6);
                OperatorNode::new(&id, OpKind::Relu, &[("d0", extent)])
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(density) {
                edges.push((format!("n{i:02}"), format!("n{j:02}")));
            }
        }
    }
    Graph::new(nodes, edges).unwrap()
}
