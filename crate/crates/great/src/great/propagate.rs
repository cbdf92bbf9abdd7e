//! Label propagation over the similarity graph.
//!
//! Unlabeled nodes adopt the label of their strongest labeled out-neighbor,
//! one synchronous pass at a time: every node reads the labels from the
//! start of the pass, so the outcome does not depend on node order. Labeled
//! nodes never change. Nodes whose reachable neighborhood holds no label
//! stay unlabeled.

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// Runs `passes` synchronous rounds and returns one label slot per node.
///
/// The graph must hold at least one labeled node; propagation from nothing
/// would silently return the input and mask a configuration mistake.
pub fn propagate_labels(graph: &SimilarityGraph, passes: usize) -> Result<Vec<Option<usize>>> {
    let mut labels: Vec<Option<usize>> = graph.nodes().iter().map(|n| n.label).collect();
    if !labels.iter().any(Option::is_some) {
        return Err(Error::Contract(
            "label propagation needs at least one labeled node".into(),
        ));
    }
    for _ in 0..passes {
        let mut next = labels.clone();
        let mut changed = false;
        for (id, slot) in next.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            // Neighbors are stored strongest first with ties on the lower
            // node id, so the first labeled one wins deterministically.
            for edge in graph.neighbors(id)? {
                if let Some(label) = labels[edge.dst] {
                    *slot = Some(label);
                    changed = true;
                    break;
                }
            }
        }
        labels = next;
        if !changed {
            break;
        }
    }
    Ok(labels)
}
