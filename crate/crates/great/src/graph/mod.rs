//! Similarity graph over sample embeddings.
//!
//! Nodes carry a fixed embedding vector plus metadata (source sample, label,
//! whether the sample is adversarial). Each node links to its top-k most
//! cosine-similar other nodes, keeping only similarities at or above a
//! threshold tau. Edges are directed; an optional mutual filter keeps only
//! reciprocated pairs. The structure is static once built: training reads
//! neighbor lists, it never rewires them.

mod io;

pub use io::{load_graph, save_graph};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine similarity of two equal-length vectors.
///
/// Returns 0 when either vector's norm is below 1e-12, so zero embeddings
/// are simply dissimilar to everything rather than poisoning the graph.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Which side of an edge is adversarial, ordered (source, destination).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    CleanClean,
    CleanAdv,
    AdvClean,
    AdvAdv,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [
        EdgeKind::CleanClean,
        EdgeKind::CleanAdv,
        EdgeKind::AdvClean,
        EdgeKind::AdvAdv,
    ];

    pub fn of(src_adversarial: bool, dst_adversarial: bool) -> EdgeKind {
        match (src_adversarial, dst_adversarial) {
            (false, false) => EdgeKind::CleanClean,
            (false, true) => EdgeKind::CleanAdv,
            (true, false) => EdgeKind::AdvClean,
            (true, true) => EdgeKind::AdvAdv,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            EdgeKind::CleanClean => "cc",
            EdgeKind::CleanAdv => "ca",
            EdgeKind::AdvClean => "ac",
            EdgeKind::AdvAdv => "aa",
        }
    }

    pub fn from_tag(tag: &str) -> Option<EdgeKind> {
        EdgeKind::ALL.iter().copied().find(|k| k.tag() == tag)
    }

    /// Position in [`EdgeKind::ALL`], used to index per-kind accumulators.
    pub fn index(&self) -> usize {
        EdgeKind::ALL.iter().position(|k| k == self).expect("listed")
    }
}

/// One sample in the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    /// Position in the graph; must equal the node's index.
    pub id: usize,
    /// Row in the originating dataset split (twins share their source's row).
    pub sample_index: usize,
    pub adversarial: bool,
    /// None for unlabeled samples.
    pub label: Option<usize>,
    pub embedding: Vec<f64>,
}

/// Directed weighted edge; the weight is the cosine similarity clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub kind: EdgeKind,
}

/// Graph construction knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Neighbors kept per node.
    pub k: usize,
    /// Minimum cosine similarity for an edge.
    pub tau: f64,
    /// Keep an edge only if both endpoints select each other.
    pub mutual: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 2,
            tau: 0.8,
            mutual: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("graph needs k >= 1 neighbors".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must be in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Static neighbor structure; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub config: GraphConfig,
    nodes: Vec<GraphNode>,
    /// Grouped by source id ascending; within a source, by descending
    /// weight with ties to the lower destination id.
    edges: Vec<GraphEdge>,
    /// CSR-style offsets: edges of node i live in edges[offsets[i]..offsets[i+1]].
    offsets: Vec<usize>,
}

impl SimilarityGraph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> Result<&GraphNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no node {id} in a {}-node graph", self.nodes.len())))
    }

    /// Outgoing edges of a node, strongest first.
    pub fn neighbors(&self, id: usize) -> Result<&[GraphEdge]> {
        self.node(id)?;
        Ok(&self.edges[self.offsets[id]..self.offsets[id + 1]])
    }

    /// Edge counts in [`EdgeKind::ALL`] order (cc, ca, ac, aa).
    pub fn kind_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for e in &self.edges {
            counts[e.kind.index()] += 1;
        }
        counts
    }

    pub fn embedding_dim(&self) -> usize {
        self.nodes.first().map(|n| n.embedding.len()).unwrap_or(0)
    }

    pub(crate) fn from_parts(
        config: GraphConfig,
        nodes: Vec<GraphNode>,
        mut edges: Vec<GraphEdge>,
    ) -> Result<SimilarityGraph> {
        config.validate()?;
        validate_nodes(&nodes)?;
        for e in &edges {
            if e.src >= nodes.len() || e.dst >= nodes.len() {
                return Err(Error::Index(format!(
                    "edge {} -> {} references a missing node (graph has {})",
                    e.src,
                    e.dst,
                    nodes.len()
                )));
            }
            if e.src == e.dst {
                return Err(Error::Contract(format!("self-edge on node {}", e.src)));
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::Contract(format!(
                    "edge {} -> {} has weight {} outside [0, 1]",
                    e.src, e.dst, e.weight
                )));
            }
        }
        edges.sort_by(|a, b| {
            a.src
                .cmp(&b.src)
                .then(b.weight.partial_cmp(&a.weight).expect("weights are finite"))
                .then(a.dst.cmp(&b.dst))
        });
        let mut offsets = vec![0usize; nodes.len() + 1];
        for e in &edges {
            offsets[e.src + 1] += 1;
        }
        for i in 0..nodes.len() {
            offsets[i + 1] += offsets[i];
        }
        Ok(SimilarityGraph {
            config,
            nodes,
            edges,
            offsets,
        })
    }
}

fn validate_nodes(nodes: &[GraphNode]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Contract("graph needs at least one node".into()));
    }
    let dim = nodes[0].embedding.len();
    if dim == 0 {
        return Err(Error::Contract("node embeddings must be non-empty".into()));
    }
    for (i, n) in nodes.iter().enumerate() {
        if n.id != i {
            return Err(Error::Contract(format!(
                "node at position {i} has id {}; ids must be 0..n in order",
                n.id
            )));
        }
        if n.embedding.len() != dim {
            return Err(Error::Contract(format!(
                "node {i} has embedding dim {}, expected {dim}",
                n.embedding.len()
            )));
        }
        if n.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("node {i} has a non-finite embedding")));
        }
    }
    Ok(())
}

/// Builds the top-k similarity graph over the given nodes.
///
/// For each node, every other node with cosine similarity >= tau is a
/// candidate; the k most similar become neighbors, breaking exact ties
/// toward the lower node id. Stored weights are clamped into [0, 1]. With
/// `config.mutual`, an edge survives only if its reverse was also selected.
pub fn build_graph(nodes: Vec<GraphNode>, config: GraphConfig) -> Result<SimilarityGraph> {
    config.validate()?;
    validate_nodes(&nodes)?;
    let n = nodes.len();
    let per_node: Vec<Vec<GraphEdge>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut candidates: Vec<(f64, usize)> = Vec::new();
            for j in 0..n {
                if i == j {
                    continue;
                }
                let c = cosine(&nodes[i].embedding, &nodes[j].embedding)
                    .expect("validated dims");
                if c >= config.tau {
                    candidates.push((c, j));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("cosines are finite")
                    .then(a.1.cmp(&b.1))
            });
            candidates.truncate(config.k);
            candidates
                .into_iter()
                .map(|(c, j)| GraphEdge {
                    src: i,
                    dst: j,
                    weight: c.clamp(0.0, 1.0),
                    kind: EdgeKind::of(nodes[i].adversarial, nodes[j].adversarial),
                })
                .collect()
        })
        .collect();

    let edges: Vec<GraphEdge> = if config.mutual {
        let selected: std::collections::HashSet<(usize, usize)> = per_node
            .iter()
            .flatten()
            .map(|e| (e.src, e.dst))
            .collect();
        per_node
            .into_iter()
            .flatten()
            .filter(|e| selected.contains(&(e.dst, e.src)))
            .collect()
    } else {
        per_node.into_iter().flatten().collect()
    };

    SimilarityGraph::from_parts(config, nodes, edges)
}
