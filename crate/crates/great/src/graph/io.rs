//! Plain-text graph serialization.
//!
//! The format is line-oriented and versioned:
//!
//! ```text
//! great-graph v1
//! tau <float>
//! k <int>
//! mutual <0|1>
//! nodes <count> dim <d>
//! edges <count>
//! node <id> <sample_index> <clean|adv> <label|-> <d floats>
//! ...
//! edge <src> <dst> <weight> <cc|ca|ac|aa>
//! ...
//! ```
//!
//! Floats are written with 17 significant digits, so load(save(g)) == g bit
//! for bit. Loading rejects unknown versions, truncated files, trailing
//! content, and edges inconsistent with their endpoints.

use std::fmt::Write as _;
use std::path::Path;

use super::{EdgeKind, GraphConfig, GraphEdge, GraphNode, SimilarityGraph};
use crate::error::{Error, Result};
use crate::fsutil;

const HEADER: &str = "great-graph v1";

/// Serializes a graph to `path` atomically.
pub fn save_graph(path: &Path, graph: &SimilarityGraph) -> Result<()> {
    let mut out = String::new();
    let dim = graph.embedding_dim();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "tau {:.17e}", graph.config.tau).unwrap();
    writeln!(out, "k {}", graph.config.k).unwrap();
    writeln!(out, "mutual {}", graph.config.mutual as u8).unwrap();
    writeln!(out, "nodes {} dim {dim}", graph.nodes().len()).unwrap();
    writeln!(out, "edges {}", graph.edges().len()).unwrap();
    for n in graph.nodes() {
        let label = n.label.map_or("-".to_string(), |l| l.to_string());
        write!(
            out,
            "node {} {} {} {label}",
            n.id,
            n.sample_index,
            if n.adversarial { "adv" } else { "clean" }
        )
        .unwrap();
        for v in &n.embedding {
            write!(out, " {v:.17e}").unwrap();
        }
        out.push('\n');
    }
    for e in graph.edges() {
        writeln!(out, "edge {} {} {:.17e} {}", e.src, e.dst, e.weight, e.kind.tag()).unwrap();
    }
    fsutil::write_atomic(path, out.as_bytes())
}

struct Parser<'a> {
    path: String,
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        loop {
            self.line_no += 1;
            match self.lines.next() {
                Some(l) if l.trim().is_empty() => continue,
                Some(l) => return Ok(l.trim()),
                None => {
                    return Err(Error::Parse {
                        path: self.path.clone(),
                        line: self.line_no,
                        msg: format!("file ends early, expected {what}"),
                    })
                }
            }
        }
    }

    fn parse<T: std::str::FromStr>(&self, token: &str, what: &str) -> Result<T> {
        token
            .parse()
            .map_err(|_| self.err(format!("cannot parse {what} from {token:?}")))
    }
}

/// Loads a graph written by [`save_graph`].
pub fn load_graph(path: &Path) -> Result<SimilarityGraph> {
    let text = fsutil::read_to_string(path)?;
    let mut p = Parser {
        path: path.display().to_string(),
        lines: text.lines(),
        line_no: 0,
    };

    let header = p.next_line("header")?;
    if header != HEADER {
        return Err(p.err(format!("unknown header {header:?}, expected {HEADER:?}")));
    }
    let tau_line = p.next_line("tau")?;
    let tau: f64 = match tau_line.strip_prefix("tau ") {
        Some(rest) => p.parse(rest, "tau")?,
        None => return Err(p.err("expected a tau line")),
    };
    let k_line = p.next_line("k")?;
    let k: usize = match k_line.strip_prefix("k ") {
        Some(rest) => p.parse(rest, "k")?,
        None => return Err(p.err("expected a k line")),
    };
    let mutual_line = p.next_line("mutual")?;
    let mutual = match mutual_line.strip_prefix("mutual ") {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(p.err("expected 'mutual 0' or 'mutual 1'")),
    };
    let nodes_line = p.next_line("node count")?;
    let (node_count, dim) = {
        let toks: Vec<&str> = nodes_line.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "nodes" || toks[2] != "dim" {
            return Err(p.err("expected 'nodes <count> dim <d>'"));
        }
        (
            p.parse::<usize>(toks[1], "node count")?,
            p.parse::<usize>(toks[3], "embedding dim")?,
        )
    };
    let edges_line = p.next_line("edge count")?;
    let edge_count: usize = match edges_line.strip_prefix("edges ") {
        Some(rest) => p.parse(rest, "edge count")?,
        None => return Err(p.err("expected an edges line")),
    };

    let mut nodes = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let line = p.next_line("a node line")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 + dim || toks[0] != "node" {
            return Err(p.err(format!(
                "expected 'node <id> <sample> <clean|adv> <label> <{dim} floats>'"
            )));
        }
        let id: usize = p.parse(toks[1], "node id")?;
        let sample_index: usize = p.parse(toks[2], "sample index")?;
        let adversarial = match toks[3] {
            "clean" => false,
            "adv" => true,
            other => return Err(p.err(format!("expected clean or adv, got {other:?}"))),
        };
        let label = match toks[4] {
            "-" => None,
            other => Some(p.parse::<usize>(other, "label")?),
        };
        let embedding: Vec<f64> = toks[5..]
            .iter()
            .map(|t| p.parse::<f64>(t, "embedding value"))
            .collect::<Result<_>>()?;
        nodes.push(GraphNode {
            id,
            sample_index,
            adversarial,
            label,
            embedding,
        });
    }

    let mut edges = Vec::with_capacity(edge_count);
    for _ in 0..edge_count {
        let line = p.next_line("an edge line")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 || toks[0] != "edge" {
            return Err(p.err("expected 'edge <src> <dst> <weight> <kind>'"));
        }
        let src: usize = p.parse(toks[1], "edge source")?;
        let dst: usize = p.parse(toks[2], "edge destination")?;
        let weight: f64 = p.parse(toks[3], "edge weight")?;
        let kind = EdgeKind::from_tag(toks[4])
            .ok_or_else(|| p.err(format!("unknown edge kind {:?}", toks[4])))?;
        if src >= nodes.len() || dst >= nodes.len() {
            return Err(p.err(format!("edge {src} -> {dst} references a missing node")));
        }
        if kind != EdgeKind::of(nodes[src].adversarial, nodes[dst].adversarial) {
            return Err(p.err(format!(
                "edge {src} -> {dst} is tagged {} but endpoints say {}",
                kind.tag(),
                EdgeKind::of(nodes[src].adversarial, nodes[dst].adversarial).tag()
            )));
        }
        edges.push(GraphEdge {
            src,
            dst,
            weight,
            kind,
        });
    }

    loop {
        p.line_no += 1;
        match p.lines.next() {
            Some(l) if l.trim().is_empty() => continue,
            Some(l) => return Err(p.err(format!("unexpected trailing content: {l:?}"))),
            None => break,
        }
    }

    let config = GraphConfig { k, tau, mutual };
    SimilarityGraph::from_parts(config, nodes, edges)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
}
