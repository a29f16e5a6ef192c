//! Layered heterogeneous memory graphs and the question samples built on them.

mod json;
mod synth;

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use json::{load_dataset, parse_sample, serialize_sample, write_dataset, Dataset, DatasetMeta};
pub use synth::{generate_synthetic, GeneratedDataset, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Visual,
    Semantic,
    Fact,
}

impl LayerTag {
    pub const ALL: [LayerTag; 3] = [LayerTag::Visual, LayerTag::Semantic, LayerTag::Fact];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Visual => "visual",
            LayerTag::Semantic => "semantic",
            LayerTag::Fact => "fact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "visual" => Some(LayerTag::Visual),
            "semantic" => Some(LayerTag::Semantic),
            "fact" => Some(LayerTag::Fact),
            _ => None,
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: i64,
    pub layer: LayerTag,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GraphEdge {
    pub src: i64,
    pub dst: i64,
    pub relation_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryGraph {
    pub d_node: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub graph: MemoryGraph,
    pub question: Vec<usize>,
    /// One label per fact node, in ascending node-id order.
    pub labels: Vec<u8>,
}

/// One broken invariant. `subject` names the offending node, edge, or field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub rule: String,
}

impl Violation {
    fn new(subject: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.rule)
    }
}

impl MemoryGraph {
    /// Sorts nodes by id and edges by (src, dst, relation).
    pub fn canonicalize(&mut self) {
        self.nodes.sort_by_key(|n| n.id);
        self.edges.sort();
    }

    pub fn is_canonical(&self) -> bool {
        self.nodes.windows(2).all(|w| w[0].id < w[1].id) && self.edges.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn node(&self, id: i64) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index_map(&self) -> HashMap<i64, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    /// Row positions of the nodes in `layer`, in storage order.
    pub fn layer_indices(&self, layer: LayerTag) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.layer == layer)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fact_ids(&self) -> Vec<i64> {
        self.nodes
            .iter()
            .filter(|n| n.layer == LayerTag::Fact)
            .map(|n| n.id)
            .collect()
    }

    /// Node features stacked as a `nodes x d_node` matrix.
    pub fn feature_matrix(&self) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.nodes.len() * self.d_node);
        for n in &self.nodes {
            if n.features.len() != self.d_node {
                return Err(Error::Shape {
                    op: "feature_matrix",
                    lhs: (1, self.d_node),
                    rhs: (1, n.features.len()),
                });
            }
            data.extend_from_slice(&n.features);
        }
        Matrix::new(self.nodes.len(), self.d_node, data)
    }

    /// Replaces every node's features from the rows of `m`.
    pub fn set_features(&mut self, m: &Matrix) -> Result<()> {
        if m.rows() != self.nodes.len() || m.cols() != self.d_node {
            return Err(Error::Shape {
                op: "set_features",
                lhs: (self.nodes.len(), self.d_node),
                rhs: m.shape(),
            });
        }
        for (i, n) in self.nodes.iter_mut().enumerate() {
            n.features.copy_from_slice(m.row(i));
        }
        Ok(())
    }

    /// Incoming 1-hop neighbours of `id` as `(src, relation_id)`, ascending.
    pub fn neighbors_in(&self, id: i64) -> Result<Vec<(i64, usize)>> {
        if self.node(id).is_none() {
            return Err(Error::UnknownNode(id));
        }
        let mut out: Vec<(i64, usize)> = self
            .edges
            .iter()
            .filter(|e| e.dst == id)
            .map(|e| (e.src, e.relation_id))
            .collect();
        out.sort_unstable();
        Ok(out)
    }
}

/// Row positions and edge lists of a canonical graph, precomputed once per
/// forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphIndex {
    pub n_nodes: usize,
    pub d_node: usize,
    pub ids: Vec<i64>,
    pub layer_rows: [Vec<usize>; 3],
    pub fact_ids: Vec<i64>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_rel: Vec<usize>,
}

impl GraphIndex {
    pub fn new(g: &MemoryGraph) -> Result<Self> {
        let map = g.index_map();
        let row = |id: i64| map.get(&id).copied().ok_or(Error::UnknownNode(id));
        let mut edge_src = Vec::with_capacity(g.edges.len());
        let mut edge_dst = Vec::with_capacity(g.edges.len());
        let mut edge_rel = Vec::with_capacity(g.edges.len());
        for e in &g.edges {
            edge_src.push(row(e.src)?);
            edge_dst.push(row(e.dst)?);
            edge_rel.push(e.relation_id);
        }
        let layer_rows = LayerTag::ALL.map(|l| g.layer_indices(l));
        let fact_ids = layer_rows[2].iter().map(|&r| g.nodes[r].id).collect();
        Ok(Self {
            n_nodes: g.nodes.len(),
            d_node: g.d_node,
            ids: g.nodes.iter().map(|n| n.id).collect(),
            layer_rows,
            fact_ids,
            edge_src,
            edge_dst,
            edge_rel,
        })
    }

    pub fn rows(&self, layer: LayerTag) -> &[usize] {
        &self.layer_rows[layer as usize]
    }

    pub fn fact_rows(&self) -> &[usize] {
        self.rows(LayerTag::Fact)
    }

    pub fn row_of(&self, id: i64) -> Result<usize> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .ok_or(Error::UnknownNode(id))
    }
}

impl TaskSample {
    pub fn canonicalize(&mut self) {
        self.graph.canonicalize();
    }

    /// Borrowed when already canonical, otherwise a sorted copy. Labels stay
    /// aligned because they follow fact-node id order either way.
    pub fn canonical(&self) -> Cow<'_, TaskSample> {
        if self.graph.is_canonical() {
            Cow::Borrowed(self)
        } else {
            let mut s = self.clone();
            s.canonicalize();
            Cow::Owned(s)
        }
    }

    /// Id of the (first) fact node labelled 1.
    pub fn answer_id(&self) -> Option<i64> {
        let mut facts = self.graph.fact_ids();
        facts.sort_unstable();
        facts
            .into_iter()
            .zip(&self.labels)
            .find(|(_, &l)| l == 1)
            .map(|(id, _)| id)
    }
}

/// Structural invariants of a sample. Empty iff valid.
pub fn validate(s: &TaskSample) -> Vec<Violation> {
    validate_with_meta(s, None)
}

/// As [`validate`], additionally checking token and relation ids against the
/// dataset vocabulary when `meta` is given.
pub fn validate_with_meta(s: &TaskSample, meta: Option<&DatasetMeta>) -> Vec<Violation> {
    let g = &s.graph;
    let mut out = Vec::new();

    if g.d_node == 0 {
        out.push(Violation::new("d_node", "must be at least 1"));
    }
    let mut seen = BTreeSet::new();
    let mut dup_reported = BTreeSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id) && dup_reported.insert(n.id) {
            out.push(Violation::new(format!("node {}", n.id), "duplicate id"));
        }
        if n.features.len() != g.d_node {
            out.push(Violation::new(
                format!("node {}", n.id),
                format!("has {} features, expected d_node = {}", n.features.len(), g.d_node),
            ));
        }
        if n.features.iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(format!("node {}", n.id), "non-finite feature"));
        }
    }
    for e in &g.edges {
        let subject = format!("edge {}->{}", e.src, e.dst);
        if !seen.contains(&e.src) {
            out.push(Violation::new(&subject, format!("dangling source {}", e.src)));
        }
        if !seen.contains(&e.dst) {
            out.push(Violation::new(&subject, format!("dangling destination {}", e.dst)));
        }
        if e.src == e.dst {
            out.push(Violation::new(&subject, "self-loop"));
        }
        if let Some(m) = meta {
            if e.relation_id >= m.n_relations {
                out.push(Violation::new(
                    &subject,
                    format!("relation_id {} >= n_relations {}", e.relation_id, m.n_relations),
                ));
            }
        }
    }
    let n_fact = g.nodes.iter().filter(|n| n.layer == LayerTag::Fact).count();
    if n_fact == 0 {
        out.push(Violation::new("graph", "no fact nodes"));
    }
    if s.labels.len() != n_fact {
        out.push(Violation::new(
            "labels",
            format!("length {} != fact node count {n_fact}", s.labels.len()),
        ));
    }
    if let Some(pos) = s.labels.iter().position(|&l| l > 1) {
        out.push(Violation::new(format!("labels[{pos}]"), "not binary"));
    }
    if s.question.is_empty() {
        out.push(Violation::new("question", "empty token sequence"));
    }
    if let Some(m) = meta {
        if let Some(pos) = s.question.iter().position(|&t| t >= m.vocab_size) {
            out.push(Violation::new(
                format!("question[{pos}]"),
                format!("token {} >= vocab_size {}", s.question[pos], m.vocab_size),
            ));
        }
        if let Some(d) = m.d_node {
            if d != g.d_node {
                out.push(Violation::new("d_node", format!("{} != dataset d_node {d}", g.d_node)));
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_sample() -> TaskSample {
        TaskSample {
            graph: MemoryGraph {
                d_node: 2,
                nodes: vec![
                    GraphNode { id: 0, layer: LayerTag::Visual, features: vec![1.0, 0.0] },
                    GraphNode { id: 1, layer: LayerTag::Semantic, features: vec![0.0, 1.0] },
                    GraphNode { id: 2, layer: LayerTag::Fact, features: vec![0.5, 0.5] },
                ],
                edges: vec![GraphEdge { src: 0, dst: 2, relation_id: 0 }],
            },
            question: vec![0],
            labels: vec![1],
        }
    }

    #[test]
    fn well_formed_has_no_violations() {
        assert!(validate(&tiny_sample()).is_empty());
    }

    #[test]
    fn duplicate_id_reported_once() {
        let mut s = tiny_sample();
        s.graph.nodes[1].id = 0;
        let v = validate(&s);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].subject, "node 0");
    }

    #[test]
    fn zero_fact_nodes() {
        let mut s = tiny_sample();
        s.graph.nodes[2].layer = LayerTag::Visual;
        s.labels.clear();
        let v = validate(&s);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].rule.contains("no fact nodes"));
    }

    #[test]
    fn dangling_and_self_loop() {
        let mut s = tiny_sample();
        s.graph.edges.push(GraphEdge { src: 99, dst: 2, relation_id: 0 });
        s.graph.edges.push(GraphEdge { src: 1, dst: 1, relation_id: 0 });
        let v = validate(&s);
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn meta_checks_vocab_and_relations() {
        let s = tiny_sample();
        let meta = DatasetMeta { vocab_size: 0, n_relations: 0, d_node: Some(2) };
        let v = validate_with_meta(&s, Some(&meta));
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn neighbors_in_examples() {
        let s = tiny_sample();
        assert_eq!(s.graph.neighbors_in(1).unwrap(), vec![]);
        assert_eq!(s.graph.neighbors_in(2).unwrap(), vec![(0, 0)]);
        assert!(matches!(s.graph.neighbors_in(7), Err(Error::UnknownNode(7))));
    }

    #[test]
    fn single_edge_neighbor() {
        let g = MemoryGraph {
            d_node: 1,
            nodes: (0..6)
                .map(|id| GraphNode { id, layer: LayerTag::Fact, features: vec![0.0] })
                .collect(),
            edges: vec![GraphEdge { src: 2, dst: 5, relation_id: 3 }],
        };
        assert_eq!(g.neighbors_in(5).unwrap(), vec![(2, 3)]);
    }

    #[test]
    fn answer_id_follows_fact_order() {
        let mut s = tiny_sample();
        s.graph.nodes.push(GraphNode { id: 9, layer: LayerTag::Fact, features: vec![0.0, 0.0] });
        s.labels = vec![0, 1];
        assert_eq!(s.answer_id(), Some(9));
    }
}
