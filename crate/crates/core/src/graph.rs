//! Graph representations and the transformations between them.
//!
//! A labeled input graph ([`MultiRelGraph`]) is unfolded into a bipartite
//! [`LeviGraph`] (one relation node per triple), expanded to one node per
//! label token ([`TokenGraph`]), and at decode time extended with a single
//! context node wired to every token ([`JointGraph`]).

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::vocab::Vocab;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    NoNodes,
    #[error("triple {triple} references node {index} but graph has {len} nodes")]
    IndexOutOfRange { triple: usize, index: usize, len: usize },
    #[error("node {node} has an empty label")]
    EmptyNodeLabel { node: usize },
}

/// Edge type shared by the Levi, token and joint graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeRel {
    Default,
    Reverse,
    SelfLoop,
}

impl EdgeRel {
    pub const COUNT: usize = 3;
    pub const ALL: [EdgeRel; 3] = [EdgeRel::Default, EdgeRel::Reverse, EdgeRel::SelfLoop];

    pub fn index(self) -> usize {
        match self {
            EdgeRel::Default => 0,
            EdgeRel::Reverse => 1,
            EdgeRel::SelfLoop => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeRel::Default => "default",
            EdgeRel::Reverse => "reverse",
            EdgeRel::SelfLoop => "self",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: EdgeRel,
}

impl Edge {
    pub fn new(src: usize, dst: usize, rel: EdgeRel) -> Self {
        Self { src, dst, rel }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

/// Labeled, directed, multi-relational input graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiRelGraph {
    nodes: Vec<String>,
    triples: Vec<Triple>,
}

impl MultiRelGraph {
    pub fn new(nodes: Vec<String>, triples: Vec<Triple>) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::NoNodes);
        }
        for (i, t) in triples.iter().enumerate() {
            for index in [t.head, t.tail] {
                if index >= nodes.len() {
                    return Err(GraphError::IndexOutOfRange { triple: i, index, len: nodes.len() });
                }
            }
        }
        Ok(Self { nodes, triples })
    }

    /// Convenience constructor from `(head, relation, tail)` tuples.
    pub fn from_parts<S: Into<String>, R: Into<String>>(
        nodes: impl IntoIterator<Item = S>,
        triples: impl IntoIterator<Item = (usize, R, usize)>,
    ) -> Result<Self, GraphError> {
        let nodes = nodes.into_iter().map(Into::into).collect();
        let triples = triples
            .into_iter()
            .map(|(head, relation, tail)| Triple { head, relation: relation.into(), tail })
            .collect();
        Self::new(nodes, triples)
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn relation_labels(&self) -> BTreeSet<&str> {
        self.triples.iter().map(|t| t.relation.as_str()).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Entity,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeviNode {
    pub label: String,
    pub kind: NodeKind,
}

/// Bipartite unfolding of a [`MultiRelGraph`]. Entity nodes keep their
/// original indices; relation node `k` sits at `num_entities + k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeviGraph {
    pub nodes: Vec<LeviNode>,
    pub edges: Vec<Edge>,
}

/// Unfold every labeled triple `(h, r, t)` into a fresh relation node `r_k`
/// with default edges `h -> r_k -> t` and their reverses.
pub fn levi_transform(g: &MultiRelGraph) -> LeviGraph {
    let mut nodes: Vec<LeviNode> = g
        .nodes
        .iter()
        .map(|label| LeviNode { label: label.clone(), kind: NodeKind::Entity })
        .collect();
    let mut edges = Vec::with_capacity(4 * g.triples.len());
    for t in &g.triples {
        let r = nodes.len();
        nodes.push(LeviNode { label: t.relation.clone(), kind: NodeKind::Relation });
        edges.push(Edge::new(t.head, r, EdgeRel::Default));
        edges.push(Edge::new(r, t.tail, EdgeRel::Default));
        edges.push(Edge::new(r, t.head, EdgeRel::Reverse));
        edges.push(Edge::new(t.tail, r, EdgeRel::Reverse));
    }
    LeviGraph { nodes, edges }
}

impl LeviGraph {
    pub fn is_bipartite(&self) -> bool {
        self.edges
            .iter()
            .all(|e| self.nodes[e.src].kind != self.nodes[e.dst].kind)
    }

    pub fn dump(&self) -> String {
        let mut out = format!("levi nodes={} edges={}\n", self.nodes.len(), self.edges.len());
        let adj = sorted_adjacency(self.nodes.len(), &self.edges);
        for (i, node) in self.nodes.iter().enumerate() {
            let kind = match node.kind {
                NodeKind::Entity => "entity",
                NodeKind::Relation => "relation",
            };
            let _ = write!(out, "{i} {kind} {:?} ->", node.label);
            write_adjacency(&mut out, &adj[i]);
        }
        out
    }
}

/// Token-level graph: every token of every Levi node label is its own node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGraph {
    pub tokens: Vec<u32>,
    /// Originating Levi node of each token.
    pub token_owner: Vec<usize>,
    /// Position of each token inside its owner's span.
    pub span_pos: Vec<usize>,
    pub edges: Vec<Edge>,
}

/// Expand a Levi graph to token level.
///
/// Tokens of one label are chained with default/reverse pairs, each Levi edge
/// `(a, b)` connects every token of `a` to every token of `b` with the same
/// type, and every token gets one self edge.
pub fn tokenize_graph(g: &LeviGraph, vocab: &Vocab) -> Result<TokenGraph, GraphError> {
    let mut tokens = Vec::new();
    let mut token_owner = Vec::new();
    let mut span_pos = Vec::new();
    let mut spans = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let ids = vocab.encode_words(&node.label);
        if ids.is_empty() {
            return Err(GraphError::EmptyNodeLabel { node: i });
        }
        let start = tokens.len();
        for (p, id) in ids.into_iter().enumerate() {
            tokens.push(id);
            token_owner.push(i);
            span_pos.push(p);
        }
        spans.push(start..tokens.len());
    }

    let mut edges = Vec::new();
    for span in &spans {
        for a in span.start..span.end.saturating_sub(1) {
            edges.push(Edge::new(a, a + 1, EdgeRel::Default));
            edges.push(Edge::new(a + 1, a, EdgeRel::Reverse));
        }
    }
    for e in &g.edges {
        for a in spans[e.src].clone() {
            for b in spans[e.dst].clone() {
                edges.push(Edge::new(a, b, e.rel));
            }
        }
    }
    for t in 0..tokens.len() {
        edges.push(Edge::new(t, t, EdgeRel::SelfLoop));
    }
    Ok(TokenGraph { tokens, token_owner, span_pos, edges })
}

impl TokenGraph {
    pub fn num_nodes(&self) -> usize {
        self.tokens.len()
    }

    pub fn dump(&self) -> String {
        let mut out = format!("tokens nodes={} edges={}\n", self.tokens.len(), self.edges.len());
        let adj = sorted_adjacency(self.tokens.len(), &self.edges);
        for i in 0..self.tokens.len() {
            let _ = write!(
                out,
                "{i} tok={} owner={} pos={} ->",
                self.tokens[i], self.token_owner[i], self.span_pos[i]
            );
            write_adjacency(&mut out, &adj[i]);
        }
        out
    }
}

/// Token graph plus the generated-text context node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointGraph {
    pub base: TokenGraph,
    /// Index of the context node; always `base.num_nodes()`.
    pub context_index: usize,
    pub extra_edges: Vec<Edge>,
}

pub fn build_joint_graph(g: &TokenGraph) -> JointGraph {
    let ctx = g.num_nodes();
    let mut extra_edges = Vec::with_capacity(2 * ctx + 1);
    for i in 0..ctx {
        extra_edges.push(Edge::new(i, ctx, EdgeRel::Default));
        extra_edges.push(Edge::new(ctx, i, EdgeRel::Reverse));
    }
    extra_edges.push(Edge::new(ctx, ctx, EdgeRel::SelfLoop));
    JointGraph { base: g.clone(), context_index: ctx, extra_edges }
}

impl JointGraph {
    pub fn num_nodes(&self) -> usize {
        self.context_index + 1
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.base.edges.iter().chain(self.extra_edges.iter())
    }

    /// Drop the context node and every edge touching it.
    pub fn remove_context(&self) -> TokenGraph {
        let ctx = self.context_index;
        let mut base = self.base.clone();
        base.edges = self
            .edges()
            .filter(|e| e.src != ctx && e.dst != ctx)
            .copied()
            .collect();
        base
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges().filter(|e| e.dst == node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges().filter(|e| e.src == node).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub size: usize,
    pub diameter: usize,
    pub reentrancies: usize,
}

/// Size, diameter of the undirected entity graph (max over components) and
/// the number of nodes with at least two distinct parents.
pub fn graph_stats(g: &MultiRelGraph) -> GraphStats {
    let n = g.num_nodes();
    let adj = undirected_adjacency(g);
    let mut diameter = 0;
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            diameter = diameter.max(dist[v]);
            for &u in &adj[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
    }

    let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for t in &g.triples {
        parents[t.tail].insert(t.head);
    }
    let reentrancies = parents.iter().filter(|p| p.len() >= 2).count();
    GraphStats { size: n, diameter, reentrancies }
}

fn undirected_adjacency(g: &MultiRelGraph) -> Vec<Vec<usize>> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); g.num_nodes()];
    for t in &g.triples {
        if t.head != t.tail {
            adj[t.head].insert(t.tail);
            adj[t.tail].insert(t.head);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn sorted_adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<(usize, EdgeRel)>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.src].push((e.dst, e.rel));
    }
    for list in &mut adj {
        list.sort();
    }
    adj
}

fn write_adjacency(out: &mut String, list: &[(usize, EdgeRel)]) {
    for (dst, rel) in list {
        let _ = write!(out, " {dst}:{}", rel.name());
    }
    out.push('\n');
}
