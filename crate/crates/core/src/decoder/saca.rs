//! Relational graph attention over the joint graph of input tokens and the
//! generated-text context node.

use std::rc::Rc;

use rand::Rng;

use crate::graph::{EdgeRel, JointGraph};
use crate::model::layers::{Builder, Linear};
use crate::numerics::params::{ParamError, ParamGroup, ParamId};
use crate::numerics::tape::{EdgeIndex, Segments, Tape, Var};
use crate::numerics::tensor::{Tensor, TensorError};

/// Edge lists in the layout the attention kernel consumes. Edge `e` sends
/// from key/value row `src[e]`, is scored with query row `query[e]`, and is
/// normalized and accumulated into output row `seg.index[e]`.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub index: Rc<EdgeIndex>,
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub seg: Rc<Segments>,
}

impl EdgeSet {
    pub fn new(src: Vec<usize>, query: Vec<usize>, rel: Vec<usize>, seg: Segments) -> Self {
        Self {
            src: Rc::new(src.clone()),
            dst: Rc::new(seg.index.clone()),
            index: Rc::new(EdgeIndex { query, src, rel }),
            seg: Rc::new(seg),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn num_outputs(&self) -> usize {
        self.seg.members.len()
    }
}

/// A joint graph flattened into edge lists, replicable as a block-diagonal
/// graph with one copy per decoding step.
#[derive(Debug, Clone)]
pub struct JointLayout {
    /// Input token count; the context node is row `tokens`.
    pub tokens: usize,
    edges: Vec<(usize, usize, usize)>,
}

impl JointLayout {
    pub fn new(joint: &JointGraph) -> Self {
        let edges = joint.edges().map(|e| (e.src, e.dst, e.rel.index())).collect();
        Self { tokens: joint.context_index, edges }
    }

    pub fn nodes_per_copy(&self) -> usize {
        self.tokens + 1
    }

    /// All edges of `copies` disjoint copies, copy `c` occupying rows
    /// `c * (tokens + 1) ..`.
    pub fn replicated(&self, copies: usize) -> EdgeSet {
        let n1 = self.nodes_per_copy();
        let mut src = Vec::with_capacity(copies * self.edges.len());
        let mut dst = Vec::with_capacity(copies * self.edges.len());
        let mut rel = Vec::with_capacity(copies * self.edges.len());
        for c in 0..copies {
            for &(s, d, r) in &self.edges {
                src.push(c * n1 + s);
                dst.push(c * n1 + d);
                rel.push(r);
            }
        }
        let seg = Segments::new(dst.clone(), copies * n1);
        EdgeSet::new(src, dst, rel, seg)
    }

    /// In-edges of the context node of a single copy, scored against a
    /// one-row query matrix and collected into one output row.
    pub fn context_in_edges(&self) -> EdgeSet {
        let ctx = self.tokens;
        let (src, rel): (Vec<usize>, Vec<usize>) =
            self.edges.iter().filter(|e| e.1 == ctx).map(|&(s, _, r)| (s, r)).unzip();
        let zeros = vec![0; src.len()];
        let seg = Segments::new(zeros.clone(), 1);
        EdgeSet::new(src, zeros, rel, seg)
    }
}

/// One attention layer: `s = (W_q h_v) . (W_k h_u + E_rel) / sqrt(m)`,
/// weights by (optionally gated) softmax over in-neighbors,
/// `h'_v = relu(sum alpha W_v h_u)`.
#[derive(Debug, Clone)]
pub struct RgatLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `[relations, m]`
    pub relation: ParamId,
}

impl RgatLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Result<Self, ParamError> {
        let g = ParamGroup::Saca;
        Ok(Self {
            query: b.linear(&format!("{name}.q"), g, dim, dim)?,
            key: b.linear(&format!("{name}.k"), g, dim, dim)?,
            value: b.linear(&format!("{name}.v"), g, dim, dim)?,
            relation: b.normal(&format!("{name}.rel"), g, EdgeRel::COUNT, dim, 1.0 / (dim as f64).sqrt())?,
        })
    }

    /// Message passing given already projected queries, keys and values.
    /// `edge_gates` holds one gate per edge (the gate of its source).
    pub fn propagate(
        &self,
        t: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        edges: &EdgeSet,
        edge_gates: Option<Var>,
    ) -> Result<Var, TensorError> {
        let m = t.value(k).cols();
        let rel_table = t.param(self.relation);
        let dot = t.edge_scores(q, k, rel_table, Rc::clone(&edges.index))?;
        let scores = t.scale(dot, 1.0 / (m as f64).sqrt());
        let alpha = t.segment_softmax(scores, edge_gates, Rc::clone(&edges.seg))?;
        let out = t.edge_aggregate(v, alpha, Rc::clone(&edges.src), Rc::clone(&edges.dst), edges.num_outputs())?;
        Ok(t.relu(out))
    }

    /// Output for a single destination row `x[row]`, whose in-edges are
    /// `edges` (a one-output set). Keys and values are never materialized:
    /// `q . (W_k x_u) = (W_k^T q) . x_u` and `sum alpha W_v x_u = W_v sum alpha x_u`,
    /// which costs O(m^2 + E m) instead of O(n m^2).
    pub fn single_row(
        &self,
        t: &mut Tape,
        x: Var,
        row: usize,
        edges: &EdgeSet,
        edge_gates: Option<Var>,
    ) -> Result<Var, TensorError> {
        let m = t.value(x).cols();
        let xd = t.gather_rows(x, Rc::new(vec![row]))?;
        let q = self.query.forward(t, xd)?;
        let wk = t.param(self.key.weight);
        let q_in = t.matmul_t(q, wk)?;
        let node_scores = t.matmul_t(x, q_in)?;
        let node_part = t.gather_rows(node_scores, Rc::clone(&edges.src))?;
        let rel_table = t.param(self.relation);
        let rel_scores = t.matmul_t(rel_table, q)?;
        let rel_part = t.gather_rows(rel_scores, Rc::new(edges.index.rel.clone()))?;
        let dot = t.add(node_part, rel_part)?;
        let scores = t.scale(dot, 1.0 / (m as f64).sqrt());
        let alpha = t.segment_softmax(scores, edge_gates, Rc::clone(&edges.seg))?;
        let mixed = t.edge_aggregate(x, alpha, Rc::clone(&edges.src), Rc::clone(&edges.dst), 1)?;
        let out = self.value.forward(t, mixed)?;
        Ok(t.relu(out))
    }

    pub fn forward(&self, t: &mut Tape, x: Var, edges: &EdgeSet, edge_gates: Option<Var>) -> Result<Var, TensorError> {
        let q = self.query.forward(t, x)?;
        let k = self.key.forward(t, x)?;
        let v = self.value.forward(t, x)?;
        self.propagate(t, q, k, v, edges, edge_gates)
    }

    /// Attention weights only, for inspection and tests.
    pub fn attention_weights(&self, t: &mut Tape, x: Var, edges: &EdgeSet, edge_gates: Option<Var>) -> Result<Var, TensorError> {
        let m = t.value(x).cols();
        let q = self.query.forward(t, x)?;
        let k = self.key.forward(t, x)?;
        let rel_table = t.param(self.relation);
        let dot = t.edge_scores(q, k, rel_table, Rc::clone(&edges.index))?;
        let scores = t.scale(dot, 1.0 / (m as f64).sqrt());
        t.segment_softmax(scores, edge_gates, Rc::clone(&edges.seg))
    }
}

/// Structure-aware cross-attention: input nodes and the decoder state are
/// projected to the attention width, re-encoded by a stack of [`RgatLayer`]s
/// over the joint graph, and the context node's final row is projected back.
#[derive(Debug, Clone)]
pub struct Saca {
    pub input: Linear,
    pub output: Linear,
    pub layers: Vec<RgatLayer>,
}

/// Step-invariant projections of one input graph, reused at every
/// decoding step.
#[derive(Debug, Clone)]
pub struct SacaCache {
    nodes: Tensor,
    first_layer: Option<(Tensor, Tensor, Tensor)>,
    layout: JointLayout,
    full: EdgeSet,
    context_in: EdgeSet,
}

impl Saca {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, model_dim: usize, dim: usize, layers: usize) -> Result<Self, ParamError> {
        let g = ParamGroup::Saca;
        let input = b.linear("saca.in", g, model_dim, dim)?;
        let layers = (0..layers)
            .map(|l| RgatLayer::new(b, &format!("saca.{l}"), dim))
            .collect::<Result<Vec<_>, _>>()?;
        // Zero so an untrained branch leaves the decoder state unchanged.
        let output = Linear { weight: b.normal("saca.out", g, dim, model_dim, 0.0)? };
        Ok(Self { input, output, layers })
    }

    /// Context vectors for every step at once. `nodes` is `[n, d]` (input
    /// tokens only), `states` is `[T, d]`, and `gates` is `[T * n, 1]` in
    /// step-major order. Returns `[T, d]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        nodes: Var,
        states: Var,
        layout: &JointLayout,
        gates: Option<Var>,
    ) -> Result<Var, TensorError> {
        let n = layout.tokens;
        let steps = t.value(states).rows();
        if t.value(nodes).rows() != n {
            return Err(TensorError::ShapeMismatch {
                op: "saca",
                left: t.value(nodes).shape().to_vec(),
                right: vec![n],
            });
        }
        let n1 = layout.nodes_per_copy();
        let p = self.input.forward(t, nodes)?;
        let s = self.input.forward(t, states)?;
        let base = t.concat_rows(&[p, s])?;
        let node_map: Vec<usize> = (0..steps).flat_map(|c| (0..n).chain(std::iter::once(n + c))).collect();
        let mut x = t.gather_rows(base, Rc::new(node_map))?;
        let edges = layout.replicated(steps);
        let edge_gates = match gates {
            Some(g) => {
                let ones = t.constant(Tensor::scalar(1.0));
                let all = t.concat_rows(&[g, ones])?;
                let idx: Vec<usize> = edges
                    .src
                    .iter()
                    .map(|&r| {
                        let (c, i) = (r / n1, r % n1);
                        if i == n { steps * n } else { c * n + i }
                    })
                    .collect();
                Some(t.gather_rows(all, Rc::new(idx))?)
            }
            None => None,
        };
        for layer in &self.layers {
            x = layer.forward(t, x, &edges, edge_gates)?;
        }
        let ctx_rows: Vec<usize> = (0..steps).map(|c| c * n1 + n).collect();
        let ctx = t.gather_rows(x, Rc::new(ctx_rows))?;
        self.output.forward(t, ctx)
    }

    /// Precompute the projections of `nodes` (`[n, d]`) that do not depend
    /// on the decoder state.
    pub fn prepare(&self, t: &mut Tape, nodes: Var, joint: &JointGraph) -> Result<SacaCache, TensorError> {
        let layout = JointLayout::new(joint);
        let p = self.input.forward(t, nodes)?;
        let first_layer = match self.layers.first() {
            Some(l) => {
                let q = l.query.forward(t, p)?;
                let k = l.key.forward(t, p)?;
                let v = l.value.forward(t, p)?;
                Some((t.value(q).clone(), t.value(k).clone(), t.value(v).clone()))
            }
            None => None,
        };
        Ok(SacaCache {
            nodes: t.value(p).clone(),
            first_layer,
            full: layout.replicated(1),
            context_in: layout.context_in_edges(),
            layout,
        })
    }

    /// Context vector for one decoder state `[1, d]`. Only the context
    /// node's row is computed in the last layer. `gates` is `[n, 1]`.
    pub fn step(&self, t: &mut Tape, cache: &SacaCache, state: Var, gates: Option<Var>) -> Result<Var, TensorError> {
        let n = cache.layout.tokens;
        let sd = self.input.forward(t, state)?;
        let Some(last) = self.layers.len().checked_sub(1) else {
            return self.output.forward(t, sd);
        };
        let node_gates = match gates {
            Some(g) => {
                let ones = t.constant(Tensor::scalar(1.0));
                Some(t.concat_rows(&[g, ones])?)
            }
            None => None,
        };
        let full_gates = match node_gates {
            Some(g) => Some(t.gather_rows(g, Rc::clone(&cache.full.src))?),
            None => None,
        };
        let ctx_gates = match node_gates {
            Some(g) => Some(t.gather_rows(g, Rc::clone(&cache.context_in.src))?),
            None => None,
        };
        let nodes = t.constant(cache.nodes.clone());
        let mut x = t.concat_rows(&[nodes, sd])?;
        for (l, layer) in self.layers.iter().enumerate() {
            if l == last {
                x = layer.single_row(t, x, n, &cache.context_in, ctx_gates)?;
                break;
            }
            let (q, k, v) = match (l, &cache.first_layer) {
                (0, Some((qc, kc, vc))) => {
                    let mut joined = [qc, kc, vc].map(|c| t.constant(c.clone()));
                    for (part, proj) in joined.iter_mut().zip([&layer.query, &layer.key, &layer.value]) {
                        let own = proj.forward(t, sd)?;
                        *part = t.concat_rows(&[*part, own])?;
                    }
                    (joined[0], joined[1], joined[2])
                }
                _ => (layer.query.forward(t, x)?, layer.key.forward(t, x)?, layer.value.forward(t, x)?),
            };
            x = layer.propagate(t, q, k, v, &cache.full, full_gates)?;
        }
        self.output.forward(t, x)
    }
}
