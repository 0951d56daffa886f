//! Transformer encoder over graph tokens with a relational adapter after
//! every block.

use std::rc::Rc;

use rand::Rng;

use crate::graph::{Edge, EdgeRel};
use crate::model::layers::{key_padding_mask, residual, Attention, Builder, FeedForward, Linear, Norm};
use crate::numerics::params::{ParamError, ParamGroup};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Tensor, TensorError};

/// In-neighbor lists grouped by relation type, with mean-aggregation
/// weights `1 / |N_r(v)|` precomputed per edge.
#[derive(Debug, Clone)]
pub struct RelationalNeighborhoods {
    num_nodes: usize,
    relations: Vec<RelationEdges>,
}

#[derive(Debug, Clone)]
struct RelationEdges {
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    weight: Tensor,
}

impl RelationalNeighborhoods {
    /// `num_nodes` may exceed the largest edge endpoint; the extra rows
    /// (padding) have no neighbors.
    pub fn new(num_nodes: usize, edges: &[Edge]) -> Self {
        let relations = EdgeRel::ALL
            .iter()
            .map(|&rel| {
                let (src, dst): (Vec<usize>, Vec<usize>) =
                    edges.iter().filter(|e| e.rel == rel).map(|e| (e.src, e.dst)).unzip();
                let mut degree = vec![0usize; num_nodes];
                for &d in &dst {
                    degree[d] += 1;
                }
                let weight = Tensor::column(&dst.iter().map(|&d| 1.0 / degree[d] as f64).collect::<Vec<_>>());
                RelationEdges { src: Rc::new(src), dst: Rc::new(dst), weight }
            })
            .collect();
        Self { num_nodes, relations }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }
}

/// `z_v = W_e relu(g_v) + h_v` with
/// `g_v = sum_r sum_{u in N_r(v)} W_r LN(h_u) / |N_r(v)|`.
#[derive(Debug, Clone)]
pub struct StructuralAdapter {
    pub norm: Norm,
    pub relation: Vec<Linear>,
    pub output: Linear,
}

impl StructuralAdapter {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, adapter_dim: usize) -> Result<Self, ParamError> {
        let g = ParamGroup::Adapters;
        let norm = b.norm(&format!("{name}.norm"), g, dim)?;
        let relation = EdgeRel::ALL
            .iter()
            .map(|r| b.linear(&format!("{name}.rel_{}", r.name()), g, dim, adapter_dim))
            .collect::<Result<Vec<_>, _>>()?;
        let output = b.linear(&format!("{name}.out"), g, adapter_dim, dim)?;
        Ok(Self { norm, relation, output })
    }

    pub fn forward(&self, t: &mut Tape, h: Var, nbrs: &RelationalNeighborhoods) -> Result<Var, TensorError> {
        let rows = t.value(h).rows();
        if rows != nbrs.num_nodes {
            return Err(TensorError::ShapeMismatch {
                op: "structural_adapter",
                left: t.value(h).shape().to_vec(),
                right: vec![nbrs.num_nodes],
            });
        }
        let x = self.norm.forward(t, h)?;
        let mut agg: Option<Var> = None;
        for (lin, rel) in self.relation.iter().zip(&nbrs.relations) {
            if rel.src.is_empty() {
                continue;
            }
            let proj = lin.forward(t, x)?;
            let msgs = t.gather_rows(proj, Rc::clone(&rel.src))?;
            let w = t.constant(rel.weight.clone());
            let msgs = t.mul_col(msgs, w)?;
            let part = t.scatter_rows(msgs, Rc::clone(&rel.dst), rows)?;
            agg = Some(match agg {
                Some(a) => t.add(a, part)?,
                None => part,
            });
        }
        let g = match agg {
            Some(a) => a,
            None => {
                let cols = t.store().tensor(self.relation[0].weight).cols();
                t.constant(Tensor::zeros(&[rows, cols]))
            }
        };
        let act = t.relu(g);
        let z = self.output.forward(t, act)?;
        t.add(z, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: Norm,
    pub attn: Attention,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
    pub adapter: StructuralAdapter,
}

/// Encoder stack. The output is the last block's residual stream with no
/// final normalization, so a zero-layer encoder returns its input.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        adapter_dim: usize,
    ) -> Result<Self, ParamError> {
        let g = ParamGroup::Backbone;
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Ok(EncoderBlock {
                    attn_norm: b.norm(&format!("{p}.attn_norm"), g, dim)?,
                    attn: Attention::new(b, &format!("{p}.attn"), g, dim, heads)?,
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), g, dim)?,
                    ffn: FeedForward::new(b, &format!("{p}.ffn"), g, dim, ffn_dim)?,
                    adapter: StructuralAdapter::new(b, &format!("{p}.adapter"), dim, adapter_dim)?,
                })
            })
            .collect::<Result<Vec<_>, ParamError>>()?;
        Ok(Self { blocks })
    }

    /// `x` holds one row per (possibly padded) node; `valid[i]` is false on
    /// padding, which is hidden from attention and has no graph neighbors.
    pub fn forward(&self, t: &mut Tape, x: Var, valid: &[bool], nbrs: &RelationalNeighborhoods) -> Result<Var, TensorError> {
        let mask = key_padding_mask(valid.len(), valid);
        let mask = if valid.iter().all(|&v| v) { None } else { Some(mask) };
        let mut h = x;
        for block in &self.blocks {
            h = residual(t, &block.attn_norm, h, |t, n| block.attn.forward(t, n, n, mask.as_ref()))?;
            h = residual(t, &block.ffn_norm, h, |t, n| block.ffn.forward(t, n))?;
            h = block.adapter.forward(t, h, nbrs)?;
        }
        Ok(h)
    }
}
