//! Transformer decoder with adapters, and the prediction head.

pub mod dgp;
pub mod saca;

use rand::Rng;

use crate::model::layers::{residual, Attention, AttnMask, Builder, FeedForward, Linear, Norm};
use crate::numerics::params::{ParamError, ParamGroup};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::TensorError;

pub use dgp::DgpGate;
pub use saca::{EdgeSet, JointLayout, RgatLayer, Saca, SacaCache};

/// `W_o relu(W_p LN(h)) + h`
#[derive(Debug, Clone)]
pub struct FfnAdapter {
    pub norm: Norm,
    pub proj: Linear,
    pub output: Linear,
}

impl FfnAdapter {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, adapter_dim: usize) -> Result<Self, ParamError> {
        let g = ParamGroup::Adapters;
        Ok(Self {
            norm: b.norm(&format!("{name}.norm"), g, dim)?,
            proj: b.linear(&format!("{name}.proj"), g, dim, adapter_dim)?,
            output: b.linear(&format!("{name}.out"), g, adapter_dim, dim)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, h: Var) -> Result<Var, TensorError> {
        let x = self.norm.forward(t, h)?;
        let x = self.proj.forward(t, x)?;
        let x = t.relu(x);
        let x = self.output.forward(t, x)?;
        t.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross_norm: Norm,
    pub cross_attn: Attention,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
    pub adapter: FfnAdapter,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
}

impl Decoder {
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
                let p = format!("dec.{l}");
                Ok(DecoderBlock {
                    self_norm: b.norm(&format!("{p}.self_norm"), g, dim)?,
                    self_attn: Attention::new(b, &format!("{p}.self"), g, dim, heads)?,
                    cross_norm: b.norm(&format!("{p}.cross_norm"), g, dim)?,
                    cross_attn: Attention::new(b, &format!("{p}.cross"), g, dim, heads)?,
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), g, dim)?,
                    ffn: FeedForward::new(b, &format!("{p}.ffn"), g, dim, ffn_dim)?,
                    adapter: FfnAdapter::new(b, &format!("{p}.adapter"), dim, adapter_dim)?,
                })
            })
            .collect::<Result<Vec<_>, ParamError>>()?;
        Ok(Self { blocks })
    }

    /// Cross-attention keys and values of `memory` for every block.
    pub fn memory_kv(&self, t: &mut Tape, memory: Var) -> Result<Vec<(Var, Var)>, TensorError> {
        self.blocks.iter().map(|b| b.cross_attn.project_kv(t, memory)).collect()
    }

    /// Hidden states of the last block, one row per input position.
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        memory_kv: &[(Var, Var)],
        self_mask: &AttnMask,
        cross_mask: Option<&AttnMask>,
    ) -> Result<Var, TensorError> {
        let mut h = x;
        for (block, &(k, v)) in self.blocks.iter().zip(memory_kv) {
            h = residual(t, &block.self_norm, h, |t, n| block.self_attn.forward(t, n, n, Some(self_mask)))?;
            h = residual(t, &block.cross_norm, h, |t, n| block.cross_attn.attend(t, n, k, v, cross_mask))?;
            h = residual(t, &block.ffn_norm, h, |t, n| block.ffn.forward(t, n))?;
            h = block.adapter.forward(t, h)?;
        }
        Ok(h)
    }
}

/// `logits = W_vocab LN(state + context)`; without a context it is
/// `W_vocab LN(state)`.
#[derive(Debug, Clone)]
pub struct Head {
    pub norm: Norm,
    pub vocab: Linear,
}

impl Head {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, vocab_size: usize) -> Result<Self, ParamError> {
        let g = ParamGroup::Head;
        Ok(Self { norm: b.norm("head.norm", g, dim)?, vocab: b.linear("head.vocab", g, dim, vocab_size)? })
    }

    pub fn forward(&self, t: &mut Tape, state: Var, context: Option<Var>) -> Result<Var, TensorError> {
        let x = match context {
            Some(c) => t.add(state, c)?,
            None => state,
        };
        let x = self.norm.forward(t, x)?;
        self.vocab.forward(t, x)
    }
}
