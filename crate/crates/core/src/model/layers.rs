//! Building blocks shared by the encoder and decoder stacks.

use std::rc::Rc;

use rand::Rng;

use crate::numerics::params::{init_normal, ParamError, ParamGroup, ParamId, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Tensor, TensorError};

/// Score assigned to masked attention logits; far enough below any real
/// score that its weight underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e9;

/// Registers parameters under a common name prefix with a shared RNG.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    /// `[rows, cols]` matrix with entries drawn from `N(0, 1/rows)`.
    pub fn weight(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> Result<ParamId, ParamError> {
        let std = 1.0 / (rows as f64).sqrt();
        self.normal(name, group, rows, cols, std)
    }

    pub fn normal(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, std: f64) -> Result<ParamId, ParamError> {
        let t = init_normal(self.rng, rows, cols, std);
        self.store.add(name, group, t)
    }

    pub fn linear(&mut self, name: &str, group: ParamGroup, input: usize, output: usize) -> Result<Linear, ParamError> {
        Ok(Linear { weight: self.weight(name, group, input, output)? })
    }

    pub fn norm(&mut self, name: &str, group: ParamGroup, dim: usize) -> Result<Norm, ParamError> {
        Ok(Norm {
            gamma: self.store.add(format!("{name}.gamma"), group, Tensor::full(&[1, dim], 1.0))?,
            beta: self.store.add(format!("{name}.beta"), group, Tensor::zeros(&[1, dim]))?,
        })
    }
}

/// Bias-free projection `x W`, with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
}

impl Linear {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = t.param(self.weight);
        t.matmul(x, w)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Row-major `[queries, keys]` mask; `true` hides the key from the query.
pub type AttnMask = Rc<Vec<bool>>;

pub fn key_padding_mask(queries: usize, key_valid: &[bool]) -> AttnMask {
    Rc::new((0..queries).flat_map(|_| key_valid.iter().map(|v| !v)).collect())
}

pub fn causal_mask(len: usize) -> AttnMask {
    Rc::new((0..len).flat_map(|q| (0..len).map(move |k| k > q)).collect())
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, group: ParamGroup, dim: usize, heads: usize) -> Result<Self, ParamError> {
        Ok(Self {
            query: b.linear(&format!("{name}.q"), group, dim, dim)?,
            key: b.linear(&format!("{name}.k"), group, dim, dim)?,
            value: b.linear(&format!("{name}.v"), group, dim, dim)?,
            output: b.linear(&format!("{name}.o"), group, dim, dim)?,
            heads,
        })
    }

    pub fn project_kv(&self, t: &mut Tape, memory: Var) -> Result<(Var, Var), TensorError> {
        Ok((self.key.forward(t, memory)?, self.value.forward(t, memory)?))
    }

    /// Multi-head scaled dot-product attention of `x` over pre-projected keys
    /// and values.
    pub fn attend(&self, t: &mut Tape, x: Var, keys: Var, values: Var, mask: Option<&AttnMask>) -> Result<Var, TensorError> {
        let q = self.query.forward(t, x)?;
        let dim = t.value(q).cols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * head_dim, head_dim)?;
            let kh = t.slice_cols(keys, h * head_dim, head_dim)?;
            let vh = t.slice_cols(values, h * head_dim, head_dim)?;
            let raw = t.matmul_t(qh, kh)?;
            let mut scores = t.scale(raw, scale);
            if let Some(mask) = mask {
                scores = t.masked_fill(scores, Rc::clone(mask), MASKED_SCORE)?;
            }
            let weights = t.softmax(scores);
            outs.push(t.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs)? };
        self.output.forward(t, merged)
    }

    pub fn forward(&self, t: &mut Tape, x: Var, memory: Var, mask: Option<&AttnMask>) -> Result<Var, TensorError> {
        let (k, v) = self.project_kv(t, memory)?;
        self.attend(t, x, k, v, mask)
    }
}

/// `W_out relu(W_in x)`
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub input: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, group: ParamGroup, dim: usize, hidden: usize) -> Result<Self, ParamError> {
        Ok(Self {
            input: b.linear(&format!("{name}.in"), group, dim, hidden)?,
            output: b.linear(&format!("{name}.out"), group, hidden, dim)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let h = self.input.forward(t, x)?;
        let h = t.relu(h);
        self.output.forward(t, h)
    }
}

/// Pre-norm residual wrapper: `x + f(LN(x))`.
pub fn residual<F>(t: &mut Tape, norm: &Norm, x: Var, f: F) -> Result<Var, TensorError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let n = norm.forward(t, x)?;
    let y = f(t, n)?;
    t.add(x, y)
}
