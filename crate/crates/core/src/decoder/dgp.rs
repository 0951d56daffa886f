//! Per-step node gates: `g_v = sigmoid(w_g . tanh(W_e h_v + W_d h_t))`.

use std::rc::Rc;

use rand::Rng;

use crate::model::layers::{Builder, Linear};
use crate::numerics::params::{ParamError, ParamGroup};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct DgpGate {
    /// Node-side projection `d -> m`.
    pub node: Linear,
    /// Decoder-state projection `d -> m`.
    pub state: Linear,
    /// Scoring vector `m -> 1`.
    pub score: Linear,
}

impl DgpGate {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, model_dim: usize, dim: usize) -> Result<Self, ParamError> {
        let g = ParamGroup::Dgp;
        Ok(Self {
            node: b.linear("dgp.node", g, model_dim, dim)?,
            state: b.linear("dgp.state", g, model_dim, dim)?,
            score: b.linear("dgp.score", g, dim, 1)?,
        })
    }

    /// Gates for every (step, node) pair: `nodes` is `[n, d]`, `states` is
    /// `[T, d]`, the result is `[T * n, 1]` in step-major order.
    pub fn forward(&self, t: &mut Tape, nodes: Var, states: Var) -> Result<Var, TensorError> {
        let n = t.value(nodes).rows();
        let steps = t.value(states).rows();
        let a = self.node.forward(t, nodes)?;
        let b = self.state.forward(t, states)?;
        let ai = t.gather_rows(a, Rc::new((0..steps).flat_map(|_| 0..n).collect()))?;
        let bi = t.gather_rows(b, Rc::new((0..steps).flat_map(|s| std::iter::repeat_n(s, n)).collect()))?;
        let pre = t.add(ai, bi)?;
        let h = t.tanh(pre);
        let s = self.score.forward(t, h)?;
        Ok(t.sigmoid(s))
    }

    /// Node-side projection, reusable across steps.
    pub fn prepare(&self, t: &mut Tape, nodes: Var) -> Result<Tensor, TensorError> {
        let a = self.node.forward(t, nodes)?;
        Ok(t.value(a).clone())
    }

    /// Gates `[n, 1]` for one decoder state `[1, d]`.
    pub fn step(&self, t: &mut Tape, prepared: &Tensor, state: Var) -> Result<Var, TensorError> {
        let a = t.constant(prepared.clone());
        let b = self.state.forward(t, state)?;
        let pre = t.add_row(a, b)?;
        let h = t.tanh(pre);
        let s = self.score.forward(t, h)?;
        Ok(t.sigmoid(s))
    }
}
