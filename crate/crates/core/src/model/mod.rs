//! The full graph-to-text model: shared embeddings, encoder, decoder,
//! optional structure-aware cross-attention and gates, prediction head.

pub mod layers;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{Decoder, DgpGate, Head, JointLayout, Saca, SacaCache};
use crate::encoder::{Encoder, RelationalNeighborhoods};
use crate::graph::{build_joint_graph, TokenGraph};
use crate::ingest::vocab::{BOS, PAD};
use crate::numerics::params::{ParamError, ParamGroup, ParamId, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Tensor, TensorError};
use layers::{causal_mask, key_padding_mask, Builder};

/// Which decoder-side graph components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Structural adapters and plain cross-attention only.
    Baseline,
    Saca,
    SacaDgp,
}

impl Variant {
    pub fn of(config: &ModelConfig) -> Self {
        match (config.use_saca, config.use_dgp) {
            (true, true) => Variant::SacaDgp,
            (true, false) => Variant::Saca,
            _ => Variant::Baseline,
        }
    }

    pub fn apply(self, config: &mut ModelConfig) {
        config.use_saca = self != Variant::Baseline;
        config.use_dgp = self == Variant::SacaDgp;
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Saca => "saca",
            Variant::SacaDgp => "saca+dgp",
        }
    }
}

/// Encoder input: a token graph, optionally padded with extra PAD rows.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub graph: &'a TokenGraph,
    /// Row count after padding; at least `graph.num_nodes()`.
    pub rows: usize,
}

impl<'a> GraphInput<'a> {
    pub fn new(graph: &'a TokenGraph) -> Self {
        Self { graph, rows: graph.num_nodes() }
    }

    pub fn padded(graph: &'a TokenGraph, rows: usize) -> Self {
        Self { graph, rows: rows.max(graph.num_nodes()) }
    }

    pub fn valid(&self) -> Vec<bool> {
        (0..self.rows).map(|i| i < self.graph.num_nodes()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// All rows, padding included.
    pub all: Var,
    /// Rows of real graph tokens.
    pub nodes: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherForced {
    /// `[T, vocab]`
    pub logits: Var,
    /// `[T * n, 1]` gate values, step-major.
    pub gates: Option<Var>,
    /// `[T, d]` last decoder block states.
    pub states: Var,
    /// `[T, d]` structure-aware context vectors.
    pub context: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub embed: ParamId,
    pub span_embed: Option<ParamId>,
    pub positions: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Head,
    pub saca: Option<Saca>,
    pub dgp: Option<DgpGate>,
}

impl Model {
    /// Parameters are registered, and drawn from the seeded RNG, in a fixed
    /// order; the graph-attention parameters come last so every variant
    /// shares the same baseline initialization for a given seed.
    pub fn new(config: &ModelConfig, vocab_size: usize) -> Result<Self, ParamError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let d = config.model_dim;
        let bb = ParamGroup::Backbone;
        let embed = b.normal("embed", bb, vocab_size, d, 1.0)?;
        let span_embed = if config.span_positions {
            Some(b.normal("span_embed", bb, config.max_span, d, 1.0)?)
        } else {
            None
        };
        let positions = b.normal("positions", bb, config.max_positions, d, 1.0)?;
        let encoder = Encoder::new(&mut b, config.encoder_layers, d, config.heads, config.ffn_dim, config.adapter_dim)?;
        let decoder = Decoder::new(&mut b, config.decoder_layers, d, config.heads, config.ffn_dim, config.adapter_dim)?;
        let head = Head::new(&mut b, d, vocab_size)?;
        let saca = if config.use_saca {
            Some(Saca::new(&mut b, d, config.saca_dim, config.saca_layers)?)
        } else {
            None
        };
        let dgp = if config.use_dgp {
            Some(DgpGate::new(&mut b, d, config.saca_dim)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            store,
            embed,
            span_embed,
            positions,
            encoder,
            decoder,
            head,
            saca,
            dgp,
        })
    }

    pub fn variant(&self) -> Variant {
        Variant::of(&self.config)
    }

    pub fn encode(&self, t: &mut Tape, input: GraphInput<'_>) -> Result<Encoded, TensorError> {
        let g = input.graph;
        let n = g.num_nodes();
        let mut ids: Vec<usize> = g.tokens.iter().map(|&x| x as usize).collect();
        ids.resize(input.rows, PAD as usize);
        let table = t.param(self.embed);
        let mut x = t.gather_rows(table, Rc::new(ids))?;
        if let Some(span) = self.span_embed {
            let mut pos: Vec<usize> = g.span_pos.iter().map(|&p| p.min(self.config.max_span - 1)).collect();
            pos.resize(input.rows, 0);
            let table = t.param(span);
            let p = t.gather_rows(table, Rc::new(pos))?;
            x = t.add(x, p)?;
        }
        let nbrs = RelationalNeighborhoods::new(input.rows, &g.edges);
        let all = self.encoder.forward(t, x, &input.valid(), &nbrs)?;
        let nodes = if input.rows == n { all } else { t.gather_rows(all, Rc::new((0..n).collect()))? };
        Ok(Encoded { all, nodes })
    }

    fn embed_decoder_input(&self, t: &mut Tape, ids: &[u32]) -> Result<Var, TensorError> {
        let table = t.param(self.embed);
        let x = t.gather_rows(table, Rc::new(ids.iter().map(|&i| i as usize).collect()))?;
        let pos = t.param(self.positions);
        let p = t.gather_rows(pos, Rc::new((0..ids.len()).collect()))?;
        t.add(x, p)
    }

    /// Shifted-target decoding over every step at once. `targets` may be
    /// padded; only the first `len` steps reach the graph attention and the
    /// head.
    pub fn teacher_forced(
        &self,
        t: &mut Tape,
        input: GraphInput<'_>,
        enc: &Encoded,
        targets: &[u32],
        len: usize,
    ) -> Result<TeacherForced, TensorError> {
        let steps = targets.len();
        let mut dec_in = Vec::with_capacity(steps);
        dec_in.push(BOS);
        dec_in.extend_from_slice(&targets[..steps.saturating_sub(1)]);
        let x = self.embed_decoder_input(t, &dec_in)?;
        let kv = self.decoder.memory_kv(t, enc.all)?;
        let valid = input.valid();
        let cross = if valid.iter().all(|&v| v) { None } else { Some(key_padding_mask(steps, &valid)) };
        let states = self.decoder.forward(t, x, &kv, &causal_mask(steps), cross.as_ref())?;
        let states = if len == steps { states } else { t.gather_rows(states, Rc::new((0..len).collect()))? };
        let gates = match &self.dgp {
            Some(dgp) => Some(dgp.forward(t, enc.nodes, states)?),
            None => None,
        };
        let context = match &self.saca {
            Some(saca) => {
                let layout = JointLayout::new(&build_joint_graph(input.graph));
                Some(saca.forward(t, enc.nodes, states, &layout, gates)?)
            }
            None => None,
        };
        let logits = self.head.forward(t, states, context)?;
        Ok(TeacherForced { logits, gates, states, context })
    }

    /// Precompute everything about `graph` that stays fixed while decoding.
    pub fn session(&self, graph: &TokenGraph) -> Result<Session<'_>, TensorError> {
        let mut t = Tape::new(&self.store);
        let enc = self.encode(&mut t, GraphInput::new(graph))?;
        let kv = self.decoder.memory_kv(&mut t, enc.all)?;
        let memory_kv = kv.iter().map(|&(k, v)| (t.value(k).clone(), t.value(v).clone())).collect();
        let saca = match &self.saca {
            Some(s) => Some(s.prepare(&mut t, enc.nodes, &build_joint_graph(graph))?),
            None => None,
        };
        let dgp = match &self.dgp {
            Some(g) => Some(g.prepare(&mut t, enc.nodes)?),
            None => None,
        };
        Ok(Session { model: self, memory_kv, saca, dgp })
    }

    pub fn num_params_in(&self, group: ParamGroup) -> usize {
        self.store.num_scalars_in(group)
    }
}

/// Decoding state for one input graph.
pub struct Session<'m> {
    model: &'m Model,
    memory_kv: Vec<(Tensor, Tensor)>,
    saca: Option<SacaCache>,
    dgp: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    /// One gate per input token, when gating is enabled.
    pub gates: Option<Vec<f64>>,
}

impl Session<'_> {
    /// Next-token distribution after `prefix` (which starts with BOS).
    pub fn step(&self, prefix: &[u32]) -> Result<StepOutput, TensorError> {
        let m = self.model;
        let mut t = Tape::new(&m.store);
        let x = m.embed_decoder_input(&mut t, prefix)?;
        let kv = self
            .memory_kv
            .iter()
            .map(|(k, v)| (t.constant(k.clone()), t.constant(v.clone())))
            .collect::<Vec<_>>();
        let states = m.decoder.forward(&mut t, x, &kv, &causal_mask(prefix.len()), None)?;
        let last = t.gather_rows(states, Rc::new(vec![prefix.len() - 1]))?;
        let gates = match (&m.dgp, &self.dgp) {
            (Some(g), Some(prepared)) => Some(g.step(&mut t, prepared, last)?),
            _ => None,
        };
        let context = match (&m.saca, &self.saca) {
            (Some(s), Some(cache)) => Some(s.step(&mut t, cache, last, gates)?),
            _ => None,
        };
        let logits = m.head.forward(&mut t, last, context)?;
        let row = t.value(logits).data();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        Ok(StepOutput {
            log_probs: row.iter().map(|x| x - lse).collect(),
            gates: gates.map(|g| t.value(g).data().to_vec()),
        })
    }
}
