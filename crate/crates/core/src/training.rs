//! Losses, the optimization loop and dev-set model selection.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::decoding::{decode_graphs, generation_text, SearchConfig, SearchMode};
use crate::eval::{bleu, EvalError, Smoothing};
use crate::ingest::vocab::Vocab;
use crate::ingest::{make_batches, Batch, Example};
use crate::model::{GraphInput, Model};
use crate::numerics::optim::{AdamW, LrSchedule, OptimError};
use crate::numerics::params::{ParamError, ParamStore};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("training set is empty")]
    EmptyData,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Language-model loss `-sum log p(y_t)` over unmasked positions, divided
/// by `denom`.
pub fn lm_loss(t: &mut Tape, logits: Var, targets: &[u32], mask: &[bool], denom: f64) -> Result<Var, TensorError> {
    let tg: Vec<Option<u32>> = targets.iter().zip(mask).map(|(&y, &m)| m.then_some(y)).collect();
    t.cross_entropy(logits, Rc::new(tg), denom)
}

/// Gate sparsity term: summed L1 norms of the per-step gate vectors,
/// divided by `denom`.
pub fn dgp_loss(t: &mut Tape, gates: Var, denom: f64) -> Var {
    let s = t.sum(gates);
    t.scale(s, 1.0 / denom)
}

/// `sum_t ||gates_t||_1 / target_len` on plain values.
pub fn dgp_penalty(gates: &[Vec<f64>], target_len: usize) -> f64 {
    gates.iter().flatten().map(|g| g.abs()).sum::<f64>() / target_len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub lm: f64,
    pub dgp: f64,
    pub total: f64,
    pub tokens: usize,
    pub gate_sum: f64,
    pub gate_count: usize,
}

impl LossReport {
    pub fn mean_gate(&self) -> Option<f64> {
        (self.gate_count > 0).then(|| self.gate_sum / self.gate_count as f64)
    }
}

/// Loss and summed gradients of one batch. Each example is run on its own
/// tape over its padded row; `lm` is the mean over all target tokens of the
/// batch and `dgp` the mean over examples of each example's per-token gate
/// mass.
pub fn batch_loss(model: &Model, batch: &Batch, lambda: f64) -> Result<(LossReport, Gradients), TensorError> {
    let tokens = batch.token_count();
    let examples = batch.len();
    let mut grads = Gradients::zeros_like(&model.store);
    let mut report = LossReport { tokens, ..Default::default() };
    for b in 0..examples {
        let len = batch.target_len(b);
        let mut t = Tape::new(&model.store);
        let input = GraphInput::padded(&batch.graphs[b], batch.node_ids[b].len());
        let enc = model.encode(&mut t, input)?;
        let tf = model.teacher_forced(&mut t, input, &enc, &batch.targets[b], len)?;
        let lm = lm_loss(&mut t, tf.logits, &batch.targets[b][..len], &batch.target_mask[b][..len], tokens as f64)?;
        report.lm += t.value(lm).item();
        let mut loss = lm;
        if let Some(g) = tf.gates {
            let gv = t.value(g);
            report.gate_sum += gv.data().iter().sum::<f64>();
            report.gate_count += gv.numel();
            let d = dgp_loss(&mut t, g, (len * examples) as f64);
            report.dgp += t.value(d).item();
            if lambda != 0.0 {
                let weighted = t.scale(d, lambda);
                loss = t.add(lm, weighted)?;
            }
        }
        grads.accumulate(&t.backward(loss)?);
    }
    report.total = report.lm + lambda * report.dgp;
    Ok((report, grads))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lm: f64,
    pub dgp: f64,
    pub total: f64,
    pub dev_bleu: Option<f64>,
    pub mean_gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<MetricRecord>,
    pub steps: u64,
    /// Step whose parameters were kept (the last step without a dev set).
    pub best_step: u64,
    pub best_dev_bleu: Option<f64>,
}

/// Greedy-decoded corpus BLEU of `examples` against their reference text.
pub fn greedy_bleu(model: &Model, examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<f64, TrainError> {
    let cfg = SearchConfig { mode: SearchMode::Greedy, max_len, length_penalty: 1.0 };
    let graphs: Vec<_> = examples.iter().map(|e| &e.token_graph).collect();
    let gens = decode_graphs(model, &graphs, &cfg)?;
    let hyps: Vec<String> = gens.iter().map(|g| generation_text(vocab, g)).collect();
    let hyps: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let refs: Vec<&str> = examples.iter().map(|e| e.target_text.as_str()).collect();
    Ok(bleu(&hyps, &refs, Smoothing::default())?)
}

/// AdamW on `lm + lambda * dgp` with linearly decaying learning rate.
///
/// Every `eval_every` steps, and after the last one, greedy dev BLEU is
/// measured on the parameters rounded to 32-bit floats and the best
/// parameters are kept. On return the model holds the kept parameters
/// rounded, exactly what a checkpoint stores and what was scored.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &[Example],
    dev_set: &[Example],
    vocab: &Vocab,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyData);
    }
    model.store.freeze_by_name(&cfg.freeze)?;
    let schedule = LrSchedule::new(cfg.lr, cfg.max_steps);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut stale = 0u64;
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while step < cfg.max_steps {
        for batch in make_batches(train_set, cfg.batch_size, cfg.seed.wrapping_add(epoch)) {
            if step >= cfg.max_steps {
                break;
            }
            let (report, grads) = batch_loss(model, &batch, cfg.lambda)?;
            if !report.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            opt.step(&mut model.store, &grads, schedule.lr(step))?;
            step += 1;
            let due = (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every)) || step == cfg.max_steps;
            let dev_bleu = if due && !dev_set.is_empty() {
                let exact = model.store.clone();
                model.store.round_to_f32();
                let b = greedy_bleu(model, dev_set, vocab, cfg.max_len);
                model.store = exact;
                Some(b?)
            } else {
                None
            };
            let record = MetricRecord {
                step,
                lm: report.lm,
                dgp: report.dgp,
                total: report.total,
                dev_bleu,
                mean_gate: report.mean_gate(),
            };
            on_record(&record);
            log.push(record);
            if let Some(b) = dev_bleu {
                if best.as_ref().is_none_or(|(bb, _, _)| b > *bb) {
                    best = Some((b, step, model.store.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        break 'outer;
                    }
                }
            }
        }
        epoch += 1;
    }
    let (best_step, best_dev_bleu) = match best {
        Some((b, s, store)) => {
            model.store = store;
            (s, Some(b))
        }
        None => (step, None),
    };
    model.store.round_to_f32();
    Ok(TrainOutcome { log, steps: step, best_step, best_dev_bleu })
}
