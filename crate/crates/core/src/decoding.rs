//! Greedy and beam-search generation over any next-token scorer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ingest::vocab::{BOS, EOS};
use crate::graph::TokenGraph;
use crate::ingest::vocab::Vocab;
use crate::model::{Model, Session, StepOutput};
use crate::numerics::tensor::TensorError;

/// Next-token log-probabilities given a prefix that starts with BOS.
pub trait StepScorer {
    fn step(&self, prefix: &[u32]) -> Result<StepOutput, TensorError>;

    fn bos(&self) -> u32 {
        BOS
    }

    fn eos(&self) -> u32 {
        EOS
    }
}

impl StepScorer for Session<'_> {
    fn step(&self, prefix: &[u32]) -> Result<StepOutput, TensorError> {
        Session::step(self, prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Finished hypotheses are ranked by `log_prob / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { mode: SearchMode::Beam(5), max_len: 128, length_penalty: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after BOS, ending in EOS when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    /// Gate vector in effect when each token was chosen.
    pub gates: Vec<Vec<f64>>,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        normalized_score(self.log_prob, self.tokens.len(), length_penalty)
    }
}

pub fn normalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    if len == 0 {
        return log_prob;
    }
    log_prob / (len as f64).powf(length_penalty)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens without the trailing EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    /// Hit `max_len` without producing EOS.
    pub truncated: bool,
    pub gate_trace: Vec<Vec<f64>>,
}

fn finish(h: Hypothesis, eos: u32, length_penalty: f64) -> Generation {
    let score = h.score(length_penalty);
    let mut tokens = h.tokens;
    if h.finished && tokens.last() == Some(&eos) {
        tokens.pop();
    }
    Generation { tokens, log_prob: h.log_prob, score, truncated: !h.finished, gate_trace: h.gates }
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn generate(scorer: &impl StepScorer, cfg: &SearchConfig) -> Result<Generation, TensorError> {
    generate_with_prefix(scorer, cfg, &[])
}

/// Generate a continuation of `forced` (tokens after BOS, already chosen).
pub fn generate_with_prefix(scorer: &impl StepScorer, cfg: &SearchConfig, forced: &[u32]) -> Result<Generation, TensorError> {
    assert!(cfg.max_len >= 1, "max_len must be at least 1");
    match cfg.mode {
        SearchMode::Greedy => greedy(scorer, cfg, forced),
        SearchMode::Beam(k) => beam(scorer, cfg, k.max(1), forced),
    }
}

fn start(scorer: &impl StepScorer, forced: &[u32]) -> Vec<u32> {
    let mut p = vec![scorer.bos()];
    p.extend_from_slice(forced);
    p
}

fn greedy(scorer: &impl StepScorer, cfg: &SearchConfig, forced: &[u32]) -> Result<Generation, TensorError> {
    let mut prefix = start(scorer, forced);
    let mut h = Hypothesis { tokens: forced.to_vec(), log_prob: 0.0, finished: false, gates: Vec::new() };
    while h.tokens.len() < cfg.max_len {
        let out = scorer.step(&prefix)?;
        let tok = argmax(&out.log_probs);
        h.log_prob += out.log_probs[tok];
        h.tokens.push(tok as u32);
        h.gates.extend(out.gates);
        prefix.push(tok as u32);
        if tok as u32 == scorer.eos() {
            h.finished = true;
            break;
        }
    }
    Ok(finish(h, scorer.eos(), cfg.length_penalty))
}

/// Keeps the `k` best expansions by cumulative log-probability each step;
/// expansions ending in EOS retire. Candidates are ordered by log-probability,
/// then parent rank, then token id. The result is the retired (or, failing
/// that, truncated) hypothesis with the best length-normalized score.
fn beam(scorer: &impl StepScorer, cfg: &SearchConfig, k: usize, forced: &[u32]) -> Result<Generation, TensorError> {
    let eos = scorer.eos();
    let mut live = vec![Hypothesis { tokens: forced.to_vec(), log_prob: 0.0, finished: false, gates: Vec::new() }];
    let mut done: Vec<Hypothesis> = Vec::new();
    let bos_prefix = start(scorer, &[]);
    while !live.is_empty() && live[0].tokens.len() < cfg.max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        let mut outs = Vec::with_capacity(live.len());
        for (rank, h) in live.iter().enumerate() {
            let mut prefix = bos_prefix.clone();
            prefix.extend_from_slice(&h.tokens);
            let out = scorer.step(&prefix)?;
            for (tok, &lp) in out.log_probs.iter().enumerate() {
                cands.push((h.log_prob + lp, rank, tok as u32));
            }
            outs.push(out);
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for &(lp, rank, tok) in cands.iter().take(k) {
            let parent = &live[rank];
            let mut h = parent.clone();
            h.tokens.push(tok);
            h.log_prob = lp;
            h.gates.extend(outs[rank].gates.clone());
            if tok == eos {
                h.finished = true;
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    let pool = if done.is_empty() { live } else { done };
    let best = pool
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.score(cfg.length_penalty)
                .partial_cmp(&b.score(cfg.length_penalty))
                .unwrap_or(Ordering::Equal)
                .then(j.cmp(i))
        })
        .map(|(_, h)| h)
        .expect("at least one hypothesis");
    Ok(finish(best, eos, cfg.length_penalty))
}

/// Decode every graph with `model`, returning generations in input order.
pub fn decode_graphs(model: &Model, graphs: &[&TokenGraph], cfg: &SearchConfig) -> Result<Vec<Generation>, TensorError> {
    graphs
        .iter()
        .map(|g| {
            let session = model.session(g)?;
            generate(&session, cfg)
        })
        .collect()
}

/// Decoded text of a generation (tokens joined by single spaces).
pub fn generation_text(vocab: &Vocab, g: &Generation) -> String {
    vocab.decode(&g.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution regardless of prefix.
    struct Constant(Vec<f64>);

    impl StepScorer for Constant {
        fn step(&self, _: &[u32]) -> Result<StepOutput, TensorError> {
            Ok(StepOutput { log_probs: self.0.iter().map(|p| p.ln()).collect(), gates: None })
        }
    }

    /// Forces token `prefix.len() + 2` until position 3, then EOS.
    struct Forced;

    impl StepScorer for Forced {
        fn step(&self, prefix: &[u32]) -> Result<StepOutput, TensorError> {
            let want = if prefix.len() > 3 { EOS as usize } else { prefix.len() + 2 };
            let log_probs = (0..8).map(|t| if t == want { 0.0 } else { f64::NEG_INFINITY }).collect();
            Ok(StepOutput { log_probs, gates: Some(vec![prefix.len() as f64]) })
        }
    }

    #[test]
    fn forced_sequence_in_every_mode() {
        for mode in [SearchMode::Greedy, SearchMode::Beam(1), SearchMode::Beam(3)] {
            let g = generate(&Forced, &SearchConfig { mode, max_len: 10, length_penalty: 1.0 }).unwrap();
            assert_eq!(g.tokens, [3, 4, 5], "{mode:?}");
            assert!(!g.truncated);
            assert_eq!(g.log_prob, 0.0);
            assert_eq!(g.gate_trace, [vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let scorer = Constant(vec![0.1, 0.1, 0.1, 0.7]);
        for mode in [SearchMode::Greedy, SearchMode::Beam(2)] {
            let g = generate(&scorer, &SearchConfig { mode, max_len: 4, length_penalty: 1.0 }).unwrap();
            assert!(g.truncated);
            assert_eq!(g.tokens, [3, 3, 3, 3]);
        }
    }

    #[test]
    fn ties_break_toward_lower_token_id() {
        let scorer = Constant(vec![0.0, 0.0, 0.2, 0.4, 0.4]);
        let g = generate(&scorer, &SearchConfig { mode: SearchMode::Greedy, max_len: 2, length_penalty: 1.0 }).unwrap();
        assert_eq!(g.tokens, [3, 3]);
    }

    #[test]
    fn forced_prefix_is_kept() {
        let g = generate_with_prefix(&Forced, &SearchConfig { mode: SearchMode::Greedy, max_len: 10, length_penalty: 1.0 }, &[3]).unwrap();
        assert_eq!(g.tokens, [3, 4, 5]);
    }
}
