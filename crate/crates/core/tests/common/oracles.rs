//! Independent reference implementations shared by test targets.

use std::collections::HashMap;

use g2t_core::decoding::{generate, SearchConfig, SearchMode, StepScorer};
use g2t_core::encoder::Encoder;
use g2t_core::graph::{Edge, EdgeRel};
use g2t_core::model::StepOutput;
use g2t_core::numerics::gradcheck::{finite_diff_check, GradCheckConfig};
use g2t_core::numerics::params::{ParamGroup, ParamId, ParamStore};
use g2t_core::numerics::tape::{Tape, Var};
use g2t_core::numerics::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-2, -0.1] U [0.1, 2]`, away from the relu kink.
pub fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random linear functional of `out`, so every output entry carries weight.
pub fn probe(t: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = t.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    // Magnitudes stay away from zero so no gradient entry is drowned in
    // finite-difference roundoff.
    let data = (0..shape.iter().product())
        .map(|_| {
            let w: f64 = rng.gen_range(0.5..1.0);
            if rng.gen_bool(0.5) { w } else { -w }
        })
        .collect();
    let w = t.constant(Tensor::new(shape, data).unwrap());
    let prod = t.mul(out, w)?;
    Ok(t.sum(prod))
}

pub fn check_primitive<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, x)| store.add(format!("x{i}"), ParamGroup::Backbone, x).unwrap())
        .collect();
    let report = finite_diff_check(
        &mut store,
        |t| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let out = f(t, &vars)?;
            probe(t, out, seed)
        },
        GradCheckConfig { coords_per_param: usize::MAX, seed, ..Default::default() },
    )
    .unwrap();
    report.max_rel_error
}

pub fn ring_edges(n: usize) -> Vec<Edge> {
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push(Edge::new(i, (i + 1) % n, EdgeRel::Default));
        edges.push(Edge::new((i + 1) % n, i, EdgeRel::Reverse));
        edges.push(Edge::new(i, i, EdgeRel::SelfLoop));
    }
    edges
}

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Tensor) -> Mat {
    a.iter()
        .map(|row| (0..b.cols()).map(|c| row.iter().enumerate().map(|(k, x)| x * b.at(k, c)).sum()).collect())
        .collect()
}

pub fn ln(a: &Mat, gamma: &Tensor, beta: &Tensor) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, x)| (x - mean) / (var + 1e-5).sqrt() * gamma.data()[c] + beta.data()[c])
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Unmasked pre-norm transformer block stack written out entry by entry.
pub fn plain_transformer(store: &ParamStore, enc: &Encoder, heads: usize, x: &Mat) -> Mat {
    let w = |id| store.tensor(id);
    let mut h = x.clone();
    for b in &enc.blocks {
        let n = ln(&h, w(b.attn_norm.gamma), w(b.attn_norm.beta));
        let (q, k, v) = (mm(&n, w(b.attn.query.weight)), mm(&n, w(b.attn.key.weight)), mm(&n, w(b.attn.value.weight)));
        let dim = x[0].len();
        let hd = dim / heads;
        let mut merged = vec![vec![0.0; dim]; h.len()];
        for head in 0..heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..h.len() {
                let s: Vec<f64> = (0..h.len())
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for c in cols.clone() {
                    merged[i][c] = (0..h.len()).map(|j| (s[j] - m).exp() / z * v[j][c]).sum();
                }
            }
        }
        h = add(&h, &mm(&merged, w(b.attn.output.weight)));
        let n = ln(&h, w(b.ffn_norm.gamma), w(b.ffn_norm.beta));
        let mut hidden = mm(&n, w(b.ffn.input.weight));
        hidden.iter_mut().flatten().for_each(|x| *x = x.max(0.0));
        h = add(&h, &mm(&hidden, w(b.ffn.output.weight)));
    }
    h
}

/// Straight per-node, per-edge evaluation of one attention layer.
pub fn naive_rgat(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    rel: &Tensor,
    edges: &[(usize, usize, usize)],
    gates: Option<&[f64]>,
) -> (Tensor, Vec<f64>) {
    let (n, m) = (x.rows(), x.cols());
    let proj = |w: &Tensor, r: usize| -> Vec<f64> {
        (0..m).map(|c| (0..m).map(|k| x.at(r, k) * w.at(k, c)).sum()).collect()
    };
    let mut out = vec![0.0; n * m];
    let mut alpha = vec![0.0; edges.len()];
    for v in 0..n {
        let inc: Vec<usize> = (0..edges.len()).filter(|&e| edges[e].1 == v).collect();
        let qv = proj(wq, v);
        let scores: Vec<f64> = inc
            .iter()
            .map(|&e| {
                let (u, _, r) = edges[e];
                let ku = proj(wk, u);
                (0..m).map(|c| qv[c] * (ku[c] + rel.at(r, c))).sum::<f64>() / (m as f64).sqrt()
            })
            .collect();
        let weights: Vec<f64> = inc
            .iter()
            .zip(&scores)
            .map(|(&e, s)| gates.map_or(1.0, |g| g[edges[e].0]) * s.exp())
            .collect();
        let z: f64 = weights.iter().sum();
        for (j, &e) in inc.iter().enumerate() {
            alpha[e] = weights[j] / z;
            let vu = proj(wv, edges[e].0);
            for c in 0..m {
                out[v * m + c] += alpha[e] * vu[c];
            }
        }
    }
    for x in &mut out {
        *x = x.max(0.0);
    }
    (Tensor::matrix(n, m, out).unwrap(), alpha)
}

pub const EOS: u32 = 0;
pub const BOS: u32 = 9;
pub const STEPS: usize = 3;

/// Scorer over `{EOS, 1, .., V}` driven by a table of content-token
/// probabilities per prefix. EOS is impossible before `STEPS` tokens and
/// certain after.
#[derive(Debug)]
pub struct Table {
    pub content: usize,
    pub probs: HashMap<Vec<u32>, Vec<f64>>,
}

impl StepScorer for Table {
    fn step(&self, prefix: &[u32]) -> Result<StepOutput, TensorError> {
        let body = &prefix[1..];
        let mut lp = vec![f64::NEG_INFINITY; self.content + 1];
        if body.len() == STEPS {
            lp[EOS as usize] = 0.0;
        } else {
            for (i, p) in self.probs[body].iter().enumerate() {
                lp[i + 1] = p.ln();
            }
        }
        Ok(StepOutput { log_probs: lp, gates: None })
    }

    fn bos(&self) -> u32 {
        BOS
    }

    fn eos(&self) -> u32 {
        EOS
    }
}

pub fn prefixes(content: usize) -> Vec<Vec<u32>> {
    let mut all = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 1..STEPS {
        frontier = frontier
            .iter()
            .flat_map(|p: &Vec<u32>| (1..=content as u32).map(move |t| [p.clone(), vec![t]].concat()))
            .collect();
        all.extend(frontier.clone());
    }
    all
}

/// Best full sequence by enumerating every content sequence of length `STEPS`.
pub fn exhaustive(table: &Table) -> (Vec<u32>, f64) {
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack = vec![(vec![], 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        if seq.len() == STEPS {
            if best.as_ref().is_none_or(|b| lp > b.1) {
                best = Some((seq, lp));
            }
            continue;
        }
        for (i, p) in table.probs[&seq].iter().enumerate() {
            let mut next = seq.clone();
            next.push(i as u32 + 1);
            stack.push((next, lp + p.ln()));
        }
    }
    best.unwrap()
}

pub fn run(table: &Table, mode: SearchMode) -> (Vec<u32>, f64) {
    let g = generate(table, &SearchConfig { mode, max_len: STEPS + 1, length_penalty: 1.0 }).unwrap();
    assert!(!g.truncated);
    (g.tokens, g.log_prob)
}

