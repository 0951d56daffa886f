#![allow(dead_code)]

pub mod oracles;

use g2t_core::config::ModelConfig;
use g2t_core::graph::MultiRelGraph;
use g2t_core::ingest::vocab::{build_vocab, Vocab};
use g2t_core::ingest::{corpus_strings, Example, RawExample};
use g2t_core::model::{GraphInput, Model, Variant};
use g2t_core::numerics::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use g2t_core::numerics::tensor::Tensor;
use g2t_core::training::{dgp_loss, lm_loss};
use rand::{Rng, SeedableRng};

pub fn tiny_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig {
        model_dim: 8,
        heads: 2,
        ffn_dim: 12,
        encoder_layers: 2,
        decoder_layers: 2,
        adapter_dim: 6,
        saca_dim: 6,
        saca_layers: 2,
        max_positions: 16,
        init_seed: 7,
        ..ModelConfig::default()
    };
    variant.apply(&mut c);
    c
}

/// Five entities, four triples, one two-word label, four-token target
/// (three words plus EOS).
pub fn five_node_raw() -> RawExample {
    let g = MultiRelGraph::from_parts(
        vec!["alice", "bob", "new york", "paris", "music"],
        vec![(0, "knows", 1), (0, "lives", 2), (1, "visits", 3), (2, "likes", 4)],
    )
    .unwrap();
    RawExample { graph: g, text: "alice knows bob".into() }
}

pub fn encode_one(raw: &RawExample) -> (Vocab, Example) {
    let vocab = build_vocab(corpus_strings(std::slice::from_ref(raw)), 1, true);
    let ex = Example::encode(raw, &vocab).unwrap();
    (vocab, ex)
}

pub fn tiny_model(variant: Variant) -> (Model, Example) {
    let (vocab, ex) = encode_one(&five_node_raw());
    let mut model = Model::new(&tiny_config(variant), vocab.len()).unwrap();
    model.store.perturb(&mut rand::rngs::StdRng::seed_from_u64(17), 0.1);
    (model, ex)
}

/// Finite-difference check of `lm + lambda * dgp` on one example over every
/// parameter of `model`.
pub fn full_model_check(model: &mut Model, ex: &Example, lambda: f64, coords_per_param: usize) -> GradCheckReport {
    let mut store = std::mem::take(&mut model.store);
    let targets = ex.target_ids.clone();
    let len = targets.len();
    let report = finite_diff_check(
        &mut store,
        |t| {
            let input = GraphInput::new(&ex.token_graph);
            let enc = model.encode(t, input)?;
            let tf = model.teacher_forced(t, input, &enc, &targets, len)?;
            let mask = vec![true; len];
            let lm = lm_loss(t, tf.logits, &targets, &mask, len as f64)?;
            match tf.gates {
                Some(g) => {
                    let d = dgp_loss(t, g, len as f64);
                    let d = t.scale(d, lambda);
                    t.add(lm, d)
                }
                None => Ok(lm),
            }
        },
        GradCheckConfig { coords_per_param, ..Default::default() },
    )
    .unwrap();
    model.store = store;
    report
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn log_softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Metric values on toy corpora next to closed forms worked out by hand
/// from clipped n-gram counts, LCS lengths and set sizes.
pub fn metric_oracle_cases() -> Vec<(&'static str, f64, f64)> {
    use g2t_core::eval::{bleu, chrf_pp, distinct_n, rouge_l, Smoothing};
    let toy_h = ["the cat sat on the mat", "a dog runs"];
    let toy_r = ["the cat is on the mat", "the dog runs fast"];
    // clipped matches / hypothesis n-grams: 7/9, 4/7, 1/5, 0/3; lengths 9 vs 10
    let smoothed = 100.0
        * (1.0f64 - 10.0 / 9.0).exp()
        * (((7.0f64 / 9.0).ln() + (4.0f64 / 7.0).ln() + (1.0f64 / 5.0).ln() + (0.1f64 / 3.0).ln()) / 4.0).exp();
    // 5/6, 3/5, 2/4, 1/3 with equal lengths
    let single = 100.0 * (1.0f64 / 12.0).powf(0.25);
    // char 1-grams 2/3 vs 2/2, char 2-grams 1/2 vs 1/1, word unigrams 1/2 vs 1/1
    let chrf = 100.0 * 25.0 / 29.0;
    // LCS 3 of 4 vs 3 (F = 6/7) and LCS 1 of 2 vs 2 (F = 1/2)
    let rouge = 100.0 * 19.0 / 28.0;
    vec![
        ("bleu two-sentence smoothed", bleu(&toy_h, &toy_r, Smoothing::Epsilon(0.1)).unwrap(), smoothed),
        ("bleu two-sentence unsmoothed", bleu(&toy_h, &toy_r, Smoothing::None).unwrap(), 0.0),
        ("bleu single sentence", bleu(&["the cat sat on the mat"], &["the cat sat on a mat"], Smoothing::None).unwrap(), single),
        ("bleu identical", bleu(&toy_r, &toy_r, Smoothing::None).unwrap(), 100.0),
        ("bleu no unigram overlap", bleu(&["x y z w"], &["a b c d"], Smoothing::default()).unwrap(), 0.0),
        ("chrf++ toy pair", chrf_pp(&["ab c"], &["ab"]).unwrap(), chrf),
        ("chrf++ identical", chrf_pp(&toy_h, &toy_h).unwrap(), 100.0),
        ("chrf++ disjoint alphabets", chrf_pp(&["abc def"], &["xyz uvw"]).unwrap(), 0.0),
        ("rouge-l two pairs", rouge_l(&["a b c d", "x y"], &["a c d", "y x"]).unwrap(), rouge),
        ("rouge-l no common token", rouge_l(&["a b"], &["c d"]).unwrap(), 0.0),
        ("distinct-1", distinct_n(&["a b a", "b a c"], 1), 0.5),
        ("distinct-2", distinct_n(&["a b a", "b a c"], 2), 0.75),
        ("distinct-1 repeated token", distinct_n(&["a a a", "a"], 1), 0.25),
    ]
}

pub const METRIC_TOL: f64 = 1e-9;
