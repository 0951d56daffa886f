mod common;

use common::oracles::{mat, plain_transformer, ring_edges};
use common::{max_abs_diff, random_tensor, tiny_model};
use g2t_core::encoder::{Encoder, RelationalNeighborhoods};
use g2t_core::graph::{Edge, TokenGraph};
use g2t_core::model::layers::{residual, Builder};
use g2t_core::model::{GraphInput, Model, Variant};
use g2t_core::numerics::gradcheck::{finite_diff_check, GradCheckConfig};
use g2t_core::numerics::params::ParamStore;
use g2t_core::numerics::tape::Tape;
use g2t_core::numerics::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;
const HEADS: usize = 2;

fn encoder(layers: usize, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(&mut Builder { store: &mut store, rng: &mut rng }, layers, DIM, HEADS, 12, 6).unwrap();
    (store, enc)
}

#[test]
fn zero_layer_encoder_returns_its_input() {
    let (store, enc) = encoder(0, 1);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), 5, DIM);
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let out = enc.forward(&mut t, xv, &[true; 5], &RelationalNeighborhoods::new(5, &ring_edges(5))).unwrap();
    assert_eq!(t.value(out), &x);
}

#[test]
fn zeroed_adapters_reduce_to_a_plain_transformer() {
    let (mut store, enc) = encoder(2, 3);
    for b in &enc.blocks {
        store.get_mut(b.adapter.output.weight).tensor.data_mut().fill(0.0);
    }
    let n = 6;
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), n, DIM);
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let out = enc.forward(&mut t, xv, &[true; 6], &RelationalNeighborhoods::new(n, &ring_edges(n))).unwrap();
    let got = t.value(out).clone();

    let mut h = xv;
    for b in &enc.blocks {
        h = residual(&mut t, &b.attn_norm, h, |t, v| b.attn.forward(t, v, v, None)).unwrap();
        h = residual(&mut t, &b.ffn_norm, h, |t, v| b.ffn.forward(t, v)).unwrap();
    }
    assert_eq!(&got, t.value(h), "zeroed adapter must be an exact identity");

    let want = plain_transformer(&store, &enc, HEADS, &mat(&x));
    let diff = mat(&got).iter().flatten().zip(want.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-10, "{diff}");
}

fn relabel(g: &TokenGraph, perm: &[usize]) -> TokenGraph {
    let n = g.num_nodes();
    let mut out = g.clone();
    for old in 0..n {
        out.tokens[perm[old]] = g.tokens[old];
        out.token_owner[perm[old]] = g.token_owner[old];
        out.span_pos[perm[old]] = g.span_pos[old];
    }
    out.edges = g.edges.iter().map(|e| Edge::new(perm[e.src], perm[e.dst], e.rel)).collect();
    out
}

fn encode_rows(model: &Model, g: &TokenGraph) -> Tensor {
    let mut t = Tape::new(&model.store);
    let enc = model.encode(&mut t, GraphInput::new(g)).unwrap();
    t.value(enc.nodes).clone()
}

#[test]
fn encoding_commutes_with_node_relabeling() {
    let (model, ex) = tiny_model(Variant::Baseline);
    let g = &ex.token_graph;
    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let a = encode_rows(&model, g);
    let b = encode_rows(&model, &relabel(g, &perm));
    let mut moved = vec![0.0; a.numel()];
    let d = a.cols();
    for old in 0..g.num_nodes() {
        moved[perm[old] * d..(perm[old] + 1) * d].copy_from_slice(a.row_slice(old));
    }
    let moved = Tensor::matrix(a.rows(), d, moved).unwrap();
    assert!(max_abs_diff(&moved, &b) <= 1e-12);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (mut model, ex) = tiny_model(Variant::Baseline);
    let probe = random_tensor(&mut ChaCha8Rng::seed_from_u64(6), ex.token_graph.num_nodes(), 8);
    let mut store = std::mem::take(&mut model.store);
    let report = finite_diff_check(
        &mut store,
        |t| {
            let enc = model.encode(t, GraphInput::new(&ex.token_graph))?;
            let w = t.constant(probe.clone());
            let p = t.mul(enc.nodes, w)?;
            Ok(t.sum(p))
        },
        GradCheckConfig { coords_per_param: 40, ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
}
