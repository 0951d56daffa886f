mod common;

use std::rc::Rc;

use common::oracles::naive_rgat;
use common::*;
use g2t_core::decoder::JointLayout;
use g2t_core::graph::{build_joint_graph, EdgeRel};
use g2t_core::model::{GraphInput, Model, Variant};
use g2t_core::numerics::tape::Tape;
use g2t_core::numerics::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL_VARIANTS: [Variant; 3] = [Variant::Baseline, Variant::Saca, Variant::SacaDgp];

#[test]
fn inference_session_matches_teacher_forcing() {
    for variant in ALL_VARIANTS {
        let (model, ex) = tiny_model(variant);
        let mut t = Tape::new(&model.store);
        let input = GraphInput::new(&ex.token_graph);
        let enc = model.encode(&mut t, input).unwrap();
        let tf = model.teacher_forced(&mut t, input, &enc, &ex.target_ids, ex.target_ids.len()).unwrap();
        let expected = log_softmax_rows(t.value(tf.logits));
        let gates = tf.gates.map(|g| t.value(g).data().to_vec());
        let session = model.session(&ex.token_graph).unwrap();
        let n = ex.token_graph.num_nodes();
        let mut prefix = vec![g2t_core::ingest::vocab::BOS];
        for (step, want) in expected.iter().enumerate() {
            let out = session.step(&prefix).unwrap();
            let err = out.log_probs.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{variant:?} step {step}: {err}");
            if let Some(g) = &gates {
                let got = out.gates.as_ref().unwrap();
                for i in 0..n {
                    assert!((got[i] - g[step * n + i]).abs() < 1e-12);
                }
            }
            prefix.push(ex.target_ids[step]);
        }
    }
}

#[test]
fn vectorized_context_matches_per_step_loop() {
    let (model, ex) = tiny_model(Variant::SacaDgp);
    let saca = model.saca.as_ref().unwrap();
    let dgp = model.dgp.as_ref().unwrap();
    let mut t = Tape::new(&model.store);
    let input = GraphInput::new(&ex.token_graph);
    let enc = model.encode(&mut t, input).unwrap();
    let tf = model.teacher_forced(&mut t, input, &enc, &ex.target_ids, ex.target_ids.len()).unwrap();
    let batched = t.value(tf.context.unwrap()).clone();
    let layout = JointLayout::new(&build_joint_graph(&ex.token_graph));
    for step in 0..ex.target_ids.len() {
        let state = t.gather_rows(tf.states, Rc::new(vec![step])).unwrap();
        let gates = dgp.forward(&mut t, enc.nodes, state).unwrap();
        let ctx = saca.forward(&mut t, enc.nodes, state, &layout, Some(gates)).unwrap();
        for (a, b) in t.value(ctx).data().iter().zip(batched.row_slice(step)) {
            assert!((a - b).abs() <= 1e-10, "step {step}");
        }
    }
}

#[test]
fn unit_gates_are_bitwise_ungated() {
    let (model, ex) = tiny_model(Variant::SacaDgp);
    let saca = model.saca.as_ref().unwrap();
    let mut t = Tape::new(&model.store);
    let input = GraphInput::new(&ex.token_graph);
    let enc = model.encode(&mut t, input).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let states = t.constant(random_tensor(&mut rng, 3, 8));
    let layout = JointLayout::new(&build_joint_graph(&ex.token_graph));
    let n = ex.token_graph.num_nodes();
    let ones = t.constant(Tensor::full(&[3 * n, 1], 1.0));
    let gated = saca.forward(&mut t, enc.nodes, states, &layout, Some(ones)).unwrap();
    let plain = saca.forward(&mut t, enc.nodes, states, &layout, None).unwrap();
    assert_eq!(t.value(gated), t.value(plain));
}

#[test]
fn closed_gate_removes_node_influence() {
    for layers in [1, 2] {
        let mut cfg = tiny_config(Variant::SacaDgp);
        cfg.saca_layers = layers;
        let (vocab, ex) = encode_one(&five_node_raw());
        let mut model = Model::new(&cfg, vocab.len()).unwrap();
        model.store.perturb(&mut ChaCha8Rng::seed_from_u64(3), 0.1);
        let saca = model.saca.as_ref().unwrap();
        let n = ex.token_graph.num_nodes();
        let layout = JointLayout::new(&build_joint_graph(&ex.token_graph));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nodes = random_tensor(&mut rng, n, 8);
        let state = random_tensor(&mut rng, 1, 8);
        let mut gates = vec![0.7; n];
        gates[2] = 0.0;
        let run = |nodes: &Tensor| {
            let mut t = Tape::new(&model.store);
            let nv = t.constant(nodes.clone());
            let sv = t.constant(state.clone());
            let gv = t.constant(Tensor::column(&gates));
            let c = saca.forward(&mut t, nv, sv, &layout, Some(gv)).unwrap();
            t.value(c).clone()
        };
        let before = run(&nodes);
        let mut perturbed = nodes.clone();
        for c in 0..8 {
            perturbed.data_mut()[2 * 8 + c] += 5.0;
        }
        assert_eq!(before, run(&perturbed), "layers = {layers}");
        let mut other = nodes.clone();
        other.data_mut()[8] += 5.0;
        assert_ne!(before, run(&other));
    }
}

#[test]
fn rgat_layer_matches_naive_loop() {
    let (model, ex) = tiny_model(Variant::Saca);
    let layer = &model.saca.as_ref().unwrap().layers[0];
    let joint = build_joint_graph(&ex.token_graph);
    let layout = JointLayout::new(&joint);
    let edges = layout.replicated(1);
    let edge_list: Vec<(usize, usize, usize)> = joint.edges().map(|e| (e.src, e.dst, e.rel.index())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, joint.num_nodes(), 6);
    let node_gates: Vec<f64> = (0..joint.num_nodes()).map(|i| if i == joint.context_index { 1.0 } else { 0.2 + 0.1 * (i % 7) as f64 }).collect();
    let s = &model.store;
    for gated in [false, true] {
        let mut t = Tape::new(s);
        let xv = t.constant(x.clone());
        let eg = if gated {
            Some(t.constant(Tensor::column(&edges.src.iter().map(|&u| node_gates[u]).collect::<Vec<_>>())))
        } else {
            None
        };
        let out = layer.forward(&mut t, xv, &edges, eg).unwrap();
        let alpha = layer.attention_weights(&mut t, xv, &edges, eg).unwrap();
        let (want, want_alpha) = naive_rgat(
            &x,
            s.tensor(layer.query.weight),
            s.tensor(layer.key.weight),
            s.tensor(layer.value.weight),
            s.tensor(layer.relation),
            &edge_list,
            gated.then_some(node_gates.as_slice()),
        );
        assert!(max_abs_diff(t.value(out), &want) <= 1e-10);
        assert!(max_abs_diff(t.value(alpha), &Tensor::column(&want_alpha)) <= 1e-10);
    }
}

#[test]
fn single_neighbor_gets_full_weight() {
    let (model, _) = tiny_model(Variant::Saca);
    let layer = &model.saca.as_ref().unwrap().layers[0];
    let edges = g2t_core::decoder::EdgeSet::new(
        vec![0, 1],
        vec![1, 1],
        vec![EdgeRel::Default.index(), EdgeRel::SelfLoop.index()],
        g2t_core::numerics::tape::Segments::new(vec![0, 1], 2),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new(&model.store);
    let x = t.constant(random_tensor(&mut rng, 2, 6));
    let g = t.constant(Tensor::column(&[0.01, 0.3]));
    let a = layer.attention_weights(&mut t, x, &edges, Some(g)).unwrap();
    assert_eq!(t.value(a).data(), &[1.0, 1.0]);
}

#[test]
fn future_targets_do_not_change_earlier_logits() {
    let (model, ex) = tiny_model(Variant::SacaDgp);
    let input = GraphInput::new(&ex.token_graph);
    let run = |targets: &[u32]| {
        let mut t = Tape::new(&model.store);
        let enc = model.encode(&mut t, input).unwrap();
        let tf = model.teacher_forced(&mut t, input, &enc, targets, targets.len()).unwrap();
        t.value(tf.logits).clone()
    };
    let base = run(&ex.target_ids);
    let mut changed = ex.target_ids.clone();
    changed[2] = 3;
    let other = run(&changed);
    let v = base.cols();
    // Logits at step t depend on targets before t only.
    assert_eq!(&base.data()[..3 * v], &other.data()[..3 * v]);
    assert_ne!(&base.data()[3 * v..], &other.data()[3 * v..]);
}

#[test]
fn padding_never_reaches_real_outputs() {
    let (mut model, ex) = tiny_model(Variant::SacaDgp);
    let len = ex.target_ids.len();
    let mut padded_targets = ex.target_ids.clone();
    padded_targets.extend([0, 0]);
    let run = |model: &Model, rows: usize, targets: &[u32]| {
        let input = GraphInput::padded(&ex.token_graph, rows);
        let mut t = Tape::new(&model.store);
        let enc = model.encode(&mut t, input).unwrap();
        let tf = model.teacher_forced(&mut t, input, &enc, targets, len).unwrap();
        (t.value(enc.nodes).clone(), t.value(tf.logits).clone())
    };
    let n = ex.token_graph.num_nodes();
    let (nodes, logits) = run(&model, n, &ex.target_ids);
    let (pn, pl) = run(&model, n + 3, &padded_targets);
    assert!(max_abs_diff(&nodes, &pn) < 1e-12);
    assert!(max_abs_diff(&logits, &pl) < 1e-12);
    let embed = model.embed;
    model.store.get_mut(embed).tensor.data_mut()[..8].iter_mut().for_each(|x| *x += 3.0);
    let (qn, ql) = run(&model, n + 3, &padded_targets);
    assert_eq!(pn, qn);
    assert_eq!(pl, ql);
}

#[test]
fn zero_context_reduces_head_to_baseline() {
    let (model, _) = tiny_model(Variant::Saca);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new(&model.store);
    let s = t.constant(random_tensor(&mut rng, 3, 8));
    let z = t.constant(Tensor::zeros(&[3, 8]));
    let with = model.head.forward(&mut t, s, Some(z)).unwrap();
    let without = model.head.forward(&mut t, s, None).unwrap();
    assert_eq!(t.value(with), t.value(without));
    assert_eq!(t.value(with).cols(), model.vocab_size);
}

#[test]
fn zero_layer_saca_is_projection_pair() {
    let mut cfg = tiny_config(Variant::Saca);
    cfg.saca_layers = 0;
    let (vocab, ex) = encode_one(&five_node_raw());
    let model = Model::new(&cfg, vocab.len()).unwrap();
    let saca = model.saca.as_ref().unwrap();
    let layout = JointLayout::new(&build_joint_graph(&ex.token_graph));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t = Tape::new(&model.store);
    let nodes = t.constant(random_tensor(&mut rng, ex.token_graph.num_nodes(), 8));
    let state = t.constant(random_tensor(&mut rng, 2, 8));
    let ctx = saca.forward(&mut t, nodes, state, &layout, None).unwrap();
    let p = saca.input.forward(&mut t, state).unwrap();
    let want = saca.output.forward(&mut t, p).unwrap();
    assert_eq!(t.value(ctx), t.value(want));
}

#[test]
fn context_is_invariant_to_node_relabeling() {
    let (model, ex) = tiny_model(Variant::SacaDgp);
    let saca = model.saca.as_ref().unwrap();
    let dgp = model.dgp.as_ref().unwrap();
    let g = &ex.token_graph;
    let n = g.num_nodes();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(13));
    assert!(perm.iter().enumerate().any(|(i, &p)| i != p));
    let mut pg = g.clone();
    for i in 0..n {
        pg.tokens[perm[i]] = g.tokens[i];
        pg.token_owner[perm[i]] = g.token_owner[i];
        pg.span_pos[perm[i]] = g.span_pos[i];
    }
    for e in &mut pg.edges {
        e.src = perm[e.src];
        e.dst = perm[e.dst];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let nodes = random_tensor(&mut rng, n, 8);
    let mut pnodes = Tensor::zeros(&[n, 8]);
    for i in 0..n {
        pnodes.data_mut()[perm[i] * 8..perm[i] * 8 + 8].copy_from_slice(nodes.row_slice(i));
    }
    let state = random_tensor(&mut rng, 2, 8);
    let run = |graph: &g2t_core::graph::TokenGraph, nodes: &Tensor| {
        let layout = JointLayout::new(&build_joint_graph(graph));
        let mut t = Tape::new(&model.store);
        let nv = t.constant(nodes.clone());
        let sv = t.constant(state.clone());
        let gates = dgp.forward(&mut t, nv, sv).unwrap();
        let c = saca.forward(&mut t, nv, sv, &layout, Some(gates)).unwrap();
        t.value(c).clone()
    };
    assert!(max_abs_diff(&run(g, &nodes), &run(&pg, &pnodes)) < 1e-12);
}

#[test]
fn gates_at_zero_parameters_are_one_half() {
    let (mut model, ex) = tiny_model(Variant::SacaDgp);
    let dgp = model.dgp.clone().unwrap();
    for id in [dgp.node.weight, dgp.state.weight, dgp.score.weight] {
        model.store.get_mut(id).tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new(&model.store);
    let nodes = t.constant(random_tensor(&mut rng, ex.token_graph.num_nodes(), 8));
    let state = t.constant(random_tensor(&mut rng, 3, 8));
    let g = dgp.forward(&mut t, nodes, state).unwrap();
    assert!(t.value(g).data().iter().all(|&x| x == 0.5));
}

#[test]
fn gate_two_dim_hand_computation() {
    let mut cfg = tiny_config(Variant::SacaDgp);
    cfg.model_dim = 2;
    cfg.heads = 1;
    cfg.saca_dim = 2;
    let model = {
        let mut m = Model::new(&cfg, 5).unwrap();
        let d = m.dgp.clone().unwrap();
        m.store.get_mut(d.node.weight).tensor.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
        m.store.get_mut(d.state.weight).tensor.data_mut().copy_from_slice(&[0.5, 0.0, 0.0, -1.0]);
        m.store.get_mut(d.score.weight).tensor.data_mut().copy_from_slice(&[1.0, -3.0]);
        m
    };
    let dgp = model.dgp.as_ref().unwrap();
    let mut t = Tape::new(&model.store);
    let node = t.constant(Tensor::row(&[0.2, 0.1]));
    let state = t.constant(Tensor::row(&[0.4, 0.3]));
    let g = dgp.forward(&mut t, node, state).unwrap();
    // pre = [0.2 + 0.2, 0.2 - 0.3] = [0.4, -0.1]
    let want = 1.0 / (1.0 + (-(0.4f64.tanh() - 3.0 * (-0.1f64).tanh())).exp());
    assert!((t.value(g).item() - want).abs() < 1e-15);
}

#[test]
fn added_parameter_count_is_closed_form() {
    let mut cfg = tiny_config(Variant::SacaDgp);
    cfg.saca_dim = 5;
    cfg.saca_layers = 3;
    let m = Model::new(&cfg, 11).unwrap();
    use g2t_core::numerics::params::ParamGroup;
    let (d, s, l) = (8, 5, 3);
    assert_eq!(m.num_params_in(ParamGroup::Saca), 2 * d * s + l * (3 * s * s + 3 * s));
    assert_eq!(m.num_params_in(ParamGroup::Dgp), 2 * d * s + s);
    let mut base_cfg = cfg.clone();
    Variant::Baseline.apply(&mut base_cfg);
    let base = Model::new(&base_cfg, 11).unwrap();
    assert_eq!(m.store.num_scalars() - base.store.num_scalars(), cfg.saca_param_count() + cfg.dgp_param_count());
}
