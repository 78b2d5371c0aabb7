//! Finite-difference gradient harness shared by the gradient suite and the
//! acceptance suite.

use bilctc_core::ctc::ctc_gradient_wrt_logits;
use bilctc_core::data::{generate, SyntheticTaskSpec};
use bilctc_core::model::{BilCtcModel, ClmMode, HeadKind, LossOptions, ModelSpec, Tap, Topology};
use bilctc_core::nn::graph::Graph;
use bilctc_core::nn::layers::{
    decoder_layer, encoder_layer, layer_norm, linear, multi_head_attention, position_wise_ffn,
    register_decoder_layer, register_encoder_layer, register_ffn, register_layer_norm,
    register_linear, register_mha,
};
use bilctc_core::nn::{Init, ParameterStore, TensorId};
use bilctc_core::LogProbMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{close_rel, random_target, seeded};

pub const EPS: f64 = 1e-5;
pub const REL: f64 = 1e-3;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Finite differences over every parameter of a block. The closure builds
/// the block and returns a 1x1 loss node.
pub fn check_block(
    store: &mut ParameterStore,
    forward: &dyn Fn(&mut Graph, &ParameterStore) -> TensorId,
) {
    let grads = {
        let mut g = Graph::new(true);
        let loss = forward(&mut g, store);
        g.backward(loss).unwrap();
        g.param_grads()
    };
    let eval = |store: &ParameterStore| -> f64 {
        let mut g = Graph::new(false);
        let loss = forward(&mut g, store);
        g.scalar(loss)
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let shape = store.get(&name).unwrap().dim();
        let g = &grads[&name];
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.get(&name).unwrap()[[r, c]];
                let mut v = store.get(&name).unwrap().clone();
                v[[r, c]] = orig + EPS;
                store.set_value(&name, &v).unwrap();
                let up = eval(store);
                v[[r, c]] = orig - EPS;
                store.set_value(&name, &v).unwrap();
                let down = eval(store);
                v[[r, c]] = orig;
                store.set_value(&name, &v).unwrap();
                let fd = (up - down) / (2.0 * EPS);
                assert!(
                    close_rel(g[[r, c]], fd, REL),
                    "{name}[{r},{c}]: analytic {} vs fd {fd}",
                    g[[r, c]]
                );
            }
        }
    }
}

/// Reduce a matrix node to a 1x1 node by summing all entries through the
/// graph (keeps the gradient path intact).
pub fn sum_all(g: &mut Graph, id: TensorId) -> TensorId {
    let (rows, cols) = g.shape(id);
    let ones_r = g.input(Array2::ones((1, rows)));
    let ones_c = g.input(Array2::ones((cols, 1)));
    let a = g.matmul(ones_r, id);
    g.matmul(a, ones_c)
}

pub fn check_ctc_gradient() {
    let mut rng = seeded(21);
    for _ in 0..10 {
        let frames = rng.gen_range(2..=5);
        let vocab = rng.gen_range(1..=3);
        let mut logits = random_matrix(&mut rng, frames, vocab + 1);
        let target = random_target(&mut rng, frames, vocab);
        if target.is_empty() {
            continue;
        }
        let grad = ctc_gradient_wrt_logits(&logits, &target).unwrap();
        let loss = |l: &Array2<f64>| -> f64 {
            -bilctc_core::ctc::ctc_log_likelihood(&LogProbMatrix::from_logits(l).unwrap(), &target)
                .unwrap()
        };
        for t in 0..frames {
            for c in 0..=vocab {
                let orig = logits[[t, c]];
                logits[[t, c]] = orig + EPS;
                let up = loss(&logits);
                logits[[t, c]] = orig - EPS;
                let down = loss(&logits);
                logits[[t, c]] = orig;
                let fd = (up - down) / (2.0 * EPS);
                assert!(
                    close_rel(grad[[t, c]], fd, REL),
                    "ctc grad [{t},{c}]: {} vs fd {fd}",
                    grad[[t, c]]
                );
            }
        }
    }
}

pub fn check_label_smoothed_ce() {
    let mut rng = seeded(22);
    let mut logits = random_matrix(&mut rng, 4, 5);
    let targets = [1usize, 0, 4, 2];
    let analytic = {
        let mut g = Graph::new(true);
        let x = g.param("x", &logits);
        let loss = g.label_smoothed_ce(x, &targets, 0.1).unwrap();
        g.backward(loss).unwrap();
        g.param_grads()["x"].clone()
    };
    let eval = |l: &Array2<f64>| -> f64 {
        let mut g = Graph::new(false);
        let x = g.input(l.clone());
        let loss = g.label_smoothed_ce(x, &targets, 0.1).unwrap();
        g.scalar(loss)
    };
    for i in 0..4 {
        for j in 0..5 {
            let orig = logits[[i, j]];
            logits[[i, j]] = orig + EPS;
            let up = eval(&logits);
            logits[[i, j]] = orig - EPS;
            let down = eval(&logits);
            logits[[i, j]] = orig;
            let fd = (up - down) / (2.0 * EPS);
            assert!(close_rel(analytic[[i, j]], fd, REL));
        }
    }
}

pub fn check_linear() {
    let mut rng = seeded(23);
    let mut store = ParameterStore::new();
    register_linear(&mut store, "lin", 3, 4, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 5, 3);
    check_block(&mut store, &|g, s| {
        let input = g.input(x.clone());
        let y = linear(g, s, "lin", input).unwrap();
        sum_all(g, y)
    });
}

pub fn check_layer_norm() {
    let mut rng = seeded(24);
    let mut store = ParameterStore::new();
    register_layer_norm(&mut store, "ln", 6, &mut rng).unwrap();
    // non-trivial gain so the x-hat term matters
    let gain = random_matrix(&mut rng, 1, 6);
    store.set_value("ln.g", &gain).unwrap();
    let x = random_matrix(&mut rng, 4, 6);
    let weights = random_matrix(&mut rng, 4, 6);
    check_block(&mut store, &|g, s| {
        let input = g.input(x.clone());
        let y = layer_norm(g, s, "ln", input).unwrap();
        // weighted sum exercises off-diagonal jacobian terms
        let w = g.input(weights.clone());
        let wt = g.transpose(w);
        let prod = g.matmul(y, wt);
        sum_all(g, prod)
    });
}

pub fn check_attention() {
    let mut rng = seeded(25);
    let mut store = ParameterStore::new();
    register_mha(&mut store, "attn", 4, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 3, 4);
    for causal in [false, true] {
        check_block(&mut store, &|g, s| {
            let input = g.input(x.clone());
            let y = multi_head_attention(g, s, "attn", input, input, 2, causal).unwrap();
            sum_all(g, y)
        });
    }
}

pub fn check_ffn() {
    let mut rng = seeded(26);
    let mut store = ParameterStore::new();
    register_ffn(&mut store, "ffn", 4, 8, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 3, 4);
    check_block(&mut store, &|g, s| {
        let input = g.input(x.clone());
        let y = position_wise_ffn(g, s, "ffn", input).unwrap();
        sum_all(g, y)
    });
}

pub fn check_encoder_layer() {
    let mut rng = seeded(27);
    let mut store = ParameterStore::new();
    register_encoder_layer(&mut store, "enc", 4, 8, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 3, 4);
    check_block(&mut store, &|g, s| {
        let input = g.input(x.clone());
        let mut r = seeded(0);
        let y = encoder_layer(g, s, "enc", input, 2, 0.0, &mut r).unwrap();
        sum_all(g, y)
    });
}

pub fn check_decoder_layer() {
    let mut rng = seeded(28);
    let mut store = ParameterStore::new();
    register_decoder_layer(&mut store, "dec", 4, 8, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 3, 4);
    let memory = random_matrix(&mut rng, 5, 4);
    check_block(&mut store, &|g, s| {
        let input = g.input(x.clone());
        let mem = g.input(memory.clone());
        let mut r = seeded(0);
        let y = decoder_layer(g, s, "dec", input, mem, 2, 0.0, &mut r).unwrap();
        sum_all(g, y)
    });
}

pub fn check_embedding() {
    let mut rng = seeded(29);
    let mut store = ParameterStore::new();
    store.add("emb", 5, 4, Init::Xavier, &mut rng).unwrap();
    let tokens = vec![0usize, 3, 3, 1];
    check_block(&mut store, &|g, s| {
        let w = g.param("emb", s.get("emb").unwrap());
        let y = g.embedding(w, &tokens).unwrap();
        sum_all(g, y)
    });
}

fn full_model_spec() -> ModelSpec {
    ModelSpec {
        topology: Topology::Synchronous { layers: 3 },
        decoder_layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        feature_dim: 8,
        source_vocab: 6,
        target_vocab: 6,
        taps: vec![
            Tap {
                layer: 1,
                kind: HeadKind::Ctc,
            },
            Tap {
                layer: 2,
                kind: HeadKind::Xctc,
            },
        ],
        alpha: 0.2,
        beta: 0.1,
        inter_weight_factor: 0.5,
        pae_ctc: true,
        pae_xctc: true,
        clm_ratio: 1.0,
        dropout: 0.0,
        shared_tap_projection: true,
    }
}

/// Full-model loss with prediction-aware encoding and curriculum mixing
/// active, probed at parameter corners plus random entries.
pub fn check_full_model() {
    let spec = full_model_spec();
    let mut model = BilCtcModel::new(spec, 31).unwrap();
    let task = SyntheticTaskSpec {
        min_len: 3,
        max_len: 4,
        ..Default::default()
    };
    let batch = generate(&task, 2).unwrap();

    // freeze curriculum-mixing decisions so the loss is differentiable at
    // this point in parameter space
    let mut rng = seeded(32);
    let auto = model
        .total_loss(
            &batch,
            &LossOptions {
                training: true,
                label_smoothing: 0.1,
                clm: ClmMode::Auto,
            },
            &mut rng,
        )
        .unwrap();
    assert!(
        auto.clm_plan.iter().any(|p| !p.is_empty()),
        "expected curriculum mixing to fire at ratio 1.0"
    );
    let fixed = LossOptions {
        training: true,
        label_smoothing: 0.1,
        clm: ClmMode::Fixed(auto.clm_plan.clone()),
    };
    let analytic = model
        .total_loss(&batch, &fixed, &mut seeded(0))
        .unwrap()
        .grads
        .unwrap();

    let eval_opts = LossOptions {
        training: false,
        label_smoothing: 0.1,
        clm: ClmMode::Fixed(auto.clm_plan.clone()),
    };
    let names: Vec<String> = model.store().names().map(str::to_string).collect();
    let mut probe_rng = seeded(33);
    let mut checked = 0usize;
    for name in names {
        let shape = model.store().get(&name).unwrap().dim();
        let mut probes = vec![(0, 0), (shape.0 - 1, shape.1 - 1)];
        for _ in 0..2 {
            probes.push((
                probe_rng.gen_range(0..shape.0),
                probe_rng.gen_range(0..shape.1),
            ));
        }
        probes.dedup();
        for (r, c) in probes {
            let orig = model.store().get(&name).unwrap()[[r, c]];
            let mut v = model.store().get(&name).unwrap().clone();
            v[[r, c]] = orig + EPS;
            model.store_mut().set_value(&name, &v).unwrap();
            let up = model
                .total_loss(&batch, &eval_opts, &mut seeded(0))
                .unwrap()
                .breakdown
                .total;
            v[[r, c]] = orig - EPS;
            model.store_mut().set_value(&name, &v).unwrap();
            let down = model
                .total_loss(&batch, &eval_opts, &mut seeded(0))
                .unwrap()
                .breakdown
                .total;
            v[[r, c]] = orig;
            model.store_mut().set_value(&name, &v).unwrap();
            let fd = (up - down) / (2.0 * EPS);
            let a = analytic[&name][[r, c]];
            assert!(
                close_rel(a, fd, REL),
                "{name}[{r},{c}]: analytic {a} vs fd {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}

/// Every check in the gradient suite, in one call.
pub fn run_full_suite() {
    check_ctc_gradient();
    check_label_smoothed_ce();
    check_linear();
    check_layer_norm();
    check_attention();
    check_ffn();
    check_encoder_layer();
    check_decoder_layer();
    check_embedding();
    check_full_model();
}
