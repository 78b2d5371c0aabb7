//! Structural properties of the full model: reduction to a plain encoder,
//! curriculum-mixing guarantees, loss accounting, and serialization.

mod common;

use bilctc_core::data::{generate, Sample, SyntheticTaskSpec};
use bilctc_core::model::{
    average_checkpoints, BilCtcModel, Checkpoint, ClmMode, HeadKind, LossOptions, ModelSpec, Tap,
    Topology,
};
use bilctc_core::nn::layers::{encoder_layer, linear, sinusoidal_position_encoding};
use bilctc_core::nn::Graph;
use common::*;
use rand::Rng;

fn plain_spec() -> ModelSpec {
    ModelSpec {
        topology: Topology::Synchronous { layers: 3 },
        decoder_layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        taps: Vec::new(),
        alpha: 0.0,
        beta: 0.0,
        pae_ctc: false,
        pae_xctc: false,
        dropout: 0.0,
        ..Default::default()
    }
}

#[test]
fn no_taps_no_heads_reduces_to_plain_encoder() {
    let spec = plain_spec();
    let model = BilCtcModel::new(spec.clone(), 7).unwrap();
    let sample = &generate(&SyntheticTaskSpec::default(), 1).unwrap()[0];
    let features = sample.feature_matrix();
    let encoded = model.encode_eval(&features).unwrap();
    assert!(encoded.ctc_log_probs.is_none());
    assert!(encoded.xctc_log_probs.is_none());
    assert!(encoded.tap_log_probs.is_empty());

    // rebuild the same stack by hand from the model's parameters
    let mut g = Graph::new(false);
    let mut rng = seeded(0);
    let input = g.input(features);
    let stacked = g.pair_stack(input);
    let mut x = linear(&mut g, model.store(), "frontend.proj", stacked).unwrap();
    let t = g.shape(x).0;
    let pe = g.constant(sinusoidal_position_encoding(t, spec.hidden));
    x = g.add(x, pe);
    x = g.dropout(x, 0.0, &mut rng);
    for i in 0..3 {
        x = encoder_layer(
            &mut g,
            model.store(),
            &format!("enc.{i}"),
            x,
            spec.heads,
            0.0,
            &mut rng,
        )
        .unwrap();
    }
    let manual = g.value(x);
    assert_eq!(encoded.states.shape(), manual.shape());
    for (a, b) in encoded.states.iter().zip(manual.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

fn clm_spec() -> ModelSpec {
    ModelSpec {
        topology: Topology::Synchronous { layers: 3 },
        decoder_layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        taps: vec![Tap {
            layer: 1,
            kind: HeadKind::Xctc,
        }],
        clm_ratio: 1.0,
        dropout: 0.0,
        ..Default::default()
    }
}

/// With dropout off, the training forward pass sees the same tap
/// distribution as evaluation, so curriculum mixing at ratio 1 must replace
/// exactly the frames where the tap argmax disagrees with the forced
/// alignment of the final head.
#[test]
fn clm_replaces_exactly_the_wrong_frames() {
    let spec = clm_spec();
    let model = BilCtcModel::new(spec, 8).unwrap();
    let task = SyntheticTaskSpec {
        min_len: 3,
        max_len: 5,
        ..Default::default()
    };
    let samples = generate(&task, 8).unwrap();
    let mut rng = seeded(9);
    for sample in &samples {
        let Some(aligned) = model.xctc_alignment(sample).unwrap() else {
            continue;
        };
        let out = model
            .total_loss(
                std::slice::from_ref(sample),
                &LossOptions {
                    training: true,
                    label_smoothing: 0.1,
                    clm: ClmMode::Auto,
                },
                &mut rng,
            )
            .unwrap();
        let encoded = model.encode_eval(&sample.feature_matrix()).unwrap();
        let (_, _, tap_lp) = &encoded.tap_log_probs[0];
        let plan = &out.clm_plan[0];
        let mut replaced_frames: Vec<usize> = plan.iter().map(|&(_, f, _)| f).collect();
        replaced_frames.sort_unstable();
        let mut wrong_frames = Vec::new();
        for (frame, row) in tap_lp.rows().into_iter().enumerate() {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred != aligned[frame] {
                wrong_frames.push(frame);
            }
        }
        assert_eq!(replaced_frames, wrong_frames, "sample {}", sample.id);
        for &(_, frame, class) in plan {
            assert_eq!(class, aligned[frame], "replacement writes the alignment");
        }
    }
}

#[test]
fn clm_off_matches_eval_loss_reproducibly() {
    let spec = clm_spec();
    let model = BilCtcModel::new(spec, 10).unwrap();
    let samples = generate(&SyntheticTaskSpec::default(), 4).unwrap();
    let opts = LossOptions {
        training: false,
        label_smoothing: 0.1,
        clm: ClmMode::Off,
    };
    let a = model
        .total_loss(&samples, &opts, &mut seeded(1))
        .unwrap();
    let b = model
        .total_loss(&samples, &opts, &mut seeded(2))
        .unwrap();
    assert_eq!(a.breakdown.total.to_bits(), b.breakdown.total.to_bits());
    assert!(a.grads.is_none());
    assert!(a.clm_plan.iter().all(|p| p.is_empty()));
}

#[test]
fn loss_breakdown_recombines_under_default_weights() {
    let spec = ModelSpec {
        topology: Topology::Synchronous { layers: 4 },
        decoder_layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        taps: vec![
            Tap {
                layer: 2,
                kind: HeadKind::Ctc,
            },
            Tap {
                layer: 3,
                kind: HeadKind::Xctc,
            },
        ],
        dropout: 0.0,
        ..Default::default()
    };
    assert_eq!(spec.alpha, 0.2);
    assert_eq!(spec.beta, 0.1);
    assert_eq!(spec.inter_weight_factor, 0.5);
    let model = BilCtcModel::new(spec.clone(), 11).unwrap();
    let samples = generate(&SyntheticTaskSpec::default(), 4).unwrap();
    let out = model
        .total_loss(&samples, &LossOptions::default(), &mut seeded(3))
        .unwrap();
    let b = &out.breakdown;
    assert!(b.ctc_final.is_some());
    assert!(b.xctc_final.is_some());
    assert_eq!(b.inter_ctc.len(), 1);
    assert_eq!(b.inter_xctc.len(), 1);
    assert!((b.total - b.recombine(&spec)).abs() < 1e-6);
}

#[test]
fn topologies_share_loss_machinery() {
    let sync = ModelSpec {
        topology: Topology::Synchronous { layers: 4 },
        decoder_layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        taps: vec![Tap {
            layer: 3,
            kind: HeadKind::Xctc,
        }],
        dropout: 0.0,
        ..Default::default()
    };
    let prog = ModelSpec {
        topology: Topology::Progressive {
            acoustic_layers: 2,
            textual_layers: 2,
        },
        taps: vec![Tap {
            layer: 3,
            kind: HeadKind::Xctc,
        }],
        ..sync.clone()
    };
    let samples = generate(&SyntheticTaskSpec::default(), 3).unwrap();
    for spec in [sync, prog] {
        let model = BilCtcModel::new(spec, 12).unwrap();
        let out = model
            .total_loss(&samples, &LossOptions::default(), &mut seeded(4))
            .unwrap();
        assert!(out.breakdown.total.is_finite());
        assert!(out.grads.is_some());
    }
}

#[test]
fn checkpoint_round_trip_preserves_encoder_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = clm_spec();
    let model = BilCtcModel::new(spec, 13).unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::from_model(&model, 5, 1.25).save(&path).unwrap();
    let restored = BilCtcModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let sample = &generate(&SyntheticTaskSpec::default(), 1).unwrap()[0];
    let a = model.encode_eval(&sample.feature_matrix()).unwrap();
    let b = restored.encode_eval(&sample.feature_matrix()).unwrap();
    for (x, y) in a.states.iter().zip(b.states.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn checkpoint_averaging_is_parameter_mean() {
    let dir = tempfile::tempdir().unwrap();
    let spec = plain_spec();
    let mut paths = Vec::new();
    let mut models = Vec::new();
    for (i, seed) in [21u64, 22, 23].iter().enumerate() {
        let m = BilCtcModel::new(spec.clone(), *seed).unwrap();
        let p = dir.path().join(format!("c{i}.json"));
        Checkpoint::from_model(&m, i as u64, i as f64).save(&p).unwrap();
        paths.push(p);
        models.push(m);
    }
    let avg = average_checkpoints(&paths, 3).unwrap();
    let avg_model = BilCtcModel::from_checkpoint(&avg).unwrap();
    for name in models[0].store().names() {
        let want = (models[0].store().get(name).unwrap()
            + models[1].store().get(name).unwrap()
            + models[2].store().get(name).unwrap())
            / 3.0;
        let got = avg_model.store().get(name).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15, "param {name}");
        }
    }
}

#[test]
fn wer_matches_independent_dp_on_random_pairs() {
    let mut rng = seeded(30);
    for _ in 0..300 {
        let a: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(1..4)).collect();
        let b: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(1..4)).collect();
        assert_eq!(
            bilctc_core::metrics::edit_distance(&a, &b),
            oracle_edit_distance(&a, &b)
        );
    }
}

#[test]
fn synthetic_translation_matches_independent_transform() {
    let task = SyntheticTaskSpec::default();
    let samples: Vec<Sample> = generate(&task, 20).unwrap();
    for s in &samples {
        let want = oracle_translate(
            &s.transcript,
            task.window,
            task.substitution,
            task.easy_target,
            task.target_vocab,
        );
        assert_eq!(s.translation, want, "sample {}", s.id);
    }
}
