use super::*;
use crate::autodiff::{grad_check_with, GradCheckOptions};
use crate::corpus::{generate_example, CorpusConfig, Split};
use crate::metrics::pit_assign;

fn example(seed: u64, duration_s: f64) -> MixtureExample {
    let cfg = CorpusConfig {
        split: Split::Train,
        num_examples: 1,
        duration_s,
        seed,
        ..CorpusConfig::default()
    };
    generate_example(&cfg, 0).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        frame_len: 8,
        hop: 4,
        first_kernel_len: 8,
        gconv_layers: 2,
        gconv_channels: 3,
        bilstm_layers: 1,
        bilstm_hidden: 2,
        dnn_layers: 1,
        dnn_width: 4,
        ..ModelConfig::default()
    }
}

fn wave(len: usize, seed: u64) -> Waveform {
    let samples = (0..len)
        .map(|i| ((i as u64 * 31 + seed) as f64 * 0.173).sin() * 0.5)
        .collect();
    Waveform::new(samples, 8000).unwrap()
}

#[test]
fn desk_parameter_count_matches_shape_arithmetic() {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    // gconv1: two [16×1×80] kernels + two [16×1] biases; LN: 2×16
    let first = 2 * (16 * 80 + 16) + 32;
    // gconv2..5: two [16×16×1] kernels + biases, LN
    let later = 4 * (2 * (16 * 16 + 16) + 32);
    // per direction: [in×128] + [32×128] + [128]
    let lstm = 2 * (16 * 128 + 32 * 128 + 128) + 2 * (64 * 128 + 32 * 128 + 128);
    let dnn = (64 * 64 + 64) * 2;
    let head = 64 * 160 + 160;
    let expected = first + later + lstm + dnn + head;
    assert_eq!(expected, 61_024);
    assert_eq!(model.params().num_scalars(), expected);
    assert_eq!(ModelConfig::default().param_count(), expected);
}

#[test]
fn closed_form_count_holds_for_other_shapes() {
    for cfg in [
        tiny(),
        ModelConfig {
            gconv_kernel_len: 3,
            bilstm_layers: 0,
            dnn_layers: 3,
            num_sources: 3,
            ..tiny()
        },
    ] {
        let model = FurcaNetModel::build(cfg.clone()).unwrap();
        assert_eq!(model.params().num_scalars(), cfg.param_count());
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let b = FurcaNetModel::build(ModelConfig::default()).unwrap();
    assert_eq!(a.params().flat_values(), b.params().flat_values());
    let c = FurcaNetModel::build(ModelConfig {
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_ne!(a.params().flat_values(), c.params().flat_values());
}

#[test]
fn three_sources_widen_the_head() {
    let cfg = ModelConfig {
        num_sources: 3,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.head_width(), 240);
    let model = FurcaNetModel::build(cfg).unwrap();
    assert_eq!(model.params().value(model.head.b).shape(), &[240]);
}

#[test]
fn invalid_configs_are_rejected() {
    let cases = [
        ModelConfig {
            num_sources: 1,
            ..ModelConfig::default()
        },
        ModelConfig {
            first_kernel_len: 40,
            ..ModelConfig::default()
        },
        ModelConfig {
            gconv_kernel_len: 2,
            ..ModelConfig::default()
        },
        ModelConfig {
            hop: 81,
            ..ModelConfig::default()
        },
        ModelConfig {
            dnn_width: 0,
            ..ModelConfig::default()
        },
    ];
    for cfg in cases {
        assert!(matches!(
            FurcaNetModel::build(cfg),
            Err(ModelError::InvalidConfig(_))
        ));
    }
}

#[test]
fn outputs_cover_the_input_exactly() {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    for len in [80, 81, 200, 1234] {
        let outs = model.separate(&wave(len, 1)).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs
            .iter()
            .all(|o| o.len() == len && o.sample_rate_hz() == 8000));
    }
    assert!(matches!(
        model.separate(&wave(79, 1)),
        Err(ModelError::TooShort {
            len: 79,
            frame_len: 80
        })
    ));
}

#[test]
fn longer_input_adds_frames_without_new_parameters() {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let before = model.params().num_scalars();
    let count_frames = |len: usize| {
        let mut g = Graph::new();
        model.forward_utterance(&mut g, &wave(len, 2)).unwrap();
        let stage = &model.stages[0];
        let first = g.param(model.params(), stage.conv.w);
        assert_eq!(g.value(first).shape(), &[16, 1, 80]);
        model.config.geometry().num_frames(len)
    };
    assert_eq!(count_frames(400), 9);
    assert_eq!(count_frames(800), 19);
    assert_eq!(model.params().num_scalars(), before);
}

#[test]
fn zeroed_parameters_give_silent_outputs() {
    let mut model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        model.params_mut().value_mut(id).data_mut().fill(0.0);
    }
    for out in model.separate(&wave(500, 3)).unwrap() {
        assert!(out.samples().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn separation_is_deterministic() {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let x = wave(640, 4);
    assert_eq!(model.separate(&x).unwrap(), model.separate(&x).unwrap());
}

#[test]
fn cross_frame_kernels_keep_the_frame_count() {
    let model = FurcaNetModel::build(ModelConfig {
        gconv_kernel_len: 3,
        ..tiny()
    })
    .unwrap();
    let outs = model.separate(&wave(37, 5)).unwrap();
    assert!(outs.iter().all(|o| o.len() == 37));
}

#[test]
fn loss_matches_metrics_on_separated_outputs() {
    let mut model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    // Untrained outputs are quiet enough for the loss guard to matter.
    // SDR is scale-free, so louder outputs leave every value but the guard
    // effect unchanged.
    for id in [model.head.w, model.head.b] {
        model
            .params_mut()
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 300.0);
    }
    let ex = example(3, 0.25);
    let mut g = Graph::new();
    let res = model.loss_on_example(&mut g, &ex).unwrap();
    let pit = pit_assign(&ex.sources, &model.separate(&ex.mixture).unwrap()).unwrap();
    assert_eq!(res.permutation, pit.permutation);
    let diff = g.value(res.loss).item() + pit.mean_sdr_db;
    assert!(diff.abs() < 1e-9, "{diff} {pit:?}");
}

#[test]
fn loss_ignores_source_order() {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let ex = example(4, 0.25);
    let mut swapped = ex.clone();
    swapped.sources.reverse();
    let mut g = Graph::new();
    let a = model.loss_on_example(&mut g, &ex).unwrap();
    let b = model.loss_on_example(&mut g, &swapped).unwrap();
    assert_eq!(g.value(a.loss).item(), g.value(b.loss).item());
}

#[test]
fn loss_requires_matching_source_count() {
    let model = FurcaNetModel::build(ModelConfig {
        num_sources: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut g = Graph::new();
    assert!(matches!(
        model.loss_on_example(&mut g, &example(5, 0.25)),
        Err(ModelError::SourceCount {
            expected: 3,
            found: 2
        })
    ));
}

#[test]
fn loss_and_gradients_are_deterministic() {
    let model = FurcaNetModel::build(tiny()).unwrap();
    let ex = example(6, 0.1);
    let run = || {
        let mut g = Graph::new();
        let res = model.loss_on_example(&mut g, &ex).unwrap();
        g.backward(res.loss).unwrap();
        (g.value(res.loss).item(), g.param_grads(model.params()))
    };
    assert_eq!(run(), run());
}

#[test]
fn tiny_model_passes_grad_check() {
    let model = FurcaNetModel::build(tiny()).unwrap();
    let ex = example(7, 0.1);
    let mut params = model.params().clone();
    let report = grad_check_with(
        |g, p| Ok::<_, ModelError>(model.loss_on_example_with(g, p, &ex)?.loss),
        &mut params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert_eq!(report.coords_checked, tiny().param_count());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = FurcaNetModel::build(ModelConfig {
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = FurcaNetModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let bits = |m: &FurcaNetModel| {
        m.params()
            .flat_values()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&back), bits(&model));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = FurcaNetModel::build(tiny()).unwrap();
    let bytes = model.to_bytes();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(
        FurcaNetModel::from_bytes(&flipped),
        Err(ModelError::Checksum)
    ));

    assert!(matches!(
        FurcaNetModel::from_bytes(&bytes[..bytes.len() - 9]),
        Err(ModelError::Checksum)
    ));
    assert!(matches!(
        FurcaNetModel::from_bytes(&bytes[..10]),
        Err(ModelError::TruncatedCheckpoint)
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        FurcaNetModel::from_bytes(&magic),
        Err(ModelError::BadMagic)
    ));
}

#[test]
fn checkpoint_with_mismatched_config_is_rejected() {
    let small = FurcaNetModel::build(tiny()).unwrap();
    let bigger = ModelConfig {
        dnn_width: 5,
        ..tiny()
    };
    // Re-sign a file whose header claims a different architecture.
    let config = serde_json::to_vec(&bigger).unwrap();
    let values = small.params().flat_values();
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    body.extend_from_slice(&(config.len() as u32).to_le_bytes());
    body.extend_from_slice(&config);
    body.extend_from_slice(&(values.len() as u64).to_le_bytes());
    values
        .iter()
        .for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    assert!(matches!(
        FurcaNetModel::from_bytes(&body),
        Err(ModelError::ParamCount { .. })
    ));
}

#[test]
fn config_survives_serialization() {
    let cfg = ModelConfig {
        gconv_kernel_len: 3,
        seed: 77,
        ..ModelConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
}
