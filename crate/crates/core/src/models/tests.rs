use super::*;
use crate::ndcore::{finite_diff_gradient, max_relative_error, Precision};

fn small(mixer: MixerKind) -> ModelConfig {
    ModelConfig {
        mixer,
        layers: 2,
        d_model: 8,
        state_dim: 6,
        mlp_ratio: 2,
        ..ModelConfig::tiny()
    }
}

fn hand_count(c: &ModelConfig) -> usize {
    let (d, m, r) = (c.d_model, c.state_dim, c.mlp_ratio);
    let mixer = match c.mixer {
        MixerKind::Ssm => m * (2 * d + 2),
        MixerKind::Gated => 3 * m * d + d * d + d,
        MixerKind::Rnn => m * m + 2 * m * d + m,
        MixerKind::Gru => 4 * m * d + 3 * m * m + 6 * m,
    };
    let block = 4 * d + mixer + 2 * r * d * d + r * d + d;
    let head = if c.tie_embeddings { 256 } else { 256 * d + 256 };
    256 * d + c.layers * block + 2 * d + head
}

#[test]
fn param_counts_match_formula() {
    assert_eq!(ModelConfig::tiny().num_params(), 363_520);
    for mixer in [MixerKind::Ssm, MixerKind::Gated, MixerKind::Rnn, MixerKind::Gru] {
        for tie in [false, true] {
            for base in [ModelConfig::tiny(), ModelConfig::small(), small(mixer)] {
                let c = ModelConfig {
                    mixer,
                    tie_embeddings: tie,
                    ..base
                };
                assert_eq!(c.num_params(), hand_count(&c), "{c:?}");
            }
        }
        let model = LanguageModel::new(small(mixer), 0).unwrap();
        assert_eq!(model.num_params(), hand_count(model.config()));
    }
}

fn logits(model: &LanguageModel, inputs: &[usize], batch: usize, h0: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::default();
    let vars = model.params().bind_constant(&mut tape);
    let h: Vec<Var> = h0.iter().map(|t| tape.constant(t.clone())).collect();
    let out = model.forward(&mut tape, &vars, inputs, batch, &h)?;
    Ok(tape.value(out.logits).clone())
}

#[test]
fn forward_shapes() {
    for mixer in [MixerKind::Ssm, MixerKind::Gated, MixerKind::Rnn, MixerKind::Gru] {
        let model = LanguageModel::new(small(mixer), 1).unwrap();
        let inputs: Vec<usize> = (0..2 * 5).map(|i| (i * 37) % 256).collect();
        let l = logits(&model, &inputs, 2, &model.zero_states(2)).unwrap();
        assert_eq!(l.shape(), &[2, 5, 256]);
        assert!(l.is_finite());
    }
}

#[test]
fn single_token_depends_only_on_first_token() {
    for mixer in [MixerKind::Ssm, MixerKind::Gated, MixerKind::Rnn, MixerKind::Gru] {
        let model = LanguageModel::new(small(mixer), 2).unwrap();
        let a = logits(&model, &[65], 1, &model.zero_states(1)).unwrap();
        let b = logits(&model, &[65], 1, &model.zero_states(1)).unwrap();
        let c = logits(&model, &[66], 1, &model.zero_states(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn causality_by_perturbation() {
    let steps = 16;
    for mixer in [MixerKind::Ssm, MixerKind::Gated, MixerKind::Rnn, MixerKind::Gru] {
        let model = LanguageModel::new(small(mixer), 3).unwrap();
        let base: Vec<usize> = (0..steps).map(|i| (i * 91 + 7) % 256).collect();
        let ref_logits = logits(&model, &base, 1, &model.zero_states(1)).unwrap();
        for j in 0..steps {
            let mut pert = base.clone();
            pert[j] = (pert[j] + 101) % 256;
            let l = logits(&model, &pert, 1, &model.zero_states(1)).unwrap();
            for k in 0..steps {
                let row = &l.data()[k * 256..(k + 1) * 256];
                let refr = &ref_logits.data()[k * 256..(k + 1) * 256];
                if k < j {
                    assert_eq!(row, refr, "{mixer:?}: position {k} changed after perturbing {j}");
                } else if k == j {
                    assert_ne!(row, refr);
                }
            }
        }
    }
}

#[test]
fn linear_ssm_path_is_silent_on_zero_drive() {
    let cfg = ModelConfig {
        activation: Activation::Identity,
        layers: 1,
        ..small(MixerKind::Ssm)
    };
    let mut model = LanguageModel::new(cfg, 4).unwrap();
    model.params_mut().get_mut("blocks.0.ssm.U").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::default();
    let vars = model.params().bind_constant(&mut tape);
    let h0 = tape.constant(Tensor::zeros(&[1, 6]));
    let out = model.forward(&mut tape, &vars, &[1, 2, 3, 4], 1, &[h0]).unwrap();
    assert!(tape.value(out.states[0]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn split_forward_matches_concatenated() {
    for mixer in [MixerKind::Ssm, MixerKind::Gated, MixerKind::Rnn, MixerKind::Gru] {
        let model = LanguageModel::new(small(mixer), 5).unwrap();
        let seq: Vec<usize> = (0..24).map(|i| (i * 13 + 5) % 256).collect();
        let full = logits(&model, &seq, 1, &model.zero_states(1)).unwrap();
        let mut tape = Tape::default();
        let vars = model.params().bind_constant(&mut tape);
        let mut h: Vec<Var> = model.zero_states(1).into_iter().map(|t| tape.constant(t)).collect();
        let mut parts = Vec::new();
        for chunk in seq.chunks(8) {
            let out = model.forward(&mut tape, &vars, chunk, 1, &h).unwrap();
            parts.extend_from_slice(tape.value(out.logits).data());
            h = out.final_states;
        }
        let err = full
            .data()
            .iter()
            .zip(&parts)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{mixer:?}: {err}");
    }
}

fn loss_of(model: &LanguageModel, inputs: &[usize], targets: &[usize], batch: usize) -> f64 {
    let mut tape = Tape::default();
    let vars = model.params().bind_constant(&mut tape);
    let h: Vec<Var> = model.zero_states(batch).into_iter().map(|t| tape.constant(t)).collect();
    let out = model.forward(&mut tape, &vars, inputs, batch, &h).unwrap();
    let loss = tape.cross_entropy(out.logits, targets).unwrap();
    tape.value(loss).item().unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    for mixer in [MixerKind::Ssm, MixerKind::Gated, MixerKind::Rnn, MixerKind::Gru] {
        for method in [ScanMethod::Sequential, ScanMethod::Parallel] {
            let cfg = ModelConfig {
                scan: method,
                ..small(mixer)
            };
            let model = LanguageModel::new(cfg, 6).unwrap();
            let inputs: Vec<usize> = (0..10).map(|i| (i * 29 + 3) % 256).collect();
            let targets: Vec<usize> = (0..10).map(|i| (i * 17 + 11) % 256).collect();
            let mut tape = Tape::default();
            let vars = model.params().bind(&mut tape);
            let h: Vec<Var> = model.zero_states(2).into_iter().map(|t| tape.constant(t)).collect();
            let out = model.forward(&mut tape, &vars, &inputs, 2, &h).unwrap();
            let loss = tape.cross_entropy(out.logits, &targets).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (pi, &v) in vars.iter().enumerate() {
                let analytic = grads.get_or_zeros(v);
                let theta = model.params().tensors()[pi].data().to_vec();
                let probe: Vec<usize> = (0..theta.len()).step_by(theta.len().div_ceil(4).max(1)).collect();
                for &k in &probe {
                    let fd = finite_diff_gradient(
                        |x| {
                            let mut m2 = model.clone();
                            m2.params_mut().tensors_mut()[pi].data_mut()[k] = x[0];
                            loss_of(&m2, &inputs, &targets, 2)
                        },
                        &[theta[k]],
                        1e-5,
                    )
                    .unwrap();
                    let err = max_relative_error(&[analytic.data()[k]], &fd, 1e-6);
                    assert!(
                        err < 1e-4,
                        "{mixer:?}/{method:?} {}[{k}]: {} vs {}",
                        model.params().names()[pi],
                        analytic.data()[k],
                        fd[0]
                    );
                }
            }
        }
    }
}

#[test]
fn overflow_reports_layer_and_step() {
    let cfg = ModelConfig {
        layers: 1,
        activation: Activation::Identity,
        ..small(MixerKind::Ssm)
    };
    let mut model = LanguageModel::new(cfg, 7).unwrap();
    model.params_mut().get_mut("blocks.0.ssm.b").unwrap().data_mut().fill(1e38);
    let mut tape = Tape::new(Precision::F32);
    let vars = model.params().bind_constant(&mut tape);
    let h0 = tape.constant(Tensor::zeros(&[1, 6]));
    let err = model.forward(&mut tape, &vars, &[0; 8], 1, &[h0]).unwrap_err();
    match err {
        Error::Overflow { layer, step, .. } => {
            assert_eq!(layer, Some(0));
            assert!(step < 8);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    for mixer in [MixerKind::Ssm, MixerKind::Gru] {
        let model = LanguageModel::new(small(mixer), 8).unwrap();
        let path = dir.path().join(format!("{}.ckpt", mixer.name()));
        let meta = serde_json::json!({"step": 12});
        save_checkpoint(&path, &model, &meta, Precision::F64).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.meta, meta);

        save_checkpoint(&path, &model, &meta, Precision::F32).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        for (a, b) in ck.model.params().tensors().iter().zip(model.params().tensors()) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-6);
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::CheckpointVersion { found: 7, expected: 1 } => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn h0_shape_is_checked() {
    let model = LanguageModel::new(small(MixerKind::Ssm), 9).unwrap();
    let mut tape = Tape::default();
    let vars = model.params().bind_constant(&mut tape);
    let h: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::zeros(&[1, 5]))).collect();
    assert!(matches!(
        model.forward(&mut tape, &vars, &[1, 2], 1, &h),
        Err(Error::Shape { .. })
    ));
}
