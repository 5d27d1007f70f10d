use super::*;
use crate::corpus::{periodic, uniform_bytes};
use crate::models::{MixerKind, ModelConfig};
use crate::provenance::Provenance;

/// Knows the period but must see one full period of context first.
struct Memorizer {
    period: usize,
}

impl Scorer for Memorizer {
    type State = Vec<usize>;

    fn initial_state(&self, batch: usize) -> Vec<usize> {
        vec![0; batch]
    }

    fn take_rows(&self, s: &Vec<usize>, rows: usize) -> Vec<usize> {
        s[..rows].to_vec()
    }

    fn score_chunk(&self, _: &[usize], targets: &[usize], batch: usize, s: &Vec<usize>) -> Result<(Vec<f64>, Vec<usize>)> {
        let steps = targets.len() / batch;
        let mut nll = Vec::with_capacity(targets.len());
        let mut next = s.clone();
        for seen in next.iter_mut() {
            for _ in 0..steps {
                *seen += 1;
                nll.push(if *seen >= self.period { 0.0 } else { 256f64.ln() });
            }
        }
        Ok((nll, next))
    }
}

fn report(ppl: &[f64]) -> LengthExtensionReport {
    LengthExtensionReport {
        lengths: (0..ppl.len()).map(|i| 16 << i).collect(),
        perplexity: ppl.to_vec(),
        nll: ppl.iter().map(|p| p.ln()).collect(),
        tokens: vec![1; ppl.len()],
        mode: BatchMode::Contiguous,
        carry: false,
        positions: Positions::All,
        classification: None,
        t0: None,
        epsilon: None,
    }
}

#[test]
fn classification_examples() {
    assert_eq!(classify_sequence(&[10.0, 9.0, 8.0, 7.0], 0.0).unwrap(), Classification::Strong);
    assert_eq!(classify_sequence(&[10.0, 10.0, 10.0], 0.0).unwrap(), Classification::Weak);
    assert_eq!(classify_sequence(&[10.0, 9.0, 12.0], 0.0).unwrap(), Classification::None);
    assert_eq!(classify_sequence(&[10.0, 10.005], 0.01).unwrap(), Classification::Weak);
    assert!(classify_sequence(&[10.0], 0.0).is_err());

    let r = report(&[20.0, 10.0, 9.0, 12.0]);
    assert_eq!(classify_extension(&r, 16, 0.0).unwrap(), Classification::None);
    assert_eq!(classify_extension(&r, 32, 0.0).unwrap(), Classification::None);
    assert!(classify_extension(&r, 128, 0.0).is_err());
    let r = report(&[20.0, 10.0, 10.0, 9.0]);
    assert_eq!(classify_extension(&r, 32, 0.0).unwrap(), Classification::Weak);
}

#[test]
fn classification_is_scale_free_at_zero_epsilon() {
    let cases: [&[f64]; 4] = [&[5.0, 4.0, 3.0], &[5.0, 5.0, 4.0], &[3.0, 4.0, 2.0], &[2.0, 2.0, 2.0]];
    for ppl in cases {
        let base = classify_sequence(ppl, 0.0).unwrap();
        for c in [1e-3, 0.5, 3.0, 1e4] {
            let scaled: Vec<f64> = ppl.iter().map(|p| p * c).collect();
            assert_eq!(classify_sequence(&scaled, 0.0).unwrap(), base);
        }
    }
}

#[test]
fn doubling_16_to_32768_has_12_lengths() {
    assert_eq!(doubling_lengths(16, 32768).len(), 12);
}

#[test]
fn memorizer_on_periodic_stream_approaches_one() {
    let stream = periodic(b"abcdefgh", 8 * 1024 + 1);
    let lengths = doubling_lengths(8, 1024);
    let r = perplexity_by_length(&Memorizer { period: 8 }, &stream, &lengths, &EvalOptions::default()).unwrap();
    assert!(r.perplexity.windows(2).all(|w| w[1] < w[0]));
    assert!(r.perplexity.last().unwrap() - 1.0 < 0.05);
    assert_eq!(classify_extension(&r, 8, 0.0).unwrap(), Classification::Strong);

    let carried = EvalOptions {
        carry: true,
        batch: 1,
        ..EvalOptions::default()
    };
    let r = perplexity_by_length(&Memorizer { period: 8 }, &stream, &lengths, &carried).unwrap();
    assert!(r.perplexity.iter().all(|&p| p < 1.01));
}

#[test]
fn uniform_source_is_256_everywhere() {
    let stream = uniform_bytes(4097, 1);
    let r = perplexity_by_length(&UniformScorer, &stream, &doubling_lengths(16, 4096), &EvalOptions::default()).unwrap();
    assert!(r.perplexity.iter().all(|&p| (p - 256.0).abs() < 1e-9));
    assert!(r.tokens.iter().all(|&t| t == 4096));
}

#[test]
fn errors_on_short_stream_and_bad_lengths() {
    let opts = EvalOptions::default();
    assert!(matches!(
        perplexity_by_length(&UniformScorer, &[0; 16], &[16], &opts),
        Err(Error::DataTooShort { .. })
    ));
    assert!(perplexity_by_length(&UniformScorer, &[0; 100], &[16, 8], &opts).is_err());
    assert!(perplexity_by_length(&UniformScorer, &[0; 100], &[], &opts).is_err());
}

fn small_model() -> LanguageModel {
    LanguageModel::new(
        ModelConfig {
            mixer: MixerKind::Ssm,
            layers: 1,
            d_model: 8,
            state_dim: 4,
            mlp_ratio: 2,
            ..ModelConfig::tiny()
        },
        3,
    )
    .unwrap()
}

#[test]
fn shuffled_equals_contiguous_without_carry() {
    let model = small_model();
    let stream = uniform_bytes(1025, 5);
    let lengths = [8, 32, 128];
    let base = EvalOptions {
        batch: 3,
        chunk: 20,
        ..EvalOptions::default()
    };
    let a = perplexity_by_length(&model, &stream, &lengths, &base).unwrap();
    let b = perplexity_by_length(
        &model,
        &stream,
        &lengths,
        &EvalOptions {
            mode: BatchMode::Shuffled,
            ..base.clone()
        },
    )
    .unwrap();
    for (x, y) in a.nll.iter().zip(&b.nll) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    let c = perplexity_by_length(
        &model,
        &stream,
        &lengths,
        &EvalOptions {
            mode: BatchMode::Shuffled,
            carry: true,
            ..base.clone()
        },
    )
    .unwrap();
    assert_ne!(a.nll, c.nll);
}

#[test]
fn chunking_and_batching_do_not_change_result() {
    let model = small_model();
    let stream = uniform_bytes(513, 6);
    let lengths = [16, 64, 256];
    let reference = perplexity_by_length(
        &model,
        &stream,
        &lengths,
        &EvalOptions {
            batch: 1,
            chunk: 1000,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    for (batch, chunk) in [(2, 7), (5, 64), (16, 256)] {
        let r = perplexity_by_length(
            &model,
            &stream,
            &lengths,
            &EvalOptions {
                batch,
                chunk,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        for (x, y) in r.nll.iter().zip(&reference.nll) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn last_position_scoring_counts_windows() {
    let stream = uniform_bytes(1025, 7);
    let r = perplexity_by_length(
        &UniformScorer,
        &stream,
        &[16, 64],
        &EvalOptions {
            positions: Positions::Last,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(r.tokens, vec![64, 16]);
}

#[test]
fn report_files_are_deterministic() {
    let model = small_model();
    let stream = uniform_bytes(600, 8);
    let dir = tempfile::tempdir().unwrap();
    let prov = Provenance::new("abc", 1, crate::ndcore::Precision::F64);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let mut r = perplexity_by_length(&model, &stream, &[16, 32, 64], &EvalOptions::default()).unwrap();
        r.classify(16, 0.01).unwrap();
        let p = dir.path().join(format!("r{k}.csv"));
        write_report_csv(&p, &r, &prov).unwrap();
        write_report_json(&dir.path().join(format!("r{k}.json")), &r, &prov).unwrap();
        outputs.push(std::fs::read(&p).unwrap());
        let svg = render_svg(&[("model".into(), &r)], "test");
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("length,ppl,nll,tokens,mode,carry,classification,config_hash,seed,precision,code_version"));
}
