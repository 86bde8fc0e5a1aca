use mcqa_core::checkpoint::{load_checkpoint, save_checkpoint};
use mcqa_core::data::{
    generate_synthetic, load_dataset, parse_dataset, synthetic_vocab, write_dataset, LoadOptions, QAInstance,
};
use mcqa_core::encoder::EncoderConfig;
use mcqa_core::gradcheck::{grad_check_tensors, GradCheckConfig};
use mcqa_core::model::{loss, select, ModelBundle, ModelOptions, ScorerActivation, Scheme};
use mcqa_core::pooling::PoolingKind;
use mcqa_core::train::{train, TrainConfig};
use mcqa_core::Error;

fn small() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 64,
        dropout: 0.0,
    }
}

fn model(scheme: Scheme, gate: bool, seed: u64) -> ModelBundle<f32> {
    let opts = ModelOptions {
        scheme,
        gate,
        ..ModelOptions::default()
    };
    ModelBundle::init(small(), synthetic_vocab().len(), opts, seed).unwrap()
}

fn mean_loss(m: &ModelBundle<f32>, data: &[QAInstance]) -> f64 {
    data.iter()
        .map(|i| loss(&m.forward_scores(i).unwrap(), i.gold).unwrap() as f64)
        .sum::<f64>()
        / data.len() as f64
}

#[test]
fn dataset_lines_load_with_expected_ids() {
    let text = "{\"id\":\"a\",\"question\":\"where is the key\",\"choices\":[\"under the mat\",\"in the door\"],\"answer_index\":1}\n\
                \n\
                {\"id\":\"b\",\"question\":\"the door\",\"choices\":[\"mat\",\"key\",\"where\"],\"answer_index\":0}\n";
    let (insts, vocab) = parse_dataset(text, None, LoadOptions::default()).unwrap();
    assert_eq!(insts.len(), 2);
    assert_eq!((insts[0].gold, insts[1].gold), (1, 0));
    assert_eq!(insts[1].num_answers(), 3);
    assert_eq!(insts[1].answers[1], vec![vocab.id("key").unwrap()]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_dataset(&path, &insts, &vocab).unwrap();
    let (again, _) = load_dataset(&path, Some(&vocab)).unwrap();
    assert_eq!(again, insts);
}

#[test]
fn malformed_records_are_rejected() {
    let bad_index = r#"{"id":"x","question":"q","choices":["a","b"],"answer_index":2}"#;
    assert!(matches!(
        parse_dataset(bad_index, None, LoadOptions::default()),
        Err(Error::Validation { .. })
    ));
    let one_choice = r#"{"id":"x","question":"q","choices":["a"],"answer_index":0}"#;
    assert!(parse_dataset(one_choice, None, LoadOptions::default()).is_err());
    let broken = "{\"id\":\"x\",\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"answer_index\":0}\n{not json";
    assert!(matches!(
        parse_dataset(broken, None, LoadOptions::default()),
        Err(Error::Parse { line: 2, .. })
    ));
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let data = generate_synthetic(20, 3, 6, 2, 1).unwrap();
    let m = model(Scheme::PerAnswer, false, 3);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(m.clone(), &data, &data, &cfg).unwrap();
    assert_eq!(out.model, m);
    assert!(out.history.is_empty());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = generate_synthetic(160, 4, 6, 2, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let m = model(Scheme::SinglePass, true, 11);
    let a = train(m.clone(), &data, &[], &cfg).unwrap();
    let b = train(m.clone(), &data, &[], &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert!(mean_loss(&a.model, &data) < mean_loss(&m, &data));
}

#[test]
fn first_epoch_reduces_loss_at_default_config() {
    let data = generate_synthetic(200, 5, 6, 2, 7).unwrap();
    let m = ModelBundle::<f32>::init(
        EncoderConfig::default(),
        synthetic_vocab().len(),
        ModelOptions::default(),
        7,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let before = mean_loss(&m, &data);
    let out = train(m, &data, &[], &cfg).unwrap();
    assert!(mean_loss(&out.model, &data) < before);
}

#[test]
fn identity_scorer_is_homogeneous_in_hidden_weights() {
    let inst = &generate_synthetic(1, 4, 6, 2, 9).unwrap()[0];
    let mut base = ModelBundle::<f64>::init(
        small(),
        synthetic_vocab().len(),
        ModelOptions {
            scorer_activation: ScorerActivation::Identity,
            ..ModelOptions::default()
        },
        2,
    )
    .unwrap();
    base.scorer.hidden_bias = base.scorer.hidden_bias.map(|_| 0.0);
    base.scorer.out_bias = base.scorer.out_bias.map(|_| 0.0);
    let mut tripled = base.clone();
    tripled.scorer.hidden = tripled.scorer.hidden.map(|w| 3.0 * w);
    let s1 = base.forward_scores(inst).unwrap();
    let s3 = tripled.forward_scores(inst).unwrap();
    for (a, b) in s1.iter().zip(&s3) {
        assert!((3.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} {b}");
    }
    assert_eq!(select(&s1).unwrap(), select(&s3).unwrap());
}

#[test]
fn duplicate_candidates_score_equally_without_shared_pass() {
    let mut inst = generate_synthetic(1, 3, 6, 2, 4).unwrap().remove(0);
    inst.answers[2] = inst.answers[0].clone();
    for scheme in [Scheme::PerAnswer, Scheme::AppendedPerAnswer] {
        for pooling in PoolingKind::ALL {
            let opts = ModelOptions {
                scheme,
                pooling,
                ..ModelOptions::default()
            };
            let m = ModelBundle::<f64>::init(small(), synthetic_vocab().len(), opts, 6).unwrap();
            let s = m.forward_scores(&inst).unwrap();
            if scheme == Scheme::PerAnswer {
                assert_eq!(s[0], s[2], "{scheme} {pooling}");
            } else {
                // Appended context differs only in candidate order.
                assert!((s[0] - s[2]).abs() < 1e-9 * (1.0 + s[0].abs()), "{scheme} {pooling}");
            }
        }
    }
}

#[test]
fn checkpoint_file_preserves_scores() {
    let data = generate_synthetic(5, 4, 6, 2, 12).unwrap();
    let m = model(Scheme::SinglePass, true, 21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let vocab = synthetic_vocab();
    save_checkpoint(&path, &m, Some(&vocab)).unwrap();
    let (back, v) = load_checkpoint(&path).unwrap();
    assert_eq!(v.unwrap(), vocab);
    for inst in &data {
        assert_eq!(m.forward_scores(inst).unwrap(), back.forward_scores(inst).unwrap());
    }
    std::fs::write(&path, b"MCQA-CKPT-1\n garbage").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn scorer_gradients_match_finite_differences() {
    let inst = &generate_synthetic(1, 4, 6, 2, 13).unwrap()[0];
    let opts = ModelOptions {
        scheme: Scheme::SinglePass,
        gate: true,
        scorer_activation: ScorerActivation::Identity,
        ..ModelOptions::default()
    };
    let m = ModelBundle::<f64>::init(small(), synthetic_vocab().len(), opts, 8).unwrap();
    // The shared question columns get exactly zero gradient from shift
    // invariance; a wider floor keeps their roundoff from dominating.
    let cfg = GradCheckConfig {
        floor: 1e-3,
        ..GradCheckConfig::default()
    };
    let report = grad_check_tensors(&m, inst, &cfg, |n| n.starts_with("scorer.")).unwrap();
    assert_eq!(report.tensors.len(), 4);
    assert!(report.max_relative_error < 1e-7, "{}", report.max_relative_error);
    assert!(report.tensor("scorer.out").unwrap().max_relative_error < 1e-7);
}
