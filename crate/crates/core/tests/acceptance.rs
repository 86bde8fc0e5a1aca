//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use mcqa_core::bench::{estimate_cost, pilot_append_experiment, run_benchmark, BenchConfig};
use mcqa_core::data::{generate_synthetic, synthetic_splits, synthetic_vocab, QAInstance, SyntheticSplits, EOS};
use mcqa_core::encoder::{EncoderConfig, LayerStates};
use mcqa_core::gate::{gated_interaction, GateParams};
use mcqa_core::gradcheck::{grad_check, GradCheckConfig};
use mcqa_core::layout::{layout_1anp, layout_na1p, len_1anp, len_na1p};
use mcqa_core::model::{accuracy, select, ModelBundle, ModelOptions, Scheme};
use mcqa_core::pooling::{pool_attentive, pool_layerwise_cls, pool_max, pool_mean, PoolingKind};
use mcqa_core::tensor::Mat;
use mcqa_core::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes to the stdout handle directly, which the test harness does not
/// capture, so the line appears in a plain `cargo test` run.
fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let mark = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout().lock(), "criterion {n} [{mark}] {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

fn softmax_oracle(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn criterion_1_pooling_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let m = random_mat(&mut rng, rows, cols);
        let mut max_oracle = vec![f64::NEG_INFINITY; cols];
        let mut sum = vec![0.0; cols];
        for c in 0..cols {
            for r in 0..rows {
                max_oracle[c] = max_oracle[c].max(m.get(r, c));
                sum[c] += m.get(r, c);
            }
        }
        let mean_oracle: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        exact &= pool_max(&m).unwrap() == max_oracle;
        exact &= pool_mean(&m).unwrap() == mean_oracle;

        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| m.get(r, c) * v[c]).sum())
            .collect();
        let w = softmax_oracle(&scores);
        let att = pool_attentive(&m, &v).unwrap();
        for c in 0..cols {
            let want: f64 = (0..rows).map(|r| w[r] * m.get(r, c)).sum();
            worst = worst.max((att[c] - want).abs());
        }

        let layers = rng.random_range(1..=4);
        let states = LayerStates {
            states: (0..layers).map(|_| random_mat(&mut rng, rows, cols)).collect(),
        };
        let lw: Vec<f64> = (0..layers).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sw = softmax_oracle(&lw);
        let mixed = pool_layerwise_cls(&states, &lw).unwrap();
        for c in 0..cols {
            let want: f64 = (0..layers).map(|l| sw[l] * states.states[l].get(0, c)).sum();
            worst = worst.max((mixed[c] - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "pooling oracle suite",
        exact && worst < 1e-6 && secs < 10.0,
        &format!("max/mean exact={exact}, attentive+layerwise max err {worst:.2e}, {secs:.2}s"),
    );
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> QAInstance {
    let q = rng.random_range(1..=20);
    QAInstance {
        id: "r".into(),
        question: (0..q).map(|_| rng.random_range(4..200)).collect(),
        answers: (0..n)
            .map(|_| {
                let a = rng.random_range(1..=8);
                (0..a).map(|_| rng.random_range(4..200)).collect()
            })
            .collect(),
        gold: 0,
    }
}

#[test]
fn criterion_2_layout_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let inst = random_instance(&mut rng, n);
        let lens: Vec<usize> = inst.answers.iter().map(Vec::len).collect();
        for (i, &a) in lens.iter().enumerate() {
            ok &= layout_1anp(&inst, i).unwrap().0.len() == len_1anp(inst.question.len(), a);
        }
        let (seq, spans) = layout_na1p(&inst).unwrap();
        ok &= seq.len() == len_na1p(inst.question.len(), &lens);
        ok &= spans.question.start == 0 && spans.answers[0].start == spans.question.end;
        for w in spans.answers.windows(2) {
            ok &= w[0].last() == w[1].start && seq.ids[w[1].start] == EOS;
        }
        ok &= spans.answers[n - 1].end == seq.len();
        if n == 1 {
            ok &= layout_1anp(&inst, 0).unwrap() == (seq, spans);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "layout suite",
        ok && secs < 5.0,
        &format!("formulas, n=1 equivalence and span tiling hold={ok}, {secs:.2}s"),
    );
}

/// Independent step-by-step evaluation of the gated interaction.
fn gate_oracle(raw: &[Vec<f64>], p: &GateParams<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = raw.len();
    let d = raw[0].len();
    let heads = p.attn.n_heads;
    let dh = d / heads;
    let project = |w: &Mat<f64>, x: &[f64]| -> Vec<f64> {
        (0..w.cols()).map(|o| (0..d).map(|k| x[k] * w.get(k, o)).sum()).collect()
    };
    let qs: Vec<Vec<f64>> = raw.iter().map(|h| project(&p.attn.wq, h)).collect();
    let ks: Vec<Vec<f64>> = raw.iter().map(|h| project(&p.attn.wk, h)).collect();
    let mut alpha = vec![vec![0.0; n]; n];
    for i in 0..n {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let s: Vec<f64> = others
                .iter()
                .map(|&j| cols.clone().map(|c| qs[i][c] * ks[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            for (w, &j) in softmax_oracle(&s).iter().zip(&others) {
                alpha[i][j] += w / heads as f64;
            }
        }
    }
    let gated = (0..n)
        .map(|i| {
            let c: Vec<f64> = (0..d).map(|k| (0..n).map(|j| alpha[i][j] * raw[j][k]).sum()).collect();
            let a = project(&p.w_self, &raw[i]);
            let b = project(&p.w_context, &c);
            (0..d)
                .map(|k| {
                    let g = sigmoid(a[k] + b[k] + p.bias.get(0, k));
                    g * raw[i][k] + (1.0 - g) * c[k]
                })
                .collect()
        })
        .collect();
    (gated, alpha)
}

#[test]
fn criterion_3_gate_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let d = 8;

    let p = GateParams::<f64>::init(d, 2, 1).unwrap();
    let h: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let fixed = (2..=6).all(|n| {
        gated_interaction(&vec![h.clone(); n], &p)
            .unwrap()
            .gated
            .iter()
            .all(|g| *g == h)
    });

    let zero = GateParams::<f64>::zeros(d, 2);
    let pair: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let zr = gated_interaction(&pair, &zero).unwrap();
    let half = (0..d).all(|k| (zr.gated[0][k] - 0.5 * (pair[0][k] + pair[1][k])).abs() < 1e-12);

    let mut row_err = 0.0f64;
    let mut oracle_err = 0.0f64;
    let mut perm_err = 0.0f64;
    for trial in 0..200 {
        let n = 2 + trial % 5;
        let params = GateParams::<f64>::init(d, 2, trial as u64).unwrap();
        let raw: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let reps = gated_interaction(&raw, &params).unwrap();
        for w in reps.head_weights.iter().chain(std::iter::once(&reps.weights)) {
            for i in 0..n {
                let s: f64 = (0..n).filter(|&j| j != i).map(|j| w.get(i, j)).sum();
                row_err = row_err.max((s - 1.0).abs()).max(w.get(i, i).abs());
            }
        }
        let (want, alpha) = gate_oracle(&raw, &params);
        for i in 0..n {
            for k in 0..d {
                oracle_err = oracle_err.max((reps.gated[i][k] - want[i][k]).abs());
            }
            for j in 0..n {
                oracle_err = oracle_err.max((reps.weights.get(i, j) - alpha[i][j]).abs());
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + trial % (n - 1));
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&j| raw[j].clone()).collect();
        let pr = gated_interaction(&permuted, &params).unwrap();
        for (pos, &j) in perm.iter().enumerate() {
            for k in 0..d {
                perm_err = perm_err.max((pr.gated[pos][k] - reps.gated[j][k]).abs());
            }
        }
    }
    verdict(
        3,
        "gate suite",
        fixed && half && row_err < 1e-6 && oracle_err < 1e-6 && perm_err < 1e-12,
        &format!(
            "fixed point={fixed}, zero-param average={half}, row-sum err {row_err:.1e}, \
             oracle err {oracle_err:.1e}, permutation err {perm_err:.1e}"
        ),
    );
}

#[test]
fn criterion_4_gradient_check() {
    let start = Instant::now();
    let inst = &generate_synthetic(1, 5, 12, 3, 41).unwrap()[0];
    let opts = ModelOptions {
        scheme: Scheme::SinglePass,
        pooling: PoolingKind::Max,
        gate: true,
        ..ModelOptions::default()
    };
    let model = ModelBundle::<f64>::init(EncoderConfig::default(), synthetic_vocab().len(), opts, 4).unwrap();
    let report = grad_check(&model, inst, &GradCheckConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let covered = report.tensors.iter().all(|t| t.samples >= 1);
    let groups = ["encoder.", "gate.", "scorer."]
        .iter()
        .all(|g| report.tensors.iter().any(|t| t.name.starts_with(g) && t.samples > 0));
    let gate_live = report
        .tensors
        .iter()
        .filter(|t| t.name.starts_with("gate."))
        .all(|t| t.max_abs_analytic > 0.0);
    verdict(
        4,
        "gradient check",
        report.samples >= 200 && covered && groups && gate_live && report.max_relative_error < 1e-4 && secs < 60.0,
        &format!(
            "{} samples over {} tensors, {} kink re-draws, max rel err {:.2e}, gate grads nonzero={gate_live}, {secs:.1}s",
            report.samples,
            report.tensors.len(),
            report.kink_skips,
            report.max_relative_error
        ),
    );
}

#[test]
fn criterion_5_scheme_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let vocab = synthetic_vocab().len() as u32;
    let data: Vec<QAInstance> = (0..100)
        .map(|i| QAInstance {
            id: format!("one-{i}"),
            question: (0..rng.random_range(1..=12)).map(|_| rng.random_range(4..vocab)).collect(),
            answers: vec![(0..rng.random_range(1..=4)).map(|_| rng.random_range(4..vocab)).collect()],
            gold: 0,
        })
        .collect();
    let base = ModelBundle::<f32>::init(
        EncoderConfig::default(),
        vocab as usize,
        ModelOptions::default(),
        55,
    )
    .unwrap();
    let appended = ModelBundle {
        options: ModelOptions {
            scheme: Scheme::AppendedPerAnswer,
            ..base.options
        },
        ..base.clone()
    };
    let single = ModelBundle {
        gate: Some(GateParams::init(64, 2, 9).unwrap()),
        options: ModelOptions {
            scheme: Scheme::SinglePass,
            gate: true,
            ..base.options
        },
        ..base.clone()
    };
    let mut identical = true;
    for inst in &data {
        let a = base.forward_scores(inst).unwrap();
        let b = appended.forward_scores(inst).unwrap();
        let c = single.forward_scores(inst).unwrap();
        identical &= a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()));
        identical &= a.iter().map(|v| v.to_bits()).eq(c.iter().map(|v| v.to_bits()));
        identical &= select(&a).unwrap() == select(&c).unwrap() && select(&a).unwrap() == select(&b).unwrap();
    }
    verdict(
        5,
        "scheme equivalence",
        identical,
        &format!("{} single-candidate instances, bitwise identical scores={identical}", data.len()),
    );
}

// ---- trained-model criteria ----

const TRAIN_SIZE: usize = 1000;
const DEV_SIZE: usize = 200;
const TEST_SIZE: usize = 500;
const N_ANSWERS: usize = 5;
const Q_LEN: usize = 6;
const A_LEN: usize = 2;
const SEEDS: [u64; 3] = [7, 8, 9];

fn splits(seed: u64) -> SyntheticSplits {
    synthetic_splits([TRAIN_SIZE, DEV_SIZE, TEST_SIZE], N_ANSWERS, Q_LEN, A_LEN, seed).unwrap()
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        seed,
        target_dev_accuracy: Some(0.97),
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Variant {
    PerAnswer,
    GateOn,
    GateOff,
    MaxPoolOnly,
}

impl Variant {
    fn options(self) -> ModelOptions {
        let single = ModelOptions {
            scheme: Scheme::SinglePass,
            ..ModelOptions::default()
        };
        match self {
            Variant::PerAnswer => ModelOptions::default(),
            Variant::GateOn => ModelOptions { gate: true, ..single },
            Variant::GateOff => single,
            Variant::MaxPoolOnly => ModelOptions {
                concat_question: false,
                ..single
            },
        }
    }
}

struct Trained {
    model: ModelBundle<f32>,
    best_dev: f64,
    best_epoch: usize,
    test_accuracy: f64,
    test: Vec<QAInstance>,
}

type Cache = Mutex<HashMap<(Variant, u64), Arc<OnceLock<Trained>>>>;

/// Trains each (variant, seed) once per test binary.
fn trained(variant: Variant, seed: u64) -> Arc<OnceLock<Trained>> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cell = CACHE
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((variant, seed))
        .or_default()
        .clone();
    cell.get_or_init(|| {
        let s = splits(seed);
        let model =
            ModelBundle::<f32>::init(EncoderConfig::default(), synthetic_vocab().len(), variant.options(), seed)
                .unwrap();
        let out = train(model, &s.train, &s.dev, &train_config(seed)).unwrap();
        let test_accuracy = accuracy(&out.model, &s.test).unwrap();
        Trained {
            model: out.model,
            best_dev: out.best_dev_accuracy.unwrap(),
            best_epoch: out.best_epoch.unwrap(),
            test_accuracy,
            test: s.test,
        }
    });
    cell
}

#[test]
fn criterion_6_learnability() {
    let per = trained(Variant::PerAnswer, 7);
    let per = per.get().unwrap();
    let gated = trained(Variant::GateOn, 7);
    let gated = gated.get().unwrap();
    verdict(
        6,
        "learnability",
        per.best_dev >= 0.90 && per.best_epoch <= 30 && gated.best_dev >= 0.85,
        &format!(
            "1anp+max dev {:.3} (epoch {}), na1p+max+gate dev {:.3} (epoch {})",
            per.best_dev, per.best_epoch, gated.best_dev, gated.best_epoch
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let mean = |v: Variant| {
        SEEDS
            .iter()
            .map(|&s| trained(v, s).get().unwrap().test_accuracy)
            .sum::<f64>()
            / SEEDS.len() as f64
    };
    let (on, off, bare) = (mean(Variant::GateOn), mean(Variant::GateOff), mean(Variant::MaxPoolOnly));
    verdict(
        7,
        "ablation ordering",
        on >= off - 0.01 && off >= bare - 0.01,
        &format!("mean test accuracy gate+q⊕a {on:.4}, q⊕a {off:.4}, max pool only {bare:.4}"),
    );
}

#[test]
fn criterion_8_efficiency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let vocab = synthetic_vocab().len();
    let inst = QAInstance {
        id: "bench".into(),
        question: (0..48).map(|_| rng.random_range(4..vocab as u32)).collect(),
        answers: (0..5)
            .map(|_| (0..8).map(|_| rng.random_range(4..vocab as u32)).collect())
            .collect(),
        gold: 0,
    };
    let cfg = EncoderConfig::default();
    let per = ModelBundle::<f32>::init(cfg, vocab, ModelOptions::default(), 1).unwrap();
    let single = ModelBundle::<f32>::init(
        cfg,
        vocab,
        ModelOptions {
            scheme: Scheme::SinglePass,
            gate: true,
            ..ModelOptions::default()
        },
        1,
    )
    .unwrap();
    let bench = BenchConfig::default();
    let reports = run_benchmark(&[&per, &single], &inst, &bench).unwrap();
    let (base, fast) = (&reports[0], &reports[1]);
    let c1 = estimate_cost(48, &[8; 5], Scheme::PerAnswer, &cfg).unwrap();
    let cn = estimate_cost(48, &[8; 5], Scheme::SinglePass, &cfg).unwrap();
    let ratio_exact = (cn.total_tokens, c1.total_tokens) == (96, 300)
        && (fast.tokens_per_instance, base.tokens_per_instance) == (96, 300);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        "efficiency",
        fast.max_batch > base.max_batch && fast.wall_time_seconds < base.wall_time_seconds && ratio_exact && secs < 300.0,
        &format!(
            "max batch {} -> {} ({:+.0}%), time {:.2}s -> {:.2}s ({:+.0}%), tokens {}/{}, {secs:.0}s total",
            base.max_batch,
            fast.max_batch,
            fast.delta_batch_pct,
            base.wall_time_seconds,
            fast.wall_time_seconds,
            fast.delta_time_pct,
            fast.tokens_per_instance,
            base.tokens_per_instance
        ),
    );
}

#[test]
fn criterion_9_pilot_curve() {
    let mut first = 0.0;
    let mut last = 0.0;
    let mut curves = Vec::new();
    let mut k0_matches = true;
    for &seed in &SEEDS {
        let t = trained(Variant::PerAnswer, seed);
        let t = t.get().unwrap();
        let report = pilot_append_experiment(&t.model, &t.test, N_ANSWERS - 1, seed).unwrap();
        k0_matches &= report.curve[0].accuracy == t.test_accuracy;
        first += report.curve[0].accuracy / SEEDS.len() as f64;
        last += report.curve[N_ANSWERS - 1].accuracy / SEEDS.len() as f64;
        curves.push(
            report
                .curve
                .iter()
                .map(|p| format!("{:.3}", p.accuracy))
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    verdict(
        9,
        "pilot curve",
        first - last >= 0.02 && k0_matches,
        &format!(
            "mean accuracy k=0 {first:.4}, k={} {last:.4}, k=0 equals plain eval={k0_matches}; curves [{}]",
            N_ANSWERS - 1,
            curves.join("] [")
        ),
    );
}
