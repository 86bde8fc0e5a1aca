//! Analytic cost model, activation-memory accountant, throughput harness and
//! the append pilot experiment.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QAInstance;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::layout::{len_1anp, len_na1p, len_nanp};
use crate::model::{select, ModelBundle, Scheme};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub scheme: Scheme,
    pub passes: usize,
    /// Unpadded length of every encoder pass.
    pub pass_lengths: Vec<usize>,
    pub total_tokens: usize,
    /// `Σ L²` over passes; one layer's attention-score count.
    pub attention_units: u64,
    /// `n_layers · d_model · Σ L²`.
    pub attention_flops: u64,
}

/// Sequence lengths one instance needs under `scheme`.
pub fn pass_lengths(q_len: usize, answer_lens: &[usize], scheme: Scheme) -> Result<Vec<usize>> {
    let n = answer_lens.len();
    if n == 0 {
        return Err(Error::Contract("at least one answer length is required".into()));
    }
    Ok(match scheme {
        Scheme::PerAnswer => answer_lens.iter().map(|&a| len_1anp(q_len, a)).collect(),
        // A single candidate is never appended to itself; see ModelBundle.
        Scheme::AppendedPerAnswer if n == 1 => vec![len_1anp(q_len, answer_lens[0])],
        Scheme::AppendedPerAnswer => (0..n).map(|i| len_nanp(q_len, answer_lens, i)).collect(),
        Scheme::SinglePass => vec![len_na1p(q_len, answer_lens)],
    })
}

pub fn estimate_cost(
    q_len: usize,
    answer_lens: &[usize],
    scheme: Scheme,
    config: &EncoderConfig,
) -> Result<CostEstimate> {
    let lengths = pass_lengths(q_len, answer_lens, scheme)?;
    let units: u64 = lengths.iter().map(|&l| (l * l) as u64).sum();
    Ok(CostEstimate {
        scheme,
        passes: lengths.len(),
        total_tokens: lengths.iter().sum(),
        attention_units: units,
        attention_flops: units * (config.n_layers * config.d_model) as u64,
        pass_lengths: lengths,
    })
}

/// Deterministic activation-byte accounting for f32 inference batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryAccountant {
    pub config: EncoderConfig,
    pub budget_bytes: u64,
}

/// Batch sizes are never searched beyond this.
pub const MAX_BATCH_LIMIT: usize = 1 << 20;

impl MemoryAccountant {
    /// Activation bytes of a batch of `batch` instances whose passes have
    /// `lengths`; every sequence is padded to the longest one.
    pub fn batch_bytes(&self, lengths: &[usize], batch: usize) -> u64 {
        let padded = lengths.iter().copied().max().unwrap_or(0);
        let per_seq = self.config.activation_floats(padded) as u64 * 4;
        per_seq * (lengths.len() * batch) as u64
    }

    pub fn fits(&self, lengths: &[usize], batch: usize) -> bool {
        self.batch_bytes(lengths, batch) <= self.budget_bytes
    }

    /// Largest batch within budget: doubling, then binary search.
    pub fn max_batch(&self, lengths: &[usize]) -> Result<usize> {
        if !self.fits(lengths, 1) {
            return Err(Error::Config(format!(
                "memory budget of {} bytes cannot hold one instance ({} bytes)",
                self.budget_bytes,
                self.batch_bytes(lengths, 1)
            )));
        }
        let mut lo = 1;
        while lo < MAX_BATCH_LIMIT && self.fits(lengths, (lo * 2).min(MAX_BATCH_LIMIT)) {
            lo = (lo * 2).min(MAX_BATCH_LIMIT);
        }
        if lo == MAX_BATCH_LIMIT {
            return Ok(lo);
        }
        // Invariant: lo fits, hi does not.
        let mut hi = lo * 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.fits(lengths, mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scheme: Scheme,
    pub max_batch: usize,
    pub instances: usize,
    /// Median over repetitions.
    pub wall_time_seconds: f64,
    pub repetition_seconds: Vec<f64>,
    pub tokens_per_instance: usize,
    pub activation_bytes_per_instance: u64,
    /// Relative change against the first report, in percent.
    pub delta_batch_pct: f64,
    pub delta_time_pct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub instances: usize,
    pub memory_budget_bytes: u64,
    pub repetitions: usize,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            memory_budget_bytes: crate::config::DEFAULT_MEMORY_BUDGET,
            repetitions: 3,
            workers: 1,
        }
    }
}

/// `100 · (value − base) / base`.
pub fn delta_pct(base: f64, value: f64) -> f64 {
    100.0 * (value - base) / base
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn run_batch<T: Scalar>(model: &ModelBundle<T>, instance: &QAInstance, size: usize, workers: usize) -> Result<()> {
    if workers <= 1 || size == 1 {
        for _ in 0..size {
            std::hint::black_box(model.forward_scores(instance)?);
        }
        return Ok(());
    }
    let per = size.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..size)
            .step_by(per)
            .map(|start| {
                let count = per.min(size - start);
                s.spawn(move || -> Result<()> {
                    for _ in 0..count {
                        std::hint::black_box(model.forward_scores(instance)?);
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("benchmark worker panicked"))
    })
}

/// Scores `config.instances` copies of `instance` with each model in turn,
/// batched at the largest size the accountant admits. The first model is
/// the baseline for the Δ% columns.
pub fn run_benchmark<T: Scalar>(
    models: &[&ModelBundle<T>],
    instance: &QAInstance,
    config: &BenchConfig,
) -> Result<Vec<BenchReport>> {
    if models.is_empty() || config.instances == 0 || config.repetitions == 0 {
        return Err(Error::Config("benchmark needs models, instances and repetitions".into()));
    }
    let enc = models[0].encoder.config;
    if models.iter().any(|m| m.encoder.config != enc) {
        return Err(Error::Config("benchmarked models must share an encoder config".into()));
    }
    let accountant = MemoryAccountant {
        config: enc,
        budget_bytes: config.memory_budget_bytes,
    };
    let answer_lens: Vec<usize> = instance.answers.iter().map(Vec::len).collect();
    let mut reports: Vec<BenchReport> = Vec::with_capacity(models.len());
    for model in models {
        let scheme = model.options.scheme;
        let lengths = pass_lengths(instance.question.len(), &answer_lens, scheme)?;
        if lengths.iter().any(|&l| l > enc.max_len) {
            return Err(Error::Length {
                len: lengths.iter().copied().max().unwrap_or(0),
                max: enc.max_len,
            });
        }
        let max_batch = accountant.max_batch(&lengths)?;
        run_batch(model, instance, 1, 1)?;
        let mut times = Vec::with_capacity(config.repetitions);
        for _ in 0..config.repetitions {
            let start = Instant::now();
            let mut done = 0;
            while done < config.instances {
                let size = max_batch.min(config.instances - done);
                run_batch(model, instance, size, config.workers)?;
                done += size;
            }
            times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        }
        let wall = median(&times);
        let (delta_batch_pct, delta_time_pct) = match reports.first() {
            None => (0.0, 0.0),
            Some(base) => (
                delta_pct(base.max_batch as f64, max_batch as f64),
                delta_pct(base.wall_time_seconds, wall),
            ),
        };
        reports.push(BenchReport {
            scheme,
            max_batch,
            instances: config.instances,
            wall_time_seconds: wall,
            repetition_seconds: times,
            tokens_per_instance: lengths.iter().sum(),
            activation_bytes_per_instance: accountant.batch_bytes(&lengths, 1),
            delta_batch_pct,
            delta_time_pct,
        });
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotPoint {
    pub appended: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub curve: Vec<PilotPoint>,
    pub warnings: Vec<String>,
}

/// Accuracy when `k = 0..=k_max` randomly chosen candidates are appended to
/// the question of every pass. The chosen set is drawn per instance and per
/// `k` from a generator seeded with `seed`.
pub fn pilot_append_experiment<T: Scalar>(
    model: &ModelBundle<T>,
    instances: &[QAInstance],
    k_max: usize,
    seed: u64,
) -> Result<PilotReport> {
    if model.options.scheme == Scheme::SinglePass {
        return Err(Error::Config("the append pilot needs a multi-pass model".into()));
    }
    if instances.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    if let Some(inst) = instances.iter().find(|i| k_max >= i.answers.len()) {
        return Err(Error::Config(format!(
            "k_max {k_max} must be below the candidate count {} of {}",
            inst.answers.len(),
            inst.id
        )));
    }
    let mut curve = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut correct = 0usize;
        for inst in instances {
            let scores = if k == 0 {
                model.forward_scores_appended(inst, &[])?
            } else {
                let chosen = sample(&mut rng, inst.answers.len(), k).into_vec();
                model.forward_scores_appended(inst, &chosen)?
            };
            if select(&scores)? == inst.gold {
                correct += 1;
            }
        }
        curve.push(PilotPoint {
            appended: k,
            accuracy: correct as f64 / instances.len() as f64,
        });
    }
    let mut warnings = Vec::new();
    let chance = instances.iter().map(|i| 1.0 / i.answers.len() as f64).sum::<f64>() / instances.len() as f64;
    if curve[0].accuracy <= chance + 0.05 {
        warnings.push(format!(
            "k = 0 accuracy {:.3} is near chance {chance:.3}; the model looks untrained",
            curve[0].accuracy
        ));
    }
    Ok(PilotReport { curve, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        let cfg = EncoderConfig::default();
        let one = estimate_cost(48, &[8; 5], Scheme::PerAnswer, &cfg).unwrap();
        let single = estimate_cost(48, &[8; 5], Scheme::SinglePass, &cfg).unwrap();
        assert_eq!((one.total_tokens, one.passes), (300, 5));
        assert_eq!((single.total_tokens, single.passes), (96, 1));
        assert_eq!(one.attention_units, 18000);
        assert_eq!(single.attention_units, 9216);
        assert_eq!(single.attention_flops, 9216 * 2 * 64);
        let a = estimate_cost(7, &[3], Scheme::PerAnswer, &cfg).unwrap();
        let b = estimate_cost(7, &[3], Scheme::SinglePass, &cfg).unwrap();
        let c = estimate_cost(7, &[3], Scheme::AppendedPerAnswer, &cfg).unwrap();
        assert_eq!((a.total_tokens, a.attention_flops), (b.total_tokens, b.attention_flops));
        assert_eq!(a.pass_lengths, c.pass_lengths);
    }

    #[test]
    fn max_batch_is_exact_boundary() {
        let config = EncoderConfig::default();
        let per = MemoryAccountant { config, budget_bytes: 0 }.batch_bytes(&[60; 5], 1);
        for k in [1u64, 2, 3, 7, 100, 161] {
            let acc = MemoryAccountant {
                config,
                budget_bytes: per * k + per / 2,
            };
            assert_eq!(acc.max_batch(&[60; 5]).unwrap() as u64, k);
        }
        let tiny = MemoryAccountant { config, budget_bytes: per - 1 };
        assert!(matches!(tiny.max_batch(&[60; 5]), Err(Error::Config(_))));
    }

    #[test]
    fn median_and_delta() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert!((delta_pct(100.0, 160.0) - 60.0).abs() < 1e-12);
        assert!((delta_pct(4.61, 3.31) + 28.2).abs() < 0.1);
    }
}
