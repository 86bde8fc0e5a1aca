//! Central finite-difference verification of analytic loss gradients.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QAInstance, BOS, EOS};
use crate::error::{Error, Result};
use crate::layout::{layout_na1p_fit, layout_nanp_fit};
use crate::model::{ModelBundle, Scheme};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Scalar parameters to check; every tensor gets at least one.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Re-draw attempts for a sample whose perturbation moves a max-pool argmax.
    pub max_resamples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 200,
            seed: 0,
            floor: 1e-6,
            max_resamples: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub samples: usize,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub samples: usize,
    /// Draws discarded because `θ ± ε` changed a max-pool argmax.
    pub kink_skips: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn tensor(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Embedding rows reachable from `instance`; other rows have zero gradient
/// by construction and are not worth sampling.
fn reachable_rows(model: &ModelBundle<f64>, instance: &QAInstance) -> Result<(Vec<usize>, usize)> {
    let mut tokens: BTreeSet<usize> = [BOS as usize, EOS as usize].into();
    tokens.extend(instance.question.iter().map(|&t| t as usize));
    tokens.extend(instance.answers.iter().flatten().map(|&t| t as usize));
    let max = Some(model.encoder.config.max_len);
    let longest = match model.options.scheme {
        Scheme::SinglePass => layout_na1p_fit(instance, max)?.0.len(),
        _ => (0..instance.answers.len())
            .map(|i| layout_nanp_fit(instance, i, max).map(|(s, _)| s.len()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0),
    };
    Ok((tokens.into_iter().collect(), longest))
}

/// Compares analytic gradients of the cross-entropy loss on `instance` to
/// central differences `(L(θ+ε) − L(θ−ε)) / 2ε` at sampled coordinates.
pub fn grad_check(
    model: &ModelBundle<f64>,
    instance: &QAInstance,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_tensors(model, instance, config, |_| true)
}

/// [`grad_check`] restricted to the tensors whose names pass `include`;
/// the others stay fixed.
pub fn grad_check_tensors(
    model: &ModelBundle<f64>,
    instance: &QAInstance,
    config: &GradCheckConfig,
    include: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    if model.encoder.config.dropout != 0.0 {
        return Err(Error::Config("gradient check requires dropout = 0".into()));
    }
    if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon {} must be positive", config.epsilon)));
    }
    let (analytic, names, shapes) = {
        let (_, g) = model.loss_and_grads(instance, None)?;
        let t = model.tensors();
        let names: Vec<String> = t.iter().map(|(n, _)| n.clone()).collect();
        let shapes: Vec<(usize, usize)> = t.iter().map(|(_, m)| m.shape()).collect();
        (g, names, shapes)
    };
    let (tokens, positions) = reachable_rows(model, instance)?;
    let candidates: Vec<Vec<usize>> = names
        .iter()
        .zip(&shapes)
        .map(|(name, &(rows, cols))| {
            let rows: Vec<usize> = if !include(name) {
                Vec::new()
            } else if name == "encoder.token_embedding" {
                tokens.clone()
            } else if name == "encoder.position_embedding" {
                (0..positions.min(rows)).collect()
            } else {
                (0..rows).collect()
            };
            rows.iter().flat_map(|&r| (0..cols).map(move |c| r * cols + c)).collect()
        })
        .collect();
    let total: usize = candidates.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Config("no parameters selected for checking".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plan: Vec<usize> = (0..names.len()).filter(|&t| !candidates[t].is_empty()).collect();
    let wanted = config.samples.max(plan.len());
    while plan.len() < wanted {
        let mut pick = rng.random_range(0..total);
        let t = candidates
            .iter()
            .position(|c| {
                if pick < c.len() {
                    true
                } else {
                    pick -= c.len();
                    false
                }
            })
            .expect("pick below total");
        plan.push(t);
    }

    let mut work = model.clone();
    let (_, base_sig) = work.loss_with_signature(instance)?;
    let mut stats: Vec<TensorCheck> = names
        .iter()
        .map(|n| TensorCheck {
            name: n.clone(),
            samples: 0,
            max_relative_error: 0.0,
            max_abs_analytic: 0.0,
        })
        .collect();
    let mut kink_skips = 0;
    let eps = config.epsilon;
    for &t in &plan {
        let mut attempts = 0;
        loop {
            let flat = candidates[t][rng.random_range(0..candidates[t].len())];
            let original = work.tensors()[t].1.data()[flat];
            let eval = |v: f64, w: &mut ModelBundle<f64>| {
                w.tensors_mut()[t].data_mut()[flat] = v;
                w.loss_with_signature(instance)
            };
            let (plus, sig_p) = eval(original + eps, &mut work)?;
            let (minus, sig_m) = eval(original - eps, &mut work)?;
            work.tensors_mut()[t].data_mut()[flat] = original;
            if sig_p != base_sig || sig_m != base_sig {
                kink_skips += 1;
                attempts += 1;
                if attempts > config.max_resamples {
                    return Err(Error::Evaluation(format!(
                        "{}: every draw crosses a max-pool tie",
                        names[t]
                    )));
                }
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[flat];
            let s = &mut stats[t];
            s.samples += 1;
            s.max_relative_error = s.max_relative_error.max(relative_error(a, numeric, config.floor));
            s.max_abs_analytic = s.max_abs_analytic.max(a.abs());
            break;
        }
    }
    let tensors: Vec<TensorCheck> = stats.into_iter().filter(|s| include(&s.name)).collect();
    Ok(GradCheckReport {
        max_relative_error: tensors.iter().map(|s| s.max_relative_error).fold(0.0, f64::max),
        samples: plan.len(),
        kink_skips,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
