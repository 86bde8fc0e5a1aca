//! Mini-batch gradient descent with separate encoder and head learning rates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QAInstance;
use crate::error::{Error, Result};
use crate::model::{accuracy, ModelBundle, ParamGroup};
use crate::tensor::{lit, Mat, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Global gradient-norm ceiling per batch.
    pub clip_norm: Option<f64>,
    /// Stop once dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
    /// Present each training instance with a freshly permuted candidate
    /// order every epoch.
    pub shuffle_candidates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-3,
            lr_head: 1e-3,
            epochs: 30,
            batch_size: 16,
            seed: 7,
            optimizer: Optimizer::default(),
            clip_norm: None,
            target_dev_accuracy: None,
            shuffle_candidates: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !lr_ok(self.lr_encoder) || !lr_ok(self.lr_head) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Update rule applied to the averaged batch gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Gradient descent with heavy-ball momentum; 0 is plain descent.
    Sgd { momentum: f64 },
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        let ok = match *self {
            Optimizer::Sgd { momentum } => unit(momentum),
            Optimizer::Adam { beta1, beta2, eps } => unit(beta1) && unit(beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-tensor optimizer state, aligned with the model's tensors.
struct OptState<T> {
    first: Vec<Mat<T>>,
    second: Vec<Mat<T>>,
    steps: i32,
}

impl<T: Scalar> OptState<T> {
    fn new(shapes: &[(usize, usize)], optimizer: Optimizer) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect::<Vec<_>>();
        let second = match optimizer {
            Optimizer::Adam { .. } => zeros(),
            Optimizer::Sgd { .. } => Vec::new(),
        };
        Self {
            first: zeros(),
            second,
            steps: 0,
        }
    }

    /// Applies one update with gradient `scale * grads[t]` to each tensor.
    fn step(&mut self, optimizer: Optimizer, params: Vec<&mut Mat<T>>, grads: &[Mat<T>], lrs: &[f64], scale: f64) {
        self.steps += 1;
        let s = lit::<T>(scale);
        match optimizer {
            Optimizer::Sgd { momentum } => {
                let mu = lit::<T>(momentum);
                for (t, p) in params.into_iter().enumerate() {
                    let lr = lit::<T>(lrs[t]);
                    let v = self.first[t].data_mut();
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(grads[t].data()).zip(v) {
                        *vv = mu * *vv + gv * s;
                        *pv -= lr * *vv;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (lit::<T>(beta1), lit::<T>(beta2));
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let eps = lit::<T>(eps);
                for (t, p) in params.into_iter().enumerate() {
                    let lr = lit::<T>(lrs[t] / c1);
                    let c2 = lit::<T>(c2);
                    let (m, v) = (self.first[t].data_mut(), self.second[t].data_mut());
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[t].data()).zip(m).zip(v) {
                        let g = gv * s;
                        *mv = b1 * *mv + (T::one() - b1) * g;
                        *vv = b2 * *vv + (T::one() - b2) * g * g;
                        *pv -= lr * *mv / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-instance loss over the epoch.
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters of the best dev epoch, or of the last epoch without dev data.
    pub model: ModelBundle<T>,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: Option<f64>,
}

/// Trains `model` on `train`, evaluating on `dev` after every epoch.
///
/// Batch gradients are summed in batch order and averaged, so a run is a
/// pure function of its inputs.
pub fn train<T: Scalar>(
    mut model: ModelBundle<T>,
    train: &[QAInstance],
    dev: &[QAInstance],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(&mut model, train, dev, config, |_| {}).map(|(history, best)| {
        let (best_epoch, best_dev_accuracy, best_model) = match best {
            Some((e, a, m)) => (Some(e), Some(a), m),
            None => (None, None, model),
        };
        TrainOutcome {
            model: best_model,
            history,
            best_epoch,
            best_dev_accuracy,
        }
    })
}

/// Copy of `inst` with candidates in random order and `gold` tracking the
/// correct one.
pub fn permute_candidates(inst: &QAInstance, rng: &mut ChaCha8Rng) -> QAInstance {
    let mut order: Vec<usize> = (0..inst.answers.len()).collect();
    order.shuffle(rng);
    QAInstance {
        id: inst.id.clone(),
        question: inst.question.clone(),
        answers: order.iter().map(|&j| inst.answers[j].clone()).collect(),
        gold: order.iter().position(|&j| j == inst.gold).expect("gold is a candidate"),
    }
}

type Best<T> = Option<(usize, f64, ModelBundle<T>)>;

/// Like [`train`], updating `model` in place and reporting each epoch.
pub fn train_with<T: Scalar>(
    model: &mut ModelBundle<T>,
    train: &[QAInstance],
    dev: &[QAInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Vec<EpochMetrics>, Best<T>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let groups = model.groups();
    let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|(_, m)| m.shape()).collect();
    let lrs: Vec<f64> = groups
        .iter()
        .map(|g| match g {
            ParamGroup::Encoder => config.lr_encoder,
            ParamGroup::Head => config.lr_head,
        })
        .collect();
    let mut state = OptState::new(&shapes, config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD0_0D);
    let use_dropout = model.encoder.config.dropout > 0.0;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Best<T> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<Mat<T>> = shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
            for &idx in batch {
                let permuted;
                let inst = if config.shuffle_candidates {
                    permuted = permute_candidates(&train[idx], &mut shuffle_rng);
                    &permuted
                } else {
                    &train[idx]
                };
                let rng = use_dropout.then_some(&mut dropout_rng);
                let (loss, g) = model.loss_and_grads(inst, rng)?;
                let l = loss.to_f64().unwrap_or(f64::NAN);
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        message: format!("loss {l} on instance {}", train[idx].id),
                    });
                }
                loss_sum += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(max) = config.clip_norm {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    * scale;
                if !norm.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        message: "non-finite gradient".into(),
                    });
                }
                if norm > max {
                    scale *= max / norm;
                }
            }
            state.step(config.optimizer, model.tensors_mut(), &grads, &lrs, scale);
        }
        let dev_accuracy = if dev.is_empty() {
            None
        } else {
            Some(accuracy(model, dev)?)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_accuracy,
        };
        on_epoch(&metrics);
        history.push(metrics);
        if let Some(acc) = dev_accuracy {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, model.clone()));
            }
            if config.target_dev_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    Ok((history, best))
}
