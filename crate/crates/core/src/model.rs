//! Scoring pipeline: encoding scheme, pooling, optional answer gate and the
//! MLP scorer `g(q ⊕ a)`.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QAInstance;
use crate::encoder::{encode_on_tape, init_encoder, Dropout, EncoderConfig, EncoderParams, Uniform};
use crate::error::{Error, Result};
use crate::gate::GateParams;
use crate::layout::{layout_1anp_fit, layout_appended, layout_na1p_fit, SpanMap, TokenSequence};
use crate::pooling::{Pooling, PoolingKind};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Mat, Scalar};

/// Question–answer encoding scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// One encoder pass per candidate over `[<s> Q </s> </s> A_i </s>]` (1AnP).
    #[serde(rename = "1anp")]
    PerAnswer,
    /// Like [`Scheme::PerAnswer`] with every candidate appended to the question (nAnP).
    #[serde(rename = "nanp")]
    AppendedPerAnswer,
    /// One pass over the question and all candidates (nA1P).
    #[serde(rename = "na1p")]
    SinglePass,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::PerAnswer, Scheme::AppendedPerAnswer, Scheme::SinglePass];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::PerAnswer => "1anp",
            Scheme::AppendedPerAnswer => "nanp",
            Scheme::SinglePass => "na1p",
        }
    }

    /// Encoder passes needed per instance with `n` candidates.
    pub fn passes(self, n: usize) -> usize {
        match self {
            Scheme::SinglePass => 1,
            _ => n,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerActivation {
    Tanh,
    /// No nonlinearity; the scorer collapses to one affine map.
    Identity,
}

/// Two-layer MLP scorer. Weights are stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams<T> {
    pub hidden: Mat<T>,
    pub hidden_bias: Mat<T>,
    pub out: Mat<T>,
    pub out_bias: Mat<T>,
    pub activation: ScorerActivation,
}

impl<T: Scalar> ScorerParams<T> {
    pub fn init(input: usize, hidden: usize, activation: ScorerActivation, seed: u64) -> Self {
        let mut u = Uniform::new(seed);
        Self {
            hidden: u.fan_in(input, hidden),
            hidden_bias: Mat::zeros(1, hidden),
            out: u.fan_in(hidden, 1),
            out_bias: Mat::zeros(1, 1),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden.rows()
    }

    pub fn cast<U: Scalar>(&self) -> ScorerParams<U> {
        ScorerParams {
            hidden: self.hidden.cast(),
            hidden_bias: self.hidden_bias.cast(),
            out: self.out.cast(),
            out_bias: self.out_bias.cast(),
            activation: self.activation,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        vec![
            ("scorer.hidden".into(), &self.hidden),
            ("scorer.hidden_bias".into(), &self.hidden_bias),
            ("scorer.out".into(), &self.out),
            ("scorer.out_bias".into(), &self.out_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        vec![
            &mut self.hidden,
            &mut self.hidden_bias,
            &mut self.out,
            &mut self.out_bias,
        ]
    }

    fn on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, input: NodeId) -> NodeId {
        let (w1, b1) = (tape.param(&self.hidden), tape.param(&self.hidden_bias));
        let (w2, b2) = (tape.param(&self.out), tape.param(&self.out_bias));
        let mut h = tape.linear(input, w1, Some(b1));
        if self.activation == ScorerActivation::Tanh {
            h = tape.tanh(h);
        }
        tape.linear(h, w2, Some(b2))
    }
}

/// Structural choices of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub scheme: Scheme,
    pub pooling: PoolingKind,
    /// Gated answer interaction; single-pass only.
    pub gate: bool,
    pub gate_heads: usize,
    /// Score `g(q ⊕ a)` when true, `g(a)` otherwise.
    pub concat_question: bool,
    pub scorer_activation: ScorerActivation,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::PerAnswer,
            pooling: PoolingKind::Max,
            gate: false,
            gate_heads: 2,
            concat_question: true,
            scorer_activation: ScorerActivation::Tanh,
        }
    }
}

impl ModelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.gate && self.scheme != Scheme::SinglePass {
            return Err(Error::Config(format!(
                "the answer gate requires the na1p scheme, not {}",
                self.scheme
            )));
        }
        Ok(())
    }
}

/// Optimizer group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub encoder: EncoderParams<T>,
    pub pooling: Pooling<T>,
    pub gate: Option<GateParams<T>>,
    pub scorer: ScorerParams<T>,
    pub options: ModelOptions,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn init(config: EncoderConfig, vocab_size: usize, options: ModelOptions, seed: u64) -> Result<Self> {
        options.validate()?;
        let d = config.d_model;
        let encoder = init_encoder(config, vocab_size, seed)?;
        let gate = if options.gate {
            Some(GateParams::init(d, options.gate_heads, seed.wrapping_add(1))?)
        } else {
            None
        };
        let input = if options.concat_question { 2 * d } else { d };
        Ok(Self {
            encoder,
            pooling: Pooling::new(options.pooling, d, config.n_layers),
            gate,
            scorer: ScorerParams::init(input, d, options.scorer_activation, seed.wrapping_add(2)),
            options,
        })
    }

    /// Same structure with different options, sharing this model's encoder
    /// and freshly initialized heads.
    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            encoder: self.encoder.cast(),
            pooling: self.pooling.cast(),
            gate: self.gate.as_ref().map(GateParams::cast),
            scorer: self.scorer.cast(),
            options: self.options,
        }
    }

    /// Every trainable tensor with its name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = self.encoder.tensors();
        out.extend(self.pooling.tensors());
        if let Some(g) = &self.gate {
            out.extend(g.tensors());
        }
        out.extend(self.scorer.tensors());
        out
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.pooling.tensors_mut());
        if let Some(g) = &mut self.gate {
            out.extend(g.tensors_mut());
        }
        out.extend(self.scorer.tensors_mut());
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.tensors()
            .iter()
            .map(|(name, _)| {
                if name.starts_with("encoder.") {
                    ParamGroup::Encoder
                } else {
                    ParamGroup::Head
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    fn check_instance(&self, instance: &QAInstance) -> Result<()> {
        instance.validate(self.encoder.vocab_size(), 1)
    }

    /// Per-pass layout for candidate `i`; `appended` overrides the scheme's
    /// choice of candidates attached to the question.
    fn pass_layout(
        &self,
        instance: &QAInstance,
        i: usize,
        appended: Option<&[usize]>,
    ) -> Result<(TokenSequence, SpanMap)> {
        let max = Some(self.encoder.config.max_len);
        match (appended, self.options.scheme) {
            (Some(list), _) => layout_appended(instance, i, list, max),
            // With one candidate there is no candidate set to append; the
            // pass degenerates to 1AnP like the gate does for single-pass.
            (None, Scheme::AppendedPerAnswer) if instance.answers.len() > 1 => {
                let all: Vec<usize> = (0..instance.answers.len()).collect();
                layout_appended(instance, i, &all, max)
            }
            _ => layout_1anp_fit(instance, i, max),
        }
    }

    fn score_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, q: NodeId, a: NodeId) -> NodeId {
        let input = if self.options.concat_question {
            tape.concat_cols(q, a)
        } else {
            a
        };
        self.scorer.on_tape(tape, input)
    }

    /// Records the forward pass and returns an `n × 1` node of scores.
    pub fn scores_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        instance: &QAInstance,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.scores_on_tape_with(tape, instance, dropout_rng, None)
    }

    fn scores_on_tape_with<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        instance: &QAInstance,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        appended: Option<&[usize]>,
    ) -> Result<NodeId> {
        self.check_instance(instance)?;
        let rate = self.encoder.config.dropout;
        let n = instance.answers.len();
        let scores: Vec<NodeId> = match self.options.scheme {
            Scheme::PerAnswer | Scheme::AppendedPerAnswer => {
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let (seq, spans) = self.pass_layout(instance, i, appended)?;
                    let enc = encode_on_tape(
                        tape,
                        &seq,
                        &self.encoder,
                        dropout_rng.as_deref_mut().map(|rng| Dropout { rate, rng }),
                    )?;
                    let q = self.pooling.question_on_tape(tape, &enc.states, spans.question);
                    let a = self.pooling.answer_on_tape(tape, &enc.states, spans.answers[0]);
                    out.push(self.score_on_tape(tape, q, a));
                }
                out
            }
            Scheme::SinglePass => {
                let (seq, spans) = layout_na1p_fit(instance, Some(self.encoder.config.max_len))?;
                let dropout = dropout_rng.map(|rng| Dropout { rate, rng });
                let enc = encode_on_tape(tape, &seq, &self.encoder, dropout)?;
                let q = self.pooling.question_on_tape(tape, &enc.states, spans.question);
                let raw: Vec<NodeId> = spans
                    .answers
                    .iter()
                    .map(|&s| self.pooling.answer_on_tape(tape, &enc.states, s))
                    .collect();
                let answers = match &self.gate {
                    Some(gate) => {
                        let stacked = tape.stack_rows(&raw);
                        match gate.on_tape(tape, stacked) {
                            Some((gated, _)) => (0..n).map(|i| tape.row(gated, i)).collect(),
                            None => raw,
                        }
                    }
                    None => raw,
                };
                answers
                    .into_iter()
                    .map(|a| self.score_on_tape(tape, q, a))
                    .collect()
            }
        };
        Ok(tape.stack_rows(&scores))
    }

    /// Eval-mode scores `S_1..S_n`.
    pub fn forward_scores(&self, instance: &QAInstance) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let s = self.scores_on_tape(&mut tape, instance, None)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Per-candidate scores with the candidates listed in `appended` attached
    /// to the question of every pass. Multi-pass schemes only.
    pub fn forward_scores_appended(&self, instance: &QAInstance, appended: &[usize]) -> Result<Vec<T>> {
        if self.options.scheme == Scheme::SinglePass {
            return Err(Error::Contract("appended scoring needs a multi-pass scheme".into()));
        }
        let mut tape = Tape::new();
        let s = self.scores_on_tape_with(&mut tape, instance, None, Some(appended))?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Cross-entropy loss and its gradient for every tensor, aligned with
    /// [`Self::tensors`].
    pub fn loss_and_grads(
        &self,
        instance: &QAInstance,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, Vec<Mat<T>>)> {
        let mut tape = Tape::new();
        let s = self.scores_on_tape(&mut tape, instance, dropout_rng)?;
        check_finite(tape.value(s).data())?;
        let l = tape.cross_entropy(s, instance.gold);
        let loss = tape.value(l).data()[0];
        let grads = tape.backward(l);
        let out = self
            .tensors()
            .into_iter()
            .map(|(_, m)| {
                tape.param_node(m)
                    .and_then(|id| grads.get(id).cloned())
                    .unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()))
            })
            .collect();
        Ok((loss, out))
    }

    /// Loss together with the max-pooling argmax signature of the pass.
    pub fn loss_with_signature(&self, instance: &QAInstance) -> Result<(T, Vec<usize>)> {
        let mut tape = Tape::new();
        let s = self.scores_on_tape(&mut tape, instance, None)?;
        check_finite(tape.value(s).data())?;
        let l = tape.cross_entropy(s, instance.gold);
        Ok((tape.value(l).data()[0], tape.max_pool_signature()))
    }
}

fn check_finite<T: Scalar>(scores: &[T]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Index of the highest score; ties go to the lowest index.
pub fn select<T: Scalar>(scores: &[T]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Contract("no scores to select from".into()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Evaluation(format!("score {i} is NaN")));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `−log softmax(scores)[gold]`.
pub fn loss<T: Scalar>(scores: &[T], gold: usize) -> Result<T> {
    if gold >= scores.len() {
        return Err(Error::Contract(format!(
            "gold index {gold} out of range for {} scores",
            scores.len()
        )));
    }
    check_finite(scores)?;
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    Ok((lse - scores[gold]).max(T::zero()))
}

/// Fraction of instances whose selected candidate is gold.
pub fn accuracy<T: Scalar>(model: &ModelBundle<T>, instances: &[QAInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for inst in instances {
        if select(&model.forward_scores(inst)?)? == inst.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}
