//! Gated inter-answer interaction for single-pass encoding.
//!
//! Each pooled answer `h_i` queries every other answer with multi-head
//! attention. The head-averaged weight `α_ij` is the share target `i` gives
//! source `j`, with `α_ii = 0`. These weights combine the raw answer
//! vectors into a context `c_i = Σ_{j≠i} α_ij h_j`, and an elementwise gate
//! mixes the two:
//!
//! ```text
//! γ_i = σ(W_self h_i + W_ctx c_i + b)
//! ĥ_i = γ_i ⊙ h_i + (1 − γ_i) ⊙ c_i
//! ```
//!
//! The attention projections only shape `α`; values are not projected.
//! With a single candidate there is nothing to attend to and `ĥ_1 = h_1`.

use crate::encoder::{LayerStates, Uniform};
use crate::error::{Error, Result};
use crate::layout::SpanMap;
use crate::pooling::Pooling;
use crate::tape::{AttnMask, NodeId, Tape};
use crate::tensor::{Mat, Scalar};

/// Query and key projections of the interaction attention.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryKeyProjection<T> {
    pub n_heads: usize,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
}

/// Weights are stored `in × out` and applied to row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub attn: QueryKeyProjection<T>,
    pub w_self: Mat<T>,
    pub w_context: Mat<T>,
    pub bias: Mat<T>,
}

impl<T: Scalar> GateParams<T> {
    pub fn init(d_model: usize, n_heads: usize, seed: u64) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "gate heads {n_heads} must divide d_model {d_model}"
            )));
        }
        let mut u = Uniform::new(seed);
        Ok(Self {
            attn: QueryKeyProjection {
                n_heads,
                wq: u.fan_in(d_model, d_model),
                wk: u.fan_in(d_model, d_model),
            },
            w_self: u.mat(d_model, d_model, (1.0 / d_model as f64).sqrt()),
            w_context: u.mat(d_model, d_model, (1.0 / d_model as f64).sqrt()),
            bias: Mat::zeros(1, d_model),
        })
    }

    /// All-zero parameters: uniform attention and `γ = 0.5` everywhere.
    pub fn zeros(d_model: usize, n_heads: usize) -> Self {
        Self {
            attn: QueryKeyProjection {
                n_heads,
                wq: Mat::zeros(d_model, d_model),
                wk: Mat::zeros(d_model, d_model),
            },
            w_self: Mat::zeros(d_model, d_model),
            w_context: Mat::zeros(d_model, d_model),
            bias: Mat::zeros(1, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_self.rows()
    }

    pub fn cast<U: Scalar>(&self) -> GateParams<U> {
        GateParams {
            attn: QueryKeyProjection {
                n_heads: self.attn.n_heads,
                wq: self.attn.wq.cast(),
                wk: self.attn.wk.cast(),
            },
            w_self: self.w_self.cast(),
            w_context: self.w_context.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        vec![
            ("gate.wq".into(), &self.attn.wq),
            ("gate.wk".into(), &self.attn.wk),
            ("gate.w_self".into(), &self.w_self),
            ("gate.w_context".into(), &self.w_context),
            ("gate.bias".into(), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        vec![
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.w_self,
            &mut self.w_context,
            &mut self.bias,
        ]
    }

    /// Records the interaction over `n × d` stacked raw answers. Returns the
    /// gated `n × d` node and the `n × n` weight node, or `None` when `n = 1`.
    pub(crate) fn on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, raw: NodeId) -> Option<(NodeId, NodeId)> {
        if tape.value(raw).rows() < 2 {
            return None;
        }
        let wq = tape.param(&self.attn.wq);
        let wk = tape.param(&self.attn.wk);
        let q = tape.matmul(raw, wq);
        let k = tape.matmul(raw, wk);
        let mask = AttnMask {
            keys: None,
            exclude_diagonal: true,
        };
        let alpha = tape.mean_attention_weights(q, k, self.attn.n_heads, &mask);
        let ctx = tape.convex_mix(alpha, raw);
        let (ws, bias) = (tape.param(&self.w_self), tape.param(&self.bias));
        let wc = tape.param(&self.w_context);
        let from_self = tape.linear(raw, ws, Some(bias));
        let from_ctx = tape.matmul(ctx, wc);
        let pre = tape.add(from_self, from_ctx);
        let gamma = tape.sigmoid(pre);
        let diff = tape.sub(raw, ctx);
        let scaled = tape.mul(gamma, diff);
        let gated = tape.add(ctx, scaled);
        Some((gated, alpha))
    }
}

/// Raw, gated and attention-weight views of the candidate representations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerReps<T> {
    pub raw: Vec<Vec<T>>,
    pub gated: Vec<Vec<T>>,
    /// `weights[i][j]` is the weight of answer `j` for query answer `i`; the
    /// diagonal is zero.
    pub weights: Mat<T>,
    /// Per-head weights before averaging, same layout as `weights`.
    pub head_weights: Vec<Mat<T>>,
}

/// Pools every answer span over the final layer.
pub fn pool_answers<T: Scalar>(states: &LayerStates<T>, spans: &SpanMap, pooling: &Pooling<T>) -> Result<Vec<Vec<T>>> {
    let len = states.seq_len();
    for (i, s) in spans.answers.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Contract(format!("answer span {i} is empty")));
        }
        if s.end > len {
            return Err(Error::Contract(format!(
                "answer span {i} ends at {} beyond sequence length {len}",
                s.end
            )));
        }
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = states.states.iter().map(|m| tape.param(m)).collect();
    Ok(spans
        .answers
        .iter()
        .map(|&s| {
            let n = pooling.answer_on_tape(&mut tape, &ids, s);
            tape.value(n).data().to_vec()
        })
        .collect())
}

/// Applies the gated interaction to pooled answer vectors.
pub fn gated_interaction<T: Scalar>(raw: &[Vec<T>], params: &GateParams<T>) -> Result<AnswerReps<T>> {
    if raw.is_empty() {
        return Err(Error::Contract("no answers to interact".into()));
    }
    let d = params.d_model();
    if let Some(bad) = raw.iter().find(|r| r.len() != d) {
        return Err(Error::Shape(format!("answer width {} but gate expects {d}", bad.len())));
    }
    let n = raw.len();
    let stacked = Mat::from_rows(raw)?;
    let mut tape = Tape::new();
    let h = tape.param(&stacked);
    match params.on_tape(&mut tape, h) {
        None => Ok(AnswerReps {
            raw: raw.to_vec(),
            gated: raw.to_vec(),
            weights: Mat::zeros(n, n),
            head_weights: vec![Mat::zeros(n, n); params.attn.n_heads],
        }),
        Some((gated, alpha)) => {
            let g = tape.value(gated);
            let probs = tape.attention_probs(alpha).expect("attention weights node");
            let head_weights = probs
                .chunks(n * n)
                .map(|h| Mat::from_vec(n, n, h.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok(AnswerReps {
                raw: raw.to_vec(),
                gated: (0..n).map(|i| g.row(i).to_vec()).collect(),
                weights: tape.value(alpha).clone(),
                head_weights,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Span;

    #[test]
    fn single_answer_mean_pool() {
        let rows = Mat::from_rows(&[vec![2.0f64, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let states = LayerStates { states: vec![rows] };
        let spans = SpanMap {
            question: Span::inclusive(0, 0),
            answers: vec![Span::inclusive(0, 2)],
        };
        let pooled = pool_answers(&states, &spans, &Pooling::Mean).unwrap();
        assert_eq!(pooled, vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn out_of_range_span_is_contract_error() {
        let states = LayerStates {
            states: vec![Mat::<f64>::zeros(3, 2)],
        };
        let spans = SpanMap {
            question: Span::inclusive(0, 0),
            answers: vec![Span::new(2, 2)],
        };
        assert!(matches!(pool_answers(&states, &spans, &Pooling::Max), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_parameters_average_two_answers() {
        let p = GateParams::<f64>::zeros(3, 1);
        let raw = vec![vec![1.0, -2.0, 4.0], vec![3.0, 0.0, -1.0]];
        let reps = gated_interaction(&raw, &p).unwrap();
        for j in 0..3 {
            let want = 0.5 * raw[0][j] + 0.5 * raw[1][j];
            assert!((reps.gated[0][j] - want).abs() < 1e-15);
        }
        assert_eq!(reps.weights.get(0, 1), 1.0);
        assert_eq!(reps.weights.get(0, 0), 0.0);
    }

    #[test]
    fn identical_answers_are_a_fixed_point() {
        let p = GateParams::<f64>::init(4, 2, 9).unwrap();
        let h = vec![0.3, -1.7, 2.2, 0.01];
        for n in 2..=6 {
            let reps = gated_interaction(&vec![h.clone(); n], &p).unwrap();
            for g in &reps.gated {
                assert_eq!(g, &h);
            }
        }
    }

    #[test]
    fn single_answer_bypasses_gate() {
        let p = GateParams::<f64>::init(4, 2, 9).unwrap();
        let raw = vec![vec![0.5, 1.5, -2.5, 3.5]];
        let reps = gated_interaction(&raw, &p).unwrap();
        assert_eq!(reps.gated, raw);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let p = GateParams::<f64>::init(4, 2, 9).unwrap();
        assert!(matches!(
            gated_interaction(&[vec![1.0; 4], vec![1.0; 3]], &p),
            Err(Error::Shape(_))
        ));
        assert!(GateParams::<f64>::init(4, 3, 0).is_err());
    }
}
