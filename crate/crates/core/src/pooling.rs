//! Span pooling: CLS, max, mean, attentive and layerwise-CLS.
//!
//! Max, mean and attentive pooling read the final encoder layer only;
//! layerwise-CLS mixes the `<s>` row of every stored layer, the embedding
//! layer included.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::LayerStates;
use crate::error::{Error, Result};
use crate::layout::Span;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingKind {
    Cls,
    Max,
    Mean,
    Attentive,
    LayerwiseCls,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 5] = [
        PoolingKind::Cls,
        PoolingKind::Max,
        PoolingKind::Mean,
        PoolingKind::Attentive,
        PoolingKind::LayerwiseCls,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Cls => "cls",
            PoolingKind::Max => "max",
            PoolingKind::Mean => "mean",
            PoolingKind::Attentive => "attentive",
            PoolingKind::LayerwiseCls => "layerwise-cls",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling kind {s:?}")))
    }
}

/// A pooling operator together with its learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Pooling<T> {
    Cls,
    Max,
    Mean,
    /// `v` is a `1 × d_model` attention vector.
    Attentive { v: Mat<T> },
    /// `w` holds `1 × (n_layers + 1)` layer logits, softmax-normalized at use.
    LayerwiseCls { w: Mat<T> },
}

impl<T: Scalar> Pooling<T> {
    /// Fresh operator; learnable vectors start at zero (uniform weighting).
    pub fn new(kind: PoolingKind, d_model: usize, n_layers: usize) -> Self {
        match kind {
            PoolingKind::Cls => Pooling::Cls,
            PoolingKind::Max => Pooling::Max,
            PoolingKind::Mean => Pooling::Mean,
            PoolingKind::Attentive => Pooling::Attentive {
                v: Mat::zeros(1, d_model),
            },
            PoolingKind::LayerwiseCls => Pooling::LayerwiseCls {
                w: Mat::zeros(1, n_layers + 1),
            },
        }
    }

    pub fn kind(&self) -> PoolingKind {
        match self {
            Pooling::Cls => PoolingKind::Cls,
            Pooling::Max => PoolingKind::Max,
            Pooling::Mean => PoolingKind::Mean,
            Pooling::Attentive { .. } => PoolingKind::Attentive,
            Pooling::LayerwiseCls { .. } => PoolingKind::LayerwiseCls,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Pooling<U> {
        match self {
            Pooling::Cls => Pooling::Cls,
            Pooling::Max => Pooling::Max,
            Pooling::Mean => Pooling::Mean,
            Pooling::Attentive { v } => Pooling::Attentive { v: v.cast() },
            Pooling::LayerwiseCls { w } => Pooling::LayerwiseCls { w: w.cast() },
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        match self {
            Pooling::Attentive { v } => vec![("pooling.attention_vector".into(), v)],
            Pooling::LayerwiseCls { w } => vec![("pooling.layer_logits".into(), w)],
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        match self {
            Pooling::Attentive { v } => vec![v],
            Pooling::LayerwiseCls { w } => vec![w],
            _ => Vec::new(),
        }
    }

    /// Records pooling of the question span.
    pub(crate) fn question_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, states: &[NodeId], span: Span) -> NodeId {
        let last = *states.last().expect("at least one layer");
        match self {
            Pooling::Cls => tape.row(last, span.start),
            Pooling::Max => tape.rows_max(last, span.start, span.end),
            Pooling::Mean => tape.rows_mean(last, span.start, span.end),
            Pooling::Attentive { v } => {
                let v = tape.param(v);
                tape.rows_attentive(last, v, span.start, span.end)
            }
            Pooling::LayerwiseCls { w } => {
                let w = tape.param(w);
                tape.layer_mix(states, span.start, w)
            }
        }
    }

    /// Records pooling of an answer span. An answer span has no `<s>` token,
    /// so both CLS variants pool answers by mean.
    pub(crate) fn answer_on_tape<'a>(&'a self, tape: &mut Tape<'a, T>, states: &[NodeId], span: Span) -> NodeId {
        let last = *states.last().expect("at least one layer");
        match self {
            Pooling::Max => tape.rows_max(last, span.start, span.end),
            Pooling::Attentive { v } => {
                let v = tape.param(v);
                tape.rows_attentive(last, v, span.start, span.end)
            }
            Pooling::Cls | Pooling::Mean | Pooling::LayerwiseCls { .. } => {
                tape.rows_mean(last, span.start, span.end)
            }
        }
    }
}

fn non_empty<T: Scalar>(rows: &Mat<T>) -> Result<()> {
    if rows.rows() == 0 {
        return Err(Error::Contract("cannot pool an empty span".into()));
    }
    Ok(())
}

/// Final-layer row at `<s>`; the span must start at position 0.
pub fn pool_cls<T: Scalar>(states: &LayerStates<T>, span: Span) -> Result<Vec<T>> {
    if span.start != 0 || span.is_empty() {
        return Err(Error::Contract(format!(
            "CLS pooling needs a span starting at position 0, got {}..{}",
            span.start, span.end
        )));
    }
    Ok(states.final_layer().row(0).to_vec())
}

/// Elementwise maximum over rows.
pub fn pool_max<T: Scalar>(rows: &Mat<T>) -> Result<Vec<T>> {
    non_empty(rows)?;
    let mut tape = Tape::new();
    let x = tape.param(rows);
    let y = tape.rows_max(x, 0, rows.rows());
    Ok(tape.value(y).data().to_vec())
}

/// Arithmetic mean over rows.
pub fn pool_mean<T: Scalar>(rows: &Mat<T>) -> Result<Vec<T>> {
    non_empty(rows)?;
    let mut tape = Tape::new();
    let x = tape.param(rows);
    let y = tape.rows_mean(x, 0, rows.rows());
    Ok(tape.value(y).data().to_vec())
}

/// Softmax weights `softmax_t(⟨row_t, v⟩)` used by [`pool_attentive`].
pub fn attentive_weights<T: Scalar>(rows: &Mat<T>, v: &[T]) -> Result<Vec<T>> {
    non_empty(rows)?;
    check_width(rows.cols(), v.len())?;
    let mut w: Vec<T> = (0..rows.rows()).map(|r| crate::tensor::dot(rows.row(r), v)).collect();
    crate::tensor::softmax(&mut w);
    Ok(w)
}

/// `Σ_t softmax_t(⟨row_t, v⟩) · row_t`.
pub fn pool_attentive<T: Scalar>(rows: &Mat<T>, v: &[T]) -> Result<Vec<T>> {
    non_empty(rows)?;
    check_width(rows.cols(), v.len())?;
    let vm = Mat::row_vector(v.to_vec());
    let mut tape = Tape::new();
    let x = tape.param(rows);
    let vi = tape.param(&vm);
    let y = tape.rows_attentive(x, vi, 0, rows.rows());
    Ok(tape.value(y).data().to_vec())
}

/// `Σ_ℓ softmax(w)_ℓ · states[ℓ][0]`.
pub fn pool_layerwise_cls<T: Scalar>(states: &LayerStates<T>, w: &[T]) -> Result<Vec<T>> {
    if w.len() != states.num_layers() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} stored layers",
            w.len(),
            states.num_layers()
        )));
    }
    let wm = Mat::row_vector(w.to_vec());
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = states.states.iter().map(|m| tape.param(m)).collect();
    let wi = tape.param(&wm);
    let y = tape.layer_mix(&ids, 0, wi);
    Ok(tape.value(y).data().to_vec())
}

fn check_width(d: usize, v: usize) -> Result<()> {
    if d != v {
        return Err(Error::Shape(format!("rows of width {d} with attention vector of width {v}")));
    }
    Ok(())
}
