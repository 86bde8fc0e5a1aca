//! Encoder input sequences and span maps for the three encoding schemes.
//!
//! Every layout shares one grammar:
//!
//! ```text
//! <s> Q [</s> X_1 ... </s> X_m] </s>_1 (</s> A_k)* </s>
//! ```
//!
//! where `X_*` are candidates appended to the question (nAnP and the
//! append pilot only) and `A_k` are the scored candidates. The question
//! span runs from `<s>` to `</s>_1`; each answer span covers its answer and
//! both flanking separators, so neighbouring answer spans share one
//! separator position.

use serde::{Deserialize, Serialize};

use crate::data::{QAInstance, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Half-open range of sequence positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Span from `first` to `last`, both inclusive.
    pub fn inclusive(first: usize, last: usize) -> Self {
        Self {
            start: first,
            end: last + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last(&self) -> usize {
        self.end - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    fn unpadded(ids: Vec<TokenId>) -> Self {
        let attention_mask = vec![true; ids.len()];
        Self { ids, attention_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Right-pads with [`PAD`] up to `len`.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        if len > out.ids.len() {
            out.ids.resize(len, PAD);
            out.attention_mask.resize(len, false);
        }
        out
    }
}

/// Pads every sequence to the batch maximum.
pub fn pad_batch(seqs: &[TokenSequence]) -> Vec<TokenSequence> {
    let max = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    seqs.iter().map(|s| s.padded_to(max)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMap {
    pub question: Span,
    pub answers: Vec<Span>,
}

fn frame(
    question: &[TokenId],
    appended: &[&[TokenId]],
    answers: &[&[TokenId]],
    max_len: Option<usize>,
) -> Result<(TokenSequence, SpanMap)> {
    let fixed: usize = 3
        + appended.iter().map(|a| a.len() + 1).sum::<usize>()
        + answers.iter().map(|a| a.len() + 1).sum::<usize>();
    let full = fixed + question.len();
    let keep = match max_len {
        Some(max) if full > max => {
            let excess = full - max;
            if excess > question.len() {
                return Err(Error::Length { len: full, max });
            }
            question.len() - excess
        }
        _ => question.len(),
    };

    let mut ids = Vec::with_capacity(fixed + keep);
    ids.push(BOS);
    ids.extend_from_slice(&question[..keep]);
    for a in appended {
        ids.push(EOS);
        ids.extend_from_slice(a);
    }
    ids.push(EOS);
    let question_span = Span::inclusive(0, ids.len() - 1);
    let mut spans = Vec::with_capacity(answers.len());
    for a in answers {
        let start = ids.len();
        ids.push(EOS);
        ids.extend_from_slice(a);
        spans.push(Span::inclusive(start, ids.len()));
    }
    ids.push(EOS);
    Ok((
        TokenSequence::unpadded(ids),
        SpanMap {
            question: question_span,
            answers: spans,
        },
    ))
}

fn check_index(instance: &QAInstance, i: usize) -> Result<()> {
    if i >= instance.answers.len() {
        return Err(Error::Contract(format!(
            "candidate index {i} out of range for {} candidates",
            instance.answers.len()
        )));
    }
    Ok(())
}

/// `[<s>, Q, </s>, </s>, A_i, </s>]`: one pass per candidate.
pub fn layout_1anp(instance: &QAInstance, i: usize) -> Result<(TokenSequence, SpanMap)> {
    layout_appended(instance, i, &[], None)
}

/// Appends every candidate to the question, then frames `A_i` as in 1AnP.
pub fn layout_nanp(instance: &QAInstance, i: usize) -> Result<(TokenSequence, SpanMap)> {
    let all: Vec<usize> = (0..instance.answers.len()).collect();
    layout_appended(instance, i, &all, None)
}

/// Single pass over the question and all candidates.
pub fn layout_na1p(instance: &QAInstance) -> Result<(TokenSequence, SpanMap)> {
    layout_na1p_fit(instance, None)
}

/// 1AnP frame for candidate `i` with the candidates listed in `appended`
/// (in that order) attached to the question. With `max_len`, question
/// tokens are truncated from the right until the layout fits; answer
/// tokens are never truncated.
pub fn layout_appended(
    instance: &QAInstance,
    i: usize,
    appended: &[usize],
    max_len: Option<usize>,
) -> Result<(TokenSequence, SpanMap)> {
    check_index(instance, i)?;
    for &j in appended {
        check_index(instance, j)?;
    }
    let extra: Vec<&[TokenId]> = appended.iter().map(|&j| instance.answers[j].as_slice()).collect();
    frame(
        &instance.question,
        &extra,
        &[instance.answers[i].as_slice()],
        max_len,
    )
}

pub fn layout_1anp_fit(
    instance: &QAInstance,
    i: usize,
    max_len: Option<usize>,
) -> Result<(TokenSequence, SpanMap)> {
    layout_appended(instance, i, &[], max_len)
}

pub fn layout_nanp_fit(
    instance: &QAInstance,
    i: usize,
    max_len: Option<usize>,
) -> Result<(TokenSequence, SpanMap)> {
    let all: Vec<usize> = (0..instance.answers.len()).collect();
    layout_appended(instance, i, &all, max_len)
}

pub fn layout_na1p_fit(instance: &QAInstance, max_len: Option<usize>) -> Result<(TokenSequence, SpanMap)> {
    let answers: Vec<&[TokenId]> = instance.answers.iter().map(Vec::as_slice).collect();
    frame(&instance.question, &[], &answers, max_len)
}

/// Unpadded 1AnP length `|Q| + |A_i| + 4`.
pub fn len_1anp(q_len: usize, a_len: usize) -> usize {
    q_len + a_len + 4
}

/// Unpadded nAnP length `|Q| + Σ|A_j| + n + |A_i| + 4`.
pub fn len_nanp(q_len: usize, answer_lens: &[usize], i: usize) -> usize {
    q_len + answer_lens.iter().sum::<usize>() + answer_lens.len() + answer_lens[i] + 4
}

/// Unpadded nA1P length `1 + |Q| + Σ|A_i| + n + 2`.
pub fn len_na1p(q_len: usize, answer_lens: &[usize]) -> usize {
    1 + q_len + answer_lens.iter().sum::<usize>() + answer_lens.len() + 2
}
