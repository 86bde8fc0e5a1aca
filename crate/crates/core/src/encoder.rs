//! A small pre-norm transformer encoder producing per-layer hidden states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::layout::TokenSequence;
use crate::tape::{AttnMask, NodeId, Tape};
use crate::tensor::{lit, Mat, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 128,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count for a vocabulary of `vocab_size`.
    pub fn param_count(&self, vocab_size: usize) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 2 * 2 * d // two layer norms
            + 4 * d * d + 3 * d // q, k, v, o weights; q, v, o biases
            + d * f + f + f * d + d;
        (vocab_size + self.max_len) * d + self.n_layers * per_layer + 2 * d
    }

    /// Floats recorded by one eval-mode [`encode`] of a `seq_len`-token
    /// sequence, backward caches included.
    pub fn activation_floats(&self, seq_len: usize) -> usize {
        let (l, d) = (seq_len, self.d_model);
        let per_layer = 11 * l * d + 2 * l * self.d_ff + self.n_heads * l * l + 4 * l;
        // Embeddings, then the final layer norm with its row mask.
        4 * l * d + self.n_layers * per_layer + 2 * l * d + 2 * l
    }
}

/// Attention projections. Weights are stored `in × out` and applied to row
/// vectors. The key projection has no bias: it would only shift every logit
/// of a query row by the same amount.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T> {
    pub n_heads: usize,
    pub wq: Mat<T>,
    pub bq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub bv: Mat<T>,
    pub wo: Mat<T>,
    pub bo: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Mat<T>,
    pub ln1_bias: Mat<T>,
    pub attn: MhaParams<T>,
    pub ln2_gain: Mat<T>,
    pub ln2_bias: Mat<T>,
    pub ff_in: Mat<T>,
    pub ff_in_bias: Mat<T>,
    pub ff_out: Mat<T>,
    pub ff_out_bias: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub token_embedding: Mat<T>,
    pub position_embedding: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Applied to the last layer's output, which all pooling reads.
    pub final_ln_gain: Mat<T>,
    pub final_ln_bias: Mat<T>,
}

pub(crate) struct Uniform {
    rng: ChaCha8Rng,
}

impl Uniform {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `rows × cols` matrix with entries from U(−a, a).
    pub(crate) fn mat<T: Scalar>(&mut self, rows: usize, cols: usize, a: f64) -> Mat<T> {
        let data = (0..rows * cols)
            .map(|_| lit(a * (2.0 * self.rng.random::<f64>() - 1.0)))
            .collect();
        Mat::from_vec(rows, cols, data).expect("sized buffer")
    }

    /// U(−√(3/fan_in), √(3/fan_in)): unit-variance inputs give unit-variance outputs.
    pub(crate) fn fan_in<T: Scalar>(&mut self, rows: usize, cols: usize) -> Mat<T> {
        self.mat(rows, cols, (3.0 / rows as f64).sqrt())
    }
}

impl<T: Scalar> MhaParams<T> {
    pub(crate) fn init(d: usize, n_heads: usize, u: &mut Uniform) -> Self {
        Self {
            n_heads,
            wq: u.fan_in(d, d),
            bq: Mat::zeros(1, d),
            wk: u.fan_in(d, d),
            wv: u.fan_in(d, d),
            bv: Mat::zeros(1, d),
            wo: u.fan_in(d, d),
            bo: Mat::zeros(1, d),
        }
    }

    fn cast<U: Scalar>(&self) -> MhaParams<U> {
        MhaParams {
            n_heads: self.n_heads,
            wq: self.wq.cast(),
            bq: self.bq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            bv: self.bv.cast(),
            wo: self.wo.cast(),
            bo: self.bo.cast(),
        }
    }

    fn tensors<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Mat<T>)>) {
        for (name, m) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.{name}"), m));
        }
    }

    fn tensors_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Mat<T>>) {
        out.extend([
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]);
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    attn: l.attn.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    ff_in: l.ff_in.cast(),
                    ff_in_bias: l.ff_in_bias.cast(),
                    ff_out: l.ff_out.cast(),
                    ff_out_bias: l.ff_out_bias.cast(),
                })
                .collect(),
            final_ln_gain: self.final_ln_gain.cast(),
            final_ln_bias: self.final_ln_bias.cast(),
        }
    }

    /// Named tensors in a fixed order; [`Self::tensors_mut`] yields the same order.
    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &self.token_embedding),
            ("encoder.position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            out.push((format!("{p}.ln1_gain"), &l.ln1_gain));
            out.push((format!("{p}.ln1_bias"), &l.ln1_bias));
            l.attn.tensors(&format!("{p}.attn"), &mut out);
            out.push((format!("{p}.ln2_gain"), &l.ln2_gain));
            out.push((format!("{p}.ln2_bias"), &l.ln2_bias));
            out.push((format!("{p}.ff_in"), &l.ff_in));
            out.push((format!("{p}.ff_in_bias"), &l.ff_in_bias));
            out.push((format!("{p}.ff_out"), &l.ff_out));
            out.push((format!("{p}.ff_out_bias"), &l.ff_out_bias));
        }
        out.push(("encoder.final_ln_gain".to_string(), &self.final_ln_gain));
        out.push(("encoder.final_ln_bias".to_string(), &self.final_ln_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            l.attn.tensors_mut(&mut out);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.ff_in);
            out.push(&mut l.ff_in_bias);
            out.push(&mut l.ff_out);
            out.push(&mut l.ff_out_bias);
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Draws encoder weights from scaled uniform distributions; layer-norm gains
/// start at one and every bias at zero.
pub fn init_encoder<T: Scalar>(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<EncoderParams<T>> {
    config.validate()?;
    if vocab_size == 0 {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    let (d, f) = (config.d_model, config.d_ff);
    let mut u = Uniform::new(seed);
    let emb = 1.5f64.sqrt();
    let token_embedding = u.mat(vocab_size, d, emb);
    let position_embedding = u.mat(config.max_len, d, emb);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: Mat::filled(1, d, T::one()),
            ln1_bias: Mat::zeros(1, d),
            attn: MhaParams::init(d, config.n_heads, &mut u),
            ln2_gain: Mat::filled(1, d, T::one()),
            ln2_bias: Mat::zeros(1, d),
            ff_in: u.fan_in(d, f),
            ff_in_bias: Mat::zeros(1, f),
            ff_out: u.fan_in(f, d),
            ff_out_bias: Mat::zeros(1, d),
        })
        .collect();
    Ok(EncoderParams {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain: Mat::filled(1, d, T::one()),
        final_ln_bias: Mat::zeros(1, d),
    })
}

/// Hidden states of the embedding layer followed by every transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates<T> {
    pub states: Vec<Mat<T>>,
}

impl<T: Scalar> LayerStates<T> {
    pub fn final_layer(&self) -> &Mat<T> {
        self.states.last().expect("at least the embedding layer")
    }

    pub fn num_layers(&self) -> usize {
        self.states.len()
    }

    pub fn seq_len(&self) -> usize {
        self.final_layer().rows()
    }
}

/// Source of inverted-dropout masks during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn scale<T: Scalar>(&mut self, len: usize) -> Vec<T> {
        let keep = lit::<T>(1.0 / (1.0 - self.rate));
        (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

/// Node ids produced by [`encode_on_tape`].
pub struct EncodedNodes {
    /// One node per stored layer, embedding layer first.
    pub states: Vec<NodeId>,
    /// The self-attention node of each transformer layer.
    pub attention: Vec<NodeId>,
}

fn check_sequence(seq: &TokenSequence, config: &EncoderConfig, vocab_size: usize) -> Result<()> {
    if seq.ids.len() > config.max_len {
        return Err(Error::Length {
            len: seq.ids.len(),
            max: config.max_len,
        });
    }
    if seq.ids.is_empty() {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    if seq.attention_mask.len() != seq.ids.len() {
        return Err(Error::Shape(format!(
            "attention mask length {} differs from sequence length {}",
            seq.attention_mask.len(),
            seq.ids.len()
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::Contract(format!(
            "token id {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

/// Records an encoder forward pass. Padded positions are excluded as
/// attention keys and zeroed in every stored layer.
pub fn encode_on_tape<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    seq: &TokenSequence,
    params: &'a EncoderParams<T>,
    mut dropout: Option<Dropout<'_>>,
) -> Result<EncodedNodes> {
    let config = &params.config;
    check_sequence(seq, config, params.vocab_size())?;
    let ids: Vec<usize> = seq.ids.iter().map(|&t: &TokenId| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let keep = &seq.attention_mask;
    let mask = AttnMask {
        keys: Some(keep.clone()),
        exclude_diagonal: false,
    };
    if let Some(d) = &dropout {
        if d.rate == 0.0 {
            dropout = None;
        }
    }

    let tok_table = tape.param(&params.token_embedding);
    let pos_table = tape.param(&params.position_embedding);
    let tok = tape.gather(tok_table, &ids);
    let pos = tape.gather(pos_table, &positions);
    let x = tape.add(tok, pos);
    let mut x = tape.mask_rows(x, keep);
    let mut states = vec![x];
    let mut attention = Vec::with_capacity(params.layers.len());

    for layer in &params.layers {
        let a = &layer.attn;
        let (g1, b1) = (tape.param(&layer.ln1_gain), tape.param(&layer.ln1_bias));
        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS);
        let (wq, bq) = (tape.param(&a.wq), tape.param(&a.bq));
        let wk = tape.param(&a.wk);
        let (wv, bv) = (tape.param(&a.wv), tape.param(&a.bv));
        let q = tape.linear(h, wq, Some(bq));
        let k = tape.linear(h, wk, None);
        let v = tape.linear(h, wv, Some(bv));
        let ctx = tape.attention(q, k, v, a.n_heads, &mask);
        attention.push(ctx);
        let (wo, bo) = (tape.param(&a.wo), tape.param(&a.bo));
        let mut o = tape.linear(ctx, wo, Some(bo));
        if let Some(d) = dropout.as_mut() {
            let s = d.scale(tape.value(o).len());
            o = tape.dropout(o, s);
        }
        x = tape.add(x, o);

        let (g2, b2) = (tape.param(&layer.ln2_gain), tape.param(&layer.ln2_bias));
        let h = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS);
        let (w1, c1) = (tape.param(&layer.ff_in), tape.param(&layer.ff_in_bias));
        let f = tape.linear(h, w1, Some(c1));
        let f = tape.gelu(f);
        let (w2, c2) = (tape.param(&layer.ff_out), tape.param(&layer.ff_out_bias));
        let mut f = tape.linear(f, w2, Some(c2));
        if let Some(d) = dropout.as_mut() {
            let s = d.scale(tape.value(f).len());
            f = tape.dropout(f, s);
        }
        x = tape.add(x, f);
        x = tape.mask_rows(x, keep);
        states.push(x);
    }
    let (g, b) = (tape.param(&params.final_ln_gain), tape.param(&params.final_ln_bias));
    let last = states.pop().expect("at least one layer");
    let normed = tape.layer_norm(last, g, b, LAYER_NORM_EPS);
    states.push(tape.mask_rows(normed, keep));
    Ok(EncodedNodes { states, attention })
}

/// Eval-mode forward pass.
pub fn encode<T: Scalar>(seq: &TokenSequence, params: &EncoderParams<T>) -> Result<LayerStates<T>> {
    Ok(encode_traced(seq, params)?.0)
}

/// Per-layer attention probabilities, `[head][query][key]` flattened.
pub type AttentionTrace<T> = Vec<Vec<T>>;

/// Eval-mode forward pass that also returns every layer's attention probabilities.
pub fn encode_traced<T: Scalar>(
    seq: &TokenSequence,
    params: &EncoderParams<T>,
) -> Result<(LayerStates<T>, AttentionTrace<T>)> {
    let mut tape = Tape::new();
    let nodes = encode_on_tape(&mut tape, seq, params, None)?;
    let states = nodes.states.iter().map(|&n| tape.value(n).clone()).collect();
    let probs = nodes
        .attention
        .iter()
        .map(|&n| tape.attention_probs(n).expect("attention node").to_vec())
        .collect();
    Ok((LayerStates { states }, probs))
}

/// Multi-head attention of `query` rows over `keys`/`values` rows. Returns
/// the output-projected context and the head-averaged attention weights.
pub fn mha<T: Scalar>(
    query: &Mat<T>,
    keys: &Mat<T>,
    values: &Mat<T>,
    params: &MhaParams<T>,
    key_mask: Option<&[bool]>,
) -> Result<(Mat<T>, Mat<T>)> {
    let d = params.wq.rows();
    for (name, m) in [("query", query), ("keys", keys), ("values", values)] {
        if m.cols() != d {
            return Err(Error::Shape(format!("{name} width {} but projections expect {d}", m.cols())));
        }
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if !params.wq.cols().is_multiple_of(params.n_heads) {
        return Err(Error::Shape(format!(
            "projection width {} not divisible by {} heads",
            params.wq.cols(),
            params.n_heads
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != keys.rows() {
            return Err(Error::Shape(format!("key mask length {} for {} keys", m.len(), keys.rows())));
        }
    }
    let mut tape = Tape::new();
    let (qi, ki, vi) = (
        tape.input(query.clone()),
        tape.input(keys.clone()),
        tape.input(values.clone()),
    );
    let (wq, bq, wk) = (tape.param(&params.wq), tape.param(&params.bq), tape.param(&params.wk));
    let (wv, bv) = (tape.param(&params.wv), tape.param(&params.bv));
    let (wo, bo) = (tape.param(&params.wo), tape.param(&params.bo));
    let q = tape.linear(qi, wq, Some(bq));
    let k = tape.linear(ki, wk, None);
    let v = tape.linear(vi, wv, Some(bv));
    let mask = AttnMask {
        keys: key_mask.map(<[bool]>::to_vec),
        exclude_diagonal: false,
    };
    let ctx = tape.attention(q, k, v, params.n_heads, &mask);
    let weights = tape.mean_attention_weights(q, k, params.n_heads, &mask);
    let out = tape.linear(ctx, wo, Some(bo));
    Ok((tape.value(out).clone(), tape.value(weights).clone()))
}

/// Row-wise layer normalization with gain and bias.
pub fn layer_norm<T: Scalar>(x: &Mat<T>, gain: &Mat<T>, bias: &Mat<T>) -> Result<Mat<T>> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Shape(format!(
            "layer norm over width {} with gain {} and bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    let mut tape = Tape::new();
    let xi = tape.input(x.clone());
    let (g, b) = (tape.param(gain), tape.param(bias));
    let y = tape.layer_norm(xi, g, b, LAYER_NORM_EPS);
    Ok(tape.value(y).clone())
}
