//! Dataset records, vocabulary, tokenization and the synthetic key/lock task.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Default cap on question and answer token counts at load time.
pub const DEFAULT_MAX_TOKENS: usize = 64;

/// A question with an ordered candidate list and the index of the correct one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: Vec<TokenId>,
    pub answers: Vec<Vec<TokenId>>,
    pub gold: usize,
}

impl QAInstance {
    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    /// Checks the structural invariants. `min_answers` is 2 for datasets;
    /// single-candidate instances are only built for equivalence checks.
    pub fn validate(&self, vocab_size: usize, min_answers: usize) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                message,
            })
        };
        if self.answers.len() < min_answers {
            return fail(format!(
                "{} candidates, at least {min_answers} required",
                self.answers.len()
            ));
        }
        if self.gold >= self.answers.len() {
            return fail(format!(
                "gold index {} out of range for {} candidates",
                self.gold,
                self.answers.len()
            ));
        }
        if self.question.is_empty() {
            return fail("empty question".into());
        }
        if let Some(i) = self.answers.iter().position(Vec::is_empty) {
            return fail(format!("candidate {i} is empty"));
        }
        let too_big = self
            .question
            .iter()
            .chain(self.answers.iter().flatten())
            .find(|&&t| t as usize >= vocab_size);
        if let Some(t) = too_big {
            return fail(format!("token id {t} outside vocabulary of size {vocab_size}"));
        }
        Ok(())
    }
}

/// Word-level vocabulary. Ids below [`NUM_RESERVED`] are never assigned to
/// surface tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self {
            tokens: RESERVED_NAMES.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        }
    }

    /// Builds a vocabulary from surface tokens in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for text in texts {
            for w in split_words(text) {
                v.insert(&w);
            }
        }
        v
    }

    /// Restores a vocabulary from its surface tokens listed in id order
    /// (reserved entries excluded).
    pub fn from_surface_tokens(tokens: &[String]) -> Result<Self> {
        let mut v = Self::new();
        for t in tokens {
            if v.index.contains_key(t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn surface_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Lowercase whitespace tokenization; unknown words map to [`UNK`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    split_words(text)
        .map(|w| vocab.id(&w).unwrap_or(UNK))
        .collect()
}

/// One line of a JSON Lines dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: i64,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Question and answer token lists are truncated from the right to this length.
    pub max_tokens: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// Parses JSON Lines text into records. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_records(text: &str) -> Result<Vec<(usize, DatasetRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Tokenizes and validates parsed records. When `vocab` is `None` a
/// vocabulary is built from all records first.
pub fn instances_from_records(
    records: &[(usize, DatasetRecord)],
    vocab: Option<&Vocab>,
    options: LoadOptions,
) -> Result<(Vec<QAInstance>, Vocab)> {
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::build(records.iter().flat_map(|(_, r)| {
            std::iter::once(r.question.as_str()).chain(r.choices.iter().map(String::as_str))
        })),
    };
    let mut instances = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let invalid = |message: String| Error::Validation {
            id: rec.id.clone(),
            message: format!("line {line}: {message}"),
        };
        let n = rec.choices.len();
        if rec.answer_index < 0 || rec.answer_index as u64 >= n as u64 {
            return Err(invalid(format!(
                "answer_index {} out of range for {n} choices",
                rec.answer_index
            )));
        }
        let mut question = tokenize(&rec.question, &vocab);
        question.truncate(options.max_tokens);
        let mut answers = Vec::with_capacity(n);
        for (i, c) in rec.choices.iter().enumerate() {
            let mut a = tokenize(c, &vocab);
            if a.is_empty() {
                return Err(invalid(format!("choice {i} has no tokens")));
            }
            a.truncate(options.max_tokens);
            answers.push(a);
        }
        let inst = QAInstance {
            id: rec.id.clone(),
            question,
            answers,
            gold: rec.answer_index as usize,
        };
        inst.validate(vocab.len(), 2).map_err(|e| match e {
            Error::Validation { id, message } => Error::Validation {
                id,
                message: format!("line {line}: {message}"),
            },
            other => other,
        })?;
        instances.push(inst);
    }
    Ok((instances, vocab))
}

/// Parses dataset text end to end.
pub fn parse_dataset(
    text: &str,
    vocab: Option<&Vocab>,
    options: LoadOptions,
) -> Result<(Vec<QAInstance>, Vocab)> {
    let records = parse_records(text)?;
    instances_from_records(&records, vocab, options)
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: Option<&Vocab>) -> Result<(Vec<QAInstance>, Vocab)> {
    load_dataset_with(path, vocab, LoadOptions::default())
}

pub fn load_dataset_with(
    path: impl AsRef<Path>,
    vocab: Option<&Vocab>,
    options: LoadOptions,
) -> Result<(Vec<QAInstance>, Vocab)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, vocab, options)
}

/// Renders instances back to records using `vocab` for surface forms.
pub fn to_records(instances: &[QAInstance], vocab: &Vocab) -> Vec<DatasetRecord> {
    instances
        .iter()
        .map(|inst| DatasetRecord {
            id: inst.id.clone(),
            question: vocab.decode(&inst.question),
            choices: inst.answers.iter().map(|a| vocab.decode(a)).collect(),
            answer_index: inst.gold as i64,
        })
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[QAInstance], vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for rec in to_records(instances, vocab) {
        serde_json::to_writer(&mut out, &rec).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

// ---- synthetic key/lock task ----

/// Number of key symbols (and of lock symbols); bounds the candidate count.
pub const SYNTHETIC_SYMBOLS: usize = 16;
const SYNTHETIC_FILLER: usize = 48;

/// The lock that opens `key`. Multiplication by 5 is a bijection mod 16.
pub fn lock_for_key(key: usize) -> usize {
    (5 * key + 3) % SYNTHETIC_SYMBOLS
}

/// Fixed vocabulary shared by every synthetic split: `key*`, `lock*`, `w*`.
pub fn synthetic_vocab() -> Vocab {
    let mut v = Vocab::new();
    for k in 0..SYNTHETIC_SYMBOLS {
        v.insert(&format!("key{k}"));
    }
    for k in 0..SYNTHETIC_SYMBOLS {
        v.insert(&format!("lock{k}"));
    }
    for k in 0..SYNTHETIC_FILLER {
        v.insert(&format!("w{k}"));
    }
    v
}

fn key_id(k: usize) -> TokenId {
    (NUM_RESERVED + k) as TokenId
}

fn lock_id(k: usize) -> TokenId {
    (NUM_RESERVED + SYNTHETIC_SYMBOLS + k) as TokenId
}

fn filler_id(k: usize) -> TokenId {
    (NUM_RESERVED + 2 * SYNTHETIC_SYMBOLS + k) as TokenId
}

/// Shape of a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_instances: usize,
    pub num_answers: usize,
    pub question_len: usize,
    pub answer_len: usize,
}

/// Generates key/lock instances: each question holds one key token among
/// fillers, the gold candidate holds the matching lock and every distractor
/// holds a different lock in the same filler template.
pub fn generate_synthetic(
    num_instances: usize,
    n: usize,
    q_len: usize,
    a_len: usize,
    seed: u64,
) -> Result<Vec<QAInstance>> {
    if num_instances == 0 || q_len == 0 || a_len == 0 {
        return Err(Error::Config("synthetic counts and lengths must be >= 1".into()));
    }
    if !(2..=SYNTHETIC_SYMBOLS).contains(&n) {
        return Err(Error::Config(format!(
            "synthetic candidate count must be in 2..={SYNTHETIC_SYMBOLS}, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_instances);
    for i in 0..num_instances {
        let key = rng.random_range(0..SYNTHETIC_SYMBOLS);
        let mut question: Vec<TokenId> = (0..q_len)
            .map(|_| filler_id(rng.random_range(0..SYNTHETIC_FILLER)))
            .collect();
        question[rng.random_range(0..q_len)] = key_id(key);

        let gold = rng.random_range(0..n);
        let right = lock_for_key(key);
        let mut wrong: Vec<usize> = (0..SYNTHETIC_SYMBOLS).filter(|&l| l != right).collect();
        wrong.shuffle(&mut rng);
        let mut wrong = wrong.into_iter();

        // Candidates share one filler template and lock slot, so only the
        // lock token distinguishes them.
        let template: Vec<TokenId> = (0..a_len)
            .map(|_| filler_id(rng.random_range(0..SYNTHETIC_FILLER)))
            .collect();
        let slot = rng.random_range(0..a_len);
        let answers = (0..n)
            .map(|j| {
                let lock = if j == gold {
                    right
                } else {
                    wrong.next().expect("enough distinct locks")
                };
                let mut a = template.clone();
                a[slot] = lock_id(lock);
                a
            })
            .collect();
        out.push(QAInstance {
            id: format!("syn-{seed}-{i}"),
            question,
            answers,
            gold,
        });
    }
    Ok(out)
}

pub fn generate_synthetic_spec(spec: SyntheticSpec, seed: u64) -> Result<Vec<QAInstance>> {
    generate_synthetic(
        spec.num_instances,
        spec.num_answers,
        spec.question_len,
        spec.answer_len,
        seed,
    )
}

/// Train, dev and test splits drawn with distinct derived seeds.
pub struct SyntheticSplits {
    pub train: Vec<QAInstance>,
    pub dev: Vec<QAInstance>,
    pub test: Vec<QAInstance>,
}

pub fn synthetic_splits(
    sizes: [usize; 3],
    n: usize,
    q_len: usize,
    a_len: usize,
    seed: u64,
) -> Result<SyntheticSplits> {
    let derive = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    Ok(SyntheticSplits {
        train: generate_synthetic(sizes[0], n, q_len, a_len, derive(1))?,
        dev: generate_synthetic(sizes[1], n, q_len, a_len, derive(2))?,
        test: generate_synthetic(sizes[2], n, q_len, a_len, derive(3))?,
    })
}
