//! Code/summary corpora: JSON Lines ingestion, word-level vocabulary,
//! tokenization, splitting and few-shot example selection.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Id that separates code from summary in the language model's context.
/// Reuses BOS: it opens the summary segment and no text tokenizes to it.
pub const SEP: u32 = BOS;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_CODE_MAX_LEN: usize = 256;
pub const DEFAULT_SUMMARY_MAX_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSummaryPair {
    pub code: String,
    pub summary: String,
    pub language: String,
}

impl CodeSummaryPair {
    /// Builds a pair, collapsing whitespace in the summary so it is one line.
    pub fn new(code: impl Into<String>, summary: &str, language: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let summary = collapse_whitespace(summary);
        if code.trim().is_empty() {
            return Err(Error::Input("code is empty".into()));
        }
        if summary.is_empty() {
            return Err(Error::Input("summary is empty".into()));
        }
        Ok(CodeSummaryPair {
            code,
            summary,
            language: language.into(),
        })
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercases, trims and strips trailing punctuation; applied to both sides
/// before metric computation.
pub fn normalize_summary(s: &str) -> String {
    let collapsed = collapse_whitespace(&s.to_lowercase());
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Whitespace-and-punctuation tokenization. Runs of alphanumeric characters
/// form one token; every other non-space character is its own token.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// A malformed input line that was skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub pairs: Vec<CodeSummaryPair>,
    pub errors: Vec<LineError>,
}

/// Reads CodeXGLUE-style JSON Lines (`code`, `docstring`, optional `language`).
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let loaded = parse_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    for err in &loaded.errors {
        log::warn!("{}: line {}: {}", path.display(), err.line, err.message);
    }
    Ok(loaded)
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<LoadedCorpus> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(pair) => pairs.push(pair),
            Err(message) => errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no valid records ({} malformed lines)",
            errors.len()
        )));
    }
    Ok(LoadedCorpus { pairs, errors })
}

fn parse_record(line: &str) -> std::result::Result<CodeSummaryPair, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let field = |name: &str| -> std::result::Result<&str, String> {
        obj.get(name)
            .ok_or_else(|| format!("missing field {name:?}"))?
            .as_str()
            .ok_or_else(|| format!("field {name:?} is not a string"))
    };
    let code = field("code")?;
    let docstring = field("docstring")?;
    let language = obj.get("language").and_then(Value::as_str).unwrap_or("unknown");
    CodeSummaryPair::new(code, docstring, language).map_err(|e| e.to_string())
}

/// Writes pairs with the same schema `load_jsonl` reads.
pub fn write_jsonl(path: impl AsRef<Path>, pairs: &[CodeSummaryPair]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::json!({
            "code": p.code,
            "docstring": p.summary,
            "language": p.language,
        });
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Token/id bijection with four reserved ids: PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Argument(format!(
                "vocabulary needs at least {} entries, got {}",
                SPECIAL_TOKENS.len() + 1,
                tokens.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Argument(format!("id {i} must be {s:?}, found {:?}", tokens[i])));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Argument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Counts tokens over `texts`, keeps those with frequency >= `min_freq`,
    /// most frequent first (ties by token text), up to `max_size` entries
    /// including the reserved ones.
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Argument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !SPECIAL_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_size.saturating_sub(SPECIAL_TOKENS.len());
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
            .collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Ids of `text` with no reserved tokens added and no length limit.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces. PAD/BOS/EOS are dropped; UNK is kept
    /// as its marker so substitutions stay visible.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds the vocabulary over code and summaries of `pairs`.
pub fn build_vocabulary(pairs: &[CodeSummaryPair], min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(Error::Argument("cannot build a vocabulary from zero pairs".into()));
    }
    Vocabulary::from_texts(
        pairs.iter().flat_map(|p| [p.code.as_str(), p.summary.as_str()]),
        min_freq,
        max_size,
    )
}

/// Fixed-length id sequence; PAD only ever appears as a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub max_len: usize,
}

impl TokenSequence {
    /// The ids before the padding suffix.
    pub fn content(&self) -> &[u32] {
        let end = self.ids.iter().position(|&id| id == PAD).unwrap_or(self.ids.len());
        &self.ids[..end]
    }
}

/// Tokenizes, maps out-of-vocabulary tokens to UNK, optionally wraps in
/// BOS/EOS, truncates to `max_len` and pads with PAD.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize, add_bos_eos: bool) -> TokenSequence {
    let mut ids = Vec::with_capacity(max_len);
    if add_bos_eos {
        ids.push(BOS);
    }
    ids.extend(vocab.encode(text));
    if add_bos_eos {
        ids.push(EOS);
    }
    ids.truncate(max_len);
    ids.resize(max_len, PAD);
    TokenSequence { ids, max_len }
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    vocab.decode(seq.content())
}

/// Draws `k` pairs uniformly without replacement; deterministic in `seed`.
pub fn select_few_shot(pairs: &[CodeSummaryPair], k: usize, seed: u64) -> Result<Vec<CodeSummaryPair>> {
    if k > pairs.len() {
        return Err(Error::Argument(format!(
            "requested {k} few-shot examples from {} pairs",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pairs.len(), k)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Fractions {
        train: f64,
        valid: f64,
        test: f64,
        seed: u64,
    },
    Files {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<CodeSummaryPair>,
    pub valid: Vec<CodeSummaryPair>,
    pub test: Vec<CodeSummaryPair>,
}

impl Splits {
    /// Resolves a split spec. `pairs` is required for fractional splits and
    /// ignored for file splits.
    pub fn from_spec(spec: &SplitSpec, pairs: &[CodeSummaryPair]) -> Result<Splits> {
        match spec {
            SplitSpec::Fractions {
                train,
                valid,
                test,
                seed,
            } => split_pairs(pairs, *train, *valid, *test, *seed),
            SplitSpec::Files { train, valid, test } => Ok(Splits {
                train: load_jsonl(train)?.pairs,
                valid: load_jsonl(valid)?.pairs,
                test: load_jsonl(test)?.pairs,
            }),
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_jsonl(dir.join("train.jsonl"), &self.train)?;
        write_jsonl(dir.join("valid.jsonl"), &self.valid)?;
        write_jsonl(dir.join("test.jsonl"), &self.test)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Splits> {
        let dir = dir.as_ref();
        Splits::from_spec(
            &SplitSpec::Files {
                train: dir.join("train.jsonl"),
                valid: dir.join("valid.jsonl"),
                test: dir.join("test.jsonl"),
            },
            &[],
        )
    }
}

/// Seeded shuffle then cut into disjoint train/valid/test parts.
pub fn split_pairs(pairs: &[CodeSummaryPair], train: f64, valid: f64, test: f64, seed: u64) -> Result<Splits> {
    let fractions = [train, valid, test];
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must lie in [0,1] and sum to 1, got {train}/{valid}/{test}"
        )));
    }
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, n, n).into_vec();
    let n_train = (train * n as f64).round() as usize;
    let n_valid = ((valid * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}
