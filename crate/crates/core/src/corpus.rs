//! Tokenization, vocabularies, batching and synthetic corpora.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tokenizer {
    Char,
    #[default]
    Word,
}

impl Tokenizer {
    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            Tokenizer::Word => text.split_whitespace().collect(),
            Tokenizer::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
        }
    }

    pub fn join<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        match self {
            Tokenizer::Word => tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" "),
            Tokenizer::Char => tokens.iter().map(|t| t.as_ref()).collect(),
        }
    }
}

impl FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Tokenizer::Char),
            "word" => Ok(Tokenizer::Word),
            other => Err(Error::Config(format!("unknown tokenizer {other:?} (expected char or word)"))),
        }
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tokenizer::Char => "char",
            Tokenizer::Word => "word",
        })
    }
}

/// Token/id mapping with training frequencies.
///
/// Ids `0..3` are the specials `<pad>`, `<unk>`, `<bos>`; the remaining ids
/// follow descending frequency, ties broken lexicographically. Tokens cut by
/// the size limit are counted under `<unk>`, so frequencies always sum to the
/// number of counted training tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Vocab {
    /// Builds a vocabulary from raw text. `sample_tokens` caps how many leading
    /// tokens are counted.
    pub fn build(text: &str, tokenizer: Tokenizer, max_size: usize, sample_tokens: Option<usize>) -> Result<Self> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let toks = tokenizer.tokenize(text);
        let limit = sample_tokens.unwrap_or(usize::MAX);
        for &t in toks.iter().take(limit) {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Self::from_counts(counts.into_iter().map(|(t, c)| (t.to_string(), c)), max_size)
    }

    /// Builds a vocabulary from `(token, count)` pairs.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>, max_size: usize) -> Result<Self> {
        if max_size < SPECIALS.len() + 1 {
            return Err(Error::VocabTooSmall { max_size, specials: SPECIALS.len() });
        }
        let mut special_counts = [0u64; 3];
        let mut entries: Vec<(String, u64)> = Vec::new();
        for (tok, c) in counts {
            match SPECIALS.iter().position(|s| *s == tok) {
                Some(i) => special_counts[i] += c,
                None => entries.push((tok, c)),
            }
        }
        if entries.is_empty() && special_counts.iter().all(|&c| c == 0) {
            return Err(Error::EmptyCorpus);
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size - SPECIALS.len();
        let dropped: u64 = entries.iter().skip(keep).map(|e| e.1).sum();
        entries.truncate(keep);
        special_counts[UNK] += dropped;

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freq = special_counts.to_vec();
        for (t, c) in entries {
            tokens.push(t);
            freq.push(c);
        }
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, id_of, freq })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    pub fn total(&self) -> u64 {
        self.freq.iter().sum()
    }

    pub fn encode(&self, text: &str, tokenizer: Tokenizer) -> Vec<usize> {
        tokenizer.tokenize(text).into_iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize], tokenizer: Tokenizer) -> Result<String> {
        let toks = ids
            .iter()
            .map(|&id| self.token(id).ok_or(Error::IdOutOfRange { id, size: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(tokenizer.join(&toks))
    }

    /// Occurrence count per id over an encoded stream.
    pub fn recount(&self, ids: &[usize]) -> Vec<u64> {
        let mut out = vec![0u64; self.len()];
        for &i in ids {
            out[i] += 1;
        }
        out
    }

    /// `token<TAB>count` per line in id order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.freq) {
            s.push_str(&escape(t));
            s.push('\t');
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (t, c) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::VocabFormat { line: i + 1, msg: "expected token<TAB>count".into() })?;
            let c = c.parse::<u64>().map_err(|e| Error::VocabFormat { line: i + 1, msg: e.to_string() })?;
            tokens.push(unescape(t));
            freq.push(c);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::VocabFormat { line: i + 1, msg: format!("expected special {s}") });
            }
        }
        let id_of: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if id_of.len() != tokens.len() {
            return Err(Error::VocabFormat { line: 0, msg: "duplicate tokens".into() });
        }
        Ok(Self { tokens, id_of, freq })
    }

    /// SHA-256 of the TSV serialization, hex encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_tsv().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// Tabs and newlines are legal characters for the char tokenizer.
fn escape(t: &str) -> String {
    t.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => out.push(o),
            None => out.push('\\'),
        }
    }
    out
}

/// `batch x seq` next-token prediction batch, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Builds a batch from windows of `seq + 1` ids each.
    pub fn from_windows(windows: &[&[usize]]) -> Self {
        let seq = windows.first().map_or(0, |w| w.len() - 1);
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Self { inputs, targets, batch: windows.len(), seq }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_row(&self, b: usize) -> &[usize] {
        &self.inputs[b * self.seq..(b + 1) * self.seq]
    }

    pub fn target_row(&self, b: usize) -> &[usize] {
        &self.targets[b * self.seq..(b + 1) * self.seq]
    }
}

/// Endless stream of training batches.
///
/// The id stream is cut into windows starting every `seq` ids; each window
/// covers `seq + 1` ids so the last target of one window is the first input of
/// the next. Window order is reshuffled from the seed at every epoch; a
/// trailing partial batch is dropped.
pub struct BatchStream<'a> {
    ids: &'a [usize],
    batch: usize,
    seq: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

pub fn make_batches(ids: &[usize], batch: usize, seq: usize, seed: u64) -> Result<BatchStream<'_>> {
    if batch == 0 || seq == 0 {
        return Err(Error::Config("batch size and sequence length must be at least 1".into()));
    }
    let needed = batch * (seq + 1);
    if ids.len() < needed {
        return Err(Error::InsufficientTokens { needed, got: ids.len(), batch, seq });
    }
    let windows = (ids.len() - 1) / seq;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..windows).collect();
    order.shuffle(&mut rng);
    Ok(BatchStream { ids, batch, seq, order, pos: 0, rng })
}

impl Iterator for BatchStream<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let windows: Vec<&[usize]> = self.order[self.pos..self.pos + self.batch]
            .iter()
            .map(|&w| &self.ids[w * self.seq..w * self.seq + self.seq + 1])
            .collect();
        self.pos += self.batch;
        Some(TokenBatch::from_windows(&windows))
    }
}

/// Sequential non-overlapping evaluation windows, grouped into batches of at
/// most `batch` rows.
pub fn eval_batches(ids: &[usize], batch: usize, seq: usize) -> Result<Vec<TokenBatch>> {
    if ids.len() < seq + 1 || batch == 0 || seq == 0 {
        return Err(Error::InsufficientTokens { needed: seq + 1, got: ids.len(), batch, seq });
    }
    let windows: Vec<&[usize]> = (0..(ids.len() - 1) / seq).map(|w| &ids[w * seq..w * seq + seq + 1]).collect();
    Ok(windows.chunks(batch).map(TokenBatch::from_windows).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Independent draws with probability proportional to `rank^-exponent`.
    Zipf,
    /// Fixed single-cycle permutation: the next token is a function of the current one.
    MarkovDeterministic,
    /// First-order chain: every token has `branching` successors drawn from the
    /// Zipf marginal, chosen with weights `1/(j+1)`.
    ZipfBigram,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zipf" => Ok(Self::Zipf),
            "markov-deterministic" => Ok(Self::MarkovDeterministic),
            "zipf-bigram" => Ok(Self::ZipfBigram),
            other => Err(Error::Config(format!("unknown synthetic corpus kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub vocab: usize,
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

fn default_exponent() -> f64 {
    1.07
}

fn default_branching() -> usize {
    8
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, vocab: usize, length: usize, seed: u64) -> Self {
        Self { kind, vocab, length, seed, exponent: default_exponent(), branching: default_branching() }
    }
}

/// Word used for generator symbol `i`.
pub fn synthetic_word(i: usize) -> String {
    format!("w{i}")
}

fn zipf_weights(vocab: usize, exponent: f64) -> Vec<f64> {
    (1..=vocab).map(|r| (r as f64).powf(-exponent)).collect()
}

/// Generator symbols (`0..vocab`, 0 being the most frequent Zipf rank).
pub fn synthetic_symbols(spec: &SyntheticSpec) -> Result<Vec<usize>> {
    if spec.vocab < 2 || spec.length == 0 {
        return Err(Error::Config("synthetic corpus needs vocab >= 2 and length >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.vocab;
    let marginal = || WeightedAliasIndex::new(zipf_weights(v, spec.exponent)).map_err(|e| Error::Config(e.to_string()));
    let out = match spec.kind {
        SyntheticKind::Zipf => {
            let dist = marginal()?;
            (0..spec.length).map(|_| dist.sample(&mut rng)).collect()
        }
        SyntheticKind::MarkovDeterministic => {
            // Sattolo's algorithm yields a uniformly random single cycle.
            let mut next: Vec<usize> = (0..v).collect();
            for i in (1..v).rev() {
                let j = rng.random_range(0..i);
                next.swap(i, j);
            }
            let mut cur = rng.random_range(0..v);
            (0..spec.length)
                .map(|_| {
                    let t = cur;
                    cur = next[cur];
                    t
                })
                .collect()
        }
        SyntheticKind::ZipfBigram => {
            let dist = marginal()?;
            let branching = spec.branching.max(1);
            let successors: Vec<Vec<usize>> =
                (0..v).map(|_| (0..branching).map(|_| dist.sample(&mut rng)).collect()).collect();
            let pick = WeightedAliasIndex::new((0..branching).map(|j| 1.0 / (j + 1) as f64).collect())
                .map_err(|e| Error::Config(e.to_string()))?;
            let mut cur = dist.sample(&mut rng);
            (0..spec.length)
                .map(|_| {
                    let t = cur;
                    cur = successors[cur][pick.sample(&mut rng)];
                    t
                })
                .collect()
        }
    };
    Ok(out)
}

/// Space-separated synthetic text.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<String> {
    let syms = synthetic_symbols(spec)?;
    let words: Vec<String> = (0..spec.vocab).map(synthetic_word).collect();
    let mut s = String::with_capacity(syms.len() * 6);
    for (i, &t) in syms.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&words[t]);
    }
    Ok(s)
}
