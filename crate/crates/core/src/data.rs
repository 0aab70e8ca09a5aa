//! Corpus ingestion, tokenization, length filters and vocabularies.
//!
//! Corpora are UTF-8 files of `source<TAB>target` lines. Blank lines are
//! skipped; line numbers in errors are 1-based.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Char,
    Word,
}

impl Level {
    pub fn default_min_count(self) -> usize {
        match self {
            Level::Char => 1,
            Level::Word => 5,
        }
    }

    /// Joins tokens back into surface text.
    pub fn join(self, tokens: &[String]) -> String {
        match self {
            Level::Char => tokens.concat(),
            Level::Word => tokens.join(" "),
        }
    }
}

/// Splits text into tokens. With `attributes`, leading `<...>` groups become
/// single composite tokens (char level) or are kept whole (word level).
pub fn tokenize(text: &str, level: Level, attributes: bool) -> Vec<String> {
    match level {
        Level::Word => text.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect(),
        Level::Char => {
            let mut out = Vec::new();
            let mut rest = text;
            if attributes {
                while rest.starts_with('<') {
                    match rest.find('>') {
                        Some(end) => {
                            out.push(rest[..=end].to_string());
                            rest = &rest[end + 1..];
                        }
                        None => break,
                    }
                }
            }
            out.extend(rest.chars().map(String::from));
            out
        }
    }
}

/// A tokenized line before id lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// 1-based line in the originating file.
    pub line: usize,
}

/// Parses corpus text. `origin` labels errors.
pub fn parse_corpus(text: &str, origin: &str, level: Level, attributes: bool) -> Result<Vec<RawPair>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| Error::Format {
            path: origin.into(),
            line: line_no,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let (src, tgt) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(t), None) => (s, t),
            (_, None, _) => return Err(err("expected `source<TAB>target`, found no TAB")),
            _ => return Err(err("expected exactly one TAB")),
        };
        let source = tokenize(src, level, attributes);
        let target = tokenize(tgt, level, false);
        if source.is_empty() || target.is_empty() {
            return Err(err("empty source or target"));
        }
        pairs.push(RawPair {
            source,
            target,
            line: line_no,
        });
    }
    Ok(pairs)
}

pub fn load_corpus(path: &Path, level: Level, attributes: bool) -> Result<Vec<RawPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_corpus(&text, &path.display().to_string(), level, attributes)
}

/// Token-count limits applied before sentinels are added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthFilter {
    pub max_src: usize,
    pub max_tgt: usize,
    pub max_product: usize,
}

impl Default for LengthFilter {
    fn default() -> Self {
        LengthFilter {
            max_src: 50,
            max_tgt: 25,
            max_product: 500,
        }
    }
}

impl LengthFilter {
    pub fn keeps(&self, src_len: usize, tgt_len: usize) -> bool {
        src_len <= self.max_src && tgt_len <= self.max_tgt && src_len * tgt_len <= self.max_product
    }

    /// Order-preserving filter.
    pub fn apply(&self, pairs: Vec<RawPair>) -> Vec<RawPair> {
        pairs
            .into_iter()
            .filter(|p| self.keeps(p.source.len(), p.target.len()))
            .collect()
    }
}

/// Bijective token ↔ id map whose first four entries are [`RESERVED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Data(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.contains('\n') {
                return Err(Error::Data(format!("token {t:?} contains a newline")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Tokens seen at least `min_count` times, by descending count then
    /// lexicographically.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t) && !t.contains('\n'))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Vocab::from_tokens(tokens).expect("reserved prefix and unique tokens")
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

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids without a trailing sentinel.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Ids followed by [`EOS`].
    pub fn encode_with_eos(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = self.encode(tokens);
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Data(format!("id {id} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    /// One token per line; line number − 1 is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Vocab::from_tokens(body.split('\n').map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Vocab::from_text(&text)
    }
}

/// Source and target vocabularies built from one corpus.
pub fn build_vocab(pairs: &[RawPair], min_count: usize) -> Result<(Vocab, Vocab)> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let src = Vocab::build(pairs.iter().map(|p| p.source.as_slice()), min_count);
    let tgt = Vocab::build(pairs.iter().map(|p| p.target.as_slice()), min_count);
    Ok((src, tgt))
}

/// Id sequences, each ending with [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExamplePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl ExamplePair {
    pub fn encode(raw: &RawPair, src: &Vocab, tgt: &Vocab) -> Self {
        ExamplePair {
            source: src.encode_with_eos(&raw.source),
            target: tgt.encode_with_eos(&raw.target),
        }
    }

    /// `(I, J)` including sentinels.
    pub fn lengths(&self) -> (usize, usize) {
        (self.source.len(), self.target.len())
    }
}

pub fn encode_pairs(raw: &[RawPair], src: &Vocab, tgt: &Vocab) -> Vec<ExamplePair> {
    raw.iter().map(|p| ExamplePair::encode(p, src, tgt)).collect()
}
