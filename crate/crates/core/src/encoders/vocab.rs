//! Word-level vocabulary and tokenizer.
//!
//! Text is lowercased and split into maximal runs of alphanumeric
//! characters; everything else separates tokens.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::encoders::condition::all_attribute_words;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const DEFAULT_VOCAB_SIZE: usize = 2048;
pub const DEFAULT_MAX_LEN: usize = 32;

const RESERVED: [&str; 4] = [PAD, BOS, EOS, UNK];

pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, max_len: usize) -> Result<Self> {
        if ids.len() < 2 || ids.len() > max_len {
            return Err(Error::invalid(format!(
                "token sequence length {} outside [2, {max_len}]",
                ids.len()
            )));
        }
        if ids[0] != BOS_ID || ids[ids.len() - 1] != EOS_ID {
            return Err(Error::invalid("token sequence must start with BOS and end with EOS"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::invalid(format!("reserved token {r} must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary of at most `max_size` entries.
    ///
    /// Reserved tokens come first, then every attribute word, then corpus
    /// words by descending frequency (ties broken alphabetically).
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let forced = all_attribute_words();
        if max_size < RESERVED.len() + forced.len() {
            return Err(Error::invalid(format!(
                "vocabulary size {max_size} cannot hold the reserved and attribute words"
            )));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in split_words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(forced.iter().map(|s| s.to_string()));
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !forced.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size - tokens.len();
        tokens.extend(ranked.into_iter().take(room).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `BOS + ids + EOS`, unknown words mapped to UNK, truncated to
    /// `max_len` with EOS kept last.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot tokenize empty text"));
        }
        if max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        let mut ids = vec![BOS_ID];
        ids.extend(
            split_words(text)
                .iter()
                .take(max_len - 2)
                .map(|w| self.id(w).unwrap_or(UNK_ID)),
        );
        ids.push(EOS_ID);
        TokenSequence::new(ids, max_len)
    }

    /// Space-joined tokens without BOS/EOS/PAD.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .filter(|&&id| !matches!(id, PAD_ID | BOS_ID | EOS_ID))
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
