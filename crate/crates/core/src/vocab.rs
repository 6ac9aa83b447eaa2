//! Tokenizer and vocabulary.
//!
//! Tokenization splits on whitespace, emits every CJK codepoint and every
//! ASCII punctuation mark as its own token, and recognizes the literal
//! `[MASK]`. Everything else is a whitespace-delimited word.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const START_OF_PIECE: &str = "<|startofpiece|>";
pub const END_OF_PIECE: &str = "<|endofpiece|>";

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const MASK_ID: TokenId = 2;
pub const SOP_ID: TokenId = 3;
pub const EOP_ID: TokenId = 4;
/// First id available to ordinary tokens.
pub const FIRST_REGULAR_ID: TokenId = 5;

const RESERVED: [&str; 5] = [PAD, UNK, MASK, START_OF_PIECE, END_OF_PIECE];

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2A6DF)
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    };
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(MASK) {
            flush(&mut word, &mut tokens);
            tokens.push(MASK.to_string());
            rest = &rest[MASK.len()..];
            continue;
        }
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if is_cjk(c) || c.is_ascii_punctuation() {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        } else {
            word.push(c);
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut tokens);
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Reserved tokens first, then corpus tokens by frequency descending,
    /// ties lexicographic.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for r in RESERVED {
            counts.remove(r);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Appends tokens of `texts` not yet present, ordered as in `build`.
    /// Existing ids are unchanged.
    pub fn extend_with<I, S>(&self, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let fresh = Self::build(texts);
        let mut tokens = self.tokens.clone();
        tokens.extend(
            fresh.tokens[RESERVED.len()..]
                .iter()
                .filter(|t| !self.index.contains_key(*t))
                .cloned(),
        );
        Self::from_tokens(tokens).expect("extension keeps tokens unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&VocabFile {
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: VocabFile = serde_json::from_slice(bytes)?;
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
