//! WordPiece tokenization over a line-oriented vocabulary file.
//!
//! Text is split into words (whitespace, then every punctuation or symbol
//! character on its own), case-folded when the vocabulary is uncased, and
//! each word is decomposed greedily longest-match-first into vocabulary
//! pieces, continuation pieces carrying the `##` prefix.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

/// Continuation prefix for non-initial word pieces.
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this many characters become the unknown token.
pub const MAX_CHARS_PER_WORD: usize = 100;

/// Positional limit of the reference model, specials included.
pub const MAX_SEQUENCE_LEN: usize = 512;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary line {line}: empty line")]
    EmptyLine { line: usize },
    #[error("vocabulary line {line}: duplicate token {token:?} (first seen on line {first})")]
    DuplicateToken {
        line: usize,
        token: String,
        first: usize,
    },
    #[error("missing special token {0}")]
    MissingSpecialToken(String),
    #[error("empty first segment")]
    EmptySegment,
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
}

/// Names of the special tokens a vocabulary must contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub mask: String,
    pub unknown: String,
    pub classifier_start: String,
    pub separator: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            mask: "[MASK]".into(),
            unknown: "[UNK]".into(),
            classifier_start: "[CLS]".into(),
            separator: "[SEP]".into(),
        }
    }
}

/// An immutable token vocabulary; ids are zero-based line indices.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    token_to_id: HashMap<String, u32>,
    special: SpecialTokens,
    cased: bool,
}

impl Vocabulary {
    /// Loads an uncased vocabulary with the standard special tokens.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, SpecialTokens::default(), false)
    }

    /// Parses vocabulary text, one token per line. LF and CRLF are accepted.
    pub fn parse(text: &str, special: SpecialTokens, cased: bool) -> Result<Self, TokenizerError> {
        let mut entries = Vec::new();
        let mut token_to_id = HashMap::new();
        // a single trailing newline terminates the last line
        let body = text.strip_suffix('\n').unwrap_or(text);
        let lines = if body.is_empty() { None } else { Some(body.split('\n')) };
        for (idx, raw) in lines.into_iter().flatten().enumerate() {
            let line = idx + 1;
            let token = raw.strip_suffix('\r').unwrap_or(raw);
            if token.is_empty() {
                return Err(TokenizerError::EmptyLine { line });
            }
            if let Some(&first) = token_to_id.get(token) {
                return Err(TokenizerError::DuplicateToken {
                    line,
                    token: token.to_string(),
                    first: first as usize + 1,
                });
            }
            token_to_id.insert(token.to_string(), entries.len() as u32);
            entries.push(token.to_string());
        }
        for name in [
            &special.mask,
            &special.unknown,
            &special.classifier_start,
            &special.separator,
        ] {
            if !token_to_id.contains_key(name) {
                return Err(TokenizerError::MissingSpecialToken(name.clone()));
            }
        }
        Ok(Self {
            entries,
            token_to_id,
            special,
            cased,
        })
    }

    pub fn with_cased(mut self, cased: bool) -> Self {
        self.cased = cased;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn special(&self) -> &SpecialTokens {
        &self.special
    }

    pub fn is_cased(&self) -> bool {
        self.cased
    }

    pub fn mask_token(&self) -> &str {
        &self.special.mask
    }

    pub fn unknown_token(&self) -> &str {
        &self.special.unknown
    }

    /// Case normalization applied to words before lookup.
    pub fn normalize(&self, text: &str) -> String {
        if self.cased {
            text.to_string()
        } else {
            text.to_lowercase()
        }
    }

    /// True when `word` (already normalized) is a full, non-continuation entry.
    pub fn has_full_word(&self, word: &str) -> bool {
        !word.starts_with(CONTINUATION_PREFIX) && self.contains(word)
    }

    fn is_marker(&self, token: &str) -> bool {
        token == self.special.classifier_start
            || token == self.special.separator
            || token == self.special.mask
    }
}

/// A tokenized example: `[CLS] a… [SEP] (b… [SEP])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
    is_special: Vec<bool>,
    segment_ids: Vec<u8>,
}

impl TokenSequence {
    pub fn from_parts(
        tokens: Vec<String>,
        is_special: Vec<bool>,
        segment_ids: Vec<u8>,
    ) -> Result<Self, TokenizerError> {
        if tokens.len() != is_special.len() || tokens.len() != segment_ids.len() {
            return Err(TokenizerError::InvalidSequence(format!(
                "length mismatch: {} tokens, {} flags, {} segment ids",
                tokens.len(),
                is_special.len(),
                segment_ids.len()
            )));
        }
        if segment_ids.iter().any(|&s| s > 1) {
            return Err(TokenizerError::InvalidSequence(
                "segment ids must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            tokens,
            is_special,
            segment_ids,
        })
    }

    /// Wraps content pieces as a single-segment sequence `[CLS] pieces [SEP]`.
    pub fn single(pieces: Vec<String>, vocab: &Vocabulary) -> Self {
        assemble(pieces, None, vocab)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self) -> &[bool] {
        &self.is_special
    }

    pub fn segment_ids(&self) -> &[u8] {
        &self.segment_ids
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-special positions (the `T` of the measures).
    pub fn content_len(&self) -> usize {
        self.is_special.iter().filter(|s| !**s).count()
    }

    /// Content tokens with their positions in the full sequence.
    pub fn content(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens
            .iter()
            .zip(&self.is_special)
            .enumerate()
            .filter(|(_, (_, special))| !**special)
            .map(|(i, (t, _))| (i, t.as_str()))
    }
}

/// Splits text into words: whitespace-delimited runs, with every
/// non-alphanumeric character detached as its own word.
pub fn word_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first decomposition of one (normalized) word.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > MAX_CHARS_PER_WORD {
        return vec![vocab.unknown_token().to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION_PREFIX);
            }
            if vocab.contains(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![vocab.unknown_token().to_string()],
        }
    }
    pieces
}

fn segment_pieces(text: &str, vocab: &Vocabulary) -> Vec<String> {
    word_split(text)
        .iter()
        .flat_map(|w| wordpiece(&vocab.normalize(w), vocab))
        .collect()
}

fn assemble(a: Vec<String>, b: Option<Vec<String>>, vocab: &Vocabulary) -> TokenSequence {
    let sp = vocab.special();
    let mut tokens = Vec::with_capacity(a.len() + b.as_ref().map_or(0, Vec::len) + 3);
    let mut is_special = Vec::with_capacity(tokens.capacity());
    let mut segment_ids = Vec::with_capacity(tokens.capacity());
    let mut push = |t: String, special: bool, seg: u8| {
        tokens.push(t);
        is_special.push(special);
        segment_ids.push(seg);
    };
    push(sp.classifier_start.clone(), true, 0);
    for t in a {
        let special = vocab.is_marker(&t);
        push(t, special, 0);
    }
    push(sp.separator.clone(), true, 0);
    if let Some(b) = b {
        for t in b {
            let special = vocab.is_marker(&t);
            push(t, special, 1);
        }
        push(sp.separator.clone(), true, 1);
    }
    TokenSequence {
        tokens,
        is_special,
        segment_ids,
    }
}

/// Tokenizes one or two text segments into a model-ready sequence.
pub fn tokenize(
    segment_a: &str,
    segment_b: Option<&str>,
    vocab: &Vocabulary,
) -> Result<TokenSequence, TokenizerError> {
    if segment_a.trim().is_empty() {
        return Err(TokenizerError::EmptySegment);
    }
    let mut a = segment_pieces(segment_a, vocab);
    let mut b = segment_b.map(|s| segment_pieces(s, vocab));

    let overhead = if b.is_some() { 3 } else { 2 };
    let total = a.len() + b.as_ref().map_or(0, Vec::len) + overhead;
    if total > MAX_SEQUENCE_LEN {
        warn!(
            total,
            limit = MAX_SEQUENCE_LEN,
            "sequence exceeds positional limit, truncating longer segment"
        );
        while a.len() + b.as_ref().map_or(0, Vec::len) + overhead > MAX_SEQUENCE_LEN {
            match b.as_mut() {
                Some(b) if b.len() >= a.len() => {
                    b.pop();
                }
                _ => {
                    a.pop();
                }
            }
        }
    }
    Ok(assemble(a, b, vocab))
}
