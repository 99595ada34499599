//! Top-k masked-token prediction backends.
//!
//! Every backend answers the same question: given a sequence with one
//! position replaced by the mask token, which `k` vocabulary tokens does the
//! model rank highest there? Three implementations exist:
//!
//! * [`RemoteBackend`] talks to an HTTP inference service (`POST /topk`).
//! * [`UnigramBackend`] is a deterministic, context-free mock built from a
//!   corpus, used as a test oracle.
//! * [`CachedBackend`] / [`CacheOnlyBackend`] sit on an append-only
//!   JSON-lines [`PredictionCache`].

mod cache;
mod mock;
mod remote;

use std::collections::HashSet;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::{TokenSequence, Vocabulary};

pub use cache::{
    CacheKey, CacheOnlyBackend, CacheStats, CacheVerifyReport, CachedBackend, PredictionCache,
};
pub use mock::UnigramBackend;
pub use remote::{RemoteBackend, RemoteConfig};

/// Number of top predictions checked for membership unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("mock corpus is empty")]
    EmptyCorpus,
    #[error("example {example_id} position {masked_index}: backend unreachable: {message}")]
    Unreachable {
        example_id: String,
        masked_index: usize,
        message: String,
    },
    #[error("example {example_id} position {masked_index}: request rejected with status {status}: {message}")]
    Rejected {
        example_id: String,
        masked_index: usize,
        status: u16,
        message: String,
    },
    #[error("example {example_id} position {masked_index}: invalid response: {message}")]
    InvalidResponse {
        example_id: String,
        masked_index: usize,
        message: String,
    },
    #[error("example {example_id} position {masked_index}: not in prediction cache")]
    CacheMiss {
        example_id: String,
        masked_index: usize,
    },
    #[error("backend health check failed: {0}")]
    Health(String),
    #[error("prediction cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// One sequence with exactly one content position masked.
#[derive(Debug, Clone)]
pub struct MaskedVariant {
    base: Arc<TokenSequence>,
    masked_index: usize,
    mask_token: Arc<str>,
}

impl MaskedVariant {
    /// The unmasked sequence this variant was derived from.
    pub fn base(&self) -> &TokenSequence {
        &self.base
    }

    pub fn masked_index(&self) -> usize {
        self.masked_index
    }

    /// Token that the mask replaced.
    pub fn original_token(&self) -> &str {
        &self.base.tokens()[self.masked_index]
    }

    pub fn mask_token(&self) -> &str {
        &self.mask_token
    }

    /// The token list as sent to a model, mask in place.
    pub fn rendered_tokens(&self) -> Vec<String> {
        let mut tokens = self.base.tokens().to_vec();
        tokens[self.masked_index] = self.mask_token.to_string();
        tokens
    }
}

/// One masked variant per content position, in position order.
pub fn make_masked_variants(seq: Arc<TokenSequence>, vocab: &Vocabulary) -> Vec<MaskedVariant> {
    let mask_token: Arc<str> = Arc::from(vocab.mask_token());
    let positions: Vec<usize> = seq.content().map(|(i, _)| i).collect();
    positions
        .into_iter()
        .map(|masked_index| MaskedVariant {
            base: Arc::clone(&seq),
            masked_index,
            mask_token: Arc::clone(&mask_token),
        })
        .collect()
}

/// Ranked predictions for one masked position, best first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKPrediction {
    tokens: Vec<String>,
    k: usize,
}

impl TopKPrediction {
    /// Validates cardinality and uniqueness.
    pub fn new(tokens: Vec<String>, k: usize) -> Result<Self, String> {
        if k == 0 {
            return Err("k must be at least 1".into());
        }
        if tokens.len() > k {
            return Err(format!("{} tokens returned for k = {k}", tokens.len()));
        }
        let mut seen = HashSet::with_capacity(tokens.len());
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, k })
    }

    /// Validates as [`TopKPrediction::new`] and additionally requires every
    /// token to be a vocabulary entry.
    pub fn new_in(tokens: Vec<String>, k: usize, vocab: &Vocabulary) -> Result<Self, String> {
        if let Some(t) = tokens.iter().find(|t| !vocab.contains(t)) {
            return Err(format!("token {t:?} is not in the vocabulary"));
        }
        Self::new(tokens, k)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

/// Identifies the model and `k` that produced a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn compute(kind: &str, model: &str, k: usize) -> Self {
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update([0]);
        h.update(model.as_bytes());
        h.update([0]);
        h.update(k.to_string().as_bytes());
        Self(hex_prefix(&h.finalize(), 8))
    }

    pub fn from_string(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

/// A source of top-k predictions for masked positions.
///
/// Implementations must be deterministic for a fixed model: identical
/// variants yield identical predictions regardless of call order or thread.
pub trait MlmBackend: Send + Sync {
    /// Short backend kind, e.g. `remote` or `mock-unigram`.
    fn kind(&self) -> &str;

    /// Model identifier as reported by the backend.
    fn model_id(&self) -> Result<String, BackendError>;

    fn fingerprint(&self, k: usize) -> Result<Fingerprint, BackendError> {
        Ok(Fingerprint::compute(self.kind(), &self.model_id()?, k))
    }

    fn predict_topk(
        &self,
        example_id: &str,
        variant: &MaskedVariant,
        k: usize,
    ) -> Result<TopKPrediction, BackendError>;
}

impl<B: MlmBackend + ?Sized> MlmBackend for Arc<B> {
    fn kind(&self) -> &str {
        (**self).kind()
    }

    fn model_id(&self) -> Result<String, BackendError> {
        (**self).model_id()
    }

    fn fingerprint(&self, k: usize) -> Result<Fingerprint, BackendError> {
        (**self).fingerprint(k)
    }

    fn predict_topk(
        &self,
        example_id: &str,
        variant: &MaskedVariant,
        k: usize,
    ) -> Result<TopKPrediction, BackendError> {
        (**self).predict_topk(example_id, variant, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, SpecialTokens};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        let mut text = String::from("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n");
        for w in ["hello", "a", "b", "c", "d", "e", "f"] {
            text.push_str(w);
            text.push('\n');
        }
        Vocabulary::parse(&text, SpecialTokens::default(), false).unwrap()
    }

    #[test]
    fn single_variant() {
        let v = vocab();
        let seq = Arc::new(tokenize("hello", None, &v).unwrap());
        let vars = make_masked_variants(seq, &v);
        assert_eq!(vars.len(), 1);
        assert_eq!(vars[0].rendered_tokens(), ["[CLS]", "[MASK]", "[SEP]"]);
        assert_eq!(vars[0].original_token(), "hello");
    }

    #[test]
    fn pair_variants_skip_specials() {
        let v = vocab();
        let seq = Arc::new(tokenize("a b", Some("c"), &v).unwrap());
        let vars = make_masked_variants(seq, &v);
        let originals: Vec<_> = vars.iter().map(|m| m.original_token()).collect();
        assert_eq!(originals, ["a", "b", "c"]);
        assert_eq!(
            vars.iter().map(|m| m.masked_index()).collect::<Vec<_>>(),
            [1, 2, 4]
        );
    }

    #[test]
    fn twelve_token_pair_variants_differ_in_one_position() {
        let v = vocab();
        let seq = Arc::new(tokenize("a b c d e f", Some("f e d c b a"), &v).unwrap());
        assert_eq!(seq.content_len(), 12);
        let vars = make_masked_variants(Arc::clone(&seq), &v);
        assert_eq!(vars.len(), 12);
        for var in &vars {
            let rendered = var.rendered_tokens();
            let diffs: Vec<usize> = rendered
                .iter()
                .zip(seq.tokens())
                .enumerate()
                .filter(|(_, (x, y))| x != y)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(diffs, [var.masked_index()]);
        }
    }

    #[test]
    fn empty_content_gives_no_variants() {
        let v = vocab();
        let seq = TokenSequence::from_parts(
            vec!["[CLS]".into(), "[SEP]".into()],
            vec![true, true],
            vec![0, 0],
        )
        .unwrap();
        assert!(make_masked_variants(Arc::new(seq), &v).is_empty());
    }

    #[test]
    fn topk_validation() {
        assert!(TopKPrediction::new(vec!["a".into(), "a".into()], 5).is_err());
        assert!(TopKPrediction::new(vec!["a".into(), "b".into()], 1).is_err());
        assert!(TopKPrediction::new(vec![], 0).is_err());
        let v = vocab();
        assert!(TopKPrediction::new_in(vec!["zzz".into()], 3, &v).is_err());
        assert!(TopKPrediction::new_in(vec!["a".into()], 3, &v).is_ok());
    }

    #[test]
    fn fingerprint_depends_on_every_component() {
        let base = Fingerprint::compute("remote", "bert", 100);
        assert_eq!(base, Fingerprint::compute("remote", "bert", 100));
        assert_ne!(base, Fingerprint::compute("mock", "bert", 100));
        assert_ne!(base, Fingerprint::compute("remote", "roberta", 100));
        assert_ne!(base, Fingerprint::compute("remote", "bert", 10));
        assert_eq!(base.as_str().len(), 16);
    }

    proptest! {
        #[test]
        fn variant_count_equals_content_len(
            specials in proptest::collection::vec(any::<bool>(), 0..40)
        ) {
            let v = vocab();
            let tokens: Vec<String> = specials
                .iter()
                .enumerate()
                .map(|(i, s)| if *s { "[SEP]".to_string() } else { ["a", "b", "c"][i % 3].to_string() })
                .collect();
            let segs = vec![0u8; tokens.len()];
            let seq = Arc::new(TokenSequence::from_parts(tokens, specials.clone(), segs).unwrap());
            let vars = make_masked_variants(Arc::clone(&seq), &v);
            prop_assert_eq!(vars.len(), seq.content_len());
            for var in &vars {
                prop_assert!(!seq.is_special()[var.masked_index()]);
            }
        }
    }
}
