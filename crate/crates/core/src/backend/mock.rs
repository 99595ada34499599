use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{hex_prefix, BackendError, MaskedVariant, MlmBackend, TopKPrediction};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Context-free predictor: always answers with the corpus's most frequent
/// content tokens, frequency descending, ties by vocabulary id ascending.
#[derive(Debug, Clone)]
pub struct UnigramBackend {
    ranking: Vec<String>,
    model: String,
}

impl UnigramBackend {
    pub fn from_corpus(corpus: &[TokenSequence], vocab: &Vocabulary) -> Result<Self, BackendError> {
        if corpus.is_empty() {
            return Err(BackendError::EmptyCorpus);
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for seq in corpus {
            for (_, tok) in seq.content() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        // tokens outside the vocabulary sort after every known id, then lexically
        ranked.sort_by(|(ta, ca), (tb, cb)| {
            cb.cmp(ca)
                .then_with(|| {
                    let ia = vocab.id(ta).unwrap_or(u32::MAX);
                    let ib = vocab.id(tb).unwrap_or(u32::MAX);
                    ia.cmp(&ib)
                })
                .then_with(|| ta.cmp(tb))
        });

        let mut h = Sha256::new();
        for (t, c) in &ranked {
            h.update(t.as_bytes());
            h.update([0]);
            h.update(c.to_le_bytes());
        }
        let model = format!("unigram-{}", hex_prefix(&h.finalize(), 8));
        Ok(Self {
            ranking: ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
            model,
        })
    }

    /// Full ranking, most frequent first.
    pub fn ranking(&self) -> &[String] {
        &self.ranking
    }
}

impl MlmBackend for UnigramBackend {
    fn kind(&self) -> &str {
        "mock-unigram"
    }

    fn model_id(&self) -> Result<String, BackendError> {
        Ok(self.model.clone())
    }

    fn predict_topk(
        &self,
        _example_id: &str,
        _variant: &MaskedVariant,
        k: usize,
    ) -> Result<TopKPrediction, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidK);
        }
        let n = k.min(self.ranking.len());
        Ok(TopKPrediction::new(self.ranking[..n].to_vec(), k).expect("ranking has unique tokens"))
    }
}
