//! Per-example coverage measures, each normalized to `[0, 1]`.
//!
//! * **PreCog**: the fraction of content tokens that the model recovers
//!   within its top-k predictions when that token alone is masked.
//! * **LexCov**: the fraction of words that are full vocabulary entries.
//! * **Length**: the content length, min-max normalized over the dataset.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{make_masked_variants, BackendError, MlmBackend};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Precog,
    Lexcov,
    Length,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Precog, Measure::Lexcov, Measure::Length];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Precog => "precog",
            Measure::Lexcov => "lexcov",
            Measure::Length => "length",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "precog" => Ok(Measure::Precog),
            "lexcov" => Ok(Measure::Lexcov),
            "length" => Ok(Measure::Length),
            other => Err(format!("unknown measure {other:?}")),
        }
    }
}

/// How repeated out-of-vocabulary words count toward LexCov.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovCounting {
    /// Every occurrence counts.
    #[default]
    Occurrences,
    /// Each distinct OOV word counts once.
    Set,
}

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("{measure} is undefined for example {example_id}: {reason}")]
    Undefined {
        measure: Measure,
        example_id: String,
        reason: &'static str,
    },
    #[error("cannot compute length statistics over an empty dataset")]
    EmptyDataset,
    #[error("example {example_id}: length {len} outside dataset range [{min}, {max}]")]
    InconsistentStats {
        example_id: String,
        len: usize,
        min: usize,
        max: usize,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreDetail {
    /// PreCog: per content position, whether the original token was recovered.
    Hits(Vec<bool>),
    /// LexCov: the out-of-vocabulary words.
    Oov(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureScore {
    pub example_id: String,
    pub measure: Measure,
    pub value: f64,
    pub detail: Option<ScoreDetail>,
}

/// One line of a scores file: a measure value for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub eid: String,
    pub task: String,
    pub measure: Measure,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<ScoreDetail>,
    /// Top-k size, PreCog only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Content WordPiece count.
    pub t_wordpiece: usize,
    /// Word count from the word splitter.
    pub t_words: usize,
}

/// Minimum and maximum content length over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLengthStats {
    pub min_len: usize,
    pub max_len: usize,
}

/// Fraction of content tokens recovered in the backend's top-k at their own
/// masked position.
pub fn precog(
    example_id: &str,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    backend: &dyn MlmBackend,
    k: usize,
) -> Result<MeasureScore, MeasureError> {
    let t = seq.content_len();
    if t == 0 {
        return Err(MeasureError::Undefined {
            measure: Measure::Precog,
            example_id: example_id.to_string(),
            reason: "sequence has no content tokens",
        });
    }
    let variants = make_masked_variants(Arc::new(seq.clone()), vocab);
    let mut hits = Vec::with_capacity(t);
    for variant in &variants {
        let prediction = backend.predict_topk(example_id, variant, k)?;
        let original = vocab.normalize(variant.original_token());
        let hit = prediction
            .tokens()
            .iter()
            .any(|p| vocab.normalize(p) == original);
        hits.push(hit);
    }
    let recovered = hits.iter().filter(|h| **h).count();
    Ok(MeasureScore {
        example_id: example_id.to_string(),
        measure: Measure::Precog,
        value: recovered as f64 / t as f64,
        detail: Some(ScoreDetail::Hits(hits)),
    })
}

/// Fraction of words whose case-normalized form is a full vocabulary entry.
pub fn lexcov(
    example_id: &str,
    words: &[String],
    vocab: &Vocabulary,
    counting: OovCounting,
) -> Result<MeasureScore, MeasureError> {
    if words.is_empty() {
        return Err(MeasureError::Undefined {
            measure: Measure::Lexcov,
            example_id: example_id.to_string(),
            reason: "example has no words",
        });
    }
    let mut oov: Vec<String> = words
        .iter()
        .filter(|w| !vocab.has_full_word(&vocab.normalize(w)))
        .cloned()
        .collect();
    if counting == OovCounting::Set {
        let mut seen = HashSet::new();
        oov.retain(|w| seen.insert(vocab.normalize(w)));
    }
    let t = words.len();
    Ok(MeasureScore {
        example_id: example_id.to_string(),
        measure: Measure::Lexcov,
        value: (t - oov.len()) as f64 / t as f64,
        detail: Some(ScoreDetail::Oov(oov)),
    })
}

pub fn length_stats<'a>(
    dataset: impl IntoIterator<Item = &'a TokenSequence>,
) -> Result<DatasetLengthStats, MeasureError> {
    let mut iter = dataset.into_iter().map(TokenSequence::content_len);
    let first = iter.next().ok_or(MeasureError::EmptyDataset)?;
    let (min_len, max_len) = iter.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
    Ok(DatasetLengthStats { min_len, max_len })
}

/// `(T - min) / (max - min)`, or 0 when every example has the same length.
pub fn length_measure(
    example_id: &str,
    seq: &TokenSequence,
    stats: DatasetLengthStats,
) -> Result<MeasureScore, MeasureError> {
    let t = seq.content_len();
    if t < stats.min_len || t > stats.max_len {
        return Err(MeasureError::InconsistentStats {
            example_id: example_id.to_string(),
            len: t,
            min: stats.min_len,
            max: stats.max_len,
        });
    }
    let span = stats.max_len - stats.min_len;
    let value = if span == 0 {
        0.0
    } else {
        (t - stats.min_len) as f64 / span as f64
    };
    Ok(MeasureScore {
        example_id: example_id.to_string(),
        measure: Measure::Length,
        value,
        detail: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MaskedVariant, TopKPrediction, UnigramBackend};
    use crate::tokenizer::{tokenize, word_split, SpecialTokens};
    use proptest::prelude::*;

    const WORDS: [&str; 8] = ["the", "cat", "sat", "on", "mat", "dog", "ran", "far"];

    fn vocab() -> Vocabulary {
        let mut text = String::from("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n");
        for w in WORDS.iter().chain(&["##s", ".", ","]) {
            text.push_str(w);
            text.push('\n');
        }
        Vocabulary::parse(&text, SpecialTokens::default(), false).unwrap()
    }

    struct Oracle;
    impl MlmBackend for Oracle {
        fn kind(&self) -> &str {
            "oracle"
        }
        fn model_id(&self) -> Result<String, BackendError> {
            Ok("oracle".into())
        }
        fn predict_topk(
            &self,
            _: &str,
            v: &MaskedVariant,
            k: usize,
        ) -> Result<TopKPrediction, BackendError> {
            Ok(TopKPrediction::new(vec![v.original_token().to_string()], k).unwrap())
        }
    }

    struct Never;
    impl MlmBackend for Never {
        fn kind(&self) -> &str {
            "never"
        }
        fn model_id(&self) -> Result<String, BackendError> {
            Ok("never".into())
        }
        fn predict_topk(
            &self,
            _: &str,
            _: &MaskedVariant,
            k: usize,
        ) -> Result<TopKPrediction, BackendError> {
            Ok(TopKPrediction::new(vec!["[PAD]".into()], k).unwrap())
        }
    }

    #[test]
    fn precog_perfect_and_zero_backends() {
        let v = vocab();
        let seq = tokenize("the cat sat on the mat.", None, &v).unwrap();
        let s = precog("e", &seq, &v, &Oracle, 100).unwrap();
        assert_eq!(s.value, 1.0);
        let s = precog("e", &seq, &v, &Never, 100).unwrap();
        assert_eq!(s.value, 0.0);
        match s.detail {
            Some(ScoreDetail::Hits(h)) => assert_eq!(h.len(), seq.content_len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precog_five_tokens_two_recovered() {
        // corpus counts: the 4, cat 3, sat 1 (ties by id irrelevant at k = 2)
        // top-2 = {the, cat}; "the dog cat ran far" recovers positions 1 and 3
        let v = vocab();
        let corpus: Vec<_> = ["the cat the", "cat the cat", "the sat"]
            .iter()
            .map(|s| tokenize(s, None, &v).unwrap())
            .collect();
        let mock = UnigramBackend::from_corpus(&corpus, &v).unwrap();
        let seq = tokenize("the dog cat ran far", None, &v).unwrap();
        assert_eq!(seq.content_len(), 5);
        let s = precog("e", &seq, &v, &mock, 2).unwrap();
        assert_eq!(s.value, 0.4);
        assert_eq!(
            s.detail,
            Some(ScoreDetail::Hits(vec![true, false, true, false, false]))
        );
    }

    #[test]
    fn precog_undefined_on_empty_content() {
        let v = vocab();
        let seq = TokenSequence::from_parts(
            vec!["[CLS]".into(), "[SEP]".into()],
            vec![true, true],
            vec![0, 0],
        )
        .unwrap();
        assert!(matches!(
            precog("e", &seq, &v, &Oracle, 1),
            Err(MeasureError::Undefined { .. })
        ));
    }

    #[test]
    fn lexcov_examples() {
        let v = vocab();
        let w = word_split("The cat sat.");
        assert_eq!(lexcov("e", &w, &v, OovCounting::Occurrences).unwrap().value, 1.0);
        let s = lexcov("e", &["qzxv".to_string()], &v, OovCounting::Occurrences).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.detail, Some(ScoreDetail::Oov(vec!["qzxv".into()])));
        // 8 words, 2 absent: (8 - 2) / 8
        let w = word_split("the cat sat on the zebra mat quokka");
        assert_eq!(w.len(), 8);
        assert_eq!(lexcov("e", &w, &v, OovCounting::Occurrences).unwrap().value, 0.75);
        assert!(lexcov("e", &[], &v, OovCounting::Occurrences).is_err());
    }

    #[test]
    fn lexcov_continuation_pieces_are_not_words() {
        let v = vocab();
        let s = lexcov("e", &["##s".to_string(), "cats".to_string()], &v, OovCounting::Occurrences)
            .unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn lexcov_set_semantics_counts_repeats_once() {
        let v = vocab();
        let w = word_split("zebra zebra ZEBRA cat");
        assert_eq!(lexcov("e", &w, &v, OovCounting::Occurrences).unwrap().value, 0.25);
        let s = lexcov("e", &w, &v, OovCounting::Set).unwrap();
        assert_eq!(s.value, 0.75);
        assert_eq!(s.detail, Some(ScoreDetail::Oov(vec!["zebra".into()])));
    }

    fn seq_of_len(v: &Vocabulary, n: usize) -> TokenSequence {
        TokenSequence::single(vec!["cat".to_string(); n], v)
    }

    #[test]
    fn length_stats_and_measure() {
        let v = vocab();
        let ds: Vec<_> = [3, 7, 7, 12].iter().map(|&n| seq_of_len(&v, n)).collect();
        let st = length_stats(&ds).unwrap();
        assert_eq!((st.min_len, st.max_len), (3, 12));
        let single = [seq_of_len(&v, 5)];
        let st1 = length_stats(&single).unwrap();
        assert_eq!((st1.min_len, st1.max_len), (5, 5));
        assert_eq!(length_measure("e", &single[0], st1).unwrap().value, 0.0);
        assert!(matches!(length_stats(&[]), Err(MeasureError::EmptyDataset)));

        let st = DatasetLengthStats { min_len: 5, max_len: 25 };
        assert_eq!(length_measure("e", &seq_of_len(&v, 5), st).unwrap().value, 0.0);
        assert_eq!(length_measure("e", &seq_of_len(&v, 25), st).unwrap().value, 1.0);
        assert_eq!(length_measure("e", &seq_of_len(&v, 10), st).unwrap().value, 0.25);
        assert!(matches!(
            length_measure("e", &seq_of_len(&v, 26), st),
            Err(MeasureError::InconsistentStats { len: 26, .. })
        ));
    }

    #[test]
    fn measure_names_round_trip() {
        for m in Measure::ALL {
            assert_eq!(m.as_str().parse::<Measure>().unwrap(), m);
        }
        assert!("bogus".parse::<Measure>().is_err());
    }

    proptest! {
        #[test]
        fn length_ordering_matches_raw_length(lens in proptest::collection::vec(1usize..40, 1..30)) {
            let v = vocab();
            let ds: Vec<_> = lens.iter().map(|&n| seq_of_len(&v, n)).collect();
            let st = length_stats(&ds).unwrap();
            let vals: Vec<f64> = ds.iter().map(|s| length_measure("e", s, st).unwrap().value).collect();
            for i in 0..lens.len() {
                prop_assert!((0.0..=1.0).contains(&vals[i]));
                for j in 0..lens.len() {
                    prop_assert_eq!(lens[i].cmp(&lens[j]), vals[i].partial_cmp(&vals[j]).unwrap());
                }
            }
        }

        #[test]
        fn lexcov_ignores_word_order(idx in proptest::collection::vec(0usize..12, 1..20), seed in any::<u64>()) {
            let v = vocab();
            let pool = ["the", "cat", "zebra", "mat", "quokka", "far", "xyz", "on", "ran", "Dog", "SAT", "emu"];
            let words: Vec<String> = idx.iter().map(|&i| pool[i].to_string()).collect();
            let mut shuffled = words.clone();
            // deterministic rotation + reversal as a permutation
            let r = (seed as usize) % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            for c in [OovCounting::Occurrences, OovCounting::Set] {
                let a = lexcov("e", &words, &v, c).unwrap().value;
                let b = lexcov("e", &shuffled, &v, c).unwrap().value;
                prop_assert_eq!(a, b);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
