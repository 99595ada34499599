use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{BackendError, Fingerprint, MaskedVariant, MlmBackend, TopKPrediction};
use crate::tokenizer::Vocabulary;

/// One line of the cache file. Field order is the on-disk order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    eid: String,
    idx: usize,
    k: usize,
    fp: String,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub example_id: String,
    pub masked_index: usize,
    pub k: usize,
    pub fingerprint: Fingerprint,
}

struct CacheState {
    map: HashMap<CacheKey, Vec<String>>,
    file: File,
}

/// Append-only JSON-lines store of predictions keyed by
/// (example id, masked index, k, backend fingerprint).
///
/// The whole file is indexed in memory on open. Writes are serialized and
/// flushed line by line, so a run killed mid-way leaves at most one partial
/// trailing line, which is ignored on the next open.
pub struct PredictionCache {
    path: PathBuf,
    state: Mutex<CacheState>,
}

impl std::fmt::Debug for PredictionCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PredictionCache")
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl PredictionCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| cache_err(&path, e))?;
        }
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(cache_err(&path, e)),
        };
        let parsed = parse_lines(&text);
        if parsed.truncated_tail {
            warn!(path = %path.display(), "ignoring truncated final cache line");
        }
        if !parsed.malformed.is_empty() {
            warn!(path = %path.display(), lines = ?parsed.malformed, "ignoring malformed cache lines");
        }
        let mut map = HashMap::with_capacity(parsed.entries.len());
        for line in parsed.entries {
            let key = CacheKey {
                example_id: line.eid,
                masked_index: line.idx,
                k: line.k,
                fingerprint: Fingerprint::from_string(line.fp),
            };
            map.entry(key).or_insert(line.tokens);
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| cache_err(&path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(|e| cache_err(&path, e))?;
        }
        Ok(Self {
            path,
            state: Mutex::new(CacheState { map, file }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<TopKPrediction> {
        let state = self.state.lock().unwrap();
        state
            .map
            .get(key)
            .map(|tokens| TopKPrediction::new(tokens.clone(), key.k).expect("validated on store"))
    }

    /// Stores a prediction. Storing an existing key is a no-op; the first
    /// value written wins.
    pub fn put(&self, key: CacheKey, prediction: &TopKPrediction) -> Result<(), BackendError> {
        let mut state = self.state.lock().unwrap();
        if state.map.contains_key(&key) {
            return Ok(());
        }
        let line = CacheLine {
            eid: key.example_id.clone(),
            idx: key.masked_index,
            k: key.k,
            fp: key.fingerprint.as_str().to_string(),
            tokens: prediction.tokens().to_vec(),
        };
        let mut buf = serde_json::to_vec(&line).map_err(|e| cache_err(&self.path, e))?;
        buf.push(b'\n');
        state
            .file
            .write_all(&buf)
            .and_then(|_| state.file.flush())
            .map_err(|e| cache_err(&self.path, e))?;
        state.map.insert(key, line.tokens);
        Ok(())
    }

    /// Fingerprints present in the cache for a given `k`.
    pub fn fingerprints_for_k(&self, k: usize) -> BTreeSet<Fingerprint> {
        let state = self.state.lock().unwrap();
        state
            .map
            .keys()
            .filter(|key| key.k == k)
            .map(|key| key.fingerprint.clone())
            .collect()
    }

    pub fn stats(path: impl AsRef<Path>) -> Result<CacheStats, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| cache_err(path, e))?;
        let parsed = parse_lines(&text);
        let mut by_fingerprint = BTreeMap::new();
        let mut examples = HashSet::new();
        let mut keys = HashSet::new();
        for line in &parsed.entries {
            *by_fingerprint
                .entry(format!("{} (k={})", line.fp, line.k))
                .or_insert(0usize) += 1;
            examples.insert(line.eid.as_str());
            keys.insert((line.eid.as_str(), line.idx, line.k, line.fp.as_str()));
        }
        Ok(CacheStats {
            lines: parsed.entries.len(),
            unique_entries: keys.len(),
            examples: examples.len(),
            by_fingerprint,
            malformed_lines: parsed.malformed.len(),
            truncated_tail: parsed.truncated_tail,
        })
    }

    /// Checks every line of a cache file. With a vocabulary, predicted tokens
    /// must also be vocabulary entries.
    pub fn verify(
        path: impl AsRef<Path>,
        vocab: Option<&Vocabulary>,
    ) -> Result<CacheVerifyReport, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| cache_err(path, e))?;
        let parsed = parse_lines(&text);
        let mut problems = Vec::new();
        for line in &parsed.malformed {
            problems.push(format!("line {line}: not a valid cache record"));
        }
        if parsed.truncated_tail {
            problems.push("final line is truncated".to_string());
        }
        type Key<'a> = (&'a str, usize, usize, &'a str);
        let mut seen: HashMap<Key, (usize, &[String])> = HashMap::new();
        for (n, entry) in parsed.line_numbers.iter().zip(&parsed.entries) {
            let check = match vocab {
                Some(v) => TopKPrediction::new_in(entry.tokens.clone(), entry.k, v),
                None => TopKPrediction::new(entry.tokens.clone(), entry.k),
            };
            if let Err(msg) = check {
                problems.push(format!("line {n}: {msg}"));
            }
            let key = (entry.eid.as_str(), entry.idx, entry.k, entry.fp.as_str());
            match seen.get(&key) {
                Some((first, tokens)) if *tokens != entry.tokens.as_slice() => problems.push(
                    format!("line {n}: conflicts with line {first} for the same key"),
                ),
                Some(_) => {}
                None => {
                    seen.insert(key, (*n, &entry.tokens));
                }
            }
        }
        Ok(CacheVerifyReport {
            lines: parsed.entries.len() + parsed.malformed.len(),
            problems,
        })
    }
}

struct ParsedLines {
    entries: Vec<CacheLine>,
    line_numbers: Vec<usize>,
    malformed: Vec<usize>,
    truncated_tail: bool,
}

fn parse_lines(text: &str) -> ParsedLines {
    let mut out = ParsedLines {
        entries: Vec::new(),
        line_numbers: Vec::new(),
        malformed: Vec::new(),
        truncated_tail: false,
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CacheLine>(line) {
            Ok(entry) => {
                out.entries.push(entry);
                out.line_numbers.push(i + 1);
            }
            Err(_) if i + 1 == lines.len() && !complete => out.truncated_tail = true,
            Err(_) => out.malformed.push(i + 1),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheStats {
    pub lines: usize,
    pub unique_entries: usize,
    pub examples: usize,
    pub by_fingerprint: BTreeMap<String, usize>,
    pub malformed_lines: usize,
    pub truncated_tail: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheVerifyReport {
    pub lines: usize,
    pub problems: Vec<String>,
}

impl CacheVerifyReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Read-through cache in front of another backend.
pub struct CachedBackend<B> {
    inner: B,
    cache: Arc<PredictionCache>,
    fingerprints: Mutex<HashMap<usize, Fingerprint>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<B: MlmBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: Arc<PredictionCache>) -> Self {
        Self {
            inner,
            cache,
            fingerprints: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: MlmBackend> MlmBackend for CachedBackend<B> {
    fn kind(&self) -> &str {
        self.inner.kind()
    }

    fn model_id(&self) -> Result<String, BackendError> {
        self.inner.model_id()
    }

    fn fingerprint(&self, k: usize) -> Result<Fingerprint, BackendError> {
        if let Some(fp) = self.fingerprints.lock().unwrap().get(&k) {
            return Ok(fp.clone());
        }
        let fp = self.inner.fingerprint(k)?;
        self.fingerprints.lock().unwrap().insert(k, fp.clone());
        Ok(fp)
    }

    fn predict_topk(
        &self,
        example_id: &str,
        variant: &MaskedVariant,
        k: usize,
    ) -> Result<TopKPrediction, BackendError> {
        let key = CacheKey {
            example_id: example_id.to_string(),
            masked_index: variant.masked_index(),
            k,
            fingerprint: self.fingerprint(k)?,
        };
        if let Some(hit) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let prediction = self.inner.predict_topk(example_id, variant, k)?;
        self.cache.put(key, &prediction)?;
        Ok(prediction)
    }
}

/// Serves predictions from a cache only; a miss is an error.
pub struct CacheOnlyBackend {
    cache: Arc<PredictionCache>,
    fingerprint: Fingerprint,
    k: usize,
}

impl CacheOnlyBackend {
    /// Binds to `fingerprint`, or to the single fingerprint the cache holds
    /// for `k` when none is given.
    pub fn new(
        cache: Arc<PredictionCache>,
        k: usize,
        fingerprint: Option<Fingerprint>,
    ) -> Result<Self, BackendError> {
        let fingerprint = match fingerprint {
            Some(fp) => fp,
            None => {
                let fps = cache.fingerprints_for_k(k);
                if fps.len() != 1 {
                    return Err(cache_err(
                        cache.path(),
                        format!(
                            "cache-only mode needs exactly one fingerprint for k={k}, found {}",
                            fps.len()
                        ),
                    ));
                }
                fps.into_iter().next().unwrap()
            }
        };
        Ok(Self {
            cache,
            fingerprint,
            k,
        })
    }
}

impl MlmBackend for CacheOnlyBackend {
    fn kind(&self) -> &str {
        "cache"
    }

    fn model_id(&self) -> Result<String, BackendError> {
        Ok(format!("cache:{}", self.fingerprint))
    }

    fn fingerprint(&self, k: usize) -> Result<Fingerprint, BackendError> {
        if k == self.k {
            Ok(self.fingerprint.clone())
        } else {
            Err(cache_err(
                self.cache.path(),
                format!("cache-only backend bound to k={}, asked for k={k}", self.k),
            ))
        }
    }

    fn predict_topk(
        &self,
        example_id: &str,
        variant: &MaskedVariant,
        k: usize,
    ) -> Result<TopKPrediction, BackendError> {
        let key = CacheKey {
            example_id: example_id.to_string(),
            masked_index: variant.masked_index(),
            k,
            fingerprint: self.fingerprint(k)?,
        };
        self.cache.get(&key).ok_or_else(|| BackendError::CacheMiss {
            example_id: example_id.to_string(),
            masked_index: variant.masked_index(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{make_masked_variants, UnigramBackend};
    use crate::tokenizer::{tokenize, SpecialTokens, TokenSequence};

    fn vocab() -> Vocabulary {
        Vocabulary::parse(
            "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\nb\nc\n",
            SpecialTokens::default(),
            false,
        )
        .unwrap()
    }

    fn key(eid: &str, idx: usize, fp: &str) -> CacheKey {
        CacheKey {
            example_id: eid.into(),
            masked_index: idx,
            k: 3,
            fingerprint: Fingerprint::from_string(fp),
        }
    }

    fn pred(tokens: &[&str]) -> TopKPrediction {
        TopKPrediction::new(tokens.iter().map(|s| s.to_string()).collect(), 3).unwrap()
    }

    #[test]
    fn store_then_lookup_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        let cache = PredictionCache::open(&path).unwrap();
        cache.put(key("t/1", 1, "fp"), &pred(&["a", "b"])).unwrap();
        assert_eq!(cache.get(&key("t/1", 1, "fp")), Some(pred(&["a", "b"])));
        assert_eq!(cache.get(&key("t/1", 1, "other")), None);
        drop(cache);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"eid\":\"t/1\",\"idx\":1,\"k\":3,\"fp\":\"fp\",\"tokens\":[\"a\",\"b\"]}\n"
        );
        let cache = PredictionCache::open(&path).unwrap();
        assert_eq!(cache.get(&key("t/1", 1, "fp")), Some(pred(&["a", "b"])));
    }

    #[test]
    fn first_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cache = PredictionCache::open(dir.path().join("c.jsonl")).unwrap();
        cache.put(key("e", 1, "fp"), &pred(&["a"])).unwrap();
        cache.put(key("e", 1, "fp"), &pred(&["b"])).unwrap();
        assert_eq!(cache.get(&key("e", 1, "fp")), Some(pred(&["a"])));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn truncated_tail_is_ignored_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"eid\":\"e\",\"idx\":1,\"k\":3,\"fp\":\"fp\",\"tokens\":[\"a\"]}\n{\"eid\":\"e\",\"id",
        )
        .unwrap();
        let stats = PredictionCache::stats(&path).unwrap();
        assert!(stats.truncated_tail);
        assert_eq!(stats.lines, 1);
        let cache = PredictionCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        cache.put(key("e", 2, "fp"), &pred(&["b"])).unwrap();
        drop(cache);
        let cache = PredictionCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        let report = PredictionCache::verify(&path, None).unwrap();
        assert_eq!(report.problems, ["line 2: not a valid cache record"]);
    }

    #[test]
    fn verify_flags_conflicts_and_bad_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"eid\":\"e\",\"idx\":1,\"k\":3,\"fp\":\"fp\",\"tokens\":[\"a\"]}\n",
                "{\"eid\":\"e\",\"idx\":1,\"k\":3,\"fp\":\"fp\",\"tokens\":[\"b\"]}\n",
                "{\"eid\":\"e\",\"idx\":2,\"k\":1,\"fp\":\"fp\",\"tokens\":[\"a\",\"b\"]}\n",
                "{\"eid\":\"e\",\"idx\":3,\"k\":3,\"fp\":\"fp\",\"tokens\":[\"zz\"]}\n",
            ),
        )
        .unwrap();
        let v = vocab();
        let report = PredictionCache::verify(&path, Some(&v)).unwrap();
        assert_eq!(report.lines, 4);
        assert_eq!(report.problems.len(), 3, "{:?}", report.problems);
        assert!(report.problems[0].contains("conflicts with line 1"));
        let stats = PredictionCache::stats(&path).unwrap();
        assert_eq!(stats.unique_entries, 3);
        assert_eq!(stats.examples, 1);
    }

    #[test]
    fn cached_backend_is_transparent() {
        let v = vocab();
        let corpus: Vec<TokenSequence> = ["a a b", "c b a"]
            .iter()
            .map(|s| tokenize(s, None, &v).unwrap())
            .collect();
        let bare = UnigramBackend::from_corpus(&corpus, &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(PredictionCache::open(dir.path().join("c.jsonl")).unwrap());
        let cached = CachedBackend::new(bare.clone(), Arc::clone(&cache));
        let seq = Arc::new(tokenize("a b c", None, &v).unwrap());
        for _ in 0..2 {
            for var in make_masked_variants(Arc::clone(&seq), &v) {
                for k in [1, 2, 5] {
                    assert_eq!(
                        cached.predict_topk("t/e", &var, k).unwrap(),
                        bare.predict_topk("t/e", &var, k).unwrap()
                    );
                }
            }
        }
        assert_eq!(cached.misses(), 9);
        assert_eq!(cached.hits(), 9);

        let only = CacheOnlyBackend::new(Arc::clone(&cache), 2, None).unwrap();
        let var = &make_masked_variants(Arc::clone(&seq), &v)[0];
        assert_eq!(
            only.predict_topk("t/e", var, 2).unwrap(),
            bare.predict_topk("t/e", var, 2).unwrap()
        );
        assert!(matches!(
            only.predict_topk("t/other", var, 2),
            Err(BackendError::CacheMiss { masked_index: 1, .. })
        ));
        assert_eq!(only.fingerprint(2).unwrap(), bare.fingerprint(2).unwrap());
    }
}
