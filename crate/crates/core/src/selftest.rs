//! End-to-end self-check on a bundled synthetic dataset and the mock backend.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use crate::analytics::{
    bin_examples, coverage_curve, interval_split, pearson, weighted_task_aggregate, BinWidth,
    Outcome,
};
use crate::backend::{
    make_masked_variants, CachedBackend, PredictionCache, UnigramBackend,
};
use crate::ingestion::{load_dataset, DatasetFormat, Example, TaskSchema};
use crate::measures::{precog, Measure};
use crate::pipeline::{run_analyze, run_score, RunConfig, TaskSpec};
use crate::tokenizer::{tokenize, word_split, SpecialTokens, TokenSequence, Vocabulary};

const SELFTEST_K: usize = 10;

/// Bundled inputs; replaceable so a damaged install can be simulated.
#[derive(Debug, Clone)]
pub struct SelftestAssets {
    pub vocab: String,
    pub corpus: String,
    /// `(task, dataset jsonl, predictions jsonl)`
    pub tasks: Vec<(String, String, String)>,
}

impl SelftestAssets {
    pub fn bundled() -> Self {
        Self {
            vocab: include_str!("../assets/vocab.txt").to_string(),
            corpus: include_str!("../assets/corpus.txt").to_string(),
            tasks: vec![
                (
                    "sst".into(),
                    include_str!("../assets/sst.jsonl").into(),
                    include_str!("../assets/sst.pred.jsonl").into(),
                ),
                (
                    "nli".into(),
                    include_str!("../assets/nli.jsonl").into(),
                    include_str!("../assets/nli.pred.jsonl").into(),
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn count(&self, status: CheckStatus) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<20} {}", c.status, c.name, c.detail)?;
        }
        writeln!(
            f,
            "{} checks: {} passed, {} failed, {} skipped",
            self.checks.len(),
            self.count(CheckStatus::Pass),
            self.count(CheckStatus::Fail),
            self.count(CheckStatus::Skip)
        )
    }
}

type Check = Result<String, String>;

struct Ctx {
    vocab: Vocabulary,
    examples: Vec<Example>,
    seqs: Vec<TokenSequence>,
    mock: UnigramBackend,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check_vocabulary(assets: &SelftestAssets) -> Result<(Vocabulary, String), String> {
    let vocab = Vocabulary::parse(&assets.vocab, SpecialTokens::default(), false)
        .map_err(|e| e.to_string())?;
    let lines = assets.vocab.lines().count();
    ensure(vocab.len() == lines, || {
        format!("{} entries from {lines} lines", vocab.len())
    })?;
    for (i, tok) in vocab.entries().iter().enumerate() {
        ensure(vocab.id(tok) == Some(i as u32), || format!("id of {tok:?} is not {i}"))?;
    }
    let detail = format!("{} entries", vocab.len());
    Ok((vocab, detail))
}

fn check_tokenizer(ctx: &Ctx) -> Check {
    let v = &ctx.vocab;
    let seq = tokenize("unaffable", None, v).map_err(|e| e.to_string())?;
    ensure(
        seq.tokens() == ["[CLS]", "un", "##aff", "##able", "[SEP]"],
        || format!("unaffable -> {:?}", seq.tokens()),
    )?;
    let words = word_split("state-of-the-art");
    ensure(
        words == ["state", "-", "of", "-", "the", "-", "art"],
        || format!("word split gave {words:?}"),
    )?;
    // greedy maximality by brute force over every bundled word
    let mut pieces = 0;
    for ex in &ctx.examples {
        let text = format!("{} {}", ex.segment_a, ex.segment_b.as_deref().unwrap_or(""));
        for w in word_split(&text) {
            let w = v.normalize(&w);
            let ps = crate::tokenizer::wordpiece(&w, v);
            if ps.len() == 1 && ps[0] == v.unknown_token() {
                continue;
            }
            let mut start = 0;
            for p in &ps {
                let bare = p.strip_prefix("##").unwrap_or(p);
                let end = start + bare.len();
                for longer in end + 1..=w.len() {
                    if !w.is_char_boundary(longer) {
                        continue;
                    }
                    let cand = &w[start..longer];
                    let cand = if start == 0 {
                        cand.to_string()
                    } else {
                        format!("##{cand}")
                    };
                    ensure(!v.contains(&cand), || {
                        format!("{w:?}: {p:?} is not maximal, {cand:?} also matches")
                    })?;
                }
                start = end;
                pieces += 1;
            }
        }
    }
    Ok(format!("{pieces} pieces maximal"))
}

fn check_variants(ctx: &Ctx) -> Check {
    let mut total = 0;
    for seq in &ctx.seqs {
        let vs = make_masked_variants(Arc::new(seq.clone()), &ctx.vocab);
        ensure(vs.len() == seq.content_len(), || "variant count differs from T".into())?;
        for v in &vs {
            ensure(!seq.is_special()[v.masked_index()], || "special token masked".into())?;
            let rendered = v.rendered_tokens();
            let diffs = rendered
                .iter()
                .zip(seq.tokens())
                .filter(|(a, b)| a != b)
                .count();
            ensure(
                rendered[v.masked_index()] == ctx.vocab.mask_token() && diffs <= 1,
                || "variant differs from base outside the masked position".into(),
            )?;
        }
        total += vs.len();
    }
    Ok(format!("{total} variants"))
}

/// Direct evaluation: top-k of the unigram ranking against each content token.
fn oracle_precog(seq: &TokenSequence, ranking: &[String], k: usize) -> f64 {
    let top: HashSet<&str> = ranking.iter().take(k).map(String::as_str).collect();
    let content: Vec<&str> = seq
        .tokens()
        .iter()
        .zip(seq.is_special())
        .filter(|(_, s)| !**s)
        .map(|(t, _)| t.as_str())
        .collect();
    let hits = content.iter().filter(|t| top.contains(*t)).count();
    hits as f64 / content.len() as f64
}

fn check_precog_oracle(ctx: &Ctx) -> Check {
    for (ex, seq) in ctx.examples.iter().zip(&ctx.seqs) {
        let got = precog(&ex.id, seq, &ctx.vocab, &ctx.mock, SELFTEST_K)
            .map_err(|e| e.to_string())?
            .value;
        let want = oracle_precog(seq, ctx.mock.ranking(), SELFTEST_K);
        ensure(got == want, || format!("{}: pipeline {got} vs direct {want}", ex.id))?;
    }
    Ok(format!("{} examples, k={SELFTEST_K}", ctx.seqs.len()))
}

fn check_monotone_k(ctx: &Ctx) -> Check {
    for (ex, seq) in ctx.examples.iter().zip(&ctx.seqs) {
        let mut prev = 0.0;
        for k in [1, 10, 100] {
            let v = precog(&ex.id, seq, &ctx.vocab, &ctx.mock, k)
                .map_err(|e| e.to_string())?
                .value;
            ensure((0.0..=1.0).contains(&v), || format!("{}: {v} out of range", ex.id))?;
            ensure(v >= prev, || format!("{}: precog fell from {prev} to {v} at k={k}", ex.id))?;
            prev = v;
        }
    }
    Ok("k in {1, 10, 100}".into())
}

fn write_inputs(dir: &Path, assets: &SelftestAssets, cache: bool) -> Result<RunConfig, String> {
    let w = |name: &str, text: &str| fs::write(dir.join(name), text).map_err(|e| e.to_string());
    w("vocab.txt", &assets.vocab)?;
    w("corpus.txt", &assets.corpus)?;
    let mut tasks = Vec::new();
    for (name, data, preds) in &assets.tasks {
        w(&format!("{name}.jsonl"), data)?;
        w(&format!("{name}.pred.jsonl"), preds)?;
        tasks.push(TaskSpec {
            name: name.clone(),
            dataset: dir.join(format!("{name}.jsonl")),
            format: DatasetFormat::Jsonl,
            schema: TaskSchema::default(),
            predictions: BTreeMap::from([("mock".to_string(), dir.join(format!("{name}.pred.jsonl")))]),
        });
    }
    let mut cfg = RunConfig {
        vocab: Some(dir.join("vocab.txt")),
        k: SELFTEST_K,
        tasks,
        out: dir.join("out"),
        jobs: 4,
        ..RunConfig::default()
    };
    cfg.backend.mock_corpus = Some(dir.join("corpus.txt"));
    if cache {
        cfg.backend.cache = Some(dir.join("cache.jsonl"));
    }
    Ok(cfg)
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn check_cache(ctx: &Ctx, assets: &SelftestAssets) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_inputs(dir.path(), assets, false)?;
    let bare = run_score(&cfg, &ctx.vocab, Some(&ctx.mock)).map_err(|e| e.to_string())?;
    let bare_scores = read(&bare.scores_path)?;

    let cache_path = dir.path().join("cache.jsonl");
    let mut outputs = Vec::new();
    let mut misses = Vec::new();
    for _ in 0..2 {
        let cache = Arc::new(PredictionCache::open(&cache_path).map_err(|e| e.to_string())?);
        let cached = CachedBackend::new(ctx.mock.clone(), cache);
        let run = run_score(&cfg, &ctx.vocab, Some(&cached)).map_err(|e| e.to_string())?;
        outputs.push(read(&run.scores_path)?);
        misses.push(cached.misses());
    }
    ensure(outputs.iter().all(|o| *o == bare_scores), || {
        "cached scores differ from uncached".into()
    })?;
    ensure(misses[1] == 0, || format!("warm run missed {} times", misses[1]))?;
    Ok(format!("cold {} misses, warm 0", misses[0]))
}

fn check_binning() -> Check {
    let values = [0.0, 0.2, 0.200001, 0.8, 0.800001, 1.0];
    let outcomes: Vec<Outcome> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| Outcome {
            task: "t".into(),
            example_id: i.to_string(),
            measure: Measure::Precog,
            value: v,
            correct: i % 2 == 0,
        })
        .collect();
    let bins = bin_examples(&outcomes, BinWidth::default()).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
    ensure(counts == [2, 1, 0, 1, 2], || format!("bin counts {counts:?}"))?;
    let split = interval_split(&outcomes).map_err(|e| e.to_string())?;
    ensure(split.high.count == 2 && split.low.count == 4, || {
        format!("interval counts {} / {}", split.high.count, split.low.count)
    })?;
    Ok("boundaries 0, 20, 20.0001, 80, 80.0001, 100".into())
}

fn check_pooling() -> Check {
    let mut per_task = BTreeMap::new();
    let mut union = Vec::new();
    for t in 0..4u32 {
        let outcomes: Vec<Outcome> = (0..25u32)
            .map(|i| Outcome {
                task: format!("t{t}"),
                example_id: i.to_string(),
                measure: Measure::Length,
                value: ((i * 7 + t * 13) % 101) as f64 / 100.0,
                correct: (i + t) % 3 != 0,
            })
            .collect();
        per_task.insert(
            format!("t{t}"),
            bin_examples(&outcomes, BinWidth::default()).map_err(|e| e.to_string())?,
        );
        union.extend(outcomes);
    }
    let pooled = weighted_task_aggregate(&per_task).map_err(|e| e.to_string())?;
    let direct = bin_examples(&union, BinWidth::default()).map_err(|e| e.to_string())?;
    for (p, d) in pooled.iter().zip(&direct) {
        ensure(p.count == d.count && p.correct_count == d.correct_count, || {
            format!("bin {} pooled {}/{} vs direct {}/{}", p.label(), p.correct_count, p.count, d.correct_count, d.count)
        })?;
    }
    Ok("4 tasks, 100 examples".into())
}

fn check_pearson() -> Check {
    let xs = [10.0, 30.0, 50.0, 70.0, 90.0];
    let line: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let p = pearson(&xs, &line).map_err(|e| e.to_string())?;
    ensure(p.r == 1.0, || format!("perfect line gave r={}", p.r))?;
    // Student's t with 3 degrees of freedom has a closed-form CDF
    let ys = [0.2, 0.4, 0.5, 0.6, 0.9];
    let p = pearson(&xs, &ys).map_err(|e| e.to_string())?;
    let t = p.r * (3.0 / (1.0 - p.r * p.r)).sqrt();
    let u = t / 3f64.sqrt();
    let want = 1.0 - 2.0 / std::f64::consts::PI * (u.atan() + u / (1.0 + u * u));
    ensure((p.p_value - want).abs() < 1e-9, || {
        format!("p={} vs closed form {want}", p.p_value)
    })?;
    ensure(pearson(&xs, &[1.0; 5]).is_err(), || "zero variance accepted".into())?;
    Ok(format!("r={:.4} p={:.4}", p.r, p.p_value))
}

fn check_coverage() -> Check {
    let outcomes: Vec<Outcome> = [5u32, 15, 25, 45, 85, 95, 100, 90, 70, 10]
        .iter()
        .map(|&v| Outcome {
            task: "t".into(),
            example_id: v.to_string(),
            measure: Measure::Lexcov,
            value: v as f64 / 100.0,
            correct: v > 50,
        })
        .collect();
    let bins = bin_examples(&outcomes, BinWidth::default()).map_err(|e| e.to_string())?;
    let curve = coverage_curve(&bins, outcomes.len()).map_err(|e| e.to_string())?;
    let sum: f64 = curve.points.iter().map(|p| p.percent).sum();
    ensure((sum - 100.0).abs() < 1e-9, || format!("percents sum to {sum}"))?;
    let last = curve.points.last().map(|p| p.cumulative_percent);
    ensure(last == Some(100.0), || format!("cumulative ends at {last:?}"))?;
    ensure(
        curve
            .points
            .windows(2)
            .all(|w| w[0].cumulative_percent <= w[1].cumulative_percent),
        || "cumulative curve decreases".into(),
    )?;
    Ok("percents sum to 100".into())
}

fn pipeline_once(assets: &SelftestAssets) -> Result<(Vec<String>, usize), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_inputs(dir.path(), assets, true)?;
    let vocab = crate::pipeline::load_vocabulary(&cfg).map_err(|e| e.to_string())?;
    let backend = crate::pipeline::build_backend(&cfg, vocab.clone())
        .map_err(|e| e.to_string())?
        .ok_or("no backend built")?;
    let score = run_score(&cfg, &vocab, Some(backend.as_ref())).map_err(|e| e.to_string())?;
    ensure(score.failed.is_empty(), || format!("{} examples failed", score.failed.len()))?;
    for r in &score.records {
        ensure((0.0..=1.0).contains(&r.value), || {
            format!("{} {} = {} out of range", r.eid, r.measure, r.value)
        })?;
    }
    let analysis = run_analyze(&cfg).map_err(|e| e.to_string())?;
    let mut files = vec![read(&score.scores_path)?];
    for p in &analysis.outputs {
        files.push(read(p)?);
    }
    Ok((files, score.records.len()))
}

fn check_end_to_end(assets: &SelftestAssets) -> Check {
    let (first, n) = pipeline_once(assets)?;
    let (second, _) = pipeline_once(assets)?;
    ensure(first == second, || "reports differ between identical runs".into())?;
    Ok(format!("{n} score records, {} reports identical", first.len()))
}

fn guarded(f: impl FnOnce() -> Result<String, String>) -> Result<String, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("check panicked".into()))
}

/// Runs every check; a failing check never stops the others, but checks
/// that need a working vocabulary are skipped when it fails to load.
pub fn run_selftest(assets: &SelftestAssets) -> SelftestReport {
    let mut checks = Vec::new();

    let vocab = match guarded_vocab(assets) {
        Ok((v, d)) => {
            record(&mut checks, "vocabulary", Ok(d));
            Some(v)
        }
        Err(e) => {
            record(&mut checks, "vocabulary", Err(e));
            None
        }
    };
    let ctx = match vocab {
        Some(vocab) => {
            let loaded = load_context(vocab, assets);
            let detail = loaded.as_ref().map(|c| format!("{} examples, mock corpus ok", c.examples.len()));
            record(&mut checks, "dataset", detail.map_err(Clone::clone));
            loaded.ok()
        }
        None => {
            skip(&mut checks, "dataset");
            None
        }
    };

    type CtxCheck = fn(&Ctx) -> Check;
    let needs_ctx: [(&str, CtxCheck); 4] = [
        ("tokenizer", check_tokenizer),
        ("variants", check_variants),
        ("precog-oracle", check_precog_oracle),
        ("precog-monotone-k", check_monotone_k),
    ];
    match &ctx {
        Some(ctx) => {
            for (name, f) in needs_ctx {
                record(&mut checks, name, guarded(|| f(ctx)));
            }
            record(&mut checks, "cache-transparency", guarded(|| check_cache(ctx, assets)));
        }
        None => {
            for (name, _) in needs_ctx {
                skip(&mut checks, name);
            }
            skip(&mut checks, "cache-transparency");
        }
    }
    record(&mut checks, "binning", guarded(check_binning));
    record(&mut checks, "pooling", guarded(check_pooling));
    record(&mut checks, "pearson", guarded(check_pearson));
    record(&mut checks, "coverage", guarded(check_coverage));
    if ctx.is_some() {
        record(&mut checks, "end-to-end", guarded(|| check_end_to_end(assets)));
    } else {
        skip(&mut checks, "end-to-end");
    }
    SelftestReport { checks }
}

fn load_context(vocab: Vocabulary, assets: &SelftestAssets) -> Result<Ctx, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut examples = Vec::new();
    for (name, data, _) in &assets.tasks {
        let p = dir.path().join(format!("{name}.jsonl"));
        fs::write(&p, data).map_err(|e| e.to_string())?;
        examples.extend(
            load_dataset(&p, DatasetFormat::Jsonl, name, &TaskSchema::default())
                .map_err(|e| e.to_string())?,
        );
    }
    let seqs = examples
        .iter()
        .map(|e| tokenize(&e.segment_a, e.segment_b.as_deref(), &vocab))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let corpus = assets
        .corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(l, None, &vocab))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mock = UnigramBackend::from_corpus(&corpus, &vocab).map_err(|e| e.to_string())?;
    Ok(Ctx {
        vocab,
        examples,
        seqs,
        mock,
    })
}

fn record(checks: &mut Vec<CheckResult>, name: &'static str, r: Result<String, String>) {
    let (status, detail) = match r {
        Ok(d) => (CheckStatus::Pass, d),
        Err(d) => (CheckStatus::Fail, d),
    };
    checks.push(CheckResult {
        name,
        status,
        detail,
    });
}

fn skip(checks: &mut Vec<CheckResult>, name: &'static str) {
    checks.push(CheckResult {
        name,
        status: CheckStatus::Skip,
        detail: "needs a valid vocabulary and dataset".into(),
    });
}

fn guarded_vocab(assets: &SelftestAssets) -> Result<(Vocabulary, String), String> {
    catch_unwind(AssertUnwindSafe(|| check_vocabulary(assets)))
        .unwrap_or_else(|_| Err("check panicked".into()))
}
