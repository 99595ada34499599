use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use precog_core::analytics::{Abscissa, BinWidth};
use precog_core::backend::PredictionCache;
use precog_core::measures::{Measure, OovCounting};
use precog_core::pipeline::{self, PipelineError, RunConfig};
use precog_core::selftest::{run_selftest, SelftestAssets};
use precog_core::tokenizer::Vocabulary;
use tracing_subscriber::EnvFilter;

const CACHE_FILE: &str = "predictions.jsonl";

#[derive(Debug, Parser)]
#[command(name = "precog", version, about = "Pre-training coverage measures and accuracy analysis")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute measures for every configured example into a scores file.
    Score(RunArgs),
    /// Join scores with predictions and write the bin, interval, coverage and correlation reports.
    Analyze(RunArgs),
    /// Run the bundled end-to-end check with the mock backend.
    Selftest,
    /// Inspect a prediction cache file.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
}

#[derive(Debug, Subcommand)]
enum CacheCommand {
    /// Entry counts per backend fingerprint.
    Stats(CacheArgs),
    /// Check every line parses, predictions are well formed and keys agree.
    Verify {
        #[command(flatten)]
        cache: CacheArgs,
        /// Also require every predicted token to be in this vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CacheArgs {
    /// Cache file; defaults to predictions.jsonl under PRECOG_CACHE_DIR.
    path: Option<PathBuf>,
    #[arg(long, env = "PRECOG_CACHE_DIR", hide_env_values = true)]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AbscissaArg {
    Midpoint,
    Mean,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Remote inference service, e.g. http://127.0.0.1:8000
    #[arg(long, conflicts_with = "mock_corpus")]
    backend_url: Option<String>,
    /// Prediction cache file; alone, predictions are served from it only.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Text file for the deterministic unigram backend, one sequence per line.
    #[arg(long)]
    mock_corpus: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Bin width in points on the 0-100 scale; must divide 100.
    #[arg(long)]
    bin_width: Option<u32>,
    /// Comma-separated subset of precog, lexcov, length.
    #[arg(long, value_delimiter = ',')]
    measures: Option<Vec<Measure>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scores file to write or read; defaults to <out>/scores.jsonl.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Concurrent examples (and in-flight remote requests).
    #[arg(long)]
    jobs: Option<usize>,
    /// Count each distinct out-of-vocabulary word once.
    #[arg(long)]
    lexcov_set_semantics: bool,
    #[arg(long, value_enum)]
    corr_abscissa: Option<AbscissaArg>,
    #[arg(long, env = "PRECOG_CACHE_DIR", hide_env_values = true)]
    cache_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.vocab {
            cfg.vocab = Some(v.clone());
        }
        if let Some(url) = &self.backend_url {
            cfg.backend.url = Some(url.clone());
            cfg.backend.mock_corpus = None;
        }
        if let Some(c) = &self.mock_corpus {
            cfg.backend.mock_corpus = Some(c.clone());
            cfg.backend.url = None;
        }
        if let Some(c) = &self.cache {
            cfg.backend.cache = Some(c.clone());
        }
        if cfg.backend.cache.is_none() {
            if let Some(dir) = &self.cache_dir {
                cfg.backend.cache = Some(dir.join(CACHE_FILE));
            }
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(w) = self.bin_width {
            cfg.bin_width = BinWidth::new(w).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let Some(m) = &self.measures {
            cfg.measures = m.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = &self.scores {
            cfg.scores = Some(s.clone());
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if self.lexcov_set_semantics {
            cfg.lexcov_counting = OovCounting::Set;
        }
        match self.corr_abscissa {
            Some(AbscissaArg::Midpoint) => cfg.corr_abscissa = Abscissa::Midpoint,
            Some(AbscissaArg::Mean) => cfg.corr_abscissa = Abscissa::Mean,
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn score(args: &RunArgs) -> Result<i32, PipelineError> {
    let cfg = args.resolve()?;
    let vocab = pipeline::load_vocabulary(&cfg)?;
    let backend = if cfg.selected_measures().contains(&Measure::Precog) {
        pipeline::build_backend(&cfg, vocab.clone())?
    } else {
        None
    };
    let run = pipeline::run_score(&cfg, &vocab, backend.as_deref())?;
    for t in &run.manifest.tasks {
        println!("{}: {} examples, {} scored, {} failed", t.task, t.examples, t.scored, t.failed);
    }
    if let Some(b) = &run.manifest.backend {
        println!("backend {} model {} fingerprint {} k={}", b.kind, b.model, b.fingerprint, cfg.k);
    }
    for f in &run.failed {
        eprintln!("failed {}/{}: {}", f.task, f.id, f.error);
    }
    println!("wrote {} records to {}", run.records.len(), run.scores_path.display());
    println!("manifest {}", run.manifest_path.display());
    Ok(run.exit_code())
}

fn analyze(args: &RunArgs) -> Result<i32, PipelineError> {
    let cfg = args.resolve()?;
    let run = pipeline::run_analyze(&cfg)?;
    for t in &run.manifest.tasks {
        for (set, n) in &t.predicted {
            let missing = t.missing_predictions.get(set).copied().unwrap_or(0);
            println!("{} [{set}]: {n} predictions, {missing} examples without one", t.task);
        }
    }
    if !run.unjoined.is_empty() {
        eprintln!("{} scored examples have no prediction:", run.unjoined.len());
        for id in run.unjoined.iter().take(20) {
            eprintln!("  {id}");
        }
    }
    for f in &run.correlation_failures {
        eprintln!("correlation [{}] {}: {}", f.predictions, f.measure, f.error);
    }
    for p in &run.outputs {
        println!("wrote {}", p.display());
    }
    println!("manifest {}", run.manifest_path.display());
    Ok(run.exit_code())
}

fn cache_path(args: &CacheArgs) -> anyhow::Result<PathBuf> {
    match (&args.path, &args.cache_dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(dir)) => Ok(dir.join(CACHE_FILE)),
        (None, None) => anyhow::bail!("give a cache file or set PRECOG_CACHE_DIR"),
    }
}

fn cache_stats(args: &CacheArgs) -> anyhow::Result<i32> {
    let path = cache_path(args)?;
    let stats = PredictionCache::stats(&path)?;
    println!("{}", path.display());
    println!("lines: {}", stats.lines);
    println!("unique entries: {}", stats.unique_entries);
    println!("examples: {}", stats.examples);
    for (fp, n) in &stats.by_fingerprint {
        println!("fingerprint {fp}: {n}");
    }
    if stats.malformed_lines > 0 {
        println!("malformed lines: {}", stats.malformed_lines);
    }
    if stats.truncated_tail {
        println!("truncated final line (ignored on load)");
    }
    Ok(0)
}

fn cache_verify(args: &CacheArgs, vocab: Option<&Path>) -> anyhow::Result<i32> {
    let path = cache_path(args)?;
    let vocab = vocab
        .map(|p| Vocabulary::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let report = PredictionCache::verify(&path, vocab.as_ref())?;
    for p in &report.problems {
        println!("{p}");
    }
    println!(
        "{}: {} lines, {} problems",
        path.display(),
        report.lines,
        report.problems.len()
    );
    Ok(if report.is_ok() { 0 } else { 1 })
}

fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Score(args) => score(args),
        Command::Analyze(args) => analyze(args),
        Command::Selftest => {
            let report = run_selftest(&SelftestAssets::bundled());
            print!("{report}");
            return if report.passed() { 0 } else { 1 };
        }
        Command::Cache { command } => {
            let r = match command {
                CacheCommand::Stats(args) => cache_stats(args),
                CacheCommand::Verify { cache, vocab } => cache_verify(cache, vocab.as_deref()),
            };
            return r.unwrap_or_else(|e| {
                eprintln!("error: {e:#}");
                2
            });
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    ExitCode::from(run(cli) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str]) -> Result<RunConfig, PipelineError> {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "[[tasks]]\nname = \"t\"\ndataset = \"d.jsonl\"\n").unwrap();
        let argv = ["precog", "score", "--config", cfg.to_str().unwrap()];
        let cli = Cli::try_parse_from(argv.iter().chain(args)).unwrap();
        match cli.command {
            Command::Score(a) => a.resolve(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = resolve(&[
            "--mock-corpus", "c.txt", "--k", "5", "--bin-width", "10", "--measures", "precog,length",
            "--lexcov-set-semantics", "--corr-abscissa", "mean", "--cache-dir", "/tmp/pc",
        ])
        .unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.bin_width.get(), 10);
        assert_eq!(cfg.measures, vec![Measure::Precog, Measure::Length]);
        assert_eq!(cfg.lexcov_counting, OovCounting::Set);
        assert_eq!(cfg.corr_abscissa, Abscissa::Mean);
        assert_eq!(cfg.backend.cache, Some(PathBuf::from("/tmp/pc/predictions.jsonl")));
    }

    #[test]
    fn explicit_cache_wins_over_cache_dir() {
        let cfg = resolve(&["--cache", "mine.jsonl", "--cache-dir", "/tmp/pc"]).unwrap();
        assert_eq!(cfg.backend.cache, Some(PathBuf::from("mine.jsonl")));
    }

    #[test]
    fn url_and_mock_conflict() {
        let r = Cli::try_parse_from(["precog", "score", "--backend-url", "http://x", "--mock-corpus", "c"]);
        assert!(r.is_err());
    }

    #[test]
    fn bad_bin_width_is_config_error() {
        let err = resolve(&["--bin-width", "30"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
