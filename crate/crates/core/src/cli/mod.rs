//! Command-line front end: `train`, `decode`, `align`, `eval`, `estimate-e`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, ExamplePair, Level, RawPair, Vocab, RESERVED};
use crate::decode::{beam_decode, forced_alignment, greedy_decode, DecodeRecord, ModelScorer, Search};
use crate::error::{Error, Result};
use crate::eval::{read_outputs, EvalReport, Metric};
use crate::lattice::write_posteriors_tsv;
use crate::seqnn::Model;
use crate::train::{train, write_metrics_csv, Checkpoint, TrainConfig};
use crate::transition::estimate_emission;

#[derive(Debug, Parser)]
#[command(name = "ssnt", version, about = "Segment-to-segment neural transduction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus metrics.csv.
    Train(TrainArgs),
    /// Decode source lines with a trained model (one JSON record per line).
    Decode(DecodeArgs),
    /// Posterior alignment grid and best path for one pair.
    Align(AlignArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Print the maximum-likelihood geometric emission probability.
    #[command(name = "estimate-e")]
    EstimateE(EstimateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Char,
    Word,
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Char => Level::Char,
            LevelArg::Word => Level::Word,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset (summarization, inflection).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Override a setting, e.g. `--set hidden=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Output directory for checkpoints, vocabularies and metrics.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source lines; for TSV input only the first field is read.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Beam width.
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    #[arg(long)]
    pub greedy: bool,
    /// Maximum output tokens (before EOS).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Must agree with the checkpoint when given.
    #[arg(long, value_enum)]
    pub level: Option<LevelArg>,
    /// Source vocabulary file that must agree with the checkpoint.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    /// Writes `<out>.tsv` and, unless `--no-svg`, `<out>.svg`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_svg: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Exact,
    Rouge,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// References: TSV (last field is read) or plain lines.
    #[arg(long)]
    pub refs: PathBuf,
    /// Hypotheses: TSV, plain lines, or decode records.
    #[arg(long)]
    pub hyps: PathBuf,
    #[arg(long, value_enum, default_value = "exact")]
    pub metric: MetricArg,
    /// Tokenization for scoring.
    #[arg(long, value_enum, default_value = "word")]
    pub level: LevelArg,
    /// Writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, value_enum, default_value = "char")]
    pub level: LevelArg,
    /// Count the end-of-sequence symbol in both lengths, as training does.
    #[arg(long)]
    pub with_eos: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on standard error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Align(a) => cmd_align(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::EstimateE(a) => cmd_estimate_e(&a),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Resolves the configuration: file or preset or defaults, then overrides.
pub fn resolve_config(config: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let mut c = match (config, preset) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => TrainConfig::default(),
    };
    for o in overrides {
        c.apply_override(o)?;
    }
    Ok(c)
}

fn load_pairs(path: &Path, config: &TrainConfig) -> Result<Vec<RawPair>> {
    let raw = data::load_corpus(path, config.level, config.attributes)?;
    let n = raw.len();
    let kept = config.filter.apply(raw);
    info!("{}: kept {} of {n} pairs after length filters", path.display(), kept.len());
    Ok(kept)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(a.config.as_deref(), a.preset.as_deref(), &a.overrides)?;
    let train_raw = load_pairs(&a.train, &config)?;
    let dev_raw = load_pairs(&a.dev, &config)?;
    if train_raw.is_empty() || dev_raw.is_empty() {
        return Err(Error::Data("training and dev sets must be non-empty after filtering".into()));
    }
    let (src_vocab, tgt_vocab) = data::build_vocab(&train_raw, config.min_count())?;
    let train_set = data::encode_pairs(&train_raw, &src_vocab, &tgt_vocab);
    let dev_set = data::encode_pairs(&dev_raw, &src_vocab, &tgt_vocab);
    let (model, outcome) = run_training(&config, &train_set, &dev_set, &src_vocab, &tgt_vocab, &a.out)?;
    drop(model);
    println!(
        "best dev perplexity {:.6} at epoch {} ({} epochs, {} updates, {} skipped examples)",
        outcome.best_dev_perplexity,
        outcome.best_epoch,
        outcome.metrics.len(),
        outcome.steps,
        outcome.skipped_examples
    );
    Ok(())
}

/// Trains on encoded data, writing `best.ckpt`, `last.ckpt`, `metrics.csv`
/// and both vocabularies into `out`.
pub fn run_training(
    config: &TrainConfig,
    train_set: &[ExamplePair],
    dev_set: &[ExamplePair],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    out: &Path,
) -> Result<(Model, crate::train::TrainOutcome)> {
    let mc = config.model_config(src_vocab.len(), tgt_vocab.len(), train_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::new(mc, config.init_scale, &mut rng)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    src_vocab.save(&out.join("src.vocab"))?;
    tgt_vocab.save(&out.join("tgt.vocab"))?;
    write_file(&out.join("config.toml"), config.to_toml().as_bytes())?;
    let mut rows = Vec::new();
    let outcome = train(config, model, train_set, dev_set, |ev| {
        let ck = Checkpoint {
            config: config.clone(),
            model: ev.model.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            step: ev.step,
            metric: Some(ev.metrics.dev_perplexity),
        };
        if ev.is_best {
            ck.save(&out.join("best.ckpt"))?;
        }
        ck.save(&out.join("last.ckpt"))?;
        rows.push(ev.metrics);
        write_metrics_csv(&out.join("metrics.csv"), &rows)
    })?;
    Ok((outcome.best.clone(), outcome))
}

fn source_field(line: &str) -> &str {
    line.split('\t').next().unwrap_or("")
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(level) = a.level {
        if Level::from(level) != ck.config.level {
            return Err(Error::Data(format!(
                "--level {:?} does not match the checkpoint's {:?} vocabulary",
                Level::from(level),
                ck.config.level
            )));
        }
    }
    if let Some(path) = &a.src_vocab {
        if Vocab::load(path)? != ck.src_vocab {
            return Err(Error::Data(format!("{} does not match the checkpoint's source vocabulary", path.display())));
        }
    }
    let search = match (a.greedy, a.beam) {
        (true, _) => Search::Greedy,
        (false, Some(0)) => return Err(Error::Config("--beam must be ≥ 1".into())),
        (false, Some(k)) => Search::Beam(k),
        (false, None) => ck.config.search(),
    };
    let text = fs::read_to_string(&a.input).map_err(|e| Error::io(format!("reading {}", a.input.display()), e))?;
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.trim().is_empty())
        .collect();
    let level = ck.config.level;
    let records: Vec<Result<DecodeRecord>> = lines
        .par_iter()
        .map(|line| {
            let src = source_field(line);
            let tokens = data::tokenize(src, level, ck.config.attributes);
            if tokens.is_empty() {
                return Err(Error::Data(format!("empty source in line {line:?}")));
            }
            let ids = ck.src_vocab.encode_with_eos(&tokens);
            let columns = match a.max_len {
                Some(n) => n + 1,
                None => ck.config.max_columns(tokens.len()),
            };
            let scorer = ModelScorer::new(&ck.model, &ids)?;
            let best = match search {
                Search::Greedy => greedy_decode(&scorer, columns)?.0,
                Search::Beam(k) => beam_decode(&scorer, columns, k)?.remove(0),
            };
            DecodeRecord::new(src.to_string(), &best, &ck.tgt_vocab, |t| level.join(t))
        })
        .collect();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r?)?);
        out.push('\n');
    }
    match &a.output {
        Some(p) => write_file(p, out.as_bytes()),
        None => std::io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| Error::io("writing decode records", e)),
    }
}

fn labels(tokens: &[String]) -> Vec<String> {
    tokens.iter().cloned().chain([RESERVED[data::EOS].to_string()]).collect()
}

fn cmd_align(a: &AlignArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let level = ck.config.level;
    let src = data::tokenize(&a.source, level, ck.config.attributes);
    let tgt = data::tokenize(&a.target, level, false);
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Data("source and target must be non-empty".into()));
    }
    let fa = forced_alignment(
        &ck.model,
        &ck.src_vocab.encode_with_eos(&src),
        &ck.tgt_vocab.encode_with_eos(&tgt),
    )?;
    let (in_labels, out_labels) = (labels(&src), labels(&tgt));
    let mut tsv = Vec::new();
    write_posteriors_tsv(&mut tsv, &fa.gamma, &in_labels, &out_labels)?;
    write_file(&a.out.with_extension("tsv"), &tsv)?;
    if !a.no_svg {
        let svg = svg::render(&fa.gamma, &in_labels, &out_labels, &fa.path)?;
        write_file(&a.out.with_extension("svg"), svg.as_bytes())?;
    }
    let cells: Vec<String> = fa
        .path
        .iter()
        .enumerate()
        .map(|(j, i)| format!("({},{})", i + 1, j + 1))
        .collect();
    println!("log_likelihood\t{}", fa.log_likelihood);
    println!("viterbi_score\t{}", fa.path_score);
    println!("viterbi_path\t{}", cells.join(" "));
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let refs = read_outputs(&a.refs)?;
    let hyps = read_outputs(&a.hyps)?;
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            a.refs.display(),
            refs.len(),
            a.hyps.display(),
            hyps.len()
        )));
    }
    let metric = match a.metric {
        MetricArg::Exact => Metric::Exact,
        MetricArg::Rouge => Metric::Rouge,
    };
    let level = Level::from(a.level);
    let report = EvalReport::compute(&refs, &hyps, metric, |s| data::tokenize(s, level, false))?;
    let summary = report.summary_json()?;
    if let Some(out) = &a.out {
        write_file(&out.with_extension("csv"), report.to_csv()?.as_bytes())?;
        write_file(&out.with_extension("json"), summary.as_bytes())?;
    }
    println!("{summary}");
    Ok(())
}

/// `x` with 17 significant digits in plain decimal notation.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn cmd_estimate_e(a: &EstimateArgs) -> Result<()> {
    let pairs = data::load_corpus(&a.train, a.level.into(), false)?;
    let extra = usize::from(a.with_eos);
    let lengths: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (p.source.len() + extra, p.target.len() + extra))
        .collect();
    let e = estimate_emission(&lengths)?;
    println!("{}", format_significant(e, 17));
    Ok(())
}
