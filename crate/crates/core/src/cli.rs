//! Command-line pipeline: corpus generation, pretraining, entropy probing,
//! uniform-scale sweeps, curve fitting, head-scale tuning, perplexity and
//! passkey evaluation, and CSV-to-SVG report rendering.
//!
//! Configuration: an optional TOML file (schema = [`RunConfig`]) plus flag
//! overrides; flags win. Artifacts land in the `--out` directory, defaulting
//! to `$SCALELAB_OUT/<command>` or `runs/<command>`. Every command writes a
//! `manifest.json` with the resolved configuration and named inputs, and no
//! timestamps, so artifacts are byte-reproducible from the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, write_atomic};
use crate::corpus::{detokenize, generate_text, sample_sequences, Corpus};
use crate::error::{Error, Result};
use crate::eval::{eval_passkey, sliding_window_ppl, ModelScorer};
use crate::model::{Model, ModelConfig, ScaleVector};
use crate::probe::{
    average_entropy_curve, decimated_positions, find_inflection, CurveScope, InflectionParams,
};
use crate::report::{
    self, read_sweep_json, LinePlot, LineStyle, Series, SweepBestEntry, SweepSummary,
};
use crate::scale::{
    fit_scale_curve, scale_entropy_correlation, tune_head_scales, uniform_scale_sweep, GradMode,
    TuneConfig,
};
use crate::train::{pretrain_toy, TrainConfig};

// ---------------------------------------------------------------------------
// configuration file schema

/// Train/validation split parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            train_fraction: 0.9,
            split_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub check_finite: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            warmup: 100,
            seed: 7,
            check_finite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Longest probed position; None → 4× the model's training length.
    pub max_len: Option<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Probe every k-th position (the final position always included).
    pub position_stride: usize,
    pub inflection_window: usize,
    pub inflection_tau: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = InflectionParams::default();
        ProbeSection {
            max_len: None,
            samples: 8,
            seed: 17,
            position_stride: 1,
            inflection_window: p.window,
            inflection_tau: p.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Grid bounds and spacing in λ·√d units; 1.0 is the untouched default.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    /// Sweep target length; None → 2× the model's training length.
    pub l_prime: Option<usize>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            grid_lo: 1.0,
            grid_hi: 1.4,
            grid_step: 0.02,
            l_prime: None,
            samples: 8,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub batch: usize,
    pub seed: u64,
    /// Tuning sequences are padded to slack × L′ so the window's tail stays
    /// in-distribution while tuning.
    pub tune_len_slack: f64,
    /// Sequences drawn from the training split to tune on.
    pub dataset_size: usize,
    /// Validation sequences for the scale/entropy correlation table.
    pub correlation_samples: usize,
    /// Tuning target length; None → 2× the model's training length.
    pub l_prime: Option<usize>,
}

impl Default for TuneSection {
    fn default() -> Self {
        let t = TuneConfig::default();
        TuneSection {
            steps: t.steps,
            lr: t.lr,
            warmup: t.warmup,
            batch: t.batch,
            seed: t.seed,
            tune_len_slack: 1.125,
            dataset_size: 64,
            correlation_samples: 4,
            l_prime: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Window size; None → the model's training length.
    pub window: Option<usize>,
    /// Stride; None → window / 4 (at least 1).
    pub stride: Option<usize>,
    /// Evaluate on the first N validation tokens.
    pub max_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            window: None,
            stride: None,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PasskeySection {
    /// Context lengths to test; None → [L, 2L].
    pub lengths: Option<Vec<usize>>,
    pub keys_per_depth: usize,
    pub seed: u64,
}

impl Default for PasskeySection {
    fn default() -> Self {
        PasskeySection {
            lengths: None,
            keys_per_depth: 10,
            seed: 13,
        }
    }
}

/// Everything a pipeline run can configure, one section per concern. All
/// fields have desk-scale defaults, so an empty file (or none) is valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub pretrain: PretrainSection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
    pub tune: TuneSection,
    pub eval: EvalSection,
    pub passkey: PasskeySection,
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Output directory: explicit flag, else $SCALELAB_OUT/<command>, else
/// runs/<command>.
pub fn resolve_out(flag: Option<PathBuf>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    match std::env::var("SCALELAB_OUT") {
        Ok(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

/// Builds the λ grid from bounds in λ·√d units.
pub fn lambda_grid_from(lo: f64, hi: f64, step: f64, d_head: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !lo.is_finite() {
        return Err(Error::Param {
            name: "grid_lo",
            why: format!("must be positive, got {lo}"),
        });
    }
    if !(hi >= lo) || !hi.is_finite() {
        return Err(Error::Param {
            name: "grid_hi",
            why: format!("must be ≥ grid_lo, got {hi}"),
        });
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Param {
            name: "grid_step",
            why: format!("must be positive, got {step}"),
        });
    }
    let root = (d_head as f64).sqrt();
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|k| (lo + step * k as f64) / root).collect())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: serde_json::Value,
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "code_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "inputs": inputs,
    });
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_scales_or_default(model: &Model, path: Option<&Path>) -> Result<ScaleVector> {
    match path {
        Some(p) => checkpoint::load_scales(p, &model.config),
        None => Ok(ScaleVector::default_for(&model.config)),
    }
}

fn step_loss_csv(losses: &[f64]) -> Result<String> {
    let mut out = String::from("step,loss\n");
    for (i, &l) in losses.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss {l} at step {}", i + 1)));
        }
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// argument definitions

#[derive(Debug, Parser)]
#[command(
    name = "scalelab",
    version,
    about = "Length-generalization laboratory for byte-level transformers \
             without position encoding",
    after_help = "Artifacts go to --out, else $SCALELAB_OUT/<command>, else \
                  runs/<command>. Exit codes: 0 ok, 1 usage or invalid \
                  parameters, 2 data or I/O, 3 internal contract violation."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic text corpus
    GenCorpus(GenCorpusArgs),
    /// Pretrain the toy byte-level model on a corpus
    Pretrain(PretrainArgs),
    /// Measure the attention-entropy curve and detect its inflection
    ProbeEntropy(ProbeEntropyArgs),
    /// Grid-sweep uniform attention scales over positions up to L'
    Sweep(SweepArgs),
    /// Fit the law lambda*sqrt(d) = 1 + c*ln(s) to stored sweep results
    FitCurve(FitCurveArgs),
    /// Gradient-tune per-head scales on a frozen model
    TuneHeads(TuneHeadsArgs),
    /// Sliding-window perplexity over validation tokens
    EvalPpl(EvalPplArgs),
    /// Passkey retrieval accuracy over a length x depth grid
    Passkey(PasskeyArgs),
    /// Render stored CSV artifacts into SVG plots (no model passes)
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Approximate corpus size in bytes
    #[arg(long, default_value_t = 6_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML run configuration (flags override it)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus text file(s), UTF-8
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeEntropyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint to probe
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Per-head scales JSON; default 1/sqrt(d) everywhere
    #[arg(long)]
    pub scales: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// "model-average" (default) or "layer<L>.head<H>"
    #[arg(long)]
    pub scope: Option<String>,
    /// Detector smoothing window in positions
    #[arg(long)]
    pub inflection_window: Option<usize>,
    /// Detector slope threshold (multiple of the in-domain baseline)
    #[arg(long)]
    pub inflection_tau: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Target length L' (default 2x training length)
    #[arg(long)]
    pub l_prime: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub grid_lo: Option<f64>,
    #[arg(long)]
    pub grid_hi: Option<f64>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitCurveArgs {
    /// sweep.csv produced by the sweep subcommand
    #[arg(long)]
    pub sweep: PathBuf,
    /// Extension-ratio fit range (s = position / training length)
    #[arg(long, default_value_t = 1.0)]
    pub s_lo: f64,
    #[arg(long, default_value_t = 8.0)]
    pub s_hi: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    /// Start every head at the sweep's best uniform scale for L'
    BestUniform,
    /// Start every head at 1/sqrt(d)
    Default,
}

#[derive(Debug, Args)]
pub struct TuneHeadsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// sweep.json for best-uniform initialization
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InitChoice::BestUniform)]
    pub init: InitChoice,
    /// Ablation: start all scales at 1/sqrt(d) (same as --init default)
    #[arg(long)]
    pub default_init: bool,
    /// Ablation: drop the lambda >= 1/sqrt(d) focus constraint
    #[arg(long)]
    pub no_focus_constraint: bool,
    /// Cross-check gradients with central finite differences
    #[arg(long)]
    pub finite_diff: bool,
    #[arg(long)]
    pub l_prime: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPplArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub scales: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PasskeyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub scales: Option<PathBuf>,
    /// Context lengths, comma separated (default "L,2L")
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub keys: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to scan for CSV artifacts (repeatable)
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// command implementations

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::GenCorpus(a) => run_gen_corpus(a),
            Command::Pretrain(a) => run_pretrain(a),
            Command::ProbeEntropy(a) => run_probe_entropy(a),
            Command::Sweep(a) => run_sweep(a),
            Command::FitCurve(a) => run_fit_curve(a),
            Command::TuneHeads(a) => run_tune_heads(a),
            Command::EvalPpl(a) => run_eval_ppl(a),
            Command::Passkey(a) => run_passkey(a),
            Command::Report(a) => run_report(a),
        }
    }
}

pub fn run_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let dir = resolve_out(args.out, "gen-corpus");
    let text = generate_text(args.bytes, args.seed);
    let path = dir.join("corpus.txt");
    write_atomic(&path, text.as_bytes())?;
    write_manifest(
        &dir,
        "gen-corpus",
        json!({"bytes": args.bytes, "seed": args.seed}),
        json!({}),
    )?;
    println!("wrote {} ({} bytes)", path.display(), text.len());
    Ok(())
}

pub fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let dir = resolve_out(args.out, "pretrain");
    let mut section = cfg.pretrain.clone();
    if let Some(v) = args.steps {
        section.steps = v;
    }
    if let Some(v) = args.batch {
        section.batch = v;
    }
    if let Some(v) = args.lr {
        section.lr = v;
    }
    if let Some(v) = args.seed {
        section.seed = v;
    }
    let corpus = Corpus::from_files(
        &args.corpus,
        cfg.corpus.train_fraction,
        cfg.corpus.split_seed,
    )?;
    println!(
        "corpus: {} train / {} validation tokens",
        corpus.train().len(),
        corpus.validation().len()
    );
    let train = TrainConfig {
        batch: section.batch,
        lr: section.lr,
        warmup: section.warmup,
        seed: section.seed,
        check_finite: section.check_finite,
    };
    let (model, log) = pretrain_toy(&cfg.model, &corpus, section.steps, &train)?;
    for (i, &l) in log.step_loss.iter().enumerate() {
        let step = i + 1;
        if step % 100 == 0 || step == log.step_loss.len() {
            println!("step {step:5}  loss {l:.4}");
        }
    }
    if let Some(v) = log.validation_loss {
        println!("validation loss {v:.4} (uniform baseline ln 256 = {:.4})", 256f64.ln());
    }
    let ckpt = dir.join("model.ckpt");
    checkpoint::save_model(&model, &ckpt)?;
    write_atomic(&dir.join("train_loss.csv"), step_loss_csv(&log.step_loss)?.as_bytes())?;
    write_manifest(
        &dir,
        "pretrain",
        json!({"model": cfg.model, "corpus": cfg.corpus, "pretrain": section}),
        json!({"corpus": args.corpus.iter().map(|p| path_str(p)).collect::<Vec<_>>()}),
    )?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

pub fn run_probe_entropy(args: ProbeEntropyArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let dir = resolve_out(args.out, "probe-entropy");
    let mut section = cfg.probe.clone();
    if let Some(v) = args.max_len {
        section.max_len = Some(v);
    }
    if let Some(v) = args.samples {
        section.samples = v;
    }
    if let Some(v) = args.inflection_window {
        section.inflection_window = v;
    }
    if let Some(v) = args.inflection_tau {
        section.inflection_tau = v;
    }
    let scope: CurveScope = match &args.scope {
        Some(s) => s.parse()?,
        None => CurveScope::ModelAverage,
    };
    let model = checkpoint::load_model(&args.model)?;
    let scales = load_scales_or_default(&model, args.scales.as_deref())?;
    let corpus = Corpus::from_files(
        &args.corpus,
        cfg.corpus.train_fraction,
        cfg.corpus.split_seed,
    )?;
    let max_len = section.max_len.unwrap_or(4 * model.config.train_len);
    let valset = sample_sequences(corpus.validation(), max_len, section.samples, section.seed)?;
    let positions = decimated_positions(max_len, section.position_stride)?;
    let curve = average_entropy_curve(&model, &valset, &scales, scope, &positions)?;
    report::write_entropy_curve_csv(&dir.join("entropy.csv"), &curve)?;
    println!(
        "entropy curve: {} positions to {max_len}, {} samples, scope {scope}; \
         bound H <= ln(i) holds",
        curve.positions().len(),
        curve.sample_count()
    );
    let params = InflectionParams {
        window: section.inflection_window,
        tau: section.inflection_tau,
    };
    let inflection = find_inflection(
        curve.positions(),
        curve.mean_entropy(),
        model.config.train_len,
        params,
    )?;
    let summary = json!({
        "train_len": model.config.train_len,
        "window": params.window,
        "tau": params.tau,
        "position": inflection,
    });
    let mut text =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_atomic(&dir.join("inflection.json"), text.as_bytes())?;
    match inflection {
        Some(p) => println!(
            "entropy inflection at position {p} ({:.2} x training length)",
            p as f64 / model.config.train_len as f64
        ),
        None => println!("no entropy inflection detected up to {max_len}"),
    }
    write_manifest(
        &dir,
        "probe-entropy",
        json!({"probe": section, "corpus": cfg.corpus, "scope": scope.to_string()}),
        json!({
            "model": path_str(&args.model),
            "scales": args.scales.as_deref().map(path_str),
            "corpus": args.corpus.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    )
}

pub fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let dir = resolve_out(args.out, "sweep");
    let mut section = cfg.sweep.clone();
    if let Some(v) = args.l_prime {
        section.l_prime = Some(v);
    }
    if let Some(v) = args.samples {
        section.samples = v;
    }
    if let Some(v) = args.grid_lo {
        section.grid_lo = v;
    }
    if let Some(v) = args.grid_hi {
        section.grid_hi = v;
    }
    if let Some(v) = args.grid_step {
        section.grid_step = v;
    }
    let model = checkpoint::load_model(&args.model)?;
    let l_prime = section.l_prime.unwrap_or(2 * model.config.train_len);
    let grid = lambda_grid_from(
        section.grid_lo,
        section.grid_hi,
        section.grid_step,
        model.config.d_head,
    )?;
    let corpus = Corpus::from_files(
        &args.corpus,
        cfg.corpus.train_fraction,
        cfg.corpus.split_seed,
    )?;
    let valset = sample_sequences(corpus.validation(), l_prime, section.samples, section.seed)?;
    println!(
        "sweeping {} scales over positions 2..={l_prime} on {} sequences",
        grid.len(),
        valset.len()
    );
    let sweep = uniform_scale_sweep(&model, &valset, &grid, l_prime)?;
    report::write_sweep_csv(&dir.join("sweep.csv"), &sweep)?;
    report::write_sweep_json(&dir.join("sweep.json"), &sweep)?;
    let root = (model.config.d_head as f64).sqrt();
    let train_len = model.config.train_len;
    for &p in &[train_len.min(l_prime), l_prime] {
        if let Some((lambda, log_ppl)) = sweep.best_at(p) {
            println!(
                "position {p}: best lambda*sqrt(d) = {:.2}, log-PPL {log_ppl:.4}",
                lambda * root
            );
        }
    }
    write_manifest(
        &dir,
        "sweep",
        json!({"sweep": section, "corpus": cfg.corpus, "l_prime": l_prime}),
        json!({
            "model": path_str(&args.model),
            "corpus": args.corpus.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    )
}

pub fn run_fit_curve(args: FitCurveArgs) -> Result<()> {
    let dir = resolve_out(args.out, "fit-curve");
    let rows = report::read_sweep_csv(&args.sweep)?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.is_best)
        .map(|r| (r.extension_ratio, r.lambda_sqrt_d))
        .collect();
    let fit = fit_scale_curve(&points, (args.s_lo, args.s_hi))?;
    let in_range: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(s, _)| *s >= args.s_lo && *s <= args.s_hi)
        .collect();
    report::write_fit_json(&dir.join("fit.json"), &fit)?;
    report::write_fit_points_csv(&dir.join("fit_points.csv"), &in_range, &fit)?;
    println!("{}", fit.render());
    write_manifest(
        &dir,
        "fit-curve",
        json!({"s_lo": args.s_lo, "s_hi": args.s_hi}),
        json!({"sweep": path_str(&args.sweep)}),
    )
}

fn best_uniform_from_summary(summary: &SweepSummary, l_prime: usize) -> Result<&SweepBestEntry> {
    summary
        .best
        .iter()
        .find(|e| e.position == l_prime)
        .ok_or_else(|| Error::Param {
            name: "l_prime",
            why: format!("sweep summary does not cover target length {l_prime}"),
        })
}

pub fn run_tune_heads(args: TuneHeadsArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let dir = resolve_out(args.out, "tune-heads");
    let mut section = cfg.tune.clone();
    if let Some(v) = args.l_prime {
        section.l_prime = Some(v);
    }
    if let Some(v) = args.steps {
        section.steps = v;
    }
    if let Some(v) = args.lr {
        section.lr = v;
    }
    if let Some(v) = args.seed {
        section.seed = v;
    }
    let model = checkpoint::load_model(&args.model)?;
    let mcfg = &model.config;
    let l_prime = section.l_prime.unwrap_or(2 * mcfg.train_len);
    if !(section.tune_len_slack >= 1.0) {
        return Err(Error::Param {
            name: "tune_len_slack",
            why: format!("must be ≥ 1, got {}", section.tune_len_slack),
        });
    }
    let tune_len = (l_prime as f64 * section.tune_len_slack).ceil() as usize;

    let init_choice = if args.default_init {
        InitChoice::Default
    } else {
        args.init
    };
    let init = match init_choice {
        InitChoice::Default => ScaleVector::default_for(mcfg),
        InitChoice::BestUniform => {
            let sweep_path = args.sweep.as_deref().ok_or(Error::Param {
                name: "sweep",
                why: "best-uniform initialization needs --sweep <sweep.json> \
                      (or pass --default-init)"
                    .into(),
            })?;
            let summary = read_sweep_json(sweep_path)?;
            let entry = best_uniform_from_summary(&summary, l_prime)?;
            ScaleVector::uniform(mcfg.total_heads(), entry.lambda, mcfg.default_lambda())?
        }
    };

    let corpus = Corpus::from_files(
        &args.corpus,
        cfg.corpus.train_fraction,
        cfg.corpus.split_seed,
    )?;
    let dataset = sample_sequences(corpus.train(), tune_len, section.dataset_size, section.seed)?;
    let tune_cfg = TuneConfig {
        steps: section.steps,
        lr: section.lr,
        warmup: section.warmup,
        batch: section.batch,
        constraint: !args.no_focus_constraint,
        grad_mode: if args.finite_diff {
            GradMode::FiniteDiff
        } else {
            GradMode::Reverse
        },
        seed: section.seed,
    };
    let root = (mcfg.d_head as f64).sqrt();
    println!(
        "tuning {} head scales for {} steps at L' = {l_prime} (sequences of {tune_len}), \
         init lambda*sqrt(d) = {:.2}, constraint {}",
        init.len(),
        tune_cfg.steps,
        init.values()[0] * root,
        if tune_cfg.constraint { "on" } else { "off" }
    );
    let result = tune_head_scales(&model, &dataset, &init, &tune_cfg)?;
    checkpoint::save_scales(&result.scales, &dir.join("scales.json"))?;
    write_atomic(&dir.join("tune_loss.csv"), step_loss_csv(&result.loss_log)?.as_bytes())?;

    // per-position comparison of the init and tuned scales on held-out data
    let positions: Vec<usize> = (2..=l_prime).collect();
    let valset = sample_sequences(
        corpus.validation(),
        l_prime,
        section.correlation_samples,
        section.seed ^ 0x5a1,
    );
    let valset = match valset {
        Ok(v) => v,
        Err(_) => sample_sequences(
            corpus.train(),
            l_prime,
            section.correlation_samples,
            section.seed,
        )?,
    };
    let init_nll = crate::eval::average_nll_by_position(&model, &valset, &init, &positions)?;
    let tuned_nll =
        crate::eval::average_nll_by_position(&model, &valset, &result.scales, &positions)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "mean log-PPL over 2..={l_prime}: init {:.4} -> tuned {:.4}",
        mean(&init_nll),
        mean(&tuned_nll)
    );
    report::write_position_nll_csv(
        &dir.join("loss_by_position.csv"),
        &positions,
        &[
            ("init".to_string(), init_nll),
            ("tuned".to_string(), tuned_nll),
        ],
    )?;

    let correlation = scale_entropy_correlation(&model, &result.scales, &valset, l_prime)?;
    report::write_correlation_csv(&dir.join("correlation.csv"), &correlation)?;
    report::write_correlation_json(&dir.join("correlation.json"), &correlation)?;
    for (l, s) in correlation.per_layer_spearman.iter().enumerate() {
        match s {
            Some(r) => println!("layer {l}: scale/entropy Spearman {r:.3}"),
            None => println!("layer {l}: scale/entropy correlation degenerate"),
        }
    }
    println!(
        "scales: min lambda*sqrt(d) = {:.4}, floor = 1.0",
        result.scales.min_value() * root
    );
    write_manifest(
        &dir,
        "tune-heads",
        json!({
            "tune": section,
            "corpus": cfg.corpus,
            "l_prime": l_prime,
            "init": match init_choice {
                InitChoice::BestUniform => "best-uniform",
                InitChoice::Default => "default",
            },
            "constraint": tune_cfg.constraint,
            "grad_mode": if args.finite_diff { "finite-diff" } else { "reverse" },
        }),
        json!({
            "model": path_str(&args.model),
            "sweep": args.sweep.as_deref().map(path_str),
            "corpus": args.corpus.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    )
}

pub fn run_eval_ppl(args: EvalPplArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let dir = resolve_out(args.out, "eval-ppl");
    let mut section = cfg.eval.clone();
    if let Some(v) = args.window {
        section.window = Some(v);
    }
    if let Some(v) = args.stride {
        section.stride = Some(v);
    }
    if let Some(v) = args.max_tokens {
        section.max_tokens = v;
    }
    let model = checkpoint::load_model(&args.model)?;
    let scales = load_scales_or_default(&model, args.scales.as_deref())?;
    let corpus = Corpus::from_files(
        &args.corpus,
        cfg.corpus.train_fraction,
        cfg.corpus.split_seed,
    )?;
    let window = section.window.unwrap_or(model.config.train_len);
    let stride = section.stride.unwrap_or_else(|| (window / 4).max(1));
    let stream = corpus.validation();
    let tokens = &stream[..stream.len().min(section.max_tokens)];
    let eval = sliding_window_ppl(&model, tokens, &scales, window, stride)?;
    println!(
        "window {window} stride {stride}: {} of {} tokens scored, mean NLL {:.4}, PPL {:.2}",
        eval.scored,
        eval.token_count,
        eval.mean_nll(),
        eval.perplexity()
    );
    report::write_ppl_buckets_csv(&dir.join("ppl.csv"), &eval)?;
    let meta = BTreeMap::from([
        ("model".to_string(), path_str(&args.model)),
        (
            "scales".to_string(),
            args.scales
                .as_deref()
                .map(path_str)
                .unwrap_or_else(|| "default".to_string()),
        ),
    ]);
    report::write_ppl_json(&dir.join("ppl.json"), &eval, meta)?;
    write_manifest(
        &dir,
        "eval-ppl",
        json!({"eval": section, "corpus": cfg.corpus, "window": window, "stride": stride}),
        json!({
            "model": path_str(&args.model),
            "scales": args.scales.as_deref().map(path_str),
            "corpus": args.corpus.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    )
}

pub fn run_passkey(args: PasskeyArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let dir = resolve_out(args.out, "passkey");
    let mut section = cfg.passkey.clone();
    if let Some(v) = args.lengths.clone() {
        section.lengths = Some(v);
    }
    if let Some(v) = args.keys {
        section.keys_per_depth = v;
    }
    if let Some(v) = args.seed {
        section.seed = v;
    }
    let model = checkpoint::load_model(&args.model)?;
    let scales = load_scales_or_default(&model, args.scales.as_deref())?;
    let lengths = section
        .lengths
        .clone()
        .unwrap_or_else(|| vec![model.config.train_len, 2 * model.config.train_len]);
    let corpus = Corpus::from_files(
        &args.corpus,
        cfg.corpus.train_fraction,
        cfg.corpus.split_seed,
    )?;
    let filler = detokenize(corpus.validation())?;
    let mut scorer = ModelScorer {
        model: &model,
        scales: &scales,
    };
    let grid = eval_passkey(
        &mut scorer,
        &lengths,
        section.keys_per_depth,
        &filler,
        section.seed,
    )?;
    for (li, &len) in grid.lengths.iter().enumerate() {
        println!(
            "context {len}: mean accuracy {:.3} over {} depths x {} keys",
            grid.mean_for_length(li),
            grid.depths.len(),
            grid.keys_per_depth
        );
    }
    report::write_passkey_csv(&dir.join("passkey.csv"), &grid)?;
    let meta = BTreeMap::from([("model".to_string(), path_str(&args.model))]);
    report::write_passkey_json(&dir.join("passkey.json"), &grid, meta)?;
    write_manifest(
        &dir,
        "passkey",
        json!({"passkey": section, "corpus": cfg.corpus, "lengths": lengths}),
        json!({
            "model": path_str(&args.model),
            "scales": args.scales.as_deref().map(path_str),
            "corpus": args.corpus.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    )
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
        .replace(',', "_")
}

pub fn run_report(args: ReportArgs) -> Result<()> {
    let dir = resolve_out(args.out, "report");
    let mut written = Vec::new();
    let mut inputs = Vec::new();

    // entropy curves: one series per run, plus the ln(i) bound
    let mut entropy_series = Vec::new();
    let mut bound_to = 0usize;
    for run in &args.runs {
        let path = run.join("entropy.csv");
        if !path.exists() {
            continue;
        }
        let curve = report::read_entropy_curve_csv(&path)?;
        inputs.push(path_str(&path));
        bound_to = bound_to.max(*curve.positions().last().expect("nonempty curve"));
        entropy_series.push(Series {
            label: dir_label(run),
            style: LineStyle::Solid,
            points: curve
                .positions()
                .iter()
                .zip(curve.mean_entropy())
                .map(|(&p, &h)| (p as f64, h))
                .collect(),
        });
    }
    if !entropy_series.is_empty() {
        entropy_series.push(Series {
            label: "ln i bound".to_string(),
            style: LineStyle::Dashed,
            points: (1..=bound_to).map(|i| (i as f64, (i as f64).ln())).collect(),
        });
        let plot = LinePlot {
            title: "Mean attention entropy by position".to_string(),
            x_label: "position".to_string(),
            y_label: "entropy (nats)".to_string(),
            series: entropy_series,
        };
        let path = dir.join("entropy.svg");
        report::write_svg(&path, &plot)?;
        written.push(path);
    }

    // sweep: log-PPL vs position for a handful of scales, and the best scale
    for run in &args.runs {
        let path = run.join("sweep.csv");
        if !path.exists() {
            continue;
        }
        let rows = report::read_sweep_csv(&path)?;
        inputs.push(path_str(&path));
        let mut lambdas: Vec<f64> = Vec::new();
        for r in &rows {
            if !lambdas.contains(&r.lambda_sqrt_d) {
                lambdas.push(r.lambda_sqrt_d);
            }
        }
        // at most six curves: ends plus evenly spaced interior scales
        let chosen: Vec<f64> = if lambdas.len() <= 6 {
            lambdas.clone()
        } else {
            let k = (lambdas.len() - 1) as f64 / 5.0;
            (0..6).map(|i| lambdas[(i as f64 * k).round() as usize]).collect()
        };
        let series: Vec<Series> = chosen
            .iter()
            .map(|&l| Series {
                label: format!("lambda*sqrt(d) = {l:.2}"),
                style: LineStyle::Solid,
                points: rows
                    .iter()
                    .filter(|r| r.lambda_sqrt_d == l)
                    .map(|r| (r.position as f64, r.log_ppl))
                    .collect(),
            })
            .collect();
        let plot = LinePlot {
            title: "Log-PPL by position under uniform scales".to_string(),
            x_label: "position".to_string(),
            y_label: "log-PPL (nats)".to_string(),
            series,
        };
        let svg = dir.join(format!("sweep_{}.svg", dir_label(run)));
        report::write_svg(&svg, &plot)?;
        written.push(svg);

        let best_points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.is_best)
            .map(|r| (r.position as f64, r.lambda_sqrt_d))
            .collect();
        let plot = LinePlot {
            title: "Best uniform scale by position".to_string(),
            x_label: "position".to_string(),
            y_label: "lambda*sqrt(d)".to_string(),
            series: vec![Series {
                label: "argmin over grid".to_string(),
                style: LineStyle::Solid,
                points: best_points,
            }],
        };
        let svg = dir.join(format!("sweep_best_{}.svg", dir_label(run)));
        report::write_svg(&svg, &plot)?;
        written.push(svg);
    }

    // fit: consumed points vs the fitted law
    for run in &args.runs {
        let points_path = run.join("fit_points.csv");
        let fit_path = run.join("fit.json");
        if !points_path.exists() || !fit_path.exists() {
            continue;
        }
        let rows = report::read_fit_points_csv(&points_path)?;
        let fit = report::read_fit_json(&fit_path)?;
        inputs.push(path_str(&points_path));
        inputs.push(path_str(&fit_path));
        let plot = LinePlot {
            title: format!("Scale law fit: c = {:.4}, R^2 = {:.4}", fit.c, fit.r_squared),
            x_label: "extension ratio s".to_string(),
            y_label: "lambda*sqrt(d)".to_string(),
            series: vec![
                Series {
                    label: "best uniform scales".to_string(),
                    style: LineStyle::Solid,
                    points: rows.iter().map(|&(s, y, _, _)| (s, y)).collect(),
                },
                Series {
                    label: "1 + c ln s".to_string(),
                    style: LineStyle::Dashed,
                    points: rows.iter().map(|&(s, _, f, _)| (s, f)).collect(),
                },
            ],
        };
        let svg = dir.join(format!("fit_{}.svg", dir_label(run)));
        report::write_svg(&svg, &plot)?;
        written.push(svg);
    }

    // sliding-window perplexity buckets: one series per run
    let mut ppl_series = Vec::new();
    for run in &args.runs {
        let path = run.join("ppl.csv");
        if !path.exists() {
            continue;
        }
        let buckets = report::read_ppl_buckets_csv(&path)?;
        inputs.push(path_str(&path));
        ppl_series.push(Series {
            label: dir_label(run),
            style: LineStyle::Solid,
            points: buckets
                .iter()
                .map(|b| (b.context_len as f64, b.mean_nll()))
                .collect(),
        });
    }
    if !ppl_series.is_empty() {
        let plot = LinePlot {
            title: "Sliding-window log-PPL by context length".to_string(),
            x_label: "in-window context length".to_string(),
            y_label: "mean NLL (nats)".to_string(),
            series: ppl_series,
        };
        let path = dir.join("ppl.svg");
        report::write_svg(&path, &plot)?;
        written.push(path);
    }

    // per-position losses (init vs tuned scale regimes)
    for run in &args.runs {
        let path = run.join("loss_by_position.csv");
        if !path.exists() {
            continue;
        }
        let (positions, series) = report::read_position_nll_csv(&path)?;
        inputs.push(path_str(&path));
        let plot = LinePlot {
            title: "Log-PPL by position".to_string(),
            x_label: "position".to_string(),
            y_label: "mean NLL (nats)".to_string(),
            series: series
                .into_iter()
                .map(|(label, values)| Series {
                    label,
                    style: LineStyle::Solid,
                    points: positions
                        .iter()
                        .zip(&values)
                        .map(|(&p, &v)| (p as f64, v))
                        .collect(),
                })
                .collect(),
        };
        let svg = dir.join(format!("loss_by_position_{}.svg", dir_label(run)));
        report::write_svg(&svg, &plot)?;
        written.push(svg);
    }

    // passkey accuracy: one line per context length
    for run in &args.runs {
        let path = run.join("passkey.csv");
        if !path.exists() {
            continue;
        }
        let rows = report::read_passkey_csv(&path)?;
        inputs.push(path_str(&path));
        let mut lengths: Vec<usize> = Vec::new();
        for &(len, _, _) in &rows {
            if !lengths.contains(&len) {
                lengths.push(len);
            }
        }
        let series: Vec<Series> = lengths
            .iter()
            .map(|&len| Series {
                label: format!("context {len}"),
                style: LineStyle::Solid,
                points: rows
                    .iter()
                    .filter(|&&(l, _, _)| l == len)
                    .map(|&(_, depth, acc)| (depth, acc))
                    .collect(),
            })
            .collect();
        let plot = LinePlot {
            title: "Passkey retrieval accuracy by depth".to_string(),
            x_label: "depth".to_string(),
            y_label: "accuracy".to_string(),
            series,
        };
        let svg = dir.join(format!("passkey_{}.svg", dir_label(run)));
        report::write_svg(&svg, &plot)?;
        written.push(svg);
    }

    // converged entropy vs searched scale, one series per layer
    for run in &args.runs {
        let path = run.join("correlation.csv");
        if !path.exists() {
            continue;
        }
        let rows = report::read_correlation_csv(&path)?;
        inputs.push(path_str(&path));
        let n_layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let series: Vec<Series> = (0..n_layers)
            .map(|l| {
                let mut pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.layer == l)
                    .map(|r| (r.entropy, r.lambda))
                    .collect();
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite entropies"));
                Series {
                    label: format!("layer {l}"),
                    style: LineStyle::Solid,
                    points: pts,
                }
            })
            .collect();
        let plot = LinePlot {
            title: "Searched scale vs converged entropy per head".to_string(),
            x_label: "entropy (nats)".to_string(),
            y_label: "lambda".to_string(),
            series,
        };
        let svg = dir.join(format!("correlation_{}.svg", dir_label(run)));
        report::write_svg(&svg, &plot)?;
        written.push(svg);
    }

    // training and tuning loss curves
    for run in &args.runs {
        for name in ["train_loss.csv", "tune_loss.csv"] {
            let path = run.join(name);
            if !path.exists() {
                continue;
            }
            let (steps, series) = read_loss_csv(&path)?;
            inputs.push(path_str(&path));
            let plot = LinePlot {
                title: format!("{} ({})", name.trim_end_matches(".csv"), dir_label(run)),
                x_label: "step".to_string(),
                y_label: "loss (nats)".to_string(),
                series: vec![Series {
                    label: "batch loss".to_string(),
                    style: LineStyle::Solid,
                    points: steps.iter().zip(&series).map(|(&s, &l)| (s as f64, l)).collect(),
                }],
            };
            let svg = dir.join(format!(
                "{}_{}.svg",
                name.trim_end_matches(".csv"),
                dir_label(run)
            ));
            report::write_svg(&svg, &plot)?;
            written.push(svg);
        }
    }

    if written.is_empty() {
        return Err(Error::Data(format!(
            "no known CSV artifacts found under {}",
            args.runs
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    write_manifest(
        &dir,
        "report",
        json!({"runs": args.runs.iter().map(|p| path_str(p)).collect::<Vec<_>>()}),
        json!({"csv": inputs}),
    )
}

fn read_loss_csv(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("step,loss") => {}
        other => {
            return Err(Error::Data(format!(
                "{}: header {other:?}, expected \"step,loss\"",
                path.display()
            )))
        }
    }
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    for (i, line) in lines.enumerate() {
        let (s, l) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}: row {} is not step,loss", path.display(), i + 2))
        })?;
        steps.push(s.parse().map_err(|_| {
            Error::Data(format!("{}: row {}: bad step {s:?}", path.display(), i + 2))
        })?);
        losses.push(l.parse().map_err(|_| {
            Error::Data(format!("{}: row {}: bad loss {l:?}", path.display(), i + 2))
        })?);
    }
    Ok((steps, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::default_lambda_grid;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).expect("parse")
    }

    #[test]
    fn ablation_flags_parse() {
        let cli = parse(&[
            "scalelab",
            "tune-heads",
            "--model",
            "m.ckpt",
            "--corpus",
            "c.txt",
            "--no-focus-constraint",
            "--default-init",
            "--out",
            "o",
        ]);
        match cli.command {
            Command::TuneHeads(a) => {
                assert!(a.no_focus_constraint);
                assert!(a.default_init);
                assert_eq!(a.init, InitChoice::BestUniform, "explicit flag overrides");
            }
            _ => panic!("wrong subcommand"),
        }
        let cli = parse(&[
            "scalelab",
            "tune-heads",
            "--model",
            "m.ckpt",
            "--corpus",
            "c.txt",
            "--init",
            "default",
        ]);
        match cli.command {
            Command::TuneHeads(a) => {
                assert!(!a.no_focus_constraint);
                assert_eq!(a.init, InitChoice::Default);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn unknown_flag_is_a_parse_error() {
        assert!(Cli::try_parse_from(["scalelab", "sweep", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["scalelab", "not-a-command"]).is_err());
    }

    #[test]
    fn probe_detector_flags_override_config() {
        let cli = parse(&[
            "scalelab",
            "probe-entropy",
            "--model",
            "m.ckpt",
            "--corpus",
            "c.txt",
            "--inflection-window",
            "32",
            "--inflection-tau",
            "1.5",
        ]);
        match cli.command {
            Command::ProbeEntropy(a) => {
                assert_eq!(a.inflection_window, Some(32));
                assert_eq!(a.inflection_tau, Some(1.5));
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn passkey_lengths_parse_comma_separated() {
        let cli = parse(&[
            "scalelab",
            "passkey",
            "--model",
            "m",
            "--corpus",
            "c",
            "--lengths",
            "128,256,512",
        ]);
        match cli.command {
            Command::Passkey(a) => assert_eq!(a.lengths, Some(vec![128, 256, 512])),
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn default_grid_matches_library_default() {
        let grid = lambda_grid_from(1.0, 1.4, 0.02, 32).unwrap();
        assert_eq!(grid, default_lambda_grid(32));
        assert_eq!(grid.len(), 21);
    }

    #[test]
    fn grid_bounds_validated() {
        assert!(lambda_grid_from(0.0, 1.4, 0.02, 32).is_err());
        assert!(lambda_grid_from(1.0, 0.9, 0.02, 32).is_err());
        assert!(lambda_grid_from(1.0, 1.4, 0.0, 32).is_err());
        let single = lambda_grid_from(1.2, 1.2, 0.02, 16).unwrap();
        assert_eq!(single, vec![1.2 / 4.0]);
    }

    #[test]
    fn out_dir_resolution_precedence() {
        let explicit = resolve_out(Some(PathBuf::from("explicit")), "sweep");
        assert_eq!(explicit, PathBuf::from("explicit"));
        std::env::remove_var("SCALELAB_OUT");
        assert_eq!(resolve_out(None, "sweep"), PathBuf::from("runs/sweep"));
        std::env::set_var("SCALELAB_OUT", "/tmp/lab");
        assert_eq!(resolve_out(None, "sweep"), PathBuf::from("/tmp/lab/sweep"));
        std::env::remove_var("SCALELAB_OUT");
    }

    #[test]
    fn config_file_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[model]\nn_layers = 2\nd_model = 32\nd_head = 8\n\n\
             [pretrain]\nsteps = 10\n\n[sweep]\ngrid_hi = 1.2\n",
        )
        .unwrap();
        let cfg = load_run_config(Some(&path)).unwrap();
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.pretrain.steps, 10);
        assert_eq!(cfg.sweep.grid_hi, 1.2);
        assert_eq!(cfg.sweep.grid_lo, 1.0, "unset fields keep defaults");
        assert_eq!(cfg.tune.steps, 200);

        std::fs::write(&path, "[nonsense]\nx = 1\n").unwrap();
        assert!(matches!(
            load_run_config(Some(&path)).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            load_run_config(Some(Path::new("/no/such/file.toml"))).unwrap_err(),
            Error::Config(_)
        ));
        // no config at all is the desk default
        assert_eq!(load_run_config(None).unwrap(), RunConfig::default());
    }

    #[test]
    fn gen_corpus_writes_text_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("corpus-run");
        run_gen_corpus(GenCorpusArgs {
            bytes: 10_000,
            seed: 2,
            out: Some(out.clone()),
        })
        .unwrap();
        let text = std::fs::read_to_string(out.join("corpus.txt")).unwrap();
        assert!(text.len() >= 10_000);
        assert!(text.is_ascii());
        let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
        assert!(manifest.contains("\"command\": \"gen-corpus\""));
        assert!(manifest.contains("\"seed\": 2"));
        assert!(!manifest.contains("time"), "manifests must not carry timestamps");
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_atomic(&path, step_loss_csv(&[5.5, 4.25, 3.125]).unwrap().as_bytes()).unwrap();
        let (steps, losses) = read_loss_csv(&path).unwrap();
        assert_eq!(steps, vec![1, 2, 3]);
        assert_eq!(losses, vec![5.5, 4.25, 3.125]);
        assert!(step_loss_csv(&[f64::NAN]).is_err());
    }
}
