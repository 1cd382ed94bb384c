//! Command-line driver for the bimodal translation experiments.
//!
//! Every subcommand reads the same flat configuration (defaults, then
//! `--config`, then repeated `--set KEY=VALUE`, then named flags, later
//! wins), refuses to reuse an existing run directory, and writes the fully
//! resolved configuration next to its outputs. Exit code 2 marks a usage
//! problem (bad flag, unknown key); 1 marks a runtime failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bimodal_core::analysis::{
    criticality_sweep, emit_correlation_report, emit_criticality_report, modality_correlation,
    ModuleSelector, DEFAULT_RATIOS,
};
use bimodal_core::checkpoint::{self, Checkpoint};
use bimodal_core::data::{generate_corpus, load_dataset, write_corpus, Dataset};
use bimodal_core::eval::{corpus_bleu, decode_dataset, write_hypotheses};
use bimodal_core::model::{init_from_scheme, Model, ModelKind, PretrainSource, Scheme};
use bimodal_core::trainer::{pretrain, train_joint, RunArtifacts};

use config::ExperimentConfig;

#[derive(Debug)]
enum AppError {
    Usage(String),
    Runtime(anyhow::Error),
}

trait Rt<T> {
    fn rt(self) -> Result<T, AppError>;
}

impl<T, E: Into<anyhow::Error>> Rt<T> for Result<T, E> {
    fn rt(self) -> Result<T, AppError> {
        self.map_err(|e| AppError::Runtime(e.into()))
    }
}

#[derive(Parser)]
#[command(name = "bimodal", version, about = "Bimodal speech translation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every experiment subcommand. Precedence, lowest to
/// highest: built-in defaults, `--config`, each `--set` in order, named
/// flags such as `--seed`.
#[derive(Args)]
struct Shared {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed for data, initialization, and batching.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    shared: Shared,
    /// Fresh directory for the corpus splits.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Fresh run directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Speech-recognition pretraining checkpoint.
    #[arg(long)]
    asr: PathBuf,
    /// Text-translation pretraining checkpoint.
    #[arg(long)]
    mt: PathBuf,
    /// Fresh run directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Initialization scheme: st, jt, jt-s-asr, jt-s-mt, jt-proposed.
    #[arg(long)]
    scheme: Option<String>,
    /// Weight on the translation loss; 1 - alpha goes to distillation.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight on the representation-alignment loss.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// A checkpoint file, or a run directory holding ckpt_*.bmtc.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Fresh directory for hypotheses and scores.
    #[arg(long)]
    out: PathBuf,
    /// Model family the checkpoint belongs to: joint, asr, or mt.
    #[arg(long, default_value = "joint")]
    kind: String,
    /// Corpus split to decode: dev or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Average the last k epoch checkpoints instead of using final.bmtc.
    #[arg(long = "average-last")]
    average_last: Option<usize>,
}

#[derive(Args)]
struct AverageArgs {
    /// Checkpoint files to average, in order.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output checkpoint file; must not exist.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CriticalityArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Trained joint checkpoint to probe.
    #[arg(long)]
    trained: PathBuf,
    /// Speech-recognition pretraining checkpoint.
    #[arg(long)]
    asr: PathBuf,
    /// Text-translation pretraining checkpoint.
    #[arg(long)]
    mt: PathBuf,
    /// Fresh directory for the report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelationArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Trained joint checkpoint to probe.
    #[arg(long)]
    trained: PathBuf,
    /// Fresh directory for the report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Fresh directory for the whole ladder.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic parallel corpus.
    GenData(GenDataArgs),
    /// Pretrain the speech-recognition model.
    PretrainAsr(PretrainArgs),
    /// Pretrain the text-translation model.
    PretrainMt(PretrainArgs),
    /// Train a joint model from the two pretraining checkpoints.
    Train(TrainArgs),
    /// Decode a split with beam search and report BLEU.
    Evaluate(EvaluateArgs),
    /// Average checkpoints into one.
    AverageCheckpoints(AverageArgs),
    /// Sweep module interpolation ratios and chart the BLEU cost.
    AnalyzeCriticality(CriticalityArgs),
    /// Measure per-layer correlation between speech and text encodings.
    AnalyzeCorrelation(CorrelationArgs),
    /// Run the initialization/loss ladder and tabulate test BLEU.
    Ablation(AblationArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::PretrainAsr(a) => cmd_pretrain(a, PretrainSource::Asr),
        Cmd::PretrainMt(a) => cmd_pretrain(a, PretrainSource::Mt),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::AverageCheckpoints(a) => cmd_average(a),
        Cmd::AnalyzeCriticality(a) => cmd_criticality(a),
        Cmd::AnalyzeCorrelation(a) => cmd_correlation(a),
        Cmd::Ablation(a) => cmd_ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// Builds the configuration for a run, applying the documented precedence.
fn resolve(shared: &Shared) -> Result<ExperimentConfig, AppError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &shared.config {
        cfg.apply_file(path).map_err(AppError::Usage)?;
    }
    for pair in &shared.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("--set {pair:?}: expected KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim()).map_err(AppError::Usage)?;
    }
    if let Some(seed) = shared.seed {
        cfg.set("seed", &seed.to_string()).map_err(AppError::Usage)?;
    }
    Ok(cfg)
}

/// Claims a run directory. Refusing to reuse one keeps every artifact tied
/// to exactly one resolved configuration.
fn fresh_dir(path: &Path) -> Result<(), AppError> {
    if path.exists() {
        return Err(AppError::Runtime(anyhow::anyhow!(
            "refusing to overwrite existing path {}",
            path.display()
        )));
    }
    std::fs::create_dir_all(path).rt()
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<(), AppError> {
    std::fs::write(dir.join("resolved.cfg"), cfg.render()).rt()
}

fn load_split(cfg: &ExperimentConfig, data: &Path, name: &str) -> Result<Dataset, AppError> {
    load_dataset(data, name, cfg.corpus.d_s).rt()
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let cfg = resolve(&args.shared)?;
    cfg.corpus.validate().rt()?;
    fresh_dir(&args.out)?;
    let corpus = generate_corpus(&cfg.corpus).rt()?;
    write_corpus(&args.out, &corpus).rt()?;
    write_resolved(&cfg, &args.out)?;
    println!(
        "wrote corpus to {}: train {} / dev {} / test {} / text {}",
        args.out.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.text_only.len()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs, source: PretrainSource) -> Result<(), AppError> {
    let cfg = resolve(&args.shared)?;
    cfg.model.validate().rt()?;
    cfg.train.validate().rt()?;
    let split = match source {
        PretrainSource::Asr => "train",
        PretrainSource::Mt => "text",
    };
    let train = load_split(&cfg, &args.data, split)?;
    let dev = load_split(&cfg, &args.data, "dev")?;
    fresh_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    let arts = pretrain(&cfg.model, &cfg.train, source, &train, Some(&dev), &args.out).rt()?;
    report_run(&arts);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let mut cfg = resolve(&args.shared)?;
    if let Some(s) = &args.scheme {
        cfg.set("scheme", s).map_err(AppError::Usage)?;
    }
    if let Some(a) = args.alpha {
        cfg.set("alpha", &a.to_string()).map_err(AppError::Usage)?;
    }
    if let Some(l) = args.lambda {
        cfg.set("lambda", &l.to_string()).map_err(AppError::Usage)?;
    }
    cfg.model.validate().rt()?;
    cfg.train.validate().rt()?;
    let train = load_split(&cfg, &args.data, "train")?;
    let text_only = load_split(&cfg, &args.data, "text")?;
    let asr = Checkpoint::load(&args.asr).rt()?;
    let mt = Checkpoint::load(&args.mt).rt()?;
    fresh_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    let arts = train_joint(&cfg.model, &cfg.train, &train, &text_only, &asr, &mt, &args.out).rt()?;
    report_run(&arts);
    Ok(())
}

fn report_run(arts: &RunArtifacts) {
    println!("final checkpoint: {}", arts.final_ckpt.display());
    println!("metrics: {}", arts.metrics_csv.display());
}

fn parse_kind(cfg: &ExperimentConfig, kind: &str) -> Result<ModelKind, AppError> {
    match kind {
        "joint" => Ok(ModelKind::Joint(cfg.train.scheme)),
        "asr" => Ok(ModelKind::Asr),
        "mt" => Ok(ModelKind::Mt),
        other => Err(AppError::Usage(format!(
            "--kind {other:?}: expected joint, asr, or mt"
        ))),
    }
}

/// Structural scheme implied by a joint checkpoint's tensors, so evaluation
/// does not need the training scheme repeated on the command line. The
/// single-stack schemes share one architecture; None leaves the configured
/// scheme in charge.
fn infer_joint_scheme(ckpt: &Checkpoint) -> Option<Scheme> {
    let mut has_text_embed = false;
    let mut has_text_stack = false;
    for name in ckpt.tensor_names() {
        has_text_embed |= name == "text_embed.weight";
        has_text_stack |= name.starts_with("text_encoder.");
    }
    if !has_text_embed {
        Some(Scheme::St)
    } else if has_text_stack {
        Some(Scheme::Jt)
    } else {
        None
    }
}

/// Loads the checkpoint to evaluate. A file path is used directly; a run
/// directory either yields final.bmtc (k = 0) or the average of its last k
/// epoch checkpoints.
fn resolve_checkpoint(
    path: &Path,
    average_last: usize,
    save_average_to: Option<&Path>,
) -> Result<(Checkpoint, String), AppError> {
    if path.is_file() {
        return Ok((Checkpoint::load(path).rt()?, path.display().to_string()));
    }
    if !path.is_dir() {
        return Err(AppError::Runtime(anyhow::anyhow!(
            "checkpoint path {} does not exist",
            path.display()
        )));
    }
    if average_last == 0 {
        let final_path = path.join("final.bmtc");
        return Ok((
            Checkpoint::load(&final_path).rt()?,
            final_path.display().to_string(),
        ));
    }
    let mut epoch_files: Vec<PathBuf> = std::fs::read_dir(path)
        .rt()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bmtc"))
        })
        .collect();
    epoch_files.sort();
    if epoch_files.is_empty() {
        return Err(AppError::Runtime(anyhow::anyhow!(
            "no ckpt_*.bmtc files under {}",
            path.display()
        )));
    }
    let take = average_last.min(epoch_files.len());
    let chosen = &epoch_files[epoch_files.len() - take..];
    let mut ckpts = Vec::with_capacity(take);
    for p in chosen {
        ckpts.push(Checkpoint::load(p).rt()?);
    }
    let names: Vec<String> = chosen.iter().map(|p| p.display().to_string()).collect();
    let avg = checkpoint::average(&ckpts, Some(&names)).rt()?;
    if let Some(dir) = save_average_to {
        avg.save(&dir.join("averaged.bmtc")).rt()?;
    }
    Ok((avg, format!("average of last {take} epoch checkpoints")))
}

/// Reference token sequences for a split: what the decoder is trained to
/// produce for each sample under the given model family.
fn references(kind: ModelKind, ds: &Dataset) -> Vec<Vec<usize>> {
    ds.samples
        .iter()
        .map(|s| match kind {
            ModelKind::Asr => s.src.clone(),
            _ => s.tgt.clone(),
        })
        .collect()
}

fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    beam: usize,
    out: &Path,
) -> Result<f64, AppError> {
    let rows = decode_dataset(model, ds, beam).rt()?;
    write_hypotheses(&out.join("hyps.tsv"), &rows).rt()?;
    let refs = references(model.kind(), ds);
    let ref_rows: Vec<(String, Vec<usize>)> = ds
        .samples
        .iter()
        .zip(&refs)
        .map(|(s, r)| (s.id.clone(), r.clone()))
        .collect();
    write_hypotheses(&out.join("refs.tsv"), &ref_rows).rt()?;
    let hyps: Vec<Vec<usize>> = rows.into_iter().map(|(_, toks)| toks).collect();
    let bleu = corpus_bleu(&hyps, &refs).rt()?;
    std::fs::write(out.join("bleu.txt"), format!("{bleu:.6}\n")).rt()?;
    Ok(bleu)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let mut cfg = resolve(&args.shared)?;
    if let Some(b) = args.beam {
        cfg.set("beam", &b.to_string()).map_err(AppError::Usage)?;
    }
    if let Some(k) = args.average_last {
        cfg.set("average_last", &k.to_string()).map_err(AppError::Usage)?;
    }
    let kind = parse_kind(&cfg, &args.kind)?;
    if !matches!(args.split.as_str(), "dev" | "test") {
        return Err(AppError::Usage(format!(
            "--split {:?}: expected dev or test",
            args.split
        )));
    }
    cfg.model.validate().rt()?;
    let ds = load_split(&cfg, &args.data, &args.split)?;
    fresh_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    let (ckpt, desc) = resolve_checkpoint(&args.checkpoints, cfg.average_last, Some(&args.out))?;
    let kind = match kind {
        ModelKind::Joint(_) => {
            ModelKind::Joint(infer_joint_scheme(&ckpt).unwrap_or(cfg.train.scheme))
        }
        other => other,
    };
    let mut model = Model::new(cfg.model.clone(), kind, 0).rt()?;
    model.load_checkpoint(&ckpt).rt()?;
    let bleu = evaluate_model(&model, &ds, cfg.beam, &args.out)?;
    println!(
        "{} BLEU {:.4} over {} samples (beam {}, weights: {desc})",
        args.split,
        bleu,
        ds.len(),
        cfg.beam
    );
    Ok(())
}

fn cmd_average(args: AverageArgs) -> Result<(), AppError> {
    if args.out.exists() {
        return Err(AppError::Runtime(anyhow::anyhow!(
            "refusing to overwrite existing path {}",
            args.out.display()
        )));
    }
    let mut ckpts = Vec::with_capacity(args.inputs.len());
    for p in &args.inputs {
        ckpts.push(Checkpoint::load(p).rt()?);
    }
    let names: Vec<String> = args.inputs.iter().map(|p| p.display().to_string()).collect();
    let avg = checkpoint::average(&ckpts, Some(&names)).rt()?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).rt()?;
        }
    }
    avg.save(&args.out).rt()?;
    println!("averaged {} checkpoints into {}", ckpts.len(), args.out.display());
    Ok(())
}

/// One selector per stack layer plus each unlayered parameter group,
/// restricted to prefixes that actually match the trained checkpoint.
fn auto_selectors(trained: &Checkpoint) -> Vec<ModuleSelector> {
    let names: Vec<&str> = trained.tensor_names().collect();
    let matches_any = |prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    let mut out = Vec::new();
    let mut push = |prefix: String| {
        if matches_any(&prefix) {
            out.push(ModuleSelector::new(&prefix));
        }
    };
    push("speech_frontend.".into());
    push("text_embed.".into());
    for stack in ["speech_encoder", "text_encoder", "shared_encoder", "decoder"] {
        for layer in 0..64 {
            push(format!("{stack}.{layer}."));
        }
    }
    push("decoder.embed.".into());
    push("output_proj.".into());
    out
}

fn cmd_criticality(args: CriticalityArgs) -> Result<(), AppError> {
    let cfg = resolve(&args.shared)?;
    cfg.model.validate().rt()?;
    let dev = load_split(&cfg, &args.data, "dev")?;
    let trained = Checkpoint::load(&args.trained).rt()?;
    let asr = Checkpoint::load(&args.asr).rt()?;
    let mt = Checkpoint::load(&args.mt).rt()?;
    fresh_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    let scheme = cfg.train.scheme;
    // The reference point is the scheme's own initialization, so each curve
    // measures how far training moved that module and what the move bought.
    let init = init_from_scheme(cfg.model.clone(), scheme, &asr, &mt, cfg.train.seed)
        .rt()?
        .to_checkpoint(0, 0);
    let pretrained_map = vec![(String::new(), &init)];
    let selectors = auto_selectors(&trained);
    let curves = criticality_sweep(
        &cfg.model,
        ModelKind::Joint(scheme),
        &trained,
        &pretrained_map,
        &selectors,
        &DEFAULT_RATIOS,
        &dev,
        cfg.beam,
    )
    .rt()?;
    emit_criticality_report(&curves, &args.out).rt()?;
    for curve in &curves {
        let worst = curve
            .points
            .iter()
            .min_by(|a, b| a.delta.total_cmp(&b.delta))
            .expect("sweep emits every requested ratio");
        println!(
            "{}: baseline BLEU {:.2}, worst delta {:+.2} at ratio {}",
            curve.selector, curve.points[0].bleu, worst.delta, worst.ratio
        );
    }
    println!("report: {}", args.out.join("criticality.csv").display());
    Ok(())
}

fn cmd_correlation(args: CorrelationArgs) -> Result<(), AppError> {
    let cfg = resolve(&args.shared)?;
    cfg.model.validate().rt()?;
    let dev = load_split(&cfg, &args.data, "dev")?;
    let trained = Checkpoint::load(&args.trained).rt()?;
    fresh_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;
    let scheme = infer_joint_scheme(&trained).unwrap_or(cfg.train.scheme);
    let mut model = Model::new(cfg.model.clone(), ModelKind::Joint(scheme), 0).rt()?;
    model.load_checkpoint(&trained).rt()?;
    let profile = modality_correlation(&model, &dev).rt()?;
    emit_correlation_report(&profile, &args.out).rt()?;
    for layer in &profile.layers {
        let flagged = layer.degenerate.iter().filter(|d| **d).count();
        println!(
            "decoder layer {}: mean r {:.4} over {} components ({} degenerate)",
            layer.layer,
            layer.r_mean,
            layer.components.len(),
            flagged
        );
    }
    println!("report: {}", args.out.join("correlation.csv").display());
    Ok(())
}

/// The ablation ladder: pure joint training, the better initialization, then
/// each auxiliary loss stacked on top. Alpha and lambda come from the
/// resolved configuration so the ladder honors user overrides.
fn ablation_rows(cfg: &ExperimentConfig) -> Vec<(&'static str, Scheme, f64, f64)> {
    let alpha = cfg.train.weights.alpha;
    let lambda = cfg.train.weights.lambda;
    vec![
        ("jt", Scheme::Jt, 1.0, 0.0),
        ("jt-s-mt", Scheme::JtSMt, 1.0, 0.0),
        ("jt-s-mt+car", Scheme::JtSMt, 1.0, lambda),
        ("jt-s-mt+car+kd", Scheme::JtProposed, alpha, lambda),
    ]
}

fn cmd_ablation(args: AblationArgs) -> Result<(), AppError> {
    let cfg = resolve(&args.shared)?;
    cfg.model.validate().rt()?;
    cfg.train.validate().rt()?;
    let train = load_split(&cfg, &args.data, "train")?;
    let text_only = load_split(&cfg, &args.data, "text")?;
    let dev = load_split(&cfg, &args.data, "dev")?;
    let test = load_split(&cfg, &args.data, "test")?;
    fresh_dir(&args.out)?;
    write_resolved(&cfg, &args.out)?;

    println!("pretraining speech recognition...");
    let asr_arts = pretrain(
        &cfg.model,
        &cfg.train,
        PretrainSource::Asr,
        &train,
        Some(&dev),
        &args.out.join("pretrain-asr"),
    )
    .rt()?;
    println!("pretraining text translation...");
    let mt_arts = pretrain(
        &cfg.model,
        &cfg.train,
        PretrainSource::Mt,
        &text_only,
        Some(&dev),
        &args.out.join("pretrain-mt"),
    )
    .rt()?;
    let asr = Checkpoint::load(&asr_arts.final_ckpt).rt()?;
    let mt = Checkpoint::load(&mt_arts.final_ckpt).rt()?;

    let mut results: Vec<(String, Scheme, f64, f64, f64)> = Vec::new();
    for (label, scheme, alpha, lambda) in ablation_rows(&cfg) {
        println!("training {label}...");
        let mut tcfg = cfg.train.clone();
        tcfg.scheme = scheme;
        tcfg.weights.alpha = alpha;
        tcfg.weights.lambda = lambda;
        let run_dir = args.out.join(label);
        train_joint(&cfg.model, &tcfg, &train, &text_only, &asr, &mt, &run_dir).rt()?;
        let eval_dir = run_dir.join("eval");
        std::fs::create_dir_all(&eval_dir).rt()?;
        let (ckpt, _) = resolve_checkpoint(&run_dir, cfg.average_last, Some(&eval_dir))?;
        let mut model = Model::new(cfg.model.clone(), ModelKind::Joint(scheme), 0).rt()?;
        model.load_checkpoint(&ckpt).rt()?;
        let bleu = evaluate_model(&model, &test, cfg.beam, &eval_dir)?;
        println!("{label}: test BLEU {bleu:.4}");
        results.push((label.to_string(), scheme, alpha, lambda, bleu));
    }

    let base = results[0].4;
    let mut csv = String::from("config,scheme,alpha,lambda,test_bleu,delta_vs_jt\n");
    println!();
    println!(
        "{:<16} {:<12} {:>6} {:>7} {:>10} {:>12}",
        "config", "scheme", "alpha", "lambda", "test BLEU", "delta vs jt"
    );
    for (label, scheme, alpha, lambda, bleu) in &results {
        println!(
            "{:<16} {:<12} {:>6.2} {:>7.3} {:>10.4} {:>+12.4}",
            label,
            scheme.name(),
            alpha,
            lambda,
            bleu,
            bleu - base
        );
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            label,
            scheme.name(),
            alpha,
            lambda,
            bleu,
            bleu - base
        ));
    }
    std::fs::write(args.out.join("ablation.csv"), csv).rt()?;
    println!();
    println!("ladder written to {}", args.out.join("ablation.csv").display());
    Ok(())
}
