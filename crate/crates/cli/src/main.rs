//! `aumer`: generate synthetic data, train, evaluate, and inspect prompts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use aumer_core::aucodes::{describe_with, AuAnnotation, AuOrder, PromptStyle, TemplateBank};
use aumer_core::config::{PromptSource, RunConfig};
use aumer_core::encoder::HeadKind;
use aumer_core::evaluation::Aggregation;
use aumer_core::pipeline::{
    self, ensure_dir, evaluate, run_loso, unix_now, write_report, write_run_manifest,
    write_train_logs, RunManifest,
};
use aumer_core::rngs;
use aumer_core::store::{write_atomic, Checkpoint, Dataset};
use aumer_core::train::train;

#[derive(Parser)]
#[command(
    name = "aumer",
    version,
    about = "AU-guided micro-expression training on synthetic clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train on a dataset (whole set, or leave-one-subject-out).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print the prompt built for a set of AUs.
    Prompt(PromptArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, env = "AUMER_OUTPUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Transformer,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Au,
    Emotion,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Action,
    Facs,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Fixed,
    Shuffled,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Pooled,
    Averaged,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Leave-one-subject-out: train one model per held-out subject.
    #[arg(long)]
    loso: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Drop the contrastive term; classification weight is lambda_s.
    #[arg(long)]
    no_alignment: bool,
    /// Hold the contrastive weight at lambda_0.
    #[arg(long)]
    constant_lambda: bool,
    #[arg(long)]
    no_photometric: bool,
    #[arg(long)]
    no_lsfm: bool,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, value_enum)]
    prompt_source: Option<SourceArg>,
    #[arg(long, value_enum)]
    prompt_style: Option<StyleArg>,
    #[arg(long, value_enum)]
    au_order: Option<OrderArg>,
    /// Number of templates drawn from (1-10).
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<AggArg>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `all` or `subject=<id>`.
    #[arg(long, default_value = "all")]
    split: String,
    /// Report directory (defaults to the checkpoint directory).
    #[arg(long, env = "AUMER_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    /// Comma-separated AU ids, e.g. `6,12`.
    #[arg(long, value_delimiter = ',', required = true)]
    au: Vec<u32>,
    /// Template number (1-based); drawn at random from the default bank when omitted.
    #[arg(long)]
    template: Option<usize>,
    #[arg(long, value_enum, default_value = "action")]
    style: StyleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.subjects {
        cfg.synth.num_subjects = v;
    }
    if let Some(v) = args.samples {
        cfg.synth.samples_per_subject = v;
    }
    if let Some(v) = args.height {
        cfg.synth.height = v;
        cfg.encoder.height = v;
    }
    if let Some(v) = args.width {
        cfg.synth.width = v;
        cfg.encoder.width = v;
    }
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let data = pipeline::generate(&cfg)?;
    data.write(&dir)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    println!(
        "wrote {} clips to {} (config {})",
        data.samples.len(),
        dir.display(),
        cfg.short_digest()
    );
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.base_lr = v;
    }
    if a.no_alignment {
        cfg.loss.alignment = false;
    }
    if a.constant_lambda {
        cfg.loss.progressive = false;
    }
    if a.no_photometric {
        cfg.augment.photometric_enabled = false;
    }
    if a.no_lsfm {
        cfg.augment.lsfm_enabled = false;
    }
    if let Some(h) = a.head {
        cfg.encoder.head = match h {
            HeadArg::Transformer => HeadKind::Transformer,
            HeadArg::Linear => HeadKind::Linear,
        };
    }
    if let Some(s) = a.prompt_source {
        cfg.prompt.source = match s {
            SourceArg::Au => PromptSource::Au,
            SourceArg::Emotion => PromptSource::Emotion,
        };
    }
    if let Some(s) = a.prompt_style {
        cfg.prompt.style = style(s);
    }
    if let Some(o) = a.au_order {
        cfg.prompt.order = match o {
            OrderArg::Fixed => AuOrder::Fixed,
            OrderArg::Shuffled => AuOrder::Shuffled,
        };
    }
    if let Some(n) = a.templates {
        cfg.prompt.num_templates = n;
    }
    if let Some(g) = a.aggregation {
        cfg.aggregation = match g {
            AggArg::Pooled => Aggregation::Pooled,
            AggArg::Averaged => Aggregation::Averaged,
        };
    }
}

fn style(s: StyleArg) -> PromptStyle {
    match s {
        StyleArg::Action => PromptStyle::Action,
        StyleArg::Facs => PromptStyle::Facs,
    }
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).display().to_string()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_train_flags(&mut cfg, &args);
    cfg.validate()?;
    let started_at = unix_now();
    let data = Dataset::read(&args.data)?;
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let digest = cfg.digest();
    let mut logs = Vec::new();
    let mut reports = Vec::new();

    if args.loso {
        let result = run_loso(&cfg, &data)?;
        for f in &result.folds {
            let fdir = dir.join("folds").join(&f.subject);
            f.checkpoint.write(&fdir.join("checkpoint"))?;
            write_train_logs(&fdir, &f.outcome)?;
            logs.push(rel(&dir, &fdir.join("train_log.jsonl")));
            let (j, _) = write_report(&dir, &f.report, &digest)?;
            reports.push(rel(&dir, &j));
        }
        let (j, _) = write_report(&dir, &result.aggregate, &digest)?;
        reports.push(rel(&dir, &j));
        let r = &result.aggregate;
        println!(
            "LOSO over {} subjects: UF1 {:.4}  UAR {:.4}  ACC {:.4}",
            result.folds.len(),
            r.uf1,
            r.uar,
            r.acc
        );
    } else {
        let outcome = train(&cfg, &data.samples, &data.meta.classes)?;
        let ckpt = Checkpoint::new(
            &cfg,
            cfg.seed,
            data.meta.classes.clone(),
            outcome.params.clone(),
        );
        ckpt.write(&dir.join("checkpoint"))?;
        write_train_logs(&dir, &outcome)?;
        logs.push("train_log.jsonl".to_string());
        let all: Vec<usize> = (0..data.samples.len()).collect();
        let report = evaluate(&ckpt, &data, &all, Some("train".into()))?;
        let (j, _) = write_report(&dir, &report, &digest)?;
        reports.push(rel(&dir, &j));
        if let Some(last) = outcome.log.last() {
            println!(
                "epoch {}: lambda {:.3}  total {:.5}  cls {:.5}",
                last.epoch, last.lambda, last.total, last.cls_loss
            );
        }
        println!(
            "training split: UF1 {:.4}  UAR {:.4}  ACC {:.4}",
            report.uf1, report.uar, report.acc
        );
    }

    write_run_manifest(
        &dir,
        &RunManifest {
            config_digest: digest,
            seed: cfg.seed,
            started_at,
            finished_at: unix_now(),
            train_log: logs,
            reports,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    println!("run written to {}", dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let data = Dataset::read(&args.data)?;
    let (indices, id): (Vec<usize>, String) = if args.split == "all" {
        ((0..data.samples.len()).collect(), "all".into())
    } else if let Some(subject) = args.split.strip_prefix("subject=") {
        let idx: Vec<usize> = (0..data.samples.len())
            .filter(|&i| data.samples[i].subject_id == subject)
            .collect();
        (idx, format!("subject-{subject}"))
    } else {
        return Err(aumer_core::Error::config(format!(
            "unknown split {:?}; use `all` or `subject=<id>`",
            args.split
        ))
        .into());
    };
    if indices.is_empty() {
        return Err(aumer_core::Error::contract(format!(
            "split {:?} selects no samples",
            args.split
        ))
        .into());
    }
    let report = evaluate(&ckpt, &data, &indices, Some(id))?;
    let dir = args.out.unwrap_or_else(|| args.checkpoint.clone());
    let (j, c) = write_report(&dir, &report, &ckpt.manifest.config_digest)?;
    println!(
        "UF1 {:.4}  UAR {:.4}  ACC {:.4}  ({} samples)",
        report.uf1,
        report.uar,
        report.acc,
        indices.len()
    );
    println!("{}\n{}", j.display(), c.display());
    Ok(())
}

fn cmd_prompt(args: PromptArgs) -> Result<()> {
    let ann = AuAnnotation::new(&args.au)?;
    let desc = describe_with(&ann, style(args.style), None)?;
    let prompt = match args.template {
        Some(n) => {
            let bank = TemplateBank::full();
            let idx = n
                .checked_sub(1)
                .ok_or_else(|| aumer_core::Error::contract("template numbers start at 1"))?;
            bank.render(idx, &desc)?
        }
        None => {
            let mut rng = rngs::stream(args.seed, "prompt", 0);
            TemplateBank::default().render_random(&mut rng, &desc)?
        }
    };
    println!("description: {desc}");
    println!("prompt: {}", prompt.text);
    let ids: Vec<String> = prompt.token_ids.iter().map(|t| t.to_string()).collect();
    println!("token_ids: {}", ids.join(" "));
    println!("token_count: {}", prompt.token_ids.len());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<aumer_core::Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a).context("gen failed"),
        Command::Train(a) => cmd_train(a).context("train failed"),
        Command::Eval(a) => cmd_eval(a).context("eval failed"),
        Command::Prompt(a) => cmd_prompt(a).context("prompt failed"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
