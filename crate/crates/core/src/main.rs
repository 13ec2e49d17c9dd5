use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sepl::pipeline::AggStrategy;
use sepl::posteriors::{read_posteriors, write_posteriors};
use sepl::{
    evaluate, gen_domains, infer, inject_noise, read_bank, run_pipeline, write_bank, NoiseConfig, PipelineConfig,
    PipelineState, Result, SeplError, SynthConfig,
};

#[derive(Parser)]
#[command(name = "sepl", version, about = "Layer-wise probe ensembles with entropy-split semi-supervised retraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shifted multi-domain benchmark (train.fbnk, test.fbnk, truth.json).
    Synth {
        /// JSON file with generator settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Flip this fraction of the training labels.
        #[arg(long)]
        noise_rate: Option<f64>,
    },
    /// Flip a fraction of a bank's labels (bank.fbnk, truth.json).
    InjectNoise {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-tap probes on the bank labels only.
    Warmup(RunArgs),
    /// Warm-up followed by the split / retrain rounds.
    Pipeline(RunArgs),
    /// Fuse a trained ensemble's predictions on a bank.
    Infer {
        #[arg(long)]
        bank: PathBuf,
        /// state.json written by `warmup` or `pipeline`.
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score posteriors against true labels (metrics.json).
    Eval {
        #[arg(long)]
        posteriors: PathBuf,
        /// truth.json sidecar; falls back to the labels stored in --bank.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Section of a synth truth.json to use (`train` or `test`).
        #[arg(long)]
        part: Option<String>,
        /// Bank the posteriors were computed on, for per-domain accuracy.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, value_enum)]
    agg_train: Option<AggStrategy>,
    /// Inference aggregator.
    #[arg(long, visible_alias = "agg", value_enum)]
    agg_infer: Option<AggStrategy>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    ds_maxiter: Option<usize>,
    #[arg(long)]
    ds_tol: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    sharpen_temp: Option<f64>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    #[arg(long)]
    n_augment: Option<usize>,
    #[arg(long)]
    aug_sigma_scale: Option<f64>,
    #[arg(long)]
    rampup_fraction: Option<f64>,
    /// Skip the mixup stage of semi-supervised training.
    #[arg(long)]
    no_mixup: bool,
    #[arg(long)]
    mm_epochs: Option<usize>,
    #[arg(long)]
    mm_batch_size: Option<usize>,
    #[arg(long)]
    mm_learning_rate: Option<f64>,
    /// Comma-separated tap indices.
    #[arg(long, value_delimiter = ',')]
    taps: Option<Vec<usize>>,
    #[arg(long)]
    include_original: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.agg_train {
            cfg.agg_train = v;
        }
        if let Some(v) = self.agg_infer {
            cfg.agg_infer = v;
        }
        if let Some(v) = self.max_rounds {
            cfg.max_rounds = v;
        }
        if let Some(v) = self.gamma {
            cfg.split_cfg.gamma = v;
        }
        if let Some(v) = self.ds_maxiter {
            cfg.ds_cfg.maxiter = v;
        }
        if let Some(v) = self.ds_tol {
            cfg.ds_cfg.pi_tol = v;
        }
        if let Some(v) = self.lambda_u {
            cfg.mixmatch_cfg.lambda_u = v;
        }
        if let Some(v) = self.sharpen_temp {
            cfg.mixmatch_cfg.sharpen_temp = v;
        }
        if let Some(v) = self.mixup_alpha {
            cfg.mixmatch_cfg.mixup_alpha = v;
        }
        let mm = &mut cfg.mixmatch_cfg;
        if let Some(v) = self.n_augment {
            mm.n_augment = v;
        }
        if let Some(v) = self.aug_sigma_scale {
            mm.aug_sigma_scale = v;
        }
        if let Some(v) = self.rampup_fraction {
            mm.rampup_fraction = v;
        }
        if self.no_mixup {
            mm.mixup = false;
        }
        if let Some(v) = self.mm_epochs {
            mm.epochs = v;
        }
        if let Some(v) = self.mm_batch_size {
            mm.batch_size = v;
        }
        if let Some(v) = self.mm_learning_rate {
            mm.learning_rate = v;
        }
        if let Some(v) = &self.taps {
            cfg.tap_selection = Some(v.clone());
        }
        if self.include_original {
            cfg.include_original = true;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

/// Ground truth for one bank.
#[derive(Debug, Serialize, Deserialize)]
struct Truth {
    true_labels: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noisy_labels: Option<Vec<u16>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flip_mask: Option<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct SynthTruth {
    train: Truth,
    test: Truth,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    config: PipelineConfig,
    state: PipelineState,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), read_json)
}

fn write_training_log(state: &PipelineState, tap_of: &[usize], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (losses, &tap) in state.warmup_losses.iter().zip(tap_of) {
        for (epoch, loss) in losses.iter().enumerate() {
            let line = serde_json::json!({ "phase": "warmup", "tap_index": tap, "epoch": epoch, "loss": loss });
            writeln!(out, "{line}")?;
        }
    }
    for entry in &state.training_log {
        let mut line = serde_json::to_value(entry)?;
        line["phase"] = "semisup".into();
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn run(args: &RunArgs, warmup_only: bool) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg);
    if warmup_only {
        cfg.max_rounds = 0;
    }
    cfg.validate()?;
    let bank = read_bank(&args.bank)?;
    let state = run_pipeline(&bank, &cfg)?;
    fs::create_dir_all(&args.out)?;
    state.ensemble.write(args.out.join("probes.fprb"))?;
    write_posteriors(&state.train_posteriors, args.out.join("posteriors.fbnk-post"))?;
    let taps: Vec<usize> = state.ensemble.probes.iter().map(|p| p.tap_index).collect();
    write_training_log(&state, &taps, &args.out.join("training.jsonl"))?;
    for h in &state.history {
        log::info!("round {}: loglik {:?}, split change {:?}", h.round, h.loglik, h.split_change);
    }
    write_json(&StateFile { config: cfg, state }, &args.out.join("state.json"))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed, noise_rate } => {
            let mut cfg: SynthConfig = config.as_deref().map_or_else(|| Ok(SynthConfig::default()), read_json)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = gen_domains(&cfg)?;
            let mut train = data.train;
            let mut train_truth = Truth { true_labels: data.train_labels.clone(), noisy_labels: None, flip_mask: None };
            if let Some(rate) = noise_rate {
                let (noisy, mask) =
                    inject_noise(&data.train_labels, cfg.n_classes, &NoiseConfig { rate, seed: cfg.seed })?;
                train.labels = Some(noisy.clone());
                train_truth.noisy_labels = Some(noisy);
                train_truth.flip_mask = Some(mask);
            }
            fs::create_dir_all(&out)?;
            write_bank(&train, out.join("train.fbnk"))?;
            write_bank(&data.test, out.join("test.fbnk"))?;
            let test_truth = Truth { true_labels: data.test_labels, noisy_labels: None, flip_mask: None };
            write_json(&SynthTruth { train: train_truth, test: test_truth }, &out.join("truth.json"))
        }
        Command::InjectNoise { bank, rate, seed, out } => {
            let mut bank = read_bank(&bank)?;
            let labels = bank.labels.clone().ok_or_else(|| SeplError::Validation("bank has no labels".into()))?;
            let (noisy, mask) = inject_noise(&labels, bank.n_classes(), &NoiseConfig { rate, seed })?;
            bank.labels = Some(noisy.clone());
            fs::create_dir_all(&out)?;
            write_bank(&bank, out.join("bank.fbnk"))?;
            let truth = Truth { true_labels: labels, noisy_labels: Some(noisy), flip_mask: Some(mask) };
            write_json(&truth, &out.join("truth.json"))
        }
        Command::Warmup(args) => run(&args, true),
        Command::Pipeline(args) => run(&args, false),
        Command::Infer { bank, state, config, out, overrides } => {
            let saved: StateFile = read_json(&state)?;
            let mut cfg = match config {
                Some(p) => read_json(&p)?,
                None => saved.config,
            };
            overrides.apply(&mut cfg);
            cfg.ds_cfg.validate()?;
            let bank = read_bank(&bank)?;
            let (posteriors, labels) = infer(&saved.state, &bank, &cfg)?;
            fs::create_dir_all(&out)?;
            write_posteriors(&posteriors, out.join("posteriors.fbnk-post"))?;
            write_json(&labels, &out.join("labels.json"))
        }
        Command::Eval { posteriors, truth, part, bank, config: _, out } => {
            let posteriors = read_posteriors(&posteriors)?;
            let bank = bank.as_deref().map(read_bank).transpose()?;
            let truth = match truth {
                Some(path) => load_truth(&path, part.as_deref())?,
                None => {
                    let labels = bank.as_ref().and_then(|b| b.labels.clone());
                    let labels = labels.ok_or_else(|| SeplError::Validation("need --truth or a labelled --bank".into()))?;
                    Truth { true_labels: labels, noisy_labels: None, flip_mask: None }
                }
            };
            let domains = bank.as_ref().and_then(|b| b.domain_ids.clone());
            let report = evaluate(
                posteriors.view(),
                &truth.true_labels,
                truth.noisy_labels.as_deref(),
                truth.flip_mask.as_deref(),
                domains.as_deref(),
            )?;
            fs::create_dir_all(&out)?;
            write_json(&report, &out.join("metrics.json"))
        }
    }
}

fn load_truth(path: &Path, part: Option<&str>) -> Result<Truth> {
    let value: serde_json::Value = read_json(path)?;
    let section = match part {
        Some(p) => value.get(p).cloned().ok_or_else(|| SeplError::Validation(format!("truth file has no '{p}' section")))?,
        None if value.get("true_labels").is_some() => value,
        None => return Err(SeplError::Validation("truth file has train/test sections; pass --part".into())),
    };
    Ok(serde_json::from_value(section)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
