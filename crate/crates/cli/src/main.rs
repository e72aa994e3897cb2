//! `superfront`: dataset synthesis, embedder pre-training, training,
//! evaluation and self-checks.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use superfront::evaluate::{evaluate_model, EvalRequest, Protocol};
use superfront::losses::OrthVariant;
use superfront::model::{Checkpoint, Fusion};
use superfront::selfcheck::{all_checks, corrupted_rule_check, run_checks};
use superfront::synthdata::{build_dataset, Dataset, Role};
use superfront::trainer::{
    from_checkpoint, load_embedder, pretrain_embedder, save_embedder, train, Mode,
    MIN_HELDOUT_ACCURACY, MIN_UNSEEN_RANK1,
};

use config::{load, Preset, RunConfig};

/// Default output root when `--out` is absent; each command writes to a
/// subdirectory named after itself.
const OUT_ROOT_ENV: &str = "SUPERFRONT_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "superfront",
    version,
    about = "Frontal face synthesis from low-resolution side views"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with its manifest.
    Synth(SynthArgs),
    /// Train the identity embedder used by the identity loss and rank-1.
    PretrainEmbedder(EmbedderArgs),
    /// Train a single- or multi-image model.
    Train(TrainArgs),
    /// Score a checkpoint on the probes of a dataset.
    Eval(EvalArgs),
    /// Run the gradient, loss-identity and kernel checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Total identities; the test split is half unless given.
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    test_identities: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    yaws: Option<Vec<i32>>,
    #[arg(long, value_delimiter = ',')]
    illuminations: Option<Vec<f64>>,
    #[arg(long)]
    hr_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct EmbedderArgs {
    /// Take image size and channels from this dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hr_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Embedder checkpoint from `pretrain-embedder`.
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[arg(long)]
    n_inputs: Option<usize>,
    /// no_sr_module, no_sr_supervision, no_l1, no_ssim, no_id, no_adv,
    /// baseline_1 or baseline_2; repeatable.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    orth_variant: Option<String>,
    /// Continue from this training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Used when the checkpoint carries no embedder.
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// `views` (rows by |yaw|) or `probesets` (rows by number of inputs).
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    fusion: Option<Fusion>,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    #[arg(long, hide = true)]
    include_faulty_fixture: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<superfront::Error> for Failure {
    fn from(e: superfront::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `superfront --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::PretrainEmbedder(_) => "pretrain-embedder",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Selfcheck(_) => "selfcheck",
    }
}

fn run(cli: Cli) -> Outcome {
    let preset = match &cli.command {
        Command::Train(a) => a.preset,
        _ => None,
    };
    let base = RunConfig {
        train: preset.unwrap_or_default().train_config(),
        ..RunConfig::default()
    };
    let loaded = load(base, cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let mut cfg = loaded.config;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cfg.out.is_none() {
        if let Some(root) = std::env::var_os(OUT_ROOT_ENV) {
            cfg.out = Some(PathBuf::from(root).join(command_name(&cli.command)));
        }
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("configuring {n} threads: {e}"))?;
    }
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::PretrainEmbedder(a) => pretrain(cfg, a),
        Command::Train(a) => train_cmd(cfg, a, preset.unwrap_or_default(), loaded.file_sets_decay),
        Command::Eval(a) => eval_cmd(cfg, a),
        Command::Selfcheck(a) => selfcheck(cfg, a),
    }
}

fn require_out(cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    cfg.out
        .clone()
        .ok_or_else(|| usage(format!("--out is required (or set {OUT_ROOT_ENV})")))
}

fn load_dataset(path: &Path) -> std::result::Result<Dataset, Failure> {
    Ok(Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?)
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Outcome {
    let out = require_out(&cfg)?;
    let d = &mut cfg.dataset;
    if let Some(total) = a.identities {
        let test = a.test_identities.unwrap_or(total / 2);
        if test == 0 || test >= total {
            return Err(usage(format!(
                "{total} identities cannot hold {test} test identities"
            )));
        }
        d.n_train = total - test;
        d.n_test = test;
    } else if let Some(test) = a.test_identities {
        d.n_test = test;
    }
    if let Some(y) = a.yaws {
        d.yaws = y;
    }
    if let Some(l) = a.illuminations {
        d.illuminations = l;
    }
    if let Some(h) = a.hr_size {
        d.hr_size = h;
    }
    if let Some(c) = a.channels {
        d.channels = c;
    }
    d.validate().map_err(|e| usage(e.to_string()))?;
    cfg.write(&out)?;
    let manifest = build_dataset(&cfg.dataset, &out)?;
    let count = |r: Role| manifest.records.iter().filter(|x| x.role == r).count();
    println!(
        "wrote {} images of {} identities to {} ({} train, {} gallery, {} probe)",
        manifest.records.len(),
        cfg.dataset.n_train + cfg.dataset.n_test,
        out.display(),
        count(Role::Train),
        count(Role::Gallery),
        count(Role::Probe)
    );
    Ok(())
}

fn pretrain(mut cfg: RunConfig, a: EmbedderArgs) -> Outcome {
    let out = require_out(&cfg)?;
    if let Some(p) = a.dataset {
        let ds = load_dataset(&p)?;
        cfg.embedder.hr_size = ds.hr_size;
        cfg.embedder.channels = ds.channels;
        cfg.inputs.dataset = Some(p);
    }
    let e = &mut cfg.embedder;
    if let Some(v) = a.classes {
        e.n_classes = v;
    }
    if let Some(v) = a.epochs {
        e.epochs = v;
    }
    if let Some(v) = a.hr_size {
        e.hr_size = v;
    }
    if let Some(v) = a.channels {
        e.channels = v;
    }
    cfg.write(&out)?;
    let (emb, report) = pretrain_embedder(&cfg.embedder)?;
    let path = out.join("embedder.ckpt");
    save_embedder(&path, &emb, &report)?;
    let rp = out.join("embedder_report.json");
    std::fs::write(
        &rp,
        serde_json::to_string_pretty(&report).context("serializing report")? + "\n",
    )
    .with_context(|| format!("writing {}", rp.display()))?;
    println!(
        "embedder written to {}: train accuracy {:.3}, held-out illumination accuracy {:.3}, unseen-identity rank-1 {:.1}%",
        path.display(),
        report.train_accuracy,
        report.heldout_accuracy,
        report.unseen_identity_rank1
    );
    if !report.usable() {
        return Err(Failure::Runtime(anyhow!(
            "the embedder needs held-out accuracy {MIN_HELDOUT_ACCURACY} and unseen-identity rank-1 {MIN_UNSEEN_RANK1}%; train longer or with more classes"
        )));
    }
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs, preset: Preset, file_sets_decay: bool) -> Outcome {
    let out = require_out(&cfg)?;
    if a.dataset.is_some() {
        cfg.inputs.dataset = a.dataset;
    }
    if a.embedder.is_some() {
        cfg.inputs.embedder = a.embedder;
    }
    if a.resume.is_some() {
        cfg.inputs.resume = a.resume;
    }
    let t = &mut cfg.train;
    if let Some(m) = a.mode {
        t.mode = m;
    }
    match t.mode {
        Mode::Si => {
            if a.fusion.is_some_and(|f| f != Fusion::Single) {
                return Err(usage("--fusion other than `single` needs --mode mi"));
            }
            if a.n_inputs.is_some_and(|n| n != 1) {
                return Err(usage("--n-inputs above 1 needs --mode mi"));
            }
        }
        Mode::Mi => {
            if a.fusion == Some(Fusion::Single) {
                return Err(usage("--mode mi needs a fusion scheme other than `single`"));
            }
            if a.n_inputs == Some(0) {
                return Err(usage("--n-inputs must be at least 1"));
            }
            if t.generator.fusion == Fusion::Single {
                t.generator.fusion = Fusion::FeatureFuseOrth;
            }
            if t.n_inputs == 1 && a.n_inputs.is_none() {
                t.n_inputs = 2;
            }
        }
    }
    if let Some(f) = a.fusion {
        t.generator.fusion = f;
    }
    if let Some(n) = a.n_inputs {
        t.n_inputs = n;
    }
    t.generator.n_inputs = t.n_inputs;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    match a.decay_epochs {
        Some(d) => t.decay_epochs = d,
        None if !file_sets_decay => t.decay_epochs = preset.decay_epochs(t.mode),
        None => {}
    }
    if let Some(v) = a.orth_variant {
        t.orth_variant = match v.as_str() {
            "literal" => OrthVariant::Literal,
            "srip" => OrthVariant::Srip,
            _ => {
                return Err(usage(format!(
                    "unknown orthogonal variant `{v}` (literal or srip)"
                )))
            }
        };
    }
    let mut ablation = t.ablation;
    for name in &a.ablate {
        ablation.set(name).map_err(|e| usage(e.to_string()))?;
    }
    t.apply_ablation(ablation);

    let ds_path = cfg
        .inputs
        .dataset
        .clone()
        .ok_or_else(|| usage("--dataset is required"))?;
    let ds = load_dataset(&ds_path)?;
    cfg.train.set_geometry(ds.hr_size, ds.channels);
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let needs_embedder = cfg.train.effective_weights().identity > 0.0;
    let embedder = match &cfg.inputs.embedder {
        Some(p) => Some(load_embedder(p).with_context(|| format!("loading embedder {}", p.display()))?),
        None if needs_embedder => {
            return Err(usage(
                "the identity loss needs --embedder (create one with `superfront pretrain-embedder`) or --ablate no_id",
            ))
        }
        None => None,
    };
    cfg.write(&out)?;
    let outcome = train(
        &cfg.train,
        &ds,
        embedder.as_ref(),
        &out,
        cfg.inputs.resume.as_deref(),
    )?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "trained {} epochs; held-out slice PSNR {:.2} dB, SSIM {:.4}; last checkpoint {}",
            outcome.state.epoch,
            last.eval_psnr,
            last.eval_ssim,
            outcome
                .last_checkpoint
                .as_deref()
                .unwrap_or(Path::new("-"))
                .display()
        );
    } else {
        println!(
            "nothing to do: the checkpoint already completed {} epochs",
            outcome.state.epoch
        );
    }
    Ok(())
}

fn eval_cmd(mut cfg: RunConfig, a: EvalArgs) -> Outcome {
    let out = require_out(&cfg)?;
    if a.checkpoint.is_some() {
        cfg.inputs.checkpoint = a.checkpoint;
    }
    if a.dataset.is_some() {
        cfg.inputs.dataset = a.dataset;
    }
    if a.embedder.is_some() {
        cfg.inputs.embedder = a.embedder;
    }
    if let Some(p) = a.protocol {
        cfg.eval.protocol = p;
    }
    if a.mode.is_some() {
        cfg.eval.mode = a.mode;
    }
    if a.fusion.is_some() {
        cfg.eval.fusion = a.fusion;
    }
    let ckpt = cfg
        .inputs
        .checkpoint
        .clone()
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let ds_path = cfg
        .inputs
        .dataset
        .clone()
        .ok_or_else(|| usage("--dataset is required"))?;
    let stored = from_checkpoint(&Checkpoint::load(&ckpt)?)?;
    let request = EvalRequest {
        mode: cfg.eval.mode.unwrap_or(stored.config.mode),
        fusion: cfg.eval.fusion.unwrap_or(stored.config.generator.fusion),
        protocol: cfg.eval.protocol,
        seed: cfg.seed,
    };
    let ds = load_dataset(&ds_path)?;
    let embedder = match &cfg.inputs.embedder {
        Some(p) => {
            Some(load_embedder(p).with_context(|| format!("loading embedder {}", p.display()))?)
        }
        None => None,
    };
    cfg.write(&out)?;
    let report = evaluate_model(&ckpt, &ds, &request, embedder.as_ref(), Some(&out))?;
    print!("{}", report.to_table());
    Ok(())
}

fn selfcheck(cfg: RunConfig, a: SelfcheckArgs) -> Outcome {
    let mut checks = all_checks();
    if a.include_faulty_fixture {
        checks.push(corrupted_rule_check());
    }
    let summary = run_checks(&checks);
    for r in &summary.results {
        println!(
            "{} {:<40} {:>6.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        summary.results.iter().filter(|r| r.passed).count(),
        summary.results.len(),
        summary.seconds
    );
    if let Some(out) = &cfg.out {
        cfg.write(out)?;
        let p = out.join("selfcheck.json");
        std::fs::write(
            &p,
            serde_json::to_string_pretty(&summary).context("serializing summary")? + "\n",
        )
        .with_context(|| format!("writing {}", p.display()))?;
    }
    if summary.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "failed checks: {}",
            summary.failures().join(", ")
        )))
    }
}
