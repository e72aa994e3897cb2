//! Epoch loop, checkpoints, resume and the metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{lr_at, TrainConfig};
use super::step::{train_step, BatchItem, Networks, Optimizers, StepContext, StepReport};
use crate::error::{Error, Result};
use crate::evaluate::{psnr, ssim_metric};
use crate::model::{
    Checkpoint, EmbedderConfig, Generator, GeneratorOutput, ParamStore, ToyEmbedder,
};
use crate::synthdata::{Dataset, Role};

pub const TRAIN_FORMAT: &str = "superfront-train";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const SHUFFLE_STREAM: u64 = 1 << 32;
const VIEW_STREAM: u64 = 2 << 32;

/// Networks, optimizer moments and the number of completed epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub nets: Networks,
    pub opts: Optimizers,
    pub epoch: usize,
}

impl TrainState {
    /// The untrained state fixed by the configuration's seed.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        let nets = Networks::new(config)?;
        let opts = Optimizers::new(&nets);
        Ok(TrainState {
            nets,
            opts,
            epoch: 0,
        })
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("epoch_{:03}.ckpt", epoch))
}

/// Training examples of one epoch, in batches. Anchors are the training
/// samples shuffled by `(seed, epoch)`; in multi-image mode each anchor gets
/// `n_inputs - 1` further views of its identity and illumination at other
/// yaws, drawn from a separate stream.
pub fn epoch_batches(
    ds: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<BatchItem>>> {
    let train = ds.indices(Role::Train);
    let mut anchors = train.clone();
    if anchors.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset has no training samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    anchors.shuffle(&mut rng);
    let mut view_rng = ChaCha8Rng::seed_from_u64(config.seed);
    view_rng.set_stream(VIEW_STREAM + epoch as u64);
    let extra = config.n_inputs - 1;
    let items = anchors
        .into_iter()
        .map(|a| {
            let mut views = vec![a];
            if extra > 0 {
                let s = &ds.samples[a];
                let candidates: Vec<usize> = train
                    .iter()
                    .copied()
                    .filter(|&i| {
                        let o = &ds.samples[i];
                        o.identity == s.identity
                            && o.illumination == s.illumination
                            && o.yaw != s.yaw
                    })
                    .collect();
                if candidates.len() < extra {
                    return Err(Error::InsufficientSamples {
                        identity: s.identity,
                        found: candidates.len() + 1,
                        needed: config.n_inputs,
                    });
                }
                views.extend(candidates.choose_multiple(&mut view_rng, extra).copied());
            }
            Ok(BatchItem { views })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(items.chunks(config.batch).map(|c| c.to_vec()).collect())
}

/// `anchor` followed by up to `n - 1` other non-frontal views of the same
/// identity, illumination and role, in dataset order.
pub fn companion_views(ds: &Dataset, anchor: usize, n: usize) -> Result<Vec<usize>> {
    let s = &ds.samples[anchor];
    let mut views = vec![anchor];
    views.extend(
        (0..ds.samples.len())
            .filter(|&i| {
                let o = &ds.samples[i];
                i != anchor
                    && o.identity == s.identity
                    && o.illumination == s.illumination
                    && o.role == s.role
                    && o.yaw != 0
                    && o.yaw != s.yaw
            })
            .take(n - 1),
    );
    if views.len() < n {
        return Err(Error::InsufficientSamples {
            identity: s.identity,
            found: views.len(),
            needed: n,
        });
    }
    Ok(views)
}

/// Runs the generator on the low-resolution images of `views`.
pub fn generate_views(gen: &Generator, ds: &Dataset, views: &[usize]) -> Result<GeneratorOutput> {
    let inputs: Vec<_> = views.iter().map(|&i| ds.samples[i].lp.clone()).collect();
    gen.generate(&inputs)
}

/// Evenly spaced non-frontal probes used for per-epoch monitoring.
pub fn eval_slice_indices(ds: &Dataset, n: usize) -> Vec<usize> {
    let probes: Vec<usize> = ds
        .indices(Role::Probe)
        .into_iter()
        .filter(|&i| ds.samples[i].yaw != 0)
        .collect();
    let k = n.min(probes.len());
    (0..k).map(|j| probes[j * probes.len() / k]).collect()
}

/// Mean PSNR and SSIM of synthesized frontals over the monitoring slice.
pub fn eval_slice(gen: &Generator, ds: &Dataset, config: &TrainConfig) -> Result<(f64, f64)> {
    let idx = eval_slice_indices(ds, config.eval_slice);
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for &i in &idx {
        let views = companion_views(ds, i, config.n_inputs)?;
        let out = generate_views(gen, ds, &views)?;
        p += psnr(&out.sf, ds.frontal(i))?;
        s += ssim_metric(&out.sf, ds.frontal(i))?;
    }
    Ok((p / idx.len() as f64, s / idx.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainHeader {
    format: String,
    epoch: usize,
    fingerprint: String,
    dataset_fingerprint: String,
    train: TrainConfig,
    embedder: Option<EmbedderConfig>,
    adam_steps: [u64; 3],
}

fn push_store(c: &mut Checkpoint, prefix: &str, p: &ParamStore) {
    c.extend(prefix, p.iter());
}

fn push_moments(
    c: &mut Checkpoint,
    prefix: &str,
    p: &ParamStore,
    moments: &[crate::numerics::Tensor],
) {
    for ((name, _), m) in p.iter().zip(moments) {
        c.push(format!("{prefix}{name}"), m.clone());
    }
}

pub fn to_checkpoint(
    state: &TrainState,
    config: &TrainConfig,
    embedder: Option<&ToyEmbedder>,
    dataset_fingerprint: &str,
) -> Result<Checkpoint> {
    let header = TrainHeader {
        format: TRAIN_FORMAT.into(),
        epoch: state.epoch,
        fingerprint: config.fingerprint(),
        dataset_fingerprint: dataset_fingerprint.into(),
        train: config.clone(),
        embedder: embedder.map(|e| e.config().clone()),
        adam_steps: [state.opts.g.step, state.opts.df.step, state.opts.dp.step],
    };
    let mut c = Checkpoint::new(serde_json::to_value(&header)?);
    let n = &state.nets;
    push_store(&mut c, "g.", &n.generator.params);
    push_store(&mut c, "df.", &n.df.params);
    push_store(&mut c, "dp.", &n.dp.params);
    if let Some(e) = embedder {
        push_store(&mut c, "emb.", &e.params);
    }
    for (tag, store, adam) in [
        ("g", &n.generator.params, &state.opts.g),
        ("df", &n.df.params, &state.opts.df),
        ("dp", &n.dp.params, &state.opts.dp),
    ] {
        push_moments(&mut c, &format!("opt.{tag}.m."), store, &adam.m);
        push_moments(&mut c, &format!("opt.{tag}.v."), store, &adam.v);
    }
    Ok(c)
}

/// Contents of a training checkpoint.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub config: TrainConfig,
    pub state: TrainState,
    pub embedder: Option<ToyEmbedder>,
    pub dataset_fingerprint: String,
    pub fingerprint: String,
}

fn load_moments(
    c: &Checkpoint,
    prefix: &str,
    like: &ParamStore,
) -> Result<Vec<crate::numerics::Tensor>> {
    let mut s = like.clone();
    s.load_named(prefix, c.named())?;
    Ok(s.tensors().to_vec())
}

pub fn from_checkpoint(c: &Checkpoint) -> Result<LoadedRun> {
    let header: TrainHeader = serde_json::from_value(c.header.clone())
        .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {}", e)))?;
    if header.format != TRAIN_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unexpected checkpoint kind `{}`",
            header.format
        )));
    }
    let config = header.train;
    let mut state = TrainState::initial(&config)?;
    state.epoch = header.epoch;
    let n = &mut state.nets;
    n.generator.params.load_named("g.", c.named())?;
    n.df.params.load_named("df.", c.named())?;
    n.dp.params.load_named("dp.", c.named())?;
    for (tag, store, adam, step) in [
        (
            "g",
            &n.generator.params,
            &mut state.opts.g,
            header.adam_steps[0],
        ),
        ("df", &n.df.params, &mut state.opts.df, header.adam_steps[1]),
        ("dp", &n.dp.params, &mut state.opts.dp, header.adam_steps[2]),
    ] {
        adam.m = load_moments(c, &format!("opt.{tag}.m."), store)?;
        adam.v = load_moments(c, &format!("opt.{tag}.v."), store)?;
        adam.step = step;
    }
    let embedder = match header.embedder {
        Some(cfg) => {
            let mut e = ToyEmbedder::new(cfg, 0)?;
            e.params.load_named("emb.", c.named())?;
            e.mark_trained();
            Some(e)
        }
        None => None,
    };
    Ok(LoadedRun {
        fingerprint: header.fingerprint,
        config,
        state,
        embedder,
        dataset_fingerprint: header.dataset_fingerprint,
    })
}

/// Means of the step reports of one epoch and the monitoring scores after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepReport,
    pub eval_psnr: f64,
    pub eval_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochSummary>,
    pub last_checkpoint: Option<PathBuf>,
}

fn append_line(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", value).map_err(|e| Error::io(path, e))
}

/// Keeps only the log lines belonging to the first `completed` epochs.
fn truncate_log(path: &Path, completed: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let keep = match v["kind"].as_str() {
            Some("step") => v["epoch"]
                .as_u64()
                .is_some_and(|e| (e as usize) < completed),
            _ => v["completed_epochs"]
                .as_u64()
                .is_some_and(|e| (e as usize) <= completed),
        };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn step_record(epoch: usize, step: usize, lr: f64, r: &StepReport) -> serde_json::Value {
    json!({
        "kind": "step",
        "epoch": epoch,
        "step": step,
        "lr": lr,
        "d_frontal": r.d_frontal,
        "d_parsing": r.d_parsing,
        "pixel": r.pixel,
        "patch": r.patch,
        "adversarial": r.adversarial,
        "identity": r.identity,
        "tv": r.tv,
        "orthogonal": r.orthogonal,
        "total": r.total,
    })
}

fn mean_reports(reports: &[StepReport]) -> StepReport {
    let n = reports.len() as f64;
    let mut m = StepReport::default();
    for r in reports {
        m.d_frontal += r.d_frontal / n;
        m.d_parsing += r.d_parsing / n;
        m.pixel += r.pixel / n;
        m.patch += r.patch / n;
        m.adversarial += r.adversarial / n;
        m.identity += r.identity / n;
        m.tv += r.tv / n;
        if let Some(o) = r.orthogonal {
            *m.orthogonal.get_or_insert(0.0) += o / n;
        }
        m.total += r.total / n;
    }
    m
}

/// Trains for `config.epochs` epochs, writing a checkpoint per epoch and a
/// line-delimited metrics log under `out_dir`. With `resume`, continues from
/// that checkpoint; the run is then identical to one never interrupted.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    embedder: Option<&ToyEmbedder>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ds_fp = dataset.fingerprint();
    let (mut state, embedder_owned) = match resume {
        Some(path) => {
            let loaded = from_checkpoint(&Checkpoint::load(path)?)?;
            if loaded.config != *config {
                return Err(Error::Fingerprint(format!(
                    "{} was written with a different training configuration",
                    path.display()
                )));
            }
            if loaded.dataset_fingerprint != ds_fp {
                return Err(Error::Fingerprint(format!(
                    "{} was trained on a different dataset",
                    path.display()
                )));
            }
            (loaded.state, loaded.embedder)
        }
        None => (TrainState::initial(config)?, None),
    };
    let embedder = embedder_owned.as_ref().or(embedder);
    let ctx = StepContext::new(dataset, config, embedder)?;

    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let timing = out_dir.join(TIMING_FILE);
    if state.epoch == 0 {
        for p in [&metrics, &timing] {
            fs::write(p, "").map_err(|e| Error::io(p, e))?;
        }
        let (p, s) = eval_slice(&state.nets.generator, dataset, config)?;
        append_line(
            &metrics,
            &json!({"kind": "eval", "completed_epochs": 0, "psnr": p, "ssim": s}),
        )?;
    } else {
        truncate_log(&metrics, state.epoch)?;
        truncate_log(&timing, state.epoch)?;
    }

    let mut summaries = Vec::new();
    let mut last = None;
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = lr_at(epoch, config);
        let mut reports = Vec::new();
        for (step, batch) in epoch_batches(dataset, config, epoch)?.iter().enumerate() {
            let r = train_step(&mut state.nets, &mut state.opts, &ctx, batch, lr, step)?;
            append_line(&metrics, &step_record(epoch, step, lr, &r))?;
            reports.push(r);
        }
        state.epoch += 1;
        let (p, s) = eval_slice(&state.nets.generator, dataset, config)?;
        append_line(
            &metrics,
            &json!({"kind": "eval", "completed_epochs": state.epoch, "psnr": p, "ssim": s}),
        )?;
        let path = checkpoint_path(out_dir, state.epoch);
        to_checkpoint(&state, config, embedder, &ds_fp)?.save(&path)?;
        let secs = started.elapsed().as_secs_f64();
        append_line(
            &timing,
            &json!({"completed_epochs": state.epoch, "seconds": secs}),
        )?;
        let losses = mean_reports(&reports);
        log::info!(
            "epoch {}/{}: lr {:.2e} pixel {:.4} total {:.4} eval psnr {:.2} dB ssim {:.4} ({:.1}s)",
            state.epoch,
            config.epochs,
            lr,
            losses.pixel,
            losses.total,
            p,
            s,
            secs
        );
        summaries.push(EpochSummary {
            epoch,
            lr,
            losses,
            eval_psnr: p,
            eval_ssim: s,
        });
        last = Some(path);
    }
    Ok(TrainOutcome {
        state,
        epochs: summaries,
        last_checkpoint: last,
    })
}
