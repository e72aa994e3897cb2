//! Classification pre-training of the toy identity embedder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::error::{Error, Result};
use crate::evaluate::rank1;
use crate::model::{Checkpoint, EmbedderConfig, ToyEmbedder};
use crate::numerics::{bicubic_resample, downsample4, BackwardRule, Graph, Ratio, Tensor, Var};
use crate::synthdata::{quantize, render_pose, SyntheticIdentity};

pub const EMBEDDER_FORMAT: &str = "superfront-embedder";
/// Pre-training identities start here, far from any dataset identity.
pub const EMBEDDER_FIRST_IDENTITY: u32 = 100_000;
pub const MIN_HELDOUT_ACCURACY: f64 = 0.9;
pub const MIN_UNSEEN_RANK1: f64 = 90.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderTrainConfig {
    pub n_classes: usize,
    pub d1: usize,
    pub yaws: Vec<i32>,
    pub train_illuminations: Vec<f64>,
    /// Never seen during training; accuracy on these is the acceptance score.
    pub heldout_illuminations: Vec<f64>,
    /// Also train on images blurred by a 4x down/up round trip.
    pub blur_augment: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hr_size: usize,
    pub channels: usize,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            n_classes: 40,
            d1: 64,
            yaws: vec![-15, 0, 15],
            train_illuminations: vec![0.6, 0.75, 0.9, 1.0],
            heldout_illuminations: vec![0.68, 0.83, 0.95],
            blur_augment: true,
            epochs: 12,
            batch: 16,
            lr: 2e-3,
            seed: 0,
            hr_size: 128,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub train_accuracy: f64,
    /// Classification accuracy under held-out illuminations.
    pub heldout_accuracy: f64,
    /// Rank-1 (%) on identities outside the training pool: frontal gallery,
    /// probes at every configured yaw and held-out illumination.
    pub unseen_identity_rank1: f64,
    pub final_loss: f64,
}

impl EmbedderReport {
    /// Whether the embedder is good enough to drive the identity loss.
    pub fn usable(&self) -> bool {
        self.heldout_accuracy >= MIN_HELDOUT_ACCURACY
            && self.unseen_identity_rank1 >= MIN_UNSEEN_RANK1
    }
}

/// Identities scored by [`EmbedderReport::unseen_identity_rank1`].
pub const UNSEEN_IDENTITIES: u32 = 20;

fn unseen_identity_rank1(e: &ToyEmbedder, cfg: &EmbedderTrainConfig) -> Result<f64> {
    let first = EMBEDDER_FIRST_IDENTITY + cfg.n_classes as u32;
    let illums = if cfg.heldout_illuminations.is_empty() {
        &cfg.train_illuminations
    } else {
        &cfg.heldout_illuminations
    };
    let ids: Vec<SyntheticIdentity> = (first..first + UNSEEN_IDENTITIES)
        .map(|i| SyntheticIdentity::new(cfg.seed, i))
        .collect();
    let gallery = ids
        .par_iter()
        .map(|id| {
            Ok((
                id.id,
                quantize(&render_pose(id, 0, 1.0, cfg.hr_size, cfg.channels)?),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&SyntheticIdentity, i32, f64)> = ids
        .iter()
        .flat_map(|id| {
            cfg.yaws
                .iter()
                .flat_map(move |&y| illums.iter().map(move |&l| (id, y, l)))
        })
        .collect();
    let probes = jobs
        .par_iter()
        .map(|&(id, y, l)| {
            Ok((
                id.id,
                quantize(&render_pose(id, y, l, cfg.hr_size, cfg.channels)?),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    rank1(&gallery, &probes, e)
}

/// `logsumexp(z) - z[label]` with adjoint `softmax(z) - onehot(label)`.
struct SoftmaxCrossEntropy {
    label: usize,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl BackwardRule for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut p = softmax(inputs[0].data());
        p[self.label] -= 1.0;
        let g = grad.item();
        let data = p.into_iter().map(|v| v * g).collect();
        vec![Some(
            Tensor::from_vec(inputs[0].shape(), data).expect("same length"),
        )]
    }
}

pub fn softmax_cross_entropy(g: &Graph, logits: Var, label: usize) -> Result<Var> {
    let z = g.value(logits);
    if label >= z.numel() {
        return Err(Error::InvalidArgument(format!(
            "label {} out of {} classes",
            label,
            z.numel()
        )));
    }
    let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let value = Tensor::scalar(lse - z.data()[label]);
    Ok(g.apply(Box::new(SoftmaxCrossEntropy { label }), &[logits], value))
}

fn blur(img: &Tensor) -> Result<Tensor> {
    bicubic_resample(&downsample4(img)?, Ratio::new(4, 1)).map(|t| t.clamp01())
}

fn render_set(
    cfg: &EmbedderTrainConfig,
    illuminations: &[f64],
    augment: bool,
) -> Result<Vec<(Tensor, usize)>> {
    let jobs: Vec<(usize, i32, f64)> = (0..cfg.n_classes)
        .flat_map(|c| {
            cfg.yaws
                .iter()
                .flat_map(move |&y| illuminations.iter().map(move |&l| (c, y, l)))
        })
        .collect();
    let rendered = jobs
        .par_iter()
        .map(|&(c, yaw, illum)| {
            let id = SyntheticIdentity::new(cfg.seed, EMBEDDER_FIRST_IDENTITY + c as u32);
            let img = quantize(&render_pose(&id, yaw, illum, cfg.hr_size, cfg.channels)?);
            let mut out = vec![(img.clone(), c)];
            if augment {
                out.push((blur(&img)?, c));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rendered.into_iter().flatten().collect())
}

fn accuracy(e: &ToyEmbedder, set: &[(Tensor, usize)]) -> Result<f64> {
    let hits = set
        .par_iter()
        .map(|(img, label)| {
            let g = Graph::new();
            let p = e.params.bind(&g, false);
            let (_, logits) = e.forward(&g, &p, g.constant(img.clone()))?;
            let z = g.value(logits);
            let arg = z
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Ok((arg == *label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / set.len().max(1) as f64)
}

/// Trains the embedder as an identity classifier on its own identity pool
/// and returns it frozen, with accuracy on training and held-out illuminations.
pub fn pretrain_embedder(cfg: &EmbedderTrainConfig) -> Result<(ToyEmbedder, EmbedderReport)> {
    if cfg.epochs == 0
        || cfg.batch == 0
        || cfg.yaws.is_empty()
        || cfg.train_illuminations.is_empty()
    {
        return Err(Error::InvalidArgument(
            "embedder pre-training needs epochs, batch, yaws and illuminations".into(),
        ));
    }
    let ecfg = EmbedderConfig {
        image_channels: cfg.channels,
        hr_size: cfg.hr_size,
        d1: cfg.d1,
        n_classes: cfg.n_classes,
    };
    let mut emb = ToyEmbedder::new(ecfg, cfg.seed)?;
    let train = render_set(cfg, &cfg.train_illuminations, cfg.blur_augment)?;
    let heldout = render_set(cfg, &cfg.heldout_illuminations, cfg.blur_augment)?;
    let mut adam = Adam::new(&emb.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let scale = 1.0 / chunk.len() as f64;
            let per_sample = chunk
                .par_iter()
                .map(|&i| {
                    let (img, label) = &train[i];
                    let g = Graph::new();
                    let bound = emb.params.bind(&g, true);
                    let (_, logits) = emb.forward(&g, &bound, g.constant(img.clone()))?;
                    let loss = softmax_cross_entropy(&g, logits, *label)?;
                    let value = g.value(loss).item();
                    let mut grads = g.backward_leaves(loss)?;
                    let gs: Vec<Tensor> = bound
                        .vars()
                        .iter()
                        .zip(emb.params.tensors())
                        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                        .collect();
                    Ok((value, gs))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut acc: Vec<Tensor> = emb
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for (value, gs) in per_sample {
                epoch_loss += value / train.len() as f64;
                for (a, g) in acc.iter_mut().zip(gs) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += scale * y;
                    }
                }
            }
            adam.update(&mut emb.params, &acc, cfg.lr)?;
        }
        log::info!(
            "embedder epoch {}/{}: loss {:.4}",
            epoch + 1,
            cfg.epochs,
            epoch_loss
        );
        final_loss = epoch_loss;
    }
    emb.mark_trained();
    let report = EmbedderReport {
        train_accuracy: accuracy(&emb, &train)?,
        heldout_accuracy: if heldout.is_empty() {
            f64::NAN
        } else {
            accuracy(&emb, &heldout)?
        },
        unseen_identity_rank1: unseen_identity_rank1(&emb, cfg)?,
        final_loss,
    };
    Ok((emb, report))
}

pub fn save_embedder(path: &Path, e: &ToyEmbedder, report: &EmbedderReport) -> Result<()> {
    let mut c = Checkpoint::new(serde_json::json!({
        "format": EMBEDDER_FORMAT,
        "embedder": e.config(),
        "report": report,
    }));
    c.extend("emb.", e.params.iter());
    c.save(path)
}

pub fn load_embedder(path: &Path) -> Result<ToyEmbedder> {
    let c = Checkpoint::load(path)?;
    if c.header["format"] != EMBEDDER_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{} is not an embedder checkpoint",
            path.display()
        )));
    }
    let cfg: EmbedderConfig = serde_json::from_value(c.header["embedder"].clone())?;
    let mut e = ToyEmbedder::new(cfg, 0)?;
    e.params.load_named("emb.", c.named())?;
    e.mark_trained();
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    #[test]
    fn cross_entropy_gradient() {
        let z = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let err = gradcheck(|g, v| softmax_cross_entropy(g, v, 2), &z, 1e-5).unwrap();
        assert!(err < 1e-7, "{}", err);
        let g = Graph::new();
        let v = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let l = softmax_cross_entropy(&g, v, 0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        assert!(softmax_cross_entropy(&g, v, 2).is_err());
    }
}
