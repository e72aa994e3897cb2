//! Frontalizes the probe set of a dataset and scores it by view or by
//! number of input images.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    build_probe_sets, embedding, psnr, rank1_embeddings, ssim_metric, MAX_PROBE_SET,
};
use crate::error::{Error, Result};
use crate::losses::IdentityEmbedder;
use crate::model::{Checkpoint, Fusion, Generator, ToyEmbedder};
use crate::numerics::Tensor;
use crate::synthdata::{Dataset, Role};
use crate::trainer::{companion_views, from_checkpoint, Mode};

pub const REPORT_FORMAT: &str = "superfront-eval";
/// Inclusive |yaw| range of the multi-image probe pool.
pub const PROBE_YAW_RANGE: (i32, i32) = (30, 60);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One row per |yaw|.
    #[default]
    Views,
    /// One row per probe-set size P1..P4.
    Probesets,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Views => "views",
            Protocol::Probesets => "probesets",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "views" => Ok(Protocol::Views),
            "probesets" => Ok(Protocol::Probesets),
            _ => Err(Error::InvalidArgument(format!(
                "unknown protocol `{}` (views or probesets)",
                s
            ))),
        }
    }
}

/// What the caller believes the checkpoint to be, and how to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub mode: Mode,
    pub fusion: Fusion,
    pub protocol: Protocol,
    /// Seeds the probe-set draw.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `"15"`..`"60"` for views, `"1"`..`"4"` for probe sets.
    pub label: String,
    pub probes: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub protocol: Protocol,
    pub mode: Mode,
    pub fusion: Fusion,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean of the rows.
    pub average: EvalRow,
}

impl EvalReport {
    pub fn row(&self, label: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let head = match self.protocol {
            Protocol::Views => "|yaw|",
            Protocol::Probesets => "images",
        };
        let mut s = format!(
            "{} {} ({}), config {}, dataset {}\n",
            self.mode,
            self.fusion,
            self.protocol,
            self.config_fingerprint,
            self.dataset_fingerprint
        );
        s.push_str(&format!(
            "{:>8} {:>7} {:>10} {:>8} {:>9}\n",
            head, "probes", "PSNR (dB)", "SSIM", "rank-1 %"
        ));
        for r in self.rows.iter().chain([&self.average]) {
            s.push_str(&format!(
                "{:>8} {:>7} {:>10.2} {:>8.4} {:>9.2}\n",
                r.label, r.probes, r.psnr, r.ssim, r.rank1
            ));
        }
        s
    }

    /// Writes `report_<protocol>.json` and `report_<protocol>.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("report_{}.json", self.protocol));
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("report_{}.txt", self.protocol));
        fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// A synthesized frontal for the probe at `anchor`.
#[derive(Clone, Debug)]
pub struct Scored {
    pub anchor: usize,
    pub image: Tensor,
}

fn gallery_embeddings(
    ds: &Dataset,
    embedder: &dyn IdentityEmbedder,
) -> Result<Vec<(u32, Vec<f64>)>> {
    ds.indices(Role::Gallery)
        .par_iter()
        .map(|&i| {
            Ok((
                ds.samples[i].identity,
                embedding(embedder, &ds.samples[i].hp)?,
            ))
        })
        .collect()
}

/// Scores labelled groups of synthesized frontals against the dataset's
/// ground-truth frontals and gallery.
pub fn score_groups(
    ds: &Dataset,
    groups: &[(String, Vec<Scored>)],
    embedder: &dyn IdentityEmbedder,
) -> Result<(Vec<EvalRow>, EvalRow)> {
    let gallery = gallery_embeddings(ds, embedder)?;
    let mut rows = Vec::new();
    for (label, items) in groups {
        if items.is_empty() {
            continue;
        }
        let per: Vec<(f64, f64, (u32, Vec<f64>))> = items
            .par_iter()
            .map(|s| {
                let truth = ds.frontal(s.anchor);
                Ok((
                    psnr(&s.image, truth)?,
                    ssim_metric(&s.image, truth)?,
                    (
                        ds.samples[s.anchor].identity,
                        embedding(embedder, &s.image)?,
                    ),
                ))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let probes: Vec<(u32, Vec<f64>)> = per.iter().map(|p| p.2.clone()).collect();
        rows.push(EvalRow {
            label: label.clone(),
            probes: per.len(),
            psnr: per.iter().map(|p| p.0).sum::<f64>() / n,
            ssim: per.iter().map(|p| p.1).sum::<f64>() / n,
            rank1: rank1_embeddings(&gallery, &probes)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no probes to evaluate".into()));
    }
    let k = rows.len() as f64;
    let average = EvalRow {
        label: "avg".into(),
        probes: rows.iter().map(|r| r.probes).sum(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
        rank1: rows.iter().map(|r| r.rank1).sum::<f64>() / k,
    };
    Ok((rows, average))
}

/// Repeats or truncates `views` to exactly `n` entries.
pub fn fit_views(views: &[usize], n: usize) -> Vec<usize> {
    views.iter().copied().cycle().take(n).collect()
}

fn inputs_for(gen: &Generator, views: &[usize]) -> Vec<usize> {
    match gen.config().fusion {
        Fusion::ImageConcat => fit_views(views, gen.config().n_inputs),
        Fusion::Single => views[..1].to_vec(),
        _ => views.to_vec(),
    }
}

/// An anchor probe and the views fed to the generator for it.
type ViewPlan = (usize, Vec<usize>);

/// Probe groups of the requested protocol, frontalized by `gen`.
pub fn frontalize_probes(
    gen: &Generator,
    ds: &Dataset,
    protocol: Protocol,
    seed: u64,
) -> Result<Vec<(String, Vec<Scored>)>> {
    let probes: Vec<usize> = ds
        .indices(Role::Probe)
        .into_iter()
        .filter(|&i| ds.samples[i].yaw != 0)
        .collect();
    let plans: Vec<(String, Vec<ViewPlan>)> = match protocol {
        Protocol::Views => {
            let mut yaws: Vec<i32> = probes.iter().map(|&i| ds.samples[i].yaw.abs()).collect();
            yaws.sort_unstable();
            yaws.dedup();
            yaws.into_iter()
                .map(|y| {
                    let plan = probes
                        .iter()
                        .filter(|&&i| ds.samples[i].yaw.abs() == y)
                        .map(|&i| {
                            let views = companion_views(ds, i, gen.config().n_inputs)?;
                            Ok((i, inputs_for(gen, &views)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((y.to_string(), plan))
                })
                .collect::<Result<_>>()?
        }
        Protocol::Probesets => {
            let pool: Vec<(u32, usize, i32)> = probes
                .iter()
                .map(|&i| (ds.samples[i].identity, i, ds.samples[i].yaw))
                .collect();
            let sets = build_probe_sets(&pool, PROBE_YAW_RANGE, seed)?;
            (1..=MAX_PROBE_SET)
                .map(|k| {
                    let plan = sets
                        .p(k)
                        .values()
                        .map(|refs| (refs[0], inputs_for(gen, refs)))
                        .collect();
                    (k.to_string(), plan)
                })
                .collect()
        }
    };
    plans
        .into_iter()
        .map(|(label, plan)| {
            let scored = plan
                .par_iter()
                .map(|(anchor, views)| {
                    let inputs: Vec<Tensor> =
                        views.iter().map(|&v| ds.samples[v].lp.clone()).collect();
                    Ok(Scored {
                        anchor: *anchor,
                        image: gen.generate(&inputs)?.sf,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((label, scored))
        })
        .collect()
}

/// Loads a training checkpoint, checks it against `request`, frontalizes
/// the probes and scores them. Rank-1 uses the embedder stored in the
/// checkpoint, else `embedder`. Writes the report under `out` if given.
pub fn evaluate_model(
    checkpoint: &Path,
    dataset: &Dataset,
    request: &EvalRequest,
    embedder: Option<&ToyEmbedder>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let run = from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let cfg = &run.config;
    if cfg.mode != request.mode || cfg.generator.fusion != request.fusion {
        return Err(Error::Fingerprint(format!(
            "{} holds a {} {} model (config {}), request was {} {}",
            checkpoint.display(),
            cfg.mode,
            cfg.generator.fusion,
            run.fingerprint,
            request.mode,
            request.fusion
        )));
    }
    if run.fingerprint != cfg.fingerprint() {
        return Err(Error::Fingerprint(format!(
            "{} header fingerprint {} does not match its configuration",
            checkpoint.display(),
            run.fingerprint
        )));
    }
    if dataset.hr_size != cfg.generator.hr_size || dataset.channels != cfg.generator.image_channels
    {
        return Err(Error::InvalidArgument(format!(
            "dataset images are {}x{}x{}, checkpoint expects {}x{}x{}",
            dataset.channels,
            dataset.hr_size,
            dataset.hr_size,
            cfg.generator.image_channels,
            cfg.generator.hr_size,
            cfg.generator.hr_size
        )));
    }
    let emb = run
        .embedder
        .as_ref()
        .or(embedder)
        .ok_or(Error::UntrainedEmbedder)?;
    let gen = &run.state.nets.generator;
    let groups = frontalize_probes(gen, dataset, request.protocol, request.seed)?;
    let (rows, average) = score_groups(dataset, &groups, emb)?;
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        protocol: request.protocol,
        mode: cfg.mode,
        fusion: cfg.generator.fusion,
        config_fingerprint: run.fingerprint.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        rows,
        average,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
