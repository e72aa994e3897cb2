//! Paired samples, the on-disk dataset layout and its loader.
//!
//! ```text
//! <root>/manifest.jsonl           header line, then one record per image
//! <root>/images/id0003/yaw+45_illum0.800.pgm
//! <root>/masks/id0003.pgm|ppm     R = skin, G = key-points, B = hair
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{check_yaw, render_pose, synth_parsing_masks, ParsingMasks, SyntheticIdentity};
use crate::error::{Error, Result};
use crate::numerics::{downsample4, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_SCHEMA: &str = "superfront-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// One LR side view paired with its HR versions and frontal target.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub lp: Tensor,
    pub hp: Tensor,
    pub hf: Tensor,
    pub masks: ParsingMasks,
    pub identity: u32,
    pub yaw: i32,
    pub illumination: f64,
}

/// Renders an unquantized sample directly.
pub fn make_training_pair(
    identity: &SyntheticIdentity,
    yaw: i32,
    illumination: f64,
    hr: usize,
    channels: usize,
) -> Result<TrainingSample> {
    let hp = render_pose(identity, yaw, illumination, hr, channels)?;
    let hf = if yaw == 0 {
        hp.clone()
    } else {
        render_pose(identity, 0, illumination, hr, channels)?
    };
    Ok(TrainingSample {
        lp: downsample4(&hp)?,
        hp,
        hf,
        masks: synth_parsing_masks(identity, hr),
        identity: identity.id,
        yaw,
        illumination,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Gallery,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Identities `0..n_train` are used for training.
    pub n_train: usize,
    /// Identities `n_train..n_train + n_test` form gallery and probes.
    pub n_test: usize,
    pub yaws: Vec<i32>,
    pub illuminations: Vec<f64>,
    pub seed: u64,
    pub hr_size: usize,
    pub channels: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 8,
            n_test: 8,
            yaws: super::render::SUPPORTED_YAWS.to_vec(),
            illuminations: vec![1.0],
            seed: 0,
            hr_size: 128,
            channels: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_train + self.n_test == 0 {
            return bad("dataset needs at least one identity".into());
        }
        if self.yaws.is_empty() || self.illuminations.is_empty() {
            return bad("yaws and illuminations must be non-empty".into());
        }
        for &y in &self.yaws {
            check_yaw(y)?;
        }
        if !self.yaws.contains(&0) {
            return bad("yaws must include 0: frontal targets are rendered at yaw 0".into());
        }
        let mut sorted = self.yaws.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.yaws.len() {
            return bad("yaws contain duplicates".into());
        }
        for (i, &l) in self.illuminations.iter().enumerate() {
            if !(0.6..=1.0).contains(&l) {
                return bad(format!("illumination {} outside [0.6, 1.0]", l));
            }
            if self.illuminations[..i].contains(&l) {
                return bad(format!("illumination {} listed twice", l));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("{} channels unsupported (1 or 3)", self.channels));
        }
        if self.hr_size < 8 || !self.hr_size.is_multiple_of(4) {
            return bad(format!("hr_size {} must be a multiple of 4", self.hr_size));
        }
        Ok(())
    }

    /// The brightest listed illumination; gallery images use it.
    pub fn neutral_illumination(&self) -> f64 {
        self.illuminations.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn train_ids(&self) -> std::ops::Range<u32> {
        0..self.n_train as u32
    }

    pub fn test_ids(&self) -> std::ops::Range<u32> {
        self.n_train as u32..(self.n_train + self.n_test) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub hr_size: usize,
    pub channels: usize,
    #[serde(default)]
    pub config: Option<DatasetConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub identity: u32,
    pub yaw: i32,
    pub illumination: f64,
    pub role: Role,
    #[serde(default)]
    pub masks: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let manifest_err = |line: usize, detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let header: ManifestHeader = match lines.next() {
            Some((_, l)) => {
                let l = l.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&l)
                    .map_err(|e| manifest_err(1, format!("bad header: {}", e)))?
            }
            None => return Err(manifest_err(1, "empty manifest".into())),
        };
        if header.schema != MANIFEST_SCHEMA || header.version != MANIFEST_VERSION {
            return Err(manifest_err(
                1,
                format!("unsupported schema {} v{}", header.schema, header.version),
            ));
        }
        let mut records = Vec::new();
        for (i, l) in lines {
            let l = l.map_err(|e| Error::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord =
                serde_json::from_str(&l).map_err(|e| manifest_err(i + 1, e.to_string()))?;
            records.push(r);
        }
        Ok(Manifest { header, records })
    }
}

/// A loaded image with its labels. `frontal` indexes the yaw-0 sample of the
/// same identity and illumination.
#[derive(Clone, Debug)]
pub struct Sample {
    pub identity: u32,
    pub yaw: i32,
    pub illumination: f64,
    pub role: Role,
    pub hp: Tensor,
    pub lp: Tensor,
    pub frontal: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub hr_size: usize,
    pub channels: usize,
    pub config: Option<DatasetConfig>,
    pub samples: Vec<Sample>,
    pub masks: BTreeMap<u32, ParsingMasks>,
}

/// `round(255 v) / 255`, the value an 8-bit file round-trips to.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn image_name(identity: u32, yaw: i32, illumination: f64, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!(
        "images/id{:04}/yaw{:+03}_illum{:.3}.{}",
        identity, yaw, illumination, ext
    )
}

fn mask_name(identity: u32) -> String {
    format!("masks/id{:04}.ppm", identity)
}

impl Dataset {
    /// Renders every sample in memory; identical to writing and reloading.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        let (records, images, masks) = render_all(config)?;
        Self::assemble(
            config.hr_size,
            config.channels,
            Some(config.clone()),
            records,
            images,
            masks,
            Path::new("<memory>"),
        )
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = Manifest::read(&manifest_path)?;
        let h = &manifest.header;
        let images = manifest
            .records
            .par_iter()
            .map(|r| read_image(&root.join(&r.path), h.channels, h.hr_size))
            .collect::<Result<Vec<_>>>()?;
        let mut masks = BTreeMap::new();
        for r in &manifest.records {
            if masks.contains_key(&r.identity) {
                continue;
            }
            let m = match &r.masks {
                Some(p) => read_masks(&root.join(p), h.hr_size)?,
                None => ParsingMasks::uniform(h.hr_size),
            };
            masks.insert(r.identity, m);
        }
        Self::assemble(
            h.hr_size,
            h.channels,
            h.config.clone(),
            manifest.records,
            images,
            masks,
            &manifest_path,
        )
    }

    fn assemble(
        hr_size: usize,
        channels: usize,
        config: Option<DatasetConfig>,
        records: Vec<ManifestRecord>,
        images: Vec<Tensor>,
        masks: BTreeMap<u32, ParsingMasks>,
        origin: &Path,
    ) -> Result<Self> {
        let mut frontal_index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.yaw == 0 {
                frontal_index.insert((r.identity, r.illumination.to_bits()), i);
            }
        }
        let mut samples = Vec::with_capacity(records.len());
        for (i, (r, hp)) in records.into_iter().zip(images).enumerate() {
            let frontal = *frontal_index
                .get(&(r.identity, r.illumination.to_bits()))
                .ok_or_else(|| Error::Manifest {
                    path: origin.to_path_buf(),
                    line: i + 2,
                    detail: format!(
                        "no frontal (yaw 0) image for identity {} at illumination {}",
                        r.identity, r.illumination
                    ),
                })?;
            samples.push(Sample {
                identity: r.identity,
                yaw: r.yaw,
                illumination: r.illumination,
                role: r.role,
                lp: downsample4(&hp)?,
                hp,
                frontal,
            });
        }
        Ok(Dataset {
            hr_size,
            channels,
            config,
            samples,
            masks,
        })
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / 4
    }

    pub fn frontal(&self, i: usize) -> &Tensor {
        &self.samples[self.samples[i].frontal].hp
    }

    pub fn masks_of(&self, identity: u32) -> &ParsingMasks {
        &self.masks[&identity]
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].role == role)
            .collect()
    }

    pub fn training_sample(&self, i: usize) -> TrainingSample {
        let s = &self.samples[i];
        TrainingSample {
            lp: s.lp.clone(),
            hp: s.hp.clone(),
            hf: self.frontal(i).clone(),
            masks: self.masks_of(s.identity).clone(),
            identity: s.identity,
            yaw: s.yaw,
            illumination: s.illumination,
        }
    }

    /// Hex SHA-256 over labels and pixel values, for provenance records.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.hr_size as u64).to_le_bytes());
        h.update((self.channels as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.identity.to_le_bytes());
            h.update(s.yaw.to_le_bytes());
            h.update(s.illumination.to_le_bytes());
            h.update([s.role as u8]);
            for v in s.hp.data() {
                h.update(v.to_le_bytes());
            }
        }
        crate::model::params::hex(&h.finalize())
    }
}

type Rendered = (
    Vec<ManifestRecord>,
    Vec<Tensor>,
    BTreeMap<u32, ParsingMasks>,
);

fn render_all(config: &DatasetConfig) -> Result<Rendered> {
    config.validate()?;
    let neutral = config.neutral_illumination();
    let mut jobs = Vec::new();
    for id in config.train_ids().chain(config.test_ids()) {
        let test = config.test_ids().contains(&id);
        for &yaw in &config.yaws {
            for &illum in &config.illuminations {
                let role = match (test, yaw == 0 && illum == neutral) {
                    (false, _) => Role::Train,
                    (true, true) => Role::Gallery,
                    (true, false) => Role::Probe,
                };
                jobs.push(ManifestRecord {
                    path: image_name(id, yaw, illum, config.channels),
                    identity: id,
                    yaw,
                    illumination: illum,
                    role,
                    masks: Some(mask_name(id)),
                });
            }
        }
    }
    let identities: BTreeMap<u32, SyntheticIdentity> = config
        .train_ids()
        .chain(config.test_ids())
        .map(|id| (id, SyntheticIdentity::new(config.seed, id)))
        .collect();
    let images = jobs
        .par_iter()
        .map(|r| {
            let img = render_pose(
                &identities[&r.identity],
                r.yaw,
                r.illumination,
                config.hr_size,
                config.channels,
            )?;
            Ok(quantize(&img))
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = identities
        .par_iter()
        .map(|(&id, ident)| (id, synth_parsing_masks(ident, config.hr_size)))
        .collect();
    Ok((jobs, images, masks))
}

/// Renders the dataset and writes images, masks and manifest under `out_dir`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let (records, images, masks) = render_all(config)?;
    for dir in ["images", "masks"] {
        let p = out_dir.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for id in masks.keys() {
        let p = out_dir.join(format!("images/id{:04}", id));
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    records
        .par_iter()
        .zip(&images)
        .map(|(r, img)| write_image(&out_dir.join(&r.path), img))
        .collect::<Result<Vec<_>>>()?;
    for (id, m) in &masks {
        let stacked = crate::numerics::concat_channels(&[&m.skin, &m.keypoints, &m.hair])?;
        write_image(&out_dir.join(mask_name(*id)), &stacked)?;
    }
    let manifest = Manifest {
        header: ManifestHeader {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
            hr_size: config.hr_size,
            channels: config.channels,
            config: Some(config.clone()),
        },
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    f.write_all(manifest.to_jsonl()?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    f.flush().map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3("write_image")?;
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push((t.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let (subtype, color) = match c {
        1 => (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        ),
        3 => (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        ),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "cannot write {}-channel image",
                c
            )))
        }
    };
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = BufWriter::new(f);
    PnmEncoder::new(&mut wtr)
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path, channels: usize, hr: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    if img.width() as usize != hr || img.height() as usize != hr {
        return Err(Error::InvalidArgument(format!(
            "{}: {}x{} image, expected {}x{}",
            path.display(),
            img.width(),
            img.height(),
            hr,
            hr
        )));
    }
    let raw: Vec<u8> = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{} channels unsupported",
                channels
            )))
        }
    };
    Ok(Tensor::from_fn3(channels, hr, hr, |c, y, x| {
        raw[(y * hr + x) * channels + c] as f64 / 255.0
    }))
}

fn read_masks(path: &Path, hr: usize) -> Result<ParsingMasks> {
    let t = read_image(path, 3, hr)?;
    let bin = |c: usize| {
        let ch = t.channel(c);
        ch.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    };
    Ok(ParsingMasks {
        skin: bin(0),
        keypoints: bin(1),
        hair: bin(2),
    })
}

/// The output directory's manifest path.
pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}
