//! Parametric face renderer.
//!
//! Canvas coordinates are normalized: `u` runs left to right over `[-1, 1]`,
//! `v` top to bottom over `[-1, 1]`, and pixel centres sit symmetrically
//! about `u = 0`. Facial components live on a vertical cylinder whose radius
//! is the head's half-width, so a yaw rotation slides them sideways and
//! narrows them by the cosine of their rotated angle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SUPPORTED_YAWS: [i32; 9] = [-60, -45, -30, -15, 0, 15, 30, 45, 60];
pub const ILLUMINATION_RANGE: (f64, f64) = (0.6, 1.0);

/// Beyond this |yaw| the far-side eye and brow are hidden.
const OCCLUSION_YAW: i32 = 45;
const HEAD_CENTER_V: f64 = 0.05;
const EYE_TONE: f64 = 0.08;
/// Per-channel multipliers turning a scalar tone into a color.
const SKIN_TINT: [f64; 3] = [1.0, 0.82, 0.7];
const LIP_TINT: [f64; 3] = [1.0, 0.55, 0.55];
const HAIR_TINT: [f64; 3] = [1.0, 0.9, 0.8];

/// Shape and tone parameters of one synthetic face, all in canvas units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub head_a: f64,
    pub head_b: f64,
    pub eye_half_spacing: f64,
    pub eye_v: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub brow_gap: f64,
    pub brow_half_width: f64,
    pub brow_thickness: f64,
    pub nose_length: f64,
    pub nose_half_width: f64,
    pub mouth_v: f64,
    pub mouth_half_width: f64,
    pub mouth_curvature: f64,
    pub mouth_thickness: f64,
    pub skin_tone: f64,
    pub hair_tone: f64,
    pub hair_height: f64,
    pub hairline_curvature: f64,
}

/// Sampling range of each [`FaceParams`] field, in declaration order.
pub const PARAM_RANGES: [(f64, f64); 19] = [
    (0.55, 0.70),
    (0.72, 0.85),
    (0.20, 0.30),
    (-0.10, 0.05),
    (0.07, 0.11),
    (0.035, 0.06),
    (0.10, 0.16),
    (0.12, 0.18),
    (0.025, 0.04),
    (0.15, 0.30),
    (0.035, 0.065),
    (0.45, 0.58),
    (0.12, 0.22),
    (-0.6, 0.6),
    (0.03, 0.05),
    (0.50, 0.85),
    (0.08, 0.35),
    (0.15, 0.30),
    (0.0, 0.3),
];

impl FaceParams {
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_RANGES.len() {
            return Err(Error::InvalidArgument(format!(
                "face parameter vector has {} entries, expected {}",
                v.len(),
                PARAM_RANGES.len()
            )));
        }
        Ok(FaceParams {
            head_a: v[0],
            head_b: v[1],
            eye_half_spacing: v[2],
            eye_v: v[3],
            eye_rx: v[4],
            eye_ry: v[5],
            brow_gap: v[6],
            brow_half_width: v[7],
            brow_thickness: v[8],
            nose_length: v[9],
            nose_half_width: v[10],
            mouth_v: v[11],
            mouth_half_width: v[12],
            mouth_curvature: v[13],
            mouth_thickness: v[14],
            skin_tone: v[15],
            hair_tone: v[16],
            hair_height: v[17],
            hairline_curvature: v[18],
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.head_a,
            self.head_b,
            self.eye_half_spacing,
            self.eye_v,
            self.eye_rx,
            self.eye_ry,
            self.brow_gap,
            self.brow_half_width,
            self.brow_thickness,
            self.nose_length,
            self.nose_half_width,
            self.mouth_v,
            self.mouth_half_width,
            self.mouth_curvature,
            self.mouth_thickness,
            self.skin_tone,
            self.hair_tone,
            self.hair_height,
            self.hairline_curvature,
        ]
    }

    fn hairline(&self, du: f64) -> f64 {
        HEAD_CENTER_V - self.head_b + self.hair_height + self.hairline_curvature * du * du
    }

    fn brow_v(&self) -> f64 {
        self.eye_v - self.brow_gap
    }

    fn nose_top(&self) -> f64 {
        self.eye_v + 0.06
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub id: u32,
    pub params: FaceParams,
}

impl SyntheticIdentity {
    /// Draws parameters from ChaCha8 keyed by `seed`, on stream `id`.
    pub fn new(seed: u64, id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let v: Vec<f64> = PARAM_RANGES
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect();
        SyntheticIdentity {
            id,
            params: FaceParams::from_vec(&v).expect("range table length"),
        }
    }
}

pub fn check_yaw(yaw: i32) -> Result<()> {
    if SUPPORTED_YAWS.contains(&yaw) {
        Ok(())
    } else {
        Err(Error::UnsupportedYaw(yaw))
    }
}

fn coverage(sd: f64, px: f64) -> f64 {
    (0.5 - sd / px).clamp(0.0, 1.0)
}

/// Approximate signed distance to an axis-aligned ellipse.
fn ellipse_sd(du: f64, dv: f64, a: f64, b: f64) -> f64 {
    let f = ((du / a).powi(2) + (dv / b).powi(2)).sqrt();
    let grad = ((du / (a * a)).powi(2) + (dv / (b * b)).powi(2)).sqrt();
    if grad < 1e-12 {
        -a.min(b)
    } else {
        (f - 1.0) * f / grad
    }
}

fn box_sd(du: f64, dv: f64, hw: f64, hh: f64) -> f64 {
    (du.abs() - hw).max(dv.abs() - hh)
}

/// A component placed on the cylinder: centre `u` and horizontal scale.
#[derive(Clone, Copy, Debug)]
struct Placed {
    u: f64,
    squeeze: f64,
}

fn place(radius: f64, u0: f64, yaw: f64) -> Placed {
    let phi = (u0 / radius).clamp(-1.0, 1.0).asin() + yaw;
    Placed {
        u: radius * phi.sin(),
        squeeze: phi.cos().max(0.15),
    }
}

struct Layout {
    eyes: Vec<Placed>,
    nose: Placed,
    mouth: Placed,
    hair_center: f64,
}

fn layout(p: &FaceParams, yaw_deg: i32) -> Layout {
    let yaw = (yaw_deg as f64).to_radians();
    let r = p.head_a;
    let mut eyes = vec![place(r, -p.eye_half_spacing, yaw)];
    if yaw_deg.abs() <= OCCLUSION_YAW {
        eyes.push(place(r, p.eye_half_spacing, yaw));
    }
    let mut nose = place(r, 0.0, yaw);
    // the tip stands off the cylinder surface
    nose.u += 0.08 * yaw.sin();
    Layout {
        eyes,
        nose,
        mouth: place(r, 0.0, yaw),
        hair_center: r * yaw.sin(),
    }
}

fn tone(base: f64, tint: &[f64; 3], channels: usize, c: usize) -> f64 {
    if channels == 1 {
        base
    } else {
        base * tint[c]
    }
}

/// Renders a yaw in `[0, 60]`; negative yaws are mirror images.
fn render_nonneg(
    id: &SyntheticIdentity,
    yaw: i32,
    illumination: f64,
    hr: usize,
    channels: usize,
) -> Tensor {
    let p = &id.params;
    let lay = layout(p, yaw);
    let px = 2.0 / hr as f64;
    let half = hr as f64 / 2.0;
    let mut out = Tensor::zeros(&[channels, hr, hr]);
    for y in 0..hr {
        let v = (y as f64 + 0.5 - half) / half;
        for x in 0..hr {
            let u = (x as f64 + 0.5 - half) / half;
            let head = coverage(ellipse_sd(u, v - HEAD_CENTER_V, p.head_a, p.head_b), px);
            if head == 0.0 {
                continue;
            }
            // (alpha, tone, tint) layers painted over the skin
            let mut layers: Vec<(f64, f64, &[f64; 3])> = Vec::with_capacity(8);
            let hair = coverage(v - p.hairline(u - lay.hair_center), px);
            layers.push((hair, p.hair_tone, &HAIR_TINT));
            for e in &lay.eyes {
                let brow = box_sd(
                    u - e.u,
                    v - p.brow_v(),
                    p.brow_half_width * e.squeeze,
                    p.brow_thickness / 2.0,
                );
                layers.push((coverage(brow, px), p.hair_tone * 0.8, &HAIR_TINT));
                let eye = ellipse_sd(u - e.u, v - p.eye_v, p.eye_rx * e.squeeze, p.eye_ry);
                layers.push((coverage(eye, px), EYE_TONE, &SKIN_TINT));
            }
            let nose_len = p.nose_length / 2.0;
            let nose = ellipse_sd(
                u - lay.nose.u,
                v - (p.nose_top() + nose_len),
                p.nose_half_width.max(p.nose_half_width * lay.nose.squeeze),
                nose_len,
            );
            layers.push((coverage(nose, px), p.skin_tone * 0.72, &SKIN_TINT));
            let mu = (u - lay.mouth.u) / lay.mouth.squeeze;
            let mouth = box_sd(
                mu * lay.mouth.squeeze,
                v - (p.mouth_v + p.mouth_curvature * mu * mu),
                p.mouth_half_width * lay.mouth.squeeze,
                p.mouth_thickness / 2.0,
            );
            layers.push((coverage(mouth, px), p.skin_tone * 0.55, &LIP_TINT));
            for c in 0..channels {
                let mut col = tone(p.skin_tone, &SKIN_TINT, channels, c);
                for &(a, t, tint) in &layers {
                    if a > 0.0 {
                        col += a * (tone(t, tint, channels, c) - col);
                    }
                }
                out.set3(c, y, x, head * col * illumination);
            }
        }
    }
    out
}

/// Rasterizes `identity` at `yaw` degrees with intensities scaled by
/// `illumination`, as a `(channels, hr, hr)` image in `[0, 1]`.
pub fn render_pose(
    identity: &SyntheticIdentity,
    yaw: i32,
    illumination: f64,
    hr: usize,
    channels: usize,
) -> Result<Tensor> {
    check_yaw(yaw)?;
    if !(ILLUMINATION_RANGE.0..=ILLUMINATION_RANGE.1).contains(&illumination) {
        return Err(Error::InvalidArgument(format!(
            "illumination {} outside [{}, {}]",
            illumination, ILLUMINATION_RANGE.0, ILLUMINATION_RANGE.1
        )));
    }
    if hr < 8 || !hr.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "image size {} must be a multiple of 4, at least 8",
            hr
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "{} channels unsupported (1 or 3)",
            channels
        )));
    }
    if yaw < 0 {
        Ok(render_nonneg(identity, -yaw, illumination, hr, channels).flip_horizontal())
    } else {
        Ok(render_nonneg(identity, yaw, illumination, hr, channels))
    }
}

/// Binary skin, key-point and hair masks of the frontal face, each `(1, hr, hr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsingMasks {
    pub skin: Tensor,
    pub keypoints: Tensor,
    pub hair: Tensor,
}

impl ParsingMasks {
    pub fn as_array(&self) -> [Tensor; 3] {
        [self.skin.clone(), self.keypoints.clone(), self.hair.clone()]
    }

    /// Skin everywhere, no key-point or hair regions.
    pub fn uniform(hr: usize) -> Self {
        ParsingMasks {
            skin: Tensor::ones(&[1, hr, hr]),
            keypoints: Tensor::zeros(&[1, hr, hr]),
            hair: Tensor::zeros(&[1, hr, hr]),
        }
    }
}

pub fn synth_parsing_masks(identity: &SyntheticIdentity, hr: usize) -> ParsingMasks {
    let p = &identity.params;
    let half = hr as f64 / 2.0;
    let boxes = [
        // (centre u, centre v, half width, half height) for each component
        (-p.eye_half_spacing, p.eye_v, p.eye_rx, p.eye_ry),
        (p.eye_half_spacing, p.eye_v, p.eye_rx, p.eye_ry),
        (
            -p.eye_half_spacing,
            p.brow_v(),
            p.brow_half_width,
            p.brow_thickness / 2.0,
        ),
        (
            p.eye_half_spacing,
            p.brow_v(),
            p.brow_half_width,
            p.brow_thickness / 2.0,
        ),
        (
            0.0,
            p.nose_top() + p.nose_length / 2.0,
            p.nose_half_width,
            p.nose_length / 2.0,
        ),
        (
            0.0,
            p.mouth_v + p.mouth_curvature * p.mouth_half_width.powi(2) / 2.0,
            p.mouth_half_width,
            (p.mouth_curvature.abs() * p.mouth_half_width.powi(2) + p.mouth_thickness) / 2.0,
        ),
    ];
    let mut m = ParsingMasks {
        skin: Tensor::zeros(&[1, hr, hr]),
        keypoints: Tensor::zeros(&[1, hr, hr]),
        hair: Tensor::zeros(&[1, hr, hr]),
    };
    for y in 0..hr {
        let v = (y as f64 + 0.5 - half) / half;
        for x in 0..hr {
            let u = (x as f64 + 0.5 - half) / half;
            if ellipse_sd(u, v - HEAD_CENTER_V, p.head_a, p.head_b) > 0.0 {
                continue;
            }
            if v < p.hairline(u) {
                m.hair.set3(0, y, x, 1.0);
            } else {
                m.skin.set3(0, y, x, 1.0);
            }
            if boxes
                .iter()
                .any(|&(cu, cv, hw, hh)| box_sd(u - cu, v - cv, hw, hh) <= 0.0)
            {
                m.keypoints.set3(0, y, x, 1.0);
            }
        }
    }
    m
}
