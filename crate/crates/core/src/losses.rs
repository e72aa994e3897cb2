//! Training objectives: pixel, patch (structural similarity), adversarial,
//! identity, total variation, and the orthogonality penalty on encoder
//! features, plus their weighted combination.
//!
//! Every loss is recorded on a [`Graph`] so the same code path yields values
//! and adjoints. The `*_value` helpers evaluate on plain tensors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BackwardRule, Graph, Tensor, Var};

/// Stability constants of the structural similarity index.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Clamp applied to discriminator probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Default patch edge and stride of the patch loss and the SSIM metric.
pub const PATCH_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub patch: f64,
    pub adversarial: f64,
    pub identity: f64,
    pub tv: f64,
    pub orthogonal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: 20.0,
            patch: 5.0,
            adversarial: 0.8,
            identity: 0.1,
            tv: 1e-4,
            orthogonal: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {} = {} must be finite and >= 0",
                    name, w
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("pixel", self.pixel),
            ("patch", self.patch),
            ("adversarial", self.adversarial),
            ("identity", self.identity),
            ("tv", self.tv),
            ("orthogonal", self.orthogonal),
        ]
    }
}

/// Generator loss components. `orthogonal` is present only in multi-image mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub pixel: T,
    pub patch: T,
    pub adversarial: T,
    pub identity: T,
    pub tv: T,
    pub orthogonal: Option<T>,
}

impl<T: Copy> LossTerms<T> {
    fn weighted(&self, w: &LossWeights) -> Vec<(&'static str, f64, T)> {
        let mut v = vec![
            ("pixel", w.pixel, self.pixel),
            ("patch", w.patch, self.patch),
            ("adversarial", w.adversarial, self.adversarial),
            ("identity", w.identity, self.identity),
            ("tv", w.tv, self.tv),
        ];
        if let Some(o) = self.orthogonal {
            v.push(("orthogonal", w.orthogonal, o));
        }
        v
    }
}

/// Weighted total of evaluated components. Zero-weight terms are skipped.
pub fn total_g_loss_value(weights: &LossWeights, terms: &LossTerms<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (name, w, v) in terms.weighted(weights) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss component `{}` = {}",
                name, v
            )));
        }
        if w != 0.0 {
            total += w * v;
        }
    }
    Ok(total)
}

/// Records the weighted total; fails naming the first non-finite component.
pub fn total_g_loss(g: &Graph, weights: &LossWeights, terms: &LossTerms<Var>) -> Result<Var> {
    let mut parts = Vec::new();
    for (name, w, v) in terms.weighted(weights) {
        let value = g.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss component `{}` = {}",
                name, value
            )));
        }
        if w != 0.0 {
            parts.push(g.scale(v, w));
        }
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.add_n(&parts)
}

// ---- pixel loss ------------------------------------------------------------

/// Sum over channels and pixels of `|target - pred|`, divided by `W * H`.
pub fn l1_per_pixel(g: &Graph, target: Var, pred: Var) -> Result<Var> {
    let shape = g.shape(pred);
    let (h, w) = match shape[..] {
        [_, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "pixel_loss",
                format!("expected (C, H, W), got {:?}", shape),
            ))
        }
    };
    let diff = g.sub(target, pred)?;
    Ok(g.scale(g.sum(g.abs(diff)), 1.0 / (h * w) as f64))
}

/// Side-view super-resolution term plus frontal synthesis term.
pub fn pixel_loss(g: &Graph, hp: Var, sp: Var, hf: Var, sf: Var) -> Result<Var> {
    let side = l1_per_pixel(g, hp, sp)?;
    let front = l1_per_pixel(g, hf, sf)?;
    g.add(side, front)
}

pub fn pixel_loss_value(hp: &Tensor, sp: &Tensor, hf: &Tensor, sf: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let [a, b, c, d] = [hp, sp, hf, sf].map(|t| g.constant(t.clone()));
    Ok(g.value(pixel_loss(&g, a, b, c, d)?).item())
}

// ---- structural similarity -------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct PatchStats {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

fn patch_stats(x: &[f64], y: &[f64]) -> PatchStats {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    PatchStats {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cxy: cxy / n,
    }
}

/// Structural similarity of two equally sized patches (population moments).
pub fn ssim_index(x: &[f64], y: &[f64], c1: f64, c2: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(
            "ssim_index",
            format!("patch sizes {} and {}", x.len(), y.len()),
        ));
    }
    if c1 <= 0.0 || c2 <= 0.0 {
        return Err(Error::InvalidArgument(
            "SSIM stability constants must be positive".into(),
        ));
    }
    Ok(ssim_from_stats(&patch_stats(x, y), c1, c2))
}

fn ssim_from_stats(s: &PatchStats, c1: f64, c2: f64) -> f64 {
    let a1 = 2.0 * s.mx * s.my + c1;
    let a2 = 2.0 * s.cxy + c2;
    let b1 = s.mx * s.mx + s.my * s.my + c1;
    let b2 = s.vx + s.vy + c2;
    (a1 * a2) / (b1 * b2)
}

/// Adds `scale * dSSIM/dx` into `gx` and `scale * dSSIM/dy` into `gy`.
fn ssim_grad_accumulate(
    x: &[f64],
    y: &[f64],
    scale: f64,
    gx: Option<&mut [f64]>,
    gy: Option<&mut [f64]>,
) {
    let s = patch_stats(x, y);
    let n = x.len() as f64;
    let a1 = 2.0 * s.mx * s.my + SSIM_C1;
    let a2 = 2.0 * s.cxy + SSIM_C2;
    let b1 = s.mx * s.mx + s.my * s.my + SSIM_C1;
    let b2 = s.vx + s.vy + SSIM_C2;
    let den = b1 * b2;
    let k = scale * 2.0 / (n * den * den);
    // d/dx_i = 2/N [ (my A2 + A1 (y_i - my)) B1 B2 - A1 A2 (mx B2 + B1 (x_i - mx)) ] / (B1 B2)^2
    if let Some(gx) = gx {
        for i in 0..x.len() {
            let num =
                (s.my * a2 + a1 * (y[i] - s.my)) * den - a1 * a2 * (s.mx * b2 + b1 * (x[i] - s.mx));
            gx[i] += k * num;
        }
    }
    if let Some(gy) = gy {
        for i in 0..y.len() {
            let num =
                (s.mx * a2 + a1 * (x[i] - s.mx)) * den - a1 * a2 * (s.my * b2 + b1 * (y[i] - s.my));
            gy[i] += k * num;
        }
    }
}

/// Top-left corners of `k x k` patches tiled with `stride` over an `h x w` plane.
fn patch_origins(h: usize, w: usize, k: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut y = 0;
    while y + k <= h {
        let mut x = 0;
        while x + k <= w {
            v.push((y, x));
            x += stride;
        }
        y += stride;
    }
    v
}

fn gather_patch(t: &Tensor, c: usize, oy: usize, ox: usize, k: usize, buf: &mut Vec<f64>) {
    buf.clear();
    let (h, w) = (t.shape()[1], t.shape()[2]);
    for dy in 0..k {
        let start = (c * h + oy + dy) * w + ox;
        buf.extend_from_slice(&t.data()[start..start + k]);
    }
}

fn scatter_patch(dst: &mut Tensor, src: &[f64], c: usize, oy: usize, ox: usize, k: usize) {
    let (h, w) = (dst.shape()[1], dst.shape()[2]);
    for dy in 0..k {
        let start = (c * h + oy + dy) * w + ox;
        for (d, s) in dst.data_mut()[start..start + k]
            .iter_mut()
            .zip(&src[dy * k..(dy + 1) * k])
        {
            *d += s;
        }
    }
}

fn check_patch_args(shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(
                "patch_loss",
                format!("expected (C, H, W), got {:?}", shape),
            ))
        }
    };
    if k == 0 || stride == 0 || k > h.min(w) || stride > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} / stride {} invalid for {}x{} image",
            k, stride, h, w
        )));
    }
    Ok((c, h, w))
}

/// Mean per-channel structural similarity over tiled patches.
pub fn mean_patch_ssim(x: &Tensor, y: &Tensor, k: usize, stride: usize) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let (c, h, w) = check_patch_args(x.shape(), k, stride)?;
    let origins = patch_origins(h, w, k, stride);
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for ci in 0..c {
        for &(oy, ox) in &origins {
            gather_patch(x, ci, oy, ox, k, &mut bx);
            gather_patch(y, ci, oy, ox, k, &mut by);
            total += ssim_from_stats(&patch_stats(&bx, &by), SSIM_C1, SSIM_C2);
        }
    }
    Ok(total / (c * origins.len()) as f64)
}

struct PatchLossRule {
    k: usize,
    stride: usize,
}

impl BackwardRule for PatchLossRule {
    fn name(&self) -> &'static str {
        "patch_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, y) = (inputs[0], inputs[1]);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let origins = patch_origins(h, w, self.k, self.stride);
        // loss = mean(1 - ssim), so each patch contributes -1/P
        let scale = -grad.item() / (c * origins.len()) as f64;
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gy = needs[1].then(|| Tensor::zeros(y.shape()));
        let n = self.k * self.k;
        let (mut bx, mut by) = (Vec::new(), Vec::new());
        let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
        for ci in 0..c {
            for &(oy, ox) in &origins {
                gather_patch(x, ci, oy, ox, self.k, &mut bx);
                gather_patch(y, ci, oy, ox, self.k, &mut by);
                px.fill(0.0);
                py.fill(0.0);
                ssim_grad_accumulate(
                    &bx,
                    &by,
                    scale,
                    gx.is_some().then_some(&mut px[..]),
                    gy.is_some().then_some(&mut py[..]),
                );
                if let Some(gx) = gx.as_mut() {
                    scatter_patch(gx, &px, ci, oy, ox, self.k);
                }
                if let Some(gy) = gy.as_mut() {
                    scatter_patch(gy, &py, ci, oy, ox, self.k);
                }
            }
        }
        vec![gx, gy]
    }
}

/// Mean over patches of `1 - ssim_index`, patches tiled per channel.
pub fn patch_loss(g: &Graph, sf: Var, hf: Var, k: usize, stride: usize) -> Result<Var> {
    let (x, y) = (g.value(sf), g.value(hf));
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "patch_loss",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let v = 1.0 - mean_patch_ssim(&x, &y, k, stride)?;
    Ok(g.apply(
        Box::new(PatchLossRule { k, stride }),
        &[sf, hf],
        Tensor::scalar(v),
    ))
}

pub fn patch_loss_value(sf: &Tensor, hf: &Tensor, k: usize, stride: usize) -> Result<f64> {
    Ok(1.0 - mean_patch_ssim(sf, hf, k, stride)?)
}

// ---- total variation -------------------------------------------------------

struct TvRule;

impl BackwardRule for TvRule {
    fn name(&self) -> &'static str {
        "tv_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = 2.0 * grad.item() / x.numel() as f64;
        let mut gx = Tensor::zeros(x.shape());
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x.at3(ci, yy, xx);
                    let mut acc = 0.0;
                    if xx + 1 < w {
                        acc -= x.at3(ci, yy, xx + 1) - v;
                    }
                    if xx > 0 {
                        acc += v - x.at3(ci, yy, xx - 1);
                    }
                    if yy + 1 < h {
                        acc -= x.at3(ci, yy + 1, xx) - v;
                    }
                    if yy > 0 {
                        acc += v - x.at3(ci, yy - 1, xx);
                    }
                    gx.set3(ci, yy, xx, k * acc);
                }
            }
        }
        vec![Some(gx)]
    }
}

fn tv_value(x: &Tensor) -> f64 {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut s = 0.0;
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let v = x.at3(ci, yy, xx);
                if xx + 1 < w {
                    let d = x.at3(ci, yy, xx + 1) - v;
                    s += d * d;
                }
                if yy + 1 < h {
                    let d = x.at3(ci, yy + 1, xx) - v;
                    s += d * d;
                }
            }
        }
    }
    s / x.numel() as f64
}

/// Squared neighbour differences (horizontal and vertical) averaged over `C * H * W`.
pub fn tv_loss(g: &Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    let (_, h, w) = xv.dims3("tv_loss")?;
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "tv_loss",
            format!("needs H, W >= 2, got {}x{}", h, w),
        ));
    }
    let v = tv_value(&xv);
    Ok(g.apply(Box::new(TvRule), &[x], Tensor::scalar(v)))
}

pub fn tv_loss_value(x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v = g.constant(x.clone());
    Ok(g.value(tv_loss(&g, v)?).item())
}

// ---- identity --------------------------------------------------------------

/// Two-layer identity features of a frozen recognition network.
pub trait IdentityEmbedder: Send + Sync {
    /// Feature dimensions `(d1, d2)`.
    fn dims(&self) -> (usize, usize);

    /// Records the embedding of `image` with the embedder's weights held
    /// constant, so adjoints reach `image` but never the weights.
    fn embed_var(&self, g: &Graph, image: Var) -> Result<(Var, Var)>;

    fn embed(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        let (p1, p2) = self.embed_var(&g, x)?;
        Ok(((*g.value(p1)).clone(), (*g.value(p2)).clone()))
    }
}

/// `sum_i ||p_i(sf) - p_i(hf)||^2` over the two feature layers.
pub fn identity_loss(g: &Graph, sf: (Var, Var), hf: (Var, Var)) -> Result<Var> {
    let d1 = g.sub(sf.0, hf.0).map_err(|_| dim_err(g, sf.0, hf.0))?;
    let d2 = g.sub(sf.1, hf.1).map_err(|_| dim_err(g, sf.1, hf.1))?;
    let a = g.sum(g.square(d1));
    let b = g.sum(g.square(d2));
    g.add(a, b)
}

fn dim_err(g: &Graph, a: Var, b: Var) -> Error {
    Error::shape(
        "identity_loss",
        format!("embedding dims {:?} vs {:?}", g.shape(a), g.shape(b)),
    )
}

/// Identity loss of `sf` against a fixed target image.
pub fn identity_loss_for(
    g: &Graph,
    embedder: &dyn IdentityEmbedder,
    sf: Var,
    hf: &Tensor,
) -> Result<Var> {
    let target = g.constant(hf.clone());
    let (t1, t2) = embedder.embed_var(g, target)?;
    let t = (g.detach(t1), g.detach(t2));
    let s = embedder.embed_var(g, sf)?;
    identity_loss(g, s, t)
}

pub fn identity_loss_value(
    embedder: &dyn IdentityEmbedder,
    sf: &Tensor,
    hf: &Tensor,
) -> Result<f64> {
    let g = Graph::new();
    let x = g.constant(sf.clone());
    Ok(g.value(identity_loss_for(&g, embedder, x, hf)?).item())
}

// ---- adversarial -----------------------------------------------------------

fn log_prob(g: &Graph, p: Var) -> Var {
    g.ln(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
}

fn log_one_minus(g: &Graph, p: Var) -> Var {
    let q = g.add_scalar(g.scale(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS), -1.0), 1.0);
    g.ln(q)
}

/// Discriminator objective for one discriminator:
/// `-(mean log D(real) + mean log(1 - D(fake)))`.
pub fn adversarial_d_loss(g: &Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument(
            "adversarial loss needs real and fake samples".into(),
        ));
    }
    let lr: Vec<Var> = real.iter().map(|&p| log_prob(g, p)).collect();
    let lf: Vec<Var> = fake.iter().map(|&p| log_one_minus(g, p)).collect();
    let r = g.scale(g.add_n(&lr)?, -1.0 / real.len() as f64);
    let f = g.scale(g.add_n(&lf)?, -1.0 / fake.len() as f64);
    g.add(r, f)
}

/// Non-saturating generator objective `-mean log D(fake)`.
pub fn adversarial_g_loss(g: &Graph, fake: &[Var]) -> Result<Var> {
    if fake.is_empty() {
        return Err(Error::InvalidArgument(
            "adversarial loss needs fake samples".into(),
        ));
    }
    let lf: Vec<Var> = fake.iter().map(|&p| log_prob(g, p)).collect();
    Ok(g.scale(g.add_n(&lf)?, -1.0 / fake.len() as f64))
}

pub fn adversarial_d_loss_value(real: &[f64], fake: &[f64]) -> Result<f64> {
    let g = Graph::new();
    let r: Vec<Var> = real
        .iter()
        .map(|&p| g.constant(Tensor::scalar(p)))
        .collect();
    let f: Vec<Var> = fake
        .iter()
        .map(|&p| g.constant(Tensor::scalar(p)))
        .collect();
    Ok(g.value(adversarial_d_loss(&g, &r, &f)?).item())
}

pub fn adversarial_g_loss_value(fake: &[f64]) -> Result<f64> {
    let g = Graph::new();
    let f: Vec<Var> = fake
        .iter()
        .map(|&p| g.constant(Tensor::scalar(p)))
        .collect();
    Ok(g.value(adversarial_g_loss(&g, &f)?).item())
}

// ---- orthogonality ---------------------------------------------------------

/// A `(d, k)` matrix: `d` flattened spatial positions by `k` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock(Tensor);

impl FeatureBlock {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::shape(
                "FeatureBlock",
                format!("expected (d, k), got {:?}", matrix.shape()),
            ));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("feature block".into()));
        }
        Ok(FeatureBlock(matrix))
    }

    pub fn from_rows(d: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[d, k], data)?)
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrthVariant {
    /// `||F^T F||_F^2`
    Literal,
    /// `||F^T F - I||_F^2`
    #[default]
    Srip,
}

impl fmt::Display for OrthVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrthVariant::Literal => "literal",
            OrthVariant::Srip => "srip",
        })
    }
}

/// `F^T F - T` for a row-major `(d, k)` matrix, `T` = 0 or identity.
fn gram_residual(f: &Tensor, variant: OrthVariant) -> Vec<f64> {
    let (d, k) = (f.shape()[0], f.shape()[1]);
    let m = f.data();
    let mut gram = vec![0.0; k * k];
    for r in 0..d {
        let row = &m[r * k..(r + 1) * k];
        for a in 0..k {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..k {
                gram[a * k + b] += ra * row[b];
            }
        }
    }
    if variant == OrthVariant::Srip {
        for a in 0..k {
            gram[a * k + a] -= 1.0;
        }
    }
    gram
}

struct OrthRule {
    variant: OrthVariant,
}

impl BackwardRule for OrthRule {
    fn name(&self) -> &'static str {
        "orthogonal_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let scale = grad.item() / inputs.len() as f64;
        inputs
            .iter()
            .zip(needs)
            .map(|(f, &need)| {
                need.then(|| {
                    // d/dF ||E||^2 = 4 F E for symmetric E = F^T F - T
                    let (d, k) = (f.shape()[0], f.shape()[1]);
                    let e = gram_residual(f, self.variant);
                    let mut out = vec![0.0; d * k];
                    for r in 0..d {
                        let row = &f.data()[r * k..(r + 1) * k];
                        for b in 0..k {
                            let mut acc = 0.0;
                            for a in 0..k {
                                acc += row[a] * e[a * k + b];
                            }
                            out[r * k + b] = 4.0 * scale * acc;
                        }
                    }
                    Tensor::from_vec(f.shape(), out).expect("same shape")
                })
            })
            .collect()
    }
}

/// `(1/N) sum_n ||F_n^T F_n - T||_F^2` over `(d, k)` feature matrices.
pub fn orthogonal_loss(g: &Graph, blocks: &[Var], variant: OrthVariant) -> Result<Var> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("orthogonal loss needs at least one block".into()))?;
    let shape = g.shape(*first);
    if shape.len() != 2 {
        return Err(Error::shape(
            "orthogonal_loss",
            format!("blocks must be (d, k), got {:?}", shape),
        ));
    }
    let mut total = 0.0;
    for &b in blocks {
        let v = g.value(b);
        if v.shape() != shape.as_slice() {
            return Err(Error::shape(
                "orthogonal_loss",
                format!("{:?} vs {:?}", v.shape(), shape),
            ));
        }
        total += gram_residual(&v, variant)
            .iter()
            .map(|e| e * e)
            .sum::<f64>();
    }
    let value = total / blocks.len() as f64;
    Ok(g.apply(
        Box::new(OrthRule { variant }),
        blocks,
        Tensor::scalar(value),
    ))
}

pub fn orthogonal_loss_value(blocks: &[FeatureBlock], variant: OrthVariant) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = blocks.iter().map(|b| g.constant(b.0.clone())).collect();
    Ok(g.value(orthogonal_loss(&g, &vars, variant)?).item())
}

struct FeatureBlockRule {
    eps: f64,
}

impl BackwardRule for FeatureBlockRule {
    fn name(&self) -> &'static str {
        "feature_block"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        // out[p, c] = x[c, p] / n_c with n_c = sqrt(|x_c|^2 + eps)
        let x = inputs[0];
        let k = x.shape()[0];
        let d = x.numel() / k;
        let mut gx = vec![0.0; k * d];
        for c in 0..k {
            let xc = &x.data()[c * d..(c + 1) * d];
            let norm = (xc.iter().map(|v| v * v).sum::<f64>() + self.eps).sqrt();
            let dot: f64 = (0..d)
                .map(|p| out.data()[p * k + c] * grad.data()[p * k + c])
                .sum();
            for p in 0..d {
                let y = out.data()[p * k + c];
                gx[c * d + p] = (grad.data()[p * k + c] - y * dot) / norm;
            }
        }
        vec![Some(Tensor::from_vec(x.shape(), gx).expect("same shape"))]
    }
}

/// Column-normalising stabiliser for [`feature_block`].
pub const FEATURE_NORM_EPS: f64 = 1e-8;

/// Flattens a `(C, H, W)` feature map into a `(H*W, C)` matrix whose columns
/// are scaled to unit norm.
pub fn feature_block(g: &Graph, features: Var) -> Result<Var> {
    let x = g.value(features);
    let (k, h, w) = x.dims3("feature_block")?;
    let d = h * w;
    let mut out = vec![0.0; d * k];
    for c in 0..k {
        let xc = &x.data()[c * d..(c + 1) * d];
        let norm = (xc.iter().map(|v| v * v).sum::<f64>() + FEATURE_NORM_EPS).sqrt();
        for p in 0..d {
            out[p * k + c] = xc[p] / norm;
        }
    }
    let v = Tensor::from_vec(&[d, k], out)?;
    Ok(g.apply(
        Box::new(FeatureBlockRule {
            eps: FEATURE_NORM_EPS,
        }),
        &[features],
        v,
    ))
}
