//! Separable Catmull-Rom (a = -0.5) resampling with edge clamping.
//!
//! Output sample `i` reads source coordinate `i * den / num`, so sample
//! positions of an `r`-fold upsampling followed by an `r`-fold downsampling
//! land back on the original grid and the round trip is exact.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const A: f64 = -0.5;

/// A positive rational scale factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub const fn new(num: usize, den: usize) -> Self {
        Ratio { num, den }
    }

    fn apply(&self, len: usize) -> Result<usize> {
        if self.num == 0 || self.den == 0 {
            return Err(Error::InvalidArgument(format!(
                "scale factor {}/{} must be positive",
                self.num, self.den
            )));
        }
        let scaled = len * self.num;
        if !scaled.is_multiple_of(self.den) || scaled == 0 {
            return Err(Error::InvalidArgument(format!(
                "size {} scaled by {}/{} is not a positive integer",
                len, self.num, self.den
            )));
        }
        Ok(scaled / self.den)
    }
}

pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps for one output position: source indices (clamped) and weights.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

fn taps(out_len: usize, in_len: usize, factor: Ratio) -> Vec<Taps> {
    (0..out_len)
        .map(|i| {
            let num = i * factor.den;
            let base = num / factor.num;
            let t = (num % factor.num) as f64 / factor.num as f64;
            let clamp = |k: isize| k.clamp(0, in_len as isize - 1) as usize;
            let b = base as isize;
            Taps {
                idx: [clamp(b - 1), clamp(b), clamp(b + 1), clamp(b + 2)],
                w: [
                    cubic_weight(1.0 + t),
                    cubic_weight(t),
                    cubic_weight(1.0 - t),
                    cubic_weight(2.0 - t),
                ],
            }
        })
        .collect()
}

/// Weighted sum written relative to the centre tap, so constant signals and
/// on-grid samples are reproduced bit-exactly even when weights round.
#[inline]
fn interp(t: &Taps, get: impl Fn(usize) -> f64) -> f64 {
    let centre = get(t.idx[1]);
    let mut acc = 0.0;
    for k in [0, 2, 3] {
        if t.w[k] != 0.0 {
            acc += t.w[k] * (get(t.idx[k]) - centre);
        }
    }
    centre + acc
}

/// Resamples a `(C, H, W)` tensor by `factor` along both spatial axes.
pub fn bicubic_resample(input: &Tensor, factor: Ratio) -> Result<Tensor> {
    let (c, h, w) = input.dims3("bicubic_resample")?;
    let (oh, ow) = (factor.apply(h)?, factor.apply(w)?);
    let col_taps = taps(ow, w, factor);
    let row_taps = taps(oh, h, factor);

    // horizontal pass: (C, H, OW)
    let mut tmp = vec![0.0; c * h * ow];
    for ci in 0..c {
        for y in 0..h {
            let row = &input.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst = &mut tmp[(ci * h + y) * ow..(ci * h + y + 1) * ow];
            for (d, t) in dst.iter_mut().zip(&col_taps) {
                *d = interp(t, |k| row[k]);
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = &tmp[ci * h * ow..(ci + 1) * h * ow];
        for (y, t) in row_taps.iter().enumerate() {
            let dst = &mut out[(ci * oh + y) * ow..(ci * oh + y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = interp(t, |k| plane[k * ow + x]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// The `4x` downsampling used to derive low-resolution inputs.
pub fn downsample4(input: &Tensor) -> Result<Tensor> {
    bicubic_resample(input, Ratio::new(1, 4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_is_interpolating_and_partitions_unity() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        for t in [0.1, 0.25, 0.5, 0.9] {
            let s = cubic_weight(1.0 + t)
                + cubic_weight(t)
                + cubic_weight(1.0 - t)
                + cubic_weight(2.0 - t);
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let x = Tensor::full(&[3, 128, 128], 0.7);
        let y = bicubic_resample(&x, Ratio::new(1, 4)).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        let up = bicubic_resample(&Tensor::full(&[1, 5, 7], 0.3), Ratio::new(3, 1)).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn rejects_non_integer_output() {
        assert!(bicubic_resample(&Tensor::zeros(&[1, 10, 10]), Ratio::new(1, 4)).is_err());
        assert!(bicubic_resample(&Tensor::zeros(&[1, 4, 4]), Ratio::new(0, 4)).is_err());
    }

    #[test]
    fn linear_ramp_reproduced_in_interior() {
        let x = Tensor::from_fn3(1, 16, 16, |_, _, xx| 0.1 + 0.03 * xx as f64);
        let y = bicubic_resample(&x, Ratio::new(1, 2)).unwrap();
        for r in 0..8 {
            for c in 1..6 {
                let expected = 0.1 + 0.03 * (2 * c) as f64;
                assert!((y.at3(0, r, c) - expected).abs() < 1e-12);
            }
        }
        // off-grid samples from upsampling also sit on the line
        let up = bicubic_resample(&x, Ratio::new(4, 1)).unwrap();
        for c in 8..48 {
            let expected = 0.1 + 0.03 * (c as f64 / 4.0);
            assert!((up.at3(0, 5, c) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn up_then_down_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn3(2, 8, 8, |_, _, _| rng.gen::<f64>());
        let up = bicubic_resample(&x, Ratio::new(4, 1)).unwrap();
        let back = bicubic_resample(&up, Ratio::new(1, 4)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn integer_shift_equivariance_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::from_fn3(1, 24, 24, |_, _, _| rng.gen::<f64>());
        let shifted = Tensor::from_fn3(1, 24, 24, |_, y, x| base.at3(0, y, (x + 4) % 24));
        let f = Ratio::new(3, 1);
        let a = bicubic_resample(&base, f).unwrap();
        let b = bicubic_resample(&shifted, f).unwrap();
        // interior of the shifted grid, away from the wrap and the clamped border
        for y in 0..72 {
            for x in 6..50 {
                assert!((b.at3(0, y, x) - a.at3(0, y, x + 12)).abs() < 1e-12);
            }
        }
    }
}
