use proptest::prelude::*;

use superfront::evaluate::{build_probe_sets, psnr, rank1_embeddings, ssim_metric, MAX_PROBE_SET};
use superfront::losses::*;
use superfront::numerics::{bicubic_resample, pixel_shuffle, pixel_unshuffle, Ratio, Tensor};
use superfront::trainer::{lr_at, TrainConfig};

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0..1.0f64, c * h * w)
        .prop_map(move |d| Tensor::from_vec(&[c, h, w], d).unwrap())
}

fn weights() -> impl Strategy<Value = LossWeights> {
    prop::array::uniform6(0.0..10.0f64).prop_map(|w| LossWeights {
        pixel: w[0],
        patch: w[1],
        adversarial: w[2],
        identity: w[3],
        tv: w[4],
        orthogonal: w[5],
    })
}

fn terms() -> impl Strategy<Value = LossTerms<f64>> {
    (
        prop::array::uniform5(0.0..5.0f64),
        prop::option::of(0.0..5.0f64),
    )
        .prop_map(|(t, o)| LossTerms {
            pixel: t[0],
            patch: t[1],
            adversarial: t[2],
            identity: t[3],
            tv: t[4],
            orthogonal: o,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_index_is_symmetric_and_bounded(
        x in prop::collection::vec(0.0..1.0f64, 16),
        y in prop::collection::vec(0.0..1.0f64, 16),
    ) {
        let xy = ssim_index(&x, &y, SSIM_C1, SSIM_C2).unwrap();
        let yx = ssim_index(&y, &x, SSIM_C1, SSIM_C2).unwrap();
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!(xy <= 1.0 + 1e-12);
        prop_assert!((ssim_index(&x, &x, SSIM_C1, SSIM_C2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_metric_is_symmetric(x in image(1, 8, 8), y in image(1, 8, 8)) {
        let a = ssim_metric(&x, &y).unwrap();
        prop_assert!((a - ssim_metric(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
    }

    #[test]
    fn pixel_and_tv_losses_are_non_negative(
        a in image(1, 8, 8), b in image(1, 8, 8), c in image(1, 8, 8), d in image(1, 8, 8),
    ) {
        prop_assert!(pixel_loss_value(&a, &b, &c, &d).unwrap() >= 0.0);
        prop_assert_eq!(pixel_loss_value(&a, &a, &c, &c).unwrap(), 0.0);
        prop_assert!(tv_loss_value(&a).unwrap() >= 0.0);
        prop_assert!(patch_loss_value(&a, &b, 4, 4).unwrap() >= 0.0);
    }

    #[test]
    fn tv_ignores_a_constant_shift(x in image(2, 6, 6), shift in -0.5..0.5f64) {
        let moved = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (tv_loss_value(&x).unwrap(), tv_loss_value(&moved).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn adversarial_losses_are_non_negative(
        real in prop::collection::vec(0.01..0.99f64, 1..4),
        fake in prop::collection::vec(0.01..0.99f64, 1..4),
    ) {
        prop_assert!(adversarial_d_loss_value(&real, &fake).unwrap() >= 0.0);
        prop_assert!(adversarial_g_loss_value(&fake).unwrap() >= 0.0);
    }

    #[test]
    fn orthogonal_loss_is_non_negative(data in prop::collection::vec(-1.0..1.0f64, 12)) {
        let block = FeatureBlock::new(Tensor::from_vec(&[4, 3], data).unwrap()).unwrap();
        for variant in [OrthVariant::Literal, OrthVariant::Srip] {
            prop_assert!(orthogonal_loss_value(std::slice::from_ref(&block), variant).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_is_linear_in_weights(w in weights(), t in terms(), scale in 0.0..4.0f64) {
        let scaled = LossWeights {
            pixel: scale * w.pixel,
            patch: scale * w.patch,
            adversarial: scale * w.adversarial,
            identity: scale * w.identity,
            tv: scale * w.tv,
            orthogonal: scale * w.orthogonal,
        };
        let base = total_g_loss_value(&w, &t).unwrap();
        let got = total_g_loss_value(&scaled, &t).unwrap();
        prop_assert!((got - scale * base).abs() <= 1e-9 * (1.0 + got.abs()));
        let without_orth = LossTerms { orthogonal: None, ..t };
        let orth = t.orthogonal.map_or(0.0, |o| w.orthogonal * o);
        let rest = total_g_loss_value(&w, &without_orth).unwrap();
        prop_assert!((base - rest - orth).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn psnr_falls_as_a_uniform_error_grows(d1 in 0.001..1.0f64, d2 in 0.001..1.0f64) {
        let z = Tensor::zeros(&[1, 4, 4]);
        let p = |d: f64| psnr(&z, &Tensor::full(&[1, 4, 4], d)).unwrap();
        prop_assert!((p(d1) + 20.0 * d1.log10()).abs() < 1e-9);
        if d1 < d2 {
            prop_assert!(p(d1) > p(d2));
        }
    }

    #[test]
    fn rank1_ignores_probe_order(
        gallery in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 2..5),
        probes in prop::collection::vec((0usize..5, prop::collection::vec(-1.0..1.0f64, 3)), 1..8),
        rotate in 0usize..8,
    ) {
        let gallery: Vec<(u32, Vec<f64>)> = gallery.into_iter().enumerate().map(|(i, v)| (i as u32, v)).collect();
        let n = gallery.len();
        let mut probes: Vec<(u32, Vec<f64>)> = probes.into_iter().map(|(i, v)| ((i % n) as u32, v)).collect();
        let before = rank1_embeddings(&gallery, &probes).unwrap();
        let k = rotate % probes.len();
        probes.rotate_left(k);
        prop_assert_eq!(before, rank1_embeddings(&gallery, &probes).unwrap());
        probes.reverse();
        prop_assert_eq!(before, rank1_embeddings(&gallery, &probes).unwrap());
        prop_assert!((0.0..=100.0).contains(&before));
    }

    #[test]
    fn pixel_shuffle_round_trips(r in 1usize..4, c in 1usize..3, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let n = c * r * r * h * w;
        let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 1000.0).collect();
        let x = Tensor::from_vec(&[c * r * r, h, w], data).unwrap();
        let up = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(up.shape(), &[c, h * r, w * r][..]);
        prop_assert_eq!(pixel_unshuffle(&up, r).unwrap(), x);
    }

    #[test]
    fn bicubic_keeps_constants(v in 0.0..1.0f64, k in 1usize..5) {
        let x = Tensor::full(&[1, 8 * k, 8 * k], v);
        for ratio in [Ratio::new(1, 4), Ratio::new(4, 1)] {
            let y = bicubic_resample(&x, ratio).unwrap();
            prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn lr_never_increases(mut decays in prop::collection::vec(0usize..30, 0..4), lr in 1e-5..1e-2f64) {
        decays.sort_unstable();
        let cfg = TrainConfig { lr, decay_epochs: decays, ..TrainConfig::default() };
        prop_assert!(lr_at(0, &cfg) <= lr);
        for e in 0..30 {
            prop_assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        }
    }

    #[test]
    fn probe_sets_nest_for_any_seed(identities in 1u32..12, extra in 0usize..4, seed in any::<u64>()) {
        let yaws: Vec<i32> = [30, -30, 45, -45, 60, -60, 15, 0].iter().copied().take(4 + extra + 2).collect();
        let pool: Vec<(u32, usize, i32)> = (0..identities)
            .flat_map(|id| yaws.iter().enumerate().map(move |(k, &y)| (id, id as usize * 10 + k, y)).collect::<Vec<_>>())
            .collect();
        let ps = build_probe_sets(&pool, (30, 60), seed).unwrap();
        for i in 1..MAX_PROBE_SET {
            for (id, v) in ps.p(i) {
                prop_assert!(ps.p(i + 1)[id].starts_with(v));
            }
        }
        prop_assert_eq!(ps.len(MAX_PROBE_SET), identities as usize * MAX_PROBE_SET);
    }
}
