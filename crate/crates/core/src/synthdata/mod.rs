//! Procedural multi-pose face dataset.

pub mod dataset;
pub mod render;

pub use dataset::{
    build_dataset, make_training_pair, quantize, Dataset, DatasetConfig, Manifest, ManifestHeader,
    ManifestRecord, Role, Sample, TrainingSample, MANIFEST_FILE,
};
pub use render::{
    render_pose, synth_parsing_masks, FaceParams, ParsingMasks, SyntheticIdentity,
    ILLUMINATION_RANGE, SUPPORTED_YAWS,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{bicubic_resample, downsample4, Ratio};

    #[test]
    fn training_pair_contract() {
        let id = SyntheticIdentity::new(0, 1);
        let s = make_training_pair(&id, 0, 0.9, 128, 1).unwrap();
        assert_eq!(s.hp, s.hf);
        assert_eq!(s.lp.shape(), &[1, 32, 32]);
        let s = make_training_pair(&id, -45, 0.9, 128, 3).unwrap();
        assert_eq!(s.lp.shape(), &[3, 32, 32]);
        assert_eq!(s.lp, downsample4(&s.hp).unwrap());
        let back = downsample4(&bicubic_resample(&s.lp, Ratio::new(4, 1)).unwrap()).unwrap();
        assert_eq!(back, s.lp);
        assert_eq!(s.hf, render_pose(&id, 0, 0.9, 128, 3).unwrap());
        assert!(make_training_pair(&id, 10, 0.9, 128, 1).is_err());
    }

    #[test]
    fn sample_counts_and_roles() {
        let cfg = DatasetConfig {
            n_train: 6,
            n_test: 4,
            illuminations: vec![0.7, 1.0],
            hr_size: 32,
            ..DatasetConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 180);
        let gallery = ds.indices(Role::Gallery);
        assert_eq!(gallery.len(), 4);
        for &i in &gallery {
            assert_eq!((ds.samples[i].yaw, ds.samples[i].illumination), (0, 1.0));
        }
        for s in &ds.samples {
            let test = cfg.test_ids().contains(&s.identity);
            assert_eq!(test, s.role != Role::Train);
        }
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(s.lp, downsample4(&s.hp).unwrap());
            let f = &ds.samples[s.frontal];
            assert_eq!(
                (f.identity, f.yaw, f.illumination),
                (s.identity, 0, s.illumination)
            );
            assert_eq!(ds.frontal(i), &f.hp);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = DatasetConfig::default();
        for cfg in [
            DatasetConfig {
                yaws: vec![15, 30],
                ..base.clone()
            },
            DatasetConfig {
                yaws: vec![0, 0],
                ..base.clone()
            },
            DatasetConfig {
                yaws: vec![0, 20],
                ..base.clone()
            },
            DatasetConfig {
                illuminations: vec![0.5],
                ..base.clone()
            },
            DatasetConfig {
                channels: 2,
                ..base.clone()
            },
            DatasetConfig {
                n_train: 0,
                n_test: 0,
                ..base.clone()
            },
        ] {
            assert!(cfg.validate().is_err(), "{:?}", cfg);
        }
    }

    /// Nearest class mean on raw frontal pixels, fitted on some illuminations
    /// and scored on others.
    #[test]
    fn identities_are_separable() {
        let n = 50;
        let fit = [0.6, 0.8, 1.0];
        let score = [0.7, 0.9];
        let ids: Vec<_> = (0..n).map(|i| SyntheticIdentity::new(21, i)).collect();
        let centroids: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                let mut acc = vec![0.0; 128 * 128];
                for &l in &fit {
                    for (a, v) in acc
                        .iter_mut()
                        .zip(render_pose(id, 0, l, 128, 1).unwrap().data())
                    {
                        *a += v / fit.len() as f64;
                    }
                }
                acc
            })
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (truth, id) in ids.iter().enumerate() {
            for &l in &score {
                let img = render_pose(id, 0, l, 128, 1).unwrap();
                let best = centroids
                    .iter()
                    .map(|c| {
                        c.iter()
                            .zip(img.data())
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                    })
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += (best == truth) as usize;
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "nearest-centroid accuracy {}", acc);
    }
}
