use std::path::Path;

use superfront::evaluate::*;
use superfront::model::{DiscriminatorConfig, Fusion, GeneratorConfig, ToyEmbedder};
use superfront::synthdata::{Dataset, DatasetConfig, Role};
use superfront::trainer::*;
use superfront::Error;

fn dataset() -> Dataset {
    Dataset::generate(&DatasetConfig {
        n_train: 2,
        n_test: 3,
        hr_size: 32,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn embedder() -> ToyEmbedder {
    let cfg = EmbedderTrainConfig {
        n_classes: 6,
        d1: 8,
        epochs: 2,
        hr_size: 32,
        ..EmbedderTrainConfig::default()
    };
    pretrain_embedder(&cfg).unwrap().0
}

fn config(fusion: Fusion, n: usize) -> TrainConfig {
    let mut c = TrainConfig::smoke();
    c.generator = GeneratorConfig {
        fusion,
        n_inputs: n,
        ..GeneratorConfig::tiny()
    };
    c.n_inputs = n;
    c.mode = if fusion == Fusion::Single {
        Mode::Si
    } else {
        Mode::Mi
    };
    c.discriminator = DiscriminatorConfig {
        image_channels: 1,
        channels: 2,
        hr_size: 32,
    };
    c.epochs = 1;
    c.eval_slice = 2;
    c
}

fn trained(cfg: &TrainConfig, ds: &Dataset, emb: &ToyEmbedder, dir: &Path) -> std::path::PathBuf {
    train(cfg, ds, Some(emb), dir, None)
        .unwrap()
        .last_checkpoint
        .unwrap()
}

#[test]
fn ground_truth_frontals_score_perfectly() {
    let ds = dataset();
    let emb = embedder();
    let groups: Vec<(String, Vec<Scored>)> = [15, 30]
        .iter()
        .map(|&y| {
            let items = ds
                .indices(Role::Probe)
                .into_iter()
                .filter(|&i| ds.samples[i].yaw.abs() == y)
                .map(|i| Scored {
                    anchor: i,
                    image: ds.frontal(i).clone(),
                })
                .collect();
            (y.to_string(), items)
        })
        .collect();
    let (rows, avg) = score_groups(&ds, &groups, &emb).unwrap();
    for r in rows.iter().chain([&avg]) {
        assert_eq!(r.psnr, PSNR_CAP);
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.rank1, 100.0);
    }
    assert_eq!(avg.probes, 4 * 3);
}

#[test]
fn single_image_report_by_view() {
    let ds = dataset();
    let emb = embedder();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(Fusion::Single, 1);
    let ckpt = trained(&cfg, &ds, &emb, &tmp.path().join("run"));
    let req = EvalRequest {
        mode: Mode::Si,
        fusion: Fusion::Single,
        protocol: Protocol::Views,
        seed: 0,
    };
    let out = tmp.path().join("eval");
    let rep = evaluate_model(&ckpt, &ds, &req, None, Some(&out)).unwrap();
    let labels: Vec<&str> = rep.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["15", "30", "45", "60"]);
    for r in &rep.rows {
        assert_eq!(r.probes, 3 * 2);
        assert!(r.psnr > 0.0 && r.psnr < PSNR_CAP);
        assert!(r.ssim > -1.0 && r.ssim <= 1.0);
        assert!((0.0..=100.0).contains(&r.rank1));
    }
    let mean = |f: fn(&EvalRow) -> f64| rep.rows.iter().map(f).sum::<f64>() / rep.rows.len() as f64;
    assert_eq!(rep.average.psnr, mean(|r| r.psnr));
    assert_eq!(rep.average.ssim, mean(|r| r.ssim));
    assert_eq!(rep.average.rank1, mean(|r| r.rank1));
    assert_eq!(rep.config_fingerprint, cfg.fingerprint());
    assert_eq!(rep.dataset_fingerprint, ds.fingerprint());

    let json = std::fs::read_to_string(out.join("report_views.json")).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rep);
    let table = std::fs::read_to_string(out.join("report_views.txt")).unwrap();
    assert!(table.contains("avg") && table.contains("rank-1"));

    assert_eq!(evaluate_model(&ckpt, &ds, &req, None, None).unwrap(), rep);

    let wrong = EvalRequest {
        mode: Mode::Mi,
        fusion: Fusion::FeatureFuse,
        ..req
    };
    assert!(matches!(
        evaluate_model(&ckpt, &ds, &wrong, None, None),
        Err(Error::Fingerprint(_))
    ));
}

#[test]
fn multi_image_report_by_probe_set() {
    let ds = dataset();
    let emb = embedder();
    let tmp = tempfile::tempdir().unwrap();
    for fusion in [Fusion::ImageConcat, Fusion::FeatureFuseOrth] {
        let cfg = config(fusion, 2);
        let ckpt = trained(&cfg, &ds, &emb, &tmp.path().join(fusion.to_string()));
        let req = EvalRequest {
            mode: Mode::Mi,
            fusion,
            protocol: Protocol::Probesets,
            seed: 3,
        };
        let rep = evaluate_model(&ckpt, &ds, &req, None, None).unwrap();
        let labels: Vec<&str> = rep.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["1", "2", "3", "4"]);
        assert!(rep.rows.iter().all(|r| r.probes == 3));
        assert_eq!(rep, evaluate_model(&ckpt, &ds, &req, None, None).unwrap());
        let views = evaluate_model(
            &ckpt,
            &ds,
            &EvalRequest {
                protocol: Protocol::Views,
                ..req
            },
            None,
            None,
        )
        .unwrap();
        assert_eq!(views.rows.len(), 4);
    }
}

#[test]
fn rank1_needs_an_embedder() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(Fusion::Single, 1);
    cfg.weights.identity = 0.0;
    let ckpt = train(&cfg, &ds, None, &tmp.path().join("run"), None)
        .unwrap()
        .last_checkpoint
        .unwrap();
    let req = EvalRequest {
        mode: Mode::Si,
        fusion: Fusion::Single,
        protocol: Protocol::Views,
        seed: 0,
    };
    assert!(matches!(
        evaluate_model(&ckpt, &ds, &req, None, None),
        Err(Error::UntrainedEmbedder)
    ));
    let emb = embedder();
    assert!(evaluate_model(&ckpt, &ds, &req, Some(&emb), None).is_ok());
}

#[test]
fn fit_views_cycles_and_truncates() {
    assert_eq!(fit_views(&[4, 9], 3), vec![4, 9, 4]);
    assert_eq!(fit_views(&[4, 9, 7], 2), vec![4, 9]);
    assert_eq!(fit_views(&[5], 2), vec![5, 5]);
}
