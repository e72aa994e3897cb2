use std::fs;
use std::path::Path;

use superfront::losses::{l1_per_pixel, pixel_loss_value};
use superfront::model::{DiscriminatorConfig, Fusion, GeneratorConfig};
use superfront::numerics::Graph;
use superfront::synthdata::{Dataset, DatasetConfig};
use superfront::trainer::*;
use superfront::Error;

fn dataset() -> Dataset {
    Dataset::generate(&DatasetConfig {
        n_train: 2,
        n_test: 2,
        hr_size: 32,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn config() -> TrainConfig {
    let mut c = TrainConfig::smoke();
    c.generator = GeneratorConfig::tiny();
    c.discriminator = DiscriminatorConfig {
        image_channels: 1,
        channels: 2,
        hr_size: 32,
    };
    c.epochs = 2;
    c.batch = 4;
    c.eval_slice = 4;
    c.weights.identity = 0.0;
    c
}

fn item(views: &[usize]) -> Vec<BatchItem> {
    vec![BatchItem {
        views: views.to_vec(),
    }]
}

fn first_train_sample(ds: &Dataset) -> usize {
    ds.indices(superfront::synthdata::Role::Train)
        .into_iter()
        .find(|&i| ds.samples[i].yaw == 45)
        .unwrap()
}

#[test]
fn one_step_updates_generator_and_both_discriminators() {
    let ds = dataset();
    let cfg = config();
    let mut st = TrainState::initial(&cfg).unwrap();
    let before = [
        st.nets.generator.params.checksum(),
        st.nets.df.params.checksum(),
        st.nets.dp.params.checksum(),
    ];
    let ctx = StepContext::new(&ds, &cfg, None).unwrap();
    let r = train_step(
        &mut st.nets,
        &mut st.opts,
        &ctx,
        &item(&[first_train_sample(&ds)]),
        cfg.lr,
        0,
    )
    .unwrap();
    let after = [
        st.nets.generator.params.checksum(),
        st.nets.df.params.checksum(),
        st.nets.dp.params.checksum(),
    ];
    for (b, a) in before.iter().zip(&after) {
        assert_ne!(b, a);
    }
    assert!(r.total.is_finite() && r.d_frontal > 0.0 && r.d_parsing > 0.0);
    assert_eq!(r.identity, 0.0);
    assert_eq!(r.orthogonal, None);
}

#[test]
fn discriminator_stage_is_the_only_discriminator_update() {
    let ds = dataset();
    let cfg = config();
    let a = first_train_sample(&ds);
    let mut st = TrainState::initial(&cfg).unwrap();

    // replay the discriminator stage by hand on copies
    let fake = generate_views(&st.nets.generator, &ds, &[a]).unwrap().sf;
    let masks = ds.masks_of(ds.samples[a].identity).as_array();
    let pairs = [(ds.frontal(a), &fake, masks)];
    let mut nets = st.nets.clone();
    let mut opts = st.opts.clone();
    let g_before = nets.generator.params.checksum();
    let (_, gf) = discriminator_gradients(&nets.df, &pairs).unwrap();
    opts.df.update(&mut nets.df.params, &gf, cfg.lr).unwrap();
    let (_, gp) = discriminator_gradients(&nets.dp, &pairs).unwrap();
    opts.dp.update(&mut nets.dp.params, &gp, cfg.lr).unwrap();
    assert_eq!(nets.generator.params.checksum(), g_before);

    let ctx = StepContext::new(&ds, &cfg, None).unwrap();
    train_step(&mut st.nets, &mut st.opts, &ctx, &item(&[a]), cfg.lr, 0).unwrap();
    // the generator objective leaves both discriminators exactly as their own stage did
    assert_eq!(st.nets.df.params.checksum(), nets.df.params.checksum());
    assert_eq!(st.nets.dp.params.checksum(), nets.dp.params.checksum());
}

#[test]
fn zero_adversarial_weight_still_trains_discriminators_but_ignores_them() {
    let ds = dataset();
    let mut cfg = config();
    cfg.weights.adversarial = 0.0;
    let a = first_train_sample(&ds);
    let base = TrainState::initial(&cfg).unwrap();
    let mut other = base.clone();
    let seeded = TrainState::initial(&TrainConfig {
        seed: 99,
        ..cfg.clone()
    })
    .unwrap();
    other.nets.df = seeded.nets.df.clone();
    other.nets.dp = seeded.nets.dp.clone();

    let ctx = StepContext::new(&ds, &cfg, None).unwrap();
    let mut x = base.clone();
    train_step(&mut x.nets, &mut x.opts, &ctx, &item(&[a]), cfg.lr, 0).unwrap();
    let mut y = other.clone();
    train_step(&mut y.nets, &mut y.opts, &ctx, &item(&[a]), cfg.lr, 0).unwrap();
    assert_ne!(x.nets.df.params.checksum(), base.nets.df.params.checksum());
    assert_ne!(x.nets.dp.params.checksum(), base.nets.dp.params.checksum());
    assert_eq!(
        x.nets.generator.params.checksum(),
        y.nets.generator.params.checksum()
    );
}

#[test]
fn no_sr_supervision_drops_only_the_side_view_term() {
    let ds = dataset();
    let a = first_train_sample(&ds);
    let hp = &ds.samples[a].hp;
    let hf = ds.frontal(a);
    for flag in [false, true] {
        let mut cfg = config();
        cfg.ablation.no_sr_supervision = flag;
        let mut st = TrainState::initial(&cfg).unwrap();
        let out = generate_views(&st.nets.generator, &ds, &[a]).unwrap();
        let ctx = StepContext::new(&ds, &cfg, None).unwrap();
        let r = train_step(&mut st.nets, &mut st.opts, &ctx, &item(&[a]), cfg.lr, 0).unwrap();
        let expected = if flag {
            let g = Graph::new();
            let l = l1_per_pixel(&g, g.constant(hf.clone()), g.constant(out.sf.clone())).unwrap();
            g.value(l).item()
        } else {
            pixel_loss_value(hp, &out.sp, hf, &out.sf).unwrap()
        };
        assert!(
            (r.pixel - expected).abs() < 1e-12,
            "{} vs {}",
            r.pixel,
            expected
        );
    }
}

#[test]
fn multi_image_mode_with_one_input_matches_single_image_mode() {
    let ds = dataset();
    let si = config();
    for fusion in [
        Fusion::ImageConcat,
        Fusion::FeatureFuse,
        Fusion::FeatureFuseOrth,
    ] {
        let mut mi = si.clone();
        mi.mode = Mode::Mi;
        mi.generator.fusion = fusion;
        mi.weights.orthogonal = 0.0;
        let mut a = TrainState::initial(&si).unwrap();
        let mut b = TrainState::initial(&mi).unwrap();
        assert_eq!(
            a.nets.generator.params.checksum(),
            b.nets.generator.params.checksum()
        );
        let ca = StepContext::new(&ds, &si, None).unwrap();
        let cb = StepContext::new(&ds, &mi, None).unwrap();
        let epochs_a = epoch_batches(&ds, &si, 0).unwrap();
        assert_eq!(epochs_a, epoch_batches(&ds, &mi, 0).unwrap());
        for (step, batch) in epochs_a.iter().enumerate().take(3) {
            let ra = train_step(&mut a.nets, &mut a.opts, &ca, batch, si.lr, step).unwrap();
            let rb = train_step(&mut b.nets, &mut b.opts, &cb, batch, mi.lr, step).unwrap();
            assert_eq!(ra, rb, "{fusion}");
            assert_eq!(a.nets.generator.params, b.nets.generator.params, "{fusion}");
            assert_eq!(a.nets.df.params, b.nets.df.params);
        }
    }
}

#[test]
fn identity_weight_requires_a_trained_embedder() {
    let ds = dataset();
    let mut cfg = config();
    cfg.weights.identity = 0.1;
    assert!(matches!(
        StepContext::new(&ds, &cfg, None),
        Err(Error::UntrainedEmbedder)
    ));
    let err = train(
        &cfg,
        &ds,
        None,
        &tempfile::tempdir().unwrap().path().join("run"),
        None,
    )
    .unwrap_err();
    assert!(err.to_string().contains("pretrain-embedder"));
}

#[test]
fn multi_image_batches_hold_distinct_views_of_one_identity() {
    let ds = dataset();
    let cfg = TrainConfig {
        n_inputs: 3,
        mode: Mode::Mi,
        generator: GeneratorConfig {
            fusion: Fusion::FeatureFuse,
            n_inputs: 3,
            ..config().generator
        },
        ..config()
    };
    let batches = epoch_batches(&ds, &cfg, 0).unwrap();
    for it in batches.iter().flatten() {
        assert_eq!(it.views.len(), 3);
        let s: Vec<_> = it.views.iter().map(|&i| &ds.samples[i]).collect();
        assert!(s.iter().all(|x| x.identity == s[0].identity));
        let mut yaws: Vec<i32> = s.iter().map(|x| x.yaw).collect();
        yaws.sort();
        yaws.dedup();
        assert_eq!(yaws.len(), 3);
    }
    assert_eq!(batches, epoch_batches(&ds, &cfg, 0).unwrap());
    assert_ne!(batches, epoch_batches(&ds, &cfg, 1).unwrap());
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn run_lifecycle_resume_and_corruption() {
    let ds = dataset();
    let cfg = config();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let out = train(&cfg, &ds, None, &a, None).unwrap();
    assert_eq!(out.epochs.len(), 2);
    assert_eq!(out.state.epoch, 2);
    for e in 1..=2 {
        assert!(checkpoint_path(&a, e).is_file());
    }
    assert!(!checkpoint_path(&a, 3).exists());
    assert_eq!(
        out.last_checkpoint.as_deref(),
        Some(checkpoint_path(&a, 2).as_path())
    );
    let metrics = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let records: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let steps = epoch_batches(&ds, &cfg, 0).unwrap().len();
    assert_eq!(
        records.iter().filter(|r| r["kind"] == "step").count(),
        2 * steps
    );
    let evals: Vec<_> = records.iter().filter(|r| r["kind"] == "eval").collect();
    assert_eq!(evals.len(), 3);
    assert_eq!(evals[0]["completed_epochs"], 0);
    for key in [
        "pixel",
        "patch",
        "adversarial",
        "identity",
        "tv",
        "total",
        "lr",
        "d_frontal",
        "d_parsing",
    ] {
        assert!(records[1][key].is_number(), "{key}");
    }
    assert_eq!(
        fs::read_to_string(a.join(TIMING_FILE))
            .unwrap()
            .lines()
            .count(),
        2
    );

    // same seed, fresh directory: identical bytes
    let b = tmp.path().join("b");
    train(&cfg, &ds, None, &b, None).unwrap();
    assert_eq!(read(&checkpoint_path(&a, 2)), read(&checkpoint_path(&b, 2)));
    assert_eq!(read(&a.join(METRICS_FILE)), read(&b.join(METRICS_FILE)));

    // interrupted after epoch 1, then resumed
    let c = tmp.path().join("c");
    fs::create_dir_all(c.join("checkpoints")).unwrap();
    fs::copy(checkpoint_path(&a, 1), checkpoint_path(&c, 1)).unwrap();
    fs::copy(a.join(METRICS_FILE), c.join(METRICS_FILE)).unwrap();
    let resumed = train(&cfg, &ds, None, &c, Some(&checkpoint_path(&c, 1))).unwrap();
    assert_eq!(resumed.epochs.len(), 1);
    assert_eq!(read(&checkpoint_path(&a, 2)), read(&checkpoint_path(&c, 2)));
    assert_eq!(read(&a.join(METRICS_FILE)), read(&c.join(METRICS_FILE)));

    // a different configuration refuses the checkpoint
    let other = TrainConfig {
        lr: 1e-3,
        ..cfg.clone()
    };
    let err = train(&other, &ds, None, &c, Some(&checkpoint_path(&a, 1))).unwrap_err();
    assert!(matches!(err, Error::Fingerprint(_)), "{err}");

    // a flipped byte is caught by the checksum
    let bad = tmp.path().join("bad.ckpt");
    let mut bytes = read(&checkpoint_path(&a, 1));
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&bad, bytes).unwrap();
    let err = train(&cfg, &ds, None, &tmp.path().join("d"), Some(&bad)).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");
}
