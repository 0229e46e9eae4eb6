mod common;

use common::tiny_train_config;
use defgan_core::dataio::synth_sprites;
use defgan_core::error::Error;
use defgan_core::nets::ParamStore;
use defgan_core::trainer::*;
use tempfile::TempDir;

fn sprites(n: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth_sprites(&dir.path().join("data"), n, 16, 3).unwrap();
    dir
}

fn trainer(dir: &TempDir, cfg: &TrainConfig) -> Trainer {
    let data = defgan_core::dataio::load_dataset(&dir.path().join("data"), 16, 4).unwrap();
    Trainer::new(Checkpoint::init(cfg).unwrap(), data).unwrap()
}

fn values(s: &ParamStore<f32>) -> Vec<f32> {
    s.iter()
        .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
        .collect()
}

fn all_values(ck: &Checkpoint) -> Vec<f32> {
    let b = &ck.bundle;
    [values(&b.g_def.params), values(&b.g_tex.params), values(&b.d.params)].concat()
}

#[test]
fn same_seed_same_losses() {
    let dir = sprites(12);
    let cfg = tiny_train_config(&dir.path().join("data"));
    let (mut a, mut b) = (trainer(&dir, &cfg), trainer(&dir, &cfg));
    for _ in 0..3 {
        let (ra, _) = a.train_step().unwrap();
        let (rb, _) = b.train_step().unwrap();
        for (k, v) in ra.iter() {
            assert!((v - rb.get(k).unwrap()).abs() < 1e-6, "{k}");
        }
    }
    assert_eq!(all_values(&a.state), all_values(&b.state));

    let mut other = cfg.clone();
    other.train.seed = 6;
    let (rc, _) = trainer(&dir, &other).train_step().unwrap();
    let (ra, _) = trainer(&dir, &cfg).train_step().unwrap();
    assert_ne!(rc.get("g_total"), ra.get("g_total"));
}

#[test]
fn critic_ticks_per_generator_tick() {
    let dir = sprites(8);
    for k in [1, 3] {
        let mut cfg = tiny_train_config(&dir.path().join("data"));
        cfg.train.critic_steps_per_gen_step = k;
        let mut t = trainer(&dir, &cfg);
        let (report, ticks) = t.train_step().unwrap();
        assert_eq!(
            ticks,
            StepTicks {
                critic: k as u64,
                generator: 1
            }
        );
        assert_eq!((t.state.opt_d.t, t.state.opt_g.t), (k as u64, 1));
        assert!(report.get("d_total").is_some() && report.get("g_total").is_some());
        assert!(report.totals_consistent(1e-4), "{report}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let dir = sprites(8);
    let mut cfg = tiny_train_config(&dir.path().join("data"));
    cfg.train.lr_init = 0.0;
    let mut t = trainer(&dir, &cfg);
    let before = all_values(&t.state);
    t.train_step().unwrap();
    assert_eq!(all_values(&t.state), before);
}

#[test]
fn zero_epochs_returns_initialisation() {
    let dir = sprites(4);
    let mut cfg = tiny_train_config(&dir.path().join("data"));
    cfg.train.epochs = 0;
    cfg.train.decay_start_epoch = 0;
    let out = dir.path().join("run");
    let ck = train(&cfg, &out, None).unwrap();
    assert_eq!((ck.epoch, ck.global_step), (0, 0));
    assert_eq!(all_values(&ck), all_values(&Checkpoint::init(&cfg).unwrap()));
    let saved = Checkpoint::load(&checkpoint_dir(&out, 0)).unwrap();
    assert_eq!(all_values(&saved), all_values(&ck));
    assert!(!out.join(METRICS_FILE).exists());
}

#[test]
fn checkpoint_reload_reproduces_the_next_step() {
    let dir = sprites(10);
    let cfg = tiny_train_config(&dir.path().join("data"));
    let mut t = trainer(&dir, &cfg);
    t.train_step().unwrap();
    let ck_dir = dir.path().join("ck");
    t.state.save(&ck_dir).unwrap();
    let loaded = Checkpoint::load(&ck_dir).unwrap();
    assert_eq!(all_values(&loaded), all_values(&t.state));
    assert_eq!((loaded.global_step, loaded.opt_g.t, loaded.opt_d.t), (1, 1, 2));

    let img = &t.data.images[0];
    let (x, y) = (t.data.records[0].au.clone(), t.data.records[1].au.clone());
    let a = t.state.bundle.g_comp(img, &x, &y).unwrap();
    let b = loaded.bundle.g_comp(img, &x, &y).unwrap();
    assert_eq!(a.final_image, b.final_image);

    let mut resumed = Trainer::new(loaded, t.data.clone()).unwrap();
    let (ra, _) = t.train_step().unwrap();
    let (rb, _) = resumed.train_step().unwrap();
    for (k, v) in ra.iter() {
        assert_eq!(v, rb.get(k).unwrap(), "{k}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = sprites(12);
    let data = dir.path().join("data");
    let cfg = tiny_train_config(&data);
    let full = dir.path().join("full");
    let end = train(&cfg, &full, None).unwrap();
    assert_eq!((end.epoch, end.global_step), (2, 6));
    assert!(checkpoint_dir(&full, 1).is_dir() && checkpoint_dir(&full, 2).is_dir());

    let mut first = cfg.clone();
    first.train.epochs = 1;
    first.train.decay_start_epoch = 1;
    let part = dir.path().join("part");
    train(&first, &part, None).unwrap();
    let resumed = train(&cfg, &part, Some(&checkpoint_dir(&part, 1))).unwrap();
    assert_eq!(resumed.global_step, 6);

    let a = read_metrics(&full.join(METRICS_FILE)).unwrap();
    let b = read_metrics(&part.join(METRICS_FILE)).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(b.len(), 6);
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.len(), rb.len());
        for (k, v) in ra {
            assert!((v - rb[k]).abs() < 1e-5, "step {}: {k} {v} vs {}", ra["step"], rb[k]);
        }
    }
    let (va, vb) = (all_values(&end), all_values(&resumed));
    assert!(va.iter().zip(&vb).all(|(p, q)| (p - q).abs() < 1e-5));

    let mut wrong = cfg.clone();
    wrong.train.seed += 1;
    assert!(matches!(
        train(&wrong, &part, Some(&checkpoint_dir(&part, 1))),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn metrics_log_has_one_record_per_step() {
    let dir = sprites(6);
    let mut cfg = tiny_train_config(&dir.path().join("data"));
    cfg.train.epochs = 1;
    cfg.train.decay_start_epoch = 0;
    let out = dir.path().join("run");
    train(&cfg, &out, None).unwrap();
    let recs = read_metrics(&out.join(METRICS_FILE)).unwrap();
    let steps: Vec<f64> = recs.iter().map(|r| r["step"]).collect();
    assert_eq!(steps, vec![1.0, 2.0, 3.0]);
    for r in &recs {
        for k in ["g_total", "d_total", "d_gp", "g_cyc", "lr"] {
            assert!(r.contains_key(k), "{k}");
        }
        assert_eq!(r["lr"], 1e-4);
    }
}

#[test]
fn non_finite_loss_aborts_with_the_report() {
    let dir = sprites(6);
    let cfg = tiny_train_config(&dir.path().join("data"));
    let mut t = trainer(&dir, &cfg);
    t.state.bundle.d.params.get_mut(0).fill(f32::NAN);
    let before = values(&t.state.bundle.g_def.params);
    match t.train_step() {
        Err(Error::NonFiniteLoss { step, report }) => {
            assert_eq!(step, 0);
            assert!(report.contains("d_critic"), "{report}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(values(&t.state.bundle.g_def.params), before);
}

#[test]
fn identity_cycle_at_initialisation() {
    let dir = sprites(4);
    let cfg = tiny_train_config(&dir.path().join("data"));
    let t = trainer(&dir, &cfg);
    let img = &t.data.images[2];
    let x = t.data.records[2].au.clone();
    let (fwd, back) = cycle_pass(&t.state.bundle, img, &x, &x).unwrap();
    // zero offsets keep the geometry, so each pass moves the image only
    // through the mask blend
    let max_abs = |a: &ndarray::Array3<f32>| a.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    for (r, input) in [(&fwd, img), (&back, &fwd.final_image)] {
        assert!(r.grid.offsets().iter().all(|v| *v == 0.0));
        assert_eq!(&r.deformed, input);
        let moved = max_abs(&(r.final_image.pixels() - input.pixels()));
        let bound = max_abs(&r.mask) * max_abs(&(r.texture.pixels() - input.pixels()));
        assert!(moved <= bound + 1e-6, "{moved} > {bound}");
    }
    let err = max_abs(&(back.final_image.pixels() - img.pixels()));
    assert!(err < 0.2, "{err}");
}

#[test]
fn dataset_shape_must_match_the_model() {
    let dir = sprites(4);
    let mut cfg = tiny_train_config(&dir.path().join("data"));
    cfg.model.resolution = 32;
    let data = defgan_core::dataio::load_dataset(&dir.path().join("data"), 16, 4).unwrap();
    assert!(matches!(
        Trainer::new(Checkpoint::init(&cfg).unwrap(), data),
        Err(Error::Config(_))
    ));
}
