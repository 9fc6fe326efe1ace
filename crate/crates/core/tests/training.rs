use std::fs;
use std::path::Path;

use avatar_core::model::AvatarModel;
use avatar_core::nnkit::Checkpoint;
use avatar_core::rig::Rig;
use avatar_core::synth::{bake_dataset, tiny, Dataset};
use avatar_core::train::{evaluate, preset, train, RunConfig, TrainError, Trainer};

const BUILD: &str = "training-tests";

fn bake(dir: &Path) -> Dataset {
    bake_dataset(&tiny(), &Rig::smpl_like(), dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn tiny_config(iters: u64) -> RunConfig {
    let mut c = preset("tiny").unwrap();
    c.optim.iterations = iters;
    c
}

#[test]
fn zero_iterations_writes_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = bake(&tmp.path().join("data"));
    let cfg = tiny_config(0);
    let report = train(&data, cfg.clone(), &tmp.path().join("run"), BUILD, |_| {}).unwrap();
    assert_eq!(report.steps, 0);
    assert!(report.last.is_none());
    let saved = Checkpoint::load(&report.checkpoint).unwrap();
    let fresh = Trainer::new(&data, cfg).unwrap().checkpoint(BUILD);
    assert_eq!(saved, fresh);
    let csv = fs::read_to_string(&report.log).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = bake(&tmp.path().join("data"));
    let mut cfg = tiny_config(40);
    cfg.optim.checkpoint_every = 20;
    let run = |name: &str, threads: usize| {
        let out = tmp.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&data, cfg.clone(), &out, BUILD, |_| {})).unwrap();
        ["loss.csv", "step_000020.ckpt", "final.ckpt"].map(|f| fs::read(out.join(f)).unwrap())
    };
    let a = run("a", 1);
    let b = run("b", 1);
    let c = run("c", 3);
    assert_eq!(a, b);
    assert_eq!(a, c);

    let mut other = cfg.clone();
    other.optim.seed = 1;
    train(&data, other, &tmp.path().join("d"), BUILD, |_| {}).unwrap();
    assert_ne!(fs::read(tmp.path().join("d/final.ckpt")).unwrap(), a[2]);
}

#[test]
fn renders_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = bake(&tmp.path().join("data"));
    let report = train(&data, tiny_config(20), &tmp.path().join("run"), BUILD, |_| {}).unwrap();
    let ck = Checkpoint::load(&report.checkpoint).unwrap();
    let render = |threads: usize| {
        let mut model = AvatarModel::from_checkpoint(&ck).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let q = data.query(17).unwrap();
            let out = model.render(&q, &data.cameras[3].camera).unwrap();
            (out.color, out.alpha)
        })
    };
    let one = render(1);
    for t in [2, 4] {
        let many = render(t);
        assert!(one.0.iter().zip(&many.0).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(one.1.iter().zip(&many.1).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn tiny_scene_gains_ten_db_in_5k_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = bake(&tmp.path().join("data"));
    let mut cfg = tiny_config(5000);
    cfg.model.gaussians = 2000;
    let cams = data.train_cameras();
    let frames: Vec<usize> = (0..data.frame_count()).step_by(3).collect();
    let mut init = Trainer::new(&data, cfg.clone()).unwrap().model;
    let before = evaluate(&mut init, &data, &cams, &frames).unwrap();
    let report = train(&data, cfg, &tmp.path().join("run"), BUILD, |_| {}).unwrap();
    let mut trained = AvatarModel::from_checkpoint(&Checkpoint::load(&report.checkpoint).unwrap()).unwrap();
    let after = evaluate(&mut trained, &data, &cams, &frames).unwrap();
    assert!(
        after.psnr >= before.psnr + 10.0,
        "train-view psnr {:.2} -> {:.2}",
        before.psnr,
        after.psnr
    );
    assert!(after.ssim > before.ssim);
}

#[test]
fn divergence_saves_the_last_good_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = bake(&tmp.path().join("data"));
    let mut cfg = tiny_config(50);
    cfg.optim.lr = avatar_core::nnkit::LearningRates::uniform(1e300);
    let out = tmp.path().join("run");
    let err = train(&data, cfg, &out, BUILD, |_| {}).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    let TrainError::NonFinite { checkpoint, step, .. } = err else {
        panic!("unexpected error kind");
    };
    assert!(step > 0);
    let ck = Checkpoint::load(&checkpoint).unwrap();
    assert_eq!(ck.step, step);
    assert!(ck.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite())));
    let rows = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(rows.lines().count() >= 2);
}

#[test]
fn ablation_is_recorded_in_checkpoint_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let data = bake(&tmp.path().join("data"));
    let mut cfg = tiny_config(0);
    cfg.ablation.set("no_lstm").unwrap();
    let report = train(&data, cfg, &tmp.path().join("run"), BUILD, |_| {}).unwrap();
    let ck = Checkpoint::load(&report.checkpoint).unwrap();
    assert_eq!(ck.metadata["ablations_active"], serde_json::json!(["no_lstm"]));
    assert_eq!(ck.config["ablation"]["no_lstm"], serde_json::json!(true));
}
