use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avatar_core::render::image_io::load_png;
use avatar_core::train::metrics::{psnr, ssim, to_display};

fn avatar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&avatar(&["synth", "--builtin", "tiny", "-o", s(&dir)]));
    dir
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn synth_writes_dataset_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let summary = ok(&avatar(&["synth", "--builtin", "tiny", "-o", s(&a)]));
    assert!(summary.contains("cameras cam0, cam1, cam2, test0"), "{summary}");
    ok(&avatar(&["synth", "--builtin", "tiny", "-o", s(&b)]));
    assert_eq!(files_under(&a), files_under(&b));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["valid"], true);
}

#[test]
fn synth_usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&avatar(&["synth", "--builtin", "tiny"])), 2);
    assert_eq!(code(&avatar(&["synth", "--builtin", "nope", "-o", s(tmp.path())])), 2);
    let script = write(&tmp.path().join("bad.json"), r#"{"subject": "x"}"#);
    assert_eq!(code(&avatar(&["synth", "--script", s(&script), "-o", s(&tmp.path().join("o"))])), 2);
}

#[test]
fn train_zero_iterations_and_ablation_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run = tmp.path().join("run");
    ok(&avatar(&[
        "train", "--preset", "tiny", "--data", s(&data), "-o", s(&run), "--iters", "0", "--ablate", "no_lstm",
    ]));
    let names: Vec<_> = files_under(&run).into_iter().map(|(p, _)| p).collect();
    assert_eq!(names, [PathBuf::from("final.ckpt"), PathBuf::from("loss.csv")]);
    let ck = avatar_core::nnkit::Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.metadata["ablations_active"], serde_json::json!(["no_lstm"]));
    assert_eq!(ck.config["ablation"]["no_lstm"], true);
    assert!(ck.build_id.starts_with("avatar-cli "));
}

#[test]
fn print_config_round_trips() {
    let out = ok(&avatar(&["train", "--preset", "tiny", "--print-config", "--seed", "9"]));
    let cfg = avatar_core::train::RunConfig::from_json(&out).unwrap();
    assert_eq!(cfg.optim.seed, 9);
    assert_eq!(cfg.optim.iterations, 300);
}

#[test]
fn config_violations_exit_2_listing_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        &tmp.path().join("c.json"),
        r#"{"optim": {"iters": 3}, "model": {"colour": 1}, "extra": true}"#,
    );
    let out = avatar(&["--config", s(&cfg), "train", "--print-config"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for k in ["optim.iters", "model.colour", "extra"] {
        assert!(err.contains(k), "{err}");
    }
    let bad = write(&tmp.path().join("v.json"), r#"{"loss": {"weights": {"mask": -1}}}"#);
    assert_eq!(code(&avatar(&["--config", s(&bad), "train", "--print-config"])), 2);
    assert_eq!(code(&avatar(&["train", "--ablate", "no_wings", "--print-config"])), 2);
    assert_eq!(code(&avatar(&["train", "--preset", "tiny", "--iters", "1"])), 2);
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = write(
        &tmp.path().join("c.json"),
        r#"{"optim": {"lr": {"network": 1e300, "gaussian_position": 1e300, "gaussian_attribute": 1e300, "latent": 1e300}}}"#,
    );
    let run = tmp.path().join("run");
    let out = avatar(&[
        "--config", s(&cfg), "train", "--preset", "tiny", "--data", s(&data), "-o", s(&run), "--iters", "20",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(run.join("last_good.ckpt").is_file());
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|r| {
            let run = tmp.path().join(r);
            ok(&avatar(&[
                "--seed", "5", "train", "--preset", "tiny", "--data", s(&data), "-o", s(&run), "--iters", "25",
            ]));
            fs::read(run.join("loss.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert!(logs[0].starts_with(b"step,frame,camera,l1,mask,percep,skin,total,psnr\n"));
}

fn last_row(csv: &str) -> (usize, String, f64) {
    let row = csv.lines().last().unwrap();
    let f: Vec<&str> = row.split(',').collect();
    (f[1].parse().unwrap(), f[2].to_string(), f[8].parse().unwrap())
}

#[test]
fn render_matches_training_log_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run = tmp.path().join("run");
    ok(&avatar(&["train", "--preset", "tiny", "--data", s(&data), "-o", s(&run), "--iters", "150"]));
    let (frame, cam, logged) = last_row(&fs::read_to_string(run.join("loss.csv")).unwrap());
    let ck = run.join("final.ckpt");
    let range = format!("{frame}:{}", frame + 1);
    let render = |out: &Path| {
        ok(&avatar(&[
            "render", "--checkpoint", s(&ck), "--data", s(&data), "--camera", &cam, "--frames", &range, "-o", s(out),
        ]));
    };
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    render(&r1);
    render(&r2);
    assert_eq!(files_under(&r1), files_under(&r2));
    let name = format!("{frame:04}.png");
    let (pred, w, h) = load_png(&r1.join(&cam).join(&name)).unwrap();
    let (gt, _, _) = load_png(&data.join("frames").join(&cam).join(&name)).unwrap();
    assert_eq!((w, h), (64, 64));
    let got = psnr(&to_display(&pred), &to_display(&gt)).unwrap();
    assert!(got >= logged - 0.1, "rendered {got:.3} dB vs logged {logged:.3} dB");
}

#[test]
fn render_novel_camera_and_pose_track() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run = tmp.path().join("run");
    ok(&avatar(&["train", "--preset", "tiny", "--data", s(&data), "-o", s(&run), "--iters", "10"]));
    let ck = run.join("final.ckpt");
    let cams = write(
        &tmp.path().join("cams.json"),
        r#"[{"name": "side", "width": 40, "height": 30, "fx": 60.0, "fy": 60.0, "cx": 20.0, "cy": 15.0,
             "W": [0, 0, -1, 0, 0, -1, 0, 0.9, -1, 0, 0, 3, 0, 0, 0, 1]}]"#,
    );
    let out = tmp.path().join("novel");
    let poses = data.join("poses.json");
    let args = [
        "render", "--checkpoint", s(&ck), "--poses", s(&poses), "--cameras", s(&cams), "--frames",
        "0:3", "-o", s(&out),
    ];
    let printed = avatar(&args);
    assert!(printed.status.success(), "{}", stderr(&printed));
    for f in 0..3 {
        let (rgb, w, h) = load_png(&out.join(format!("side/{f:04}.png"))).unwrap();
        assert_eq!((w, h), (40, 30));
        assert!(rgb.iter().any(|v| *v > 0.0));
    }
    let again = tmp.path().join("novel2");
    let mut args2 = args;
    args2[args2.len() - 1] = s(&again);
    ok(&avatar(&args2));
    assert_eq!(files_under(&out), files_under(&again));
}

#[test]
fn render_rejects_other_checkpoint_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let run = tmp.path().join("run");
    ok(&avatar(&["train", "--preset", "tiny", "--data", s(&data), "-o", s(&run), "--iters", "0"]));
    let bytes = fs::read(run.join("final.ckpt")).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    header["version"] = serde_json::json!(99);
    let mut patched = serde_json::to_vec(&header).unwrap();
    patched.extend_from_slice(&bytes[nl..]);
    let old = write(&tmp.path().join("old.ckpt"), "");
    fs::write(&old, patched).unwrap();
    let out = avatar(&["render", "--checkpoint", s(&old), "--data", s(&data), "-o", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn eval_identical_sets_hit_the_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let frames = data.join("frames");
    let out = ok(&avatar(&["eval", "--pred", s(&frames), "--gt", s(&frames)]));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["count"], 4 * 30);
    assert_eq!(report["mean"]["psnr"], 99.0);
    assert_eq!(report["mean"]["ssim"], 1.0);
}

#[test]
fn eval_mismatched_sets_exit_2_listing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let pred = tmp.path().join("pred/cam0");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(data.join("frames/cam0/0000.png"), pred.join("0000.png")).unwrap();
    fs::copy(data.join("frames/cam0/0001.png"), pred.join("extra.png")).unwrap();
    let gt = tmp.path().join("gt/cam0");
    fs::create_dir_all(&gt).unwrap();
    fs::copy(data.join("frames/cam0/0000.png"), gt.join("0000.png")).unwrap();
    fs::copy(data.join("frames/cam0/0002.png"), gt.join("0002.png")).unwrap();
    let out = avatar(&["eval", "--pred", s(&tmp.path().join("pred")), "--gt", s(&tmp.path().join("gt"))]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("cam0/0002.png") && err.contains("cam0/extra.png"), "{err}");
}

#[test]
fn eval_equals_direct_metric_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    for d in [&pred, &gt] {
        fs::create_dir_all(d.join("v")).unwrap();
    }
    let pairs = [(0, 5), (7, 8), (12, 29)];
    for (k, (a, b)) in pairs.iter().enumerate() {
        fs::copy(data.join(format!("frames/cam1/{a:04}.png")), pred.join(format!("v/{k}.png"))).unwrap();
        fs::copy(data.join(format!("frames/cam1/{b:04}.png")), gt.join(format!("v/{k}.png"))).unwrap();
    }
    let json = tmp.path().join("m.json");
    ok(&avatar(&["eval", "--pred", s(&pred), "--gt", s(&gt), "-o", s(&json)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let mut sum = 0.0;
    for k in 0..pairs.len() {
        let (p, w, h) = load_png(&pred.join(format!("v/{k}.png"))).unwrap();
        let (g, _, _) = load_png(&gt.join(format!("v/{k}.png"))).unwrap();
        let (p, g) = (to_display(&p), to_display(&g));
        let m = &report["frames"][format!("v/{k}.png")];
        assert_eq!(m["psnr"].as_f64().unwrap(), psnr(&p, &g).unwrap());
        assert_eq!(m["ssim"].as_f64().unwrap(), ssim(&p, &g, w, h).unwrap());
        sum += psnr(&p, &g).unwrap();
    }
    assert!((report["mean"]["psnr"].as_f64().unwrap() - sum / pairs.len() as f64).abs() < 1e-12);
}

#[test]
fn gradcheck_passes_and_repeats_exactly() {
    let a = ok(&avatar(&["gradcheck"]));
    let b = ok(&avatar(&["gradcheck"]));
    assert_eq!(a, b);
    let ops = a.lines().filter(|l| l.ends_with("pass")).count();
    assert!(ops >= 10, "{a}");
    assert!(a.contains(&format!("{ops} operations checked, 0 failed")));
}
