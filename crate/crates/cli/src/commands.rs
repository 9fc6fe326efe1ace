use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use avatar_core::model::{AvatarModel, FrameQuery};
use avatar_core::nnkit::{Checkpoint, NnError};
use avatar_core::render::image_io::{load_png, save_png};
use avatar_core::render::{Camera, CameraRecord};
use avatar_core::rig::{poses_from_json, Pose};
use avatar_core::synth::{self, bake_dataset, Dataset, SynthError, SynthSpec};
use avatar_core::train::config::PRESETS;
use avatar_core::train::metrics::{psnr, ssim, to_display};
use avatar_core::train::{self as training, preset, ConfigError, RunConfig, TrainError};
use avatar_core::gradcheck::run_suite;
use avatar_core::rig::Rig;
use serde::Serialize;
use serde_json::Value;

use crate::{Cli, EvalArgs, Failure, RenderArgs, SynthArgs, TrainArgs, BUILD_ID};

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let mut spec: SynthSpec = match (&a.builtin, &a.script) {
        (Some(name), None) => synth::builtin(name)
            .ok_or_else(|| usage(format!("unknown builtin {name:?}; expected one of {:?}", synth::BUILTINS)))?,
        (None, Some(path)) => SynthSpec::from_json(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        _ => return Err(usage("give exactly one of --builtin or --script")),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let summary = bake_dataset(&spec, &Rig::smpl_like(), &a.out).map_err(|e| match e {
        SynthError::Script(_) => usage(e),
        e => other(e),
    })?;
    let m = &summary.manifest;
    println!("dataset {} -> {}", m.subject, summary.root.display());
    println!("  frames {}  fps {}  size {}x{}  seed {}", m.frame_count, m.fps, m.width, m.height, m.seed);
    println!("  cameras {}", m.cameras.join(", "));
    for c in &m.clips {
        println!("  clip {} frames {}..{}", c.name, c.start, c.start + c.frames);
    }
    println!("  images {}", summary.images);
    Ok(())
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_failure(e: ConfigError) -> Failure {
    usage(e)
}

/// Preset (or defaults), then the config file, then command-line overrides.
pub fn effective_config(cli: &Cli, a: &TrainArgs) -> Result<RunConfig, Failure> {
    let base = match &a.preset {
        Some(name) => preset(name).ok_or_else(|| usage(format!("unknown preset {name:?}; expected one of {PRESETS:?}")))?,
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base).map_err(other)?;
    if let Some(path) = &cli.config {
        let patch: Value =
            serde_json::from_str(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        merge(&mut doc, patch);
    }
    let mut cfg = RunConfig::from_value(doc).map_err(config_failure)?;
    if let Some(n) = a.iters {
        cfg.optim.iterations = n;
    }
    if let Some(s) = cli.seed {
        cfg.optim.seed = s;
    }
    for name in &a.ablate {
        cfg.ablation.set(name).map_err(usage)?;
    }
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.display().to_string());
    }
    if let Some(o) = &a.out {
        cfg.output = o.display().to_string();
    }
    cfg.validate().map_err(config_failure)?;
    Ok(cfg)
}

pub fn train(cli: &Cli, a: &TrainArgs) -> Result<(), Failure> {
    let cfg = effective_config(cli, a)?;
    if a.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let dir = cfg
        .data
        .dir
        .clone()
        .ok_or_else(|| usage("no dataset: pass --data or set data.dir"))?;
    let data = Dataset::load(Path::new(&dir)).map_err(usage)?;
    let out = PathBuf::from(&cfg.output);
    let iters = cfg.optim.iterations;
    eprintln!("training {} steps on {} ({} frames) -> {}", iters, dir, data.frame_count(), out.display());
    let report = training::train(&data, cfg, &out, BUILD_ID, |r| {
        eprintln!(
            "step {:>6}/{iters}  frame {:>4}  {:<6}  loss {:.5}  psnr {:.2}",
            r.step, r.frame, data.cameras[r.camera].name, r.total, r.psnr
        );
    })
    .map_err(|e| match e {
        e if e.is_numeric() => Failure::Numeric(e.to_string()),
        TrainError::Setup(_) => usage(e),
        e => other(e),
    })?;
    println!("checkpoint {}", report.checkpoint.display());
    println!("loss log {}", report.log.display());
    if let Some(r) = report.last {
        println!("final step {} psnr {:.3}", r.step, r.psnr);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<AvatarModel, Failure> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        NnError::VersionMismatch { .. } => Failure::Version(format!("{}: {e}", path.display())),
        e => other(format!("{}: {e}", path.display())),
    })?;
    AvatarModel::from_checkpoint(&ck).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn frame_range(spec: Option<&str>, len: usize) -> Result<std::ops::Range<usize>, Failure> {
    let Some(s) = spec else {
        return Ok(0..len);
    };
    let bad = || usage(format!("--frames expects START:END within 0..{len}, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let start: usize = if a.is_empty() { 0 } else { a.parse().map_err(|_| bad())? };
    let end: usize = if b.is_empty() { len } else { b.parse().map_err(|_| bad())? };
    if start >= end || end > len {
        return Err(bad());
    }
    Ok(start..end)
}

fn save_view(out: &Path, cam: &str, frame: usize, color: &[f64], c: &Camera) -> Result<(), Failure> {
    let dir = out.join(cam);
    fs::create_dir_all(&dir).map_err(|e| other(format!("{}: {e}", dir.display())))?;
    save_png(&dir.join(format!("{frame:04}.png")), color, c.width, c.height).map_err(other)
}

pub fn render(a: &RenderArgs) -> Result<(), Failure> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    let keep = |name: &str| a.camera.is_empty() || a.camera.iter().any(|c| c == name);
    let mut written = 0;
    if let Some(dir) = &a.data {
        let data = Dataset::load(dir).map_err(usage)?;
        let frames = frame_range(a.frames.as_deref(), data.frame_count())?;
        for cam in data.cameras.iter().filter(|c| keep(&c.name)) {
            for f in frames.clone() {
                let mut q = data.query(f).map_err(other)?;
                if a.mean_latent {
                    q.latent = None;
                }
                let img = model.render(&q, &cam.camera).map_err(other)?;
                save_view(&a.out, &cam.name, f, &img.color, &cam.camera)?;
                written += 1;
            }
        }
    } else {
        let (Some(poses), Some(cams)) = (&a.poses, &a.cameras) else {
            return Err(usage("give --data, or both --poses and --cameras"));
        };
        let track: Vec<Pose> = poses_from_json(&read_text(poses)?, &model.rig).map_err(usage)?;
        let records: Vec<CameraRecord> = serde_json::from_str(&read_text(cams)?).map_err(usage)?;
        let cameras = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let c = Camera::from_record(r).map_err(|e| usage(format!("camera {i}: {e}")))?;
                Ok((r.name.clone().unwrap_or_else(|| format!("cam{i}")), c))
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let frames = frame_range(a.frames.as_deref(), track.len())?;
        for (name, cam) in cameras.iter().filter(|(n, _)| keep(n)) {
            for i in frames.clone() {
                let q = FrameQuery {
                    track: &track,
                    index: i,
                    latent: None,
                };
                let img = model.render(&q, cam).map_err(other)?;
                save_view(&a.out, name, track[i].frame, &img.color, cam)?;
                written += 1;
            }
        }
    }
    println!("rendered {written} images to {}", a.out.display());
    Ok(())
}

fn png_set(root: &Path) -> Result<BTreeSet<PathBuf>, Failure> {
    if !root.is_dir() {
        return Err(usage(format!("{} is not a directory", root.display())));
    }
    let mut set = BTreeSet::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(other)?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            set.insert(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(set)
}

#[derive(Debug, Serialize)]
struct ViewMetrics {
    psnr: f64,
    ssim: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    count: usize,
    mean: ViewMetrics,
    frames: BTreeMap<String, ViewMetrics>,
}

/// Display-encoded pixel values of a PNG, as stored.
fn load_display(path: &Path) -> Result<(Vec<f64>, usize, usize), Failure> {
    let (rgb, w, h) = load_png(path).map_err(other)?;
    Ok((to_display(&rgb), w, h))
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let pred = png_set(&a.pred)?;
    let gt = png_set(&a.gt)?;
    if pred != gt || pred.is_empty() {
        let mut msg = String::from("prediction and ground-truth file sets differ");
        for p in gt.difference(&pred) {
            msg.push_str(&format!("\n  missing from {}: {}", a.pred.display(), p.display()));
        }
        for p in pred.difference(&gt) {
            msg.push_str(&format!("\n  missing from {}: {}", a.gt.display(), p.display()));
        }
        if pred.is_empty() && gt.is_empty() {
            msg.push_str("\n  no PNG files found");
        }
        return Err(usage(msg));
    }
    let mut frames = BTreeMap::new();
    for rel in &pred {
        let (p, pw, ph) = load_display(&a.pred.join(rel))?;
        let (g, gw, gh) = load_display(&a.gt.join(rel))?;
        if (pw, ph) != (gw, gh) {
            return Err(usage(format!("{}: {pw}x{ph} vs {gw}x{gh}", rel.display())));
        }
        let m = ViewMetrics {
            psnr: psnr(&p, &g).map_err(other)?,
            ssim: ssim(&p, &g, pw, ph).map_err(other)?,
        };
        frames.insert(rel.to_string_lossy().replace('\\', "/"), m);
    }
    let n = frames.len() as f64;
    let report = EvalReport {
        count: frames.len(),
        mean: ViewMetrics {
            psnr: frames.values().map(|m| m.psnr).sum::<f64>() / n,
            ssim: frames.values().map(|m| m.ssim).sum::<f64>() / n,
        },
        frames,
    };
    let text = serde_json::to_string_pretty(&report).map_err(other)?;
    match &a.out {
        Some(path) => {
            fs::write(path, text).map_err(|e| other(format!("{}: {e}", path.display())))?;
            println!("mean psnr {:.3} ssim {:.4} over {} images", report.mean.psnr, report.mean.ssim, report.count);
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<(), Failure> {
    let reports = run_suite(seed).map_err(other)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<36} worst rel err {:.3e}  tol {:.0e}  coords {:>4}  {verdict}",
            r.name, r.worst, r.tolerance, r.checked
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    println!("{} operations checked, {} failed", reports.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Other(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
