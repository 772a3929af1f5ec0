use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use factorized_nerf::metrics::{psnr, storage_report};
use factorized_nerf::persistence::{load, save};
use factorized_nerf::rendering::{render_image, Camera, RenderSettings};
use factorized_nerf::scenes::{load_external, oracle_render, AnalyticField, SceneDataset, View};
use factorized_nerf::trainer::{evaluate_scene, EvalSet};
use factorized_nerf::{train_stage, Error, FactorizedModel, Model, Prng, Result, Scalar};
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::files::{
    builtin_dataset, builtin_name, ensure_unlocked, remove_stage_records, BuiltinData, StageRecord, TrainingLock,
};
use crate::ConfigArgs;

const ORACLE_SAMPLES: usize = 256;

fn run_config(args: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn require_model(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Format(format!("{}: no model file; create one with `fnerf init`", path.display())));
    }
    Ok(())
}

pub fn init(out: &Path, force: bool, args: &ConfigArgs, seed: Option<u64>) -> Result<()> {
    let cfg = run_config(args, seed)?;
    if out.exists() && !force {
        return Err(Error::Format(format!("{} exists; pass --force to replace it", out.display())));
    }
    ensure_unlocked(out)?;
    let model = Model::new(cfg.model.clone(), &mut Prng::new(cfg.seed))?;
    save(&model, out)?;
    remove_stage_records(out, 0)?;
    let report = storage_report(&model);
    println!(
        "created {}: {} shared parameters, {} bytes",
        out.display(),
        model.count_parameters().shared(),
        report.total_bytes
    );
    Ok(())
}

/// Test views of an already trained scene, or `None` with a warning.
fn stored_test_views(
    record: Option<&StageRecord>,
    scene_id: &str,
    stage: usize,
    data_root: Option<&Path>,
) -> Option<Vec<View>> {
    let attempt = || -> Result<Option<SceneDataset>> {
        if let Some(r) = record {
            if let (Some(name), Some(data)) = (builtin_name(&r.source), &r.builtin) {
                return builtin_dataset(name, r.seed, stage, data).map(Some);
            }
        }
        if let Some(root) = data_root {
            let dir = root.join(scene_id);
            if dir.is_dir() {
                return load_external(&dir).map(Some);
            }
        }
        match record.map(|r| PathBuf::from(&r.source)) {
            Some(dir) if dir.is_dir() => load_external(&dir).map(Some),
            _ => Ok(None),
        }
    };
    match attempt() {
        Ok(Some(d)) => Some(d.test),
        Ok(None) => {
            log::warn!("no test views found for `{scene_id}`; skipped");
            None
        }
        Err(e) => {
            log::warn!("test views for `{scene_id}` could not be loaded ({e}); skipped");
            None
        }
    }
}

pub fn add_scene(model_path: &Path, scene_id: &str, data: &str, args: &ConfigArgs, seed: Option<u64>) -> Result<()> {
    let cfg = run_config(args, seed)?;
    require_model(model_path)?;
    let _lock = TrainingLock::acquire(model_path)?;
    match cfg.precision {
        Precision::F32 => add_scene_typed::<f32>(model_path, scene_id, data, &cfg),
        Precision::F64 => add_scene_typed::<f64>(model_path, scene_id, data, &cfg),
    }
}

fn add_scene_typed<T: Scalar>(model_path: &Path, scene_id: &str, data: &str, cfg: &RunConfig) -> Result<()> {
    let mut model: FactorizedModel<T> = load(model_path)?;
    cfg.check_model_keys(model.config())?;
    if model.scene_index(scene_id).is_ok() {
        return Err(Error::DuplicateScene(scene_id.to_string()));
    }
    let stage = model.scenes().len();
    let (dataset, builtin) = match builtin_name(data) {
        Some(name) => {
            let b = BuiltinData::from_spec(&cfg.data);
            (builtin_dataset(name, cfg.seed, stage, &b)?, Some(b))
        }
        None => (load_external(Path::new(data))?, None),
    };

    // Earlier scenes contribute test views to the report only.
    let records = StageRecord::read_all(model_path, stage)?;
    let mut eval = EvalSet::new();
    for (k, s) in model.scenes().iter().enumerate() {
        if let Some(views) = stored_test_views(records[k].as_ref(), &s.id, k, cfg.data_root.as_deref()) {
            eval.insert(&s.id, views);
        }
    }
    eval.insert(scene_id, dataset.test.clone());

    log::info!("stage {stage}: training `{scene_id}` for {} steps", cfg.train.total_steps);
    let report = train_stage(&mut model, &dataset, scene_id, &cfg.train, &eval)?;
    save(&model, model_path)?;
    let record =
        StageRecord { scene_id: scene_id.to_string(), source: data.to_string(), seed: cfg.seed, builtin, report };
    record.write(model_path, stage)?;
    print!("{}", record.report.to_table());
    println!("report: {}", crate::files::stage_path(model_path, stage).display());
    Ok(())
}

pub struct RenderArgs {
    pub model: PathBuf,
    pub scene_id: String,
    pub pose: String,
    pub size: Option<String>,
    pub samples: usize,
    pub out: PathBuf,
    pub raw: Option<PathBuf>,
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("--size", format!("expected N or WxH, got `{text}`"));
    let (w, h) = match text.split_once(['x', 'X']) {
        Some((w, h)) => (w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?),
        None => {
            let n = text.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

/// Reads 16 numbers, row-major, in any mix of whitespace, commas and brackets.
fn read_pose_matrix(path: &Path) -> Result<[[f64; 4]; 4]> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | '[' | ']'))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::ingest(path, format!("not a number: `{t}`"))))
        .collect::<Result<_>>()?;
    if values.len() != 16 {
        return Err(Error::ingest(path, format!("expected 16 matrix entries, found {}", values.len())));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, v) in values.into_iter().enumerate() {
        m[i / 4][i % 4] = v;
    }
    Ok(m)
}

pub fn render(args: &RenderArgs) -> Result<()> {
    require_model(&args.model)?;
    ensure_unlocked(&args.model)?;
    if args.samples == 0 {
        return Err(Error::config("--samples", "must be positive"));
    }
    let model: Model = load(&args.model)?;
    let stage = model.scene_index(&args.scene_id)?;
    let setup = &model.scenes()[stage].setup;
    let stored = &setup.frusta[0].intrinsics;
    let camera = match args.pose.parse::<usize>() {
        Ok(i) => setup.frusta.get(i).cloned().ok_or_else(|| {
            Error::ingest(
                &args.model,
                format!("scene `{}` has {} stored poses; index {i} is out of range", args.scene_id, setup.frusta.len()),
            )
        })?,
        Err(_) => Camera::from_matrix(&read_pose_matrix(Path::new(&args.pose))?, *stored)?,
    };
    let camera = match &args.size {
        Some(s) => {
            let (width, height) = parse_size(s)?;
            let intr = factorized_nerf::rendering::Intrinsics { width, height, fov_x: stored.fov_x };
            Camera::new(camera.rotation, camera.position, intr)?
        }
        None => camera,
    };
    let settings = RenderSettings {
        near: setup.near,
        far: setup.far,
        samples: args.samples,
        white_background: setup.white_background,
        chunk: 1024,
    };
    let net = model.materialize(&args.scene_id)?;
    let image = render_image(&net, &camera, &settings, None)?;
    image.save_png(&args.out)?;
    if let Some(raw) = &args.raw {
        image.write_float(BufWriter::new(File::create(raw)?))?;
    }
    println!("wrote {} ({}x{})", args.out.display(), image.width(), image.height());

    if let Some(record) = StageRecord::read(&args.model, stage)? {
        if let Some(field) = builtin_name(&record.source).and_then(AnalyticField::builtin) {
            let reference =
                oracle_render(&field, &camera, setup.near, setup.far, ORACLE_SAMPLES, setup.white_background)?;
            println!("PSNR against the analytic scene: {:.2} dB", psnr(&image, &reference)?);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    scene_id: String,
    /// PSNR after each stage; `None` before the scene existed or without a report.
    stage_psnr: Vec<Option<f64>>,
    /// Change from the previous stage.
    stage_delta: Vec<Option<f64>>,
    psnr: Option<f64>,
    ssim: Option<f64>,
}

#[derive(Serialize)]
struct EvalTable {
    stages: usize,
    scenes: Vec<EvalRow>,
}

impl EvalTable {
    fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<20}", "scene");
        for k in 0..self.stages {
            let _ = write!(out, " {:>16}", format!("stage {k}"));
        }
        let _ = writeln!(out, " {:>8} {:>8}", "PSNR", "SSIM");
        let num = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        for row in &self.scenes {
            let _ = write!(out, "{:<20}", row.scene_id);
            for (p, d) in row.stage_psnr.iter().zip(&row.stage_delta) {
                let cell = match (p, d) {
                    (Some(p), Some(d)) => format!("{p:.2} [{d:+.2}]"),
                    (Some(p), None) => format!("{p:.2}"),
                    _ => "-".to_string(),
                };
                let _ = write!(out, " {cell:>16}");
            }
            let _ = writeln!(out, " {:>8} {:>8}", num(row.psnr, 2), num(row.ssim, 4));
        }
        out
    }
}

pub fn eval(model_path: &Path, data_root: Option<&Path>, samples: usize, json: bool) -> Result<()> {
    require_model(model_path)?;
    ensure_unlocked(model_path)?;
    if samples == 0 {
        return Err(Error::config("--samples", "must be positive"));
    }
    let model: Model = load(model_path)?;
    let stages = model.scenes().len();
    let records = StageRecord::read_all(model_path, stages)?;
    for (k, r) in records.iter().enumerate() {
        if r.is_none() {
            log::warn!("no report for stage {k}; its column is empty");
        }
    }
    let mut scenes = Vec::with_capacity(stages);
    for (s, scene) in model.scenes().iter().enumerate() {
        let stage_psnr: Vec<Option<f64>> = records
            .iter()
            .enumerate()
            .map(|(k, r)| if k < s { None } else { r.as_ref()?.report.scene(&scene.id)?.psnr_after })
            .collect();
        let stage_delta =
            (0..stages).map(|k| if k == 0 { None } else { Some(stage_psnr[k]? - stage_psnr[k - 1]?) }).collect();
        let (psnr, ssim) = match stored_test_views(records[s].as_ref(), &scene.id, s, data_root) {
            Some(views) => {
                let (p, q) = evaluate_scene(&model, &scene.id, &views, samples)?;
                (Some(p), q)
            }
            None => (None, None),
        };
        scenes.push(EvalRow { scene_id: scene.id.clone(), stage_psnr, stage_delta, psnr, ssim });
    }
    let table = EvalTable { stages, scenes };
    if json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        print!("{}", table.to_text());
    }
    Ok(())
}

#[derive(Serialize)]
struct SizeOutput {
    #[serde(flatten)]
    report: factorized_nerf::metrics::StorageReport,
    /// `(scenes, bytes)` pairs.
    projected: Vec<(usize, usize)>,
}

pub fn size(model_path: &Path, counts: &[usize], json: bool) -> Result<()> {
    require_model(model_path)?;
    let model: Model = load(model_path)?;
    let report = storage_report(&model);
    let projected = counts.iter().map(|&n| (n, report.extrapolate(n))).collect();
    let out = SizeOutput { report, projected };
    if json {
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let r = &out.report;
    let mb = |b: usize| b as f64 / 1e6;
    println!("{:<24} {:>12}", "header", r.header_bytes);
    println!("{:<24} {:>12}", "shared", r.shared_bytes);
    for (s, bytes) in model.scenes().iter().zip(&r.per_scene_bytes) {
        println!("{:<24} {:>12}", format!("scene {}", s.id), bytes);
    }
    println!("{:<24} {:>12}  ({:.4} MB)", "total", r.total_bytes, mb(r.total_bytes));
    println!("{:<24} {:>12}", "per-scene parameters", r.per_scene_parameter_bytes);
    if r.per_scene_bytes.is_empty() {
        println!("no scenes yet; projections cover the shared part only");
    }
    for (n, bytes) in &out.projected {
        println!("{:<24} {:>12}  ({:.4} MB)", format!("projected, {n} scenes"), bytes, mb(*bytes));
    }
    Ok(())
}
