//! End-to-end runs of the `fnerf` binary on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

/// Small enough that a stage trains in well under a second.
const TINY: &[&str] = &[
    "layers=3",
    "width=8",
    "rank=2",
    "noise_dim=2",
    "pos_degrees=2",
    "dir_degrees=1",
    "skip_layer=2",
    "decoder_hidden=8",
    "generator_hidden=4",
    "total_steps=12",
    "warmup_steps=4",
    "new_scene_rays=8",
    "distill_rays=4",
    "distill_points=16",
    "samples_per_ray=8",
    "eval_samples=8",
    "grid_resolution=8",
    "grid_tau=0.5",
    "image_size=12",
    "train_views=2",
    "test_views=1",
    "oracle_samples=32",
];

fn fnerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fnerf")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = fnerf(args);
    assert_eq!(code(&out), 0, "fnerf {args:?}\n{}", stderr(&out));
    stdout(&out)
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    for s in TINY {
        args.extend(["--set", s]);
    }
    args
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn init(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(name);
    ok(&with_tiny(vec!["init", "--seed", "7", "--out", s(&path)]));
    path
}

fn add(model: &Path, id: &str, data: &str) -> String {
    ok(&with_tiny(vec!["add-scene", "--seed", "7", "--model", s(model), "--scene-id", id, "--data", data]))
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn init_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let a = init(dir.path(), "a.scrf");
    let b = init(dir.path(), "b.scrf");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let again = fnerf(&["init", "--out", s(&a)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    ok(&["init", "--seed", "8", "--out", s(&a), "--force"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let size = json(&ok(&["size", "--model", s(&b), "--json"]));
    assert_eq!(size["per_scene_bytes"], Value::Array(vec![]));
}

#[test]
fn invalid_values_and_unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.scrf");
    let bad = fnerf(&["init", "--out", s(&out), "--set", "rank=0"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("rank"), "{}", stderr(&bad));
    assert!(!out.exists());

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "ranks = 3\n").unwrap();
    let unknown = fnerf(&["init", "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(code(&unknown), 1);
    assert!(stderr(&unknown).contains("ranks"));

    assert_eq!(code(&fnerf(&["init"])), 1);
    assert_eq!(code(&fnerf(&["--help"])), 0);
}

#[test]
fn defaults_form_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defaults.cfg");
    std::fs::write(&cfg, ok(&["defaults"])).unwrap();
    ok(&["init", "--out", s(&dir.path().join("m.scrf")), "--config", s(&cfg)]);
}

#[test]
fn continual_session() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "m.scrf");
    let mut sizes = vec![std::fs::metadata(&model).unwrap().len()];

    add(&model, "sphere", "builtin:sphere-red");
    sizes.push(std::fs::metadata(&model).unwrap().len());
    let report = json(&std::fs::read_to_string(dir.path().join("m.scrf.stage-0.json")).unwrap());
    assert_eq!(report["scene_id"], "sphere");
    assert_eq!(report["report"]["steps"], 12);

    let before = std::fs::read(&model).unwrap();
    let dup = fnerf(&with_tiny(vec![
        "add-scene",
        "--model",
        s(&model),
        "--scene-id",
        "sphere",
        "--data",
        "builtin:boxes-rgb",
    ]));
    assert_eq!(code(&dup), 2);
    assert_eq!(std::fs::read(&model).unwrap(), before, "a refused stage leaves the file alone");
    let missing =
        fnerf(&with_tiny(vec!["add-scene", "--model", s(&model), "--scene-id", "x", "--data", "builtin:teapot"]));
    assert_eq!(code(&missing), 2);

    // Equal frusta counts and id lengths, so every record has the same size.
    add(&model, "boxes1", "builtin:boxes-rgb");
    sizes.push(std::fs::metadata(&model).unwrap().len());
    add(&model, "boxes2", "builtin:boxes-rgb");
    sizes.push(std::fs::metadata(&model).unwrap().len());
    let growth: Vec<u64> = sizes.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(growth.iter().all(|&g| g == growth[0]), "{sizes:?}");

    // The second-stage report compares the first scene before and after.
    let r1 = json(&std::fs::read_to_string(dir.path().join("m.scrf.stage-1.json")).unwrap());
    let first = &r1["report"]["scenes"][0];
    assert_eq!(first["scene_id"], "sphere");
    assert!(first["psnr_before"].is_f64() && first["psnr_after"].is_f64());

    // Rendering: every stored pose, deterministic bytes, PSNR against the analytic scene.
    for pose in ["0", "1"] {
        let a = dir.path().join(format!("a{pose}.png"));
        let b = dir.path().join(format!("b{pose}.png"));
        let text = ok(&[
            "render",
            "--model",
            s(&model),
            "--scene-id",
            "sphere",
            "--pose",
            pose,
            "--samples",
            "16",
            "--out",
            s(&a),
        ]);
        assert!(text.contains("PSNR against the analytic scene"), "{text}");
        ok(&[
            "render",
            "--model",
            s(&model),
            "--scene-id",
            "sphere",
            "--pose",
            pose,
            "--samples",
            "16",
            "--out",
            s(&b),
        ]);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
    let bad_pose = fnerf(&[
        "render",
        "--model",
        s(&model),
        "--scene-id",
        "sphere",
        "--pose",
        "9",
        "--out",
        s(&dir.path().join("x.png")),
    ]);
    assert_eq!(code(&bad_pose), 2);
    let bad_scene =
        fnerf(&["render", "--model", s(&model), "--scene-id", "nope", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&bad_scene), 2);

    let pose = dir.path().join("pose.txt");
    std::fs::write(&pose, "1 0 0 0\n0 1 0 0\n0 0 1 4\n0 0 0 1\n").unwrap();
    let raw = dir.path().join("view.f32");
    let png = dir.path().join("view.png");
    ok(&[
        "render",
        "--model",
        s(&model),
        "--scene-id",
        "boxes1",
        "--pose",
        s(&pose),
        "--size",
        "10x6",
        "--samples",
        "8",
        "--out",
        s(&png),
        "--raw",
        s(&raw),
    ]);
    assert_eq!(image_dims(&png), (10, 6));
    assert!(std::fs::metadata(&raw).unwrap().len() >= 10 * 6 * 3 * 4);

    // Evaluation: training order, deltas from the stage reports.
    let eval = json(&ok(&["eval", "--model", s(&model), "--samples", "8", "--json"]));
    assert_eq!(eval["stages"], 3);
    let rows = eval["scenes"].as_array().unwrap();
    let ids: Vec<&str> = rows.iter().map(|r| r["scene_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["sphere", "boxes1", "boxes2"]);
    for (k, row) in rows.iter().enumerate() {
        let psnr = row["stage_psnr"].as_array().unwrap();
        let delta = row["stage_delta"].as_array().unwrap();
        for stage in 0..3 {
            assert_eq!(psnr[stage].is_null(), stage < k, "row {k} stage {stage}");
            if stage > k {
                let d = delta[stage].as_f64().unwrap();
                let expect = psnr[stage].as_f64().unwrap() - psnr[stage - 1].as_f64().unwrap();
                assert!((d - expect).abs() < 1e-9);
            } else {
                assert!(delta[stage].is_null());
            }
        }
        assert!(row["psnr"].is_f64());
    }
    let table = ok(&["eval", "--model", s(&model), "--samples", "8"]);
    assert!(table.lines().next().unwrap().contains("stage 2"));
    assert!(table.contains('['), "{table}");

    // Size: agrees with the file and projects affinely.
    let size = json(&ok(&["size", "--model", s(&model), "--scenes", "1,2,3,10", "--json"]));
    assert_eq!(size["total_bytes"].as_u64().unwrap(), std::fs::metadata(&model).unwrap().len());
    let p: Vec<u64> = size["projected"].as_array().unwrap().iter().map(|v| v[1].as_u64().unwrap()).collect();
    assert_eq!(p[1] - p[0], p[2] - p[1]);
    assert_eq!(p[3] - p[0], 9 * (p[1] - p[0]));
}

#[test]
fn single_scene_eval_has_no_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "m.scrf");
    add(&model, "only", "builtin:sphere-red");
    let table = ok(&["eval", "--model", s(&model), "--samples", "8"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "{table}");
    assert!(!table.contains('['));
    assert!(lines[1].starts_with("only"));
}

#[test]
fn external_datasets_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "m.scrf");
    let data = dir.path().join("data").join("ext");
    let spec = factorized_nerf::scenes::DatasetSpec {
        image_size: 12,
        train_views: 2,
        test_views: 1,
        oracle_samples: 32,
        ..Default::default()
    };
    let field = factorized_nerf::scenes::AnalyticField::boxes_rgb();
    let set = factorized_nerf::scenes::make_dataset("ext", &field, &spec, &mut factorized_nerf::Prng::new(1)).unwrap();
    factorized_nerf::scenes::export(&set, &data).unwrap();
    add(&model, "ext", s(&data));
    let eval = json(&ok(&["eval", "--model", s(&model), "--samples", "8", "--json"]));
    assert!(eval["scenes"][0]["psnr"].is_f64());

    // Without its images the scene is skipped, not fatal.
    std::fs::remove_dir_all(&data).unwrap();
    let eval = json(&ok(&["eval", "--model", s(&model), "--samples", "8", "--json"]));
    assert!(eval["scenes"][0]["psnr"].is_null());
    assert!(eval["scenes"][0]["stage_psnr"][0].is_f64());
}

#[test]
fn a_held_lock_blocks_other_commands() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "m.scrf");
    std::fs::write(dir.path().join("m.scrf.lock"), "").unwrap();
    let out =
        fnerf(&with_tiny(vec!["add-scene", "--model", s(&model), "--scene-id", "a", "--data", "builtin:sphere-red"]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lock"));
    assert_eq!(code(&fnerf(&["eval", "--model", s(&model)])), 2);
}

#[test]
fn model_keys_cannot_change_after_init() {
    let dir = tempfile::tempdir().unwrap();
    let model = init(dir.path(), "m.scrf");
    let mut args =
        with_tiny(vec!["add-scene", "--model", s(&model), "--scene-id", "a", "--data", "builtin:sphere-red"]);
    args.extend(["--set", "width=16"]);
    let out = fnerf(&args);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("width"));
}

#[test]
fn full_shape_projection_grows_by_a_few_kilobytes_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("full.scrf");
    let shape = [
        "layers=9",
        "width=256",
        "rank=21",
        "noise_dim=16",
        "pos_degrees=10",
        "dir_degrees=4",
        "skip_layer=5",
        "decoder_hidden=128",
        "generator_hidden=64",
    ];
    let run = [
        "total_steps=2",
        "warmup_steps=1",
        "new_scene_rays=4",
        "samples_per_ray=4",
        "eval_samples=4",
        "image_size=4",
        "train_views=1",
        "test_views=1",
        "oracle_samples=8",
    ];
    let mut args = vec!["init", "--out", s(&model)];
    shape.iter().for_each(|kv| args.extend(["--set", kv]));
    ok(&args);
    let mut args = vec!["add-scene", "--model", s(&model), "--scene-id", "s", "--data", "builtin:sphere-red"];
    run.iter().for_each(|kv| args.extend(["--set", kv]));
    ok(&args);
    let size = json(&ok(&["size", "--model", s(&model), "--scenes", "1,8", "--json"]));
    // L·(Z + K²) = 4113 scalars at four bytes each.
    assert_eq!(size["per_scene_parameter_bytes"], 4 * 4113);
    let p: Vec<f64> = size["projected"].as_array().unwrap().iter().map(|v| v[1].as_f64().unwrap()).collect();
    let growth_mb = (p[1] - p[0]) / 1e6;
    assert!((0.115..0.13).contains(&growth_mb), "{growth_mb}");
}

fn image_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    // PNG IHDR: width and height are the big-endian words at bytes 16..24.
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}
