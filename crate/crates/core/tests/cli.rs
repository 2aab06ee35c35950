//! End-to-end behavior of the command-line tool.

mod common;

use std::fs;
use std::path::Path;

use common::*;
use equiv3d::convhead::HeadParams;
use serde_json::{json, Value};

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn ok(args: &[&str]) -> Value {
    let out = run_cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("report on stdout")
}

fn gen(dir: &Path, extra: &[&str]) -> String {
    let data = dir.join("data");
    let mut args = vec!["gen-synth", "--out", data.to_str().unwrap(), "--report", "/dev/null"];
    args.extend(extra);
    let out = run_cli(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    s(&data.join("manifest.json"))
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run_cli(&[]).status.code(), Some(1));
    assert_eq!(run_cli(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run_cli(&["eval-equivariance"]).status.code(), Some(1));
    assert_eq!(run_cli(&["selfcheck", "--threads", "lots"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("none.json"));
    assert_eq!(run_cli(&["eval-equivariance", "--manifest", &missing]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run_cli(&["eval-pose", "--manifest", &s(&bad)]).status.code(), Some(2));
    let head = dir.path().join("bad.hed");
    fs::write(&head, b"HED0garbage").unwrap();
    let manifest = gen(dir.path(), &["--views", "3", "--width", "16", "--height", "16"]);
    let out = run_cli(&["eval-equivariance", "--manifest", &manifest, "--head", &s(&head)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn no_correspondences_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    // Two views at 8 px share no visible grid pixel, so there is nothing to score.
    let manifest = gen(dir.path(), &["--views", "2", "--width", "8", "--height", "8"]);
    let out = run_cli(&["eval-equivariance", "--manifest", &manifest]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no ground-truth correspondences"));
}

#[test]
fn failed_selfcheck_exits_3_and_names_the_check() {
    let out = run_cli(&["selfcheck", "--inject-fault", "smoothap-gradient"]);
    assert_eq!(out.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let failed: Vec<&str> = report["details"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == json!(false))
        .map(|c| c["check"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["smoothap-gradient"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("smoothap-gradient"));
}

#[test]
fn gen_synth_writes_one_depth_file_per_view() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), &["--views", "42", "--width", "16", "--height", "16"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["objects"][0]["views"].as_array().unwrap().len(), 42);
    let depth = fs::read_dir(dir.path().join("data/depth")).unwrap().count();
    assert_eq!(depth, 42);
    assert_eq!(m["units"], json!("meters"));
}

#[test]
fn reports_carry_hash_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), &["--views", "4", "--width", "16", "--height", "16"]);
    let a = ok(&["eval-equivariance", "--manifest", &manifest, "--gt-stride", "2"]);
    assert_eq!(a["version"], json!(env!("CARGO_PKG_VERSION")));
    assert_eq!(a["config_hash"].as_str().unwrap().len(), 64);
    let b = ok(&["eval-equivariance", "--manifest", &manifest, "--gt-stride", "2"]);
    assert_eq!(a, b);
    let c = ok(&["eval-equivariance", "--manifest", &manifest, "--gt-stride", "4"]);
    assert_ne!(a["config_hash"], c["config_hash"]);
    // The report file and stdout agree.
    let path = dir.path().join("r.json");
    run_cli(&["eval-equivariance", "--manifest", &manifest, "--gt-stride", "2", "--report", &s(&path)]);
    let from_file: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(from_file, a);
}

#[test]
fn identical_views_give_perfect_equivariance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), &["--views", "3", "--width", "24", "--height", "24", "--patch", "1"]);
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let mut twin = m["objects"][0]["views"][0].clone();
    twin["id"] = json!("twin");
    m["objects"][0]["views"] = json!([m["objects"][0]["views"][0].clone(), twin]);
    let path = Path::new(&manifest).with_file_name("twin.json");
    fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    let r = ok(&["eval-equivariance", "--manifest", &s(&path)]);
    // Zero up to the round-off of projecting a back-projected pixel.
    assert!(r["ape"].as_f64().unwrap() <= 1e-9, "{}", r["ape"]);
    for d in ["0.05", "0.1", "0.2"] {
        assert_eq!(r["pcdp"][d], json!(100.0));
    }
}

#[test]
fn zero_noise_oracle_features_match_to_within_a_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), &["--views", "6", "--width", "32", "--height", "32", "--patch", "1"]);
    let r = ok(&["eval-equivariance", "--manifest", &manifest]);
    // Predictions are pixel centers, so the residual is quantization only:
    // at most half a pixel diagonal over the 32 px side.
    let ape = r["ape"].as_f64().unwrap();
    assert!(ape <= 100.0 * 0.5f64.sqrt() / 32.0, "{ape}");
    assert_eq!(r["pcdp"]["0.05"], json!(100.0));
}

#[test]
fn reference_queries_give_perfect_pose() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), &["--views", "6", "--width", "32", "--height", "32", "--patch", "1"]);
    let r = ok(&[
        "eval-pose", "--manifest", &manifest, "--ref-views", "v000,v001,v002", "--query-views", "v000,v002",
        "--ransac-iters", "300",
    ]);
    for k in ["1cm-1deg", "3cm-3deg", "5cm-5deg"] {
        assert_eq!(r["pose_acc"][k], json!(100.0));
    }
}

#[test]
fn static_sequences_track_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &["--views", "3", "--width", "32", "--height", "32", "--patch", "1", "--track-frames", "3", "--track-queries", "5"]);
    // Softmax refinement averages over a window, so only a sharp temperature
    // pins a static point to its own pixel.
    let track = dir.path().join("data/track");
    let frames = track.join("frames");
    let mut names: Vec<_> = fs::read_dir(&frames).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    for p in &names[1..] {
        fs::copy(&names[0], p).unwrap();
    }
    let queries: Value = serde_json::from_str(&fs::read_to_string(track.join("queries.json")).unwrap()).unwrap();
    let gt: Vec<Vec<Value>> = queries
        .as_array()
        .unwrap()
        .iter()
        .map(|q| vec![json!([q["point"][0], q["point"][1], 1.0]); names.len()])
        .collect();
    let gt_path = track.join("static_gt.json");
    fs::write(&gt_path, serde_json::to_vec(&gt).unwrap()).unwrap();
    let r = ok(&[
        "eval-track", "--frames", &s(&frames), "--queries", &s(&track.join("queries.json")), "--gt", &s(&gt_path),
        "--temperature", "1e-4",
    ]);
    for k in ["aj", "delta_avg", "oa"] {
        assert_eq!(r["tracking"][k], json!(100.0), "{k}");
    }
}

#[test]
fn same_image_keypoints_transfer_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &["--views", "8", "--width", "32", "--height", "32", "--patch", "1", "--semcorr-pairs", "2"]);
    let sc = dir.path().join("data/semcorr");
    let mut pairs: Value = serde_json::from_str(&fs::read_to_string(sc.join("pairs.json")).unwrap()).unwrap();
    for p in pairs.as_array_mut().unwrap() {
        p["dst"] = p["src"].clone();
        p["dst_kpts"] = p["src_kpts"].clone();
    }
    let path = sc.join("same.json");
    fs::write(&path, serde_json::to_vec(&pairs).unwrap()).unwrap();
    let r = ok(&["eval-semcorr", "--pairs", &s(&path), "--features", &s(&sc.join("features"))]);
    for a in ["0.05", "0.1", "0.15"] {
        assert_eq!(r["pck"][a], json!(100.0));
    }
}

#[test]
fn training_checkpoints_follow_iterations_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), &["--views", "4", "--width", "24", "--height", "24", "--noise", "0.3"]);
    let d = dir.path();
    let train = |name: &str, iters: &str, seed: &str| {
        let out = d.join(name);
        let o = run_cli(&[
            "--seed", seed, "train-head", "--manifest", &manifest, "--out", &s(&out), "--iterations", iters,
            "--pixels-per-pair", "32", "--lr", "1e-3", "--report", "/dev/null",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(&out).unwrap(), out)
    };
    let (zero, _) = train("zero.hed", "0", "1");
    let channels = HeadParams::from_bytes(&zero).unwrap().in_channels().unwrap();
    assert_eq!(zero, HeadParams::zero_init(channels, 1).unwrap().to_bytes());
    let (one, one_path) = train("one.hed", "1", "1");
    assert_ne!(one, zero);
    let (again, _) = train("again.hed", "1", "1");
    assert_eq!(one, again);
    let csv = fs::read_to_string(format!("{}.loss.csv", s(&one_path))).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    let base = ok(&["eval-equivariance", "--manifest", &manifest, "--gt-stride", "2"]);
    let tuned = ok(&["eval-equivariance", "--manifest", &manifest, "--gt-stride", "2", "--head", &s(&one_path)]);
    assert_ne!(base["ape"], tuned["ape"]);
    assert_ne!(base["config_hash"], tuned["config_hash"]);
}
