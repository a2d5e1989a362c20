use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use shapecorr::mesh::{normalize_area, save_mesh, shapes};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shapecorr"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn ok(out: Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn mesh_file(dir: &Path) -> PathBuf {
    let m = normalize_area(&shapes::humanoid(6, 1)).unwrap();
    let p = dir.join("m.off");
    save_mesh(&m, &p, None).unwrap();
    p
}

#[test]
fn self_match_needs_caches_then_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    mesh_file(d);
    let pair = ["match", "--full", "m.off", "--part", "m.off", "--k", "20", "--d", "32", "--out", "o", "--cache", "c", "--json"];

    let miss = run(d, &pair);
    assert_eq!(miss.status.code(), Some(7));
    let stderr = String::from_utf8(miss.stderr).unwrap();
    assert!(stderr.starts_with("match settings: {\"tau\":0.01,"));
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("shapecorr eig --mesh m.off --k 20 --cache c"), "{msg}");

    let eig = json_of(&run(d, &["eig", "--mesh", "m.off", "--k", "20", "--out", "c", "--json"]));
    assert_eq!(eig["summary"]["k"], 20);
    let manifest = std::fs::read(d.join("c/eig.manifest.json")).unwrap();
    let again = json_of(&run(d, &["eig", "--mesh", "m.off", "--k", "20", "--out", "c", "--json"]));
    assert_eq!(again["cache_hit"], true);
    assert_eq!(std::fs::read(d.join("c/eig.manifest.json")).unwrap(), manifest);
    let forced = json_of(&run(d, &["eig", "--mesh", "m.off", "--k", "20", "--out", "c", "--json", "--no-cache"]));
    assert_eq!(forced["cache_hit"], false);

    let miss = run(d, &pair);
    assert!(String::from_utf8_lossy(&miss.stderr).contains("shapecorr geodesics --mesh m.off"));
    ok(run(d, &["geodesics", "--mesh", "m.off", "--out", "c"]));
    let m = json_of(&run(d, &pair));
    assert!(m["summary"]["mean_error"].as_f64().unwrap() < 0.05);
    assert!(d.join("o/map.txt").exists());
    let manifest: Value = serde_json::from_slice(&std::fs::read(d.join("o/match.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tool"], "shapecorr");
    for a in manifest["artifacts"].as_array().unwrap() {
        let p = d.join(a["path"].as_str().unwrap());
        assert_eq!(shapecorr::cli::sha256_file(&p).unwrap(), a["sha256"].as_str().unwrap());
    }

    let human = run(d, &["eval", "--pred", "o/map.txt", "--gt", "o/map.txt", "--mesh", "m.off", "--out", "e", "--cache", "c"]);
    assert!(human.status.success());
    assert!(String::from_utf8_lossy(&human.stdout).contains("mean_error: 0"));
    assert!(d.join("e/pck.csv").exists());

    let rep = json_of(&run(d, &["report", "--out", "o", "--json"]));
    assert_eq!(rep["summary"]["runs"], 1);
}

#[test]
fn seeded_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    mesh_file(d);
    for o in ["a", "b"] {
        json_of(&run(d, &["gen-partial", "--mesh", "m.off", "--holes", "2,0.15", "--seed", "4", "--out", o, "--json"]));
    }
    for f in ["full.off", "part.off", "gt.txt", "meta.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let other = json_of(&run(d, &["gen-partial", "--mesh", "m.off", "--holes", "2,0.15", "--seed", "5", "--out", "c", "--json"]));
    assert!(other["summary"]["part_vertices"].as_u64().is_some());

    for o in ["a", "b"] {
        let cut = json_of(&run(d, &["gen-partial", "--mesh", "m.off", "--plane-missing", "1,0,0,0.3", "--out", o, "--json"]));
        assert!((cut["summary"]["area_fraction"].as_f64().unwrap() - 0.7).abs() < 0.05);
        let train = json_of(&run(d, &[
            "train", "--full", "a/full.off", "--part", "a/part.off", "--gt", "a/gt.txt", "--k", "16", "--d", "24",
            "--iterations", "12", "--seed", "3", "--no-cache", "--out", &format!("{o}/t"), "--json",
        ]));
        assert_eq!(train["summary"]["iterations"], 12);
    }
    for f in ["features_x.bin", "features_y.bin", "losses.csv", "map.txt", "report.json", "eval.json"] {
        assert_eq!(std::fs::read(d.join("a/t").join(f)).unwrap(), std::fs::read(d.join("b/t").join(f)).unwrap(), "{f}");
    }

    let refine = json_of(&run(d, &[
        "refine", "--full", "a/full.off", "--part", "a/part.off", "--gt", "a/gt.txt", "--fx", "a/t/features_x.bin",
        "--fy", "a/t/features_y.bin", "--k", "16", "--no-cache", "--out", "r", "--json",
    ]));
    assert_eq!(refine["summary"]["iterations"], 15);
}

#[test]
fn sweep_and_fm_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let m = normalize_area(&shapes::humanoid(9, 2)).unwrap();
    save_mesh(&m, &d.join("m.off"), None).unwrap();
    ok(run(d, &["eig", "--mesh", "m.off", "--k", "30"]));
    let s = json_of(&run(d, &["sweep", "--mesh", "m.off", "--fractions", "0.1,0.25,0.5", "--seed", "1", "--json"]));
    assert_eq!(s["summary"]["strictly_increasing"], true);
    let csv = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    ok(run(d, &["gen-partial", "--mesh", "m.off", "--plane", "0,1,0,0", "--out", "p"]));
    ok(run(d, &["eig", "--mesh", "p/full.off", "--k", "20", "--cache", "."]));
    ok(run(d, &["eig", "--mesh", "p/part.off", "--k", "20", "--cache", "."]));
    let f = json_of(&run(d, &[
        "fm-analyze", "--full", "p/full.off", "--part", "p/part.off", "--gt", "p/gt.txt", "--k", "20", "--out", "f",
        "--cache", ".", "--json",
    ]));
    assert!(f["summary"]["relative_error"].as_f64().unwrap() > 0.0);
    for file in ["total.csv", "ideal.csv", "error.csv", "decomposition.json"] {
        assert!(d.join("f").join(file).exists());
    }
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    mesh_file(d);
    assert_eq!(run(d, &["eig", "--mesh", "m.off", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d, &["gen-partial", "--mesh", "m.off"]).status.code(), Some(2));
    let missing = run(d, &["eig", "--mesh", "nope.off"]);
    assert_eq!(missing.status.code(), Some(8));
    std::fs::write(d.join(".shapecorr.lock"), "1").unwrap();
    assert_eq!(run(d, &["geodesics", "--mesh", "m.off"]).status.code(), Some(7));
}
