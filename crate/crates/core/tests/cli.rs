use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/city")
}

fn morphogrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphogrid"))
        .args(args)
        .env_remove("MORPHOGRID_SEED")
        .output()
        .expect("binary runs")
}

/// A copy of the fixture configuration with absolute input paths and extra
/// lines appended.
fn config(dir: &Path, extra: &str) -> PathBuf {
    let base = fs::read_to_string(fixture_dir().join("city.cfg")).unwrap();
    let mut text = String::new();
    for line in base.lines() {
        match line.split_once('=') {
            Some((k, v)) if ["osm", "buildings", "landuse", "points", "ntl", "population"].contains(&k.trim()) => {
                text.push_str(&format!("{} = {}\n", k.trim(), fixture_dir().join(v.trim()).display()));
            }
            Some((k, _)) if extra.lines().any(|l| l.split('=').next().map(str::trim) == Some(k.trim())) => {}
            _ => text.push_str(&format!("{line}\n")),
        }
    }
    text.push_str(extra);
    let path = dir.join("city.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let o = morphogrid(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn fixture_run_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("a");
    run_ok(&["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "run"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let artifacts = m["artifacts"].as_array().unwrap();
    assert!(artifacts.len() >= 6);
    assert_eq!(m["seed"], 42);
    assert!(m["inputs"]["osm"]["sha256"].as_str().unwrap().len() == 64);
    assert!(!out.join(".partial").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["-c", cfg.to_str().unwrap(), "-o", a.to_str().unwrap(), "run"]);
    run_ok(&["-c", cfg.to_str().unwrap(), "-o", b.to_str().unwrap(), "--jobs", "3", "run"]);
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    let m: Value = serde_json::from_slice(&ma).unwrap();
    for entry in m["artifacts"].as_array().unwrap() {
        let p = entry["path"].as_str().unwrap();
        assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap(), "{p}");
    }
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("s");
    let o = Command::new(env!("CARGO_BIN_EXE_morphogrid"))
        .args(["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "run"])
        .env("MORPHOGRID_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = morphogrid(&["-o", tmp.path().join("x").to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`osm`"));

    let missing = tmp.path().join("missing.cfg");
    fs::write(&missing, "osm = nowhere.osm\n").unwrap();
    let o = morphogrid(&["-c", missing.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("osm"));

    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("stages");
    let (c, o_) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    run_ok(&["-c", c, "-o", o_, "ingest"]);
    run_ok(&["-c", c, "-o", o_, "grid"]);
    let cells = out.join("cells.csv");
    let text = fs::read_to_string(&cells).unwrap();
    fs::write(&cells, text.replacen("cell_row", "cellrow", 1)).unwrap();
    let o = morphogrid(&["-c", c, "-o", o_, "classify"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cell_row"));
}

#[test]
fn failed_run_leaves_partial_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "backend = external\nexternal_probs = probs.csv\n");
    fs::write(tmp.path().join("probs.csv"), "cell_col,cell_row,p_gridiron,p_organic,p_radial,p_nopattern\n1,1,1,0,0,0\n").unwrap();
    let out = tmp.path().join("p");
    let o = morphogrid(&["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(3));
    let marker = fs::read_to_string(out.join(".partial")).unwrap();
    assert!(marker.contains("classify"), "{marker}");
    assert!(out.join("cells.csv").exists());
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn stages_run_individually() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("st");
    let (c, o_) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    run_ok(&["-c", c, "-o", o_, "ingest"]);
    run_ok(&["-c", c, "-o", o_, "grid"]);
    let o = run_ok(&["-c", c, "-o", o_, "render", "--cell", "22801,4799"]);
    let pngs: Vec<_> = fs::read_dir(out.join("crhd")).unwrap().collect();
    assert_eq!(pngs.len(), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("22801_4799"));

    let probs = tmp.path().join("p.csv");
    fs::write(
        &probs,
        "cell_col,cell_row,p_gridiron,p_organic,p_radial,p_nopattern\n22800,4798,0,1,0,0\n22801,4798,1,0,0,0\n22800,4799,0,0,0,1\n22801,4799,0.2,0.2,0.5,0.1\n",
    )
    .unwrap();
    run_ok(&["-c", c, "-o", o_, "classify", "--backend", "external", "--probs", probs.to_str().unwrap()]);
    let cats = fs::read_to_string(out.join("categories.csv")).unwrap();
    assert_eq!(cats, "cell_col,cell_row,category\n22800,4798,organic\n22800,4799,nopattern\n22801,4798,gridiron\n22801,4799,radial\n");

    let before = fs::read(out.join("extract.geojson")).unwrap();
    for stage in ["indices", "vitality", "fit", "analyze"] {
        run_ok(&["-c", c, "-o", o_, stage]);
    }
    let first = fs::read(out.join("analysis.json")).unwrap();
    run_ok(&["-c", c, "-o", o_, "analyze"]);
    assert_eq!(first, fs::read(out.join("analysis.json")).unwrap());
    assert_eq!(before, fs::read(out.join("extract.geojson")).unwrap());
}

#[test]
fn analyze_groups_by_cluster() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, seed) in [("north", 1), ("south", 2)] {
        let d = tmp.path().join(name);
        fs::create_dir_all(&d).unwrap();
        let cfg = config(&d, &format!("city = {name}\nseed = {seed}\n"));
        let out = d.join("out");
        run_ok(&["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "run"]);
        dirs.push(out);
    }
    let report_dir = tmp.path().join("report");
    let mut args = vec!["-o", report_dir.to_str().unwrap(), "analyze", "--group-by", "cluster"];
    for d in &dirs {
        args.push("--input");
        args.push(d.to_str().unwrap());
    }
    run_ok(&args);
    let r: Value = serde_json::from_str(&fs::read_to_string(report_dir.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(r["cells"], 8);
    assert_eq!(r["cities"].as_array().unwrap().len(), 2);
    let groups = r["subgroups"].as_array().unwrap();
    assert!(!groups.is_empty());
    let cities: usize = groups.iter().map(|g| g["cities"].as_array().unwrap().len()).sum();
    assert_eq!(cities, 2);
    for g in groups {
        assert!(g["fit"]["rows"].as_u64().unwrap() >= 4);
    }
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "seed = 7\ntrain.n_per_class = 10\ntrain.epochs = 1\n").unwrap();
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run_ok(&["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "train"]);
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(text.contains("true\\pred") && text.contains("nopattern") && text.contains("overall accuracy"), "{text}");
        assert!(out.join("eval.txt").exists());
        digests.push(fs::read(out.join("model.mgrd")).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn indices_min_tier_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("mt");
    let (c, o_) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    run_ok(&["-c", c, "-o", o_, "run"]);
    let ind = |text: &str| -> f64 {
        let mut lines = text.lines();
        let col = lines.next().unwrap().split(',').position(|h| h == "ind").unwrap();
        lines.map(|l| l.split(',').nth(col).unwrap().parse::<f64>().unwrap()).sum()
    };
    let all = ind(&fs::read_to_string(out.join("features.csv")).unwrap());
    run_ok(&["-c", c, "-o", o_, "indices", "--min-tier", "motorway"]);
    let major = ind(&fs::read_to_string(out.join("features.csv")).unwrap());
    assert!(major <= all, "{major} > {all}");
    let o = morphogrid(&["-c", c, "-o", o_, "indices", "--min-tier", "alley"]);
    assert_eq!(o.status.code(), Some(2));
}
