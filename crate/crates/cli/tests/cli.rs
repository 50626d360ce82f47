use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msam"))
        .args(args)
        .output()
        .expect("msam runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value(out: &Output, key: &str) -> f64 {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in output: {}", stdout(out)))
        .parse()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, config: &str) {
    let cfg = dir.join("scenario.json");
    fs::write(&cfg, config).unwrap();
    let out = msam(&["simulate", "--config", p(&cfg), "--seed", "3", "--out", p(&dir.join("sim"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn solve(dir: &Path, robot: u32, extra: &[&str]) -> Output {
    let sim = dir.join("sim");
    let odom = sim.join(format!("robot{robot}_odometry.csv"));
    let meas = sim.join(format!("robot{robot}_measurements.csv"));
    let out = dir.join(format!("map{robot}.json"));
    let id = robot.to_string();
    let mut args = vec!["solve", "--odom", p(&odom), "--meas", p(&meas), "--robot-id", &id, "--out", p(&out)];
    args.extend_from_slice(extra);
    msam(&args)
}

fn map_doc(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&msam(&["simulate", "--seed", "1"])), 2);
    assert_eq!(code(&msam(&["solve", "--odom", "a", "--meas", "b", "--out", "c", "--bogus"])), 2);
    assert_eq!(code(&msam(&["frobnicate"])), 2);
    assert_eq!(code(&msam(&["merge", "--robot1", "only-one", "--robot2", "a,b", "--prior", "x", "--out", "y"])), 2);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sensor_range": -1}"#).unwrap();
    let out = msam(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&msam(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))])), 2);
    let missing = msam(&["solve", "--odom", "/nonexistent/o.csv", "--meas", "/nonexistent/m.csv", "--out", "x.json"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn simulate_is_deterministic_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "{}");
    let again = dir.path().join("again");
    fs::create_dir(&again).unwrap();
    simulate(&again, "{}");
    for name in [
        "robot1_odometry.csv",
        "robot1_measurements.csv",
        "robot2_odometry.csv",
        "robot2_measurements.csv",
        "ground_truth.json",
    ] {
        let a = fs::read(dir.path().join("sim").join(name)).unwrap();
        let b = fs::read(again.join("sim").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim/ground_truth.json")).unwrap()).unwrap();
    assert!((truth["origin_distance_m"].as_f64().unwrap() - 38.0).abs() < 0.5);

    let svg = dir.path().join("map1.svg");
    let out = solve(dir.path(), 1, &["--svg", p(&svg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(value(&out, "iterations") >= 1.0);
    assert!(dir.path().join("map1.json").exists() && svg.exists());
    assert_eq!(map_doc(&dir.path().join("map1.json"))["converged"], true);
}

#[test]
fn noiseless_simulation_solves_to_zero_residual() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), r#"{"noise":{"sigma_odom":[0,0,0],"sigma_meas":[0,0]}}"#);
    let out = solve(dir.path(), 1, &[]);
    assert_eq!(code(&out), 0);
    let residual = value(&out, "final_residual");
    assert!(residual < 1e-10, "{residual}");
}

#[test]
fn iteration_cap_exits_with_three_and_writes_best() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "{}");
    let out = solve(dir.path(), 1, &["--max-iterations", "1"]);
    assert_eq!(code(&out), 3);
    assert_eq!(map_doc(&dir.path().join("map1.json"))["converged"], false);
}

#[test]
fn align_identical_maps_is_identity_and_needs_shared_tags() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "{}");
    assert_eq!(code(&solve(dir.path(), 1, &[])), 0);
    let map = dir.path().join("map1.json");
    let tf = dir.path().join("tf.json");
    let out = msam(&["align", "--map1", p(&map), "--map2", p(&map), "--seed", "1", "--out", p(&tf)]);
    assert_eq!(code(&out), 0);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&tf).unwrap()).unwrap();
    for key in ["theta", "t_x", "t_y", "mean_inlier_error_m"] {
        assert!(doc[key].as_f64().unwrap().abs() < 1e-9, "{key}: {}", doc[key]);
    }
    let text = fs::read_to_string(&tf).unwrap();
    let order: Vec<usize> = ["\"theta\"", "\"t_x\"", "\"t_y\"", "\"inliers\"", "\"mean_inlier_error_m\""]
        .iter()
        .map(|k| text.find(k).unwrap())
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{text}");

    let lonely = dir.path().join("lonely.json");
    fs::write(
        &lonely,
        r#"{"robots":[{"id":9,"poses":[[0,0,0]]}],"landmarks":[{"tag_id":999,"x":1,"y":2}],"origin_distance_m":0}"#,
    )
    .unwrap();
    let out = msam(&["align", "--map1", p(&map), "--map2", p(&lonely), "--out", p(&dir.path().join("no.json"))]);
    assert_eq!(code(&out), 4);
    assert!(!dir.path().join("no.json").exists());
}

#[test]
fn self_merge_keeps_landmarks_and_lists_each_tag_once() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "{}");
    assert_eq!(code(&solve(dir.path(), 1, &[])), 0);
    let tf = dir.path().join("identity.json");
    fs::write(&tf, r#"{"theta":0,"t_x":0,"t_y":0}"#).unwrap();
    let sim = dir.path().join("sim");
    let pair = format!(
        "{},{}",
        p(&sim.join("robot1_odometry.csv")),
        p(&sim.join("robot1_measurements.csv"))
    );
    let global = dir.path().join("global.json");
    let svg = dir.path().join("global.svg");
    let out = msam(&[
        "merge", "--robot1", &pair, "--robot2", &pair, "--prior", p(&tf), "--out", p(&global), "--svg", p(&svg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(svg.exists());
    assert!(value(&out, "origin_distance_m") < 1e-6);

    let local = map_doc(&dir.path().join("map1.json"));
    let merged = map_doc(&global);
    let (a, b) = (local["landmarks"].as_array().unwrap(), merged["landmarks"].as_array().unwrap());
    assert_eq!(a.len(), b.len());
    let mut tags = std::collections::BTreeSet::new();
    for (u, v) in a.iter().zip(b) {
        assert_eq!(u["tag_id"], v["tag_id"]);
        assert!(tags.insert(v["tag_id"].as_u64().unwrap()));
        for k in ["x", "y"] {
            assert!((u[k].as_f64().unwrap() - v[k].as_f64().unwrap()).abs() < 1e-6);
        }
    }
    assert_eq!(merged["robots"].as_array().unwrap().len(), 2);
}
