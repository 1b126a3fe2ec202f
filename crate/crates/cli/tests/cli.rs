use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn denseloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denseloop")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
        .trim()
        .parse()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_scene(dir: &Path) {
    let cfg = dir.join("scene.cfg");
    fs::write(&cfg, "frames = 120\nlandmarks = 200\ntruth_spacing = 0.05\n").unwrap();
    let o = denseloop(&["synth", "--config", p(&cfg), "--out", p(&dir.join("ds"))]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(value(&stdout(&o), "frames"), 120.0);
}

#[test]
fn pipeline_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path());
    let run = dir.path().join("run.cfg");
    fs::write(&run, "k = 30\nhypothesis_count = 200000\n").unwrap();
    let out = dir.path().join("res");
    let o = denseloop(&["pipeline", "--dataset", p(&dir.path().join("ds")), "--config", p(&run), "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    for f in ["trajectory.txt", "keyframes.txt", "map.ply", "visibility.txt", "loops.log", "report.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(value(&report, "fragments"), 4.0);
    assert!(value(&report, "ate_final_m") <= value(&report, "ate_odometry_m") * 2.5);

    let o = denseloop(&[
        "evaluate",
        "--mode",
        "ate",
        "--estimate",
        p(&out.join("trajectory.txt")),
        "--truth",
        p(&dir.path().join("ds/groundtruth.txt")),
        "--align",
    ]);
    assert!(o.status.success());
    let ate = value(&stdout(&o), "ate_rmse");
    assert!((ate - value(&report, "ate_final_m")).abs() < 1e-9);
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path());
    let ds = dir.path().join("ds");
    let frags = dir.path().join("frags");
    let o = denseloop(&[
        "fragments",
        "--trajectory",
        p(&ds.join("odometry.txt")),
        "--clouds",
        p(&ds.join("clouds")),
        "--keyframes",
        p(&ds.join("keyframes.txt")),
        "--k",
        "30",
        "--out",
        p(&frags),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(value(&stdout(&o), "fragments"), 4.0);
    assert!(frags.join("fragment_0003.ply").exists());

    let graph = frags.join("graph.json");
    let o = denseloop(&["loops", "--frags", p(&frags), "--graph", p(&graph), "--register", "--hypotheses", "20000"]);
    assert!(o.status.success(), "{o:?}");
    let proposals = stdout(&o);
    assert!(proposals.lines().any(|l| l.starts_with("0 3 ") && l.contains("registered")), "{proposals}");

    let o = denseloop(&["verify", "--graph", p(&graph)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().any(|l| l.starts_with("0 3 ") && l.ends_with("accepted")));

    let traj = dir.path().join("pgo.txt");
    let o = denseloop(&["optimize", "--graph", p(&graph), "--out", p(&traj)]);
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert!(value(&s, "pgo_final_cost") <= value(&s, "pgo_initial_cost"));
    assert_eq!(fs::read_to_string(&traj).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 4);

    let ba = dir.path().join("ba.txt");
    let o = denseloop(&["optimize", "--ba-problem", p(&ds.join("ba.json")), "--out", p(&ba)]);
    assert!(o.status.success(), "{o:?}");
    assert!(value(&stdout(&o), "ba_rmse_px") < 2.0);

    let map = dir.path().join("corrected.ply");
    let o = denseloop(&[
        "correct-map",
        "--map",
        p(&ds.join("map.ply")),
        "--visibility",
        p(&ds.join("visibility.txt")),
        "--old",
        p(&ds.join("keyframes.txt")),
        "--new",
        p(&ds.join("keyframes.txt")),
        "--out",
        p(&map),
    ]);
    assert!(o.status.success(), "{o:?}");

    let surface = |recon: &Path| {
        let o = denseloop(&["evaluate", "--mode", "surface", "--recon", p(recon), "--truth", p(&ds.join("truth_surface.ply"))]);
        assert!(o.status.success(), "{o:?}");
        value(&stdout(&o), "mean")
    };
    assert!((surface(&map) - surface(&ds.join("map.ply"))).abs() < 1e-9);
}

#[test]
fn register_reports_transform_and_no_alignment() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path());
    let cloud = dir.path().join("ds/clouds/frame_000000.ply");
    let o = denseloop(&["register", "--source", p(&cloud), "--target", p(&cloud), "--hypotheses", "20000"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let line = stdout(&o).lines().find(|l| l.starts_with("transform ")).unwrap().to_string();
    let m: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(m.len(), 16);
    for (k, v) in m.iter().enumerate() {
        let want = if k % 5 == 0 { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 0.05, "entry {k} = {v}");
    }

    let far = dir.path().join("ds/clouds/frame_000060.ply");
    let o = denseloop(&[
        "register",
        "--source",
        p(&cloud),
        "--target",
        p(&far),
        "--hypotheses",
        "1",
        "--min-inlier-ratio",
        "0.999",
    ]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "frames = 10\nbogus = 1\n").unwrap();
    let o = denseloop(&["synth", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bogus") && err.contains('2'), "{err}");

    let o = denseloop(&["evaluate", "--mode", "ate", "--truth", "missing.txt"]);
    assert_eq!(o.status.code(), Some(1));
    let o = denseloop(&["optimize", "--out", p(&dir.path().join("t.txt"))]);
    assert_eq!(o.status.code(), Some(1));
}
