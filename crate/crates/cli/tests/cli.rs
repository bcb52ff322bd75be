use comptom_core::{make_phantom, ArrayFile, ExperimentConfig};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn comptom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comptom")).args(args).output().expect("binary runs")
}

fn shipped(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "configs", name].iter().collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_default_matches_builtin() {
    let file = ExperimentConfig::load(&shipped("default.toml")).unwrap();
    assert_eq!(file, ExperimentConfig::default());
    for name in ["sphere24.toml", "disk24.toml"] {
        ExperimentConfig::load(&shipped(name)).unwrap();
    }
}

#[test]
fn selftest_on_default_config_exits_zero() {
    let out = comptom(&["--config", s(&shipped("default.toml")), "selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let log = String::from_utf8(out.stdout).unwrap();
    assert!(log.starts_with("config_hash="));
    assert!(log.trim_end().ends_with("selftest PASS"));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("seed=7"));
}

#[test]
fn detector_inside_volume_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = std::fs::read_to_string(shipped("default.toml")).unwrap().replace("radius = 1.2", "radius = 0.6");
    let path = dir.path().join("inside.toml");
    std::fs::write(&path, cfg).unwrap();
    let out = comptom(&["--config", s(&path), "selftest"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn forward_with_mismatched_dims_names_the_axis() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("f.vol");
    assert_eq!(comptom(&["phantom", "--out", s(&vol)]).status.code(), Some(0));
    let cfg = std::fs::read_to_string(shipped("default.toml")).unwrap().replace("n = 12", "n = 10");
    let path = dir.path().join("n10.toml");
    std::fs::write(&path, cfg).unwrap();
    let out = comptom(&["--config", s(&path), "forward", "--input", s(&vol), "--out", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("volume axis x"), "{stderr}");

    let data = dir.path().join("g.cd");
    assert_eq!(comptom(&["forward", "--input", s(&vol), "--out", s(&data)]).status.code(), Some(0));
    let cfg = std::fs::read_to_string(shipped("default.toml")).unwrap().replace("n_psi = 10", "n_psi = 12");
    std::fs::write(&path, cfg).unwrap();
    let out = comptom(&["--config", s(&path), "adjoint", "--input", s(&data), "--out", s(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("cone data axis psi"));
}

#[test]
fn missing_input_is_an_io_error() {
    let out = comptom(&["forward", "--input", "/nonexistent/f.vol", "--out", "/nonexistent/g"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "bogus = 1\n").unwrap();
    assert_eq!(comptom(&["--config", s(&path), "selftest"]).status.code(), Some(2));
}

#[test]
fn phantom_file_matches_library_rasterization() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("f.vol");
    assert!(comptom(&["phantom", "--out", s(&vol)]).status.success());
    let cfg = ExperimentConfig::default();
    let spec = cfg.volume_spec().unwrap();
    let from_file = ArrayFile::read(&vol).unwrap().into_volume(&spec).unwrap();
    assert_eq!(from_file, make_phantom(&cfg.phantom(), &spec).unwrap());
    let bytes = std::fs::read(&vol).unwrap();
    assert_eq!(ArrayFile::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn pipeline_outputs_are_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let p = |n: &str| dir.path().join(format!("{tag}-{n}"));
        assert!(comptom(&["phantom", "--out", s(&p("f"))]).status.success());
        assert!(comptom(&["forward", "--input", s(&p("f")), "--out", s(&p("g"))]).status.success());
        assert!(comptom(&["adjoint", "--input", s(&p("g")), "--out", s(&p("b"))]).status.success());
        assert!(comptom(&["normal", "--input", s(&p("f")), "--out", s(&p("n"))]).status.success());
        let out = comptom(&[
            "reconstruct", "--input", s(&p("g")), "--out", s(&p("r")), "--max-iters", "5", "--truth", s(&p("f")),
            "--log", s(&p("log")),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        ["f", "g", "b", "n", "r", "log"].iter().map(|n| std::fs::read(p(n)).unwrap()).collect()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    // backprojecting data equals the normal operator
    assert_eq!(a[2], a[3]);
    let log = String::from_utf8(a[5].clone()).unwrap();
    assert!(log.starts_with("iter,residual,normal_residual,error,masked_error\n"));
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn reconstruct_flags_select_solver_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert!(comptom(&["phantom", "--out", s(&p("f"))]).status.success());
    assert!(comptom(&["forward", "--input", s(&p("f")), "--out", s(&p("g"))]).status.success());
    let out = comptom(&[
        "reconstruct", "--input", s(&p("g")), "--out", s(&p("r")), "--precond", "none", "--tol", "1e-3",
        "--max-iters", "50", "--mask", s(&p("f")), "--truth", s(&p("f")), "--log", s(&p("log")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(p("log")).unwrap();
    let last = log.lines().last().unwrap();
    let cols: Vec<&str> = last.split(',').collect();
    assert_eq!(cols.len(), 5);
    assert!(!cols[4].is_empty(), "masked error column filled");
    let bad = comptom(&["reconstruct", "--input", s(&p("g")), "--out", s(&p("r")), "--precond", "spectral"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn visibility_of_enclosing_sphere_is_full() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("vis");
    assert!(comptom(&["visibility", "--out", s(&out_path), "--n-dir", "16"]).status.success());
    let map = ArrayFile::read(&out_path).unwrap();
    assert!(map.data.iter().all(|&v| v == 1.0));
}

#[test]
fn probe_order_rejects_ladder_beyond_resolvable_band() {
    let out = comptom(&["probe-order", "--n", "16"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn probe_order_on_sphere_reports_order_minus_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("probe.csv");
    let out = comptom(&["probe-order", "--detector", "sphere", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,a_k"));
    assert_eq!(lines.count(), 4);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let slope: f64 = stderr.lines().find_map(|l| l.strip_prefix("slope=")).unwrap().parse().unwrap();
    assert!((-2.3..=-1.7).contains(&slope), "slope {slope}");
}
