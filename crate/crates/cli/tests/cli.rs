use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aniframe"))
        .args(args)
        .env("ANIFRAME_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn run_config(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args, out)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_reports_isotropic_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("validate", &configs().join("validate_2i.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("geometry.json"));
    assert_eq!(v["tool"], "aniframe");
    assert_eq!(v["subcommand"], "validate");
    assert_eq!(v["result"]["b"], 4.0);
    assert_eq!(v["result"]["kappa"], 1.0);
    assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn pure_shear_needs_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("pure_shear.toml");
    let o = run_config("validate", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NotExpansive"));
    let f = json(&dir.path().join("failure.json"));
    assert_eq!(f["result"]["kind"], "validation");

    let o = run_config("sweep", &cfg, dir.path(), &["--unsafe-pure-shear"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sweep.csv").exists());
}

#[test]
fn bad_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[dilation]\nmatrix = [[2.0, 0.0], [0.0, 2.0]]\nbogus = 1\n").unwrap();
    let o = run_config("validate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn missing_config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("validate", &dir.path().join("nope.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run_config(
        "validate",
        &configs().join("validate_2i.toml"),
        dir.path(),
        &["--threads", "0"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_matches_golden_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("sweep", &configs().join("sweep_mexhat.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let got = fs::read(dir.path().join("sweep.csv")).unwrap();
    let want = fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sweep_mexhat.csv")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(want).unwrap());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("invert_gauss.toml");
    for d in [&a, &b] {
        let o = run_config("invert", &cfg, d.path(), &[]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["invert.json", "inverse.afmat"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    assert!(json(&a.path().join("invert.json"))["result"]["q"].as_f64().unwrap() < 1.0);
}

#[test]
fn non_contractive_gram_exits_3_with_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("wide.toml");
    // unit-width atoms on a coarse dilation overlap too much for a Neumann series
    fs::write(
        &cfg,
        "[dilation]\nmatrix = [[4.0, 0.0], [0.0, 4.0]]\n\n[generator]\nkind = \"gaussian_deriv\"\norder = [2, 0]\n\n\
         [window]\nj_range = [0, 1]\nk_box = [[-2, 2], [-2, 2]]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run_config("invert", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    let f = json(&out.join("failure.json"));
    assert_eq!(f["result"]["kind"], "numerical");
    assert!(f["result"]["error"].as_str().unwrap().starts_with("NotContractive"));
    assert!(out.join("gram.afmat").exists());
}
