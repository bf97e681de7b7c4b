use std::path::Path;
use std::process::{Command, Output};

fn gpdbn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpdbn"))
        .args(args)
        .current_dir(cwd)
        .env("GPDBN_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(gpdbn(&["--help"], dir.path()));
    for cmd in ["train", "sample", "project", "eval", "interp", "export-manifold", "serve", "gen-stars"] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
    assert!(gpdbn(&["train", "--help"], dir.path()).status.success());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gpdbn(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(gpdbn(&["train", "--data", "stars"], dir.path()).status.code(), Some(2));
    let o = gpdbn(&["train", "--data", "nowhere", "--out", "m.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs_write(&dir.path().join("bad.ckpt"), b"not a checkpoint");
    let o = gpdbn(&["sample", "--model", "bad.ckpt", "--at", "0,0", "--out", "s.pgm"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

fn fs_write(p: &Path, b: &[u8]) {
    std::fs::write(p, b).unwrap();
}

#[test]
fn gen_stars_writes_thirty_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(gpdbn(&["gen-stars", "--out", "frames"], dir.path()));
    assert!(out.contains("wrote 30 images"));
    let n = std::fs::read_dir(dir.path().join("frames"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(n, 30);
}

const TRAIN: &[&str] = &[
    "train", "--data", "frames", "--arch", "4,6,8", "--iters", "20", "--lr", "0.01", "--log-every", "10", "--seed", "7",
];

#[test]
fn train_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(gpdbn(&["gen-stars", "--size", "8", "--out", "frames"], dir.path()));
    let log = ok(gpdbn(&[TRAIN, &["--out", "m.ckpt"]].concat(), dir.path()));
    let lines: Vec<&str> = log.lines().filter(|l| l.starts_with("iter=")).collect();
    assert_eq!(lines.len(), 3);
    for key in ["total=", "data=", "joint=", "complexity=", "prior=", "ms="] {
        assert!(lines[0].contains(key), "{key} missing from {}", lines[0]);
    }
    let out = ok(gpdbn(&["sample", "--model", "m.ckpt", "--at", "-0.5,0.25", "--j", "3", "--out", "s.pgm"], dir.path()));
    assert!(out.starts_with("log_variance="));
    let pgm = std::fs::read(dir.path().join("s.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(gpdbn(&["sample", "--model", "m.ckpt", "--at", "1,2,3", "--out", "t.pgm"], dir.path()).status.code(), Some(2));

    let out = ok(gpdbn(&["project", "--model", "m.ckpt", "--image", "frames/star_00.pgm", "--restarts", "2", "--steps", "10", "--out", "p.pgm"], dir.path()));
    assert!(out.contains("ssim_recon="));
    let out = ok(gpdbn(&["interp", "--model", "m.ckpt", "--repeats", "2"], dir.path()));
    assert!(out.starts_with("ssim="));
    let out = ok(gpdbn(&["export-manifold", "--model", "m.ckpt", "--grid", "4", "--j", "2", "--out", "man.json"], dir.path()));
    assert!(out.contains("cells=16"));
    let out = ok(gpdbn(&["eval", "--model", "m.ckpt", "--test", "frames", "--limit", "2", "--restarts", "1", "--report", "r.csv"], dir.path()));
    assert!(out.starts_with("images=2 "));
    assert!(std::fs::read_to_string(dir.path().join("r.csv")).unwrap().starts_with("index,ssim_recon,ssim_noisy\n"));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    ok(gpdbn(&["gen-stars", "--size", "8", "--out", "frames"], dir.path()));
    ok(gpdbn(&[TRAIN, &["--out", "a.ckpt"]].concat(), dir.path()));
    ok(gpdbn(&[TRAIN, &["--out", "b.ckpt"]].concat(), dir.path()));
    let a = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b.ckpt")).unwrap();
    assert!(a == b, "checkpoints differ");
}

#[test]
fn sig6_formatting() {
    use gpdbn_cli::sig6;
    assert_eq!(sig6(0.123456789), "0.123457");
    assert_eq!(sig6(1234.56789), "1234.57");
    assert_eq!(sig6(-2.5), "-2.5");
    assert_eq!(sig6(3.0e7), "3.00000e7");
    assert_eq!(sig6(1.5e-7), "1.50000e-7");
    assert_eq!(sig6(0.0), "0");
}
