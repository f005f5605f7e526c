use std::path::Path;
use std::process::{Command, Output};

fn sbanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbanet")).args(args).env_remove("SBANET_SEED").output().unwrap()
}

fn sbanet_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbanet")).args(args).env("SBANET_SEED", seed).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64, size: usize) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = sbanet(&["gen", "--n", &n.to_string(), "--seed", &seed.to_string(), "--size", &size.to_string(), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    out
}

const TINY: &str = r#"{"image_size": 32, "base_channels": 8, "text_dim": 16, "guidance_dim": 16}"#;

#[test]
fn gen_is_reproducible_and_reports_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.sbds", 16, 7, 32);
    let b = gen(dir.path(), "b.sbds", 16, 7, 32);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"SBDS");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
    let o = sbanet(&["gen", "--n", "3", "--out", p(&dir.path().join("c.sbds"))]);
    assert!(text(&o.stdout).contains("wrote 3 samples"), "{}", text(&o.stdout));

    let o = sbanet(&["gen", "--n", "0", "--out", p(&dir.path().join("z.sbds"))]);
    assert_eq!(code(&o), 1);
    let o = sbanet(&["gen", "--n", "2", "--size", "2", "--out", p(&dir.path().join("z.sbds"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&sbanet(&[])), 1);
    assert_eq!(code(&sbanet(&["frobnicate"])), 1);
    assert_eq!(code(&sbanet(&["gen", "--out", "x"])), 1);
    assert_eq!(code(&sbanet(&["--help"])), 0);
}

#[test]
fn eval_stubs_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 4, 1, 32);
    let o = sbanet(&["eval", "--stub", "perfect", "--data", p(&data)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["oIoU,mIoU,Pr@0.5,Pr@0.7,Pr@0.9,n", "1.000000,1.000000,1.000000,1.000000,1.000000,4"]);

    let o = sbanet(&["eval", "--stub", "background", "--data", p(&data)]);
    assert!(text(&o.stdout).lines().nth(1).unwrap().starts_with("0.000000,0.000000,"));

    let o = sbanet(&["eval", "--ckpt", p(&dir.path().join("missing.sbck")), "--data", p(&data)]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("missing.sbck"));

    let bad = dir.path().join("bad.sbds");
    let mut bytes = std::fs::read(&data).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&bad, bytes).unwrap();
    let o = sbanet(&["eval", "--stub", "perfect", "--data", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("byte 0"), "{}", text(&o.stderr));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 4, 2, 32);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = sbanet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--epochs", "2", "--batch", "2", "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.csv", "train_steps.csv", "train_epochs.csv", "model.sbck"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let steps = std::fs::read_to_string(a.join("train_steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + 4);
    let o = sbanet(&["eval", "--ckpt", p(&a.join("model.sbck")), "--data", p(&data)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout), std::fs::read_to_string(a.join("metrics.csv")).unwrap());
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 2, 2, 32);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("z");
    let o = sbanet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--epochs", "0", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(out.join("metrics.csv").exists());
    let init = dir.path().join("init");
    let o = sbanet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&init), "--epochs", "0", "--seed", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("model.sbck")).unwrap(), std::fs::read(init.join("model.sbck")).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("train_steps.csv")).unwrap(), "step,loss\n");
}

#[test]
fn seed_precedence_is_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 2, 2, 32);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY.replace('}', r#", "seed": 5}"#)).unwrap();
    let ckpt = |args: &[&str], env: Option<&str>, out: &str| {
        let out = dir.path().join(out);
        let mut full = vec!["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--epochs", "0"];
        full.extend_from_slice(args);
        let o = match env {
            Some(e) => sbanet_env(&full, e),
            None => sbanet(&full),
        };
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        std::fs::read(out.join("model.sbck")).unwrap()
    };
    let config_only = ckpt(&[], None, "c");
    let flag5 = ckpt(&["--seed", "5"], None, "f5");
    let env9 = ckpt(&[], Some("9"), "e9");
    let flag9 = ckpt(&["--seed", "9"], None, "f9");
    let flag5_env9 = ckpt(&["--seed", "5"], Some("9"), "f5e9");
    assert_eq!(config_only, flag5);
    assert_eq!(env9, flag9);
    assert_eq!(flag5_env9, flag5);
    assert_ne!(config_only, env9);
    let o = sbanet_env(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("x")), "--epochs", "0"], "nope");
    assert_eq!(code(&o), 1);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 2, 2, 32);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"image_size": 32, "use_tcas": false}"#).unwrap();
    let o = sbanet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("use_tcas"), "{}", text(&o.stderr));
}

#[test]
fn geometry_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 2, 2, 64);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let o = sbanet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert_ne!(code(&o), 0);
    assert!(text(&o.stderr).contains("64"), "{}", text(&o.stderr));
}

#[test]
fn ablate_writes_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.sbds", 2, 2, 32);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("t3.csv");
    let plan_json = dir.path().join("t3.json");
    let o = sbanet(&[
        "ablate", "--plan", "table3", "--data", p(&data), "--out", p(&out), "--config", p(&cfg), "--epochs", "1",
        "--batch", "2", "--seeds", "0", "--plan-json", p(&plan_json),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "method,seed,Pr@0.5,Pr@0.7,Pr@0.9,oIoU,mIoU");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["LAVT (baseline)", "LAVT + DFS", "LAVT + BAM", "LAVT + TCSA", "SBANet"]);
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&plan_json).unwrap()).unwrap();
    assert_eq!(plan["variants"].as_array().unwrap().len(), 5);

    let o = sbanet(&["ablate", "--plan", "table9", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let err = text(&o.stderr);
    for name in ["table3", "table4-variants", "table4-tokens", "table5"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn gradcheck_reports_and_catches_faults() {
    let o = sbanet(&["gradcheck", "--module", "tcsa"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stdout));
    let out = text(&o.stdout);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 4);
    assert!(out.contains("max_rel_err="));

    let o = sbanet(&["gradcheck", "--module", "tensor", "--inject-fault", "matmul"]);
    assert_eq!(code(&o), 3);
    assert!(text(&o.stdout).lines().any(|l| l.starts_with("FAIL") && l.contains("matmul")));
    assert!(text(&o.stderr).contains("tensor/matmul"));

    assert_eq!(code(&sbanet(&["gradcheck", "--module", "decoder"])), 1);
    assert_eq!(code(&sbanet(&["gradcheck", "--inject-fault", "nope"])), 1);
}
