use sgareg_core::io;
use sgareg_core::{NetworkConfig, RegistrationModel};
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "stages=2",
    "--set", "channels=3,4",
    "--set", "stride_k=1,1",
    "--set", "bottleneck_d=4",
    "--set", "ffn_expansion=2",
    "--set", "lncc_window=3",
];

fn sgareg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgareg")).args(args).output().expect("spawn sgareg")
}

fn ok(args: &[&str]) -> String {
    let out = sgareg(args);
    assert!(out.status.success(), "sgareg {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, pairs: &str) {
    ok(&["gen-data", "--seed", "3", "--dims", "8", "--pairs", pairs, "--out", s(dir), "--amplitude", "1.5", "--smoothness", "2"]);
}

fn tiny_config() -> NetworkConfig {
    let mut c = NetworkConfig::default();
    c.stages = 2;
    c.channels = vec![3, 4];
    c.stride_k = vec![1, 1];
    c.bottleneck_d = 4;
    c.ffn_expansion = 2;
    c.lncc_window = 3;
    c
}

#[test]
fn gen_data_writes_pairs_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "2");
    for i in 0..2 {
        let dir = tmp.path().join(format!("pair_{i:03}"));
        for f in ["moving.rvf", "moving_labels.rvf", "fixed.rvf", "fixed_labels.rvf", "gt_field.rvf"] {
            assert!(dir.join(f).is_file(), "missing {f}");
        }
        assert_eq!(io::read_volume(dir.join("moving.rvf")).unwrap().dims(), [8, 8, 8]);
    }
    let table = std::fs::read_to_string(tmp.path().join("pairs.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let cfg = std::fs::read_to_string(tmp.path().join("config.txt")).unwrap();
    assert!(cfg.contains("seed=3"));
}

#[test]
fn train_zero_epochs_stores_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen(&data, "1");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "0", "--seed", "9"];
    args.extend_from_slice(TINY);
    ok(&args);
    let loaded = io::read_checkpoint(run.join("checkpoint.hsgk")).unwrap();
    let init = RegistrationModel::new(tiny_config(), 9).unwrap();
    assert_eq!(loaded.config(), init.config());
    assert_eq!(loaded.params().values(), init.params().values());
    assert!(run.join("config.txt").is_file());
    assert_eq!(std::fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 1);
}

#[test]
fn train_then_register_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen(&data, "1");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "2"];
    args.extend_from_slice(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("epoch,sim_loss,reg_loss,total"));
    assert_eq!(std::fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 3);

    let pair = data.join("pair_000");
    let reg = tmp.path().join("reg");
    let out = ok(&[
        "register",
        "--checkpoint", s(&run.join("checkpoint.hsgk")),
        "--moving", s(&pair.join("moving.rvf")),
        "--fixed", s(&pair.join("fixed.rvf")),
        "--moving-labels", s(&pair.join("moving_labels.rvf")),
        "--out", s(&reg),
    ]);
    assert!(out.contains("wall_time_s="));
    let csv = tmp.path().join("eval.csv");
    let report = ok(&[
        "eval",
        "--fixed-labels", s(&pair.join("fixed_labels.rvf")),
        "--moving-labels", s(&pair.join("moving_labels.rvf")),
        "--field", s(&reg.join("field.rvf")),
        "--pair-id", "p0",
        "--out", s(&csv),
    ]);
    assert!(report.starts_with("pair_id,label,dice,njd_percent"));
    assert!(report.lines().any(|l| l.starts_with("p0,mean,")));
    assert_eq!(std::fs::read_to_string(csv).unwrap(), report);
    assert!(reg.join("warped_labels.rvf").is_file());
}

#[test]
fn register_with_zero_flow_returns_moving_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "1");
    let ckpt = tmp.path().join("zero.hsgk");
    io::write_checkpoint(&ckpt, &RegistrationModel::new(tiny_config(), 1).unwrap()).unwrap();
    let pair = tmp.path().join("pair_000");
    let reg = tmp.path().join("reg");
    ok(&["register", "--checkpoint", s(&ckpt), "--moving", s(&pair.join("moving.rvf")), "--fixed", s(&pair.join("fixed.rvf")), "--out", s(&reg)]);
    let moving = io::read_volume(pair.join("moving.rvf")).unwrap();
    let warped = io::read_volume(reg.join("warped.rvf")).unwrap();
    assert_eq!(warped, moving);
    assert_eq!(io::read_field(reg.join("field.rvf")).unwrap().max_norm(), 0.0);
}

#[test]
fn eval_identity_gives_perfect_scores() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "1");
    let pair = tmp.path().join("pair_000");
    let zero = tmp.path().join("zero.rvf");
    io::write_field(&zero, &sgareg_core::DeformationField::zeros([8, 8, 8])).unwrap();
    let out = ok(&[
        "eval",
        "--fixed-labels", s(&pair.join("moving_labels.rvf")),
        "--moving-labels", s(&pair.join("moving_labels.rvf")),
        "--field", s(&zero),
    ]);
    let mean = out.lines().find(|l| l.starts_with("pair,mean,")).expect("mean row");
    assert_eq!(mean, "pair,mean,1,0");
}

#[test]
fn unknown_config_key_names_key_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    std::fs::write(&cfg, "epochs=1\nlearning_rate=0.1\n").unwrap();
    let out = sgareg(&["train", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("bad.txt"), "{err}");
}

#[test]
fn missing_data_dir_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sgareg(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(tmp.path()), "--epochs", "1"]);
    assert!(!out.status.success());
}

#[test]
fn bench_prints_csv_rows() {
    let out = ok(&["bench", "--k-list", "8,16", "--d", "4", "--repeats", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "kind,k,d,flops,wall_ns");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("ssa,8,4,"));
    assert!(lines[2].starts_with("mha,8,4,"));
}

#[test]
fn sweep_k_reports_each_k() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("sweep");
    gen(&data, "1");
    let mut args = vec!["sweep-k", "--k-list", "1,2", "--data", s(&data), "--out", s(&run), "--epochs", "1"];
    args.extend_from_slice(TINY);
    ok(&args);
    let table = std::fs::read_to_string(run.join("sweep_k.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("2,"));
}

#[test]
fn grad_check_ops_passes() {
    let out = ok(&["grad-check", "--module", "ops"]);
    assert!(out.lines().filter(|l| l.starts_with("ok")).count() > 10);
    assert!(!out.contains("FAIL"));
}
