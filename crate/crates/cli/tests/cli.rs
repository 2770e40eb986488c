use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use skip2lora::network::Checkpoint;
use skip2lora::{FineTuneMode, Model, ModelSpec, ParamId};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skip2lora"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Default data set and a pre-trained checkpoint, shared by every test.
struct Setup {
    dir: TempDir,
}

impl Setup {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["gen-data", "--out-dir", s(dir.path())]);
        let data = dir.path().join("pretrain.csv");
        let out = dir.path().join("base.skl");
        ok(&["pretrain", "--data", s(&data), "--out", s(&out), "--epochs", "100"]);
        Setup { dir }
    })
}

fn metric(stdout: &str, key: &str) -> u64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
        .parse()
        .unwrap()
}

#[test]
fn gen_data_defaults() {
    let st = setup();
    for split in ["pretrain", "finetune", "test"] {
        let text = fs::read_to_string(st.path(&format!("{split}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 471, "{split}");
        assert!(lines.iter().all(|l| l.split(',').count() == 257));
    }
}

#[test]
fn gen_data_is_seeded() {
    let dirs: Vec<TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        ok(&["gen-data", "--out-dir", s(d.path()), "--seed", "1", "--samples", "30"]);
    }
    for f in ["pretrain.csv", "finetune.csv", "test.csv"] {
        assert_eq!(fs::read(dirs[0].path().join(f)).unwrap(), fs::read(dirs[1].path().join(f)).unwrap());
    }
}

#[test]
fn gen_data_rejects_zero_samples_before_writing() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("new");
    let r = run(&["gen-data", "--out-dir", s(&out), "--samples", "0"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn pretrain_checkpoint_size_and_determinism() {
    let st = setup();
    let base = fs::read(st.path("base.skl")).unwrap();
    let params = 256 * 96 + 96 + 4 * 96 + 96 * 96 + 96 + 4 * 96 + 96 * 3 + 3;
    assert_eq!(base.len(), 31 + 4 * params);
    assert!(st.path("base.skl.norm.json").exists());

    let d = tempfile::tempdir().unwrap();
    let again = d.path().join("again.skl");
    let stdout = ok(&["pretrain", "--data", s(&st.path("pretrain.csv")), "--out", s(&again), "--epochs", "100"]);
    assert!(stdout.contains("pretrain accuracy: 100.00%"), "{stdout}");
    assert_eq!(fs::read(&again).unwrap(), base);
}

#[test]
fn corrupt_dataset_leaves_no_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("bad.csv");
    fs::write(&data, "1,2,0\n3,oops,1\n").unwrap();
    let out = d.path().join("x.skl");
    let r = run(&["pretrain", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("row 2, column 2"));
    assert!(!out.exists());
}

#[test]
fn finetune_metrics_reconcile_with_summary() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    let (out, metrics) = (d.path().join("ft.skl"), d.path().join("m.csv"));
    let stdout = ok(&[
        "finetune", "--checkpoint", s(&st.path("base.skl")), "--data", s(&st.path("finetune.csv")),
        "--out", s(&out), "--mode", "skip2-lora", "--metrics", s(&metrics),
    ]);
    let text = fs::read_to_string(&metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,batch,loss,fc_fwd_macs,lora_fwd_macs,bwd_macs,update_macs,cache_hits,cache_misses,elapsed_us"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 300 * 23);
    let col = |c: usize| rows.iter().map(|r| r[c].parse::<u64>().unwrap()).sum::<u64>();
    for (c, key) in [(3, "fc_fwd_macs"), (4, "lora_fwd_macs"), (5, "bwd_macs"), (6, "update_macs"), (7, "cache_hits"), (8, "cache_misses")] {
        assert_eq!(col(c), metric(&stdout, key), "{key}");
    }
    assert_eq!(col(7) + col(8), 300 * 23 * 20);
    assert!(stdout.contains("payload 366600 bytes"), "{stdout}");
    assert!(out.with_extension("skl.norm.json").exists());
}

fn finetune_to(st: &Setup, dir: &Path, mode: &str, epochs: &str) -> Checkpoint {
    let out = dir.join(format!("{mode}.skl"));
    ok(&[
        "finetune", "--checkpoint", s(&st.path("base.skl")), "--data", s(&st.path("finetune.csv")),
        "--out", s(&out), "--mode", mode, "--epochs", epochs, "--seed", "5",
    ]);
    Checkpoint::read_file(&out).unwrap()
}

#[test]
fn skip_and_skip2_checkpoints_match_in_adapters() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    let a = finetune_to(st, d.path(), "skip-lora", "20");
    let b = finetune_to(st, d.path(), "skip2-lora", "20");
    let base_tensors = skip2lora::network::param_layout(FineTuneMode::FtAll, 3).len();
    assert_eq!(a.tensors.len(), base_tensors + 6);
    assert_eq!(a.tensors, b.tensors);
}

#[test]
fn ft_bias_changes_only_bias_tensors() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    let tuned = finetune_to(st, d.path(), "ft-bias", "2");
    let base = Checkpoint::read_file(&st.path("base.skl")).unwrap();
    let ids = skip2lora::network::param_layout(FineTuneMode::FtBias, 3);
    for ((id, a), b) in ids.iter().zip(&base.tensors).zip(&tuned.tensors) {
        assert_eq!(matches!(id, ParamId::FcBias(_)), a != b, "{id:?}");
    }
}

#[test]
fn adapter_checkpoint_rejects_other_wiring() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    finetune_to(st, d.path(), "lora-all", "1");
    let r = run(&[
        "finetune", "--checkpoint", s(&d.path().join("lora-all.skl")), "--data", s(&st.path("finetune.csv")),
        "--out", s(&d.path().join("x.skl")), "--mode", "ft-all", "--epochs", "1",
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("incompatible"));
}

#[test]
fn eval_report_and_repeatability() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    let json = d.path().join("r.json");
    let (base, data) = (st.path("base.skl"), st.path("test.csv"));
    let args = ["eval", "--checkpoint", s(&base), "--data", s(&data), "--json", s(&json)];
    let first = ok(&args);
    assert_eq!(ok(&args), first);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["num_samples"], 470);
    assert_eq!(report["mode"], "ft-all");
    let acc = report["accuracy"].as_f64().unwrap();
    assert!(first.contains(&format!("accuracy: {:.2}%", 100.0 * acc)));
}

#[test]
fn constant_predictor_scores_a_third() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    let mut m = Model::build(&ModelSpec::new(vec![256, 8, 3], FineTuneMode::FtAll)).unwrap();
    m.tensor_mut(ParamId::FcWeight(1)).unwrap().fill(0.0);
    m.tensor_mut(ParamId::FcBias(1)).unwrap().copy_from_slice(&[1.0, 0.0, 0.0]);
    let ckpt = d.path().join("const.skl");
    m.to_checkpoint().write_file(&ckpt).unwrap();
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&st.path("test.csv"))]);
    // 470 = 157 + 157 + 156
    assert!(stdout.contains("accuracy: 33.40%") || stdout.contains("accuracy: 33.19%"), "{stdout}");

    let mut balanced = String::from("f0,label\n");
    for i in 0..9 {
        balanced.push_str(&format!("{}.5,{}\n", i, i % 3));
    }
    let m2 = Model::build(&ModelSpec::new(vec![1, 4, 3], FineTuneMode::FtAll)).unwrap();
    let mut m2 = m2;
    m2.tensor_mut(ParamId::FcWeight(1)).unwrap().fill(0.0);
    m2.tensor_mut(ParamId::FcBias(1)).unwrap().copy_from_slice(&[0.0, 0.0, 2.0]);
    let (ckpt2, data2) = (d.path().join("c2.skl"), d.path().join("bal.csv"));
    m2.to_checkpoint().write_file(&ckpt2).unwrap();
    fs::write(&data2, balanced).unwrap();
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt2), "--data", s(&data2)]);
    assert!(stdout.contains("accuracy: 33.33%"), "{stdout}");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let st = setup();
    let r = run(&["eval", "--checkpoint", "/no/such/model.skl", "--data", s(&st.path("test.csv"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/no/such/model.skl"));
}

#[test]
fn dimension_mismatch_is_a_validation_error() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out-dir", s(d.path()), "--features", "10", "--samples", "30"]);
    let r = run(&["eval", "--checkpoint", s(&st.path("base.skl")), "--data", s(&d.path().join("test.csv"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn divergence_is_a_numeric_contract_violation() {
    let st = setup();
    let d = tempfile::tempdir().unwrap();
    let r = run(&[
        "finetune", "--checkpoint", s(&st.path("base.skl")), "--data", s(&st.path("finetune.csv")),
        "--out", s(&d.path().join("x.skl")), "--mode", "ft-all", "--epochs", "3", "--lr", "1e30",
    ]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!d.path().join("x.skl").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["finetune", "--mode", "bogus"]).status.code(), Some(1));
    assert_eq!(run(&["bench", "--modes", "nope", "--data", "x", "--checkpoint", "y"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bench_table_schema_and_ratios() {
    let st = setup();
    let (base, data) = (st.path("base.skl"), st.path("finetune.csv"));
    let args = [
        "bench", "--checkpoint", s(&base), "--data", s(&data),
        "--modes", "lora-all,skip-lora,skip2-lora",
    ];
    let stdout = ok(&args);
    let table: Vec<Vec<&str>> = stdout.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    let header = [
        "mode", "fwd_us", "bwd_us", "upd_us", "batch_us", "batch_us_steady", "predict_us", "fc_fwd_macs",
        "lora_fwd_macs", "bwd_macs", "upd_macs", "total_macs", "fwd_red_%", "bwd_red_%", "total_red_%",
    ];
    assert_eq!(table[0], header);
    let modes: Vec<&str> = table[1..].iter().map(|r| r[0]).collect();
    assert_eq!(modes, ["lora-all", "skip-lora", "skip2-lora"]);
    let get = |row: usize, col: &str| -> u64 {
        let c = header.iter().position(|h| *h == col).unwrap();
        table[row][c].parse().unwrap()
    };
    assert!(get(2, "bwd_macs") as f64 <= 0.2 * get(1, "bwd_macs") as f64);
    assert!(get(3, "fc_fwd_macs") as f64 <= 0.11 * get(2, "fc_fwd_macs") as f64);

    // MAC columns are deterministic across runs
    let again = ok(&args);
    let macs = |text: &str| -> Vec<Vec<String>> {
        text.lines().skip(2).map(|l| l.split_whitespace().skip(7).take(5).map(String::from).collect()).collect()
    };
    assert_eq!(macs(&stdout), macs(&again));
}
