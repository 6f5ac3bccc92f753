//! End-to-end command tests: exit codes, determinism, and output contracts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sphere-at"))
}

fn moons_config(out_dir: &Path, seed: u64, log_wall: bool) -> String {
    format!(
        "dataset = two-moons\n\
         train_n = 60\n\
         eval_n = 40\n\
         data_noise = 0.1\n\
         data_seed = 7\n\
         arch = mlp\n\
         input_dim = 2\n\
         hidden = 8\n\
         feature_dim = 4\n\
         head = he\n\
         scale_s = 5\n\
         margin_m = 0.2\n\
         framework = pgd-at\n\
         epochs = 3\n\
         batch_size = 16\n\
         lr = 0.05\n\
         eps = 0.05\n\
         eta = 0.0125\n\
         steps = 3\n\
         seed = {seed}\n\
         log_wall_time = {log_wall}\n\
         out_dir = {}\n",
        out_dir.display()
    )
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("command runs")
}

#[test]
fn train_attack_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("run");
    std::fs::write(&cfg, moons_config(&out, 5, true)).unwrap();

    let t = run(bin().arg("train").arg(&cfg));
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("history.csv").exists());
    assert!(out.join("config.resolved").exists());
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("framework = pgd-at"));
    assert!(resolved.starts_with("# resolved by sphere-at"));

    let a = run(bin()
        .args(["attack", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "40", "--data-seed", "9"])
        .args(["--attack", "pgd", "--steps", "5", "--eps", "0.05", "--eta", "0.0125"])
        .args(["--out"])
        .arg(dir.path().join("attack.json")));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("attack.json")).unwrap())
            .unwrap();
    assert_eq!(report["attack"], "pgd-5");
    assert!(report["robust_acc"].as_f64().unwrap() <= report["clean_acc"].as_f64().unwrap());

    let e = run(bin()
        .args(["eval", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "40", "--data-seed", "9"]));
    assert!(e.status.success());
}

#[test]
fn zero_eps_attack_accuracy_equals_clean_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("run");
    std::fs::write(&cfg, moons_config(&out, 11, true)).unwrap();
    assert!(run(bin().arg("train").arg(&cfg)).status.success());

    let report = |extra: &[&str]| -> serde_json::Value {
        let json = dir.path().join("r.json");
        let mut c = bin();
        c.args(["attack", "--checkpoint"])
            .arg(out.join("model.ckpt"))
            .args(["--dataset", "two-moons", "--n", "40", "--data-seed", "9"])
            .args(["--attack", "pgd", "--steps", "3", "--eps", "0", "--eta", "0"])
            .args(extra)
            .arg("--out")
            .arg(&json);
        assert!(run(&mut c).status.success());
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap()
    };
    let r = report(&[]);
    assert_eq!(r["robust_acc"], r["clean_acc"]);
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epslon = 0.3\n").unwrap();
    let out = run(bin().arg("train").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epslon"));
}

#[test]
fn zero_steps_rejected_as_usage_error() {
    let out = run(bin().args([
        "attack",
        "--checkpoint",
        "nowhere.ckpt",
        "--attack",
        "pgd",
        "--steps",
        "0",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_version_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.ckpt");
    std::fs::write(&ck, b"sphereat-ckpt v999\n\n").unwrap();
    let out = run(bin()
        .args(["eval", "--checkpoint"])
        .arg(&ck)
        .args(["--dataset", "two-moons", "--n", "10"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for tag in ["a", "b"] {
        let cfg = dir.path().join(format!("{tag}.cfg"));
        let out = dir.path().join(tag);
        std::fs::write(&cfg, moons_config(&out, 21, false)).unwrap();
        assert!(run(bin().arg("train").arg(&cfg)).status.success());
    }
    let ha = std::fs::read(dir.path().join("a/history.csv")).unwrap();
    let hb = std::fs::read(dir.path().join("b/history.csv")).unwrap();
    assert_eq!(ha, hb, "history files must match byte for byte");
    let ca = std::fs::read(dir.path().join("a/model.ckpt")).unwrap();
    let cb = std::fs::read(dir.path().join("b/model.ckpt")).unwrap();
    assert_eq!(ca, cb, "checkpoints must match byte for byte");
}

#[test]
fn verify_subcommand_contract() {
    let ok = run(bin().args(["verify", "lemma2"]));
    assert!(ok.status.success());
    let bad = run(bin().args(["verify", "lemma9"]));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_merges_runs_with_fixed_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut run_dirs = Vec::new();
    for (i, head) in ["standard", "he"].iter().enumerate() {
        let cfg = dir.path().join(format!("{i}.cfg"));
        let out = dir.path().join(format!("run{i}"));
        let mut text = moons_config(&out, 31 + i as u64, true);
        if *head == "standard" {
            text = text.replace("head = he", "head = standard");
        }
        std::fs::write(&cfg, text).unwrap();
        assert!(run(bin().arg("train").arg(&cfg)).status.success());
        run_dirs.push(out);
    }
    let csv_path = dir.path().join("report.csv");
    let mut c = bin();
    c.arg("report");
    for d in &run_dirs {
        c.arg(d);
    }
    c.arg("--out").arg(&csv_path);
    let out = run(&mut c);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run,framework,he,clean_acc,robust_acc,attack,eps,steps"
    );
    assert_eq!(lines.count(), 2);
    assert!(csv.contains("pgd-at,standard"));
    assert!(csv.contains("pgd-at,he"));

    // empty run list is a usage error
    let empty = run(bin().arg("report"));
    assert_eq!(empty.status.code(), Some(2));

    // missing files exit 2
    let missing = run(bin().args(["report", "/nonexistent-run-dir"]));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn adaptive_flag_requires_angular_head_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("run");
    std::fs::write(&cfg, moons_config(&out, 41, true)).unwrap();
    assert!(run(bin().arg("train").arg(&cfg)).status.success());

    let json = dir.path().join("adaptive.json");
    let a = run(bin()
        .args(["attack", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "30", "--data-seed", "9"])
        .args(["--attack", "pgd", "--steps", "3", "--eps", "0.05", "--eta", "0.02", "--adaptive"])
        .arg("--out")
        .arg(&json));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["adaptive"], true);

    // a standard-head checkpoint must reject --adaptive
    let cfg2 = dir.path().join("std.cfg");
    let out2 = dir.path().join("run2");
    std::fs::write(
        &cfg2,
        moons_config(&out2, 42, true).replace("head = he", "head = standard"),
    )
    .unwrap();
    assert!(run(bin().arg("train").arg(&cfg2)).status.success());
    let rejected = run(bin()
        .args(["attack", "--checkpoint"])
        .arg(out2.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "30"])
        .args(["--attack", "pgd", "--steps", "3", "--eps", "0.05", "--eta", "0.02", "--adaptive"]));
    assert_eq!(rejected.status.code(), Some(2));
}

#[test]
fn fn_objective_flag_applies_to_standard_heads_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("run");
    std::fs::write(
        &cfg,
        moons_config(&out, 43, true).replace("head = he", "head = standard"),
    )
    .unwrap();
    assert!(run(bin().arg("train").arg(&cfg)).status.success());
    let ok = run(bin()
        .args(["attack", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "30"])
        .args(["--attack", "pgd", "--steps", "2", "--eps", "0.05", "--eta", "0.02", "--fn-objective"]));
    assert!(ok.status.success());

    let cfg2 = dir.path().join("he.cfg");
    let out2 = dir.path().join("run-he");
    std::fs::write(&cfg2, moons_config(&out2, 44, true)).unwrap();
    assert!(run(bin().arg("train").arg(&cfg2)).status.success());
    let rejected = run(bin()
        .args(["attack", "--checkpoint"])
        .arg(out2.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "30"])
        .args(["--attack", "pgd", "--steps", "2", "--eps", "0.05", "--eta", "0.02", "--fn-objective"]));
    assert_eq!(rejected.status.code(), Some(2));
}

#[test]
fn adversarial_dump_round_trips_through_blob_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("run");
    std::fs::write(&cfg, moons_config(&out, 51, true)).unwrap();
    assert!(run(bin().arg("train").arg(&cfg)).status.success());
    let dump = dir.path().join("adv.blob");
    let a = run(bin()
        .args(["attack", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "20", "--data-seed", "9"])
        .args(["--attack", "pgd", "--steps", "3", "--eps", "0.05", "--eta", "0.02"])
        .arg("--dump-adv")
        .arg(&dump));
    assert!(a.status.success());
    let ds = sphere_at_core::data::import_dataset(&dump).unwrap();
    assert_eq!(ds.len(), 20);
    assert!(ds.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn grad_ratio_writes_block_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("run");
    std::fs::write(&cfg, moons_config(&out, 61, true)).unwrap();
    assert!(run(bin().arg("train").arg(&cfg)).status.success());
    let csv_path = dir.path().join("ratios.csv");
    let g = run(bin()
        .args(["grad-ratio", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .args(["--dataset", "two-moons", "--n", "16", "--data-seed", "9"])
        .args(["--attack", "pgd", "--steps", "3", "--eps", "0.05", "--eta", "0.02"])
        .arg("--out")
        .arg(&csv_path));
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("block,mean_ratio,examples\n"));
    assert!(csv.contains("fc1.w"));
    assert!(csv.contains("softmax.W"));
}
