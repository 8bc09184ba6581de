use std::path::Path;
use std::process::{Command, Output};

use noisyrollout::raster::{psnr, Raster};

fn nrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrlab"))
        .args(args)
        .env_remove("NR_THREADS")
        .output()
        .expect("spawn nrlab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "train.t_max=4",
    "--set",
    "eval.n_eval=20",
    "--set",
    "io.checkpoint_every=1",
];

#[test]
fn missing_config_exits_2_with_path() {
    let o = nrlab(&["train", "--config", "/no/such/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/run.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nn3 = 4\n").unwrap();
    let o = nrlab(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("metrics.jsonl").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(nrlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nrlab(&["compare"]).status.code(), Some(2));
    assert_eq!(nrlab(&["train", "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(nrlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_thread_count_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_nrlab"))
        .args(["distort-preview", "--out", "/tmp/unused-preview"])
        .env("NR_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("NR_THREADS"));
}

#[test]
fn unknown_kind_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = nrlab(&["distort-preview", "--kind", "sepia", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sepia"));
}

#[test]
fn distort_preview_zero_is_clean_and_psnr_falls() {
    let dir = tempfile::tempdir().unwrap();
    let o = nrlab(&[
        "distort-preview",
        "--seed",
        "3",
        "--strengths",
        "0,300,500,700,900",
        "--out",
        p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |s: &str| {
        Raster::from_pgm(&std::fs::read(dir.path().join(format!("gaussian-{s}.pgm"))).unwrap())
            .unwrap()
    };
    let task = noisyrollout::env::TaskSpec::default();
    let clean = noisyrollout::env::sample_instance(&task, 3).unwrap().image;
    assert_eq!(
        std::fs::read(dir.path().join("gaussian-0.pgm")).unwrap(),
        clean.to_pgm()
    );
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 5);
    let base = read("0");
    let q: Vec<f64> = ["300", "500", "700", "900"]
        .iter()
        .map(|s| psnr(&base, &read(s)).unwrap())
        .collect();
    assert!(q.windows(2).all(|w| w[1] < w[0]), "{q:?}");
}

#[test]
fn train_writes_artefacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--out", p(&out)];
        args.extend(SMALL);
        let o = nrlab(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.jsonl", "step-4.ckpt", "step-0.ckpt", "summary.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(a.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let steps: Vec<u64> = lines.iter().map(|v| v["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    // snapshot reproduces the run
    let c = dir.path().join("c");
    let o = nrlab(&["train", "--config", p(&a.join("config.toml")), "--out", p(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(c.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn vanilla_overrides_match_compare_vanilla_arm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nr");
    let mut args = vec![
        "train",
        "--out",
        p(&out),
        "--set",
        "train.n1=12",
        "--set",
        "train.n2=0",
        "--set",
        "schedule.kind=constant",
        "--set",
        "schedule.alpha0=0",
    ];
    args.extend(SMALL);
    assert!(nrlab(&args).status.success());
    let cmp = dir.path().join("cmp");
    let mut args = vec!["compare", "--seeds", "0", "--out", p(&cmp)];
    args.extend(SMALL);
    let o = nrlab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("metrics.jsonl")).unwrap(),
        std::fs::read(cmp.join("seed-0/vanilla/metrics.jsonl")).unwrap()
    );
}

#[test]
fn single_seed_compare_has_two_columns_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["compare", "--seeds", "7", "--out", p(dir.path())];
    args.extend(SMALL);
    let o = nrlab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("compare.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    for m in ["mean_reward", "diversity", "clip_fraction"] {
        let n = header.iter().filter(|h| h.starts_with(&format!("{m}["))).count();
        assert_eq!(n, 2, "{m}: {header:?}");
    }
    assert_eq!(r.records().count(), 4);
    let mut f = csv::Reader::from_path(dir.path().join("compare_final.csv")).unwrap();
    assert_eq!(f.records().count(), 4);
    // both arms spend the same rollout budget
    for arm in ["noisy", "vanilla"] {
        let cfg = noisyrollout::experiment::read_run_config(&dir.path().join("seed-7").join(arm))
            .unwrap();
        assert_eq!(cfg.train.n1 + cfg.train.n2, 12, "{arm}");
    }
}

#[test]
fn gradients_single_subgroup_gives_unit_clean_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = nrlab(&[
        "train",
        "--out",
        p(&run),
        "--set",
        "train.n1=12",
        "--set",
        "train.n2=0",
        "--set",
        "schedule.kind=constant",
        "--set",
        "schedule.alpha0=0",
        "--set",
        "train.optimizer=sgd",
        "--set",
        "train.lr=0.05",
        "--set",
        "train.t_max=6",
        "--set",
        "eval.n_eval=20",
        "--set",
        "io.checkpoint_every=1",
        "--set",
        "io.record_replay=true",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv_path = dir.path().join("g.csv");
    let o = nrlab(&[
        "analyze",
        "gradients",
        p(&run),
        "--delta-t",
        "1",
        "--runs",
        "1",
        "--out",
        p(&csv_path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let rc: f64 = row[1].parse().unwrap();
        let rn: f64 = row[2].parse().unwrap();
        assert!((rc - 1.0).abs() < 1e-9, "r_clean {rc}");
        assert_eq!(rn, 0.0);
    }
    assert!(dir.path().join("g.json").exists());

    let o = nrlab(&["analyze", "diversity", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = csv::Reader::from_path(run.join("diversity.csv")).unwrap().into_records().count();
    assert_eq!(d, 6);
}

#[test]
fn gradients_without_replay_names_step_range() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", p(dir.path())];
    args.extend(SMALL);
    assert!(nrlab(&args).status.success());
    let o = nrlab(&["analyze", "gradients", p(dir.path()), "--delta-t", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("steps 1..=2"), "{}", stderr(&o));
}

#[test]
fn default_run_reports_finite_noisy_ratios_early() {
    let dir = tempfile::tempdir().unwrap();
    let o = nrlab(&[
        "train",
        "--out",
        p(dir.path()),
        "--set",
        "train.t_max=15",
        "--set",
        "eval.n_eval=20",
        "--set",
        "io.record_replay=true",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("g.csv");
    let o = nrlab(&["analyze", "gradients", p(dir.path()), "--runs", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn bt_all_ties_is_even() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("games.jsonl");
    let line = r#"{"first":"a","second":"b","outcome":"tie"}"#;
    std::fs::write(&input, format!("{line}\n{line}\n{line}\n")).unwrap();
    let out = dir.path().join("bt.json");
    let o = nrlab(&["analyze", "bt", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["win_matrix"][0][1].as_f64().unwrap(), 0.5);
    assert_eq!(v["win_matrix"][1][0].as_f64().unwrap(), 0.5);
}

#[test]
fn eval_checkpoint_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run)];
    args.extend(SMALL);
    assert!(nrlab(&args).status.success());
    let o = nrlab(&[
        "eval",
        "--checkpoint",
        p(&run.join("step-4.ckpt")),
        "--strengths",
        "0,100",
        "--set",
        "eval.n_eval=30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pts: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(pts.as_array().unwrap().len(), 2);

    let dump = dir.path().join("dump");
    let o = nrlab(&["eval", "--dump", "3", "--out", p(&dump)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dump.join("instance-2.pgm").exists());
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dump.join("instance-0.json")).unwrap()).unwrap();
    assert!(meta["truth"].is_u64());

    let o = nrlab(&["eval", "--checkpoint", "/no/such.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
}
