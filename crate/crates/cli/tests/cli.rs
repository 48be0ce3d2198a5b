use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use twassl_core::config::RunConfig;
use twassl_core::train::RunRecord;

const SMALL: &str = r#"
seeds = [1, 2, 3]
[encoder]
hidden = [24]
d_out = 8
[data.synthetic]
train_per_class = 40
test_per_class = 20
[train]
epochs = 2
batch_size = 32
"#;

fn twassl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twassl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn verify_suite_writes_csv_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = twassl(&["verify", "rtwd-tv", "--trials", "5", "--out", "v"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rtwd-tv PASS"));
    let csv = fs::read_to_string(dir.path().join("v/verify_rtwd-tv.csv")).unwrap();
    assert!(csv.starts_with("case,n,trial,value,oracle,error,tolerance"));
    assert_eq!(csv.lines().count(), 1 + 4 * 3 * 5);
}

#[test]
fn verify_unknown_suite_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = twassl(&["verify", "bogus"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown suite"));
}

#[test]
fn train_three_seeds_gives_three_records_and_aggregate() {
    let dir = setup(SMALL);
    let o = twassl(&["train", "--config", "run.toml", "--out", "out", "--jobs", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let jsonl: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "jsonl"))
        .collect();
    assert_eq!(jsonl.len(), 3);
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"].as_array().unwrap().len(), 3);
    assert!(agg["mean"].as_f64().unwrap() > 0.0);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().last().unwrap().starts_with("mean±std,"));

    let rec = RunRecord::from_jsonl(&fs::read_to_string(out.join("run_seed2.jsonl")).unwrap()).unwrap();
    assert_eq!(rec.seed, 2);
    assert_eq!(rec.epochs.len(), 2);
    // the embedded snapshot re-parses to the same config
    let snap = RunConfig::from_toml_str(&rec.config.to_toml_string()).unwrap();
    assert_eq!(snap, rec.config);
    let on_disk = RunConfig::from_path(&out.join("config.toml")).unwrap();
    assert_eq!(on_disk, rec.config);
}

#[test]
fn refuses_non_empty_output_without_force() {
    let dir = setup(SMALL);
    fs::create_dir(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/keep.txt"), "x").unwrap();
    let args = ["train", "--config", "run.toml", "--out", "out", "--seed", "1"];
    let o = twassl(&args, dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"));
    assert!(!dir.path().join("out/run_seed1.jsonl").exists());
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(twassl(&forced, dir.path()).status.success());
    assert!(dir.path().join("out/keep.txt").exists());
}

#[test]
fn sem_mismatch_rejected_before_training() {
    let dir = setup(&format!("{SMALL}\n[head]\nkind = \"sem\"\nL = 3\nV = 2\n"));
    let o = twassl(&["train", "--config", "run.toml", "--out", "out"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("L·V"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn parse_errors_name_the_line() {
    let dir = setup("[train]\nepochs = \"many\"\n");
    let o = twassl(&["train", "--config", "run.toml", "--out", "out"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn same_seed_reproduces_loss_series() {
    let dir = setup(SMALL);
    for out in ["a", "b"] {
        let o = twassl(&["train", "--config", "run.toml", "--seed", "5", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &str| {
        RunRecord::from_jsonl(&fs::read_to_string(dir.path().join(d).join("run_seed5.jsonl")).unwrap()).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    let bits = |r: &RunRecord| r.loss_series().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.final_accuracy, b.final_accuracy);
    assert_eq!(
        fs::read(dir.path().join("a/run_seed5.bin")).unwrap(),
        fs::read(dir.path().join("b/run_seed5.bin")).unwrap()
    );
}

#[test]
fn eval_checkpoint_paths() {
    let dir = setup(SMALL);
    let o = twassl(&["train", "--config", "run.toml", "--seed", "1", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let o = twassl(
        &["eval", "--checkpoint", "out/run_seed1.json", "--k", "1", "--split", "train", "--out", "e"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy 1.000000"), "{}", stdout(&o));
    let logged: serde_json::Value =
        serde_json::from_str(fs::read_to_string(dir.path().join("e/eval.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(logged["accuracy"].as_f64(), Some(1.0));

    let o = twassl(&["eval", "--checkpoint", "out/run_seed1.json", "--metric", "cosine"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("not the default"));

    // a config with another encoder width cannot load these weights
    fs::write(dir.path().join("wide.toml"), SMALL.replace("hidden = [24]", "hidden = [25]")).unwrap();
    let o = twassl(&["eval", "--checkpoint", "out/run_seed1.json", "--config", "wide.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("encoder.0.w"), "{}", stderr(&o));

    fs::write(
        dir.path().join("af.toml"),
        format!("{SMALL}\n[head]\nkind = \"arcface\"\n"),
    )
    .unwrap();
    let o = twassl(&["eval", "--checkpoint", "out/run_seed1.json", "--config", "af.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("head mismatch"), "{}", stderr(&o));
}

#[test]
fn ablate_lambda_grid_has_four_aggregates() {
    let dir = setup(&SMALL.replace("seeds = [1, 2, 3]", "seeds = [1]"));
    let o = twassl(&["ablate", "--config", "run.toml", "--axis", "lambda_jd", "--out", "ab"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let aggs: Vec<&str> = csv.lines().filter(|l| l.starts_with("aggregate,")).collect();
    assert_eq!(aggs.len(), 4);
    for (line, v) in aggs.iter().zip(["0.0", "0.1", "0.2", "0.3"]) {
        assert!(line.starts_with(&format!("aggregate,lambda_jd,{v},")), "{line}");
    }
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 4);
}

#[test]
fn ablate_knn_k_and_head() {
    let dir = setup(&SMALL.replace("seeds = [1, 2, 3]", "seeds = [1, 2]"));
    let o = twassl(&["ablate", "--config", "run.toml", "--axis", "knn_k", "--out", "k"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("k/ablation.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("aggregate,knn_k,")).count(), 2);

    let o = twassl(
        &["ablate", "--config", "run.toml", "--axis", "head", "--values", "softmax,af(pe)+jd", "--out", "h"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("h/ablation.csv")).unwrap();
    assert!(csv.contains("aggregate,head,af(pe)+jd,"));

    let o = twassl(&["ablate", "--config", "run.toml", "--axis", "depth", "--out", "x"], dir.path());
    assert!(!o.status.success());
}
