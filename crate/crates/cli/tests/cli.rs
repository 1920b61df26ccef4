use std::path::Path;
use std::process::{Command, Output};

fn apis(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apis"))
        .args(args)
        .env("APIS_RUN_ROOT", run_root)
        .output()
        .expect("spawn apis")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

const SMALL: [&str; 6] = ["--train", "6", "--test", "4", "--steps", "1"];

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = ok(apis(&["gen-data", "--seed", "3", "--train", "4", "--test", "2", "--out", out.to_str().unwrap()], tmp.path()));
        assert!(String::from_utf8_lossy(&o.stdout).contains("train Q = "));
    }
    let walk = |d: &Path| {
        let mut all = Vec::new();
        let mut stack = vec![d.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    all.push((e.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
                }
            }
        }
        all.sort();
        all
    };
    let a = walk(&tmp.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, walk(&tmp.path().join("b")));
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = apis(&["gen-data", "--train", "0", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));

    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"stepz": 3}"#).unwrap();
    let o = apis(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));

    let o = apis(&["run", "--strategy", "telepathy"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("strategy"), "{}", stderr(&o));
}

#[test]
fn missing_data_dir_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = apis(&["run", "--data-dir", missing.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn run_uses_run_root_and_reruns_from_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--name", "first", "--seed", "4"];
    args.extend(SMALL);
    let o = ok(apis(&args, tmp.path()));
    let first = tmp.path().join("first");
    assert!(first.join("config.json").exists(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));

    let second = tmp.path().join("second");
    ok(apis(
        &["run", "--config", first.join("config.json").to_str().unwrap(), "--out", second.to_str().unwrap()],
        tmp.path(),
    ));
    let (a, b) = (tree(&first), tree(&second));
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs");
    }
}

#[test]
fn eval_and_transfer_work_on_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--name", "src"];
    args.extend(SMALL);
    ok(apis(&args, tmp.path()));
    let src = tmp.path().join("src");

    let o = ok(apis(&["eval", "--run", src.to_str().unwrap(), "--per-instance"], tmp.path()));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report.is_object());
    assert!(report["instances"].as_array().is_some_and(|a| !a.is_empty()));

    let mut args = vec!["transfer", "--from", src.to_str().unwrap(), "--heads", "8"];
    args.extend(SMALL);
    ok(apis(&args, tmp.path()));
    assert!(tmp.path().join("src-transfer").join("metrics.csv").exists());
}

#[test]
fn sweep_writes_runs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--name", "sw", "--seeds", "0,1", "--strategies", "entropy,random"];
    args.extend(SMALL);
    ok(apis(&args, tmp.path()));
    let root = tmp.path().join("sw");
    for run in ["entropy_seed0", "entropy_seed1", "random_seed0", "random_seed1"] {
        assert!(root.join(run).join("metrics.csv").exists(), "{run}");
    }
    let csv = std::fs::read_to_string(root.join("sweep_summary.csv")).unwrap();
    assert!(csv.starts_with("kind,strategy,baseline,step,metric,n,mean,sd"));
    assert!(csv.lines().any(|l| l.starts_with("diff,")));

    let o = apis(&["sweep", "--seeds", "0", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
