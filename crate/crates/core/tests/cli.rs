use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn locmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locmoe")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn capacity_single_query_json() {
    let dir = TempDir::new().unwrap();
    let o = locmoe(dir.path(), &["capacity", "--delta", "0.03", "--dim", "4096", "--experts", "16"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let p = v["p_delta"].as_f64().unwrap();
    assert!(p > 0.05 && p < 0.06, "{p}");
    assert!((v["ec_min"].as_f64().unwrap() - 1.0 / (16.0 * p)).abs() < 1e-12);
    assert!(v["chain"]["erfc_gt_exp"].as_bool().unwrap());
}

#[test]
fn capacity_grid_has_one_row_per_point() {
    let dir = TempDir::new().unwrap();
    let o = locmoe(dir.path(), &["capacity", "--grid", "0.01:0.5:50", "--dim", "512", "--experts", "16", "--out", "c.csv"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.starts_with("delta,p_delta,ec_min"));
    let meta = read_json(&dir.path().join("c.csv.meta.json"));
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["command"], "capacity");
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&locmoe(dir.path(), &["capacity", "--delta", "0.1"])), 2);
    assert_eq!(code(&locmoe(dir.path(), &["capacity", "--delta", "1.5", "--dim", "8"])), 2);
    assert_eq!(code(&locmoe(dir.path(), &["capacity", "--dim", "8", "--grid", "0.5:0.1:3"])), 2);
    assert_eq!(code(&locmoe(dir.path(), &["train-toy", "--router", "dense"])), 2);
    assert_eq!(code(&locmoe(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&locmoe(dir.path(), &["--version"])), 0);
}

#[test]
fn existing_output_needs_force() {
    let dir = TempDir::new().unwrap();
    let args = ["capacity", "--delta", "0.2", "--dim", "64", "--out", "q.json"];
    assert_eq!(code(&locmoe(dir.path(), &args)), 0);
    let o = locmoe(dir.path(), &args);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&locmoe(dir.path(), &forced)), 0);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"seed": 3, "delta": 0.2, "dim": 64, "experts": 4}"#).unwrap();
    let o = locmoe(dir.path(), &["capacity", "--config", "cfg.json", "--dim", "128", "--out", "q.json"]);
    assert_eq!(code(&o), 0);
    let meta = read_json(&dir.path().join("q.json.meta.json"));
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config"]["dim"], 128);
    assert_eq!(meta["config"]["experts"], 4);

    fs::write(dir.path().join("bad.json"), r#"{"dimension": 64}"#).unwrap();
    assert_eq!(code(&locmoe(dir.path(), &["capacity", "--config", "bad.json", "--delta", "0.1"])), 2);
}

#[test]
fn verify_single_suite_passes() {
    let dir = TempDir::new().unwrap();
    let o = locmoe(dir.path(), &["verify", "--only", "cap-identity"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("PASS  cap-identity"));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn verify_perturbation_fails() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&locmoe(dir.path(), &["verify", "--only", "losses"])), 0);
    assert_eq!(code(&locmoe(dir.path(), &["verify", "--only", "losses", "--perturb", "0.01"])), 1);
}

#[test]
fn verify_reports_the_bound_chain_violation() {
    let dir = TempDir::new().unwrap();
    let o = locmoe(dir.path(), &["verify", "--only", "theorem-chain", "--out", "v.csv"]);
    assert_eq!(code(&o), 1);
    let table = stdout(&o);
    assert!(table.contains("FAIL  theorem-chain  exact ec_min >= erfc form"));
    assert!(table.contains("PASS  theorem-chain  erfc form > exp form"));
}

#[test]
fn route_sim_writes_counts_and_histograms() {
    let dir = TempDir::new().unwrap();
    let o = locmoe(
        dir.path(),
        &["route-sim", "--tokens", "4000", "--corpus", "clusters", "--histograms", "h.csv", "--out", "r.csv"],
    );
    assert_eq!(code(&o), 0);
    let rows = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(rows.lines().count(), 9);
    let total: usize = rows.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4000);
    let meta = read_json(&dir.path().join("r.csv.meta.json"));
    let diag = meta["results"]["mean_diagonal_cosine"].as_f64().unwrap();
    let off = meta["results"]["mean_off_diagonal_cosine"].as_f64().unwrap();
    assert!(diag > off);
    assert!(fs::read_to_string(dir.path().join("h.csv")).unwrap().starts_with("kind,expert_i,expert_j"));
}

#[test]
fn train_toy_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let args = |out: &'static str| vec!["train-toy", "--router", "loc", "--epochs", "4", "--tokens-per-cluster", "200", "--out", out];
    assert_eq!(code(&locmoe(dir.path(), &args("a.csv"))), 0);
    assert_eq!(code(&locmoe(dir.path(), &args("b.csv"))), 0);
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 4);
    let ma = read_json(&dir.path().join("a.csv.meta.json"));
    assert!(ma["results"]["grad_check"]["passed"].as_bool().unwrap());
    assert_eq!(ma, read_json(&dir.path().join("b.csv.meta.json")));
}

#[test]
fn comm_sim_tp1_matches_plain() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::new();
    for s in 0..16 {
        let row: Vec<String> = (0..16).map(|t| if s == t { "0".into() } else { format!("{}", 1000 * (s + 2 * t)) }).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.path().join("v.csv"), csv).unwrap();
    let o = locmoe(dir.path(), &["comm-sim", "--volumes", "v.csv", "--tp-group", "1"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], row[3], "plain vs groupwise: {out}");
    assert_eq!(code(&locmoe(dir.path(), &["comm-sim", "--volumes", "v.csv", "--tp-group", "3"])), 2);
}

#[test]
fn comm_sim_from_run_reports_three_routers() {
    let dir = TempDir::new().unwrap();
    let o = locmoe(dir.path(), &["comm-sim", "--epochs", "2", "--tokens-per-cluster", "100", "--out", "s.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "router,entropy,never_used,locality_fraction,plain_seconds,groupwise_seconds,compute_seconds,visible_comm_seconds,comm_share"
    );
    let routers: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(routers, ["hash", "switch", "loc"]);
}
