use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn omnimoe(args: &[&str]) -> Output {
    omnimoe_env(args, &[])
}

fn omnimoe_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_omnimoe"));
    cmd.args(args).env_remove("OMNIMOE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small layer shared by the weight-file tests.
const SMALL: [&str; 8] = ["--set", "d=6", "--set", "n_rows=4", "--set", "n_cols=4", "--set", "k=3"];

fn export_small(dir: &TempDir, name: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let mut args = vec!["export", "--seed", "5", "--out", path_str(&path)];
    args.extend(SMALL);
    let o = omnimoe(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn verify_passes_and_reports_json_lines() {
    let o = omnimoe(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 5);
    for rec in &lines {
        assert_eq!(rec["status"], "pass", "{rec}");
        assert!(rec["max_error"].as_f64().unwrap() <= rec["tolerance"].as_f64().unwrap());
    }
}

#[test]
fn injected_fault_fails_verify() {
    let o = omnimoe(&["verify", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let failed: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.contains("\"status\":\"fail\""))
        .map(str::to_owned)
        .collect();
    assert!(failed.iter().any(|l| l.contains("executor_equivalence")), "{failed:?}");
}

#[test]
fn select_block_below_k_is_a_config_error() {
    let o = omnimoe(&["verify", "--set", "k=16", "--set", "select_block=8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("select_block"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_key_names_the_key() {
    let o = omnimoe(&["comm-sim", "--set", "nonsense=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonsense"));
}

#[test]
fn export_import_round_trip_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let original = export_small(&dir, "a.omoe");
    let copy = dir.path().join("b.omoe");
    let o = omnimoe(&["import", path_str(&original), "--out", path_str(&copy)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&original).unwrap(), std::fs::read(&copy).unwrap());
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["d"], 6);
    assert_eq!(summary["n"], 16);
    assert_eq!(summary["k"], 3);
}

#[test]
fn damaged_weight_files_give_distinct_errors() {
    let dir = TempDir::new().unwrap();
    let good = std::fs::read(export_small(&dir, "good.omoe")).unwrap();

    let truncated = dir.path().join("short.omoe");
    std::fs::write(&truncated, &good[..good.len() - 7]).unwrap();
    let o = omnimoe(&["import", path_str(&truncated)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).to_lowercase().contains("truncated"), "{}", stderr(&o));

    let mut bad = good.clone();
    bad[0] = b'X';
    let bad_magic = dir.path().join("magic.omoe");
    std::fs::write(&bad_magic, &bad).unwrap();
    let o = omnimoe(&["import", path_str(&bad_magic)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).to_lowercase().contains("magic"), "{}", stderr(&o));
}

#[test]
fn zero_token_routes_to_first_ids_with_uniform_gates() {
    let dir = TempDir::new().unwrap();
    let weights = export_small(&dir, "w.omoe");
    let run = || {
        let o = omnimoe(&["route", path_str(&weights), "--precision", "64"]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let listing = run();
    let mut lines = listing.lines();
    assert_eq!(lines.next(), Some("token,rank,flat_id,row,col,score,gate"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 3);
    let ids: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(ids, vec![0, 1, 2]);
    let gates: Vec<f64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!((gates.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!(gates.iter().all(|g| (g - 1.0 / 3.0).abs() <= 1e-6));
    assert_eq!(run(), listing);
}

#[test]
fn route_reads_token_files() {
    let dir = TempDir::new().unwrap();
    let weights = export_small(&dir, "w.omoe");
    let tokens = dir.path().join("tokens.txt");
    std::fs::write(&tokens, "1 0 0 0 0 0\n0,1,0,0,0,-1\n").unwrap();
    let o = omnimoe(&["route", path_str(&weights), "--tokens", path_str(&tokens)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 2 * 3);

    std::fs::write(&tokens, "1 2 3\n").unwrap();
    let o = omnimoe(&["route", path_str(&weights), "--tokens", path_str(&tokens)]);
    assert_eq!(o.status.code(), Some(2));
}

const TOY: [&str; 13] = [
    "train-toy", "--set", "d=8", "--set", "n_rows=4", "--set", "n_cols=4", "--set", "k=2", "--set", "tokens=32", "--set", "steps=15",
];

#[test]
fn zero_lr_gives_a_flat_curve() {
    let mut args = TOY.to_vec();
    args.extend(["--set", "lr=0"]);
    let o = omnimoe(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 16);
    let tail = |r: &str| r.split_once(',').unwrap().1.to_owned();
    assert!(rows.iter().all(|r| tail(r) == tail(rows[0])), "{text}");
}

#[test]
fn seeded_toy_run_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("curve.csv");
    let mut args = TOY.to_vec();
    args.extend(["--set", "lr=1", "--seed", "9", "--out", path_str(&file)]);
    assert!(omnimoe(&args).status.success());
    let first = std::fs::read(&file).unwrap();
    assert!(omnimoe(&args).status.success());
    assert_eq!(std::fs::read(&file).unwrap(), first);
    assert!(first.starts_with(b"# omnimoe-toy-curve v1\nstep,loss,usage,unevenness\n"));
}

#[test]
fn comm_sim_backward_plateaus() {
    let o = omnimoe(&["comm-sim", "--set", "comm_ns=4096,65536,1048576,4194304"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().nth(1), Some("R,N,L,K,d,bytes_per_element,fwd_bytes,fwd_cross_rank_bytes,bwd_bytes,n_active,expected_active"));
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let fwd: Vec<f64> = rows.iter().map(|r| r[6]).collect();
    assert!(fwd.windows(2).all(|w| w[0] == w[1]));
    let bwd: Vec<f64> = rows.iter().map(|r| r[8]).collect();
    assert!(bwd.windows(2).all(|w| w[1] >= w[0]));
    assert!((bwd[3] - bwd[2]) / bwd[3] < 0.01);
}

#[test]
fn bench_emits_schema_and_formula_columns() {
    let o = omnimoe(&[
        "bench", "--set", "d=16", "--set", "n_rows=8", "--set", "n_cols=8", "--set", "bench_ks=1,4", "--set", "bench_ls=1,32",
        "--set", "repeats=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# omnimoe-bench v1"));
    assert_eq!(lines.next(), Some("K,L,n_active,t_token_ms,t_expert_ms,speedup,D_token,D_expert,eta"));
    for line in lines {
        let c: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (k, l, n_active) = (c[0], c[1], c[2]);
        assert_eq!(c[6], 2.0 * 16.0 * l * k);
        assert_eq!(c[7], 2.0 * 16.0 * n_active);
    }
}

#[test]
fn seed_precedence() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# comm sweep\nseed = 1\ncomm_ns = 4096\n").unwrap();
    let c = path_str(&conf);
    let sweep = |args: &[&str], env: &[(&str, &str)]| stdout(&omnimoe_env(args, env));
    let with_seed = |s: &str| sweep(&["comm-sim", "--set", "comm_ns=4096", "--seed", s], &[]);
    let (s1, s2, s3) = (with_seed("1"), with_seed("2"), with_seed("3"));
    assert_ne!(s1, s2);
    assert_eq!(sweep(&["comm-sim", "--config", c], &[]), s1);
    assert_eq!(sweep(&["comm-sim", "--config", c], &[("OMNIMOE_SEED", "2")]), s2);
    assert_eq!(sweep(&["comm-sim", "--config", c, "--seed", "3"], &[("OMNIMOE_SEED", "2")]), s3);
}
