use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn npmix(args: &[&str]) -> Output {
    npmix_env(args, &[])
}

fn npmix_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_npmix"));
    cmd.args(args).env_remove("NPMIX_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(rows: &[Vec<String>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

fn simulate(dir: &Path, design: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("sim-{design}-{n}-{seed}"));
    ok(&npmix(&["simulate", "--design", design, "-n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&out)]));
    out
}

fn fit(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fit", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    npmix(&args)
}

#[test]
fn simulate_writes_data_labels_and_manifest() {
    let dir = TempDir::new().unwrap();
    let a = simulate(dir.path(), "circle-pair", 500, 4);
    let (header, rows) = read_csv(&a.join("data.csv"));
    assert_eq!(header, vec!["x1", "x2"]);
    assert_eq!(rows.len(), 500);
    let (lh, labels) = read_csv(&a.join("labels.csv"));
    assert_eq!(lh, vec!["label"]);
    assert!(labels.iter().all(|l| l[0] == "1" || l[0] == "2"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("truth.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["truth"]["weights"].as_array().unwrap().len(), 2);

    let b = dir.path().join("again");
    ok(&npmix(&["simulate", "--design", "circle-pair", "-n", "500", "--seed", "4", "--out", s(&b)]));
    assert_eq!(fs::read(a.join("data.csv")).unwrap(), fs::read(b.join("data.csv")).unwrap());

    // A manifest can be fed back as the truth.
    let c = dir.path().join("from-manifest");
    ok(&npmix(&["simulate", "--truth", s(&a.join("truth.json")), "-n", "500", "--seed", "4", "--out", s(&c)]));
    assert_eq!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());

    assert_eq!(npmix(&["simulate", "--design", "nope", "-n", "5", "--out", s(&c)]).status.code(), Some(2));
}

#[test]
fn fit_snapshot_count_and_determinism() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "two-gaussians", 800, 1);
    let data = sim.join("data.csv");
    let args = ["-k", "2", "--iters", "120", "--burnin", "20", "--thin", "4", "--seed", "5"];
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&fit(&data, &a, &args));
    ok(&fit(&data, &b, &args));
    let snaps = fs::read_to_string(a.join("snapshots.jsonl")).unwrap();
    assert_eq!(snaps.lines().count(), 1 + (120 - 20) / 4);
    assert!(snaps.lines().next().unwrap().contains("\"format\":\"npmix-snapshots\",\"version\":1"));
    assert_eq!(snaps.as_bytes(), fs::read(b.join("snapshots.jsonl")).unwrap().as_slice());

    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run_log.json")).unwrap()).unwrap();
    assert_eq!(log["snapshots"], 25);
    assert!(log["elapsed_secs"].as_f64().unwrap() >= 0.0);
    assert_eq!(log["mh_acceptance"].as_array().unwrap().len(), 2);

    // Thread count changes the schedule, not the draws.
    let out = npmix_env(
        &["fit", "--data", s(&data), "--out", s(&c), "-k", "2", "--iters", "120", "--burnin", "20", "--thin", "4", "--seed", "5"],
        &[("NPMIX_THREADS", "3")],
    );
    ok(&out);
    assert_eq!(snaps.as_bytes(), fs::read(c.join("snapshots.jsonl")).unwrap().as_slice());
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.join("run_log.json")).unwrap()).unwrap();
    assert_eq!(log["threads"], 3);
}

#[test]
fn fit_input_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert_eq!(fit(&dir.path().join("missing.csv"), &out, &["-k", "2"]).status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x\n1.0\nnan\n").unwrap();
    let o = fit(&bad, &out, &["-k", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    fs::write(&bad, "x\n1.0\nabc\n").unwrap();
    assert_eq!(fit(&bad, &out, &["-k", "2"]).status.code(), Some(2));
    fs::write(&bad, "x,y\n1.0\n").unwrap();
    assert_eq!(fit(&bad, &out, &["-k", "2"]).status.code(), Some(2));

    let sim = simulate(dir.path(), "two-gaussians", 50, 1);
    let data = sim.join("data.csv");
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "k = 2\ntua = 1.0\n").unwrap();
    let o = fit(&data, &out, &["--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tua"));

    let cfg = dir.path().join("regions.toml");
    fs::write(&cfg, "k = 3\nregions_fixed = true\nfixed_regions = [{ center = [-3.0], halfwidth = 1.0 }, { center = [3.0], halfwidth = 1.0 }]\n").unwrap();
    assert_eq!(fit(&data, &out, &["--config", s(&cfg)]).status.code(), Some(2));

    assert_eq!(fit(&data, &out, &[]).status.code(), Some(2));
    assert_eq!(fit(&data, &out, &["-k", "2", "--iters", "10", "--burnin", "10"]).status.code(), Some(2));
    assert_eq!(npmix(&["fit", "--data"]).status.code(), Some(2));
}

#[test]
fn flags_override_config() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "two-gaussians", 300, 2);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "k = 3\niters = 500\nburnin = 100\ntau = 2.0\n").unwrap();
    let out = dir.path().join("o");
    ok(&fit(&sim.join("data.csv"), &out, &["--config", s(&cfg), "-k", "2", "--iters", "30", "--burnin", "10", "--set", "tau=0.5"]));
    let snaps = fs::read_to_string(out.join("snapshots.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(snaps.lines().next().unwrap()).unwrap();
    assert_eq!(header["hyperparams"]["k"], 2);
    assert_eq!(header["hyperparams"]["tau"], 0.5);
    assert_eq!(header["iters"], 30);
    assert_eq!(snaps.lines().count(), 21);
}

fn parse_exact(field: &str) -> f64 {
    let v: f64 = field.parse().unwrap();
    assert_eq!(format!("{v:.16e}"), field, "not written with 17 significant digits");
    v
}

#[test]
fn summarize_outputs() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "two-gaussians", 1000, 3);
    let fitdir = dir.path().join("fit");
    ok(&fit(&sim.join("data.csv"), &fitdir, &["-k", "2", "--iters", "200", "--burnin", "50", "--thin", "3"]));
    let sum = dir.path().join("sum");
    ok(&npmix(&["summarize", "--snapshots", s(&fitdir.join("snapshots.jsonl")), "--out", s(&sum), "--grid-points", "201", "--cdf"]));

    let (h, w) = read_csv(&sum.join("weights.csv"));
    assert_eq!(h, vec!["component", "mean", "lo", "hi"]);
    let means: Vec<f64> = w.iter().map(|r| parse_exact(&r[1])).collect();
    assert!((means.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!((means[0] - 0.7).abs() < 0.05);

    for name in ["density_mixture.csv", "density_component_1.csv", "density_component_2.csv"] {
        let (h, rows) = read_csv(&sum.join(name));
        assert_eq!(h, vec!["grid", "mean", "lo", "hi"]);
        assert_eq!(rows.len(), 201);
        for r in &rows {
            for f in r {
                parse_exact(f);
            }
        }
        let g = column(&rows, 0);
        assert!(g.windows(2).all(|p| p[0] < p[1]));
        let m = column(&rows, 1);
        let area: f64 = g.windows(2).zip(m.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum();
        assert!((area - 1.0).abs() < 1e-3, "{name}: area {area}");
    }
    let (h, rows) = read_csv(&sum.join("cdf.csv"));
    assert_eq!(h, vec!["grid", "cdf"]);
    let f = column(&rows, 1);
    assert!(f.windows(2).all(|p| p[0] <= p[1]));
    assert!((f[f.len() - 1] - 1.0).abs() < 1e-3);

    let lo = dir.path().join("lo");
    ok(&npmix(&["summarize", "--snapshots", s(&fitdir.join("snapshots.jsonl")), "--out", s(&lo), "--grid-points", "11", "--lo", "-1", "--hi", "1"]));
    let (_, rows) = read_csv(&lo.join("density_mixture.csv"));
    assert_eq!(column(&rows, 0)[0], -1.0);
    assert_eq!(
        npmix(&["summarize", "--snapshots", s(&fitdir.join("snapshots.jsonl")), "--out", s(&lo), "--lo", "1", "--hi", "-1"]).status.code(),
        Some(2)
    );
}

#[test]
fn constant_chain_has_degenerate_bands() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "two-gaussians", 200, 3);
    let fitdir = dir.path().join("fit");
    ok(&fit(&sim.join("data.csv"), &fitdir, &["-k", "2", "--iters", "20", "--burnin", "10"]));
    let text = fs::read_to_string(fitdir.join("snapshots.jsonl")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let record = lines.next().unwrap();
    let constant = dir.path().join("constant.jsonl");
    fs::write(&constant, format!("{header}\n{record}\n{record}\n{record}\n{record}\n")).unwrap();
    let sum = dir.path().join("sum");
    ok(&npmix(&["summarize", "--snapshots", s(&constant), "--out", s(&sum), "--grid-points", "64"]));
    for name in ["density_mixture.csv", "density_component_1.csv", "weights.csv"] {
        let (_, rows) = read_csv(&sum.join(name));
        for r in rows {
            let n = r.len();
            assert_eq!(r[n - 3], r[n - 2], "{name}");
            assert_eq!(r[n - 3], r[n - 1], "{name}");
        }
    }

    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, format!("{header}\n{{\"iteration\":1}}\n")).unwrap();
    assert_eq!(npmix(&["summarize", "--snapshots", s(&broken), "--out", s(&sum)]).status.code(), Some(2));
    fs::write(&broken, "{\"format\":\"other\"}\n").unwrap();
    assert_eq!(npmix(&["summarize", "--snapshots", s(&broken), "--out", s(&sum)]).status.code(), Some(2));
}

#[test]
fn two_dimensional_round_trip() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "circle-pair", 1500, 1);
    let fitdir = dir.path().join("fit");
    ok(&fit(&sim.join("data.csv"), &fitdir, &["-k", "2", "--iters", "60", "--burnin", "20", "--thin", "4"]));
    let sum = dir.path().join("sum");
    ok(&npmix(&["summarize", "--snapshots", s(&fitdir.join("snapshots.jsonl")), "--out", s(&sum), "--grid-points", "15", "--cdf"]));
    let (h, rows) = read_csv(&sum.join("density_component_2.csv"));
    assert_eq!(h, vec!["grid_1", "grid_2", "mean", "lo", "hi"]);
    assert_eq!(rows.len(), 225);
    let (h, rows) = read_csv(&sum.join("cdf.csv"));
    assert_eq!(h, vec!["grid_1", "grid_2", "cdf"]);
    let f = column(&rows, 2);
    for i in 0..15 {
        for j in 0..15 {
            if j > 0 {
                assert!(f[i * 15 + j] >= f[i * 15 + j - 1] - 1e-12);
            }
            if i > 0 {
                assert!(f[i * 15 + j] >= f[(i - 1) * 15 + j] - 1e-12);
            }
        }
    }
    assert!(f[224] > 0.99);
}

#[test]
fn shipped_configs_round_trip() {
    let dir = TempDir::new().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_str().unwrap().to_string();
        let design = stem.split('.').next().unwrap();
        let sim = simulate(dir.path(), design, 600, 7);
        let fitdir = dir.path().join(format!("fit-{stem}"));
        ok(&fit(&sim.join("data.csv"), &fitdir, &["--config", s(&path), "--iters", "40", "--burnin", "10", "--thin", "1"]));
        let sum = dir.path().join(format!("sum-{stem}"));
        ok(&npmix(&["summarize", "--snapshots", s(&fitdir.join("snapshots.jsonl")), "--out", s(&sum), "--grid-points", "21", "--cdf"]));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn hermite_split_command() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "hermite-pair", 100_000, 11);
    let data = sim.join("data.csv");
    let out = dir.path().join("split");
    let o = npmix(&["hermite-split", "--data", s(&data), "--c1", "0", "--c2", "8", "--sigma", "1", "--halfwidth1", "0.5", "--out", s(&out)]);
    ok(&o);
    assert!(!String::from_utf8_lossy(&o.stderr).contains("warning"));
    let (h, rows) = read_csv(&out.join("weights.csv"));
    assert_eq!(h, vec!["component", "estimate"]);
    let w = column(&rows, 1);
    assert!((w[0] - 0.6).abs() < 0.05 && (w[1] - 0.4).abs() < 0.05, "{w:?}");
    for k in 1..=2 {
        let (_, rows) = read_csv(&out.join(format!("component_{k}.csv")));
        let (x, f) = (column(&rows, 0), column(&rows, 1));
        let area: f64 = x.windows(2).zip(f.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum();
        assert!((area - 1.0).abs() < 1e-6, "component {k}: {area}");
    }

    let o = npmix(&["hermite-split", "--data", s(&data), "--c1", "0", "--c2", "8", "--sigma", "1", "--halfwidth1", "2", "--ell", "3", "--out", s(&out)]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: ell = 3 is below 22"));

    let o = npmix(&["hermite-split", "--data", s(&data), "--c1", "0", "--c2", "0.01", "--sigma", "1", "--halfwidth1", "0.5", "--ell", "30", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let o = npmix(&["hermite-split", "--data", s(&data), "--c1", "8", "--c2", "0", "--sigma", "1", "--halfwidth1", "0.5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_separation_command() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "two-gaussians", 400, 1);
    let o = npmix(&["check-separation", "--truth", s(&sim.join("truth.json")), "--gap", "0.5"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("separated = true"));

    // One component with two pieces 5 apart, the other 2.4 from the first piece.
    let truth = r#"{"weights":[0.5,0.5],"components":[
        {"kind":"gaussian_mixture","weights":[0.5,0.5],"means":[[0.0],[5.0]],"covs":[[1.0],[1.0]]},
        {"kind":"laplace","mu":2.4,"b":1.0}]}"#;
    let p = dir.path().join("t.json");
    fs::write(&p, truth).unwrap();
    let o = npmix(&["check-separation", "--truth", s(&p), "--gap", "1"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(text.contains("separated = false") && text.contains("max_within = 5"), "{text}");

    let single = r#"{"weights":[1.0],"components":[{"kind":"laplace","mu":0.0,"b":1.0}]}"#;
    fs::write(&p, single).unwrap();
    let o = npmix(&["check-separation", "--truth", s(&p), "--gap", "1"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("separated = true"));

    let fitdir = dir.path().join("fit");
    ok(&fit(&sim.join("data.csv"), &fitdir, &["-k", "2", "--iters", "30", "--burnin", "10"]));
    let o = npmix(&["check-separation", "--snapshots", s(&fitdir.join("snapshots.jsonl")), "--gap", "0.5"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("snapshots = 20"));
    assert_eq!(npmix(&["check-separation", "--truth", s(&p), "--gap", "0"]).status.code(), Some(2));
}
