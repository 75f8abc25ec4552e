use std::fs;
use std::path::Path;

use npmix::geometry::{FiniteSupportSet, DEFAULT_MERGE_TOL};
use npmix::hermite::{self, ComponentDensity, HermiteBasis};
use npmix::sampler::{self, ChainOutput};
use npmix::stats::linspace;
use npmix::summary::{self, DensityGrid, Target};
use npmix::synthgen::{self, SyntheticTruth};
use serde::Serialize;
use toml::Value;

use crate::config::RawConfig;
use crate::error::{input, CliError, CliResult, Context};
use crate::io::{fmt_f64, read_data, read_snapshots, write_data, write_rows, write_snapshots};
use crate::{FitArgs, HermiteArgs, SeparationArgs, SimulateArgs, SummarizeArgs};

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).at(dir)
}

#[derive(Serialize)]
struct RunLog {
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    iters: usize,
    burnin: usize,
    thin: usize,
    threads: usize,
    snapshots: usize,
    elapsed_secs: f64,
    mh_acceptance: Vec<f64>,
    mean_acceptance: f64,
    mh_step: Vec<f64>,
    final_loglik: Option<f64>,
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let data = read_data(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    for s in &a.set {
        cfg.set_assignment(s)?;
    }
    let ints = [
        ("k", a.k.map(|v| v as i64)),
        ("iters", a.iters.map(|v| v as i64)),
        ("burnin", a.burnin.map(|v| v as i64)),
        ("thin", a.thin.map(|v| v as i64)),
        ("threads", a.threads.map(|v| v as i64)),
    ];
    for (key, v) in ints {
        if let Some(v) = v {
            cfg.set(key, Value::Integer(v));
        }
    }
    if let Some(seed) = a.seed {
        let v = i64::try_from(seed).map_err(|_| CliError::Input("seed must fit in a signed 64-bit integer".into()))?;
        cfg.set("seed", Value::Integer(v));
    }
    let rc = cfg.run_controls()?;
    let hp = cfg.hyperparams(&data)?;
    let plan = rc.plan();
    plan.validate()?;

    make_dir(&a.out)?;
    let chain = sampler::run(&data, &hp, &plan, rc.iters, rc.burnin, rc.thin, rc.seed)?;
    write_snapshots(&a.out.join("snapshots.jsonl"), &chain, &data)?;

    let log = RunLog {
        n: data.n(),
        dim: data.dim(),
        k: hp.k,
        seed: rc.seed,
        iters: rc.iters,
        burnin: rc.burnin,
        thin: rc.thin,
        threads: if plan.parallel { plan.threads } else { 1 },
        snapshots: chain.snapshots.len(),
        elapsed_secs: chain.elapsed_secs,
        mean_acceptance: chain.mean_acceptance(),
        mh_acceptance: chain.mh_acceptance.clone(),
        mh_step: chain.mh_step.clone(),
        final_loglik: chain.loglik.last().copied().filter(|v| v.is_finite()),
    };
    let path = a.out.join("run_log.json");
    fs::write(&path, serde_json::to_string_pretty(&log).at(&path)?).at(&path)?;
    let acc = if log.mean_acceptance.is_finite() { format!("{:.3}", log.mean_acceptance) } else { "n/a".into() };
    eprintln!("fit: {} snapshots in {:.1} s, halfwidth acceptance {acc}", log.snapshots, log.elapsed_secs);
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct Manifest {
    design: Option<String>,
    seed: u64,
    n: usize,
    truth: SyntheticTruth,
}

fn read_truth(path: &Path) -> CliResult<SyntheticTruth> {
    let text = fs::read_to_string(path).at(path)?;
    let mut v: serde_json::Value = serde_json::from_str(&text).at(path)?;
    // Accept a whole manifest or a bare truth.
    let truth_value = match v.get_mut("truth") {
        Some(t) => t.take(),
        None => v,
    };
    let t: SyntheticTruth = serde_json::from_value(truth_value).at(path)?;
    Ok(SyntheticTruth::new(t.weights, t.components)?)
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let truth = match (&a.design, &a.truth) {
        (Some(name), _) => synthgen::design(name, a.seed)?,
        (None, Some(p)) => read_truth(p)?,
        (None, None) => return input("either --design or --truth is required"),
    };
    let (data, labels) = synthgen::sample_mixture(&truth, a.n, a.seed)?;
    make_dir(&a.out)?;
    write_data(&a.out.join("data.csv"), &data)?;
    write_rows(&a.out.join("labels.csv"), &["label".to_string()], labels.iter().map(|l| vec![l.to_string()]))?;
    let manifest = Manifest {
        design: a.design.clone(),
        seed: a.seed,
        n: a.n,
        truth,
    };
    let path = a.out.join("truth.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).at(&path)?).at(&path)
}

fn write_density(path: &Path, g: &DensityGrid) -> CliResult<()> {
    let mut header: Vec<String> = if g.axes.len() == 1 {
        vec!["grid".into()]
    } else {
        (1..=g.axes.len()).map(|d| format!("grid_{d}")).collect()
    };
    header.extend(["mean", "lo", "hi"].map(String::from));
    let rows = (0..g.len()).map(|i| {
        let mut r: Vec<String> = g.point(i).into_iter().map(fmt_f64).collect();
        r.extend([g.mean[i], g.lower[i], g.upper[i]].map(fmt_f64));
        r
    });
    write_rows(path, &header, rows)
}

fn summary_axes(a: &SummarizeArgs, header: &crate::io::SnapshotHeader, dim: usize) -> CliResult<Vec<Vec<f64>>> {
    let points = a.grid_points.unwrap_or(if dim == 1 { 512 } else { 101 });
    if points < 2 {
        return input("--grid-points must be at least 2");
    }
    let mut axes = match &header.data {
        Some(s) => summary::grid_for_summary(s, points),
        None if a.lo.len() == dim && a.hi.len() == dim => vec![vec![]; dim],
        None => return input("the snapshot file has no data summary; give --lo and --hi for every axis"),
    };
    if !a.lo.is_empty() || !a.hi.is_empty() {
        if a.lo.len() != dim || a.hi.len() != dim {
            return input(format!("--lo and --hi need {dim} values each"));
        }
        for d in 0..dim {
            if !(a.lo[d] < a.hi[d]) {
                return input(format!("axis {}: --lo must be below --hi", d + 1));
            }
            axes[d] = linspace(a.lo[d], a.hi[d], points);
        }
    }
    Ok(axes)
}

pub fn summarize(a: &SummarizeArgs) -> CliResult<()> {
    let (header, chain) = read_snapshots(&a.snapshots)?;
    if chain.snapshots.is_empty() {
        return input(format!("{}: no snapshots to summarize", a.snapshots.display()));
    }
    if !(a.level > 0.0 && a.level < 1.0) || !(a.weight_level > 0.0 && a.weight_level < 1.0) {
        return input("credible levels must lie in (0, 1)");
    }
    let dim = chain.hyperparams.dim;
    let axes = summary_axes(a, &header, dim)?;
    make_dir(&a.out)?;

    let mixture = summary::density_band(&chain, Target::Mixture, &axes, a.level)?;
    write_density(&a.out.join("density_mixture.csv"), &mixture)?;
    for k in 0..chain.hyperparams.k {
        let g = summary::density_band(&chain, Target::Component(k), &axes, a.level)?;
        write_density(&a.out.join(format!("density_component_{}.csv", k + 1)), &g)?;
    }

    let table = summary::weight_table(&chain, a.weight_level)?;
    let header_w = ["component", "mean", "lo", "hi"].map(String::from);
    write_rows(
        &a.out.join("weights.csv"),
        &header_w,
        table.rows.iter().map(|r| vec![r.component.to_string(), fmt_f64(r.mean), fmt_f64(r.lower), fmt_f64(r.upper)]),
    )?;

    if a.cdf {
        write_cdf(&a.out.join("cdf.csv"), &chain, &axes, &mixture)?;
    }
    Ok(())
}

fn write_cdf(path: &Path, chain: &ChainOutput, axes: &[Vec<f64>], mixture: &DensityGrid) -> CliResult<()> {
    match axes.len() {
        1 => {
            let f = summary::cumulative_1d(&axes[0], &mixture.mean);
            write_rows(
                path,
                &["grid".to_string(), "cdf".to_string()],
                axes[0].iter().zip(&f).map(|(x, v)| vec![fmt_f64(*x), fmt_f64(*v)]),
            )
        }
        2 => {
            let f = summary::cdf_grid(chain, &axes[0], &axes[1])?;
            let ny = axes[1].len();
            write_rows(
                path,
                &["grid_1", "grid_2", "cdf"].map(String::from),
                f.iter().enumerate().map(|(i, v)| vec![fmt_f64(axes[0][i / ny]), fmt_f64(axes[1][i % ny]), fmt_f64(*v)]),
            )
        }
        m => input(format!("cdf.csv is available for 1-D and 2-D data, not {m}-D")),
    }
}

fn write_component(path: &Path, f: &ComponentDensity, points: usize) -> CliResult<()> {
    let (lo, hi) = f.support();
    let xs = linspace(lo, hi, points);
    write_rows(
        path,
        &["grid".to_string(), "density".to_string()],
        xs.iter().map(|&x| vec![fmt_f64(x), fmt_f64(f.eval(x))]),
    )
}

pub fn hermite_split(a: &HermiteArgs) -> CliResult<()> {
    let data = read_data(&a.data)?;
    if a.column == 0 || a.column > data.dim() {
        return input(format!("--column must be between 1 and {}", data.dim()));
    }
    let xs = data.column(a.column - 1);
    if xs.len() < 2 {
        return input("the Hermite estimator needs at least two observations");
    }
    let h2 = a.halfwidth2.unwrap_or(a.halfwidth1);
    if !(a.halfwidth1 > 0.0 && h2 > 0.0) {
        return input("halfwidths must be positive");
    }
    let r = a.halfwidth1.max(h2);
    let ell = match a.ell {
        Some(ell) => {
            let need = hermite::min_ell_for_halfwidth(r, a.sigma);
            if ell < need {
                eprintln!("warning: ell = {ell} is below {need}, the level the truncation bound needs for halfwidth {r} and sigma {}", a.sigma);
            }
            ell
        }
        None => hermite::choose_ell(a.epsilon.unwrap_or_else(|| hermite::default_epsilon(xs.len())), r, a.sigma)?,
    };
    if a.grid_points < 2 {
        return input("--grid-points must be at least 2");
    }
    let basis = HermiteBasis::new(a.sigma, a.c1, a.c2, ell)?;
    let split = hermite::hermite_split(&xs, basis, a.halfwidth1, h2, a.bandwidth)?;

    make_dir(&a.out)?;
    write_component(&a.out.join("component_1.csv"), &split.f1, a.grid_points)?;
    write_component(&a.out.join("component_2.csv"), &split.f2, a.grid_points)?;
    let (w1, w2) = split.weights();
    write_rows(
        &a.out.join("weights.csv"),
        &["component".to_string(), "estimate".to_string()],
        [(1, w1), (2, w2)].into_iter().map(|(k, w)| vec![k.to_string(), fmt_f64(w)]),
    )?;
    println!("ell = {ell}");
    println!("bandwidth = {}", split.bandwidth);
    println!("condition = {:e}", split.condition);
    println!("w1 = {w1}");
    println!("w2 = {w2}");
    Ok(())
}

pub fn check_separation(a: &SeparationArgs) -> CliResult<()> {
    if !(a.gap > 0.0) {
        return input("--gap must be positive");
    }
    if let Some(p) = &a.truth {
        let truth = read_truth(p)?;
        let rep = truth.separation(a.gap)?;
        println!("max_within = {}", rep.max_within);
        println!("min_between = {}", rep.min_between);
        println!("separated = {}", rep.separated);
        return Ok(());
    }
    let Some(p) = &a.snapshots else {
        return input("either --truth or --snapshots is required");
    };
    let (_, chain) = read_snapshots(p)?;
    let (mut checked, mut separated) = (0usize, 0usize);
    'snap: for s in &chain.snapshots {
        let mut sets = Vec::with_capacity(s.params.k());
        for comp in &s.params.components {
            if comp.atoms.is_empty() {
                continue 'snap;
            }
            sets.push(FiniteSupportSet::new(comp.atoms.iter().map(|at| at.u.clone()).collect(), DEFAULT_MERGE_TOL)?);
        }
        checked += 1;
        if npmix::geometry::check_separation_c2(&sets, a.gap)?.separated {
            separated += 1;
        }
    }
    println!("snapshots = {}", chain.snapshots.len());
    println!("checked = {checked}");
    println!("separated = {separated}");
    if checked > 0 {
        println!("fraction = {}", separated as f64 / checked as f64);
    }
    Ok(())
}
