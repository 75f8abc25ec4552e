//! Data CSV, result CSV and snapshot file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use npmix::model::{Atom, ComponentState, DataSummary, Dataset, Hyperparams, MixtureParams};
use npmix::sampler::{ChainOutput, Snapshot};
use serde::{Deserialize, Serialize};

use crate::error::{input, CliError, CliResult, Context};

/// Floats in result CSVs: 17 significant digits, enough to round-trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Headered CSV of numeric columns. A header-only file gives an empty dataset.
pub fn read_data(path: &Path) -> CliResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).at(path)?;
    let names: Vec<String> = rdr.headers().at(path)?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return input(format!("{}: missing header row", path.display()));
    }
    let m = names.len();
    let mut x = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.at(path)?;
        let line = i + 2;
        if rec.len() != m {
            return input(format!("{}: line {line} has {} fields, expected {m}", path.display(), rec.len()));
        }
        for (field, name) in rec.iter().zip(&names) {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Input(format!("{}: line {line}, column '{name}': '{field}' is not a number", path.display())))?;
            if !v.is_finite() {
                return input(format!("{}: line {line}, column '{name}' is not finite", path.display()));
            }
            x.push(v);
        }
    }
    Ok(Dataset::new(m, x, names)?)
}

pub fn write_data(path: &Path, data: &Dataset) -> CliResult<()> {
    let names: Vec<String> = if data.names().len() == data.dim() {
        data.names().to_vec()
    } else if data.dim() == 1 {
        vec!["x".into()]
    } else {
        (1..=data.dim()).map(|d| format!("x{d}")).collect()
    };
    let rows = (0..data.n()).map(|i| data.row(i).iter().map(|v| fmt_f64(*v)).collect());
    write_rows(path, &names, rows)
}

pub fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    w.write_record(header).at(path)?;
    for r in rows {
        w.write_record(&r).at(path)?;
    }
    w.flush().at(path)
}

pub const SNAPSHOT_FORMAT: &str = "npmix-snapshots";
pub const SNAPSHOT_VERSION: u32 = 1;

/// First line of a snapshot file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub columns: Vec<String>,
    /// Absent when the chain was run without data.
    pub data: Option<DataSummary>,
    pub hyperparams: Hyperparams,
}

/// Region of one component in a snapshot record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionRecord {
    pub c: Vec<f64>,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_mean: Option<f64>,
    pub rest: f64,
}

/// One active atom; `k` and `j` are 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomRecord {
    pub k: usize,
    pub j: usize,
    pub u: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Row-major lower triangle of the covariance (dimension > 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_lower: Option<Vec<f64>>,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub iteration: usize,
    pub xi: f64,
    pub w: Vec<f64>,
    pub regions: Vec<RegionRecord>,
    pub atoms: Vec<AtomRecord>,
}

impl SnapshotRecord {
    pub fn from_snapshot(s: &Snapshot, dim: usize) -> Self {
        let mut atoms = Vec::new();
        for (k, comp) in s.params.components.iter().enumerate() {
            for (j, a) in comp.atoms.iter().enumerate() {
                let (sigma, sigma_lower) = if dim == 1 {
                    (Some(a.sigma()), None)
                } else {
                    let lower = (0..dim).flat_map(|d| (0..=d).map(move |e| (d, e))).map(|(d, e)| a.cov[d * dim + e]).collect();
                    (None, Some(lower))
                };
                atoms.push(AtomRecord {
                    k: k + 1,
                    j: j + 1,
                    u: a.u.clone(),
                    sigma,
                    sigma_lower,
                    beta: a.beta,
                });
            }
        }
        Self {
            iteration: s.iteration,
            xi: s.xi,
            w: s.params.w.clone(),
            regions: s
                .params
                .components
                .iter()
                .map(|c| RegionRecord {
                    c: c.c.clone(),
                    r: c.r,
                    loc_mean: c.loc_mean,
                    rest: c.rest,
                })
                .collect(),
            atoms,
        }
    }

    pub fn to_snapshot(&self, dim: usize) -> CliResult<Snapshot> {
        let mut components: Vec<ComponentState> = self
            .regions
            .iter()
            .map(|r| ComponentState {
                c: r.c.clone(),
                r: r.r,
                loc_mean: r.loc_mean,
                atoms: vec![],
                rest: r.rest,
            })
            .collect();
        for a in &self.atoms {
            let Some(comp) = a.k.checked_sub(1).and_then(|k| components.get_mut(k)) else {
                return input(format!("iteration {}: atom refers to component {}", self.iteration, a.k));
            };
            if a.u.len() != dim {
                return input(format!("iteration {}: atom location has the wrong dimension", self.iteration));
            }
            let cov = match (a.sigma, &a.sigma_lower) {
                (Some(s), None) if dim == 1 => vec![s * s],
                (None, Some(l)) if l.len() == dim * (dim + 1) / 2 => {
                    let mut cov = vec![0.0; dim * dim];
                    let mut it = l.iter();
                    for d in 0..dim {
                        for e in 0..=d {
                            let v = *it.next().expect("length checked");
                            cov[d * dim + e] = v;
                            cov[e * dim + d] = v;
                        }
                    }
                    cov
                }
                _ => return input(format!("iteration {}: atom scale does not match the dimension", self.iteration)),
            };
            comp.atoms.push(Atom {
                u: a.u.clone(),
                cov,
                beta: a.beta,
            });
        }
        Ok(Snapshot {
            iteration: self.iteration,
            params: MixtureParams {
                w: self.w.clone(),
                components,
            },
            xi: self.xi,
        })
    }
}

pub fn write_snapshots(path: &Path, chain: &ChainOutput, data: &Dataset) -> CliResult<()> {
    let dim = chain.hyperparams.dim;
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        seed: chain.seed,
        iters: chain.iters,
        burnin: chain.burnin,
        thin: chain.thin,
        columns: data.names().to_vec(),
        data: (data.n() > 0).then(|| data.summary()),
        hyperparams: chain.hyperparams.clone(),
    };
    let mut w = BufWriter::new(File::create(path).at(path)?);
    let mut line = |v: String| writeln!(w, "{v}").at(path);
    line(serde_json::to_string(&header).at(path)?)?;
    for s in &chain.snapshots {
        line(serde_json::to_string(&SnapshotRecord::from_snapshot(s, dim)).at(path)?)?;
    }
    drop(line);
    w.flush().at(path)
}

pub fn read_snapshots(path: &Path) -> CliResult<(SnapshotHeader, ChainOutput)> {
    let rdr = BufReader::new(File::open(path).at(path)?);
    let mut lines = rdr.lines();
    let first = match lines.next() {
        Some(l) => l.at(path)?,
        None => return input(format!("{}: empty snapshot file", path.display())),
    };
    let header: SnapshotHeader = serde_json::from_str(&first).at(path)?;
    if header.format != SNAPSHOT_FORMAT {
        return input(format!("{}: not a snapshot file (format '{}')", path.display(), header.format));
    }
    if header.version != SNAPSHOT_VERSION {
        return input(format!("{}: unsupported snapshot version {}", path.display(), header.version));
    }
    let dim = header.hyperparams.dim;
    let mut snapshots = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.at(path)?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: SnapshotRecord = serde_json::from_str(&l).map_err(|e| CliError::Input(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        if rec.regions.len() != header.hyperparams.k || rec.w.len() != header.hyperparams.n_weights() {
            return input(format!("{}: line {}: record does not match K", path.display(), i + 2));
        }
        snapshots.push(rec.to_snapshot(dim)?);
    }
    let chain = ChainOutput {
        hyperparams: header.hyperparams.clone(),
        seed: header.seed,
        iters: header.iters,
        burnin: header.burnin,
        thin: header.thin,
        snapshots,
        loglik: vec![],
        mh_acceptance: vec![],
        mh_step: vec![],
        elapsed_secs: 0.0,
        final_state: None,
    };
    Ok((header, chain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 1.0 - f64::EPSILON] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn snapshot_record_round_trip() {
        for dim in [1usize, 2] {
            let cov = if dim == 1 { vec![0.3] } else { vec![2.0, 0.4, 0.4, 1.0] };
            let snap = Snapshot {
                iteration: 7,
                xi: 0.25,
                params: MixtureParams {
                    w: vec![0.6, 0.4],
                    components: (0..2)
                        .map(|k| ComponentState {
                            c: vec![k as f64; dim],
                            r: 0.4,
                            loc_mean: None,
                            atoms: vec![
                                Atom { u: vec![0.1 + k as f64; dim], cov: cov.clone(), beta: 0.7 },
                                Atom { u: vec![-0.1 + k as f64; dim], cov: cov.clone(), beta: 0.2 },
                            ],
                            rest: 0.1,
                        })
                        .collect(),
                },
            };
            let rec = SnapshotRecord::from_snapshot(&snap, dim);
            let text = serde_json::to_string(&rec).unwrap();
            let back: SnapshotRecord = serde_json::from_str(&text).unwrap();
            let got = back.to_snapshot(dim).unwrap();
            // sigma is stored, so the 1-D variance survives only up to a square root round trip.
            if dim == 1 {
                for (a, b) in got.params.components.iter().zip(&snap.params.components) {
                    for (x, y) in a.atoms.iter().zip(&b.atoms) {
                        assert!((x.cov[0] - y.cov[0]).abs() < 1e-15);
                    }
                }
            } else {
                assert_eq!(got, snap);
            }
        }
    }

    #[test]
    fn bad_atom_reference_is_rejected() {
        let rec = SnapshotRecord {
            iteration: 0,
            xi: 0.1,
            w: vec![1.0],
            regions: vec![RegionRecord { c: vec![0.0], r: 1.0, loc_mean: None, rest: 1.0 }],
            atoms: vec![AtomRecord { k: 2, j: 1, u: vec![0.0], sigma: Some(1.0), sigma_lower: None, beta: 0.0 }],
        };
        assert!(rec.to_snapshot(1).is_err());
    }
}
