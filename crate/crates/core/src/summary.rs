//! Posterior summaries of a chain: density grids with pointwise bands, weight
//! tables, CDF grids and distances between densities on a grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{invalid, Result};
use crate::model::{plugin_predictive_cov, DataSummary, Dataset, Hyperparams, MixtureDensity, MixtureParams};
use crate::quad::GaussLegendre;
use crate::rngdist::normal_cdf;
use crate::sampler::ChainOutput;
use crate::stats::{linspace, quantile_sorted, trapezoid};

/// Points per axis of the default grid.
pub const DEFAULT_GRID_POINTS: usize = 512;

/// What to evaluate on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Mixture,
    /// Component density `G_k` (0-based, canonical order).
    Component(usize),
    /// `w_k G_k`.
    WeightedComponent(usize),
}

/// Pointwise posterior mean and quantile band on a tensor grid. Values are
/// stored row-major with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub axes: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub band_level: f64,
}

impl DensityGrid {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Coordinates of grid point `idx`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        grid_point(&self.axes, idx)
    }
}

fn grid_len(axes: &[Vec<f64>]) -> usize {
    axes.iter().map(|a| a.len()).product()
}

fn grid_point(axes: &[Vec<f64>], mut idx: usize) -> Vec<f64> {
    let mut p = vec![0.0; axes.len()];
    for d in (0..axes.len()).rev() {
        let n = axes[d].len();
        p[d] = axes[d][idx % n];
        idx /= n;
    }
    p
}

fn check_axes(axes: &[Vec<f64>]) -> Result<()> {
    if axes.is_empty() {
        return invalid("grid needs at least one axis");
    }
    for a in axes {
        if a.is_empty() || a.windows(2).any(|w| !(w[1] > w[0])) || a.iter().any(|v| !v.is_finite()) {
            return invalid("grid axes must be finite and strictly increasing");
        }
    }
    Ok(())
}

/// Evaluate `target` for every snapshot at every grid point and summarise
/// pointwise by the mean and the central `level` quantile band.
pub fn density_band(chain: &ChainOutput, target: Target, axes: &[Vec<f64>], level: f64) -> Result<DensityGrid> {
    band_from_snapshots(
        &chain.snapshots.iter().map(|s| &s.params).collect::<Vec<_>>(),
        &chain.hyperparams,
        target,
        axes,
        level,
    )
}

/// [`density_band`] over an explicit list of parameter snapshots.
pub fn band_from_snapshots(
    snapshots: &[&MixtureParams],
    hp: &Hyperparams,
    target: Target,
    axes: &[Vec<f64>],
    level: f64,
) -> Result<DensityGrid> {
    if snapshots.is_empty() {
        return invalid("chain has no snapshots");
    }
    if !(0.0..1.0).contains(&level) {
        return invalid(format!("band level must lie in [0, 1), got {level}"));
    }
    check_axes(axes)?;
    if axes.len() != hp.dim {
        return invalid(format!("grid has {} axes for {}-dimensional data", axes.len(), hp.dim));
    }
    match target {
        Target::Component(k) | Target::WeightedComponent(k) if k >= hp.k => {
            return invalid(format!("component {} does not exist (K = {})", k + 1, hp.k));
        }
        _ => {}
    }
    let dens: Vec<MixtureDensity> = snapshots.iter().map(|p| MixtureDensity::new(p, hp)).collect::<Result<_>>()?;
    let eval = |d: &MixtureDensity, x: &[f64]| match target {
        Target::Mixture => d.mixture_logpdf(x).exp(),
        Target::Component(k) => d.component_logpdf(k, x).exp(),
        Target::WeightedComponent(k) => d.weighted_component_logpdf(k, x).exp(),
    };
    let (plo, phi) = (0.5 * (1.0 - level), 1.0 - 0.5 * (1.0 - level));
    let rows: Vec<(f64, f64, f64)> = (0..grid_len(axes))
        .into_par_iter()
        .map(|idx| {
            let x = grid_point(axes, idx);
            let mut v: Vec<f64> = dens.iter().map(|d| eval(d, &x)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(f64::total_cmp);
            (mean, quantile_sorted(&v, plo), quantile_sorted(&v, phi))
        })
        .collect();
    Ok(DensityGrid {
        axes: axes.to_vec(),
        mean: rows.iter().map(|r| r.0).collect(),
        lower: rows.iter().map(|r| r.1).collect(),
        upper: rows.iter().map(|r| r.2).collect(),
        band_level: level,
    })
}

/// One row of a [`WeightTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    /// 1..=K for components, 0 for the background.
    pub component: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
    pub level: f64,
}

/// Default interval level for weight tables (16% and 84% quantiles).
pub const WEIGHT_LEVEL: f64 = 0.68;

/// Posterior mean and central `level` interval of each weight, in canonical
/// component order with the background (if any) last.
pub fn weight_table(chain: &ChainOutput, level: f64) -> Result<WeightTable> {
    if chain.snapshots.is_empty() {
        return invalid("chain has no snapshots");
    }
    if !(0.0..1.0).contains(&level) {
        return invalid(format!("interval level must lie in [0, 1), got {level}"));
    }
    let k = chain.hyperparams.k;
    let nw = chain.snapshots[0].params.w.len();
    let (plo, phi) = (0.5 * (1.0 - level), 1.0 - 0.5 * (1.0 - level));
    let rows = (0..nw)
        .map(|j| {
            let mut v: Vec<f64> = chain.snapshots.iter().map(|s| s.params.w[j]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(f64::total_cmp);
            WeightRow {
                component: if j < k { j + 1 } else { 0 },
                mean,
                lower: quantile_sorted(&v, plo),
                upper: quantile_sorted(&v, phi),
            }
        })
        .collect();
    Ok(WeightTable { rows, level })
}

// ---------------------------------------------------------------------------
// Bivariate normal CDF
// ---------------------------------------------------------------------------

fn gl20() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(20))
}

/// `P(X > h, Y > k)` for standard bivariate normals with correlation `r`
/// (Drezner–Wesolowsky with Genz's refinements).
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    use std::f64::consts::PI;
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { normal_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return normal_cdf(-h);
    }
    let gl = gl20();
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let hk = h * k;
        let asr = r.asin();
        let mut s = 0.0;
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            let sn = (0.5 * asr * (x + 1.0)).sin();
            s += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return s * asr / (4.0 * PI) + normal_cdf(-h) * normal_cdf(-k);
    }
    let k = if r < 0.0 { -k } else { k };
    let hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -0.5 * (bs / as_ + hk);
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        }
        if -hk < 100.0 {
            let b = bs.sqrt();
            let sp = (2.0 * PI).sqrt() * normal_cdf(-b / a);
            bvn -= (-0.5 * hk).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            let xs = (a * (x + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            let asr = -0.5 * (bs / xs + hk);
            if asr > -100.0 {
                let sp = 1.0 + c * xs * (1.0 + d * xs);
                let ep = (-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs;
                bvn += a * w * asr.exp() * (ep - sp);
            }
        }
        bvn /= -2.0 * PI;
    }
    if r > 0.0 {
        bvn + normal_cdf(-h.max(k))
    } else if h >= k {
        -bvn
    } else {
        let l = if h < 0.0 { normal_cdf(k) - normal_cdf(h) } else { normal_cdf(-h) - normal_cdf(-k) };
        l - bvn
    }
}

/// `P(X <= x, Y <= y)` for a bivariate normal with mean `mu` and row-major covariance `cov`.
pub fn bvn_cdf(x: f64, y: f64, mu: &[f64], cov: &[f64]) -> f64 {
    let (s1, s2) = (cov[0].sqrt(), cov[3].sqrt());
    let h = (x - mu[0]) / s1;
    let k = (y - mu[1]) / s2;
    let r = (cov[1] / (s1 * s2)).clamp(-1.0, 1.0);
    if r == 0.0 {
        return normal_cdf(h) * normal_cdf(k);
    }
    bvn_upper(-h, -k, r).clamp(0.0, 1.0)
}

/// Posterior-mean CDF `F(x, y)` on the lattice `xs` by `ys`, row-major with `y` fastest.
pub fn cdf_grid(chain: &ChainOutput, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let hp = &chain.hyperparams;
    if hp.dim != 2 {
        return invalid("cdf_grid needs two-dimensional data");
    }
    if chain.snapshots.is_empty() {
        return invalid("chain has no snapshots");
    }
    check_axes(&[xs.to_vec(), ys.to_vec()])?;
    let plug = plugin_predictive_cov(hp);
    let snaps: Vec<&MixtureParams> = chain.snapshots.iter().map(|s| &s.params).collect();
    let s = snaps.len() as f64;
    let out = (0..xs.len() * ys.len())
        .into_par_iter()
        .map(|idx| {
            let (x, y) = (xs[idx / ys.len()], ys[idx % ys.len()]);
            snaps.iter().map(|p| snapshot_cdf(p, hp, &plug, x, y)).sum::<f64>() / s
        })
        .collect();
    Ok(out)
}

fn snapshot_cdf(p: &MixtureParams, hp: &Hyperparams, plug: &[f64], x: f64, y: f64) -> f64 {
    let mut f = 0.0;
    for (k, comp) in p.components.iter().enumerate() {
        let mut g: f64 = comp.atoms.iter().map(|a| a.beta * bvn_cdf(x, y, &a.u, &a.cov)).sum();
        if comp.rest > 0.0 {
            g += comp.rest * bvn_cdf(x, y, &comp.c, plug);
        }
        f += p.w[k] * g;
    }
    if let Some(win) = &hp.background {
        let fx = ((x - win.lo[0]) / (win.hi[0] - win.lo[0])).clamp(0.0, 1.0);
        let fy = ((y - win.lo[1]) / (win.hi[1] - win.lo[1])).clamp(0.0, 1.0);
        f += p.w[p.k()] * fx * fy;
    }
    f.clamp(0.0, 1.0)
}

/// Cumulative trapezoid of a 1-D density grid, starting from zero.
pub fn cumulative_1d(xs: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..xs.len() {
        acc += 0.5 * (xs[i] - xs[i - 1]) * (f[i] + f[i - 1]);
        out.push(acc);
    }
    out
}

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    L1,
    /// `(int (sqrt f - sqrt g)^2)^(1/2)`.
    Hellinger,
}

/// Tensor-product trapezoid of grid values (row-major, last axis fastest).
pub fn integrate_grid(axes: &[Vec<f64>], values: &[f64]) -> f64 {
    match axes.len() {
        0 => 0.0,
        1 => trapezoid(&axes[0], values),
        _ => {
            let inner: usize = axes[1..].iter().map(|a| a.len()).product();
            let partial: Vec<f64> = values.chunks(inner).map(|c| integrate_grid(&axes[1..], c)).collect();
            trapezoid(&axes[0], &partial)
        }
    }
}

/// Distance between grid values `a` and a density `b` evaluated on the same grid.
pub fn density_distance(axes: &[Vec<f64>], a: &[f64], b: impl Fn(&[f64]) -> f64, metric: Metric) -> f64 {
    let bv: Vec<f64> = (0..a.len()).map(|i| b(&grid_point(axes, i))).collect();
    grid_distance(axes, a, &bv, metric)
}

/// Distance between two sets of values on one grid.
pub fn grid_distance(axes: &[Vec<f64>], a: &[f64], b: &[f64], metric: Metric) -> f64 {
    let diff: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| match metric {
            Metric::L1 => (x - y).abs(),
            Metric::Hellinger => (x.max(0.0).sqrt() - y.max(0.0).sqrt()).powi(2),
        })
        .collect();
    let v = integrate_grid(axes, &diff);
    match metric {
        Metric::L1 => v,
        Metric::Hellinger => v.sqrt(),
    }
}

/// Default grid: `points` per axis over the data range padded by three sample sds.
pub fn default_grid(data: &Dataset, points: usize) -> Result<Vec<Vec<f64>>> {
    if data.n() == 0 {
        return invalid("cannot build a default grid without data");
    }
    Ok(grid_for_summary(&data.summary(), points))
}

/// [`default_grid`] from precomputed data summaries.
pub fn grid_for_summary(s: &DataSummary, points: usize) -> Vec<Vec<f64>> {
    (0..s.min.len())
        .map(|d| {
            let pad = 3.0 * if s.sd[d] > 0.0 { s.sd[d] } else { 1.0 };
            linspace(s.min[d] - pad, s.max[d] + pad, points.max(2))
        })
        .collect()
}
