//! The mixture-of-DP-mixtures model: hyperparameters, chain state, prior and
//! base-measure densities, and density evaluation for a parameter snapshot.
//!
//! Component `k` is a DP mixture of Gaussians whose atoms are confined to a
//! region. On the location axis the region is the cube `||u - c_k||_inf <= r_k`
//! holding the atom means; on the scale axis (1-D only) it is the interval
//! `[c_k - r_k, c_k + r_k]` holding the atom standard deviations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::geometry::linf;
use crate::quad::GaussLegendre;
use crate::rngdist::{
    inverse_gamma_interval_mass, inverse_gamma_logpdf, inverse_wishart_logpdf, log_std_interval_mass,
    normal_logpdf, sample_gamma, standard_normal, truncated_inverse_gamma_quantile,
    RngStream, SpdMatrix,
};
use crate::stats::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    names: Vec<String>,
}

impl Dataset {
    /// `x` holds `n * dim` values row by row. An empty dataset is allowed so
    /// the sampler can run on the prior alone.
    pub fn new(dim: usize, x: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return invalid("dataset dimension must be positive");
        }
        if x.len() % dim != 0 {
            return invalid(format!("{} values do not fill rows of width {dim}", x.len()));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value in row {}, column {}", pos / dim, pos % dim));
        }
        let names = if names.is_empty() {
            (0..dim).map(|d| format!("x{}", d + 1)).collect()
        } else if names.len() == dim {
            names
        } else {
            return invalid(format!("{} column names for {dim} columns", names.len()));
        };
        Ok(Self { dim, x, names })
    }

    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(1, xs.to_vec(), vec![])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("rows have different lengths");
        }
        Self::new(dim, rows.iter().flatten().copied().collect(), vec![])
    }

    pub fn empty(dim: usize) -> Self {
        Self::new(dim.max(1), vec![], vec![]).expect("valid empty dataset")
    }

    pub fn n(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x[i * self.dim + d]).collect()
    }

    pub fn summary(&self) -> DataSummary {
        let cols: Vec<Vec<f64>> = (0..self.dim).map(|d| self.column(d)).collect();
        DataSummary {
            n: self.n(),
            min: cols.iter().map(|c| c.iter().cloned().fold(f64::INFINITY, f64::min)).collect(),
            max: cols.iter().map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect(),
            mean: cols.iter().map(|c| crate::stats::mean(c)).collect(),
            sd: cols.iter().map(|c| crate::stats::sd(c)).collect(),
        }
    }
}

/// Per-column ranges and moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SeparationAxis {
    #[default]
    Location,
    Scale,
}

/// A user-supplied region (center and halfwidth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: Vec<f64>,
    pub halfwidth: f64,
}

/// Observation window of the uniform background component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Window {
    pub fn log_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).ln()).sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
}

/// Fixed model constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Number of nonparametric components.
    pub k: usize,
    pub dim: usize,
    /// DP concentration.
    pub dp_alpha: f64,
    /// Prior mean of the region centers (location axis) or of the location
    /// hyper-means (scale axis).
    pub mu0: Vec<f64>,
    /// Prior standard deviation per coordinate matching `mu0`.
    pub eta: Vec<f64>,
    /// Base-measure spread of atom means around their center, per coordinate.
    pub sigma0: Vec<f64>,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub tau: f64,
    pub nu: u32,
    /// Inverse-gamma shape and scale for kernel variances (1-D).
    pub theta1: f64,
    pub theta2: f64,
    /// Inverse-Wishart degrees of freedom and row-major scale (m > 1).
    pub iw_df: f64,
    pub iw_scale: Vec<f64>,
    /// Dirichlet concentration for the mixture weights; `None` means one over
    /// the number of weights.
    pub dirichlet_conc: Option<f64>,
    pub separation_axis: SeparationAxis,
    /// Prior on the centers of the scale intervals (scale axis only).
    pub scale_mu0: f64,
    pub scale_eta: f64,
    pub regions_fixed: bool,
    pub fixed_regions: Vec<Region>,
    pub background: Option<Window>,
}

impl Hyperparams {
    /// Generic defaults for unit-scale data.
    pub fn new(k: usize, dim: usize) -> Self {
        let mut iw_scale = vec![0.0; dim * dim];
        for d in 0..dim {
            iw_scale[d * dim + d] = 1.0;
        }
        Self {
            k,
            dim,
            dp_alpha: 1.0,
            mu0: vec![0.0; dim],
            eta: vec![10.0; dim],
            sigma0: vec![1.0; dim],
            gamma_shape: 2.0,
            gamma_rate: 2.0,
            tau: 1.0,
            nu: 2,
            theta1: 2.0,
            theta2: 1.0,
            iw_df: dim as f64 + 2.0,
            iw_scale,
            dirichlet_conc: None,
            separation_axis: SeparationAxis::Location,
            scale_mu0: 1.0,
            scale_eta: 1.0,
            regions_fixed: false,
            fixed_regions: vec![],
            background: None,
        }
    }

    /// Defaults scaled to the data: centers around the data mean with spread
    /// twice the data sd, kernel variances about `(sd / (10K))^2` a priori. The total sd
    /// includes the spread between components, so kernels start narrow.
    /// For m > 1 the inverse-Wishart scale is isotropic with prior mean
    /// `(s / (4K))^2 I`, `s^2` the average coordinate variance.
    pub fn for_data(data: &Dataset, k: usize) -> Self {
        let dim = data.dim();
        let mut hp = Self::new(k, dim);
        if data.n() < 2 {
            return hp;
        }
        let s = data.summary();
        let sd: Vec<f64> = s.sd.iter().map(|v| if *v > 0.0 { *v } else { 1.0 }).collect();
        let kf = k.max(1) as f64;
        hp.mu0 = s.mean.clone();
        hp.eta = sd.iter().map(|v| 2.0 * v).collect();
        hp.sigma0 = sd.iter().map(|v| v / kf).collect();
        let scale = sd.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        hp.theta2 = scale / (100.0 * kf * kf);
        for d in 0..dim {
            for e in 0..dim {
                hp.iw_scale[d * dim + e] = if d == e { (hp.iw_df - dim as f64 - 1.0) * scale / (16.0 * kf * kf) } else { 0.0 };
            }
        }
        hp.gamma_rate = 2.0 / sd.iter().cloned().fold(0.0, f64::max);
        hp.scale_mu0 = sd[0];
        hp.scale_eta = sd[0];
        hp
    }

    /// Number of mixture weights, including the background.
    pub fn n_weights(&self) -> usize {
        self.k + usize::from(self.background.is_some())
    }

    pub fn conc(&self) -> f64 {
        self.dirichlet_conc.unwrap_or(1.0 / self.n_weights() as f64)
    }

    pub fn iw_scale_matrix(&self) -> Result<SpdMatrix> {
        SpdMatrix::from_row_slice(self.dim, &self.iw_scale)
    }

    pub fn is_scale(&self) -> bool {
        self.separation_axis == SeparationAxis::Scale
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim;
        if self.k == 0 {
            return invalid("K must be at least 1");
        }
        if m == 0 {
            return invalid("dimension must be positive");
        }
        for (name, v) in [("mu0", &self.mu0), ("eta", &self.eta), ("sigma0", &self.sigma0)] {
            if v.len() != m {
                return invalid(format!("{name} has length {} but the data have {m} columns", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return invalid(format!("{name} must be finite"));
            }
        }
        let positives = [
            ("dp_alpha", self.dp_alpha),
            ("gamma_shape", self.gamma_shape),
            ("gamma_rate", self.gamma_rate),
            ("tau", self.tau),
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("scale_eta", self.scale_eta),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if self.eta.iter().chain(&self.sigma0).any(|v| !(*v > 0.0)) {
            return invalid("eta and sigma0 entries must be positive");
        }
        if self.nu == 0 {
            return invalid("nu must be a positive integer");
        }
        if let Some(c) = self.dirichlet_conc {
            if !(c > 0.0 && c.is_finite()) {
                return invalid(format!("dirichlet_conc must be positive, got {c}"));
            }
        }
        if m > 1 {
            if !(self.iw_df > m as f64 - 1.0) {
                return invalid(format!("iw_df must exceed {}, got {}", m - 1, self.iw_df));
            }
            self.iw_scale_matrix()?;
        }
        if self.is_scale() && m != 1 {
            return invalid("scale-axis separation is only available for 1-D data");
        }
        if self.regions_fixed {
            if self.fixed_regions.len() != self.k {
                return invalid(format!("{} fixed regions given for K = {}", self.fixed_regions.len(), self.k));
            }
            for reg in &self.fixed_regions {
                if reg.center.len() != m || !(reg.halfwidth > 0.0) || reg.center.iter().any(|v| !v.is_finite()) {
                    return invalid("fixed regions need finite centers of the data dimension and positive halfwidths");
                }
                if self.is_scale() && reg.center[0] + reg.halfwidth <= 0.0 {
                    return invalid("scale regions must intersect (0, inf)");
                }
            }
            for i in 0..self.k {
                for j in i + 1..self.k {
                    let (a, b) = (&self.fixed_regions[i], &self.fixed_regions[j]);
                    if linf(&a.center, &b.center) <= a.halfwidth + b.halfwidth {
                        return invalid(format!("fixed regions {} and {} overlap", i + 1, j + 1));
                    }
                }
            }
        }
        if let Some(w) = &self.background {
            if w.lo.len() != m || w.hi.len() != m || w.lo.iter().zip(&w.hi).any(|(a, b)| !(a < b)) {
                return invalid("background window needs lo < hi in every coordinate");
            }
        }
        Ok(())
    }
}

/// One DP atom. `cov` is `[sigma^2]` in 1-D and the row-major covariance otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub u: Vec<f64>,
    pub cov: Vec<f64>,
    pub beta: f64,
}

impl Atom {
    pub fn sigma(&self) -> f64 {
        self.cov[0].sqrt()
    }
}

/// Region and instantiated atoms of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentState {
    pub c: Vec<f64>,
    pub r: f64,
    /// Location hyper-mean of the atoms (scale axis only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_mean: Option<f64>,
    pub atoms: Vec<Atom>,
    /// Stick mass not held by any instantiated atom.
    pub rest: f64,
}

/// Everything needed to evaluate the mixture density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Component weights; the background weight, when present, is last.
    pub w: Vec<f64>,
    pub components: Vec<ComponentState>,
}

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Canonical order: ascending first coordinate of the region center.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.k()).collect();
        idx.sort_by(|&a, &b| self.components[a].c[0].total_cmp(&self.components[b].c[0]));
        idx
    }

    pub fn relabeled(&self) -> Self {
        let order = self.canonical_order();
        let mut w: Vec<f64> = order.iter().map(|&k| self.w[k]).collect();
        w.extend_from_slice(&self.w[self.k()..]);
        Self {
            w,
            components: order.iter().map(|&k| self.components[k].clone()).collect(),
        }
    }
}

/// Slice auxiliaries: per-atom minimum slice and its owner, plus the global threshold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceAux {
    pub rho_star_kj: Vec<Vec<f64>>,
    pub i_star_kj: Vec<Vec<usize>>,
    pub rho_star_bg: f64,
    pub i_star_bg: usize,
    pub rho_star: f64,
}

/// Full MCMC state. Labels use `z in 0..K` for components and `z == K` for the background.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub params: MixtureParams,
    pub z: Vec<usize>,
    pub s: Vec<usize>,
    pub slice: SliceAux,
    pub xi: f64,
}

impl ChainState {
    /// Label in the external convention: 0 is the background, 1..=K the components.
    pub fn external_label(&self, i: usize) -> usize {
        let k = self.params.k();
        if self.z[i] == k {
            0
        } else {
            self.z[i] + 1
        }
    }
}

// ---------------------------------------------------------------------------
// Prior densities
// ---------------------------------------------------------------------------

fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `min_{i<j} -tau / gap_ij^nu` with L-infinity center distance; `-inf` on overlap,
/// 0 when there are fewer than two regions.
pub fn repulsion_term(c: &[Vec<f64>], r: &[f64], tau: f64, nu: u32) -> f64 {
    let mut term: f64 = 0.0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let gap = linf(&c[i], &c[j]) - r[i] - r[j];
            if gap <= 0.0 {
                return f64::NEG_INFINITY;
            }
            term = term.min(-tau / gap.powi(nu as i32));
        }
    }
    term
}

/// `zeta(c, r) = exp(repulsion_term)`.
pub fn zeta(c: &[Vec<f64>], r: &[f64], tau: f64, nu: u32) -> f64 {
    repulsion_term(c, r, tau, nu).exp()
}

fn center_prior_params(hp: &Hyperparams) -> (Vec<f64>, Vec<f64>) {
    if hp.is_scale() {
        (vec![hp.scale_mu0], vec![hp.scale_eta])
    } else {
        (hp.mu0.clone(), hp.eta.clone())
    }
}

/// Unnormalised log density of the repulsive prior on regions (any dimension).
pub fn log_repulsive_prior_mv(c: &[Vec<f64>], r: &[f64], hp: &Hyperparams) -> f64 {
    let (mu0, eta) = center_prior_params(hp);
    let mut lp = 0.0;
    for (ci, &ri) in c.iter().zip(r) {
        if hp.is_scale() && ci[0] + ri <= 0.0 {
            return f64::NEG_INFINITY;
        }
        lp += ci.iter().zip(mu0.iter().zip(&eta)).map(|(x, (m, e))| normal_logpdf(*x, *m, *e)).sum::<f64>();
        lp += gamma_logpdf(ri, hp.gamma_shape, hp.gamma_rate);
    }
    if c.len() >= 2 {
        lp += repulsion_term(c, r, hp.tau, hp.nu);
    }
    lp
}

/// 1-D form of [`log_repulsive_prior_mv`].
pub fn log_repulsive_prior(c: &[f64], r: &[f64], hp: &Hyperparams) -> f64 {
    let cv: Vec<Vec<f64>> = c.iter().map(|&x| vec![x]).collect();
    log_repulsive_prior_mv(&cv, r, hp)
}

/// Exact draw of (c, r) from the repulsive prior by rejection: propose from
/// the independent factors and accept with probability `zeta`.
pub fn sample_repulsive_prior(hp: &Hyperparams, rng: &mut RngStream) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (mu0, eta) = center_prior_params(hp);
    for _ in 0..1_000_000 {
        let c: Vec<Vec<f64>> = (0..hp.k)
            .map(|_| mu0.iter().zip(&eta).map(|(m, e)| m + e * standard_normal(rng)).collect())
            .collect();
        let mut r = Vec::with_capacity(hp.k);
        for _ in 0..hp.k {
            r.push(sample_gamma(hp.gamma_shape, hp.gamma_rate, rng)?);
        }
        if hp.is_scale() && c.iter().zip(&r).any(|(ci, ri)| ci[0] + ri <= 0.0) {
            continue;
        }
        let z = zeta(&c, &r, hp.tau, hp.nu);
        if crate::rngdist::open01(rng) < z {
            return Ok((c, r));
        }
    }
    Err(Error::NumericalMass("repulsive prior rejection sampler did not accept in 1e6 proposals".into()))
}

/// `log prod_d (1 - 2 Phi(-r / sigma0_d))`: mass of the region under the
/// untruncated location base measure.
pub fn log_region_mass(r: f64, sigma0: &[f64]) -> f64 {
    sigma0.iter().map(|s| log_std_interval_mass(-r / s, r / s)).sum()
}

/// Admissible `sigma^2` range of a scale region.
pub fn scale_interval_sq(c: f64, r: f64) -> (f64, f64) {
    let lo = (c - r).max(0.0);
    (lo * lo, (c + r) * (c + r))
}

/// Log mass of the scale region under the inverse-gamma prior on `sigma^2`.
pub fn log_scale_region_mass(c: f64, r: f64, hp: &Hyperparams) -> f64 {
    let (lo, hi) = scale_interval_sq(c, r);
    inverse_gamma_interval_mass(hp.theta1, hp.theta2, lo, hi).ln()
}

/// Log density of the base measure of component `k` at `(u, cov)`, with the
/// `2 sigma` Jacobian for the 1-D scale parametrisation. `-inf` off support.
pub fn log_base_measure(u: &[f64], cov: &[f64], comp: &ComponentState, hp: &Hyperparams) -> f64 {
    let m = hp.dim;
    if hp.is_scale() {
        let s2 = cov[0];
        let (lo, hi) = scale_interval_sq(comp.c[0], comp.r);
        if !(s2 >= lo && s2 <= hi) || s2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let loc = comp.loc_mean.unwrap_or(hp.mu0[0]);
        return normal_logpdf(u[0], loc, hp.sigma0[0]) + inverse_gamma_logpdf(s2, hp.theta1, hp.theta2)
            + (2.0 * s2.sqrt()).ln()
            - log_scale_region_mass(comp.c[0], comp.r, hp);
    }
    if linf(u, &comp.c) > comp.r {
        return f64::NEG_INFINITY;
    }
    let loc: f64 = (0..m).map(|d| normal_logpdf(u[d], comp.c[d], hp.sigma0[d])).sum::<f64>()
        - log_region_mass(comp.r, &hp.sigma0);
    if m == 1 {
        let s2 = cov[0];
        if s2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        loc + inverse_gamma_logpdf(s2, hp.theta1, hp.theta2) + (2.0 * s2.sqrt()).ln()
    } else {
        let Ok(scale) = hp.iw_scale_matrix() else {
            return f64::NEG_INFINITY;
        };
        loc + inverse_wishart_logpdf(&DMatrix::from_row_slice(m, m, cov), hp.iw_df, &scale)
    }
}

// ---------------------------------------------------------------------------
// Density evaluation
// ---------------------------------------------------------------------------

/// Gaussian kernels of all atoms in a flat layout, for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub dim: usize,
    /// `comp_start[k]..comp_start[k+1]` indexes the atoms of component `k`.
    pub comp_start: Vec<usize>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    /// Row-major inverse Cholesky factor per atom (`1/sigma` in 1-D).
    pub linv: Vec<f64>,
    /// `-m/2 log(2 pi) - 1/2 log det Sigma`.
    pub log_norm: Vec<f64>,
}

impl KernelTable {
    pub fn build(params: &MixtureParams, dim: usize) -> Result<Self> {
        let total: usize = params.components.iter().map(|c| c.atoms.len()).sum();
        let mut t = Self {
            dim,
            comp_start: Vec::with_capacity(params.k() + 1),
            beta: Vec::with_capacity(total),
            mean: Vec::with_capacity(total * dim),
            linv: Vec::with_capacity(total * dim * dim),
            log_norm: Vec::with_capacity(total),
        };
        t.comp_start.push(0);
        for comp in &params.components {
            for atom in &comp.atoms {
                t.push_atom(atom)?;
            }
            t.comp_start.push(t.beta.len());
        }
        Ok(t)
    }

    fn push_atom(&mut self, atom: &Atom) -> Result<()> {
        let m = self.dim;
        self.beta.push(atom.beta);
        self.mean.extend_from_slice(&atom.u);
        if m == 1 {
            let s2 = atom.cov[0];
            if !(s2 > 0.0) || !s2.is_finite() {
                return Err(Error::InvalidState(format!("kernel variance {s2} is not positive")));
            }
            self.linv.push(1.0 / s2.sqrt());
            self.log_norm.push(-0.5 * LN_2PI - 0.5 * s2.ln());
        } else {
            let (linv, logdet) = chol_inverse(&atom.cov, m)?;
            self.linv.extend_from_slice(&linv);
            self.log_norm.push(-0.5 * m as f64 * LN_2PI - 0.5 * logdet);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Log kernel density of atom `a` at `x`.
    #[inline]
    pub fn log_kernel(&self, a: usize, x: &[f64]) -> f64 {
        let m = self.dim;
        if m == 1 {
            let z = (x[0] - self.mean[a]) * self.linv[a];
            return self.log_norm[a] - 0.5 * z * z;
        }
        let mu = &self.mean[a * m..(a + 1) * m];
        let l = &self.linv[a * m * m..(a + 1) * m * m];
        let mut q = 0.0;
        for d in 0..m {
            let mut z = 0.0;
            for e in 0..=d {
                z += l[d * m + e] * (x[e] - mu[e]);
            }
            q += z * z;
        }
        self.log_norm[a] - 0.5 * q
    }
}

/// Inverse of the lower Cholesky factor (row-major) and `log det`.
pub fn chol_inverse(cov: &[f64], m: usize) -> Result<(Vec<f64>, f64)> {
    let mat = DMatrix::from_row_slice(m, m, cov);
    let chol = mat
        .cholesky()
        .ok_or_else(|| Error::InvalidState("kernel covariance is not positive definite".into()))?;
    let l = chol.l();
    let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or_else(|| Error::InvalidState("singular Cholesky factor".into()))?;
    let mut out = vec![0.0; m * m];
    for d in 0..m {
        for e in 0..m {
            out[d * m + e] = linv[(d, e)];
        }
    }
    Ok((out, logdet))
}

/// Number of quadrature nodes over the kernel-variance prior in the predictive.
const PRED_NODES: usize = 16;

/// Covariance of the Gaussian used for the residual stick mass when m > 1:
/// the prior mean of the kernel covariance plus the location spread.
pub fn plugin_predictive_cov(hp: &Hyperparams) -> Vec<f64> {
    let m = hp.dim;
    let denom = (hp.iw_df - m as f64 - 1.0).max(1.0);
    let mut cov: Vec<f64> = hp.iw_scale.iter().map(|v| v / denom).collect();
    for d in 0..m {
        cov[d * m + d] += hp.sigma0[d] * hp.sigma0[d];
    }
    cov
}

/// Prior predictive of a fresh atom in one component.
#[derive(Debug, Clone)]
enum Predictive {
    /// Truncated-normal location, inverse-gamma variance (1-D location axis).
    Location { c: f64, r: f64, sigma0: f64, log_z: f64, nodes: Vec<(f64, f64)> },
    /// Free location, truncated inverse-gamma variance (scale axis).
    Scale { loc: f64, sigma0: f64, nodes: Vec<(f64, f64)> },
    /// Gaussian approximation `N(c, E[Sigma] + Sigma1)` (m > 1).
    Plugin { c: Vec<f64>, linv: Vec<f64>, log_norm: f64 },
}

/// Quantile nodes and weights of the (possibly truncated) inverse-gamma prior.
fn variance_nodes(hp: &Hyperparams, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let gl = GaussLegendre::new(PRED_NODES);
    gl.nodes
        .iter()
        .zip(&gl.weights)
        .map(|(&t, &w)| (truncated_inverse_gamma_quantile(hp.theta1, hp.theta2, lo, hi, 0.5 * (t + 1.0)), 0.5 * w))
        .collect()
}

impl Predictive {
    fn build(comp: &ComponentState, hp: &Hyperparams, shared: &[(f64, f64)]) -> Result<Self> {
        let m = hp.dim;
        if hp.is_scale() {
            let (lo, hi) = scale_interval_sq(comp.c[0], comp.r);
            return Ok(Self::Scale {
                loc: comp.loc_mean.unwrap_or(hp.mu0[0]),
                sigma0: hp.sigma0[0],
                nodes: variance_nodes(hp, lo, hi),
            });
        }
        if m == 1 {
            return Ok(Self::Location {
                c: comp.c[0],
                r: comp.r,
                sigma0: hp.sigma0[0],
                log_z: log_region_mass(comp.r, &hp.sigma0),
                nodes: shared.to_vec(),
            });
        }
        let (linv, logdet) = chol_inverse(&plugin_predictive_cov(hp), m)?;
        Ok(Self::Plugin {
            c: comp.c.clone(),
            linv,
            log_norm: -0.5 * m as f64 * LN_2PI - 0.5 * logdet,
        })
    }

    fn logpdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::Location { c, r, sigma0, log_z, nodes } => {
                let s02 = sigma0 * sigma0;
                let terms: Vec<f64> = nodes
                    .iter()
                    .map(|&(s2, w)| {
                        let tot = s2 + s02;
                        let m = (c * s2 + x[0] * s02) / tot;
                        let s = (s2 * s02 / tot).sqrt();
                        w.ln() + normal_logpdf(x[0], *c, tot.sqrt())
                            + log_std_interval_mass((c - r - m) / s, (c + r - m) / s)
                    })
                    .collect();
                log_sum_exp(&terms) - log_z
            }
            Self::Scale { loc, sigma0, nodes } => {
                let terms: Vec<f64> = nodes
                    .iter()
                    .map(|&(s2, w)| w.ln() + normal_logpdf(x[0], *loc, (s2 + sigma0 * sigma0).sqrt()))
                    .collect();
                log_sum_exp(&terms)
            }
            Self::Plugin { c, linv, log_norm } => {
                let m = c.len();
                let mut q = 0.0;
                for d in 0..m {
                    let mut z = 0.0;
                    for e in 0..=d {
                        z += linv[d * m + e] * (x[e] - c[e]);
                    }
                    q += z * z;
                }
                log_norm - 0.5 * q
            }
        }
    }
}

/// Density of one parameter snapshot, prepared for repeated evaluation.
///
/// The stick mass not held by instantiated atoms is assigned to the prior
/// predictive of a fresh atom, so each component density integrates to one.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    table: KernelTable,
    log_w: Vec<f64>,
    rest: Vec<f64>,
    predictive: Vec<Predictive>,
    background: Option<(Window, f64)>,
}

impl MixtureDensity {
    pub fn new(params: &MixtureParams, hp: &Hyperparams) -> Result<Self> {
        if params.k() != hp.k {
            return invalid(format!("snapshot has {} components, hyperparameters K = {}", params.k(), hp.k));
        }
        let table = KernelTable::build(params, hp.dim)?;
        let needs_nodes = hp.dim == 1 && !hp.is_scale() && params.components.iter().any(|c| c.rest > 0.0);
        let shared = if needs_nodes { variance_nodes(hp, 0.0, f64::INFINITY) } else { vec![] };
        let predictive = params
            .components
            .iter()
            .map(|c| {
                if c.rest > 0.0 {
                    Predictive::build(c, hp, &shared)
                } else {
                    Ok(Predictive::Plugin { c: vec![], linv: vec![], log_norm: f64::NEG_INFINITY })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let background = hp.background.as_ref().map(|w| (w.clone(), -w.log_volume()));
        Ok(Self {
            table,
            log_w: params.w.iter().map(|w| w.ln()).collect(),
            rest: params.components.iter().map(|c| c.rest).collect(),
            predictive,
            background,
        })
    }

    pub fn k(&self) -> usize {
        self.rest.len()
    }

    /// `log G_k(x)`.
    pub fn component_logpdf(&self, k: usize, x: &[f64]) -> f64 {
        let range = self.table.comp_start[k]..self.table.comp_start[k + 1];
        let mut terms: Vec<f64> = range.map(|a| self.table.beta[a].ln() + self.table.log_kernel(a, x)).collect();
        if self.rest[k] > 0.0 {
            terms.push(self.rest[k].ln() + self.predictive[k].logpdf(x));
        }
        log_sum_exp(&terms)
    }

    /// `log (w_k G_k(x))`.
    pub fn weighted_component_logpdf(&self, k: usize, x: &[f64]) -> f64 {
        self.log_w[k] + self.component_logpdf(k, x)
    }

    /// Log density of the background component alone (weighted), `-inf` outside the window.
    pub fn background_logpdf(&self, x: &[f64]) -> f64 {
        match &self.background {
            Some((w, lv)) if w.contains(x) => self.log_w[self.k()] + lv,
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn mixture_logpdf(&self, x: &[f64]) -> f64 {
        let mut terms: Vec<f64> = (0..self.k()).map(|k| self.weighted_component_logpdf(k, x)).collect();
        terms.push(self.background_logpdf(x));
        log_sum_exp(&terms)
    }
}

pub fn mixture_logpdf(params: &MixtureParams, hp: &Hyperparams, x: &[f64]) -> Result<f64> {
    Ok(MixtureDensity::new(params, hp)?.mixture_logpdf(x))
}

pub fn component_logpdf(params: &MixtureParams, hp: &Hyperparams, k: usize, x: &[f64]) -> Result<f64> {
    if k >= params.k() {
        return invalid(format!("component index {k} out of range"));
    }
    Ok(MixtureDensity::new(params, hp)?.component_logpdf(k, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngdist::{normal_cdf, normal_pdf};
    use std::f64::consts::PI;
    use proptest::prelude::*;

    fn one_atom(u: f64, s2: f64) -> MixtureParams {
        MixtureParams {
            w: vec![1.0],
            components: vec![ComponentState {
                c: vec![u],
                r: 1.0,
                loc_mean: None,
                atoms: vec![Atom { u: vec![u], cov: vec![s2], beta: 1.0 }],
                rest: 0.0,
            }],
        }
    }

    #[test]
    fn repulsion_examples() {
        let hp = Hyperparams::new(2, 1);
        assert_eq!(log_repulsive_prior(&[0.0, 1.5], &[1.0, 1.0], &hp), f64::NEG_INFINITY);
        let t = repulsion_term(&[vec![0.0], vec![10.0]], &[1.0, 1.0], 1.0, 2);
        assert!((t + 1.0 / 64.0).abs() < 1e-15);
        let far = repulsion_term(&[vec![0.0], vec![1e8]], &[1.0, 1.0], 1.0, 2);
        assert!(far > -1e-15);
        let hp2 = Hyperparams::new(2, 1);
        let full = log_repulsive_prior(&[0.0, 10.0], &[1.0, 1.0], &hp2);
        let indep = normal_logpdf(0.0, 0.0, 10.0) + normal_logpdf(10.0, 0.0, 10.0) + 2.0 * gamma_logpdf(1.0, 2.0, 2.0);
        assert!((full - indep + 1.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn repulsion_mv_examples() {
        let t = repulsion_term(&[vec![0.0, 0.0], vec![5.0, 0.0]], &[1.0, 1.0], 1.0, 1);
        assert!((t + 1.0 / 3.0).abs() < 1e-15);
        let hp = Hyperparams::new(2, 2);
        assert_eq!(log_repulsive_prior_mv(&[vec![0.0, 0.0], vec![1.0, 1.5]], &[1.0, 1.0], &hp), f64::NEG_INFINITY);
        let c = [vec![0.0], vec![6.0], vec![20.0]];
        let t3 = repulsion_term(&c, &[1.0, 1.0, 1.0], 1.0, 2);
        assert!((t3 + 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn base_measure_examples() {
        let mut hp = Hyperparams::new(1, 1);
        hp.theta1 = 1.0;
        hp.theta2 = 1.0;
        hp.sigma0 = vec![1.0];
        let comp = ComponentState { c: vec![0.5], r: 2.0, loc_mean: None, atoms: vec![], rest: 1.0 };
        assert_eq!(log_base_measure(&[3.0], &[1.0], &comp, &hp), f64::NEG_INFINITY);
        // Hand arithmetic: normal at its mean, truncation mass, IG(1,1) at 1, Jacobian 2.
        let expect = -0.5 * (2.0 * PI).ln() - (1.0 - 2.0 * normal_cdf(-2.0)).ln() + (-1.0) + 2f64.ln();
        assert!((log_base_measure(&[0.5], &[1.0], &comp, &hp) - expect).abs() < 1e-12);

        hp.separation_axis = SeparationAxis::Scale;
        let sc = ComponentState { c: vec![1.0], r: 0.5, loc_mean: Some(0.0), atoms: vec![], rest: 1.0 };
        assert!(log_base_measure(&[0.3], &[1.0], &sc, &hp).is_finite());
        assert_eq!(log_base_measure(&[0.3], &[4.0], &sc, &hp), f64::NEG_INFINITY);
    }

    #[test]
    fn mixture_density_examples() {
        let hp = Hyperparams::new(1, 1);
        let p = one_atom(0.0, 1.0);
        let v = mixture_logpdf(&p, &hp, &[0.0]).unwrap();
        assert!((v - normal_pdf(0.0, 0.0, 1.0).ln()).abs() < 1e-15);

        let mut p2 = one_atom(0.0, 1.0);
        p2.components[0].atoms = vec![
            Atom { u: vec![-1.0], cov: vec![1.0], beta: 0.5 },
            Atom { u: vec![1.0], cov: vec![1.0], beta: 0.5 },
        ];
        let v = component_logpdf(&p2, &hp, 0, &[0.0]).unwrap();
        assert!((v - normal_pdf(1.0, 0.0, 1.0).ln()).abs() < 1e-15);

        let far = mixture_logpdf(&p, &hp, &[100.0]).unwrap();
        assert!(far.is_finite() && (far - normal_logpdf(100.0, 0.0, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn predictive_mass_keeps_unit_integral() {
        let mut hp = Hyperparams::new(1, 1);
        hp.sigma0 = vec![0.7];
        let mut p = one_atom(0.0, 0.5);
        p.components[0].atoms[0].beta = 0.6;
        p.components[0].rest = 0.4;
        let dens = MixtureDensity::new(&p, &hp).unwrap();
        let total = crate::quad::adaptive(|x| dens.mixture_logpdf(&[x]).exp(), -200.0, 200.0, 1e-8, 400).unwrap();
        assert!((total - 1.0).abs() < 2e-3, "{total}");
    }

    #[test]
    fn background_adds_uniform_mass() {
        let mut hp = Hyperparams::new(1, 1);
        hp.background = Some(Window { lo: vec![-5.0], hi: vec![5.0] });
        let mut p = one_atom(0.0, 1.0);
        p.w = vec![0.8, 0.2];
        let v = mixture_logpdf(&p, &hp, &[0.0]).unwrap().exp();
        assert!((v - (0.8 * normal_pdf(0.0, 0.0, 1.0) + 0.02)).abs() < 1e-15);
        assert_eq!(hp.conc(), 0.5);
    }

    #[test]
    fn multivariate_kernel_matches_closed_form() {
        let hp = Hyperparams::new(1, 2);
        let p = MixtureParams {
            w: vec![1.0],
            components: vec![ComponentState {
                c: vec![0.0, 0.0],
                r: 1.0,
                loc_mean: None,
                atoms: vec![Atom { u: vec![0.5, -0.5], cov: vec![2.0, 0.6, 0.6, 1.0], beta: 1.0 }],
                rest: 0.0,
            }],
        };
        let x = [1.0, 0.3];
        let det: f64 = 2.0 - 0.36;
        let (dx, dy) = (0.5, 0.8);
        let q = (1.0 * dx * dx - 2.0 * 0.6 * dx * dy + 2.0 * dy * dy) / det;
        let expect = -LN_2PI - 0.5 * det.ln() - 0.5 * q;
        assert!((mixture_logpdf(&p, &hp, &x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn hyperparams_validation() {
        let mut hp = Hyperparams::new(2, 1);
        assert!(hp.validate().is_ok());
        hp.regions_fixed = true;
        assert!(hp.validate().is_err());
        hp.fixed_regions = vec![
            Region { center: vec![0.0], halfwidth: 1.0 },
            Region { center: vec![1.5], halfwidth: 1.0 },
        ];
        assert!(hp.validate().is_err());
        hp.fixed_regions[1].center = vec![3.0];
        assert!(hp.validate().is_ok());
        let mut hp = Hyperparams::new(2, 2);
        hp.separation_axis = SeparationAxis::Scale;
        assert!(hp.validate().is_err());
        let mut hp = Hyperparams::new(2, 2);
        hp.iw_df = 0.5;
        assert!(hp.validate().is_err());
    }

    #[test]
    fn relabel_sorts_by_center() {
        let mut p = one_atom(3.0, 1.0);
        let mut other = p.components[0].clone();
        other.c = vec![-3.0];
        p.components.push(other);
        p.w = vec![0.3, 0.7];
        let q = p.relabeled();
        assert_eq!(q.components[0].c, vec![-3.0]);
        assert_eq!(q.w, vec![0.7, 0.3]);
    }

    #[test]
    fn prior_rejection_sampler_respects_support() {
        let mut hp = Hyperparams::new(3, 1);
        hp.eta = vec![3.0];
        let mut rng = RngStream::new(3, 3);
        for _ in 0..200 {
            let (c, r) = sample_repulsive_prior(&hp, &mut rng).unwrap();
            let cv: Vec<f64> = c.iter().map(|v| v[0]).collect();
            assert!(log_repulsive_prior(&cv, &r, &hp).is_finite());
        }
    }

    proptest! {
        #[test]
        fn exchanging_components_keeps_mixture_density(x in -6.0f64..6.0, w in 0.05f64..0.95,
                                                       a in -4.0f64..-1.0, b in 1.0f64..4.0) {
            let hp = Hyperparams::new(2, 1);
            let mut p = one_atom(a, 0.8);
            let mut other = p.components[0].clone();
            other.c = vec![b];
            other.atoms[0].u = vec![b];
            p.components.push(other);
            p.w = vec![w, 1.0 - w];
            let swapped = MixtureParams { w: vec![1.0 - w, w], components: vec![p.components[1].clone(), p.components[0].clone()] };
            let l1 = mixture_logpdf(&p, &hp, &[x]).unwrap();
            let l2 = mixture_logpdf(&swapped, &hp, &[x]).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
        }

        #[test]
        fn repulsive_prior_symmetries(c1 in -5.0f64..5.0, c2 in -5.0f64..5.0, c3 in -5.0f64..5.0,
                                       r1 in 0.1f64..2.0, r2 in 0.1f64..2.0, r3 in 0.1f64..2.0, shift in -3.0f64..3.0) {
            let mut hp = Hyperparams::new(3, 1);
            let base = log_repulsive_prior(&[c1, c2, c3], &[r1, r2, r3], &hp);
            let perm = log_repulsive_prior(&[c3, c1, c2], &[r3, r1, r2], &hp);
            prop_assert!(base == perm || (base - perm).abs() < 1e-12 * (1.0 + base.abs()));
            hp.mu0 = vec![shift];
            let moved = log_repulsive_prior(&[c1 + shift, c2 + shift, c3 + shift], &[r1, r2, r3], &hp);
            prop_assert!(base == moved || (base - moved).abs() < 1e-9 * (1.0 + base.abs()));
        }

        #[test]
        fn single_atom_density_is_gaussian(x in -10.0f64..10.0, u in -3.0f64..3.0, s2 in 0.1f64..4.0) {
            let hp = Hyperparams::new(1, 1);
            let v = mixture_logpdf(&one_atom(u, s2), &hp, &[x]).unwrap();
            prop_assert!((v - normal_logpdf(x, u, s2.sqrt())).abs() < 1e-12);
        }
    }
}
