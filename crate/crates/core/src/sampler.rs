//! Slice sampler for the mixture of region-restricted DP mixtures.
//!
//! One sweep runs, in order: extend atoms until the unrepresented stick mass
//! drops below the global slice threshold; draw slices and labels (map);
//! update mixture weights; conjugate atom updates from per-cluster sufficient
//! statistics (reduce); update sticks; update slice auxiliaries; update the
//! repulsion auxiliary, region centers and region halfwidths.
//!
//! Every random draw comes from a stream keyed on `(phase, sweep, index)`, so
//! the chain is a pure function of the seed whatever the thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{invalid, Error, Result};
use crate::geometry::linf;
use crate::model::{
    log_region_mass, log_scale_region_mass, repulsion_term, sample_repulsive_prior, scale_interval_sq, Atom,
    ChainState, ComponentState, Dataset, Hyperparams, KernelTable, MixtureParams, SliceAux,
};
use crate::rngdist::{
    dirichlet_allow_zero, log_std_interval_mass, normal_logpdf, open01, sample_inverse_gamma,
    sample_inverse_wishart, sample_truncated_inverse_gamma, sample_truncated_normal, standard_normal,
    tmvn_hypercube_gibbs, uniform, RngStream, SpdMatrix,
};

const TAG_INIT: u64 = 1;
const TAG_EXTEND: u64 = 2;
const TAG_MAP: u64 = 3;
const TAG_WEIGHTS: u64 = 4;
const TAG_ATOMS: u64 = 5;
const TAG_BETA: u64 = 6;
const TAG_SLICE: u64 = 7;
const TAG_XI: u64 = 8;
const TAG_CENTER: u64 = 9;
const TAG_RADIUS: u64 = 10;
const TAG_LOC_MEAN: u64 = 11;

/// Observations per map block.
pub const MAP_BLOCK: usize = 4096;
/// Atom count per component beyond which the slice threshold is deemed degenerate.
pub const MAX_ATOMS: usize = 1_000_000;
const ADAPT_EVERY: usize = 50;

/// Execution options for a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub parallel: bool,
    /// Worker threads when `parallel`; 0 means one per available core.
    pub threads: usize,
    /// Standard deviation of the log-scale random walk on region halfwidths.
    pub mh_step: f64,
    /// Tune `mh_step` during burn-in.
    pub adapt_mh: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            parallel: false,
            threads: 1,
            mh_step: 0.5,
            adapt_mh: true,
        }
    }
}

impl SweepPlan {
    pub fn sequential() -> Self {
        Self::default()
    }

    pub fn parallel(threads: usize) -> Self {
        Self {
            parallel: true,
            threads,
            ..Self::default()
        }
    }

    /// Apply the `NPMIX_THREADS` environment override, if set to an integer.
    pub fn with_env_override(mut self) -> Self {
        if let Some(n) = std::env::var("NPMIX_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            self.threads = n;
            self.parallel = n != 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mh_step > 0.0 && self.mh_step.is_finite()) {
            return invalid(format!("mh_step must be positive, got {}", self.mh_step));
        }
        Ok(())
    }
}

/// One retained state, relabeled into canonical component order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: MixtureParams,
    pub xi: f64,
}

/// Result of [`run`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainOutput {
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub snapshots: Vec<Snapshot>,
    /// Complete-data log-likelihood after each sweep.
    pub loglik: Vec<f64>,
    /// Per-component acceptance rate of the halfwidth MH step after burn-in.
    pub mh_acceptance: Vec<f64>,
    /// Final MH step sizes.
    pub mh_step: Vec<f64>,
    pub elapsed_secs: f64,
    #[serde(skip)]
    pub final_state: Option<ChainState>,
}

impl ChainOutput {
    /// Overall halfwidth acceptance rate, averaged over components.
    pub fn mean_acceptance(&self) -> f64 {
        crate::stats::mean(&self.mh_acceptance)
    }
}

/// Snapshot count retained by `run` for the given schedule.
pub fn snapshot_count(iters: usize, burnin: usize, thin: usize) -> usize {
    (iters.saturating_sub(burnin)).div_ceil(thin.max(1))
}

// ---------------------------------------------------------------------------
// Conjugate updates
// ---------------------------------------------------------------------------

/// Posterior mean and sd of an atom location: prior `N(c, sigma0^2)`, `n`
/// observations with sum `sum` and kernel variance `sigma2`.
pub fn location_posterior(c: f64, sigma0: f64, sigma2: f64, n: usize, sum: f64) -> (f64, f64) {
    let s02 = sigma0 * sigma0;
    let nf = n as f64;
    let mean = (c * sigma2 + sum * s02) / (sigma2 + nf * s02);
    let sd = 1.0 / (1.0 / s02 + nf / sigma2).sqrt();
    (mean, sd)
}

/// Posterior inverse-gamma `(shape, scale)` of a kernel variance given `n`
/// residuals with sum of squares `ss`.
pub fn variance_posterior(theta1: f64, theta2: f64, n: usize, ss: f64) -> (f64, f64) {
    (theta1 + 0.5 * n as f64, theta2 + 0.5 * ss)
}

/// Posterior mean and sd of a region center: prior `N(mu0, eta^2)`, `n`
/// atom locations with sum `sum_u` drawn around it with sd `sigma0`.
pub fn center_posterior(mu0: f64, eta: f64, sigma0: f64, n: usize, sum_u: f64) -> (f64, f64) {
    let (e2, s02) = (eta * eta, sigma0 * sigma0);
    let nf = n as f64;
    let mean = (mu0 * s02 + sum_u * e2) / (s02 + nf * e2);
    let sd = 1.0 / (1.0 / e2 + nf / s02).sqrt();
    (mean, sd)
}

/// Dirichlet parameters of the weight posterior.
pub fn weight_posterior(conc: f64, counts: &[usize]) -> Vec<f64> {
    counts.iter().map(|&n| conc + n as f64).collect()
}

/// Dirichlet parameters of the stick posterior: the cluster counts followed by `alpha`.
pub fn stick_posterior(counts: &[usize], alpha: f64) -> Vec<f64> {
    counts.iter().map(|&n| n as f64).chain(std::iter::once(alpha)).collect()
}

// ---------------------------------------------------------------------------
// Atom extension
// ---------------------------------------------------------------------------

/// Append stick-breaking atoms to `comp` while its remaining mass is at least
/// `rho_star`. `draw_nu` supplies the Beta(1, alpha) stick fractions and
/// `draw_atom` the `(u, cov)` pairs. Returns the number of atoms added.
pub fn extend_atoms_with(
    comp: &mut ComponentState,
    rho_star: f64,
    mut draw_nu: impl FnMut() -> Result<f64>,
    mut draw_atom: impl FnMut(&ComponentState) -> Result<(Vec<f64>, Vec<f64>)>,
) -> Result<usize> {
    if !(rho_star > 0.0) {
        return Err(Error::SliceDegenerate(format!("slice threshold {rho_star:e} is not positive")));
    }
    let mut added = 0;
    while comp.rest >= rho_star {
        if comp.atoms.len() >= MAX_ATOMS {
            return Err(Error::SliceDegenerate(format!(
                "more than {MAX_ATOMS} atoms needed to reach slice threshold {rho_star:e}"
            )));
        }
        let nu = draw_nu()?;
        let beta = nu * comp.rest;
        let (u, cov) = draw_atom(comp)?;
        comp.rest *= 1.0 - nu;
        comp.atoms.push(Atom { u, cov, beta });
        added += 1;
    }
    Ok(added)
}

/// [`extend_atoms_with`] using the model's stick and base-measure draws.
pub fn extend_atoms(
    comp: &mut ComponentState,
    rho_star: f64,
    hp: &Hyperparams,
    iw_scale: Option<&SpdMatrix>,
    rng: &mut RngStream,
) -> Result<usize> {
    let alpha = hp.dp_alpha;
    // Stick fractions and atoms interleave on one stream.
    let rng = std::cell::RefCell::new(rng);
    extend_atoms_with(
        comp,
        rho_star,
        || {
            let u = open01(&mut **rng.borrow_mut());
            Ok(-(u.ln() / alpha).exp_m1())
        },
        |c| sample_base_measure(c, hp, iw_scale, &mut **rng.borrow_mut()),
    )
}

/// Draw `(u, cov)` from the base measure of a component.
pub fn sample_base_measure(
    comp: &ComponentState,
    hp: &Hyperparams,
    iw_scale: Option<&SpdMatrix>,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = hp.dim;
    if hp.is_scale() {
        let (lo, hi) = scale_interval_sq(comp.c[0], comp.r);
        let loc = comp.loc_mean.unwrap_or(hp.mu0[0]);
        let u = loc + hp.sigma0[0] * standard_normal(rng);
        let s2 = truncated_ig(hp.theta1, hp.theta2, lo, hi, rng)?;
        return Ok((vec![u], vec![s2]));
    }
    let mut u = Vec::with_capacity(m);
    for d in 0..m {
        u.push(sample_truncated_normal(comp.c[d], hp.sigma0[d], comp.c[d] - comp.r, comp.c[d] + comp.r, rng)?);
    }
    let cov = if m == 1 {
        vec![sample_inverse_gamma(hp.theta1, hp.theta2, rng)?]
    } else {
        let owned;
        let scale = match iw_scale {
            Some(s) => s,
            None => {
                owned = hp.iw_scale_matrix()?;
                &owned
            }
        };
        matrix_to_vec(sample_inverse_wishart(hp.iw_df, scale, rng)?.matrix())
    };
    Ok((u, cov))
}

/// Truncated inverse-gamma that falls back to a fine grid on `log x` when the
/// interval holds too little mass for CDF inversion.
fn truncated_ig(shape: f64, scale: f64, lo: f64, hi: f64, rng: &mut RngStream) -> Result<f64> {
    match sample_truncated_inverse_gamma(shape, scale, lo, hi, rng) {
        Err(Error::NumericalMass(_)) => {}
        other => return other,
    }
    const CELLS: usize = 2048;
    let a = lo.max(hi * 1e-12).ln();
    let b = hi.ln();
    let h = (b - a) / CELLS as f64;
    // Density of t = log x is proportional to exp(-shape t - scale e^{-t}).
    let logs: Vec<f64> = (0..CELLS)
        .map(|i| {
            let t = a + (i as f64 + 0.5) * h;
            -shape * t - scale * (-t).exp()
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let cell = crate::rngdist::sample_categorical(&w, rng)
        .ok_or_else(|| Error::NumericalMass(format!("inverse-gamma({shape}, {scale}) on ({lo}, {hi})")))?;
    Ok((a + (cell as f64 + open01(rng)) * h).exp().clamp(lo, hi))
}

fn matrix_to_vec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; n * n];
    for d in 0..n {
        for e in 0..n {
            out[d * n + e] = 0.5 * (m[(d, e)] + m[(e, d)]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sufficient statistics
// ---------------------------------------------------------------------------

/// Count, sum and sum of outer products of the observations in one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: usize,
    pub sum: Vec<f64>,
    /// `[sum x^2]` in 1-D, row-major `sum x x^T` otherwise.
    pub outer: Vec<f64>,
}

impl SuffStats {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    pub fn from_points(dim: usize, points: &[&[f64]]) -> Self {
        let mut s = Self::new(dim);
        for p in points {
            s.push(p);
        }
        s
    }

    #[inline]
    pub fn push(&mut self, x: &[f64]) {
        let m = self.sum.len();
        self.n += 1;
        for d in 0..m {
            self.sum[d] += x[d];
            for e in 0..m {
                self.outer[d * m + e] += x[d] * x[e];
            }
        }
    }

    /// `sum (x - u)(x - u)^T`, row-major.
    pub fn scatter(&self, u: &[f64]) -> Vec<f64> {
        let m = self.sum.len();
        let nf = self.n as f64;
        let mut out = vec![0.0; m * m];
        for d in 0..m {
            for e in 0..m {
                out[d * m + e] =
                    self.outer[d * m + e] - u[d] * self.sum[e] - self.sum[d] * u[e] + nf * u[d] * u[e];
            }
        }
        out
    }
}

/// Conditional draw of an atom's `(u, cov)` given its cluster statistics.
/// An empty cluster yields a base-measure draw.
pub fn update_atom(
    comp: &ComponentState,
    atom: &Atom,
    st: &SuffStats,
    hp: &Hyperparams,
    iw_scale: Option<&SpdMatrix>,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = hp.dim;
    if m == 1 {
        let s2 = atom.cov[0];
        let u = if hp.is_scale() {
            let (mean, sd) = location_posterior(comp.loc_mean.unwrap_or(hp.mu0[0]), hp.sigma0[0], s2, st.n, st.sum[0]);
            mean + sd * standard_normal(rng)
        } else {
            let (mean, sd) = location_posterior(comp.c[0], hp.sigma0[0], s2, st.n, st.sum[0]);
            sample_truncated_normal(mean, sd, comp.c[0] - comp.r, comp.c[0] + comp.r, rng)?
        };
        let ss = (st.outer[0] - 2.0 * u * st.sum[0] + st.n as f64 * u * u).max(0.0);
        let (shape, scale) = variance_posterior(hp.theta1, hp.theta2, st.n, ss);
        let s2 = if hp.is_scale() {
            let (lo, hi) = scale_interval_sq(comp.c[0], comp.r);
            truncated_ig(shape, scale, lo, hi, rng)?
        } else {
            sample_inverse_gamma(shape, scale, rng)?
        };
        return Ok((vec![u], vec![s2]));
    }

    let cov = DMatrix::from_row_slice(m, m, &atom.cov);
    let prec = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidState("atom covariance is not positive definite".into()))?
        .inverse();
    let nf = st.n as f64;
    let mut post_prec = prec.clone() * nf;
    let mut rhs = &prec * nalgebra::DVector::from_column_slice(&st.sum);
    for d in 0..m {
        let p0 = 1.0 / (hp.sigma0[d] * hp.sigma0[d]);
        post_prec[(d, d)] += p0;
        rhs[d] += p0 * comp.c[d];
    }
    let chol = post_prec
        .cholesky()
        .ok_or_else(|| Error::InvalidState("posterior precision is not positive definite".into()))?;
    let mean = chol.solve(&rhs);
    let post_cov = SpdMatrix::new(symmetrize(chol.inverse()))?;
    let u = tmvn_hypercube_gibbs(mean.as_slice(), &post_cov, &comp.c, comp.r, Some(&atom.u), rng)?;

    let owned;
    let scale = match iw_scale {
        Some(s) => s,
        None => {
            owned = hp.iw_scale_matrix()?;
            &owned
        }
    };
    let scatter = DMatrix::from_row_slice(m, m, &st.scatter(&u));
    let post_scale = SpdMatrix::new(symmetrize(scale.matrix() + scatter))?;
    let sigma = sample_inverse_wishart(hp.iw_df + nf, &post_scale, rng)?;
    Ok((u, matrix_to_vec(sigma.matrix())))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

// ---------------------------------------------------------------------------
// Region updates
// ---------------------------------------------------------------------------

/// Minimum region gap implied by the repulsion auxiliary: `xi < zeta` holds
/// exactly when every pairwise gap exceeds this value.
pub fn min_gap(xi: f64, tau: f64, nu: u32) -> f64 {
    if !(xi > 0.0) {
        return 0.0;
    }
    (tau / -xi.ln()).powf(1.0 / nu as f64)
}

/// Draw from `N(mu, sd^2)` restricted to `[lo, hi]` minus the open intervals in `excl`.
/// Falls back to `current` if the feasible set carries no representable mass.
pub fn sample_normal_on_pieces(
    mu: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    excl: &mut [(f64, f64)],
    current: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    excl.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pieces = Vec::new();
    let mut start = lo;
    for &(a, b) in excl.iter() {
        if b <= start {
            continue;
        }
        if a >= hi {
            break;
        }
        if a > start {
            pieces.push((start, a));
        }
        start = start.max(b);
    }
    if start < hi {
        pieces.push((start, hi));
    }
    let logm: Vec<f64> = pieces.iter().map(|&(a, b)| log_std_interval_mass((a - mu) / sd, (b - mu) / sd)).collect();
    let max = logm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if pieces.is_empty() || max == f64::NEG_INFINITY {
        return Ok(current);
    }
    let w: Vec<f64> = logm.iter().map(|l| (l - max).exp()).collect();
    let p = crate::rngdist::sample_categorical(&w, rng).unwrap_or(0);
    let (a, b) = pieces[p];
    sample_truncated_normal(mu, sd, a, b, rng)
}

fn gamma_log_kernel(r: f64, shape: f64, rate: f64) -> f64 {
    if r <= 0.0 {
        f64::NEG_INFINITY
    } else {
        (shape - 1.0) * r.ln() - rate * r
    }
}

// ---------------------------------------------------------------------------
// The sampler
// ---------------------------------------------------------------------------

/// Chain driver holding the state and the per-sweep scratch data.
pub struct Sampler<'a> {
    data: &'a Dataset,
    hp: Hyperparams,
    plan: SweepPlan,
    seed: u64,
    pub state: ChainState,
    sweep: u64,
    iw_scale: Option<SpdMatrix>,
    /// `atom_start[k]..atom_start[k+1]` indexes the flat per-atom arrays.
    atom_start: Vec<usize>,
    stats: Vec<SuffStats>,
    n_bg: usize,
    mh_step: Vec<f64>,
    window: Vec<[u64; 2]>,
    total: Vec<[u64; 2]>,
    loglik: f64,
}

impl<'a> Sampler<'a> {
    /// Validate inputs and build the initial state.
    pub fn new(data: &'a Dataset, hp: &Hyperparams, plan: &SweepPlan, seed: u64) -> Result<Self> {
        let state = initial_state(data, hp, seed)?;
        Self::from_state(data, hp, plan, seed, state)
    }

    /// Start from a given state. The state's slice auxiliaries must be consistent with its labels.
    pub fn from_state(data: &'a Dataset, hp: &Hyperparams, plan: &SweepPlan, seed: u64, state: ChainState) -> Result<Self> {
        hp.validate()?;
        plan.validate()?;
        if data.dim() != hp.dim {
            return invalid(format!("data have {} columns but the model has dimension {}", data.dim(), hp.dim));
        }
        if state.z.len() != data.n() || state.s.len() != data.n() {
            return invalid("label vectors do not match the number of observations");
        }
        let iw_scale = if hp.dim > 1 { Some(hp.iw_scale_matrix()?) } else { None };
        let mut s = Self {
            data,
            hp: hp.clone(),
            plan: plan.clone(),
            seed,
            state,
            sweep: 0,
            iw_scale,
            atom_start: vec![],
            stats: vec![],
            n_bg: 0,
            mh_step: vec![plan.mh_step; hp.k],
            window: vec![[0, 0]; hp.k],
            total: vec![[0, 0]; hp.k],
            loglik: f64::NAN,
        };
        s.compute_stats();
        Ok(s)
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn sweep_index(&self) -> u64 {
        self.sweep
    }

    /// Complete-data log-likelihood from the latest sweep.
    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn mh_step(&self) -> &[f64] {
        &self.mh_step
    }

    fn k(&self) -> usize {
        self.hp.k
    }

    fn stream(&self, tags: &[u64]) -> RngStream {
        let mut all = Vec::with_capacity(tags.len() + 1);
        all.push(tags[0]);
        all.push(self.sweep);
        all.extend_from_slice(&tags[1..]);
        RngStream::derive(self.seed, &all)
    }

    /// One full sweep.
    pub fn sweep(&mut self) -> Result<()> {
        self.sweep += 1;
        self.extend_all()?;
        self.draw_slice_and_labels()?;
        self.compute_stats();
        self.update_weights()?;
        self.update_atoms()?;
        self.loglik = self.complete_loglik();
        if !self.loglik.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.sweep as usize,
                what: format!("complete-data log-likelihood is {}", self.loglik),
            });
        }
        self.update_beta()?;
        self.update_slice_aux()?;
        self.update_regions()?;
        Ok(())
    }

    /// Extend every component to the current slice threshold.
    pub fn extend_all(&mut self) -> Result<()> {
        let rho = self.state.slice.rho_star;
        for k in 0..self.k() {
            let mut rng = self.stream(&[TAG_EXTEND, k as u64]);
            extend_atoms(&mut self.state.params.components[k], rho, &self.hp, self.iw_scale.as_ref(), &mut rng)?;
        }
        Ok(())
    }

    /// Map step: reconstruct each observation's slice and draw `(z, s)` jointly.
    pub fn draw_slice_and_labels(&mut self) -> Result<()> {
        let n = self.data.n();
        if n == 0 {
            return Ok(());
        }
        let k = self.k();
        let table = KernelTable::build(&self.state.params, self.hp.dim)?;
        let n_atoms = table.len();
        let mut comp_of = Vec::with_capacity(n_atoms);
        let mut rho_g = Vec::with_capacity(n_atoms + 1);
        let mut istar_g = Vec::with_capacity(n_atoms + 1);
        for (kk, comp) in self.state.params.components.iter().enumerate() {
            for j in 0..comp.atoms.len() {
                comp_of.push(kk);
                rho_g.push(self.state.slice.rho_star_kj[kk].get(j).copied().unwrap_or(f64::NAN));
                istar_g.push(self.state.slice.i_star_kj[kk].get(j).copied().unwrap_or(usize::MAX));
            }
        }
        rho_g.push(self.state.slice.rho_star_bg);
        istar_g.push(self.state.slice.i_star_bg);
        let mut beta_g = table.beta.clone();
        beta_g.push(1.0);
        let bg = self.hp.background.as_ref().map(|w| (w, self.state.params.w[k].ln() - w.log_volume()));
        let ctx = MapCtx {
            data: self.data,
            table: &table,
            log_w: self.state.params.w.iter().map(|w| w.ln()).collect(),
            comp_of,
            rho_g,
            istar_g,
            beta_g,
            comp_start: &table.comp_start,
            k,
            bg,
            seed: self.seed,
            sweep: self.sweep,
        };
        let z = &mut self.state.z;
        let s = &mut self.state.s;
        let results: Vec<Result<()>> = if self.plan.parallel {
            z.par_chunks_mut(MAP_BLOCK)
                .zip(s.par_chunks_mut(MAP_BLOCK))
                .enumerate()
                .map(|(b, (zc, sc))| ctx.run_block(b * MAP_BLOCK, zc, sc))
                .collect()
        } else {
            z.chunks_mut(MAP_BLOCK)
                .zip(s.chunks_mut(MAP_BLOCK))
                .enumerate()
                .map(|(b, (zc, sc))| ctx.run_block(b * MAP_BLOCK, zc, sc))
                .collect()
        };
        results.into_iter().collect()
    }

    /// Recompute per-atom sufficient statistics from the labels.
    fn compute_stats(&mut self) {
        let m = self.hp.dim;
        let k = self.k();
        self.atom_start.clear();
        self.atom_start.push(0);
        for comp in &self.state.params.components {
            let last = *self.atom_start.last().unwrap();
            self.atom_start.push(last + comp.atoms.len());
        }
        let total = *self.atom_start.last().unwrap();
        self.stats = vec![SuffStats::new(m); total];
        self.n_bg = 0;
        for i in 0..self.data.n() {
            let z = self.state.z[i];
            if z == k {
                self.n_bg += 1;
            } else if let Some(st) = self.stats.get_mut(self.atom_start[z] + self.state.s[i]) {
                st.push(self.data.row(i));
            }
        }
    }

    fn component_count(&self, k: usize) -> usize {
        self.stats[self.atom_start[k]..self.atom_start[k + 1]].iter().map(|s| s.n).sum()
    }

    /// Observation counts per component, with the background count last when enabled.
    pub fn counts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = (0..self.k()).map(|k| self.component_count(k)).collect();
        if self.hp.background.is_some() {
            c.push(self.n_bg);
        }
        c
    }

    pub fn update_weights(&mut self) -> Result<()> {
        let alpha = weight_posterior(self.hp.conc(), &self.counts());
        let mut rng = self.stream(&[TAG_WEIGHTS]);
        self.state.params.w = crate::rngdist::sample_dirichlet(&alpha, &mut rng)?;
        Ok(())
    }

    /// Reduce step: conjugate draws for every instantiated atom.
    pub fn update_atoms(&mut self) -> Result<()> {
        let jobs: Vec<(usize, usize)> = (0..self.k())
            .flat_map(|k| (0..self.state.params.components[k].atoms.len()).map(move |j| (k, j)))
            .collect();
        let run = |&(k, j): &(usize, usize)| -> Result<(Vec<f64>, Vec<f64>)> {
            let comp = &self.state.params.components[k];
            let mut rng = self.stream(&[TAG_ATOMS, k as u64, j as u64]);
            update_atom(comp, &comp.atoms[j], &self.stats[self.atom_start[k] + j], &self.hp, self.iw_scale.as_ref(), &mut rng)
        };
        let draws: Vec<Result<(Vec<f64>, Vec<f64>)>> = if self.plan.parallel && jobs.len() > 1 {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        };
        for ((k, j), d) in jobs.into_iter().zip(draws) {
            let (u, cov) = d?;
            if u.iter().chain(&cov).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    iteration: self.sweep as usize,
                    what: format!("atom {j} of component {}", k + 1),
                });
            }
            let atom = &mut self.state.params.components[k].atoms[j];
            atom.u = u;
            atom.cov = cov;
        }
        Ok(())
    }

    fn complete_loglik(&self) -> f64 {
        let m = self.hp.dim;
        let mut ll = 0.0;
        for (k, comp) in self.state.params.components.iter().enumerate() {
            let lw = self.state.params.w[k].ln();
            for (j, atom) in comp.atoms.iter().enumerate() {
                let st = &self.stats[self.atom_start[k] + j];
                if st.n == 0 {
                    continue;
                }
                let nf = st.n as f64;
                let sc = st.scatter(&atom.u);
                let term = if m == 1 {
                    -0.5 * nf * (std::f64::consts::TAU * atom.cov[0]).ln() - 0.5 * sc[0] / atom.cov[0]
                } else {
                    match crate::model::chol_inverse(&atom.cov, m) {
                        Ok((linv, logdet)) => {
                            let l = DMatrix::from_row_slice(m, m, &linv);
                            let p = l.transpose() * l;
                            let tr: f64 = (0..m).flat_map(|d| (0..m).map(move |e| (d, e))).map(|(d, e)| p[(d, e)] * sc[d * m + e]).sum();
                            -0.5 * nf * (m as f64 * std::f64::consts::TAU.ln() + logdet) - 0.5 * tr
                        }
                        Err(_) => f64::NAN,
                    }
                };
                ll += nf * lw + term;
            }
        }
        if let Some(w) = &self.hp.background {
            if self.n_bg > 0 {
                ll += self.n_bg as f64 * (self.state.params.w[self.k()].ln() - w.log_volume());
            }
        }
        ll
    }

    /// Stick update. Atoms left without observations get zero weight and are dropped.
    pub fn update_beta(&mut self) -> Result<()> {
        let k = self.k();
        let mut remap: Vec<Vec<usize>> = Vec::with_capacity(k);
        let mut new_stats = Vec::with_capacity(self.stats.len());
        for kk in 0..k {
            let range = self.atom_start[kk]..self.atom_start[kk + 1];
            let counts: Vec<usize> = self.stats[range.clone()].iter().map(|s| s.n).collect();
            let mut rng = self.stream(&[TAG_BETA, kk as u64]);
            let d = dirichlet_allow_zero(&stick_posterior(&counts, self.hp.dp_alpha), &mut rng);
            let comp = &mut self.state.params.components[kk];
            let old = std::mem::take(&mut comp.atoms);
            let mut map = vec![usize::MAX; old.len()];
            for (j, mut atom) in old.into_iter().enumerate() {
                if counts[j] > 0 {
                    if !(d[j] > 0.0) {
                        return Err(Error::SliceDegenerate(format!(
                            "occupied atom {j} of component {} received zero stick weight",
                            kk + 1
                        )));
                    }
                    map[j] = comp.atoms.len();
                    atom.beta = d[j];
                    comp.atoms.push(atom);
                    new_stats.push(self.stats[range.start + j].clone());
                }
            }
            comp.rest = d[counts.len()];
            remap.push(map);
        }
        for i in 0..self.data.n() {
            let z = self.state.z[i];
            if z < k {
                self.state.s[i] = remap[z][self.state.s[i]];
            }
        }
        self.stats = new_stats;
        self.atom_start.truncate(1);
        for comp in &self.state.params.components {
            let last = *self.atom_start.last().unwrap();
            self.atom_start.push(last + comp.atoms.len());
        }
        Ok(())
    }

    /// Minimum slice per occupied atom, its owner, and the global threshold.
    pub fn update_slice_aux(&mut self) -> Result<()> {
        let k = self.k();
        let total = self.stats.len();
        let mut rho_g = vec![1.0; total + 1];
        let mut rank = vec![usize::MAX; total + 1];
        let mut rho_star: f64 = 1.0;
        let mut draw = |idx: usize, n: usize, beta: f64, rng: &mut RngStream| {
            // Beta(1, n) by inversion: 1 - U^(1/n).
            let b = -(open01(rng).ln() / n as f64).exp_m1();
            rank[idx] = ((open01(rng) * n as f64) as usize).min(n - 1);
            rho_g[idx] = beta * b;
        };
        for kk in 0..k {
            for (j, atom) in self.state.params.components[kk].atoms.iter().enumerate() {
                let g = self.atom_start[kk] + j;
                let n = self.stats[g].n;
                if n == 0 {
                    continue;
                }
                let mut rng = self.stream(&[TAG_SLICE, kk as u64, j as u64]);
                draw(g, n, atom.beta, &mut rng);
            }
        }
        if self.n_bg > 0 {
            let mut rng = self.stream(&[TAG_SLICE, k as u64, 0]);
            draw(total, self.n_bg, 1.0, &mut rng);
        }
        let mut istar = vec![usize::MAX; total + 1];
        let mut seen = vec![0usize; total + 1];
        for i in 0..self.data.n() {
            let z = self.state.z[i];
            let g = if z == k { total } else { self.atom_start[z] + self.state.s[i] };
            if seen[g] == rank[g] {
                istar[g] = i;
            }
            seen[g] += 1;
        }
        for g in 0..=total {
            if seen[g] > 0 {
                if !(rho_g[g] > 0.0) {
                    return Err(Error::SliceDegenerate(format!("minimum slice underflowed to {:e}", rho_g[g])));
                }
                rho_star = rho_star.min(rho_g[g]);
            }
        }
        let slice = &mut self.state.slice;
        slice.rho_star_kj = (0..k).map(|kk| rho_g[self.atom_start[kk]..self.atom_start[kk + 1]].to_vec()).collect();
        slice.i_star_kj = (0..k).map(|kk| istar[self.atom_start[kk]..self.atom_start[kk + 1]].to_vec()).collect();
        slice.rho_star_bg = rho_g[total];
        slice.i_star_bg = istar[total];
        slice.rho_star = rho_star;
        Ok(())
    }

    /// Repulsion auxiliary, centers and halfwidths (or the scale-axis analogues).
    pub fn update_regions(&mut self) -> Result<()> {
        if self.hp.is_scale() {
            for k in 0..self.k() {
                self.update_loc_mean(k)?;
            }
        }
        if self.hp.regions_fixed {
            return Ok(());
        }
        self.update_xi();
        let g_min = min_gap(self.state.xi, self.hp.tau, self.hp.nu);
        for k in 0..self.k() {
            if self.hp.is_scale() {
                self.scale_center_mh(k, g_min);
            } else {
                self.update_center(k, g_min)?;
            }
        }
        for k in 0..self.k() {
            self.update_radius(k, g_min);
        }
        Ok(())
    }

    fn update_xi(&mut self) {
        let c: Vec<Vec<f64>> = self.state.params.components.iter().map(|c| c.c.clone()).collect();
        let r: Vec<f64> = self.state.params.components.iter().map(|c| c.r).collect();
        let zeta = repulsion_term(&c, &r, self.hp.tau, self.hp.nu).exp();
        let mut rng = self.stream(&[TAG_XI]);
        self.state.xi = zeta * open01(&mut rng);
    }

    fn update_loc_mean(&mut self, k: usize) -> Result<()> {
        let comp = &self.state.params.components[k];
        let sum_u: f64 = comp.atoms.iter().map(|a| a.u[0]).sum();
        let (mean, sd) = center_posterior(self.hp.mu0[0], self.hp.eta[0], self.hp.sigma0[0], comp.atoms.len(), sum_u);
        let mut rng = self.stream(&[TAG_LOC_MEAN, k as u64]);
        self.state.params.components[k].loc_mean = Some(mean + sd * standard_normal(&mut rng));
        Ok(())
    }

    /// Exact coordinate-wise Gibbs update of a location-axis center.
    fn update_center(&mut self, k: usize, g_min: f64) -> Result<()> {
        let m = self.hp.dim;
        let mut rng = self.stream(&[TAG_CENTER, k as u64]);
        let comps = &self.state.params.components;
        let r = comps[k].r;
        let mut c = comps[k].c.clone();
        let mut excl = Vec::with_capacity(comps.len());
        for d in 0..m {
            let atoms = &comps[k].atoms;
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut sum_u = 0.0;
            for a in atoms {
                lo = lo.max(a.u[d] - r);
                hi = hi.min(a.u[d] + r);
                sum_u += a.u[d];
            }
            let (mean, sd) = center_posterior(self.hp.mu0[d], self.hp.eta[d], self.hp.sigma0[d], atoms.len(), sum_u);
            excl.clear();
            for (l, other) in comps.iter().enumerate() {
                if l == k {
                    continue;
                }
                let reach = r + other.r + g_min;
                let blocked_elsewhere = (0..m).any(|e| e != d && (c[e] - other.c[e]).abs() > reach);
                if !blocked_elsewhere {
                    excl.push((other.c[d] - reach, other.c[d] + reach));
                }
            }
            c[d] = sample_normal_on_pieces(mean, sd, lo, hi, &mut excl, c[d], &mut rng)?;
        }
        self.state.params.components[k].c = c;
        Ok(())
    }

    /// True if component `k` with region `(c, r)` keeps every gap above `g_min`.
    fn gaps_ok(&self, k: usize, c: &[f64], r: f64, g_min: f64) -> bool {
        self.state
            .params
            .components
            .iter()
            .enumerate()
            .all(|(l, o)| l == k || linf(c, &o.c) - r - o.r > g_min)
    }

    /// Log target of `(c, r)` for component `k` up to terms constant in both.
    fn region_log_target(&self, k: usize, c: &[f64], r: f64, g_min: f64) -> f64 {
        let hp = &self.hp;
        let comp = &self.state.params.components[k];
        let j = comp.atoms.len() as f64;
        if !(r > 0.0) || !self.gaps_ok(k, c, r, g_min) {
            return f64::NEG_INFINITY;
        }
        let prior_r = gamma_log_kernel(r, hp.gamma_shape, hp.gamma_rate);
        if hp.is_scale() {
            if c[0] + r <= 0.0 || comp.atoms.iter().any(|a| (a.sigma() - c[0]).abs() > r) {
                return f64::NEG_INFINITY;
            }
            normal_logpdf(c[0], hp.scale_mu0, hp.scale_eta) + prior_r - j * log_scale_region_mass(c[0], r, hp)
        } else {
            if comp.atoms.iter().any(|a| linf(&a.u, c) > r) {
                return f64::NEG_INFINITY;
            }
            prior_r - j * log_region_mass(r, &hp.sigma0)
        }
    }

    fn scale_center_mh(&mut self, k: usize, g_min: f64) {
        let mut rng = self.stream(&[TAG_CENTER, k as u64]);
        let comp = &self.state.params.components[k];
        let (c, r) = (comp.c[0], comp.r);
        let prop = c + self.mh_step[k] * r * standard_normal(&mut rng);
        let cur = self.region_log_target(k, &[c], r, g_min);
        let new = self.region_log_target(k, &[prop], r, g_min);
        if new > f64::NEG_INFINITY && open01(&mut rng).ln() < new - cur {
            self.state.params.components[k].c[0] = prop;
        }
    }

    /// Random-walk MH on `log r`.
    fn update_radius(&mut self, k: usize, g_min: f64) {
        let mut rng = self.stream(&[TAG_RADIUS, k as u64]);
        let comp = &self.state.params.components[k];
        let c = comp.c.clone();
        let r = comp.r;
        let prop = r * (self.mh_step[k] * standard_normal(&mut rng)).exp();
        let cur = self.region_log_target(k, &c, r, g_min);
        let new = self.region_log_target(k, &c, prop, g_min);
        let accept = new > f64::NEG_INFINITY && open01(&mut rng).ln() < new - cur + (prop / r).ln();
        if accept {
            self.state.params.components[k].r = prop;
        }
        self.window[k][1] += 1;
        self.total[k][1] += 1;
        if accept {
            self.window[k][0] += 1;
            self.total[k][0] += 1;
        }
    }

    /// Scale MH steps toward 25-40% acceptance and reset the window counters.
    pub fn adapt(&mut self) {
        for k in 0..self.k() {
            let [acc, prop] = self.window[k];
            if prop > 0 {
                let rate = acc as f64 / prop as f64;
                if rate < 0.25 {
                    self.mh_step[k] *= 0.8;
                } else if rate > 0.40 {
                    self.mh_step[k] *= 1.25;
                }
            }
            self.window[k] = [0, 0];
        }
    }

    fn reset_acceptance(&mut self) {
        self.total.iter_mut().for_each(|t| *t = [0, 0]);
    }

    fn acceptance(&self) -> Vec<f64> {
        self.total
            .iter()
            .map(|&[a, p]| if p == 0 { f64::NAN } else { a as f64 / p as f64 })
            .collect()
    }
}

/// Read-only context shared by the map blocks.
struct MapCtx<'t> {
    data: &'t Dataset,
    table: &'t KernelTable,
    log_w: Vec<f64>,
    comp_of: Vec<usize>,
    rho_g: Vec<f64>,
    istar_g: Vec<usize>,
    beta_g: Vec<f64>,
    comp_start: &'t [usize],
    k: usize,
    bg: Option<(&'t crate::model::Window, f64)>,
    seed: u64,
    sweep: u64,
}

impl MapCtx<'_> {
    fn run_block(&self, start: usize, zc: &mut [usize], sc: &mut [usize]) -> Result<()> {
        let n_atoms = self.table.len();
        let mut cand: Vec<(usize, f64)> = Vec::with_capacity(n_atoms + 1);
        for (off, (zi, si)) in zc.iter_mut().zip(sc.iter_mut()).enumerate() {
            let i = start + off;
            let x = self.data.row(i);
            let mut rng = RngStream::derive(self.seed, &[TAG_MAP, self.sweep, i as u64]);
            let g = if *zi == self.k { n_atoms } else { self.comp_start[*zi] + *si };
            let rho = if self.istar_g[g] == i {
                self.rho_g[g]
            } else {
                uniform(self.rho_g[g], self.beta_g[g], &mut rng)
            };
            cand.clear();
            let mut max = f64::NEG_INFINITY;
            for a in 0..n_atoms {
                if self.beta_g[a] > rho {
                    let lp = self.log_w[self.comp_of[a]] + self.table.log_kernel(a, x);
                    max = max.max(lp);
                    cand.push((a, lp));
                }
            }
            if let Some((win, lp)) = self.bg {
                if rho < 1.0 && win.contains(x) {
                    max = max.max(lp);
                    cand.push((n_atoms, lp));
                }
            }
            if !(max > f64::NEG_INFINITY) || !max.is_finite() {
                return Err(Error::SliceDegenerate(format!(
                    "observation {i} has no eligible atom above slice {rho:e}"
                )));
            }
            let total: f64 = cand.iter().map(|c| (c.1 - max).exp()).sum();
            let mut u = open01(&mut rng) * total;
            let mut pick = cand[cand.len() - 1].0;
            for &(a, lp) in &cand {
                let p = (lp - max).exp();
                if u < p {
                    pick = a;
                    break;
                }
                u -= p;
            }
            if pick == n_atoms {
                *zi = self.k;
                *si = 0;
            } else {
                let kk = self.comp_of[pick];
                *zi = kk;
                *si = pick - self.comp_start[kk];
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// k-means++ seeding followed by Lloyd iterations. Centers are returned in
/// ascending order of their first coordinate.
pub fn kmeans(data: &Dataset, k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let n = data.n();
    let m = data.dim();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = vec![data.row(((open01(rng) * n as f64) as usize).min(n - 1)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| d2(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let next = crate::rngdist::sample_categorical(&dist, rng).unwrap_or(((open01(rng) * n as f64) as usize).min(n - 1));
        centers.push(data.row(next).to_vec());
        let c = centers.last().unwrap().clone();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(d2(data.row(i), &c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = nearest(data.row(i), &centers);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; m]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for d in 0..m {
                sums[assign[i]][d] += data.row(i)[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
    centers
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, ctr) in centers.iter().enumerate() {
        let d: f64 = x.iter().zip(ctr).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

fn prior_variance(hp: &Hyperparams) -> Vec<f64> {
    if hp.dim == 1 {
        vec![hp.theta2 / (hp.theta1 + 1.0)]
    } else {
        let denom = hp.iw_df + hp.dim as f64 + 1.0;
        hp.iw_scale.iter().map(|v| v / denom).collect()
    }
}

/// Sample covariance of a cluster, or `None` if it is degenerate.
fn cluster_cov(data: &Dataset, members: &[usize]) -> Option<Vec<f64>> {
    let m = data.dim();
    if members.len() <= m {
        return None;
    }
    let pts: Vec<&[f64]> = members.iter().map(|&i| data.row(i)).collect();
    let st = SuffStats::from_points(m, &pts);
    let nf = st.n as f64;
    let mean: Vec<f64> = st.sum.iter().map(|s| s / nf).collect();
    let cov: Vec<f64> = st.scatter(&mean).iter().map(|v| v / (nf - 1.0)).collect();
    if m == 1 {
        return (cov[0] > 0.0).then_some(cov);
    }
    crate::model::chol_inverse(&cov, m).ok().map(|_| cov)
}

/// Starting state: k-means regions with one atom each, or a prior draw when
/// there are too few observations.
pub fn initial_state(data: &Dataset, hp: &Hyperparams, seed: u64) -> Result<ChainState> {
    hp.validate()?;
    if data.dim() != hp.dim {
        return invalid(format!("data have {} columns but the model has dimension {}", data.dim(), hp.dim));
    }
    let n = data.n();
    let k = hp.k;
    let mut rng = RngStream::derive(seed, &[TAG_INIT]);
    let nw = hp.n_weights();

    if n < 2 * k {
        return prior_state(data, hp, &mut rng);
    }

    let scale: f64 = {
        let s = data.summary();
        let v = crate::stats::mean(&s.sd);
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };

    // Regions and hard assignments.
    let (regions, assign): (Vec<(Vec<f64>, f64)>, Vec<usize>) = if hp.is_scale() {
        let mean = crate::stats::mean(data.values());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| (data.row(a)[0] - mean).abs().total_cmp(&(data.row(b)[0] - mean).abs()));
        let mut assign = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            assign[i] = rank * k / n;
        }
        let regions = if hp.regions_fixed {
            hp.fixed_regions.iter().map(|r| (r.center.clone(), r.halfwidth)).collect()
        } else {
            (0..k).map(|c| (vec![scale * (2 * c + 1) as f64 / k as f64], 0.9 * scale / k as f64)).collect()
        };
        (regions, assign)
    } else if hp.regions_fixed {
        let regions: Vec<(Vec<f64>, f64)> = hp.fixed_regions.iter().map(|r| (r.center.clone(), r.halfwidth)).collect();
        let assign = (0..n)
            .map(|i| {
                let x = data.row(i);
                (0..k)
                    .min_by(|&a, &b| {
                        (linf(x, &regions[a].0) - regions[a].1).total_cmp(&(linf(x, &regions[b].0) - regions[b].1))
                    })
                    .unwrap()
            })
            .collect();
        (regions, assign)
    } else {
        let centers = kmeans(data, k, &mut rng);
        let assign: Vec<usize> = (0..n).map(|i| nearest(data.row(i), &centers)).collect();
        let mut regions = Vec::with_capacity(k);
        for (c, ctr) in centers.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            let mean = if members.is_empty() {
                ctr.clone()
            } else {
                let pts: Vec<&[f64]> = members.iter().map(|&i| data.row(i)).collect();
                let st = SuffStats::from_points(hp.dim, &pts);
                st.sum.iter().map(|s| s / st.n as f64).collect()
            };
            let dev = members.iter().map(|&i| linf(data.row(i), &mean)).fold(0.0, f64::max);
            regions.push((mean, (1.5 * dev).max(1e-3 * scale)));
        }
        for a in 0..k {
            for b in a + 1..k {
                let dist = linf(&regions[a].0, &regions[b].0);
                let sum = regions[a].1 + regions[b].1;
                if dist <= sum {
                    let f = 0.9 * dist / sum;
                    regions[a].1 *= f;
                    regions[b].1 *= f;
                }
            }
        }
        if regions.iter().any(|r| !(r.1 > 1e-12 * scale)) {
            return prior_state(data, hp, &mut rng);
        }
        (regions, assign)
    };

    let mut components = Vec::with_capacity(k);
    let mut z = assign;
    let s = vec![0usize; n];
    for (c, (center, r)) in regions.into_iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| z[i] == c).collect();
        let nk = members.len() as f64;
        let mut comp = ComponentState {
            c: center.clone(),
            r,
            loc_mean: hp.is_scale().then(|| crate::stats::mean(data.values())),
            atoms: vec![],
            rest: 1.0,
        };
        if !members.is_empty() {
            let (u, cov) = if hp.is_scale() {
                let lo = (center[0] - r).max(0.0);
                let sigma = 0.5 * (lo + center[0] + r);
                (vec![comp.loc_mean.unwrap()], vec![sigma * sigma])
            } else {
                let pts: Vec<&[f64]> = members.iter().map(|&i| data.row(i)).collect();
                let st = SuffStats::from_points(hp.dim, &pts);
                let u: Vec<f64> = st
                    .sum
                    .iter()
                    .zip(&center)
                    .map(|(s, ctr)| (s / st.n as f64).clamp(ctr - r, ctr + r))
                    .collect();
                (u, cluster_cov(data, &members).unwrap_or_else(|| prior_variance(hp)))
            };
            let beta = nk / (nk + hp.dp_alpha);
            comp.atoms.push(Atom { u, cov, beta });
            comp.rest = 1.0 - beta;
        }
        components.push(comp);
    }
    // Components that ended up empty hold no labels; nothing to fix.
    let counts: Vec<f64> = (0..k).map(|c| z.iter().filter(|&&v| v == c).count() as f64).collect();
    let mut w: Vec<f64> = counts.iter().map(|c| c + 1.0).collect();
    if hp.background.is_some() {
        w.push(1.0);
    }
    let tot: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= tot);
    debug_assert_eq!(w.len(), nw);
    z.shrink_to_fit();

    let params = MixtureParams { w, components };
    let c: Vec<Vec<f64>> = params.components.iter().map(|c| c.c.clone()).collect();
    let r: Vec<f64> = params.components.iter().map(|c| c.r).collect();
    let xi = 0.5 * repulsion_term(&c, &r, hp.tau, hp.nu).exp();
    let mut state = ChainState {
        params,
        z,
        s,
        slice: SliceAux::default(),
        xi,
    };
    init_slice(&mut state, data, hp, seed)?;
    Ok(state)
}

fn init_slice(state: &mut ChainState, data: &Dataset, hp: &Hyperparams, seed: u64) -> Result<()> {
    let mut tmp = Sampler {
        data,
        hp: hp.clone(),
        plan: SweepPlan::default(),
        seed,
        state: state.clone(),
        sweep: 0,
        iw_scale: None,
        atom_start: vec![],
        stats: vec![],
        n_bg: 0,
        mh_step: vec![],
        window: vec![],
        total: vec![],
        loglik: f64::NAN,
    };
    tmp.compute_stats();
    tmp.update_slice_aux()?;
    state.slice = tmp.state.slice;
    Ok(())
}

fn prior_state(data: &Dataset, hp: &Hyperparams, rng: &mut RngStream) -> Result<ChainState> {
    let k = hp.k;
    let (c, r) = if hp.regions_fixed {
        (
            hp.fixed_regions.iter().map(|r| r.center.clone()).collect(),
            hp.fixed_regions.iter().map(|r| r.halfwidth).collect(),
        )
    } else {
        sample_repulsive_prior(hp, rng)?
    };
    let components: Vec<ComponentState> = c
        .iter()
        .zip(&r)
        .map(|(c, &r)| ComponentState {
            c: c.clone(),
            r,
            loc_mean: hp.is_scale().then(|| hp.mu0[0] + hp.eta[0] * standard_normal(rng)),
            atoms: vec![],
            rest: 1.0,
        })
        .collect();
    let w = crate::rngdist::sample_dirichlet(&vec![hp.conc(); hp.n_weights()], rng)?;
    let xi = repulsion_term(&c, &r, hp.tau, hp.nu).exp() * open01(rng);
    let n = data.n();
    // Observations (if any) go to the nearest region with a fresh atom.
    let mut state = ChainState {
        params: MixtureParams { w, components },
        z: vec![0; n],
        s: vec![0; n],
        slice: SliceAux {
            rho_star_kj: vec![vec![]; k],
            i_star_kj: vec![vec![]; k],
            rho_star_bg: 1.0,
            i_star_bg: usize::MAX,
            rho_star: 1.0,
        },
        xi,
    };
    if n > 0 {
        let iw = if hp.dim > 1 { Some(hp.iw_scale_matrix()?) } else { None };
        for kk in 0..k {
            let comp = &mut state.params.components[kk];
            let (u, cov) = sample_base_measure(comp, hp, iw.as_ref(), rng)?;
            comp.atoms.push(Atom { u, cov, beta: 0.5 });
            comp.rest = 0.5;
        }
        let centers: Vec<Vec<f64>> = state.params.components.iter().map(|c| c.c.clone()).collect();
        for i in 0..n {
            state.z[i] = nearest(data.row(i), &centers);
        }
        init_slice(&mut state, data, hp, rng.next_seed())?;
    }
    Ok(state)
}

trait NextSeed {
    fn next_seed(&mut self) -> u64;
}

impl NextSeed for RngStream {
    fn next_seed(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Check every structural invariant of a state.
pub fn check_invariants(state: &ChainState, n: usize, hp: &Hyperparams) -> Result<()> {
    let fail = |msg: String| Err(Error::InvalidState(msg));
    let k = hp.k;
    let p = &state.params;
    if p.k() != k || p.w.len() != hp.n_weights() {
        return fail("component or weight count mismatch".into());
    }
    let wsum: f64 = p.w.iter().sum();
    if (wsum - 1.0).abs() > 1e-12 || p.w.iter().any(|w| !(*w >= 0.0)) {
        return fail(format!("weights sum to {wsum}"));
    }
    for (kk, comp) in p.components.iter().enumerate() {
        let total: f64 = comp.atoms.iter().map(|a| a.beta).sum::<f64>() + comp.rest;
        if (total - 1.0).abs() > 1e-12 || !(comp.rest >= 0.0) {
            return fail(format!("component {} stick mass sums to {total}", kk + 1));
        }
        for (j, a) in comp.atoms.iter().enumerate() {
            if !(a.beta > 0.0) {
                return fail(format!("atom {j} of component {} has weight {}", kk + 1, a.beta));
            }
            if hp.is_scale() {
                let s = a.sigma();
                if s < (comp.c[0] - comp.r).max(0.0) || s > comp.c[0] + comp.r {
                    return fail(format!("atom {j} of component {} has sigma {s} outside its interval", kk + 1));
                }
            } else if linf(&a.u, &comp.c) > comp.r {
                return fail(format!("atom {j} of component {} lies outside its region", kk + 1));
            }
        }
    }
    if !hp.regions_fixed {
        for a in 0..k {
            for b in a + 1..k {
                let (ca, cb) = (&p.components[a], &p.components[b]);
                if linf(&ca.c, &cb.c) <= ca.r + cb.r {
                    return fail(format!("regions {} and {} overlap", a + 1, b + 1));
                }
            }
        }
    }
    if state.z.len() != n || state.s.len() != n {
        return fail("label vectors have the wrong length".into());
    }
    for i in 0..n {
        let z = state.z[i];
        if z == k {
            if hp.background.is_none() {
                return fail(format!("observation {i} is labelled background but no background is configured"));
            }
            continue;
        }
        let Some(atom) = p.components.get(z).and_then(|c| c.atoms.get(state.s[i])) else {
            return fail(format!("observation {i} points to an inactive atom"));
        };
        if !(atom.beta > 0.0) {
            return fail(format!("observation {i} points to an atom with zero weight"));
        }
        if let Some(rs) = state.slice.rho_star_kj.get(z).and_then(|v| v.get(state.s[i])) {
            if !(*rs < atom.beta) {
                return fail(format!("minimum slice {rs} is not below its atom weight {}", atom.beta));
            }
        }
    }
    Ok(())
}

/// Run a chain and collect thinned snapshots.
pub fn run(
    data: &Dataset,
    hp: &Hyperparams,
    plan: &SweepPlan,
    iters: usize,
    burnin: usize,
    thin: usize,
    seed: u64,
) -> Result<ChainOutput> {
    run_with(data, hp, plan, iters, burnin, thin, seed, |_, _| {})
}

/// [`run`] with a callback invoked on every retained state (before relabeling).
#[allow(clippy::too_many_arguments)]
pub fn run_with(
    data: &Dataset,
    hp: &Hyperparams,
    plan: &SweepPlan,
    iters: usize,
    burnin: usize,
    thin: usize,
    seed: u64,
    observer: impl FnMut(usize, &ChainState) + Send,
) -> Result<ChainOutput> {
    if thin == 0 {
        return invalid("thin must be at least 1");
    }
    if burnin > iters {
        return invalid(format!("burn-in {burnin} exceeds the iteration count {iters}"));
    }
    hp.validate()?;
    plan.validate()?;
    if plan.parallel {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| drive(data, hp, plan, iters, burnin, thin, seed, observer))
    } else {
        drive(data, hp, plan, iters, burnin, thin, seed, observer)
    }
}

#[allow(clippy::too_many_arguments)]
fn drive(
    data: &Dataset,
    hp: &Hyperparams,
    plan: &SweepPlan,
    iters: usize,
    burnin: usize,
    thin: usize,
    seed: u64,
    mut observer: impl FnMut(usize, &ChainState),
) -> Result<ChainOutput> {
    let start = Instant::now();
    let mut sampler = Sampler::new(data, hp, plan, seed)?;
    let mut snapshots = Vec::with_capacity(snapshot_count(iters, burnin, thin));
    let mut loglik = Vec::with_capacity(iters);
    for t in 0..iters {
        if t == burnin {
            sampler.reset_acceptance();
        }
        sampler.sweep()?;
        loglik.push(sampler.loglik());
        if t < burnin && plan.adapt_mh && (t + 1) % ADAPT_EVERY == 0 {
            sampler.adapt();
        }
        if t >= burnin && (t - burnin) % thin == 0 {
            observer(t, &sampler.state);
            snapshots.push(Snapshot {
                iteration: t,
                params: sampler.state.params.relabeled(),
                xi: sampler.state.xi,
            });
        }
    }
    Ok(ChainOutput {
        hyperparams: hp.clone(),
        seed,
        iters,
        burnin,
        thin,
        snapshots,
        loglik,
        mh_acceptance: sampler.acceptance(),
        mh_step: sampler.mh_step.clone(),
        elapsed_secs: start.elapsed().as_secs_f64(),
        final_state: Some(sampler.state),
    })
}
