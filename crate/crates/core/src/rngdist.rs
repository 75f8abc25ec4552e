//! Seeded random streams and the probability distributions used by the model.
//!
//! Every sampler takes a `&mut RngStream`. Streams are counter based: the
//! `k`-th draw of stream `(seed, stream_id)` is a pure function of the triple,
//! so a sweep that hands one stream to each observation produces identical
//! results regardless of how the observations are spread over threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{invalid, Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream.
///
/// Output `k` is `mix64(key + (k + 1) * GOLDEN)` where `key` is a hash of
/// `(seed, stream_id)`, i.e. a SplitMix64 sequence started at a hashed offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(mix64(seed ^ 0x6A09_E667_F3BC_C909) ^ stream_id.wrapping_mul(GOLDEN));
        Self {
            seed,
            stream_id,
            key: mix64(key),
            counter: 0,
        }
    }

    /// Stream whose id is a hash of a tuple of tags, e.g. `(phase, sweep, index)`.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let id = tags
            .iter()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, &t| mix64(h ^ mix64(t.wrapping_add(GOLDEN))));
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 64-bit words drawn so far.
    pub fn position(&self) -> u64 {
        self.counter
    }
}

impl RngCore for RngStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Uniform draw on the open interval (0, 1).
#[inline]
pub fn open01(rng: &mut RngStream) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn uniform(lo: f64, hi: f64, rng: &mut RngStream) -> f64 {
    lo + (hi - lo) * open01(rng)
}

#[inline]
pub fn standard_normal(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Normal density / CDF helpers
// ---------------------------------------------------------------------------

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    normal_logpdf(x, mu, sigma).exp()
}

#[inline]
pub fn normal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal upper tail `1 - Φ(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `log(1 - Φ(x))`, accurate far into the upper tail.
pub fn log_normal_sf(x: f64) -> f64 {
    if x < 30.0 {
        normal_sf(x).ln()
    } else {
        // Asymptotic series of the Mills ratio.
        let x2 = x * x;
        -0.5 * x2 - x.ln() - LN_SQRT_2PI + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// `log(Φ(b) - Φ(a))` for a standard normal, with `a < b`.
pub fn log_std_interval_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a > 0.0 {
        // Both in the upper half: Q(a) - Q(b).
        let la = log_normal_sf(a);
        let lb = log_normal_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b < 0.0 {
        log_std_interval_mass(-b, -a)
    } else {
        (1.0 - normal_sf(b) - normal_sf(-a)).ln()
    }
}

// ---------------------------------------------------------------------------
// Univariate samplers
// ---------------------------------------------------------------------------

/// Standardised truncation point beyond which the tail sampler is used.
const TAIL_SWITCH: f64 = 5.0;

/// Draw from N(mu, sigma^2) conditioned on [lo, hi].
pub fn sample_truncated_normal(
    mu: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !mu.is_finite() || !sigma.is_finite() || lo.is_nan() || hi.is_nan() {
        return invalid(format!(
            "truncated normal with non-finite input (mu={mu}, sigma={sigma}, lo={lo}, hi={hi})"
        ));
    }
    if sigma <= 0.0 {
        return invalid(format!("truncated normal sigma must be positive, got {sigma}"));
    }
    if lo >= hi {
        return invalid(format!("truncated normal needs lo < hi, got [{lo}, {hi}]"));
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let z = std_truncated_normal(a, b, rng);
    Ok((mu + sigma * z).clamp(lo, hi))
}

fn std_truncated_normal(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    if a > TAIL_SWITCH {
        tail_truncated_normal(a, b, rng)
    } else if b < -TAIL_SWITCH {
        -tail_truncated_normal(-b, -a, rng)
    } else if a > 0.0 {
        // Invert through the upper tail to keep precision.
        let qa = normal_sf(a);
        let qb = normal_sf(b);
        let u = uniform(qb, qa, rng);
        (-normal_quantile(u)).clamp(a, b)
    } else {
        let pa = normal_cdf(a);
        let pb = normal_cdf(b);
        let u = uniform(pa, pb, rng);
        normal_quantile(u).clamp(a, b)
    }
}

/// Standard normal on [a, b] with a > 0 large.
fn tail_truncated_normal(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let width = b - a;
    if a * width < 1.0 {
        // Narrow window: uniform proposal, acceptance >= exp(-1.5).
        loop {
            let z = uniform(a, b, rng);
            if open01(rng).ln() < 0.5 * (a * a - z * z) {
                return z;
            }
        }
    }
    // Exponential proposal with the optimal rate.
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let z = a + e / lambda;
        if z > b {
            continue;
        }
        let d = z - lambda;
        if open01(rng).ln() < -0.5 * d * d {
            return z;
        }
    }
}

/// `log Gamma(shape, 1)` variate, stable for small shapes.
pub(crate) fn ln_gamma_variate(shape: f64, rng: &mut RngStream) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("validated shape");
        let x: f64 = g.sample(rng);
        x.ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("validated shape");
        let x: f64 = g.sample(rng);
        x.ln() + open01(rng).ln() / shape
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return invalid(format!("{name} must be positive and finite, got {v}"));
    }
    Ok(())
}

/// Gamma with the given shape and rate.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("gamma shape", shape)?;
    check_positive("gamma rate", rate)?;
    Ok(ln_gamma_variate(shape, rng).exp() / rate)
}

/// Inverse-gamma with density proportional to `x^(-shape-1) exp(-scale/x)`.
pub fn sample_inverse_gamma(shape: f64, scale: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("inverse-gamma shape", shape)?;
    check_positive("inverse-gamma scale", scale)?;
    Ok(scale * (-ln_gamma_variate(shape, rng)).exp())
}

pub fn inverse_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// CDF of the inverse-gamma distribution.
pub fn inverse_gamma_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_ur(shape, scale / x)
    }
}

/// Probability that an inverse-gamma variate lies in (lo, hi).
pub fn inverse_gamma_interval_mass(shape: f64, scale: f64, lo: f64, hi: f64) -> f64 {
    // X in (lo, hi)  <=>  T = scale / X in (scale/hi, scale/lo), T ~ Gamma(shape, 1).
    let t_lo = if hi.is_infinite() { 0.0 } else { scale / hi };
    let t_hi = if lo <= 0.0 { f64::INFINITY } else { scale / lo };
    gamma_interval_mass(shape, t_lo, t_hi)
}

fn gamma_interval_mass(shape: f64, t_lo: f64, t_hi: f64) -> f64 {
    let p_lo = if t_lo <= 0.0 { 0.0 } else { gamma_lr(shape, t_lo) };
    if p_lo > 0.5 {
        let q_lo = gamma_ur(shape, t_lo);
        let q_hi = if t_hi.is_infinite() { 0.0 } else { gamma_ur(shape, t_hi) };
        (q_lo - q_hi).max(0.0)
    } else {
        let p_hi = if t_hi.is_infinite() { 1.0 } else { gamma_lr(shape, t_hi) };
        (p_hi - p_lo).max(0.0)
    }
}

/// Inverse-gamma conditioned on (lo, hi), drawn by inverting the regularized
/// incomplete gamma function.
pub fn sample_truncated_inverse_gamma(
    shape: f64,
    scale: f64,
    lo: f64,
    hi: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    check_positive("inverse-gamma shape", shape)?;
    check_positive("inverse-gamma scale", scale)?;
    if lo.is_nan() || hi.is_nan() || lo < 0.0 || hi <= lo {
        return invalid(format!("truncated inverse-gamma needs 0 <= lo < hi, got ({lo}, {hi})"));
    }
    let t_lo = if hi.is_infinite() { 0.0 } else { scale / hi };
    let t_hi = if lo <= 0.0 { f64::INFINITY } else { scale / lo };
    let mass = gamma_interval_mass(shape, t_lo, t_hi);
    if !(mass > 1e-12) {
        return Err(Error::NumericalMass(format!(
            "inverse-gamma({shape}, {scale}) has mass {mass:e} on ({lo}, {hi})"
        )));
    }
    let u = open01(rng);
    let t = truncated_gamma_quantile(shape, t_lo, t_hi, u);
    let x = scale / t;
    // Guard against round-off at the ends.
    let x = x.clamp(lo, hi);
    Ok(x)
}

/// Quantile `u` of Gamma(shape, 1) restricted to (t_lo, t_hi).
fn truncated_gamma_quantile(shape: f64, t_lo: f64, t_hi: f64, u: f64) -> f64 {
    let ln_norm = ln_gamma(shape);
    let p_lo = if t_lo <= 0.0 { 0.0 } else { gamma_lr(shape, t_lo) };
    let upper = p_lo > 0.5;
    // Work with whichever tail keeps precision.
    let (f_lo, f_hi) = if upper {
        let q_lo = if t_lo <= 0.0 { 1.0 } else { gamma_ur(shape, t_lo) };
        let q_hi = if t_hi.is_infinite() { 0.0 } else { gamma_ur(shape, t_hi) };
        (q_lo, q_hi)
    } else {
        let p_hi = if t_hi.is_infinite() { 1.0 } else { gamma_lr(shape, t_hi) };
        (p_lo, p_hi)
    };
    let target = f_lo + u * (f_hi - f_lo);
    let eval = |t: f64| if upper { gamma_ur(shape, t) } else { gamma_lr(shape, t) };
    // f is increasing in t for the lower tail, decreasing for the upper tail.
    let sign = if upper { -1.0 } else { 1.0 };

    let mut lo = t_lo.max(0.0);
    let mut hi = if t_hi.is_finite() {
        t_hi
    } else {
        // Find a finite upper bracket.
        let mut h = (shape + 10.0 * shape.sqrt() + 10.0).max(2.0 * lo + 1.0);
        while sign * (eval(h) - target) < 0.0 {
            h *= 2.0;
        }
        h
    };
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let g = sign * (eval(t) - target);
        if g.abs() <= 1e-15 * target.abs().max(1e-300) {
            break;
        }
        if g < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        // Newton step on the incomplete gamma, falling back to bisection.
        let dens = ((shape - 1.0) * t.ln() - t - ln_norm).exp();
        let mut next = if dens > 0.0 { t - g / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs() {
            t = next;
            break;
        }
        t = next;
    }
    t.clamp(t_lo.max(f64::MIN_POSITIVE), t_hi)
}

/// Quantile `p` of an inverse-gamma variate conditioned on (lo, hi).
pub fn truncated_inverse_gamma_quantile(shape: f64, scale: f64, lo: f64, hi: f64, p: f64) -> f64 {
    let t_lo = if hi.is_infinite() { 0.0 } else { scale / hi };
    let t_hi = if lo <= 0.0 { f64::INFINITY } else { scale / lo };
    // Large sigma^2 corresponds to small t, so the quantile order flips.
    let t = truncated_gamma_quantile(shape, t_lo, t_hi, 1.0 - p);
    (scale / t).clamp(lo, hi)
}

pub fn sample_beta(a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("beta a", a)?;
    check_positive("beta b", b)?;
    let la = ln_gamma_variate(a, rng);
    let lb = ln_gamma_variate(b, rng);
    Ok(1.0 / (1.0 + (lb - la).exp()))
}

/// Dirichlet draw. Every concentration must be positive.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return invalid("dirichlet needs at least one concentration");
    }
    for &a in alpha {
        check_positive("dirichlet concentration", a)?;
    }
    Ok(dirichlet_allow_zero(alpha, rng))
}

/// Dirichlet draw where zero concentrations yield exactly zero weight
/// (the Gamma(0) point mass at zero). At least one entry must be positive.
pub(crate) fn dirichlet_allow_zero(alpha: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| if a > 0.0 { ln_gamma_variate(a, rng) } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return invalid("SPD matrix must be square and non-empty");
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return invalid(format!("matrix not symmetric at ({i}, {j})"));
                }
            }
        }
        if m.iter().any(|v| !v.is_finite()) || m.clone().cholesky().is_none() {
            return invalid("matrix is not positive definite");
        }
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn from_row_slice(dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != dim * dim {
            return invalid(format!("expected {} entries for a {dim}x{dim} matrix", dim * dim));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.0[(i, j)] == 0.0))
    }
}

/// Inverse-Wishart draw via the Bartlett decomposition of Wishart(df, scale^-1).
pub fn sample_inverse_wishart(df: f64, scale: &SpdMatrix, rng: &mut RngStream) -> Result<SpdMatrix> {
    let m = scale.dim();
    if !(df > m as f64 - 1.0) || !df.is_finite() {
        return invalid(format!("inverse-Wishart df must exceed dim - 1 = {}, got {df}", m - 1));
    }
    let inv = scale
        .0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("inverse-Wishart scale is singular".into()))?;
    let inv = 0.5 * (&inv + inv.transpose());
    let l = inv
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("inverse-Wishart scale is not SPD".into()))?
        .l();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let chi2 = 2.0 * ln_gamma_variate(0.5 * (df - i as f64), rng).exp();
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    // W = (LA)(LA)^T, so W^-1 = T^T T with T = (LA)^-1 lower triangular.
    let la = l * a;
    let t = la
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or_else(|| Error::NumericalMass("singular Bartlett factor".into()))?;
    let x = t.transpose() * &t;
    let x = 0.5 * (&x + x.transpose());
    SpdMatrix::new(x).map_err(|_| Error::NumericalMass("inverse-Wishart draw lost definiteness".into()))
}

/// Log density of the inverse-Wishart distribution.
pub fn inverse_wishart_logpdf(x: &DMatrix<f64>, df: f64, scale: &SpdMatrix) -> f64 {
    let m = x.nrows() as f64;
    let Some(chol_x) = x.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let logdet_x = 2.0 * chol_x.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let chol_s = scale.0.clone().cholesky().expect("SPD scale");
    let logdet_s = 2.0 * chol_s.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let x_inv = chol_x.inverse();
    let tr = (&scale.0 * x_inv).trace();
    let mut ln_mgamma = 0.25 * m * (m - 1.0) * PI.ln();
    for j in 0..x.nrows() {
        ln_mgamma += ln_gamma(0.5 * (df - j as f64));
    }
    0.5 * df * logdet_s - 0.5 * df * m * 2f64.ln() - ln_mgamma - 0.5 * (df + m + 1.0) * logdet_x
        - 0.5 * tr
}

/// Draw from N(mu, sigma) restricted to the hypercube `||x - center||_inf <= halfwidth`.
///
/// Diagonal covariances factor into independent truncated normals. Otherwise
/// a systematic-scan Gibbs sampler runs `TMVN_GIBBS_SWEEPS` sweeps starting at
/// `init` (or at `mu` projected onto the cube).
pub fn sample_truncated_mvn_hypercube(
    mu: &[f64],
    sigma: &SpdMatrix,
    center: &[f64],
    halfwidth: f64,
    init: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let m = mu.len();
    if sigma.dim() != m || center.len() != m {
        return invalid("truncated MVN dimension mismatch");
    }
    if !(halfwidth > 0.0) || !halfwidth.is_finite() {
        return invalid(format!("hypercube halfwidth must be positive, got {halfwidth}"));
    }
    if mu.iter().chain(center).any(|v| !v.is_finite()) {
        return invalid("truncated MVN with non-finite mean or center");
    }
    let s = sigma.matrix();
    for d in 0..m {
        let sd = s[(d, d)].sqrt();
        let a = (center[d] - halfwidth - mu[d]) / sd;
        let b = (center[d] + halfwidth - mu[d]) / sd;
        if log_std_interval_mass(a, b) < -700.0 {
            return Err(Error::NumericalMass(format!(
                "hypercube coordinate {d} is {:.1} sd from the mean",
                a.abs().min(b.abs())
            )));
        }
    }
    tmvn_hypercube_gibbs(mu, sigma, center, halfwidth, init, rng)
}

/// The sampler behind [`sample_truncated_mvn_hypercube`] without the
/// negligible-mass check. The truncated-normal draws handle deep tails, so
/// posterior updates whose mean sits far outside the cube stay usable.
pub(crate) fn tmvn_hypercube_gibbs(
    mu: &[f64],
    sigma: &SpdMatrix,
    center: &[f64],
    halfwidth: f64,
    init: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let m = mu.len();
    let s = sigma.matrix();
    if sigma.is_diagonal() {
        return (0..m)
            .map(|d| {
                sample_truncated_normal(
                    mu[d],
                    s[(d, d)].sqrt(),
                    center[d] - halfwidth,
                    center[d] + halfwidth,
                    rng,
                )
            })
            .collect();
    }
    let prec = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular covariance".into()))?;
    let mut x: Vec<f64> = match init {
        Some(v) if v.len() == m => v
            .iter()
            .zip(center)
            .map(|(&xi, &c)| xi.clamp(c - halfwidth, c + halfwidth))
            .collect(),
        _ => mu
            .iter()
            .zip(center)
            .map(|(&xi, &c)| xi.clamp(c - halfwidth, c + halfwidth))
            .collect(),
    };
    for _ in 0..TMVN_GIBBS_SWEEPS {
        for d in 0..m {
            let pdd = prec[(d, d)];
            let mut shift = 0.0;
            for e in 0..m {
                if e != d {
                    shift += prec[(d, e)] * (x[e] - mu[e]);
                }
            }
            let cm = mu[d] - shift / pdd;
            let csd = (1.0 / pdd).sqrt();
            x[d] = sample_truncated_normal(cm, csd, center[d] - halfwidth, center[d] + halfwidth, rng)?;
        }
    }
    Ok(x)
}

pub const TMVN_GIBBS_SWEEPS: usize = 10;

/// Sample an index with probability proportional to `weights`.
pub fn sample_categorical(weights: &[f64], rng: &mut RngStream) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(i);
            }
            u -= w;
            last = Some(i);
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn var(v: &[f64]) -> f64 {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut c = RngStream::new(7, 4);
        assert_ne!(xs[0], c.next_u64());
        assert_eq!(a.position(), 100);
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let mut a = RngStream::derive(1, &[0, 5, 9]);
        let mut b = RngStream::derive(1, &[0, 9, 5]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_helpers() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_pdf(0.0, 0.0, 1.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((normal_cdf(1.96) - 0.9750).abs() < 1e-4);
        for p in [1e-10, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-9] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-9 * p.min(1.0 - p));
        }
        // Tail log mass agrees with the direct formula where both are accurate.
        let direct = (normal_sf(3.0) - normal_sf(4.0)).ln();
        assert!((log_std_interval_mass(3.0, 4.0) - direct).abs() < 1e-12);
        assert!(log_std_interval_mass(40.0, 41.0).is_finite());
    }

    #[test]
    fn truncated_normal_untruncated_limit() {
        let mut rng = RngStream::new(11, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_truncated_normal(0.0, 1.0, -1e9, 1e9, &mut rng).unwrap())
            .collect();
        assert!(mean(&xs).abs() < 3.0 / (n as f64).sqrt() * 1.5);
    }

    #[test]
    fn truncated_normal_half_normal_mean() {
        let mut rng = RngStream::new(12, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_truncated_normal(0.0, 1.0, 0.0, 1e9, &mut rng).unwrap())
            .collect();
        assert!((mean(&xs) - (2.0 / PI).sqrt()).abs() < 0.003);
        assert!(xs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn truncated_normal_far_window() {
        let mut rng = RngStream::new(13, 0);
        for _ in 0..10_000 {
            let x = sample_truncated_normal(5.0, 1.0, 0.0, 1.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
        // Deep tail on both sides.
        for _ in 0..10_000 {
            let x = sample_truncated_normal(0.0, 1.0, 30.0, 31.0, &mut rng).unwrap();
            assert!((30.0..=31.0).contains(&x));
            let y = sample_truncated_normal(0.0, 1.0, -12.0, -11.9, &mut rng).unwrap();
            assert!((-12.0..=-11.9).contains(&y));
        }
    }

    #[test]
    fn truncated_normal_tail_mean_matches_quadrature() {
        // Mean of N(0,1) on [6, 7] computed in closed form.
        let a: f64 = 6.0;
        let b: f64 = 7.0;
        let z = normal_sf(a) - normal_sf(b);
        let exact = (normal_pdf(a, 0.0, 1.0) - normal_pdf(b, 0.0, 1.0)) / z;
        let mut rng = RngStream::new(14, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_truncated_normal(0.0, 1.0, a, b, &mut rng).unwrap())
            .collect();
        let se = (var(&xs) / n as f64).sqrt();
        assert!((mean(&xs) - exact).abs() < 5.0 * se);
    }

    #[test]
    fn truncated_normal_rejects_bad_input() {
        let mut rng = RngStream::new(1, 1);
        assert!(sample_truncated_normal(f64::NAN, 1.0, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_truncated_normal(0.0, 0.0, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_truncated_normal(0.0, 1.0, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn inverse_gamma_means() {
        let mut rng = RngStream::new(21, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_inverse_gamma(3.0, 2.0, &mut rng).unwrap()).collect();
        assert!((mean(&xs) - 1.0).abs() < 0.01);
        let ys: Vec<f64> = (0..n).map(|_| sample_inverse_gamma(3.0, 4.0, &mut rng).unwrap()).collect();
        assert!((mean(&ys) - 2.0).abs() < 0.02);
        assert!((0..1000).all(|_| sample_inverse_gamma(2.0, 2.0, &mut rng).unwrap() > 0.0));
    }

    #[test]
    fn truncated_inverse_gamma_support_and_noop() {
        let mut rng = RngStream::new(22, 0);
        for _ in 0..20_000 {
            let x = sample_truncated_inverse_gamma(3.0, 2.0, 0.5, 1.5, &mut rng).unwrap();
            assert!(x > 0.5 && x < 1.5);
        }
        let n = 100_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| sample_truncated_inverse_gamma(3.0, 2.0, 0.9, 1.1, &mut rng).unwrap())
            .collect();
        let m = mean(&ys);
        assert!(m > 0.9 && m < 1.1);

        let a: Vec<f64> = (0..n)
            .map(|_| sample_truncated_inverse_gamma(3.0, 2.0, 0.0, f64::INFINITY, &mut rng).unwrap())
            .collect();
        let b: Vec<f64> = (0..n).map(|_| sample_inverse_gamma(3.0, 2.0, &mut rng).unwrap()).collect();
        assert!(crate::stats::ks_two_sample(&a, &b) < 0.01);
    }

    #[test]
    fn truncated_inverse_gamma_negligible_mass() {
        let mut rng = RngStream::new(23, 0);
        let err = sample_truncated_inverse_gamma(50.0, 1.0, 100.0, 200.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NumericalMass(_)));
    }

    #[test]
    fn dirichlet_moments() {
        let mut rng = RngStream::new(31, 0);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let d = sample_dirichlet(&[1.0, 1.0], &mut rng).unwrap();
            acc[0] += d[0];
            acc[1] += d[1];
        }
        assert!((acc[0] / n as f64 - 0.5).abs() < 0.005);

        let alpha = [1.0 / 3.0 + 5.0, 1.0 / 3.0 + 3.0, 1.0 / 3.0 + 2.0];
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let d = sample_dirichlet(&alpha, &mut rng).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..3 {
                acc[i] += d[i];
            }
        }
        for (i, expect) in [0.4848, 0.3030, 0.2121].iter().enumerate() {
            assert!((acc[i] / n as f64 - expect).abs() < 0.005);
        }
        for _ in 0..100 {
            let d = sample_dirichlet(&[1e6, 1e6], &mut rng).unwrap();
            assert!((d[0] - 0.5).abs() < 0.01);
        }
        // Very small concentrations stay on the simplex.
        let d = sample_dirichlet(&[1e-3, 1e-3, 1e-3], &mut rng).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_zero_entries() {
        let mut rng = RngStream::new(32, 0);
        let d = dirichlet_allow_zero(&[10.0, 0.0, 1.0], &mut rng);
        assert_eq!(d[1], 0.0);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_and_gamma_moments() {
        let mut rng = RngStream::new(41, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_beta(1.0, 1.0, &mut rng).unwrap()).collect();
        assert!((mean(&xs) - 0.5).abs() < 0.002);
        let xs: Vec<f64> = (0..n).map(|_| sample_beta(1.0, 4.0, &mut rng).unwrap()).collect();
        assert!((mean(&xs) - 0.2).abs() < 0.002);
        assert!((0..1000).all(|_| {
            let b = sample_beta(2.0, 2.0, &mut rng).unwrap();
            b > 0.0 && b < 1.0
        }));
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(2.0, 1.0, &mut rng).unwrap()).collect();
        assert!((mean(&xs) - 2.0).abs() < 0.01);
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(1.0, 1.0, &mut rng).unwrap()).collect();
        assert!((var(&xs) - 1.0).abs() < 0.02);
        assert!((0..1000).all(|_| sample_gamma(5.0, 10.0, &mut rng).unwrap() > 0.0));
    }

    #[test]
    fn inverse_wishart_mean() {
        let mut rng = RngStream::new(51, 0);
        let scale = SpdMatrix::from_diagonal(&[4.0, 4.0]).unwrap();
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let d = sample_inverse_wishart(7.0, &scale, &mut rng).unwrap();
            acc += d.matrix();
        }
        acc /= n as f64;
        let ident = DMatrix::<f64>::identity(2, 2);
        for (a, b) in acc.iter().zip(ident.iter()) {
            assert!((a - b).abs() < 0.05, "{acc}");
        }
        let scale = SpdMatrix::identity(2);
        for _ in 0..1000 {
            let d = sample_inverse_wishart(5.0, &scale, &mut rng).unwrap();
            assert!(d.matrix().determinant() > 0.0);
        }
        assert!(sample_inverse_wishart(0.5, &scale, &mut rng).is_err());
    }

    #[test]
    fn spd_validation() {
        assert!(SpdMatrix::from_row_slice(2, &[1.0, 0.5, 0.5, 1.0]).is_ok());
        assert!(SpdMatrix::from_row_slice(2, &[1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(SpdMatrix::from_row_slice(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn truncated_mvn_cases() {
        let mut rng = RngStream::new(61, 0);
        let eye = SpdMatrix::identity(2);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let x = sample_truncated_mvn_hypercube(&[0.0, 0.0], &eye, &[0.0, 0.0], 10.0, None, &mut rng)
                .unwrap();
            acc[0] += x[0];
            acc[1] += x[1];
        }
        assert!(acc.iter().all(|a| (a / n as f64).abs() < 0.01));

        let mut m0 = 0.0;
        let reps = 20_000;
        for _ in 0..reps {
            let x = sample_truncated_mvn_hypercube(&[3.0, 0.0], &eye, &[0.0, 0.0], 1.0, None, &mut rng)
                .unwrap();
            assert!(x.iter().all(|v| v.abs() <= 1.0));
            m0 += x[0];
        }
        // Truncated N(3,1) on [-1,1] has mean (phi(-4) - phi(-2)) / (Phi(-2) - Phi(-4)) + 3.
        let exact = 3.0 + (normal_pdf(-4.0, 0.0, 1.0) - normal_pdf(-2.0, 0.0, 1.0))
            / (normal_cdf(-2.0) - normal_cdf(-4.0));
        assert!(exact > 0.5);
        assert!((m0 / reps as f64 - exact).abs() < 0.01);

        let corr = SpdMatrix::from_row_slice(2, &[1.0, 0.8, 0.8, 1.0]).unwrap();
        for _ in 0..2000 {
            let x = sample_truncated_mvn_hypercube(&[2.0, -2.0], &corr, &[0.5, 0.5], 0.7, None, &mut rng)
                .unwrap();
            assert!(x.iter().all(|v| (v - 0.5).abs() <= 0.7));
        }
        assert!(matches!(
            sample_truncated_mvn_hypercube(&[100.0, 0.0], &eye, &[0.0, 0.0], 1.0, None, &mut rng),
            Err(Error::NumericalMass(_))
        ));
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = RngStream::new(71, 0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng), Some(1));
        }
        assert_eq!(sample_categorical(&[0.0, 0.0], &mut rng), None);
    }
}
