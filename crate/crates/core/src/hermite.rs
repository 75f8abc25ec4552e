//! Component splitting with scaled Hermite functions.
//!
//! A two-component mixture `f = w1 f1 + w2 f2` whose components are Gaussian
//! location mixtures around centers `c1`, `c2` is expanded in the Hermite
//! bases `psi_{j,c_i,sigma}`, `j < ell`. The shifted Gram matrix `A` couples
//! the two bases; solving `A lambda = y` with `y_{(i,j)} = <f_hat, psi_{j,c_i,sigma}>`
//! yields coefficients of `w_i f_i`, which are clipped to their positive part
//! and normalised.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::{PI, SQRT_2};

use crate::error::{invalid, Error, Result};
use crate::quad;
use crate::stats;

const QUAD_TOL: f64 = 1e-9;
const PAD_SIGMAS: f64 = 12.0;
const COND_LU: f64 = 1e12;
const COND_MAX: f64 = 1e15;

/// Physicists' Hermite polynomial by the three-term recurrence.
pub fn hermite_h(j: usize, x: f64) -> f64 {
    let mut h0 = 1.0;
    if j == 0 {
        return h0;
    }
    let mut h1 = 2.0 * x;
    for k in 2..=j {
        let h2 = 2.0 * x * h1 - 2.0 * (k - 1) as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Fills `out[j] = psi_{j,mu,sigma}(x)` for `j < out.len()`.
///
/// Uses the recurrence for orthonormal Hermite functions, which never forms
/// `2^j j!` and so stays finite for large `j`.
pub fn psi_all(mu: f64, sigma: f64, x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let t = (x - mu) / sigma;
    let scale = sigma.sqrt().recip();
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25) * (-0.5 * t * t).exp();
    out[0] = scale * cur;
    for j in 1..out.len() {
        let jf = j as f64;
        let next = (2.0 / jf).sqrt() * t * cur - ((jf - 1.0) / jf).sqrt() * prev;
        prev = cur;
        cur = next;
        out[j] = if j % 2 == 0 { scale * cur } else { -scale * cur };
    }
}

/// `psi_{j,mu,sigma}(x) = (-1)^j (2^j j! sigma sqrt(pi))^{-1/2} h_j(t) exp(-t^2/2)`, `t = (x - mu)/sigma`.
pub fn psi(j: usize, mu: f64, sigma: f64, x: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let mut buf = vec![0.0; j + 1];
    psi_all(mu, sigma, x, &mut buf);
    Ok(buf[j])
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return invalid(format!("sigma must be positive and finite, got {sigma}"));
    }
    Ok(())
}

fn ln_factorial(n: usize) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Closed form of `<psi_{i,mu1,sigma}, psi_{j,mu2,sigma}>`.
pub fn inner_psi_psi(i: usize, mu1: f64, j: usize, mu2: f64, sigma: f64) -> f64 {
    let delta = mu2 - mu1;
    let a = delta / (SQRT_2 * sigma);
    let envelope = -delta * delta / (4.0 * sigma * sigma);
    let ln_norm = -0.5 * (ln_factorial(i) + ln_factorial(j));
    let base_sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
    let mut total = 0.0;
    for k in 0..=i.min(j) {
        let (pi, pj) = (i - k, j - k);
        if a == 0.0 && (pi > 0 || pj > 0) {
            continue;
        }
        let mut sign = base_sign;
        // a^{pi} (-a)^{pj}
        if a < 0.0 && pi % 2 == 1 {
            sign = -sign;
        }
        if a > 0.0 && pj % 2 == 1 {
            sign = -sign;
        }
        let ln_pow = if pi + pj == 0 { 0.0 } else { (pi + pj) as f64 * a.abs().ln() };
        let ln_term = envelope + ln_factorial(k) + ln_norm + ln_binomial(i, k) + ln_binomial(j, k) + ln_pow;
        total += sign * ln_term.exp();
    }
    total
}

/// Closed form of `<psi_{j,mu1,sigma}, g_{mu2,sigma}>` where `g` is the normal density.
pub fn inner_psi_gauss(j: usize, mu1: f64, mu2: f64, sigma: f64) -> f64 {
    let delta = mu2 - mu1;
    let ln_mag = -0.5 * ((j + 1) as f64 * 2f64.ln() + ln_factorial(j) + (sigma * PI.sqrt()).ln())
        - delta * delta / (4.0 * sigma * sigma);
    if j == 0 {
        return ln_mag.exp();
    }
    if delta == 0.0 {
        return 0.0;
    }
    let ratio = delta / sigma;
    let mut sign = if j % 2 == 0 { 1.0 } else { -1.0 };
    if ratio < 0.0 && j % 2 == 1 {
        sign = -sign;
    }
    sign * (ln_mag + j as f64 * ratio.abs().ln()).exp()
}

/// Two Hermite bases of length `ell` sharing the scale `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteBasis {
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub ell: usize,
}

impl HermiteBasis {
    pub fn new(sigma: f64, c1: f64, c2: f64, ell: usize) -> Result<Self> {
        check_sigma(sigma)?;
        if !(c1.is_finite() && c2.is_finite() && c1 < c2) {
            return invalid(format!("centers must satisfy c1 < c2, got ({c1}, {c2})"));
        }
        if ell == 0 {
            return invalid("ell must be at least 1");
        }
        Ok(Self { sigma, c1, c2, ell })
    }

    pub fn center(&self, i: usize) -> f64 {
        if i == 0 {
            self.c1
        } else {
            self.c2
        }
    }

    /// Separation `c2 - c1`.
    pub fn separation(&self) -> f64 {
        self.c2 - self.c1
    }

    /// Position of entry `(component, j)` in the stacked index order.
    pub fn index(&self, component: usize, j: usize) -> usize {
        component * self.ell + j
    }
}

/// The `2 ell x 2 ell` Gram matrix of the stacked bases.
pub fn build_a(basis: &HermiteBasis) -> DMatrix<f64> {
    let l = basis.ell;
    let mut a = DMatrix::<f64>::identity(2 * l, 2 * l);
    for i in 0..l {
        for j in 0..l {
            let v = inner_psi_psi(i, basis.c1, j, basis.c2, basis.sigma);
            a[(i, l + j)] = v;
            a[(l + j, i)] = v;
        }
    }
    a
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct KdeEstimate {
    samples: Vec<f64>,
    h: f64,
}

/// Kernel contributions beyond this many bandwidths are dropped (< 1e-17).
const KDE_CUTOFF: f64 = 9.0;

impl KdeEstimate {
    pub fn with_bandwidth(samples: &[f64], h: f64) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|x| !x.is_finite()) {
            return invalid("KDE needs a non-empty finite sample");
        }
        if !(h > 0.0) || !h.is_finite() {
            return invalid(format!("KDE bandwidth must be positive, got {h}"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self { samples: s, h })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn eval(&self, x: f64) -> f64 {
        let lo = self.samples.partition_point(|&s| s < x - KDE_CUTOFF * self.h);
        let hi = self.samples.partition_point(|&s| s <= x + KDE_CUTOFF * self.h);
        let inv = 1.0 / self.h;
        let sum: f64 = self.samples[lo..hi]
            .iter()
            .map(|&s| {
                let z = (x - s) * inv;
                (-0.5 * z * z).exp()
            })
            .sum();
        sum * inv / ((2.0 * PI).sqrt() * self.samples.len() as f64)
    }

    /// Range outside which the estimate is numerically zero.
    pub fn support(&self) -> (f64, f64) {
        (
            self.samples[0] - KDE_CUTOFF * self.h,
            self.samples[self.samples.len() - 1] + KDE_CUTOFF * self.h,
        )
    }
}

/// Silverman-style bandwidth `1.06 sd n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    1.06 * stats::sd(samples) * (samples.len() as f64).powf(-0.2)
}

pub fn kde_fit(samples: &[f64]) -> Result<KdeEstimate> {
    let h = silverman_bandwidth(samples);
    if !(h > 0.0) {
        return invalid("sample has zero spread; supply a bandwidth explicitly");
    }
    KdeEstimate::with_bandwidth(samples, h)
}

/// Integration range used for projections onto the basis.
pub fn projection_range(basis: &HermiteBasis, r1: f64, r2: f64) -> (f64, f64) {
    let pad = r1 + r2 + PAD_SIGMAS * basis.sigma;
    (basis.c1 - pad, basis.c2 + pad)
}

/// `y_{(i,j)} = <fhat, psi_{j,c_i,sigma}>` by adaptive Gauss–Legendre.
pub fn project_yhat(fhat: impl Fn(f64) -> f64, basis: &HermiteBasis, r1: f64, r2: f64) -> Result<DVector<f64>> {
    let (lo, hi) = projection_range(basis, r1, r2);
    project_yhat_on(fhat, basis, lo, hi)
}

fn project_yhat_on(fhat: impl Fn(f64) -> f64, basis: &HermiteBasis, lo: f64, hi: f64) -> Result<DVector<f64>> {
    let l = basis.ell;
    let integrand = |x: f64, out: &mut [f64]| {
        let f = fhat(x);
        psi_all(basis.c1, basis.sigma, x, &mut out[..l]);
        psi_all(basis.c2, basis.sigma, x, &mut out[l..]);
        out.iter_mut().for_each(|v| *v *= f);
    };
    let pieces = (((hi - lo) / basis.sigma).ceil() as usize).clamp(8, 4096);
    let v = quad::adaptive_vec(integrand, 2 * l, lo, hi, QUAD_TOL, pieces)
        .map_err(|e| Error::Quadrature { index: e.index, error: e.error })?;
    Ok(DVector::from_vec(v))
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Solves `A lambda = y`: LU when well conditioned, SVD least squares when
/// the condition number lies in `(1e12, 1e15]`, error beyond that.
pub fn solve_lambda(a: &DMatrix<f64>, y_hat: &DVector<f64>, basis: &HermiteBasis) -> Result<DVector<f64>> {
    if a.nrows() != y_hat.len() || !a.is_square() {
        return invalid("Gram matrix and projection vector sizes differ");
    }
    let cond = condition_number(a);
    let fail = || Error::Conditioning {
        cond,
        ell: basis.ell,
        r: basis.separation(),
        sigma: basis.sigma,
    };
    if !cond.is_finite() || cond > COND_MAX {
        return Err(fail());
    }
    if cond <= COND_LU {
        return a.clone().lu().solve(y_hat).ok_or_else(fail);
    }
    let svd = a.clone().svd(true, true);
    let eps = svd.singular_values.max() / COND_MAX;
    svd.solve(y_hat, eps).map_err(|_| fail())
}

/// Positive part of a Hermite expansion, normalised to a density.
#[derive(Debug, Clone)]
pub struct ComponentDensity {
    pub center: f64,
    pub sigma: f64,
    pub coeffs: Vec<f64>,
    /// `||(f_tilde)_+||_1`, which estimates the mixture weight.
    pub mass: f64,
}

impl ComponentDensity {
    fn raw(&self, x: f64, buf: &mut [f64]) -> f64 {
        psi_all(self.center, self.sigma, x, buf);
        self.coeffs.iter().zip(buf.iter()).map(|(a, b)| a * b).sum()
    }

    /// Unnormalised expansion `sum_j lambda_j psi_j(x)`.
    pub fn expansion(&self, x: f64) -> f64 {
        let mut buf = vec![0.0; self.coeffs.len()];
        self.raw(x, &mut buf)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.expansion(x).max(0.0) / self.mass
    }

    /// Interval holding all but a negligible part of the expansion.
    pub fn support(&self) -> (f64, f64) {
        let half = self.sigma * ((2.0 * self.coeffs.len() as f64 + 1.0).sqrt() + PAD_SIGMAS);
        (self.center - half, self.center + half)
    }
}

fn positive_mass(coeffs: &[f64], center: f64, sigma: f64) -> Result<f64> {
    let probe = ComponentDensity {
        center,
        sigma,
        coeffs: coeffs.to_vec(),
        mass: 1.0,
    };
    let (lo, hi) = probe.support();
    let pieces = (2 * coeffs.len() + 24).max(16) * 2;
    quad::adaptive(|x| probe.expansion(x).max(0.0), lo, hi, 1e-11, pieces)
        .map_err(|e| Error::Quadrature { index: e.index, error: e.error })
}

/// Splits `lambda_hat` into the two normalised component estimates.
pub fn component_estimate(lambda_hat: &DVector<f64>, basis: &HermiteBasis) -> Result<(ComponentDensity, ComponentDensity)> {
    let l = basis.ell;
    if lambda_hat.len() != 2 * l {
        return invalid("coefficient vector length must be 2 ell");
    }
    let make = |i: usize| -> Result<ComponentDensity> {
        let coeffs: Vec<f64> = lambda_hat.as_slice()[i * l..(i + 1) * l].to_vec();
        let mass = positive_mass(&coeffs, basis.center(i), basis.sigma)?;
        if !(mass > 1e-8) {
            return Err(Error::DegenerateEstimate(mass));
        }
        Ok(ComponentDensity {
            center: basis.center(i),
            sigma: basis.sigma,
            coeffs,
            mass,
        })
    };
    Ok((make(0)?, make(1)?))
}

/// `ell = max(floor(log(1/eps)), floor(2 e r^2 / sigma^2)) + 1`.
pub fn choose_ell(epsilon: f64, r: f64, sigma: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return invalid(format!("epsilon must lie in (0, 1), got {epsilon}"));
    }
    if !(r > 0.0) || !r.is_finite() {
        return invalid(format!("halfwidth must be positive, got {r}"));
    }
    check_sigma(sigma)?;
    let a = (1.0 / epsilon).ln().floor();
    let b = (2.0 * std::f64::consts::E * r * r / (sigma * sigma)).floor();
    Ok(a.max(b) as usize + 1)
}

/// Minimum level required for the truncation bound at halfwidth `r`.
pub fn min_ell_for_halfwidth(r: f64, sigma: f64) -> usize {
    (2.0 * std::f64::consts::E * r * r / (sigma * sigma)).floor() as usize + 1
}

/// Default `epsilon = n^{-2/5}`.
pub fn default_epsilon(n: usize) -> f64 {
    (n as f64).powf(-0.4)
}

/// Every artefact of one splitting run.
#[derive(Debug, Clone)]
pub struct HermiteSplit {
    pub basis: HermiteBasis,
    pub a: DMatrix<f64>,
    pub y_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub f1: ComponentDensity,
    pub f2: ComponentDensity,
    pub bandwidth: f64,
    pub condition: f64,
}

impl HermiteSplit {
    pub fn weights(&self) -> (f64, f64) {
        (self.f1.mass, self.f2.mass)
    }
}

/// KDE, projection, solve and positive-part normalisation in one call.
/// `r1`, `r2` are the mixing-support halfwidths used to size the quadrature range.
pub fn hermite_split(
    samples: &[f64],
    basis: HermiteBasis,
    r1: f64,
    r2: f64,
    bandwidth: Option<f64>,
) -> Result<HermiteSplit> {
    let kde = match bandwidth {
        Some(h) => KdeEstimate::with_bandwidth(samples, h)?,
        None => kde_fit(samples)?,
    };
    let (lo, hi) = projection_range(&basis, r1, r2);
    // The projection range also covers every point where the estimate is non-zero.
    let (klo, khi) = kde.support();
    let y_hat = project_yhat_on(|x| kde.eval(x), &basis, lo.max(klo), hi.min(khi).max(lo.max(klo)))?;
    let a = build_a(&basis);
    let lambda_hat = solve_lambda(&a, &y_hat, &basis)?;
    let (f1, f2) = component_estimate(&lambda_hat, &basis)?;
    Ok(HermiteSplit {
        basis,
        condition: condition_number(&a),
        a,
        y_hat,
        lambda_hat,
        f1,
        f2,
        bandwidth: kde.bandwidth(),
    })
}
