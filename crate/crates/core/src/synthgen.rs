//! Synthetic mixture truths with exact densities and samplers.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::geometry::{check_separation_c2, FiniteSupportSet, SeparationReport};
use crate::hermite::psi_all;
use crate::model::{chol_inverse, Dataset};
use crate::quad::adaptive;
use crate::rngdist::{normal_cdf, open01, sample_categorical, sample_gamma, standard_normal, RngStream};

/// Tail allowance, in Hermite scale units, beyond the requested halfwidth.
const HERMITE_TAIL: f64 = 4.0;

/// A component density that can be evaluated and sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentSpec {
    /// Finite Gaussian mixture in any dimension; covariances are row-major.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<f64>>,
    },
    /// Positive part of a Hermite expansion, normalised on `[lo, hi]`.
    Hermite {
        center: f64,
        scale: f64,
        coeffs: Vec<f64>,
        lo: f64,
        hi: f64,
        norm: f64,
        envelope: f64,
        halfwidth: f64,
    },
    Laplace {
        mu: f64,
        b: f64,
    },
    /// Epsilon-skew exponential power:
    /// `p / (2 alpha Gamma(1/p)) exp(-|x - mu|^p / (alpha (1 + sign(x - mu) skew))^p)`.
    SkewExpPower {
        mu: f64,
        alpha: f64,
        shape: f64,
        skew: f64,
    },
}

impl ComponentSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianMixture { means, .. } => means[0].len(),
            _ => 1,
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::GaussianMixture { weights, means, covs } => {
                let m = means[0].len();
                weights
                    .iter()
                    .zip(means.iter().zip(covs))
                    .map(|(w, (mu, cov))| w * gaussian_pdf(x, mu, cov, m))
                    .sum()
            }
            Self::Hermite { center, scale, coeffs, lo, hi, norm, .. } => {
                if x[0] < *lo || x[0] > *hi {
                    0.0
                } else {
                    hermite_expansion(*center, *scale, coeffs, x[0]).max(0.0) / norm
                }
            }
            Self::Laplace { mu, b } => (-(x[0] - mu).abs() / b).exp() / (2.0 * b),
            Self::SkewExpPower { mu, alpha, shape, skew } => {
                let t = x[0] - mu;
                let side = if t >= 0.0 { 1.0 + skew } else { 1.0 - skew };
                let c = shape / (2.0 * alpha * ln_gamma(1.0 / shape).exp());
                c * (-(t.abs() / (alpha * side)).powf(*shape)).exp()
            }
        }
    }

    /// CDF of a one-dimensional component.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        Ok(match self {
            Self::GaussianMixture { weights, means, covs } => {
                if means[0].len() != 1 {
                    return invalid("cdf is only defined for one-dimensional components");
                }
                weights
                    .iter()
                    .zip(means.iter().zip(covs))
                    .map(|(w, (mu, cov))| w * normal_cdf((x - mu[0]) / cov[0].sqrt()))
                    .sum()
            }
            Self::Hermite { lo, hi, .. } => {
                if x <= *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    adaptive(|t| self.pdf(&[t]), *lo, x, 1e-11, 64)
                        .map_err(|e| Error::Quadrature { index: 0, error: e.error })?
                        .min(1.0)
                }
            }
            Self::Laplace { mu, b } => {
                let t = (x - mu) / b;
                if t < 0.0 {
                    0.5 * t.exp()
                } else {
                    1.0 - 0.5 * (-t).exp()
                }
            }
            Self::SkewExpPower { mu, alpha, shape, skew } => {
                let t = x - mu;
                let a = 1.0 / shape;
                if t >= 0.0 {
                    0.5 * (1.0 - skew) + 0.5 * (1.0 + skew) * reg_gamma(a, (t / (alpha * (1.0 + skew))).powf(*shape))
                } else {
                    0.5 * (1.0 - skew) * (1.0 - reg_gamma(a, (-t / (alpha * (1.0 - skew))).powf(*shape)))
                }
            }
        })
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            Self::GaussianMixture { weights, means, covs } => {
                let j = sample_categorical(weights, rng).ok_or_else(|| Error::InvalidArgument("empty mixture".into()))?;
                let m = means[j].len();
                let l = cholesky_lower(&covs[j], m)?;
                let z: Vec<f64> = (0..m).map(|_| standard_normal(rng)).collect();
                Ok((0..m).map(|d| means[j][d] + (0..=d).map(|e| l[d * m + e] * z[e]).sum::<f64>()).collect())
            }
            Self::Hermite { lo, hi, envelope, .. } => {
                // Uniform proposal under a flat envelope on the finite support.
                for _ in 0..1_000_000 {
                    let x = lo + (hi - lo) * open01(rng);
                    if open01(rng) * envelope <= self.pdf(&[x]) {
                        return Ok(vec![x]);
                    }
                }
                Err(Error::NumericalMass("Hermite rejection sampler failed to accept".into()))
            }
            Self::Laplace { mu, b } => {
                let u = open01(rng) - 0.5;
                Ok(vec![mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln()])
            }
            Self::SkewExpPower { mu, alpha, shape, skew } => {
                // |X - mu| / (alpha (1 +- skew)) has p-th power Gamma(1/p).
                let right = open01(rng) < 0.5 * (1.0 + skew);
                let g = sample_gamma(1.0 / shape, 1.0, rng)?.powf(1.0 / shape);
                Ok(vec![if right { mu + alpha * (1.0 + skew) * g } else { mu - alpha * (1.0 - skew) * g }])
            }
        }
    }

    /// Representative points of the mixing support, used for separation checks.
    pub fn support_points(&self) -> Vec<Vec<f64>> {
        match self {
            Self::GaussianMixture { means, .. } => means.clone(),
            Self::Hermite { center, halfwidth, .. } => vec![vec![center - halfwidth], vec![*center], vec![center + halfwidth]],
            Self::Laplace { mu, .. } | Self::SkewExpPower { mu, .. } => vec![vec![*mu]],
        }
    }
}

fn reg_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x == f64::INFINITY {
        1.0
    } else {
        gamma_lr(a, x)
    }
}

fn gaussian_pdf(x: &[f64], mu: &[f64], cov: &[f64], m: usize) -> f64 {
    if m == 1 {
        let s = cov[0].sqrt();
        let z = (x[0] - mu[0]) / s;
        return (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt());
    }
    let Ok((linv, logdet)) = chol_inverse(cov, m) else {
        return f64::NAN;
    };
    let mut q = 0.0;
    for d in 0..m {
        let z: f64 = (0..=d).map(|e| linv[d * m + e] * (x[e] - mu[e])).sum();
        q += z * z;
    }
    (-0.5 * (m as f64 * (2.0 * PI).ln() + logdet + q)).exp()
}

fn cholesky_lower(cov: &[f64], m: usize) -> Result<Vec<f64>> {
    let l = nalgebra::DMatrix::from_row_slice(m, m, cov)
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?
        .l();
    Ok((0..m * m).map(|i| l[(i / m, i % m)]).collect())
}

fn hermite_expansion(center: f64, scale: f64, coeffs: &[f64], x: f64) -> f64 {
    let mut buf = vec![0.0; coeffs.len()];
    psi_all(center, scale, x, &mut buf);
    buf.iter().zip(coeffs).map(|(p, a)| p * a).sum()
}

/// Random density `(sum_j a_j psi_{j,center,s})_+`, normalised, with `a_0 = 1`
/// and `a_j ~ N(0, 0.5^j)`. The scale `s` is chosen so the oscillating part
/// fits inside `center +- halfwidth`; the density is restricted to
/// `center +- (halfwidth + 4 s)`.
pub fn hermite_random_density(center: f64, halfwidth: f64, degree: usize, seed: u64) -> Result<ComponentSpec> {
    if !(halfwidth > 0.0) || !center.is_finite() {
        return invalid("Hermite density needs a finite center and positive halfwidth");
    }
    let scale = halfwidth / ((2.0 * degree as f64 + 1.0).sqrt() + 1.0);
    let lo = center - halfwidth - HERMITE_TAIL * scale;
    let hi = center + halfwidth + HERMITE_TAIL * scale;
    for attempt in 0..100u64 {
        let mut rng = RngStream::derive(seed, &[0x4e52, attempt]);
        let mut coeffs = vec![1.0];
        for j in 1..=degree {
            coeffs.push(0.5f64.powi(j as i32).sqrt() * standard_normal(&mut rng));
        }
        let f = |x: f64| hermite_expansion(center, scale, &coeffs, x).max(0.0);
        let norm = match adaptive(f, lo, hi, 1e-12, 256) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if !(norm > 1e-8) {
            continue;
        }
        let grid = 8192;
        let peak = (0..=grid)
            .map(|i| f(lo + (hi - lo) * i as f64 / grid as f64))
            .fold(0.0, f64::max);
        return Ok(ComponentSpec::Hermite {
            center,
            scale,
            coeffs,
            lo,
            hi,
            norm,
            envelope: 1.05 * peak / norm,
            halfwidth,
        });
    }
    Err(Error::DegenerateEstimate(0.0))
}

/// [`hermite_random_density`] redrawn until the expansion stays positive on
/// the central 99% of its mass, so the positive-part clip leaves no zero
/// stretches inside the bulk.
pub fn hermite_gapless_density(center: f64, halfwidth: f64, degree: usize, seed: u64) -> Result<ComponentSpec> {
    for attempt in 0..100u64 {
        let spec = hermite_random_density(center, halfwidth, degree, seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)))?;
        let ComponentSpec::Hermite { lo, hi, .. } = spec else { unreachable!() };
        let xs = crate::stats::linspace(lo, hi, 4001);
        let f: Vec<f64> = xs.iter().map(|&x| spec.pdf(&[x])).collect();
        let cdf = crate::summary::cumulative_1d(&xs, &f);
        let total = cdf[cdf.len() - 1];
        if (0..xs.len()).all(|i| f[i] > 0.0 || cdf[i] < 0.005 * total || cdf[i] > 0.995 * total) {
            return Ok(spec);
        }
    }
    Err(Error::DegenerateEstimate(0.0))
}

pub fn laplace_density(mu: f64, b: f64) -> Result<ComponentSpec> {
    if !(b > 0.0) || !mu.is_finite() {
        return invalid("Laplace density needs a finite location and positive scale");
    }
    Ok(ComponentSpec::Laplace { mu, b })
}

pub fn skew_exp_power_density(mu: f64, alpha: f64, shape: f64, skew: f64) -> Result<ComponentSpec> {
    if !(alpha > 0.0) || !(shape > 0.0) || !(skew > -1.0 && skew < 1.0) || !mu.is_finite() {
        return invalid("skew exponential power needs alpha > 0, shape > 0 and skew in (-1, 1)");
    }
    Ok(ComponentSpec::SkewExpPower { mu, alpha, shape, skew })
}

/// `n_atoms` equal-weight Gaussians with means equally spaced on a circle
/// (the first at angle 0) and random covariances with eigenvalues in
/// `[cov_scale / 4, cov_scale]`.
pub fn gmm_on_circle(center: [f64; 2], radius: f64, n_atoms: usize, cov_scale: f64, seed: u64) -> Result<ComponentSpec> {
    if n_atoms == 0 || !(radius >= 0.0) || !(cov_scale > 0.0) {
        return invalid("circle mixture needs at least one atom, radius >= 0 and cov_scale > 0");
    }
    let mut rng = RngStream::derive(seed, &[0xc1c1e]);
    let mut means = Vec::with_capacity(n_atoms);
    let mut covs = Vec::with_capacity(n_atoms);
    for j in 0..n_atoms {
        let th = 2.0 * PI * j as f64 / n_atoms as f64;
        means.push(vec![center[0] + radius * th.cos(), center[1] + radius * th.sin()]);
        let phi = PI * open01(&mut rng);
        let l1 = cov_scale * (0.25 + 0.75 * open01(&mut rng));
        let l2 = cov_scale * (0.25 + 0.75 * open01(&mut rng));
        let (c, s) = (phi.cos(), phi.sin());
        let a = l1 * c * c + l2 * s * s;
        let b = (l1 - l2) * c * s;
        let d = l1 * s * s + l2 * c * c;
        covs.push(vec![a, b, b, d]);
    }
    Ok(ComponentSpec::GaussianMixture {
        weights: vec![1.0 / n_atoms as f64; n_atoms],
        means,
        covs,
    })
}

/// One-dimensional location mixture: `n_atoms` kernels `N(u_j, sigma^2)` with
/// `u_j` uniform on `center +- halfwidth` and Dirichlet(1) weights.
pub fn location_mixture(center: f64, halfwidth: f64, sigma: f64, n_atoms: usize, seed: u64) -> Result<ComponentSpec> {
    if n_atoms == 0 || !(halfwidth >= 0.0) || !(sigma > 0.0) {
        return invalid("location mixture needs atoms, halfwidth >= 0 and sigma > 0");
    }
    let mut rng = RngStream::derive(seed, &[0x10c]);
    let means: Vec<Vec<f64>> = (0..n_atoms).map(|_| vec![center + halfwidth * (2.0 * open01(&mut rng) - 1.0)]).collect();
    let weights = crate::rngdist::sample_dirichlet(&vec![1.0; n_atoms], &mut rng)?;
    Ok(ComponentSpec::GaussianMixture {
        weights,
        means,
        covs: vec![vec![sigma * sigma]; n_atoms],
    })
}

/// Zero-mean-shifted scale mixture: `n_atoms` equal-weight `N(mu, s_j^2)` with
/// `s_j` equally spaced on `[sigma_lo, sigma_hi]`.
pub fn scale_mixture(mu: f64, sigma_lo: f64, sigma_hi: f64, n_atoms: usize) -> Result<ComponentSpec> {
    if n_atoms == 0 || !(sigma_lo > 0.0) || !(sigma_hi >= sigma_lo) {
        return invalid("scale mixture needs 0 < sigma_lo <= sigma_hi and at least one atom");
    }
    let sig = crate::stats::linspace(sigma_lo, sigma_hi, n_atoms);
    Ok(ComponentSpec::GaussianMixture {
        weights: vec![1.0 / n_atoms as f64; n_atoms],
        means: vec![vec![mu]; n_atoms],
        covs: sig.iter().map(|s| vec![s * s]).collect(),
    })
}

/// A finite mixture of component specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub weights: Vec<f64>,
    pub components: Vec<ComponentSpec>,
}

impl SyntheticTruth {
    pub fn new(weights: Vec<f64>, components: Vec<ComponentSpec>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return invalid("one weight per component is required");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return invalid("weights must be non-negative and sum to one");
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return invalid("components have different dimensions");
        }
        Ok(Self { weights, components })
    }

    /// Build and require the separation condition at the given gap.
    pub fn with_separation(weights: Vec<f64>, components: Vec<ComponentSpec>, gap: f64) -> Result<Self> {
        let t = Self::new(weights, components)?;
        let rep = t.separation(gap)?;
        if !rep.separated {
            return invalid(format!(
                "components are not separated: within {} >= between {}",
                rep.max_within, rep.min_between
            ));
        }
        Ok(t)
    }

    pub fn separation(&self, gap: f64) -> Result<SeparationReport> {
        let sets: Vec<FiniteSupportSet> = self
            .components
            .iter()
            .map(|c| FiniteSupportSet::new(c.support_points(), crate::geometry::DEFAULT_MERGE_TOL))
            .collect::<Result<_>>()?;
        check_separation_c2(&sets, gap)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(&self.components).map(|(w, c)| w * c.pdf(x)).sum()
    }

    /// Density of component `k` (0-based).
    pub fn component_pdf(&self, k: usize, x: &[f64]) -> f64 {
        self.components[k].pdf(x)
    }
}

/// Draw `n` observations; labels are 1-based component indices.
pub fn sample_mixture(truth: &SyntheticTruth, n: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let m = truth.dim();
    let mut x = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = RngStream::derive(seed, &[0x5a3, i as u64]);
        let k = sample_categorical(&truth.weights, &mut rng).ok_or_else(|| Error::InvalidArgument("bad weights".into()))?;
        x.extend(truth.components[k].sample(&mut rng)?);
        labels.push(k + 1);
    }
    Ok((Dataset::new(m, x, vec![])?, labels))
}

/// Named simulation designs.
pub const DESIGNS: [&str; 5] = ["two-gaussians", "three-shapes", "circle-pair", "hermite-pair", "scale-pair"];

/// `0.7 N(-3, 0.5^2) + 0.3 N(3, 0.5^2)`.
pub fn two_gaussians() -> SyntheticTruth {
    let g = |mu: f64| ComponentSpec::GaussianMixture {
        weights: vec![1.0],
        means: vec![vec![mu]],
        covs: vec![vec![0.25]],
    };
    SyntheticTruth {
        weights: vec![0.7, 0.3],
        components: vec![g(-3.0), g(3.0)],
    }
}

/// Random Hermite combination, Laplace and skew exponential power components
/// placed along the line with location separation.
pub fn three_shapes(seed: u64) -> Result<SyntheticTruth> {
    SyntheticTruth::with_separation(
        vec![0.4, 0.35, 0.25],
        vec![
            hermite_gapless_density(-9.0, 1.5, 4, seed)?,
            laplace_density(0.0, 0.8)?,
            skew_exp_power_density(9.0, 1.2, 1.5, 0.4)?,
        ],
        1.0,
    )
}

/// Two circle mixtures in the plane.
pub fn circle_pair(seed: u64) -> Result<SyntheticTruth> {
    SyntheticTruth::with_separation(
        vec![0.6, 0.4],
        vec![
            gmm_on_circle([-6.0, 0.0], 2.0, 6, 0.3, seed)?,
            gmm_on_circle([6.0, 0.0], 2.0, 6, 0.3, seed.wrapping_add(1))?,
        ],
        2.5,
    )
}

/// `0.6 f_1 + 0.4 f_2`, each a unit-variance location mixture with mixing
/// support of halfwidth 0.5, centers `separation` apart.
pub fn hermite_pair(separation: f64, seed: u64) -> Result<SyntheticTruth> {
    SyntheticTruth::with_separation(
        vec![0.6, 0.4],
        vec![
            location_mixture(0.0, 0.5, 1.0, 5, seed)?,
            location_mixture(separation, 0.5, 1.0, 5, seed.wrapping_add(1))?,
        ],
        1.0,
    )
}

/// Two zero-centred components separated in scale only.
pub fn scale_pair() -> Result<SyntheticTruth> {
    SyntheticTruth::new(vec![0.5, 0.5], vec![scale_mixture(0.0, 0.5, 1.0, 4)?, scale_mixture(0.0, 4.0, 6.0, 4)?])
}

/// Look up a design by name.
pub fn design(name: &str, seed: u64) -> Result<SyntheticTruth> {
    match name {
        "two-gaussians" => Ok(two_gaussians()),
        "three-shapes" => three_shapes(seed),
        "circle-pair" => circle_pair(seed),
        "hermite-pair" => hermite_pair(8.0, seed),
        "scale-pair" => scale_pair(),
        _ => invalid(format!("unknown design '{name}'; expected one of {}", DESIGNS.join(", "))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_one_sample, mean, median};

    fn integral(c: &ComponentSpec, lo: f64, hi: f64) -> f64 {
        adaptive(|x| c.pdf(&[x]), lo, hi, 1e-12, 512).unwrap()
    }

    #[test]
    fn hermite_density_examples() {
        let g = hermite_random_density(0.0, 2.0, 0, 1).unwrap();
        if let ComponentSpec::Hermite { scale, .. } = &g {
            // A single psi_0 is a Gaussian bump with sd = scale (restricted to +-6 sd).
            let v = g.pdf(&[0.3]);
            let expect = (-0.5 * (0.3 / scale).powi(2)).exp() / (scale * (2.0 * PI).sqrt());
            assert!((v - expect).abs() < 1e-8 * expect);
        }
        let a = hermite_random_density(0.0, 2.0, 6, 1).unwrap();
        let b = hermite_random_density(0.0, 2.0, 6, 2).unwrap();
        for d in [&a, &b] {
            let ComponentSpec::Hermite { lo, hi, .. } = d else { unreachable!() };
            assert!((integral(d, *lo, *hi) - 1.0).abs() < 1e-6);
        }
        let diff = adaptive(|x| (a.pdf(&[x]) - b.pdf(&[x])).abs(), -10.0, 10.0, 1e-9, 512).unwrap();
        assert!(diff > 1e-3);
    }

    #[test]
    fn gapless_hermite_has_no_interior_zeros() {
        for seed in 0..10 {
            let d = hermite_gapless_density(0.0, 1.5, 4, seed).unwrap();
            let ComponentSpec::Hermite { lo, hi, .. } = &d else { unreachable!() };
            let q = |p: f64| {
                // Bisection on the CDF.
                let (mut a, mut b) = (*lo, *hi);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if d.cdf(m).unwrap() < p {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                a
            };
            let (a, b) = (q(0.01), q(0.99));
            assert!(crate::stats::linspace(a, b, 400).iter().all(|&x| d.pdf(&[x]) > 0.0), "seed {seed}");
        }
    }

    #[test]
    fn laplace_and_skew_ep() {
        let l = laplace_density(0.0, 1.0).unwrap();
        assert_eq!(l.pdf(&[0.0]), 0.5);
        let mut rng = RngStream::new(1, 0);
        let xs: Vec<f64> = (0..1_000_000).map(|_| l.sample(&mut rng).unwrap()[0]).collect();
        assert!(median(&xs).abs() < 0.01);

        for (shape, skew) in [(1.5, 0.0), (2.5, 0.4), (0.8, -0.3)] {
            let d = skew_exp_power_density(1.0, 0.7, shape, skew).unwrap();
            assert!((integral(&d, -60.0, 60.0) - 1.0).abs() < 1e-6);
            for x in [-1.0, 0.5, 1.0, 2.5] {
                let q = adaptive(|t| d.pdf(&[t]), -60.0, x, 1e-12, 512).unwrap();
                assert!((d.cdf(x).unwrap() - q).abs() < 1e-8);
            }
        }
        let sym = skew_exp_power_density(0.0, 1.0, 1.5, 0.0).unwrap();
        let xs: Vec<f64> = (0..200_000).map(|_| sym.sample(&mut rng).unwrap()[0]).collect();
        let m = mean(&xs);
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / xs.len() as f64;
        // Sample skewness has sd about sqrt(6/n) times a kurtosis factor.
        assert!((m3 / m2.powf(1.5)).abs() < 0.03);
        assert!(skew_exp_power_density(0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn circle_mixture() {
        let one = gmm_on_circle([1.0, 2.0], 3.0, 1, 0.5, 4).unwrap();
        let ComponentSpec::GaussianMixture { means, covs, .. } = &one else { unreachable!() };
        assert!((means[0][0] - 4.0).abs() < 1e-12 && (means[0][1] - 2.0).abs() < 1e-12);
        assert!(chol_inverse(&covs[0], 2).is_ok());

        let g = gmm_on_circle([0.0, 0.0], 5.0, 6, 1.0, 7).unwrap();
        let ComponentSpec::GaussianMixture { covs, .. } = &g else { unreachable!() };
        for c in covs {
            let tr = c[0] + c[3];
            let det = c[0] * c[3] - c[1] * c[2];
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
            assert!(l2 >= 0.25 - 1e-12 && l1 <= 1.0 + 1e-12);
        }
        let mut rng = RngStream::new(3, 3);
        let n = 100_000;
        let mut s = [0.0; 2];
        for _ in 0..n {
            let x = g.sample(&mut rng).unwrap();
            s[0] += x[0];
            s[1] += x[1];
        }
        assert!((s[0] / n as f64).abs() < 0.02 && (s[1] / n as f64).abs() < 0.02);
        let axes = [crate::stats::linspace(-12.0, 12.0, 241), crate::stats::linspace(-12.0, 12.0, 241)];
        let v: Vec<f64> = (0..241 * 241).map(|i| g.pdf(&[axes[0][i / 241], axes[1][i % 241]])).collect();
        assert!((crate::summary::integrate_grid(&axes, &v) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sample_mixture_labels_and_components() {
        let t = SyntheticTruth::new(vec![1.0, 0.0], vec![laplace_density(0.0, 1.0).unwrap(), laplace_density(9.0, 1.0).unwrap()]).unwrap();
        let (_, lab) = sample_mixture(&t, 1000, 1).unwrap();
        assert!(lab.iter().all(|&l| l == 1));

        let t = SyntheticTruth::new(
            vec![0.7, 0.3],
            vec![laplace_density(-8.0, 1.0).unwrap(), skew_exp_power_density(8.0, 1.0, 1.5, 0.3).unwrap()],
        )
        .unwrap();
        let (data, lab) = sample_mixture(&t, 1_000_000, 2).unwrap();
        let frac = lab.iter().filter(|&&l| l == 1).count() as f64 / 1e6;
        assert!((frac - 0.7).abs() < 0.0015);
        for k in 0..2 {
            let xs: Vec<f64> = (0..data.n()).filter(|&i| lab[i] == k + 1).take(100_000).map(|i| data.row(i)[0]).collect();
            let d = ks_one_sample(&xs, |x| t.components[k].cdf(x).unwrap());
            assert!(d < 0.01, "component {k}: KS {d}");
        }

        // Hermite component CDFs go through quadrature, so use a smaller subsample.
        let h = SyntheticTruth::new(vec![1.0], vec![hermite_random_density(-8.0, 2.0, 5, 3).unwrap()]).unwrap();
        let (data, _) = sample_mixture(&h, 20_000, 4).unwrap();
        let d = ks_one_sample(data.values(), |x| h.components[0].cdf(x).unwrap());
        assert!(d < 0.015, "Hermite KS {d}");
    }

    #[test]
    fn histogram_chi_square() {
        // 40 equiprobable-ish bins; chi-square with 39 df has its 0.999 quantile near 72.
        let specs = [
            hermite_random_density(0.0, 2.0, 6, 9).unwrap(),
            laplace_density(0.0, 1.0).unwrap(),
            skew_exp_power_density(0.0, 1.0, 2.5, -0.5).unwrap(),
            location_mixture(0.0, 0.5, 1.0, 5, 2).unwrap(),
        ];
        let mut rng = RngStream::new(5, 5);
        for spec in &specs {
            let n = 100_000;
            let xs: Vec<f64> = (0..n).map(|_| spec.sample(&mut rng).unwrap()[0]).collect();
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let edges: Vec<f64> = (1..40).map(|b| crate::stats::quantile_sorted(&sorted, b as f64 / 40.0)).collect();
            let mut probs = Vec::new();
            let mut prev = 0.0;
            for &e in &edges {
                let c = spec.cdf(e).unwrap();
                probs.push(c - prev);
                prev = c;
            }
            probs.push(1.0 - prev);
            let mut counts = vec![0usize; 40];
            for x in &xs {
                counts[edges.partition_point(|e| e < x)] += 1;
            }
            let chi: f64 = counts.iter().zip(&probs).map(|(&o, &p)| (o as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum();
            assert!(chi < 72.0, "{spec:?}: chi-square {chi}");
        }
    }

    #[test]
    fn separation_is_validated() {
        let a = location_mixture(-8.0, 0.5, 1.0, 4, 1).unwrap();
        let b = location_mixture(8.0, 0.5, 1.0, 4, 2).unwrap();
        assert!(SyntheticTruth::with_separation(vec![0.6, 0.4], vec![a.clone(), b], 2.0).is_ok());
        // Two clusters 5 apart inside one component, with the other only 2.4 away.
        let split = ComponentSpec::GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![5.0]],
            covs: vec![vec![1.0]; 2],
        };
        let near = laplace_density(2.4, 1.0).unwrap();
        let rep = SyntheticTruth::new(vec![0.6, 0.4], vec![split.clone(), near.clone()]).unwrap().separation(1.0).unwrap();
        assert_eq!((rep.max_within, rep.min_between), (5.0, 2.4));
        assert!(SyntheticTruth::with_separation(vec![0.6, 0.4], vec![split, near], 1.0).is_err());
        let _ = a;
        assert!(SyntheticTruth::new(vec![0.5, 0.4], vec![laplace_density(0.0, 1.0).unwrap(); 2]).is_err());
    }

    #[test]
    fn designs_build() {
        for name in DESIGNS {
            let t = design(name, 3).unwrap();
            assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(design("nope", 1).is_err());
        assert_eq!(design("circle-pair", 1).unwrap().dim(), 2);
    }

    #[test]
    fn scale_mixture_is_centred() {
        let s = scale_mixture(1.0, 0.5, 2.0, 4).unwrap();
        assert!((s.cdf(1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((integral(&s, -30.0, 30.0) - 1.0).abs() < 1e-9);
    }
}
