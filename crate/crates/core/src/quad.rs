//! Adaptive Gauss–Legendre quadrature.

use std::sync::OnceLock;

/// Points per panel.
const ORDER: usize = 15;
const MAX_DEPTH: usize = 40;
const MAX_PANELS: usize = 200_000;

/// Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes are roots of P_n found by Newton iteration from the Chebyshev guess.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(m + h * x))
            .sum::<f64>()
            * h
    }

    /// Panel integral of a vector-valued integrand; `f(x, buf)` fills `buf`.
    pub fn integrate_vec(
        &self,
        f: &impl Fn(f64, &mut [f64]),
        a: f64,
        b: f64,
        buf: &mut [f64],
        out: &mut [f64],
    ) {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            f(m + h * x, buf);
            for (o, v) in out.iter_mut().zip(buf.iter()) {
                *o += w * h * v;
            }
        }
    }
}

/// Legendre polynomial P_n(x) and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

pub fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(ORDER))
}

/// Failure of the adaptive scheme: the largest unresolved error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadFailure {
    pub index: usize,
    pub error: f64,
}

/// Integrate `f` over [a, b] to absolute tolerance `tol`.
///
/// The interval is first cut into `pieces` equal panels so narrow features are
/// not missed; each panel is bisected until the panel estimate and the sum
/// over its halves agree.
pub fn adaptive(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, pieces: usize) -> Result<f64, QuadFailure> {
    let g = |x: f64, buf: &mut [f64]| buf[0] = f(x);
    adaptive_vec(g, 1, a, b, tol, pieces).map(|v| v[0])
}

/// Vector-valued version of [`adaptive`]; the tolerance applies per entry.
pub fn adaptive_vec(
    f: impl Fn(f64, &mut [f64]),
    dim: usize,
    a: f64,
    b: f64,
    tol: f64,
    pieces: usize,
) -> Result<Vec<f64>, QuadFailure> {
    let mut total = vec![0.0; dim];
    if a == b || dim == 0 {
        return Ok(total);
    }
    let gl = rule();
    let len = b - a;
    let pieces = pieces.max(1);
    let mut buf = vec![0.0; dim];
    let mut whole = vec![0.0; dim];
    let mut left = vec![0.0; dim];
    let mut right = vec![0.0; dim];
    let mut stack: Vec<(f64, f64, usize, Vec<f64>)> = Vec::new();
    let mut panels = 0usize;
    let mut worst = QuadFailure { index: 0, error: 0.0 };
    for p in 0..pieces {
        let lo = a + len * p as f64 / pieces as f64;
        let hi = if p + 1 == pieces { b } else { a + len * (p + 1) as f64 / pieces as f64 };
        gl.integrate_vec(&f, lo, hi, &mut buf, &mut whole);
        stack.push((lo, hi, 0, whole.clone()));
        while let Some((lo, hi, depth, est)) = stack.pop() {
            panels += 1;
            let mid = 0.5 * (lo + hi);
            gl.integrate_vec(&f, lo, mid, &mut buf, &mut left);
            gl.integrate_vec(&f, mid, hi, &mut buf, &mut right);
            let budget = (tol * (hi - lo) / len).max(1e-300);
            let mut ok = true;
            let mut broken = false;
            for i in 0..dim {
                let err = (left[i] + right[i] - est[i]).abs();
                if !err.is_finite() || err > budget {
                    ok = false;
                    broken |= !err.is_finite();
                    if depth >= MAX_DEPTH || panels >= MAX_PANELS || broken {
                        if !(err <= worst.error) {
                            worst = QuadFailure { index: i, error: err };
                        }
                    }
                }
            }
            if ok || broken || depth >= MAX_DEPTH || panels >= MAX_PANELS {
                for i in 0..dim {
                    total[i] += left[i] + right[i];
                }
            } else {
                stack.push((lo, mid, depth + 1, left.clone()));
                stack.push((mid, hi, depth + 1, right.clone()));
            }
        }
    }
    if worst.error > tol || worst.error.is_nan() {
        return Err(worst);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(15);
        assert!((gl.weights.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // Degree 29 is integrated exactly.
        let v = gl.integrate(&|x: f64| x.powi(28), -1.0, 1.0);
        assert!((v - 2.0 / 29.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_gaussian() {
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = adaptive(f, -40.0, 40.0, 1e-12, 4).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        // A narrow spike far from the center is found thanks to the initial panels.
        let g = |x: f64| (-0.5 * ((x - 30.0) / 0.01).powi(2)).exp() / (0.01 * (2.0 * std::f64::consts::PI).sqrt());
        let v = adaptive(g, -100.0, 100.0, 1e-10, 2000).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_vec_entries() {
        let v = adaptive_vec(
            |x, b| {
                b[0] = x;
                b[1] = x.sin();
            },
            2,
            0.0,
            std::f64::consts::PI,
            1e-12,
            1,
        )
        .unwrap();
        assert!((v[0] - 0.5 * std::f64::consts::PI.powi(2)).abs() < 1e-12);
        assert!((v[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_integrand_fails() {
        assert!(adaptive(|_| f64::NAN, 0.0, 1.0, 1e-9, 1).is_err());
    }
}
