//! Distances between finite atom sets and the separation check for a family
//! of discrete mixing measures.
//!
//! A finite set is split into "connected" pieces by single linkage: two atoms
//! share a piece when a chain of atoms with consecutive distance `< gap` joins
//! them. The within-space distance `d_w` is the largest distance between
//! neighbouring pieces and the between-space distance `d_b` is the smallest
//! distance between two sets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_MERGE_TOL: f64 = 1e-9;

/// Closed interval `[c - r, c + r]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub c: f64,
    pub r: f64,
}

impl Interval {
    pub fn new(c: f64, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() || !c.is_finite() {
            return invalid(format!("interval needs finite center and positive halfwidth, got c={c}, r={r}"));
        }
        Ok(Self { c, r })
    }

    pub fn lo(&self) -> f64 {
        self.c - self.r
    }

    pub fn hi(&self) -> f64 {
        self.c + self.r
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo() && x <= self.hi()
    }
}

/// L-infinity ball `{x : ||x - center||_inf <= r}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypercube {
    pub center: Vec<f64>,
    pub r: f64,
}

impl Hypercube {
    pub fn new(center: Vec<f64>, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() || center.is_empty() || center.iter().any(|v| !v.is_finite()) {
            return invalid("hypercube needs a finite non-empty center and positive halfwidth");
        }
        Ok(Self { center, r })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        linf(&self.center, x) <= self.r
    }
}

/// `||a - b||_inf`.
pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// True when the two cubes are strictly separated in the L-infinity sense.
pub fn hypercubes_disjoint(a: &Hypercube, b: &Hypercube) -> bool {
    linf(&a.center, &b.center) > a.r + b.r
}

pub fn intervals_disjoint(a: &Interval, b: &Interval) -> bool {
    (a.c - b.c).abs() > a.r + b.r
}

/// Atoms of a discrete mixing measure.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSupportSet {
    points: Vec<Vec<f64>>,
    merge_tol: f64,
}

impl FiniteSupportSet {
    /// Builds the set, dropping points within `merge_tol` of an earlier point.
    pub fn new(points: Vec<Vec<f64>>, merge_tol: f64) -> Result<Self> {
        if points.is_empty() {
            return invalid("support set must be non-empty");
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return invalid("support points must be finite and share one positive dimension");
        }
        if !(merge_tol >= 0.0) {
            return invalid(format!("merge_tol must be non-negative, got {merge_tol}"));
        }
        let mut kept: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if !kept.iter().any(|q| euclid(q, &p) <= merge_tol) {
                kept.push(p);
            }
        }
        Ok(Self { points: kept, merge_tol })
    }

    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(xs.iter().map(|&x| vec![x]).collect(), DEFAULT_MERGE_TOL)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            for q in &self.points[i + 1..] {
                d = d.max(euclid(p, q));
            }
        }
        d
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            merge_tol: self.merge_tol,
        }
    }
}

/// Minimum pairwise Euclidean distance between two sets.
pub fn d_c(a: &FiniteSupportSet, b: &FiniteSupportSet) -> f64 {
    let mut d = f64::INFINITY;
    for p in &a.points {
        for q in &b.points {
            d = d.min(euclid(p, q));
        }
    }
    d
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the labelling is order independent.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Indices of the single-linkage components, each sorted, ordered by first index.
pub fn component_indices(s: &FiniteSupportSet, gap: f64) -> Result<Vec<Vec<usize>>> {
    if !(gap > 0.0) {
        return invalid(format!("gap must be positive, got {gap}"));
    }
    let n = s.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if euclid(&s.points[i], &s.points[j]) < gap {
                uf.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = uf.find(i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    Ok(groups)
}

/// Partition of `s` into connected components at threshold `gap`.
pub fn connected_components(s: &FiniteSupportSet, gap: f64) -> Result<Vec<FiniteSupportSet>> {
    Ok(component_indices(s, gap)?.iter().map(|idx| s.subset(idx)).collect())
}

/// Unordered pairs `(i, j)`, `i < j`, of neighbouring components: no third
/// component is strictly closer to both.
pub fn neighbor_pairs(components: &[FiniteSupportSet]) -> Vec<(usize, usize)> {
    let k = components.len();
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = d_c(&components[i], &components[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let dij = dist[i][j];
            let blocked = (0..k).any(|m| m != i && m != j && dist[i][m] < dij && dist[j][m] < dij);
            if !blocked {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Within-space distance: 0 for a single component, else the largest
/// distance between neighbouring components.
pub fn d_w(s: &FiniteSupportSet, gap: f64) -> Result<f64> {
    let comps = connected_components(s, gap)?;
    if comps.len() == 1 {
        return Ok(0.0);
    }
    Ok(neighbor_pairs(&comps)
        .into_iter()
        .map(|(i, j)| d_c(&comps[i], &comps[j]))
        .fold(0.0, f64::max))
}

/// Between-space distance. For finite sets this is the minimum pairwise gap.
pub fn d_b(a: &FiniteSupportSet, b: &FiniteSupportSet) -> f64 {
    d_c(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// `max_k d_w(V_k)`.
    pub max_within: f64,
    /// `min_{i<j} d_b(V_i, V_j)`; infinite when there is a single set.
    pub min_between: f64,
    pub separated: bool,
}

/// Checks `max_k d_w(V_k) < min_{i<j} d_b(V_i, V_j)`.
pub fn check_separation_c2(supports: &[FiniteSupportSet], gap: f64) -> Result<SeparationReport> {
    if supports.is_empty() {
        return invalid("separation check needs at least one support set");
    }
    let mut max_within: f64 = 0.0;
    for s in supports {
        max_within = max_within.max(d_w(s, gap)?);
    }
    let mut min_between = f64::INFINITY;
    for i in 0..supports.len() {
        for j in i + 1..supports.len() {
            min_between = min_between.min(d_b(&supports[i], &supports[j]));
        }
    }
    Ok(SeparationReport {
        max_within,
        min_between,
        separated: max_within < min_between,
    })
}
