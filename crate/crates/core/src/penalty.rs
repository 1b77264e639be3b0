//! Nonlocal penalty against interpenetration.
//!
//! For a deformation `y` the penalty is the double integral over `Omega x Omega`
//! of
//!
//! ```text
//! eps2^-(beta+d) * h( h(g(|x~ - x|)) - h(g(|y(x~) - y(x)| / eps2)) )
//! ```
//!
//! where `h` is the C1 smoothing of the positive part with parameter `a`. The
//! integral is evaluated with the element-midpoint rule (weights
//! `area_i * area_j`), either by a full double loop or by a boundary-first
//! search that only visits contributing elements.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::state::DeformationState;

/// Space dimension.
pub const DIM: i32 = 2;

/// Monotone gauge `g` with `g(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    /// `g(t) = t`
    #[default]
    Linear,
    /// `g(t) = t^2`
    Quadratic,
}

impl Gauge {
    pub fn value(self, t: f64) -> f64 {
        match self {
            Gauge::Linear => t,
            Gauge::Quadratic => t * t,
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Gauge::Linear => 1.0,
            Gauge::Quadratic => 2.0 * t,
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Gauge::Linear => v,
            Gauge::Quadratic => v.max(0.0).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyParams {
    pub eps2: f64,
    pub beta: f64,
    pub gauge: Gauge,
    /// Smoothing width of `h`.
    pub a: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self {
            eps2: 0.25,
            beta: 1.8,
            gauge: Gauge::Linear,
            a: 0.1,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps2 > 0.0 && self.eps2.is_finite()) {
            return Err(Error::Configuration(format!("eps2 must be positive, got {}", self.eps2)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Configuration(format!("smoothing a must be positive, got {}", self.a)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Configuration(format!("beta must be positive, got {}", self.beta)));
        }
        // g(0) = 0 and strictly increasing on a sample grid
        if self.gauge.value(0.0) != 0.0 {
            return Err(Error::Configuration("gauge must vanish at 0".into()));
        }
        let samples: Vec<f64> = (0..=100).map(|k| self.gauge.value(k as f64 * 0.05)).collect();
        if samples.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Configuration("gauge must be strictly increasing".into()));
        }
        Ok(())
    }

    /// `eps2^-(beta + d)`
    pub fn prefactor(&self) -> f64 {
        self.eps2.powf(-(self.beta + DIM as f64))
    }
}

/// C1 smoothing of the positive part: `0`, `x^2/(2a)`, `x - a/2`.
pub fn smooth_pospart(x: f64, a: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x <= a {
        x * x / (2.0 * a)
    } else {
        x - 0.5 * a
    }
}

pub fn smooth_pospart_derivative(x: f64, a: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x <= a {
        x / a
    } else {
        1.0
    }
}

/// Penalty integrand for one pair of reference points and their images.
pub fn penalty_integrand(x: Point, xt: Point, yx: Point, yxt: Point, params: &PenaltyParams) -> f64 {
    let ref_term = smooth_pospart(params.gauge.value(dist(x, xt)), params.a);
    pair_term(ref_term, [yxt[0] - yx[0], yxt[1] - yx[1]], params).0 * params.prefactor()
}

#[inline]
fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Unscaled smoothed bracket for a pair and its derivative with respect to
/// `dy = y(x~) - y(x)`.
#[inline]
fn pair_term(ref_term: f64, dy: [f64; 2], params: &PenaltyParams) -> (f64, [f64; 2]) {
    let r = dy[0].hypot(dy[1]);
    let t = r / params.eps2;
    let gt = params.gauge.value(t);
    let inner = ref_term - smooth_pospart(gt, params.a);
    if inner <= 0.0 {
        return (0.0, [0.0, 0.0]);
    }
    let value = smooth_pospart(inner, params.a);
    if r == 0.0 {
        return (value, [0.0, 0.0]);
    }
    let s = -smooth_pospart_derivative(inner, params.a)
        * smooth_pospart_derivative(gt, params.a)
        * params.gauge.derivative(t)
        / (params.eps2 * r);
    (value, [s * dy[0], s * dy[1]])
}

/// Result of one penalty evaluation.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PenaltyEvaluation {
    pub value: f64,
    /// Marginal density per element (energy per area).
    pub density: Vec<f64>,
    /// Contributing unordered pairs `(i, j, value)` with `i < j`; each pair
    /// enters the total twice.
    pub pairs: Vec<(usize, usize, f64)>,
    pub stats: PairStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PairStats {
    /// Ordered pairs tested in the boundary sweep.
    pub boundary_pairs: usize,
    /// Ordered pairs tested after the boundary sweep.
    pub extra_pairs: usize,
    /// Number of elements in the contributor set.
    pub contributors: usize,
}

/// Precomputed data shared by both evaluators.
struct PairContext<'a> {
    params: &'a PenaltyParams,
    mid: &'a [Point],
    ymid: Vec<Point>,
    area: f64,
    prefactor: f64,
}

impl<'a> PairContext<'a> {
    fn new(state: &'a DeformationState, params: &'a PenaltyParams) -> Self {
        Self {
            params,
            mid: state.discretization().midpoints(),
            ymid: state.deformed_midpoints(),
            area: state.mesh().element_area(),
            prefactor: params.prefactor(),
        }
    }

    /// Whether the pair contributes a positive amount. For `|dx| > 0` this
    /// holds exactly when `|dy| < eps2 |dx|` since `h` and `g` are increasing.
    #[inline]
    fn contributes(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let dx2 = sq(self.mid[i], self.mid[j]);
        let dy2 = sq(self.ymid[i], self.ymid[j]);
        dx2 > 0.0 && dy2 < self.params.eps2 * self.params.eps2 * dx2 && self.term(i, j).0 > 0.0
    }

    #[inline]
    fn term(&self, i: usize, j: usize) -> (f64, [f64; 2]) {
        let ref_term = smooth_pospart(self.params.gauge.value(dist(self.mid[i], self.mid[j])), self.params.a);
        let yi = self.ymid[i];
        let yj = self.ymid[j];
        pair_term(ref_term, [yj[0] - yi[0], yj[1] - yi[1]], self.params)
    }

    /// Density at `i` and derivative of the total with respect to `y(m_i)`,
    /// summed over `partners` in the given order.
    fn row(&self, i: usize, partners: impl Iterator<Item = usize>) -> (f64, [f64; 2], Vec<(usize, f64)>) {
        let mut dens = 0.0;
        let mut gy = [0.0; 2];
        let mut hits = Vec::new();
        for j in partners {
            if j == i {
                continue;
            }
            let (v, d) = self.term(i, j);
            if v > 0.0 {
                dens += v;
                // d/dy_i of the bracket is -d/d(dy); the pair appears twice
                gy[0] -= 2.0 * d[0];
                gy[1] -= 2.0 * d[1];
                hits.push((j, v));
            }
        }
        let s = self.prefactor * self.area;
        (s * dens, [s * self.area * gy[0], s * self.area * gy[1]], hits)
    }
}

#[inline]
fn sq(a: Point, b: Point) -> f64 {
    let (u, v) = (a[0] - b[0], a[1] - b[1]);
    u * u + v * v
}

/// Evaluate rows for `rows` against `partners` and assemble value, gradient
/// and density. Rows not listed contribute nothing.
fn assemble(
    state: &DeformationState,
    ctx: &PairContext<'_>,
    rows: &[usize],
    partners: &[usize],
) -> (f64, Vec<f64>, PenaltyEvaluation) {
    let ne = state.mesh().num_elements();
    let results: Vec<(f64, [f64; 2], Vec<(usize, f64)>)> = rows
        .par_iter()
        .map(|&i| ctx.row(i, partners.iter().copied()))
        .collect();
    let mut density = vec![0.0; ne];
    let mut value = 0.0;
    let mut grad = vec![0.0; state.num_dofs()];
    let mut pairs = Vec::new();
    let basis = state.discretization().midpoint().basis(0);
    let pair_scale = ctx.prefactor * ctx.area * ctx.area;
    for (&i, (dens, gy, hits)) in rows.iter().zip(results) {
        density[i] = dens;
        value += ctx.area * dens;
        if gy[0] != 0.0 || gy[1] != 0.0 {
            let idx = state.local_indices(i);
            for c in 0..2 {
                for (k, &g) in idx[c].iter().enumerate() {
                    grad[g] += gy[c] * basis.value[k];
                }
            }
        }
        pairs.extend(hits.into_iter().filter(|&(j, _)| i < j).map(|(j, v)| (i, j, pair_scale * v)));
    }
    (
        value,
        grad,
        PenaltyEvaluation {
            value,
            density,
            pairs,
            stats: PairStats::default(),
        },
    )
}

/// Full double loop over all ordered element pairs.
pub fn energy_cn_full(state: &DeformationState, params: &PenaltyParams) -> Result<(f64, Vec<f64>, PenaltyEvaluation)> {
    params.validate()?;
    let ctx = PairContext::new(state, params);
    let all: Vec<usize> = (0..state.mesh().num_elements()).collect();
    let (value, grad, mut eval) = assemble(state, &ctx, &all, &all);
    let ne = all.len();
    eval.stats = PairStats {
        boundary_pairs: 0,
        extra_pairs: ne * ne,
        contributors: eval.density.iter().filter(|&&d| d > 0.0).count(),
    };
    Ok((value, grad, eval))
}

/// Boundary-first evaluation.
///
/// 1. All pairs of boundary elements are tested; elements of contributing
///    pairs seed the contributor set `S`.
/// 2. Neighbours of `S` are tested against `S` and the boundary set, growing
///    `S` breadth-first.
/// 3. `S` is closed: every element with a contributing partner in `S` joins
///    `S`, until a sweep over `S x all` adds nothing.
/// 4. The penalty is summed over `S x S`, which then holds every contributing
///    pair reachable from the boundary.
pub fn energy_cn_accelerated(
    state: &DeformationState,
    params: &PenaltyParams,
) -> Result<(f64, Vec<f64>, PenaltyEvaluation)> {
    params.validate()?;
    let mesh = state.mesh();
    let ne = mesh.num_elements();
    let ctx = PairContext::new(state, params);
    let boundary = mesh.boundary_elements();
    let mut in_set = vec![false; ne];
    let mut stats = PairStats {
        boundary_pairs: boundary.len() * boundary.len(),
        ..PairStats::default()
    };

    let seeds: Vec<bool> = boundary
        .par_iter()
        .map(|&i| boundary.iter().any(|&j| ctx.contributes(i, j)))
        .collect();
    let mut set: Vec<usize> = Vec::new();
    for (&i, &hit) in boundary.iter().zip(&seeds) {
        if hit {
            in_set[i] = true;
            set.push(i);
        }
    }

    // breadth-first growth through element adjacency
    let mut checked = in_set.clone();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let push_neighbors = |e: usize, checked: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        for n in mesh.neighbors(e).into_iter().flatten() {
            if !checked[n] {
                checked[n] = true;
                queue.push_back(n);
            }
        }
    };
    for &e in &set {
        push_neighbors(e, &mut checked, &mut queue);
    }
    let boundary_set: BTreeSet<usize> = boundary.iter().copied().collect();
    while let Some(k) = queue.pop_front() {
        let candidates: BTreeSet<usize> = set.iter().copied().chain(boundary_set.iter().copied()).collect();
        stats.extra_pairs += candidates.len();
        if candidates.iter().any(|&j| ctx.contributes(k, j)) {
            in_set[k] = true;
            set.push(k);
            push_neighbors(k, &mut checked, &mut queue);
        }
    }

    // closure over S x all
    let mut fresh = set.clone();
    while !fresh.is_empty() {
        stats.extra_pairs += fresh.len() * ne;
        let found: Vec<Vec<usize>> = fresh
            .par_iter()
            .map(|&i| (0..ne).filter(|&j| ctx.contributes(i, j)).collect())
            .collect();
        fresh.clear();
        for j in found.into_iter().flatten() {
            if !in_set[j] {
                in_set[j] = true;
                set.push(j);
                fresh.push(j);
            }
        }
    }

    set.sort_unstable();
    stats.contributors = set.len();
    let (value, grad, mut eval) = assemble(state, &ctx, &set, &set);
    eval.stats = stats;
    Ok((value, grad, eval))
}

/// Marginal density of the penalty per element.
pub fn marginal_density(state: &DeformationState, params: &PenaltyParams) -> Result<Vec<f64>> {
    Ok(energy_cn_full(state, params)?.2.density)
}

/// CSV rows `element_id,midpoint_x1,midpoint_x2,density`.
pub fn density_csv(midpoints: &[Point], density: &[f64]) -> String {
    let mut out = String::from("element_id,midpoint_x1,midpoint_x2,density\n");
    for (e, (m, d)) in midpoints.iter().zip(density).enumerate() {
        out.push_str(&format!("{e},{},{},{}\n", m[0], m[1], d));
    }
    out
}

/// CSV rows `i,j,value` of contributing pairs.
pub fn pairs_csv(pairs: &[(usize, usize, f64)]) -> String {
    let mut out = String::from("i,j,value\n");
    for (i, j, v) in pairs {
        out.push_str(&format!("{i},{j},{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, DomainSpec, PincersSpec};
    use crate::state::{pincers_map, rotation, Discretization};
    use nalgebra::Matrix2;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn params(eps2: f64, beta: f64) -> PenaltyParams {
        PenaltyParams {
            eps2,
            beta,
            gauge: Gauge::Linear,
            a: 0.1,
        }
    }

    #[test]
    fn smoothing_branches() {
        let a = 0.1;
        assert_eq!(smooth_pospart(-0.5, a), 0.0);
        assert!((smooth_pospart(a, a) - a / 2.0).abs() < 1e-16);
        assert!((a * a / (2.0 * a) - (a - a / 2.0)).abs() < 1e-16);
        assert!((smooth_pospart(0.3, a) - 0.25).abs() < 1e-15);
        // C1 seams
        for x0 in [0.0, a] {
            let e = 1e-9;
            let l = (smooth_pospart(x0, a) - smooth_pospart(x0 - e, a)) / e;
            let r = (smooth_pospart(x0 + e, a) - smooth_pospart(x0, a)) / e;
            assert!((l - r).abs() < 1e-6);
        }
    }

    #[test]
    fn integrand_examples() {
        // identity data, |dx| >= a: the inner difference is <= 0
        let p = params(0.8, 1.8);
        assert_eq!(penalty_integrand([0.0, 0.0], [0.5, 0.1], [0.0, 0.0], [0.5, 0.1], &p), 0.0);
        // coincident images at reference distance 1
        let p = params(0.5, 0.5);
        let v = penalty_integrand([0.0, 0.0], [1.0, 0.0], [0.3, 0.3], [0.3, 0.3], &p);
        // hand evaluation: (1/0.5^2.5) * h(h(1) - h(0)) = 2^2.5 * h(0.95) = 0.9 * 2^2.5
        let oracle = 0.9 * 2f64.powf(2.5);
        assert!((v - oracle).abs() < 1e-13 * oracle);
        let swapped = penalty_integrand([1.0, 0.0], [0.0, 0.0], [0.3, 0.3], [0.3, 0.3], &p);
        assert_eq!(v, swapped);
    }

    #[test]
    fn pair_gradient_matches_differences() {
        let p = params(0.5, 1.8);
        let ref_term = smooth_pospart(0.9, p.a);
        for dy in [[0.1, 0.05], [0.2, -0.3], [0.01, 0.02], [0.0, 0.4]] {
            let (_, g) = pair_term(ref_term, dy, &p);
            let h = 1e-7;
            for k in 0..2 {
                let mut a = dy;
                let mut b = dy;
                a[k] += h;
                b[k] -= h;
                let fd = (pair_term(ref_term, a, &p).0 - pair_term(ref_term, b, &p).0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{dy:?} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    fn box_state(nx: usize, ny: usize) -> DeformationState {
        let mesh = Arc::new(build_box_mesh([0.0, 0.0], [2.0, 1.0], nx, ny).unwrap());
        DeformationState::identity(Discretization::new(mesh).unwrap())
    }

    fn pincers_state(nx: usize, ny: usize) -> DeformationState {
        let spec = DomainSpec::Pincers(PincersSpec {
            nx,
            ny,
            ..PincersSpec::default()
        });
        let mesh = Arc::new(spec.build().unwrap());
        DeformationState::from_map(Discretization::new(mesh).unwrap(), pincers_map(1.1)).unwrap()
    }

    #[test]
    fn identity_and_rigid_motion_vanish() {
        let s = box_state(8, 4);
        let p = params(0.5, 1.8);
        let (v, g, eval) = energy_cn_full(&s, &p).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(eval.density.iter().all(|&d| d == 0.0));
        let moved = s.transformed(rotation(0.7), [3.0, -1.0]);
        assert_eq!(energy_cn_full(&moved, &p).unwrap().0, 0.0);
    }

    #[test]
    fn stretched_map_skips_interior() {
        let s = box_state(10, 6);
        let stretched = DeformationState::affine(s.discretization().clone(), Matrix2::identity() * 2.0, [0.0, 0.0]);
        let p = params(0.25, 1.8);
        let (v, _, eval) = energy_cn_accelerated(&stretched, &p).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(eval.stats.extra_pairs, 0);
        assert_eq!(eval.stats.contributors, 0);
    }

    #[test]
    fn pincers_overlap_positive_and_evaluators_agree() {
        let s = pincers_state(25, 17);
        let p = params(0.5, 0.5);
        let (full, gf, ef) = energy_cn_full(&s, &p).unwrap();
        let (fast, ga, ea) = energy_cn_accelerated(&s, &p).unwrap();
        assert!(full > 0.0);
        assert!((full - fast).abs() <= 1e-12 * full);
        let gmax = gf.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in gf.iter().zip(&ga) {
            assert!((a - b).abs() <= 1e-12 * gmax);
        }
        for (a, b) in ef.density.iter().zip(&ea.density) {
            assert!((a - b).abs() <= 1e-12 * full);
        }
        // density integrates to the value
        let area = s.mesh().element_area();
        let sum: f64 = ef.density.iter().map(|d| d * area).sum();
        assert!((sum - full).abs() <= 1e-10 * full);
        // pair list reproduces the value
        let pair_sum: f64 = 2.0 * ef.pairs.iter().map(|p| p.2).sum::<f64>();
        assert!((pair_sum - full).abs() <= 1e-10 * full);
        assert!(ea.stats.extra_pairs + ea.stats.boundary_pairs < s.mesh().num_elements().pow(2));
    }

    #[test]
    fn density_concentrates_on_arm_tips() {
        let s = pincers_state(25, 17);
        let p = params(0.5, 0.5);
        let dens = marginal_density(&s, &p).unwrap();
        let mids = s.discretization().midpoints();
        for (m, d) in mids.iter().zip(&dens) {
            if *d > 0.0 {
                assert!(m[0] > 0.0, "density at {m:?}");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let s = box_state(2, 2);
        assert!(energy_cn_full(&s, &params(0.0, 1.8)).is_err());
        assert!(energy_cn_full(&s, &PenaltyParams { a: -1.0, ..params(0.5, 1.8) }).is_err());
    }

    proptest! {
        #[test]
        fn smoothing_bound(x in -5.0f64..5.0, a in 0.01f64..1.0) {
            let h = smooth_pospart(x, a);
            let pos = x.max(0.0);
            prop_assert!(h >= 0.0 && h <= pos + 1e-15);
            prop_assert!(pos - h <= a / 2.0 + 1e-15);
        }

        #[test]
        fn integrand_symmetric_nonnegative(x in proptest::array::uniform2(-2.0f64..2.0),
                                           xt in proptest::array::uniform2(-2.0f64..2.0),
                                           yx in proptest::array::uniform2(-2.0f64..2.0),
                                           yxt in proptest::array::uniform2(-2.0f64..2.0),
                                           eps2 in 0.05f64..1.0) {
            let p = params(eps2, 1.8);
            let v = penalty_integrand(x, xt, yx, yxt, &p);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v, penalty_integrand(xt, x, yxt, yx, &p));
        }
    }
}
