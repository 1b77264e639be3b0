//! Injectivity diagnostics: the Ciarlet-Nečas gap `int det grad y - |y(Omega)|`,
//! the near-self-contact measure `|P_y(s)|`, determinant extrema and the
//! determinant lower bound `delta = kappa^-1(C)`.

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfs::{basis_at, tabulate, QuadRule};
use crate::error::{Error, Result};
use crate::mesh::{Point, SIDES};
use crate::state::DeformationState;

/// Sub-cells per element edge used to trace the deformed element images.
const SUBDIV: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Raster rows per (shorter) reference element edge.
    pub raster_cells_per_edge: usize,
    /// Reference separation scale for `P_y(s)`.
    pub rho: f64,
    /// Deformed distances at which `|P_y(s)|` is reported.
    pub s_values: Vec<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            raster_cells_per_edge: 128,
            rho: 0.5,
            s_values: vec![0.0, 0.05, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GapEstimate {
    /// `int det grad y dx`
    pub integral_det: f64,
    /// Rasterised `|y(Omega)|`.
    pub image_area: f64,
    pub gap: f64,
    pub pixel_size: f64,
    /// Length of the deformed boundary.
    pub boundary_length: f64,
    /// Bound on the raster error: one row height times the deformed boundary length.
    pub tolerance: f64,
    pub cells_per_edge: usize,
}

/// Deformed images of all elements on a `(SUBDIV+1)^2` local grid.
struct ElementImages {
    n: usize,
    points: Vec<Vec<Point>>,
}

impl ElementImages {
    fn new(state: &DeformationState) -> Self {
        let n = SUBDIV;
        let h = state.mesh().element_size();
        let bases: Vec<_> = (0..=n)
            .flat_map(|j| (0..=n).map(move |i| [i as f64 / n as f64, j as f64 / n as f64]))
            .map(|xi| basis_at(h, xi))
            .collect();
        let points = (0..state.mesh().num_elements())
            .into_par_iter()
            .map(|e| {
                let l = state.local_dofs(e);
                bases.iter().map(|b| [b.value_only(&l[0]), b.value_only(&l[1])]).collect()
            })
            .collect();
        Self { n, points }
    }

    fn at(&self, e: usize, i: usize, j: usize) -> Point {
        self.points[e][j * (self.n + 1) + i]
    }

    fn bbox(&self, e: usize) -> [f64; 4] {
        self.points[e].iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |b, p| [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])],
        )
    }

    /// Polyline of side `s` (bottom, right, top, left) of element `e`.
    fn side(&self, e: usize, s: usize) -> Vec<Point> {
        let n = self.n;
        (0..=n)
            .map(|k| match s {
                0 => self.at(e, k, 0),
                1 => self.at(e, n, k),
                2 => self.at(e, n - k, n),
                _ => self.at(e, 0, n - k),
            })
            .collect()
    }
}

/// Rows per work unit of the scanline union.
const BAND: usize = 256;

/// Area of the union of polygons, sampled on rows of height `px` starting at
/// `y0`: each row contributes `px` times the exact length of the union of
/// the polygons' intersections with the row's centre line. Edges follow the
/// half-open rule, so polygons sharing an edge leave no seam.
fn union_area(polys: &[[Point; 4]], y0: f64, px: f64, rows: usize) -> f64 {
    let row_of = |y: f64| ((y - y0) / px - 0.5).ceil().max(0.0) as usize;
    let ranges: Vec<(usize, usize)> = polys
        .iter()
        .map(|q| {
            let lo = q.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let hi = q.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            (row_of(lo), row_of(hi).min(rows))
        })
        .collect();
    let bands = rows.div_ceil(BAND);
    (0..bands)
        .into_par_iter()
        .map(|band| {
            let (b0, b1) = (band * BAND, ((band + 1) * BAND).min(rows));
            let mut spans: Vec<Vec<(f64, f64)>> = vec![Vec::new(); b1 - b0];
            let mut xs = Vec::with_capacity(4);
            for (q, &(r0, r1)) in polys.iter().zip(&ranges) {
                for row in r0.max(b0)..r1.min(b1) {
                    let yc = y0 + (row as f64 + 0.5) * px;
                    xs.clear();
                    for k in 0..4 {
                        let (a, b) = (q[k], q[(k + 1) % 4]);
                        if (a[1] <= yc) != (b[1] <= yc) {
                            xs.push(a[0] + (yc - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
                        }
                    }
                    xs.sort_by(f64::total_cmp);
                    for pair in xs.chunks_exact(2) {
                        spans[row - b0].push((pair[0], pair[1]));
                    }
                }
            }
            let mut len = 0.0;
            for row in &mut spans {
                row.sort_by(|u, v| u.0.total_cmp(&v.0));
                let mut cur: Option<(f64, f64)> = None;
                for &(l, r) in row.iter() {
                    cur = match cur {
                        Some((cl, cr)) if l <= cr => Some((cl, cr.max(r))),
                        Some((cl, cr)) => {
                            len += cr - cl;
                            Some((l, r))
                        }
                        None => Some((l, r)),
                    };
                }
                if let Some((cl, cr)) = cur {
                    len += cr - cl;
                }
            }
            len * px
        })
        .sum()
}

/// `int det grad y dx` with a 3x3 Gauss rule, exact for bicubic fields.
pub fn integral_det(state: &DeformationState) -> Result<f64> {
    let tab = tabulate(state.mesh().element_size(), &QuadRule::gauss(3)?, 1)?;
    let parts: Vec<f64> = (0..state.mesh().num_elements())
        .into_par_iter()
        .map(|e| {
            let l = state.local_dofs(e);
            (0..tab.len())
                .map(|q| {
                    let b = tab.basis(q);
                    let (g1, g2) = (b.evaluate(&l[0]).gradient, b.evaluate(&l[1]).gradient);
                    tab.weights()[q] * (g1[0] * g2[1] - g1[1] * g2[0])
                })
                .sum()
        })
        .collect();
    Ok(parts.iter().sum())
}

/// Ciarlet-Nečas gap, with `|y(Omega)|` from a scanline union of the
/// deformed sub-cells.
pub fn ciarlet_necas_gap(state: &DeformationState, cells_per_edge: usize) -> Result<GapEstimate> {
    if cells_per_edge < 4 {
        return Err(Error::Diagnostics(format!(
            "raster resolution {cells_per_edge} below the minimum of 4 cells per element edge"
        )));
    }
    let mesh = state.mesh();
    let h = mesh.element_size();
    let px = h[0].min(h[1]) / cells_per_edge as f64;
    let images = ElementImages::new(state);
    let bbox = (0..mesh.num_elements()).map(|e| images.bbox(e)).fold(
        [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        |b, c| [b[0].min(c[0]), b[1].min(c[1]), b[2].max(c[2]), b[3].max(c[3])],
    );
    let height = bbox[3] - bbox[1];
    if !(bbox[2] > bbox[0] && height > 0.0 && height.is_finite() && (bbox[2] - bbox[0]).is_finite()) {
        return Err(Error::Diagnostics(format!("degenerate deformed bounding box {bbox:?}")));
    }
    let rows = (height / px).ceil() as usize + 1;
    if rows > 20_000_000 {
        return Err(Error::Diagnostics(format!("scanline raster of {rows} rows is too large")));
    }
    let n = images.n;
    let mut polys = Vec::with_capacity(mesh.num_elements() * n * n);
    for e in 0..mesh.num_elements() {
        for j in 0..n {
            for i in 0..n {
                polys.push([
                    images.at(e, i, j),
                    images.at(e, i + 1, j),
                    images.at(e, i + 1, j + 1),
                    images.at(e, i, j + 1),
                ]);
            }
        }
    }
    let image_area = union_area(&polys, bbox[1] - 0.5 * px, px, rows);
    let mut boundary_length = 0.0;
    for e in 0..mesh.num_elements() {
        let nb = mesh.neighbors(e);
        for s in 0..SIDES.len() {
            if nb[s].is_none() {
                let line = images.side(e, s);
                boundary_length += line.windows(2).map(|w| dist(w[0], w[1])).sum::<f64>();
            }
        }
    }
    let integral_det = integral_det(state)?;
    Ok(GapEstimate {
        integral_det,
        image_area,
        gap: integral_det - image_area,
        pixel_size: px,
        boundary_length,
        tolerance: px * boundary_length,
        cells_per_edge,
    })
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Whether `p` lies in the deformed image of element `e`, by a damped Newton
/// inversion of the element map.
fn in_element_image(state: &DeformationState, images: &ElementImages, e: usize, p: Point) -> bool {
    let b = images.bbox(e);
    let pad = 0.05 * ((b[2] - b[0]) + (b[3] - b[1]));
    if p[0] < b[0] - pad || p[0] > b[2] + pad || p[1] < b[1] - pad || p[1] > b[3] + pad {
        return false;
    }
    let h = state.mesh().element_size();
    let l = state.local_dofs(e);
    let scale = h[0].max(h[1]);
    let mut xi = [0.5, 0.5];
    for _ in 0..50 {
        let bp = basis_at(h, xi);
        let (f1, f2) = (bp.evaluate(&l[0]), bp.evaluate(&l[1]));
        let r = [f1.value - p[0], f2.value - p[1]];
        if r[0].hypot(r[1]) < 1e-12 * scale {
            return xi.iter().all(|&t| (-1e-12..=1.0 + 1e-12).contains(&t));
        }
        // Jacobian with respect to the local coordinates
        let j = Matrix2::new(
            f1.gradient[0] * h[0],
            f1.gradient[1] * h[1],
            f2.gradient[0] * h[0],
            f2.gradient[1] * h[1],
        );
        let Some(inv) = j.try_inverse() else { return false };
        let step = inv * nalgebra::Vector2::new(r[0], r[1]);
        xi = [(xi[0] - step[0]).clamp(-0.25, 1.25), (xi[1] - step[1]).clamp(-0.25, 1.25)];
    }
    false
}

/// `|P_y(s)|` estimated on element midpoints.
///
/// Element `i` counts iff some `j` with `|m_i - m_j| > rho/2` has
/// `|y(m_i) - y(m_j)| <= s`, or has `y(m_i)` inside its deformed image. The
/// second clause keeps the estimate meaningful at `s = 0`, where exact
/// midpoint coincidences have measure zero.
pub fn near_self_contact_measure(state: &DeformationState, s: f64, rho: f64) -> Result<f64> {
    Ok(near_self_contact_set(state, s, rho)?.iter().filter(|&&c| c).count() as f64 * state.mesh().element_area())
}

/// Per-element membership flags of the `P_y(s)` estimate.
pub fn near_self_contact_set(state: &DeformationState, s: f64, rho: f64) -> Result<Vec<bool>> {
    if !(s >= 0.0) || !(rho > 0.0) {
        return Err(Error::Diagnostics(format!("need s >= 0 and rho > 0, got s = {s}, rho = {rho}")));
    }
    let mids = state.mesh().element_midpoints();
    let ymid = state.deformed_midpoints();
    let images = ElementImages::new(state);
    let ne = mids.len();
    Ok((0..ne)
        .into_par_iter()
        .map(|i| {
            (0..ne).any(|j| {
                j != i
                    && dist(mids[i], mids[j]) > rho / 2.0
                    && (dist(ymid[i], ymid[j]) <= s || in_element_image(state, &images, j, ymid[i]))
            })
        })
        .collect())
}

/// Minimum of `det grad y` over all Gauss points.
pub fn min_determinant(state: &DeformationState) -> f64 {
    min_det_filtered(state, |_| true)
}

/// Minimum of `det grad y` over Gauss points of elements off the boundary.
pub fn min_determinant_interior(state: &DeformationState) -> f64 {
    let flags = state.mesh().boundary_element_flags();
    min_det_filtered(state, |e| !flags[e])
}

fn min_det_filtered(state: &DeformationState, keep: impl Fn(usize) -> bool + Sync) -> f64 {
    let nq = state.discretization().gauss().len();
    (0..state.mesh().num_elements())
        .into_par_iter()
        .filter(|&e| keep(e))
        .map(|e| {
            (0..nq)
                .map(|q| state.gradient_at_gauss(e, q).determinant())
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Cone data for the determinant lower bound: height `mu` and volume `|V|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub height: f64,
    pub volume: f64,
}

/// Inputs of `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetBound {
    /// Holder constant of `det grad y`.
    pub m: f64,
    pub q: f64,
    /// Holder exponent.
    pub alpha: f64,
    pub cone: Cone,
    pub d: usize,
}

impl DetBound {
    fn validate(&self) -> Result<()> {
        let ok = self.m >= 0.0
            && self.cone.height > 0.0
            && self.cone.volume > 0.0
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.d >= 1
            && self.q >= self.d as f64 / self.alpha;
        if ok && [self.m, self.q, self.alpha, self.cone.height, self.cone.volume].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Diagnostics(format!("invalid determinant-bound data {self:?}")))
        }
    }

    /// `kappa(t) = d |V| / mu^d int_0^mu (t + M r^alpha)^-q r^(d-1) dr`.
    pub fn kappa(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !(t > 0.0) {
            return Err(Error::Diagnostics(format!("kappa needs t > 0, got {t}")));
        }
        let d = self.d as f64;
        let mu = self.cone.height;
        // substitute r = mu u^(1/alpha) so the Holder term becomes linear in u;
        // the integrand is scaled by t^q to stay in range
        let k = 1.0 / self.alpha;
        let c = self.m * mu.powf(self.alpha) / t;
        let f = |u: f64| (1.0 + c * u).powf(-self.q) * k * u.powf(k * d - 1.0);
        // dyadic pieces resolve the peak near u ~ 1/c for small t
        let mut integral = adaptive_simpson(&f, 0.0, 0.5f64.powi(60), 1e-14);
        for j in (0..60).rev() {
            integral += adaptive_simpson(&f, 0.5f64.powi(j + 1), 0.5f64.powi(j), 1e-14);
        }
        let integral = mu.powf(d) * integral;
        Ok(d * self.cone.volume / mu.powf(d) * t.powf(-self.q) * integral)
    }

    /// `delta = kappa^-1(c)` by bracket expansion and bisection.
    pub fn delta(&self, c: f64) -> Result<f64> {
        self.validate()?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Diagnostics(format!("energy bound C = {c} must be positive")));
        }
        // kappa decreases from +inf to 0; start from the M = 0 closed form
        let guess = (self.cone.volume / c).powf(1.0 / self.q);
        let (mut lo, mut hi) = (guess, guess);
        let mut expand = 0;
        while self.kappa(lo)? < c {
            lo *= 0.5;
            expand += 1;
            if expand > 200 || !self.kappa(lo)?.is_finite() {
                return Err(Error::Diagnostics(format!("C = {c} above the range of kappa on the bracket")));
            }
        }
        expand = 0;
        while self.kappa(hi)? > c {
            hi *= 2.0;
            expand += 1;
            if expand > 200 || !hi.is_finite() {
                return Err(Error::Diagnostics(format!("C = {c} below the range of kappa on the bracket")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.kappa(mid)? > c {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let delta = 0.5 * (lo + hi);
        let k = self.kappa(delta)?;
        if (k - c).abs() > 1e-10 * c {
            return Err(Error::Diagnostics(format!("bisection stalled: kappa({delta}) = {k} vs C = {c}")));
        }
        Ok(delta)
    }
}

/// Lower bound `delta` on `det grad y` with `kappa(delta) = c`.
pub fn det_lower_bound_delta(c: f64, m: f64, q: f64, alpha: f64, cone: Cone, d: usize) -> Result<f64> {
    DetBound { m, q, alpha, cone, d }.delta(c)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    // coarse magnitude for a relative tolerance
    let scale = {
        let n = 64;
        (0..=n).map(|k| f(a + (b - a) * k as f64 / n as f64).abs()).sum::<f64>() * (b - a) / n as f64
    };
    rec(f, a, b, fa, fm, fb, whole, (rel * scale).max(f64::MIN_POSITIVE), 30)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NearContact {
    pub s: f64,
    pub area: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiagnosticsReport {
    pub integral_det: f64,
    pub image_area: f64,
    pub cn_gap: f64,
    pub raster_tolerance: f64,
    pub pixel_size: f64,
    pub raster_cells_per_edge: usize,
    pub min_det: f64,
    pub min_det_interior: f64,
    pub rho: f64,
    pub near_self_contact: Vec<NearContact>,
}

impl DiagnosticsReport {
    pub fn compute(state: &DeformationState, config: &DiagnosticsConfig) -> Result<Self> {
        let gap = ciarlet_necas_gap(state, config.raster_cells_per_edge)?;
        let near_self_contact = config
            .s_values
            .iter()
            .map(|&s| Ok(NearContact { s, area: near_self_contact_measure(state, s, config.rho)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            integral_det: gap.integral_det,
            image_area: gap.image_area,
            cn_gap: gap.gap,
            raster_tolerance: gap.tolerance,
            pixel_size: gap.pixel_size,
            raster_cells_per_edge: gap.cells_per_edge,
            min_det: min_determinant(state),
            min_det_interior: min_determinant_interior(state),
            rho: config.rho,
            near_self_contact,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}
