//! Bogner-Fox-Schmit bicubic Hermite elements.
//!
//! A scalar field stores four physical DOFs per node: the value, both first
//! derivatives and the mixed second derivative. On an element with local
//! coordinates `(xi, eta) in [0,1]^2` the 16 shape functions are tensor
//! products of the cubic Hermite polynomials, with the derivative shape
//! functions scaled by the element size so the DOFs carry physical units.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{MeshGrid, Point};

/// Number of local shape functions per element.
pub const NLOC: usize = 16;

/// Local corner coordinates, counter-clockwise from the lower-left corner.
const CORNERS: [[usize; 2]; 4] = [[0, 0], [1, 0], [1, 1], [0, 1]];

/// Cubic Hermite functions `(H00, H10, H01, H11)` on `[0, 1]` or their first
/// or second derivative: value at 0, slope at 0, value at 1, slope at 1.
pub fn hermite_basis_1d(xi: f64, derivative_order: u8) -> Result<[f64; 4]> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::Domain(xi));
    }
    Ok(hermite_unchecked(xi, derivative_order))
}

fn hermite_unchecked(t: f64, order: u8) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    match order {
        0 => [
            1.0 - 3.0 * t2 + 2.0 * t3,
            t - 2.0 * t2 + t3,
            3.0 * t2 - 2.0 * t3,
            -t2 + t3,
        ],
        1 => [
            -6.0 * t + 6.0 * t2,
            1.0 - 4.0 * t + 3.0 * t2,
            6.0 * t - 6.0 * t2,
            -2.0 * t + 3.0 * t2,
        ],
        2 => [-6.0 + 12.0 * t, -4.0 + 6.0 * t, 6.0 - 12.0 * t, -2.0 + 6.0 * t],
        _ => [0.0; 4],
    }
}

/// Value of the 1d Hermite function attached to node `a in {0,1}`, either
/// the value function (`slope = false`) or the slope function.
#[inline]
fn pick(h: &[f64; 4], a: usize, slope: bool) -> f64 {
    match (a, slope) {
        (0, false) => h[0],
        (0, true) => h[1],
        (1, false) => h[2],
        _ => h[3],
    }
}

/// Shape functions and physical derivatives at one local point.
#[derive(Debug, Clone, Copy)]
pub struct BasisPoint {
    pub value: [f64; NLOC],
    pub dx: [f64; NLOC],
    pub dy: [f64; NLOC],
    pub dxx: [f64; NLOC],
    pub dxy: [f64; NLOC],
    pub dyy: [f64; NLOC],
}

/// Evaluate all 16 shape functions of an element of size `h` at `xi`.
pub fn basis_at(h: [f64; 2], xi: Point) -> BasisPoint {
    let hx: [[f64; 4]; 3] = [0, 1, 2].map(|o| hermite_unchecked(xi[0], o));
    let hy: [[f64; 4]; 3] = [0, 1, 2].map(|o| hermite_unchecked(xi[1], o));
    let mut out = BasisPoint {
        value: [0.0; NLOC],
        dx: [0.0; NLOC],
        dy: [0.0; NLOC],
        dxx: [0.0; NLOC],
        dxy: [0.0; NLOC],
        dyy: [0.0; NLOC],
    };
    for (c, &[a, b]) in CORNERS.iter().enumerate() {
        for k in 0..4 {
            let (sx, sy) = (k & 1 == 1, k & 2 == 2);
            let scale = if sx { h[0] } else { 1.0 } * if sy { h[1] } else { 1.0 };
            let f = |ox: usize, oy: usize| pick(&hx[ox], a, sx) * pick(&hy[oy], b, sy) * scale;
            let i = 4 * c + k;
            out.value[i] = f(0, 0);
            out.dx[i] = f(1, 0) / h[0];
            out.dy[i] = f(0, 1) / h[1];
            out.dxx[i] = f(2, 0) / (h[0] * h[0]);
            out.dxy[i] = f(1, 1) / (h[0] * h[1]);
            out.dyy[i] = f(0, 2) / (h[1] * h[1]);
        }
    }
    out
}

/// Tensor-product quadrature rule on the unit square, weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    /// `n x n` Gauss-Legendre rule, `1 <= n <= 4`.
    pub fn gauss(n: usize) -> Result<Self> {
        let (x, w): (Vec<f64>, Vec<f64>) = match n {
            1 => (vec![0.0], vec![2.0]),
            2 => {
                let a = 1.0 / 3f64.sqrt();
                (vec![-a, a], vec![1.0, 1.0])
            }
            3 => {
                let a = (3.0f64 / 5.0).sqrt();
                (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
            }
            4 => {
                let r = (6.0f64 / 5.0).sqrt() * 2.0;
                let a = ((3.0 - r) / 7.0).sqrt();
                let b = ((3.0 + r) / 7.0).sqrt();
                let wa = (18.0 + 30f64.sqrt()) / 36.0;
                let wb = (18.0 - 30f64.sqrt()) / 36.0;
                (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
            }
            _ => {
                return Err(Error::Configuration(format!(
                    "Gauss rule with {n} points per direction is not available"
                )))
            }
        };
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([0.5 * (x[i] + 1.0), 0.5 * (x[j] + 1.0)]);
                weights.push(0.25 * w[i] * w[j]);
            }
        }
        Ok(Self { points, weights })
    }

    /// One point at the element centre.
    pub fn midpoint() -> Self {
        Self {
            points: vec![[0.5, 0.5]],
            weights: vec![1.0],
        }
    }

    /// Uniform `n x n` sub-cell centres.
    pub fn uniform(n: usize) -> Self {
        let w = 1.0 / (n * n) as f64;
        let mut points = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
            }
        }
        Self {
            weights: vec![w; n * n],
            points,
        }
    }
}

/// Shape functions tabulated at the points of a quadrature rule for one
/// element size. Weights are physical (they sum to the element area).
#[derive(Debug, Clone)]
pub struct QuadTabulation {
    element_size: [f64; 2],
    points: Vec<Point>,
    weights: Vec<f64>,
    max_deriv: u8,
    basis: Vec<BasisPoint>,
}

pub fn tabulate(element_size: [f64; 2], rule: &QuadRule, max_deriv: u8) -> Result<QuadTabulation> {
    if rule.points.len() != rule.weights.len() {
        return Err(Error::Configuration(
            "quadrature points and weights differ in length".into(),
        ));
    }
    let area = element_size[0] * element_size[1];
    let mut basis = Vec::with_capacity(rule.points.len());
    for &p in &rule.points {
        hermite_basis_1d(p[0], 0)?;
        hermite_basis_1d(p[1], 0)?;
        basis.push(basis_at(element_size, p));
    }
    Ok(QuadTabulation {
        element_size,
        points: rule.points.clone(),
        weights: rule.weights.iter().map(|w| w * area).collect(),
        max_deriv: max_deriv.min(2),
        basis,
    })
}

impl QuadTabulation {
    pub fn element_size(&self) -> [f64; 2] {
        self.element_size
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_deriv(&self) -> u8 {
        self.max_deriv
    }

    pub fn basis(&self, point: usize) -> &BasisPoint {
        &self.basis[point]
    }

    pub(crate) fn check_mesh(&self, mesh: &MeshGrid) -> Result<()> {
        let h = mesh.element_size();
        let tol = 1e-12 * h[0].max(h[1]);
        if (h[0] - self.element_size[0]).abs() > tol || (h[1] - self.element_size[1]).abs() > tol {
            return Err(Error::Configuration(format!(
                "tabulation built for element size {:?}, mesh uses {:?}",
                self.element_size, h
            )));
        }
        Ok(())
    }
}

/// Value, gradient and Hessian of a scalar field at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldValue {
    pub value: f64,
    pub gradient: [f64; 2],
    /// Symmetric Hessian `[[xx, xy], [xy, yy]]`.
    pub hessian: [[f64; 2]; 2],
}

#[inline]
fn dot(a: &[f64; NLOC], b: &[f64; NLOC]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BasisPoint {
    pub fn evaluate(&self, local: &[f64; NLOC]) -> FieldValue {
        let xy = dot(&self.dxy, local);
        FieldValue {
            value: dot(&self.value, local),
            gradient: [dot(&self.dx, local), dot(&self.dy, local)],
            hessian: [[dot(&self.dxx, local), xy], [xy, dot(&self.dyy, local)]],
        }
    }

    pub fn value_only(&self, local: &[f64; NLOC]) -> f64 {
        dot(&self.value, local)
    }
}

/// One scalar C1 field: an `nn x 4` table of `(value, d/dx1, d/dx2, d2/dx1dx2)`.
#[derive(Debug, Clone)]
pub struct BfsField {
    mesh: Arc<MeshGrid>,
    dofs: Vec<[f64; 4]>,
}

/// Serialisable form of a field snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub nodes: Vec<Point>,
    pub dofs: Vec<[f64; 4]>,
}

impl BfsField {
    pub fn zeros(mesh: Arc<MeshGrid>) -> Self {
        let dofs = vec![[0.0; 4]; mesh.num_nodes()];
        Self { mesh, dofs }
    }

    pub fn from_dofs(mesh: Arc<MeshGrid>, dofs: Vec<[f64; 4]>) -> Result<Self> {
        if dofs.len() != mesh.num_nodes() {
            return Err(Error::Configuration(format!(
                "field has {} rows, mesh has {} nodes",
                dofs.len(),
                mesh.num_nodes()
            )));
        }
        Ok(Self { mesh, dofs })
    }

    pub fn from_flat(mesh: Arc<MeshGrid>, flat: &[f64]) -> Result<Self> {
        if flat.len() != 4 * mesh.num_nodes() {
            return Err(Error::Configuration(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                4 * mesh.num_nodes()
            )));
        }
        let dofs = flat
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Ok(Self { mesh, dofs })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.dofs.iter().flatten().copied().collect()
    }

    pub fn mesh(&self) -> &Arc<MeshGrid> {
        &self.mesh
    }

    pub fn dofs(&self) -> &[[f64; 4]] {
        &self.dofs
    }

    pub fn dofs_mut(&mut self) -> &mut [[f64; 4]] {
        &mut self.dofs
    }

    /// The 16 local DOFs of an element in shape-function order.
    pub fn local_dofs(&self, element: usize) -> [f64; NLOC] {
        gather(&self.mesh.elements()[element], |n| self.dofs[n])
    }

    pub fn evaluate(&self, element: usize, tab: &QuadTabulation, point: usize) -> Result<FieldValue> {
        evaluate_field(self, element, tab, point)
    }

    /// Evaluate at an arbitrary local point of an element.
    pub fn evaluate_local(&self, element: usize, xi: Point) -> Result<FieldValue> {
        hermite_basis_1d(xi[0], 0)?;
        hermite_basis_1d(xi[1], 0)?;
        Ok(basis_at(self.mesh.element_size(), xi).evaluate(&self.local_dofs(element)))
    }

    pub fn snapshot(&self) -> FieldSnapshot {
        FieldSnapshot {
            nodes: self.mesh.nodes().to_vec(),
            dofs: self.dofs.clone(),
        }
    }

    /// CSV table `node,x1,x2,value,d1,d2,d12`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,x1,x2,value,d1,d2,d12\n");
        for (n, (p, d)) in self.mesh.nodes().iter().zip(&self.dofs).enumerate() {
            out.push_str(&format!(
                "{n},{},{},{},{},{},{}\n",
                p[0], p[1], d[0], d[1], d[2], d[3]
            ));
        }
        out
    }
}

pub(crate) fn gather(element: &[usize; 4], row: impl Fn(usize) -> [f64; 4]) -> [f64; NLOC] {
    let mut local = [0.0; NLOC];
    for (c, &n) in element.iter().enumerate() {
        local[4 * c..4 * c + 4].copy_from_slice(&row(n));
    }
    local
}

pub fn evaluate_field(
    field: &BfsField,
    element: usize,
    tab: &QuadTabulation,
    point: usize,
) -> Result<FieldValue> {
    tab.check_mesh(&field.mesh)?;
    if element >= field.mesh.num_elements() {
        return Err(Error::Configuration(format!("element {element} out of range")));
    }
    Ok(tab.basis(point).evaluate(&field.local_dofs(element)))
}

/// Nodal interpolation of `f`, which returns `(f, df/dx1, df/dx2, d2f/dx1dx2)`.
pub fn interpolate_function(
    mesh: Arc<MeshGrid>,
    f: impl Fn(Point) -> [f64; 4],
) -> Result<BfsField> {
    const NAMES: [&str; 4] = ["value", "d/dx1", "d/dx2", "d2/dx1dx2"];
    let mut dofs = Vec::with_capacity(mesh.num_nodes());
    for (n, &p) in mesh.nodes().iter().enumerate() {
        let row = f(p);
        if let Some(k) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Interpolation {
                node: n,
                x: p[0],
                y: p[1],
                what: NAMES[k],
            });
        }
        dofs.push(row);
    }
    Ok(BfsField { mesh, dofs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;
    use proptest::prelude::*;

    fn unit_mesh(n: usize) -> Arc<MeshGrid> {
        Arc::new(build_box_mesh([0.0, 0.0], [1.0, 1.0], n, n).unwrap())
    }

    #[test]
    fn hermite_nodal_values() {
        assert_eq!(hermite_basis_1d(0.0, 0).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        let mid = hermite_basis_1d(0.5, 0).unwrap();
        // oracle: 1 - 3 t^2 + 2 t^3 at t = 1/2
        let oracle = 1.0 - 3.0 * 0.25 + 2.0 * 0.125;
        assert!((mid[0] - oracle).abs() < 1e-15);
        assert!((mid[0] - 0.5).abs() < 1e-15 && (mid[2] - 0.5).abs() < 1e-15);
        for k in 0..=20 {
            let h = hermite_basis_1d(k as f64 / 20.0, 0).unwrap();
            assert!((h[0] + h[2] - 1.0).abs() < 1e-14);
        }
        assert!(matches!(hermite_basis_1d(1.5, 0), Err(Error::Domain(_))));
        assert!(matches!(hermite_basis_1d(-0.1, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn hermite_derivatives_match_differences() {
        let eps = 1e-6;
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let (p, m) = (hermite_unchecked(t + eps, 0), hermite_unchecked(t - eps, 0));
            let d = hermite_unchecked(t, 1);
            let (p1, m1) = (hermite_unchecked(t + eps, 1), hermite_unchecked(t - eps, 1));
            let d2 = hermite_unchecked(t, 2);
            for i in 0..4 {
                assert!(((p[i] - m[i]) / (2.0 * eps) - d[i]).abs() < 1e-8);
                assert!(((p1[i] - m1[i]) / (2.0 * eps) - d2[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gauss_weights_sum_to_area() {
        for n in 1..=4 {
            let tab = tabulate([0.3, 0.7], &QuadRule::gauss(n).unwrap(), 2).unwrap();
            let s: f64 = tab.weights().iter().sum();
            assert!((s - 0.21).abs() < 1e-15);
        }
        let unit = tabulate([1.0, 1.0], &QuadRule::gauss(2).unwrap(), 2).unwrap();
        assert!((unit.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(QuadRule::gauss(5).is_err());
    }

    #[test]
    fn gauss_rule_integrates_cubics() {
        // 2x2 Gauss on [0,1]^2 integrates x^3 y^3 exactly: 1/16
        let rule = QuadRule::gauss(2).unwrap();
        let s: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| w * p[0].powi(3) * p[1].powi(3))
            .sum();
        assert!((s - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn constant_and_linear_fields() {
        let mesh = unit_mesh(3);
        let tab = tabulate(mesh.element_size(), &QuadRule::gauss(2).unwrap(), 2).unwrap();
        let c = BfsField::from_dofs(mesh.clone(), vec![[2.5, 0.0, 0.0, 0.0]; mesh.num_nodes()]).unwrap();
        let lin = interpolate_function(mesh.clone(), |p| [p[0], 1.0, 0.0, 0.0]).unwrap();
        for e in 0..mesh.num_elements() {
            for q in 0..tab.len() {
                let v = c.evaluate(e, &tab, q).unwrap();
                assert!((v.value - 2.5).abs() < 1e-14);
                let l = lin.evaluate(e, &tab, q).unwrap();
                let x = mesh.local_to_global(e, tab.points()[q]);
                assert!((l.value - x[0]).abs() < 1e-14);
                assert!((l.gradient[0] - 1.0).abs() < 1e-12 && l.gradient[1].abs() < 1e-12);
                assert!(l.hessian.iter().flatten().all(|h| h.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn bilinear_and_cubic_reproduction() {
        let mesh = unit_mesh(4);
        let tab = tabulate(mesh.element_size(), &QuadRule::gauss(3).unwrap(), 2).unwrap();
        let f = interpolate_function(mesh.clone(), |p| [p[0] * p[1], p[1], p[0], 1.0]).unwrap();
        for e in 0..mesh.num_elements() {
            for q in 0..tab.len() {
                let v = f.evaluate(e, &tab, q).unwrap();
                let x = mesh.local_to_global(e, tab.points()[q]);
                assert!((v.value - x[0] * x[1]).abs() < 1e-14);
                assert!(v.hessian[0][0].abs() < 1e-10 && v.hessian[1][1].abs() < 1e-10);
                assert!((v.hessian[0][1] - 1.0).abs() < 1e-10);
            }
        }
        let zero = BfsField::zeros(mesh.clone());
        assert_eq!(zero.evaluate(3, &tab, 2).unwrap(), FieldValue::default());

        // x1^3 on a single element, evaluated at the midpoint
        let one = Arc::new(build_box_mesh([0.2, -0.4], [0.7, 0.5], 1, 1).unwrap());
        let cubic = interpolate_function(one.clone(), |p| [p[0].powi(3), 3.0 * p[0] * p[0], 0.0, 0.0]).unwrap();
        let mid = cubic.evaluate_local(0, [0.5, 0.5]).unwrap();
        let oracle = (0.2f64 + 0.35).powi(3);
        assert!((mid.value - oracle).abs() < 1e-12);
    }

    #[test]
    fn tabulation_size_mismatch_is_configuration_error() {
        let mesh = unit_mesh(2);
        let tab = tabulate([0.25, 0.5], &QuadRule::gauss(2).unwrap(), 2).unwrap();
        let f = BfsField::zeros(mesh);
        assert!(matches!(f.evaluate(0, &tab, 0), Err(Error::Configuration(_))));
    }

    #[test]
    fn interpolation_names_bad_node() {
        let mesh = unit_mesh(2);
        let err = interpolate_function(mesh, |p| {
            let r = p[0].hypot(p[1]);
            [r, p[0] / r, p[1] / r, 0.0]
        })
        .unwrap_err();
        match err {
            Error::Interpolation { node, .. } => assert_eq!(node, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_roundtrip() {
        let mesh = unit_mesh(2);
        let flat: Vec<f64> = (0..4 * mesh.num_nodes()).map(|i| i as f64 * 0.5).collect();
        let f = BfsField::from_flat(mesh.clone(), &flat).unwrap();
        assert_eq!(f.to_flat(), flat);
        assert!(BfsField::from_flat(mesh, &flat[1..]).is_err());
    }

    /// Bicubic polynomial with coefficients `c[i][j]` of `x^i y^j`.
    fn poly(c: &[[f64; 4]; 4], p: Point) -> [f64; 7] {
        // value, fx, fy, fxy, fxx, fyy
        let mut out = [0.0; 7];
        for i in 0..4 {
            for j in 0..4 {
                let pw = |b: f64, k: i32| if k < 0 { 0.0 } else { b.powi(k) };
                let (x, y) = (p[0], p[1]);
                let (fi, fj) = (i as f64, j as f64);
                out[0] += c[i][j] * pw(x, i as i32) * pw(y, j as i32);
                out[1] += c[i][j] * fi * pw(x, i as i32 - 1) * pw(y, j as i32);
                out[2] += c[i][j] * fj * pw(x, i as i32) * pw(y, j as i32 - 1);
                out[3] += c[i][j] * fi * fj * pw(x, i as i32 - 1) * pw(y, j as i32 - 1);
                out[4] += c[i][j] * fi * (fi - 1.0) * pw(x, i as i32 - 2) * pw(y, j as i32);
                out[5] += c[i][j] * fj * (fj - 1.0) * pw(x, i as i32) * pw(y, j as i32 - 2);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn patch_test_bicubic(coef in proptest::array::uniform4(proptest::array::uniform4(-1.0f64..1.0)),
                              xi in 0.0f64..=1.0, eta in 0.0f64..=1.0, e in 0usize..6) {
            let mesh = Arc::new(build_box_mesh([-0.5, 0.25], [1.5, 1.0], 3, 2).unwrap());
            let f = interpolate_function(mesh.clone(), |p| {
                let v = poly(&coef, p);
                [v[0], v[1], v[2], v[3]]
            }).unwrap();
            let got = f.evaluate_local(e, [xi, eta]).unwrap();
            let want = poly(&coef, mesh.local_to_global(e, [xi, eta]));
            prop_assert!((got.value - want[0]).abs() < 1e-10);
            prop_assert!((got.gradient[0] - want[1]).abs() < 1e-10);
            prop_assert!((got.gradient[1] - want[2]).abs() < 1e-10);
            prop_assert!((got.hessian[0][1] - want[3]).abs() < 1e-10);
            prop_assert!((got.hessian[0][0] - want[4]).abs() < 1e-10);
            prop_assert!((got.hessian[1][1] - want[5]).abs() < 1e-10);
        }

        #[test]
        fn c1_across_edges(dofs in proptest::collection::vec(-1.0f64..1.0, 4 * 12), t in 0.0f64..=1.0) {
            // 3x2 mesh of [0,1.5]x[0,1]: 12 nodes
            let mesh = Arc::new(build_box_mesh([0.0, 0.0], [1.5, 1.0], 3, 2).unwrap());
            let f = BfsField::from_flat(mesh.clone(), &dofs).unwrap();
            for e in 0..mesh.num_elements() {
                let nb = mesh.neighbors(e);
                if let Some(r) = nb[1] {
                    let a = f.evaluate_local(e, [1.0, t]).unwrap();
                    let b = f.evaluate_local(r, [0.0, t]).unwrap();
                    prop_assert!((a.value - b.value).abs() < 1e-10);
                    prop_assert!((a.gradient[0] - b.gradient[0]).abs() < 1e-10);
                    prop_assert!((a.gradient[1] - b.gradient[1]).abs() < 1e-10);
                }
                if let Some(u) = nb[2] {
                    let a = f.evaluate_local(e, [t, 1.0]).unwrap();
                    let b = f.evaluate_local(u, [t, 0.0]).unwrap();
                    prop_assert!((a.value - b.value).abs() < 1e-10);
                    prop_assert!((a.gradient[0] - b.gradient[0]).abs() < 1e-10);
                    prop_assert!((a.gradient[1] - b.gradient[1]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn evaluation_is_linear(u in proptest::collection::vec(-1.0f64..1.0, 36),
                                v in proptest::collection::vec(-1.0f64..1.0, 36),
                                alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
                                xi in 0.0f64..=1.0, eta in 0.0f64..=1.0) {
            let mesh = unit_mesh(2);
            let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
            let fu = BfsField::from_flat(mesh.clone(), &u).unwrap().evaluate_local(3, [xi, eta]).unwrap();
            let fv = BfsField::from_flat(mesh.clone(), &v).unwrap().evaluate_local(3, [xi, eta]).unwrap();
            let fw = BfsField::from_flat(mesh, &w).unwrap().evaluate_local(3, [xi, eta]).unwrap();
            prop_assert!((fw.value - alpha * fu.value - beta * fv.value).abs() < 1e-13);
            prop_assert!((fw.hessian[0][0] - alpha * fu.hessian[0][0] - beta * fv.hessian[0][0]).abs() < 1e-11);
        }
    }
}
