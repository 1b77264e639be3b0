//! Deformation state: two BFS fields on a shared mesh plus cached tabulations.

use std::sync::Arc;

use nalgebra::Matrix2;

use crate::bfs::{interpolate_function, tabulate, BfsField, FieldValue, QuadRule, QuadTabulation, NLOC};
use crate::error::{Error, Result};
use crate::mesh::{element_midpoints, MeshGrid, Point};

/// Shared, immutable discretisation data.
#[derive(Debug)]
pub struct Discretization {
    mesh: Arc<MeshGrid>,
    gauss: QuadTabulation,
    midpoint: QuadTabulation,
    midpoints: Vec<Point>,
}

impl Discretization {
    /// 2x2 Gauss points for local terms and element midpoints for the penalty.
    pub fn new(mesh: Arc<MeshGrid>) -> Result<Arc<Self>> {
        Self::with_gauss_order(mesh, 2)
    }

    pub fn with_gauss_order(mesh: Arc<MeshGrid>, order: usize) -> Result<Arc<Self>> {
        let h = mesh.element_size();
        let gauss = tabulate(h, &QuadRule::gauss(order)?, 2)?;
        let midpoint = tabulate(h, &QuadRule::midpoint(), 0)?;
        let midpoints = element_midpoints(&mesh);
        Ok(Arc::new(Self {
            mesh,
            gauss,
            midpoint,
            midpoints,
        }))
    }

    pub fn mesh(&self) -> &Arc<MeshGrid> {
        &self.mesh
    }

    pub fn gauss(&self) -> &QuadTabulation {
        &self.gauss
    }

    pub fn midpoint(&self) -> &QuadTabulation {
        &self.midpoint
    }

    pub fn midpoints(&self) -> &[Point] {
        &self.midpoints
    }
}

/// A deformation `y = (y1, y2)` discretised by two BFS fields.
///
/// The flat DOF vector has `8 nn` entries: all of `y1` (node-major, four DOFs
/// per node) followed by all of `y2`.
#[derive(Debug, Clone)]
pub struct DeformationState {
    disc: Arc<Discretization>,
    y: [BfsField; 2],
}

impl DeformationState {
    pub fn new(disc: Arc<Discretization>, y1: BfsField, y2: BfsField) -> Result<Self> {
        for f in [&y1, &y2] {
            if !Arc::ptr_eq(f.mesh(), disc.mesh()) && f.mesh().num_nodes() != disc.mesh().num_nodes() {
                return Err(Error::Configuration(
                    "both fields must live on the discretisation mesh".into(),
                ));
            }
        }
        Ok(Self { disc, y: [y1, y2] })
    }

    /// Interpolant of the map `x -> x`.
    pub fn identity(disc: Arc<Discretization>) -> Self {
        Self::affine(disc, Matrix2::identity(), [0.0, 0.0])
    }

    /// Interpolant of `x -> A x + b` (exact).
    pub fn affine(disc: Arc<Discretization>, a: Matrix2<f64>, b: [f64; 2]) -> Self {
        let mesh = disc.mesh().clone();
        let comp = |c: usize| {
            let dofs = mesh
                .nodes()
                .iter()
                .map(|p| [a[(c, 0)] * p[0] + a[(c, 1)] * p[1] + b[c], a[(c, 0)], a[(c, 1)], 0.0])
                .collect();
            BfsField::from_dofs(mesh.clone(), dofs).expect("row count matches mesh")
        };
        let y = [comp(0), comp(1)];
        Self { disc, y }
    }

    /// Interpolate a map given with its nodal derivative data
    /// `[(y_c, d1 y_c, d2 y_c, d12 y_c); 2]`.
    pub fn from_map(disc: Arc<Discretization>, f: impl Fn(Point) -> [[f64; 4]; 2]) -> Result<Self> {
        let mesh = disc.mesh().clone();
        let y1 = interpolate_function(mesh.clone(), |p| f(p)[0])?;
        let y2 = interpolate_function(mesh, |p| f(p)[1])?;
        Ok(Self { disc, y: [y1, y2] })
    }

    pub fn from_flat(disc: Arc<Discretization>, flat: &[f64]) -> Result<Self> {
        let n = 4 * disc.mesh().num_nodes();
        if flat.len() != 2 * n {
            return Err(Error::Configuration(format!(
                "deformation vector has {} entries, expected {}",
                flat.len(),
                2 * n
            )));
        }
        let mesh = disc.mesh().clone();
        let y1 = BfsField::from_flat(mesh.clone(), &flat[..n])?;
        let y2 = BfsField::from_flat(mesh, &flat[n..])?;
        Ok(Self { disc, y: [y1, y2] })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.y[0].to_flat();
        v.extend(self.y[1].to_flat());
        v
    }

    /// Copy a flat vector into the DOF tables.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = 4 * self.mesh().num_nodes();
        if flat.len() != 2 * n {
            return Err(Error::Configuration(format!(
                "deformation vector has {} entries, expected {}",
                flat.len(),
                2 * n
            )));
        }
        for c in 0..2 {
            for (row, chunk) in self.y[c]
                .dofs_mut()
                .iter_mut()
                .zip(flat[c * n..(c + 1) * n].chunks_exact(4))
            {
                row.copy_from_slice(chunk);
            }
        }
        Ok(())
    }

    pub fn num_dofs(&self) -> usize {
        8 * self.mesh().num_nodes()
    }

    /// Index of DOF `k` of node `node` of component `c` in the flat vector.
    pub fn dof_index(&self, component: usize, node: usize, k: usize) -> usize {
        component * 4 * self.mesh().num_nodes() + 4 * node + k
    }

    pub fn discretization(&self) -> &Arc<Discretization> {
        &self.disc
    }

    pub fn mesh(&self) -> &Arc<MeshGrid> {
        self.disc.mesh()
    }

    pub fn component(&self, c: usize) -> &BfsField {
        &self.y[c]
    }

    pub fn components(&self) -> &[BfsField; 2] {
        &self.y
    }

    pub(crate) fn local_dofs(&self, element: usize) -> [[f64; NLOC]; 2] {
        [self.y[0].local_dofs(element), self.y[1].local_dofs(element)]
    }

    /// Global flat indices of the local DOFs of an element.
    pub(crate) fn local_indices(&self, element: usize) -> [[usize; NLOC]; 2] {
        let nn4 = 4 * self.mesh().num_nodes();
        let el = self.mesh().elements()[element];
        let mut idx = [[0; NLOC]; 2];
        for c in 0..2 {
            for (corner, &n) in el.iter().enumerate() {
                for k in 0..4 {
                    idx[c][4 * corner + k] = c * nn4 + 4 * n + k;
                }
            }
        }
        idx
    }

    /// Both components at Gauss point `q` of `element`.
    pub fn eval_gauss(&self, element: usize, q: usize) -> [FieldValue; 2] {
        let local = self.local_dofs(element);
        let b = self.disc.gauss().basis(q);
        [b.evaluate(&local[0]), b.evaluate(&local[1])]
    }

    /// Deformation gradient at Gauss point `q` of `element`.
    pub fn gradient_at_gauss(&self, element: usize, q: usize) -> Matrix2<f64> {
        let [a, b] = self.eval_gauss(element, q);
        Matrix2::new(a.gradient[0], a.gradient[1], b.gradient[0], b.gradient[1])
    }

    /// Deformed element midpoints `y(m_i)`.
    pub fn deformed_midpoints(&self) -> Vec<Point> {
        let b = self.disc.midpoint().basis(0);
        (0..self.mesh().num_elements())
            .map(|e| {
                let l = self.local_dofs(e);
                [b.value_only(&l[0]), b.value_only(&l[1])]
            })
            .collect()
    }

    /// Evaluate `y` at a local point of an element.
    pub fn evaluate_local(&self, element: usize, xi: Point) -> Result<[FieldValue; 2]> {
        Ok([
            self.y[0].evaluate_local(element, xi)?,
            self.y[1].evaluate_local(element, xi)?,
        ])
    }

    /// The state of `Q y + c`.
    pub fn transformed(&self, q: Matrix2<f64>, c: [f64; 2]) -> Self {
        let mut out = self.clone();
        let nn = self.mesh().num_nodes();
        for n in 0..nn {
            let a = self.y[0].dofs()[n];
            let b = self.y[1].dofs()[n];
            for k in 0..4 {
                let shift = if k == 0 { c } else { [0.0, 0.0] };
                out.y[0].dofs_mut()[n][k] = q[(0, 0)] * a[k] + q[(0, 1)] * b[k] + shift[0];
                out.y[1].dofs_mut()[n][k] = q[(1, 0)] * a[k] + q[(1, 1)] * b[k] + shift[1];
            }
        }
        out
    }
}

/// Rotation matrix by `angle` radians.
pub fn rotation(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// The map `y(r, t) = -r (cos(a t), sin(a t))` with `r = |x|` and
/// `t = atan2(-x2, -x1)`, together with the nodal derivative data needed for
/// BFS interpolation.
pub fn pincers_map(a: f64) -> impl Fn(Point) -> [[f64; 4]; 2] {
    move |x: Point| {
        let r = x[0].hypot(x[1]);
        let t = (-x[1]).atan2(-x[0]);
        // derivatives of r and t
        let (r1, r2) = (x[0] / r, x[1] / r);
        let (t1, t2) = (-x[1] / (r * r), x[0] / (r * r));
        let r12 = -x[0] * x[1] / (r * r * r);
        let r4 = r.powi(4);
        let t12 = (x[1] * x[1] - x[0] * x[0]) / r4;
        let (s, c) = (a * t).sin_cos();
        // y1 = -r cos(a t), y2 = -r sin(a t)
        let y1 = -r * c;
        let y2 = -r * s;
        let y1_1 = -r1 * c + r * a * s * t1;
        let y1_2 = -r2 * c + r * a * s * t2;
        let y2_1 = -r1 * s - r * a * c * t1;
        let y2_2 = -r2 * s - r * a * c * t2;
        // mixed derivatives by the product rule
        let y1_12 = -r12 * c + r1 * a * s * t2 + r2 * a * s * t1 + r * a * a * c * t1 * t2 + r * a * s * t12;
        let y2_12 = -r12 * s - r1 * a * c * t2 - r2 * a * c * t1 + r * a * a * s * t1 * t2 - r * a * c * t12;
        [[y1, y1_1, y1_2, y1_12], [y2, y2_1, y2_2, y2_12]]
    }
}
