//! Initial inverse-Hessian operators for the L-BFGS two-loop recursion.
//!
//! The solver works on the free DOFs only, so every operator here acts on
//! vectors indexed like the `free` list handed to the minimiser.

use nalgebra::Matrix2;

use crate::bfs::{tabulate, QuadRule, QuadTabulation, NLOC};
use crate::energy::{elastic_density_grad, EnergyParams};
use crate::error::{Error, Result};
use crate::state::DeformationState;

pub trait Preconditioner {
    /// Overwrite `r` with `H0 r` for a symmetric positive definite `H0`.
    fn apply(&self, r: &mut [f64]);
}

/// `H0 = I`.
pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&self, _: &mut [f64]) {}
}

/// `H0 = diag(d)`.
pub struct Diagonal(pub Vec<f64>);

impl Preconditioner for Diagonal {
    fn apply(&self, r: &mut [f64]) {
        r.iter_mut().zip(&self.0).for_each(|(v, d)| *v *= d);
    }
}

/// Symmetric matrix in skyline (variable band) storage: row `i` keeps the
/// entries of columns `first[i]..=i`.
#[derive(Debug, Clone)]
struct Skyline {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Skyline {
    fn new(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut n = 0;
        for (i, &f) in first.iter().enumerate() {
            start.push(n);
            n += i + 1 - f;
        }
        start.push(n);
        Self { first, start, data: vec![0.0; n] }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.start[i]..self.start[i + 1]]
    }

    /// Entry `(i, j)` with `j <= i` inside the profile.
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        let k = self.start[i] + j - self.first[i];
        self.data[k] += v;
    }

    fn diag(&self, i: usize) -> f64 {
        self.data[self.start[i + 1] - 1]
    }

    /// In-place `L L^T` factorisation; the profile does not grow.
    fn factor(&mut self) -> Result<()> {
        for i in 0..self.first.len() {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let lo = fi.max(fj);
                let (ri, rj) = (self.start[i], self.start[j]);
                let mut s = self.data[ri + j - fi];
                for k in lo..j {
                    s -= self.data[ri + k - fi] * self.data[rj + k - fj];
                }
                if j < i {
                    self.data[ri + j - fi] = s / self.data[self.start[j + 1] - 1];
                } else if s > 0.0 && s.is_finite() {
                    self.data[ri + j - fi] = s.sqrt();
                } else {
                    return Err(Error::Evaluation(format!("stiffness preconditioner not positive definite at row {i}")));
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n {
            let row = self.row(i);
            let fi = self.first[i];
            let s: f64 = row[..row.len() - 1].iter().zip(&b[fi..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) / row[row.len() - 1];
        }
        for i in (0..n).rev() {
            b[i] /= self.diag(i);
            let fi = self.first[i];
            let row = self.row(i);
            let xi = b[i];
            for (bj, l) in b[fi..i].iter_mut().zip(&row[..row.len() - 1]) {
                *bj -= l * xi;
            }
        }
    }
}

/// Tangent `dP/dF` of the elastic density at `F = I`, by central
/// differences of the stress: `c[a][b]` with `a = 2 i + j` indexing `P_ij`
/// and `b` indexing `F_kl`.
fn identity_tangent(params: &EnergyParams) -> Result<[[f64; 4]; 4]> {
    let step = 1e-6;
    let mut c = [[0.0; 4]; 4];
    for b in 0..4 {
        let mut e = Matrix2::zeros();
        e[(b / 2, b % 2)] = step;
        let plus = elastic_density_grad(&(Matrix2::identity() + e), params)?;
        let minus = elastic_density_grad(&(Matrix2::identity() - e), params)?;
        for a in 0..4 {
            c[a][b] = (plus[(a / 2, a % 2)] - minus[(a / 2, a % 2)]) / (2.0 * step);
        }
    }
    // symmetrise away the differencing noise
    for a in 0..4 {
        for b in 0..a {
            let m = 0.5 * (c[a][b] + c[b][a]);
            c[a][b] = m;
            c[b][a] = m;
        }
    }
    Ok(c)
}

type ElementMatrix = [[f64; 2 * NLOC]; 2 * NLOC];

/// Element stiffness matrices of `u -> int C grad u : grad u` with global
/// DOF indices (component-major within the element).
fn for_each_element_stiffness(
    state: &DeformationState,
    tab: &QuadTabulation,
    c: &[[f64; 4]; 4],
    mut visit: impl FnMut(&[usize], &ElementMatrix),
) {
    for e in 0..state.mesh().num_elements() {
        let idx: Vec<usize> = state.local_indices(e).iter().flatten().copied().collect();
        let mut ke = [[0.0; 2 * NLOC]; 2 * NLOC];
        for q in 0..tab.len() {
            let b = tab.basis(q);
            let w = tab.weights()[q];
            let grads = [b.dx, b.dy];
            for ci in 0..2 {
                for cj in 0..2 {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let cc = w * c[2 * ci + a][2 * cj + bb];
                            if cc == 0.0 {
                                continue;
                            }
                            for i in 0..NLOC {
                                let gi = cc * grads[a][i];
                                for j in 0..NLOC {
                                    ke[ci * NLOC + i][cj * NLOC + j] += gi * grads[bb][j];
                                }
                            }
                        }
                    }
                }
            }
        }
        visit(&idx, &ke);
    }
}

/// Inverse of the linearised elastic stiffness at the identity, restricted
/// to the free DOFs and shifted by a small multiple of its diagonal so rigid
/// motions left free by the boundary data stay invertible.
pub struct StiffnessPreconditioner {
    factor: Skyline,
    /// `order[p]` = position in the free list of the `p`-th unknown.
    order: Vec<usize>,
    scratch: std::cell::RefCell<Vec<f64>>,
}

const SHIFT: f64 = 1e-6;

impl StiffnessPreconditioner {
    pub fn new(state: &DeformationState, params: &EnergyParams, free: &[usize]) -> Result<Self> {
        let c = identity_tangent(params)?;
        let mesh = state.mesh();
        let n = state.num_dofs();
        let nodes = mesh.nodes();

        // number nodes line by line across the shorter mesh direction
        let distinct = |axis: usize| {
            let mut v: Vec<i64> = nodes.iter().map(|p| (p[axis] * 1e9).round() as i64).collect();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        let primary = if distinct(0) >= distinct(1) { 0 } else { 1 };
        let mut node_order: Vec<usize> = (0..nodes.len()).collect();
        node_order.sort_by(|&a, &b| {
            let (pa, pb) = (nodes[a], nodes[b]);
            pa[primary].total_cmp(&pb[primary]).then(pa[1 - primary].total_cmp(&pb[1 - primary])).then(a.cmp(&b))
        });
        let mut node_rank = vec![0; nodes.len()];
        for (r, &nd) in node_order.iter().enumerate() {
            node_rank[nd] = r;
        }
        // DOF index -> (node, component, kind) -> sort key
        let nn = nodes.len();
        let key = |dof: usize| {
            let c = dof / (4 * nn);
            let rest = dof % (4 * nn);
            (node_rank[rest / 4], c, rest % 4)
        };
        let mut order: Vec<usize> = (0..free.len()).collect();
        order.sort_by_key(|&p| key(free[p]));
        let mut pos = vec![usize::MAX; n];
        for (p, &q) in order.iter().enumerate() {
            pos[free[q]] = p;
        }

        let mut first: Vec<usize> = (0..free.len()).collect();
        for e in 0..mesh.num_elements() {
            let idx = state.local_indices(e);
            let rows: Vec<usize> = idx.iter().flatten().map(|&d| pos[d]).filter(|&p| p != usize::MAX).collect();
            if let Some(&lo) = rows.iter().min() {
                for &r in &rows {
                    first[r] = first[r].min(lo);
                }
            }
        }
        let mut k = Skyline::new(first);
        // the energy's 2x2 rule leaves hourglass modes that only the quartic
        // regulariser controls; integrate the model exactly instead
        let tab = tabulate(mesh.element_size(), &QuadRule::gauss(4)?, 1)?;
        for_each_element_stiffness(state, &tab, &c, |idx, ke| {
            for (li, &di) in idx.iter().enumerate() {
                let pi = pos[di];
                if pi == usize::MAX {
                    continue;
                }
                for (lj, &dj) in idx.iter().enumerate() {
                    let pj = pos[dj];
                    if pj != usize::MAX && pj <= pi {
                        k.add(pi, pj, ke[li][lj]);
                    }
                }
            }
        });
        let scale = (0..free.len()).map(|i| k.diag(i)).fold(0.0f64, f64::max);
        if !(scale > 0.0) {
            return Err(Error::Evaluation("elastic stiffness vanishes at the identity".into()));
        }
        for i in 0..free.len() {
            let d = k.diag(i);
            k.add(i, i, SHIFT * d.max(1e-12 * scale));
        }
        k.factor()?;
        Ok(Self { factor: k, order, scratch: std::cell::RefCell::new(vec![0.0; free.len()]) })
    }

}

impl Preconditioner for StiffnessPreconditioner {
    fn apply(&self, r: &mut [f64]) {
        let mut b = self.scratch.borrow_mut();
        for (p, &q) in self.order.iter().enumerate() {
            b[p] = r[q];
        }
        self.factor.solve(&mut b);
        for (p, &q) in self.order.iter().enumerate() {
            r[q] = b[p];
        }
    }
}
