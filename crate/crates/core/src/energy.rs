//! Local energy terms and the total energy.
//!
//! The elastic density for `d = 2`, `J = det F` is
//!
//! ```text
//! W(F) = |F|^p - d^(p/2) - (p/q) d^(p/2-1) + (p/q) d^(p/2-1) * Gamma(J)
//! Gamma(J) = J^-q                                   if J >= eps1
//!          = -q eps1^(-q-1) (J - eps1) + eps1^-q    otherwise
//! ```
//!
//! The regulariser is `sigma |D^2 y|^s` with the Frobenius norm of the third
//! order tensor, and the body-force term is linear in `y`. All local terms use
//! the Gauss rule of the discretisation.

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfs::{BasisPoint, NLOC};
use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::penalty::{energy_cn_accelerated, energy_cn_full, PenaltyEvaluation, PenaltyParams};
use crate::state::DeformationState;

const D: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    /// Growth exponent of the elastic density.
    pub p: f64,
    /// Singularity exponent in the determinant.
    pub q: f64,
    /// Exponent of the second-gradient term.
    pub s: f64,
    /// Determinant truncation.
    pub eps1: f64,
    pub sigma: f64,
    /// Weight of the penalty.
    pub mu: f64,
    pub penalty: PenaltyParams,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            p: 4.0,
            q: 6.0,
            s: 4.0,
            eps1: 0.01,
            sigma: 1.0,
            mu: 1.0,
            penalty: PenaltyParams::default(),
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.p > D) {
            return bad(format!("p = {} must exceed the dimension 2", self.p));
        }
        if !(self.s > D) {
            return bad(format!("s = {} must exceed the dimension 2", self.s));
        }
        let q_min = self.s * D / (self.s - D);
        if !(self.q > q_min) {
            return bad(format!("q = {} must exceed s d / (s - d) = {q_min}", self.q));
        }
        if !(self.eps1 > 0.0 && self.eps1 < 1.0) {
            return bad(format!("eps1 = {} must lie in (0, 1)", self.eps1));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma = {} must be nonnegative", self.sigma));
        }
        if !(self.mu >= 0.0) {
            return bad(format!("mu = {} must be nonnegative", self.mu));
        }
        self.penalty.validate()
    }

    fn coefficient(&self) -> f64 {
        self.p / self.q * D.powf(self.p / 2.0 - 1.0)
    }

    /// Truncated `J^-q` and its derivative.
    fn gamma(&self, j: f64) -> (f64, f64) {
        if j >= self.eps1 {
            (j.powf(-self.q), -self.q * j.powf(-self.q - 1.0))
        } else {
            let slope = -self.q * self.eps1.powf(-self.q - 1.0);
            (slope * (j - self.eps1) + self.eps1.powf(-self.q), slope)
        }
    }
}

fn check_finite(f: &Matrix2<f64>) -> Result<()> {
    if f.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation(format!("non-finite deformation gradient {f:?}")))
    }
}

#[inline]
fn cofactor(f: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(f[(1, 1)], -f[(1, 0)], -f[(0, 1)], f[(0, 0)])
}

fn density_and_grad(f: &Matrix2<f64>, params: &EnergyParams) -> (f64, Matrix2<f64>) {
    let n2 = f.norm_squared();
    let j = f.determinant();
    let (g, dg) = params.gamma(j);
    let c = params.coefficient();
    let w = n2.powf(params.p / 2.0) - D.powf(params.p / 2.0) - c + c * g;
    let dn = if n2 > 0.0 { params.p * n2.powf(params.p / 2.0 - 1.0) } else { 0.0 };
    (w, f * dn + cofactor(f) * (c * dg))
}

/// Elastic energy density.
pub fn elastic_density(f: &Matrix2<f64>, params: &EnergyParams) -> Result<f64> {
    check_finite(f)?;
    Ok(density_and_grad(f, params).0)
}

/// First Piola stress `dW/dF`.
pub fn elastic_density_grad(f: &Matrix2<f64>, params: &EnergyParams) -> Result<Matrix2<f64>> {
    check_finite(f)?;
    Ok(density_and_grad(f, params).1)
}

/// Sum element contributions in element order and scatter local gradients.
fn assemble<F>(state: &DeformationState, local: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &[[f64; NLOC]; 2]) -> Result<(f64, [[f64; NLOC]; 2])> + Sync,
{
    let ne = state.mesh().num_elements();
    let parts: Vec<Result<(f64, [[f64; NLOC]; 2])>> = (0..ne)
        .into_par_iter()
        .map(|e| local(e, &state.local_dofs(e)))
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; state.num_dofs()];
    for (e, part) in parts.into_iter().enumerate() {
        let (v, g) = part?;
        total += v;
        let idx = state.local_indices(e);
        for c in 0..2 {
            for k in 0..NLOC {
                grad[idx[c][k]] += g[c][k];
            }
        }
    }
    Ok((total, grad))
}

fn grad_matrix(b: &BasisPoint, local: &[[f64; NLOC]; 2]) -> Matrix2<f64> {
    let a = b.evaluate(&local[0]).gradient;
    let c = b.evaluate(&local[1]).gradient;
    Matrix2::new(a[0], a[1], c[0], c[1])
}

/// `int W(grad y) dx` and its gradient with respect to all DOFs.
pub fn energy_elastic(state: &DeformationState, params: &EnergyParams) -> Result<(f64, Vec<f64>)> {
    let tab = state.discretization().gauss();
    assemble(state, |_, local| {
        let mut v = 0.0;
        let mut g = [[0.0; NLOC]; 2];
        for q in 0..tab.len() {
            let b = tab.basis(q);
            let w = tab.weights()[q];
            let f = grad_matrix(b, local);
            check_finite(&f)?;
            let (dens, piola) = density_and_grad(&f, params);
            v += w * dens;
            for c in 0..2 {
                let (p0, p1) = (w * piola[(c, 0)], w * piola[(c, 1)]);
                for k in 0..NLOC {
                    g[c][k] += p0 * b.dx[k] + p1 * b.dy[k];
                }
            }
        }
        Ok((v, g))
    })
}

/// `sigma int |D^2 y|^s dx` and its gradient.
pub fn energy_regularizer(state: &DeformationState, params: &EnergyParams) -> Result<(f64, Vec<f64>)> {
    let tab = state.discretization().gauss();
    let (sigma, s) = (params.sigma, params.s);
    assemble(state, |_, local| {
        let mut v = 0.0;
        let mut g = [[0.0; NLOC]; 2];
        if sigma == 0.0 {
            return Ok((v, g));
        }
        for q in 0..tab.len() {
            let b = tab.basis(q);
            let w = tab.weights()[q];
            let h = [b.evaluate(&local[0]).hessian, b.evaluate(&local[1]).hessian];
            let n2: f64 = h
                .iter()
                .map(|m| m[0][0] * m[0][0] + 2.0 * m[0][1] * m[0][1] + m[1][1] * m[1][1])
                .sum();
            v += w * sigma * n2.powf(s / 2.0);
            // d/dH of (n2)^(s/2) is s (n2)^(s/2-1) H; zero at H = 0 for s > 2
            let factor = if n2 > 0.0 { w * sigma * s * n2.powf(s / 2.0 - 1.0) } else { 0.0 };
            if factor == 0.0 {
                continue;
            }
            for c in 0..2 {
                let (hxx, hxy, hyy) = (h[c][0][0], h[c][0][1], h[c][1][1]);
                for k in 0..NLOC {
                    g[c][k] += factor * (hxx * b.dxx[k] + 2.0 * hxy * b.dxy[k] + hyy * b.dyy[k]);
                }
            }
        }
        Ok((v, g))
    })
}

/// Sign convention of a body-force field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceConvention {
    /// The field enters the energy as `+ int g . y dx`.
    #[default]
    Energy,
    /// The field is a physical load: the energy gains `- int g . y dx`.
    Work,
}

/// Body-force density.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BodyForce {
    #[default]
    None,
    Uniform {
        g: [f64; 2],
        #[serde(default)]
        convention: ForceConvention,
    },
    /// `nu (0, -H(x1) sign(x2))`; `H(0) = 0` and `sign(0) = 0`.
    Pincers {
        nu: f64,
        #[serde(default)]
        convention: ForceConvention,
    },
}

impl BodyForce {
    /// The density `g_body` entering `int g_body . y dx`.
    pub fn density(&self, x: Point) -> [f64; 2] {
        let (g, conv) = match *self {
            BodyForce::None => return [0.0, 0.0],
            BodyForce::Uniform { g, convention } => (g, convention),
            BodyForce::Pincers { nu, convention } => {
                let heaviside = if x[0] > 0.0 { 1.0 } else { 0.0 };
                let sign = if x[1] > 0.0 {
                    1.0
                } else if x[1] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                ([0.0, -nu * heaviside * sign], convention)
            }
        };
        match conv {
            ForceConvention::Energy => g,
            ForceConvention::Work => [-g[0], -g[1]],
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BodyForce::None)
    }
}

/// `int g_body . y dx` for an arbitrary density and its (state independent)
/// gradient.
pub fn energy_body_force(state: &DeformationState, force: impl Fn(Point) -> [f64; 2] + Sync) -> Result<(f64, Vec<f64>)> {
    let tab = state.discretization().gauss();
    let mesh = state.mesh();
    assemble(state, |e, local| {
        let mut v = 0.0;
        let mut g = [[0.0; NLOC]; 2];
        for q in 0..tab.len() {
            let b = tab.basis(q);
            let w = tab.weights()[q];
            let x = mesh.local_to_global(e, tab.points()[q]);
            let f = force(x);
            if !(f[0].is_finite() && f[1].is_finite()) {
                return Err(Error::Evaluation(format!(
                    "non-finite body force {f:?} at ({}, {})",
                    x[0], x[1]
                )));
            }
            for c in 0..2 {
                v += w * f[c] * b.value_only(&local[c]);
                for k in 0..NLOC {
                    g[c][k] += w * f[c] * b.value[k];
                }
            }
        }
        Ok((v, g))
    })
}

/// Which penalty evaluator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    #[default]
    Full,
    Accelerated,
    /// Run both and fail on a relative discrepancy above `1e-12`.
    Both,
}

impl std::str::FromStr for Evaluator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Evaluator::Full),
            "accelerated" => Ok(Evaluator::Accelerated),
            "both" => Ok(Evaluator::Both),
            other => Err(Error::Configuration(format!("unknown evaluator '{other}'"))),
        }
    }
}

/// Relative tolerance for the full/accelerated agreement check.
pub const EVALUATOR_TOLERANCE: f64 = 1e-12;

/// Penalty value, gradient and evaluation record with the selected evaluator.
pub fn energy_cn(
    state: &DeformationState,
    params: &PenaltyParams,
    evaluator: Evaluator,
) -> Result<(f64, Vec<f64>, PenaltyEvaluation)> {
    match evaluator {
        Evaluator::Full => energy_cn_full(state, params),
        Evaluator::Accelerated => energy_cn_accelerated(state, params),
        Evaluator::Both => {
            let full = energy_cn_full(state, params)?;
            let fast = energy_cn_accelerated(state, params)?;
            let scale = full.0.abs().max(f64::MIN_POSITIVE);
            let gscale = full.1.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let gap = full
                .1
                .iter()
                .zip(&fast.1)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if (full.0 - fast.0).abs() > EVALUATOR_TOLERANCE * scale || gap > EVALUATOR_TOLERANCE * gscale {
                return Err(Error::Evaluation(format!(
                    "penalty evaluators disagree: full {} vs accelerated {} (gradient gap {gap:e})",
                    full.0, fast.0
                )));
            }
            Ok(full)
        }
    }
}

/// Per-term energies at one state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub elastic: f64,
    /// Unscaled penalty `E_cn`.
    pub penalty: f64,
    /// `mu * E_cn`
    pub penalty_scaled: f64,
    pub regularizer: f64,
    pub body: f64,
    pub total: f64,
}

impl EnergyTerms {
    pub const CSV_HEADER: &'static str = "E_el,E_cn_scaled,E_reg,E_body,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.elastic, self.penalty_scaled, self.regularizer, self.body, self.total
        )
    }
}

/// Total energy `E_el + mu E_cn + E_reg + E_body` with its gradient.
pub fn total_energy(
    state: &DeformationState,
    params: &EnergyParams,
    force: &BodyForce,
    evaluator: Evaluator,
) -> Result<(EnergyTerms, Vec<f64>)> {
    let (el, mut grad) = energy_elastic(state, params)?;
    let (reg, g_reg) = energy_regularizer(state, params)?;
    add(&mut grad, &g_reg, 1.0);
    let mut terms = EnergyTerms {
        elastic: el,
        regularizer: reg,
        ..EnergyTerms::default()
    };
    if params.mu > 0.0 {
        let (cn, g_cn, _) = energy_cn(state, &params.penalty, evaluator)?;
        terms.penalty = cn;
        terms.penalty_scaled = params.mu * cn;
        add(&mut grad, &g_cn, params.mu);
    }
    if !force.is_zero() {
        let (body, g_body) = energy_body_force(state, |x| force.density(x))?;
        terms.body = body;
        add(&mut grad, &g_body, 1.0);
    }
    terms.total = terms.elastic + terms.penalty_scaled + terms.regularizer + terms.body;
    if !terms.total.is_finite() {
        return Err(Error::Evaluation(format!("non-finite total energy {terms:?}")));
    }
    Ok((terms, grad))
}

fn add(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += scale * b;
    }
}
