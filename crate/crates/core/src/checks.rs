//! Self-check suite behind `cnfem check`: gradient oracles, evaluator
//! equivalence and invariances on small reference states.

use std::sync::Arc;

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{elastic_density, energy_elastic, energy_regularizer, EnergyParams};
use crate::error::Result;
use crate::mesh::{BoxSpec, DomainSpec, PincersSpec};
use crate::penalty::{energy_cn_accelerated, energy_cn_full, PenaltyParams};
use crate::solver::fd_gradient_check;
use crate::state::{pincers_map, rotation, Discretization, DeformationState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn disc(spec: DomainSpec) -> Result<Arc<Discretization>> {
    Discretization::new(Arc::new(spec.build()?))
}

/// Identity on the unit-aspect box `[0,2] x [0,1]`.
pub fn box_identity(nx: usize, ny: usize) -> Result<DeformationState> {
    Ok(DeformationState::identity(disc(DomainSpec::Box(BoxSpec::new([0.0, 0.0], [2.0, 1.0], nx, ny)))?))
}

/// Identity on the two-box domain.
pub fn two_box_identity(nx: usize, ny_upper: usize, ny_lower: usize) -> Result<DeformationState> {
    Ok(DeformationState::identity(disc(DomainSpec::model_one(nx, ny_upper, ny_lower))?))
}

/// Interpolated pincers map with overlapping arms.
pub fn pincers_state(nx: usize, ny: usize, a: f64) -> Result<DeformationState> {
    let d = disc(DomainSpec::Pincers(PincersSpec { nx, ny, ..PincersSpec::default() }))?;
    DeformationState::from_map(d, pincers_map(a))
}

/// Two-box state with the upper box pushed `depth` into the lower one.
pub fn two_box_overlap(nx: usize, ny_upper: usize, ny_lower: usize, depth: f64) -> Result<DeformationState> {
    let s = two_box_identity(nx, ny_upper, ny_lower)?;
    let bodies = s.mesh().node_body_ids();
    let mut flat = s.to_flat();
    for (n, &b) in bodies.iter().enumerate() {
        if b == 0 {
            flat[s.dof_index(1, n, 0)] -= depth;
        }
    }
    DeformationState::from_flat(s.discretization().clone(), &flat)
}

/// Add seeded uniform noise of the given amplitude to every DOF.
pub fn perturbed(state: &DeformationState, amplitude: f64, seed: u64) -> Result<DeformationState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = state.to_flat().into_iter().map(|v| v + rng.gen_range(-amplitude..amplitude)).collect();
    DeformationState::from_flat(state.discretization().clone(), &flat)
}

/// Max relative FD error of the local terms (elastic + regulariser).
pub fn local_gradient_error(state: &DeformationState, params: &EnergyParams, seed: u64) -> Result<f64> {
    let mut work = state.clone();
    let free: Vec<usize> = (0..state.num_dofs()).collect();
    fd_gradient_check(
        |x| {
            work.set_flat(x)?;
            let (a, mut g) = energy_elastic(&work, params)?;
            let (b, g2) = energy_regularizer(&work, params)?;
            g.iter_mut().zip(g2).for_each(|(u, v)| *u += v);
            Ok((a + b, g))
        },
        &state.to_flat(),
        &free,
        3e-4,
        200,
        seed,
    )
}

/// Max relative FD error of the penalty.
pub fn penalty_gradient_error(state: &DeformationState, params: &PenaltyParams, seed: u64) -> Result<f64> {
    let mut work = state.clone();
    let free: Vec<usize> = (0..state.num_dofs()).collect();
    fd_gradient_check(
        |x| {
            work.set_flat(x)?;
            let (v, g, _) = energy_cn_full(&work, params)?;
            Ok((v, g))
        },
        &state.to_flat(),
        &free,
        1e-4,
        200,
        seed,
    )
}

/// Relative discrepancy between the two penalty evaluators (value and
/// gradient max norm).
pub fn evaluator_discrepancy(state: &DeformationState, params: &PenaltyParams) -> Result<f64> {
    let (v1, g1, _) = energy_cn_full(state, params)?;
    let (v2, g2, _) = energy_cn_accelerated(state, params)?;
    let gscale = g1.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gap = g1.iter().zip(&g2).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let value = if v1 == 0.0 { v2.abs() } else { (v1 - v2).abs() / v1.abs() };
    let grad = if gscale == 0.0 { gap } else { gap / gscale };
    Ok(value.max(grad))
}

fn result(name: &str, value: f64, limit: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: value < limit,
        detail: format!("{value:.3e} (limit {limit:.0e})"),
    }
}

/// Run the suite. Each check reports its measured value and limit.
pub fn run_checks() -> Result<Vec<CheckResult>> {
    let params = EnergyParams::default();
    let penalty = PenaltyParams { eps2: 0.5, ..PenaltyParams::default() };
    let boxed = box_identity(8, 4)?;
    let two_box = two_box_identity(8, 4, 8)?;
    let pincers = pincers_state(25, 17, 1.1)?;
    let mut out = Vec::new();

    for (name, state) in [("box", &boxed), ("two-box", &two_box), ("pincers", &pincers)] {
        let p = perturbed(state, 0.02, 1)?;
        out.push(result(&format!("local gradient, {name}"), local_gradient_error(&p, &params, 2)?, 1e-5));
    }
    let squeezed = DeformationState::affine(boxed.discretization().clone(), Matrix2::new(1.0, 0.0, 0.0, 0.1), [0.0, 0.0]);
    let overlap = two_box_overlap(8, 4, 8, 0.3)?;
    for (name, state) in [("box", &squeezed), ("two-box", &overlap), ("pincers", &pincers)] {
        let p = perturbed(state, 0.01, 3)?;
        out.push(result(&format!("penalty gradient, {name}"), penalty_gradient_error(&p, &penalty, 4)?, 1e-4));
    }

    let stretched = DeformationState::affine(boxed.discretization().clone(), Matrix2::new(2.0, 0.3, 0.0, 1.5), [0.0, 0.0]);
    for (name, state) in [("identity", &boxed), ("stretched", &stretched), ("pincers overlap", &pincers), ("two-box overlap", &overlap)] {
        out.push(result(&format!("evaluator equivalence, {name}"), evaluator_discrepancy(state, &penalty)?, 1e-12));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let f = Matrix2::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        let q = rotation(rng.gen_range(0.0..std::f64::consts::TAU));
        let w = elastic_density(&f, &params)?;
        let scale = w.abs().max(1.0);
        worst = worst
            .max((elastic_density(&(q * f), &params)? - w).abs() / scale)
            .max((elastic_density(&(f * q), &params)? - w).abs() / scale);
    }
    out.push(result("frame indifference and isotropy of W", worst, 1e-12));

    let (e0, _, _) = energy_cn_full(&pincers, &penalty)?;
    let moved = pincers.transformed(rotation(0.7), [1.5, -0.4]);
    let (e1, _, _) = energy_cn_full(&moved, &penalty)?;
    out.push(result("Euclidean invariance of E_cn", (e1 - e0).abs() / e0.abs().max(f64::MIN_POSITIVE), 1e-12));
    Ok(out)
}
