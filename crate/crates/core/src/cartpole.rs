//! Cart-pole between two soft walls: regulation through a cart force and
//! wall contact forces, the standard control-through-contact benchmark.
//!
//! States: cart position, pole angle, and their rates. Inputs: the cart
//! force, one contact force per wall, and four binary contact indicators
//! (penetration and force-sign per wall). Contact forces follow a soft
//! spring-damper law, encoded with big-M rows whose bounds come from
//! interval arithmetic over the state box.

use crate::model::{MldModel, StageData};
use crate::polyhedron::Polyhedron;
use crate::sim::Controller;
use crate::terminal::{
    compute_link_matrices, max_positive_invariant, solve_dare, symmetric_sqrt, TerminalData,
};
use crate::Result;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub gravity: f64,
    pub pole_length: f64,
    /// Explicit-Euler discretization step.
    pub time_step: f64,
    /// Half distance between the walls.
    pub wall_distance: f64,
    /// Contact stiffness.
    pub stiffness: f64,
    /// Contact damping.
    pub damping: f64,
    pub force_bound: f64,
    /// Symmetric state box.
    pub state_bound: [f64; 4],
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 1.0,
            pole_mass: 1.0,
            gravity: 10.0,
            pole_length: 1.0,
            time_step: 0.05,
            wall_distance: 0.5,
            stiffness: 100.0,
            damping: 10.0,
            force_bound: 1.0,
            state_bound: [0.5, std::f64::consts::PI / 10.0, 1.0, 1.0],
        }
    }
}

struct Contact {
    /// State gradient of the penetration.
    dx: DVector<f64>,
    /// State gradient of the penetration rate.
    dv: DVector<f64>,
    /// Input column of the contact force.
    force_col: usize,
    /// Input column of the penetration indicator.
    pen_col: usize,
    /// Input column of the force-sign indicator.
    frc_col: usize,
}

/// Continuous-time linearized matrices and the contact descriptions.
fn physics(p: &CartPoleParams) -> (DMatrix<f64>, DMatrix<f64>, [Contact; 2]) {
    let (mc, mp, g, l) = (p.cart_mass, p.pole_mass, p.gravity, p.pole_length);
    let a_c = DMatrix::from_row_slice(
        4,
        4,
        &[
            0., 0., 1., 0., //
            0., 0., 0., 1., //
            0., mp * g / mc, 0., 0., //
            0., (mc + mp) * g / (mc * l), 0., 0.,
        ],
    );
    let b_c = DMatrix::from_row_slice(
        4,
        3,
        &[
            0., 0., 0., //
            0., 0., 0., //
            1. / mc, 0., 0., //
            1. / (mc * l), -1. / (mp * l), 1. / (mp * l),
        ],
    );
    let left = Contact {
        dx: DVector::from_row_slice(&[-1., l, 0., 0.]),
        dv: DVector::from_row_slice(&[0., 0., -1., l]),
        force_col: 1,
        pen_col: 3,
        frc_col: 5,
    };
    let right = Contact {
        dx: DVector::from_row_slice(&[1., -l, 0., 0.]),
        dv: DVector::from_row_slice(&[0., 0., 1., -l]),
        force_col: 2,
        pen_col: 4,
        frc_col: 6,
    };
    (a_c, b_c, [left, right])
}

/// Interval bound of a linear form over the symmetric state box.
fn box_max(grad: &DVector<f64>, bound: &[f64; 4]) -> f64 {
    grad.iter()
        .zip(bound.iter())
        .map(|(g, b)| g.abs() * b)
        .sum()
}

/// Builds the MLD system of the cart-pole with walls: 4 states, 3 continuous
/// inputs, 4 binary indicators, and the big-M contact rows.
pub fn build_cartpole_mld(p: &CartPoleParams) -> Result<MldModel> {
    let (a_c, b_c, contacts) = physics(p);
    let h = p.time_step;
    let a = DMatrix::identity(4, 4) + a_c * h;
    let mut b = DMatrix::zeros(4, 7);
    b.view_mut((0, 0), (4, 3)).copy_from(&(b_c * h));

    let d = p.wall_distance;
    let (kappa, damp) = (p.stiffness, p.damping);
    let n = 4 + 7;
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut push = |xv: &[(usize, f64)], uv: &[(usize, f64)], rhs: f64| {
        let mut row = DVector::zeros(n);
        for &(i, v) in xv {
            row[i] += v;
        }
        for &(i, v) in uv {
            row[4 + i] += v;
        }
        rows.push((row, rhs));
    };

    // Force and state boxes.
    push(&[], &[(0, 1.0)], p.force_bound);
    push(&[], &[(0, -1.0)], p.force_bound);
    for k in 0..4 {
        push(&[(k, 1.0)], &[], p.state_bound[k]);
        push(&[(k, -1.0)], &[], p.state_bound[k]);
    }

    for c in &contacts {
        let pen_hi = box_max(&c.dx, &p.state_bound) - d;
        let pen_lo = -(box_max(&c.dx, &p.state_bound)) - d;
        let rate_hi = box_max(&c.dv, &p.state_bound);
        let force_hi = kappa * pen_hi + damp * rate_hi;
        let force_lo = kappa * pen_lo - damp * rate_hi;
        let xg = |s: f64| -> Vec<(usize, f64)> {
            c.dx.iter().enumerate().map(|(i, v)| (i, v * s)).collect()
        };
        let phig = |s: f64| -> Vec<(usize, f64)> {
            (0..4)
                .map(|i| (i, s * (kappa * c.dx[i] + damp * c.dv[i])))
                .collect()
        };
        // penetration indicator rows
        push(&xg(1.0), &[(c.pen_col, -pen_hi)], d);
        push(&xg(-1.0), &[(c.pen_col, -pen_lo)], -pen_lo - d);
        // force-sign indicator rows
        push(&phig(1.0), &[(c.frc_col, -force_hi)], kappa * d);
        push(&phig(-1.0), &[(c.frc_col, -force_lo)], -force_lo - kappa * d);
        // constitutive rows for the contact force
        push(&[], &[(c.force_col, -1.0)], 0.0);
        push(&[], &[(c.force_col, 1.0), (c.pen_col, -force_hi)], 0.0);
        push(&[], &[(c.force_col, 1.0), (c.frc_col, -force_hi)], 0.0);
        push(
            &phig(-1.0),
            &[(c.force_col, 1.0), (c.frc_col, -force_lo)],
            -force_lo - kappa * d,
        );
        push(
            &phig(1.0),
            &[(c.force_col, -1.0), (c.pen_col, damp * rate_hi)],
            damp * rate_hi + kappa * d,
        );
    }

    let q = rows.len();
    let mut fg = DMatrix::zeros(q, n);
    let mut hvec = DVector::zeros(q);
    for (i, (row, rhs)) in rows.iter().enumerate() {
        fg.row_mut(i).copy_from(&row.transpose());
        hvec[i] = *rhs;
    }
    let f = fg.columns(0, 4).into_owned();
    let g = fg.columns(4, 7).into_owned();
    let mut v = DMatrix::zeros(4, 7);
    for (j, col) in [3, 4, 5, 6].into_iter().enumerate() {
        v[(j, col)] = 1.0;
    }
    MldModel::new(a, b, f, g, hvec, v, 3)
}

/// Offline synthesis of the benchmark controller: identity state weights, a
/// force-only input weight, the Riccati terminal penalty of the contact-free
/// dynamics, and the maximal positive-invariant terminal set of the
/// resulting closed loop under the state, input and no-penetration
/// constraints.
pub fn build_controller(
    p: &CartPoleParams,
    horizon: usize,
) -> Result<(Controller, TerminalData)> {
    let model = build_cartpole_mld(p)?;
    let (_, b_c, contacts) = physics(p);
    let a_d = model.a.clone();
    let b1 = (b_c * p.time_step).column(0).into_owned();
    let b1 = DMatrix::from_column_slice(4, 1, b1.as_slice());
    let q_lqr = DMatrix::identity(4, 4);
    let r_lqr = DMatrix::identity(1, 1);
    let (penalty, gain) = solve_dare(&a_d, &b1, &q_lqr, &r_lqr)?;

    // Terminal-region constraints: state box, gain-mapped force bound, and
    // no penetration on either wall.
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for k in 0..4 {
        let mut r = DVector::zeros(4);
        r[k] = 1.0;
        rows.push((r.clone(), p.state_bound[k]));
        rows.push((-r, p.state_bound[k]));
    }
    let k_row = gain.row(0).transpose();
    rows.push((-k_row.clone(), p.force_bound));
    rows.push((k_row, p.force_bound));
    for c in &contacts {
        rows.push((c.dx.clone(), p.wall_distance));
    }
    let mut cmat = DMatrix::zeros(rows.len(), 4);
    let mut dvec = DVector::zeros(rows.len());
    for (i, (r, o)) in rows.iter().enumerate() {
        cmat.row_mut(i).copy_from(&r.transpose());
        dvec[i] = *o;
    }
    let constraints = Polyhedron::new(cmat, dvec)?;
    let a_cl = &a_d - &b1 * &gain;
    let invariant_set = max_positive_invariant(&a_cl, &constraints, 500)?;

    let mut r_weight = DMatrix::zeros(1, 7);
    r_weight[(0, 0)] = 1.0;
    let stage = Arc::new(StageData::build(
        &model,
        DMatrix::identity(4, 4),
        r_weight,
        Some((symmetric_sqrt(&penalty), &invariant_set)),
        horizon,
    )?);
    let links = compute_link_matrices(&stage)?;
    Ok((
        Controller::new(stage, links),
        TerminalData {
            penalty,
            gain,
            invariant_set,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::validate_mld;
    use crate::subproblem::count_dimensions;
    use approx::assert_relative_eq;
    use std::sync::OnceLock;

    pub(crate) fn model() -> MldModel {
        build_cartpole_mld(&CartPoleParams::default()).unwrap()
    }

    /// The benchmark controller at the published horizon; built once, shared
    /// by every test in the binary.
    pub(crate) fn controller20() -> &'static (Controller, TerminalData) {
        static CELL: OnceLock<(Controller, TerminalData)> = OnceLock::new();
        CELL.get_or_init(|| build_controller(&CartPoleParams::default(), 20).unwrap())
    }

    #[test]
    fn dimensions_and_validation() {
        let m = model();
        assert_eq!(m.n_x, 4);
        assert_eq!(m.n_u, 3);
        assert_eq!(m.m_u, 4);
        assert_eq!(m.f.nrows(), 28);
        assert!(validate_mld(&m).is_empty(), "{:?}", validate_mld(&m));
    }

    #[test]
    fn euler_step_moves_the_cart() {
        let m = model();
        let x = DVector::from_row_slice(&[0., 0., 1., 0.]);
        let next = m
            .simulate_step(&x, &DVector::zeros(7), &DVector::zeros(4))
            .unwrap();
        assert_relative_eq!(next[0], 0.05, epsilon = 1e-12);
        assert_relative_eq!(next[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(next[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(next[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn penetration_bound_matches_hand_interval_arithmetic() {
        let p = CartPoleParams::default();
        let (_, _, contacts) = physics(&p);
        let pen_hi = box_max(&contacts[0].dx, &p.state_bound) - p.wall_distance;
        assert_relative_eq!(pen_hi, 0.5 + std::f64::consts::PI / 10.0 - 0.5, epsilon = 1e-12);
        assert_relative_eq!(pen_hi, 0.3141592653589793, epsilon = 1e-12);
    }

    #[test]
    fn origin_is_feasible_with_idle_contacts() {
        let m = model();
        let z = DVector::zeros(11);
        assert!(m.domain().contains(&z, 0.0));
        assert!(m.h.min() >= 0.0);
    }

    #[test]
    fn short_horizon_controller_counts() {
        let (ctrl, term) = build_controller(&CartPoleParams::default(), 1).unwrap();
        let c = count_dimensions(&ctrl.stage);
        assert_eq!(c.continuous_vars, 11);
        assert_eq!(c.binary_vars, 4);
        assert_eq!(c.equality_rows, 8);
        // terminal rows appended on the single stage
        assert_eq!(
            c.inequality_rows,
            28 + term.invariant_set.num_facets() + 2 * 4
        );
    }

    #[test]
    fn terminal_penalty_dominates_the_stage_cost() {
        let (_, term) = controller20();
        let diff = &term.penalty - DMatrix::identity(4, 4);
        let eig = diff.symmetric_eigen();
        assert!(
            eig.eigenvalues.min() >= -1e-9,
            "terminal penalty must dominate the identity stage weight"
        );
    }

    #[test]
    fn invariant_set_is_invariant_at_sampled_boundary_points() {
        use rand::SeedableRng;
        let (ctrl, term) = controller20();
        let a_cl = {
            let b1 = ctrl.stage.model.b.column(0).into_owned();
            let b1 = DMatrix::from_column_slice(4, 1, b1.as_slice());
            &ctrl.stage.model.a - b1 * &term.gain
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        for _ in 0..40 {
            if let Some(x) = crate::terminal::boundary_point(&term.invariant_set, &mut rng) {
                assert!(term.invariant_set.contains(&(&a_cl * &x), 1e-7));
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }
}
