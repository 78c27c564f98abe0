//! Cross-step reuse of the branch-and-bound frontier.
//!
//! After applying the first control of one solve, the final frontier is
//! shifted one stage back in time, every leaf's dual solution is remapped
//! onto the new problem, and the remapped dual objectives become valid lower
//! bounds for the new leaves. Infeasibility certificates propagate whenever
//! the realized model error stays inside an explicitly computable halfspace.
//! A persistent-feasibility upper bound can be added by shifting the
//! incumbent and re-solving a handful of fixed-binary QPs.
//!
//! Everything except the per-leaf scalar product with the realized model
//! error is independent of the next measured state, so the construction is
//! split into a prepare phase (before the measurement) and a finish phase
//! (after it).

use crate::bnb::{BnbOutcome, Incumbent};
use crate::cover::{validate_cover, Cover, DualData, Interval, NodeRecord, NodeStatus};
use crate::dual::{dual_objective, DualSolution, InfeasibilityCertificate};
use crate::model::StageData;
use crate::qp::{SolveResult, SubproblemSolver};
use crate::subproblem::assemble_subproblem;
use crate::terminal::LinkMatrices;
use crate::{Error, Result};
use nalgebra::DVector;
use std::sync::Arc;

/// The three branch-and-bound inputs assembled from the previous solve: an
/// initial cover with per-leaf bounds and dual data, an upper bound on the
/// optimal value, and optionally the feasible point attaining it.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub cover: Cover,
    pub upper_bound: f64,
    pub incumbent: Option<Incumbent>,
}

/// Correction terms relating a leaf bound at one step to its descendant's
/// bound at the next step.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorrectionTerms {
    /// Negative of the realized stage cost.
    pub stage_cost_drop: f64,
    /// Distance of the stage-0 quadratic multipliers from optimality;
    /// nonnegative, zero at an optimal parent pair.
    pub stationarity_gap: f64,
    /// Slack-weighted stage-0 multipliers; nonnegative for kept leaves,
    /// zero under complementary slackness.
    pub complementarity_gap: f64,
    /// Linear term in the realized model error.
    pub model_error_term: f64,
    /// Quadratic-multiplier norm change from remapping the state weights.
    pub state_weight_decay: f64,
    /// Same for the input weights.
    pub input_weight_decay: f64,
    /// Offset change from remapping the stage-constraint multipliers.
    pub constraint_decay: f64,
}

impl CorrectionTerms {
    pub fn sum(&self) -> f64 {
        self.stage_cost_drop
            + self.stationarity_gap
            + self.complementarity_gap
            + self.model_error_term
            + self.state_weight_decay
            + self.input_weight_decay
            + self.constraint_decay
    }

    /// Everything except the model-error term, which is the only part that
    /// needs the next measured state.
    pub fn premeasurement_sum(&self) -> f64 {
        self.sum() - self.model_error_term
    }
}

/// Time-invariant dual shift: indices move one stage back, the new terminal
/// multipliers are zero. Feasibility for the shifted problem follows from
/// feasibility at the previous step when the stage data do not vary.
pub fn shift_dual(d0: &DualSolution) -> DualSolution {
    let t_end = d0.horizon();
    let zero_like = |v: &DVector<f64>| DVector::zeros(v.len());
    let mut lambda = Vec::with_capacity(t_end + 1);
    let mut rho = Vec::with_capacity(t_end + 1);
    for t in 1..=t_end {
        lambda.push(d0.lambda[t].clone());
        rho.push(d0.rho[t].clone());
    }
    lambda.push(zero_like(&d0.lambda[t_end]));
    rho.push(zero_like(&d0.rho[t_end]));
    let shift_block = |v: &Vec<DVector<f64>>| -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(t_end);
        for t in 1..t_end {
            out.push(v[t].clone());
        }
        out.push(zero_like(&v[t_end - 1]));
        out
    };
    DualSolution {
        lambda,
        rho,
        mu: shift_block(&d0.mu),
        nu_lo: shift_block(&d0.nu_lo),
        nu_hi: shift_block(&d0.nu_hi),
        sigma: shift_block(&d0.sigma),
    }
}

/// General dual shift for stage-varying weights and constraint sets.
///
/// The quadratic multipliers are remapped through weight pseudo-inverses,
/// the stage-constraint multipliers through the offline link matrices, and
/// the dynamics multipliers are re-chained backward through the state
/// stationarity so the result is dual-feasible by construction.
pub fn shift_dual_general(
    d0: &DualSolution,
    stage: &StageData,
    links: &LinkMatrices,
) -> Result<DualSolution> {
    let t_end = stage.horizon;
    let model = &stage.model;
    let n_x = model.n_x;
    let mut d = DualSolution::zeros(stage);

    for t in 0..t_end {
        let rhs = stage.q[t + 1].transpose() * &d0.rho[t + 1];
        d.rho[t] = solve_min_norm(&stage.q[t].transpose(), &rhs)
            .ok_or_else(|| Error::DualShift(format!("state weight remap failed at stage {t}")))?;
        let res = (stage.q[t].transpose() * &d.rho[t] - &rhs).amax();
        if res > 1e-8 * (1.0 + rhs.amax()) {
            return Err(Error::DualShift(format!(
                "state weight rows of stage {} leave the row space of stage {t} (residual {res:.2e})",
                t + 1
            )));
        }
    }
    for t in 0..t_end.saturating_sub(1) {
        let rhs = stage.r[t + 1].transpose() * &d0.sigma[t + 1];
        d.sigma[t] = solve_min_norm(&stage.r[t].transpose(), &rhs)
            .ok_or_else(|| Error::DualShift(format!("input weight remap failed at stage {t}")))?;
        let res = (stage.r[t].transpose() * &d.sigma[t] - &rhs).amax();
        if res > 1e-8 * (1.0 + rhs.amax()) {
            return Err(Error::DualShift(format!(
                "input weight rows of stage {} leave the row space of stage {t} (residual {res:.2e})",
                t + 1
            )));
        }
    }
    for t in 0..t_end.saturating_sub(1) {
        d.mu[t] = match links.map(t) {
            Some(m) => m * &d0.mu[t + 1],
            None => d0.mu[t + 1].clone(),
        };
        d.nu_lo[t] = d0.nu_lo[t + 1].clone();
        d.nu_hi[t] = d0.nu_hi[t + 1].clone();
    }
    // Terminal-stage cone multipliers stay zero; re-chain the dynamics
    // multipliers backward through the state stationarity.
    for t in (0..=t_end).rev() {
        if t == t_end {
            d.lambda[t] = -(stage.q[t].transpose() * &d.rho[t]);
        } else {
            let dom = &stage.d[t];
            let f_block = dom.matrix().columns(0, n_x);
            d.lambda[t] = model.a.transpose() * &d.lambda[t + 1]
                - stage.q[t].transpose() * &d.rho[t]
                - f_block.transpose() * &d.mu[t];
        }
    }
    Ok(d)
}

fn solve_min_norm(a: &nalgebra::DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if a.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    if rhs.amax() == 0.0 {
        return Some(DVector::zeros(a.ncols()));
    }
    a.clone().svd(true, true).solve(rhs, 1e-12).ok()
}

/// Correction terms for one kept leaf.
///
/// `parent_interval` is the leaf's interval before the shift; `shifted` is
/// the remapped dual point for the new problem.
pub fn compute_corrections(
    d0: &DualSolution,
    shifted: &DualSolution,
    parent_interval: &Interval,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    e0: &DVector<f64>,
    stage: &StageData,
) -> CorrectionTerms {
    let model = &stage.model;
    let m_u = model.m_u;
    let t_end = stage.horizon;
    let qx = &stage.q[0] * x0;
    let ru = &stage.r[0] * u0;
    let stage_cost_drop = -(qx.norm_squared() + ru.norm_squared());
    let stationarity_gap =
        (&d0.rho[0] / 2.0 - &qx).norm_squared() + (&d0.sigma[0] / 2.0 - &ru).norm_squared();

    let dom0 = &stage.d[0];
    let n_x = model.n_x;
    let f0 = dom0.matrix().columns(0, n_x);
    let g0 = dom0.matrix().columns(n_x, model.input_dim());
    let slack0 = dom0.offsets() - f0 * x0 - g0 * u0;
    let v0 = model.binary_part(u0);
    let (lo_bits, hi_bits) = parent_interval.stage_bounds(0, m_u);
    let mut complementarity_gap = slack0.dot(&d0.mu[0]);
    for j in 0..m_u {
        complementarity_gap += (v0[j] - lo_bits[j] as f64) * d0.nu_lo[0][j];
        complementarity_gap += (hi_bits[j] as f64 - v0[j]) * d0.nu_hi[0][j];
    }

    let model_error_term = -e0.dot(&shifted.lambda[0]);

    let mut state_weight_decay = 0.0;
    for t in 0..t_end {
        state_weight_decay += (d0.rho[t + 1].norm_squared() - shifted.rho[t].norm_squared()) / 4.0;
    }
    let mut input_weight_decay = 0.0;
    for t in 0..t_end.saturating_sub(1) {
        input_weight_decay +=
            (d0.sigma[t + 1].norm_squared() - shifted.sigma[t].norm_squared()) / 4.0;
    }
    let mut constraint_decay = 0.0;
    for t in 0..t_end.saturating_sub(1) {
        constraint_decay += stage.d[t + 1].offsets().dot(&d0.mu[t + 1])
            - stage.d[t].offsets().dot(&shifted.mu[t]);
    }

    CorrectionTerms {
        stage_cost_drop,
        stationarity_gap,
        complementarity_gap,
        model_error_term,
        state_weight_decay,
        input_weight_decay,
        constraint_decay,
    }
}

/// Propagated leaf bound: the parent bound plus all corrections, clamped at
/// zero since the objective is a sum of squares.
pub fn propagate_lower_bound(theta0: f64, pi: &CorrectionTerms) -> f64 {
    (theta0 + pi.sum()).max(0.0)
}

/// Decides whether a shifted certificate still proves infeasibility: the
/// realized error must lie in the open halfspace whose offset is the parent
/// certificate objective plus the complementarity and constraint-offset
/// corrections.
pub fn certificate_propagates(
    shifted_lambda0: &DVector<f64>,
    e0: &DVector<f64>,
    theta0: f64,
    pi: &CorrectionTerms,
) -> bool {
    shifted_lambda0.dot(e0) < theta0 + pi.complementarity_gap + pi.constraint_decay
}

/// Standalone certificate propagation: shifts the parent certificate and
/// applies the halfspace test. `None` means the descendant must be solved.
pub fn propagate_certificate(
    cert: &InfeasibilityCertificate,
    stage: &StageData,
    links: &LinkMatrices,
    e0: &DVector<f64>,
    theta0: f64,
    pi: &CorrectionTerms,
) -> Result<Option<InfeasibilityCertificate>> {
    let shifted = shift_dual_general(cert.solution(), stage, links)?;
    if certificate_propagates(&shifted.lambda[0], e0, theta0, pi) {
        Ok(Some(InfeasibilityCertificate::new(shifted)))
    } else {
        Ok(None)
    }
}

/// Shifts the incumbent one step and re-solves at most `2^m` fixed-binary
/// QPs (one per terminal-stage assignment) at the nominal next state.
/// Returns the best feasible objective and the corresponding point, or
/// `(inf, None)` if every candidate is infeasible.
pub fn propagate_upper_bound(
    incumbent: &Incumbent,
    solver: &mut SubproblemSolver,
    x1_nominal: &DVector<f64>,
) -> Result<(f64, Option<Incumbent>)> {
    let stage = Arc::clone(solver.stage());
    let m_u = stage.model.m_u;
    let horizon = stage.horizon;
    let bits = horizon * m_u;
    let mut pattern = vec![0u8; bits];
    for t in 0..horizon.saturating_sub(1) {
        for j in 0..m_u {
            pattern[t * m_u + j] = incumbent.assignment[(t + 1) * m_u + j] as u8;
        }
    }
    let mut best: Option<Incumbent> = None;
    for code in 0..(1u64 << m_u) {
        for j in 0..m_u {
            pattern[(horizon - 1) * m_u + j] = (code >> j & 1) as u8;
        }
        let iv = Interval::from_bounds(&pattern, &pattern);
        let qp = assemble_subproblem(&stage, x1_nominal.clone(), iv)?;
        if let SolveResult::Optimal {
            primal, objective, ..
        } = solver.solve_qp(&qp, None, None)?
        {
            if best.as_ref().map_or(true, |b| objective < b.objective) {
                best = Some(Incumbent {
                    assignment: pattern.iter().map(|&b| b == 1).collect(),
                    primal,
                    objective,
                });
            }
        }
    }
    match best {
        Some(inc) => Ok((inc.objective, Some(inc))),
        None => Ok((f64::INFINITY, None)),
    }
}

/// Warm-start construction state between the control application and the
/// next state measurement.
pub struct PendingWarmStart {
    stage: Arc<StageData>,
    nominal_next: DVector<f64>,
    entries: Vec<PendingEntry>,
    upper_bound: f64,
    incumbent: Option<Incumbent>,
    horizon: usize,
    m_u: usize,
}

struct PendingEntry {
    interval: Interval,
    shifted: DualSolution,
    was_certificate: bool,
    /// Parent dual objective.
    theta0: f64,
    /// All corrections except the model-error term.
    pre_sum: f64,
    /// Halfspace offset for certificate propagation.
    cert_offset: f64,
    seq: u64,
}

/// Everything that can be done before the next state is measured: drop the
/// leaves that disagree with the applied binaries, shift the cover and the
/// dual data, and accumulate every correction term except the model-error
/// scalar products. Pass a solver only in nominal runs to also compute the
/// persistent-feasibility upper bound at the nominal next state.
pub fn prepare_warm_start(
    outcome: &BnbOutcome,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    stage: &Arc<StageData>,
    links: &LinkMatrices,
    upper_bound_solver: Option<&mut SubproblemSolver>,
) -> Result<PendingWarmStart> {
    let model = &stage.model;
    let m_u = model.m_u;
    let horizon = stage.horizon;
    let v0_bits: Vec<bool> = {
        let v = model.binary_part(u0);
        (0..m_u).map(|j| v[j].round() == 1.0).collect()
    };
    let nominal_next = &model.a * x0 + &model.b * u0;

    let zero_dual = DualSolution::zeros(stage);
    let mut entries = Vec::new();
    for record in &outcome.frontier.records {
        if !record.interval.stage0_contains(&v0_bits, m_u) {
            continue;
        }
        let parent_qp = assemble_subproblem(stage, x0.clone(), record.interval.clone())?;
        let (d0, was_certificate) = match &record.dual {
            Some(DualData::Point(d)) => (d.as_ref(), false),
            Some(DualData::Certificate(c)) => (c.solution(), true),
            None => (&zero_dual, false),
        };
        let theta0 = dual_objective(d0, &parent_qp);
        let shifted = shift_dual_general(d0, stage, links)?;
        let pi = compute_corrections(
            d0,
            &shifted,
            &record.interval,
            x0,
            u0,
            &DVector::zeros(model.n_x),
            stage,
        );
        entries.push(PendingEntry {
            interval: record.interval.shifted(m_u),
            shifted,
            was_certificate,
            theta0,
            pre_sum: pi.premeasurement_sum(),
            cert_offset: theta0 + pi.complementarity_gap + pi.constraint_decay,
            seq: record.seq,
        });
    }

    let (upper_bound, incumbent) = match (upper_bound_solver, &outcome.incumbent) {
        (Some(solver), Some(inc)) => propagate_upper_bound(inc, solver, &nominal_next)?,
        _ => (f64::INFINITY, None),
    };

    Ok(PendingWarmStart {
        stage: Arc::clone(stage),
        nominal_next,
        entries,
        upper_bound,
        incumbent,
        horizon,
        m_u,
    })
}

impl PendingWarmStart {
    /// Nominal prediction of the next state; the realized error is the
    /// measurement minus this.
    pub fn nominal_next(&self) -> &DVector<f64> {
        &self.nominal_next
    }

    pub fn cover_size(&self) -> usize {
        self.entries.len()
    }

    /// Completes the warm start once the next state is measured. Only the
    /// per-leaf scalar products with the realized error happen here.
    pub fn finish(self, x1: &DVector<f64>) -> WarmStart {
        let e0 = x1 - &self.nominal_next;
        let mut records = Vec::with_capacity(self.entries.len());
        for entry in self.entries {
            let error_term = -e0.dot(&entry.shifted.lambda[0]);
            if entry.was_certificate {
                if entry.shifted.lambda[0].dot(&e0) < entry.cert_offset {
                    records.push(NodeRecord {
                        interval: entry.interval,
                        bound: f64::INFINITY,
                        dual: Some(DualData::Certificate(Arc::new(
                            InfeasibilityCertificate::new(entry.shifted),
                        ))),
                        status: NodeStatus::Infeasible,
                        seq: entry.seq,
                    });
                    continue;
                }
            }
            let bound = (entry.theta0 + entry.pre_sum + error_term).max(0.0);
            records.push(NodeRecord {
                interval: entry.interval,
                bound,
                dual: Some(DualData::Point(Arc::new(entry.shifted))),
                status: NodeStatus::InheritedBound,
                seq: entry.seq,
            });
        }
        let cover = Cover::from_records(records, self.horizon, self.m_u);
        debug_assert!(validate_cover(&cover, self.horizon, self.m_u));
        let _ = &self.stage;
        WarmStart {
            cover,
            upper_bound: self.upper_bound,
            incumbent: self.incumbent,
        }
    }
}

/// One-shot warm-start construction from a finished solve and the measured
/// next state.
pub fn build_warm_start(
    outcome: &BnbOutcome,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    x1: &DVector<f64>,
    stage: &Arc<StageData>,
    links: &LinkMatrices,
    upper_bound_solver: Option<&mut SubproblemSolver>,
) -> Result<WarmStart> {
    let pending = prepare_warm_start(outcome, x0, u0, stage, links, upper_bound_solver)?;
    Ok(pending.finish(x1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnb::{solve_miqp, BnbConfig};
    use crate::dual::check_dual_feasible;
    use crate::terminal::compute_link_matrices;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;

    fn qp_free(stage: &Arc<StageData>, x0: f64) -> crate::subproblem::SubproblemQp {
        assemble_subproblem(
            stage,
            DVector::from_element(stage.model.n_x, x0),
            Interval::free(stage.horizon * stage.model.m_u),
        )
        .unwrap()
    }

    #[test]
    fn zero_shifts_to_zero() {
        let stage = crate::bnb::tests::toy_stage(3);
        let d = DualSolution::zeros(&stage);
        let s = shift_dual(&d);
        assert_eq!(s.stationarity_residual(&qp_free(&stage, 0.0)), 0.0);
        assert!(s.lambda.iter().all(|l| l.amax() == 0.0));
    }

    #[test]
    fn random_feasible_points_stay_feasible_after_the_shift() {
        let stage = crate::bnb::tests::toy_stage(4);
        let qp = qp_free(&stage, 0.4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let d = crate::dual::tests::random_feasible_dual(&stage, &mut rng);
            assert!(check_dual_feasible(&d, &qp, 1e-8));
            let s = shift_dual(&d);
            assert!(
                check_dual_feasible(&s, &qp, 1e-8),
                "shift broke feasibility: residual {}",
                s.stationarity_residual(&qp)
            );
        }
    }

    #[test]
    fn certificate_shape_survives_the_shift() {
        let stage = crate::bnb::tests::toy_stage(3);
        let mut d = DualSolution::zeros(&stage);
        d.mu[1][0] = 1.0;
        let s = shift_dual(&d);
        assert!(s.is_quadratic_part_zero(0.0));
        assert_relative_eq!(s.mu[0][0], 1.0);
    }

    #[test]
    fn general_shift_reduces_to_the_plain_shift_for_constant_data() {
        let stage = crate::bnb::tests::toy_stage(4);
        let links = compute_link_matrices(&stage).unwrap();
        let qp = qp_free(&stage, -0.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let d = crate::dual::tests::random_feasible_dual(&stage, &mut rng);
            let plain = shift_dual(&d);
            let general = shift_dual_general(&d, &stage, &links).unwrap();
            assert!(check_dual_feasible(&general, &qp, 1e-7));
            for t in 0..stage.horizon {
                assert_relative_eq!((&plain.mu[t] - &general.mu[t]).amax(), 0.0, epsilon = 1e-9);
                assert_relative_eq!((&plain.rho[t] - &general.rho[t]).amax(), 0.0, epsilon = 1e-9);
                assert_relative_eq!(
                    (&plain.lambda[t] - &general.lambda[t]).amax(),
                    0.0,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn zero_next_weight_zeroes_the_remapped_multiplier() {
        let model = crate::model::tests::toy_model();
        let q = vec![
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        ];
        let r = vec![DMatrix::identity(2, 2); 2];
        let d = vec![model.domain(); 2];
        let stage = Arc::new(StageData::from_parts(&model, q, r, d).unwrap());
        let links = compute_link_matrices(&stage).unwrap();
        let mut d0 = DualSolution::zeros(&stage);
        d0.rho[1][0] = 3.0;
        let s = shift_dual_general(&d0, &stage, &links).unwrap();
        assert_eq!(s.rho[0].amax(), 0.0);
    }

    #[test]
    fn correction_terms_vanish_at_the_origin() {
        let stage = crate::bnb::tests::toy_stage(3);
        let d0 = DualSolution::zeros(&stage);
        let shifted = shift_dual(&d0);
        let pi = compute_corrections(
            &d0,
            &shifted,
            &Interval::free(3),
            &DVector::zeros(1),
            &DVector::zeros(2),
            &DVector::zeros(1),
            &stage,
        );
        assert_eq!(pi.sum(), 0.0);
    }

    #[test]
    fn stage_cost_and_stationarity_terms_match_hand_arithmetic() {
        // Q0 = I2, x0 = (1,0), R0 scalar row, u0 = 1, zero duals:
        // stage-cost term -2, stationarity term 2.
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1., 0.]);
        let f = DMatrix::zeros(2, 2);
        let g = DMatrix::from_row_slice(2, 1, &[1., -1.]);
        let h = DVector::from_row_slice(&[2., 2.]);
        let v = DMatrix::zeros(0, 1);
        let model = crate::model::MldModel {
            a,
            b,
            f,
            g,
            h,
            v,
            n_x: 2,
            n_u: 1,
            m_u: 0,
        };
        let stage = Arc::new(
            StageData::build(
                &model,
                DMatrix::identity(2, 2),
                DMatrix::identity(1, 1),
                None,
                2,
            )
            .unwrap(),
        );
        let d0 = DualSolution::zeros(&stage);
        let shifted = shift_dual(&d0);
        let pi = compute_corrections(
            &d0,
            &shifted,
            &Interval::free(0),
            &DVector::from_row_slice(&[1., 0.]),
            &DVector::from_row_slice(&[1.]),
            &DVector::zeros(2),
            &stage,
        );
        assert_relative_eq!(pi.stage_cost_drop, -2.0);
        assert_relative_eq!(pi.stationarity_gap, 2.0);
    }

    #[test]
    fn constant_domains_have_zero_constraint_decay() {
        let stage = crate::bnb::tests::toy_stage(4);
        let links = compute_link_matrices(&stage).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d0 = crate::dual::tests::random_feasible_dual(&stage, &mut rng);
            let shifted = shift_dual_general(&d0, &stage, &links).unwrap();
            let pi = compute_corrections(
                &d0,
                &shifted,
                &Interval::free(4),
                &DVector::zeros(1),
                &DVector::zeros(2),
                &DVector::zeros(1),
                &stage,
            );
            assert_relative_eq!(pi.constraint_decay, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn lower_bound_propagation_clamps_at_zero() {
        let pi0 = CorrectionTerms::default();
        assert_relative_eq!(propagate_lower_bound(5.0, &pi0), 5.0);
        let pi = CorrectionTerms {
            stage_cost_drop: -2.0,
            ..CorrectionTerms::default()
        };
        assert_relative_eq!(propagate_lower_bound(1.0, &pi), 0.0);
    }

    #[test]
    fn halfspace_test_matches_hand_arithmetic() {
        let lambda = DVector::from_row_slice(&[1.0, 0.0]);
        let pi = CorrectionTerms::default();
        assert!(!certificate_propagates(
            &lambda,
            &DVector::from_row_slice(&[2.0, 0.0]),
            1.0,
            &pi
        ));
        assert!(certificate_propagates(&lambda, &DVector::zeros(2), 1.0, &pi));
    }

    #[test]
    fn trivial_frontier_round_trips_to_a_cold_start() {
        let stage = crate::bnb::tests::toy_stage(3);
        let links = compute_link_matrices(&stage).unwrap();
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let x0 = DVector::zeros(1);
        let out = solve_miqp(&mut solver, &x0, None, &BnbConfig::default()).unwrap();
        let u0 = out.incumbent.as_ref().unwrap().primal.inputs[0].clone();
        let x1 = stage
            .model
            .simulate_step(&x0, &u0, &DVector::zeros(1))
            .unwrap();
        let ws = build_warm_start(&out, &x0, &u0, &x1, &stage, &links, None).unwrap();
        assert_eq!(ws.cover.len(), 1);
        assert_eq!(ws.cover.records[0].interval, Interval::free(3));
        assert_relative_eq!(ws.cover.records[0].bound, 0.0);
        assert!(ws.upper_bound.is_infinite());
    }

    #[test]
    fn propagated_bounds_are_validated_by_resolving_the_children() {
        let stage = crate::bnb::tests::toy_stage(3);
        let links = compute_link_matrices(&stage).unwrap();
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let x0 =
                DVector::from_element(1, rand::RngExt::random_range(&mut rng, -1.5..1.5f64));
            let out = solve_miqp(&mut solver, &x0, None, &BnbConfig::default()).unwrap();
            let Some(inc) = &out.incumbent else { continue };
            let u0 = inc.primal.inputs[0].clone();
            let e0 =
                DVector::from_element(1, rand::RngExt::random_range(&mut rng, -0.03..0.03f64));
            let x1 = stage.model.simulate_step(&x0, &u0, &e0).unwrap();
            let ws = build_warm_start(&out, &x0, &u0, &x1, &stage, &links, None).unwrap();
            for rec in &ws.cover.records {
                let qp = assemble_subproblem(&stage, x1.clone(), rec.interval.clone()).unwrap();
                if let Some(d) = &rec.dual {
                    assert!(
                        check_dual_feasible(d.solution(), &qp, 1e-6),
                        "trial {trial}: shifted point infeasible"
                    );
                    if rec.bound.is_finite() {
                        // The stored bound is exactly the clamped dual
                        // objective of the attached point.
                        let direct = dual_objective(d.solution(), &qp).max(0.0);
                        assert_relative_eq!(rec.bound, direct, epsilon = 1e-7);
                    }
                }
                match solver.solve_qp(&qp, None, None).unwrap() {
                    SolveResult::Optimal { objective, .. } => {
                        assert!(
                            rec.bound <= objective + 1e-6,
                            "trial {trial}: bound {} exceeds child optimum {objective}",
                            rec.bound
                        );
                    }
                    SolveResult::Infeasible { .. } => {}
                    other => panic!("oracle solve failed: {other:?}"),
                }
            }
        }
    }
}
