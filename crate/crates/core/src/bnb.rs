//! Branch and bound over a disjoint interval cover of the binary space.
//!
//! Node selection is best-first (smallest lower bound, earliest creation on
//! ties), branching is chronological (earliest stage, then lowest binary
//! index), and nodes are pruned as soon as their bound reaches the incumbent
//! objective minus the optimality tolerance. Child bounds are obtained by
//! re-costing the parent dual solution under the child bounds, so branching
//! never solves a QP.

use crate::cover::{validate_cover, Cover, DualData, Interval, NodeRecord, NodeStatus};
use crate::dual::dual_objective;
use crate::qp::{PrimalSolution, SolveResult, SubproblemSolver};
use crate::subproblem::assemble_subproblem;
use crate::warmstart::WarmStart;
use crate::Result;
use nalgebra::DVector;
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Tolerance below which a relaxed binary value counts as integral.
pub const INT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BnbConfig {
    /// Optimality tolerance: the search stops when no leaf can be this much
    /// cheaper than the incumbent.
    pub epsilon: f64,
    /// Cap on the number of QP solves.
    pub max_nodes: usize,
    /// Validate the frontier cover after every iteration (slow; tests).
    pub check_covers: bool,
    /// Per-node log lines on stdout.
    pub verbose: bool,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            epsilon: 0.0,
            max_nodes: 200_000,
            check_covers: false,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BnbStats {
    /// Number of QP relaxations solved.
    pub qp_solves: usize,
    /// Frontier leaves whose inherited bound pruned them without a solve.
    pub pruned_by_inherited_bound: usize,
    /// Nodes where the engine gave up early with a valid bound; such nodes
    /// are branched blindly.
    pub engine_bails: usize,
    pub wall: Duration,
    /// True when the node cap stopped the search early.
    pub incomplete: bool,
}

/// Best binary-feasible point found.
#[derive(Debug, Clone)]
pub struct Incumbent {
    pub assignment: Vec<bool>,
    pub primal: PrimalSolution,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct BnbOutcome {
    /// Certified objective (`inf` when the MIQP is infeasible).
    pub objective: f64,
    pub incumbent: Option<Incumbent>,
    /// Final frontier with bounds and dual data, the input to the next
    /// warm start.
    pub frontier: Cover,
    pub stats: BnbStats,
}

impl BnbOutcome {
    pub fn is_feasible(&self) -> bool {
        self.incumbent.is_some()
    }
}

/// Index of the next node to solve: smallest bound strictly below
/// `upper - epsilon`, ties broken by creation order. `None` means the search
/// has converged.
pub fn select_node(frontier: &Cover, upper: f64, epsilon: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in frontier.records.iter().enumerate() {
        if !(r.bound < upper - epsilon) {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                let rb = &frontier.records[b];
                if r.bound < rb.bound || (r.bound == rb.bound && r.seq < rb.seq) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Chronological branching entry: the earliest stage with a free fractional
/// binary, lowest index within the stage. `None` when every entry is
/// integral.
pub fn choose_branch(
    values: &[DVector<f64>],
    interval: &Interval,
    m_u: usize,
) -> Option<(usize, usize)> {
    for (t, v) in values.iter().enumerate() {
        for j in 0..m_u {
            if interval.is_fixed(t * m_u + j) {
                continue;
            }
            let x = v[j];
            if (x - x.round()).abs() > INT_TOL {
                return Some((t, j));
            }
        }
    }
    None
}

fn is_binary_feasible(values: &[DVector<f64>]) -> bool {
    values
        .iter()
        .all(|v| v.iter().all(|&x| (x - x.round()).abs() <= INT_TOL))
}

fn assignment_bits(values: &[DVector<f64>], m_u: usize) -> Vec<bool> {
    let mut bits = Vec::with_capacity(values.len() * m_u);
    for v in values {
        for j in 0..m_u {
            bits.push(v[j].round() == 1.0);
        }
    }
    bits
}

/// Solves the MIQP at state `x_tau` by branch and bound. Without a warm
/// start the search begins from the trivial single-interval cover with a
/// zero bound and an infinite incumbent.
pub fn solve_miqp(
    solver: &mut SubproblemSolver,
    x_tau: &DVector<f64>,
    warm: Option<&WarmStart>,
    cfg: &BnbConfig,
) -> Result<BnbOutcome> {
    let start = Instant::now();
    let stage = Arc::clone(solver.stage());
    let m_u = stage.model.m_u;
    let horizon = stage.horizon;

    let mut frontier = match warm {
        Some(w) => w.cover.clone(),
        None => Cover::trivial(horizon, m_u),
    };
    let mut next_seq = frontier.records.iter().map(|r| r.seq + 1).max().unwrap_or(1);
    let mut upper = warm.map_or(f64::INFINITY, |w| w.upper_bound);
    let mut incumbent: Option<Incumbent> = warm.and_then(|w| w.incumbent.clone());
    let mut stats = BnbStats::default();

    loop {
        if cfg.check_covers {
            debug_assert!(
                validate_cover(&frontier, horizon, m_u),
                "frontier is not a valid cover:\n{}",
                frontier.dump()
            );
        }
        let Some(idx) = select_node(&frontier, upper, cfg.epsilon) else {
            break;
        };
        if stats.qp_solves >= cfg.max_nodes {
            stats.incomplete = true;
            break;
        }
        let interval = frontier.records[idx].interval.clone();
        let qp = assemble_subproblem(&stage, x_tau.clone(), interval.clone())?;
        let cutoff = if upper.is_finite() {
            Some(upper - cfg.epsilon)
        } else {
            None
        };
        let warm_dual = frontier.records[idx].dual.clone();
        let res = solver.solve_qp(&qp, warm_dual.as_ref().map(|d| d.solution()), cutoff)?;
        stats.qp_solves += 1;

        let node = &mut frontier.records[idx];
        match res {
            SolveResult::Infeasible { certificate, .. } => {
                if cfg.verbose {
                    println!("node {:?} action=prune-infeasible", node.interval);
                }
                node.bound = f64::INFINITY;
                node.status = NodeStatus::Infeasible;
                node.dual = Some(DualData::Certificate(Arc::new(certificate)));
            }
            SolveResult::CutoffReached { dual, objective } => {
                if cfg.verbose {
                    println!("node {:?} action=prune bound={objective:.6}", node.interval);
                }
                node.bound = node.bound.max(objective);
                node.status = NodeStatus::Cutoff;
                node.dual = Some(DualData::Point(Arc::new(dual)));
            }
            SolveResult::IterationLimit { dual, objective } => {
                // Rare numerical bail-out: keep the valid bound, then either
                // branch blindly on the first free bit or give up on the node.
                stats.engine_bails += 1;
                node.bound = node.bound.max(objective);
                node.dual = Some(DualData::Point(Arc::new(dual)));
                if let Some(bit) = interval.first_free() {
                    let parent_bound = node.bound;
                    let parent_dual = node.dual.clone();
                    let (zero, one) = interval.split(bit).expect("free bit splits");
                    replace_with_children(
                        &mut frontier,
                        idx,
                        zero,
                        one,
                        parent_bound,
                        parent_dual,
                        &mut next_seq,
                        &stage,
                        x_tau,
                        &interval,
                    )?;
                } else {
                    node.status = NodeStatus::Cutoff;
                    stats.incomplete = true;
                    break;
                }
            }
            SolveResult::Optimal {
                primal,
                dual,
                objective,
            } => {
                if objective >= upper - cfg.epsilon {
                    if cfg.verbose {
                        println!("node {:?} action=prune bound={objective:.6}", node.interval);
                    }
                    node.bound = objective;
                    node.status = NodeStatus::SolvedOptimal;
                    node.dual = Some(DualData::Point(Arc::new(dual)));
                } else {
                    let values = primal.binary_values(&stage);
                    if is_binary_feasible(&values) {
                        if cfg.verbose {
                            println!(
                                "node {:?} action=incumbent objective={objective:.6}",
                                node.interval
                            );
                        }
                        node.bound = objective;
                        node.status = NodeStatus::SolvedOptimal;
                        node.dual = Some(DualData::Point(Arc::new(dual)));
                        upper = objective;
                        incumbent = Some(Incumbent {
                            assignment: assignment_bits(&values, m_u),
                            primal,
                            objective,
                        });
                    } else {
                        // Without any incumbent the search has no cutoffs and
                        // near-infeasible leaves become expensive; try the
                        // rounded assignment as a feasible-point generator.
                        if incumbent.is_none() && stats.qp_solves >= 2 * m_u + 2 {
                            let bits = assignment_bits(&values, m_u);
                            let pattern: Vec<u8> = bits.iter().map(|&b| b as u8).collect();
                            let rounded = Interval::from_bounds(&pattern, &pattern);
                            let rqp = assemble_subproblem(&stage, x_tau.clone(), rounded)?;
                            stats.qp_solves += 1;
                            if let SolveResult::Optimal {
                                primal: rp,
                                objective: robj,
                                ..
                            } = solver.solve_qp(&rqp, None, cutoff)?
                            {
                                if robj < upper {
                                    upper = robj;
                                    incumbent = Some(Incumbent {
                                        assignment: bits,
                                        primal: rp,
                                        objective: robj,
                                    });
                                }
                            }
                        }
                        let node = &mut frontier.records[idx];
                        let (t, j) = choose_branch(&values, &interval, m_u)
                            .expect("fractional entry exists when not binary feasible");
                        if cfg.verbose {
                            println!(
                                "node {:?} action=branch at ({t},{j}) bound={objective:.6}",
                                node.interval
                            );
                        }
                        node.bound = objective;
                        node.status = NodeStatus::SolvedOptimal;
                        let parent_dual = Some(DualData::Point(Arc::new(dual)));
                        node.dual = parent_dual.clone();
                        let (zero, one) =
                            interval.split(t * m_u + j).expect("chosen entry is free");
                        replace_with_children(
                            &mut frontier,
                            idx,
                            zero,
                            one,
                            objective,
                            parent_dual,
                            &mut next_seq,
                            &stage,
                            x_tau,
                            &interval,
                        )?;
                    }
                }
            }
        }
    }

    stats.pruned_by_inherited_bound = frontier
        .records
        .iter()
        .filter(|r| r.status == NodeStatus::InheritedBound)
        .count();
    stats.wall = start.elapsed();
    let objective = if incumbent.is_some() {
        upper
    } else {
        f64::INFINITY
    };
    Ok(BnbOutcome {
        objective,
        incumbent,
        frontier,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn replace_with_children(
    frontier: &mut Cover,
    idx: usize,
    zero: Interval,
    one: Interval,
    parent_bound: f64,
    parent_dual: Option<DualData>,
    next_seq: &mut u64,
    stage: &Arc<crate::model::StageData>,
    x_tau: &DVector<f64>,
    _parent_interval: &Interval,
) -> Result<()> {
    let child = |interval: Interval, seq: u64| -> Result<NodeRecord> {
        let bound = match &parent_dual {
            Some(d) => {
                let child_qp = assemble_subproblem(stage, x_tau.clone(), interval.clone())?;
                let recost = dual_objective(d.solution(), &child_qp);
                // Tightening the binary bounds can only raise the dual
                // objective of a fixed multiplier point.
                #[cfg(debug_assertions)]
                {
                    let parent_qp =
                        assemble_subproblem(stage, x_tau.clone(), _parent_interval.clone())?;
                    let at_parent = dual_objective(d.solution(), &parent_qp);
                    debug_assert!(
                        recost >= at_parent - 1e-7 * (1.0 + at_parent.abs()),
                        "child re-cost {recost} fell below the parent point value {at_parent}"
                    );
                }
                recost.max(parent_bound)
            }
            None => parent_bound,
        };
        Ok(NodeRecord {
            interval,
            bound,
            dual: parent_dual.clone(),
            status: NodeStatus::InheritedBound,
            seq,
        })
    };
    let a = child(zero, *next_seq)?;
    let b = child(one, *next_seq + 1)?;
    *next_seq += 2;
    frontier.records.swap_remove(idx);
    frontier.records.push(a);
    frontier.records.push(b);
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cover::Interval;
    use crate::model::StageData;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn record(bound: f64, seq: u64, bits: usize) -> NodeRecord {
        NodeRecord {
            interval: Interval::free(bits),
            bound,
            dual: None,
            status: NodeStatus::InheritedBound,
            seq,
        }
    }

    #[test]
    fn node_selection_rules() {
        let mk = |bounds: &[f64]| {
            Cover::from_records(
                bounds
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| record(b, i as u64, 2))
                    .collect(),
                2,
                1,
            )
        };
        let f = mk(&[3.0, 5.0]);
        assert_eq!(select_node(&f, 4.0, 0.0), Some(0));
        assert_eq!(select_node(&f, 3.0, 0.0), None);
        let tie = mk(&[2.0, 2.0]);
        assert_eq!(select_node(&tie, 10.0, 0.0), Some(0));
    }

    #[test]
    fn branching_rules() {
        let vals = |rows: &[&[f64]]| -> Vec<DVector<f64>> {
            rows.iter().map(|r| DVector::from_row_slice(r)).collect()
        };
        let m = 4;
        let free = Interval::free(6 * m);
        let v = vals(&[
            &[0., 0., 0.5, 0.],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0.5, 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
        ]);
        assert_eq!(choose_branch(&v, &free, m), Some((0, 2)));
        let v = vals(&[
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0., 0.3, 0., 0.],
        ]);
        assert_eq!(choose_branch(&v, &free, m), Some((5, 1)));
        let v = vals(&[
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0.4, 0., 0., 0.7],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
            &[0., 0., 0., 0.],
        ]);
        assert_eq!(choose_branch(&v, &free, m), Some((2, 0)));
        let row: &[f64] = &[0., 1., 0., 1.];
        let v = vals(&[row; 6]);
        assert_eq!(choose_branch(&v, &free, m), None);
    }

    pub(crate) fn toy_stage(horizon: usize) -> Arc<StageData> {
        let model = crate::model::tests::toy_model();
        Arc::new(
            StageData::build(
                &model,
                DMatrix::identity(1, 1),
                DMatrix::identity(2, 2) * 0.3,
                None,
                horizon,
            )
            .unwrap(),
        )
    }

    /// Exhaustive enumeration over all fixed-binary QPs.
    pub(crate) fn brute_force_optimum(
        solver: &mut SubproblemSolver,
        x_tau: &DVector<f64>,
    ) -> f64 {
        let stage = Arc::clone(solver.stage());
        let bits = stage.horizon * stage.model.m_u;
        let mut best = f64::INFINITY;
        for code in 0..(1u64 << bits) {
            let pattern: Vec<u8> = (0..bits).map(|b| (code >> b & 1) as u8).collect();
            let iv = Interval::from_bounds(&pattern, &pattern);
            let qp = assemble_subproblem(&stage, x_tau.clone(), iv).unwrap();
            match solver.solve_qp(&qp, None, None).unwrap() {
                SolveResult::Optimal { objective, .. } => best = best.min(objective),
                SolveResult::Infeasible { .. } => {}
                other => panic!("brute force hit {other:?}"),
            }
        }
        best
    }

    #[test]
    fn matches_brute_force_on_the_toy_problem() {
        let stage = toy_stage(3);
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        for &x0 in &[0.0, 0.9, -1.5, 1.9] {
            let x = DVector::from_row_slice(&[x0]);
            let out = solve_miqp(
                &mut solver,
                &x,
                None,
                &BnbConfig {
                    check_covers: true,
                    ..BnbConfig::default()
                },
            )
            .unwrap();
            let brute = brute_force_optimum(&mut solver, &x);
            if brute.is_finite() {
                assert_relative_eq!(out.objective, brute, epsilon = 1e-6);
                let inc = out.incumbent.as_ref().unwrap();
                assert_relative_eq!(inc.objective, brute, epsilon = 1e-6);
            } else {
                assert!(out.objective.is_infinite());
                assert!(out.incumbent.is_none());
            }
            for r in &out.frontier.records {
                assert!(r.bound >= out.objective.min(1e300) - 1e-6 || r.bound.is_infinite());
            }
        }
    }

    #[test]
    fn binary_relaxation_solution_needs_one_qp() {
        // At x0 = 0 the optimum is everything-at-zero, which is already
        // binary feasible: exactly one QP solve.
        let stage = toy_stage(3);
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let out = solve_miqp(&mut solver, &DVector::zeros(1), None, &BnbConfig::default()).unwrap();
        assert_eq!(out.stats.qp_solves, 1);
        assert_relative_eq!(out.objective, 0.0, epsilon = 1e-9);
    }
}
