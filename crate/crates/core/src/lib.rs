//! Warm-started branch-and-bound for the mixed-integer quadratic programs of
//! hybrid model predictive control.
//!
//! The library solves finite-horizon optimal control problems for mixed
//! logical dynamical (MLD) systems,
//!
//! ```text
//! x[t+1] = A x[t] + B u[t],   (x[t], u[t]) ∈ D_t,   V u[t] ∈ {0,1}^m
//! ```
//!
//! with quadratic stage costs, by branch and bound over a disjoint cover of
//! the binary search space. Between consecutive control steps the final
//! search frontier is shifted in time, dual solutions of its leaves are
//! remapped onto the new problem, and the implied lower bounds prune most of
//! the new tree before any QP is solved.
//!
//! Main pieces:
//!
//! * [`model`] — MLD system description and per-stage problem data,
//! * [`cover`] — interval algebra on the binary hypercube and frontier shifts,
//! * [`subproblem`] / [`dual`] — the QP relaxations and their dual vectors,
//! * [`qp`] — a dual active-set QP engine with early termination at a cutoff
//!   and Farkas-style infeasibility certificates,
//! * [`bnb`] — best-first branch and bound with chronological branching,
//! * [`warmstart`] — the cross-step shift of covers, bounds and certificates,
//! * [`terminal`] — offline Riccati / invariant-set / multiplier-link tools,
//! * [`cartpole`] — the cart-pole-with-walls benchmark system,
//! * [`sim`] — closed-loop simulation and the warm-vs-cold statistical study.

pub mod bnb;
pub mod cartpole;
pub mod cover;
pub mod dual;
pub mod io;
pub mod lp;
pub mod model;
pub(crate) mod par;
pub mod polyhedron;
pub mod qp;
pub mod sim;
pub mod subproblem;
pub mod terminal;
pub mod warmstart;

pub use bnb::{solve_miqp, BnbConfig, BnbOutcome, BnbStats, Incumbent};
pub use cover::{shift_cover, validate_cover, Cover, Interval, NodeRecord, NodeStatus};
pub use dual::{check_dual_feasible, dual_objective, DualSolution, InfeasibilityCertificate};
pub use model::{validate_mld, MldModel, StageData};
pub use polyhedron::Polyhedron;
pub use sim::{run_closed_loop, run_study, Controller, ErrorModel, Mode, SimOptions, SimTrace, StudyConfig};
pub use terminal::{compute_link_matrices, max_positive_invariant, solve_dare, LinkMatrices, TerminalData};
pub use warmstart::{build_warm_start, prepare_warm_start, propagate_lower_bound, shift_dual, shift_dual_general, CorrectionTerms, WarmStart};
pub use qp::{PrimalSolution, SolveResult, SubproblemSolver};
pub use subproblem::{assemble_subproblem, count_dimensions, DimensionCounts, SubproblemQp};

/// Errors produced by model construction, solvers and offline tools.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("stage data rejected: {0}")]
    StageData(String),
    #[error("linear program error: {0}")]
    Lp(String),
    #[error("QP engine error: {0}")]
    Engine(String),
    #[error("Riccati iteration did not converge after {0} iterations")]
    RiccatiDiverged(usize),
    #[error("invariant set computation exceeded {0} iterations")]
    InvariantSetCap(usize),
    #[error("multiplier link LP infeasible for facet {facet} of stage {stage}")]
    LinkInfeasible { stage: usize, facet: usize },
    #[error("dual shift failed: {0}")]
    DualShift(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
