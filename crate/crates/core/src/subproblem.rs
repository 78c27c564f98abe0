//! The convex QP relaxation attached to one interval of the binary cover.
//!
//! Decision variables are ordered stage-major, `(x_0, u_0, x_1, u_1, ...,
//! x_T)`, which keeps the KKT systems banded. The relaxation replaces the
//! binary constraint `V u_t in {0,1}^m` by the box `lo_t <= V u_t <= hi_t`
//! read off the interval.

use crate::cover::Interval;
use crate::model::StageData;
use crate::{Error, Result};
use nalgebra::DVector;
use std::sync::Arc;

/// A subproblem instance: stage data, initial state, and an interval of
/// binary bounds. The structural matrices live in the per-stage data; this
/// object carries only what changes between branch-and-bound nodes.
#[derive(Debug, Clone)]
pub struct SubproblemQp {
    pub stage: Arc<StageData>,
    pub x_tau: DVector<f64>,
    pub interval: Interval,
    v_lo: Vec<DVector<f64>>,
    v_hi: Vec<DVector<f64>>,
}

impl SubproblemQp {
    pub fn horizon(&self) -> usize {
        self.stage.horizon
    }

    /// Lower binary bounds of stage `t` as reals.
    pub fn v_lo(&self, t: usize) -> &DVector<f64> {
        &self.v_lo[t]
    }

    /// Upper binary bounds of stage `t` as reals.
    pub fn v_hi(&self, t: usize) -> &DVector<f64> {
        &self.v_hi[t]
    }
}

/// Builds the relaxation `P(V)` for an interval `V`.
pub fn assemble_subproblem(
    stage: &Arc<StageData>,
    x_tau: DVector<f64>,
    interval: Interval,
) -> Result<SubproblemQp> {
    let m = stage.model.m_u;
    let horizon = stage.horizon;
    if x_tau.len() != stage.model.n_x {
        return Err(Error::Dimension(format!(
            "initial state has length {}, model has {} states",
            x_tau.len(),
            stage.model.n_x
        )));
    }
    if interval.len() != horizon * m {
        return Err(Error::Dimension(format!(
            "interval has {} bits, problem has {}",
            interval.len(),
            horizon * m
        )));
    }
    let mut v_lo = Vec::with_capacity(horizon);
    let mut v_hi = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (lo, hi) = interval.stage_bounds(t, m);
        v_lo.push(DVector::from_iterator(m, lo.iter().map(|&b| b as f64)));
        v_hi.push(DVector::from_iterator(m, hi.iter().map(|&b| b as f64)));
    }
    Ok(SubproblemQp {
        stage: Arc::clone(stage),
        x_tau,
        interval,
        v_lo,
        v_hi,
    })
}

/// Problem size bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionCounts {
    pub total_vars: usize,
    pub continuous_vars: usize,
    pub binary_vars: usize,
    pub equality_rows: usize,
    pub inequality_rows: usize,
}

/// Counts variables and constraint rows of the relaxations built from the
/// given stage data.
pub fn count_dimensions(stage: &StageData) -> DimensionCounts {
    let t = stage.horizon;
    let n_x = stage.model.n_x;
    let n_u = stage.model.n_u;
    let m_u = stage.model.m_u;
    let continuous = (t + 1) * n_x + t * n_u;
    let binary = t * m_u;
    let facets: usize = (0..t).map(|k| stage.facets(k)).sum();
    DimensionCounts {
        total_vars: continuous + binary,
        continuous_vars: continuous,
        binary_vars: binary,
        equality_rows: (t + 1) * n_x,
        inequality_rows: facets + 2 * t * m_u,
    }
}
