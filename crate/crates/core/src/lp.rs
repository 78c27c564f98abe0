//! Dense two-phase simplex for the small linear programs used throughout the
//! crate: polyhedron emptiness/boundedness/redundancy queries, multiplier
//! link synthesis, and invariant-set construction.
//!
//! Problems are stated over free variables,
//!
//! ```text
//! minimize    c'x
//! subject to  A_ub x <= b_ub
//!             A_eq x  = b_eq
//! ```
//!
//! and the solver reports row multipliers, a Farkas certificate on
//! infeasibility, or an unbounded ray.

use nalgebra::{DMatrix, DVector};

/// A linear program over free variables.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub cost: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl LpProblem {
    /// `min c'x` subject to `a_ub x <= b_ub` only.
    pub fn minimize(cost: DVector<f64>, a_ub: DMatrix<f64>, b_ub: DVector<f64>) -> Self {
        let n = cost.len();
        LpProblem {
            cost,
            a_ub,
            b_ub,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }
}

/// Primal-dual solution of a feasible, bounded LP.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// Multipliers of the `<=` rows, nonnegative.
    pub duals_ub: DVector<f64>,
    /// Multipliers of the equality rows.
    pub duals_eq: DVector<f64>,
}

/// Outcome of a simplex run.
#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    /// `y >= 0` on the `<=` rows with `A_ub'y_ub + A_eq'y_eq = 0` and
    /// `b_ub'y_ub + b_eq'y_eq < 0`.
    Infeasible {
        farkas_ub: DVector<f64>,
        farkas_eq: DVector<f64>,
    },
    /// Direction `r` with `c'r < 0`, `A_ub r <= 0`, `A_eq r = 0`.
    Unbounded { ray: DVector<f64> },
    IterationLimit,
}

impl LpOutcome {
    pub fn optimal(&self) -> Option<&LpSolution> {
        match self {
            LpOutcome::Optimal(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, LpOutcome::Infeasible { .. })
    }
}

const RC_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const PHASE1_TOL: f64 = 1e-7;

struct Tableau {
    /// m x (ncols + 1), last column is the rhs.
    t: DMatrix<f64>,
    /// Reduced-cost row, length ncols + 1 (last entry = -objective).
    obj: DVector<f64>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let m = self.t.nrows();
        let piv = self.t[(row, col)];
        let w = self.ncols + 1;
        for j in 0..w {
            self.t[(row, j)] /= piv;
        }
        for i in 0..m {
            if i == row {
                continue;
            }
            let f = self.t[(i, col)];
            if f != 0.0 {
                for j in 0..w {
                    let v = self.t[(row, j)] * f;
                    self.t[(i, j)] -= v;
                }
            }
        }
        let f = self.obj[col];
        if f != 0.0 {
            for j in 0..w {
                let v = self.t[(row, j)] * f;
                self.obj[j] -= v;
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex on the current objective row. `allowed` masks columns that
    /// may enter. Returns `Ok(())` at optimality or `Err(col)` with an
    /// unbounded entering column.
    fn run(&mut self, allowed: &[bool], max_iter: usize) -> Result<(), SimplexStop> {
        let m = self.t.nrows();
        let mut stall = 0usize;
        let mut last_obj = self.obj[self.ncols];
        for _ in 0..max_iter {
            let bland = stall > 2 * (m + self.ncols) + 20;
            // Entering column: most negative reduced cost, or Bland.
            let mut enter = None;
            let mut best = -RC_TOL;
            for j in 0..self.ncols {
                if !allowed[j] {
                    continue;
                }
                let rc = self.obj[j];
                if bland {
                    if rc < -RC_TOL {
                        enter = Some(j);
                        break;
                    }
                } else if rc < best {
                    best = rc;
                    enter = Some(j);
                }
            }
            let Some(col) = enter else {
                return Ok(());
            };
            // Ratio test.
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.t[(i, col)];
                if a > PIVOT_TOL {
                    let ratio = self.t[(i, self.ncols)] / a;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-12
                                || (ratio < lr + 1e-12
                                    && (if bland {
                                        self.basis[i] < self.basis[li]
                                    } else {
                                        a > self.t[(li, col)]
                                    }))
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(SimplexStop::Unbounded(col));
            };
            self.pivot(row, col);
            let obj = self.obj[self.ncols];
            if obj > last_obj - 1e-12 {
                stall += 1;
            } else {
                stall = 0;
                last_obj = obj;
            }
        }
        Err(SimplexStop::IterationLimit)
    }
}

enum SimplexStop {
    Unbounded(usize),
    IterationLimit,
}

/// Solve an LP with the two-phase simplex method.
pub fn solve_lp(p: &LpProblem) -> LpOutcome {
    let n = p.cost.len();
    let m_ub = p.b_ub.len();
    let m_eq = p.b_eq.len();
    let m = m_ub + m_eq;
    assert_eq!(p.a_ub.nrows(), m_ub, "a_ub rows");
    assert_eq!(p.a_eq.nrows(), m_eq, "a_eq rows");
    if m_ub > 0 {
        assert_eq!(p.a_ub.ncols(), n, "a_ub cols");
    }
    if m_eq > 0 {
        assert_eq!(p.a_eq.ncols(), n, "a_eq cols");
    }

    // Columns: x+ (n) | x- (n) | slacks (m_ub) | artificials (as needed).
    let base_cols = 2 * n + m_ub;
    let mut sign = vec![1.0f64; m];
    let mut needs_artificial = vec![false; m];
    for i in 0..m_ub {
        if p.b_ub[i] < 0.0 {
            sign[i] = -1.0;
            needs_artificial[i] = true;
        }
    }
    for i in 0..m_eq {
        if p.b_eq[i] < 0.0 {
            sign[m_ub + i] = -1.0;
        }
        needs_artificial[m_ub + i] = true;
    }
    let n_art = needs_artificial.iter().filter(|&&b| b).count();
    let ncols = base_cols + n_art;

    let mut t = DMatrix::<f64>::zeros(m, ncols + 1);
    let mut basis = vec![usize::MAX; m];
    let mut art_of_row = vec![usize::MAX; m];
    let mut next_art = base_cols;
    for i in 0..m {
        let (row, rhs) = if i < m_ub {
            (p.a_ub.row(i), p.b_ub[i])
        } else {
            (p.a_eq.row(i - m_ub), p.b_eq[i - m_ub])
        };
        let s = sign[i];
        for j in 0..n {
            let v = s * row[j];
            t[(i, j)] = v;
            t[(i, n + j)] = -v;
        }
        if i < m_ub {
            t[(i, 2 * n + i)] = s;
        }
        t[(i, ncols)] = s * rhs;
        if needs_artificial[i] {
            t[(i, next_art)] = 1.0;
            basis[i] = next_art;
            art_of_row[i] = next_art;
            next_art += 1;
        } else {
            // slack with +1 coefficient is a valid starting basic variable
            basis[i] = 2 * n + i;
        }
    }

    let max_iter = 200 * (m + ncols) + 2000;
    let mut tab = Tableau {
        t,
        obj: DVector::zeros(ncols + 1),
        basis,
        ncols,
    };

    // Phase 1: minimize the sum of artificials.
    if n_art > 0 {
        let mut obj = DVector::<f64>::zeros(ncols + 1);
        for j in base_cols..ncols {
            obj[j] = 1.0;
        }
        // Price out the basic artificials.
        for i in 0..m {
            if tab.basis[i] >= base_cols {
                for j in 0..=ncols {
                    let v = tab.t[(i, j)];
                    obj[j] -= v;
                }
            }
        }
        tab.obj = obj;
        let allowed = vec![true; ncols];
        match tab.run(&allowed, max_iter) {
            Ok(()) => {}
            Err(SimplexStop::Unbounded(_)) => unreachable!("phase 1 objective bounded below"),
            Err(SimplexStop::IterationLimit) => return LpOutcome::IterationLimit,
        }
        let phase1 = -tab.obj[ncols];
        let scale = 1.0 + p.b_ub.amax().max(if m_eq > 0 { p.b_eq.amax() } else { 0.0 });
        if phase1 > PHASE1_TOL * scale {
            // Farkas certificate from the phase-1 duals. The reduced cost of
            // slack i equals -sign_i * pi_i, which is exactly the conventional
            // multiplier of the i-th <= row.
            let mut farkas_ub = DVector::zeros(m_ub);
            for i in 0..m_ub {
                farkas_ub[i] = tab.obj[2 * n + i].max(0.0);
            }
            let mut farkas_eq = DVector::zeros(m_eq);
            for i in 0..m_eq {
                // pi_row recovered from the artificial column: rc(art) = 1 - pi.
                let art = art_of_row[m_ub + i];
                let pi = 1.0 - tab.obj[art];
                farkas_eq[i] = -sign[m_ub + i] * pi;
            }
            return LpOutcome::Infeasible { farkas_ub, farkas_eq };
        }
    }

    // Phase 2: original objective; artificials may not re-enter.
    let mut obj = DVector::<f64>::zeros(ncols + 1);
    for j in 0..n {
        obj[j] = p.cost[j];
        obj[n + j] = -p.cost[j];
    }
    for i in 0..m {
        let b = tab.basis[i];
        let c_b = if b < n {
            p.cost[b]
        } else if b < 2 * n {
            -p.cost[b - n]
        } else {
            0.0
        };
        if c_b != 0.0 {
            for j in 0..=ncols {
                let v = tab.t[(i, j)];
                obj[j] -= c_b * v;
            }
        }
    }
    tab.obj = obj;
    let mut allowed = vec![true; ncols];
    for a in allowed.iter_mut().skip(base_cols) {
        *a = false;
    }
    match tab.run(&allowed, max_iter) {
        Ok(()) => {}
        Err(SimplexStop::Unbounded(col)) => {
            let mut ray = DVector::zeros(n);
            if col < n {
                ray[col] = 1.0;
            } else if col < 2 * n {
                ray[col - n] = -1.0;
            }
            for i in 0..m {
                let d = -tab.t[(i, col)];
                let b = tab.basis[i];
                if b < n {
                    ray[b] += d;
                } else if b < 2 * n {
                    ray[b - n] -= d;
                }
            }
            return LpOutcome::Unbounded { ray };
        }
        Err(SimplexStop::IterationLimit) => return LpOutcome::IterationLimit,
    }

    // Extract the primal point and the row duals.
    let mut x = DVector::zeros(n);
    for i in 0..m {
        let b = tab.basis[i];
        let v = tab.t[(i, ncols)];
        if b < n {
            x[b] += v;
        } else if b < 2 * n {
            x[b - n] -= v;
        }
    }
    let mut duals_ub = DVector::zeros(m_ub);
    for i in 0..m_ub {
        duals_ub[i] = tab.obj[2 * n + i].max(0.0);
    }
    let mut duals_eq = DVector::zeros(m_eq);
    for i in 0..m_eq {
        if art_of_row[m_ub + i] != usize::MAX {
            let art = art_of_row[m_ub + i];
            // rc(art) = 0 - pi during phase 2.
            let pi = -tab.obj[art];
            duals_eq[i] = -sign[m_ub + i] * pi;
        }
    }
    let value = p.cost.dot(&x);
    LpOutcome::Optimal(LpSolution {
        x,
        value,
        duals_ub,
        duals_eq,
    })
}
