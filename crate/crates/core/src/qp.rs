//! Dual active-set engine for the subproblem QPs.
//!
//! The engine works on the dual side: every iterate is a dual-feasible
//! multiplier vector, the dual objective ascends monotonically, a solve can
//! stop early as soon as the objective strictly exceeds a caller cutoff, and
//! primal infeasibility surfaces as an unbounded dual ray which doubles as a
//! scalable infeasibility certificate.
//!
//! Linear algebra: working-set changes are applied as a border around one
//! factored base KKT system,
//!
//! ```text
//! K0 = [ 2*Hbar  C0' ],   C0 = [ equality rows; seed rows ]
//!      [ C0      0   ]
//! ```
//!
//! where the seed rows are a minimal set of inequality rows covering the
//! cost-flat directions of the dynamics null space, so `K0` is nonsingular
//! even for rank-deficient weights. Activating a non-seed row appends its
//! column to the border; releasing a seed row appends a unit column that
//! relaxes its equation and pins its multiplier at zero. Each iteration then
//! factors only the small border Schur complement, with columns of
//! `K0^{-1}` cached per row across the whole branch-and-bound tree.

use crate::dual::{check_dual_feasible, dual_objective, DualSolution, InfeasibilityCertificate};
use crate::model::StageData;
use crate::subproblem::SubproblemQp;
use crate::{Error, Result};
use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};
use std::collections::HashMap;
use std::sync::Arc;

const FEAS_TOL: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-10;
const RAY_SLOPE_TOL: f64 = 1e-9;
const STALL_LIMIT: usize = 40;

/// Primal trajectory of a solved relaxation.
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    /// `x_0..=x_T`.
    pub states: Vec<DVector<f64>>,
    /// `u_0..u_{T-1}` (continuous and binary entries stacked).
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
}

impl PrimalSolution {
    /// Relaxed binary values `V u_t` per stage.
    pub fn binary_values(&self, stage: &StageData) -> Vec<DVector<f64>> {
        self.inputs.iter().map(|u| &stage.model.v * u).collect()
    }
}

/// Outcome of one QP solve.
#[derive(Debug, Clone)]
pub enum SolveResult {
    Optimal {
        primal: PrimalSolution,
        dual: DualSolution,
        objective: f64,
    },
    Infeasible {
        certificate: InfeasibilityCertificate,
        /// Certificate objective: positive and scalable.
        objective: f64,
    },
    CutoffReached {
        dual: DualSolution,
        objective: f64,
    },
    IterationLimit {
        dual: DualSolution,
        objective: f64,
    },
}

impl SolveResult {
    /// Lower bound carried by the result (`inf` for proven infeasibility).
    pub fn objective(&self) -> f64 {
        match self {
            SolveResult::Optimal { objective, .. } => *objective,
            SolveResult::Infeasible { .. } => f64::INFINITY,
            SolveResult::CutoffReached { objective, .. } => *objective,
            SolveResult::IterationLimit { objective, .. } => *objective,
        }
    }

    pub fn dual_point(&self) -> &DualSolution {
        match self {
            SolveResult::Optimal { dual, .. } => dual,
            SolveResult::Infeasible { certificate, .. } => certificate.solution(),
            SolveResult::CutoffReached { dual, .. } => dual,
            SolveResult::IterationLimit { dual, .. } => dual,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum RowKind {
    Domain { t: usize, facet: usize },
    Hi { t: usize, j: usize },
    Lo { t: usize, j: usize },
}

#[derive(Debug, Clone)]
struct IneqRow {
    cols: Vec<usize>,
    /// Unit-norm gradient; the original row is `scale` times this.
    vals: Vec<f64>,
    scale: f64,
    kind: RowKind,
}

impl IneqRow {
    fn normalized(cols: Vec<usize>, vals: Vec<f64>, kind: RowKind) -> IneqRow {
        let scale = vals.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        IneqRow {
            cols,
            vals: vals.iter().map(|v| v / scale).collect(),
            scale,
            kind,
        }
    }

    fn dot(&self, x: &DVector<f64>) -> f64 {
        self.cols
            .iter()
            .zip(&self.vals)
            .map(|(&c, &v)| v * x[c])
            .sum()
    }
}

struct Layout {
    n_x: usize,
    n_in: usize,
    horizon: usize,
    n_p: usize,
    m_eq: usize,
    rows: Vec<IneqRow>,
    /// Row indices of the binary bound pair `(hi, lo)` per `(t, j)`.
    bound_rows: Vec<(usize, usize)>,
    rho_off: Vec<usize>,
    sigma_off: Vec<usize>,
    n_rs: usize,
}

impl Layout {
    fn m_u(&self) -> usize {
        if self.horizon == 0 {
            0
        } else {
            self.bound_rows.len() / self.horizon
        }
    }

    fn off_x(&self, t: usize) -> usize {
        t * (self.n_x + self.n_in)
    }

    fn off_u(&self, t: usize) -> usize {
        self.off_x(t) + self.n_x
    }

    fn new(stage: &StageData) -> Self {
        let n_x = stage.model.n_x;
        let n_in = stage.model.input_dim();
        let m_u = stage.model.m_u;
        let horizon = stage.horizon;
        let mut layout = Layout {
            n_x,
            n_in,
            horizon,
            n_p: (horizon + 1) * n_x + horizon * n_in,
            m_eq: (horizon + 1) * n_x,
            rows: Vec::new(),
            bound_rows: Vec::new(),
            rho_off: Vec::new(),
            sigma_off: Vec::new(),
            n_rs: 0,
        };

        for t in 0..horizon {
            let dom = &stage.d[t];
            let ox = layout.off_x(t);
            let ou = layout.off_u(t);
            for facet in 0..dom.num_facets() {
                let mut cols = Vec::new();
                let mut vals = Vec::new();
                for c in 0..n_x {
                    let v = dom.matrix()[(facet, c)];
                    if v != 0.0 {
                        cols.push(ox + c);
                        vals.push(v);
                    }
                }
                for c in 0..n_in {
                    let v = dom.matrix()[(facet, n_x + c)];
                    if v != 0.0 {
                        cols.push(ou + c);
                        vals.push(v);
                    }
                }
                layout.rows.push(IneqRow::normalized(cols, vals, RowKind::Domain { t, facet }));
            }
            for j in 0..m_u {
                let (cols, vals) = selector_row(&stage.model.v, j, ou);
                let hi_row = layout.rows.len();
                layout
                    .rows
                    .push(IneqRow::normalized(cols.clone(), vals.clone(), RowKind::Hi { t, j }));
                layout.rows.push(IneqRow::normalized(
                    cols,
                    vals.iter().map(|v| -v).collect(),
                    RowKind::Lo { t, j },
                ));
                layout.bound_rows.push((hi_row, hi_row + 1));
            }
        }

        let mut off = 0;
        for t in 0..=horizon {
            layout.rho_off.push(off);
            off += stage.q[t].nrows();
        }
        for t in 0..horizon {
            layout.sigma_off.push(off);
            off += stage.r[t].nrows();
        }
        layout.n_rs = off;
        layout
    }

    fn rhs(&self, row: usize, qp: &SubproblemQp) -> f64 {
        let raw = match self.rows[row].kind {
            RowKind::Domain { t, facet } => qp.stage.d[t].offsets()[facet],
            RowKind::Hi { t, j } => qp.v_hi(t)[j],
            RowKind::Lo { t, j } => -qp.v_lo(t)[j],
        };
        raw / self.rows[row].scale
    }
}

fn selector_row(v: &DMatrix<f64>, j: usize, ou: usize) -> (Vec<usize>, Vec<f64>) {
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for c in 0..v.ncols() {
        let e = v[(j, c)];
        if e != 0.0 {
            cols.push(ou + c);
            vals.push(e);
        }
    }
    (cols, vals)
}

/// Immutable per-stage-data core shared by all engine instances.
struct SolverCore {
    stage: Arc<StageData>,
    layout: Layout,
    e: DMatrix<f64>,
    seeds: Vec<usize>,
    seed_of_row: HashMap<usize, usize>,
    base_lu: LU<f64, Dyn, Dyn>,
    n_base: usize,
    /// Orthonormal basis of the cost-flat dynamics-free directions; the
    /// active set must always contain rows covering this subspace or the
    /// working-set systems go singular.
    flat_basis: Vec<DVector<f64>>,
    /// Primal columns of binaries that are absent from the dynamics and the
    /// input weight, per (stage, binary): such entries can be snapped to an
    /// integer inside their feasible range without changing anything else.
    snappable: Vec<Option<usize>>,
    /// Inequality rows touching each snappable column.
    col_rows: HashMap<usize, Vec<(usize, f64)>>,
}

impl SolverCore {
    fn new(stage: Arc<StageData>) -> Result<Self> {
        let layout = Layout::new(&stage);
        let n_p = layout.n_p;
        let m_eq = layout.m_eq;
        let model = &stage.model;

        let mut e = DMatrix::<f64>::zeros(m_eq, n_p);
        for c in 0..layout.n_x {
            e[(c, c)] = 1.0;
        }
        for t in 0..layout.horizon {
            let row0 = (t + 1) * layout.n_x;
            let ox = layout.off_x(t);
            let ou = layout.off_u(t);
            let oxn = layout.off_x(t + 1);
            for r in 0..layout.n_x {
                e[(row0 + r, oxn + r)] = 1.0;
                for c in 0..layout.n_x {
                    e[(row0 + r, ox + c)] = -model.a[(r, c)];
                }
                for c in 0..layout.n_in {
                    e[(row0 + r, ou + c)] = -model.b[(r, c)];
                }
            }
        }

        let hbar = assemble_hessian(&stage, &layout);
        let (seeds, flat_basis) = select_seed_rows(&layout, &hbar, &e)?;
        let seed_of_row: HashMap<usize, usize> =
            seeds.iter().enumerate().map(|(k, &r)| (r, k)).collect();

        let n_base = n_p + m_eq + seeds.len();
        let mut k0 = DMatrix::<f64>::zeros(n_base, n_base);
        k0.view_mut((0, 0), (n_p, n_p)).copy_from(&(2.0 * &hbar));
        k0.view_mut((n_p, 0), (m_eq, n_p)).copy_from(&e);
        k0.view_mut((0, n_p), (n_p, m_eq)).copy_from(&e.transpose());
        for (k, &row) in seeds.iter().enumerate() {
            let r = n_p + m_eq + k;
            let ir = &layout.rows[row];
            for (&c, &v) in ir.cols.iter().zip(&ir.vals) {
                k0[(r, c)] = v;
                k0[(c, r)] = v;
            }
        }
        let k0_copy = k0.clone();
        let base_lu = k0.lu();
        let probe = DVector::from_fn(n_base, |i, _| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5);
        let sol = base_lu
            .solve(&probe)
            .ok_or_else(|| Error::Engine("base KKT system is singular".into()))?;
        let res = (&k0_copy * &sol - &probe).amax();
        if !res.is_finite() || res > 1e-6 {
            return Err(Error::Engine(format!(
                "base KKT factorization is unreliable (residual {res:.2e})"
            )));
        }

        let mut snappable = Vec::with_capacity(layout.horizon * layout.m_u());
        for t in 0..layout.horizon {
            for j in 0..stage.model.m_u {
                let sel = (0..stage.model.input_dim())
                    .find(|&c| stage.model.v[(j, c)] == 1.0);
                let ok = sel.map_or(false, |c| {
                    (0..stage.model.n_x).all(|r| stage.model.b[(r, c)] == 0.0)
                        && (0..stage.r[t].nrows()).all(|r| stage.r[t][(r, c)] == 0.0)
                });
                snappable.push(match (ok, sel) {
                    (true, Some(c)) => Some(layout.off_u(t) + c),
                    _ => None,
                });
            }
        }
        let mut col_rows: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        for snap in snappable.iter().flatten() {
            col_rows.insert(*snap, Vec::new());
        }
        for (i, row) in layout.rows.iter().enumerate() {
            for (&c, &v) in row.cols.iter().zip(&row.vals) {
                if let Some(list) = col_rows.get_mut(&c) {
                    list.push((i, v));
                }
            }
        }
        Ok(SolverCore {
            stage,
            layout,
            e,
            seeds,
            seed_of_row,
            base_lu,
            n_base,
            flat_basis,
            snappable,
            col_rows,
        })
    }
}

fn assemble_hessian(stage: &StageData, layout: &Layout) -> DMatrix<f64> {
    let mut h = DMatrix::<f64>::zeros(layout.n_p, layout.n_p);
    for t in 0..=layout.horizon {
        let q = &stage.q[t];
        let block = q.transpose() * q;
        h.view_mut((layout.off_x(t), layout.off_x(t)), (layout.n_x, layout.n_x))
            .copy_from(&block);
    }
    for t in 0..layout.horizon {
        let r = &stage.r[t];
        let block = r.transpose() * r;
        h.view_mut(
            (layout.off_u(t), layout.off_u(t)),
            (layout.n_in, layout.n_in),
        )
        .copy_from(&block);
    }
    h
}

/// Picks a minimal set of inequality rows whose gradients cover the
/// directions flat for the cost and free for the dynamics, making the base
/// KKT matrix nonsingular. Binary lower-bound rows are preferred.
fn select_seed_rows(
    layout: &Layout,
    hbar: &DMatrix<f64>,
    e: &DMatrix<f64>,
) -> Result<(Vec<usize>, Vec<DVector<f64>>)> {
    let n_p = layout.n_p;
    let gram = hbar + e.transpose() * e;
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.amax().max(1.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..n_p {
        if eig.eigenvalues[i] <= 1e-13 * lmax {
            basis.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    let kappa = basis.len();
    if kappa == 0 {
        return Ok((Vec::new(), basis));
    }

    let mut order: Vec<usize> = Vec::with_capacity(layout.rows.len());
    for pass in 0..3 {
        for (i, row) in layout.rows.iter().enumerate() {
            let take = matches!(
                (pass, row.kind),
                (0, RowKind::Lo { .. }) | (1, RowKind::Hi { .. }) | (2, RowKind::Domain { .. })
            );
            if take {
                order.push(i);
            }
        }
    }

    let mut picked = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for &i in &order {
        if picked.len() == kappa {
            break;
        }
        let row = &layout.rows[i];
        let mut proj = DVector::<f64>::zeros(kappa);
        for (k, b) in basis.iter().enumerate() {
            proj[k] = row.dot(b);
        }
        for q in &ortho {
            let c = q.dot(&proj);
            proj -= q * c;
        }
        if proj.norm() > 1e-7 {
            let n = proj.norm();
            ortho.push(proj / n);
            picked.push(i);
        }
    }
    if picked.len() < kappa {
        return Err(Error::Engine(format!(
            "constraint rows cover only {} of {kappa} cost-flat directions; the \
             relaxation objective would be unbounded on some faces",
            picked.len()
        )));
    }
    picked.sort_unstable();
    Ok((picked, basis))
}

/// Engine configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Iteration cap as a multiple of the number of constraint rows.
    pub max_iter_factor: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iter_factor: 10 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BorderKind {
    /// Activate a non-seed inequality row.
    Add(usize),
    /// Release the seed with the given seed index.
    Del(usize),
}

struct Border {
    kind: BorderKind,
    col: Arc<DVector<f64>>,
}

/// Per-solve instrumentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EngineStats {
    pub iterations: usize,
    pub schur_svd_fallbacks: usize,
    pub dense_fallbacks: usize,
    pub border_peak: usize,
    pub repairs: usize,
}

/// A QP engine instance. Holds per-thread caches; `clone` is cheap and each
/// clone may run concurrently with the others.
pub struct SubproblemSolver {
    core: Arc<SolverCore>,
    opts: SolverOptions,
    add_cols: Vec<Option<Arc<DVector<f64>>>>,
    del_cols: Vec<Option<Arc<DVector<f64>>>>,
    projector: Option<Arc<StationarityProjector>>,
    stats: EngineStats,
}

impl Clone for SubproblemSolver {
    fn clone(&self) -> Self {
        SubproblemSolver {
            core: Arc::clone(&self.core),
            opts: self.opts,
            add_cols: vec![None; self.core.layout.rows.len()],
            del_cols: vec![None; self.core.seeds.len()],
            projector: self.projector.clone(),
            stats: EngineStats::default(),
        }
    }
}

impl SubproblemSolver {
    pub fn new(stage: Arc<StageData>) -> Result<Self> {
        let core = Arc::new(SolverCore::new(stage)?);
        let n_rows = core.layout.rows.len();
        let n_seeds = core.seeds.len();
        Ok(SubproblemSolver {
            core,
            opts: SolverOptions::default(),
            add_cols: vec![None; n_rows],
            del_cols: vec![None; n_seeds],
            projector: None,
            stats: EngineStats::default(),
        })
    }

    pub fn with_options(mut self, opts: SolverOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn stage(&self) -> &Arc<StageData> {
        &self.core.stage
    }

    /// Instrumentation of the most recent `solve_qp` call.
    pub fn last_stats(&self) -> EngineStats {
        self.stats
    }

    fn add_col(&mut self, row: usize) -> Arc<DVector<f64>> {
        if let Some(c) = &self.add_cols[row] {
            return Arc::clone(c);
        }
        let mut rhs = DVector::<f64>::zeros(self.core.n_base);
        let ir = &self.core.layout.rows[row];
        for (&c, &v) in ir.cols.iter().zip(&ir.vals) {
            rhs[c] = v;
        }
        let sol = self.core.base_lu.solve(&rhs).expect("base factor verified");
        let arc = Arc::new(sol);
        self.add_cols[row] = Some(Arc::clone(&arc));
        arc
    }

    fn del_col(&mut self, seed_idx: usize) -> Arc<DVector<f64>> {
        if let Some(c) = &self.del_cols[seed_idx] {
            return Arc::clone(c);
        }
        let mut rhs = DVector::<f64>::zeros(self.core.n_base);
        rhs[self.core.layout.n_p + self.core.layout.m_eq + seed_idx] = 1.0;
        let sol = self.core.base_lu.solve(&rhs).expect("base factor verified");
        let arc = Arc::new(sol);
        self.del_cols[seed_idx] = Some(Arc::clone(&arc));
        arc
    }

    fn border_dot(&self, kind: BorderKind, w: &DVector<f64>) -> f64 {
        match kind {
            BorderKind::Add(row) => self.core.layout.rows[row].dot(w),
            BorderKind::Del(s) => w[self.core.layout.n_p + self.core.layout.m_eq + s],
        }
    }

    fn toggle(&mut self, border: &mut Vec<Border>, row: usize) {
        match self.core.seed_of_row.get(&row).copied() {
            Some(k) => {
                if let Some(pos) = border.iter().position(|b| b.kind == BorderKind::Del(k)) {
                    border.remove(pos);
                } else {
                    let col = self.del_col(k);
                    border.push(Border {
                        kind: BorderKind::Del(k),
                        col,
                    });
                }
            }
            None => {
                if let Some(pos) = border.iter().position(|b| b.kind == BorderKind::Add(row)) {
                    border.remove(pos);
                } else {
                    let col = self.add_col(row);
                    border.push(Border {
                        kind: BorderKind::Add(row),
                        col,
                    });
                }
            }
        }
    }

    /// Solve the relaxation `qp`, optionally warm-started at a dual point,
    /// stopping early once the ascending dual objective strictly exceeds
    /// `cutoff`.
    pub fn solve_qp(
        &mut self,
        qp: &SubproblemQp,
        warm: Option<&DualSolution>,
        cutoff: Option<f64>,
    ) -> Result<SolveResult> {
        let layout_rows = self.core.layout.rows.len();
        let max_iter = self.opts.max_iter_factor * (layout_rows + self.core.layout.m_eq) + 100;
        let cutoff = cutoff.unwrap_or(f64::INFINITY);

        let w0 = {
            let core = &self.core;
            let mut r0 = DVector::<f64>::zeros(core.n_base);
            for i in 0..core.layout.n_x {
                r0[core.layout.n_p + i] = qp.x_tau[i];
            }
            for (k, &row) in core.seeds.iter().enumerate() {
                r0[core.layout.n_p + core.layout.m_eq + k] = core.layout.rhs(row, qp);
            }
            core.base_lu.solve(&r0).expect("base factor verified")
        };

        self.stats = EngineStats::default();
        // A solve that gets numerically stuck from a warm start is retried
        // once from the cold seed state before giving up.
        let mut attempts: Vec<Option<&DualSolution>> = vec![None];
        if warm.is_some() {
            attempts.insert(0, warm);
        }
        let mut last_bail: Option<SolveResult> = None;
        'attempt: for start in attempts {
            let mut st = self.init_state(qp, start);
            if st.last_objective > cutoff {
                return Ok(SolveResult::CutoffReached {
                    objective: st.last_objective,
                    dual: st.to_dual(&self.core.layout, &self.core.stage),
                });
            }
            let seeds = self.core.seeds.clone();
            let mut border: Vec<Border> = Vec::new();
            for (k, &row) in seeds.iter().enumerate() {
                if !st.active[row] {
                    let col = self.del_col(k);
                    border.push(Border {
                        kind: BorderKind::Del(k),
                        col,
                    });
                }
            }
            for row in 0..layout_rows {
                if st.active[row] && !self.core.seed_of_row.contains_key(&row) {
                    let col = self.add_col(row);
                    border.push(Border {
                        kind: BorderKind::Add(row),
                        col,
                    });
                }
            }

        let mut stalls = 0usize;
        for _iter in 0..max_iter {
            self.stats.iterations += 1;
            self.stats.border_peak = self.stats.border_peak.max(border.len());
            if self.stats.schur_svd_fallbacks > 50 + self.core.layout.rows.len() / 2 {
                // The working set keeps going singular; give up on this
                // start with the (still valid) current bound.
                last_bail = Some(SolveResult::IterationLimit {
                    objective: st.last_objective,
                    dual: st.to_dual(&self.core.layout, &self.core.stage),
                });
                continue 'attempt;
            }
            let bland = stalls > STALL_LIMIT;
            let mut outcome = self.solve_eqp(qp, &w0, &border);
            if let EqpOutcome::Ray(dir) = &outcome {
                let (_, blocker) = st.max_ray_step(dir, bland);
                if blocker.is_none() {
                    match self.finish_infeasible(qp, dir.clone(), &st) {
                        Some(res) => return Ok(res),
                        None => {
                            // Ray too imprecise to certify; the bound so far
                            // stays valid.
                            return Ok(SolveResult::IterationLimit {
                                objective: st.last_objective,
                                dual: st.to_dual(&self.core.layout, &self.core.stage),
                            });
                        }
                    }
                }
            }
            if matches!(outcome, EqpOutcome::Stuck) {
                outcome = self.solve_eqp_dense(qp, &st);
                if let EqpOutcome::Ray(dir) = &outcome {
                    let (_, blocker) = st.max_ray_step(dir, bland);
                    if blocker.is_none() {
                        match self.finish_infeasible(qp, dir.clone(), &st) {
                            Some(res) => return Ok(res),
                            None => outcome = EqpOutcome::Stuck,
                        }
                    }
                }
            }
            match outcome {
                EqpOutcome::Point(target) => {
                    let (alpha, blocker) = st.max_step(&target, bland);
                    let movement = st.lerp_to(&target, alpha);
                    let obj = st.objective(qp, &self.core.layout);
                    debug_assert!(
                        obj >= st.last_objective - 1e-4 * (1.0 + st.last_objective.abs()),
                        "dual objective regressed: {} -> {obj}",
                        st.last_objective
                    );
                    st.last_objective = obj;
                    if obj > cutoff {
                        return Ok(SolveResult::CutoffReached {
                            objective: obj,
                            dual: st.to_dual(&self.core.layout, &self.core.stage),
                        });
                    }
                    if let Some(row) = blocker {
                        st.active[row] = false;
                        st.y[row] = 0.0;
                        self.toggle(&mut border, row);
                        stalls = if movement <= 1e-12 { stalls + 1 } else { 0 };
                        continue;
                    }
                    match st.most_violated(qp, &self.core.layout, bland) {
                        Some((row, _slack)) => {
                            st.active[row] = true;
                            self.toggle(&mut border, row);
                            stalls = if movement <= 1e-12 { stalls + 1 } else { 0 };
                        }
                        None => return Ok(self.finish_optimal(qp, &st)),
                    }
                }
                EqpOutcome::Ray(dir) => {
                    let (alpha, blocker) = st.max_ray_step(&dir, bland);
                    match blocker {
                        Some(row) => {
                            st.ray_step(&dir, alpha);
                            let obj = st.objective(qp, &self.core.layout);
                            debug_assert!(
                                obj >= st.last_objective - 1e-4 * (1.0 + st.last_objective.abs())
                            );
                            st.last_objective = obj;
                            st.active[row] = false;
                            st.y[row] = 0.0;
                            self.toggle(&mut border, row);
                            if obj > cutoff {
                                return Ok(SolveResult::CutoffReached {
                                    objective: obj,
                                    dual: st.to_dual(&self.core.layout, &self.core.stage),
                                });
                            }
                            stalls = if alpha <= 1e-12 { stalls + 1 } else { 0 };
                        }
                        None => {
                            last_bail = Some(SolveResult::IterationLimit {
                                objective: st.last_objective,
                                dual: st.to_dual(&self.core.layout, &self.core.stage),
                            });
                            continue 'attempt;
                        }
                    }
                }
                EqpOutcome::Stuck => {
                    last_bail = Some(SolveResult::IterationLimit {
                        objective: st.last_objective,
                        dual: st.to_dual(&self.core.layout, &self.core.stage),
                    });
                    continue 'attempt;
                }
            }
        }
        last_bail = Some(SolveResult::IterationLimit {
            objective: st.last_objective,
            dual: st.to_dual(&self.core.layout, &self.core.stage),
        });
        }
        Ok(last_bail.expect("at least one attempt ran"))
    }

    fn solve_eqp(&mut self, qp: &SubproblemQp, w0: &DVector<f64>, border: &[Border]) -> EqpOutcome {
        let k = border.len();
        if k == 0 {
            return EqpOutcome::Point(self.target_from(qp, w0.clone(), border, &DVector::zeros(0)));
        }
        let mut s = DMatrix::<f64>::zeros(k, k);
        let mut g = DVector::<f64>::zeros(k);
        for (a, ba) in border.iter().enumerate() {
            for (b, bb) in border.iter().enumerate() {
                s[(a, b)] = self.border_dot(ba.kind, &bb.col);
            }
            let rb = match ba.kind {
                BorderKind::Add(row) => self.core.layout.rhs(row, qp),
                BorderKind::Del(_) => 0.0,
            };
            g[a] = self.border_dot(ba.kind, w0) - rb;
        }
        for a in 0..k {
            for b in (a + 1)..k {
                let m = 0.5 * (s[(a, b)] + s[(b, a)]);
                s[(a, b)] = m;
                s[(b, a)] = m;
            }
        }

        let lu = s.clone().lu();
        if let Some(t) = lu.solve(&g) {
            let res = (&s * &t - &g).amax();
            // The tolerance must not scale with the solution magnitude:
            // a singular system "solved" with a huge vector is backward
            // stable yet useless.
            if t.amax() < 1e8 && res <= 1e-8 * (1.0 + g.amax()) {
                return EqpOutcome::Point(self.target_from(qp, w0.clone(), border, &t));
            }
        }

        // Near-singular Schur complement. A rank-revealing decomposition
        // separates consistent degeneracy (any exact solution is a valid
        // stationary point) from inconsistency, which corresponds to an
        // unbounded dual ray along a null direction with a nonzero
        // right-hand-side component.
        self.stats.schur_svd_fallbacks += 1;
        let svd = s.clone().svd(true, true);
        let smax = svd.singular_values.max().max(1e-300);
        let tol = (PIVOT_TOL * smax).max(1e-14);
        let v_t = svd.v_t.as_ref().expect("svd with v");
        let g_norm = g.norm();
        let mut worst_perp = 0.0f64;
        let mut worst_null: Option<DVector<f64>> = None;
        for i in 0..svd.singular_values.len() {
            if svd.singular_values[i] <= tol {
                let null = v_t.row(i).transpose();
                let p = null.dot(&g);
                if p.abs() > worst_perp {
                    worst_perp = p.abs();
                    worst_null = Some(if p > 0.0 { null } else { -null });
                }
            }
        }
        if worst_perp <= 1e-10 * (1.0 + g_norm) {
            // Consistent: take the minimum-norm solution.
            if let Ok(t) = svd.solve(&g, tol) {
                let res = (&s * &t - &g).amax();
                if res <= 1e-7 * (1.0 + g.amax()) {
                    return EqpOutcome::Point(self.target_from(qp, w0.clone(), border, &t));
                }
            }
            return EqpOutcome::Stuck;
        }
        // Inconsistent: ride the null direction whose dual objective slope
        // is positive.
        if let Some(null) = worst_null {
            let dir = self.direction_from(border, &null);
            let slope = dir.slope(qp, &self.core.layout);
            if slope.abs() > RAY_SLOPE_TOL * (1.0 + g_norm) {
                let null = if slope >= 0.0 { null } else { -null };
                return EqpOutcome::Ray(self.direction_from(border, &null));
            }
        }
        EqpOutcome::Stuck
    }

    /// From-scratch factorization of the current working-set KKT system;
    /// slower than the bordered path but with clean backward error. Used
    /// when the fast path cannot certify its own answer.
    fn solve_eqp_dense(&mut self, qp: &SubproblemQp, st: &IterState) -> EqpOutcome {
        self.stats.dense_fallbacks += 1;
        let layout = &self.core.layout;
        let core = &self.core;
        let active: Vec<usize> = (0..layout.rows.len()).filter(|&r| st.active[r]).collect();
        let k = active.len();
        let n = layout.n_p + layout.m_eq + k;
        let mut kkt = DMatrix::<f64>::zeros(n, n);
        let hbar = assemble_hessian(&core.stage, layout);
        kkt.view_mut((0, 0), (layout.n_p, layout.n_p))
            .copy_from(&(2.0 * &hbar));
        kkt.view_mut((layout.n_p, 0), (layout.m_eq, layout.n_p))
            .copy_from(&core.e);
        kkt.view_mut((0, layout.n_p), (layout.n_p, layout.m_eq))
            .copy_from(&core.e.transpose());
        for (i, &row) in active.iter().enumerate() {
            let r = layout.n_p + layout.m_eq + i;
            let ir = &layout.rows[row];
            for (&c, &v) in ir.cols.iter().zip(&ir.vals) {
                kkt[(r, c)] = v;
                kkt[(c, r)] = v;
            }
        }
        let mut rhs = DVector::<f64>::zeros(n);
        for i in 0..layout.n_x {
            rhs[layout.n_p + i] = qp.x_tau[i];
        }
        for (i, &row) in active.iter().enumerate() {
            rhs[layout.n_p + layout.m_eq + i] = layout.rhs(row, qp);
        }
        let mk_target = |sol: &DVector<f64>| -> Target {
            let x = sol.rows(0, layout.n_p).into_owned();
            let lambda = sol.rows(layout.n_p, layout.m_eq).into_owned();
            let mut y = vec![0.0f64; layout.rows.len()];
            for (i, &row) in active.iter().enumerate() {
                y[row] = sol[layout.n_p + layout.m_eq + i];
            }
            let mut rs = DVector::<f64>::zeros(layout.n_rs);
            let stage = &core.stage;
            for tt in 0..=layout.horizon {
                let xt = x.rows(layout.off_x(tt), layout.n_x);
                let r = &stage.q[tt] * xt * 2.0;
                rs.rows_mut(layout.rho_off[tt], r.len()).copy_from(&r);
            }
            for tt in 0..layout.horizon {
                let ut = x.rows(layout.off_u(tt), layout.n_in);
                let sg = &stage.r[tt] * ut * 2.0;
                rs.rows_mut(layout.sigma_off[tt], sg.len()).copy_from(&sg);
            }
            Target { x, lambda, y, rs }
        };
        let lu = kkt.clone().full_piv_lu();
        if let Some(sol) = lu.solve(&rhs) {
            let res = (&kkt * &sol - &rhs).amax();
            if sol.amax() < 1e10 && res <= 1e-8 * (1.0 + rhs.amax()) {
                return EqpOutcome::Point(mk_target(&sol));
            }
        }
        let svd = kkt.clone().svd(true, true);
        let smax = svd.singular_values.max().max(1e-300);
        let tol = (1e-11 * smax).max(1e-14);
        let v_t = svd.v_t.as_ref().expect("svd with v");
        let mut worst = 0.0f64;
        let mut worst_null: Option<DVector<f64>> = None;
        for i in 0..svd.singular_values.len() {
            if svd.singular_values[i] <= tol {
                let null = v_t.row(i).transpose();
                let p = null.dot(&rhs);
                if p.abs() > worst {
                    worst = p.abs();
                    worst_null = Some(null);
                }
            }
        }
        if worst <= 1e-9 * (1.0 + rhs.norm()) {
            if let Ok(sol) = svd.solve(&rhs, tol) {
                let res = (&kkt * &sol - &rhs).amax();
                if res <= 1e-7 * (1.0 + rhs.amax()) {
                    return EqpOutcome::Point(mk_target(&sol));
                }
            }
            return EqpOutcome::Stuck;
        }
        if let Some(null) = worst_null {
            let lambda = null.rows(layout.n_p, layout.m_eq).into_owned();
            let mut y = vec![0.0f64; layout.rows.len()];
            for (i, &row) in active.iter().enumerate() {
                y[row] = null[layout.n_p + layout.m_eq + i];
            }
            let dir = RayDir { lambda, y };
            let slope = dir.slope(qp, layout);
            if slope.abs() > RAY_SLOPE_TOL {
                let dir = if slope >= 0.0 {
                    dir
                } else {
                    RayDir {
                        lambda: -dir.lambda,
                        y: dir.y.iter().map(|v| -v).collect(),
                    }
                };
                return EqpOutcome::Ray(dir);
            }
        }
        EqpOutcome::Stuck
    }

    fn target_from(
        &self,
        qp: &SubproblemQp,
        mut w: DVector<f64>,
        border: &[Border],
        t: &DVector<f64>,
    ) -> Target {
        let core = &self.core;
        for (k, b) in border.iter().enumerate() {
            if t[k] != 0.0 {
                w.axpy(-t[k], &b.col, 1.0);
            }
        }
        let layout = &core.layout;
        let x = w.rows(0, layout.n_p).into_owned();
        let lambda = w.rows(layout.n_p, layout.m_eq).into_owned();
        let mut y = vec![0.0f64; layout.rows.len()];
        for (k, &row) in core.seeds.iter().enumerate() {
            y[row] = w[layout.n_p + layout.m_eq + k];
        }
        for (k, b) in border.iter().enumerate() {
            match b.kind {
                BorderKind::Add(row) => y[row] = t[k],
                BorderKind::Del(s) => y[core.seeds[s]] = 0.0,
            }
        }
        let mut rs = DVector::<f64>::zeros(layout.n_rs);
        let stage = &qp.stage;
        for tt in 0..=layout.horizon {
            let xt = x.rows(layout.off_x(tt), layout.n_x);
            let r = &stage.q[tt] * xt * 2.0;
            rs.rows_mut(layout.rho_off[tt], r.len()).copy_from(&r);
        }
        for tt in 0..layout.horizon {
            let ut = x.rows(layout.off_u(tt), layout.n_in);
            let sg = &stage.r[tt] * ut * 2.0;
            rs.rows_mut(layout.sigma_off[tt], sg.len()).copy_from(&sg);
        }
        Target { x, lambda, y, rs }
    }

    fn direction_from(&self, border: &[Border], null: &DVector<f64>) -> RayDir {
        let core = &self.core;
        let layout = &core.layout;
        let mut w = DVector::<f64>::zeros(core.n_base);
        for (k, b) in border.iter().enumerate() {
            if null[k] != 0.0 {
                w.axpy(-null[k], &b.col, 1.0);
            }
        }
        let lambda = w.rows(layout.n_p, layout.m_eq).into_owned();
        let mut y = vec![0.0f64; layout.rows.len()];
        for (k, &row) in core.seeds.iter().enumerate() {
            y[row] = w[layout.n_p + layout.m_eq + k];
        }
        for (k, b) in border.iter().enumerate() {
            match b.kind {
                BorderKind::Add(row) => y[row] = null[k],
                BorderKind::Del(s) => y[core.seeds[s]] = 0.0,
            }
        }
        RayDir { lambda, y }
    }

    fn finish_optimal(&self, qp: &SubproblemQp, st: &IterState) -> SolveResult {
        let layout = &self.core.layout;
        let stage = &self.core.stage;
        let x = &self.snap_flat_binaries(qp, st);
        let mut states = Vec::with_capacity(layout.horizon + 1);
        let mut inputs = Vec::with_capacity(layout.horizon);
        for t in 0..=layout.horizon {
            states.push(x.rows(layout.off_x(t), layout.n_x).into_owned());
        }
        for t in 0..layout.horizon {
            inputs.push(x.rows(layout.off_u(t), layout.n_in).into_owned());
        }
        let mut objective = 0.0;
        for t in 0..=layout.horizon {
            objective += (&stage.q[t] * &states[t]).norm_squared();
        }
        for t in 0..layout.horizon {
            objective += (&stage.r[t] * &inputs[t]).norm_squared();
        }
        let dual = st.to_dual(layout, stage);
        debug_assert!(
            (dual_objective(&dual, qp) - objective).abs() <= 1e-5 * (1.0 + objective.abs()),
            "duality gap: primal {objective}, dual {}",
            dual_objective(&dual, qp)
        );
        SolveResult::Optimal {
            primal: PrimalSolution {
                states,
                inputs,
                objective,
            },
            dual,
            objective,
        }
    }

    /// Moves cost-flat dynamics-free binary entries to an integer value
    /// whenever the rows at zero multiplier allow it; rows carrying a
    /// positive multiplier stay tight, so the point remains optimal and the
    /// duals remain a valid certificate.
    fn snap_flat_binaries(&self, qp: &SubproblemQp, st: &IterState) -> DVector<f64> {
        let mut x = st.x.as_ref().expect("optimal state has a primal point").clone();
        let layout = &self.core.layout;
        'next: for snap in self.core.snappable.iter().flatten() {
            let col = *snap;
            let cur = x[col];
            if (cur - cur.round()).abs() <= 1e-9 {
                continue;
            }
            let rows = &self.core.col_rows[&col];
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for &(row, coef) in rows {
                if st.mode[row] == RowMode::Excluded {
                    continue;
                }
                if st.y[row].abs() > 1e-9 || st.mode[row] == RowMode::FreeEq {
                    continue 'next;
                }
                let slack = layout.rhs(row, qp) - layout.rows[row].dot(&x);
                if coef > 0.0 {
                    hi = hi.min(cur + slack / coef);
                } else {
                    lo = lo.max(cur + slack / coef);
                }
            }
            let pad = 1e-9;
            for target in [0.0, 1.0] {
                if target >= lo - pad && target <= hi + pad {
                    x[col] = target;
                    break;
                }
            }
        }
        x
    }

    fn finish_infeasible(
        &self,
        qp: &SubproblemQp,
        dir: RayDir,
        st: &IterState,
    ) -> Option<SolveResult> {
        let layout = &self.core.layout;
        let stage = &self.core.stage;
        let mut d = DualSolution::zeros(stage);
        for t in 0..=layout.horizon {
            d.lambda[t] = dir.lambda.rows(t * layout.n_x, layout.n_x).into_owned();
        }
        scatter_rows(&mut d, &dir.y, &st.mode, layout);
        d.clamp_signs();
        d.rechain_lambda(stage);
        let cert = InfeasibilityCertificate::new(d);
        let obj = cert.objective(qp);
        if obj > 0.0 && check_dual_feasible(cert.solution(), qp, 1e-6) {
            let cert = cert.scaled(1.0 / obj);
            let objective = cert.objective(qp);
            return Some(SolveResult::Infeasible {
                certificate: cert,
                objective,
            });
        }
        // The ray was too imprecise; re-derive exact multipliers over the
        // current active rows with a homogeneous LP.
        let repaired = self.farkas_certificate(qp, st)?;
        let cert = InfeasibilityCertificate::new(repaired);
        let objective = cert.objective(qp);
        if objective > 0.0 && check_dual_feasible(cert.solution(), qp, 1e-6) {
            Some(SolveResult::Infeasible {
                certificate: cert,
                objective,
            })
        } else {
            None
        }
    }

    /// Certificate extraction LP: nonnegative multipliers on the active
    /// rows whose gradients cancel against some dynamics multipliers, with
    /// the objective slope normalized to one.
    fn farkas_certificate(&self, qp: &SubproblemQp, st: &IterState) -> Option<DualSolution> {
        use crate::lp::{solve_lp, LpOutcome, LpProblem};
        let layout = &self.core.layout;
        let core = &self.core;
        let active: Vec<usize> = (0..layout.rows.len())
            .filter(|&r| st.active[r] && st.mode[r] != RowMode::Excluded)
            .collect();
        let n_l = layout.m_eq;
        let n_vars = n_l + active.len();
        // Stationarity equalities plus the slope normalization.
        let mut a_eq = DMatrix::<f64>::zeros(layout.n_p + 1, n_vars);
        a_eq.view_mut((0, 0), (layout.n_p, n_l))
            .copy_from(&core.e.transpose());
        for (k, &row) in active.iter().enumerate() {
            let ir = &layout.rows[row];
            for (&c, &v) in ir.cols.iter().zip(&ir.vals) {
                a_eq[(c, n_l + k)] = v;
            }
        }
        let mut b_eq = DVector::<f64>::zeros(layout.n_p + 1);
        for i in 0..layout.n_x {
            a_eq[(layout.n_p, i)] = -qp.x_tau[i];
        }
        for (k, &row) in active.iter().enumerate() {
            a_eq[(layout.n_p, n_l + k)] = -layout.rhs(row, qp);
        }
        b_eq[layout.n_p] = 1.0;
        // Sign constraints on the cone multipliers only.
        let cone: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(_, &row)| st.mode[row] == RowMode::Cone)
            .map(|(k, _)| k)
            .collect();
        let mut a_ub = DMatrix::<f64>::zeros(cone.len(), n_vars);
        for (i, &k) in cone.iter().enumerate() {
            a_ub[(i, n_l + k)] = -1.0;
        }
        let p = LpProblem::minimize(DVector::zeros(n_vars), a_ub, DVector::zeros(cone.len()))
            .with_equalities(a_eq, b_eq);
        match solve_lp(&p) {
            LpOutcome::Optimal(sol) => {
                let mut d = DualSolution::zeros(&core.stage);
                for t in 0..=layout.horizon {
                    d.lambda[t] = sol.x.rows(t * layout.n_x, layout.n_x).into_owned();
                }
                let mut y = vec![0.0f64; layout.rows.len()];
                for (k, &row) in active.iter().enumerate() {
                    y[row] = sol.x[n_l + k];
                }
                scatter_rows(&mut d, &y, &st.mode, layout);
                d.clamp_signs();
                d.rechain_lambda(&core.stage);
                Some(d)
            }
            _ => None,
        }
    }

    fn init_state(&mut self, qp: &SubproblemQp, warm: Option<&DualSolution>) -> IterState {
        let layout = &self.core.layout;
        let n_rows = layout.rows.len();
        let mut mode = vec![RowMode::Cone; n_rows];
        for &(hi, lo) in &layout.bound_rows {
            let RowKind::Lo { t, j } = layout.rows[lo].kind else {
                unreachable!()
            };
            if qp.v_lo(t)[j] == qp.v_hi(t)[j] {
                mode[lo] = RowMode::FreeEq;
                mode[hi] = RowMode::Excluded;
            }
        }
        let mut st = IterState {
            y: vec![0.0; n_rows],
            lambda: DVector::zeros(layout.m_eq),
            rs: DVector::zeros(layout.n_rs),
            active: vec![false; n_rows],
            mode,
            x: None,
            last_objective: f64::NEG_INFINITY,
        };
        let mut use_seeds = true;
        if let Some(d) = warm {
            let mut repaired;
            let d = if d.sign_violation() > FEAS_TOL || d.stationarity_residual(qp) > FEAS_TOL {
                repaired = d.clone();
                self.repair(&mut repaired, qp);
                &repaired
            } else {
                d
            };
            if check_dual_feasible(d, qp, 1e-6) {
                use_seeds = false;
                let layout = &self.core.layout;
                for t in 0..=layout.horizon {
                    st.lambda
                        .rows_mut(t * layout.n_x, layout.n_x)
                        .copy_from(&d.lambda[t]);
                    st.rs
                        .rows_mut(layout.rho_off[t], d.rho[t].len())
                        .copy_from(&d.rho[t]);
                }
                for t in 0..layout.horizon {
                    st.rs
                        .rows_mut(layout.sigma_off[t], d.sigma[t].len())
                        .copy_from(&d.sigma[t]);
                }
                for (row, ir) in layout.rows.iter().enumerate() {
                    let v = match ir.kind {
                        RowKind::Domain { t, facet } => d.mu[t][facet],
                        RowKind::Hi { t, j } => d.nu_hi[t][j],
                        RowKind::Lo { t, j } => d.nu_lo[t][j],
                    };
                    st.y[row] = match st.mode[row] {
                        RowMode::Cone => (v * ir.scale).max(0.0),
                        RowMode::FreeEq => {
                            let RowKind::Lo { t, j } = ir.kind else { unreachable!() };
                            (d.nu_lo[t][j] - d.nu_hi[t][j]) * ir.scale
                        }
                        RowMode::Excluded => 0.0,
                    };
                }
                // Opposite bound rows of a free binary are negations of each
                // other; netting them out preserves stationarity and never
                // lowers the dual objective.
                for &(hi, lo) in &layout.bound_rows {
                    if st.mode[hi] != RowMode::Cone {
                        continue;
                    }
                    let m = st.y[hi].min(st.y[lo]);
                    if m > 0.0 {
                        st.y[hi] -= m;
                        st.y[lo] -= m;
                    }
                }
                for row in 0..n_rows {
                    st.active[row] = match st.mode[row] {
                        RowMode::Cone => st.y[row] > 0.0,
                        RowMode::FreeEq => true,
                        RowMode::Excluded => false,
                    };
                }
            }
        }
        if use_seeds {
            st.y.iter_mut().for_each(|v| *v = 0.0);
            st.lambda.fill(0.0);
            st.rs.fill(0.0);
            st.active.iter_mut().for_each(|a| *a = false);
            for &row in &self.core.seeds {
                st.active[row] = true;
            }
        }
        for row in 0..n_rows {
            match st.mode[row] {
                RowMode::FreeEq => st.active[row] = true,
                RowMode::Excluded => {
                    st.active[row] = false;
                    st.y[row] = 0.0;
                }
                RowMode::Cone => {}
            }
        }
        if !use_seeds {
            // A warm point worse than the trivial zero start is not worth
            // keeping.
            if st.objective(qp, &self.core.layout) < 0.0 {
                st.y.iter_mut().for_each(|v| *v = 0.0);
                st.lambda.fill(0.0);
                st.rs.fill(0.0);
                st.active.iter_mut().for_each(|a| *a = false);
                for &row in &self.core.seeds {
                    st.active[row] = true;
                }
                for row in 0..n_rows {
                    match st.mode[row] {
                        RowMode::FreeEq => st.active[row] = true,
                        RowMode::Excluded => st.active[row] = false,
                        RowMode::Cone => {}
                    }
                }
            } else {
                self.ensure_flat_coverage(&mut st);
            }
        }
        st.last_objective = st.objective(qp, &self.core.layout);
        st
    }

    /// Re-activates (at zero multipliers) enough seed rows that the active
    /// set spans every cost-flat dynamics-free direction; without this the
    /// working-set systems of warm-started solves are structurally singular.
    fn ensure_flat_coverage(&self, st: &mut IterState) {
        let basis = &self.core.flat_basis;
        let kappa = basis.len();
        if kappa == 0 {
            return;
        }
        let layout = &self.core.layout;
        let project = |row: usize| -> DVector<f64> {
            DVector::from_fn(kappa, |k, _| layout.rows[row].dot(&basis[k]))
        };
        let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(kappa);
        let reduce = |mut proj: DVector<f64>, scale: f64, ortho: &mut Vec<DVector<f64>>| -> bool {
            for q in ortho.iter() {
                let c = q.dot(&proj);
                proj -= q * c;
            }
            if proj.norm() > 1e-7 * scale {
                let n = proj.norm();
                ortho.push(proj / n);
                true
            } else {
                false
            }
        };
        for row in 0..layout.rows.len() {
            if ortho.len() == kappa {
                return;
            }
            if st.active[row] {
                reduce(project(row), 1.0, &mut ortho);
            }
        }
        for &row in &self.core.seeds {
            if ortho.len() == kappa {
                break;
            }
            if !st.active[row] && reduce(project(row), 1.0, &mut ortho) {
                st.active[row] = true;
            }
        }
    }

    fn repair(&mut self, d: &mut DualSolution, qp: &SubproblemQp) {
        d.clamp_signs();
        if d.stationarity_residual(qp) <= FEAS_TOL {
            return;
        }
        let proj = match &self.projector {
            Some(p) => Arc::clone(p),
            None => {
                let p = Arc::new(StationarityProjector::new(&self.core));
                self.projector = Some(Arc::clone(&p));
                p
            }
        };
        proj.project(d, &self.core.layout);
        d.clamp_signs();
    }
}

enum EqpOutcome {
    Point(Target),
    Ray(RayDir),
    Stuck,
}

struct Target {
    x: DVector<f64>,
    lambda: DVector<f64>,
    y: Vec<f64>,
    rs: DVector<f64>,
}

#[derive(Clone)]
struct RayDir {
    lambda: DVector<f64>,
    y: Vec<f64>,
}

impl RayDir {
    /// Linear growth rate of the dual objective along the direction.
    fn slope(&self, qp: &SubproblemQp, layout: &Layout) -> f64 {
        let mut s = 0.0;
        for (row, &dy) in self.y.iter().enumerate() {
            if dy != 0.0 {
                s -= dy * layout.rhs(row, qp);
            }
        }
        for i in 0..layout.n_x {
            s -= qp.x_tau[i] * self.lambda[i];
        }
        s
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowMode {
    /// Ordinary inequality: nonnegative multiplier, can block and release.
    Cone,
    /// Equality carrier of a fixed binary: always active, free-signed
    /// multiplier mapped back to the bound pair by sign.
    FreeEq,
    /// Redundant twin of a fixed binary's equality carrier.
    Excluded,
}

struct IterState {
    y: Vec<f64>,
    lambda: DVector<f64>,
    rs: DVector<f64>,
    active: Vec<bool>,
    mode: Vec<RowMode>,
    x: Option<DVector<f64>>,
    last_objective: f64,
}

impl IterState {
    fn objective(&self, qp: &SubproblemQp, layout: &Layout) -> f64 {
        let mut obj = -self.rs.norm_squared() / 4.0;
        for (row, &v) in self.y.iter().enumerate() {
            if v != 0.0 {
                obj -= v * layout.rhs(row, qp);
            }
        }
        for i in 0..layout.n_x {
            obj -= qp.x_tau[i] * self.lambda[i];
        }
        obj
    }

    fn max_step(&self, target: &Target, bland: bool) -> (f64, Option<usize>) {
        let y_scale = target
            .y
            .iter()
            .chain(self.y.iter())
            .fold(1.0f64, |m, &v| m.max(v.abs()));
        let snap = 1e-9 * y_scale;
        let mut alpha = 1.0f64;
        let mut blocker = None;
        for (row, (&cur, &tgt)) in self.y.iter().zip(&target.y).enumerate() {
            if !self.active[row] || self.mode[row] != RowMode::Cone {
                continue;
            }
            let delta = tgt - cur;
            if delta < -1e-14 {
                // A target that is negative only at roundoff level is snapped
                // to zero by the step clamp rather than treated as a blocker;
                // pinning on it cycles at degenerate vertices.
                if cur <= snap && tgt >= -snap {
                    continue;
                }
                let a = (cur / -delta).max(0.0);
                if a < alpha - 1e-15 {
                    alpha = a;
                    blocker = Some(row);
                    if bland && alpha <= 0.0 {
                        break;
                    }
                }
            }
        }
        (alpha.min(1.0), blocker)
    }

    fn lerp_to(&mut self, target: &Target, alpha: f64) -> f64 {
        let mut movement: f64 = 0.0;
        for (cur, &tgt) in self.y.iter().zip(&target.y) {
            movement = movement.max((tgt - cur).abs());
        }
        movement *= alpha.min(1.0);
        if alpha >= 1.0 {
            self.y.copy_from_slice(&target.y);
            for (row, v) in self.y.iter_mut().enumerate() {
                if *v < 0.0 && self.mode[row] == RowMode::Cone {
                    *v = 0.0;
                }
            }
            self.lambda.copy_from(&target.lambda);
            self.rs.copy_from(&target.rs);
            self.x = Some(target.x.clone());
            return movement;
        }
        for (row, (cur, &tgt)) in self.y.iter_mut().zip(&target.y).enumerate() {
            *cur += alpha * (tgt - *cur);
            if *cur < 0.0 && self.mode[row] == RowMode::Cone {
                *cur = 0.0;
            }
        }
        self.lambda.axpy(alpha, &target.lambda, 1.0 - alpha);
        self.rs.axpy(alpha, &target.rs, 1.0 - alpha);
        self.x = None;
        movement
    }

    fn max_ray_step(&self, dir: &RayDir, bland: bool) -> (f64, Option<usize>) {
        let dir_inf = dir
            .y
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1e-300);
        let mut alpha = f64::INFINITY;
        let mut blocker = None;
        for (row, &dy) in dir.y.iter().enumerate() {
            if !self.active[row] || self.mode[row] != RowMode::Cone {
                continue;
            }
            if dy < -1e-12 * dir_inf {
                let a = (self.y[row] / -dy).max(0.0);
                if a < alpha - 1e-15 {
                    alpha = a;
                    blocker = Some(row);
                    if bland && alpha <= 0.0 {
                        break;
                    }
                }
            }
        }
        // A very long blocked step would amplify the ray's tiny stationarity
        // residual into real infeasibility; treat it as unblocked and let
        // the certificate path validate it.
        if alpha > 1e6 {
            return (f64::INFINITY, None);
        }
        (alpha, blocker)
    }

    fn ray_step(&mut self, dir: &RayDir, alpha: f64) {
        for (row, &dy) in dir.y.iter().enumerate() {
            if dy != 0.0 {
                self.y[row] += alpha * dy;
                if self.y[row] < 0.0 && self.mode[row] == RowMode::Cone {
                    self.y[row] = 0.0;
                }
            }
        }
        self.lambda.axpy(alpha, &dir.lambda, 1.0);
        self.x = None;
    }

    fn most_violated(
        &self,
        qp: &SubproblemQp,
        layout: &Layout,
        bland: bool,
    ) -> Option<(usize, f64)> {
        let x = self.x.as_ref()?;
        let mut worst: Option<(usize, f64)> = None;
        for (row, ir) in layout.rows.iter().enumerate() {
            if self.active[row] || self.mode[row] == RowMode::Excluded {
                continue;
            }
            let slack = layout.rhs(row, qp) - ir.dot(x);
            if slack < -FEAS_TOL {
                if bland {
                    return Some((row, slack));
                }
                if worst.map_or(true, |(_, w)| slack < w) {
                    worst = Some((row, slack));
                }
            }
        }
        worst
    }

    fn to_dual(&self, layout: &Layout, stage: &StageData) -> DualSolution {
        let mut d = DualSolution::zeros(stage);
        for t in 0..=layout.horizon {
            d.lambda[t] = self.lambda.rows(t * layout.n_x, layout.n_x).into_owned();
            let len = d.rho[t].len();
            d.rho[t] = self.rs.rows(layout.rho_off[t], len).into_owned();
        }
        for t in 0..layout.horizon {
            let len = d.sigma[t].len();
            d.sigma[t] = self.rs.rows(layout.sigma_off[t], len).into_owned();
        }
        scatter_rows(&mut d, &self.y, &self.mode, layout);
        d
    }
}

fn scatter_rows(d: &mut DualSolution, y: &[f64], modes: &[RowMode], layout: &Layout) {
    for (row, ir) in layout.rows.iter().enumerate() {
        let v = y[row] / ir.scale;
        match (modes[row], ir.kind) {
            (RowMode::Excluded, _) => {}
            (RowMode::FreeEq, RowKind::Lo { t, j }) => {
                d.nu_lo[t][j] = v.max(0.0);
                d.nu_hi[t][j] = (-v).max(0.0);
            }
            (_, RowKind::Domain { t, facet }) => d.mu[t][facet] = v,
            (_, RowKind::Hi { t, j }) => d.nu_hi[t][j] = v,
            (_, RowKind::Lo { t, j }) => d.nu_lo[t][j] = v,
        }
    }
}

/// Least-squares projector onto the stationarity equalities, used to repair
/// drifted warm-start points.
struct StationarityProjector {
    s: DMatrix<f64>,
    gram_lu: LU<f64, Dyn, Dyn>,
}

impl StationarityProjector {
    fn new(core: &SolverCore) -> Self {
        let layout = &core.layout;
        let n_dual = layout.m_eq + layout.n_rs + layout.rows.len();
        let mut s = DMatrix::<f64>::zeros(layout.n_p, n_dual);
        s.view_mut((0, 0), (layout.n_p, layout.m_eq))
            .copy_from(&core.e.transpose());
        let stage = &core.stage;
        for t in 0..=layout.horizon {
            let qt = stage.q[t].transpose();
            for r in 0..qt.nrows() {
                for c in 0..qt.ncols() {
                    s[(layout.off_x(t) + r, layout.m_eq + layout.rho_off[t] + c)] = qt[(r, c)];
                }
            }
        }
        for t in 0..layout.horizon {
            let rt = stage.r[t].transpose();
            for r in 0..rt.nrows() {
                for c in 0..rt.ncols() {
                    s[(layout.off_u(t) + r, layout.m_eq + layout.sigma_off[t] + c)] = rt[(r, c)];
                }
            }
        }
        for (row, ir) in layout.rows.iter().enumerate() {
            for (&c, &v) in ir.cols.iter().zip(&ir.vals) {
                s[(c, layout.m_eq + layout.n_rs + row)] = v;
            }
        }
        let gram = &s * s.transpose();
        let n = gram.nrows();
        let gram_lu = (gram + DMatrix::<f64>::identity(n, n) * 1e-12).lu();
        StationarityProjector { s, gram_lu }
    }

    fn project(&self, d: &mut DualSolution, layout: &Layout) {
        let n_dual = layout.m_eq + layout.n_rs + layout.rows.len();
        let mut flat = DVector::<f64>::zeros(n_dual);
        for t in 0..=layout.horizon {
            flat.rows_mut(t * layout.n_x, layout.n_x)
                .copy_from(&d.lambda[t]);
            flat.rows_mut(layout.m_eq + layout.rho_off[t], d.rho[t].len())
                .copy_from(&d.rho[t]);
        }
        for t in 0..layout.horizon {
            flat.rows_mut(layout.m_eq + layout.sigma_off[t], d.sigma[t].len())
                .copy_from(&d.sigma[t]);
        }
        for (row, ir) in layout.rows.iter().enumerate() {
            flat[layout.m_eq + layout.n_rs + row] = match ir.kind {
                RowKind::Domain { t, facet } => d.mu[t][facet],
                RowKind::Hi { t, j } => d.nu_hi[t][j],
                RowKind::Lo { t, j } => d.nu_lo[t][j],
            };
        }
        let resid = &self.s * &flat;
        if let Some(corr) = self.gram_lu.solve(&resid) {
            let delta = self.s.transpose() * corr;
            flat -= delta;
        }
        for t in 0..=layout.horizon {
            d.lambda[t] = flat.rows(t * layout.n_x, layout.n_x).into_owned();
            let len = d.rho[t].len();
            d.rho[t] = flat
                .rows(layout.m_eq + layout.rho_off[t], len)
                .into_owned();
        }
        for t in 0..layout.horizon {
            let len = d.sigma[t].len();
            d.sigma[t] = flat
                .rows(layout.m_eq + layout.sigma_off[t], len)
                .into_owned();
        }
        let y: Vec<f64> = (0..layout.rows.len())
            .map(|row| flat[layout.m_eq + layout.n_rs + row])
            .collect();
        let modes = vec![RowMode::Cone; layout.rows.len()];
        scatter_rows(d, &y, &modes, layout);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cover::Interval;
    use crate::model::MldModel;
    use crate::subproblem::assemble_subproblem;
    use approx::assert_relative_eq;

    fn scalar_bound_stage(lb: f64, ub: f64) -> Arc<StageData> {
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[0.0]);
        let f = DMatrix::from_row_slice(2, 1, &[0., 0.]);
        let g = DMatrix::from_row_slice(2, 1, &[-1., 1.]);
        let h = DVector::from_row_slice(&[-lb, ub]);
        let v = DMatrix::zeros(0, 1);
        let model = MldModel {
            a,
            b,
            f,
            g,
            h,
            v,
            n_x: 1,
            n_u: 1,
            m_u: 0,
        };
        Arc::new(
            StageData::build(
                &model,
                DMatrix::zeros(0, 1),
                DMatrix::identity(1, 1),
                None,
                1,
            )
            .unwrap(),
        )
    }

    #[test]
    fn hand_kkt_scalar_bound() {
        // min u^2 s.t. u >= 1 -> u = 1, multiplier 2 on the bound, value 1.
        let stage = scalar_bound_stage(1.0, 10.0);
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let qp = assemble_subproblem(&stage, DVector::zeros(1), Interval::free(0)).unwrap();
        match solver.solve_qp(&qp, None, None).unwrap() {
            SolveResult::Optimal {
                primal,
                dual,
                objective,
            } => {
                assert_relative_eq!(objective, 1.0, epsilon = 1e-8);
                assert_relative_eq!(primal.inputs[0][0], 1.0, epsilon = 1e-8);
                assert_relative_eq!(dual.mu[0][0], 2.0, epsilon = 1e-8);
                assert_relative_eq!(dual.mu[0][1], 0.0, epsilon = 1e-12);
                assert!(check_dual_feasible(&dual, &qp, 1e-7));
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn contradictory_bounds_produce_a_scalable_certificate() {
        let stage = scalar_bound_stage(1.0, 0.0);
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let qp = assemble_subproblem(&stage, DVector::zeros(1), Interval::free(0)).unwrap();
        match solver.solve_qp(&qp, None, None).unwrap() {
            SolveResult::Infeasible {
                certificate,
                objective,
            } => {
                assert!(objective > 0.0);
                assert!(check_dual_feasible(certificate.solution(), &qp, 1e-7));
                assert!(certificate.solution().is_quadratic_part_zero(1e-12));
                let ten = certificate.scaled(10.0);
                assert!(check_dual_feasible(ten.solution(), &qp, 1e-6));
                assert_relative_eq!(ten.objective(&qp), 10.0 * objective, epsilon = 1e-9);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn zero_cutoff_never_binds_on_a_feasible_problem() {
        let stage = scalar_bound_stage(-1.0, 1.0);
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let qp = assemble_subproblem(&stage, DVector::zeros(1), Interval::free(0)).unwrap();
        match solver.solve_qp(&qp, None, Some(0.0)).unwrap() {
            SolveResult::Optimal { objective, .. } => {
                assert_relative_eq!(objective, 0.0, epsilon = 1e-10);
            }
            other => panic!("cutoff 0 must not bind when theta >= 0, got {other:?}"),
        }
    }

    #[test]
    fn cutoff_stops_early_with_a_valid_bound() {
        let stage = scalar_bound_stage(2.0, 10.0);
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let qp = assemble_subproblem(&stage, DVector::zeros(1), Interval::free(0)).unwrap();
        match solver.solve_qp(&qp, None, Some(1.0)).unwrap() {
            SolveResult::CutoffReached { dual, objective } => {
                assert!(objective > 1.0);
                assert!(objective <= 4.0 + 1e-9);
                assert!(check_dual_feasible(&dual, &qp, 1e-7));
                assert_relative_eq!(dual_objective(&dual, &qp), objective, epsilon = 1e-9);
            }
            SolveResult::Optimal { .. } => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_box_flat_cost_solves_with_seeds() {
        // One binary with no cost at all: flat directions must be covered by
        // the seed machinery and the solve must still return an optimum.
        let model = crate::model::tests::toy_model();
        let stage = Arc::new(
            StageData::build(
                &model,
                DMatrix::identity(1, 1),
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                None,
                3,
            )
            .unwrap(),
        );
        let mut solver = SubproblemSolver::new(Arc::clone(&stage)).unwrap();
        let qp = assemble_subproblem(
            &stage,
            DVector::from_row_slice(&[0.5]),
            Interval::free(3),
        )
        .unwrap();
        match solver.solve_qp(&qp, None, None).unwrap() {
            SolveResult::Optimal { primal, dual, objective } => {
                assert!(objective >= 0.0);
                assert!(check_dual_feasible(&dual, &qp, 1e-6));
                // every constraint satisfied
                for t in 0..3 {
                    let mut z = DVector::zeros(3);
                    z.rows_mut(0, 1).copy_from(&primal.states[t]);
                    z.rows_mut(1, 2).copy_from(&primal.inputs[t]);
                    assert!(stage.d[t].contains(&z, 1e-6));
                }
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }
}
