//! MLD system description and per-stage problem data.
//!
//! An MLD system is
//!
//! ```text
//! x[k+1] = A x[k] + B u[k] + e[k],   (x[k], u[k]) in D = {F x + G u <= h},
//! ```
//!
//! where the input vector stacks continuous entries and binary entries; the
//! 0/1 selection matrix `V` picks the binary ones, `v = V u`.

use crate::polyhedron::Polyhedron;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct MldModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub v: DMatrix<f64>,
    pub n_x: usize,
    pub n_u: usize,
    pub m_u: usize,
}

impl MldModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        f: DMatrix<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        v: DMatrix<f64>,
        n_u: usize,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let m_u = v.nrows();
        let model = MldModel {
            a,
            b,
            f,
            g,
            h,
            v,
            n_x,
            n_u,
            m_u,
        };
        let dims = model.dimension_report();
        if !dims.is_empty() {
            return Err(Error::InvalidModel(dims.join("; ")));
        }
        Ok(model)
    }

    /// Total input dimension, continuous plus binary.
    pub fn input_dim(&self) -> usize {
        self.n_u + self.m_u
    }

    /// The constraint polyhedron over stacked `(x, u)`.
    pub fn domain(&self) -> Polyhedron {
        let q = self.f.nrows();
        let n = self.n_x + self.input_dim();
        let mut c = DMatrix::zeros(q, n);
        c.view_mut((0, 0), (q, self.n_x)).copy_from(&self.f);
        c.view_mut((0, self.n_x), (q, self.input_dim()))
            .copy_from(&self.g);
        Polyhedron::new(c, self.h.clone()).expect("rows checked at construction")
    }

    fn dimension_report(&self) -> Vec<String> {
        let mut r = Vec::new();
        if self.a.nrows() != self.a.ncols() {
            r.push("A is not square".into());
        }
        if self.b.nrows() != self.n_x || self.b.ncols() != self.input_dim() {
            r.push(format!(
                "B is {}x{}, expected {}x{}",
                self.b.nrows(),
                self.b.ncols(),
                self.n_x,
                self.input_dim()
            ));
        }
        if self.f.ncols() != self.n_x {
            r.push("F column count differs from the state dimension".into());
        }
        if self.g.nrows() != self.f.nrows() || self.g.ncols() != self.input_dim() {
            r.push("G shape inconsistent with F and the input dimension".into());
        }
        if self.h.len() != self.f.nrows() {
            r.push("h length differs from the constraint row count".into());
        }
        if self.v.ncols() != self.input_dim() {
            r.push("V column count differs from the input dimension".into());
        }
        r
    }

    /// One plant step: `A x + B u + e`.
    pub fn simulate_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        e: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if x.len() != self.n_x || u.len() != self.input_dim() || e.len() != self.n_x {
            return Err(Error::Dimension(format!(
                "simulate_step got x:{} u:{} e:{}, model wants x:{} u:{} e:{}",
                x.len(),
                u.len(),
                e.len(),
                self.n_x,
                self.input_dim(),
                self.n_x
            )));
        }
        Ok(&self.a * x + &self.b * u + e)
    }

    /// Binary part of an input vector, `v = V u`.
    pub fn binary_part(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.v * u
    }
}

/// Structural validation report; empty means every invariant holds.
pub fn validate_mld(model: &MldModel) -> Vec<String> {
    let mut report = model.dimension_report();
    // V must select binary entries: exactly one 1 per row, at most one per
    // column, every entry 0 or 1.
    for i in 0..model.v.nrows() {
        let mut ones = 0;
        for j in 0..model.v.ncols() {
            let e = model.v[(i, j)];
            if e == 1.0 {
                ones += 1;
            } else if e != 0.0 {
                report.push(format!("V[{i},{j}] = {e} is not 0/1"));
            }
        }
        if ones != 1 {
            report.push(format!("V row {i} has {ones} ones, expected exactly one"));
        }
    }
    for j in 0..model.v.ncols() {
        let ones = (0..model.v.nrows()).filter(|&i| model.v[(i, j)] == 1.0).count();
        if ones > 1 {
            report.push(format!("V column {j} selected by {ones} rows"));
        }
    }
    for i in 0..model.h.len() {
        if model.h[i] < 0.0 {
            report.push(format!(
                "origin not in the constraint set: h[{i}] = {} < 0",
                model.h[i]
            ));
        }
    }
    report
}

/// Per-stage data of one finite-horizon problem: weights `Q_t` (t = 0..=T),
/// `R_t` (t = 0..T) and constraint sets `D_t` (t = 0..T) over `(x, u)`.
#[derive(Debug, Clone)]
pub struct StageData {
    pub model: MldModel,
    pub horizon: usize,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub d: Vec<Polyhedron>,
}

impl StageData {
    /// Assembles stage data from a base model, constant weights and an
    /// optional terminal penalty / terminal set pair. The terminal state
    /// constraint `x_T in X` maps onto stage `T-1` through the dynamics.
    pub fn build(
        model: &MldModel,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        terminal: Option<(DMatrix<f64>, &Polyhedron)>,
        horizon: usize,
    ) -> Result<Self> {
        assert!(horizon >= 1, "horizon must be positive");
        if q.ncols() != model.n_x {
            return Err(Error::Dimension("Q columns differ from the state dimension".into()));
        }
        if r.ncols() != model.input_dim() {
            return Err(Error::Dimension("R columns differ from the input dimension".into()));
        }
        let base = model.domain();
        let mut d = vec![base.clone(); horizon];
        let mut qs = vec![q.clone(); horizon + 1];
        let rs = vec![r; horizon];
        if let Some((q_term, x_term)) = terminal {
            if q_term.ncols() != model.n_x {
                return Err(Error::Dimension("terminal weight has wrong column count".into()));
            }
            qs[horizon] = q_term;
            if x_term.num_facets() > 0 {
                if x_term.dim() != model.n_x {
                    return Err(Error::Dimension("terminal set dimension differs from the state".into()));
                }
                // Rows of X on A x + B u.
                let n = model.n_x + model.input_dim();
                let mut map = DMatrix::zeros(model.n_x, n);
                map.view_mut((0, 0), (model.n_x, model.n_x)).copy_from(&model.a);
                map.view_mut((0, model.n_x), (model.n_x, model.input_dim()))
                    .copy_from(&model.b);
                let mapped = x_term.preimage(&map)?;
                d[horizon - 1] = base.intersect(&mapped)?;
            }
        }
        let data = StageData {
            model: model.clone(),
            horizon,
            q: qs,
            r: rs,
            d,
        };
        data.check_assumptions()?;
        Ok(data)
    }

    /// Stage data from explicit per-stage parts, for time-varying problems.
    pub fn from_parts(
        model: &MldModel,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        d: Vec<Polyhedron>,
    ) -> Result<Self> {
        let horizon = r.len();
        if q.len() != horizon + 1 || d.len() != horizon {
            return Err(Error::Dimension("per-stage data lengths are inconsistent".into()));
        }
        let data = StageData {
            model: model.clone(),
            horizon,
            q,
            r,
            d,
        };
        data.check_assumptions()?;
        Ok(data)
    }

    pub fn facets(&self, t: usize) -> usize {
        self.d[t].num_facets()
    }

    /// Whether two consecutive stages share the same constraint rows.
    pub fn same_domain(&self, t: usize, s: usize) -> bool {
        let (a, b) = (&self.d[t], &self.d[s]);
        a.num_facets() == b.num_facets() && a.matrix() == b.matrix() && a.offsets() == b.offsets()
    }

    pub fn is_domain_time_invariant(&self) -> bool {
        (1..self.horizon).all(|t| self.same_domain(t - 1, t))
    }

    pub fn is_cost_time_invariant(&self) -> bool {
        self.q.windows(2).all(|w| w[0] == w[1]) && self.r.windows(2).all(|w| w[0] == w[1])
    }

    /// Verifies the two structural assumptions the dual shift relies on:
    /// the row space of each weight must contain its successor's, and the
    /// conic hull of each stage's constraint rows must contain its
    /// successor's.
    fn check_assumptions(&self) -> Result<()> {
        for t in 0..self.horizon {
            if let Some(res) = rowspace_gap(&self.q[t], &self.q[t + 1]) {
                return Err(Error::StageData(format!(
                    "state weight at stage {} leaves the row space of stage {} (residual {res:.2e})",
                    t + 1,
                    t
                )));
            }
        }
        for t in 0..self.horizon.saturating_sub(1) {
            if let Some(res) = rowspace_gap(&self.r[t], &self.r[t + 1]) {
                return Err(Error::StageData(format!(
                    "input weight at stage {} leaves the row space of stage {} (residual {res:.2e})",
                    t + 1,
                    t
                )));
            }
            if !self.same_domain(t, t + 1) {
                if let Some(facet) = conic_hull_gap(&self.d[t], &self.d[t + 1]) {
                    return Err(Error::StageData(format!(
                        "constraint row {facet} of stage {} is outside the conic hull of stage {} rows",
                        t + 1,
                        t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Largest residual of projecting the rows of `next` onto the row space of
/// `prev`, or `None` when containment holds to 1e-8.
pub fn rowspace_gap(prev: &DMatrix<f64>, next: &DMatrix<f64>) -> Option<f64> {
    if next.nrows() == 0 {
        return None;
    }
    let svd = prev.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..next.nrows() {
        let row = next.row(i).transpose();
        let mut residual = row.clone();
        for k in 0..svd.singular_values.len() {
            if svd.singular_values[k] > tol {
                let basis = v_t.row(k).transpose();
                let coef = basis.dot(&row);
                residual -= basis * coef;
            }
        }
        worst = worst.max(residual.norm() / row.norm().max(1.0));
    }
    if worst <= 1e-8 {
        None
    } else {
        Some(worst)
    }
}

/// First facet of `next` whose row is outside the conic hull of the rows of
/// `prev`, decided by LP feasibility per facet.
pub fn conic_hull_gap(prev: &Polyhedron, next: &Polyhedron) -> Option<usize> {
    use crate::lp::{solve_lp, LpOutcome, LpProblem};
    let rows_prev = prev.num_facets();
    for i in 0..next.num_facets() {
        let target = next.matrix().row(i).transpose();
        let p = LpProblem::minimize(
            DVector::zeros(rows_prev),
            -DMatrix::identity(rows_prev, rows_prev),
            DVector::zeros(rows_prev),
        )
        .with_equalities(prev.matrix().transpose(), target);
        match solve_lp(&p) {
            LpOutcome::Optimal(_) => {}
            _ => return Some(i),
        }
    }
    None
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn toy_model() -> MldModel {
        // 1 state, 1 continuous input, 1 binary input; |x| <= 2, |u1| <= 1,
        // binary box, and a coupling row.
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let f = DMatrix::from_row_slice(7, 1, &[1., -1., 0., 0., 0., 0., 1.]);
        let g = DMatrix::from_row_slice(
            7,
            2,
            &[
                0., 0., //
                0., 0., //
                1., 0., //
                -1., 0., //
                0., 1., //
                0., -1., //
                0.5, 1.0,
            ],
        );
        let h = DVector::from_row_slice(&[2., 2., 1., 1., 1., 0., 4.]);
        let v = DMatrix::from_row_slice(1, 2, &[0., 1.]);
        MldModel::new(a, b, f, g, h, v, 1).unwrap()
    }

    #[test]
    fn validator_flags_negative_offset() {
        let mut m = toy_model();
        m.h[0] = -1.0;
        let report = validate_mld(&m);
        assert!(report.iter().any(|r| r.contains("origin not in")), "{report:?}");
    }

    #[test]
    fn validator_flags_zero_selector_row() {
        let mut m = toy_model();
        m.v[(0, 1)] = 0.0;
        let report = validate_mld(&m);
        assert!(report.iter().any(|r| r.contains("expected exactly one")));
    }

    #[test]
    fn validator_accepts_toy_model() {
        assert!(validate_mld(&toy_model()).is_empty());
    }

    #[test]
    fn simulate_equilibrium_and_identity() {
        let m = toy_model();
        let zero = m
            .simulate_step(&DVector::zeros(1), &DVector::zeros(2), &DVector::zeros(1))
            .unwrap();
        assert_eq!(zero[0], 0.0);

        // A = I, B = 0 example in two dimensions.
        let m2 = MldModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(0, 2),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::zeros(0, 1),
            1,
        )
        .unwrap();
        let x = m2
            .simulate_step(
                &DVector::from_row_slice(&[1., 2.]),
                &DVector::zeros(1),
                &DVector::from_row_slice(&[0.1, 0.0]),
            )
            .unwrap();
        assert_relative_eq!(x[0], 1.1);
        assert_relative_eq!(x[1], 2.0);
    }

    #[test]
    fn simulate_step_is_affine_in_the_state() {
        let m = toy_model();
        let u = DVector::from_row_slice(&[0.3, 1.0]);
        let e = DVector::from_row_slice(&[0.05]);
        let x1 = DVector::from_row_slice(&[0.7]);
        let x2 = DVector::from_row_slice(&[-0.4]);
        let lhs = m.simulate_step(&(&x1 + &x2), &u, &e).unwrap()
            - m.simulate_step(&x2, &u, &e).unwrap();
        let rhs = &m.a * &x1;
        assert_relative_eq!((lhs - rhs).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = toy_model();
        assert!(m
            .simulate_step(&DVector::zeros(2), &DVector::zeros(2), &DVector::zeros(1))
            .is_err());
    }

    #[test]
    fn stage_data_without_terminal_is_constant() {
        let m = toy_model();
        let sd = StageData::build(
            &m,
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            None,
            4,
        )
        .unwrap();
        assert!(sd.is_domain_time_invariant());
        assert!(sd.is_cost_time_invariant());
        for t in 0..4 {
            assert_eq!(sd.facets(t), 7);
        }
    }

    #[test]
    fn full_space_terminal_set_adds_nothing() {
        let m = toy_model();
        let x_term = Polyhedron::full_space(1);
        let sd = StageData::build(
            &m,
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            Some((DMatrix::identity(1, 1) * 2.0, &x_term)),
            3,
        )
        .unwrap();
        assert_eq!(sd.facets(2), 7);
        assert_eq!(sd.q[3], DMatrix::identity(1, 1) * 2.0);
    }

    #[test]
    fn terminal_set_rows_are_appended() {
        let m = toy_model();
        let x_term = Polyhedron::bounding_box(
            &DVector::from_element(1, -0.5),
            &DVector::from_element(1, 0.5),
        );
        let sd = StageData::build(
            &m,
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            Some((DMatrix::identity(1, 1), &x_term)),
            3,
        )
        .unwrap();
        assert_eq!(sd.facets(2), 7 + 2);
        assert_eq!(sd.facets(1), 7);
    }

    #[test]
    fn rowspace_violation_is_rejected() {
        let m = toy_model();
        // Q_t = 0 for t < T but Q_T nonzero: row space containment fails.
        let q = vec![
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        ];
        let r = vec![DMatrix::identity(2, 2); 2];
        let d = vec![m.domain(); 2];
        let err = StageData::from_parts(&m, q, r, d).unwrap_err();
        assert!(err.to_string().contains("row space"));
    }
}
