//! Polyhedra in halfspace form `{z | C z <= d}` with LP-backed queries.

use crate::lp::{solve_lp, LpOutcome, LpProblem};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Polyhedron {
    c: DMatrix<f64>,
    d: DVector<f64>,
}

impl Polyhedron {
    pub fn new(c: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if c.nrows() != d.len() {
            return Err(Error::Dimension(format!(
                "polyhedron has {} rows but {} offsets",
                c.nrows(),
                d.len()
            )));
        }
        Ok(Polyhedron { c, d })
    }

    /// The full space in `dim` variables (no facets).
    pub fn full_space(dim: usize) -> Self {
        Polyhedron {
            c: DMatrix::zeros(0, dim),
            d: DVector::zeros(0),
        }
    }

    /// Box `lo <= z <= hi` as 2n facets.
    pub fn bounding_box(lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let n = lo.len();
        assert_eq!(n, hi.len());
        let mut c = DMatrix::zeros(2 * n, n);
        let mut d = DVector::zeros(2 * n);
        for i in 0..n {
            c[(2 * i, i)] = 1.0;
            d[2 * i] = hi[i];
            c[(2 * i + 1, i)] = -1.0;
            d[2 * i + 1] = -lo[i];
        }
        Polyhedron { c, d }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn num_facets(&self) -> usize {
        self.c.nrows()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        if self.num_facets() == 0 {
            return true;
        }
        let r = &self.c * z - &self.d;
        r.max() <= tol
    }

    /// Worst constraint violation at `z` (negative when strictly inside).
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        if self.num_facets() == 0 {
            return f64::NEG_INFINITY;
        }
        (&self.c * z - &self.d).max()
    }

    pub fn intersect(&self, other: &Polyhedron) -> Result<Polyhedron> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension("intersecting polyhedra of different dimension".into()));
        }
        let rows = self.num_facets() + other.num_facets();
        let mut c = DMatrix::zeros(rows, self.dim());
        let mut d = DVector::zeros(rows);
        c.view_mut((0, 0), (self.num_facets(), self.dim()))
            .copy_from(&self.c);
        c.view_mut((self.num_facets(), 0), (other.num_facets(), self.dim()))
            .copy_from(&other.c);
        d.rows_mut(0, self.num_facets()).copy_from(&self.d);
        d.rows_mut(self.num_facets(), other.num_facets())
            .copy_from(&other.d);
        Ok(Polyhedron { c, d })
    }

    /// Preimage under the affine map `z -> M z`: `{z | C M z <= d}`.
    pub fn preimage(&self, m: &DMatrix<f64>) -> Result<Polyhedron> {
        if m.nrows() != self.dim() {
            return Err(Error::Dimension("preimage map has wrong output dimension".into()));
        }
        Ok(Polyhedron {
            c: &self.c * m,
            d: self.d.clone(),
        })
    }

    /// Is the polyhedron empty? Decided by a phase-one LP.
    pub fn is_empty(&self) -> bool {
        if self.num_facets() == 0 {
            return false;
        }
        let p = LpProblem::minimize(DVector::zeros(self.dim()), self.c.clone(), self.d.clone());
        solve_lp(&p).is_infeasible()
    }

    /// Is the polyhedron bounded? Checks that every coordinate direction has
    /// a finite support value.
    pub fn is_bounded(&self) -> bool {
        for i in 0..self.dim() {
            for s in [1.0, -1.0] {
                let mut dir = DVector::zeros(self.dim());
                dir[i] = s;
                if self.support(&dir).is_none() {
                    return false;
                }
            }
        }
        true
    }

    /// Support value `max { dir'z | z in P }`, or `None` if unbounded in that
    /// direction. Panics on an empty polyhedron only through `expect`.
    pub fn support(&self, dir: &DVector<f64>) -> Option<f64> {
        match self.support_point(dir) {
            SupportOutcome::Finite { value, .. } => Some(value),
            SupportOutcome::Unbounded => None,
            SupportOutcome::Empty => None,
        }
    }

    pub fn support_point(&self, dir: &DVector<f64>) -> SupportOutcome {
        let p = LpProblem::minimize(-dir.clone(), self.c.clone(), self.d.clone());
        match solve_lp(&p) {
            LpOutcome::Optimal(s) => SupportOutcome::Finite {
                value: -s.value,
                point: s.x,
            },
            LpOutcome::Unbounded { .. } => SupportOutcome::Unbounded,
            LpOutcome::Infeasible { .. } => SupportOutcome::Empty,
            LpOutcome::IterationLimit => SupportOutcome::Unbounded,
        }
    }

    /// Rows rescaled to unit gradient norm. Zero rows are dropped when their
    /// offset is nonnegative (vacuous) and kept otherwise.
    pub fn normalized(&self) -> Polyhedron {
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        for i in 0..self.num_facets() {
            let norm = self.c.row(i).norm();
            if norm < 1e-12 {
                if self.d[i] < 0.0 {
                    rows.push(self.c.row(i).into_owned());
                    offs.push(self.d[i]);
                }
                continue;
            }
            rows.push(self.c.row(i) / norm);
            offs.push(self.d[i] / norm);
        }
        let c = if rows.is_empty() {
            DMatrix::zeros(0, self.dim())
        } else {
            DMatrix::from_rows(&rows)
        };
        Polyhedron {
            c,
            d: DVector::from_vec(offs),
        }
    }

    /// Drops every facet whose removal does not change the set. A facet is
    /// redundant iff maximizing its row over the remaining facets gives a
    /// value `<= offset + 1e-9`.
    pub fn without_redundancy(&self) -> Polyhedron {
        let mut keep: Vec<bool> = vec![true; self.num_facets()];
        for i in 0..self.num_facets() {
            let mut rows = Vec::new();
            let mut offs = Vec::new();
            for j in 0..self.num_facets() {
                if j != i && keep[j] {
                    rows.push(self.c.row(j).into_owned());
                    offs.push(self.d[j]);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let c = DMatrix::from_rows(&rows);
            let d = DVector::from_vec(offs);
            let p = LpProblem::minimize(-self.c.row(i).transpose(), c, d);
            match solve_lp(&p) {
                LpOutcome::Optimal(s) => {
                    if -s.value <= self.d[i] + 1e-9 {
                        keep[i] = false;
                    }
                }
                _ => {}
            }
        }
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        for i in 0..self.num_facets() {
            if keep[i] {
                rows.push(self.c.row(i).into_owned());
                offs.push(self.d[i]);
            }
        }
        let c = if rows.is_empty() {
            DMatrix::zeros(0, self.dim())
        } else {
            DMatrix::from_rows(&rows)
        };
        Polyhedron {
            c,
            d: DVector::from_vec(offs),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SupportOutcome {
    Finite { value: f64, point: DVector<f64> },
    Unbounded,
    Empty,
}
