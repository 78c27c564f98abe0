//! Offline toolchain for terminal penalties and constraints: the discrete
//! algebraic Riccati equation, the maximal positive-invariant set of the
//! resulting closed loop, and the nonnegative link matrices that remap
//! stage-constraint multipliers between consecutive stages with different
//! constraint sets.

use crate::lp::{solve_lp, LpOutcome, LpProblem};
use crate::model::StageData;
use crate::polyhedron::{Polyhedron, SupportOutcome};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Offline data of a terminal-constrained controller.
#[derive(Debug, Clone)]
pub struct TerminalData {
    /// Riccati cost-to-go matrix.
    pub penalty: DMatrix<f64>,
    /// State-feedback gain of the associated controller.
    pub gain: DMatrix<f64>,
    /// Maximal positive-invariant set of the closed loop.
    pub invariant_set: Polyhedron,
}

/// Fixed-point residual of the Riccati equation at `p`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let bt_p = b.transpose() * p;
    let inner = r + &bt_p * b;
    let inv = inner.try_inverse().expect("R + B'PB invertible for PSD P, PD R");
    let next = a.transpose() * p * a - a.transpose() * p * b * inv * &bt_p * a + q;
    (&next - p).amax()
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q` and returns `(P, K)` with `K` the optimal gain, so the
/// closed loop is `A - B K`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    const MAX_ITER: usize = 100_000;
    const TOL: f64 = 1e-12;
    let mut p = q.clone();
    for _ in 0..MAX_ITER {
        let bt_p = b.transpose() * &p;
        let inner = r + &bt_p * b;
        let inv = inner
            .try_inverse()
            .ok_or_else(|| Error::Engine("R + B'PB became singular".into()))?;
        let next = a.transpose() * &p * a - a.transpose() * &p * b * &inv * &bt_p * a + q;
        let delta = (&next - &p).amax();
        p = next;
        if delta <= TOL * (1.0 + p.amax()) {
            let bt_p = b.transpose() * &p;
            let inner = r + &bt_p * b;
            let k = inner
                .try_inverse()
                .ok_or_else(|| Error::Engine("R + B'PB became singular".into()))?
                * &bt_p
                * a;
            let res = dare_residual(a, b, q, r, &p);
            if res > 1e-10 * (1.0 + p.amax()) {
                return Err(Error::Engine(format!(
                    "Riccati fixed point has residual {res:.2e}"
                )));
            }
            return Ok((p, k));
        }
    }
    Err(Error::RiccatiDiverged(MAX_ITER))
}

/// Symmetric square root of a PSD matrix through its eigendecomposition.
pub fn symmetric_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = p.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Largest set `O` inside `constraints` with `A_cl O ⊆ O`, computed by
/// adding the one-step preimages of the current facets until every new facet
/// is redundant. Facet rows are normalized before comparison.
pub fn max_positive_invariant(
    a_cl: &DMatrix<f64>,
    constraints: &Polyhedron,
    cap: usize,
) -> Result<Polyhedron> {
    let base = constraints.normalized().without_redundancy();
    let mut rows: Vec<(DVector<f64>, f64)> = (0..base.num_facets())
        .map(|i| (base.matrix().row(i).transpose(), base.offsets()[i]))
        .collect();
    let mut frontier: Vec<usize> = (0..rows.len()).collect();
    for _iter in 0..cap {
        if frontier.is_empty() {
            break;
        }
        let current = polyhedron_from_rows(&rows, a_cl.ncols());
        let mut added = Vec::new();
        for &i in &frontier {
            let cand_row = a_cl.transpose() * &rows[i].0;
            let norm = cand_row.norm();
            if norm < 1e-12 {
                continue;
            }
            let cand = (cand_row / norm, rows[i].1 / norm);
            if rows.iter().any(|(c, d)| (c - &cand.0).amax() < 1e-9 && (d - cand.1).abs() < 1e-9)
            {
                continue;
            }
            // Redundant iff its support over the current set stays below the
            // offset.
            match current.support(&cand.0) {
                Some(v) if v <= cand.1 + 1e-9 => continue,
                _ => {}
            }
            added.push(rows.len());
            rows.push(cand);
        }
        if added.is_empty() {
            return Ok(polyhedron_from_rows(&rows, a_cl.ncols()).without_redundancy());
        }
        frontier = added;
    }
    if frontier.is_empty() {
        Ok(polyhedron_from_rows(&rows, a_cl.ncols()).without_redundancy())
    } else {
        Err(Error::InvariantSetCap(cap))
    }
}

fn polyhedron_from_rows(rows: &[(DVector<f64>, f64)], dim: usize) -> Polyhedron {
    let mut c = DMatrix::zeros(rows.len(), dim);
    let mut d = DVector::zeros(rows.len());
    for (i, (row, off)) in rows.iter().enumerate() {
        c.row_mut(i).copy_from(&row.transpose());
        d[i] = *off;
    }
    Polyhedron::new(c, d).expect("consistent rows")
}

/// Per-stage-pair multiplier remaps. `None` entries mean the two stages
/// share the same constraint rows and the remap is the identity.
#[derive(Debug, Clone)]
pub struct LinkMatrices {
    maps: Vec<Option<DMatrix<f64>>>,
}

impl LinkMatrices {
    /// Identity remaps everywhere (time-invariant constraint sets).
    pub fn identity(stage: &StageData) -> Self {
        LinkMatrices {
            maps: vec![None; stage.horizon.saturating_sub(1)],
        }
    }

    pub fn map(&self, t: usize) -> Option<&DMatrix<f64>> {
        self.maps.get(t).and_then(|m| m.as_ref())
    }
}

/// Builds the link matrices of a stage-data set: for every consecutive pair
/// with different constraint rows, column `i` minimizes `h_t' m` over the
/// nonnegative vectors with `[F_t G_t]' m` equal to the `i`-th row of
/// `[F_{t+1} G_{t+1}]`. Infeasibility of any column LP means the conic-hull
/// assumption fails for that facet.
pub fn compute_link_matrices(stage: &StageData) -> Result<LinkMatrices> {
    let mut maps = Vec::with_capacity(stage.horizon.saturating_sub(1));
    for t in 0..stage.horizon.saturating_sub(1) {
        if stage.same_domain(t, t + 1) {
            maps.push(None);
            continue;
        }
        maps.push(Some(link_matrix(&stage.d[t], &stage.d[t + 1], t)?));
    }
    Ok(LinkMatrices { maps })
}

fn link_matrix(prev: &Polyhedron, next: &Polyhedron, t: usize) -> Result<DMatrix<f64>> {
    let rows_prev = prev.num_facets();
    let rows_next = next.num_facets();
    let cols = crate::par::indexed_map_collect(rows_next, |i| {
        let target = next.matrix().row(i).transpose();
        let p = LpProblem::minimize(
            prev.offsets().clone(),
            -DMatrix::identity(rows_prev, rows_prev),
            DVector::zeros(rows_prev),
        )
        .with_equalities(prev.matrix().transpose(), target);
        match solve_lp(&p) {
            LpOutcome::Optimal(s) => Ok(s.x),
            _ => Err(Error::LinkInfeasible { stage: t, facet: i }),
        }
    });
    let mut m = DMatrix::zeros(rows_prev, rows_next);
    for (i, col) in cols.into_iter().enumerate() {
        let col = col?;
        for r in 0..rows_prev {
            m[(r, i)] = col[r].max(0.0);
        }
    }
    Ok(m)
}

/// Random point on the boundary of a bounded polyhedron, via the support
/// point in a random direction.
pub fn boundary_point(
    set: &Polyhedron,
    rng: &mut impl rand::Rng,
) -> Option<DVector<f64>> {
    use rand::RngExt;
    let dir = DVector::from_fn(set.dim(), |_, _| rng.random_range(-1.0..1.0f64));
    if dir.norm() < 1e-9 {
        return None;
    }
    match set.support_point(&dir) {
        SupportOutcome::Finite { point, .. } => Some(point),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn zero_dynamics_fixed_point_is_the_weight() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1., 0.]);
        let q = DMatrix::identity(2, 2) * 3.0;
        let r = DMatrix::identity(1, 1);
        let (p, k) = solve_dare(&a, &b, &q, &r).unwrap();
        assert_relative_eq!((p - q).amax(), 0.0, epsilon = 1e-10);
        assert_relative_eq!(k.amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn scalar_fixed_point_is_the_golden_ratio() {
        let one = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (p, _) = solve_dare(&one, &one, &one, &one).unwrap();
        assert_relative_eq!(p[(0, 0)], (1.0 + 5.0f64.sqrt()) / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn contractive_scalar_box_is_already_invariant() {
        let a_cl = DMatrix::from_row_slice(1, 1, &[0.5]);
        let box1 = Polyhedron::bounding_box(
            &DVector::from_element(1, -1.0),
            &DVector::from_element(1, 1.0),
        );
        let omega = max_positive_invariant(&a_cl, &box1, 500).unwrap();
        assert_eq!(omega.num_facets(), 2);
        assert!(omega.contains(&DVector::from_element(1, 1.0), 1e-9));
        assert!(!omega.contains(&DVector::from_element(1, 1.01), 1e-9));
    }

    #[test]
    fn nilpotent_map_keeps_the_constraints() {
        let a_cl = DMatrix::zeros(2, 2);
        let cons = Polyhedron::bounding_box(
            &DVector::from_row_slice(&[-1., -2.]),
            &DVector::from_row_slice(&[1., 2.]),
        );
        let omega = max_positive_invariant(&a_cl, &cons, 500).unwrap();
        assert_eq!(omega.num_facets(), 4);
    }

    #[test]
    fn rotation_shrinks_the_box_to_something_invariant() {
        // A stable rotation-and-contraction; the invariant set gains facets
        // but must stay invariant at sampled boundary points.
        let th = 0.7f64;
        let a_cl = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * 0.9;
        let cons = Polyhedron::bounding_box(
            &DVector::from_row_slice(&[-1., -1.]),
            &DVector::from_row_slice(&[1., 1.]),
        );
        let omega = max_positive_invariant(&a_cl, &cons, 500).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            if let Some(x) = boundary_point(&omega, &mut rng) {
                assert!(omega.contains(&x, 1e-7));
                assert!(omega.contains(&(&a_cl * &x), 1e-7), "image left the set");
            }
        }
    }

    #[test]
    fn identical_domains_use_identity_links() {
        let stage = crate::bnb::tests::toy_stage(3);
        let links = compute_link_matrices(&stage).unwrap();
        for t in 0..2 {
            assert!(links.map(t).is_none());
        }
    }

    #[test]
    fn equal_sets_give_exact_offset_transfer() {
        // With D_t = D_{t+1} built as distinct objects, every column LP must
        // return the unit vector cost h_i exactly.
        let box2 = Polyhedron::bounding_box(
            &DVector::from_row_slice(&[-1., -2.]),
            &DVector::from_row_slice(&[3., 2.]),
        );
        let m = link_matrix(&box2, &box2.clone(), 0).unwrap();
        let transfer = box2.offsets().transpose() * &m;
        for i in 0..box2.num_facets() {
            assert_relative_eq!(transfer[(0, i)], box2.offsets()[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn redundant_copy_maps_to_the_unit_vector() {
        // next = a single copy of one facet of a box: the cheapest conic
        // combination producing that row is the row itself.
        let box2 = Polyhedron::bounding_box(
            &DVector::from_row_slice(&[-1., -1.]),
            &DVector::from_row_slice(&[1., 1.]),
        );
        let next = Polyhedron::new(
            DMatrix::from_row_slice(1, 2, &[1., 0.]),
            DVector::from_row_slice(&[1.0]),
        )
        .unwrap();
        let m = link_matrix(&box2, &next, 0).unwrap();
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-9);
        for r in 1..4 {
            assert_relative_eq!(m[(r, 0)], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn column_lp_value_equals_direct_support_maximization() {
        // The dual reading of the column LP: its optimal value equals the
        // maximum of the next-stage row over the previous-stage set.
        let prev = Polyhedron::bounding_box(
            &DVector::from_row_slice(&[-0.5, -1.5]),
            &DVector::from_row_slice(&[2.0, 1.0]),
        );
        let next_rows = DMatrix::from_row_slice(2, 2, &[1., 1., -2., 0.5]);
        let next = Polyhedron::new(next_rows.clone(), DVector::from_row_slice(&[5., 5.])).unwrap();
        let m = link_matrix(&prev, &next, 0).unwrap();
        for i in 0..2 {
            let lp_value = prev.offsets().dot(&m.column(i).into_owned());
            let support = prev.support(&next_rows.row(i).transpose()).unwrap();
            assert_relative_eq!(lp_value, support, epsilon = 1e-8);
        }
    }
}
