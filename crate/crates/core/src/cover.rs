//! Interval algebra on `{0,1}^(T*m)`.
//!
//! A branch-and-bound frontier is a collection of pairwise-disjoint boxes
//! `[lower, upper]` with binary bounds whose union covers the whole binary
//! hypercube; each box identifies one convex relaxation. Boxes are stored as
//! `(fixed-mask, fixed-values)` bitsets, stage-major: the bit of binary `j`
//! at stage `t` lives at index `t*m + j`.

use crate::dual::{DualSolution, InfeasibilityCertificate};
use std::fmt;
use std::sync::Arc;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Interval {
    len: usize,
    /// Bit set where the entry is fixed.
    mask: Vec<u64>,
    /// Fixed values; always a subset of `mask`.
    val: Vec<u64>,
}

fn words(len: usize) -> usize {
    len.div_ceil(64)
}

impl Interval {
    /// The free hypercube `[0,1]^len`.
    pub fn free(len: usize) -> Self {
        Interval {
            len,
            mask: vec![0; words(len)],
            val: vec![0; words(len)],
        }
    }

    /// Build from explicit binary bound vectors (`lower <= upper`).
    pub fn from_bounds(lower: &[u8], upper: &[u8]) -> Self {
        assert_eq!(lower.len(), upper.len());
        let len = lower.len();
        let mut iv = Interval::free(len);
        for i in 0..len {
            assert!(lower[i] <= upper[i], "lower > upper at bit {i}");
            assert!(upper[i] <= 1, "bounds must be binary");
            if lower[i] == upper[i] {
                iv.fix(i, lower[i] == 1);
            }
        }
        iv
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn fix(&mut self, idx: usize, one: bool) {
        let (w, b) = (idx / 64, idx % 64);
        self.mask[w] |= 1 << b;
        if one {
            self.val[w] |= 1 << b;
        } else {
            self.val[w] &= !(1 << b);
        }
    }

    pub fn is_fixed(&self, idx: usize) -> bool {
        let (w, b) = (idx / 64, idx % 64);
        self.mask[w] >> b & 1 == 1
    }

    pub fn lower_bit(&self, idx: usize) -> u8 {
        let (w, b) = (idx / 64, idx % 64);
        ((self.mask[w] & self.val[w]) >> b & 1) as u8
    }

    pub fn upper_bit(&self, idx: usize) -> u8 {
        let (w, b) = (idx / 64, idx % 64);
        if self.mask[w] >> b & 1 == 1 {
            (self.val[w] >> b & 1) as u8
        } else {
            1
        }
    }

    pub fn free_count(&self) -> usize {
        self.len - self.mask.iter().map(|w| w.count_ones() as usize).sum::<usize>()
    }

    /// Membership of a binary assignment.
    pub fn contains(&self, a: &[bool]) -> bool {
        assert_eq!(a.len(), self.len, "assignment length mismatch");
        for (i, &bit) in a.iter().enumerate() {
            let (w, b) = (i / 64, i % 64);
            if self.mask[w] >> b & 1 == 1 && (self.val[w] >> b & 1 == 1) != bit {
                return false;
            }
        }
        true
    }

    /// Two intervals are disjoint iff some commonly fixed bit disagrees.
    pub fn disjoint(&self, other: &Interval) -> bool {
        debug_assert_eq!(self.len, other.len);
        self.mask
            .iter()
            .zip(&other.mask)
            .zip(self.val.iter().zip(&other.val))
            .any(|((ma, mb), (va, vb))| (ma & mb) & (va ^ vb) != 0)
    }

    /// Splits a free entry into the zero- and one-fixed children.
    pub fn split(&self, idx: usize) -> Option<(Interval, Interval)> {
        if idx >= self.len || self.is_fixed(idx) {
            return None;
        }
        let mut zero = self.clone();
        zero.fix(idx, false);
        let mut one = self.clone();
        one.fix(idx, true);
        Some((zero, one))
    }

    /// Per-stage bound vectors `(lower, upper)` for stage `t` of width `m`.
    pub fn stage_bounds(&self, t: usize, m: usize) -> (Vec<u8>, Vec<u8>) {
        let mut lo = vec![0u8; m];
        let mut hi = vec![0u8; m];
        for j in 0..m {
            lo[j] = self.lower_bit(t * m + j);
            hi[j] = self.upper_bit(t * m + j);
        }
        (lo, hi)
    }

    /// Does the stage-0 block admit the applied binary action?
    pub fn stage0_contains(&self, v0: &[bool], m: usize) -> bool {
        debug_assert_eq!(v0.len(), m);
        for (j, &bit) in v0.iter().enumerate() {
            if self.is_fixed(j) && (self.lower_bit(j) == 1) != bit {
                return false;
            }
        }
        true
    }

    /// Shift one stage back in time: drop the stage-0 block and append a free
    /// block for the new terminal stage.
    pub fn shifted(&self, m: usize) -> Interval {
        let mut out = Interval::free(self.len);
        for i in m..self.len {
            if self.is_fixed(i) {
                out.fix(i - m, self.lower_bit(i) == 1);
            }
        }
        out
    }

    /// First free index in stage-major order, if any.
    pub fn first_free(&self) -> Option<usize> {
        (0..self.len).find(|&i| !self.is_fixed(i))
    }
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            write!(f, "{}", self.lower_bit(i))?;
        }
        write!(f, "|")?;
        for i in 0..self.len {
            write!(f, "{}", self.upper_bit(i))?;
        }
        Ok(())
    }
}

/// How a frontier node last acquired its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    SolvedOptimal,
    Cutoff,
    Infeasible,
    InheritedBound,
}

/// Dual information attached to a frontier node.
#[derive(Debug, Clone)]
pub enum DualData {
    Point(Arc<DualSolution>),
    Certificate(Arc<InfeasibilityCertificate>),
}

impl DualData {
    pub fn solution(&self) -> &DualSolution {
        match self {
            DualData::Point(d) => d,
            DualData::Certificate(c) => c.solution(),
        }
    }
}

/// A frontier leaf: an interval with its lower bound and dual data.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub interval: Interval,
    /// Lower bound on the subproblem optimum; `f64::INFINITY` when the
    /// subproblem is known infeasible.
    pub bound: f64,
    pub dual: Option<DualData>,
    pub status: NodeStatus,
    /// Creation sequence number, used to break best-first ties.
    pub seq: u64,
}

impl NodeRecord {
    pub fn root(interval: Interval, seq: u64) -> Self {
        NodeRecord {
            interval,
            bound: 0.0,
            dual: None,
            status: NodeStatus::InheritedBound,
            seq,
        }
    }
}

/// A disjoint cover of the binary hypercube, with per-interval annotations.
#[derive(Debug, Clone)]
pub struct Cover {
    pub records: Vec<NodeRecord>,
    bits: usize,
    m: usize,
}

impl Cover {
    /// The trivial single-box cover.
    pub fn trivial(horizon: usize, m: usize) -> Self {
        let bits = horizon * m;
        Cover {
            records: vec![NodeRecord::root(Interval::free(bits), 0)],
            bits,
            m,
        }
    }

    pub fn from_records(records: Vec<NodeRecord>, horizon: usize, m: usize) -> Self {
        let bits = horizon * m;
        debug_assert!(records.iter().all(|r| r.interval.len() == bits));
        Cover { records, bits, m }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn binaries_per_stage(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn intervals(&self) -> impl Iterator<Item = &Interval> {
        self.records.iter().map(|r| &r.interval)
    }

    /// Text dump, one `lower|upper` line per interval in stage-major order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{:?}\n", r.interval));
        }
        s
    }
}

/// A cover is valid iff its intervals are pairwise disjoint and their
/// cardinalities sum to the full hypercube. Supports up to 127 bits.
pub fn validate_cover(cover: &Cover, horizon: usize, m: usize) -> bool {
    let bits = horizon * m;
    assert!(bits <= 127, "cardinality check supports at most 127 bits");
    if cover.bits != bits {
        return false;
    }
    let n = cover.records.len();
    for i in 0..n {
        if cover.records[i].interval.len() != bits {
            return false;
        }
        for j in i + 1..n {
            if !cover.records[i].interval.disjoint(&cover.records[j].interval) {
                return false;
            }
        }
    }
    let total: u128 = cover
        .records
        .iter()
        .map(|r| 1u128 << r.interval.free_count())
        .sum();
    total == 1u128 << bits
}

/// Keeps the intervals whose stage-0 block admits the applied binary action,
/// shifts them one stage back in time, and appends a free terminal block.
/// Node annotations are carried along for the warm-start construction.
pub fn shift_cover(cover: &Cover, v0: &[bool]) -> Cover {
    let m = cover.m;
    assert_eq!(v0.len(), m, "applied action has wrong width");
    let mut records = Vec::with_capacity(cover.records.len());
    for r in &cover.records {
        if !r.interval.stage0_contains(v0, m) {
            continue;
        }
        let mut nr = r.clone();
        nr.interval = r.interval.shifted(m);
        records.push(nr);
    }
    Cover {
        records,
        bits: cover.bits,
        m,
    }
}
