//! Small dense two-phase simplex used by the exhaustive verification oracle.
//!
//! Solves `minimize c·x subject to A·x ≤ b, x ≥ 0`, generically over the
//! scalar: [`num_rational::BigRational`] gives exact arithmetic (Bland's rule
//! then guarantees termination with no tolerance games), and `f64` trades
//! exactness for speed on larger instances with a feasibility slack.

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{One, Signed, Zero};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar a tableau can pivot over.
pub trait LpNum:
    Clone
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(&self) -> f64;
    /// Entries with magnitude at or below this are treated as zero pivots.
    fn pivot_tol() -> Self;
    /// Phase-1 objectives at or below this count as feasible.
    fn feas_tol() -> Self;

    fn is_positive_num(&self) -> bool {
        let t = Self::pivot_tol();
        self.clone() > t
    }

    fn is_negative_num(&self) -> bool {
        let t = -Self::pivot_tol();
        self.clone() < t
    }
}

impl LpNum for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn pivot_tol() -> Self {
        1e-9
    }
    fn feas_tol() -> Self {
        1e-7
    }
}

impl LpNum for BigRational {
    fn from_f64(v: f64) -> Self {
        Ratio::from_float(v).expect("finite float")
    }
    fn to_f64(&self) -> f64 {
        let num = self.numer();
        let den = self.denom();
        // Fall back to high-precision division through f64 conversion of the
        // truncated quotient plus remainder correction.
        rational_to_f64(num, den)
    }
    fn pivot_tol() -> Self {
        BigRational::zero()
    }
    fn feas_tol() -> Self {
        BigRational::zero()
    }

    fn is_positive_num(&self) -> bool {
        Signed::is_positive(self)
    }

    fn is_negative_num(&self) -> bool {
        Signed::is_negative(self)
    }
}

fn rational_to_f64(num: &BigInt, den: &BigInt) -> f64 {
    use num_traits::ToPrimitive;
    if let (Some(n), Some(d)) = (num.to_f64(), den.to_f64()) {
        if d != 0.0 && n.is_finite() && d.is_finite() {
            return n / d;
        }
    }
    // Out of f64 range; scale both sides down.
    let shift = (num.bits().max(den.bits()) as i64 - 900).max(0) as u64;
    let n = (num >> shift).to_f64().unwrap_or(f64::NAN);
    let d = (den >> shift).to_f64().unwrap_or(f64::NAN);
    n / d
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpResult<T> {
    Infeasible,
    Unbounded,
    Optimal { objective: T, x: Vec<T> },
}

struct Tableau<T> {
    /// m rows × (ncols + 1) with the rhs last; column `basis[r]` of row r is
    /// the identity column of its basic variable.
    rows: Vec<Vec<T>>,
    cost: Vec<T>,
    basis: Vec<usize>,
    ncols: usize,
}

enum SimplexOutcome {
    Optimal,
    Unbounded,
}

impl<T: LpNum> Tableau<T> {
    fn pivot(&mut self, r: usize, c: usize) {
        let piv = self.rows[r][c].clone();
        for v in self.rows[r].iter_mut() {
            *v = v.clone() / piv.clone();
        }
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let factor = self.rows[i][c].clone();
            if factor.is_zero() {
                continue;
            }
            for j in 0..=self.ncols {
                let delta = factor.clone() * self.rows[r][j].clone();
                self.rows[i][j] = self.rows[i][j].clone() - delta;
            }
        }
        let factor = self.cost[c].clone();
        if !factor.is_zero() {
            for j in 0..=self.ncols {
                let delta = factor.clone() * self.rows[r][j].clone();
                self.cost[j] = self.cost[j].clone() - delta;
            }
        }
        self.basis[r] = c;
    }

    /// Bland's rule: entering column is the lowest index with negative
    /// reduced cost; leaving row is the minimum ratio, ties to the lowest
    /// basis index.
    fn run(&mut self, allowed_cols: usize) -> SimplexOutcome {
        loop {
            let entering = (0..allowed_cols).find(|&j| self.cost[j].is_negative_num());
            let c = match entering {
                Some(c) => c,
                None => return SimplexOutcome::Optimal,
            };
            let mut leave: Option<(usize, T)> = None;
            for r in 0..self.rows.len() {
                if !self.rows[r][c].is_positive_num() {
                    continue;
                }
                let ratio = self.rows[r][self.ncols].clone() / self.rows[r][c].clone();
                let better = match &leave {
                    None => true,
                    Some((lr, lratio)) => {
                        ratio < *lratio || (ratio == *lratio && self.basis[r] < self.basis[*lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, c),
                None => return SimplexOutcome::Unbounded,
            }
        }
    }
}

/// Minimize `c·x` subject to `a[i]·x ≤ b[i]` and `x ≥ 0`.
pub fn solve_lp<T: LpNum>(c: &[T], a: &[Vec<T>], b: &[T]) -> LpResult<T> {
    let n = c.len();
    let m = a.len();
    assert_eq!(b.len(), m);
    // Columns: n structural, m slacks, then one artificial per negative rhs.
    let neg_rows: Vec<usize> = (0..m).filter(|&i| b[i].is_negative_num()).collect();
    let n_art = neg_rows.len();
    let ncols = n + m + n_art;

    let mut rows: Vec<Vec<T>> = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art_seen = 0usize;
    for i in 0..m {
        assert_eq!(a[i].len(), n);
        let mut row: Vec<T> = vec![T::zero(); ncols + 1];
        let negate = b[i].is_negative_num();
        for j in 0..n {
            row[j] = if negate { -a[i][j].clone() } else { a[i][j].clone() };
        }
        row[n + i] = if negate { -T::one() } else { T::one() };
        row[ncols] = if negate { -b[i].clone() } else { b[i].clone() };
        if negate {
            let art_col = n + m + art_seen;
            art_seen += 1;
            row[art_col] = T::one();
            basis.push(art_col);
        } else {
            basis.push(n + i);
        }
        rows.push(row);
    }

    let mut tab = Tableau {
        rows,
        cost: vec![T::zero(); ncols + 1],
        basis,
        ncols,
    };

    if n_art > 0 {
        // Phase 1: minimize the artificial sum, expressed in nonbasic vars.
        for r in 0..m {
            if tab.basis[r] >= n + m {
                for j in 0..=ncols {
                    tab.cost[j] = tab.cost[j].clone() - tab.rows[r][j].clone();
                }
            }
        }
        for j in n + m..ncols {
            tab.cost[j] = T::zero();
        }
        match tab.run(ncols) {
            SimplexOutcome::Unbounded => unreachable!("phase-1 objective is bounded below by 0"),
            SimplexOutcome::Optimal => {}
        }
        let phase1 = -tab.cost[ncols].clone();
        if phase1 > T::feas_tol() {
            return LpResult::Infeasible;
        }
        // Pivot any artificial still basic (at zero level) out on a
        // structural or slack column; a row with none is redundant.
        for r in 0..m {
            if tab.basis[r] >= n + m {
                if let Some(cc) = (0..n + m).find(|&j| {
                    tab.rows[r][j].is_positive_num() || tab.rows[r][j].is_negative_num()
                }) {
                    tab.pivot(r, cc);
                }
            }
        }
    }

    // Phase 2: original objective expressed over the current basis.
    let mut cost: Vec<T> = vec![T::zero(); ncols + 1];
    cost[..n].clone_from_slice(c);
    tab.cost = cost;
    for r in 0..m {
        let bj = tab.basis[r];
        if bj < n + m {
            let cb = tab.cost[bj].clone();
            if !cb.is_zero() {
                for j in 0..=ncols {
                    let delta = cb.clone() * tab.rows[r][j].clone();
                    tab.cost[j] = tab.cost[j].clone() - delta;
                }
            }
        }
    }

    match tab.run(n + m) {
        SimplexOutcome::Unbounded => LpResult::Unbounded,
        SimplexOutcome::Optimal => {
            let mut x = vec![T::zero(); n];
            for r in 0..m {
                if tab.basis[r] < n {
                    x[tab.basis[r]] = tab.rows[r][tab.ncols].clone();
                }
            }
            let mut objective = T::zero();
            for j in 0..n {
                objective = objective + c[j].clone() * x[j].clone();
            }
            LpResult::Optimal { objective, x }
        }
    }
}

/// Solution of a box-constrained LP in the original (unshifted) variables.
#[derive(Debug, Clone)]
pub struct BoxLpSolution<T> {
    pub objective: T,
    pub x: Vec<T>,
}

/// Minimize `c·x` over the box `lo ≤ x ≤ hi` intersected with halfspaces
/// `g·x ≤ h`, by shifting to `y = x − lo ≥ 0`. Returns `None` when the
/// region is empty; the box keeps the problem bounded.
pub fn minimize_over_box<T: LpNum>(
    c: &[T],
    lo: &[f64],
    hi: &[f64],
    halfspaces: &[(Vec<T>, T)],
) -> Option<BoxLpSolution<T>> {
    let n = lo.len();
    let mut a: Vec<Vec<T>> = Vec::with_capacity(n + halfspaces.len());
    let mut b: Vec<T> = Vec::with_capacity(n + halfspaces.len());
    for i in 0..n {
        let mut row = vec![T::zero(); n];
        row[i] = T::one();
        a.push(row);
        b.push(T::from_f64(hi[i]) - T::from_f64(lo[i]));
    }
    for (g, h) in halfspaces {
        // g·x ≤ h  ⇒  g·y ≤ h − g·lo.
        let mut shift = T::zero();
        for (gi, &l) in g.iter().zip(lo) {
            shift = shift + gi.clone() * T::from_f64(l);
        }
        a.push(g.clone());
        b.push(h.clone() - shift);
    }
    match solve_lp(c, &a, &b) {
        LpResult::Infeasible => None,
        LpResult::Unbounded => unreachable!("box-constrained LP cannot be unbounded"),
        LpResult::Optimal { objective, x } => {
            let mut obj = objective;
            let mut point = Vec::with_capacity(n);
            for i in 0..n {
                obj = obj + c[i].clone() * T::from_f64(lo[i]);
                point.push(x[i].clone() + T::from_f64(lo[i]));
            }
            Some(BoxLpSolution { objective: obj, x: point })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_lp_optimum() {
        // min −x − y s.t. x + y ≤ 1 → objective −1 on the edge.
        let r = solve_lp::<f64>(&[-1.0, -1.0], &[vec![1.0, 1.0]], &[1.0]);
        match r {
            LpResult::Optimal { objective, .. } => assert!((objective + 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infeasible_detected() {
        // x ≥ 0 and x ≤ −1 cannot hold.
        let r = solve_lp::<f64>(&[1.0], &[vec![1.0]], &[-1.0]);
        assert_eq!(r, LpResult::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let r = solve_lp::<f64>(&[-1.0], &[], &[]);
        assert_eq!(r, LpResult::Unbounded);
    }

    #[test]
    fn rational_solution_is_exact() {
        // min −x s.t. 3x ≤ 1 → x = 1/3 exactly.
        let c = vec![-BigRational::one()];
        let a = vec![vec![BigRational::from_f64(3.0)]];
        let b = vec![BigRational::one()];
        match solve_lp(&c, &a, &b) {
            LpResult::Optimal { objective, x } => {
                let third = BigRational::new(BigInt::from(1), BigInt::from(3));
                assert_eq!(x[0], third);
                assert_eq!(objective, -third);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_rhs_needs_phase_one() {
        // min x s.t. −x ≤ −2 (i.e. x ≥ 2) → x = 2.
        let r = solve_lp::<f64>(&[1.0], &[vec![-1.0]], &[-2.0]);
        match r {
            LpResult::Optimal { objective, x } => {
                assert!((objective - 2.0).abs() < 1e-9);
                assert!((x[0] - 2.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rational_and_float_agree_on_random_lps() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(53, "lp-test", 0);
        for _ in 0..30 {
            let n = rng.gen_range(2..5);
            let m = rng.gen_range(1..6);
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.2..1.0)).collect();
            // Add a box so the problem is never unbounded.
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            for i in 0..n {
                let mut row = vec![0.0; n];
                row[i] = 1.0;
                a2.push(row);
                b2.push(5.0);
            }
            let fr = solve_lp::<f64>(&c, &a2, &b2);
            let cr: Vec<BigRational> = c.iter().map(|&v| BigRational::from_f64(v)).collect();
            let ar: Vec<Vec<BigRational>> = a2
                .iter()
                .map(|row| row.iter().map(|&v| BigRational::from_f64(v)).collect())
                .collect();
            let br: Vec<BigRational> = b2.iter().map(|&v| BigRational::from_f64(v)).collect();
            let rr = solve_lp(&cr, &ar, &br);
            match (fr, rr) {
                (LpResult::Infeasible, LpResult::Infeasible) => {}
                (
                    LpResult::Optimal { objective: fo, .. },
                    LpResult::Optimal { objective: ro, .. },
                ) => {
                    assert!((fo - ro.to_f64()).abs() < 1e-6, "{fo} vs {}", ro.to_f64());
                }
                (f, r) => panic!("disagree: {f:?} vs {r:?}"),
            }
        }
    }
}
