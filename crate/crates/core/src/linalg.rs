//! Householder QR with column-norm pivoting and the solvers built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{NarxError, Result};

/// Relative pivot tolerance used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// `A Π = Q R` with Householder reflectors and greedy column-norm pivoting.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// R in the upper triangle; reflectors are kept separately.
    r: DMatrix<f64>,
    reflectors: Vec<(DVector<f64>, f64)>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(mut a: DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let steps = m.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::with_capacity(steps);
        let mut first_pivot = 0.0;
        let mut rank = 0;

        for j in 0..steps {
            let (p, norm) = (j..n)
                .map(|k| (k, a.view((j, k), (m - j, 1)).norm()))
                .fold((j, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if p != j {
                a.swap_columns(j, p);
                perm.swap(j, p);
            }
            if j == 0 {
                first_pivot = norm;
            }
            if norm > RANK_TOL * first_pivot && norm > 0.0 {
                rank += 1;
            }
            if norm == 0.0 {
                reflectors.push((DVector::zeros(m - j), 0.0));
                continue;
            }
            let x0 = a[(j, j)];
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            let mut v = a.view((j, j), (m - j, 1)).clone_owned().column(0).into_owned();
            v[0] -= alpha;
            let vtv = v.norm_squared();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for k in j..n {
                let s = beta * (0..m - j).map(|i| v[i] * a[(j + i, k)]).sum::<f64>();
                for i in 0..m - j {
                    a[(j + i, k)] -= s * v[i];
                }
            }
            reflectors.push((v, beta));
        }
        PivotedQr { r: a, reflectors, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    pub fn is_full_column_rank(&self) -> bool {
        self.rank == self.r.ncols()
    }

    /// Original indices of the columns left out of the numerically
    /// independent leading set, sorted.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.perm[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    /// Column order chosen by the pivoting.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Applies `Qᵀ` in place.
    pub fn apply_qt(&self, b: &mut DVector<f64>) {
        for (j, (v, beta)) in self.reflectors.iter().enumerate() {
            let mut tail = b.rows_mut(j, v.len());
            let s = beta * v.dot(&tail);
            tail.axpy(-s, v, 1.0);
        }
    }

    /// Applies `Q` in place.
    pub fn apply_q(&self, b: &mut DVector<f64>) {
        for (j, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            let mut tail = b.rows_mut(j, v.len());
            let s = beta * v.dot(&tail);
            tail.axpy(-s, v, 1.0);
        }
    }

    /// Full square `Q`.
    pub fn q_full(&self) -> DMatrix<f64> {
        let m = self.r.nrows();
        let mut q = DMatrix::identity(m, m);
        for i in 0..m {
            let mut col = q.column(i).into_owned();
            self.apply_q(&mut col);
            q.set_column(i, &col);
        }
        q
    }

    /// Leading `rank × rank` block of R.
    pub fn r_leading(&self) -> DMatrix<f64> {
        let k = self.rank;
        self.r.view((0, 0), (k, k)).upper_triangle()
    }

    /// Least-squares solution; fails unless the matrix has full column rank.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.is_full_column_rank() {
            return Err(NarxError::RankDeficient {
                columns: self.dependent_columns(),
            });
        }
        let n = self.r.ncols();
        let mut qtb = b.clone();
        self.apply_qt(&mut qtb);
        let mut z = DVector::zeros(n);
        for i in (0..n).rev() {
            let mut s = qtb[i];
            for k in i + 1..n {
                s -= self.r[(i, k)] * z[k];
            }
            z[i] = s / self.r[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        Ok(x)
    }
}

/// `argmin ‖A x − b‖₂` through pivoted QR.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(NarxError::invalid(format!(
            "matrix has {} rows but target has {}",
            a.nrows(),
            b.len()
        )));
    }
    if a.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    if a.nrows() < a.ncols() {
        return Err(NarxError::InsufficientData {
            needed: a.ncols() - 1,
            available: a.nrows(),
        });
    }
    PivotedQr::new(a.clone()).solve(b)
}

/// Orthonormal split of parameter space against the equality constraints
/// `S x = c`: `x = particular + basis · z` covers exactly the feasible set.
#[derive(Debug, Clone)]
pub struct ConstraintNullSpace {
    pub particular: DVector<f64>,
    pub basis: DMatrix<f64>,
}

impl ConstraintNullSpace {
    pub fn new(s: &DMatrix<f64>, c: &DVector<f64>) -> Result<Self> {
        let (r, n) = s.shape();
        if r != c.len() {
            return Err(NarxError::invalid(format!(
                "constraint matrix has {r} rows but target has {}",
                c.len()
            )));
        }
        if r > n {
            return Err(NarxError::invalid(format!(
                "{r} constraints exceed {n} parameters"
            )));
        }
        if r == 0 {
            return Ok(ConstraintNullSpace {
                particular: DVector::zeros(n),
                basis: DMatrix::identity(n, n),
            });
        }
        let qr = PivotedQr::new(s.transpose());
        if !qr.is_full_column_rank() {
            return Err(NarxError::RankDeficientConstraints {
                rows: qr.dependent_columns(),
            });
        }
        // Sᵀ Π = Q₁ R₁, so S x = c  ⇔  Q₁ᵀ x = R₁⁻ᵀ Πᵀ c.
        let r1 = qr.r_leading();
        let pc = DVector::from_iterator(r, qr.permutation().iter().map(|&i| c[i]));
        let w = r1
            .transpose()
            .solve_lower_triangular(&pc)
            .ok_or_else(|| NarxError::Singular("constraint factor".into()))?;
        let q = qr.q_full();
        let particular = q.columns(0, r) * w;
        let basis = q.columns(r, n - r).into_owned();
        Ok(ConstraintNullSpace { particular, basis })
    }
}

/// Stacks matrices vertically.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, 0), (b.nrows(), cols)).copy_from(b);
        at += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_exact_solution() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let x = DVector::from_vec(vec![0.5, -2.0]);
        let b = &a * &x;
        let sol = least_squares(&a, &b).unwrap();
        assert!((sol - x).amax() < 1e-14);
    }

    #[test]
    fn reports_dependent_columns() {
        // Third column = first + second.
        let a = DMatrix::from_fn(6, 3, |i, j| {
            let x = i as f64;
            match j {
                0 => 1.0,
                1 => x,
                _ => 1.0 + x,
            }
        });
        let err = least_squares(&a, &DVector::zeros(6)).unwrap_err();
        match err {
            NarxError::RankDeficient { columns } => assert_eq!(columns.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn null_space_is_feasible_and_orthogonal() {
        let s = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        let c = DVector::from_vec(vec![3.0, -1.0]);
        let ns = ConstraintNullSpace::new(&s, &c).unwrap();
        assert!((&s * &ns.particular - &c).amax() < 1e-14);
        assert!((&s * &ns.basis).amax() < 1e-14);
        let gram = ns.basis.transpose() * &ns.basis;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn duplicate_constraint_rows_rejected() {
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 0.0]);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            ConstraintNullSpace::new(&s, &c),
            Err(NarxError::RankDeficientConstraints { .. })
        ));
    }
}
