//! Sparse symmetric positive-definite solves: a banded Cholesky factorization
//! and Jacobi-preconditioned conjugate gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric sparse matrix in row-compressed form (both triangles stored).
#[derive(Debug, Clone, Default)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Build from per-row `(col, value)` lists. Duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).find(|e| e.0 == i).map_or(0.0, |e| e.1)).collect()
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n).flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j))).max().unwrap_or(0)
    }

    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().with_min_len(512).for_each(|(i, yi)| {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        });
    }

    /// `A + diag(d)`.
    pub fn add_diagonal(&self, d: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, &di) in d.iter().enumerate() {
            let r = out.row_ptr[i]..out.row_ptr[i + 1];
            match out.cols[r.clone()].iter().position(|&c| c == i) {
                Some(p) => out.vals[r.start + p] += di,
                None => {
                    // rebuild the row with the diagonal inserted
                    let mut rows: Vec<Vec<(usize, f64)>> = (0..out.n).map(|k| out.row(k).collect()).collect();
                    for (k, &dk) in d.iter().enumerate().skip(i) {
                        rows[k].push((k, dk));
                    }
                    return Self::from_rows(rows);
                }
            }
        }
        out
    }
}

/// Lower banded Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// Row `i` holds `L[i][i-bw ..= i]`.
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &SparseSym) -> Result<Self> {
        let n = a.n();
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    band[i * w + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = band[i * w + (j + bw - i)];
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                for k in k0..j {
                    s -= band[ri + k] * band[rj + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::LinearSolveFailure(format!("matrix not positive definite at row {i}")));
                    }
                    band[ri + i] = s.sqrt();
                } else {
                    band[ri + j] = s / band[rj + j];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[ri + k] * y[k];
            }
            y[i] = s / self.band[ri + i];
        }
        for i in (0..n).rev() {
            let ri = i * w + bw - i;
            y[i] /= self.band[ri + i];
            let yi = y[i];
            for k in i.saturating_sub(bw)..i {
                y[k] -= self.band[ri + k] * yi;
            }
        }
        y
    }
}

/// Which linear solver to use for SPD systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Banded Cholesky when `n * bw^2` is below a work budget, CG otherwise.
    #[default]
    Auto,
    Direct,
    Iterative,
}

pub const DIRECT_WORK_LIMIT: f64 = 3e8;

/// Jacobi-preconditioned conjugate gradients, starting from `x`.
/// Returns the iteration count.
pub fn pcg(a: &SparseSym, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> Result<usize> {
    let n = a.n();
    let dinv: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut ax = vec![0.0; n];
    a.mul(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= rel_tol * bnorm {
            return Ok(it);
        }
        a.mul(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::LinearSolveFailure("conjugate gradients lost positivity".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * dinv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolveFailure(format!("conjugate gradients did not reach {rel_tol:e} in {max_iter} iterations")))
}

/// Solve `a x = b`; `guess` seeds the iterative path.
pub fn solve_spd(a: &SparseSym, b: &[f64], guess: Option<&[f64]>, kind: SolverKind) -> Result<Vec<f64>> {
    let bw = a.bandwidth() as f64;
    let direct = match kind {
        SolverKind::Direct => true,
        SolverKind::Iterative => false,
        SolverKind::Auto => a.n() as f64 * bw * bw <= DIRECT_WORK_LIMIT,
    };
    if direct {
        Ok(BandedCholesky::factor(a)?.solve(b))
    } else {
        let mut x = guess.map_or_else(|| vec![0.0; a.n()], |g| g.to_vec());
        pcg(a, b, &mut x, 1e-12, 20 * a.n() + 1000)?;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64, periodic: bool) -> SparseSym {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 2.0 + shift)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                }
                if periodic && i == 0 {
                    r.push((n - 1, -1.0));
                }
                if periodic && i == n - 1 {
                    r.push((0, -1.0));
                }
                r
            })
            .collect();
        SparseSym::from_rows(rows)
    }

    #[test]
    fn direct_and_cg_agree() {
        let a = laplacian_1d(200, 0.01, true);
        let b: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.1).sin()).collect();
        let x1 = solve_spd(&a, &b, None, SolverKind::Direct).unwrap();
        let x2 = solve_spd(&a, &b, None, SolverKind::Iterative).unwrap();
        let mut r = vec![0.0; 200];
        a.mul(&x1, &mut r);
        let res = r.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(res < 1e-10);
        let diff = x1.iter().zip(&x2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-7, "{diff}");
    }

    #[test]
    fn indefinite_is_reported() {
        let a = laplacian_1d(10, -3.0, false);
        assert!(matches!(BandedCholesky::factor(&a), Err(Error::LinearSolveFailure(_))));
    }

    #[test]
    fn add_diagonal_inserts_missing_entries() {
        let a = SparseSym::from_rows(vec![vec![(1, 1.0)], vec![(0, 1.0), (1, 3.0)]]);
        let b = a.add_diagonal(&[2.0, 1.0]);
        assert_eq!(b.diagonal(), vec![2.0, 4.0]);
        assert_eq!(b.bandwidth(), 1);
    }
}
