//! Sparse linear least squares `min ‖J x − b‖²` solved through the normal
//! equations with Jacobi-preconditioned conjugate gradients.
//!
//! All reductions use fixed-size chunks summed in order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 4096;

/// Deterministic parallel sum.
pub fn det_sum(values: &[f64]) -> f64 {
    let partials: Vec<f64> = values.par_chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    partials.iter().sum()
}

pub fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partials.iter().sum()
}

/// Compressed sparse rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csr {
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn new(n_cols: usize) -> Self {
        Csr {
            n_cols,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn push_row(&mut self, entries: &[(u32, f64)]) {
        for &(c, v) in entries {
            debug_assert!((c as usize) < self.n_cols);
            self.cols.push(c);
            self.vals.push(v);
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// Appends all rows of `other` (same column count).
    pub fn append(&mut self, other: &Csr) {
        debug_assert_eq!(self.n_cols, other.n_cols);
        let base = self.cols.len();
        self.cols.extend_from_slice(&other.cols);
        self.vals.extend_from_slice(&other.vals);
        self.row_ptr.extend(other.row_ptr[1..].iter().map(|p| p + base));
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(r, o)| {
            let (c, v) = self.row(r);
            *o = c.iter().zip(v).map(|(&c, &v)| v * x[c as usize]).sum();
        });
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0u32; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for r in 0..self.n_rows() {
            let (c, v) = self.row(r);
            for (&c, &v) in c.iter().zip(v) {
                let slot = next[c as usize];
                cols[slot] = r as u32;
                vals[slot] = v;
                next[c as usize] += 1;
            }
        }
        Csr {
            n_cols: self.n_rows(),
            row_ptr,
            cols,
            vals,
        }
    }
}

/// Residuals `J x − b`, one row per scalar residual (weights folded in).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeastSquares {
    pub jacobian: Csr,
    pub rhs: Vec<f64>,
}

impl LeastSquares {
    pub fn new(n_unknowns: usize) -> Self {
        LeastSquares {
            jacobian: Csr::new(n_unknowns),
            rhs: Vec::new(),
        }
    }

    pub fn n_unknowns(&self) -> usize {
        self.jacobian.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn push(&mut self, entries: &[(u32, f64)], rhs: f64) {
        self.jacobian.push_row(entries);
        self.rhs.push(rhs);
    }

    pub fn append(&mut self, other: &LeastSquares) {
        self.jacobian.append(&other.jacobian);
        self.rhs.extend_from_slice(&other.rhs);
    }

    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n_rows()];
        self.jacobian.mul_vec(x, &mut r);
        r.par_iter_mut().zip(&self.rhs).for_each(|(r, b)| *r -= b);
        r
    }

    /// `‖J x − b‖²`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let r = self.residuals(x);
        det_dot(&r, &r)
    }

    /// Sum of squared residuals over the row range `rows`.
    pub fn objective_rows(&self, x: &[f64], rows: std::ops::Range<usize>) -> f64 {
        let r = self.residuals(x);
        let part = &r[rows];
        det_dot(part, part)
    }

    /// `∇ ‖J x − b‖² = 2 Jᵀ (J x − b)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let jt = self.jacobian.transpose();
        let r = self.residuals(x);
        let mut g = vec![0.0; self.n_unknowns()];
        jt.mul_vec(&r, &mut g);
        g.iter_mut().for_each(|v| *v *= 2.0);
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    /// `‖Jᵀ(b − J x)‖ / ‖Jᵀ b‖` at exit.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves `JᵀJ x = Jᵀb` starting from `x`, in place.
pub fn solve_normal_equations(
    ls: &LeastSquares,
    x: &mut [f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<CgOutcome> {
    let n = ls.n_unknowns();
    assert_eq!(x.len(), n);
    let j = &ls.jacobian;
    let jt = j.transpose();
    let mut tmp = vec![0.0; j.n_rows()];
    let normal_op = |v: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        j.mul_vec(v, tmp);
        jt.mul_vec(tmp, out);
    };

    let mut diag = vec![0.0; n];
    diag.par_iter_mut().enumerate().for_each(|(c, d)| {
        let (_, v) = jt.row(c);
        let s: f64 = v.iter().map(|v| v * v).sum();
        *d = if s > 0.0 { 1.0 / s } else { 1.0 };
    });

    let mut b = vec![0.0; n];
    jt.mul_vec(&ls.rhs, &mut b);
    let b_norm = det_dot(&b, &b).sqrt();
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };

    let mut r = vec![0.0; n];
    normal_op(x, &mut r, &mut tmp);
    r.par_iter_mut().zip(&b).for_each(|(r, b)| *r = b - *r);
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = det_dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = det_dot(&r, &r).sqrt() / scale;
    let mut it = 0;
    while it < max_iterations && res > tolerance {
        normal_op(&p, &mut ap, &mut tmp);
        let pap = det_dot(&p, &ap);
        if !(pap > 0.0) {
            if pap.is_nan() {
                return Err(Error::Numerical("NaN in conjugate gradient".into()));
            }
            // Search direction lies in the null space; nothing left to reduce.
            break;
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, ap)| *r -= alpha * ap);
        z.par_iter_mut()
            .zip(&r)
            .zip(&diag)
            .for_each(|((z, r), d)| *z = r * d);
        let rz_new = det_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        it += 1;
        res = det_dot(&r, &r).sqrt() / scale;
        if !res.is_finite() {
            return Err(Error::Numerical("non-finite residual in conjugate gradient".into()));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite solution".into()));
    }
    // Report the true residual, not the recurrence.
    normal_op(x, &mut r, &mut tmp);
    r.iter_mut().zip(&b).for_each(|(r, b)| *r = b - *r);
    let true_res = det_dot(&r, &r).sqrt() / scale;
    Ok(CgOutcome {
        iterations: it,
        relative_residual: true_res,
        converged: res <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, rows: usize) -> LeastSquares {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ls = LeastSquares::new(n);
        for i in 0..n {
            ls.push(&[(i as u32, 1.0)], rng.random_range(-1.0..1.0));
        }
        for _ in 0..rows {
            let a = rng.random_range(0..n) as u32;
            let b = rng.random_range(0..n) as u32;
            ls.push(&[(a, rng.random_range(-2.0..2.0)), (b, rng.random_range(-2.0..2.0))], rng.random_range(-1.0..1.0));
        }
        ls
    }

    #[test]
    fn cg_matches_dense_solution() {
        let ls = random_problem(1, 30, 80);
        let mut x = vec![0.0; 30];
        let out = solve_normal_equations(&ls, &mut x, 1e-12, 500).unwrap();
        assert!(out.converged);
        // Dense normal equations via nalgebra.
        let mut a = nalgebra::DMatrix::<f64>::zeros(ls.n_rows(), 30);
        for r in 0..ls.n_rows() {
            let (c, v) = ls.jacobian.row(r);
            for (&c, &v) in c.iter().zip(v) {
                a[(r, c as usize)] += v;
            }
        }
        let b = nalgebra::DVector::from_vec(ls.rhs.clone());
        let ata = a.transpose() * &a;
        let atb = a.transpose() * b;
        let exact = ata.lu().solve(&atb).unwrap();
        for i in 0..30 {
            assert!((x[i] - exact[i]).abs() < 1e-9);
        }
        assert!(ls.gradient(&x).iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn objective_never_increases_from_warm_start() {
        let ls = random_problem(4, 50, 200);
        let mut x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let before = ls.objective(&x);
        solve_normal_equations(&ls, &mut x, 1e-8, 3).unwrap();
        assert!(ls.objective(&x) <= before);
    }

    #[test]
    fn transpose_round_trip() {
        let ls = random_problem(2, 10, 20);
        assert_eq!(ls.jacobian.transpose().transpose().row_ptr, ls.jacobian.row_ptr);
    }

    #[test]
    fn det_sum_is_order_fixed() {
        let v: Vec<f64> = (0..100_000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let a = det_sum(&v);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| det_sum(&v));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
