//! Self-contained factorizations: one-sided Jacobi SVD, Householder QR,
//! pseudoinverse least squares and a Gaussian-sketch range finder.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::seed;

/// Default relative cutoff for discarding small singular values.
pub const DEFAULT_RCOND: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u · diag(s) · vᵀ`.
///
/// With `r = min(rows, cols)`: `u` is `rows × r`, `s` has length `r` in
/// descending order, `v` is `cols × r`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// Requires rows ≥ cols.
fn jacobi_tall(a: &DenseMatrix) -> Svd {
    let (m, n) = a.shape();
    // column-major working copies
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (up, uq) = (&u[p], &u[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for k in 0..m {
                        al += up[k] * up[k];
                        be += uq[k] * uq[k];
                        ga += up[k] * uq[k];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sig: Vec<(f64, usize)> = u
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    sig.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u_out = DenseMatrix::zeros(m, n);
    let mut v_out = DenseMatrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    for (dst, &(sv, src)) in sig.iter().enumerate() {
        s_out.push(sv);
        for (i, &x) in u[src].iter().enumerate() {
            u_out.set(i, dst, if sv > 0.0 { x / sv } else { 0.0 });
        }
        for (i, &x) in v[src].iter().enumerate() {
            v_out.set(i, dst, x);
        }
    }
    Svd {
        u: u_out,
        s: s_out,
        v: v_out,
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Minimum-norm least-squares solution of `a · x ≈ b` through the
/// pseudoinverse. Singular values below `rcond · σ_max` count as zero.
pub fn pinv_solve(a: &DenseMatrix, b: &DenseMatrix, rcond: f64) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::dims("pinv_solve", format!("{} rows in rhs", a.rows()), b.rows()));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("pinv_solve rhs"));
    }
    let Svd { u, s, v } = svd(a)?;
    let cutoff = rcond * s.first().copied().unwrap_or(0.0);
    // x = v · diag(1/s) · uᵀ b
    let mut utb = u.t_dot(b);
    for (k, &sk) in s.iter().enumerate() {
        let inv = if sk > cutoff && sk > 0.0 { 1.0 / sk } else { 0.0 };
        for x in utb.row_mut(k) {
            *x *= inv;
        }
    }
    Ok(v.dot(&utb))
}

/// Explicit pseudoinverse `a†`.
pub fn pinv(a: &DenseMatrix, rcond: f64) -> Result<DenseMatrix> {
    pinv_solve(a, &DenseMatrix::identity(a.rows()), rcond)
}

/// Thin `Q` factor (`rows × cols`, orthonormal columns) of a Householder QR.
///
/// Rank-deficient inputs still yield a full set of orthonormal columns.
pub fn orthonormalize(y: &DenseMatrix) -> DenseMatrix {
    let (m, k) = y.shape();
    assert!(k <= m, "orthonormalize needs rows >= cols");
    let mut r = y.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut x: Vec<f64> = (j..m).map(|i| r.get(i, j)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // any unit reflector works for a zero column
            let mut e = vec![0.0; m - j];
            e[0] = 1.0;
            reflectors.push(e);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        // |x0 - alpha| >= norm > 0, so the reflector is well defined
        let vnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut x {
            *v /= vnorm;
        }
        for c in j..k {
            let dot: f64 = (j..m).map(|i| x[i - j] * r.get(i, c)).sum();
            for i in j..m {
                let val = r.get(i, c) - 2.0 * x[i - j] * dot;
                r.set(i, c, val);
            }
        }
        reflectors.push(x);
    }
    // Q = H_0 H_1 … H_{k-1} applied to the first k unit vectors
    let mut q = DenseMatrix::zeros(m, k);
    for c in 0..k {
        q.set(c, c, 1.0);
    }
    for j in (0..k).rev() {
        let x = &reflectors[j];
        if x.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..k {
            let dot: f64 = (j..m).map(|i| x[i - j] * q.get(i, c)).sum();
            if dot == 0.0 {
                continue;
            }
            for i in j..m {
                let val = q.get(i, c) - 2.0 * x[i - j] * dot;
                q.set(i, c, val);
            }
        }
    }
    q
}

/// Options for [`range_finder_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RangeFinderOptions {
    pub power_iterations: usize,
}

/// Orthonormal basis `Q` (`rows × k`) approximating the range of `h`, from
/// a seeded Gaussian sketch. `k` is clamped to `min(rows, cols)`.
pub fn range_finder(h: &DenseMatrix, k: usize, seed: u64) -> Result<DenseMatrix> {
    range_finder_with(h, k, seed, RangeFinderOptions::default())
}

pub fn range_finder_with(
    h: &DenseMatrix,
    k: usize,
    seed: u64,
    opts: RangeFinderOptions,
) -> Result<DenseMatrix> {
    if k == 0 {
        return Err(Error::InvalidArgument("range_finder: target rank must be positive".into()));
    }
    if h.rows() == 0 || h.cols() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("range_finder input"));
    }
    let k = k.min(h.rows()).min(h.cols());
    let omega = DenseMatrix::gaussian(h.cols(), k, &mut seed::rng(seed));
    let mut q = orthonormalize(&h.dot(&omega));
    for _ in 0..opts.power_iterations {
        let z = orthonormalize(&h.t_dot(&q));
        q = orthonormalize(&h.dot(&z));
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(s: &Svd) -> DenseMatrix {
        let mut us = s.u.clone();
        for i in 0..us.rows() {
            for (j, sv) in s.s.iter().enumerate() {
                let v = us.get(i, j) * sv;
                us.set(i, j, v);
            }
        }
        us.dot_t(&s.v)
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        for (r, c) in [(7, 4), (4, 7), (5, 5), (1, 3)] {
            let a = DenseMatrix::gaussian(r, c, &mut seed::rng(r as u64 * 31 + c as u64));
            let s = svd(&a).unwrap();
            assert!(reconstruct(&s).max_abs_diff(&a) < 1e-12, "{r}x{c}");
            assert!(s.s.windows(2).all(|w| w[0] >= w[1]));
            let vtv = s.v.t_dot(&s.v);
            assert!(vtv.max_abs_diff(&DenseMatrix::identity(vtv.rows())) < 1e-12);
        }
    }

    #[test]
    fn pinv_identity_and_mean() {
        let b = DenseMatrix::gaussian(3, 2, &mut seed::rng(1));
        let x = pinv_solve(&DenseMatrix::identity(3), &b, DEFAULT_RCOND).unwrap();
        assert!(x.max_abs_diff(&b) < 1e-14);

        let a = DenseMatrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let b = DenseMatrix::new(2, 1, vec![1.0, 3.0]).unwrap();
        let x = pinv_solve(&a, &b, DEFAULT_RCOND).unwrap();
        assert!((x.get(0, 0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn pinv_minimum_norm_on_rank_deficient() {
        // a = [1 1], b = [2]: minimizers x1 + x2 = 2, minimum norm is (1, 1)
        let a = DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let b = DenseMatrix::new(1, 1, vec![2.0]).unwrap();
        let x = pinv_solve(&a, &b, DEFAULT_RCOND).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-14 && (x.get(1, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pinv_errors() {
        assert!(pinv_solve(&DenseMatrix::zeros(0, 0), &DenseMatrix::zeros(0, 1), 1e-10).is_err());
        assert!(pinv_solve(&DenseMatrix::identity(2), &DenseMatrix::zeros(3, 1), 1e-10).is_err());
        let mut a = DenseMatrix::identity(2);
        a.set(0, 0, f64::NAN);
        assert!(pinv_solve(&a, &DenseMatrix::zeros(2, 1), 1e-10).is_err());
    }

    #[test]
    fn orthonormalize_rank_deficient() {
        let mut y = DenseMatrix::gaussian(6, 3, &mut seed::rng(9));
        for i in 0..6 {
            let v = y.get(i, 0);
            y.set(i, 2, 2.0 * v);
        }
        let q = orthonormalize(&y);
        assert!(q.t_dot(&q).max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn range_finder_exact_rank() {
        let mut rng = seed::rng(11);
        let left = DenseMatrix::gaussian(20, 2, &mut rng);
        let right = DenseMatrix::gaussian(2, 9, &mut rng);
        let h = left.dot(&right);
        let q = range_finder(&h, 2, 5).unwrap();
        let resid = h.sub(&q.dot(&q.t_dot(&h))).frobenius_norm();
        assert!(resid <= 1e-8, "{resid}");
    }

    #[test]
    fn range_finder_zero_and_clamp() {
        let h = DenseMatrix::zeros(6, 3);
        let q = range_finder(&h, 10, 1).unwrap();
        assert_eq!(q.shape(), (6, 3));
        assert_eq!(h.sub(&q.dot(&q.t_dot(&h))).frobenius_norm(), 0.0);
        assert!(range_finder(&h, 0, 1).is_err());
    }

    #[test]
    fn range_finder_full_column_space() {
        let h = DenseMatrix::gaussian(50, 8, &mut seed::rng(2));
        let q = range_finder(&h, 8, 3).unwrap();
        assert!(q.dot(&q.t_dot(&h)).max_abs_diff(&h) < 1e-8);
        let again = range_finder(&h, 8, 3).unwrap();
        assert_eq!(q, again);
    }
}
