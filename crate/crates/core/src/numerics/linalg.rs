//! Cholesky factorization and the triangular solves built on it.

use crate::error::{Error, Result};

use super::Tensor;

/// Jitter added to every kernel Gram matrix before factorization.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Jitter used for the single retry after [`DEFAULT_JITTER`] fails.
pub const RETRY_JITTER: f64 = 1e-4;

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    let (r, c) = a.dims();
    if r != c {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![c, r],
        });
    }
    Ok(r)
}

/// Panel width of the blocked factorization and solves.
const BLOCK: usize = 64;

/// `c += alpha·a·b` on strided views, `a` is `m×k` and `b` is `k×n`.
///
/// # Safety
/// Every pointer/stride pair must describe memory valid for the given
/// shape, and `c` must not overlap `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (*const f64, isize, isize),
    b: (*const f64, isize, isize),
    c: (*mut f64, isize, isize),
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe { matrixmultiply::dgemm(m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, 1.0, c.0, c.1, c.2) }
}

/// Lower-triangular `L` with `L·Lᵀ = a + jitter·I`. Only the lower triangle
/// of `a` is read.
pub fn cholesky(a: &Tensor, jitter: f64) -> Result<Tensor> {
    let n = square_dim(a, "cholesky")?;
    if !(jitter >= 0.0) {
        return Err(Error::invalid(format!("cholesky jitter must be >= 0, got {jitter}")));
    }
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        l[i * n..i * n + i + 1].copy_from_slice(&src[i * n..i * n + i + 1]);
        l[i * n + i] += jitter;
    }
    let ni = n as isize;
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        // Left-looking update of the panel: L[j0.., j0..j1] -= L[j0.., ..j0]·L[j0..j1, ..j0]ᵀ.
        // The read columns (< j0) and written columns (>= j0) are disjoint.
        let p = l.as_mut_ptr();
        // SAFETY: all views lie inside `l` (n×n, row-major); the output
        // columns j0..j1 never overlap the input columns 0..j0.
        unsafe {
            gemm_acc(
                n - j0,
                j0,
                j1 - j0,
                -1.0,
                (p.add(j0 * n), ni, 1),
                (p.add(j0 * n), 1, ni),
                (p.add(j0 * n + j0), ni, 1),
            );
        }
        for j in j0..j1 {
            let mut d = l[j * n + j];
            for k in j0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = l[i * n + j];
                for k in j0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
            // the panel update also touched the strict upper part of the
            // diagonal block
            for c in j + 1..j1 {
                l[j * n + c] = 0.0;
            }
        }
    }
    Tensor::matrix(n, n, l).check_finite("cholesky")
}

/// Factorizes with [`DEFAULT_JITTER`], retrying once with [`RETRY_JITTER`].
/// Returns the factor and the jitter that succeeded.
pub fn cholesky_with_retry(a: &Tensor) -> Result<(Tensor, f64)> {
    match cholesky(a, DEFAULT_JITTER) {
        Ok(l) => Ok((l, DEFAULT_JITTER)),
        Err(Error::NotPositiveDefinite { .. }) => {
            log::debug!("cholesky failed with jitter {DEFAULT_JITTER}, retrying with {RETRY_JITTER}");
            cholesky(a, RETRY_JITTER).map(|l| (l, RETRY_JITTER))
        }
        Err(e) => Err(e),
    }
}

fn check_factor(l: &Tensor) -> Result<usize> {
    let n = square_dim(l, "triangular solve")?;
    for i in 0..n {
        if !(l.get(i, i) > 0.0) {
            return Err(Error::SingularFactor { index: i });
        }
    }
    Ok(n)
}

fn check_rhs(l: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if b.rows() != l.rows() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: l.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Solves `L·x = b` by blocked forward substitution.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_factor(l)?;
    check_rhs(l, b, "solve_lower")?;
    let m = b.cols();
    let ld = l.data();
    let mut x = b.clone().into_data();
    let (ni, mi) = (n as isize, m as isize);
    for i0 in (0..n).step_by(BLOCK) {
        let i1 = (i0 + BLOCK).min(n);
        let (done, rest) = x.split_at_mut(i0 * m);
        // SAFETY: `done` holds rows 0..i0 and `rest` starts at row i0; the
        // L view is rows i0..i1, columns 0..i0.
        unsafe {
            gemm_acc(
                i1 - i0,
                i0,
                m,
                -1.0,
                (ld.as_ptr().add(i0 * n), ni, 1),
                (done.as_ptr(), mi, 1),
                (rest.as_mut_ptr(), mi, 1),
            );
        }
        for i in i0..i1 {
            for k in i0..i {
                let lik = ld[i * n + k];
                if lik != 0.0 {
                    let (head, tail) = x.split_at_mut(i * m);
                    for (xi, xk) in tail[..m].iter_mut().zip(&head[k * m..(k + 1) * m]) {
                        *xi -= lik * xk;
                    }
                }
            }
            let d = ld[i * n + i];
            for v in &mut x[i * m..(i + 1) * m] {
                *v /= d;
            }
        }
    }
    Tensor::matrix(n, m, x).check_finite("solve_lower")
}

/// Solves `Lᵀ·x = b` by blocked back substitution.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_factor(l)?;
    check_rhs(l, b, "solve_lower_transpose")?;
    let m = b.cols();
    let ld = l.data();
    let mut x = b.clone().into_data();
    let (ni, mi) = (n as isize, m as isize);
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    for &i0 in starts.iter().rev() {
        let i1 = (i0 + BLOCK).min(n);
        let (head, done) = x.split_at_mut(i1 * m);
        // SAFETY: `done` holds rows i1..n; the transposed L view reads
        // L[i1.., i0..i1]; the output is rows i0..i1 of `head`.
        unsafe {
            gemm_acc(
                i1 - i0,
                n - i1,
                m,
                -1.0,
                (ld.as_ptr().add(i1 * n + i0), 1, ni),
                (done.as_ptr(), mi, 1),
                (head.as_mut_ptr().add(i0 * m), mi, 1),
            );
        }
        for i in (i0..i1).rev() {
            for k in i + 1..i1 {
                // (Lᵀ)[i,k] = L[k,i]
                let lki = ld[k * n + i];
                if lki != 0.0 {
                    let (head, tail) = x.split_at_mut(k * m);
                    for (xi, xk) in head[i * m..(i + 1) * m].iter_mut().zip(&tail[..m]) {
                        *xi -= lki * xk;
                    }
                }
            }
            let d = ld[i * n + i];
            for v in &mut x[i * m..(i + 1) * m] {
                *v /= d;
            }
        }
    }
    Tensor::matrix(n, m, x).check_finite("solve_lower_transpose")
}

/// `(L·Lᵀ)⁻¹·b` via two triangular solves.
pub fn chol_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = solve_lower(l, b)?;
    solve_lower_transpose(l, &y)
}

/// `log|L·Lᵀ| = 2·Σ log Lᵢᵢ`.
pub fn chol_logdet(l: &Tensor) -> Result<f64> {
    let n = check_factor(l)?;
    Ok(2.0 * (0..n).map(|i| l.get(i, i).ln()).sum::<f64>())
}

/// Inverse of an SPD matrix from its factor.
pub fn chol_inverse(l: &Tensor) -> Result<Tensor> {
    chol_solve(l, &Tensor::identity(l.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> Tensor {
        let mut rng = rand_pcg::Pcg64::seed_from_u64(seed);
        let b = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut k = b.matmul_nt(&b).unwrap();
        for i in 0..n {
            let v = k.get(i, i) + n as f64 * 0.1;
            k.set(i, i, v);
        }
        k
    }

    // Laplace expansion along the first row.
    fn cofactor_det(a: &[Vec<f64>]) -> f64 {
        let n = a.len();
        if n == 1 {
            return a[0][0];
        }
        let mut det = 0.0;
        for j in 0..n {
            let minor: Vec<Vec<f64>> = a[1..]
                .iter()
                .map(|row| row.iter().enumerate().filter(|(c, _)| *c != j).map(|(_, v)| *v).collect())
                .collect();
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * a[0][j] * cofactor_det(&minor);
        }
        det
    }

    #[test]
    fn cholesky_simple_cases() {
        assert_eq!(cholesky(&Tensor::identity(3), 0.0).unwrap(), Tensor::identity(3));
        assert_eq!(cholesky(&Tensor::diag(&[4.0, 9.0]), 0.0).unwrap(), Tensor::diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_rank_deficient_with_jitter() {
        let v = Tensor::matrix(3, 1, vec![1.0, 2.0, -0.5]);
        let m = v.matmul_nt(&v).unwrap();
        assert!(cholesky(&m, 0.0).is_err());
        let l = cholesky(&m, 1e-6).unwrap();
        let r = l.matmul_nt(&l).unwrap();
        let mut max_err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let expect = m.get(i, j) + if i == j { 1e-6 } else { 0.0 };
                max_err = max_err.max((r.get(i, j) - expect).abs());
            }
        }
        assert!(max_err < 1e-12, "{max_err}");
    }

    #[test]
    fn cholesky_reports_pivot() {
        let m = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        match cholesky(&m, 0.0) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retry_jitter_rescues_slightly_indefinite() {
        let m = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0 - 5e-6]]);
        let (_, jitter) = cholesky_with_retry(&m).unwrap();
        assert_eq!(jitter, RETRY_JITTER);
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(chol_logdet(&Tensor::identity(4)).unwrap(), 0.0);
        let v = chol_logdet(&Tensor::diag(&[2.0, 2.0])).unwrap();
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 2.77259).abs() < 1e-5);
        assert!(matches!(
            chol_logdet(&Tensor::diag(&[1.0, 0.0])),
            Err(Error::SingularFactor { index: 1 })
        ));
    }

    #[test]
    fn logdet_matches_cofactor_determinant() {
        for seed in 0..5 {
            let k = random_spd(4, seed);
            let l = cholesky(&k, 0.0).unwrap();
            let rows: Vec<Vec<f64>> = (0..4).map(|i| k.row(i).to_vec()).collect();
            let oracle = cofactor_det(&rows).ln();
            assert!((chol_logdet(&l).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_cases() {
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(chol_solve(&Tensor::identity(3), &b).unwrap(), b);
        let l = cholesky(&Tensor::scalar(4.0), 0.0).unwrap();
        assert_eq!(chol_solve(&l, &Tensor::scalar(8.0)).unwrap(), Tensor::scalar(2.0));
    }

    #[test]
    fn solve_residual_on_random_spd() {
        let k = random_spd(8, 42);
        let l = cholesky(&k, 0.0).unwrap();
        let b = Tensor::matrix(8, 3, (0..24).map(|v| (v as f64).sin()).collect());
        let x = chol_solve(&l, &b).unwrap();
        let r = k.matmul(&x).unwrap();
        let res = r.zip_map(&b, |a, b| a - b).max_abs();
        assert!(res < 1e-10, "{res}");
    }

    #[test]
    fn blocked_paths_match_definitions() {
        // sizes that straddle several panels, including a ragged last one
        for (n, seed) in [(64, 1), (150, 2)] {
            let k = random_spd(n, seed);
            let l = cholesky(&k, 1e-6).unwrap();
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(l.get(i, j), 0.0);
                }
            }
            let mut back = l.matmul_nt(&l).unwrap();
            for i in 0..n {
                let v = back.get(i, i) - 1e-6;
                back.set(i, i, v);
            }
            let scale = k.max_abs();
            assert!(back.zip_map(&k, |a, b| a - b).max_abs() < 1e-10 * scale);

            let b = Tensor::matrix(n, 5, (0..n * 5).map(|v| (v as f64 * 0.37).cos()).collect());
            let y = solve_lower(&l, &b).unwrap();
            assert!(l.matmul(&y).unwrap().zip_map(&b, |a, b| a - b).max_abs() < 1e-9);
            let z = solve_lower_transpose(&l, &b).unwrap();
            let lt = l.transpose();
            assert!(lt.matmul(&z).unwrap().zip_map(&b, |a, b| a - b).max_abs() < 1e-9);
        }
    }

    #[test]
    fn blocked_factorization_reports_global_pivot() {
        let mut k = random_spd(100, 7);
        k.set(90, 90, -1.0);
        assert!(matches!(cholesky(&k, 0.0), Err(Error::NotPositiveDefinite { pivot: 90 })));
    }

    #[test]
    fn zero_diagonal_factor_is_rejected() {
        let l = Tensor::diag(&[1.0, 0.0]);
        assert!(matches!(chol_solve(&l, &Tensor::zeros(2, 1)), Err(Error::SingularFactor { index: 1 })));
    }
}
