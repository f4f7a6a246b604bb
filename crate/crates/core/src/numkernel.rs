//! Dense linear-algebra kernels: matrix exponential, Cholesky factorization,
//! symmetric eigenvalues (cyclic Jacobi) and SPD solves.
//!
//! Storage and elementary arithmetic come from `nalgebra`; the factorizations
//! used for shape matrices are implemented here so that failure modes map onto
//! [`Error`] variants.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative asymmetry above which a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

const PADE13_THETA: f64 = 5.371920351148152;
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn ensure_square(a: &Matrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(())
}

fn ensure_finite(a: &Matrix) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

/// Largest absolute column sum.
pub fn norm_one(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Relative asymmetry `max |a_ij - a_ji| / max |a_ij|`.
pub fn asymmetry(a: &Matrix) -> f64 {
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn ensure_symmetric(a: &Matrix) -> Result<()> {
    ensure_square(a)?;
    ensure_finite(a)?;
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Averages `a` with its transpose.
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// `e^{A t}` by scaling and squaring with the degree-13 diagonal Padé approximant.
pub fn mat_exp(a: &Matrix, t: f64) -> Result<Matrix> {
    ensure_square(a)?;
    ensure_finite(a)?;
    if !t.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let n = a.nrows();
    let at = a * t;
    let norm = norm_one(&at);
    if norm == 0.0 {
        return Ok(Matrix::identity(n, n));
    }
    let squarings = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = at / 2f64.powi(squarings);

    let ident = Matrix::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or(Error::NotConverged {
            what: "Padé denominator solve",
            iterations: 0,
        })?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = S`, reading the lower triangle of `s`.
pub fn chol_lower(s: &Matrix) -> Result<Matrix> {
    ensure_square(s)?;
    ensure_finite(s)?;
    let n = s.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_subst(l: &Matrix, b: &Vector) -> Vector {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut v = y[i];
        for k in 0..i {
            v -= l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub fn backward_subst_transposed(l: &Matrix, y: &Vector) -> Vector {
    let n = l.nrows();
    let mut x = y.clone();
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Solves `S x = b` for symmetric positive-definite `S`.
pub fn solve_spd(s: &Matrix, b: &Vector) -> Result<Vector> {
    if b.len() != s.nrows() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            actual: b.len(),
        });
    }
    let l = chol_lower(s)?;
    Ok(backward_subst_transposed(&l, &forward_subst(&l, b)))
}

/// Solves `S X = B` column by column.
pub fn solve_spd_matrix(s: &Matrix, b: &Matrix) -> Result<Matrix> {
    let l = chol_lower(s)?;
    let mut out = Matrix::zeros(b.nrows(), b.ncols());
    for (j, col) in b.column_iter().enumerate() {
        let x = backward_subst_transposed(&l, &forward_subst(&l, &col.into_owned()));
        out.set_column(j, &x);
    }
    Ok(out)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vector,
    /// Orthonormal eigenvectors, one per column, aligned with `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigen-solver for symmetric matrices.
pub fn sym_eigen(s: &Matrix) -> Result<SymEigen> {
    ensure_symmetric(s)?;
    let n = s.nrows();
    let mut a = symmetrize(s);
    let mut v = Matrix::identity(n, n);
    let total = a.norm();
    if total == 0.0 {
        return Ok(SymEigen {
            values: Vector::zeros(n),
            vectors: v,
        });
    }
    const MAX_SWEEPS: usize = 100;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() < 1e-12 * total {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "Jacobi eigen-solver",
            iterations: MAX_SWEEPS,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// Largest eigenvalue of a symmetric matrix and a unit eigenvector for it.
pub fn sym_eig_max(s: &Matrix) -> Result<(f64, Vector)> {
    let eig = sym_eigen(s)?;
    let n = eig.values.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty matrix".into()));
    }
    Ok((eig.values[n - 1], eig.vectors.column(n - 1).into_owned()))
}

/// `L⁻¹ Q L⁻ᵀ` for the Cholesky factor `L` of `S`.
pub fn whiten(q: &Matrix, l: &Matrix) -> Matrix {
    let n = q.nrows();
    let mut tmp = Matrix::zeros(n, n);
    for (j, col) in q.column_iter().enumerate() {
        tmp.set_column(j, &forward_subst(l, &col.into_owned()));
    }
    let tmp_t = tmp.transpose();
    let mut out = Matrix::zeros(n, n);
    for (j, col) in tmp_t.column_iter().enumerate() {
        out.set_column(j, &forward_subst(l, &col.into_owned()));
    }
    symmetrize(&out)
}

/// Largest generalized eigenvalue `λ_max(S⁻¹Q)` for symmetric `Q` and SPD `S`.
pub fn gen_eig_max(q: &Matrix, s: &Matrix) -> Result<f64> {
    ensure_symmetric(q)?;
    if q.nrows() != s.nrows() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            actual: q.nrows(),
        });
    }
    let l = chol_lower(s)?;
    let (value, _) = sym_eig_max(&whiten(q, &l))?;
    Ok(value)
}

/// Log-determinant of an SPD matrix via Cholesky.
pub fn log_det_spd(s: &Matrix) -> Result<f64> {
    let l = chol_lower(s)?;
    Ok((0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Reverse Cuthill–McKee ordering of the symmetrized sparsity pattern of `a`.
pub fn rcm_ordering(a: &Matrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj = vec![Vec::new(); n];
    for j in 0..n {
        for i in (j + 1)..n {
            if a[(i, j)] != 0.0 || a[(j, i)] != 0.0 {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (adj[v].len(), v));
    for &root in &by_degree {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut head = order.len();
        order.push(root);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !seen[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                seen[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Solves `A x = b` for a sparse square `A` held densely: RCM reordering
/// followed by banded LU with partial pivoting.
pub fn solve_sparse(a: &Matrix, b: &Vector) -> Result<Vector> {
    ensure_square(a)?;
    let n = a.nrows();
    if b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: b.len() });
    }
    let perm = rcm_ordering(a);
    let mut m = Matrix::from_fn(n, n, |i, j| a[(perm[i], perm[j])]);
    let mut y = Vector::from_fn(n, |i, _| b[perm[i]]);
    let (mut kl, mut ku) = (0, 0);
    for j in 0..n {
        for i in 0..n {
            if m[(i, j)] != 0.0 {
                if i > j {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
    }
    let scale = m.amax();
    let width = kl + ku;
    for k in 0..n {
        let last = (k + kl).min(n - 1);
        let mut p = k;
        for i in k..=last {
            if m[(i, k)].abs() > m[(p, k)].abs() {
                p = i;
            }
        }
        let pivot = m[(p, k)];
        if !(pivot.abs() > f64::EPSILON * scale) || !pivot.is_finite() {
            return Err(Error::Singular { pivot: k });
        }
        let hi = (k + width).min(n - 1);
        if p != k {
            for j in k..=hi {
                m.swap((k, j), (p, j));
            }
            y.swap_rows(k, p);
        }
        for i in (k + 1)..=last {
            let l = m[(i, k)] / pivot;
            if l != 0.0 {
                for j in (k + 1)..=hi {
                    m[(i, j)] -= l * m[(k, j)];
                }
                y[i] -= l * y[k];
            }
        }
    }
    for k in (0..n).rev() {
        let hi = (k + width).min(n - 1);
        let mut v = y[k];
        for j in (k + 1)..=hi {
            v -= m[(k, j)] * y[j];
        }
        y[k] = v / m[(k, k)];
    }
    let mut x = Vector::zeros(n);
    for (i, &p) in perm.iter().enumerate() {
        x[p] = y[i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exp_of_zero_time_is_identity() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 4.0]);
        assert_eq!(mat_exp(&a, 0.0).unwrap(), Matrix::identity(2, 2));
    }

    #[test]
    fn exp_of_nilpotent() {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = mat_exp(&a, 1.0).unwrap();
        assert_relative_eq!(e, Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn exp_scalar_decay() {
        let a = Matrix::from_element(1, 1, -1.0);
        let e = mat_exp(&a, 1.0).unwrap();
        assert!((e[(0, 0)] - 0.36787944117144233).abs() < 1e-10);
    }

    #[test]
    fn exp_large_norm_relative_accuracy() {
        // rotation generator scaled up: e^{At} is an exact rotation
        let w = 90.0;
        let a = Matrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        let e = mat_exp(&a, 1.0).unwrap();
        let expect = Matrix::from_row_slice(2, 2, &[w.cos(), w.sin(), -w.sin(), w.cos()]);
        assert!((e - expect).norm() < 1e-10);
    }

    #[test]
    fn exp_rejects_bad_input() {
        assert!(matches!(
            mat_exp(&Matrix::zeros(2, 3), 1.0),
            Err(Error::NonSquare { .. })
        ));
        let mut a = Matrix::zeros(2, 2);
        a[(0, 1)] = f64::NAN;
        assert_eq!(mat_exp(&a, 1.0), Err(Error::NonFiniteInput));
    }

    #[test]
    fn chol_diagonal() {
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let l = chol_lower(&s).unwrap();
        assert_eq!(l, Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0])));
        assert_eq!(chol_lower(&Matrix::identity(3, 3)).unwrap(), Matrix::identity(3, 3));
    }

    #[test]
    fn chol_rejects_indefinite() {
        let s = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(chol_lower(&s), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn eig_max_diag() {
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 5.0, 2.0]));
        let (l, v) = sym_eig_max(&s).unwrap();
        assert_relative_eq!(l, 5.0, epsilon = 1e-14);
        assert_relative_eq!(v[1].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let s = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0]);
        assert!(matches!(sym_eig_max(&s), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn gen_eig_trivial() {
        let i = Matrix::identity(3, 3);
        assert_relative_eq!(gen_eig_max(&i, &i).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(gen_eig_max(&i, &(&i * 2.0)).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn solve_spd_trivial() {
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 4.0]));
        let x = solve_spd(&s, &Vector::from_vec(vec![2.0, 4.0])).unwrap();
        assert_relative_eq!(x, Vector::from_vec(vec![1.0, 1.0]), epsilon = 1e-15);
        let b = Vector::from_vec(vec![3.0, -1.0, 2.0]);
        assert_eq!(solve_spd(&Matrix::identity(3, 3), &b).unwrap(), b);
    }

    #[test]
    fn sparse_solve_matches_dense() {
        // block-tridiagonal KKT-like system with a zero diagonal block
        let n = 40;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            if i % 3 != 2 {
                a[(i, i)] = 2.0 + (i as f64 * 0.37).sin();
            }
            if i + 1 < n {
                a[(i, i + 1)] = 1.0 + 0.1 * i as f64;
                a[(i + 1, i)] = 1.0 + 0.1 * i as f64;
            }
            if i + 3 < n {
                a[(i, i + 3)] = -0.5;
                a[(i + 3, i)] = 0.25;
            }
        }
        let b = Vector::from_fn(n, |i, _| (i as f64).cos());
        let x = solve_sparse(&a, &b).unwrap();
        assert!((&a * &x - &b).amax() < 1e-10);
        let dense = a.clone().lu().solve(&b).unwrap();
        assert!((x - dense).amax() < 1e-9);
    }

    #[test]
    fn sparse_solve_detects_singularity() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(solve_sparse(&a, &Vector::from_element(2, 1.0)), Err(Error::Singular { .. })));
    }
}
