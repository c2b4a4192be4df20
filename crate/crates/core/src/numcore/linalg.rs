//! Small fixed-size linear algebra: 3×3 SVD and symmetric eigendecomposition.
//!
//! Both routines are Jacobi iterations. The SVD is the one-sided (Hestenes)
//! variant: plane rotations applied to the columns of `M` until they are
//! mutually orthogonal, which diagonalises `MᵀM` without forming it.

use crate::scalar::Real;

pub type Mat3<T> = [[T; 3]; 3];

pub fn identity3<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mul3<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn transpose3<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut t = *a;
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det3<T: Real>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn frobenius_diff<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    let mut s = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            let d = a[i][j] - b[i][j];
            s += d * d;
        }
    }
    s.sqrt()
}

pub fn mat3_from_slice<T: Real>(v: &[T]) -> Mat3<T> {
    assert_eq!(v.len(), 9);
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

pub fn mat3_to_vec<T: Real>(m: &Mat3<T>) -> Vec<T> {
    m.iter().flat_map(|r| r.iter().copied()).collect()
}

fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized<T: Real>(a: [T; 3]) -> Option<[T; 3]> {
    let n = dot(a, a).sqrt();
    if n > T::zero() && n.is_finite() {
        Some([a[0] / n, a[1] / n, a[2] / n])
    } else {
        None
    }
}

fn column<T: Real>(m: &Mat3<T>, j: usize) -> [T; 3] {
    [m[0][j], m[1][j], m[2][j]]
}

fn set_column<T: Real>(m: &mut Mat3<T>, j: usize, v: [T; 3]) {
    for i in 0..3 {
        m[i][j] = v[i];
    }
}

/// Unit vector orthogonal to `u` (which must be unit length).
fn any_orthogonal<T: Real>(u: [T; 3]) -> [T; 3] {
    // cross with the axis least aligned with u
    let ax = [u[0].abs(), u[1].abs(), u[2].abs()];
    let k = if ax[0] <= ax[1] && ax[0] <= ax[2] {
        0
    } else if ax[1] <= ax[2] {
        1
    } else {
        2
    };
    let mut e = [T::zero(); 3];
    e[k] = T::one();
    normalized(cross(u, e)).expect("non-degenerate cross product")
}

/// Singular value decomposition `M = U·diag(s)·Vᵀ` with `s` descending and
/// non-negative, `U` and `V` orthogonal (their determinants may be −1).
#[derive(Clone, Copy, Debug)]
pub struct Svd3<T> {
    pub u: Mat3<T>,
    pub s: [T; 3],
    pub v: Mat3<T>,
}

pub fn svd3<T: Real>(m: &Mat3<T>) -> Svd3<T> {
    let mut a = *m;
    let mut v = identity3::<T>();
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (T::zero(), T::zero(), T::zero());
            for row in &a {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (T::c(2.0) * gamma);
            let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
            let c = T::one() / (T::one() + t * t).sqrt();
            let s = c * t;
            for row in a.iter_mut().chain(v.iter_mut()) {
                let (xp, xq) = (row[p], row[q]);
                row[p] = c * xp - s * xq;
                row[q] = s * xp + c * xq;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv = [T::zero(); 3];
    for (j, s) in sv.iter_mut().enumerate() {
        let col = column(&a, j);
        *s = dot(col, col).sqrt();
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = [[T::zero(); 3]; 3];
    let mut vs = [[T::zero(); 3]; 3];
    let mut s_sorted = [T::zero(); 3];
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = sv[src];
        set_column(&mut vs, dst, column(&v, src));
    }

    // Columns of U: normalised columns of MV, completed when a singular value vanishes.
    let tiny = s_sorted[0] * T::c(64.0) * eps;
    let mut cols: Vec<[T; 3]> = Vec::with_capacity(3);
    for dst in 0..3 {
        let src = order[dst];
        let mut c = column(&a, src);
        let mut candidate = None;
        if s_sorted[dst] > tiny && s_sorted[dst] > T::zero() {
            for prev in &cols {
                let d = dot(*prev, c);
                c = [c[0] - d * prev[0], c[1] - d * prev[1], c[2] - d * prev[2]];
            }
            candidate = normalized(c);
        }
        let col = match (candidate, cols.len()) {
            (Some(c), _) => c,
            (None, 0) => [T::one(), T::zero(), T::zero()],
            (None, 1) => any_orthogonal(cols[0]),
            (None, _) => cross(cols[0], cols[1]),
        };
        cols.push(col);
    }
    for (j, c) in cols.iter().enumerate() {
        set_column(&mut u, j, *c);
    }
    Svd3 {
        u,
        s: s_sorted,
        v: vs,
    }
}

/// Eigendecomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as the columns of the second element.
pub fn sym_eig3<T: Real>(m: &Mat3<T>) -> ([T; 3], Mat3<T>) {
    let mut a = *m;
    let mut v = identity3::<T>();
    for _sweep in 0..60 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == T::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (T::c(2.0) * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
            let c = T::one() / (t * t + T::one()).sqrt();
            let s = t * c;
            // A ← JᵀAJ with J the (p,q) plane rotation
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let ev = [a[0][0], a[1][1], a[2][2]];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| ev[j].partial_cmp(&ev[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut vals = [T::zero(); 3];
    let mut vecs = [[T::zero(); 3]; 3];
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = ev[src];
        set_column(&mut vecs, dst, column(&v, src));
    }
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng) -> Mat3<f64> {
        let mut m = [[0.0; 3]; 3];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        m
    }

    fn reconstruct(d: &Svd3<f64>) -> Mat3<f64> {
        let mut us = d.u;
        for row in us.iter_mut() {
            for j in 0..3 {
                row[j] *= d.s[j];
            }
        }
        mul3(&us, &transpose3(&d.v))
    }

    fn orth_err(q: &Mat3<f64>) -> f64 {
        frobenius_diff(&mul3(&transpose3(q), q), &identity3())
    }

    #[test]
    fn identity_and_diagonal() {
        let d = svd3(&identity3::<f64>());
        assert_eq!(d.s, [1.0, 1.0, 1.0]);
        let d = svd3(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(d.s, [3.0, 2.0, 1.0]);
        let d = svd3(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(d.s, [3.0, 2.0, 1.0]);
        assert!(reconstruct(&d)[1][1] == 3.0);
    }

    #[test]
    fn random_matrices_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let m = random_matrix(&mut rng);
            let d = svd3(&m);
            assert!(orth_err(&d.u) < 1e-10);
            assert!(orth_err(&d.v) < 1e-10);
            assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2] && d.s[2] >= 0.0);
            assert!(frobenius_diff(&reconstruct(&d), &m) < 1e-9);
        }
    }

    #[test]
    fn rank_deficient_inputs() {
        let cases = [
            [[0.0; 3]; 3],
            [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        ];
        for m in cases {
            let d = svd3(&m);
            assert!(orth_err(&d.u) < 1e-10, "{m:?}");
            assert!(orth_err(&d.v) < 1e-10, "{m:?}");
            assert!(frobenius_diff(&reconstruct(&d), &m) < 1e-9, "{m:?}");
        }
    }

    #[test]
    fn symmetric_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let b = random_matrix(&mut rng);
            let s = mul3(&transpose3(&b), &b);
            let (vals, vecs) = sym_eig3(&s);
            assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
            assert!(orth_err(&vecs) < 1e-10);
            // S·v = λ·v
            for j in 0..3 {
                for i in 0..3 {
                    let sv: f64 = (0..3).map(|k| s[i][k] * vecs[k][j]).sum();
                    assert!((sv - vals[j] * vecs[i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let m: Mat3<f32> = [[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];
        let d = svd3(&m);
        let mut us = d.u;
        for row in us.iter_mut() {
            for j in 0..3 {
                row[j] *= d.s[j];
            }
        }
        assert!(frobenius_diff(&mul3(&us, &transpose3(&d.v)), &m) < 1e-5);
    }
}
