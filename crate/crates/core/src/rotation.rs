//! SO(3) utilities: SVD⁺ projection, centre-of-gravity handling, Haar
//! sampling and principal-axis alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numcore::linalg::{det3, frobenius_diff, identity3, mul3, svd3, sym_eig3, transpose3, Mat3};
use crate::numcore::Tensor;
use crate::scalar::Real;

/// Proper rotation matrix (`RᵀR = I`, `det R = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix<T> {
    m: Mat3<T>,
}

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        Self { m: identity3() }
    }

    /// Wraps `m` if it is a rotation to within `tol`.
    pub fn try_new(m: Mat3<T>, tol: T) -> Option<Self> {
        let r = Self { m };
        r.is_rotation(tol).then_some(r)
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3<T>) -> Self {
        Self { m }
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn about_z(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[c, -s, z], [s, c, z], [z, z, o]],
        }
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.m
    }

    pub fn transpose(&self) -> Self {
        Self { m: transpose3(&self.m) }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            m: mul3(&self.m, &other.m),
        }
    }

    pub fn det(&self) -> T {
        det3(&self.m)
    }

    pub fn orthogonality_error(&self) -> T {
        frobenius_diff(&mul3(&transpose3(&self.m), &self.m), &identity3())
    }

    pub fn is_rotation(&self, tol: T) -> bool {
        self.orthogonality_error() <= tol && (self.det() - T::one()).abs() <= tol
    }

    pub fn apply_vec(&self, v: [T; 3]) -> [T; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.m.iter().flat_map(|r| r.iter().copied()).collect()
    }
}

/// Output of [`project_to_so3`].
#[derive(Clone, Copy, Debug)]
pub struct So3Projection<T> {
    pub rotation: RotationMatrix<T>,
    /// `|det M| < 1e-12`: the projection is not smooth (or not unique) here.
    pub degenerate: bool,
}

/// SVD⁺: `R = U·diag(1, 1, det(UVᵀ))·Vᵀ`, the proper rotation closest to `M`.
pub fn project_to_so3<T: Real>(m: &Mat3<T>) -> So3Projection<T> {
    let degenerate = det3(m).abs() < T::c(1e-12);
    if degenerate {
        log::warn!("SVD+ projection of a (near) singular matrix; result is not unique");
    }
    let d = svd3(m);
    let sign = det3(&d.u) * det3(&d.v);
    let mut u = d.u;
    if sign < T::zero() {
        for row in u.iter_mut() {
            row[2] = -row[2];
        }
    }
    So3Projection {
        rotation: RotationMatrix::from_matrix_unchecked(mul3(&u, &transpose3(&d.v))),
        degenerate,
    }
}

fn check_coords<T: Real>(x: &Tensor<T>) {
    assert_eq!(x.cols(), 3, "coordinates must be N×3, got {:?}", x.shape());
}

/// Row `i` of the output is `R·x_i`.
pub fn apply_rotation<T: Real>(r: &RotationMatrix<T>, x: &Tensor<T>) -> Tensor<T> {
    check_coords(x);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let p = x.row(i);
        out.extend(r.apply_vec([p[0], p[1], p[2]]));
    }
    Tensor::from_vec(&[x.rows(), 3], out)
}

pub fn centroid<T: Real>(x: &Tensor<T>) -> [T; 3] {
    check_coords(x);
    let n = T::c(x.rows().max(1) as f64);
    let mut c = [T::zero(); 3];
    for i in 0..x.rows() {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += x.at(i, k);
        }
    }
    c.map(|v| v / n)
}

/// `x − mean(x)`.
pub fn subtract_cog<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = centroid(x);
    let mut out = x.clone();
    for i in 0..x.rows() {
        for (k, &ck) in c.iter().enumerate() {
            let v = out.at(i, k) - ck;
            out.set(i, k, v);
        }
    }
    out
}

/// Largest absolute column mean.
pub fn max_abs_cog<T: Real>(x: &Tensor<T>) -> T {
    centroid(x).iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

/// Standard normal `N×3` sample projected onto the zero-CoG subspace.
pub fn zero_cog_noise<T: Real>(n: usize, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..n * 3)
        .map(|_| T::c(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    subtract_cog(&Tensor::from_vec(&[n, 3], data))
}

pub fn sample_zero_cog_noise<T: Real>(n: usize, seed: u64) -> Tensor<T> {
    zero_cog_noise(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Haar-uniform rotation from a uniformly distributed unit quaternion.
pub fn haar_rotation<T: Real>(rng: &mut impl Rng) -> RotationMatrix<T> {
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    let m = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    RotationMatrix::from_matrix_unchecked(m.map(|r| r.map(T::c)))
}

pub fn random_rotation_haar<T: Real>(seed: u64) -> RotationMatrix<T> {
    haar_rotation(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Canonical principal-axis frame of a point cloud.
///
/// The centred points are expressed in the eigenbasis of their covariance,
/// axes sorted by descending variance. Each axis is oriented so that the
/// third central moment along it is non-negative (a vanishing moment falls
/// back to making the largest-magnitude coordinate positive) and the last
/// axis is flipped if needed to keep the frame proper. Fewer than three
/// points, or an isotropic covariance, yield the centred input unchanged.
pub fn pca_align<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, frame) = pca_frame(x);
    match frame {
        Some(r) => apply_rotation(&r, &c),
        None => c,
    }
}

/// Centred coordinates and the rotation taking them to the principal frame.
pub fn pca_frame<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Option<RotationMatrix<T>>) {
    let c = subtract_cog(x);
    let n = c.rows();
    if n < 3 {
        return (c, None);
    }
    let mut cov = [[T::zero(); 3]; 3];
    for i in 0..n {
        let p = c.row(i);
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += p[a] * p[b];
            }
        }
    }
    let nf = T::c(n as f64);
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= nf;
        }
    }
    let (vals, vecs) = sym_eig3(&cov);
    let tie = T::c(1e-9) * vals[0].abs();
    if vals[0] <= T::epsilon() || (vals[0] - vals[2]).abs() <= tie {
        return (c, None);
    }
    let mut axes = vecs;
    for k in 0..3 {
        let proj: Vec<T> = (0..n)
            .map(|i| c.at(i, 0) * axes[0][k] + c.at(i, 1) * axes[1][k] + c.at(i, 2) * axes[2][k])
            .collect();
        let m3: T = proj.iter().map(|&v| v * v * v).sum();
        let scale: T = proj.iter().map(|&v| (v * v * v).abs()).sum();
        let flip = if m3.abs() > T::c(1e-12) * scale {
            m3 < T::zero()
        } else {
            let mut best = T::zero();
            for &v in &proj {
                if v.abs() > best.abs() * (T::one() + T::c(1e-12)) {
                    best = v;
                }
            }
            best < T::zero()
        };
        if flip {
            for row in axes.iter_mut() {
                row[k] = -row[k];
            }
        }
    }
    if det3(&axes) < T::zero() {
        for row in axes.iter_mut() {
            row[2] = -row[2];
        }
    }
    // rows of Eᵀ are the axes; y_i = Eᵀ c_i
    (c, Some(RotationMatrix::from_matrix_unchecked(transpose3(&axes))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rz90() -> Mat3<f64> {
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, 3], (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn projection_examples() {
        let p = project_to_so3(&identity3::<f64>());
        assert!(frobenius_diff(p.rotation.matrix(), &identity3()) < 1e-12);
        assert!(!p.degenerate);
        let two = rz90().map(|r| r.map(|v| 2.0 * v));
        let p = project_to_so3(&two);
        assert!(frobenius_diff(p.rotation.matrix(), &rz90()) < 1e-12);
        let p = project_to_so3(&[[0.0; 3]; 3]);
        assert!(p.degenerate);
        assert!(p.rotation.is_rotation(1e-10));
    }

    #[test]
    fn reflection_is_mapped_to_a_proper_rotation() {
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let p = project_to_so3(&m);
        assert!(p.rotation.is_rotation(1e-12));
    }

    #[test]
    fn rotation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(&mut rng, 6);
        assert_eq!(apply_rotation(&RotationMatrix::identity(), &x), x);
        let r = RotationMatrix::about_z(std::f64::consts::PI);
        let y = apply_rotation(&r, &Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]));
        assert!((y.at(0, 0) + 1.0).abs() < 1e-15 && y.at(0, 1).abs() < 1e-15);
        let r = random_rotation_haar::<f64>(9);
        let y = apply_rotation(&r, &x);
        for i in 0..6 {
            for j in 0..6 {
                let d = |t: &Tensor<f64>| (0..3).map(|k| (t.at(i, k) - t.at(j, k)).powi(2)).sum::<f64>().sqrt();
                assert!((d(&x) - d(&y)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cog_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        assert_eq!(subtract_cog(&a), a);
        let b = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        assert_eq!(subtract_cog(&b), a);
        let c = Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]);
        assert_eq!(subtract_cog(&c).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_cog_noise_small_cases() {
        for seed in 0..20 {
            let one = sample_zero_cog_noise::<f64>(1, seed);
            assert!(one.data().iter().all(|&v| v == 0.0));
            let two = sample_zero_cog_noise::<f64>(2, seed);
            for k in 0..3 {
                assert!((two.at(0, k) + two.at(1, k)).abs() < 1e-15);
            }
            let ten = sample_zero_cog_noise::<f64>(10, seed);
            assert!(max_abs_cog(&ten) < 1e-12);
        }
    }

    #[test]
    fn zero_cog_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let e = zero_cog_noise::<f64>(10, &mut rng);
            acc += e.data().iter().map(|v| v * v).sum::<f64>() / 30.0;
        }
        let var = acc / draws as f64;
        assert!((var - 0.9).abs() / 0.9 < 0.02, "variance {var}");
    }

    #[test]
    fn haar_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = haar_rotation::<f64>(&mut rng);
            assert!(r.is_rotation(1e-10));
        }
    }

    #[test]
    fn pca_keeps_principal_aligned_input() {
        // centred, along x, positive skew
        let x = Tensor::<f64>::from_rows(&[
            vec![-1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![3.0, 0.0, 0.0],
        ]);
        let y = pca_align(&x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn pca_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_cloud(&mut rng, 9);
        let base = pca_align(&x);
        for _ in 0..100 {
            let r = haar_rotation::<f64>(&mut rng);
            let y = pca_align(&apply_rotation(&r, &x));
            for (a, b) in y.data().iter().zip(base.data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_flattens_a_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 3f64.sqrt() / 2.0;
        let tri = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![-0.5, h, 0.0], vec![-0.5, -h, 0.0]]);
        for _ in 0..20 {
            let r = haar_rotation::<f64>(&mut rng);
            let y = pca_align(&apply_rotation(&r, &tri));
            for i in 0..3 {
                assert!(y.at(i, 2).abs() < 1e-8, "{y:?}");
            }
        }
    }

    #[test]
    fn pca_short_inputs_are_just_centred() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]);
        assert_eq!(pca_align(&x), subtract_cog(&x));
    }
}
