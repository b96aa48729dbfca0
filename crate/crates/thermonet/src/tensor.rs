//! Finite-deformation tensor algebra on 3x3 matrices.
//!
//! Covers the deformation measures used throughout the crate: the right
//! Cauchy-Green tensor C = FᵀF, the Green strain E = ½(C − I), the scalar
//! invariants I1..I8 of C for isotropic and two-fiber-family transversely
//! isotropic material classes, their analytic derivatives ∂I_k/∂C, and the
//! polar decomposition F = R·U.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance below which a matrix counts as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Determinants below this are treated as a degenerate deformation.
pub const DET_TOL: f64 = 1e-12;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("degenerate deformation gradient (det F = {det:.3e} <= {DET_TOL:.0e})")]
    DegenerateDeformation { det: f64 },
    #[error("input tensor is not symmetric (max deviation {max_deviation:.3e})")]
    NotSymmetric { max_deviation: f64 },
    #[error("tensor is singular, inverse does not exist (det = {det:.3e})")]
    Singular { det: f64 },
    #[error("fiber direction must be a unit vector (|v| = {norm})")]
    NonUnitFiber { norm: f64 },
}

/// A 3x3 real second-order tensor, stored row-major.
///
/// Holds F, C, B, E as dimensionless measures and S, σ in MPa.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tensor3(pub [f64; 9]);

/// 3-vector helper operations used by the fiber algebra.
pub type Vec3 = [f64; 3];

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn outer3(a: &Vec3, b: &Vec3) -> Tensor3 {
    let mut t = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            t[3 * i + j] = a[i] * b[j];
        }
    }
    Tensor3(t)
}

impl Tensor3 {
    pub const ZERO: Tensor3 = Tensor3([0.0; 9]);

    pub fn identity() -> Self {
        Tensor3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Tensor3([a, 0.0, 0.0, 0.0, b, 0.0, 0.0, 0.0, c])
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        let mut t = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                t[3 * i + j] = rows[i][j];
            }
        }
        Tensor3(t)
    }

    /// Entry at zero-based row `i`, column `j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[3 * i + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[3 * i + j] = v;
    }

    pub fn transpose(&self) -> Tensor3 {
        let m = &self.0;
        Tensor3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn matmul(&self, rhs: &Tensor3) -> Tensor3 {
        let a = &self.0;
        let b = &rhs.0;
        let mut c = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[3 * i + k] * b[3 * k + j];
                }
                c[3 * i + j] = s;
            }
        }
        Tensor3(c)
    }

    pub fn matvec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
        ]
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        let mut t = self.0;
        for v in &mut t {
            *v *= s;
        }
        Tensor3(t)
    }

    pub fn add(&self, rhs: &Tensor3) -> Tensor3 {
        let mut t = self.0;
        for (v, w) in t.iter_mut().zip(rhs.0.iter()) {
            *v += w;
        }
        Tensor3(t)
    }

    pub fn sub(&self, rhs: &Tensor3) -> Tensor3 {
        let mut t = self.0;
        for (v, w) in t.iter_mut().zip(rhs.0.iter()) {
            *v -= w;
        }
        Tensor3(t)
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[4] + self.0[8]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Result<Tensor3, TensorError> {
        let d = self.det();
        if d.abs() <= DET_TOL {
            return Err(TensorError::Singular { det: d });
        }
        let m = &self.0;
        let inv = [
            (m[4] * m[8] - m[5] * m[7]) / d,
            (m[2] * m[7] - m[1] * m[8]) / d,
            (m[1] * m[5] - m[2] * m[4]) / d,
            (m[5] * m[6] - m[3] * m[8]) / d,
            (m[0] * m[8] - m[2] * m[6]) / d,
            (m[2] * m[3] - m[0] * m[5]) / d,
            (m[3] * m[7] - m[4] * m[6]) / d,
            (m[1] * m[6] - m[0] * m[7]) / d,
            (m[0] * m[4] - m[1] * m[3]) / d,
        ];
        Ok(Tensor3(inv))
    }

    /// Deviatoric part: T − (tr T / 3) I.
    pub fn dev(&self) -> Tensor3 {
        let p = self.trace() / 3.0;
        let mut t = self.0;
        t[0] -= p;
        t[4] -= p;
        t[8] -= p;
        Tensor3(t)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// (T + Tᵀ)/2, used to absorb round-off before invariant evaluation.
    pub fn symmetrize(&self) -> Tensor3 {
        let t = self.transpose();
        self.add(&t).scale(0.5)
    }

    /// Largest |t_ij − t_ji| over the off-diagonal pairs.
    pub fn asymmetry(&self) -> f64 {
        let m = &self.0;
        (m[1] - m[3])
            .abs()
            .max((m[2] - m[6]).abs())
            .max((m[5] - m[7]).abs())
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= SYMMETRY_TOL * self.frobenius_norm().max(1.0)
    }

    fn to_nalgebra(self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }
}

/// Reference fiber directions for the transversely isotropic class.
///
/// `None` directions select the isotropic class (invariants I1..I3 only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberFrame {
    pub a0: Option<Vec3>,
    pub g0: Option<Vec3>,
}

impl FiberFrame {
    pub fn isotropic() -> Self {
        FiberFrame { a0: None, g0: None }
    }

    /// Two-family frame; both directions must be unit vectors.
    pub fn two_families(a0: Vec3, g0: Vec3) -> Result<Self, TensorError> {
        for v in [&a0, &g0] {
            let n = dot3(v, v).sqrt();
            if (n - 1.0).abs() > SYMMETRY_TOL {
                return Err(TensorError::NonUnitFiber { norm: n });
            }
        }
        Ok(FiberFrame {
            a0: Some(a0),
            g0: Some(g0),
        })
    }

    /// Number of invariants this frame produces (3 or 8).
    pub fn invariant_count(&self) -> usize {
        if self.a0.is_some() && self.g0.is_some() {
            8
        } else {
            3
        }
    }
}

/// C = FᵀF. Errors when det F is at or below the degeneracy tolerance.
pub fn right_cauchy_green(f: &Tensor3) -> Result<Tensor3, TensorError> {
    let det = f.det();
    if det <= DET_TOL {
        return Err(TensorError::DegenerateDeformation { det });
    }
    Ok(f.transpose().matmul(f))
}

/// B = FFᵀ (left Cauchy-Green).
pub fn left_cauchy_green(f: &Tensor3) -> Tensor3 {
    f.matmul(&f.transpose())
}

/// Green strain E = ½(FᵀF − I).
pub fn green_strain(f: &Tensor3) -> Tensor3 {
    let c = f.transpose().matmul(f);
    c.sub(&Tensor3::identity()).scale(0.5)
}

fn check_spd_input(c: &Tensor3) -> Result<Tensor3, TensorError> {
    let dev = c.asymmetry();
    if dev > SYMMETRY_TOL * c.frobenius_norm().max(1.0) {
        return Err(TensorError::NotSymmetric { max_deviation: dev });
    }
    Ok(c.symmetrize())
}

/// Invariants of C for the given fiber frame.
///
/// Isotropic frames yield `[I1, I2, I3]`; two-family frames yield
/// `[I1, .., I8]` with
/// I4 = a0·C a0, I5 = a0·C² a0, I6/I7 the same for g0, and
/// I8 = (a0·g0)(a0·C g0).
pub fn invariants(c: &Tensor3, frame: &FiberFrame) -> Result<Vec<f64>, TensorError> {
    let c = check_spd_input(c)?;
    let i1 = c.trace();
    let c2 = c.matmul(&c);
    let i2 = 0.5 * (i1 * i1 - c2.trace());
    let i3 = c.det();
    let mut inv = vec![i1, i2, i3];
    if let (Some(a0), Some(g0)) = (&frame.a0, &frame.g0) {
        let ca = c.matvec(a0);
        let c2a = c2.matvec(a0);
        let cg = c.matvec(g0);
        let c2g = c2.matvec(g0);
        inv.push(dot3(a0, &ca));
        inv.push(dot3(a0, &c2a));
        inv.push(dot3(g0, &cg));
        inv.push(dot3(g0, &c2g));
        inv.push(dot3(a0, g0) * dot3(a0, &cg));
    }
    Ok(inv)
}

/// Analytic derivatives ∂I_k/∂C; each returned tensor is symmetric.
///
/// The entries follow the standard relations
/// ∂I1/∂C = I, ∂I2/∂C = I1·I − C, ∂I3/∂C = I3·C⁻¹,
/// ∂I4/∂C = a0⊗a0, ∂I5/∂C = a0⊗Ca0 + Ca0⊗a0 (same pattern for g0),
/// ∂I8/∂C = ½(a0·g0)(a0⊗g0 + g0⊗a0).
pub fn invariant_derivatives(
    c: &Tensor3,
    frame: &FiberFrame,
) -> Result<Vec<Tensor3>, TensorError> {
    let c = check_spd_input(c)?;
    let eye = Tensor3::identity();
    let i1 = c.trace();
    let i3 = c.det();
    let c_inv = c.inverse()?;
    let mut out = vec![
        eye,
        eye.scale(i1).sub(&c),
        c_inv.symmetrize().scale(i3),
    ];
    if let (Some(a0), Some(g0)) = (&frame.a0, &frame.g0) {
        let ca = c.matvec(a0);
        let cg = c.matvec(g0);
        out.push(outer3(a0, a0));
        out.push(outer3(a0, &ca).add(&outer3(&ca, a0)));
        out.push(outer3(g0, g0));
        out.push(outer3(g0, &cg).add(&outer3(&cg, g0)));
        let cos = dot3(a0, g0);
        out.push(outer3(a0, g0).add(&outer3(g0, a0)).scale(0.5 * cos));
    }
    Ok(out)
}

/// Rotation factor of the polar decomposition F = R·U.
///
/// U = C^{1/2} via eigendecomposition of C, R = F·U⁻¹; robust for the
/// well-conditioned near-identity deformations in scope.
pub fn polar_rotation(f: &Tensor3) -> Result<Tensor3, TensorError> {
    let det = f.det();
    if det <= DET_TOL {
        return Err(TensorError::DegenerateDeformation { det });
    }
    let c = f.transpose().matmul(f);
    let eig = SymmetricEigen::new(c.to_nalgebra());
    // U⁻¹ = Q diag(1/√λ) Qᵀ
    let mut u_inv = Matrix3::zeros();
    for k in 0..3 {
        let lam = eig.eigenvalues[k];
        if lam <= DET_TOL * DET_TOL {
            return Err(TensorError::Singular { det: lam });
        }
        let q = eig.eigenvectors.column(k);
        u_inv += q * q.transpose() / lam.sqrt();
    }
    let r = f.to_nalgebra() * u_inv;
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
    }
    Ok(Tensor3(out))
}

/// Symmetric 3x3 tensor as the 6-vector (11, 22, 33, 12, 13, 23).
pub fn to_voigt(t: &Tensor3) -> [f64; 6] {
    [
        t.get(0, 0),
        t.get(1, 1),
        t.get(2, 2),
        t.get(0, 1),
        t.get(0, 2),
        t.get(1, 2),
    ]
}

pub fn from_voigt(v: &[f64; 6]) -> Tensor3 {
    Tensor3::from_rows([
        [v[0], v[3], v[4]],
        [v[3], v[1], v[5]],
        [v[4], v[5], v[2]],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_f(rng: &mut ChaCha8Rng) -> Tensor3 {
        loop {
            let mut t = [0.0; 9];
            for (k, v) in t.iter_mut().enumerate() {
                let diag = k % 4 == 0;
                *v = if diag {
                    1.0 + rng.gen_range(-0.1..0.1)
                } else {
                    rng.gen_range(-0.1..0.1)
                };
            }
            let f = Tensor3(t);
            if f.det() > 0.5 {
                return f;
            }
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Tensor3 {
        let f = random_f(rng);
        right_cauchy_green(&f).unwrap()
    }

    fn frame() -> FiberFrame {
        FiberFrame::two_families([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn right_cauchy_green_identity_and_diag() {
        let c = right_cauchy_green(&Tensor3::identity()).unwrap();
        assert_eq!(c, Tensor3::identity());
        let c = right_cauchy_green(&Tensor3::diag(1.3, 1.0, 1.0)).unwrap();
        assert_relative_eq!(c.get(0, 0), 1.69, max_relative = 1e-15);
        assert_eq!(c.get(1, 1), 1.0);
    }

    #[test]
    fn right_cauchy_green_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f = random_f(&mut rng);
            let c = right_cauchy_green(&f).unwrap();
            // brute-force C_ij = sum_k F_ki F_kj
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += f.get(k, i) * f.get(k, j);
                    }
                    assert!((c.get(i, j) - s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn degenerate_deformation_rejected() {
        let f = Tensor3::diag(0.0, 1.0, 1.0);
        assert!(matches!(
            right_cauchy_green(&f),
            Err(TensorError::DegenerateDeformation { .. })
        ));
    }

    #[test]
    fn invariants_identity_orthogonal_fibers() {
        let inv = invariants(&Tensor3::identity(), &frame()).unwrap();
        assert_eq!(inv, vec![3.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn invariants_aligned_stretch() {
        let lam: f64 = 1.17;
        let c = Tensor3::diag(lam * lam, 1.0, 1.0);
        let inv = invariants(&c, &frame()).unwrap();
        assert_relative_eq!(inv[3], lam * lam, max_relative = 1e-15);
        assert_relative_eq!(inv[4], lam.powi(4), max_relative = 1e-15);
    }

    #[test]
    fn invariants_match_eigenvalue_expressions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = random_spd(&mut rng);
            let inv = invariants(&c, &FiberFrame::isotropic()).unwrap();
            let eig = SymmetricEigen::new(Matrix3::from_row_slice(&c.0));
            let (l1, l2, l3) = (eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]);
            assert_relative_eq!(inv[0], l1 + l2 + l3, max_relative = 1e-12);
            assert_relative_eq!(inv[1], l1 * l2 + l1 * l3 + l2 * l3, max_relative = 1e-12);
            assert_relative_eq!(inv[2], l1 * l2 * l3, max_relative = 1e-12);
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let mut c = Tensor3::identity();
        c.set(0, 1, 0.5);
        assert!(matches!(
            invariants(&c, &FiberFrame::isotropic()),
            Err(TensorError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn derivative_of_i1_is_identity_and_i3_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_spd(&mut rng);
        let d = invariant_derivatives(&c, &frame()).unwrap();
        assert_eq!(d[0], Tensor3::identity());
        let d_id = invariant_derivatives(&Tensor3::identity(), &frame()).unwrap();
        for (a, b) in d_id[2].0.iter().zip(Tensor3::identity().0.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Central finite differences of invariants() along symmetric
    /// perturbation directions, the independent oracle for the analytic
    /// derivative formulas.
    pub(crate) fn fd_invariant_derivatives(c: &Tensor3, frame: &FiberFrame) -> Vec<Tensor3> {
        let h = 1e-6;
        let n = frame.invariant_count();
        let mut out = vec![Tensor3::ZERO; n];
        for i in 0..3 {
            for j in i..3 {
                let mut dp = *c;
                let mut dm = *c;
                dp.set(i, j, dp.get(i, j) + h);
                dm.set(i, j, dm.get(i, j) - h);
                if i != j {
                    dp.set(j, i, dp.get(j, i) + h);
                    dm.set(j, i, dm.get(j, i) - h);
                }
                let ip = invariants(&dp, frame).unwrap();
                let im = invariants(&dm, frame).unwrap();
                for k in 0..n {
                    // directional derivative along (e_ij + e_ji) equals
                    // 2*(dI/dC)_ij off-diagonal and (dI/dC)_ii on-diagonal
                    let g = (ip[k] - im[k]) / (2.0 * h);
                    if i == j {
                        out[k].set(i, i, g);
                    } else {
                        out[k].set(i, j, 0.5 * g);
                        out[k].set(j, i, 0.5 * g);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fr = frame();
        for _ in 0..10 {
            let c = random_spd(&mut rng);
            let analytic = invariant_derivatives(&c, &fr).unwrap();
            let fd = fd_invariant_derivatives(&c, &fr);
            for (k, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
                let scale = a.frobenius_norm().max(1e-8);
                let err = a.sub(f).frobenius_norm() / scale;
                assert!(err < 1e-6, "invariant {} deriv err {}", k + 1, err);
                assert!(a.asymmetry() < 1e-12, "derivative {} not symmetric", k + 1);
            }
        }
    }

    #[test]
    fn green_strain_cases() {
        assert_eq!(green_strain(&Tensor3::identity()), Tensor3::ZERO);
        let e = green_strain(&Tensor3::diag(1.02, 1.0, 1.0));
        assert_relative_eq!(e.get(0, 0), (1.02f64.powi(2) - 1.0) / 2.0, epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_f(&mut rng);
        let direct = {
            let c = f.transpose().matmul(&f);
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let eij = 0.5 * (c.get(i, j) - if i == j { 1.0 } else { 0.0 });
                    s += eij * eij;
                }
            }
            s.sqrt()
        };
        assert!((green_strain(&f).frobenius_norm() - direct).abs() < 1e-14);
    }

    #[test]
    fn polar_rotation_cases() {
        // pure rotation: R = F
        let th = 0.37f64;
        let q = Tensor3::from_rows([
            [th.cos(), -th.sin(), 0.0],
            [th.sin(), th.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ]);
        let r = polar_rotation(&q).unwrap();
        assert!(r.sub(&q).frobenius_norm() < 1e-12);
        // positive diagonal: R = I
        let r = polar_rotation(&Tensor3::diag(1.2, 0.8, 1.05)).unwrap();
        assert!(r.sub(&Tensor3::identity()).frobenius_norm() < 1e-12);
    }

    #[test]
    fn polar_rotation_against_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let f = random_f(&mut rng);
            let r = polar_rotation(&f).unwrap();
            // orthogonality and reconstruction
            let rtr = r.transpose().matmul(&r);
            assert!(rtr.sub(&Tensor3::identity()).frobenius_norm() < 1e-10);
            assert!((r.det() - 1.0).abs() < 1e-10);
            let u = r.transpose().matmul(&f);
            assert!(r.matmul(&u).sub(&f).frobenius_norm() < 1e-10);
            // SVD oracle: R = V * Wᵀ from F = V Σ Wᵀ
            let svd = Matrix3::from_row_slice(&f.0).svd(true, true);
            let r_svd = svd.u.unwrap() * svd.v_t.unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r.get(i, j) - r_svd[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn invariants_objective_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let fr = frame();
        for _ in 0..10 {
            let f = random_f(&mut rng);
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let q = Tensor3::from_rows([
                [th.cos(), -th.sin(), 0.0],
                [th.sin(), th.cos(), 0.0],
                [0.0, 0.0, 1.0],
            ]);
            let qf = q.matmul(&f);
            let inv_a = invariants(&right_cauchy_green(&f).unwrap(), &fr).unwrap();
            let inv_b = invariants(&right_cauchy_green(&qf).unwrap(), &fr).unwrap();
            for (a, b) in inv_a.iter().zip(inv_b.iter()) {
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dev_is_traceless() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let t = random_f(&mut rng);
            let d = t.dev();
            assert!(d.trace().abs() <= 1e-12 * t.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn voigt_roundtrip() {
        let t = from_voigt(&[1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
        assert!(t.is_symmetric());
        assert_eq!(to_voigt(&t), [1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
    }
}
