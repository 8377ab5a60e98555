//! Rotation conventions and small affine helpers shared by every module.
//!
//! Euler angles are intrinsic XYZ everywhere: `R = Rx(x) * Ry(y) * Rz(z)`.
//! Affine transforms are kept as row-major 3x4 arrays (`[R | t]`) in the hot
//! paths; the implicit bottom row is `(0, 0, 0, 1)`.

use nalgebra::{Matrix3, Matrix4, Vector3};

/// Row-major 3x4 affine matrix.
pub type Affine = [f64; 12];

pub const AFFINE_IDENTITY: Affine = [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.];

/// 6D rotation feature of the identity rotation.
pub const ROT6D_IDENTITY: [f64; 6] = [1., 0., 0., 0., 1., 0.];

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1., 0., 0., 0., c, -s, 0., s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0., s, 0., 1., 0., -s, 0., c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0., s, c, 0., 0., 0., 1.)
}

pub fn euler_xyz(e: [f64; 3]) -> Matrix3<f64> {
    rot_x(e[0]) * rot_y(e[1]) * rot_z(e[2])
}

/// Rotation matrix and its partial derivatives with respect to each angle.
pub fn euler_xyz_with_jacobian(e: [f64; 3]) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (rx, ry, rz) = (rot_x(e[0]), rot_y(e[1]), rot_z(e[2]));
    let (sx, cx) = e[0].sin_cos();
    let (sy, cy) = e[1].sin_cos();
    let (sz, cz) = e[2].sin_cos();
    let drx = Matrix3::new(0., 0., 0., 0., -sx, -cx, 0., cx, -sx);
    let dry = Matrix3::new(-sy, 0., cy, 0., 0., 0., -cy, 0., -sy);
    let drz = Matrix3::new(-sz, -cz, 0., cz, -sz, 0., 0., 0., 0.);
    (rx * ry * rz, [drx * ry * rz, rx * dry * rz, rx * ry * drz])
}

/// Inverse of [`euler_xyz`]. Near `|y| = pi/2` the split between x and z is
/// arbitrary; `z` is set to zero there.
pub fn euler_from_matrix(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = r[(0, 2)].clamp(-1.0, 1.0);
    let y = sy.asin();
    if sy.abs() < 1.0 - 1e-12 {
        let x = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let z = (-r[(0, 1)]).atan2(r[(0, 0)]);
        [x, y, z]
    } else {
        // gimbal: only x + z (or x - z) is determined
        let x = r[(2, 1)].atan2(r[(1, 1)]);
        [x, y, 0.0]
    }
}

/// True when the middle Euler angle is within `margin` of +-pi/2.
pub fn near_gimbal(e: [f64; 3], margin: f64) -> bool {
    (e[1].abs() - std::f64::consts::FRAC_PI_2).abs() < margin
}

/// First two columns of the rotation matrix, flattened column by column.
pub fn rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Gram-Schmidt map from a 6D feature back to a rotation matrix.
pub fn rotation_from_6d(f: &[f64]) -> Matrix3<f64> {
    let a1 = Vector3::new(f[0], f[1], f[2]);
    let a2 = Vector3::new(f[3], f[4], f[5]);
    let b1 = a1.normalize();
    let b2 = (a2 - b1 * b1.dot(&a2)).normalize();
    let b3 = b1.cross(&b2);
    Matrix3::from_columns(&[b1, b2, b3])
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // ||A - B||_F = 2 sqrt(2) sin(angle / 2); better conditioned than acos near 0
    let d = (a - b).norm();
    2.0 * (d / (2.0 * std::f64::consts::SQRT_2)).clamp(0.0, 1.0).asin()
}

pub fn affine_from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Affine {
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        t[0],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        t[1],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t[2],
    ]
}

pub fn affine_linear(a: &Affine) -> Matrix3<f64> {
    Matrix3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10])
}

pub fn affine_translation(a: &Affine) -> Vector3<f64> {
    Vector3::new(a[3], a[7], a[11])
}

pub fn affine_to_matrix4(a: &Affine) -> Matrix4<f64> {
    Matrix4::new(
        a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9], a[10], a[11], 0., 0., 0., 1.,
    )
}

pub fn matrix4_to_affine(m: &Matrix4<f64>) -> Affine {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(0, 3)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(1, 3)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
        m[(2, 3)],
    ]
}

/// `a * b` for affine matrices.
#[inline]
pub fn affine_mul(a: &Affine, b: &Affine) -> Affine {
    let mut o = [0.0; 12];
    for r in 0..3 {
        let ar = &a[r * 4..r * 4 + 4];
        for c in 0..4 {
            let mut s = ar[0] * b[c] + ar[1] * b[4 + c] + ar[2] * b[8 + c];
            if c == 3 {
                s += ar[3];
            }
            o[r * 4 + c] = s;
        }
    }
    o
}

#[inline]
pub fn affine_apply(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    [
        a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + a[3],
        a[4] * p[0] + a[5] * p[1] + a[6] * p[2] + a[7],
        a[8] * p[0] + a[9] * p[1] + a[10] * p[2] + a[11],
    ]
}

/// General affine inverse (the linear block may carry scale or shear).
pub fn affine_inverse(a: &Affine) -> Option<Affine> {
    let l = affine_linear(a);
    let inv = l.try_inverse()?;
    let t = -(inv * affine_translation(a));
    Some(affine_from_parts(&inv, &t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn euler_order_is_intrinsic_xyz() {
        let e = [0.3, -0.7, 1.1];
        let r = euler_xyz(e);
        let expected = rot_x(0.3) * rot_y(-0.7) * rot_z(1.1);
        assert!((r - expected).abs().max() < 1e-15);
        // first rotation about x, then the moved y axis: R * e_z keeps its x
        // component equal to sin(y)
        assert!((r[(0, 2)] - (-0.7f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn euler_round_trip_away_from_gimbal() {
        for e in [[0.1, 0.2, 0.3], [-2.0, 1.2, 3.0], [3.1, -1.4, -2.9]] {
            let back = euler_from_matrix(&euler_xyz(e));
            let r0 = euler_xyz(e);
            let r1 = euler_xyz(back);
            assert!((r0 - r1).abs().max() < 1e-12, "{e:?} -> {back:?}");
        }
    }

    #[test]
    fn euler_round_trip_at_gimbal() {
        let e = [0.4, PI / 2.0, -0.2];
        let back = euler_from_matrix(&euler_xyz(e));
        assert!((euler_xyz(e) - euler_xyz(back)).abs().max() < 1e-9);
        assert!(near_gimbal(back, 1e-6));
    }

    #[test]
    fn euler_jacobian_matches_differences() {
        let e = [0.3, -0.4, 0.9];
        let (_, d) = euler_xyz_with_jacobian(e);
        let h = 1e-6;
        for k in 0..3 {
            let mut ep = e;
            let mut em = e;
            ep[k] += h;
            em[k] -= h;
            let fd = (euler_xyz(ep) - euler_xyz(em)) / (2.0 * h);
            assert!((fd - d[k]).abs().max() < 1e-9);
        }
    }

    #[test]
    fn six_d_round_trip() {
        let r = euler_xyz([0.5, 0.1, -1.3]);
        let back = rotation_from_6d(&rot6d(&r));
        assert!((r - back).abs().max() < 1e-14);
        assert_eq!(rot6d(&Matrix3::identity()), ROT6D_IDENTITY);
    }

    #[test]
    fn geodesic_angle() {
        let a = rot_z(0.0);
        let b = rot_z(0.7);
        assert!((rotation_angle_between(&a, &b) - 0.7).abs() < 1e-12);
        assert!((rotation_angle_between(&rot_x(PI), &a) - PI).abs() < 1e-7);
    }

    #[test]
    fn affine_inverse_handles_scale() {
        let r = euler_xyz([0.2, 0.5, -0.1]) * 2.5;
        let a = affine_from_parts(&r, &Vector3::new(1.0, -2.0, 0.5));
        let inv = affine_inverse(&a).unwrap();
        let id = affine_mul(&a, &inv);
        for (x, y) in id.iter().zip(AFFINE_IDENTITY.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_mul_matches_matrix4() {
        let a = affine_from_parts(&euler_xyz([0.1, 0.2, 0.3]), &Vector3::new(1., 2., 3.));
        let b = affine_from_parts(&(euler_xyz([-0.4, 0.0, 0.8]) * 1.5), &Vector3::new(-1., 0., 2.));
        let m = affine_to_matrix4(&a) * affine_to_matrix4(&b);
        let o = affine_mul(&a, &b);
        assert!((affine_to_matrix4(&o) - m).abs().max() < 1e-14);
    }
}
