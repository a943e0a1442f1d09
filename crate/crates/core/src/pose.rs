//! Rigid poses: Euler rotation in degrees plus translation in millimeters.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 6-DOF rigid pose. Rotation is `Rz · Ry · Rx` (x applied first) about the
/// volume center; translation is applied afterwards in the projection frame,
/// where z is the beam direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidPose {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl RigidPose {
    pub const IDENTITY: RigidPose = RigidPose {
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
    };

    pub fn new(rotation_deg: [f64; 3], translation_mm: [f64; 3]) -> Result<Self> {
        let p = RigidPose {
            rx: rotation_deg[0],
            ry: rotation_deg[1],
            rz: rotation_deg[2],
            tx: translation_mm[0],
            ty: translation_mm[1],
            tz: translation_mm[2],
        };
        if !p.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::Usage(format!(
                "pose components must be finite: {p:?}"
            )));
        }
        Ok(p.normalized())
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        RigidPose {
            rx: a[0],
            ry: a[1],
            rz: a[2],
            tx: a[3],
            ty: a[4],
            tz: a[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn rotation_deg(&self) -> [f64; 3] {
        [self.rx, self.ry, self.rz]
    }

    pub fn translation_mm(&self) -> [f64; 3] {
        [self.tx, self.ty, self.tz]
    }

    /// Same pose with every angle wrapped into (-180, 180].
    pub fn normalized(&self) -> Self {
        RigidPose {
            rx: wrap_degrees(self.rx),
            ry: wrap_degrees(self.ry),
            rz: wrap_degrees(self.rz),
            ..*self
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        euler_matrix(self.rotation_deg())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }
}

pub fn wrap_degrees(a: f64) -> f64 {
    let mut w = a % 360.0;
    if w <= -180.0 {
        w += 360.0;
    } else if w > 180.0 {
        w -= 360.0;
    }
    w
}

/// `Rz(rz) · Ry(ry) · Rx(rx)` for angles in degrees. Exactly the identity
/// for all-zero angles.
pub fn euler_matrix(deg: [f64; 3]) -> Matrix3<f64> {
    if deg == [0.0; 3] {
        return Matrix3::identity();
    }
    let [rx, ry, rz] = deg.map(f64::to_radians);
    *Rotation3::from_euler_angles(rx, ry, rz).matrix()
}

/// Inverse of [`euler_matrix`], angles in degrees.
pub fn matrix_to_euler(m: &Matrix3<f64>) -> [f64; 3] {
    let rot = Rotation3::from_matrix_unchecked(*m);
    let (rx, ry, rz) = rot.euler_angles();
    [rx.to_degrees(), ry.to_degrees(), rz.to_degrees()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-725.0), -5.0);
    }

    #[test]
    fn euler_order_is_zyx() {
        let m = euler_matrix([30.0, -20.0, 45.0]);
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), 30f64.to_radians());
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), (-20f64).to_radians());
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), 45f64.to_radians());
        let expected = (rz * ry * rx).into_inner();
        assert!((m - expected).abs().max() < 1e-14);
        let back = matrix_to_euler(&m);
        assert!((back[0] - 30.0).abs() < 1e-9);
        assert!((back[1] + 20.0).abs() < 1e-9);
        assert!((back[2] - 45.0).abs() < 1e-9);
    }

    #[test]
    fn zero_angles_are_exact_identity() {
        assert_eq!(euler_matrix([0.0; 3]), Matrix3::identity());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(RigidPose::new([f64::NAN, 0.0, 0.0], [0.0; 3]).is_err());
        let p = RigidPose::new([270.0, 0.0, 0.0], [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.rx, -90.0);
    }
}
