//! Camera and BEV coordinate machinery.
//!
//! Frames: the ego frame has x forward, y left, z up. Camera frames follow
//! the pinhole convention (x right, y down, z along the optical axis). A
//! camera's rotation `R` maps ego-frame vectors into its camera frame and
//! its translation `t` is the camera position in the ego frame, so an
//! ego point `p` lands in the camera at `R (p - t)`.

mod bev;
mod directions;
mod rig;

pub use bev::{BevGeometry, BevLayout, ChannelKind};
pub use directions::{cosine, pairwise_bias, DirectionField, DirectionOptions, PairwiseBias};
pub use rig::{Camera, CameraRig};

pub use nalgebra::{Matrix3, Vector3};

/// Camera rotation for a camera at yaw `yaw` (radians, counter-clockwise
/// from the ego x axis) looking horizontally.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    // Rows are the camera axes (right, down, forward) expressed in ego.
    Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0)
}

/// Rotation about the ego z axis.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_rotation_is_proper() {
        for deg in [0.0f64, 60.0, 137.0, -90.0] {
            let r = yaw_rotation(deg.to_radians());
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
        // Forward camera: optical axis is ego +x.
        let r = yaw_rotation(0.0);
        let axis = r.transpose() * Vector3::new(0.0, 0.0, 1.0);
        assert!((axis - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }
}
