//! Pinhole camera: world -> view -> clip -> NDC -> screen.
//!
//! Cameras look down their local -Z axis. Screen coordinates put the origin
//! at the top-left pixel corner with y growing downward; a world point on
//! the optical axis of a centered camera lands at (W/2, H/2).

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

/// Vertices with a homogeneous divisor below this are treated as clipped.
pub const NEAR_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Camera {
    /// World to camera transform.
    pub view: Matrix4<f64>,
    /// Camera to clip transform.
    pub proj: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Builds the projection from pinhole intrinsics (pixels).
    pub fn from_intrinsics(
        view: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        near: f64,
        far: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let w = width as f64;
        let h = height as f64;
        let proj = Matrix4::new(
            2.0 * fx / w,
            0.0,
            1.0 - 2.0 * cx / w,
            0.0,
            0.0,
            2.0 * fy / h,
            2.0 * cy / h - 1.0,
            0.0,
            0.0,
            0.0,
            -(far + near) / (far - near),
            -2.0 * far * near / (far - near),
            0.0,
            0.0,
            -1.0,
            0.0,
        );
        Self {
            view,
            proj,
            width,
            height,
        }
    }

    /// Centered-principal-point camera from a vertical focal length.
    pub fn centered(view: Matrix4<f64>, focal_px: f64, width: u32, height: u32) -> Self {
        Self::from_intrinsics(
            view,
            focal_px,
            focal_px,
            width as f64 / 2.0,
            height as f64 / 2.0,
            0.01,
            100.0,
            width,
            height,
        )
    }

    pub fn world_to_clip(&self) -> Matrix4<f64> {
        self.proj * self.view
    }

    pub fn fx(&self) -> f64 {
        self.proj[(0, 0)] * self.width as f64 / 2.0
    }

    pub fn fy(&self) -> f64 {
        self.proj[(1, 1)] * self.height as f64 / 2.0
    }

    pub fn cx(&self) -> f64 {
        (1.0 - self.proj[(0, 2)]) * self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        (self.proj[(1, 2)] + 1.0) * self.height as f64 / 2.0
    }

    /// Rotation part of the view matrix.
    pub fn view_rotation(&self) -> Matrix3<f64> {
        self.view.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        let r = self.view_rotation();
        let t = Vector3::new(self.view[(0, 3)], self.view[(1, 3)], self.view[(2, 3)]);
        -(r.transpose() * t)
    }

    /// Projects one world point; `None` when it is at or behind the camera.
    /// Returns (pixel x, pixel y, depth) with depth the homogeneous divisor
    /// (distance along the optical axis).
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let clip = self.world_to_clip() * Vector4::new(p.x, p.y, p.z, 1.0);
        let w = clip.w;
        if w <= NEAR_EPSILON {
            return None;
        }
        let ndc_x = clip.x / w;
        let ndc_y = clip.y / w;
        let px = (ndc_x + 1.0) * 0.5 * self.width as f64;
        let py = (1.0 - ndc_y) * 0.5 * self.height as f64;
        Some((px, py, w))
    }

    /// World-space ray through a pixel; returns (origin, unit direction).
    pub fn pixel_ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new(
            (px - self.cx()) / self.fx(),
            -(py - self.cy()) / self.fy(),
            -1.0,
        );
        let r = self.view_rotation();
        let dir = (r.transpose() * dir_cam).normalize();
        (self.center(), dir)
    }

    /// Camera-space position of a world point.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let v = self.view * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(v.x, v.y, v.z)
    }
}

/// Right-handed look-at view matrix (camera forward is -Z).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
    let f = (target - eye).normalize();
    let s = f.cross(&up).normalize();
    let u = s.cross(&f);
    Matrix4::new(
        s.x,
        s.y,
        s.z,
        -s.dot(&eye),
        u.x,
        u.y,
        u.z,
        -u.dot(&eye),
        -f.x,
        -f.y,
        -f.z,
        f.dot(&eye),
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Evenly spaced cameras on a tilted ring looking at `target`.
pub fn camera_ring(
    count: usize,
    radius: f64,
    height: f64,
    target: Vector3<f64>,
    focal_px: f64,
    width: u32,
    img_height: u32,
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let eye = target + Vector3::new(radius * angle.cos(), height, radius * angle.sin());
            let view = look_at(eye, target, Vector3::new(0.0, 1.0, 0.0));
            Camera::centered(view, focal_px, width, img_height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_camera() -> Camera {
        let view = look_at(
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        );
        Camera::centered(view, 64.0, 64, 64)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = test_camera();
        let (px, py, depth) = cam.project_point(&Vector3::zeros()).unwrap();
        assert_abs_diff_eq!(px, 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(py, 32.0, epsilon = 1e-9);
        assert_abs_diff_eq!(depth, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn lateral_motion_is_linear_at_fixed_depth() {
        let cam = test_camera();
        let (x0, _, _) = cam.project_point(&Vector3::new(0.0, 0.0, 0.0)).unwrap();
        let (x1, _, _) = cam.project_point(&Vector3::new(0.1, 0.0, 0.0)).unwrap();
        let (x2, _, _) = cam.project_point(&Vector3::new(0.2, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(x2 - x1, x1 - x0, epsilon = 1e-9);
        // Up in world is up in image (smaller y).
        let (_, y_up, _) = cam.project_point(&Vector3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(y_up < 32.0);
    }

    #[test]
    fn behind_camera_is_clipped() {
        let cam = test_camera();
        assert!(cam.project_point(&Vector3::new(0.0, 0.0, 10.0)).is_none());
    }

    #[test]
    fn pixel_ray_passes_through_projected_point() {
        let cam = test_camera();
        let p = Vector3::new(0.3, -0.2, 0.4);
        let (px, py, _) = cam.project_point(&p).unwrap();
        let (origin, dir) = cam.pixel_ray(px, py);
        let t = (p - origin).dot(&dir);
        let closest = origin + dir * t;
        assert!((closest - p).norm() < 1e-9);
    }

    #[test]
    fn intrinsics_roundtrip_through_projection_matrix() {
        let view = Matrix4::identity();
        let cam = Camera::from_intrinsics(view, 50.0, 55.0, 30.0, 34.0, 0.1, 50.0, 64, 72);
        assert_abs_diff_eq!(cam.fx(), 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.fy(), 55.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.cx(), 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.cy(), 34.0, epsilon = 1e-12);
    }

    #[test]
    fn ring_cameras_see_the_target() {
        for cam in camera_ring(8, 3.0, 1.0, Vector3::zeros(), 64.0, 64, 64) {
            let (px, py, depth) = cam.project_point(&Vector3::zeros()).unwrap();
            assert_abs_diff_eq!(px, 32.0, epsilon = 1e-6);
            assert_abs_diff_eq!(py, 32.0, epsilon = 1e-6);
            assert!(depth > 0.0);
        }
    }
}
