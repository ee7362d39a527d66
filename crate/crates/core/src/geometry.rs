//! Pinhole cameras, rigid poses, rays and frame-to-frame reprojection.
//!
//! Conventions: poses are camera-to-world, the camera looks along its local
//! `-z` axis with `+y` up, image rows grow downwards and pixel centres sit at
//! integer + 0.5. Depth everywhere in this crate is distance along the unit
//! ray direction, not the camera-space z coordinate.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Camera { width, height, fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera with the given horizontal field of view and a
    /// centred principal point.
    pub fn from_hfov(width: u32, height: u32, hfov_deg: f64) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::domain(format!("hfov {hfov_deg} outside (0, 180)")));
        }
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Camera::new(width, height, f, f, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("camera dimensions must be at least 1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::domain("principal point outside the image"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Un-normalized camera-space direction through continuous image
    /// coordinates `(x, y)`.
    pub fn back_project(&self, x: f64, y: f64) -> Vec3 {
        Vec3::new((x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0)
    }

    /// Continuous image coordinates of a camera-space point, or `None` when the
    /// point is not in front of the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        let z = -p_cam.z;
        if z <= 1e-9 {
            return None;
        }
        Some((self.fx * p_cam.x / z + self.cx, self.cy - self.fy * p_cam.y / z))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Pose { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.rotation.transpose() * self.rotation;
        if (gram - Mat3::identity()).abs().max() > 1e-6 {
            return Err(Error::domain("pose rotation is not orthonormal"));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::domain("pose rotation is not a proper rotation"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("pose translation is not finite"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with the camera up-vector kept in
    /// the plane spanned by the viewing direction and world `+y` (no roll).
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::domain("look_at: eye and target coincide"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&Vec3::y());
        if right.norm() < 1e-9 {
            return Err(Error::domain("look_at: viewing direction parallel to world up"));
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let rotation = Mat3::from_columns(&[right, up, -forward]);
        Pose::new(rotation, eye)
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::domain("pose matrix bottom row must be 0 0 0 1"));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Integer pixel index: `col` along the width, `row` along the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub col: u32,
    pub row: u32,
}

impl Pixel {
    pub fn new(col: u32, row: u32) -> Self {
        Pixel { col, row }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayBounds {
    pub near: f64,
    pub far: f64,
}

impl RayBounds {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        let b = RayBounds { near, far };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::domain(format!(
                "invalid ray bounds ({}, {}): need 0 < near < far",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// `r(t) = origin + t * direction` for `t` in `[t_near, t_far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, bounds: RayBounds) -> Result<Self> {
        bounds.validate()?;
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::domain("ray direction must be nonzero and finite"));
        }
        Ok(Ray { origin, direction: direction / n, t_near: bounds.near, t_far: bounds.far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn bounds(&self) -> RayBounds {
        RayBounds { near: self.t_near, far: self.t_far }
    }
}

pub fn ray_for_pixel(camera: &Camera, pose: &Pose, px: Pixel, bounds: RayBounds) -> Result<Ray> {
    if px.col >= camera.width || px.row >= camera.height {
        return Err(Error::domain(format!(
            "pixel ({}, {}) outside {}x{} image",
            px.col, px.row, camera.width, camera.height
        )));
    }
    let dir_cam = camera.back_project(px.col as f64 + 0.5, px.row as f64 + 0.5);
    Ray::new(pose.translation, pose.rotation * dir_cam, bounds)
}

/// Location of a reprojected point in the target image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    /// Continuous image coordinates; pixel `(c, r)` covers `[c, c+1) x [r, r+1)`.
    pub x: f64,
    pub y: f64,
    /// Distance from the target camera centre to the point.
    pub depth: f64,
}

impl Reprojection {
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.x.floor() as u32, self.y.floor() as u32)
    }
}

/// Lift `px` at ray distance `depth` through `pose_src` and project it into
/// the camera at `pose_tgt`. Occlusion is not checked.
pub fn reproject(
    px: Pixel,
    depth: f64,
    pose_src: &Pose,
    pose_tgt: &Pose,
    camera: &Camera,
) -> Result<Option<Reprojection>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::domain(format!("reprojection depth must be positive, got {depth}")));
    }
    if px.col >= camera.width || px.row >= camera.height {
        return Err(Error::domain("reprojection source pixel outside the image"));
    }
    let dir_cam = camera.back_project(px.col as f64 + 0.5, px.row as f64 + 0.5).normalize();
    let world = pose_src.translation + pose_src.rotation * dir_cam * depth;
    let p_tgt = pose_tgt.world_to_camera(&world);
    let Some((x, y)) = camera.project(&p_tgt) else {
        return Ok(None);
    };
    if !camera.contains(x, y) {
        return Ok(None);
    }
    Ok(Some(Reprojection { x, y, depth: p_tgt.norm() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> Camera {
        Camera::from_hfov(64, 48, 90.0).unwrap()
    }

    fn bounds() -> RayBounds {
        RayBounds::new(0.1, 10.0).unwrap()
    }

    fn rotation(yaw: f64, pitch: f64) -> Mat3 {
        let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), yaw);
        let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), pitch);
        (ry * rx).into_inner()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let c = Camera::new(65, 49, 30.0, 30.0, 32.5, 24.5).unwrap();
        let pose = Pose::new(rotation(0.3, -0.2), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let ray = ray_for_pixel(&c, &pose, Pixel::new(32, 24), bounds()).unwrap();
        let axis = pose.rotation * Vec3::new(0.0, 0.0, -1.0);
        assert!((ray.direction - axis).norm() < 1e-12);
        assert_eq!(ray.origin, pose.translation);
    }

    #[test]
    fn left_edge_of_90_degree_camera_is_45_degrees_off_axis() {
        let c = cam();
        assert!((c.fx - 32.0).abs() < 1e-12);
        let raw = c.back_project(0.5, 24.5);
        assert!((raw.x - (-(c.cx - 0.5) / c.fx)).abs() < 1e-15);
        assert!((raw.x + 1.0).abs() < 0.02);
        let ray = ray_for_pixel(&c, &Pose::identity(), Pixel::new(0, 24), bounds()).unwrap();
        let angle = ray.direction.dot(&Vec3::new(0.0, 0.0, -1.0)).acos().to_degrees();
        assert!((angle - 45.0).abs() < 1.0, "angle {angle}");
    }

    #[test]
    fn out_of_bounds_pixel_is_a_domain_error() {
        let err = ray_for_pixel(&cam(), &Pose::identity(), Pixel::new(64, 0), bounds());
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn reproject_translated_target_shifts_by_baseline_over_depth() {
        let c = cam();
        let src = Pose::identity();
        let tgt = Pose::new(Mat3::identity(), Vec3::new(0.1, 0.0, 0.0)).unwrap();
        let px = Pixel::new(32, 24);
        // Pixel (32, 24) has centre (32.5, 24.5); the optical axis goes through
        // (32, 24) exactly, so use the continuous start coordinate.
        let start_dir = c.back_project(32.5, 24.5).normalize();
        let depth = 2.0 / start_dir.z.abs();
        let r = reproject(px, depth, &src, &tgt, &c).unwrap().unwrap();
        assert!((r.x - (32.5 - 0.1 * c.fx / 2.0)).abs() < 1e-9, "x = {}", r.x);
        assert!((r.y - 24.5).abs() < 1e-9);
    }

    #[test]
    fn point_behind_target_is_not_visible() {
        let c = cam();
        let src = Pose::identity();
        let tgt = Pose::new(rotation(std::f64::consts::PI, 0.0), Vec3::zeros()).unwrap();
        assert_eq!(reproject(Pixel::new(32, 24), 2.0, &src, &tgt, &c).unwrap(), None);
        assert!(reproject(Pixel::new(3, 3), 0.0, &src, &tgt, &c).is_err());
    }

    #[test]
    fn look_at_is_roll_free() {
        let p = Pose::look_at(Vec3::new(2.0, 1.0, 2.0), Vec3::zeros()).unwrap();
        let up = p.rotation.column(1);
        assert!(up.y > 0.0);
        // Camera x axis stays horizontal.
        assert!(p.rotation.column(0).y.abs() < 1e-12);
        let fwd = -p.rotation.column(2);
        assert!((fwd - (-Vec3::new(2.0, 1.0, 2.0)).normalize()).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn reproject_identity_round_trip(col in 0u32..64, row in 0u32..48, depth in 0.2f64..9.0,
                                         yaw in -3.0f64..3.0, pitch in -1.0f64..1.0) {
            let c = cam();
            let pose = Pose::new(rotation(yaw, pitch), Vec3::new(0.3, -0.2, 1.0)).unwrap();
            let r = reproject(Pixel::new(col, row), depth, &pose, &pose, &c).unwrap().unwrap();
            prop_assert!((r.x - (col as f64 + 0.5)).abs() <= 0.5);
            prop_assert!((r.y - (row as f64 + 0.5)).abs() <= 0.5);
            prop_assert_eq!(r.pixel(), Pixel::new(col, row));
            prop_assert!((r.depth - depth).abs() < 1e-9);
        }

        #[test]
        fn ray_direction_ignores_translation(col in 0u32..64, row in 0u32..48,
                                             tx in -5.0f64..5.0, ty in -5.0f64..5.0, yaw in -3.0f64..3.0) {
            let c = cam();
            let a = Pose::new(rotation(yaw, 0.1), Vec3::zeros()).unwrap();
            let b = Pose::new(rotation(yaw, 0.1), Vec3::new(tx, ty, 1.0)).unwrap();
            let ra = ray_for_pixel(&c, &a, Pixel::new(col, row), bounds()).unwrap();
            let rb = ray_for_pixel(&c, &b, Pixel::new(col, row), bounds()).unwrap();
            prop_assert_eq!(ra.direction, rb.direction);
            prop_assert!((ra.direction.norm() - 1.0).abs() < 1e-9);
        }
    }
}
