use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole camera: `+z` forward, `+x` right, `+y` down in camera space.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub world_to_cam: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

impl Camera {
    /// Camera at `eye` looking at `target`, image-up roughly along `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut w = r.to_homogeneous();
        w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            world_to_cam: w,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_cam.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err("need 0 < near < far".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be nonzero".into());
        }
        Ok(())
    }

    pub fn to_record(&self, name: &str, split: &str) -> CameraRecord {
        let mut w = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                w[r * 4 + c] = self.world_to_cam[(r, c)];
            }
        }
        CameraRecord {
            name: Some(name.to_string()),
            split: Some(split.to_string()),
            world_to_cam: w.to_vec(),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: Some(self.near),
            far: Some(self.far),
        }
    }

    pub fn from_record(r: &CameraRecord) -> Result<Self, String> {
        if r.world_to_cam.len() != 16 {
            return Err(format!("camera matrix has {} entries, expected 16", r.world_to_cam.len()));
        }
        let cam = Self {
            world_to_cam: Matrix4::from_row_slice(&r.world_to_cam),
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            near: r.near.unwrap_or(DEFAULT_NEAR),
            far: r.far.unwrap_or(DEFAULT_FAR),
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// On-disk camera entry. `W` is the row-major world-to-camera matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `"train"` or `"test"`; missing means train.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(rename = "W")]
    pub world_to_cam: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_geometry() {
        let eye = Vector3::new(0.0, 1.0, 3.0);
        let cam = Camera::look_at(eye, Vector3::new(0.0, 1.0, 0.0), Vector3::y(), 400.0, 64, 48);
        assert!((cam.center() - eye).norm() < 1e-12);
        let p = cam.to_camera(&Vector3::new(0.0, 1.0, 0.0));
        assert!((p - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        // world up projects to image up (negative camera y)
        assert!(cam.to_camera(&Vector3::new(0.0, 2.0, 0.0)).y < 0.0);
        let r = cam.rotation();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let back = Camera::from_record(&cam.to_record("c0", "train")).unwrap();
        assert_eq!(back, cam);
    }
}
