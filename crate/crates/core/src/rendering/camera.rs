use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Pinhole intrinsics with the principal point at the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
}

impl Intrinsics {
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_x).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }
}

/// Camera with a world-from-camera rigid pose. Camera space follows the usual
/// graphics convention: +x right, +y up, looking down −z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major rotation; its columns are the camera axes in world space.
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
    pub intrinsics: Intrinsics,
}

impl Camera {
    pub fn new(rotation: [[f64; 3]; 3], position: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let cam = Self { rotation, position, intrinsics };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with `up` as the approximate up vector.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let rotation =
            [[right[0], true_up[0], back[0]], [right[1], true_up[1], back[1]], [right[2], true_up[2], back[2]]];
        Self::new(rotation, eye, intrinsics)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(Error::contract("camera rotation is not orthonormal"));
                }
            }
        }
        let i = &self.intrinsics;
        if i.width == 0 || i.height == 0 {
            return Err(Error::contract("camera image size must be positive"));
        }
        if !(i.fov_x > 0.0 && i.fov_x < std::f64::consts::PI) {
            return Err(Error::contract("field of view must lie in (0, π)"));
        }
        Ok(())
    }

    /// 4×4 camera-to-world matrix, row-major.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.position;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4], intrinsics: Intrinsics) -> Result<Self> {
        let rotation = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
        Self::new(rotation, [m[0][3], m[1][3], m[2][3]], intrinsics)
    }

    /// Viewing direction (world space) of the optical axis.
    pub fn forward(&self) -> Vec3 {
        let r = &self.rotation;
        [-r[0][2], -r[1][2], -r[2][2]]
    }

    /// Unit world-space direction through image coordinates `(px, py)`, where
    /// pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
    pub fn direction(&self, px: f64, py: f64) -> Vec3 {
        let f = self.intrinsics.focal();
        let (cx, cy) = self.intrinsics.principal_point();
        let local = [(px - cx) / f, -(py - cy) / f, -1.0];
        let r = &self.rotation;
        normalize([
            r[0][0] * local[0] + r[0][1] * local[1] + r[0][2] * local[2],
            r[1][0] * local[0] + r[1][1] * local[1] + r[1][2] * local[2],
            r[2][0] * local[0] + r[2][1] * local[1] + r[2][2] * local[2],
        ])
    }

    pub fn pixel_count(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }
}
