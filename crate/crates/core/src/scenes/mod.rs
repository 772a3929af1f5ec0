//! Closed-form radiance fields, synthetic datasets rendered from them, and
//! reading/writing datasets in the common `transforms_*.json` layout.

mod dataset;

pub use dataset::{export, load_external, DatasetSpec, SceneDataset, View};

use crate::error::{Error, Result};
use crate::numerics::Prng;
use crate::rendering::{render_image, Camera, Image, Intrinsics, RadianceField, RenderSettings, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Constant density inside the ball.
    Sphere { center: Vec3, radius: f64, density: f64, rgb: [f64; 3] },
    /// Constant density inside the axis-aligned box.
    Cuboid { min: Vec3, max: Vec3, density: f64, rgb: [f64; 3] },
    /// Isotropic Gaussian density `amplitude · exp(−|x − c|² / 2s²)`.
    Blob { center: Vec3, scale: f64, amplitude: f64, rgb: [f64; 3] },
}

impl Primitive {
    pub fn density(&self, x: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius, density, .. } => {
                let d2: f64 = (0..3).map(|k| (x[k] - center[k]).powi(2)).sum();
                if d2 < radius * radius {
                    density
                } else {
                    0.0
                }
            }
            Primitive::Cuboid { min, max, density, .. } => {
                if (0..3).all(|k| x[k] >= min[k] && x[k] <= max[k]) {
                    density
                } else {
                    0.0
                }
            }
            Primitive::Blob { center, scale, amplitude, .. } => {
                let d2: f64 = (0..3).map(|k| (x[k] - center[k]).powi(2)).sum();
                amplitude * (-d2 / (2.0 * scale * scale)).exp()
            }
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match *self {
            Primitive::Sphere { rgb, .. } | Primitive::Cuboid { rgb, .. } | Primitive::Blob { rgb, .. } => rgb,
        }
    }
}

/// Density is the sum over primitives; colour is their density-weighted mean
/// and does not depend on the viewing direction.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AnalyticField {
    pub primitives: Vec<Primitive>,
}

impl AnalyticField {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        for p in &primitives {
            let ok = match *p {
                Primitive::Sphere { radius, density, .. } => radius > 0.0 && density >= 0.0,
                Primitive::Cuboid { min, max, density, .. } => (0..3).all(|k| max[k] > min[k]) && density >= 0.0,
                Primitive::Blob { scale, amplitude, .. } => scale > 0.0 && amplitude >= 0.0,
            };
            if !ok || p.rgb().iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::contract(format!("invalid primitive {p:?}")));
            }
        }
        Ok(Self { primitives })
    }

    pub fn density(&self, x: Vec3) -> f64 {
        self.primitives.iter().map(|p| p.density(x)).sum()
    }

    pub fn eval(&self, x: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for p in &self.primitives {
            let s = p.density(x);
            if s > 0.0 {
                sigma += s;
                let c = p.rgb();
                for k in 0..3 {
                    acc[k] += s * c[k];
                }
            }
        }
        if sigma > 0.0 {
            for a in &mut acc {
                *a /= sigma;
            }
        }
        (sigma, acc)
    }

    /// Red ball of radius 1 at the origin.
    pub fn sphere_red() -> Self {
        Self {
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius: 1.0, density: 5.0, rgb: [0.85, 0.15, 0.1] }],
        }
    }

    /// A green and a blue box; shares neither geometry nor colours with `sphere_red`.
    pub fn boxes_rgb() -> Self {
        Self {
            primitives: vec![
                Primitive::Cuboid {
                    min: [-1.1, -0.6, -0.9],
                    max: [-0.1, 0.6, 0.1],
                    density: 8.0,
                    rgb: [0.1, 0.75, 0.2],
                },
                Primitive::Cuboid {
                    min: [0.2, -0.5, -0.4],
                    max: [1.0, 0.5, 0.9],
                    density: 8.0,
                    rgb: [0.15, 0.25, 0.9],
                },
            ],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "sphere-red" => Some(Self::sphere_red()),
            "boxes-rgb" => Some(Self::boxes_rgb()),
            _ => None,
        }
    }
}

pub const BUILTIN_SCENES: [&str; 2] = ["sphere-red", "boxes-rgb"];

impl RadianceField<f64> for AnalyticField {
    fn query_batch(&self, points: &[Vec3], _dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut sigma = Vec::with_capacity(points.len());
        let mut rgb = Vec::with_capacity(3 * points.len());
        for &p in points {
            let (s, c) = self.eval(p);
            sigma.push(s);
            rgb.extend_from_slice(&c);
        }
        Ok((sigma, rgb))
    }
}

/// Ground-truth image: the same quadrature as the learned model, evaluated on the
/// analytic field at bin midpoints.
pub fn oracle_render(
    field: &AnalyticField,
    camera: &Camera,
    near: f64,
    far: f64,
    samples: usize,
    white_background: bool,
) -> Result<Image> {
    let settings = RenderSettings { near, far, samples, white_background, chunk: 4096 };
    render_image(field, camera, &settings, None)
}

/// Camera on the sphere of radius `radius` at the given azimuth and elevation,
/// looking at the origin with +z up.
pub fn orbit_camera(radius: f64, azimuth: f64, elevation: f64, intrinsics: Intrinsics) -> Result<Camera> {
    let eye =
        [radius * elevation.cos() * azimuth.cos(), radius * elevation.cos() * azimuth.sin(), radius * elevation.sin()];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], intrinsics)
}

/// Renders a dataset of views on the upper hemisphere. Azimuths are stratified
/// with random jitter; images are snapped to 8-bit levels so they survive a PNG
/// round trip unchanged.
pub fn make_dataset(name: &str, field: &AnalyticField, spec: &DatasetSpec, prng: &mut Prng) -> Result<SceneDataset> {
    spec.validate()?;
    let intr = Intrinsics { width: spec.image_size, height: spec.image_size, fov_x: spec.fov_x };
    let views = |count: usize, prng: &mut Prng| -> Result<Vec<View>> {
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let az = std::f64::consts::TAU * (k as f64 + prng.uniform()) / count as f64;
            let el = prng.uniform_in(spec.min_elevation, spec.max_elevation);
            let camera = orbit_camera(spec.radius, az, el, intr)?;
            let image = oracle_render(field, &camera, spec.near, spec.far, spec.oracle_samples, spec.white_background)?
                .quantized();
            out.push(View { camera, image });
        }
        Ok(out)
    };
    let train = views(spec.train_views, prng)?;
    let test = views(spec.test_views, prng)?;
    SceneDataset::new(name, train, test, spec.near, spec.far, spec.white_background)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_field_renders_background() {
        let cam = orbit_camera(4.0, 0.3, 0.4, Intrinsics { width: 4, height: 3, fov_x: 0.8 }).unwrap();
        let img = oracle_render(&AnalyticField::default(), &cam, 2.0, 6.0, 16, true).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        let img = oracle_render(&AnalyticField::default(), &cam, 2.0, 6.0, 16, false).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn colour_is_density_weighted() {
        let f = AnalyticField::new(vec![
            Primitive::Sphere { center: [0.0; 3], radius: 1.0, density: 1.0, rgb: [1.0, 0.0, 0.0] },
            Primitive::Sphere { center: [0.0; 3], radius: 1.0, density: 3.0, rgb: [0.0, 1.0, 0.0] },
        ])
        .unwrap();
        assert_eq!(f.eval([0.0; 3]), (4.0, [0.25, 0.75, 0.0]));
        assert_eq!(f.eval([2.0, 0.0, 0.0]), (0.0, [0.0; 3]));
    }

    #[test]
    fn invalid_primitive_rejected() {
        let bad = Primitive::Sphere { center: [0.0; 3], radius: -1.0, density: 1.0, rgb: [0.5; 3] };
        assert!(AnalyticField::new(vec![bad]).is_err());
    }

    #[test]
    fn builtins_resolve() {
        for name in BUILTIN_SCENES {
            assert!(AnalyticField::builtin(name).is_some());
        }
        assert!(AnalyticField::builtin("teapot").is_none());
    }
}
