//! Rays, stratified sampling and the emission-absorption quadrature.

mod camera;
mod image;

pub use camera::{cross, dot, norm, normalize, sub, Camera, Intrinsics, Vec3};
pub use image::Image;

use crate::error::{Error, Result};
use crate::model::{encode_batch, network_forward, MaterializedNet, ModelConfig, NetVars};
use crate::numerics::{CustomOp, Prng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self> {
        if (norm(dir) - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("ray direction {dir:?} is not unit length")));
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::contract(format!("ray needs 0 < near < far, got [{near}, {far}]")));
        }
        Ok(Self { origin, dir, near, far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [self.origin[0] + t * self.dir[0], self.origin[1] + t * self.dir[1], self.origin[2] + t * self.dir[2]]
    }
}

/// Ray through the centre of pixel `(i, j)`.
pub fn pixel_ray(camera: &Camera, i: usize, j: usize, near: f64, far: f64) -> Result<Ray> {
    let d = camera.direction(i as f64 + 0.5, j as f64 + 0.5);
    Ray::new(camera.position, d, near, far)
}

/// One depth per equal-width bin of `[near, far)`, increasing. Without a random
/// source every depth sits at its bin midpoint.
pub fn stratified_sample(ray: &Ray, n: usize, prng: Option<&mut Prng>) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::contract("at least one sample per ray is required"));
    }
    let span = ray.far - ray.near;
    let width = span / n as f64;
    let mut t = Vec::with_capacity(n);
    match prng {
        Some(prng) => {
            for k in 0..n {
                let lo = ray.near + k as f64 * width;
                let hi = if k + 1 == n { ray.far } else { ray.near + (k + 1) as f64 * width };
                let v = lo + prng.uniform() * width;
                // Rounding can land exactly on the upper edge; the bin is half-open.
                t.push(if v >= hi { lo } else { v });
            }
        }
        None => t.extend((0..n).map(|k| ray.near + (k as f64 + 0.5) * width)),
    }
    Ok(t)
}

/// `δ_i = t_{i+1} − t_i`, with the last interval running to `far`.
pub fn deltas(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = t.last() {
        d.push(far - last);
    }
    d
}

/// Depths, intervals and field values along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<T>,
    pub rgb: Vec<[T; 3]>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn new(t: Vec<f64>, delta: Vec<f64>, sigma: Vec<T>, rgb: Vec<[T; 3]>) -> Result<Self> {
        let n = t.len();
        if n == 0 || delta.len() != n || sigma.len() != n || rgb.len() != n {
            return Err(Error::contract("sample batch fields must be non-empty and equally long"));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("sample depths must be strictly increasing"));
        }
        if delta.iter().any(|&d| d <= 0.0) {
            return Err(Error::contract("sample intervals must be positive"));
        }
        Ok(Self { t, delta, sigma, rgb })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: [T; 3],
    pub weights: Vec<T>,
    /// Transmittance past the last sample, `T_{N+1}`.
    pub transmittance: T,
    /// Expected depth `Σ w_i t_i`.
    pub depth: T,
}

/// Front-to-back compositing of one ray. `rgb` is `3n` interleaved values and
/// `delta` has `n` entries. Writes the weights and returns `(color, T_{N+1})`.
fn composite_kernel<T: Scalar>(
    sigma: &[T],
    rgb: &[T],
    delta: &[T],
    white_background: bool,
    weights: &mut [T],
) -> ([T; 3], T) {
    let mut optical = T::zero();
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    for i in 0..sigma.len() {
        let a = sigma[i] * delta[i];
        let w = trans * (T::one() - (-a).exp());
        weights[i] = w;
        for ch in 0..3 {
            color[ch] += w * rgb[3 * i + ch];
        }
        optical += a;
        trans = (-optical).exp();
    }
    if white_background {
        for c in &mut color {
            *c += trans;
        }
    }
    (color, trans)
}

pub fn composite<T: Scalar>(batch: &SampleBatch<T>, white_background: bool) -> Composite<T> {
    let n = batch.t.len();
    let rgb: Vec<T> = batch.rgb.iter().flatten().copied().collect();
    let delta: Vec<T> = batch.delta.iter().map(|&d| T::lit(d)).collect();
    let mut weights = vec![T::zero(); n];
    let (color, transmittance) = composite_kernel(&batch.sigma, &rgb, &delta, white_background, &mut weights);
    let depth = weights.iter().zip(&batch.t).map(|(&w, &t)| w * T::lit(t)).sum();
    Composite { color, weights, transmittance, depth }
}

/// Compositing of `rays × samples` field values as a tape operation.
///
/// Inputs are σ (`rays·n × 1`) and colour (`rays·n × 3`), ray-major; the output
/// is `rays × 3`.
struct VolumeRender<T> {
    samples: usize,
    delta: Vec<T>,
    white_background: bool,
}

impl<T: Scalar> VolumeRender<T> {
    fn forward(&self, sigma: &Tensor<T>, rgb: &Tensor<T>) -> Tensor<T> {
        let n = self.samples;
        let rays = sigma.numel() / n;
        let mut out = Vec::with_capacity(3 * rays);
        let mut w = vec![T::zero(); n];
        for r in 0..rays {
            let (c, _) = composite_kernel(
                &sigma.data()[r * n..(r + 1) * n],
                &rgb.data()[3 * r * n..3 * (r + 1) * n],
                &self.delta[r * n..(r + 1) * n],
                self.white_background,
                &mut w,
            );
            out.extend_from_slice(&c);
        }
        Tensor::from_vec(&[rays, 3], out).expect("render output")
    }
}

impl<T: Scalar> CustomOp<T> for VolumeRender<T> {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    // With a_k = σ_k δ_k: ∂C/∂c_k = w_k and
    // ∂C/∂a_k = T_{k+1} c_k − Σ_{i>k} w_i c_i − bg · T_{N+1}.
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (sigma, rgb) = (inputs[0], inputs[1]);
        let n = self.samples;
        let rays = sigma.numel() / n;
        let mut d_sigma = vec![T::zero(); rays * n];
        let mut d_rgb = vec![T::zero(); rays * n * 3];
        let mut w = vec![T::zero(); n];
        for r in 0..rays {
            let s = &sigma.data()[r * n..(r + 1) * n];
            let c = &rgb.data()[3 * r * n..3 * (r + 1) * n];
            let dl = &self.delta[r * n..(r + 1) * n];
            let (_, t_end) = composite_kernel(s, c, dl, self.white_background, &mut w);
            let go = &g.data()[3 * r..3 * r + 3];
            let bg = if self.white_background { t_end } else { T::zero() };
            // Suffix Σ_{i>k} g·w_i c_i, accumulated back to front.
            let mut tail = T::zero();
            let mut optical = T::zero();
            let mut prefix = Vec::with_capacity(n);
            for k in 0..n {
                optical += s[k] * dl[k];
                prefix.push((-optical).exp());
            }
            for k in (0..n).rev() {
                let gc = go[0] * c[3 * k] + go[1] * c[3 * k + 1] + go[2] * c[3 * k + 2];
                let gbg = (go[0] + go[1] + go[2]) * bg;
                let da = prefix[k] * gc - tail - gbg;
                d_sigma[r * n + k] = da * dl[k];
                for ch in 0..3 {
                    d_rgb[3 * (r * n + k) + ch] = w[k] * go[ch];
                }
                tail += w[k] * gc;
            }
        }
        vec![
            Some(Tensor::from_vec(sigma.shape(), d_sigma).expect("sigma grad")),
            Some(Tensor::from_vec(rgb.shape(), d_rgb).expect("rgb grad")),
        ]
    }
}

/// Composites per-sample field values already on the tape into `rays × 3` colours.
pub fn composite_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    sigma: Var,
    rgb: Var,
    depths: &[Vec<f64>],
    rays: &[Ray],
    white_background: bool,
) -> Result<Var> {
    let samples = depths.first().map_or(0, Vec::len);
    if samples == 0 || depths.len() != rays.len() || depths.iter().any(|d| d.len() != samples) {
        return Err(Error::contract("every ray needs the same non-zero sample count"));
    }
    let total = rays.len() * samples;
    if tape.value(sigma).shape() != [total, 1] || tape.value(rgb).shape() != [total, 3] {
        return Err(Error::Shape {
            op: "volume_render",
            lhs: tape.value(sigma).shape().to_vec(),
            rhs: tape.value(rgb).shape().to_vec(),
        });
    }
    let mut delta = Vec::with_capacity(total);
    for (t, ray) in depths.iter().zip(rays) {
        delta.extend(deltas(t, ray.far).into_iter().map(T::lit));
    }
    let op = VolumeRender { samples, delta, white_background };
    let out = op.forward(tape.value(sigma), tape.value(rgb));
    Ok(tape.custom(Box::new(op), &[sigma, rgb], out))
}

/// Sample positions and repeated directions for a set of rays, ray-major.
pub fn sample_points(rays: &[Ray], depths: &[Vec<f64>]) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for (ray, ts) in rays.iter().zip(depths) {
        for &t in ts {
            points.push(ray.at(t));
            dirs.push(ray.dir);
        }
    }
    (points, dirs)
}

/// Differentiable render of a batch of rays through network handles on the tape.
pub fn render_rays<T: Scalar>(
    tape: &mut Tape<T>,
    net: &NetVars,
    config: &ModelConfig,
    rays: &[Ray],
    depths: &[Vec<f64>],
    white_background: bool,
) -> Result<Var> {
    if rays.is_empty() {
        return Err(Error::contract("no rays to render"));
    }
    let (points, dirs) = sample_points(rays, depths);
    let px = tape.constant(encode_batch(&points, config.pos_degrees));
    let pd = tape.constant(encode_batch(&dirs, config.dir_degrees));
    let field = network_forward(tape, net, config, px, pd)?;
    composite_on_tape(tape, field.sigma, field.rgb, depths, rays, white_background)
}

/// A queryable radiance field: density and colour for batches of points.
pub trait RadianceField<T: Scalar> {
    /// Returns σ and interleaved RGB for each `(point, direction)` pair.
    fn query_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<T>, Vec<T>)>;
}

impl<T: Scalar> RadianceField<T> for MaterializedNet<T> {
    fn query_batch(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<T>, Vec<T>)> {
        let (s, c) = self.query(points, dirs)?;
        Ok((s.into_data(), c.into_data()))
    }
}

/// Renders rays with fixed depths and returns one RGB triple per ray.
pub fn render_with_depths<T: Scalar, F: RadianceField<T> + ?Sized>(
    field: &F,
    rays: &[Ray],
    depths: &[Vec<f64>],
    white_background: bool,
) -> Result<Vec<[T; 3]>> {
    let (points, dirs) = sample_points(rays, depths);
    let (sigma, rgb) = field.query_batch(&points, &dirs)?;
    let mut out = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for (ray, t) in rays.iter().zip(depths) {
        let n = t.len();
        let delta: Vec<T> = deltas(t, ray.far).into_iter().map(T::lit).collect();
        let mut w = vec![T::zero(); n];
        let (c, _) = composite_kernel(
            &sigma[offset..offset + n],
            &rgb[3 * offset..3 * (offset + n)],
            &delta,
            white_background,
            &mut w,
        );
        out.push(c);
        offset += n;
    }
    Ok(out)
}

/// Settings shared by every image render of a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub white_background: bool,
    /// Rays evaluated per field query.
    pub chunk: usize,
}

/// Renders a full image, rays through pixel centres in row-major order. All
/// depths are drawn before evaluation, so the chunk size never changes the result.
pub fn render_image<T: Scalar, F: RadianceField<T> + ?Sized>(
    field: &F,
    camera: &Camera,
    settings: &RenderSettings,
    mut prng: Option<&mut Prng>,
) -> Result<Image> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut rays = Vec::with_capacity(w * h);
    let mut depths = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let ray = pixel_ray(camera, i, j, settings.near, settings.far)?;
            depths.push(stratified_sample(&ray, settings.samples, prng.as_deref_mut())?);
            rays.push(ray);
        }
    }
    let chunk = settings.chunk.max(1);
    let mut data = Vec::with_capacity(3 * w * h);
    for (r, d) in rays.chunks(chunk).zip(depths.chunks(chunk)) {
        for c in render_with_depths(field, r, d, settings.white_background)? {
            data.extend(c.iter().map(|v| v.to_f64_lossy()));
        }
    }
    Image::new(w, h, data)
}
