//! Distilling earlier scenes from a frozen teacher: occupancy grids over the
//! teacher's density, surface-restricted field matching, rendered-pixel matching
//! and their uncertainty-weighted combination.

mod grid;

pub use grid::{
    extract_occupancy, lattice_point, sample_box_points, sample_surface_points, Aabb, DensityField, GridSpec,
    OccupancyGrid,
};

use crate::error::{Error, Result};
use crate::model::{encode_batch, network_forward, FactorizedModel, MaterializedNet, ModelConfig, NetVars};
use serde::{Deserialize, Serialize};

use crate::numerics::{CustomOp, Scalar, Tape, Tensor, Var};
use crate::rendering::{render_rays, render_with_depths, Ray, Vec3};

/// Frozen copy of the model from the end of the previous stage, with every
/// scene's network pre-generated for fast queries.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot<T> {
    model: FactorizedModel<T>,
    nets: Vec<MaterializedNet<T>>,
}

impl<T: Scalar> TeacherSnapshot<T> {
    pub fn new(model: &FactorizedModel<T>) -> Result<Self> {
        let nets = model.scenes().iter().map(|s| model.materialize(&s.id)).collect::<Result<_>>()?;
        Ok(Self { model: model.clone(), nets })
    }

    pub fn model(&self) -> &FactorizedModel<T> {
        &self.model
    }

    pub fn net(&self, scene_id: &str) -> Result<&MaterializedNet<T>> {
        let i = self
            .model
            .scene_index(scene_id)
            .map_err(|_| Error::contract(format!("scene `{scene_id}` is not known to the teacher")))?;
        Ok(&self.nets[i])
    }
}

/// How field distillation measures a per-point difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldNorm {
    /// `‖Δc‖² + α·Δσ²`.
    #[default]
    Squared,
    /// `‖Δc‖ + α·|Δσ|`, with a zero subgradient at zero difference.
    Plain,
}

/// Euclidean norm of each row of an `n × k` matrix, as an `n × 1` column.
struct RowNorm;

impl<T: Scalar> CustomOp<T> for RowNorm {
    fn name(&self) -> &'static str {
        "row_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let k = x.cols();
        let mut d = vec![T::zero(); x.numel()];
        for (r, &norm) in output.data().iter().enumerate() {
            if norm > T::zero() {
                let scale = g.data()[r] / norm;
                for c in 0..k {
                    d[r * k + c] = scale * x.data()[r * k + c];
                }
            }
        }
        vec![Some(Tensor::from_vec(x.shape(), d).expect("gradient has the input shape"))]
    }
}

fn row_norm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let v = tape.value(x);
    if v.shape().len() != 2 {
        return Err(Error::Shape { op: "row_norm", lhs: v.shape().to_vec(), rhs: vec![] });
    }
    let k = v.cols();
    let norms = v.data().chunks(k).map(|row| row.iter().fold(T::zero(), |a, &e| a + e * e).sqrt()).collect();
    let out = Tensor::from_vec(&[v.rows(), 1], norms)?;
    Ok(tape.custom(Box::new(RowNorm), &[x], out))
}

/// Field distillation from student outputs already on the tape and detached
/// teacher outputs: mean over points of the colour difference plus α times the
/// density difference, measured by `norm`.
pub fn field_distill_from_outputs<T: Scalar>(
    tape: &mut Tape<T>,
    sigma: Var,
    rgb: Var,
    teacher_sigma: &Tensor<T>,
    teacher_rgb: &Tensor<T>,
    alpha: f64,
    norm: FieldNorm,
) -> Result<Var> {
    let n = teacher_sigma.numel();
    let ts = tape.constant(teacher_sigma.clone());
    let tc = tape.constant(teacher_rgb.clone());
    let dc = tape.sub(rgb, tc)?;
    let ds = tape.sub(sigma, ts)?;
    let (dc, ds) = match norm {
        FieldNorm::Squared => (tape.square(dc), tape.square(ds)),
        FieldNorm::Plain => (row_norm(tape, dc)?, row_norm(tape, ds)?),
    };
    let dc = tape.sum(dc);
    let ds = tape.sum(ds);
    let ds = tape.scale(ds, T::lit(alpha));
    let total = tape.add(dc, ds)?;
    Ok(tape.scale(total, T::one() / T::lit(n as f64)))
}

/// Field distillation at the given points and unit directions.
#[allow(clippy::too_many_arguments)]
pub fn loss_field_distill<T: Scalar>(
    tape: &mut Tape<T>,
    student: &NetVars,
    config: &ModelConfig,
    teacher: &MaterializedNet<T>,
    points: &[Vec3],
    dirs: &[Vec3],
    alpha: f64,
    norm: FieldNorm,
) -> Result<Var> {
    if points.is_empty() || points.len() != dirs.len() {
        return Err(Error::contract("field distillation needs paired, non-empty points and directions"));
    }
    let (ts, tc) = teacher.query(points, dirs)?;
    let px = tape.constant(encode_batch(points, config.pos_degrees));
    let pd = tape.constant(encode_batch(dirs, config.dir_degrees));
    let out = network_forward(tape, student, config, px, pd)?;
    field_distill_from_outputs(tape, out.sigma, out.rgb, &ts, &tc, alpha, norm)
}

/// Mean squared error of two pixel batches over every channel; `target` is detached.
pub fn pixel_mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// Pixel distillation: student and teacher render the same rays at the same depths.
pub fn loss_pixel_distill<T: Scalar>(
    tape: &mut Tape<T>,
    student: &NetVars,
    config: &ModelConfig,
    teacher: &MaterializedNet<T>,
    rays: &[Ray],
    depths: &[Vec<f64>],
    white_background: bool,
) -> Result<Var> {
    let target: Vec<T> = render_with_depths(teacher, rays, depths, white_background)?.into_iter().flatten().collect();
    let target = Tensor::from_vec(&[rays.len(), 3], target)?;
    let pred = render_rays(tape, student, config, rays, depths, white_background)?;
    pixel_mse(tape, pred, target)
}

/// `β₁·L_cσ + β₂·L_C + ln β₁ + ln β₂` with `β = exp(log_beta)`. A missing term
/// drops together with its log-weight.
pub fn uncertain_combine<T: Scalar>(
    tape: &mut Tape<T>,
    field: Option<Var>,
    pixel: Option<Var>,
    log_beta: [Var; 2],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (loss, lb) in [(field, log_beta[0]), (pixel, log_beta[1])] {
        let Some(loss) = loss else { continue };
        let beta = tape.exp(lb);
        let weighted = tape.mul(beta, loss)?;
        let term = tape.add(weighted, lb)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("uncertain combination needs at least one loss term"))
}

/// Plain-number form of [`uncertain_combine`].
pub fn uncertain_combine_value(field: f64, pixel: f64, beta1: f64, beta2: f64) -> Result<f64> {
    if !(beta1 > 0.0 && beta2 > 0.0) {
        return Err(Error::contract("uncertainty weights must be positive"));
    }
    Ok(beta1 * field + beta2 * pixel + (beta1 * beta2).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_set_field_loss() {
        let mut tape = Tape::<f64>::new();
        let s = tape.param(Tensor::from_vec(&[1, 1], vec![1.2]).unwrap());
        let c = tape.param(Tensor::from_vec(&[1, 3], vec![0.6, 0.5, 0.5]).unwrap());
        let ts = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let tc = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let l = field_distill_from_outputs(&mut tape, s, c, &ts, &tc, 3.0, FieldNorm::Squared).unwrap();
        assert!((tape.value(l).item() - 0.13).abs() < 1e-12);
    }

    #[test]
    fn plain_norm_value_and_zero_subgradient() {
        let mut tape = Tape::<f64>::new();
        let s = tape.param(Tensor::from_vec(&[2, 1], vec![1.2, 0.0]).unwrap());
        let c = tape.param(Tensor::from_vec(&[2, 3], vec![0.8, 0.9, 0.5, 0.1, 0.2, 0.3]).unwrap());
        let ts = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let tc = Tensor::from_vec(&[2, 3], vec![0.5, 0.5, 0.5, 0.1, 0.2, 0.3]).unwrap();
        let l = field_distill_from_outputs(&mut tape, s, c, &ts, &tc, 3.0, FieldNorm::Plain).unwrap();
        // Point 0: ‖(0.3, 0.4, 0)‖ + 3·0.2 = 1.1; point 1 matches exactly.
        assert!((tape.value(l).item() - 0.55).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        let gs = g.get(s).unwrap();
        let gc = g.get(c).unwrap();
        assert_eq!(gs.data()[1], 0.0);
        assert_eq!(&gc.data()[3..], &[0.0; 3]);
        assert!((gc.data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn combine_values() {
        assert_eq!(uncertain_combine_value(1.0, 1.0, 1.0, 1.0).unwrap(), 2.0);
        let v = uncertain_combine_value(0.0, 0.0, 0.045, 0.06).unwrap();
        assert!((v - 0.0027f64.ln()).abs() < 1e-12);
        assert!((v + 5.9145).abs() < 1e-4);
        assert!(uncertain_combine_value(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn combine_beta_gradient() {
        let (lf, lp, b1, b2) = (0.7, 0.2, 0.045, 0.06);
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::scalar(lf));
        let p = tape.constant(Tensor::scalar(lp));
        let l1 = tape.param(Tensor::scalar(f64::ln(b1)));
        let l2 = tape.param(Tensor::scalar(f64::ln(b2)));
        let out = uncertain_combine(&mut tape, Some(f), Some(p), [l1, l2]).unwrap();
        let v = tape.value(out).item();
        assert!((v - uncertain_combine_value(lf, lp, b1, b2).unwrap()).abs() < 1e-12);
        let g = tape.backward(out).unwrap();
        // d/dβ₁ = L + 1/β₁, and d/d ln β₁ = β₁ · d/dβ₁.
        let d_beta1 = g.get(l1).unwrap().item() / b1;
        let h = 1e-7;
        let fd = (uncertain_combine_value(lf, lp, b1 + h, b2).unwrap()
            - uncertain_combine_value(lf, lp, b1 - h, b2).unwrap())
            / (2.0 * h);
        assert!((d_beta1 - (lf + 1.0 / b1)).abs() / d_beta1.abs() < 1e-12);
        assert!((d_beta1 - fd).abs() / fd.abs() < 1e-6);
    }

    #[test]
    fn constant_offset_pixel_mse() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.param(Tensor::full(&[4, 3], 0.75));
        let l = pixel_mse(&mut tape, pred, Tensor::full(&[4, 3], 0.25)).unwrap();
        assert_eq!(tape.value(l).item(), 0.25);
    }
}
