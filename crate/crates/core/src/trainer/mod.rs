//! Continual learning: one stage adds one scene, warms it up on its own images,
//! then trains it jointly with distillation of every earlier scene from a frozen
//! copy of the model.

mod adam;
mod config;
mod report;

pub use adam::{adam_step, exponential_decay, AdamHyper, AdamState};
pub use config::{Ablation, TrainConfig};
pub use report::{LossPoint, SceneMetrics, StageReport};

use std::collections::BTreeMap;
use std::time::Instant;

use crate::distillation::{
    extract_occupancy, loss_field_distill, loss_pixel_distill, sample_box_points, sample_surface_points,
    uncertain_combine, OccupancyGrid, TeacherSnapshot,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Binding, FactorizedModel, ParamGroup, ParamId, SceneSetup};
use crate::numerics::{Prng, Scalar, Tape, Tensor, Var};
use crate::rendering::{pixel_ray, render_image, render_rays, stratified_sample, Camera, Ray, RenderSettings, Vec3};
use crate::scenes::{SceneDataset, View};

/// Posed training images of the scene being learned. This is the only image
/// source a stage ever reads.
pub trait ViewSource {
    fn view_count(&self) -> usize;
    fn camera(&self, view: usize) -> &Camera;
    fn pixel(&self, view: usize, i: usize, j: usize) -> [f64; 3];
    fn near(&self) -> f64;
    fn far(&self) -> f64;
    fn white_background(&self) -> bool;
}

/// The training split.
impl ViewSource for SceneDataset {
    fn view_count(&self) -> usize {
        self.train.len()
    }

    fn camera(&self, view: usize) -> &Camera {
        &self.train[view].camera
    }

    fn pixel(&self, view: usize, i: usize, j: usize) -> [f64; 3] {
        self.train[view].image.pixel(i, j)
    }

    fn near(&self) -> f64 {
        self.near
    }

    fn far(&self) -> f64 {
        self.far
    }

    fn white_background(&self) -> bool {
        self.white_background
    }
}

/// Held-out views per scene, used only for reporting.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    scenes: BTreeMap<String, Vec<View>>,
}

impl EvalSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scene_id: &str, views: Vec<View>) {
        self.scenes.insert(scene_id.to_string(), views);
    }

    pub fn get(&self, scene_id: &str) -> Option<&[View]> {
        self.scenes.get(scene_id).map(Vec::as_slice)
    }
}

/// Mean PSNR and SSIM of a scene over views, rendered at bin midpoints.
pub fn evaluate_scene<T: Scalar>(
    model: &FactorizedModel<T>,
    scene_id: &str,
    views: &[View],
    samples: usize,
) -> Result<(f64, Option<f64>)> {
    if views.is_empty() {
        return Err(Error::contract(format!("no evaluation views for `{scene_id}`")));
    }
    let setup = &model.scene(scene_id)?.setup;
    let net = model.materialize(scene_id)?;
    let settings = RenderSettings {
        near: setup.near,
        far: setup.far,
        samples,
        white_background: setup.white_background,
        chunk: 1024,
    };
    let mut psnr = 0.0;
    let mut ssim = Some(0.0);
    for v in views {
        let img = render_image(&net, &v.camera, &settings, None)?;
        let m = metrics::evaluate(&img, &v.image)?;
        psnr += m.psnr;
        ssim = ssim.filter(|_| m.ssim.is_finite()).map(|s| s + m.ssim);
    }
    let n = views.len() as f64;
    Ok((psnr / n, ssim.map(|s| s / n)))
}

/// Mean over rays of the squared colour error summed over channels.
pub fn loss_new_scene<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
    let rays = target.rows();
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let d = tape.square(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, T::one() / T::lit(rays as f64)))
}

/// `Σ distill + γ · new`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, distill: &[Var], new_scene: Var, gamma: f64) -> Result<Var> {
    let mut total = tape.scale(new_scene, T::lit(gamma));
    for &d in distill {
        total = tape.add(d, total)?;
    }
    Ok(total)
}

/// Splits `total` into `parts` near-equal shares, remainders to the first parts.
pub fn split_budget(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Gradient of every parameter that received one.
pub type Gradients<T> = Vec<(ParamId, Tensor<T>)>;

/// Rays and points used to distill one previous scene in one step.
#[derive(Clone, Debug, Default)]
pub struct DistillBatch {
    pub rays: Vec<Ray>,
    pub depths: Vec<Vec<f64>>,
    /// `None` when the scene's occupancy grid is empty.
    pub points: Option<Vec<Vec3>>,
    pub dirs: Vec<Vec3>,
}

/// Draws pixel rays from the scene's stored frusta and field points from its
/// occupancy grid (or the whole box without surface restriction).
pub fn sample_distill_batch(
    setup: &SceneSetup,
    grid: Option<&OccupancyGrid>,
    rays: usize,
    points: usize,
    config: &TrainConfig,
    prng: &mut Prng,
) -> Result<DistillBatch> {
    let mut batch = DistillBatch::default();
    if !setup.frusta.is_empty() {
        for _ in 0..rays {
            let cam = &setup.frusta[prng.below(setup.frusta.len())];
            let (i, j) = (prng.below(cam.intrinsics.width), prng.below(cam.intrinsics.height));
            let ray = pixel_ray(cam, i, j, setup.near, setup.far)?;
            batch.depths.push(stratified_sample(&ray, config.samples_per_ray, Some(prng))?);
            batch.rays.push(ray);
        }
    }
    batch.points = if config.ablation.surface_restriction {
        grid.and_then(|g| sample_surface_points(g, points, prng))
    } else {
        Some(sample_box_points(&config.grid_bounds, points, prng))
    };
    if let Some(p) = &batch.points {
        batch.dirs = (0..p.len()).map(|_| prng.unit_vector()).collect();
    }
    Ok(batch)
}

/// Uncertainty-weighted distillation loss of one previous scene, or `None` when
/// no term applies.
pub fn scene_distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &mut Binding<'_>,
    model: &FactorizedModel<T>,
    teacher: &TeacherSnapshot<T>,
    scene: usize,
    batch: &DistillBatch,
    config: &TrainConfig,
) -> Result<Option<Var>> {
    let record = &model.scenes()[scene];
    let tnet = teacher.net(&record.id)?;
    let student = model.scene_net(tape, binding, scene)?;
    let ab = &config.ablation;
    let pixel = if ab.pixel_loss && !batch.rays.is_empty() {
        Some(loss_pixel_distill(
            tape,
            &student,
            model.config(),
            tnet,
            &batch.rays,
            &batch.depths,
            record.setup.white_background,
        )?)
    } else {
        None
    };
    let field = match (&batch.points, ab.field_loss) {
        (Some(p), true) if !p.is_empty() => Some(loss_field_distill(
            tape,
            &student,
            model.config(),
            tnet,
            p,
            &batch.dirs,
            config.alpha,
            config.field_norm,
        )?),
        _ => None,
    };
    if field.is_none() && pixel.is_none() {
        return Ok(None);
    }
    let log_beta = [binding.var(tape, model, ParamId::LogBeta(0)), binding.var(tape, model, ParamId::LogBeta(1))];
    uncertain_combine(tape, field, pixel, log_beta).map(Some)
}

fn trainable(ablation: &Ablation, new_scene: usize, joint: bool, id: ParamId) -> bool {
    match id {
        ParamId::LogBeta(_) => joint && ablation.learn_beta,
        ParamId::Coefficient { scene, .. } | ParamId::DirectSswm { scene, .. } => {
            scene == new_scene || !ablation.freeze_old_coefficients
        }
        _ => !ablation.freeze_shared,
    }
}

/// Step-by-step driver of one stage. [`train_stage`] wraps it with evaluation.
pub struct StageTrainer<T: Scalar> {
    config: TrainConfig,
    scene: usize,
    teacher: Option<TeacherSnapshot<T>>,
    grids: Vec<Option<OccupancyGrid>>,
    adam: BTreeMap<ParamId, AdamState<T>>,
    prng: Prng,
    step: usize,
    skipped_field_terms: usize,
    warned: Vec<bool>,
}

impl<T: Scalar> StageTrainer<T> {
    /// Snapshots the teacher, registers the new scene and extracts the
    /// occupancy grids of the previous scenes from the teacher.
    pub fn begin(
        model: &mut FactorizedModel<T>,
        data: &dyn ViewSource,
        scene_id: &str,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model.scene_index(scene_id).is_ok() {
            return Err(Error::DuplicateScene(scene_id.to_string()));
        }
        if data.view_count() == 0 {
            return Err(Error::contract("the new scene has no training views"));
        }
        let stage = model.scenes().len();
        let mut prng = Prng::new(config.seed).derive(stage as u64);
        let teacher = if stage > 0 && config.ablation.distill { Some(TeacherSnapshot::new(model)?) } else { None };
        let frusta = (0..data.view_count()).map(|v| data.camera(v).clone()).collect();
        let setup =
            SceneSetup { frusta, near: data.near(), far: data.far(), white_background: data.white_background() };
        model.add_scene(scene_id, setup, &mut prng.split())?;

        let mut grids = Vec::with_capacity(stage);
        for s in &model.scenes()[..stage] {
            let grid = match &teacher {
                Some(t) if config.ablation.field_loss && config.ablation.surface_restriction => {
                    let g = extract_occupancy(t.net(&s.id)?, config.grid_bounds, config.grid)?;
                    log::info!("scene `{}`: {} occupied cells", s.id, g.occupied_count());
                    Some(g)
                }
                _ => None,
            };
            grids.push(grid);
        }
        Ok(Self {
            config: config.clone(),
            scene: stage,
            teacher,
            grids,
            adam: BTreeMap::new(),
            prng,
            step: 0,
            skipped_field_terms: 0,
            warned: vec![false; stage],
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn teacher(&self) -> Option<&TeacherSnapshot<T>> {
        self.teacher.as_ref()
    }

    /// Occupancy grid of each previous scene, `None` when not extracted.
    pub fn grids(&self) -> &[Option<OccupancyGrid>] {
        &self.grids
    }

    pub fn skipped_field_terms(&self) -> usize {
        self.skipped_field_terms
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.config.warmup_steps
    }

    /// Runs one optimization step and returns the loss values.
    pub fn step(&mut self, model: &mut FactorizedModel<T>, data: &dyn ViewSource) -> Result<LossPoint> {
        let (loss, grads) = self.compute(model, data)?;
        self.apply(model, grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Loss and gradients of the next step without applying them.
    pub fn compute(&mut self, model: &FactorizedModel<T>, data: &dyn ViewSource) -> Result<(LossPoint, Gradients<T>)> {
        let cfg = &self.config.clone();
        let joint = !self.in_warmup() && self.teacher.is_some();
        let ablation = cfg.ablation;
        let scene = self.scene;
        let mut tape = Tape::new();
        let mut binding = Binding::new(move |id| trainable(&ablation, scene, joint, id));

        let mut rays = Vec::with_capacity(cfg.new_scene_rays);
        let mut depths = Vec::with_capacity(cfg.new_scene_rays);
        let mut target = Vec::with_capacity(3 * cfg.new_scene_rays);
        for _ in 0..cfg.new_scene_rays {
            let v = self.prng.below(data.view_count());
            let cam = data.camera(v);
            let (i, j) = (self.prng.below(cam.intrinsics.width), self.prng.below(cam.intrinsics.height));
            let ray = pixel_ray(cam, i, j, data.near(), data.far())?;
            depths.push(stratified_sample(&ray, cfg.samples_per_ray, Some(&mut self.prng))?);
            rays.push(ray);
            target.extend(data.pixel(v, i, j).map(T::lit));
        }
        let target = Tensor::from_vec(&[rays.len(), 3], target)?;
        let net = model.scene_net(&mut tape, &mut binding, scene)?;
        let pred = render_rays(&mut tape, &net, model.config(), &rays, &depths, data.white_background())?;
        let l_new = loss_new_scene(&mut tape, pred, target)?;

        let mut distill = Vec::new();
        if joint {
            let teacher = self.teacher.as_ref().expect("joint phase has a teacher");
            let ray_budget = split_budget(cfg.distill_rays, scene);
            let point_budget = split_budget(cfg.distill_points, scene);
            for s in 0..scene {
                let setup = &model.scenes()[s].setup;
                let batch = sample_distill_batch(
                    setup,
                    self.grids[s].as_ref(),
                    ray_budget[s],
                    point_budget[s],
                    cfg,
                    &mut self.prng,
                )?;
                if batch.points.is_none() && ablation.field_loss {
                    self.skipped_field_terms += 1;
                    if !self.warned[s] {
                        log::warn!("scene `{}` has no occupied cells; skipping its field term", model.scenes()[s].id);
                        self.warned[s] = true;
                    }
                }
                if let Some(l) = scene_distill_loss(&mut tape, &mut binding, model, teacher, s, &batch, cfg)? {
                    distill.push(l);
                }
            }
        }
        let total = if joint || self.teacher.is_none() && !self.in_warmup() {
            total_loss(&mut tape, &distill, l_new, cfg.gamma)?
        } else {
            l_new
        };
        let point = LossPoint {
            step: self.step,
            total: tape.value(total).item().to_f64_lossy(),
            new_scene: tape.value(l_new).item().to_f64_lossy(),
            distill: distill.iter().map(|&d| tape.value(d).item().to_f64_lossy()).sum(),
        };
        if !point.total.is_finite() {
            return Err(Error::NonFinite { path: "loss".into() });
        }
        let mut g = tape.backward(total)?;
        let grads = binding
            .entries()
            .filter(|&(id, _)| trainable(&ablation, scene, joint, id))
            .filter_map(|(id, v)| g.take(v).map(|t| (id, t)))
            .collect();
        Ok((point, grads))
    }

    /// Adam update of every parameter with a gradient. Nothing changes when any
    /// gradient is non-finite.
    pub fn apply(&mut self, model: &mut FactorizedModel<T>, grads: Gradients<T>) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite { path: model.param_path(*id) });
        }
        let cfg = &self.config;
        for (id, g) in grads {
            let lr = match id.group() {
                ParamGroup::Matrices => {
                    exponential_decay(cfg.lr_matrices.0, cfg.lr_matrices.1, self.step, cfg.total_steps)
                }
                ParamGroup::Generator => {
                    exponential_decay(cfg.lr_generator.0, cfg.lr_generator.1, self.step, cfg.total_steps)
                }
                ParamGroup::Uncertainty => cfg.lr_beta,
            };
            let path = model.param_path(id);
            let p = model.param_mut(id).ok_or_else(|| Error::contract(format!("missing parameter {path}")))?;
            let state = self.adam.entry(id).or_insert_with(|| AdamState::new(p.numel()));
            adam_step(&path, p, &g, state, lr, &cfg.adam)?;
        }
        Ok(())
    }
}

/// Runs a full stage: evaluation of the existing scenes, warm-up, joint
/// training, and evaluation of every scene afterwards. Only `data` supplies
/// images for training; `eval` is read for the report alone.
pub fn train_stage<T: Scalar>(
    model: &mut FactorizedModel<T>,
    data: &dyn ViewSource,
    scene_id: &str,
    config: &TrainConfig,
    eval: &EvalSet,
) -> Result<StageReport> {
    let started = Instant::now();
    let stage = model.scenes().len();
    let params_before = model.count_parameters().total();
    let mut before = BTreeMap::new();
    for s in model.scenes() {
        if let Some(views) = eval.get(&s.id) {
            before.insert(s.id.clone(), evaluate_scene(model, &s.id, views, config.eval_samples)?.0);
        }
    }

    let mut trainer = StageTrainer::begin(model, data, scene_id, config)?;
    let mut losses = Vec::new();
    while !trainer.is_done() {
        let step = trainer.step_index();
        let point = trainer.step(model, data)?;
        if step % config.log_every == 0 || step + 1 == config.total_steps {
            log::debug!(
                "step {step}: loss {:.6} (new {:.6}, distill {:.6})",
                point.total,
                point.new_scene,
                point.distill
            );
            losses.push(point);
        }
    }

    let mut scenes = Vec::with_capacity(model.scenes().len());
    for (idx, s) in model.scenes().iter().enumerate() {
        let (psnr_after, ssim_after) = match eval.get(&s.id) {
            Some(views) => {
                let (p, s) = evaluate_scene(model, &s.id, views, config.eval_samples)?;
                (Some(p), s)
            }
            None => {
                log::warn!("no test views for `{}`; skipped in the report", s.id);
                (None, None)
            }
        };
        scenes.push(SceneMetrics {
            scene_id: s.id.clone(),
            added_in_stage: idx,
            psnr_before: before.get(&s.id).copied(),
            psnr_after,
            ssim_after,
        });
    }
    let beta = model.beta();
    Ok(StageReport {
        stage,
        scene_id: scene_id.to_string(),
        steps: config.total_steps,
        scenes,
        losses,
        parameter_delta: model.count_parameters().total() - params_before,
        beta: [beta[0].to_f64_lossy(), beta[1].to_f64_lossy()],
        skipped_field_terms: trainer.skipped_field_terms(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
