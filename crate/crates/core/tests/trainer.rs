use std::cell::Cell;

use factorized_nerf::distillation::GridSpec;
use factorized_nerf::model::ParamId;
use factorized_nerf::rendering::Camera;
use factorized_nerf::scenes::{make_dataset, AnalyticField, DatasetSpec, SceneDataset};
use factorized_nerf::trainer::{
    adam_step, total_loss, train_stage, AdamHyper, AdamState, EvalSet, StageTrainer, TrainConfig, ViewSource,
};
use factorized_nerf::{Error, FactorizedModel, ModelConfig, Prng, Tape, Tensor};

#[test]
fn adam_minimizes_a_quadratic_bowl() {
    // f(x) = Σ cᵢ (xᵢ − tᵢ)², badly conditioned on purpose.
    let c = [1.0, 10.0, 100.0, 0.1];
    let t = [3.0, -1.0, 0.5, 2.0];
    let mut x = Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap();
    let mut state = AdamState::new(4);
    let hyper = AdamHyper::default();
    for step in 0..5000 {
        let g: Vec<f64> = (0..4).map(|i| 2.0 * c[i] * (x.data()[i] - t[i])).collect();
        let lr = factorized_nerf::trainer::exponential_decay(0.05, 1e-4, step, 5000);
        adam_step("x", &mut x, &Tensor::from_vec(&[4], g).unwrap(), &mut state, lr, &hyper).unwrap();
    }
    for (i, (v, want)) in x.data().iter().zip(t).enumerate() {
        assert!((v - want).abs() < 1e-6, "x{i} = {v}");
    }
    assert_eq!(state.t, 5000);
}

#[test]
fn adam_descends_a_one_dimensional_toy() {
    let mut x = Tensor::from_vec(&[1], vec![4.0f64]).unwrap();
    let mut state = AdamState::new(1);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let v = x.data()[0];
        let f = (v - 1.0).powi(2);
        assert!(f <= last + 1e-12);
        last = f;
        let g = Tensor::from_vec(&[1], vec![2.0 * (v - 1.0)]).unwrap();
        adam_step("x", &mut x, &g, &mut state, 0.01, &AdamHyper::default()).unwrap();
    }
    assert!(last < 4.0);
}

#[test]
fn total_loss_adds_distill_terms_to_weighted_new_loss() {
    let mut tape = Tape::<f64>::new();
    let new = tape.constant(Tensor::scalar(2.0));
    let d = [tape.constant(Tensor::scalar(0.5)), tape.constant(Tensor::scalar(0.25))];
    let t = total_loss(&mut tape, &d, new, 0.2).unwrap();
    assert!((tape.value(t).item() - 1.15).abs() < 1e-15);
    let t0 = total_loss(&mut tape, &d, new, 0.0).unwrap();
    assert_eq!(tape.value(t0).item(), 0.75);
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 3,
        width: 16,
        rank: 4,
        noise_dim: 4,
        pos_degrees: 3,
        dir_degrees: 1,
        skip_layer: 2,
        decoder_hidden: 16,
        generator_hidden: 8,
        use_coefficients: true,
        use_generator: true,
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        new_scene_rays: 16,
        distill_rays: 8,
        distill_points: 32,
        warmup_steps: 3,
        total_steps: 10,
        samples_per_ray: 8,
        eval_samples: 8,
        log_every: 1,
        grid: GridSpec { resolution: 8, subgrid: 2, tau: 0.0 },
        ..TrainConfig::desk()
    }
}

fn datasets() -> (SceneDataset, SceneDataset) {
    let spec =
        DatasetSpec { train_views: 2, test_views: 1, image_size: 8, oracle_samples: 32, ..DatasetSpec::default() };
    let mut prng = Prng::new(4);
    let a = make_dataset("a", &AnalyticField::sphere_red(), &spec, &mut prng).unwrap();
    let b = make_dataset("b", &AnalyticField::boxes_rgb(), &spec, &mut prng).unwrap();
    (a, b)
}

/// Forwards to a dataset and counts every pixel read.
struct Counting<'a> {
    inner: &'a SceneDataset,
    reads: Cell<usize>,
}

impl ViewSource for Counting<'_> {
    fn view_count(&self) -> usize {
        self.inner.view_count()
    }
    fn camera(&self, view: usize) -> &Camera {
        self.inner.camera(view)
    }
    fn pixel(&self, view: usize, i: usize, j: usize) -> [f64; 3] {
        self.reads.set(self.reads.get() + 1);
        self.inner.pixel(view, i, j)
    }
    fn near(&self) -> f64 {
        self.inner.near()
    }
    fn far(&self) -> f64 {
        self.inner.far()
    }
    fn white_background(&self) -> bool {
        self.inner.white_background()
    }
}

#[test]
fn a_stage_reads_only_the_new_scenes_images() {
    let (a, b) = datasets();
    let cfg = tiny_train();
    let mut model = FactorizedModel::<f64>::new(tiny_config(), &mut Prng::new(1)).unwrap();
    train_stage(&mut model, &a, "a", &cfg, &EvalSet::new()).unwrap();
    // Scene a's images are gone before the second stage starts.
    drop(a);
    let source = Counting { inner: &b, reads: Cell::new(0) };
    let mut stage = StageTrainer::begin(&mut model, &source, "b", &cfg).unwrap();
    let mut distilled = false;
    while !stage.is_done() {
        let warm = stage.in_warmup();
        let loss = stage.step(&mut model, &source).unwrap();
        assert_eq!(warm, loss.distill == 0.0, "distillation runs exactly outside warm-up");
        distilled |= loss.distill != 0.0;
    }
    assert!(distilled);
    assert_eq!(source.reads.get(), cfg.new_scene_rays * cfg.total_steps);
}

#[test]
fn warm_up_leaves_earlier_scenes_and_beta_alone() {
    let (a, b) = datasets();
    let cfg = tiny_train();
    let mut model = FactorizedModel::<f64>::new(tiny_config(), &mut Prng::new(2)).unwrap();
    train_stage(&mut model, &a, "a", &cfg, &EvalSet::new()).unwrap();
    let mut stage = StageTrainer::begin(&mut model, &b, "b", &cfg).unwrap();
    while stage.in_warmup() {
        let (_, grads) = stage.compute(&model, &b).unwrap();
        for (id, _) in &grads {
            assert!(!matches!(id, ParamId::LogBeta(_)), "β trains in warm-up");
            if let ParamId::Coefficient { scene, .. } = id {
                assert_eq!(*scene, 1, "scene a's coefficients have no warm-up gradient");
            }
        }
        stage.step(&mut model, &b).unwrap();
    }
    let (_, grads) = stage.compute(&model, &b).unwrap();
    assert!(grads.iter().any(|(id, _)| matches!(id, ParamId::LogBeta(_))));
}

#[test]
fn non_finite_gradients_change_nothing() {
    let (a, _) = datasets();
    let cfg = tiny_train();
    let mut model = FactorizedModel::<f64>::new(tiny_config(), &mut Prng::new(3)).unwrap();
    let mut stage = StageTrainer::begin(&mut model, &a, "a", &cfg).unwrap();
    let (_, mut grads) = stage.compute(&model, &a).unwrap();
    let before = model.clone();
    let last = grads.len() - 1;
    grads[last].1.data_mut()[0] = f64::NAN;
    match stage.apply(&mut model, grads) {
        Err(Error::NonFinite { path }) => assert!(!path.is_empty()),
        other => panic!("expected NonFinite, got {other:?}"),
    }
    assert_eq!(model, before);
}

#[test]
fn stages_are_deterministic() {
    let (a, b) = datasets();
    let cfg = tiny_train();
    let mut eval = EvalSet::new();
    eval.insert("a", a.test.clone());
    eval.insert("b", b.test.clone());
    let run = || {
        let mut model = FactorizedModel::<f64>::new(tiny_config(), &mut Prng::new(9)).unwrap();
        let r1 = train_stage(&mut model, &a, "a", &cfg, &eval).unwrap();
        let r2 = train_stage(&mut model, &b, "b", &cfg, &eval).unwrap();
        (model, r1.without_timing(), r2.without_timing())
    };
    let (m1, a1, b1) = run();
    let (m2, a2, b2) = run();
    assert_eq!(m1, m2);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert!(b1.scene("a").unwrap().psnr_before.is_some());
    assert!(b1.scene("b").unwrap().psnr_before.is_none());
    assert_eq!(b1.parameter_delta, tiny_config().per_scene_parameters());
}

#[test]
fn duplicate_scene_ids_are_refused() {
    let (a, _) = datasets();
    let cfg = tiny_train();
    let mut model = FactorizedModel::<f64>::new(tiny_config(), &mut Prng::new(5)).unwrap();
    train_stage(&mut model, &a, "a", &cfg, &EvalSet::new()).unwrap();
    let before = model.clone();
    assert!(matches!(train_stage(&mut model, &a, "a", &cfg, &EvalSet::new()), Err(Error::DuplicateScene(_))));
    assert_eq!(model, before);
}

#[test]
fn invalid_configs_are_refused() {
    let (a, _) = datasets();
    let mut model = FactorizedModel::<f64>::new(tiny_config(), &mut Prng::new(6)).unwrap();
    let bad = TrainConfig { warmup_steps: 10, total_steps: 10, ..tiny_train() };
    assert!(matches!(StageTrainer::begin(&mut model, &a, "a", &bad), Err(Error::Config { .. })));
    assert!(model.scenes().is_empty());
}
