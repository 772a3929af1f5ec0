use factorized_nerf::metrics::{evaluate, mse, psnr, ssim, storage_report};
use factorized_nerf::persistence;
use factorized_nerf::rendering::{Camera, Image, Intrinsics};
use factorized_nerf::{FactorizedModel, ModelConfig, Prng, SceneSetup};
use proptest::prelude::*;

/// Numerical Recipes LCG, top 24 bits scaled to `[0, 1)`.
fn lcg_image(seed: u64, w: usize, h: usize) -> Image {
    let mut x = seed;
    let data = (0..w * h * 3)
        .map(|_| {
            x = (1664525 * x + 1013904223) % (1 << 32);
            (x >> 8) as f64 / (1u64 << 24) as f64
        })
        .collect();
    Image::new(w, h, data).unwrap()
}

fn blend(a: &Image, b: &Image, mix: f64) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - mix) * x + mix * y).collect();
    Image::new(a.width(), a.height(), data).unwrap()
}

/// Values from scikit-image 0.25 `structural_similarity(a, b,
/// gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
/// data_range=1.0, channel_axis=-1)` on the same LCG images.
#[test]
fn ssim_matches_reference_implementation() {
    for (w, h, s1, s2, mix, want) in [
        (16, 13, 1, 2, 0.3, 0.8885487219586027),
        (11, 11, 7, 9, 0.5, 0.6201254004286989),
        (24, 20, 3, 4, 0.1, 0.9897491485606172),
    ] {
        let a = lcg_image(s1, w, h);
        let b = blend(&a, &lcg_image(s2, w, h), mix);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-10, "{w}×{h}: {got} vs {want}");
    }
}

#[test]
fn small_images_have_no_ssim() {
    let a = lcg_image(1, 8, 8);
    assert!(ssim(&a, &a).is_err());
    let r = evaluate(&a, &blend(&a, &lcg_image(2, 8, 8), 0.5)).unwrap();
    assert!(r.ssim.is_nan());
    assert!(r.psnr.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Larger uniform perturbations never raise PSNR.
    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1000, small in 0.01f64..0.3, extra in 0.01f64..0.5) {
        let a = lcg_image(seed, 12, 12);
        let noise = lcg_image(seed + 1, 12, 12);
        let near = blend(&a, &noise, small);
        let far = blend(&a, &noise, small + extra);
        prop_assert!(psnr(&a, &near).unwrap() > psnr(&a, &far).unwrap());
        prop_assert!((psnr(&a, &near).unwrap() - psnr(&near, &a).unwrap()).abs() < 1e-12);
        prop_assert!(mse(&a, &near).unwrap() >= 0.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000, mix in 0.0f64..1.0) {
        let a = lcg_image(seed, 13, 12);
        let b = blend(&a, &lcg_image(seed + 7, 13, 12), mix);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab > -1.0);
    }
}

#[test]
fn ssim_ignores_where_a_periodic_pattern_starts() {
    // A 21-pixel image has 11 window positions per axis; with period 11 every
    // phase appears exactly once, so a circular shift only reorders windows.
    let tile = |dx: usize, k: usize| {
        let data = (0..21 * 21)
            .flat_map(|i| {
                let (x, y) = ((i % 21 + dx) % 11, i / 21 % 11);
                [((x * k + y * 3) % 11) as f64 / 10.0; 3]
            })
            .collect();
        Image::new(21, 21, data).unwrap()
    };
    let s0 = ssim(&tile(0, 7), &blend(&tile(0, 7), &tile(0, 5), 0.4)).unwrap();
    let s1 = ssim(&tile(4, 7), &blend(&tile(4, 7), &tile(4, 5), 0.4)).unwrap();
    assert!(s0 < 0.99);
    assert!((s0 - s1).abs() < 1e-12, "{s0} vs {s1}");
}

fn camera() -> Camera {
    Camera::look_at([0.0, -4.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0], Intrinsics { width: 8, height: 8, fov_x: 0.8 })
        .unwrap()
}

#[test]
fn storage_report_equals_serialized_sizes() {
    let mut prng = Prng::new(1);
    let mut model = FactorizedModel::<f64>::new(ModelConfig::desk(), &mut prng).unwrap();
    let mut sizes = vec![persistence::to_bytes(&model).len()];
    assert_eq!(storage_report(&model).total_bytes, sizes[0]);
    for s in 0..4 {
        let setup = SceneSetup { frusta: vec![camera(); 5], near: 2.0, far: 6.0, white_background: true };
        model.add_scene(&format!("scene-{s}"), setup, &mut prng).unwrap();
        let report = storage_report(&model);
        let bytes = persistence::to_bytes(&model).len();
        assert_eq!(report.total_bytes, bytes);
        sizes.push(bytes);
    }
    // Equal-length ids and frustum counts: every scene adds the same bytes.
    let deltas: Vec<usize> = sizes.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(deltas.iter().all(|&d| d == deltas[0]), "{deltas:?}");
    let report = storage_report(&model);
    assert_eq!(deltas[0], report.per_scene_bytes[0]);
    assert_eq!(report.per_scene_parameter_bytes, 4 * model.config().per_scene_parameters());
    assert!(deltas[0] > report.per_scene_parameter_bytes);
    assert_eq!(report.extrapolate(10), report.total_bytes + 6 * deltas[0]);
}
