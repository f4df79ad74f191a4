use ids_core::hazegen::{synthesize_pair, HazeProfile};
use ids_core::metrics::{
    adversarial_losses, content_loss, content_loss_weighted, mse_loss, perceptual_features, psnr, ssim, ssim_loss,
    SsimConfig,
};
use ids_core::tensor::{finite_diff_check, GradCheckOptions, Shape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform<T: ids_core::tensor::Real>(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = (0..shape.numel()).map(|_| T::lit(rng.random_range(lo..hi))).collect();
    Tensor::new(shape, d).unwrap()
}

#[test]
fn psnr_decreases_with_mse() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
    let mut prev = f64::INFINITY;
    for k in 1..=100 {
        let v = k as f64 / 100.0;
        let p = psnr(&x, &Tensor::full(Shape::new(1, 3, 4, 4), v), 1e9).unwrap();
        assert!(p < prev);
        prev = p;
    }
}

#[test]
fn ssim_range_symmetry_and_identity() {
    let cfg = SsimConfig::default();
    for seed in 0..20 {
        let x = uniform::<f32>(Shape::new(1, 3, 16, 16), 0.0, 1.0, seed);
        let mut yv = x.to_vec();
        yv[seed as usize * 7] += 2e-4;
        let y = Tensor::new(x.shape(), yv).unwrap();
        let s = ssim(&x, &y, &cfg).unwrap();
        assert!(s < 1.0 && s >= -1.0);
        assert_eq!(s, ssim(&y, &x, &cfg).unwrap());
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let z = uniform::<f32>(Shape::new(1, 3, 16, 16), 0.0, 1.0, seed + 100);
        let loss = ssim_loss(&x, &z, &cfg).unwrap().item();
        assert!((0.0..=2.0).contains(&loss));
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let opts = GradCheckOptions::default();
    let shape = Shape::new(1, 3, 16, 16);
    let target = uniform::<f64>(shape, -1.0, 1.0, 1);
    let x = uniform::<f64>(shape, -1.0, 1.0, 2);
    let cfg = SsimConfig::default();

    let e = finite_diff_check(|p| mse_loss(p, &target), &x, &opts).unwrap();
    assert!(e <= 1e-3, "mse {e}");
    let e = finite_diff_check(|p| ssim_loss(p, &target, &cfg), &x, &opts).unwrap();
    assert!(e <= 1e-3, "ssim {e}");
    let e = finite_diff_check(|p| content_loss(p, &target), &x, &opts).unwrap();
    assert!(e <= 1e-3, "content {e}");
}

#[test]
fn generator_gradient_is_sigmoid_minus_one() {
    let real = uniform::<f64>(Shape::new(1, 1, 3, 3), -2.0, 2.0, 5);
    let fake = Tensor::leaf(Shape::new(1, 1, 3, 3), uniform::<f64>(Shape::new(1, 1, 3, 3), -2.0, 2.0, 6).to_vec(), true).unwrap();
    let (_, g) = adversarial_losses(&real, &fake).unwrap();
    g.backward().unwrap();
    let grad = fake.grad().unwrap();
    for (gv, x) in grad.iter().zip(fake.to_vec()) {
        let expect = (1.0 / (1.0 + (-x).exp()) - 1.0) / 9.0;
        assert!((gv - expect).abs() < 1e-12);
    }
    let e = finite_diff_check(
        |f| Ok(adversarial_losses(&real, f)?.1),
        &fake.detach(),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(e <= 1e-3);
}

#[test]
fn content_loss_bounds_mse() {
    for seed in 0..10 {
        let a = uniform::<f32>(Shape::new(1, 3, 32, 32), 0.0, 1.0, seed);
        let b = uniform::<f32>(Shape::new(1, 3, 32, 32), 0.0, 1.0, seed + 50);
        let mse = mse_loss(&a, &b).unwrap().item();
        assert!(content_loss(&a, &b).unwrap().item() >= mse);
        assert_eq!(content_loss_weighted(&a, &b, 0.0).unwrap().item(), mse);
        assert_eq!(content_loss(&a, &a).unwrap().item(), 0.0);
    }
}

#[test]
fn hazy_scene_has_distinct_features() {
    let pair = synthesize_pair(0, 64, 64, HazeProfile::Indoor).unwrap();
    let fc = perceptual_features(&pair.clear).unwrap();
    let fh = perceptual_features(&pair.hazy).unwrap();
    assert!(mse_loss(&fc, &fh).unwrap().item() > 0.0);
}
