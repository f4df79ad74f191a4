use ids_core::hazegen::{
    apply_scattering, invert_scattering, synthesize_pair, transmission_from_depth, write_dataset, DatasetOptions,
    HazeProfile, DEFAULT_T_FLOOR,
};
use ids_core::io::{load_png, quantized};
use ids_core::plane::Plane;
use ids_core::tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(seed: u64, n: usize, t_lo: f32) -> (Tensor, Plane, [f32; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j: Vec<f32> = (0..3 * n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let t: Vec<f32> = (0..n).map(|_| rng.random_range(t_lo..=1.0)).collect();
    let a = [
        rng.random_range(0.05..=1.0),
        rng.random_range(0.05..=1.0),
        rng.random_range(0.05..=1.0),
    ];
    (Tensor::new(Shape::new(1, 3, 1, n), j).unwrap(), Plane::new(1, n, t), a)
}

#[test]
fn ln2_depth_gives_half_transmission() {
    let t = transmission_from_depth(&Plane::filled(3, 3, std::f32::consts::LN_2), 1.0).unwrap();
    assert!(t.data.iter().all(|&v| v == 0.5));
}

#[test]
fn round_trip_above_floor() {
    let (clear, t, a) = random_case(11, 10_000, DEFAULT_T_FLOOR);
    let hazy = apply_scattering(&clear, &t, a).unwrap();
    let back = invert_scattering(&hazy, &t, a, DEFAULT_T_FLOOR).unwrap();
    let err = clear
        .data()
        .iter()
        .zip(back.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(err <= 1e-6, "max abs error {err}");
}

#[test]
fn convex_combination_on_random_pixels() {
    let (clear, t, a) = random_case(12, 1000, 1e-6);
    let hazy = apply_scattering(&clear, &t, a).unwrap();
    let (j, i) = (clear.data(), hazy.data());
    for k in 0..3000 {
        let ak = a[k / 1000];
        assert!(i[k] >= j[k].min(ak) && i[k] <= j[k].max(ak), "pixel {k}");
    }
}

proptest! {
    #[test]
    fn convexity_holds(j in 0.0f32..=1.0, t in 1e-6f32..=1.0, a in 0.01f32..=1.0) {
        let clear = Tensor::full(Shape::new(1, 3, 1, 1), j);
        let i = apply_scattering(&clear, &Plane::filled(1, 1, t), [a; 3]).unwrap().to_vec()[0];
        prop_assert!(i >= j.min(a) && i <= j.max(a));
    }

    #[test]
    fn inverse_recovers_airlight(a in 0.05f32..=1.0, t in 0.1f32..=1.0) {
        let hazy = Tensor::full(Shape::new(1, 3, 2, 2), a);
        let j = invert_scattering(&hazy, &Plane::filled(2, 2, t), [a; 3], DEFAULT_T_FLOOR).unwrap();
        prop_assert!(j.to_vec().iter().all(|&v| (v - a).abs() < 1e-6));
    }
}

#[test]
fn haze_pulls_channel_means_toward_airlight() {
    for seed in 0..30 {
        let pair = synthesize_pair(seed, 32, 32, HazeProfile::Indoor).unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            let mean = |t: &Tensor| t.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let a = pair.params.airlight[c] as f64;
            assert!((mean(&pair.hazy) - a).abs() < (mean(&pair.clear) - a).abs(), "seed {seed} channel {c}");
        }
    }
}

#[test]
fn dataset_layout_and_determinism() {
    let opts = DatasetOptions {
        count: 10,
        height: 24,
        width: 32,
        profile: HazeProfile::Indoor,
        seed: 3,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let records = write_dataset(a.path(), &opts).unwrap();
    write_dataset(b.path(), &opts).unwrap();

    let count = |d: &std::path::Path| std::fs::read_dir(d).unwrap().count();
    assert_eq!(count(&a.path().join("train")), 16);
    assert_eq!(count(&a.path().join("val")), 4);

    let manifest = std::fs::read_to_string(a.path().join("params.tsv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("seed\tbeta\tA"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        let beta: f32 = row.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(beta > 0.6 && beta < 1.8);
    }

    for r in &records {
        let rel = r.hazy_path.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&r.hazy_path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        let pair = synthesize_pair(r.seed, 24, 32, HazeProfile::Indoor).unwrap();
        assert_eq!(load_png(&r.hazy_path).unwrap().to_vec(), quantized(&pair.hazy).unwrap().to_vec());
    }
}
