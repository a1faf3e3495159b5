use memseg_core::data::{BinaryImage, InteractionType};
use memseg_core::interaction_sim::{simulate, SimulatorConfig};
use ndarray::Array2;
use proptest::prelude::*;

/// Union of a few random ellipses, the shape family used for sweeps.
fn blob(n: usize, seed: u64) -> BinaryImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            (
                rng.random_range(8.0..n as f64 - 8.0),
                rng.random_range(8.0..n as f64 - 8.0),
                rng.random_range(1.0..10.0),
                rng.random_range(1.0..10.0),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| {
        u8::from(parts.iter().any(|&(cy, cx, ry, rx)| {
            ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
        }))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn scribbles_and_extremes_stay_on_foreground(seed in any::<u64>(), jitter in 0usize..5) {
        let gt = blob(48, seed);
        prop_assume!(gt.iter().any(|&v| v == 1));
        let cfg = SimulatorConfig { seed, bbox_jitter_px: jitter, extreme_jitter_px: jitter, ..Default::default() };
        for kind in [InteractionType::Scribble, InteractionType::ExtremePoints] {
            let g = simulate(kind, &gt, &cfg).unwrap();
            prop_assert!(g.pixels().iter().zip(gt.iter()).all(|(&s, &v)| s <= v));
        }
        let b = simulate(InteractionType::BoundingBox, &gt, &cfg).unwrap();
        let total = gt.iter().filter(|&&v| v == 1).count();
        let inside = b.pixels().iter().zip(gt.iter()).filter(|(&a, &v)| a == 1 && v == 1).count();
        prop_assert!(inside as f64 >= 0.9 * total as f64);
        prop_assert_eq!(&b, &simulate(InteractionType::BoundingBox, &gt, &cfg).unwrap());
    }
}
