use fbev_core::camera::fixtures;
use fbev_core::learn::{overlap_fixture, prepare, train, TrainConfig};
use fbev_core::metrics::iou;
use fbev_core::occlusion::occlusion_map;
use fbev_core::pool::splat;
use fbev_core::{GridSpec, LiftedPoints, ModelKind, OcclusionConfig, Reduce};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(n: usize, seed: u64) -> LiftedPoints {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let mut p = LiftedPoints::empty(3);
    p.features = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
    for i in 0..n {
        p.positions.push([rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0]);
        p.weights.push(1.0);
        p.camera_id.push((i % 2) as u32);
        p.pixel_id.push(i as u32);
        p.bin_id.push(0);
    }
    p
}

fn permuted(p: &LiftedPoints, seed: u64) -> LiftedPoints {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut q = LiftedPoints::empty(p.channels());
    q.features = p.features.select(ndarray::Axis(0), &order);
    for &i in &order {
        q.positions.push(p.positions[i]);
        q.weights.push(p.weights[i]);
        q.camera_id.push(p.camera_id[i]);
        q.pixel_id.push(p.pixel_id[i]);
        q.bin_id.push(p.bin_id[i]);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_ray_pixel_round_trip(kind in 0usize..6, t in 0.0f64..0.95, phi in 0.0f64..std::f64::consts::TAU) {
        let intr = fixtures::intrinsics(ModelKind::ALL[kind]);
        let r = t * intr.model.r_max();
        let (u, v) = (intr.cx + r * phi.cos(), intr.cy + r * phi.sin());
        prop_assume!(intr.contains(u, v));
        let ray = intr.pixel_to_ray(u, v).unwrap();
        prop_assert!((ray.norm() - 1.0).abs() < 1e-12);
        let px = intr.ray_to_pixel(&ray).unwrap().unwrap();
        prop_assert!((px.x - u).abs() < 1e-6 && (px.y - v).abs() < 1e-6, "{:?} vs ({u}, {v})", px);
    }

    #[test]
    fn splat_ignores_point_order(n in 0usize..400, seed in any::<u64>(), reduce in 0usize..3) {
        let reduce = [Reduce::Sum, Reduce::Max, Reduce::Mean][reduce];
        let spec = GridSpec::square(5.0, 0.5).unwrap();
        let p = points(n, seed);
        let a = splat(&p, &spec, 2, reduce).unwrap();
        let b = splat(&permuted(&p, seed ^ 1), &spec, 2, reduce).unwrap();
        prop_assert_eq!(a.counts, b.counts);
        prop_assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn more_points_never_raise_occlusion(
        counts in prop::collection::vec(0u32..6, 64),
        extra in prop::collection::vec(0u32..3, 64),
        tau in 0.5f64..8.0,
        radius in 0usize..3,
    ) {
        let cfg = OcclusionConfig { tau, kernel_radius: radius };
        let c = Array2::from_shape_vec((8, 8), counts).unwrap();
        let more = &c + &Array2::from_shape_vec((8, 8), extra).unwrap();
        let p = occlusion_map(c.view(), &cfg).unwrap().p_occluded;
        let q = occlusion_map(more.view(), &cfg).unwrap().p_occluded;
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(q.iter().zip(&p).all(|(a, b)| a <= b));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 30), b in prop::collection::vec(any::<bool>(), 30)) {
        let a = Array2::from_shape_vec((5, 6), a).unwrap();
        let b = Array2::from_shape_vec((5, 6), b).unwrap();
        let ab = iou(a.view(), b.view()).unwrap();
        prop_assert_eq!(ab, iou(b.view(), a.view()).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
    }
}

#[test]
fn training_is_reproducible() {
    let fx = overlap_fixture(1, 5).unwrap();
    let set = prepare(&fx.scenes, &fx.cameras, &fx.pipeline, None, 5).unwrap();
    let cfg = TrainConfig { steps: 4, lr: 0.05, ..TrainConfig::default() };
    let a = train(&set, &cfg).unwrap();
    let b = train(&set, &cfg).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.model.flatten(), b.model.flatten());
}

#[test]
fn empty_counts_are_fully_occluded() {
    let c = Array3::<u32>::zeros((1, 4, 4));
    let map = occlusion_map(c.index_axis(ndarray::Axis(0), 0), &OcclusionConfig::default()).unwrap();
    assert!(map.p_occluded.iter().all(|&p| p == 1.0));
}
