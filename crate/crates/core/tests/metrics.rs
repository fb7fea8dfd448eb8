use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenecast::metrics::{
    collision_metrics, is_miss, joint_metrics, longitudinal_threshold, marginal_metrics, GroundTruth,
};
use scenecast::sampler::{ModalitySet, Orientation};
use scenecast::scene::geometry::{add, rotate, Point};

/// Predictions scattered around the ground truth so hits and misses both occur.
fn random_case(rng: &mut ChaCha8Rng) -> (ModalitySet, Vec<Option<GroundTruth>>) {
    let (a, k) = (rng.gen_range(1..6), rng.gen_range(1..7));
    let gt: Vec<Option<GroundTruth>> = (0..a)
        .map(|_| {
            let end = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
            Some(GroundTruth::new(vec![end], rng.gen_range(-3.2..3.2), rng.gen_range(0.0..15.0)))
        })
        .collect();
    let spread = rng.gen_range(0.5..6.0);
    let ends = gt
        .iter()
        .map(|g| {
            let e = g.as_ref().unwrap().endpoint;
            (0..k).map(|_| [e[0] + rng.gen_range(-spread..spread), e[1] + rng.gen_range(-spread..spread)]).collect()
        })
        .collect();
    (ModalitySet::new(Orientation::Joint, (0..a as u32).collect(), ends).unwrap(), gt)
}

#[test]
fn joint_metrics_bound_marginal_ones_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (set, gt) = random_case(&mut rng);
        let m = marginal_metrics(&set, &gt).unwrap();
        let j = joint_metrics(&set, &gt).unwrap();
        let (col, cmr) = collision_metrics(&set, &gt, 2.0).unwrap();
        assert!(j.fde >= m.fde - 1e-12, "{j:?} {m:?}");
        assert!(j.mr >= m.mr);
        assert!(cmr >= j.mr);
        assert!((0.0..=100.0).contains(&col));
    }
}

#[test]
fn single_modality_joint_equals_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (mut set, gt) = random_case(&mut rng);
        for e in &mut set.endpoints {
            e.truncate(1);
        }
        set.degenerate = vec![vec![false]; set.num_agents()];
        set.collision_possible = vec![false];
        let m = marginal_metrics(&set, &gt).unwrap();
        let j = joint_metrics(&set, &gt).unwrap();
        assert!((m.fde - j.fde).abs() < 1e-12);
        assert_eq!(m.mr, j.mr);
    }
}

#[test]
fn repeated_modalities_score_like_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (set, gt) = random_case(&mut rng);
        let one = ModalitySet::new(Orientation::Joint, set.agents.clone(), set.endpoints.iter().map(|e| vec![e[0]]).collect()).unwrap();
        let many = ModalitySet::new(Orientation::Joint, set.agents.clone(), set.endpoints.iter().map(|e| vec![e[0]; 5]).collect()).unwrap();
        assert_eq!(marginal_metrics(&one, &gt).unwrap(), marginal_metrics(&many, &gt).unwrap());
        assert_eq!(joint_metrics(&one, &gt).unwrap(), joint_metrics(&many, &gt).unwrap());
    }
}

#[test]
fn agents_without_ground_truth_are_excluded() {
    let set = ModalitySet::new(Orientation::Joint, vec![0, 1], vec![vec![[1.0, 0.0]], vec![[50.0, 0.0]]]).unwrap();
    let gt = vec![Some(GroundTruth::new(vec![[0.0, 0.0]], 0.0, 5.0)), None];
    let m = marginal_metrics(&set, &gt).unwrap();
    assert_eq!((m.agents, m.excluded, m.fde), (1, 1, 1.0));
    assert!(marginal_metrics(&set, &gt[..1]).is_err());
}

#[test]
fn threshold_is_continuous_at_both_knots() {
    for knot in [1.4, 11.0] {
        let eps = 1e-13;
        let (lo, hi) = (longitudinal_threshold(knot - eps).unwrap(), longitudinal_threshold(knot + eps).unwrap());
        assert!((lo - hi).abs() < 1e-12, "{knot}: {lo} vs {hi}");
    }
}

fn transform(p: Point, angle: f64, shift: Point) -> Point {
    add(rotate(p, angle), shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_invariant_to_rigid_motion(seed in 0u64..10_000, angle in -3.2f64..3.2, dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (set, gt) = random_case(&mut rng);
        let mut moved = set.clone();
        for e in &mut moved.endpoints {
            for p in e.iter_mut() {
                *p = transform(*p, angle, [dx, dy]);
            }
        }
        let moved_gt: Vec<Option<GroundTruth>> = gt
            .iter()
            .map(|g| g.as_ref().map(|g| GroundTruth::new(vec![transform(g.endpoint, angle, [dx, dy])], g.heading + angle, g.speed)))
            .collect();
        let (m0, m1) = (marginal_metrics(&set, &gt).unwrap(), marginal_metrics(&moved, &moved_gt).unwrap());
        let (j0, j1) = (joint_metrics(&set, &gt).unwrap(), joint_metrics(&moved, &moved_gt).unwrap());
        prop_assert!((m0.fde - m1.fde).abs() < 1e-9 && (j0.fde - j1.fde).abs() < 1e-9);
        // Points within rounding of a threshold may flip.
        let near_threshold = set.endpoints.iter().zip(&gt).any(|(e, g)| {
            let g = g.as_ref().unwrap();
            e.iter().any(|p| {
                let d = rotate([p[0] - g.endpoint[0], p[1] - g.endpoint[1]], -g.heading);
                (d[1].abs() - 1.0).abs() < 1e-9 || (d[0].abs() - longitudinal_threshold(g.speed).unwrap()).abs() < 1e-9
            })
        });
        if !near_threshold {
            prop_assert_eq!(m0.mr, m1.mr);
            prop_assert_eq!(j0.mr, j1.mr);
        }
    }

    #[test]
    fn metrics_ignore_the_order_of_scene_modalities(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (set, gt) = random_case(&mut rng);
        let mut rev = set.clone();
        for e in &mut rev.endpoints {
            e.reverse();
        }
        let (j0, j1) = (joint_metrics(&set, &gt).unwrap(), joint_metrics(&rev, &gt).unwrap());
        prop_assert!((j0.fde - j1.fde).abs() < 1e-12);
        prop_assert_eq!(j0.mr, j1.mr);
        prop_assert_eq!(collision_metrics(&set, &gt, 2.0).unwrap(), collision_metrics(&rev, &gt, 2.0).unwrap());
        prop_assert!((marginal_metrics(&set, &gt).unwrap().fde - marginal_metrics(&rev, &gt).unwrap().fde).abs() < 1e-12);
    }

    #[test]
    fn miss_region_is_a_heading_aligned_box(heading in -3.2f64..3.2, speed in 0.0f64..20.0, lon in -3.0f64..3.0, lat in -2.0f64..2.0) {
        let gt = [5.0, -7.0];
        let pred = add(gt, rotate([lon, lat], heading));
        let t = longitudinal_threshold(speed).unwrap();
        prop_assume!((lon.abs() - t).abs() > 1e-9 && (lat.abs() - 1.0).abs() > 1e-9);
        prop_assert_eq!(is_miss(pred, gt, heading, speed).unwrap(), lon.abs() > t || lat.abs() > 1.0);
    }
}
