use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenecast::field::{eval_field, AnalyticField, GaussianComponent};
use scenecast::model::hier::{coarse_cells, refine_with, CellIndex};
use scenecast::model::{decode_oracle, HierConfig, SparseHeatmap};
use scenecast::sampler::{
    greedy_dense, sample_joint, sample_marginal, sample_marginal_set, sampled_confidence, AgentOrder, SamplerConfig,
};
use scenecast::scene::geometry::{dist, Point};

fn oracle(field: &AnalyticField, agent: u32) -> SparseHeatmap {
    decode_oracle(field, &HierConfig::default(), agent).unwrap().0
}

fn gaussian(mean: Point, sigma: f64) -> AnalyticField {
    AnalyticField::new(vec![GaussianComponent::isotropic(1.0, mean, sigma)]).unwrap()
}

fn dense_values(field: &AnalyticField) -> Vec<f64> {
    let grid = HierConfig::default().final_grid();
    let side = grid.side();
    let mut centers = Vec::with_capacity(side * side);
    for ix in 0..side {
        for iy in 0..side {
            centers.push(grid.center(ix, iy));
        }
    }
    eval_field(field, &centers)
}

fn cfg(k: usize) -> SamplerConfig {
    SamplerConfig { k, ..Default::default() }
}

#[test]
fn single_gaussian_pick_lands_on_the_mean() {
    for mean in [[12.3, -40.1], [-70.6, 3.9], [0.2, 0.2]] {
        let hm = oracle(&gaussian(mean, 2.0), 0);
        let (ends, _, degen) = sample_marginal(&hm, &cfg(1)).unwrap();
        assert!(dist(ends[0], mean) <= 0.5, "{:?} vs {mean:?}", ends[0]);
        assert!(!degen[0]);
        let dense = greedy_dense(&hm.config.final_grid(), &dense_values(&gaussian(mean, 2.0)), 1, 2.0);
        assert_eq!(dense[0], ends[0]);
    }
}

#[test]
fn two_gaussians_are_picked_by_weight() {
    let (a, b) = ([10.2, 5.1], [-39.8, 5.1]);
    let field = AnalyticField::new(vec![
        GaussianComponent::isotropic(0.6, a, 2.0),
        GaussianComponent::isotropic(0.4, b, 2.0),
    ])
    .unwrap();
    let hm = oracle(&field, 0);
    let (ends, conf, _) = sample_marginal(&hm, &cfg(2)).unwrap();
    assert!(dist(ends[0], a) <= 0.5 && dist(ends[1], b) <= 0.5, "{ends:?}");
    assert!(conf[0] > conf[1]);
    let dense = greedy_dense(&hm.config.final_grid(), &dense_values(&field), 2, 2.0);
    assert_eq!(dense, ends);
}

#[test]
fn uniform_field_confidence_counts_disk_cells() {
    // Constant probability; ranking steers refinement to the grid center so
    // the final region is wide enough to hold whole disks.
    let hier = HierConfig::default();
    let hm = refine_with(&hier, 0, |_, pts| Ok(pts.iter().map(|p| (-(p[0].abs() + p[1].abs()), 0.01)).collect())).unwrap();
    for (radius, cells) in [(2.0, 49.0), (1.0, 13.0), (0.5, 5.0)] {
        let (_, conf, _) = sample_marginal(&hm, &SamplerConfig { k: 1, radius, ..Default::default() }).unwrap();
        assert!((conf[0] - 0.01 * cells).abs() < 1e-12, "r = {radius}: {}", conf[0]);
    }
}

#[test]
fn identical_agents_are_pushed_apart_in_joint_sampling() {
    let mean = [3.1, -7.2];
    let maps = vec![oracle(&gaussian(mean, 2.0), 0), oracle(&gaussian(mean, 2.0), 1)];
    let set = sample_joint(&maps, None, &SamplerConfig { order: AgentOrder::Input, ..Default::default() }).unwrap();
    assert!(dist(set.endpoint(0, 0), mean) <= 0.5);
    assert!(dist(set.endpoint(1, 0), mean) >= 2.0);
    for k in 0..set.k() {
        if !set.flagged(k) {
            assert!(dist(set.endpoint(0, k), set.endpoint(1, k)) >= 2.0);
        }
    }
}

#[test]
fn single_agent_joint_equals_marginal() {
    let field = AnalyticField::new(vec![
        GaussianComponent::isotropic(0.5, [1.0, 2.0], 3.0),
        GaussianComponent::isotropic(0.5, [20.0, -2.0], 1.5),
    ])
    .unwrap();
    let maps = vec![oracle(&field, 4)];
    let joint = sample_joint(&maps, None, &cfg(6)).unwrap();
    let marginal = sample_marginal_set(&maps, &cfg(6)).unwrap();
    assert_eq!(joint.endpoints, marginal.endpoints);
    assert_eq!(joint.confidence, marginal.confidence);
}

/// Random mixture with 1 to 3 components.
fn random_field(rng: &mut ChaCha8Rng) -> AnalyticField {
    let n = rng.gen_range(1..=3);
    let comps = (0..n)
        .map(|_| {
            let mean = [rng.gen_range(-85.0..85.0), rng.gen_range(-85.0..85.0)];
            GaussianComponent::isotropic(rng.gen_range(0.2..1.0), mean, rng.gen_range(1.5..5.0))
        })
        .collect();
    AnalyticField::new(comps).unwrap().normalized()
}

/// Whether every component's coarse cell ranks within the kept `N1`.
fn modes_retained(field: &AnalyticField, hier: &HierConfig) -> bool {
    let cells = coarse_cells(hier);
    let mass = eval_field(field, &cells.iter().map(|c| c.center(hier)).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(cells[a].cmp(&cells[b])));
    let kept: Vec<CellIndex> = order[..hier.n1].iter().map(|&i| cells[i]).collect();
    let grid = scenecast::field::GridSpec::new(hier.w, hier.r0).unwrap();
    field.components.iter().all(|c| {
        grid.cell_of(c.mean).is_some_and(|(ix, iy)| kept.contains(&CellIndex { level: 0, ix: ix as u32, iy: iy as u32 }))
    })
}

/// Whether every final cell within `r` of `p` was evaluated.
fn disk_evaluated(hm: &SparseHeatmap, p: Point, r: f64) -> bool {
    let grid = hm.config.final_grid();
    let have: std::collections::HashSet<CellIndex> = hm.final_cells().iter().map(|c| c.cell).collect();
    let span = (r / grid.resolution).ceil() as i64;
    let (cx, cy) = grid.cell_of(p).unwrap();
    for dx in -span..=span {
        for dy in -span..=span {
            let (ix, iy) = (cx as i64 + dx, cy as i64 + dy);
            if ix < 0 || iy < 0 || ix >= grid.side() as i64 || iy >= grid.side() as i64 {
                continue;
            }
            let c = grid.center(ix as usize, iy as usize);
            if dist(c, p) <= r + 1e-9 && !have.contains(&CellIndex { level: 2, ix: ix as u32, iy: iy as u32 }) {
                return false;
            }
        }
    }
    true
}

/// Sparse greedy equals dense greedy pick for pick as long as each dense
/// pick's disk was fully evaluated by the hierarchy: sparse disk masses never
/// exceed dense ones and are exact at such a pick.
#[test]
fn sparse_sampling_matches_dense_greedy_while_disks_are_evaluated() {
    let hier = HierConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut fields, mut compared) = (0, 0);
    for _ in 0..25 {
        let field = random_field(&mut rng);
        if !modes_retained(&field, &hier) {
            continue;
        }
        fields += 1;
        let hm = oracle(&field, 0);
        let (ends, _, _) = sample_marginal(&hm, &cfg(6)).unwrap();
        let dense = greedy_dense(&hier.final_grid(), &dense_values(&field), 6, 2.0);
        assert!(disk_evaluated(&hm, dense[0], 2.0));
        for (s, d) in ends.iter().zip(&dense) {
            if !disk_evaluated(&hm, *d, 2.0) {
                break;
            }
            assert_eq!(s, d, "{ends:?} vs {dense:?}");
            compared += 1;
        }
    }
    assert!(fields >= 15 && compared >= 5 * fields, "{fields} fields, {compared} picks");
}

fn arb_field() -> impl Strategy<Value = AnalyticField> {
    prop::collection::vec((0.1f64..1.0, -80.0f64..80.0, -80.0f64..80.0, 0.8f64..6.0), 1..4).prop_map(|c| {
        AnalyticField::new(c.into_iter().map(|(w, x, y, s)| GaussianComponent::isotropic(w, [x, y], s)).collect())
            .unwrap()
            .normalized()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn marginal_picks_are_separated_and_confidence_non_increasing(field in arb_field(), k in 1usize..8, radius in 0.5f64..4.0) {
        let hm = oracle(&field, 0);
        let c = SamplerConfig { k, radius, ..Default::default() };
        let (ends, conf, _) = sample_marginal(&hm, &c).unwrap();
        prop_assert_eq!(ends.len(), k);
        for i in 0..k {
            for j in 0..i {
                prop_assert!(dist(ends[i], ends[j]) > radius - 1e-9);
            }
        }
        for w in conf.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!((conf[0] - sampled_confidence(&hm, ends[0], radius)).abs() < 1e-12);
        prop_assert_eq!(sample_marginal(&hm, &c).unwrap().0, ends);
    }

    #[test]
    fn joint_modalities_keep_agents_apart(fields in prop::collection::vec(arb_field(), 1..5)) {
        let maps: Vec<SparseHeatmap> = fields.iter().enumerate().map(|(i, f)| oracle(f, i as u32)).collect();
        let set = sample_joint(&maps, None, &cfg(6)).unwrap();
        for k in 0..6 {
            if set.flagged(k) {
                continue;
            }
            for a in 0..maps.len() {
                for b in 0..a {
                    prop_assert!(dist(set.endpoint(a, k), set.endpoint(b, k)) >= 2.0 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn joint_without_cross_suppression_is_marginal(fields in prop::collection::vec(arb_field(), 1..4)) {
        let maps: Vec<SparseHeatmap> = fields.iter().enumerate().map(|(i, f)| oracle(f, i as u32)).collect();
        let c = SamplerConfig { cross_suppression: false, ..Default::default() };
        let joint = sample_joint(&maps, None, &c).unwrap();
        let marginal = sample_marginal_set(&maps, &c).unwrap();
        prop_assert_eq!(joint.endpoints, marginal.endpoints);
        prop_assert_eq!(joint.confidence, marginal.confidence);
    }
}
