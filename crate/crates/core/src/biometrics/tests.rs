use super::*;
use crate::detect::{detect_trees, DetectConfig};
use crate::synthforest::{compose_scene, generate_forest, ForestConfig, TreeParams};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn cylinder(r: impl Fn(f64) -> f64, z0: f64, z1: f64, rings: usize, per_ring: usize) -> Vec<Point3> {
    let mut pts = Vec::new();
    for k in 0..rings {
        let z = z0 + (z1 - z0) * k as f64 / (rings - 1) as f64;
        for a in 0..per_ring {
            let t = std::f64::consts::TAU * a as f64 / per_ring as f64;
            pts.push([r(z) * t.cos() + 3.0, r(z) * t.sin() - 2.0, z]);
        }
    }
    pts
}

#[test]
fn flat_ground_estimate() {
    let pts = (0..2500).map(|i| [(i % 50) as f64 * 0.2, (i / 50) as f64 * 0.2, 0.0]).collect();
    let g = estimate_ground(&PointCloud::new(pts).unwrap(), 1.0);
    for x in [0.0, 3.3, 9.8] {
        assert!(g.elevation(x, x).abs() < 1e-12);
    }
}

#[test]
fn sinusoidal_ground_within_tolerance() {
    let cfg = ForestConfig { n_trees: 10, ..ForestConfig::default() };
    let scene = generate_forest(&cfg, 7).unwrap();
    let truth = crate::synthforest::ground_function(&cfg, crate::derive_seed(7, 1));
    let g = estimate_ground(&scene.cloud, 1.0);
    let mut worst = 0.0f64;
    for i in -20..=20 {
        for j in -20..=20 {
            let (x, y) = (i as f64, j as f64);
            if x.hypot(y) > cfg.area_radius - 1.0 {
                continue;
            }
            worst = worst.max((g.elevation(x, y) - truth(x, y)).abs());
        }
    }
    assert!(worst < 0.15, "max error {worst}");
}

fn conifer(height: f64) -> TreeParams {
    TreeParams {
        height,
        dbh: 0.3,
        crown_base_frac: 0.45,
        crown_radius: 2.5,
        whorl_count: 5,
        foliage_density: 200.0,
        taper_exponent: 0.7,
    }
}

#[test]
fn ground_under_crown_ignores_canopy() {
    let scene = compose_scene(&[(conifer(12.0), [0.0, 0.0])], GroundModel::flat(0.0), 8.0, 3).unwrap();
    let g = estimate_ground(&scene.cloud, 1.0);
    for (x, y) in [(0.0, 0.0), (1.5, 0.5), (-2.0, -1.0)] {
        assert!(g.elevation(x, y).abs() < 0.1, "{}", g.elevation(x, y));
    }
}

#[test]
fn heights_from_planted_trees() {
    let one = PointCloud::new(vec![[1.0, 1.0, 5.0]]).unwrap();
    assert_eq!(tree_height(&one, &GroundModel::flat(0.0)), 5.0);
    for (z0, base) in [(0.0, [0.0, 0.0]), (2.0, [1.0, -1.0])] {
        let scene = compose_scene(&[(conifer(10.0), base)], GroundModel::flat(z0), 8.0, 4).unwrap();
        let g = estimate_ground(&scene.cloud, 1.0);
        let h = tree_height(&scene.cloud, &g);
        assert!((h - 10.0).abs() < 0.1, "{h}");
    }
}

#[test]
fn dbh_clean_cylinder() {
    let c = PointCloud::new(cylinder(|_| 0.15, 0.5, 2.0, 31, 60)).unwrap();
    for seed in 0..4 {
        let d = dbh_ransac(&c, &GroundModel::flat(0.0), &RansacCircleConfig::default(), seed).unwrap();
        assert!((d - 0.3).abs() < 0.3 * 0.02, "{d}");
    }
}

#[test]
fn dbh_with_clutter() {
    let mut pts = cylinder(|_| 0.15, 0.5, 2.0, 31, 60);
    let n = pts.len() / 5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..n {
        let t = rng.random::<f64>() * std::f64::consts::TAU;
        let r = rng.random_range(0.0..0.6);
        pts.push([3.0 + r * t.cos(), -2.0 + r * t.sin(), rng.random_range(0.5..2.0)]);
    }
    let d = dbh_ransac(&PointCloud::new(pts).unwrap(), &GroundModel::flat(0.0), &RansacCircleConfig::default(), 5).unwrap();
    assert!((d - 0.3).abs() < 0.3 * 0.05, "{d}");
}

#[test]
fn dbh_tapered_stem() {
    let r = |z: f64| 0.2 - 0.02 * z;
    let noise = Normal::new(0.0, 0.005).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = cylinder(r, 0.5, 2.0, 61, 80).into_iter().map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng), p[2]]);
    let d = dbh_ransac(&PointCloud::new(pts.collect()).unwrap(), &GroundModel::flat(0.0), &RansacCircleConfig::default(), 1).unwrap();
    let truth = 2.0 * r(1.37);
    assert!((d - truth).abs() < 0.03 * truth, "{d} vs {truth}");
}

#[test]
fn dbh_missing_without_stem() {
    let c = PointCloud::new(vec![[0.0, 0.0, 1.3], [0.1, 0.0, 1.3]]).unwrap();
    assert_eq!(dbh_ransac(&c, &GroundModel::flat(0.0), &RansacCircleConfig::default(), 0), None);
}

#[test]
fn crown_diameter_examples() {
    let two = PointCloud::new(vec![[0.0, 0.0, 1.0], [3.0, 4.0, 2.0]]).unwrap();
    assert!((crown_diameter(&two).unwrap() - 5.0).abs() < 1e-12);
    let sq = PointCloud::new(vec![[0.0, 0.0, 0.0], [4.0, 0.0, 1.0], [4.0, 4.0, 0.0], [0.0, 4.0, 2.0], [2.0, 2.0, 5.0]]).unwrap();
    assert!((crown_diameter(&sq).unwrap() - 32f64.sqrt()).abs() < 1e-12);
    assert_eq!(crown_diameter(&PointCloud::new(vec![[0.0; 3]]).unwrap()), Err(BiometricError::TooFewPoints { need: 2, got: 1 }));
}

fn brute_diameter(pts: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for a in pts {
        for b in pts {
            best = best.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    best
}

#[test]
fn calipers_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let pts: Vec<Point3> = (0..500).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random()]).collect();
        let d = crown_diameter(&PointCloud::new(pts.clone()).unwrap()).unwrap();
        assert!((d - brute_diameter(&pts)).abs() < 1e-12);
    }
}

fn cube(offset: f64) -> Vec<Point3> {
    (0..8).map(|i| [offset + (i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect()
}

#[test]
fn crown_volume_examples() {
    let c = PointCloud::new(cube(0.0)).unwrap();
    assert!((crown_volume(&c, 1, 0) - 1.0).abs() < 1e-12);
    let mut two = cube(0.0);
    two.extend(cube(10.0));
    for seed in 0..5 {
        assert!((crown_volume(&PointCloud::new(two.clone()).unwrap(), 2, seed) - 2.0).abs() < 1e-9);
    }
}

#[test]
fn crown_volume_k1_is_hull_volume_and_k4_smaller() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in 0..20 {
        let h = rng.random_range(4.0..8.0);
        let r = rng.random_range(1.0..3.0);
        let pts: Vec<Point3> = (0..300)
            .map(|_| {
                let z = rng.random::<f64>() * h;
                let rr = r * (1.0 - z / h) * rng.random::<f64>().sqrt();
                let t = rng.random::<f64>() * std::f64::consts::TAU;
                [rr * t.cos(), rr * t.sin(), z]
            })
            .collect();
        let c = PointCloud::new(pts.clone()).unwrap();
        let v1 = crown_volume(&c, 1, s);
        assert_eq!(v1, ConvexHull3::from_points(&pts).unwrap().volume());
        assert!(crown_volume(&c, 4, s) <= v1 + 1e-9);
    }
}

fn ten_tree_scene() -> crate::synthforest::LabeledScene {
    let trees: Vec<(TreeParams, [f64; 2])> = (0..10)
        .map(|i| {
            let (x, y) = ((i % 5) as f64 * 9.0 - 18.0, (i / 5) as f64 * 9.0 - 4.5);
            (TreeParams { height: 9.0 + i as f64, crown_radius: 2.0, ..conifer(10.0) }, [x, y])
        })
        .collect();
    compose_scene(&trees, GroundModel::flat(0.0), 25.0, 8).unwrap()
}

#[test]
fn labeled_plot_heights() {
    let scene = ten_tree_scene();
    let boxes = detect_trees(&scene.cloud, &DetectConfig::default());
    let recs = plot_biometrics(&scene.cloud, &boxes, Source::AlsTls, &BiometricConfig::default());
    assert_eq!(recs.len(), 10);
    for t in &scene.trees {
        let k = boxes.iter().position(|b| b.contains_xy(t.base[0], t.base[1])).unwrap();
        let h = recs[k].height.unwrap();
        assert!((h - t.params.height).abs() < 0.01 * t.params.height, "{h} vs {}", t.params.height);
        let d = recs[k].dbh.unwrap();
        let truth = t.params.breast_height_diameter();
        assert!((d - truth).abs() < 0.1 * truth, "dbh {d} vs {truth}");
        assert!(recs[k].crown_diameter.unwrap() > 0.0 && recs[k].crown_volume.unwrap() > 0.0);
    }
}

#[test]
fn proxy_segmentation_finds_stem_and_crown() {
    let scene = ten_tree_scene();
    let cloud = scene.cloud.clone().drop_attributes();
    let boxes = detect_trees(&cloud, &DetectConfig::default());
    let recs = plot_biometrics(&cloud, &boxes, Source::AlsTls, &BiometricConfig::default());
    let with_dbh = recs.iter().filter(|r| r.dbh.is_some()).count();
    assert!(with_dbh >= 8, "{with_dbh}");
    for t in &scene.trees {
        let k = boxes.iter().position(|b| b.contains_xy(t.base[0], t.base[1])).unwrap();
        if let Some(d) = recs[k].dbh {
            let truth = t.params.breast_height_diameter();
            assert!((d - truth).abs() < 0.15 * truth, "dbh {d} vs {truth}");
        }
    }
}

#[test]
fn opaque_als_dbh_mostly_missing() {
    use crate::scansim::{simulate_als, AlsSensor};
    let scene = ten_tree_scene();
    let als = simulate_als(&scene, &AlsSensor { canopy_penetration_prob: 0.0, ..AlsSensor::default() }, 1);
    let boxes = detect_trees(&als, &DetectConfig::default());
    let recs = plot_biometrics(&als, &boxes, Source::Als, &BiometricConfig::default());
    assert!(!recs.is_empty());
    let missing = recs.iter().filter(|r| r.dbh.is_none()).count();
    assert!(2 * missing >= recs.len(), "{missing}/{}", recs.len());
}

#[test]
fn empty_boxes_empty_records() {
    assert!(plot_biometrics(&ten_tree_scene().cloud, &[], Source::Als, &BiometricConfig::default()).is_empty());
}

fn rec(id: usize, source: Source, h: f64, dbh: Option<f64>) -> BiometricRecord {
    BiometricRecord { tree_id: id, source, height: Some(h), dbh, crown_diameter: Some(h / 3.0), crown_volume: Some(h * 2.0) }
}

#[test]
fn compare_identical_and_shifted() {
    let mut recs: Vec<BiometricRecord> = (0..5).map(|i| rec(i, Source::AlsTls, 10.0 + i as f64, Some(0.3))).collect();
    recs.extend((0..5).map(|i| rec(i, Source::AlsGen, 10.0 + i as f64, Some(0.3))));
    recs.extend((0..5).map(|i| rec(i, Source::Als, 11.0 + i as f64, if i < 2 { Some(0.3) } else { None })));
    let t = compare_sources(&recs, Source::AlsTls);
    assert_eq!(t.len(), 2);
    for m in Metric::ALL {
        assert_eq!(t["ALS+Gen"][m.name()].wd, Some(0.0));
    }
    assert!((t["ALS"]["height"].wd.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(t["ALS"]["dbh"].dropped_source, 3);
    assert_eq!(t["ALS"]["dbh"].n_source, 2);
    let json = serde_json::to_string(&t).unwrap();
    assert!(json.contains("\"ALS+Gen\"") && json.contains("\"dbh\""));
}

#[test]
fn csv_round_trip() {
    let recs = vec![rec(0, Source::Als, 12.5, None), rec(3, Source::AlsGen, 9.25, Some(0.31))];
    let text = records_to_csv(&recs);
    assert!(text.lines().nth(1).unwrap().starts_with("0,ALS,12.5,,"));
    assert_eq!(records_from_csv(&text).unwrap(), recs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_translation_invariant(dx in -50.0..50.0f64, dy in -50.0..50.0f64, dz in -5.0..5.0f64, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..80).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..8.0)]).collect();
        let moved: Vec<Point3> = pts.iter().map(|p| [p[0] + dx, p[1] + dy, p[2] + dz]).collect();
        let a = PointCloud::new(pts).unwrap();
        let b = PointCloud::new(moved).unwrap();
        prop_assert!((crown_diameter(&a).unwrap() - crown_diameter(&b).unwrap()).abs() < 1e-9);
        prop_assert!((crown_volume(&a, 3, seed) - crown_volume(&b, 3, seed)).abs() < 1e-7);
        let h0 = tree_height(&a, &GroundModel::flat(0.0));
        let h1 = tree_height(&b, &GroundModel::flat(0.0).translated(dx, dy, dz));
        prop_assert!((h0 - h1).abs() < 1e-9);
    }

    #[test]
    fn subset_diameter_is_smaller(seed in 0u64..500, keep in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..60).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0]).collect();
        let full = crown_diameter(&PointCloud::new(pts.clone()).unwrap()).unwrap();
        let sub = crown_diameter(&PointCloud::new(pts[..keep].to_vec()).unwrap()).unwrap();
        prop_assert!(sub <= full + 1e-12);
    }
}
