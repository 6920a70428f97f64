use super::*;
use crate::geom::GroundModel;
use crate::synthforest::{compose_scene, TreeParams};

fn stem_only(height: f64) -> TreeParams {
    TreeParams {
        height,
        dbh: 0.3,
        crown_base_frac: 0.9,
        crown_radius: 0.5,
        whorl_count: 0,
        foliage_density: 0.0,
        taper_exponent: 0.0,
    }
}

fn conifer(density: f64) -> TreeParams {
    TreeParams {
        height: 12.0,
        dbh: 0.3,
        crown_base_frac: 0.4,
        crown_radius: 2.5,
        whorl_count: 5,
        foliage_density: density,
        taper_exponent: 0.7,
    }
}

#[test]
fn bare_ground_gives_only_ground_returns() {
    let scene = compose_scene(&[], GroundModel::flat(0.0), 10.0, 0).unwrap();
    let als = simulate_als(&scene, &AlsSensor::default(), 1);
    assert!(als.len() > 4000);
    assert!(als.labels().unwrap().iter().all(|&l| l == SemanticLabel::Ground));
}

#[test]
fn opaque_canopy_hides_the_lower_stem() {
    let p = conifer(2000.0);
    let scene = compose_scene(&[(p, [0.0, 0.0])], GroundModel::flat(0.0), 8.0, 2).unwrap();
    let sensor = AlsSensor { canopy_penetration_prob: 0.0, ..AlsSensor::default() };
    let als = simulate_als(&scene, &sensor, 3);
    let under = als
        .points()
        .iter()
        .zip(als.labels().unwrap())
        .filter(|(q, l)| **l == SemanticLabel::Stem && q[2] < p.crown_base())
        .count();
    assert_eq!(under, 0);
}

#[test]
fn ground_penetration_matches_per_column_product() {
    let p = TreeParams { foliage_density: 3.0, whorl_count: 2, ..conifer(3.0) };
    let scene = compose_scene(&[(p, [0.0, 0.0])], GroundModel::flat(0.0), 4.0, 4).unwrap();
    let sensor = AlsSensor { canopy_penetration_prob: 0.3, point_density: 400.0, ..AlsSensor::default() };
    let grid = OccupancyGrid::from_scene(&scene, sensor.voxel);
    let (_, rays) = simulate_als_detailed(&scene, &sensor, 5);
    let under: Vec<&AlsRay> = rays.iter().filter(|r| r.x.hypot(r.y) < p.crown_radius).collect();
    assert!(under.len() >= 6000, "{}", under.len());
    let (mut expected, mut var) = (0.0, 0.0);
    for r in &under {
        let k = grid.column_occupancy(r.x, r.y);
        let prob = if k < sensor.max_returns_per_column { 0.3f64.powi(k as i32) } else { 0.0 };
        expected += prob;
        var += prob * (1.0 - prob);
    }
    let observed = under.iter().filter(|r| r.reached_ground).count() as f64;
    assert!((observed - expected).abs() <= 3.0 * var.sqrt(), "observed {observed}, expected {expected} ± {}", var.sqrt());
}

#[test]
fn range_cut_removes_distant_tree() {
    let scene = compose_scene(&[(stem_only(8.0), [30.0, 0.0])], GroundModel::flat(0.0), 35.0, 0).unwrap();
    let tls = simulate_tls(&scene, &[[0.0, 0.0]], &TlsSensor { angular_step: 0.5f64.to_radians(), ..TlsSensor::default() }, 1);
    assert!(!tls.is_empty());
    assert!(tls.owners().unwrap().iter().all(|&o| o != 0));
    assert!(tls.points().iter().all(|q| q[0].hypot(q[1]).hypot(q[2] - 1.5) <= 25.0 + 0.05));
}

fn analytic_stem_rays(d: f64, r: f64, height: f64, sensor: &TlsSensor) -> f64 {
    let h = sensor.scanner_height;
    let az = 2.0 * (r / d).asin() / sensor.angular_step;
    let el = (((height - h) / d).atan() - ((-h) / d).atan()) / sensor.angular_step;
    az * el
}

#[test]
fn unobstructed_stem_count_matches_solid_angle() {
    let sensor = TlsSensor::default();
    let scene = compose_scene(&[(stem_only(10.0), [5.0, 0.0])], GroundModel::flat(0.0), 10.0, 0).unwrap();
    let tls = simulate_tls(&scene, &[[0.0, 0.0]], &sensor, 2);
    let hits = tls.labels().unwrap().iter().filter(|&&l| l == SemanticLabel::Stem).count() as f64;
    let expected = analytic_stem_rays(5.0, 0.15, 10.0, &sensor);
    assert!((hits - expected).abs() <= 0.2 * expected, "hits {hits} vs {expected}");
}

#[test]
fn near_stem_occludes_far_stem() {
    let sensor = TlsSensor::default();
    let trees = [(stem_only(10.0), [5.0, 0.0]), (stem_only(10.0), [10.0, 0.0])];
    let scene = compose_scene(&trees, GroundModel::flat(0.0), 12.0, 0).unwrap();
    let tls = simulate_tls(&scene, &[[0.0, 0.0]], &sensor, 3);
    let owners = tls.owners().unwrap();
    let near = owners.iter().filter(|&&o| o == 0).count();
    let far = owners.iter().filter(|&&o| o == 1).count();
    assert!(near > 1000);
    assert!((far as f64) < 0.1 * near as f64, "near {near} far {far}");
}

#[test]
fn scans_are_deterministic() {
    let scene = compose_scene(&[(conifer(50.0), [0.0, 0.0])], GroundModel::flat(0.0), 6.0, 0).unwrap();
    let s = TlsSensor { angular_step: 0.6f64.to_radians(), ..TlsSensor::default() };
    assert_eq!(simulate_tls(&scene, &[[4.0, 0.0]], &s, 9), simulate_tls(&scene, &[[4.0, 0.0]], &s, 9));
    assert_eq!(simulate_als(&scene, &AlsSensor::default(), 9), simulate_als(&scene, &AlsSensor::default(), 9));
}

#[test]
fn extraction_skips_empty_boxes_and_records_ids() {
    let p = conifer(150.0);
    let scene = compose_scene(&[(p, [0.0, 0.0])], GroundModel::flat(0.0), 10.0, 1).unwrap();
    let als = simulate_als(&scene, &AlsSensor::default(), 2);
    let tls_sensor = TlsSensor { angular_step: 0.4f64.to_radians(), ..TlsSensor::default() };
    let tls = simulate_tls(&scene, &[[6.0, 0.0], [-6.0, 0.0]], &tls_sensor, 3);
    let boxes = [ground_truth_box(&scene.trees[0], 0.5, 0.5), BBox3::new([50.0, 50.0, 0.0], [51.0, 51.0, 1.0])];
    let ex = extract_pairs(&scene, &als, &tls, &boxes, &ExtractConfig::default());
    assert_eq!(ex.pairs.len(), 1);
    assert_eq!(ex.pairs[0].tree_ids, vec![0]);
    assert_eq!(ex.skipped.len(), 1);
    assert_eq!(ex.skipped[0].box_index, 1);
    let pair = &ex.pairs[0];
    let bb = pair.als.bbox().unwrap().union(&pair.tls.bbox().unwrap());
    for k in 0..3 {
        assert!(bb.min[k] >= -1e-12 && bb.max[k] <= 1.0 + 1e-12);
    }
    // canopy visibility asymmetry
    let als_top = pair.transform.invert_cloud(&pair.als).points().iter().map(|q| q[2]).fold(f64::MIN, f64::max);
    let tls_top = pair.transform.invert_cloud(&pair.tls).points().iter().map(|q| q[2]).fold(f64::MIN, f64::max);
    assert!(als_top >= tls_top - 0.1, "als {als_top} tls {tls_top}");
}

#[test]
fn hex_poses_stay_inside_plot() {
    let poses = default_tls_poses(25.0, 12.0);
    assert_eq!(poses.len(), 1 + 6 + 12);
    assert!(poses.iter().all(|p| p[0].hypot(p[1]) <= 25.0));
}
