use fg3d_core::detect::{detect_trees, DetectConfig};
use fg3d_core::scansim::{simulate_als, AlsSensor};
use fg3d_core::synthforest::{generate_forest, ForestConfig};

#[test]
fn twenty_tree_forest_recall_and_precision() {
    for seed in [3, 11] {
        let scene = generate_forest(&ForestConfig::default(), seed).unwrap();
        let als = simulate_als(&scene, &AlsSensor::default(), seed + 100);
        let boxes = detect_trees(&als, &DetectConfig::default());
        let found = scene.trees.iter().filter(|t| boxes.iter().any(|b| b.contains_xy(t.base[0], t.base[1]))).count();
        let matched = boxes.iter().filter(|b| scene.trees.iter().any(|t| b.contains_xy(t.base[0], t.base[1]))).count();
        let recall = found as f64 / scene.trees.len() as f64;
        let precision = matched as f64 / boxes.len() as f64;
        assert!(recall >= 0.9, "seed {seed}: recall {recall}");
        assert!(precision >= 0.8, "seed {seed}: precision {precision}");
        for b in &boxes {
            assert!(b.footprint_area() > 0.0 && b.extent()[2] >= DetectConfig::default().min_height);
        }
    }
}
