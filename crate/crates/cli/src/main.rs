use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use fg3d_core::biometrics::{plot_biometrics, records_to_csv, Source};
use fg3d_core::detect::{boxes_from_json, boxes_to_json, detect_trees};
use fg3d_core::diffusion::{ensemble_sample, load_checkpoint, Checkpoint};
use fg3d_core::geom::io::{read_cloud, write_cloud};
use fg3d_core::geom::normalize_unit_cube;
use fg3d_core::pipeline::{self, streams, RunConfig};
use fg3d_core::scansim::{apply_rigid_jitter, default_tls_poses, simulate_als, simulate_tls};
use fg3d_core::synthforest::{generate_forest, load_scene, save_scene};
use fg3d_core::theory::run_theory_check;

#[derive(Parser)]
#[command(name = "fg3d", version, about = "Synthetic ALS/TLS forests and conditional point-cloud diffusion")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled plot scene.
    Synth {
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Simulate ALS and multi-pose TLS scans of a saved scene.
    Scan {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// ALS pulses per m².
        #[arg(long)]
        als_density: Option<f64>,
        #[arg(long)]
        tls_range: Option<f64>,
        /// CSV of scanner positions, one "x,y" per line; defaults to a hexagonal layout.
        #[arg(long)]
        tls_poses: Option<PathBuf>,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Detect tree boxes in an ALS cloud.
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        cell: Option<f64>,
        #[arg(long)]
        min_height: Option<f64>,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Build the paired dataset under <run-dir>/dataset.
    Dataset,
    /// Train on <run-dir>/dataset and write <run-dir>/train.
    Train,
    /// Generate one tree from its world-frame ALS crop.
    Generate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ignore the ALS condition.
        #[arg(long)]
        unconditional: bool,
    },
    /// Detect and generate every tree of a world-frame ALS cloud.
    GenerateLandscape {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Optional JSON summary path.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Evaluate the test split and biometric plots; writes <run-dir>/eval.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exhaustive check of the containment bound.
    TheoryCheck {
        #[arg(long, default_value_t = 100_000)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Also write the JSON report here.
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
    /// Per-tree biometrics of a cloud over given boxes.
    Biometrics {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value = "ALS")]
        source: String,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Dataset, training and evaluation, then the run manifest.
    Run,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.run_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<Checkpoint> {
    let p = path.clone().unwrap_or_else(|| cfg.output_dir.join("train/model.ckpt"));
    load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_poses(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut poses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.eq_ignore_ascii_case("x,y") {
            continue;
        }
        let (x, y) = line.split_once(',').with_context(|| format!("{}:{}: expected x,y", path.display(), ln + 1))?;
        poses.push([x.trim().parse()?, y.trim().parse()?]);
    }
    if poses.is_empty() {
        bail!("{} lists no poses", path.display());
    }
    Ok(poses)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    let out = cfg.output_dir.clone();
    match &cli.cmd {
        Cmd::Synth { index, trees, radius, output } => {
            let mut forest = cfg.plot_forest();
            forest.n_trees = trees.unwrap_or(forest.n_trees);
            forest.area_radius = radius.unwrap_or(forest.area_radius);
            let scene = generate_forest(&forest, cfg.seed_for(streams::SCENE, *index))?;
            save_scene(&scene, output)?;
            info!("{} trees, {} points -> {}", scene.trees.len(), scene.cloud.len(), output.display());
        }
        Cmd::Scan { scene, index, als_density, tls_range, tls_poses, output } => {
            let scene = load_scene(scene)?;
            let mut als_sensor = cfg.als.clone();
            als_sensor.point_density = als_density.unwrap_or(als_sensor.point_density);
            let mut tls_sensor = cfg.tls.clone();
            tls_sensor.max_range = tls_range.unwrap_or(tls_sensor.max_range);
            let poses = match tls_poses {
                Some(p) => read_poses(p)?,
                None => default_tls_poses(scene.area_radius, cfg.tls_pose_spacing),
            };
            let als = simulate_als(&scene, &als_sensor, cfg.seed_for(streams::ALS, *index));
            let mut tls = simulate_tls(&scene, &poses, &tls_sensor, cfg.seed_for(streams::TLS, *index));
            if cfg.jitter_translation > 0.0 || cfg.jitter_rotation > 0.0 {
                tls = apply_rigid_jitter(&tls, cfg.jitter_translation, cfg.jitter_rotation, cfg.seed_for(streams::JITTER, *index));
            }
            fs::create_dir_all(output)?;
            write_cloud(&output.join("als.ply"), &als)?;
            write_cloud(&output.join("tls.ply"), &tls)?;
            info!("ALS {} points, TLS {} points from {} poses", als.len(), tls.len(), poses.len());
        }
        Cmd::Detect { input, cell, min_height, output } => {
            let mut dc = cfg.detect.clone();
            dc.cell = cell.unwrap_or(dc.cell);
            dc.min_height = min_height.unwrap_or(dc.min_height);
            let boxes = detect_trees(&read_cloud(input)?, &dc);
            write_text(output, &boxes_to_json(&boxes))?;
            info!("{} boxes", boxes.len());
        }
        Cmd::Dataset => {
            fs::create_dir_all(&out)?;
            write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
            let ds = pipeline::build_dataset(&cfg, &out)?;
            let c = &ds.manifest.counts;
            info!("{} pairs (train {}, val {}, test {}), epsilon_hat {:?}", c.all, c.train, c.val, c.test, ds.manifest.epsilon_hat.all);
        }
        Cmd::Train => {
            let ds = pipeline::load_dataset(&out.join("dataset"))?;
            let (_, h) = pipeline::train_stage(&cfg, &ds, &out)?;
            if let Some(last) = h.checkpoints.last() {
                info!("final val cd {:.5} emd {:.5} epc {:.4}", last.val_cd, last.val_emd, last.val_epc);
            }
        }
        Cmd::Generate { input, output, checkpoint: ck_path, unconditional } => {
            let ck = checkpoint(&cfg, ck_path)?;
            let als = read_cloud(input)?.drop_attributes();
            if als.is_empty() {
                bail!("{} has no points", input.display());
            }
            let (cond, tf) = normalize_unit_cube(&als)?;
            let sched = ck.schedule.build()?;
            let use_cond = ck.conditional && !unconditional;
            let g = ensemble_sample(&ck.weights, use_cond.then_some(&cond), &cfg.generation.sample_config(), &sched, cfg.seed_for(streams::LANDSCAPE, 0));
            write_cloud(output, &tf.invert_cloud(&g))?;
            info!("{} points -> {}", g.len(), output.display());
        }
        Cmd::GenerateLandscape { input, output, checkpoint: ck_path, summary } => {
            let ck = checkpoint(&cfg, ck_path)?;
            let als = read_cloud(input)?;
            let r = pipeline::generate_landscape(&ck, &als, &cfg.detect, &cfg.generation, cfg.seed_for(streams::LANDSCAPE, 0))?;
            write_cloud(output, &r.merged)?;
            for (t, s) in r.trees.iter().zip(&r.seconds) {
                info!("box {}: {} points in {s:.2}s, out fraction {:.4}", t.box_index, t.cloud.len(), t.stats.out_fraction);
            }
            let s = &r.summary;
            info!("{} of {} boxes generated; mean out fraction {:?}, mean out distance {:?}", s.n_generated, s.n_detections, s.mean_out_fraction, s.mean_out_distance);
            if let Some(p) = summary {
                let v = serde_json::json!({ "config": cfg, "summary": s });
                write_text(p, &serde_json::to_string_pretty(&v)?)?;
            }
        }
        Cmd::Eval { checkpoint: ck_path } => {
            let ck = checkpoint(&cfg, ck_path)?;
            let ds = pipeline::load_dataset(&out.join("dataset"))?;
            let r = pipeline::evaluate_run(&cfg, &ds.test, &ck, &out)?;
            info!(
                "{} test pairs: cd {:.5} emd {:.5} epc {:?} (shuffled cd {:.5})",
                r.test.n_pairs, r.test.mean_cd, r.test.mean_emd, r.test.mean_epc, r.test.mean_shuffled_cd
            );
            pipeline::write_manifest(&cfg, &out)?;
        }
        Cmd::TheoryCheck { instances, grid, output } => {
            let s = run_theory_check(*instances, *grid, cfg.seed);
            let text = serde_json::to_string_pretty(&s)?;
            if let Some(p) = output {
                write_text(p, &text)?;
            }
            println!("{text}");
            if !s.passed() {
                bail!("bound violated");
            }
        }
        Cmd::Biometrics { input, boxes, source, output } => {
            let source: Source = source.parse().map_err(anyhow::Error::msg)?;
            let boxes = boxes_from_json(&fs::read_to_string(boxes)?)?;
            let records = plot_biometrics(&read_cloud(input)?, &boxes, source, &cfg.resolved_biometrics());
            write_text(output, &records_to_csv(&records))?;
            info!("{} records", records.len());
        }
        Cmd::Run => {
            let r = pipeline::run_pipeline(&cfg)?;
            info!("test cd {:.5} emd {:.5} epc {:?}; {} files in manifest", r.report.test.mean_cd, r.report.test.mean_emd, r.report.test.mean_epc, r.manifest.files.len());
        }
    }
    Ok(())
}
