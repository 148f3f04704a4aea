//! Command-line entry point binding the library modules into reproducible
//! runs. Every subcommand is a pure function of (inputs, config, seed) and
//! writes a manifest (config hash, seed, version) alongside its outputs.
//!
//! Exit codes: 0 success, 1 runtime/config/I/O error (with a one-line
//! diagnostic on stderr), 2 argument parse error (from clap).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use anchor_cascade::anchors::{generate, AnchorPyramid};
use anchor_cascade::config::ExperimentConfig;
use anchor_cascade::dataio::{parse_wider, read_scenes, synth_scenes, write_scenes, Scene};
use anchor_cascade::evaluation::{average_precision, eval_images, fp_at_recall, FpCount};
use anchor_cascade::experiment::{run_seed, ScenePredictor, SuiteParams, SuiteReport};
use anchor_cascade::geometry::BBox;
use anchor_cascade::inference::{run_pipeline, Detection};
use anchor_cascade::matcher::{imbalance_ratio, match_anchors};
use anchor_cascade::toy::{
    scene_feature_seed, train, ModelFile, ToyModel, TrainSetup, MODEL_FORMAT_VERSION,
};

#[derive(Parser)]
#[command(name = "anchor-cascade", version, about = "Anchor-pyramid cascade detector toolkit")]
struct Cli {
    /// TOML experiment config; omitted sections use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-scene / per-seed work; results are independent
    /// of this value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the anchor pyramid as JSON lines plus a per-level summary.
    GenAnchors {
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-scene step-1 matching statistics (positives/negatives/imbalance).
    MatchStats {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate seeded synthetic scenes.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a WIDER-format annotation file to the JSON-lines scene format.
    ParseWider {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear per-anchor model on a scene file.
    TrainToy {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        out_model: PathBuf,
        /// Loss trace CSV (epoch,loss).
        #[arg(long)]
        out_trace: Option<PathBuf>,
    },
    /// Run the detection pipeline over scenes with a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate detections against ground-truth scenes.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write AP per configured IoU threshold.
        #[arg(long)]
        iou_sweep: bool,
        /// Comma-separated recall levels for false-positive counts.
        #[arg(long)]
        fp_at_recall: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the reference suite over the four cascade configurations.
    Ablate {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
}

/// Detection interchange record (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetRecord {
    image_id: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    let jobs = cli.jobs.max(1);

    match cli.command {
        Command::GenAnchors { out } => gen_anchors(&config, &out),
        Command::MatchStats { scenes, out } => match_stats(&config, &scenes, &out),
        Command::Synth { n, seed, out } => synth(&config, n, seed, &out),
        Command::ParseWider { gt, out } => parse_wider_cmd(&config, &gt, &out),
        Command::TrainToy { scenes, seed, epochs, learning_rate, out_model, out_trace } => {
            train_toy(&config, &scenes, seed, epochs, learning_rate, &out_model, out_trace.as_deref())
        }
        Command::Infer { model, scenes, seed, out } => infer(&config, &model, &scenes, seed, &out, jobs),
        Command::Eval { dets, gt, iou_sweep, fp_at_recall, out_dir } => {
            eval_cmd(&config, &dets, &gt, iou_sweep, fp_at_recall.as_deref(), &out_dir)
        }
        Command::Ablate { seeds, out_dir } => ablate(&config, seeds, &out_dir, jobs),
    }
}

// --- shared plumbing ---------------------------------------------------------------

fn io_err(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

fn create(path: &Path) -> Result<BufWriter<File>, String> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>, String> {
    Ok(BufReader::new(File::open(path).map_err(|e| io_err(path, e))?))
}

fn load_scenes(path: &Path) -> Result<Vec<Scene<f64>>, String> {
    read_scenes(open(path)?).map_err(|e| io_err(path, e))
}

/// Writes the run manifest next to the given output file or directory.
fn write_manifest(target: &Path, is_dir: bool, command: &str, config: &ExperimentConfig, seed: u64) -> Result<(), String> {
    let path = if is_dir {
        target.join("manifest.json")
    } else {
        let mut name = target.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        target.with_file_name(name)
    };
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config.hash(),
        seed,
    };
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| io_err(&path, e))?;
    writeln!(w).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Index-preserving parallel map over `jobs` scoped threads; output order is
/// independent of scheduling.
fn parallel_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let value = f(&items[i]);
                slots.lock().expect("worker panicked").get_mut(i).map(|s| *s = Some(value));
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

fn pyramid_from(config: &ExperimentConfig) -> Result<AnchorPyramid<f64>, String> {
    generate::<f64>(&config.pyramid).map_err(|e| e.to_string())
}

// --- subcommands -----------------------------------------------------------------

#[derive(Serialize)]
struct AnchorRecord<'a> {
    level: &'a str,
    row: usize,
    col: usize,
    shape: usize,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

fn gen_anchors(config: &ExperimentConfig, out: &Path) -> Result<(), String> {
    let pyramid = pyramid_from(config)?;
    let mut w = create(out)?;
    for (bbox, meta) in pyramid.boxes.iter().zip(&pyramid.meta) {
        let record = AnchorRecord {
            level: &pyramid.config.levels[meta.level].name,
            row: meta.row,
            col: meta.col,
            shape: meta.shape,
            x_min: bbox.x_min,
            y_min: bbox.y_min,
            x_max: bbox.x_max,
            y_max: bbox.y_max,
        };
        let line = serde_json::to_string(&record).map_err(|e| e.to_string())?;
        writeln!(w, "{line}").map_err(|e| io_err(out, e))?;
    }
    drop(w);

    let total = pyramid.len();
    println!("total anchors: {total}");
    for (i, level) in pyramid.config.levels.iter().enumerate() {
        let count = pyramid.level_count(i);
        println!(
            "  {}: stride {:>5.1}  scales {:?}  anchors {:>8}  ({:.2}%)",
            level.name,
            level.stride,
            level.scales,
            count,
            100.0 * count as f64 / total as f64
        );
    }
    write_manifest(out, false, "gen-anchors", config, config.seed)
}

fn match_stats(config: &ExperimentConfig, scenes_path: &Path, out: &Path) -> Result<(), String> {
    let pyramid = pyramid_from(config)?;
    let scenes = load_scenes(scenes_path)?;
    let mut w = create(out)?;
    writeln!(w, "image_id,anchors,positives,negatives,ignored,negatives_per_positive")
        .map_err(|e| io_err(out, e))?;
    let (mut total_pos, mut total_neg) = (0usize, 0usize);
    for scene in &scenes {
        let m = match_anchors(&pyramid.boxes, &scene.gt_boxes(), config.matching.step1);
        let ratio = imbalance_ratio(&m).map(|r| format!("{r:.2}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            scene.image_id,
            pyramid.len(),
            m.positives(),
            m.negatives(),
            m.ignored(),
            ratio
        )
        .map_err(|e| io_err(out, e))?;
        total_pos += m.positives();
        total_neg += m.negatives();
    }
    drop(w);
    if total_pos > 0 {
        println!(
            "{} scenes, overall imbalance 1:{:.1}",
            scenes.len(),
            total_neg as f64 / total_pos as f64
        );
    } else {
        println!("{} scenes, no positive anchors", scenes.len());
    }
    write_manifest(out, false, "match-stats", config, config.seed)
}

fn synth(config: &ExperimentConfig, n: usize, seed: Option<u64>, out: &Path) -> Result<(), String> {
    if n == 0 {
        return Err("--n must be positive".into());
    }
    let seed = seed.unwrap_or(config.seed);
    let scenes = synth_scenes::<f64>(n, seed, &config.synth);
    let mut w = create(out)?;
    write_scenes(&scenes, &mut w).map_err(|e| io_err(out, e))?;
    drop(w);
    write_manifest(out, false, "synth", config, seed)
}

fn parse_wider_cmd(config: &ExperimentConfig, gt: &Path, out: &Path) -> Result<(), String> {
    let scenes = parse_wider::<f64, _>(open(gt)?).map_err(|e| io_err(gt, e))?;
    let mut w = create(out)?;
    write_scenes(&scenes, &mut w).map_err(|e| io_err(out, e))?;
    drop(w);
    println!("parsed {} scenes", scenes.len());
    write_manifest(out, false, "parse-wider", config, config.seed)
}

fn train_toy(
    config: &ExperimentConfig,
    scenes_path: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    out_model: &Path,
    out_trace: Option<&Path>,
) -> Result<(), String> {
    let pyramid = pyramid_from(config)?;
    let scenes = load_scenes(scenes_path)?;
    let mut hyper = config.train;
    hyper.seed = seed.unwrap_or(config.seed);
    if let Some(e) = epochs {
        hyper.epochs = e;
    }
    if let Some(lr) = learning_rate {
        hyper.learning_rate = lr;
    }
    let setup = TrainSetup {
        cascade: config.cascade.clone(),
        loss: config.loss.clone(),
        th1: config.matching.step1,
        th2: config.matching.step2,
        features1: config.features.step1.clone(),
        features2: config.features.step2.clone(),
    };
    let result = train(&scenes, &pyramid, &setup, &hyper).map_err(|e| e.to_string())?;

    let file = ModelFile { format_version: MODEL_FORMAT_VERSION, model: result.model };
    let mut w = create(out_model)?;
    serde_json::to_writer(&mut w, &file).map_err(|e| io_err(out_model, e))?;
    writeln!(w).map_err(|e| io_err(out_model, e))?;
    drop(w);

    if let Some(trace_path) = out_trace {
        let mut w = create(trace_path)?;
        writeln!(w, "epoch,loss").map_err(|e| io_err(trace_path, e))?;
        for (epoch, loss) in result.loss_trace.iter().enumerate() {
            writeln!(w, "{epoch},{loss}").map_err(|e| io_err(trace_path, e))?;
        }
    }
    println!(
        "trained {} epochs on {} scenes; loss {} -> {}",
        hyper.epochs,
        scenes.len(),
        result.loss_trace.first().copied().unwrap_or(f64::NAN),
        result.loss_trace.last().copied().unwrap_or(f64::NAN),
    );
    write_manifest(out_model, false, "train-toy", config, hyper.seed)
}

fn load_model(path: &Path) -> Result<ToyModel<f64>, String> {
    let file: ModelFile<f64> = serde_json::from_reader(open(path)?).map_err(|e| io_err(path, e))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(format!(
            "{}: unsupported model format version {} (expected {})",
            path.display(),
            file.format_version,
            MODEL_FORMAT_VERSION
        ));
    }
    Ok(file.model)
}

fn infer(
    config: &ExperimentConfig,
    model_path: &Path,
    scenes_path: &Path,
    seed: Option<u64>,
    out: &Path,
    jobs: usize,
) -> Result<(), String> {
    let pyramid = pyramid_from(config)?;
    let model = load_model(model_path)?;
    let scenes = load_scenes(scenes_path)?;
    let seed = seed.unwrap_or(config.seed);

    let indexed: Vec<(usize, &Scene<f64>)> = scenes.iter().enumerate().collect();
    let results: Vec<Result<Vec<Detection<f64>>, String>> =
        parallel_map(&indexed, jobs, |&(idx, scene)| {
            let predictor = ScenePredictor {
                model: &model,
                anchors: &pyramid.boxes,
                gts: scene.gt_boxes(),
                features1: config.features.step1.clone(),
                features2: config.features.step2.clone(),
                seed1: scene_feature_seed(seed, idx, 1),
                seed2: scene_feature_seed(seed, idx, 2),
            };
            run_pipeline(&pyramid, &predictor, &config.cascade, &config.inference, scene.width, scene.height)
                .map_err(|e| format!("{}: {e}", scene.image_id))
        });

    let mut w = create(out)?;
    let mut total = 0usize;
    for (scene, dets) in scenes.iter().zip(results) {
        for det in dets? {
            let record = DetRecord {
                image_id: scene.image_id.clone(),
                x_min: det.bbox.x_min,
                y_min: det.bbox.y_min,
                x_max: det.bbox.x_max,
                y_max: det.bbox.y_max,
                score: det.score,
            };
            let line = serde_json::to_string(&record).map_err(|e| e.to_string())?;
            writeln!(w, "{line}").map_err(|e| io_err(out, e))?;
            total += 1;
        }
    }
    drop(w);
    println!("{total} detections over {} scenes", scenes.len());
    write_manifest(out, false, "infer", config, seed)
}

fn read_detections(path: &Path) -> Result<Vec<DetRecord>, String> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetRecord = serde_json::from_str(&line)
            .map_err(|e| format!("{} line {}: {e}", path.display(), idx + 1))?;
        out.push(record);
    }
    Ok(out)
}

fn eval_cmd(
    config: &ExperimentConfig,
    dets_path: &Path,
    gt_path: &Path,
    iou_sweep: bool,
    fp_levels: Option<&str>,
    out_dir: &Path,
) -> Result<(), String> {
    let scenes = load_scenes(gt_path)?;
    let records = read_detections(dets_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut by_image: std::collections::BTreeMap<&str, Vec<Detection<f64>>> = Default::default();
    for r in &records {
        let bbox = BBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
            .map_err(|e| format!("detection on {}: {e}", r.image_id))?;
        by_image.entry(&r.image_id).or_default().push(Detection { bbox, score: r.score });
    }
    for id in by_image.keys() {
        if !scenes.iter().any(|s| s.image_id == **id) {
            return Err(format!("detections reference unknown image_id {id:?}"));
        }
    }

    let images: Vec<(Vec<Detection<f64>>, Vec<BBox<f64>>, Vec<BBox<f64>>)> = scenes
        .iter()
        .map(|s| {
            (
                by_image.get(s.image_id.as_str()).cloned().unwrap_or_default(),
                s.gt_boxes(),
                s.ignore_boxes(),
            )
        })
        .collect();

    let base_iou = *config.eval.iou_thresholds.first().unwrap_or(&0.5);
    let curve = eval_images(&images, base_iou);
    let ap = average_precision(&curve, config.eval.interpolation);

    let pr_path = out_dir.join("pr_curve.csv");
    let mut w = create(&pr_path)?;
    writeln!(w, "score,recall,precision").map_err(|e| io_err(&pr_path, e))?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.score, p.recall, p.precision).map_err(|e| io_err(&pr_path, e))?;
    }
    drop(w);

    let ap_path = out_dir.join("ap.csv");
    let mut w = create(&ap_path)?;
    writeln!(w, "iou_threshold,ap").map_err(|e| io_err(&ap_path, e))?;
    if iou_sweep {
        for &t in &config.eval.iou_thresholds {
            let c = eval_images(&images, t);
            writeln!(w, "{t},{}", average_precision(&c, config.eval.interpolation))
                .map_err(|e| io_err(&ap_path, e))?;
        }
    } else {
        writeln!(w, "{base_iou},{ap}").map_err(|e| io_err(&ap_path, e))?;
    }
    drop(w);

    if let Some(levels) = fp_levels {
        let levels: Vec<f64> = levels
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad recall level {s:?}")))
            .collect::<Result<_, _>>()?;
        let fp_path = out_dir.join("fp_at_recall.csv");
        let mut w = create(&fp_path)?;
        writeln!(w, "recall_level,false_positives").map_err(|e| io_err(&fp_path, e))?;
        for (level, count) in fp_at_recall(&curve, &levels) {
            match count {
                FpCount::Reached(n) => writeln!(w, "{level},{n}"),
                FpCount::Unreached => writeln!(w, "{level},unreached"),
            }
            .map_err(|e| io_err(&fp_path, e))?;
        }
    }

    println!("AP@{base_iou} = {ap:.4} over {} images, {} detections", scenes.len(), records.len());
    write_manifest(out_dir, true, "eval", config, config.seed)
}

fn ablate(config: &ExperimentConfig, n_seeds: usize, out_dir: &Path, jobs: usize) -> Result<(), String> {
    if n_seeds == 0 {
        return Err("--seeds must be positive".into());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let params: &SuiteParams = &config.suite;
    let base = config.seed;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base.wrapping_add(i)).collect();

    // per-seed runs are independent; parallelize them
    let outcomes = parallel_map(&seeds, jobs, |&s| {
        run_seed(params, s).map_err(|e| format!("seed {s}: {e}"))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let report = SuiteReport {
        outcomes,
        iou_thresholds: params.eval.iou_thresholds.clone(),
        fp_recall_level: params.fp_recall_level,
    };

    let table = report.ablation_table();
    print!("{table}");

    let table_path = out_dir.join("ablation.csv");
    create(&table_path)?.write_all(table.as_bytes()).map_err(|e| io_err(&table_path, e))?;

    let imbalance_path = out_dir.join("imbalance.csv");
    create(&imbalance_path)?
        .write_all(report.imbalance_table().as_bytes())
        .map_err(|e| io_err(&imbalance_path, e))?;

    let report_path = out_dir.join("report.json");
    let mut w = create(&report_path)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| io_err(&report_path, e))?;
    writeln!(w).map_err(|e| io_err(&report_path, e))?;
    drop(w);

    write_manifest(out_dir, true, "ablate", config, base)
}
