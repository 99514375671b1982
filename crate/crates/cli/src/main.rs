use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use picodet_core::backbone::classification_cost;
use picodet_core::data::{generate_synthetic, SynthSpec};
use picodet_core::graph::NormMode;
use picodet_core::metrics::{evaluate_map, ImageDetection};
use picodet_core::model::{model_cost, ModelCost};
use picodet_core::nas::{self, ArchGenotype, CostEstimator, SupernetFitness, SupernetTrainer, TraceEstimator};
use picodet_core::params::Checkpoint;
use picodet_core::train::{self, Trainer};
use picodet_core::{Error, ExperimentConfig, ModelConfig, ParamStore, PicoDet, Result};

#[derive(Parser)]
#[command(name = "picodet", version, about = "Train, evaluate and search lightweight anchor-free detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector.
    Train(TrainArgs),
    /// Compute mAP of a checkpoint (or of a predictions file) on a dataset.
    Eval(EvalArgs),
    /// Run a checkpoint on a directory of PNG images.
    Infer(InferArgs),
    /// Train a weight-sharing supernet with the sandwich rule.
    SupernetTrain(SupernetArgs),
    /// Evolutionary channel search on a trained supernet.
    Search(SearchArgs),
    /// Report parameters and FLOPs of a configuration.
    Flops(FlopsArgs),
    /// Render the synthetic shapes dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the state saved in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to the model description stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Dataset (COCO-JSON file or directory); defaults to the config's validation set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Score these detections (JSON lines) instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    input_size: Option<u32>,
    /// Where to write per-class AP as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    input_size: Option<u32>,
    /// Also write copies of the images with boxes drawn.
    #[arg(long)]
    draw: bool,
}

#[derive(Args)]
struct SupernetArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "runs/supernet")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    supernet: PathBuf,
    #[arg(long, default_value = "runs/search")]
    out: PathBuf,
    /// Cost ceiling in MFLOPs at the configured search input size.
    #[arg(long)]
    budget_flops: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Defaults to PicoDet-S with 80 classes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 320)]
    input_size: usize,
    /// Cost of the backbone as a 1000-way classifier instead.
    #[arg(long)]
    classification: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

/// One line of `infer` output.
#[derive(Debug, Serialize, Deserialize)]
struct ImageResult {
    image: String,
    #[serde(flatten)]
    detection: picodet_core::Detection,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Checkpoint(_) => 3,
        Error::Infeasible(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PICODET_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::SupernetTrain(a) => cmd_supernet_train(a),
        Command::Search(a) => cmd_search(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: TrainArgs) -> Result<String> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.max_iters {
        cfg.train.max_iters = Some(m);
    }
    let dataset = cfg.data.load_train()?;
    check_classes(&cfg.model, &dataset)?;
    let mut store = ParamStore::new();
    let model = PicoDet::build(&cfg.model, &mut store, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, store, cfg.train_setup(), dataset.len())?;
    if a.resume {
        trainer.resume(&a.out)?;
        log::info!("resumed at step {}", trainer.step);
    }
    write_file(&a.out.join("config.yaml"), &cfg.to_yaml())?;
    let outcome = trainer.fit(&dataset, Some(&a.out))?;
    let mut summary = format!("trained {} iterations, checkpoint {}", outcome.steps, train::model_path(&a.out).display());
    if let Some(m) = outcome.final_map {
        summary.push_str(&format!(", train mAP {:.3} mAP@0.5 {:.3}", m.map, m.map50));
    }
    Ok(summary)
}

fn check_classes(model: &ModelConfig, dataset: &picodet_core::Dataset) -> Result<()> {
    if let Some(&c) = dataset.class_ids().iter().next_back() {
        if c >= model.head.num_classes {
            return Err(Error::config(
                "model.head.num_classes",
                format!("dataset uses class id {c} but the head has {} classes", model.head.num_classes),
            ));
        }
    }
    Ok(())
}

/// Model from the config if given, else from the checkpoint metadata.
fn load_model(config: Option<&Path>, checkpoint: &Path) -> Result<(ExperimentConfig, PicoDet, ParamStore)> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let ckpt = Checkpoint::read(checkpoint)?;
            let model: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())
                .map_err(|e| Error::Checkpoint(format!("checkpoint lacks a usable model description: {e}")))?;
            ExperimentConfig { model, ..Default::default() }
        }
    };
    let mut store = ParamStore::new();
    let model = PicoDet::build(&cfg.model, &mut store, 0)?;
    store.load(checkpoint)?;
    Ok((cfg, model, store))
}

fn cmd_eval(a: EvalArgs) -> Result<String> {
    let (cfg, model) = match &a.checkpoint {
        Some(ck) => {
            let (c, m, s) = load_model(a.config.as_deref(), ck)?;
            (c, Some((m, s)))
        }
        None => match &a.config {
            Some(p) => (ExperimentConfig::load(p)?, None),
            None => (ExperimentConfig::default(), None),
        },
    };
    let dataset = match &a.data {
        Some(p) => picodet_core::Dataset::load(p, cfg.data.box_policy)?,
        None => cfg.data.load_val()?,
    };
    let num_classes = cfg.model.head.num_classes;
    let result = match (&a.predictions, model) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let preds = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<ImageDetection>)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            evaluate_map(&preds, &dataset.index.ground_truth(), num_classes)?
        }
        (None, Some((m, mut s))) => {
            let size = a.input_size.unwrap_or(cfg.train.eval_size);
            train::evaluate(&m, &mut s, &dataset, size, &cfg.model.backbone.ratios(), NormMode::Running)?.0
        }
        (None, None) => unreachable!("clap requires a checkpoint or predictions"),
    };
    let report = serde_json::to_string_pretty(&result)?;
    if let Some(out) = &a.out {
        write_file(out, &report)?;
    } else {
        log::info!("per-class AP:\n{report}");
    }
    Ok(format!("mAP {:.3} mAP@0.5 {:.3}", result.map, result.map50))
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn draw_box(img: &mut RgbImage, b: &picodet_core::BBox, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: u32| (v.max(0.0) as u32).min(hi - 1);
    let (x1, y1, x2, y2) = (clamp(b.x1, w), clamp(b.y1, h), clamp(b.x2, w), clamp(b.y2, h));
    for x in x1..=x2 {
        img.put_pixel(x, y1, color);
        img.put_pixel(x, y2, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1, y, color);
        img.put_pixel(x2, y, color);
    }
}

const PALETTE: [Rgb<u8>; 6] =
    [Rgb([230, 25, 75]), Rgb([60, 180, 75]), Rgb([0, 130, 200]), Rgb([245, 130, 48]), Rgb([145, 30, 180]), Rgb([70, 240, 240])];

fn cmd_infer(a: InferArgs) -> Result<String> {
    let (mut cfg, model, mut store) = load_model(a.config.as_deref(), &a.checkpoint)?;
    if let Some(t) = a.score_threshold {
        cfg.model.head.score_threshold = t;
    }
    let model = PicoDet { cfg: cfg.model.clone(), ..model };
    let files = list_pngs(&a.images)?;
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        images.push(image::open(f).map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?.to_rgb8());
    }
    let size = a.input_size.unwrap_or(cfg.train.eval_size);
    let dets = train::predict(&model, &mut store, &images, size, &cfg.model.backbone.ratios(), NormMode::Running, 8)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let out_path = a.out.join("detections.jsonl");
    let mut f = fs::File::create(&out_path).map_err(|e| Error::io(&out_path, e))?;
    let mut count = 0;
    for ((file, img), ds) in files.iter().zip(&images).zip(&dets) {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for d in ds {
            let line = serde_json::to_string(&ImageResult { image: name.clone(), detection: *d })?;
            writeln!(f, "{line}").map_err(|e| Error::io(&out_path, e))?;
            count += 1;
        }
        if a.draw {
            let mut canvas = img.clone();
            for d in ds {
                draw_box(&mut canvas, &d.bbox, PALETTE[d.class_id % PALETTE.len()]);
            }
            let vis = a.out.join("vis");
            fs::create_dir_all(&vis).map_err(|e| Error::io(&vis, e))?;
            canvas.save(vis.join(&name))?;
        }
    }
    Ok(format!("{count} detections on {} images written to {}", files.len(), out_path.display()))
}

fn cmd_supernet_train(a: SupernetArgs) -> Result<String> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.max_iters {
        cfg.train.max_iters = Some(m);
    }
    if cfg.model.backbone.block_ratios.take().is_some() {
        log::warn!("model.backbone.block_ratios is ignored: the supernet is built at full width");
    }
    let dataset = cfg.data.load_train()?;
    check_classes(&cfg.model, &dataset)?;
    let mut store = ParamStore::new();
    let model = PicoDet::build(&cfg.model, &mut store, cfg.train.seed)?;
    let mut trainer = SupernetTrainer::new(model, store, cfg.train_setup(), cfg.nas.space.clone())?;
    write_file(&a.out.join("config.yaml"), &cfg.to_yaml())?;
    let records = trainer.fit(&dataset, Some(&a.out))?;
    let last = records.last().map(|r| r.losses.iter().sum::<f64>() / r.losses.len() as f64);
    Ok(format!(
        "trained supernet for {} steps (final mean candidate loss {}), checkpoint {}",
        trainer.step,
        last.map_or("n/a".into(), |l| format!("{l:.4}")),
        a.out.join(nas::SUPERNET_FILE).display()
    ))
}

fn cmd_search(a: SearchArgs) -> Result<String> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.model.backbone.block_ratios = None;
    let mut store = ParamStore::new();
    let model = PicoDet::build(&cfg.model, &mut store, 0)?;
    store.load(&a.supernet)?;
    let blocks = cfg.model.backbone.num_blocks();
    let mut estimator = TraceEstimator::new(&cfg.model, cfg.nas.input_size as usize)?;
    let mut budget = cfg.nas.budget.clone();
    if let Some(b) = a.budget_flops {
        budget.max_flops = b;
    } else if let (false, Some(f)) = (budget.max_flops.is_finite(), cfg.nas.budget_fraction) {
        budget.max_flops = f * estimator.mflops(&ArchGenotype::uniform(blocks, cfg.nas.space.largest()))?;
    }
    if budget.max_flops.is_nan() || budget.max_flops <= 0.0 {
        return Err(Error::config("nas.budget.max_flops", format!("must be positive, got {}", budget.max_flops)));
    }
    // fail fast before loading data
    let smallest = estimator.mflops(&ArchGenotype::uniform(blocks, cfg.nas.space.smallest()))?;
    if smallest > budget.max_flops {
        return Err(Error::Infeasible(format!(
            "the smallest child needs {smallest:.2} MFLOPs, above the budget of {:.2}",
            budget.max_flops
        )));
    }
    let val = nas::subset(&cfg.data.load_val()?, budget.eval_subset_size);
    let mut fitness = SupernetFitness { model: &model, store: &mut store, subset: &val, input: cfg.nas.input_size };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let result = nas::evolve(&cfg.nas.space, blocks, &budget, &mut estimator, &mut fitness, &mut rng)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    nas::write_search_log(&a.out.join("search_log.jsonl"), &result.log)?;
    // JSON is valid YAML, so the fragment loads through the config reader
    let fragment = serde_json::to_string_pretty(&result.best.config_fragment())?;
    write_file(&a.out.join("best_genotype.yaml"), &fragment)?;
    let full = cfg.merged_with(&fragment)?;
    write_file(&a.out.join("best_config.yaml"), &full.to_yaml())?;
    Ok(format!(
        "best genotype {:?}: fitness {:.4}, {:.2} MFLOPs (budget {:.2}), {} evaluations",
        result.best.ratios, result.best_fitness, result.best_flops, budget.max_flops, result.evaluations
    ))
}

#[derive(Serialize)]
struct FlopsReport {
    input_size: usize,
    params: usize,
    macs: u64,
    elementwise: u64,
    gflops: f64,
    gmacs: f64,
}

fn cmd_flops(a: FlopsArgs) -> Result<String> {
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let report = if a.classification {
        let (macs, params) = classification_cost(&cfg.model.backbone, a.input_size, 1000)?;
        FlopsReport {
            input_size: a.input_size,
            params,
            macs,
            elementwise: 0,
            gflops: 2.0 * macs as f64 / 1e9,
            gmacs: macs as f64 / 1e9,
        }
    } else {
        let c: ModelCost = model_cost(&cfg.model, a.input_size, None)?;
        FlopsReport {
            input_size: a.input_size,
            params: c.params,
            macs: c.macs,
            elementwise: c.elementwise,
            gflops: c.gflops_strict(),
            gmacs: c.gmacs(),
        }
    };
    if a.json {
        return Ok(serde_json::to_string(&report)?);
    }
    Ok(format!(
        "input {0}x{0}: params {1:.3}M, FLOPs {2:.3}G (2*MACs + elementwise), MACs {3:.3}G",
        report.input_size,
        report.params as f64 / 1e6,
        report.gflops,
        report.gmacs
    ))
}

fn cmd_synth(a: SynthArgs) -> Result<String> {
    let mut spec = SynthSpec::default();
    if let Some(n) = a.num_images {
        spec.num_images = n;
    }
    if let Some(s) = a.image_size {
        spec.image_size = s;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let index = generate_synthetic(&spec, &a.out)?;
    Ok(format!("wrote {} images with {} boxes to {}", index.images.len(), index.annotations.len(), a.out.display()))
}
