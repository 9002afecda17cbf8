//! `uie`: train the perception scorer and enhancement networks, generate
//! negatives, enhance and evaluate images, and render reports.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uie_core::backbone::Backbones;
use uie_core::config::RunConfig;
use uie_core::data::{ingest_dataset, DatasetKind, DatasetManifest, IngestOptions, MANIFEST_FILE};
use uie_core::enhancer::{enhance, ReferenceCnn};
use uie_core::io::{image_id, list_images, write_atomic};
use uie_core::metrics::evaluate_dataset;
use uie_core::negatives::{GeneratorSpec, NegativeBuilder};
use uie_core::perception::{evaluate_perception_model, train_perception_model, PerceptionModel};
use uie_core::report::{image_grid, loss_curve_svg};
use uie_core::trainer::{load_run_record, train_enhancer, TrainOptions};
use uie_core::{DType, Error, ImageTensor, Result};

#[derive(Parser, Debug)]
#[command(name = "uie", version, about = "Perception-guided underwater image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn the prompt pair on an opinion-scored dataset (`images/` + `scores.csv`).
    TrainQa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Declared maximum raw score of `scores.csv`.
        #[arg(long)]
        mos_max: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Output checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the enhancement network on a paired dataset (`input/` + `reference/`).
    TrainUie {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Negative cache directory; required when the regularizer is enabled.
        #[arg(long)]
        negatives: Option<PathBuf>,
        /// Perception checkpoint; required when the perception or regularizer terms are enabled.
        #[arg(long)]
        perception: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance one image or every image of a directory.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file (single input) or directory.
        #[arg(long)]
        out: PathBuf,
        /// Run in double precision.
        #[arg(long)]
        f64: bool,
    },
    /// Generate and cache negatives for every image in a directory.
    GenNegatives {
        /// Comma-separated: he, dcp, udcp, ibla, precomputed:<name>[=<dir>].
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Score a directory of images, optionally against references.
    Evaluate {
        #[arg(long)]
        enhanced: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        perception: Option<PathBuf>,
        /// CSV report path; a JSON summary is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss curves from training runs and image grids from directories.
    Report {
        /// Training output directories (each with `run_record.json`).
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
        /// Image directories shown as grid columns, matched by file stem.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<PathBuf>,
        /// Grid cell size in pixels.
        #[arg(long, default_value_t = 128)]
        cell: usize,
        /// At most this many grid rows.
        #[arg(long, default_value_t = 8)]
        max_rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env_overrides(|k| std::env::var(k).ok());
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.qa.seed = s;
        cfg.uie.seed = s;
    }
    Ok(cfg)
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::config(flag, format!("--{flag} is required")))
}

/// Reuse a persisted manifest beside the dataset, or ingest and persist one.
fn manifest_for(root: &Path, kind: DatasetKind, cfg: &RunConfig, mos_max: Option<f64>) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    if path.exists() {
        let m = DatasetManifest::load(&path)?;
        if m.kind == kind {
            log::info!("using manifest {}", path.display());
            return Ok(m);
        }
    }
    let opts = IngestOptions {
        seed: cfg.seed,
        train_fraction: cfg.data.train_fraction,
        mos_max: mos_max.or(cfg.data.mos_max),
        parallelism: cfg.parallelism,
    };
    let m = ingest_dataset(root, kind, &opts)?;
    m.save(&path)?;
    log::info!(
        "ingested {} entries ({} train, {} test) into {}",
        m.entries.len(),
        m.split.train_ids.len(),
        m.split.test_ids.len(),
        path.display()
    );
    Ok(m)
}

fn train_qa(
    common: Common,
    data: Option<PathBuf>,
    mos_max: Option<f64>,
    iterations: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(n) = iterations {
        cfg.qa.iterations = n;
    }
    let data = required(data.or(cfg.paths.data.clone()), "data")?;
    let out = required(out.or(cfg.paths.perception.clone()), "out")?;
    let manifest = manifest_for(&data, DatasetKind::Mos, &cfg, mos_max)?;
    let train = manifest.load_mos(Some(&manifest.split.train_ids), cfg.parallelism)?;
    let backbones = Backbones::load(&cfg.backbone, cfg.dtype())?;
    let outcome = train_perception_model(&train, &cfg.qa, &backbones, cfg.parallelism)?;
    let mut model = outcome.model;
    model.mos_scale = manifest.mos_max;
    model.save(&out)?;
    let log_path = out.with_extension("log.json");
    write_atomic(&log_path, &serde_json::to_vec_pretty(&outcome.log).expect("log is serializable"))?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("prompt loss {:.6} -> {:.6}", first.loss, last.loss);
    }
    let test = manifest.load_mos(Some(&manifest.split.test_ids), cfg.parallelism)?;
    if test.len() >= 3 {
        match evaluate_perception_model(&model, &test, cfg.parallelism) {
            Ok((p, s)) => println!("held-out PLCC {p:.4}, SROCC {s:.4} on {} images", test.len()),
            Err(e) => log::warn!("held-out correlation unavailable: {e}"),
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train_uie(
    common: Common,
    data: Option<PathBuf>,
    negatives: Option<PathBuf>,
    perception: Option<PathBuf>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(e) = epochs {
        cfg.uie.epochs = e;
    }
    cfg.validate()?;
    let needs_scorer = cfg.uie.needs_negatives() || (cfg.uie.enable_clip && cfg.uie.loss.lambda1 > 0.0);
    let negatives = negatives.or(cfg.paths.negatives.clone());
    if cfg.uie.needs_negatives() && negatives.is_none() {
        return Err(Error::config(
            "negatives",
            "--negatives is required when the contrastive term is enabled",
        ));
    }
    let perception_path = perception.or(cfg.paths.perception.clone());
    if needs_scorer && perception_path.is_none() {
        return Err(Error::config(
            "perception",
            "--perception is required when the perception or contrastive term is enabled",
        ));
    }
    let data = required(data.or(cfg.paths.data.clone()), "data")?;
    let out = required(out.or(cfg.paths.out.clone()), "out")?;
    let dtype = cfg.dtype();

    let manifest = manifest_for(&data, DatasetKind::Paired, &cfg, None)?;
    let pairs = manifest.load_pairs(Some(&manifest.split.train_ids), cfg.parallelism)?;
    let perception = match &perception_path {
        Some(p) => PerceptionModel::load(p, dtype)?,
        None => PerceptionModel::new(Backbones::load(&cfg.backbone, dtype)?)?,
    };
    let sets = if cfg.uie.needs_negatives() {
        let builder = NegativeBuilder::new(cfg.negatives.specs()?, negatives)?;
        let inputs: Vec<(String, ImageTensor)> =
            pairs.iter().map(|p| (p.id.clone(), p.input.clone())).collect();
        let sets = builder.build_all(&inputs, cfg.parallelism)?;
        log::info!(
            "negatives ready: {} generated, {} from cache",
            builder.generated(),
            builder.cache_hits()
        );
        sets
    } else {
        Default::default()
    };
    let net = ReferenceCnn::new(cfg.uie.enhancer.clone(), dtype, &perception.backbones.device)?;
    let record = train_enhancer(
        &pairs,
        &sets,
        &perception,
        &net,
        &cfg.uie,
        TrainOptions {
            out_dir: Some(out.clone()),
            observer: None,
        },
    )?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    if let (Some(a), Some(b)) = (record.epochs.first(), record.epochs.last()) {
        println!(
            "{} epochs in {:.1}s, total loss {:.6} -> {:.6}",
            record.epochs.len(),
            record.wall_clock_secs,
            a.l_total,
            b.l_total
        );
    }
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

fn run_enhance(input: PathBuf, checkpoint: PathBuf, out: PathBuf, f64: bool) -> Result<()> {
    let dtype = if f64 { DType::F64 } else { DType::F32 };
    let device = uie_core::backbone::default_device();
    let (net, _) = ReferenceCnn::load(&checkpoint, dtype, &device)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        list_images(&input)?
            .into_iter()
            .map(|p| {
                let target = out.join(format!("{}.png", image_id(&p)));
                (p, target)
            })
            .collect()
    } else {
        vec![(input, out)]
    };
    if jobs.is_empty() {
        return Err(Error::Dataset("no input images".into()));
    }
    for (src, dst) in &jobs {
        let img = ImageTensor::load(src)?;
        enhance(&img, &net, dtype, &device)?.save_png(dst)?;
    }
    println!("enhanced {} image(s)", jobs.len());
    Ok(())
}

fn gen_negatives(methods: Vec<String>, input_dir: PathBuf, cache_dir: PathBuf) -> Result<()> {
    let specs: Vec<GeneratorSpec> = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let builder = NegativeBuilder::new(specs, Some(cache_dir.clone()))?;
    let files = list_images(&input_dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", input_dir.display())));
    }
    let parallelism = uie_core::Parallelism::default();
    let inputs = parallelism.try_map(&files, |p| Ok::<_, Error>((image_id(p), ImageTensor::load(p)?)))?;
    builder.build_all(&inputs, parallelism)?;
    println!(
        "{} images: {} negatives generated, {} reused, cache {}",
        inputs.len(),
        builder.generated(),
        builder.cache_hits(),
        cache_dir.display()
    );
    Ok(())
}

fn run_evaluate(enhanced: PathBuf, reference: Option<PathBuf>, perception: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let model = match &perception {
        Some(p) => Some(PerceptionModel::load(p, DType::F64)?),
        None => None,
    };
    let report = evaluate_dataset(
        &enhanced,
        reference.as_deref(),
        model.as_ref(),
        uie_core::Parallelism::default(),
    )?;
    let summary = report.write(&out)?;
    println!(
        "{} rows; uciqe {:.4}, uiqm {:.4}{}{}",
        report.summary.count,
        report.summary.uciqe,
        report.summary.uiqm,
        report
            .summary
            .psnr
            .map(|p| format!(", psnr {p:.3}"))
            .unwrap_or_default(),
        report
            .summary
            .clip_score
            .map(|c| format!(", clip {c:.2}"))
            .unwrap_or_default(),
    );
    println!("wrote {} and {}", out.display(), summary.display());
    Ok(())
}

fn run_report(runs: Vec<PathBuf>, grid: Vec<PathBuf>, cell: usize, max_rows: usize, out: PathBuf) -> Result<()> {
    if runs.is_empty() && grid.is_empty() {
        return Err(Error::InvalidArgument("give --runs and/or --grid".into()));
    }
    if !runs.is_empty() {
        let mut series = Vec::new();
        for dir in &runs {
            let rec = load_run_record(&dir.join("run_record.json"))?;
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            series.push((name, rec.loss_curve()));
        }
        let svg = loss_curve_svg(&series, "mean total loss per epoch")?;
        let path = out.join("loss_curve.svg");
        write_atomic(&path, svg.as_bytes())?;
        println!("wrote {}", path.display());
    }
    if !grid.is_empty() {
        let ids: Vec<String> = list_images(&grid[0])?.iter().map(|p| image_id(p)).take(max_rows).collect();
        let mut rows = Vec::new();
        for id in &ids {
            let mut row = Vec::new();
            for dir in &grid {
                let path = list_images(dir)?
                    .into_iter()
                    .find(|p| &image_id(p) == id)
                    .ok_or_else(|| Error::Dataset(format!("`{id}` missing from {}", dir.display())))?;
                row.push(ImageTensor::load(&path)?);
            }
            rows.push(row);
        }
        let path = out.join("grid.png");
        image_grid(&rows, cell)?.save_png(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainQa {
            common,
            data,
            mos_max,
            iterations,
            out,
        } => train_qa(common, data, mos_max, iterations, out),
        Command::TrainUie {
            common,
            data,
            negatives,
            perception,
            epochs,
            out,
        } => train_uie(common, data, negatives, perception, epochs, out),
        Command::Enhance {
            input,
            checkpoint,
            out,
            f64,
        } => run_enhance(input, checkpoint, out, f64),
        Command::GenNegatives {
            methods,
            input_dir,
            cache_dir,
        } => gen_negatives(methods, input_dir, cache_dir),
        Command::Evaluate {
            enhanced,
            reference,
            perception,
            out,
        } => run_evaluate(enhanced, reference, perception, out),
        Command::Report {
            runs,
            grid,
            cell,
            max_rows,
            out,
        } => run_report(runs, grid, cell, max_rows, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
