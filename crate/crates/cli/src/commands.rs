use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use urveda::data::nifti::read_nifti1_file;
use urveda::data::phantom::{generate_phantoms, PhantomParams};
use urveda::data::resample::{normalize_resize, slice_volume};
use urveda::data::{preprocess_pair, DatasetManifest, SliceSample};
use urveda::edge::sobel_magnitude;
use urveda::metrics::{aggregate, evaluate, MetricReport, SegmentationMask};
use urveda::network::Model;
use urveda::trainer::{summarize, train_fold, LossMode};
use urveda::Tensor;

use crate::config::{load_config, ExplicitKeys, Overrides, RunConfig};
use crate::error::{CliError, Context, Result};
use crate::manifest::{manifest_path, RunManifest};
use crate::render;

#[derive(Debug, Parser)]
#[command(name = "urveda", version, about = "Cardiac MR segmentation: data preparation, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Slice paired `<id>.nii` / `<id>_gt.nii` volumes into training samples.
    Preprocess(PreprocessArgs),
    /// Write a synthetic dataset of labelled phantom slices.
    GeneratePhantoms(PhantomArgs),
    /// Cross-validated training on a prepared dataset.
    Train(TrainArgs),
    /// Per-class DSC and Hausdorff distance against a dataset's masks.
    Evaluate(EvaluateArgs),
    /// Predicted mask of one image, as an indexed PNG.
    Predict(PredictArgs),
    /// Class contours of the prediction drawn on the input image.
    Overlay(OverlayArgs),
    /// Replay the command recorded in a run manifest.
    Rerun(RerunArgs),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once([',', 'x'])
        .ok_or_else(|| format!("expected H,W, got {s:?}"))?;
    let n = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((n(h)?, n(w)?))
}

fn parse_loss(s: &str) -> std::result::Result<LossMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown loss {s:?} (cross-entropy, cross-entropy+dice)"))
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target extents `H,W`.
    #[arg(long, value_parser = parse_size, default_value = "64,64")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, value_parser = parse_size, default_value = "64,64")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file overriding the phantom shape parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest written by `preprocess` or `generate-phantoms`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only this fold of the split.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossMode>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "pred"])))]
pub struct EvaluateArgs {
    /// Predict every sample with this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.png` label images or `<id>.smp` samples.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Dataset manifest holding the reference masks.
    #[arg(long)]
    pub truth: PathBuf,
    /// Tab-separated table; a JSON twin is written next to it.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `.smp` sample or an uncompressed `.nii` volume.
    #[arg(long)]
    pub image: PathBuf,
    /// Slice of a NIfTI volume.
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: ImageArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[command(flatten)]
    pub input: ImageArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Tint the image with its Sobel edge map under the contours.
    #[arg(long)]
    pub edges: bool,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// Runs a parsed command; `argv` is recorded in the run manifest.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => preprocess(&a, argv),
        Command::GeneratePhantoms(a) => phantoms(&a, argv),
        Command::Train(a) => train(&a, argv),
        Command::Evaluate(a) => evaluate_cmd(&a, argv),
        Command::Predict(a) => predict(&a, argv),
        Command::Overlay(a) => overlay(&a, argv),
        Command::Rerun(a) => rerun(&a),
    }
}

fn to_json(v: &impl serde::Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).context(dir.display())
}

fn preprocess(a: &PreprocessArgs, argv: &[String]) -> Result<()> {
    require(&a.input, "input directory")?;
    let mut run = RunManifest::new("preprocess", argv);
    run.inputs = vec![a.input.clone()];
    run.outputs = vec![a.output.join("dataset.json"), a.output.join("samples")];
    run.config = json!({ "size": [a.size.0, a.size.1], "classes": a.classes });
    run.write(&manifest_path(&a.output, true))?;

    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .context(a.input.display())?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .context(a.input.display())?;
    names.sort();
    for path in names {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if name.ends_with(".nii.gz") {
            return Err(CliError::Data(format!(
                "{}: gzip-compressed NIfTI is not read; decompress it first (gunzip -k {name})",
                path.display()
            )));
        }
        let Some(stem) = name.strip_suffix(".nii") else {
            continue;
        };
        match stem.strip_suffix("_gt") {
            Some(id) => masks.insert(id.to_string(), path),
            None => images.insert(stem.to_string(), path),
        };
    }

    let mut manifest = DatasetManifest::new(a.size.0, a.size.1, a.classes);
    let mut paired = 0;
    for (id, img_path) in &images {
        let Some(mask_path) = masks.get(id) else {
            eprintln!("warning: {} has no {id}_gt.nii; skipped", img_path.display());
            manifest.skipped.push(img_path.display().to_string());
            continue;
        };
        let img = read_nifti1_file(img_path).context(img_path.display())?;
        let mask = read_nifti1_file(mask_path).context(mask_path.display())?;
        let samples = preprocess_pair(id, &img, &mask, a.classes, a.size).context(mask_path.display())?;
        for s in &samples {
            manifest.add_sample(&a.output, s)?;
        }
        paired += 1;
    }
    for (id, mask_path) in &masks {
        if !images.contains_key(id) {
            eprintln!("warning: {} has no {id}.nii; skipped", mask_path.display());
            manifest.skipped.push(mask_path.display().to_string());
        }
    }
    if manifest.samples.is_empty() {
        eprintln!("warning: no paired volumes in {}", a.input.display());
    }
    create_dir(&a.output)?;
    manifest.save(a.output.join("dataset.json"))?;
    println!(
        "{} samples from {paired} volume pairs, {} files skipped",
        manifest.samples.len(),
        manifest.skipped.len()
    );
    Ok(())
}

fn phantoms(a: &PhantomArgs, argv: &[String]) -> Result<()> {
    let params: PhantomParams = match &a.params {
        Some(p) => {
            require(p, "phantom parameter file")?;
            let text = std::fs::read_to_string(p).context(p.display())?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", p.display(), e.message())))?
        }
        None => PhantomParams::default(),
    };
    let mut run = RunManifest::new("generate-phantoms", argv);
    run.seed = Some(a.seed);
    run.inputs = a.params.iter().cloned().collect();
    run.outputs = vec![a.out.join("dataset.json"), a.out.join("samples")];
    run.config = json!({ "count": a.count, "size": [a.size.0, a.size.1], "params": to_json(&params) });
    run.write(&manifest_path(&a.out, true))?;

    let samples = generate_phantoms(a.count, a.seed, a.size.0, a.size.1, &params)?;
    let mut manifest = DatasetManifest::new(a.size.0, a.size.1, 4);
    for s in &samples {
        manifest.add_sample(&a.out, s)?;
    }
    manifest.save(a.out.join("dataset.json"))?;
    println!("{} phantoms written to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<SliceSample>)> {
    require(path, "dataset manifest")?;
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .iter()
        .map(|e| manifest.load_sample(base, e).context(base.join(&e.path).display()))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    require(&a.data, "dataset manifest")?;
    let (mut cfg, explicit) = match &a.config {
        Some(p) => {
            require(p, "config file")?;
            load_config(p)?
        }
        None => (RunConfig::default(), ExplicitKeys::default()),
    };
    cfg.apply(&Overrides {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        folds: a.folds,
        seed: a.seed,
        loss: a.loss,
        fold: a.fold,
    });
    let manifest = DatasetManifest::load(&a.data)?;
    cfg.bind_dataset(explicit, manifest.height, manifest.width, manifest.classes)?;
    let folds: Vec<usize> = match cfg.fold {
        Some(f) => vec![f],
        None => (0..cfg.training.folds).collect(),
    };

    let mut run = RunManifest::new("train", argv);
    run.seed = Some(cfg.training.seed);
    run.inputs = std::iter::once(a.data.clone()).chain(a.config.clone()).collect();
    run.outputs = folds
        .iter()
        .flat_map(|f| {
            let dir = a.out.join(format!("fold{f}"));
            [dir.join("best.ckpt"), dir.join("log.jsonl")]
        })
        .chain([a.out.join("summary.json")])
        .collect();
    run.config = to_json(&cfg);
    run.write(&manifest_path(&a.out, true))?;

    let (_, samples) = load_dataset(&a.data)?;
    let mut reports = Vec::new();
    for &f in &folds {
        let dir = a.out.join(format!("fold{f}"));
        create_dir(&dir)?;
        let log_path = dir.join("log.jsonl");
        let mut log = std::fs::File::create(&log_path).context(log_path.display())?;
        let mut log_err = None;
        let report = train_fold(&cfg.network, &samples, &cfg.training, f, |r| {
            eprintln!(
                "fold {f} epoch {:>3}  loss {}  val DSC {:.4}  ({:.1}s)",
                r.epoch,
                r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
                r.val_dsc,
                r.wall_seconds
            );
            let line = serde_json::to_string(r).expect("serializable");
            if let Err(e) = writeln!(log, "{line}") {
                log_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_err {
            return Err(CliError::Data(format!("{}: {e}", log_path.display())));
        }
        let ckpt = dir.join("best.ckpt");
        std::fs::write(&ckpt, &report.outcome.best_checkpoint).context(ckpt.display())?;
        println!(
            "fold {f}: best validation DSC {:.4} at epoch {}",
            report.outcome.best_val_dsc, report.outcome.best_epoch
        );
        reports.push(report);
    }
    let cv = summarize(reports);
    let summary = json!({
        "folds": cv.folds.iter().map(|r| json!({
            "fold": r.fold,
            "best_epoch": r.outcome.best_epoch,
            "best_val_dsc": r.outcome.best_val_dsc,
            "checkpoint": format!("fold{}/best.ckpt", r.fold),
            "validation_ids": r.validation_ids,
        })).collect::<Vec<_>>(),
        "mean_dsc": cv.mean_dsc,
        "min_dsc": cv.min_dsc,
        "max_dsc": cv.max_dsc,
    });
    let path = a.out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializable") + "\n").context(path.display())?;
    println!("mean best validation DSC {:.4} (min {:.4}, max {:.4})", cv.mean_dsc, cv.min_dsc, cv.max_dsc);
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    require(path, "checkpoint")?;
    Model::load(path).context(path.display())
}

fn predicted_mask(dir: &Path, id: &str, classes: usize) -> Result<SegmentationMask> {
    let png = dir.join(format!("{id}.png"));
    let smp = dir.join(format!("{id}.smp"));
    if png.exists() {
        render::read_mask(&png, classes)
    } else if smp.exists() {
        Ok(SliceSample::load(&smp).context(smp.display())?.mask)
    } else {
        Err(CliError::Data(format!("no {id}.png or {id}.smp in {}", dir.display())))
    }
}

fn evaluate_cmd(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    require(&a.truth, "dataset manifest")?;
    if let Some(p) = &a.pred {
        require(p, "prediction directory")?;
    }
    let json_path = a.report.with_extension("json");
    let table_path = if json_path == a.report {
        a.report.with_extension("tsv")
    } else {
        a.report.clone()
    };
    let mut run = RunManifest::new("evaluate", argv);
    run.inputs = [Some(a.truth.clone()), a.checkpoint.clone(), a.pred.clone()].into_iter().flatten().collect();
    run.outputs = vec![table_path.clone(), json_path.clone()];
    run.write(&manifest_path(&a.report, false))?;

    let manifest = DatasetManifest::load(&a.truth)?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        let c = &m.config;
        if (c.height, c.width, c.classes) != (manifest.height, manifest.width, manifest.classes) {
            return Err(CliError::Data(format!(
                "checkpoint expects {}×{} images with {} classes; dataset has {}×{} with {}",
                c.height, c.width, c.classes, manifest.height, manifest.width, manifest.classes
            )));
        }
    }
    let base = a.truth.parent().unwrap_or(Path::new("."));
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for entry in &manifest.samples {
        let scored = (|| -> Result<MetricReport> {
            let truth = manifest.load_sample(base, entry).context(base.join(&entry.path).display())?;
            let pred = match (&model, &a.pred) {
                (Some(m), _) => m.predict(&truth.image)?,
                (None, Some(dir)) => predicted_mask(dir, &entry.id, manifest.classes)?,
                (None, None) => unreachable!("clap requires a prediction source"),
            };
            Ok(evaluate(&pred, &truth.mask)?)
        })();
        match scored {
            Ok(r) => rows.push((entry.id.clone(), r)),
            Err(e) => {
                eprintln!("{}: {e}", entry.id);
                failures.push((entry.id.clone(), e.to_string()));
            }
        }
    }

    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let mean = aggregate(&reports);
    let mut table = String::new();
    if let Some(m) = &mean {
        table += &format!("id\t{}\n", m.header('\t'));
        for (id, r) in &rows {
            table += &format!("{id}\t{}\n", r.row('\t'));
        }
        table += &format!("mean\t{}\n", m.row('\t'));
    }
    std::fs::write(&table_path, &table).context(table_path.display())?;
    let structured = json!({
        "samples": rows.iter().map(|(id, r)| json!({ "id": id, "metrics": r })).collect::<Vec<_>>(),
        "mean": mean,
        "failures": failures.iter().map(|(id, e)| json!({ "id": id, "error": e })).collect::<Vec<_>>(),
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&structured).expect("serializable") + "\n")
        .context(json_path.display())?;
    if let Some(m) = &mean {
        println!("{}\n{}", m.header('\t'), m.row('\t'));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{} of {} samples could not be evaluated: {}",
            failures.len(),
            manifest.samples.len(),
            failures.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(", ")
        )))
    }
}

/// The model's input image: a stored sample as is, or one NIfTI slice
/// normalized and resampled to the model's extents.
fn load_image(a: &ImageArgs, model: &Model) -> Result<Tensor> {
    let (h, w) = (model.config.height, model.config.width);
    let path = &a.image;
    require(path, "image")?;
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    if name.ends_with(".smp") {
        let s = SliceSample::load(path).context(path.display())?;
        if s.extents() != (h, w) {
            return Err(CliError::Data(format!(
                "checkpoint expects {h}×{w} images, {} is {}×{}",
                path.display(),
                s.extents().0,
                s.extents().1
            )));
        }
        Ok(s.image)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        let vol = read_nifti1_file(path).context(path.display())?;
        let planes = slice_volume(&vol);
        let n = planes.len();
        let (_, plane) = planes
            .into_iter()
            .nth(a.slice)
            .ok_or_else(|| CliError::Data(format!("{}: slice {} of {n}", path.display(), a.slice)))?;
        Ok(normalize_resize(&plane, (h, w))?)
    } else {
        Err(CliError::Usage(format!("{}: expected a .smp or .nii image", path.display())))
    }
}

fn image_manifest(command: &str, a: &ImageArgs, out: &Path, argv: &[String]) -> RunManifest {
    let mut run = RunManifest::new(command, argv);
    run.inputs = vec![a.checkpoint.clone(), a.image.clone()];
    run.outputs = vec![out.to_path_buf()];
    run.config = json!({ "slice": a.slice });
    run
}

fn predict(a: &PredictArgs, argv: &[String]) -> Result<()> {
    image_manifest("predict", &a.input, &a.out, argv).write(&manifest_path(&a.out, false))?;
    let model = load_model(&a.input.checkpoint)?;
    let mask = model.predict(&load_image(&a.input, &model)?)?;
    render::write_mask(&a.out, &mask)?;
    println!("class pixel counts {:?}", mask.histogram());
    Ok(())
}

fn overlay(a: &OverlayArgs, argv: &[String]) -> Result<()> {
    let mut run = image_manifest("overlay", &a.input, &a.out, argv);
    run.config["edges"] = json!(a.edges);
    run.write(&manifest_path(&a.out, false))?;
    let model = load_model(&a.input.checkpoint)?;
    let image = load_image(&a.input, &model)?;
    let mask = model.predict(&image)?;
    let edges = if a.edges { Some(sobel_magnitude(&image)?.values) } else { None };
    render::write_rgb(&a.out, &render::overlay(&image, &mask, edges.as_ref())?)
}

fn rerun(a: &RerunArgs) -> Result<()> {
    require(&a.manifest, "run manifest")?;
    let run = RunManifest::read(&a.manifest)?;
    let cli = Cli::try_parse_from(&run.argv).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(CliError::Usage("a run manifest cannot replay another rerun".into()));
    }
    self::run(cli, &run.argv)
}
