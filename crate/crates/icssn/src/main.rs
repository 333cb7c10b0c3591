//! The `icssn` command line: the library's workflows as subcommands.
//!
//! * `synth` — generate a synthetic dataset directory from a run config.
//! * `preprocess` — equalize and augment a dataset directory.
//! * `train` — run (or resume) the alternating two-branch training loop.
//! * `evaluate` — score a checkpoint on a held-out split.
//! * `report` — fold a run's artifacts into one JSON/text summary.
//! * `cam` — write Grad-CAM overlays for a checkpoint and an image.
//!
//! Every subcommand reads the same TOML run configuration, so a single file
//! pins an experiment end to end.  Datasets are directories of PNG tiles
//! (`images/`, `masks/`, `manifest.json`); runs are directories of
//! checkpoints plus `rounds.json`.

use clap::{Parser, Subcommand, ValueEnum};
use icssn::cam::{grad_cam_classification, grad_cam_segmentation, write_cam_pngs};
use icssn::classifier::JointLabel;
use icssn::data::{
    generate_synthetic_dataset, load_dataset, preprocess_dataset, save_dataset, split_dataset,
    DatasetManifest, LoadedDataset, Mask, Sample, Split, Tile, DEFAULT_RESOLUTION_M,
};
use icssn::report::{self, RunReport};
use icssn::train::{
    load_checkpoint, predict_masks, resume_iterative_training, run_iterative_training, Branch,
    Checkpoint, Models, RoundLog, RunConfig,
};
use icssn::{IcssnError, Result};
use ndarray::{Array2, Array3};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "icssn",
    about = "Old-landslide mapping: data synthesis, alternating training, evaluation, and attribution",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from the run configuration.
    Synth {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Seed for scene generation and the stratified split.
        #[arg(long)]
        seed: u64,
        /// Output dataset directory (images/, masks/, manifest.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram-equalize a dataset and expand train/val with the standard
    /// flip/rotation set; the test split is equalized only.
    Preprocess {
        /// Input dataset directory.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; its tile size must match the dataset.
        #[arg(long)]
        config: PathBuf,
    },
    /// Train both branches by alternating rounds with encoder transfer.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (as written by `synth` or `preprocess`).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and rounds.json.
        #[arg(long)]
        out: PathBuf,
        /// Override training.max_rounds.  The override is part of the
        /// effective configuration, so pass the same value when resuming.
        #[arg(long)]
        rounds: Option<usize>,
        /// Run seed (initialisation, batching, pairing).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume the interrupted run that produced this checkpoint (a
        /// .ckpt file or the run directory itself); training continues in
        /// that directory.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Score a trained checkpoint on one dataset split.
    Evaluate {
        /// Which branch to score; must match the checkpoint.
        #[arg(long, value_enum)]
        task: Task,
        /// Checkpoint file (best_*.ckpt or latest_*.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration the checkpoint was trained with.
        #[arg(long)]
        config: PathBuf,
        /// Dataset split to score.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the metrics JSON here.  `report --run` folds in files
        /// named eval_classification.json / eval_segmentation.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pairing seed for the classification task.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarise a configuration (and, when given, a run directory) as one
    /// document: complexity, scoring conventions, training rounds, metrics.
    Report {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding rounds.json and optional eval_*.json files.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Write the JSON document here (default: <run>/report.json when
        /// --run is given, otherwise no file is written).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the JSON document instead of the text tables.
        #[arg(long)]
        json: bool,
    },
    /// Write Grad-CAM PNGs for a checkpoint: `<out>` gets the overlay and
    /// `<out stem>_heat.png` the raw grayscale map.
    Cam {
        /// Checkpoint file; its branch decides the attribution.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input RGB tile (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Overlay output path (PNG).
        #[arg(long)]
        out: PathBuf,
        /// Run configuration the checkpoint was trained with.
        #[arg(long)]
        config: PathBuf,
        /// Region mask PNG for segmentation checkpoints (0/1 or 0/255);
        /// omitted, the segmenter's own prediction marks the region.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Joint pair label to attribute for classification checkpoints
        /// (LL, LS, SL, SS); omitted, the predicted label is used.
        #[arg(long)]
        target: Option<String>,
    },
}

/// `evaluate --task` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Classify,
    Segment,
}

impl Task {
    fn branch(self) -> Branch {
        match self {
            Task::Classify => Branch::Classification,
            Task::Segment => Branch::Segmentation,
        }
    }
}

/// `evaluate --split` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, seed, out } => synth(&config, seed, &out),
        Command::Preprocess { input, out, config } => preprocess(&input, &out, &config),
        Command::Train {
            config,
            data,
            out,
            rounds,
            seed,
            resume,
        } => train(&config, &data, &out, rounds, seed, resume.as_deref()),
        Command::Evaluate {
            task,
            checkpoint,
            data,
            config,
            split,
            out,
            seed,
        } => evaluate(task, &checkpoint, &data, &config, split, out.as_deref(), seed),
        Command::Report {
            config,
            run,
            out,
            json,
        } => report_cmd(&config, run.as_deref(), out.as_deref(), json),
        Command::Cam {
            checkpoint,
            image,
            out,
            config,
            mask,
            target,
        } => cam(&checkpoint, &image, &out, &config, mask.as_deref(), target.as_deref()),
    }
}

fn synth(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let samples = generate_synthetic_dataset(&cfg.synth_config(), seed)?;
    let manifest = split_dataset(&samples, cfg.data.split, seed)?;
    save_dataset(out, &samples, &manifest)?;
    println!(
        "wrote {} tiles of {}x{} to {}",
        samples.len(),
        cfg.data.tile_size,
        cfg.data.tile_size,
        out.display()
    );
    print_split_counts(&manifest);
    Ok(())
}

fn preprocess(input: &Path, out: &Path, config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = load_dataset(input)?;
    if let Some(first) = ds.samples().next() {
        if first.tile.size() != cfg.data.tile_size {
            return Err(IcssnError::Config(format!(
                "dataset tiles are {}px but data.tile_size is {}",
                first.tile.size(),
                cfg.data.tile_size
            )));
        }
    }
    let before = ds.len();
    let (samples, manifest) = preprocess_dataset(&ds)?;
    save_dataset(out, &samples, &manifest)?;
    println!(
        "equalized {} tiles, expanded train/val to {} total; wrote {}",
        before,
        samples.len(),
        out.display()
    );
    print_split_counts(&manifest);
    Ok(())
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    rounds: Option<usize>,
    seed: u64,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(r) = rounds {
        cfg.training.max_rounds = r;
        cfg.validate()?;
    }
    let ds = load_dataset(data)?;

    let outcome = match resume {
        Some(ckpt) => {
            let dir = run_dir_of(ckpt);
            if dir != out {
                eprintln!("note: resuming in {} (from --resume)", dir.display());
            }
            resume_iterative_training(&ds, &cfg, seed, &dir)?
        }
        None => {
            if out.join("rounds.json").exists() {
                return Err(IcssnError::invalid(
                    "train",
                    format!(
                        "{} already holds a run; pass --resume to continue it \
                         or choose a fresh --out",
                        out.display()
                    ),
                ));
            }
            run_iterative_training(&ds, &cfg, seed, Some(out))?
        }
    };

    let run_dir = resume.map_or_else(|| out.to_path_buf(), run_dir_of);
    for r in &outcome.log.rounds {
        println!(
            "round {}: classification best val {:.6}, segmentation best val {:.6}{}",
            r.round,
            r.cls_best_val,
            r.seg_best_val,
            if r.improved { "" } else { "  (no improvement)" }
        );
    }
    if let Some(reason) = &outcome.log.stop_reason {
        println!("stopped: {reason}");
    }
    println!(
        "best checkpoints: {} and {}",
        run_dir.join("best_classification.ckpt").display(),
        run_dir.join("best_segmentation.ckpt").display()
    );
    Ok(())
}

fn evaluate(
    task: Task,
    checkpoint: &Path,
    data: &Path,
    config: &Path,
    split: SplitArg,
    out: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut ckpt = load_checkpoint_for(&cfg, checkpoint, task.branch())?;
    let models = Models::from_config(&cfg)?;
    let ds = load_dataset(data)?;
    let samples = owned_split(&ds, split.split());
    if samples.is_empty() {
        return Err(IcssnError::invalid(
            "evaluate",
            format!("the {:?} split of {} is empty", split, data.display()),
        ));
    }
    let batch = cfg.training.batch_size;

    let json = match task {
        Task::Classify => {
            let eval = report::evaluate_classifier(&models, &mut ckpt.params, &samples, batch, seed)?;
            serde_json::to_string_pretty(&eval)?
        }
        Task::Segment => {
            let eval = report::evaluate_segmenter(&models, &mut ckpt.params, &samples, batch)?;
            serde_json::to_string_pretty(&eval)?
        }
    };
    println!("{json}");
    if let Some(path) = out {
        write_text(path, &json)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn report_cmd(config: &Path, run: Option<&Path>, out: Option<&Path>, json: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut rep = RunReport::for_config(&cfg)?;

    if let Some(dir) = run {
        let rounds = dir.join("rounds.json");
        if rounds.exists() {
            let log: RoundLog = serde_json::from_str(&std::fs::read_to_string(&rounds)?)?;
            rep.training = Some(report::summarize_rounds(&log));
        }
        let cls = dir.join("eval_classification.json");
        if cls.exists() {
            rep.classification = Some(serde_json::from_str(&std::fs::read_to_string(&cls)?)?);
        }
        let seg = dir.join("eval_segmentation.json");
        if seg.exists() {
            rep.segmentation = Some(serde_json::from_str(&std::fs::read_to_string(&seg)?)?);
        }
    }

    if json {
        println!("{}", rep.to_json());
    } else {
        print!("{}", rep.render_text());
    }
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| run.map(|d| d.join("report.json")));
    if let Some(path) = target {
        write_text(&path, &rep.to_json())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cam(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    config: &Path,
    mask: Option<&Path>,
    target: Option<&str>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let models = Models::from_config(&cfg)?;
    let tile = load_tile_png(image)?;

    let ckpt = load_checkpoint(checkpoint)?;
    warn_on_config_mismatch(&cfg, &ckpt);
    let mut params = ckpt.params;

    let heat = match ckpt.meta.branch.as_str() {
        "classification" => {
            let label = match target {
                Some(text) => parse_joint_label(text)?,
                None => {
                    let probs =
                        models
                            .classifier
                            .classify_pair(&models.encoder, &mut params, &tile, &tile)?;
                    let argmax = (0..4).max_by(|&p, &q| probs[p].total_cmp(&probs[q])).unwrap();
                    JointLabel::ALL[argmax]
                }
            };
            println!("attributing joint class {label:?}");
            grad_cam_classification(&models.encoder, &models.classifier, &mut params, &tile, label)?
        }
        "segmentation" => {
            let region = match mask {
                Some(path) => load_mask_png(path)?,
                None => {
                    let probe = Sample::new(
                        "cam".into(),
                        tile.clone(),
                        Mask::new(Array2::zeros((tile.size(), tile.size())))?,
                    )?;
                    predict_masks(&models, &mut params, &[probe], 1)?.remove(0)
                }
            };
            let pixels = region.labels.iter().filter(|&&v| v == 1).count();
            println!(
                "attributing landslide logits over {pixels} region pixel{}{}",
                if pixels == 1 { "" } else { "s" },
                if mask.is_some() { "" } else { " (predicted)" }
            );
            grad_cam_segmentation(&models.encoder, &models.segmenter, &mut params, &tile, &region)?
        }
        other => {
            return Err(IcssnError::invalid(
                "cam",
                format!("checkpoint holds unknown branch {other:?}"),
            ))
        }
    };

    if heat.flat {
        eprintln!("note: the attribution is flat (zero gradient); the maps are all black");
    }
    write_cam_pngs(&tile, &heat, out)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("cam");
    println!(
        "wrote {} and {}",
        out.display(),
        out.with_file_name(format!("{stem}_heat.png")).display()
    );
    Ok(())
}

/// Loads a checkpoint and checks it against the config and expected branch.
fn load_checkpoint_for(cfg: &RunConfig, path: &Path, branch: Branch) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.branch != branch.as_str() {
        return Err(IcssnError::invalid(
            "evaluate",
            format!(
                "checkpoint holds the {} branch; pass --task {}",
                ckpt.meta.branch,
                match ckpt.meta.branch.as_str() {
                    "classification" => "classify",
                    _ => "segment",
                }
            ),
        ));
    }
    warn_on_config_mismatch(cfg, &ckpt);
    Ok(ckpt)
}

/// A mismatched hash usually means a different architecture; shape errors
/// follow, but inference-irrelevant edits (loss weights, epoch budgets)
/// also change the hash, so this only warns.
fn warn_on_config_mismatch(cfg: &RunConfig, ckpt: &Checkpoint) {
    let hash = cfg.config_hash();
    if ckpt.meta.config_hash != hash {
        eprintln!(
            "warning: checkpoint config hash {} differs from this config ({hash})",
            ckpt.meta.config_hash
        );
    }
}

/// The run directory behind a `--resume` value: a `.ckpt` file's parent, or
/// the path itself when it is already a directory.
fn run_dir_of(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    }
}

fn owned_split(ds: &LoadedDataset, split: Split) -> Vec<Sample> {
    ds.split(split).into_iter().cloned().collect()
}

fn print_split_counts(manifest: &DatasetManifest) {
    for (name, ids, counts) in [
        ("train", &manifest.train, &manifest.train_counts),
        ("val", &manifest.val, &manifest.val_counts),
        ("test", &manifest.test, &manifest.test_counts),
    ] {
        println!(
            "  {name}: {} ({} landslide / {} slope)",
            ids.len(),
            counts.landslide,
            counts.slope
        );
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_joint_label(text: &str) -> Result<JointLabel> {
    match text.to_ascii_uppercase().as_str() {
        "LL" => Ok(JointLabel::LL),
        "LS" => Ok(JointLabel::LS),
        "SL" => Ok(JointLabel::SL),
        "SS" => Ok(JointLabel::SS),
        other => Err(IcssnError::invalid(
            "cam",
            format!("--target must be LL, LS, SL, or SS, got {other:?}"),
        )),
    }
}

fn load_tile_png(path: &Path) -> Result<Tile> {
    let rgb = image::open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .expect("decoded buffer matches dimensions");
    Tile::new(pixels, DEFAULT_RESOLUTION_M)
}

/// Reads a mask PNG, accepting either 0/1 labels (as written by `synth`)
/// or the visual 0/255 convention.
fn load_mask_png(path: &Path) -> Result<Mask> {
    let gray = image::open(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    let mut labels = Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("decoded buffer matches dimensions");
    if labels.iter().any(|&v| v > 1) {
        if labels.iter().all(|&v| v == 0 || v == 255) {
            labels.mapv_inplace(|v| u8::from(v == 255));
        } else {
            return Err(IcssnError::invalid(
                "cam",
                format!(
                    "mask {} must be binary (0/1 or 0/255)",
                    path.display()
                ),
            ));
        }
    }
    Mask::new(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_labels_parse_case_insensitively() {
        assert_eq!(parse_joint_label("ls").unwrap(), JointLabel::LS);
        assert_eq!(parse_joint_label("SS").unwrap(), JointLabel::SS);
        assert!(parse_joint_label("XY").is_err());
    }

    #[test]
    fn run_dir_strips_checkpoint_file_names() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("latest_segmentation.ckpt");
        std::fs::write(&ckpt, b"x").unwrap();
        assert_eq!(run_dir_of(&ckpt), dir.path());
        assert_eq!(run_dir_of(dir.path()), dir.path());
    }

    #[test]
    fn visual_masks_normalise_to_binary_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        image::GrayImage::from_fn(4, 4, |x, _| image::Luma([if x < 2 { 0 } else { 255 }]))
            .save(&path)
            .unwrap();
        let mask = load_mask_png(&path).unwrap();
        assert_eq!(mask.labels.iter().filter(|&&v| v == 1).count(), 8);

        image::GrayImage::from_fn(4, 4, |x, _| image::Luma([(x as u8) * 40]))
            .save(&path)
            .unwrap();
        assert!(load_mask_png(&path).is_err());
    }
}
