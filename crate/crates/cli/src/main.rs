use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pdac_core::checkpoint::{load_checkpoint, save_checkpoint};
use pdac_core::io::{
    load_mask, load_msd, load_volume, read_classification_manifest, stratified_split, write_classification_manifest,
    write_mask, write_volume, DatasetManifest, PreprocessSpec,
};
use pdac_core::phantom::{generate_dataset, PhantomParams};
use pdac_core::pipeline::{
    build_row_pipeline, evaluate_predictions, format_table, load_case, load_labeled, predict_volume, prepare_stages,
    run_ablation, segmentation_records, split_cases, train_row_classifier, write_report, AblationRow,
    ExperimentConfig, SplitMode, StageModels,
};
use pdac_core::stage1::{fill_gaps, predict_slices, train_slice_classifier, z_crop, SliceModel};
use pdac_core::stage2::{informed_crop, predict_mask, train_segmentation, SegModel, FOREGROUND};
use pdac_core::stage3::{ClassifierModel, ClassifierSample};

#[derive(Parser)]
#[command(name = "pdac", version, about = "Chemotherapy-response cascade for pancreatic CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 64×96×96 volumes.
    Default,
    /// 32×48×48 volumes.
    Small,
}

/// Experiment configuration: a TOML file plus overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classification manifest (CSV).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// MSD-layout segmentation dataset root for the upstream stages.
    #[arg(long)]
    segmentation: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Classifier seed; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Ablation row; repeatable.
    #[arg(long = "row")]
    rows: Vec<AblationRow>,
    #[arg(long)]
    stage_seed: Option<u64>,
    /// `manifest`, `stratified` or `overfit`.
    #[arg(long)]
    split: Option<SplitMode>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    slice_checkpoint: Option<PathBuf>,
    #[arg(long)]
    seg_checkpoint: Option<PathBuf>,
    /// Neither read nor write cached stage checkpoints.
    #[arg(long)]
    no_cache: bool,
}

impl ConfigArgs {
    /// The one row named with `--row`; the triplet row when none is given.
    fn single_row(&self) -> Result<AblationRow> {
        match self.rows.as_slice() {
            [] => Ok(AblationRow::Triplet),
            [row] => Ok(*row),
            _ => bail!("this command takes a single --row"),
        }
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.paths.dataset = v.clone();
        }
        if let Some(v) = &self.segmentation {
            cfg.paths.segmentation = Some(v.clone());
        }
        if let Some(v) = &self.output {
            cfg.paths.output = v.clone();
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if !self.rows.is_empty() {
            cfg.rows = self.rows.clone();
        }
        if let Some(v) = self.stage_seed {
            cfg.stage_seed = v;
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(v) = self.test_fraction {
            cfg.test_fraction = v;
        }
        if let Some(v) = &self.slice_checkpoint {
            cfg.paths.slice_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.seg_checkpoint {
            cfg.paths.seg_checkpoint = Some(v.clone());
        }
        if self.no_cache {
            cfg.cache = false;
        }
        if cfg.paths.dataset.as_os_str().is_empty() {
            bail!("no dataset manifest: pass --dataset or set paths.dataset");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (MSD layout plus classification manifest).
    PreparePhantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        /// Also write a phantom-scale experiment configuration here.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    /// Validate an MSD-layout dataset.
    PrepareMsd {
        #[arg(long)]
        root: PathBuf,
        /// Load every image/label pair and compare shapes.
        #[arg(long)]
        check: bool,
    },
    /// Stratified train/test split of a classification manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the slice classifier.
    TrainSlice {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop a volume to the predicted pancreas z range.
    CropZ {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = pdac_core::stage1::DEFAULT_Z_MARGIN)]
        margin: usize,
    },
    /// Train the segmentation network on ground-truth z crops.
    TrainSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a pancreas/tumour mask for a volume.
    PredictSeg {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth mask to score the prediction against.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Crop a volume to its predicted foreground box.
    CropInformed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        margin: usize,
        #[arg(long, default_value_t = 192)]
        fallback: usize,
    },
    /// Train the response classifier of one ablation row.
    TrainCls {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every configured row and seed.
    RunAblation {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recompute metrics and the summary table from stored predictions.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Rewrite results, summary and box plot into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Response probability for one volume.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

fn training_records(cfg: &ExperimentConfig) -> Result<Vec<pdac_core::io::CaseRecord>> {
    let manifest = read_classification_manifest(&cfg.paths.dataset)?;
    let (train, _) = split_cases(cfg, &manifest)?;
    Ok(segmentation_records(cfg, &train)?)
}

fn write_manifest_summary(manifest: &DatasetManifest) {
    println!("{}: {} cases", manifest.name, manifest.len());
    for (label, n) in &manifest.class_counts {
        println!("  label {label}: {n}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PreparePhantoms {
            out,
            n,
            seed,
            preset,
            write_config,
        } => {
            let params = match preset {
                Preset::Default => PhantomParams::default(),
                Preset::Small => PhantomParams::small(),
            };
            let manifest = generate_dataset(&params, n, seed, &out)?;
            write_manifest_summary(&manifest);
            if let Some(path) = write_config {
                let mut cfg = ExperimentConfig::phantom(
                    &params,
                    out.join(pdac_core::io::MANIFEST_FILE),
                    out.join("results"),
                );
                if matches!(preset, Preset::Small) {
                    cfg = cfg.reduced_budget();
                }
                fs::write(&path, cfg.to_toml()?)?;
                println!("configuration written to {}", path.display());
            }
        }
        Command::PrepareMsd { root, check } => {
            let manifest = load_msd(&root)?;
            println!("{}: {} image/label pairs", manifest.name, manifest.len());
            if check {
                let spec = PreprocessSpec::default();
                for c in &manifest.cases {
                    let v = load_volume(&c.volume_path, &spec)?;
                    let mask_path = c.mask_path.as_ref().expect("MSD pairs carry labels");
                    let m = load_mask(mask_path, None)?;
                    if v.shape() != m.shape() {
                        bail!("{}: image {:?} vs label {:?}", c.case_id, v.shape(), m.shape());
                    }
                }
                println!("all pairs load with matching shapes");
            }
        }
        Command::Split {
            manifest,
            out,
            test_fraction,
            seed,
        } => {
            let m = read_classification_manifest(&manifest)?;
            let (train, test) = stratified_split(&m, test_fraction, seed)?;
            let (n_train, n_test) = (train.len(), test.len());
            let mut cases = train.cases;
            cases.extend(test.cases);
            cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            let combined = DatasetManifest::new(m.name.clone(), cases)?;
            write_classification_manifest(&combined, &out)?;
            println!("{n_train} train / {n_test} test written to {}", out.display());
        }
        Command::TrainSlice { cfg, out } => {
            let cfg = cfg.resolve()?;
            let cases = load_labeled(&training_records(&cfg)?, &cfg.preprocess)?;
            let (model, eval) =
                train_slice_classifier(&cases, &cases, &cfg.slice.model, &cfg.slice.train, cfg.stage_seed)?;
            save_checkpoint(&out, &model.to_checkpoint(cfg.stage_seed)?)?;
            println!(
                "slice accuracy on training cases {:.4} (gap-filled {:.4}); saved {}",
                eval.accuracy_raw,
                eval.accuracy_filled,
                out.display()
            );
        }
        Command::CropZ {
            checkpoint,
            input,
            out,
            margin,
        } => {
            let model = SliceModel::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            let volume = load_volume(&input, &PreprocessSpec::default())?;
            let seq = fill_gaps(&predict_slices(&model, &volume)?);
            let (cropped, bbox) = z_crop(&volume, &seq, margin)?;
            write_volume(&out, &cropped)?;
            println!("kept slices {}..={}", bbox.lo[0], bbox.hi[0]);
        }
        Command::TrainSeg { cfg, out } => {
            let cfg = cfg.resolve()?;
            let cases = load_labeled(&training_records(&cfg)?, &cfg.preprocess)?;
            let crops = pdac_core::pipeline::ground_truth_z_crops(&cases, cfg.z_margin)?;
            let (model, dice) = train_segmentation(&crops, &crops, &cfg.seg.model, &cfg.seg.train, cfg.stage_seed)?;
            save_checkpoint(&out, &model.to_checkpoint(cfg.stage_seed)?)?;
            println!("training Dice {dice:?}; saved {}", out.display());
        }
        Command::PredictSeg {
            checkpoint,
            input,
            out,
            truth,
        } => {
            let model = SegModel::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            let volume = load_volume(&input, &PreprocessSpec::default())?;
            let mut pred = predict_mask(&model, &volume)?;
            write_mask(&out, &pred.mask, volume.spacing, volume.origin)?;
            if let Some(t) = truth {
                pred.score(&load_mask(&t, None)?)?;
                println!("Dice {:?}", pred.per_class_dice);
            }
        }
        Command::CropInformed {
            checkpoint,
            input,
            out,
            margin,
            fallback,
        } => {
            let model = SegModel::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            let volume = load_volume(&input, &PreprocessSpec::default())?;
            let pred = predict_mask(&model, &volume)?;
            let ic = informed_crop(&volume, &pred.mask, [margin; 3], &FOREGROUND, (fallback, fallback))?;
            write_volume(&out, &ic.volume)?;
            println!("box {:?}..={:?}{}", ic.bbox.lo, ic.bbox.hi, if ic.fallback { " (fallback)" } else { "" });
        }
        Command::TrainCls { cfg, out } => {
            let row = cfg.single_row()?;
            let cfg = cfg.resolve()?;
            let manifest = read_classification_manifest(&cfg.paths.dataset)?;
            let (train, _) = split_cases(&cfg, &manifest)?;
            let models = prepare_stages(&cfg, &[row], &train)?;
            let pipeline = build_row_pipeline(row, &models, &cfg.row_settings())?;
            let samples = train
                .iter()
                .map(|r| {
                    let c = load_case(r, &cfg.preprocess)?;
                    Ok(ClassifierSample {
                        case_id: r.case_id.clone(),
                        input: pipeline.apply(&c.volume)?,
                        label: c.label()?,
                    })
                })
                .collect::<pdac_core::Result<Vec<_>>>()?;
            let seed = cfg.seeds[0];
            let model = train_row_classifier(&cfg, row, &models, &samples, seed)?;
            save_checkpoint(&out, &model.to_checkpoint(seed)?)?;
            println!("row `{row}` classifier (seed {seed}) saved to {}", out.display());
        }
        Command::RunAblation { cfg } => {
            let cfg = cfg.resolve()?;
            if cfg.paths.output.as_os_str().is_empty() {
                bail!("no output directory: pass --output or set paths.output");
            }
            let report = run_ablation(&cfg)?;
            print!("{}", format_table(&report));
            println!("report written to {}", cfg.paths.output.display());
        }
        Command::Evaluate { predictions, out } => {
            let report = evaluate_predictions(&predictions)?;
            print!("{}", format_table(&report));
            if let Some(dir) = out {
                let preds = pdac_core::pipeline::read_predictions(&predictions)?;
                write_report(&dir, &preds, &report)?;
            }
        }
        Command::Predict { cfg, classifier, input } => {
            let row = cfg.single_row()?;
            let cfg = cfg.resolve()?;
            let models = stage_models_for_prediction(&cfg, row)?;
            let clf = ClassifierModel::from_checkpoint(&load_checkpoint(&classifier)?)?;
            let volume = load_volume(&input, &cfg.preprocess)?;
            let p = predict_volume(row, &models, &cfg.row_settings(), &clf, &volume)?;
            println!("{p:.6}");
        }
    }
    Ok(())
}

/// Upstream models for inference: explicit checkpoints, else the cache.
fn stage_models_for_prediction(cfg: &ExperimentConfig, row: AblationRow) -> Result<StageModels> {
    let mut cfg = cfg.clone();
    cfg.train_stages = false;
    let manifest = read_classification_manifest(&cfg.paths.dataset)?;
    let (train, _) = split_cases(&cfg, &manifest)?;
    info!("resolving stage checkpoints for row `{row}`");
    Ok(prepare_stages(&cfg, &[row], &train)?)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
