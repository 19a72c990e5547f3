//! Cascade orchestration and the six-row ablation protocol.
//!
//! Upstream stages (slice model, segmentation model) are trained once per
//! configuration and cached under a hash of the configuration slice that
//! affects them; the classifier is trained per ablation row and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::io::{
    load_mask, load_msd, load_volume, read_classification_manifest, stratified_split, CaseRecord, DatasetManifest,
    PreprocessSpec, Split,
};
use crate::metrics::{dice, score_predictions, RunSummary, Scores};
use crate::phantom::PhantomParams;
use crate::stage1::{
    derive_slice_labels, evaluate_slices, fill_gaps, predict_slices, train_slice_classifier, z_crop_bbox,
    SliceEvaluation, SliceModel, SliceModelSpec, SliceTrainParams,
};
use crate::stage2::{
    forward_channels, informed_crop, predict_mask, train_segmentation, SegModel, SegModelSpec, SegTrainParams,
    FOREGROUND,
};
use crate::stage3::{
    train_two_stage, Backbone, ClassifierModel, ClassifierSample, ClassifierSpec, ClassifierTrainParams,
    TripletConfig,
};
use crate::volume::{
    center_crop_bbox, crop, crop_mask, resize_trilinear, LabelMask, LabeledVolume, Volume, NUM_CLASSES, PANCREAS,
    TUMOUR,
};

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "results.json";
pub const BOXPLOT_FILE: &str = "mcc_boxplot.svg";
const CACHE_DIR: &str = "cache";
const MODELS_DIR: &str = "models";
/// Probability threshold for the binary response decision.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// One row of the ablation table. Rows are cumulative: each enables every
/// feature of the rows before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    Baseline,
    SliceCrop,
    InformedCrop,
    SegForward,
    Transfer,
    Triplet,
}

/// Features switched on by the non-baseline rows, in row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    SliceCrop,
    InformedCrop,
    SegForward,
    Transfer,
    Triplet,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::Baseline,
        AblationRow::SliceCrop,
        AblationRow::InformedCrop,
        AblationRow::SegForward,
        AblationRow::Transfer,
        AblationRow::Triplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::SliceCrop => "slice_crop",
            AblationRow::InformedCrop => "informed_crop",
            AblationRow::SegForward => "seg_forward",
            AblationRow::Transfer => "transfer",
            AblationRow::Triplet => "triplet",
        }
    }

    /// Table label in the "+ feature" notation.
    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Baseline => "Baseline",
            AblationRow::SliceCrop => "+ slice (z) cropping",
            AblationRow::InformedCrop => "+ informed x/y cropping",
            AblationRow::SegForward => "+ segmentation forwarding",
            AblationRow::Transfer => "+ transfer learning",
            AblationRow::Triplet => "+ triplet loss",
        }
    }

    pub fn features(self) -> Vec<Feature> {
        const ORDER: [Feature; 5] = [
            Feature::SliceCrop,
            Feature::InformedCrop,
            Feature::SegForward,
            Feature::Transfer,
            Feature::Triplet,
        ];
        ORDER[..self as usize].to_vec()
    }

    pub fn has(self, feature: Feature) -> bool {
        self.features().contains(&feature)
    }

    pub fn needs_slice_model(self) -> bool {
        self.has(Feature::SliceCrop)
    }

    pub fn needs_seg_model(self) -> bool {
        self.has(Feature::InformedCrop)
    }

    pub fn input_channels(self) -> usize {
        if self.has(Feature::SegForward) {
            1 + NUM_CLASSES
        } else {
            1
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation row `{s}`")))
    }
}

/// How classification cases are divided into training and evaluation sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Use the `split` column of the manifest.
    Manifest,
    /// Stratified split with `test_fraction` and `split_seed`.
    Stratified,
    /// Evaluate on the training cases.
    Overfit,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manifest" => Ok(SplitMode::Manifest),
            "stratified" => Ok(SplitMode::Stratified),
            "overfit" => Ok(SplitMode::Overfit),
            _ => Err(Error::Config(format!("unknown split mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Classification manifest (CSV).
    pub dataset: PathBuf,
    /// Root of an MSD-layout segmentation dataset for the upstream stages;
    /// when unset, the training cases' own masks are used.
    pub segmentation: Option<PathBuf>,
    pub output: PathBuf,
    /// Pre-trained stage checkpoints, used instead of training.
    pub slice_checkpoint: Option<PathBuf>,
    pub seg_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceStageConfig {
    pub model: SliceModelSpec,
    pub train: SliceTrainParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegStageConfig {
    pub model: SegModelSpec,
    pub train: SegTrainParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierStageConfig {
    /// Widths of the standalone backbone; transferred rows use the
    /// segmentation encoder widths.
    pub widths: Vec<usize>,
    pub train: ClassifierTrainParams,
}

impl Default for ClassifierStageConfig {
    fn default() -> Self {
        Self {
            widths: ClassifierSpec::default().widths,
            train: ClassifierTrainParams::default(),
        }
    }
}

/// Cropping and resampling settings shared by the row pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSettings {
    pub baseline_resolution: [usize; 3],
    pub center_crop_size: (usize, usize),
    pub z_margin: usize,
    pub bbox_margin: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rows: Vec<AblationRow>,
    /// Classifier seeds; one run per row and seed.
    pub seeds: Vec<u64>,
    /// Seed for the shared upstream stages.
    pub stage_seed: u64,
    pub baseline_resolution: [usize; 3],
    /// `(y, x)` size of the centre crop, also the informed-crop fallback.
    pub center_crop_size: (usize, usize),
    pub z_margin: usize,
    pub bbox_margin: [usize; 3],
    pub split: SplitMode,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Reuse and store upstream checkpoints under `output/cache`.
    pub cache: bool,
    /// Train upstream stages when no checkpoint is available.
    pub train_stages: bool,
    pub paths: Paths,
    pub preprocess: PreprocessSpec,
    pub slice: SliceStageConfig,
    pub seg: SegStageConfig,
    pub classifier: ClassifierStageConfig,
    pub triplet: TripletConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rows: AblationRow::ALL.to_vec(),
            seeds: (0..5).collect(),
            stage_seed: 0,
            baseline_resolution: [256, 256, 256],
            center_crop_size: (192, 192),
            z_margin: crate::stage1::DEFAULT_Z_MARGIN,
            bbox_margin: crate::stage2::DEFAULT_BBOX_MARGIN,
            split: SplitMode::Stratified,
            test_fraction: 0.25,
            split_seed: 0,
            cache: true,
            train_stages: true,
            paths: Paths::default(),
            preprocess: PreprocessSpec::default(),
            slice: SliceStageConfig::default(),
            seg: SegStageConfig::default(),
            classifier: ClassifierStageConfig::default(),
            triplet: TripletConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Phantom-scale analogue: baseline resolution and centre crop at half
    /// the phantom extent.
    pub fn phantom(params: &PhantomParams, dataset: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        let [d, h, w] = params.shape;
        Self {
            baseline_resolution: [d / 2, h / 2, w / 2],
            center_crop_size: (h / 2, w / 2),
            paths: Paths {
                dataset: dataset.into(),
                output: output.into(),
                ..Paths::default()
            },
            ..Self::default()
        }
    }

    /// Shorter stage schedules and a tighter box margin for the down-scaled
    /// phantoms, where every row runs over several seeds.
    pub fn reduced_budget(mut self) -> Self {
        self.seg.train.epochs = 12;
        self.seg.train.patches_per_case = 2;
        self.triplet.epochs_stage_b = 20;
        self.bbox_margin = [4; 3];
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("no ablation rows configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        if self.baseline_resolution.contains(&0) || self.center_crop_size.0 == 0 || self.center_crop_size.1 == 0 {
            return Err(Error::Config("resolutions and crop sizes must be non-zero".into()));
        }
        if self.split == SplitMode::Stratified && !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} not in (0, 1)", self.test_fraction)));
        }
        self.preprocess.validate()?;
        self.slice.model.validate()?;
        self.seg.model.validate()?;
        self.triplet.validate()?;
        ClassifierSpec {
            widths: self.classifier.widths.clone(),
            ..ClassifierSpec::default()
        }
        .validate()
    }

    pub fn row_settings(&self) -> RowSettings {
        RowSettings {
            baseline_resolution: self.baseline_resolution,
            center_crop_size: self.center_crop_size,
            z_margin: self.z_margin,
            bbox_margin: self.bbox_margin,
        }
    }

    /// Triplet settings for a row: stage A only runs on the triplet row.
    pub fn triplet_for(&self, row: AblationRow) -> TripletConfig {
        let mut t = self.triplet.clone();
        if !row.has(Feature::Triplet) {
            t.epochs_stage_a = 0;
        }
        t
    }

    pub fn slice_cache_key(&self, training: &[CaseRecord]) -> Result<String> {
        stage_key(&serde_json::json!({
            "stage": crate::stage1::STAGE_TAG,
            "seed": self.stage_seed,
            "preprocess": self.preprocess,
            "slice": self.slice,
            "data": case_fingerprint(training),
        }))
    }

    pub fn seg_cache_key(&self, training: &[CaseRecord]) -> Result<String> {
        stage_key(&serde_json::json!({
            "stage": crate::stage2::STAGE_TAG,
            "seed": self.stage_seed,
            "preprocess": self.preprocess,
            "z_margin": self.z_margin,
            "seg": self.seg,
            "data": case_fingerprint(training),
        }))
    }
}

fn case_fingerprint(cases: &[CaseRecord]) -> Vec<(String, PathBuf, Option<PathBuf>)> {
    cases
        .iter()
        .map(|c| (c.case_id.clone(), c.volume_path.clone(), c.mask_path.clone()))
        .collect()
}

fn stage_key(value: &serde_json::Value) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Trained upstream models; either may be absent when no row needs it.
#[derive(Clone, Debug, Default)]
pub struct StageModels {
    pub slice: Option<SliceModel>,
    pub seg: Option<SegModel>,
    /// Checkpoint of `seg`, the source of encoder transfer.
    pub seg_checkpoint: Option<Checkpoint>,
}

/// Per-case outputs of the upstream stages, shared by every row.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutputs {
    /// z range kept by slice cropping (full range when stage 1 found nothing).
    pub z_bbox: crate::volume::BBox3,
    /// Predicted mask inside `z_bbox`, when segmentation ran.
    pub seg: Option<LabelMask>,
}

impl CascadeOutputs {
    /// The predicted mask pasted back into a volume of `shape`.
    pub fn full_mask(&self, shape: [usize; 3]) -> Option<LabelMask> {
        self.seg.as_ref().map(|m| {
            let mut full = Array3::<u8>::zeros(shape);
            let (lo, hi) = (self.z_bbox.lo[0], self.z_bbox.hi[0]);
            full.slice_mut(s![lo..=hi, .., ..]).assign(&m.data);
            LabelMask::new(full).expect("labels copied from a valid mask")
        })
    }
}

/// Preprocessing of one ablation row: `Volume` → classifier input `[C, z, y, x]`.
#[derive(Clone, Debug)]
pub struct RowPipeline<'a> {
    pub row: AblationRow,
    settings: RowSettings,
    slice: Option<&'a SliceModel>,
    seg: Option<&'a SegModel>,
}

pub fn build_row_pipeline<'a>(
    row: AblationRow,
    models: &'a StageModels,
    settings: &RowSettings,
) -> Result<RowPipeline<'a>> {
    let slice = if row.needs_slice_model() {
        Some(models.slice.as_ref().ok_or_else(|| {
            Error::Orchestration(format!("row `{row}` needs a trained slice model"))
        })?)
    } else {
        None
    };
    let seg = if row.needs_seg_model() {
        Some(models.seg.as_ref().ok_or_else(|| {
            Error::Orchestration(format!("row `{row}` needs a trained segmentation model"))
        })?)
    } else {
        None
    };
    Ok(RowPipeline {
        row,
        settings: settings.clone(),
        slice,
        seg,
    })
}

impl RowPipeline<'_> {
    /// Runs the upstream stages this row needs.
    pub fn cascade(&self, volume: &Volume) -> Result<CascadeOutputs> {
        let shape = volume.shape();
        let z_bbox = match self.slice {
            Some(model) => {
                let seq = fill_gaps(&predict_slices(model, volume)?);
                match z_crop_bbox(shape, &seq, self.settings.z_margin) {
                    Ok(b) => b,
                    Err(Error::EmptyPrediction) => {
                        warn!("slice model found no pancreas slice; keeping the full z range");
                        crate::volume::BBox3::full(shape)
                    }
                    Err(e) => return Err(e),
                }
            }
            None => crate::volume::BBox3::full(shape),
        };
        let seg = match self.seg {
            Some(model) => Some(predict_mask(model, &crop(volume, &z_bbox)?)?.mask),
            None => None,
        };
        Ok(CascadeOutputs { z_bbox, seg })
    }

    /// Builds the classifier input from precomputed cascade outputs.
    pub fn finish(&self, volume: &Volume, cascade: &CascadeOutputs) -> Result<Array4<f32>> {
        let s = &self.settings;
        if !self.row.has(Feature::SliceCrop) {
            let data = resize_trilinear(&volume.data, s.baseline_resolution);
            return Ok(data.insert_axis(Axis(0)));
        }
        let zvol = crop(volume, &cascade.z_bbox)?;
        if !self.row.has(Feature::InformedCrop) {
            let size = (s.center_crop_size.0.min(zvol.shape()[1]), s.center_crop_size.1.min(zvol.shape()[2]));
            let bbox = center_crop_bbox(zvol.shape(), size)?;
            return Ok(crop(&zvol, &bbox)?.data.insert_axis(Axis(0)));
        }
        let pred = cascade
            .seg
            .as_ref()
            .ok_or_else(|| Error::Orchestration(format!("row `{}` needs a segmentation", self.row)))?;
        let ic = informed_crop(&zvol, pred, s.bbox_margin, &FOREGROUND, s.center_crop_size)?;
        if self.row.has(Feature::SegForward) {
            forward_channels(&ic.volume, &ic.mask)
        } else {
            Ok(ic.volume.data.insert_axis(Axis(0)))
        }
    }

    pub fn apply(&self, volume: &Volume) -> Result<Array4<f32>> {
        let cascade = self.cascade(volume)?;
        self.finish(volume, &cascade)
    }
}

/// A classification case loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub record: CaseRecord,
    pub volume: Volume,
    pub mask: Option<LabelMask>,
}

impl LoadedCase {
    pub fn label(&self) -> Result<bool> {
        self.record
            .response_label
            .ok_or_else(|| Error::Config(format!("case {} has no response label", self.record.case_id)))
    }
}

pub fn load_case(record: &CaseRecord, preprocess: &PreprocessSpec) -> Result<LoadedCase> {
    let volume = load_volume(&record.volume_path, preprocess)?;
    let mask = match &record.mask_path {
        Some(p) => {
            let m = load_mask(p, preprocess.target_spacing)?;
            if m.shape() != volume.shape() {
                return Err(Error::Shape(format!(
                    "case {}: mask {:?} vs volume {:?}",
                    record.case_id,
                    m.shape(),
                    volume.shape()
                )));
            }
            Some(m)
        }
        None => None,
    };
    Ok(LoadedCase {
        record: record.clone(),
        volume,
        mask,
    })
}

/// Training and evaluation case records under the configured split mode.
pub fn split_cases(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<(Vec<CaseRecord>, Vec<CaseRecord>)> {
    match cfg.split {
        SplitMode::Overfit => Ok((manifest.cases.clone(), manifest.cases.clone())),
        SplitMode::Stratified => {
            let (train, test) = stratified_split(manifest, cfg.test_fraction, cfg.split_seed)?;
            Ok((train.cases, test.cases))
        }
        SplitMode::Manifest => {
            let (test, train): (Vec<_>, Vec<_>) = manifest.cases.iter().cloned().partition(|c| c.split == Split::Test);
            if test.is_empty() || train.is_empty() {
                return Err(Error::Config(
                    "split mode `manifest` needs both train and test cases in the manifest".into(),
                ));
            }
            Ok((train, test))
        }
    }
}

/// Records the upstream stages are trained on: the MSD dataset when
/// configured, else the training cases that carry masks.
pub fn segmentation_records(cfg: &ExperimentConfig, train: &[CaseRecord]) -> Result<Vec<CaseRecord>> {
    let records: Vec<CaseRecord> = match &cfg.paths.segmentation {
        Some(root) => load_msd(root)?.cases,
        None => train.iter().filter(|c| c.mask_path.is_some()).cloned().collect(),
    };
    if records.is_empty() {
        return Err(Error::Config(
            "rows beyond the baseline need segmentation labels: set paths.segmentation or add mask_path to the manifest"
                .into(),
        ));
    }
    Ok(records)
}

pub fn load_labeled(records: &[CaseRecord], preprocess: &PreprocessSpec) -> Result<Vec<LabeledVolume>> {
    records
        .iter()
        .map(|r| {
            let c = load_case(r, preprocess)?;
            let mask = c
                .mask
                .ok_or_else(|| Error::Config(format!("case {} has no segmentation mask", r.case_id)))?;
            LabeledVolume::new(c.volume, mask)
        })
        .collect()
}

/// Cases cropped to the true pancreas z range, the segmentation training input.
pub fn ground_truth_z_crops(cases: &[LabeledVolume], margin: usize) -> Result<Vec<LabeledVolume>> {
    cases
        .iter()
        .map(|c| {
            let bbox = z_crop_bbox(c.volume.shape(), &derive_slice_labels(&c.mask), margin)?;
            LabeledVolume::new(crop(&c.volume, &bbox)?, crop_mask(&c.mask, &bbox)?)
        })
        .collect()
}

enum Source {
    Explicit(PathBuf),
    Cached(PathBuf),
    Train(Option<PathBuf>),
}

fn stage_source(cfg: &ExperimentConfig, explicit: &Option<PathBuf>, tag: &str, key: &str) -> Result<Source> {
    if let Some(p) = explicit {
        if !p.exists() {
            return Err(Error::Orchestration(format!("{tag} checkpoint {} not found", p.display())));
        }
        return Ok(Source::Explicit(p.clone()));
    }
    let cached = cfg.paths.output.join(CACHE_DIR).join(format!("{tag}-{key}.ckpt"));
    if cfg.cache && cached.exists() {
        return Ok(Source::Cached(cached));
    }
    if cfg.train_stages {
        return Ok(Source::Train(cfg.cache.then_some(cached)));
    }
    Err(Error::Orchestration(format!(
        "no {tag} checkpoint available (caching {}, stage training disabled)",
        if cfg.cache { "found none" } else { "disabled" }
    )))
}

/// Loads, restores from cache, or trains the upstream stages needed by `rows`.
pub fn prepare_stages(
    cfg: &ExperimentConfig,
    rows: &[AblationRow],
    train: &[CaseRecord],
) -> Result<StageModels> {
    let need_slice = rows.iter().any(|r| r.needs_slice_model());
    let need_seg = rows.iter().any(|r| r.needs_seg_model());
    let mut models = StageModels::default();
    if !need_slice && !need_seg {
        return Ok(models);
    }
    let explicit = cfg.paths.slice_checkpoint.is_some() && cfg.paths.seg_checkpoint.is_some();
    let seg_records = match segmentation_records(cfg, train) {
        Ok(r) => r,
        Err(Error::Config(_)) if explicit => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut loaded: Option<Vec<LabeledVolume>> = None;
    let mut training_data = || -> Result<Vec<LabeledVolume>> {
        if loaded.is_none() {
            loaded = Some(load_labeled(&seg_records, &cfg.preprocess)?);
        }
        Ok(loaded.clone().expect("just loaded"))
    };

    if need_slice {
        let key = cfg.slice_cache_key(&seg_records)?;
        let model = match stage_source(cfg, &cfg.paths.slice_checkpoint, crate::stage1::STAGE_TAG, &key)? {
            Source::Explicit(p) | Source::Cached(p) => {
                info!("loading slice model from {}", p.display());
                SliceModel::from_checkpoint(&load_checkpoint(&p)?)?
            }
            Source::Train(store) => {
                let cases = training_data()?;
                info!("training slice model on {} cases", cases.len());
                let (model, eval) =
                    train_slice_classifier(&cases, &cases, &cfg.slice.model, &cfg.slice.train, cfg.stage_seed)?;
                info!("slice model training accuracy {:.4} (gap-filled {:.4})", eval.accuracy_raw, eval.accuracy_filled);
                if let Some(p) = store {
                    save_checkpoint(&p, &model.to_checkpoint(cfg.stage_seed)?)?;
                }
                model
            }
        };
        models.slice = Some(model);
    }
    if need_seg {
        let key = cfg.seg_cache_key(&seg_records)?;
        let ck = match stage_source(cfg, &cfg.paths.seg_checkpoint, crate::stage2::STAGE_TAG, &key)? {
            Source::Explicit(p) | Source::Cached(p) => {
                info!("loading segmentation model from {}", p.display());
                load_checkpoint(&p)?
            }
            Source::Train(store) => {
                let cases = training_data()?;
                let crops = ground_truth_z_crops(&cases, cfg.z_margin)?;
                info!("training segmentation model on {} z-cropped cases", crops.len());
                let (model, _) = train_segmentation(&crops, &[], &cfg.seg.model, &cfg.seg.train, cfg.stage_seed)?;
                let ck = model.to_checkpoint(cfg.stage_seed)?;
                if let Some(p) = store {
                    save_checkpoint(&p, &ck)?;
                }
                ck
            }
        };
        models.seg = Some(SegModel::from_checkpoint(&ck)?);
        models.seg_checkpoint = Some(ck);
    }
    Ok(models)
}

/// Fresh classifier for `row`: standalone, or initialised from the
/// segmentation encoder on transfer rows.
pub fn row_classifier(
    cfg: &ExperimentConfig,
    row: AblationRow,
    models: &StageModels,
    seed: u64,
) -> Result<ClassifierModel> {
    if row.has(Feature::Transfer) {
        let ck = models
            .seg_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Orchestration(format!("row `{row}` needs a segmentation checkpoint")))?;
        let (model, manifest) = ClassifierModel::transferred(ck, row.input_channels(), seed)?;
        info!(
            "transferred {} encoder tensors, {} fresh",
            manifest.transferred.len(),
            manifest.fresh.len()
        );
        Ok(model)
    } else {
        ClassifierModel::new(
            ClassifierSpec {
                backbone: Backbone::Standalone,
                in_channels: row.input_channels(),
                widths: cfg.classifier.widths.clone(),
            },
            seed,
        )
    }
}

/// Builds, trains and returns the classifier of one row and seed.
pub fn train_row_classifier(
    cfg: &ExperimentConfig,
    row: AblationRow,
    models: &StageModels,
    samples: &[ClassifierSample],
    seed: u64,
) -> Result<ClassifierModel> {
    let mut model = row_classifier(cfg, row, models, seed)?;
    train_two_stage(&mut model, samples, &cfg.triplet_for(row), &cfg.classifier.train, seed)?;
    Ok(model)
}

/// Stage-level diagnostics on the evaluation cases that carry masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub slice: Option<SliceEvaluation>,
    /// Mean Dice over evaluation cases of the cascade's pasted-back
    /// segmentation, keyed by class id.
    pub seg_dice: Option<BTreeMap<u8, f64>>,
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub row: AblationRow,
    pub seed: u64,
    pub case_id: String,
    pub label: u8,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: AblationRow,
    pub seed: u64,
    pub mcc: f64,
    pub accuracy: f64,
    pub auc_roc: f64,
}

impl RunRecord {
    pub fn scores(&self) -> Scores {
        Scores {
            mcc: self.mcc,
            accuracy: self.accuracy,
            auc_roc: self.auc_roc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub row: AblationRow,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
    /// μ/σ per row; rows with a single seed are omitted.
    pub summary: Vec<SummaryRecord>,
    pub stages: StageReport,
}

/// Per-run scores recomputed from stored predictions, in first-seen order.
pub fn runs_from_predictions(predictions: &[PredictionRecord]) -> Result<Vec<RunRecord>> {
    let mut order: Vec<(AblationRow, u64)> = Vec::new();
    let mut groups: BTreeMap<(AblationRow, u64), (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for p in predictions {
        let key = (p.row, p.seed);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        let g = groups.entry(key).or_default();
        g.0.push(p.probability);
        g.1.push(p.label != 0);
    }
    order
        .into_iter()
        .map(|key| {
            let (probs, labels) = &groups[&key];
            let s = score_predictions(probs, labels, DECISION_THRESHOLD)?;
            Ok(RunRecord {
                row: key.0,
                seed: key.1,
                mcc: s.mcc,
                accuracy: s.accuracy,
                auc_roc: s.auc_roc,
            })
        })
        .collect()
}

/// μ/σ rows for every ablation row with at least two runs.
pub fn summarize(runs: &[RunRecord]) -> Result<Vec<SummaryRecord>> {
    let mut by_row: BTreeMap<AblationRow, Vec<Scores>> = BTreeMap::new();
    for r in runs {
        by_row.entry(r.row).or_default().push(r.scores());
    }
    let mut out = Vec::new();
    for (row, scores) in by_row {
        if scores.len() < 2 {
            warn!("row `{row}` has a single run; no spread reported");
            continue;
        }
        let s = RunSummary::from_scores(&scores)?;
        for (metric, m) in [("mcc", &s.mcc), ("accuracy", &s.accuracy), ("auc_roc", &s.auc_roc)] {
            out.push(SummaryRecord {
                row,
                metric: metric.into(),
                n: m.values.len(),
                mean: m.mean,
                std: m.std,
            });
        }
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes predictions, per-run results, summary, JSON report and box plot.
pub fn write_report(dir: &Path, predictions: &[PredictionRecord], report: &AblationReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join(PREDICTIONS_FILE), predictions)?;
    write_csv(&dir.join(RESULTS_FILE), &report.runs)?;
    write_csv(&dir.join(SUMMARY_FILE), &report.summary)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(BOXPLOT_FILE), mcc_boxplot_svg(&report.runs))?;
    Ok(())
}

/// Recomputes the report (without stage diagnostics) from a predictions file.
pub fn evaluate_predictions(path: &Path) -> Result<AblationReport> {
    let predictions = read_predictions(path)?;
    let runs = runs_from_predictions(&predictions)?;
    Ok(AblationReport {
        summary: summarize(&runs)?,
        runs,
        stages: StageReport::default(),
    })
}

/// Plain-text table of the summary, one line per row.
pub fn format_table(report: &AblationReport) -> String {
    let mut out = format!("{:<28} {:>18} {:>18} {:>18}\n", "row", "MCC", "accuracy", "AUC-ROC");
    let mut rows: Vec<AblationRow> = report.runs.iter().map(|r| r.row).collect();
    rows.sort();
    rows.dedup();
    for row in rows {
        let cell = |metric: &str| {
            match report.summary.iter().find(|s| s.row == row && s.metric == metric) {
                Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
                None => {
                    let v: Vec<f64> = report
                        .runs
                        .iter()
                        .filter(|r| r.row == row)
                        .map(|r| match metric {
                            "mcc" => r.mcc,
                            "accuracy" => r.accuracy,
                            _ => r.auc_roc,
                        })
                        .collect();
                    format!("{:.3}", v.iter().sum::<f64>() / v.len() as f64)
                }
            }
        };
        out.push_str(&format!(
            "{:<28} {:>18} {:>18} {:>18}\n",
            row.label(),
            cell("mcc"),
            cell("accuracy"),
            cell("auc_roc")
        ));
    }
    out
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box-and-whisker plot of per-row MCC as a standalone SVG document.
pub fn mcc_boxplot_svg(runs: &[RunRecord]) -> String {
    let mut by_row: BTreeMap<AblationRow, Vec<f64>> = BTreeMap::new();
    for r in runs {
        by_row.entry(r.row).or_default().push(r.mcc);
    }
    let (w, h, left, top, bottom) = (120.0 * by_row.len().max(1) as f64 + 80.0, 360.0, 60.0, 20.0, 300.0);
    let y = |v: f64| bottom - (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (bottom - top);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    for t in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        svg.push_str(&format!(
            "<line x1=\"{left}\" x2=\"{}\" y1=\"{y0}\" y2=\"{y0}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.1}</text>\n",
            w - 10.0,
            left - 6.0,
            y(t) + 4.0,
            y0 = y(t)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">MCC</text>\n",
        (top + bottom) / 2.0,
        (top + bottom) / 2.0
    ));
    for (i, (row, values)) in by_row.iter().enumerate() {
        let mut v = values.clone();
        v.sort_by(f64::total_cmp);
        let cx = left + 60.0 + 120.0 * i as f64;
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let (lo, hi) = (v[0], v[v.len() - 1]);
        svg.push_str(&format!(
            "<g><line x1=\"{cx}\" x2=\"{cx}\" y1=\"{}\" y2=\"{}\" stroke=\"black\"/>\
<line x1=\"{}\" x2=\"{}\" y1=\"{ylo}\" y2=\"{ylo}\" stroke=\"black\"/>\
<line x1=\"{}\" x2=\"{}\" y1=\"{yhi}\" y2=\"{yhi}\" stroke=\"black\"/>\
<rect x=\"{}\" y=\"{}\" width=\"50\" height=\"{}\" fill=\"#9ecae1\" stroke=\"black\"/>\
<line x1=\"{}\" x2=\"{}\" y1=\"{ymed}\" y2=\"{ymed}\" stroke=\"#d62728\" stroke-width=\"2\"/>\n",
            y(lo),
            y(hi),
            cx - 12.0,
            cx + 12.0,
            cx - 12.0,
            cx + 12.0,
            cx - 25.0,
            y(q3),
            (y(q1) - y(q3)).max(0.5),
            cx - 25.0,
            cx + 25.0,
            ylo = y(lo),
            yhi = y(hi),
            ymed = y(med),
        ));
        for p in &v {
            svg.push_str(&format!("<circle cx=\"{cx}\" cy=\"{}\" r=\"2.5\" fill=\"black\"/>\n", y(*p)));
        }
        svg.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text></g>\n",
            bottom + 20.0,
            row.name()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn stage_report(models: &StageModels, eval: &[LoadedCase], outputs: &[CascadeOutputs]) -> Result<StageReport> {
    let labeled: Vec<(usize, LabeledVolume)> = eval
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.mask.clone().map(|m| (i, m)))
        .map(|(i, m)| Ok((i, LabeledVolume::new(eval[i].volume.clone(), m)?)))
        .collect::<Result<_>>()?;
    if labeled.is_empty() {
        return Ok(StageReport::default());
    }
    let slice = match &models.slice {
        Some(m) => {
            let cases: Vec<LabeledVolume> = labeled.iter().map(|(_, c)| c.clone()).collect();
            Some(evaluate_slices(m, &cases)?)
        }
        None => None,
    };
    let seg_dice = if models.seg.is_some() {
        let mut sums: BTreeMap<u8, f64> = BTreeMap::new();
        for (i, case) in &labeled {
            let pred = outputs[*i].full_mask(case.volume.shape()).expect("segmentation ran");
            for class in [PANCREAS, TUMOUR] {
                *sums.entry(class).or_default() += dice(&pred, &case.mask, class)?;
            }
        }
        Some(sums.into_iter().map(|(k, v)| (k, v / labeled.len() as f64)).collect())
    } else {
        None
    };
    Ok(StageReport {
        slice,
        seg_dice,
        cases: labeled.len(),
    })
}

/// Runs every configured row and seed and writes the report to
/// `paths.output`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let manifest = read_classification_manifest(&cfg.paths.dataset)?;
    let (train_records, eval_records) = split_cases(cfg, &manifest)?;
    let mut rows = cfg.rows.clone();
    rows.sort();
    rows.dedup();
    let models = prepare_stages(cfg, &rows, &train_records)?;

    let load = |records: &[CaseRecord]| -> Result<Vec<LoadedCase>> {
        records.iter().map(|r| load_case(r, &cfg.preprocess)).collect()
    };
    let train = load(&train_records)?;
    let eval = load(&eval_records)?;
    let deepest = *rows.last().expect("validated non-empty");
    let full = build_row_pipeline(deepest, &models, &cfg.row_settings())?;
    let cascade = |cases: &[LoadedCase]| -> Result<Vec<CascadeOutputs>> {
        cases.iter().map(|c| full.cascade(&c.volume)).collect()
    };
    info!("running upstream stages on {} + {} cases", train.len(), eval.len());
    let train_out = cascade(&train)?;
    let eval_out = cascade(&eval)?;
    let stages = stage_report(&models, &eval, &eval_out)?;
    if let Some(s) = &stages.slice {
        info!("evaluation slice accuracy {:.4} (gap-filled {:.4})", s.accuracy_raw, s.accuracy_filled);
    }
    if let Some(d) = &stages.seg_dice {
        info!("evaluation cascade Dice {d:?}");
    }

    let mut predictions = Vec::new();
    for &row in &rows {
        let pipeline = build_row_pipeline(row, &models, &cfg.row_settings())?;
        let samples = |cases: &[LoadedCase], outs: &[CascadeOutputs]| -> Result<Vec<ClassifierSample>> {
            cases
                .iter()
                .zip(outs)
                .map(|(c, o)| {
                    Ok(ClassifierSample {
                        case_id: c.record.case_id.clone(),
                        input: pipeline.finish(&c.volume, o)?,
                        label: c.label()?,
                    })
                })
                .collect()
        };
        let train_samples = samples(&train, &train_out)?;
        let eval_samples = samples(&eval, &eval_out)?;
        for &seed in &cfg.seeds {
            info!("row `{row}`, seed {seed}: training on {} cases", train_samples.len());
            let model = train_row_classifier(cfg, row, &models, &train_samples, seed)?;
            if !cfg.paths.output.as_os_str().is_empty() {
                let path = cfg.paths.output.join(MODELS_DIR).join(format!("{row}-seed{seed}.ckpt"));
                save_checkpoint(&path, &model.to_checkpoint(seed)?)?;
            }
            for s in &eval_samples {
                predictions.push(PredictionRecord {
                    row,
                    seed,
                    case_id: s.case_id.clone(),
                    label: s.label as u8,
                    probability: model.probability(&s.input)?,
                });
            }
        }
    }
    let runs = runs_from_predictions(&predictions)?;
    for r in &runs {
        info!("row `{}`, seed {}: MCC {:.4}, accuracy {:.4}, AUC {:.4}", r.row, r.seed, r.mcc, r.accuracy, r.auc_roc);
    }
    let report = AblationReport {
        summary: summarize(&runs)?,
        runs,
        stages,
    };
    if !cfg.paths.output.as_os_str().is_empty() {
        write_report(&cfg.paths.output, &predictions, &report)?;
    }
    Ok(report)
}

/// Response probability for one volume with a trained classifier.
pub fn predict_volume(
    row: AblationRow,
    models: &StageModels,
    settings: &RowSettings,
    classifier: &ClassifierModel,
    volume: &Volume,
) -> Result<f64> {
    let input = build_row_pipeline(row, models, settings)?.apply(volume)?;
    crate::stage3::predict_response(classifier, &input)
}
