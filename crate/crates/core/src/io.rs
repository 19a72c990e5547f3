//! Dataset ingestion: NIfTI volumes, MSD task layouts, classification
//! manifests and stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{dims, resize_nearest, resize_trilinear, LabelMask, Volume, NUM_CLASSES};

pub const MSD_DESCRIPTION: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "classification.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub volume_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    /// `true` = progressive disease, `false` = stable or regressive.
    pub response_label: Option<bool>,
    pub split: Split,
}

impl CaseRecord {
    pub fn label_id(&self) -> Option<u8> {
        self.response_label.map(u8::from)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub cases: Vec<CaseRecord>,
    /// Response label (0/1) to number of cases carrying it.
    pub class_counts: BTreeMap<u8, usize>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, cases: Vec<CaseRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Config(format!("duplicate case id `{}`", c.case_id)));
            }
        }
        let mut class_counts = BTreeMap::new();
        for l in cases.iter().filter_map(CaseRecord::label_id) {
            *class_counts.entry(l).or_insert(0) += 1;
        }
        Ok(Self {
            name: name.into(),
            cases,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn with_split(&self, split: Split) -> Result<Self> {
        Self::new(
            format!("{}-{}", self.name, if split == Split::Train { "train" } else { "test" }),
            self.cases.iter().filter(|c| c.split == split).cloned().collect(),
        )
    }

    /// Fills `mask_path` from `segmentation` wherever case ids match.
    pub fn attach_masks(&mut self, segmentation: &DatasetManifest) {
        for c in &mut self.cases {
            if c.mask_path.is_none() {
                if let Some(s) = segmentation.get(&c.case_id) {
                    c.mask_path = s.mask_path.clone();
                }
            }
        }
    }
}

/// Intensity preprocessing applied by [`load_volume`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    /// Clamp window in HU.
    pub hu_window: (f32, f32),
    /// Resample to this `(z, y, x)` spacing in mm when set.
    pub target_spacing: Option<[f64; 3]>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            hu_window: (-150.0, 250.0),
            target_spacing: None,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hu_window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("hu_window {:?} must satisfy low < high", self.hu_window)));
        }
        if let Some(t) = self.target_spacing {
            if t.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config(format!("target spacing {t:?} must be positive")));
            }
        }
        Ok(())
    }

    /// Clamp to the window and rescale to `[0, 1]`.
    pub fn normalize(&self, data: &mut Array3<f32>) {
        let (lo, hi) = self.hu_window;
        data.mapv_inplace(|v| {
            let v = if v.is_nan() { lo } else { v };
            (v.clamp(lo, hi) - lo) / (hi - lo)
        });
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Raw `(z, y, x)` array plus spacing/origin from a NIfTI file.
fn read_nifti(path: &Path) -> Result<(Array3<f32>, [f64; 3], [f64; 3])> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let header = obj.header().clone();
    let dim = header.dim().map_err(|e| format_err(path, e.to_string()))?;
    if dim.len() < 3 || dim[3..].iter().any(|&d| d != 1) || dim[..3].contains(&0) {
        return Err(format_err(path, format!("expected a 3-D volume, got dims {dim:?}")));
    }
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| format_err(path, e.to_string()))?;
    // The reader yields column-major data; reshape in logical order.
    let arr = arr
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(ndarray::IxDyn(&[dim[0] as usize, dim[1] as usize, dim[2] as usize]))
        .map_err(|e| format_err(path, e.to_string()))?;
    let xyz = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| format_err(path, e.to_string()))?;
    let zyx = xyz.reversed_axes().as_standard_layout().to_owned();
    let p = header.pixdim;
    let spacing = [p[3], p[2], p[1]].map(|v| if v > 0.0 { v as f64 } else { 1.0 });
    let origin = [header.quatern_z, header.quatern_y, header.quatern_x].map(f64::from);
    Ok((zyx, spacing, origin))
}

fn target_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((shape[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

/// Reads an image volume, clamps/rescales intensities and optionally
/// resamples (trilinear) to the target spacing.
pub fn load_volume(path: &Path, spec: &PreprocessSpec) -> Result<Volume> {
    spec.validate()?;
    let (mut data, mut spacing, origin) = read_nifti(path)?;
    spec.normalize(&mut data);
    if let Some(t) = spec.target_spacing {
        let shape = target_shape(dims(&data), spacing, t);
        data = resize_trilinear(&data, shape);
        spacing = t;
    }
    Volume::new(data, spacing, origin)
}

/// Reads a label volume without intensity transforms; resampling is nearest-neighbour.
pub fn load_mask(path: &Path, target_spacing: Option<[f64; 3]>) -> Result<LabelMask> {
    let (data, spacing, _) = read_nifti(path)?;
    let mut labels = Array3::<u8>::zeros(dims(&data));
    for (l, &v) in labels.iter_mut().zip(data.iter()) {
        let r = v.round();
        if !(0.0..NUM_CLASSES as f32).contains(&r) {
            return Err(format_err(path, format!("label value {v} outside 0..{NUM_CLASSES}")));
        }
        *l = r as u8;
    }
    if let Some(t) = target_spacing {
        labels = resize_nearest(&labels, target_shape(dims(&labels), spacing, t));
    }
    LabelMask::new(labels)
}

fn header_for(spacing: [f64; 3], origin: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    h.quatern_x = origin[2] as f32;
    h.quatern_y = origin[1] as f32;
    h.quatern_z = origin[0] as f32;
    h.qform_code = 1;
    h.sform_code = 0;
    h.xyzt_units = 2;
    h
}

/// Writes raw intensities (no normalisation is undone) as NIfTI.
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let header = header_for(volume.spacing, volume.origin);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&volume.data.t())
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &LabelMask, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    let header = header_for(spacing, origin);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&mask.data.t())
        .map_err(|e| format_err(path, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MsdPair {
    pub image: String,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MsdDescription {
    #[serde(default)]
    pub name: String,
    #[serde(default, rename = "numTraining")]
    pub num_training: Option<usize>,
    pub training: Vec<MsdPair>,
}

fn case_id_from(path: &str) -> String {
    let file = Path::new(path)
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string());
    file.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Reads an MSD task directory (`dataset.json`, `imagesTr/`, `labelsTr/`).
pub fn load_msd(root: &Path) -> Result<DatasetManifest> {
    let desc_path = root.join(MSD_DESCRIPTION);
    let text = fs::read_to_string(&desc_path).map_err(|e| format_err(&desc_path, e.to_string()))?;
    let desc: MsdDescription = serde_json::from_str(&text).map_err(|e| format_err(&desc_path, e.to_string()))?;
    let mut cases = Vec::with_capacity(desc.training.len());
    for pair in &desc.training {
        let image = root.join(&pair.image);
        let label = root.join(&pair.label);
        for p in [&image, &label] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        cases.push(CaseRecord {
            case_id: case_id_from(&pair.image),
            volume_path: image,
            mask_path: Some(label),
            response_label: None,
            split: Split::Train,
        });
    }
    let name = if desc.name.is_empty() {
        root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        desc.name
    };
    log::info!("{}: {} training pairs", name, cases.len());
    DatasetManifest::new(name, cases)
}

/// Writes the description file for an MSD-style directory.
pub fn write_msd_description(root: &Path, name: &str, pairs: Vec<MsdPair>) -> Result<()> {
    let desc = MsdDescription {
        name: name.to_string(),
        num_training: Some(pairs.len()),
        training: pairs,
    };
    fs::write(root.join(MSD_DESCRIPTION), serde_json::to_string_pretty(&desc)?)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    case_id: String,
    volume_path: String,
    response_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Reads a classification manifest (`case_id,volume_path,response_label[,mask_path][,split]`).
/// Relative paths resolve against the manifest's directory.
pub fn read_classification_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut cases = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| format_err(path, e.to_string()))?;
        if row.response_label > 1 {
            return Err(format_err(path, format!("case {}: response_label must be 0 or 1", row.case_id)));
        }
        cases.push(CaseRecord {
            volume_path: base.join(&row.volume_path),
            mask_path: row.mask_path.as_ref().map(|m| base.join(m)),
            response_label: Some(row.response_label == 1),
            split: row.split.unwrap_or(Split::Train),
            case_id: row.case_id,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetManifest::new(name, cases)
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Writes a classification manifest with paths relative to its directory.
pub fn write_classification_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path)?;
    for c in &manifest.cases {
        let label = c
            .response_label
            .ok_or_else(|| Error::Config(format!("case {} has no response label", c.case_id)))?;
        w.serialize(ManifestRow {
            case_id: c.case_id.clone(),
            volume_path: relative_to(&c.volume_path, base),
            response_label: label as u8,
            mask_path: c.mask_path.as_ref().map(|m| relative_to(m, base)),
            split: Some(c.split),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Stratified train/test split.
///
/// Each class contributes `round(count · test_fraction)` test cases, except
/// the largest class, which takes whatever keeps the total at
/// `round(N · test_fraction)`. Membership depends only on `seed`.
pub fn stratified_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Stratification(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::from([(0, Vec::new()), (1, Vec::new())]);
    for (i, c) in manifest.cases.iter().enumerate() {
        let l = c
            .label_id()
            .ok_or_else(|| Error::Stratification(format!("case {} has no response label", c.case_id)))?;
        by_class.entry(l).or_default().push(i);
    }
    if let Some((l, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Stratification(format!("class {l} has no members")));
    }
    let total_test = (manifest.len() as f64 * test_fraction).round() as usize;
    let largest = *by_class
        .iter()
        .max_by_key(|(l, v)| (v.len(), std::cmp::Reverse(**l)))
        .map(|(l, _)| l)
        .expect("two classes");
    let mut quotas: BTreeMap<u8, usize> = by_class
        .iter()
        .map(|(&l, v)| (l, (v.len() as f64 * test_fraction).round() as usize))
        .collect();
    let others: usize = quotas.iter().filter(|(l, _)| **l != largest).map(|(_, q)| q).sum();
    quotas.insert(largest, total_test.saturating_sub(others).min(by_class[&largest].len()));

    let mut rng = pdac_nn::seeded_rng(seed);
    let mut test_ids = BTreeSet::new();
    for (l, members) in &by_class {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        test_ids.extend(m.into_iter().take(quotas[l]));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, c) in manifest.cases.iter().enumerate() {
        let mut c = c.clone();
        if test_ids.contains(&i) {
            c.split = Split::Test;
            test.push(c);
        } else {
            c.split = Split::Train;
            train.push(c);
        }
    }
    Ok((
        DatasetManifest::new(format!("{}-train", manifest.name), train)?,
        DatasetManifest::new(format!("{}-test", manifest.name), test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labelled(pos: usize, neg: usize) -> DatasetManifest {
        let cases = (0..pos + neg)
            .map(|i| CaseRecord {
                case_id: format!("case{i:04}"),
                volume_path: PathBuf::from(format!("case{i:04}.nii.gz")),
                mask_path: None,
                response_label: Some(i < pos),
                split: Split::Train,
            })
            .collect();
        DatasetManifest::new("t", cases).unwrap()
    }

    fn counts(m: &DatasetManifest) -> (usize, usize) {
        (
            *m.class_counts.get(&1).unwrap_or(&0),
            *m.class_counts.get(&0).unwrap_or(&0),
        )
    }

    #[test]
    fn clinical_split_sizes() {
        let m = labelled(171, 306);
        let (train, test) = stratified_split(&m, 57.0 / 477.0, 0).unwrap();
        assert_eq!(test.len(), 57);
        assert_eq!(counts(&test), (20, 37));
        assert_eq!(train.len(), 420);
        assert_eq!(counts(&train), (151, 269));
    }

    #[test]
    fn small_split_is_exactly_stratified_and_deterministic() {
        let m = labelled(5, 5);
        for seed in 0..20 {
            let (train, test) = stratified_split(&m, 0.2, seed).unwrap();
            assert_eq!(counts(&test), (1, 1));
            assert_eq!(train.len(), 8);
            let (_, again) = stratified_split(&m, 0.2, seed).unwrap();
            assert_eq!(test, again);
        }
    }

    #[test]
    fn split_errors() {
        assert!(matches!(stratified_split(&labelled(4, 0), 0.2, 0), Err(Error::Stratification(_))));
        assert!(stratified_split(&labelled(4, 4), 1.0, 0).is_err());
        let mut m = labelled(2, 2);
        m.cases[0].response_label = None;
        assert!(stratified_split(&m, 0.5, 0).is_err());
    }

    #[test]
    fn duplicate_case_ids_rejected() {
        let mut m = labelled(1, 1);
        m.cases[1].case_id = m.cases[0].case_id.clone();
        assert!(DatasetManifest::new("dup", m.cases).is_err());
    }

    #[test]
    fn window_normalisation() {
        let spec = PreprocessSpec {
            hu_window: (-100.0, 300.0),
            target_spacing: None,
        };
        let mut a = Array3::from_shape_vec((1, 1, 3), vec![-200.0, 0.0, 400.0]).unwrap();
        spec.normalize(&mut a);
        assert_eq!(a.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.25, 1.0]);
        assert!(PreprocessSpec {
            hu_window: (1.0, 1.0),
            target_spacing: None
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(pos in 1usize..40, neg in 1usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let m = labelled(pos, neg);
            let (train, test) = stratified_split(&m, frac, seed).unwrap();
            let mut ids: Vec<&str> = train.cases.iter().chain(&test.cases).map(|c| c.case_id.as_str()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), pos + neg);
            prop_assert_eq!(train.len() + test.len(), pos + neg);
        }
    }
}
