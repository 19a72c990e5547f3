//! Synthetic abdominal phantoms with pancreas/tumour masks and a response
//! label that is a deterministic function of the mask.
//!
//! The label is `tumour_voxels / (pancreas_voxels + tumour_voxels) >=
//! label_rule_threshold`, so the class signal is visible in the image.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    write_classification_manifest, write_mask, write_msd_description, write_volume, CaseRecord,
    DatasetManifest, MsdPair, Split, MANIFEST_FILE,
};
use crate::volume::{LabelMask, Volume, PANCREAS, TUMOUR};

// Intensities in HU.
const AIR: f32 = -1000.0;
const BODY: f32 = -80.0;
const LIVER: f32 = 60.0;
const BONE: f32 = 500.0;
const PANCREAS_HU: f32 = 140.0;
const TUMOUR_HU: f32 = 20.0;

pub const PHANTOM_SPACING: [f64; 3] = [2.5, 0.8, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    /// `(z, y, x)` extents.
    pub shape: [usize; 3],
    /// Semi-axis interval for the pancreas ellipsoid, in voxels.
    pub pancreas_radius_range: (f64, f64),
    /// Radius interval for the spherical tumour, in voxels.
    pub tumour_radius_range: (f64, f64),
    /// Additive Gaussian noise, HU.
    pub noise_sigma: f64,
    pub label_rule_threshold: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let mut p = Self {
            shape: [64, 96, 96],
            pancreas_radius_range: (8.0, 14.0),
            tumour_radius_range: (2.0, 6.0),
            noise_sigma: 10.0,
            label_rule_threshold: 0.5,
        };
        p.label_rule_threshold = p.median_ratio_threshold();
        p
    }
}

impl PhantomParams {
    /// Down-scaled phantoms (32×48×48) for multi-row, multi-seed runs.
    pub fn small() -> Self {
        let mut p = Self {
            shape: [32, 48, 48],
            pancreas_radius_range: (5.0, 8.0),
            tumour_radius_range: (1.5, 4.0),
            noise_sigma: 10.0,
            label_rule_threshold: 0.5,
        };
        p.label_rule_threshold = p.median_ratio_threshold();
        p
    }

    /// Volume ratio of a median-radius tumour in a median-radius pancreas.
    pub fn median_ratio_threshold(&self) -> f64 {
        let mid = |r: (f64, f64)| 0.5 * (r.0 + r.1);
        (mid(self.tumour_radius_range) / mid(self.pancreas_radius_range)).powi(3)
    }

    pub fn validate(&self) -> Result<()> {
        let half = *self.shape.iter().min().unwrap_or(&0) as f64 / 2.0;
        for (name, (lo, hi)) in [
            ("pancreas", self.pancreas_radius_range),
            ("tumour", self.tumour_radius_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi < half) {
                return Err(Error::InvalidParams(format!(
                    "{name} radius range ({lo}, {hi}) must be positive, ordered and below {half}"
                )));
            }
        }
        if !(self.label_rule_threshold > 0.0 && self.label_rule_threshold < 1.0) {
            return Err(Error::InvalidParams(format!(
                "label threshold {} not in (0, 1)",
                self.label_rule_threshold
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParams("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One generated study: raw HU volume, ground-truth mask, response label.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub volume: Volume,
    pub mask: LabelMask,
    pub label: bool,
}

/// Tumour share of the pancreas region, recomputed from a mask.
pub fn tumour_ratio(mask: &LabelMask) -> f64 {
    let t = mask.count(TUMOUR);
    let region = t + mask.count(PANCREAS);
    if region == 0 {
        0.0
    } else {
        t as f64 / region as f64
    }
}

pub fn label_from_mask(mask: &LabelMask, threshold: f64) -> bool {
    tumour_ratio(mask) >= threshold
}

fn inside_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

pub fn generate_case(params: &PhantomParams, seed: u64) -> Result<PhantomCase> {
    params.validate()?;
    let mut rng = pdac_nn::seeded_rng(seed);
    let sh = params.shape.map(|v| v as f64);
    let (plo, phi) = params.pancreas_radius_range;
    let (tlo, thi) = params.tumour_radius_range;

    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(plo..=phi));
    let centre: [f64; 3] = std::array::from_fn(|a| {
        let jitter = sh[a] / 16.0;
        let c = sh[a] / 2.0 + rng.random_range(-jitter..=jitter);
        c.clamp(radii[a] + 1.0, sh[a] - radii[a] - 2.0)
    });
    let tumour_r = rng.random_range(tlo..=thi);
    let min_axis = radii.iter().copied().fold(f64::INFINITY, f64::min);
    if tumour_r + 1.0 > min_axis {
        return Err(Error::Generation(format!(
            "tumour radius {tumour_r:.2} does not fit inside pancreas semi-axes {radii:?}"
        )));
    }
    // Keeps the tumour inside the pancreas' inscribed sphere with a one-voxel rim.
    let max_offset = min_axis - tumour_r - 1.0;
    let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    let offset = rng.random_range(0.0..=max_offset.max(0.0));
    let tumour_c: [f64; 3] = std::array::from_fn(|a| centre[a] + dir[a] / norm * offset);

    let body_r = [f64::INFINITY, 0.42 * sh[1], 0.47 * sh[2]];
    let body_c = [sh[0] / 2.0, sh[1] / 2.0, sh[2] / 2.0];
    let liver_c = [sh[0] / 2.0, 0.45 * sh[1], 0.83 * sh[2]];
    let liver_r = [0.3 * sh[0], 0.16 * sh[1], 0.1 * sh[2]];
    let spine_c = [0.78 * sh[1], 0.5 * sh[2]];
    let spine_r = 0.055 * sh[2];

    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("finite sigma");
    let mut mask = Array3::<u8>::zeros(params.shape);
    let mut data = Array3::<f32>::zeros(params.shape);
    for ((z, y, x), v) in data.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        let mut hu = AIR;
        if inside_ellipsoid(p, body_c, body_r) {
            hu = BODY;
            if ((p[1] - spine_c[0]).powi(2) + (p[2] - spine_c[1]).powi(2)).sqrt() <= spine_r {
                hu = BONE;
            } else if inside_ellipsoid(p, liver_c, liver_r) {
                hu = LIVER;
            }
        }
        if inside_ellipsoid(p, centre, radii) {
            let dt = (0..3).map(|a| (p[a] - tumour_c[a]).powi(2)).sum::<f64>().sqrt();
            if dt <= tumour_r {
                mask[[z, y, x]] = TUMOUR;
                hu = TUMOUR_HU;
            } else {
                mask[[z, y, x]] = PANCREAS;
                hu = PANCREAS_HU;
            }
        }
        *v = hu + if params.noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
    }
    let mask = LabelMask::new(mask)?;
    let label = label_from_mask(&mask, params.label_rule_threshold);
    Ok(PhantomCase {
        volume: Volume::new(data, PHANTOM_SPACING, [0.0; 3])?,
        mask,
        label,
    })
}

/// Parameters for dataset case `index`: even cases draw the tumour radius from
/// the lower half of the range, odd cases from the upper half.
pub fn case_params(params: &PhantomParams, index: usize) -> PhantomParams {
    let (lo, hi) = params.tumour_radius_range;
    let mid = 0.5 * (lo + hi);
    let mut p = params.clone();
    p.tumour_radius_range = if index % 2 == 0 { (lo, mid) } else { (mid, hi) };
    p
}

pub fn case_id(index: usize) -> String {
    format!("phantom_{index:04}")
}

/// Generates `n` cases into `out` using the MSD layout plus a classification
/// manifest; case `i` uses seed `seed + i`.
pub fn generate_dataset(params: &PhantomParams, n: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    params.validate()?;
    if n < 2 {
        return Err(Error::InvalidParams(format!("need at least 2 cases, got {n}")));
    }
    fs::create_dir_all(out.join("imagesTr"))?;
    fs::create_dir_all(out.join("labelsTr"))?;
    let mut pairs = Vec::with_capacity(n);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let case = generate_case(&case_params(params, i), seed + i as u64)?;
        let id = case_id(i);
        let image = format!("imagesTr/{id}.nii.gz");
        let label = format!("labelsTr/{id}.nii.gz");
        write_volume(&out.join(&image), &case.volume)?;
        write_mask(&out.join(&label), &case.mask, case.volume.spacing, case.volume.origin)?;
        cases.push(CaseRecord {
            case_id: id,
            volume_path: out.join(&image),
            mask_path: Some(out.join(&label)),
            response_label: Some(case.label),
            split: Split::Train,
        });
        pairs.push(MsdPair {
            image: format!("./{image}"),
            label: format!("./{label}"),
        });
    }
    let manifest = DatasetManifest::new("phantoms", cases)?;
    if manifest.class_counts.len() < 2 {
        return Err(Error::Generation(format!(
            "all {n} phantoms share one label; adjust label_rule_threshold"
        )));
    }
    write_msd_description(out, "phantoms", pairs)?;
    write_classification_manifest(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn tiny() -> PhantomParams {
        PhantomParams {
            shape: [24, 32, 32],
            pancreas_radius_range: (5.0, 7.0),
            tumour_radius_range: (1.5, 3.5),
            noise_sigma: 0.0,
            label_rule_threshold: 0.05,
        }
    }

    #[test]
    fn extreme_radii_force_labels() {
        let mut p = tiny();
        p.tumour_radius_range = (3.5, 3.5);
        p.label_rule_threshold = 0.01;
        assert!(generate_case(&p, 1).unwrap().label);
        p.tumour_radius_range = (1.5, 1.5);
        p.label_rule_threshold = 0.99;
        assert!(!generate_case(&p, 1).unwrap().label);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = PhantomParams { noise_sigma: 10.0, ..tiny() };
        let a = generate_case(&p, 7).unwrap();
        let b = generate_case(&p, 7).unwrap();
        assert!(a.volume.data.iter().zip(b.volume.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.label, b.label);
        assert_ne!(generate_case(&p, 8).unwrap().volume.data, a.volume.data);
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let mut p = tiny();
        p.pancreas_radius_range = (3.0, 3.0);
        p.tumour_radius_range = (2.5, 2.5);
        assert!(matches!(generate_case(&p, 0), Err(Error::Generation(_))));
        p.tumour_radius_range = (0.0, 1.0);
        assert!(matches!(generate_case(&p, 0), Err(Error::InvalidParams(_))));
        p.tumour_radius_range = (1.0, 20.0);
        assert!(matches!(generate_case(&p, 0), Err(Error::InvalidParams(_))));
    }

    fn components(mask: &LabelMask, classes: &[u8]) -> usize {
        let sh = mask.shape();
        let mut seen = Array3::<bool>::from_elem(sh, false);
        let mut count = 0;
        for ((z, y, x), v) in mask.data.indexed_iter() {
            if !classes.contains(v) || seen[[z, y, x]] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([[z, y, x]]);
            seen[[z, y, x]] = true;
            while let Some(p) = queue.pop_front() {
                for a in 0..3 {
                    for delta in [-1isize, 1] {
                        let q = p[a] as isize + delta;
                        if q < 0 || q >= sh[a] as isize {
                            continue;
                        }
                        let mut n = p;
                        n[a] = q as usize;
                        if classes.contains(&mask.data[n]) && !seen[n] {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn pancreas_is_one_connected_object_and_label_matches_mask() {
        let p = tiny();
        for seed in 0..12 {
            let c = generate_case(&p, seed).unwrap();
            assert_eq!(components(&c.mask, &[PANCREAS, TUMOUR]), 1, "seed {seed}");
            assert_eq!(components(&c.mask, &[PANCREAS]), 1, "seed {seed}");
            assert!(c.mask.count(TUMOUR) > 0);
            assert_eq!(c.label, label_from_mask(&c.mask, p.label_rule_threshold));
        }
    }

    #[test]
    fn median_threshold_gives_roughly_balanced_classes() {
        let p = PhantomParams { noise_sigma: 0.0, ..PhantomParams::small() };
        let positives = (0..100)
            .filter(|&i| generate_case(&case_params(&p, i), 1000 + i as u64).unwrap().label)
            .count();
        assert!((30..=70).contains(&positives), "{positives} positives of 100");
    }
}
