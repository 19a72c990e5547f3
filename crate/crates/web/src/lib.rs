//! Browser bindings for a few cascade operations: a phantom viewer with slice
//! labels and crop boxes, the triplet hinge with its gradients, and the
//! binary classification metrics.

use pdac_core::io::PreprocessSpec;
use pdac_core::metrics::score_predictions;
use pdac_core::phantom::{generate_case, tumour_ratio, PhantomCase, PhantomParams};
use pdac_core::stage1::{derive_slice_labels, fill_gaps, z_crop_bbox, SliceLabelSequence};
use pdac_core::stage2::FOREGROUND;
use pdac_core::stage3::{triplet_loss, triplet_loss_grad, Embedding, TripletConfig};
use pdac_core::volume::{bbox_from_mask, PANCREAS, TUMOUR};
use wasm_bindgen::prelude::*;

fn js_err(e: pdac_core::Error) -> String {
    e.to_string()
}

/// A small synthetic study held in memory.
#[wasm_bindgen]
pub struct Phantom {
    case: PhantomCase,
    display: ndarray::Array3<f32>,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Phantom, String> {
        let case = generate_case(&PhantomParams::small(), seed).map_err(js_err)?;
        let mut display = case.volume.data.clone();
        PreprocessSpec::default().normalize(&mut display);
        Ok(Self { case, display })
    }

    pub fn depth(&self) -> usize {
        self.case.volume.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.case.volume.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.case.volume.shape()[2]
    }

    /// Response label: `true` for progressive disease.
    pub fn label(&self) -> bool {
        self.case.label
    }

    pub fn tumour_ratio(&self) -> f64 {
        tumour_ratio(&self.case.mask)
    }

    /// RGBA pixels of axial slice `z`, optionally tinted by the ground-truth mask.
    pub fn slice_rgba(&self, z: usize, overlay: bool) -> Result<Vec<u8>, String> {
        if z >= self.depth() {
            return Err(format!("slice {z} outside 0..{}", self.depth()));
        }
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let g = (self.display[[z, y, x]] * 255.0).round() as u8;
                let px = match (overlay, self.case.mask.data[[z, y, x]]) {
                    (true, PANCREAS) => [g / 2, g / 2 + 127, g / 2],
                    (true, TUMOUR) => [g / 2 + 127, g / 2, g / 2],
                    _ => [g, g, g],
                };
                out.extend_from_slice(&[px[0], px[1], px[2], 255]);
            }
        }
        Ok(out)
    }

    /// Per-slice ground-truth labels (1 where pancreas or tumour is present).
    pub fn slice_labels(&self) -> Vec<u8> {
        derive_slice_labels(&self.case.mask).values.iter().map(|&b| b as u8).collect()
    }

    /// `[first, last]` slices kept by z-cropping the ground-truth labels
    /// with gaps filled and `margin` slices added on both sides.
    pub fn z_crop(&self, margin: usize) -> Result<Vec<usize>, String> {
        let seq = derive_slice_labels(&self.case.mask);
        let b = z_crop_bbox(self.case.volume.shape(), &seq, margin).map_err(js_err)?;
        Ok(vec![b.lo[0], b.hi[0]])
    }

    /// Foreground box `[z0, y0, x0, z1, y1, x1]` (inclusive) dilated by `margin`.
    pub fn foreground_box(&self, margin: usize) -> Result<Vec<usize>, String> {
        let b = bbox_from_mask(&self.case.mask, &FOREGROUND, [margin; 3]).map_err(js_err)?;
        Ok(b.lo.iter().chain(&b.hi).copied().collect())
    }
}

/// Fills the gaps between the first and last positive entries of a 0/1 sequence.
#[wasm_bindgen]
pub fn fill_slice_gaps(values: &[u8]) -> Vec<u8> {
    let seq = SliceLabelSequence::new(values.iter().map(|&v| v != 0).collect());
    fill_gaps(&seq).values.iter().map(|&b| b as u8).collect()
}

/// Hinge triplet loss followed by its gradients with respect to the anchor,
/// positive and negative: `[loss, ∂a.., ∂p.., ∂n..]`.
#[wasm_bindgen]
pub fn triplet(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<Vec<f64>, String> {
    let cfg = TripletConfig {
        margin,
        ..TripletConfig::default()
    };
    cfg.validate().map_err(js_err)?;
    let (a, p, n) = (
        Embedding::new(anchor.to_vec()),
        Embedding::new(positive.to_vec()),
        Embedding::new(negative.to_vec()),
    );
    let loss = triplet_loss(&a, &p, &n, &cfg).map_err(js_err)?;
    let grads = triplet_loss_grad(&a, &p, &n, &cfg).map_err(js_err)?;
    let mut out = vec![loss];
    for g in grads {
        out.extend(g);
    }
    Ok(out)
}

/// MCC, accuracy and AUC-ROC as a JSON object; AUC is `null` for a single class.
#[wasm_bindgen]
pub fn metrics_json(scores: &[f64], labels: &[u8], threshold: f64) -> Result<String, String> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let s = score_predictions(scores, &labels, threshold).map_err(js_err)?;
    let auc = if s.auc_roc.is_nan() { None } else { Some(s.auc_roc) };
    Ok(serde_json::json!({ "mcc": s.mcc, "accuracy": s.accuracy, "auc_roc": auc }).to_string())
}
