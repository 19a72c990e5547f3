//! Pancreas/tumour segmentation with a small 3-D U-Net, informed cropping
//! from the predicted mask, and mask forwarding as extra input channels.

use std::collections::BTreeMap;

use log::{info, warn};
use ndarray::{s, Array3, Array4, Axis};
use pdac_nn::{seeded_rng, Adam, ConvCfg, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{array_tensor, centred, conv, conv_relu, copy_matching, init_conv};
use crate::volume::{
    bbox_from_mask, center_crop_bbox, crop, crop_mask, dims, one_hot_mask, pad_to, BBox3, LabelMask,
    LabeledVolume, Volume, NUM_CLASSES, PANCREAS, TUMOUR,
};

pub use crate::metrics::dice;

pub const STAGE_TAG: &str = "seg";
/// Name of the encoder sub-state inside segmentation checkpoints.
pub const ENCODER: &str = "encoder";
pub const DEFAULT_BBOX_MARGIN: [usize; 3] = [8, 8, 8];
pub const FOREGROUND: [u8; 2] = [PANCREAS, TUMOUR];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegModelSpec {
    /// Channel width of each encoder stage; every stage after the first halves
    /// the resolution.
    pub widths: Vec<usize>,
    pub out_classes: usize,
}

impl Default for SegModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![4, 8, 16],
            out_classes: NUM_CLASSES,
        }
    }
}

impl SegModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("segmentation widths must be non-empty and non-zero".into()));
        }
        if self.out_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "segmentation predicts {NUM_CLASSES} classes, got {}",
                self.out_classes
            )));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Initialises the encoder tensors (`encoder.{stage}.{conv}`) for `in_channels` inputs.
pub(crate) fn init_encoder(store: &mut ParamStore, widths: &[usize], in_channels: usize, rng: &mut pdac_nn::ChaCha8Rng) {
    let mut cin = in_channels;
    for (i, &c) in widths.iter().enumerate() {
        init_conv(store, &format!("{ENCODER}.{i}.0"), c, cin, [3, 3, 3], rng);
        init_conv(store, &format!("{ENCODER}.{i}.1"), c, c, [3, 3, 3], rng);
        cin = c;
    }
}

/// Encoder forward pass returning the output of every stage. `first_extra` is
/// added to the pre-activation of the very first convolution.
pub(crate) fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    widths: &[usize],
    x: Var,
    first_extra: Option<Var>,
) -> Vec<Var> {
    let mut skips = Vec::with_capacity(widths.len());
    let mut h = centred(g, x);
    for i in 0..widths.len() {
        let stride = if i == 0 { 1 } else { 2 };
        let mut pre = conv(g, store, &format!("{ENCODER}.{i}.0"), h, ConvCfg::cube(3, stride));
        if i == 0 {
            if let Some(extra) = first_extra {
                pre = g.add(pre, extra);
            }
        }
        h = g.relu(pre);
        h = conv_relu(g, store, &format!("{ENCODER}.{i}.1"), h, ConvCfg::cube(3, 1));
        skips.push(h);
    }
    skips
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainParams {
    pub epochs: usize,
    pub learning_rate: f32,
    /// Training patch `(z, y, x)`, clipped to the volume.
    pub patch: [usize; 3],
    pub batch_size: usize,
    /// Probability that a patch is centred on a foreground voxel.
    pub foreground_prob: f64,
    /// Patches drawn from each training case per epoch.
    pub patches_per_case: usize,
    /// Sliding-window size at inference.
    pub window: [usize; 3],
}

impl Default for SegTrainParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            patch: [16, 32, 32],
            batch_size: 2,
            foreground_prob: 0.5,
            patches_per_case: 4,
            window: [64, 128, 128],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub spec: SegModelSpec,
    pub params: ParamStore,
    /// Sliding-window size at inference.
    pub window: [usize; 3],
    trained: bool,
}

impl SegModel {
    pub fn new(spec: SegModelSpec, window: [usize; 3], seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &spec.widths, 1, &mut rng);
        for i in (0..spec.widths.len() - 1).rev() {
            let cin = spec.widths[i + 1] + spec.widths[i];
            init_conv(&mut params, &format!("decoder.{i}"), spec.widths[i], cin, [3, 3, 3], &mut rng);
        }
        init_conv(&mut params, "decoder.head", spec.out_classes, spec.widths[0], [1, 1, 1], &mut rng);
        Ok(Self {
            spec,
            params,
            window,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn encoder(&self) -> ParamStore {
        self.params.subtree(ENCODER)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        if !self.trained {
            return Err(Error::State("refusing to checkpoint an untrained segmentation model".into()));
        }
        let config = serde_json::json!({ "spec": self.spec, "window": self.window });
        Ok(Checkpoint::new(STAGE_TAG, seed, config, self.params.clone()).with_subtree(ENCODER, ENCODER))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.stage != STAGE_TAG {
            return Err(Error::State(format!("checkpoint stage `{}` is not `{STAGE_TAG}`", ck.stage)));
        }
        let spec: SegModelSpec = serde_json::from_value(ck.config["spec"].clone())?;
        let window: [usize; 3] = serde_json::from_value(ck.config["window"].clone())?;
        let mut model = Self::new(spec, window, ck.seed)?;
        copy_matching(&mut model.params, &ck.params)?;
        model.trained = true;
        Ok(model)
    }

    /// Global-average-pooled features of the deepest encoder stage, computed
    /// over the whole volume in one pass.
    pub fn pooled_encoder_features(&self, volume: &Volume) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(array_tensor(&volume.data, &[1, 1]));
        let stages = encoder_forward(&mut g, &self.params, &self.spec.widths, x, None);
        let pooled = g.global_avg_pool(*stages.last().expect("non-empty"));
        g.value(pooled).data().iter().map(|&v| v as f64).collect()
    }

    /// `[N, 1, D, H, W]` with extents divisible by [`SegModelSpec::divisor`] -> `[N, 3, D, H, W]` logits.
    fn logits(&self, g: &mut Graph, x: Var) -> Var {
        let skips = encoder_forward(g, &self.params, &self.spec.widths, x, None);
        let mut h = *skips.last().expect("non-empty");
        for i in (0..skips.len() - 1).rev() {
            let up = g.upsample(h, [2, 2, 2]);
            let cat = g.concat_channels(&[up, skips[i]]);
            h = conv_relu(g, &self.params, &format!("decoder.{i}"), cat, ConvCfg::cube(3, 1));
        }
        conv(g, &self.params, "decoder.head", h, ConvCfg::cube(1, 1))
    }

    /// Class logits `[3, z, y, x]` for a whole volume by sliding windows with
    /// 50 % overlap and averaged logits.
    pub fn volume_logits(&self, volume: &Volume) -> Array4<f32> {
        let shape = volume.shape();
        let c = self.spec.out_classes;
        let div = self.spec.divisor();
        let mut sum = Array4::<f32>::zeros((c, shape[0], shape[1], shape[2]));
        let mut count = Array3::<f32>::zeros(shape);
        let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(shape[a], self.window[a].max(1))).collect();
        for &z0 in &starts[0] {
            for &y0 in &starts[1] {
                for &x0 in &starts[2] {
                    let lo = [z0, y0, x0];
                    let ext: [usize; 3] = std::array::from_fn(|a| self.window[a].max(1).min(shape[a]));
                    let sub = volume
                        .data
                        .slice(s![z0..z0 + ext[0], y0..y0 + ext[1], x0..x0 + ext[2]])
                        .to_owned();
                    let padded_shape = ext.map(|e| e.div_ceil(div) * div);
                    let padded = pad_to(&sub, padded_shape);
                    let mut g = Graph::new();
                    let x = g.input(array_tensor(&padded, &[1, 1]));
                    let logits = self.logits(&mut g, x);
                    let out = g.value(logits).data();
                    let plane = padded_shape[1] * padded_shape[2];
                    let vol = padded_shape[0] * plane;
                    for ch in 0..c {
                        for z in 0..ext[0] {
                            for y in 0..ext[1] {
                                let row = ch * vol + z * plane + y * padded_shape[2];
                                let mut dst = sum.slice_mut(s![ch, lo[0] + z, lo[1] + y, lo[2]..lo[2] + ext[2]]);
                                for (d, v) in dst.iter_mut().zip(&out[row..row + ext[2]]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    count
                        .slice_mut(s![z0..z0 + ext[0], y0..y0 + ext[1], x0..x0 + ext[2]])
                        .mapv_inplace(|v| v + 1.0);
                }
            }
        }
        for mut ch in sum.axis_iter_mut(Axis(0)) {
            ch /= &count;
        }
        sum
    }
}

/// Window origins covering `n` with windows of size `w` and stride `w / 2`.
fn window_starts(n: usize, w: usize) -> Vec<usize> {
    if n <= w {
        return vec![0];
    }
    let step = (w / 2).max(1);
    let mut starts: Vec<usize> = (0..=n - w).step_by(step).collect();
    if *starts.last().expect("non-empty") != n - w {
        starts.push(n - w);
    }
    starts
}

/// Predicted mask and, when scored against a reference, per-class Dice.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    pub mask: LabelMask,
    pub per_class_dice: BTreeMap<u8, f64>,
}

impl SegPrediction {
    pub fn new(mask: LabelMask) -> Self {
        Self {
            mask,
            per_class_dice: BTreeMap::new(),
        }
    }

    /// Fills `per_class_dice` for the foreground classes against `truth`.
    pub fn score(&mut self, truth: &LabelMask) -> Result<()> {
        for class in FOREGROUND {
            self.per_class_dice.insert(class, dice(&self.mask, truth, class)?);
        }
        Ok(())
    }
}

pub fn predict_mask(model: &SegModel, volume: &Volume) -> Result<SegPrediction> {
    if !model.is_trained() {
        return Err(Error::State("segmentation model has not been trained".into()));
    }
    let logits = model.volume_logits(volume);
    Ok(SegPrediction::new(LabelMask::new(crate::volume::argmax_channels(&logits))?))
}

/// Mean per-class Dice over a case set.
pub fn evaluate_segmentation(model: &SegModel, cases: &[LabeledVolume]) -> Result<BTreeMap<u8, f64>> {
    if cases.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut totals: BTreeMap<u8, f64> = FOREGROUND.iter().map(|&c| (c, 0.0)).collect();
    for case in cases {
        let mut pred = predict_mask(model, &case.volume)?;
        pred.score(&case.mask)?;
        for (class, d) in pred.per_class_dice {
            *totals.get_mut(&class).expect("foreground class") += d;
        }
    }
    for v in totals.values_mut() {
        *v /= cases.len() as f64;
    }
    Ok(totals)
}

fn sample_patch(case: &LabeledVolume, patch: [usize; 3], fg_prob: f64, rng: &mut impl Rng) -> BBox3 {
    let shape = case.volume.shape();
    let ext: [usize; 3] = std::array::from_fn(|a| patch[a].max(1).min(shape[a]));
    let centre: Option<[usize; 3]> = if rng.random_bool(fg_prob) {
        let n_fg = case.mask.data.iter().filter(|&&v| v != 0).count();
        if n_fg > 0 {
            let k = rng.random_range(0..n_fg);
            case.mask
                .data
                .indexed_iter()
                .filter(|(_, &v)| v != 0)
                .nth(k)
                .map(|((z, y, x), _)| [z, y, x])
        } else {
            None
        }
    } else {
        None
    };
    let lo: [usize; 3] = std::array::from_fn(|a| {
        let max_lo = shape[a] - ext[a];
        match centre {
            Some(c) => {
                let jitter = rng.random_range(0..=ext[a] / 2) as isize - (ext[a] / 4) as isize;
                (c[a] as isize - (ext[a] / 2) as isize + jitter).clamp(0, max_lo as isize) as usize
            }
            None => rng.random_range(0..=max_lo),
        }
    });
    BBox3 {
        lo,
        hi: std::array::from_fn(|a| lo[a] + ext[a] - 1),
    }
}

/// Trains with soft Dice plus cross-entropy on foreground-biased patches and
/// reports mean per-class Dice on `eval`.
pub fn train_segmentation(
    train: &[LabeledVolume],
    eval: &[LabeledVolume],
    spec: &SegModelSpec,
    params: &SegTrainParams,
    seed: u64,
) -> Result<(SegModel, BTreeMap<u8, f64>)> {
    for class in FOREGROUND {
        if !train.iter().any(|c| c.mask.count(class) > 0) {
            return Err(Error::DegenerateDataset(format!(
                "class {class} absent from every training mask"
            )));
        }
    }
    let mut model = SegModel::new(spec.clone(), params.window, seed)?;
    let div = spec.divisor();
    let patch = params.patch.map(|p| (p / div).max(1) * div);
    let mut rng = seeded_rng(seed ^ 0x5e9_5e9);
    let mut adam = Adam::new(params.learning_rate);
    let batch = params.batch_size.max(1);
    let mut order: Vec<usize> = (0..train.len())
        .flat_map(|i| std::iter::repeat_n(i, params.patches_per_case.max(1)))
        .collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for group in order.chunks(batch) {
            // Patches in a batch share one extent: the smallest over the group.
            let ext: [usize; 3] = std::array::from_fn(|a| {
                group
                    .iter()
                    .map(|&i| dims(&train[i].volume.data)[a])
                    .min()
                    .expect("non-empty group")
                    .min(patch[a])
            });
            let mut images = Vec::new();
            let mut labels = Vec::new();
            let padded = ext.map(|e| e.div_ceil(div) * div);
            for &i in group {
                let bbox = sample_patch(&train[i], ext, params.foreground_prob, &mut rng);
                let img = crop(&train[i].volume, &bbox)?.data;
                let lab = crop_mask(&train[i].mask, &bbox)?.data;
                images.extend(pad_to(&img, padded).iter().copied());
                labels.extend(pad_to(&lab, padded).iter().copied());
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::new(
                vec![group.len(), 1, padded[0], padded[1], padded[2]],
                images,
            ));
            let logits = model.logits(&mut g, x);
            let overlap = g.soft_dice_loss(logits, &labels);
            let ce = g.softmax_cross_entropy(logits, &labels);
            let loss = g.add(overlap, ce);
            epoch_loss += g.value(loss).item() as f64;
            steps += 1;
            let grads = g.backward(loss).into_params();
            adam.step(&mut model.params, &grads);
        }
        info!(
            "seg epoch {}/{}: dice+ce {:.4}",
            epoch + 1,
            params.epochs,
            epoch_loss / steps.max(1) as f64
        );
    }
    model.trained = true;
    let scores = if eval.is_empty() {
        BTreeMap::new()
    } else {
        evaluate_segmentation(&model, eval)?
    };
    info!("seg validation dice {scores:?}");
    Ok((model, scores))
}

/// Result of cropping around the predicted foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct InformedCrop {
    pub volume: Volume,
    pub mask: LabelMask,
    pub bbox: BBox3,
    /// Set when the prediction had no foreground and a centre crop was used.
    pub fallback: bool,
}

/// Crops to the predicted foreground box (all three axes), or falls back to a
/// centre crop of `fallback_size` with an all-background mask.
pub fn informed_crop(
    volume: &Volume,
    pred: &LabelMask,
    margin: [usize; 3],
    foreground: &[u8],
    fallback_size: (usize, usize),
) -> Result<InformedCrop> {
    if volume.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} and prediction {:?} differ",
            volume.shape(),
            pred.shape()
        )));
    }
    match bbox_from_mask(pred, foreground, margin) {
        Ok(bbox) => Ok(InformedCrop {
            volume: crop(volume, &bbox)?,
            mask: crop_mask(pred, &bbox)?,
            bbox,
            fallback: false,
        }),
        Err(Error::EmptyForeground(_)) => {
            let shape = volume.shape();
            let size = (fallback_size.0.min(shape[1]), fallback_size.1.min(shape[2]));
            let bbox = center_crop_bbox(shape, size)?;
            warn!("empty segmentation; falling back to a {size:?} centre crop");
            Ok(InformedCrop {
                volume: crop(volume, &bbox)?,
                mask: LabelMask::zeros(bbox.extent()),
                bbox,
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Stacks intensities with the one-hot predicted mask: `[4, z, y, x]`.
pub fn forward_channels(volume: &Volume, pred_mask: &LabelMask) -> Result<Array4<f32>> {
    let [d, h, w] = volume.shape();
    if pred_mask.shape() != [d, h, w] {
        return Err(Error::Shape(format!(
            "volume {:?} and mask {:?} differ",
            volume.shape(),
            pred_mask.shape()
        )));
    }
    let one_hot = one_hot_mask(pred_mask, NUM_CLASSES)?;
    let mut out = Array4::zeros((1 + NUM_CLASSES, d, h, w));
    out.index_axis_mut(Axis(0), 0).assign(&volume.data);
    out.slice_mut(s![1.., .., .., ..]).assign(&one_hot);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::argmax_channels;

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(10, 16), vec![0]);
        assert_eq!(window_starts(16, 16), vec![0]);
        assert_eq!(window_starts(20, 8), vec![0, 4, 8, 12]);
        assert_eq!(window_starts(21, 8), vec![0, 4, 8, 12, 13]);
    }

    #[test]
    fn odd_shapes_round_trip_through_padding() {
        let mut model = SegModel::new(SegModelSpec::default(), [16, 32, 32], 0).unwrap();
        model.trained = true;
        let v = Volume::from_array(Array3::from_shape_fn((33, 65, 65), |(z, y, x)| ((z + y + x) % 7) as f32 / 7.0)).unwrap();
        let a = predict_mask(&model, &v).unwrap();
        assert_eq!(a.mask.shape(), [33, 65, 65]);
        assert_eq!(a, predict_mask(&model, &v).unwrap());
    }

    #[test]
    fn sliding_windows_match_a_single_pass_for_a_pointwise_net() {
        // With 1x1 convolutions only, overlapping windows average identical logits.
        let spec = SegModelSpec { widths: vec![2], out_classes: 3 };
        let mut model = SegModel::new(spec, [4, 4, 4], 1).unwrap();
        for (name, t) in model.params.clone().iter() {
            if name.starts_with("encoder") && name.ends_with(".w") {
                let mut w = Tensor::zeros(t.shape());
                let k = 27;
                for o in 0..t.shape()[0] {
                    for i in 0..t.shape()[1] {
                        w.data_mut()[(o * t.shape()[1] + i) * k + 13] = 0.5 + o as f32;
                    }
                }
                model.params.insert(name, w);
            }
        }
        let v = Volume::from_array(Array3::from_shape_fn((6, 9, 7), |(z, y, x)| (z * 3 + y + 2 * x) as f32 / 30.0)).unwrap();
        let tiled = model.volume_logits(&v);
        model.window = [64, 64, 64];
        let whole = model.volume_logits(&v);
        for (a, b) in tiled.iter().zip(whole.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn untrained_and_degenerate_inputs_are_rejected() {
        let model = SegModel::new(SegModelSpec::default(), [16, 16, 16], 0).unwrap();
        let v = Volume::from_array(Array3::zeros((4, 4, 4))).unwrap();
        assert!(matches!(predict_mask(&model, &v), Err(Error::State(_))));
        let mut m = LabelMask::zeros([4, 4, 4]);
        m.data[[1, 1, 1]] = PANCREAS;
        let c = LabeledVolume::new(v, m).unwrap();
        let r = train_segmentation(&[c], &[], &SegModelSpec::default(), &SegTrainParams::default(), 0);
        assert!(matches!(r, Err(Error::DegenerateDataset(_))));
    }

    #[test]
    fn all_background_prediction_scores_zero_pancreas_dice() {
        let mut truth = LabelMask::zeros([4, 4, 4]);
        truth.data[[2, 2, 2]] = PANCREAS;
        let mut p = SegPrediction::new(LabelMask::zeros([4, 4, 4]));
        p.score(&truth).unwrap();
        assert_eq!(p.per_class_dice[&PANCREAS], 0.0);
        assert_eq!(p.per_class_dice[&TUMOUR], 1.0);
    }

    #[test]
    fn informed_crop_examples() {
        let v = Volume::from_array(Array3::from_shape_fn((10, 12, 12), |(z, y, x)| (z * 144 + y * 12 + x) as f32)).unwrap();
        let mut m = LabelMask::zeros([10, 12, 12]);
        m.data.slice_mut(s![3..7, 2..6, 5..9]).fill(PANCREAS);
        let c = informed_crop(&v, &m, [0; 3], &FOREGROUND, (8, 8)).unwrap();
        assert_eq!(c.volume.shape(), [4, 4, 4]);
        assert_eq!(c.bbox, BBox3 { lo: [3, 2, 5], hi: [6, 5, 8] });
        assert!(!c.fallback);
        assert_eq!(c.mask.count(PANCREAS), 64);

        let c = informed_crop(&v, &m, [2; 3], &FOREGROUND, (8, 8)).unwrap();
        assert_eq!(c.bbox, BBox3 { lo: [1, 0, 3], hi: [8, 7, 10] });

        let empty = informed_crop(&v, &LabelMask::zeros([10, 12, 12]), [8; 3], &FOREGROUND, (8, 8)).unwrap();
        assert!(empty.fallback);
        assert_eq!(empty.volume.shape(), [10, 8, 8]);
        assert_eq!(empty.bbox.lo, [0, 2, 2]);
        assert_eq!(empty.mask.count(0), 640);

        let full = LabelMask::new(Array3::from_elem((10, 12, 12), TUMOUR)).unwrap();
        let c = informed_crop(&v, &full, [8; 3], &FOREGROUND, (8, 8)).unwrap();
        assert_eq!(c.volume, v);
    }

    #[test]
    fn forwarded_channels() {
        let v = Volume::from_array(Array3::from_elem((3, 4, 5), 0.25)).unwrap();
        let bg = forward_channels(&v, &LabelMask::zeros([3, 4, 5])).unwrap();
        assert_eq!(bg.shape(), &[4, 3, 4, 5]);
        assert!(bg.slice(s![2.., .., .., ..]).iter().all(|&x| x == 0.0));
        assert!(bg.index_axis(Axis(0), 0).iter().all(|&x| x == 0.25));

        let mask = LabelMask::new(Array3::from_shape_fn((3, 4, 5), |(z, y, x)| ((z + 2 * y + x) % 3) as u8)).unwrap();
        let ch = forward_channels(&v, &mask).unwrap();
        assert_eq!(argmax_channels(&ch.slice(s![1.., .., .., ..]).to_owned()), mask.data);
        assert!(matches!(forward_channels(&v, &LabelMask::zeros([3, 4, 4])), Err(Error::Shape(_))));
    }
}
