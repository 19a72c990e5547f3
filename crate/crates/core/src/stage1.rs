//! Slice classification along z: per-slice labels, a 2.5-D model (planar
//! convolutional encoder followed by an LSTM over slices), gap filling and
//! z-cropping.

use log::info;
use ndarray::{s, Axis};
use pdac_nn::{seeded_rng, Adam, ConvCfg, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{array_tensor, centred, conv_relu, copy_matching, init_conv, init_linear, linear};
use crate::volume::{crop, BBox3, LabelMask, LabeledVolume, Volume, BACKGROUND};

pub const DEFAULT_SLICE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_Z_MARGIN: usize = 2;
pub const STAGE_TAG: &str = "slice";
const INFERENCE_CHUNK: usize = 32;

/// Binary per-slice decisions in ascending z.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLabelSequence {
    pub values: Vec<bool>,
}

impl SliceLabelSequence {
    pub fn new(values: Vec<bool>) -> Self {
        Self { values }
    }

    pub fn from_probabilities(probs: &[f64], threshold: f64) -> Self {
        Self::new(probs.iter().map(|&p| p >= threshold).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first_last(&self) -> Option<(usize, usize)> {
        let first = self.values.iter().position(|&v| v)?;
        let last = self.values.iter().rposition(|&v| v)?;
        Some((first, last))
    }
}

/// Slices containing at least one pancreas or tumour voxel.
pub fn derive_slice_labels(mask: &LabelMask) -> SliceLabelSequence {
    SliceLabelSequence::new(
        mask.data
            .axis_iter(Axis(0))
            .map(|slice| slice.iter().any(|&v| v != BACKGROUND))
            .collect(),
    )
}

/// Marks every slice between the first and last positive as positive.
pub fn fill_gaps(seq: &SliceLabelSequence) -> SliceLabelSequence {
    let mut values = seq.values.clone();
    if let Some((first, last)) = seq.first_last() {
        values[first..=last].fill(true);
    }
    SliceLabelSequence::new(values)
}

/// Box spanning the positive slices widened by `margin`, full extent in y/x.
pub fn z_crop_bbox(shape: [usize; 3], seq: &SliceLabelSequence, margin: usize) -> Result<BBox3> {
    if seq.len() != shape[0] {
        return Err(Error::Shape(format!(
            "slice sequence of length {} for z extent {}",
            seq.len(),
            shape[0]
        )));
    }
    let (first, last) = fill_gaps(seq).first_last().ok_or(Error::EmptyPrediction)?;
    BBox3::new(
        [first.saturating_sub(margin), 0, 0],
        [(last + margin).min(shape[0] - 1), shape[1] - 1, shape[2] - 1],
        shape,
    )
}

pub fn z_crop(volume: &Volume, seq: &SliceLabelSequence, margin: usize) -> Result<(Volume, BBox3)> {
    let bbox = z_crop_bbox(volume.shape(), seq, margin)?;
    Ok((crop(volume, &bbox)?, bbox))
}

/// Fraction of slices on which two sequences agree.
pub fn slice_accuracy(pred: &SliceLabelSequence, truth: &SliceLabelSequence) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("sequence lengths {} and {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = pred.values.iter().zip(&truth.values).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceModelSpec {
    /// Output channels of the planar encoder convolutions; the first keeps
    /// full resolution, later ones halve it.
    pub encoder_channels: Vec<usize>,
    pub hidden: usize,
    pub bidirectional: bool,
    pub threshold: f64,
}

impl Default for SliceModelSpec {
    fn default() -> Self {
        Self {
            encoder_channels: vec![4, 8, 16],
            hidden: 16,
            bidirectional: false,
            threshold: DEFAULT_SLICE_THRESHOLD,
        }
    }
}

impl SliceModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("slice model needs non-empty, non-zero widths".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("slice threshold {} not in (0, 1)", self.threshold)));
        }
        Ok(())
    }

    fn directions(&self) -> &'static [&'static str] {
        if self.bidirectional {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceTrainParams {
    pub epochs: usize,
    pub learning_rate: f32,
    /// Contiguous slices per training step; 0 uses the whole volume.
    pub window: usize,
}

impl Default for SliceTrainParams {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 3e-3,
            window: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SliceModel {
    pub spec: SliceModelSpec,
    pub params: ParamStore,
    trained: bool,
}

impl SliceModel {
    /// Randomly initialised, untrained model.
    pub fn new(spec: SliceModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in spec.encoder_channels.iter().enumerate() {
            init_conv(&mut params, &format!("encoder.{i}"), c, cin, [1, 3, 3], &mut rng);
            cin = c;
        }
        let h = spec.hidden;
        let bound = 1.0 / (h as f32).sqrt();
        for dir in spec.directions() {
            let p = format!("lstm.{dir}");
            params.init(format!("{p}.w_ih"), &[4 * h, 2 * cin], pdac_nn::Init::Uniform { bound }, &mut rng);
            params.init(format!("{p}.w_hh"), &[4 * h, h], pdac_nn::Init::Uniform { bound }, &mut rng);
            // Forget gate starts open.
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].fill(1.0);
            params.insert(format!("{p}.b"), Tensor::new(vec![4 * h], b));
        }
        init_linear(&mut params, "head", 1, h * spec.directions().len(), &mut rng);
        Ok(Self {
            spec,
            params,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Replaces encoder weights with externally supplied ones (names `encoder.*`).
    pub fn load_encoder(&mut self, weights: &ParamStore) -> Result<Vec<String>> {
        copy_matching(&mut self.params, &weights.subtree("encoder"))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        if !self.trained {
            return Err(Error::State("refusing to checkpoint an untrained slice model".into()));
        }
        Ok(Checkpoint::new(STAGE_TAG, seed, serde_json::to_value(&self.spec)?, self.params.clone())
            .with_subtree("encoder", "encoder"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.stage != STAGE_TAG {
            return Err(Error::State(format!("checkpoint stage `{}` is not `{STAGE_TAG}`", ck.stage)));
        }
        let spec: SliceModelSpec = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(spec, ck.seed)?;
        copy_matching(&mut model.params, &ck.params)?;
        model.trained = true;
        Ok(model)
    }

    /// `[Z, 1, 1, H, W]` slices -> `[Z, 2C]` per-slice max- and mean-pooled features.
    fn encode(&self, g: &mut Graph, slices: Var) -> Var {
        let mut x = centred(g, slices);
        for i in 0..self.spec.encoder_channels.len() {
            let stride = if i == 0 { 1 } else { 2 };
            x = conv_relu(g, &self.params, &format!("encoder.{i}"), x, ConvCfg::planar(3, stride));
        }
        let peak = g.global_max_pool(x);
        let mean = g.global_avg_pool(x);
        g.concat_cols(&[peak, mean])
    }

    fn lstm(&self, g: &mut Graph, feats: Var, dir: &str) -> Vec<Var> {
        let h = self.spec.hidden;
        let steps = g.value(feats).shape()[0];
        let p = format!("lstm.{dir}");
        let w_ih = g.param(&self.params, &format!("{p}.w_ih"));
        let w_hh = g.param(&self.params, &format!("{p}.w_hh"));
        let b = g.param(&self.params, &format!("{p}.b"));
        let projected = g.linear(feats, w_ih, Some(b));
        let mut hidden = g.input(Tensor::zeros(&[1, h]));
        let mut cell = g.input(Tensor::zeros(&[1, h]));
        let mut outputs = vec![hidden; steps];
        let order: Vec<usize> = if dir == "bwd" {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = g.slice_rows(projected, t, 1);
            let rec = g.linear(hidden, w_hh, None);
            let gates = g.add(xt, rec);
            let i = g.slice_cols(gates, 0, h);
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h, h);
            let f = g.sigmoid(f);
            let c = g.slice_cols(gates, 2 * h, h);
            let c = g.tanh(c);
            let o = g.slice_cols(gates, 3 * h, h);
            let o = g.sigmoid(o);
            let keep = g.mul(f, cell);
            let write = g.mul(i, c);
            cell = g.add(keep, write);
            let squashed = g.tanh(cell);
            hidden = g.mul(o, squashed);
            outputs[t] = hidden;
        }
        outputs
    }

    /// `[Z, C]` features -> `[Z, 1]` logits.
    fn sequence_logits(&self, g: &mut Graph, feats: Var) -> Var {
        let per_dir: Vec<Var> = self
            .spec
            .directions()
            .iter()
            .map(|dir| {
                let steps = self.lstm(g, feats, dir);
                g.concat_rows(&steps)
            })
            .collect();
        let hidden = if per_dir.len() == 1 { per_dir[0] } else { g.concat_cols(&per_dir) };
        linear(g, &self.params, "head", hidden)
    }

    /// Per-slice probabilities regardless of training state.
    pub fn probabilities(&self, volume: &Volume) -> Vec<f64> {
        let [nz, ny, nx] = volume.shape();
        let mut feats = Vec::with_capacity(nz * self.feature_width());
        for z0 in (0..nz).step_by(INFERENCE_CHUNK) {
            let z1 = (z0 + INFERENCE_CHUNK).min(nz);
            let chunk = volume.data.slice(s![z0..z1, .., ..]).to_owned();
            let mut g = Graph::new();
            let x = g.input(array_tensor(&chunk, &[]).reshape(vec![z1 - z0, 1, 1, ny, nx]));
            let f = self.encode(&mut g, x);
            feats.extend_from_slice(g.value(f).data());
        }
        let mut g = Graph::new();
        let f = g.input(Tensor::new(vec![nz, self.feature_width()], feats));
        let logits = self.sequence_logits(&mut g, f);
        g.value(logits).data().iter().map(|&z| sigmoid(z as f64)).collect()
    }

    fn feature_width(&self) -> usize {
        2 * self.spec.encoder_channels.last().expect("validated non-empty")
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Thresholded per-slice predictions of a trained model.
pub fn predict_slices(model: &SliceModel, volume: &Volume) -> Result<SliceLabelSequence> {
    if !model.is_trained() {
        return Err(Error::State("slice model has not been trained".into()));
    }
    Ok(SliceLabelSequence::from_probabilities(
        &model.probabilities(volume),
        model.spec.threshold,
    ))
}

/// Slice accuracy over a case set, before and after gap filling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEvaluation {
    pub accuracy_raw: f64,
    pub accuracy_filled: f64,
    pub slices: usize,
}

pub fn evaluate_slices(model: &SliceModel, cases: &[LabeledVolume]) -> Result<SliceEvaluation> {
    let (mut raw, mut filled, mut total) = (0.0, 0.0, 0usize);
    for case in cases {
        let truth = derive_slice_labels(&case.mask);
        let pred = predict_slices(model, &case.volume)?;
        let n = truth.len() as f64;
        raw += slice_accuracy(&pred, &truth)? * n;
        filled += slice_accuracy(&fill_gaps(&pred), &truth)? * n;
        total += truth.len();
    }
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(SliceEvaluation {
        accuracy_raw: raw / total as f64,
        accuracy_filled: filled / total as f64,
        slices: total,
    })
}

/// Trains on `train` with per-slice binary cross-entropy and reports accuracy on `eval`.
pub fn train_slice_classifier(
    train: &[LabeledVolume],
    eval: &[LabeledVolume],
    spec: &SliceModelSpec,
    params: &SliceTrainParams,
    seed: u64,
) -> Result<(SliceModel, SliceEvaluation)> {
    let labels: Vec<SliceLabelSequence> = train.iter().map(|c| derive_slice_labels(&c.mask)).collect();
    if !labels.iter().any(|l| l.values.contains(&true)) {
        return Err(Error::DegenerateDataset("no positive slice in any training mask".into()));
    }
    let mut model = SliceModel::new(spec.clone(), seed)?;
    let mut rng = seeded_rng(seed ^ 0x5eed_511c);
    let mut adam = Adam::new(params.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let case = &train[i];
            let [nz, ny, nx] = case.volume.shape();
            let w = if params.window == 0 { nz } else { params.window.min(nz) };
            let z0 = rng.random_range(0..=nz - w);
            let chunk = case.volume.data.slice(s![z0..z0 + w, .., ..]).to_owned();
            let targets: Vec<f32> = labels[i].values[z0..z0 + w].iter().map(|&v| v as u8 as f32).collect();
            let mut g = Graph::new();
            let x = g.input(array_tensor(&chunk, &[]).reshape(vec![w, 1, 1, ny, nx]));
            let feats = model.encode(&mut g, x);
            let logits = model.sequence_logits(&mut g, feats);
            let loss = g.bce_with_logits(logits, &targets, 1.0);
            epoch_loss += g.value(loss).item() as f64;
            let grads = g.backward(loss).into_params();
            adam.step(&mut model.params, &grads);
        }
        info!(
            "slice epoch {}/{}: bce {:.4}",
            epoch + 1,
            params.epochs,
            epoch_loss / train.len().max(1) as f64
        );
    }
    model.trained = true;
    let evaluation = evaluate_slices(&model, eval)?;
    info!(
        "slice accuracy {:.4} raw, {:.4} after gap filling ({} slices)",
        evaluation.accuracy_raw, evaluation.accuracy_filled, evaluation.slices
    );
    Ok((model, evaluation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn seq(bits: &[u8]) -> SliceLabelSequence {
        SliceLabelSequence::new(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn slice_label_examples() {
        let mut m = LabelMask::zeros([10, 3, 3]);
        assert!(derive_slice_labels(&m).values.iter().all(|v| !v));
        m.data[[5, 1, 2]] = 1;
        let l = derive_slice_labels(&m);
        assert_eq!(l.values.iter().filter(|&&v| v).count(), 1);
        assert!(l.values[5]);
    }

    #[test]
    fn fill_gap_examples() {
        assert_eq!(fill_gaps(&seq(&[0, 1, 0, 0, 1, 0])), seq(&[0, 1, 1, 1, 1, 0]));
        assert_eq!(fill_gaps(&seq(&[0, 0, 0, 0])), seq(&[0, 0, 0, 0]));
        assert_eq!(fill_gaps(&seq(&[0, 0, 1, 0, 0])), seq(&[0, 0, 1, 0, 0]));
    }

    #[test]
    fn z_crop_examples() {
        let v = Volume::from_array(Array3::from_shape_fn((20, 2, 2), |(z, _, _)| z as f32)).unwrap();
        let (out, b) = z_crop(&v, &SliceLabelSequence::new(vec![true; 20]), 0).unwrap();
        assert_eq!(out, v);
        assert_eq!(b, BBox3::full([20, 2, 2]));

        let mut bits = [0u8; 20];
        bits[3..=7].fill(1);
        let (out, b) = z_crop(&v, &seq(&bits), 2).unwrap();
        assert_eq!((b.lo[0], b.hi[0]), (1, 9));
        assert_eq!(out.data[[0, 0, 0]], 1.0);
        assert_eq!(out.shape()[0], 9);

        let mut bits = [0u8; 20];
        bits[0..=2].fill(1);
        let (_, b) = z_crop(&v, &seq(&bits), 5).unwrap();
        assert_eq!((b.lo[0], b.hi[0]), (0, 7));

        assert!(matches!(z_crop(&v, &seq(&[0; 20]), 2), Err(Error::EmptyPrediction)));
        assert!(matches!(z_crop(&v, &seq(&[1; 3]), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn untrained_model_is_rejected_and_output_length_tracks_z() {
        let model = SliceModel::new(SliceModelSpec::default(), 0).unwrap();
        let v = Volume::from_array(Array3::from_elem((7, 12, 10), 0.3)).unwrap();
        assert!(matches!(predict_slices(&model, &v), Err(Error::State(_))));
        assert_eq!(model.probabilities(&v).len(), 7);
        let bi = SliceModel::new(SliceModelSpec { bidirectional: true, ..Default::default() }, 0).unwrap();
        let p = bi.probabilities(&v);
        assert_eq!(p.len(), 7);
        assert_eq!(p, bi.probabilities(&v));
    }

    #[test]
    fn degenerate_training_set_is_rejected() {
        let c = LabeledVolume::new(
            Volume::from_array(Array3::zeros((4, 8, 8))).unwrap(),
            LabelMask::zeros([4, 8, 8]),
        )
        .unwrap();
        let r = train_slice_classifier(&[c], &[], &SliceModelSpec::default(), &SliceTrainParams::default(), 0);
        assert!(matches!(r, Err(Error::DegenerateDataset(_))));
    }

    fn brute_force_labels(mask: &LabelMask) -> Vec<bool> {
        let [nz, ny, nx] = mask.shape();
        (0..nz)
            .map(|z| {
                let mut any = false;
                for y in 0..ny {
                    for x in 0..nx {
                        any |= matches!(mask.data[[z, y, x]], 1 | 2);
                    }
                }
                any
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gap_filling_is_idempotent_monotone_and_contiguous(bits in prop::collection::vec(any::<bool>(), 0..64)) {
            let s = SliceLabelSequence::new(bits);
            let f = fill_gaps(&s);
            prop_assert_eq!(fill_gaps(&f), f.clone());
            prop_assert!(s.values.iter().zip(&f.values).all(|(a, b)| !a || *b));
            let runs = f.values.windows(2).filter(|w| !w[0] && w[1]).count() + f.values.first().map_or(0, |&v| v as usize);
            prop_assert!(runs <= 1);
        }

        #[test]
        fn slice_labels_match_brute_force(data in prop::collection::vec(prop_oneof![6 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)], 12 * 4 * 5)) {
            let mask = LabelMask::new(Array3::from_shape_vec((12, 4, 5), data).unwrap()).unwrap();
            prop_assert_eq!(derive_slice_labels(&mask).values, brute_force_labels(&mask));
        }

        #[test]
        fn z_crop_keeps_true_slices_when_prediction_covers_them(
            truth in prop::collection::vec(any::<bool>(), 1..40),
            extra in prop::collection::vec(any::<bool>(), 40),
            margin in 0usize..4,
        ) {
            prop_assume!(truth.contains(&true));
            let n = truth.len();
            let pred = SliceLabelSequence::new(truth.iter().zip(&extra).map(|(t, e)| *t || *e).collect());
            let b = z_crop_bbox([n, 1, 1], &pred, margin).unwrap();
            for (z, &t) in truth.iter().enumerate() {
                prop_assert!(!t || (b.lo[0] <= z && z <= b.hi[0]));
            }
        }
    }
}
