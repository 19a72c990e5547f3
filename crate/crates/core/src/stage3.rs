//! Response classification: a standalone residual 3-D CNN or a backbone
//! transferred from the segmentation encoder, trained with an optional
//! triplet stage before binary cross-entropy.

use std::collections::BTreeMap;

use log::info;
use ndarray::{s, Array4};
use pdac_nn::{seeded_rng, Adam, ChaCha8Rng, ConvCfg, Graph, Init, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{centred, conv, conv_relu, copy_matching, init_conv, init_linear, linear};
use crate::stage2::{self, encoder_forward, init_encoder, SegModelSpec, ENCODER};
use crate::volume::NUM_CLASSES;

pub const STAGE_TAG: &str = "cls";
const MASK_ADAPTER: &str = "mask_adapter";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Residual 3-D CNN trained from scratch.
    Standalone,
    /// The segmentation encoder, initialised from a segmentation checkpoint.
    Transferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub backbone: Backbone,
    /// 1 (intensity) or 4 (intensity + one-hot predicted mask).
    pub in_channels: usize,
    /// Stage widths; for a transferred backbone these are the encoder widths.
    pub widths: Vec<usize>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::Standalone,
            in_channels: 1,
            widths: vec![4, 8, 16],
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 1 + NUM_CLASSES {
            return Err(Error::Config(format!("classifier input channels must be 1 or 4, got {}", self.in_channels)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("classifier widths must be non-empty and non-zero".into()));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    pub epochs_stage_a: usize,
    pub epochs_stage_b: usize,
    pub triplets_per_step: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            epochs_stage_a: 10,
            epochs_stage_b: 30,
            triplets_per_step: 8,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("triplet margin {} must be positive", self.margin)));
        }
        if self.triplets_per_step == 0 {
            return Err(Error::Config("triplets_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainParams {
    pub learning_rate: f32,
    /// Samples whose gradients are averaged per optimiser step.
    pub batch_size: usize,
}

impl Default for ClassifierTrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
        }
    }
}

/// Feature vector read after global pooling, before the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Self {
        Self { vector }
    }
}

pub fn squared_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.vector.len() != b.vector.len() {
        return Err(Error::Shape(format!(
            "embedding widths {} and {}",
            a.vector.len(),
            b.vector.len()
        )));
    }
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `max(0, d(a, p) - d(a, n) + margin)` with squared Euclidean `d`.
pub fn triplet_loss(za: &Embedding, zp: &Embedding, zn: &Embedding, cfg: &TripletConfig) -> Result<f64> {
    Ok((squared_distance(za, zp)? - squared_distance(za, zn)? + cfg.margin).max(0.0))
}

/// Gradients of [`triplet_loss`] with respect to anchor, positive and negative.
pub fn triplet_loss_grad(
    za: &Embedding,
    zp: &Embedding,
    zn: &Embedding,
    cfg: &TripletConfig,
) -> Result<[Vec<f64>; 3]> {
    let active = triplet_loss(za, zp, zn, cfg)? > 0.0;
    let n = za.vector.len();
    if !active {
        return Ok([vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
    }
    let (a, p, ng) = (&za.vector, &zp.vector, &zn.vector);
    Ok([
        (0..n).map(|i| 2.0 * (ng[i] - p[i])).collect(),
        (0..n).map(|i| -2.0 * (a[i] - p[i])).collect(),
        (0..n).map(|i| 2.0 * (a[i] - ng[i])).collect(),
    ])
}

/// Draws `(anchor, positive, negative)` index triples uniformly over all valid triples.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    classes: [Vec<usize>; 2],
    weights: [u128; 2],
}

impl TripletSampler {
    pub fn new(labels: &[bool]) -> Result<Self> {
        let mut classes = [Vec::new(), Vec::new()];
        for (i, &l) in labels.iter().enumerate() {
            classes[l as usize].push(i);
        }
        let weights = [0, 1].map(|c: usize| {
            let (own, other) = (classes[c].len() as u128, classes[1 - c].len() as u128);
            own * own.saturating_sub(1) * other
        });
        if weights == [0, 0] {
            return Err(Error::Sampling(format!(
                "no valid triplet: class sizes {} negative / {} positive",
                classes[0].len(),
                classes[1].len()
            )));
        }
        Ok(Self { classes, weights })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (usize, usize, usize) {
        let total = self.weights[0] + self.weights[1];
        let c = (rng.random_range(0..total) >= self.weights[0]) as usize;
        let own = &self.classes[c];
        let a = rng.random_range(0..own.len());
        let mut p = rng.random_range(0..own.len() - 1);
        if p >= a {
            p += 1;
        }
        let other = &self.classes[1 - c];
        (own[a], own[p], other[rng.random_range(0..other.len())])
    }
}

/// One triplet from labelled cases, deterministic per seed.
pub fn sample_triplet<'a, T>(cases: &'a [T], label: impl Fn(&T) -> bool, seed: u64) -> Result<(&'a T, &'a T, &'a T)> {
    let labels: Vec<bool> = cases.iter().map(label).collect();
    let (a, p, n) = TripletSampler::new(&labels)?.sample(&mut seeded_rng(seed));
    Ok((&cases[a], &cases[p], &cases[n]))
}

/// A classifier input `[C, z, y, x]` with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSample {
    pub case_id: String,
    pub input: Array4<f32>,
    pub label: bool,
}

/// Tensor names copied from a segmentation checkpoint versus freshly initialised.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub transferred: Vec<String>,
    pub fresh: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub spec: ClassifierSpec,
    pub params: ParamStore,
    trained: bool,
}

impl ClassifierModel {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        match spec.backbone {
            Backbone::Standalone => {
                let w = &spec.widths;
                init_conv(&mut params, "backbone.stem", w[0], spec.in_channels, [3, 3, 3], &mut rng);
                let mut cin = w[0];
                for (i, &c) in w.iter().enumerate() {
                    init_conv(&mut params, &format!("backbone.{i}.a"), c, cin, [3, 3, 3], &mut rng);
                    init_conv(&mut params, &format!("backbone.{i}.b"), c, c, [3, 3, 3], &mut rng);
                    if i > 0 || cin != c {
                        init_conv(&mut params, &format!("backbone.{i}.proj"), c, cin, [1, 1, 1], &mut rng);
                    }
                    cin = c;
                }
            }
            Backbone::Transferred => {
                init_encoder(&mut params, &spec.widths, 1, &mut rng);
                if spec.in_channels > 1 {
                    // Zero-initialised so the transferred encoder's features are
                    // unchanged until fine-tuning moves the adapter.
                    params.init(
                        format!("{MASK_ADAPTER}.w"),
                        &[spec.widths[0], spec.in_channels - 1, 3, 3, 3],
                        Init::Zeros,
                        &mut rng,
                    );
                }
            }
        }
        init_linear(&mut params, "head", 1, spec.embedding_width(), &mut rng);
        Ok(Self {
            spec,
            params,
            trained: false,
        })
    }

    /// Classifier whose encoder is copied from a segmentation checkpoint.
    pub fn transferred(seg: &Checkpoint, in_channels: usize, seed: u64) -> Result<(Self, TransferManifest)> {
        if seg.stage != stage2::STAGE_TAG {
            return Err(Error::Transfer {
                tensor: ENCODER.into(),
                reason: format!("checkpoint stage `{}` is not a segmentation checkpoint", seg.stage),
            });
        }
        let encoder = seg.subtree(ENCODER).filter(|e| !e.is_empty()).ok_or_else(|| Error::Transfer {
            tensor: ENCODER.into(),
            reason: "checkpoint has no encoder sub-state".into(),
        })?;
        let seg_spec: SegModelSpec = serde_json::from_value(seg.config["spec"].clone()).map_err(|e| Error::Transfer {
            tensor: ENCODER.into(),
            reason: format!("unreadable segmentation spec: {e}"),
        })?;
        let spec = ClassifierSpec {
            backbone: Backbone::Transferred,
            in_channels,
            widths: seg_spec.widths,
        };
        let mut model = Self::new(spec, seed)?;
        let expected: Vec<String> = model.params.subtree(ENCODER).names().map(String::from).collect();
        let transferred = copy_matching(&mut model.params, &encoder)?;
        if let Some(missing) = expected.iter().find(|n| !transferred.contains(n)) {
            return Err(Error::Transfer {
                tensor: missing.clone(),
                reason: "absent from the segmentation checkpoint".into(),
            });
        }
        let fresh = model
            .params
            .names()
            .filter(|n| !transferred.iter().any(|t| t == n))
            .map(String::from)
            .collect();
        Ok((model, TransferManifest { transferred, fresh }))
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Encoder tensors of a transferred backbone (empty for standalone).
    pub fn export_encoder(&self) -> ParamStore {
        self.params.subtree(ENCODER)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        if !self.trained {
            return Err(Error::State("refusing to checkpoint an untrained classifier".into()));
        }
        let ck = Checkpoint::new(STAGE_TAG, seed, serde_json::to_value(&self.spec)?, self.params.clone());
        Ok(match self.spec.backbone {
            Backbone::Transferred => ck.with_subtree(ENCODER, ENCODER),
            Backbone::Standalone => ck.with_subtree("backbone", "backbone"),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.stage != STAGE_TAG {
            return Err(Error::State(format!("checkpoint stage `{}` is not `{STAGE_TAG}`", ck.stage)));
        }
        let spec: ClassifierSpec = serde_json::from_value(ck.config.clone())?;
        let mut model = Self::new(spec, ck.seed)?;
        copy_matching(&mut model.params, &ck.params)?;
        model.trained = true;
        Ok(model)
    }

    fn check_input(&self, input: &Array4<f32>) -> Result<()> {
        if input.shape()[0] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "classifier expects {} channels, got {}",
                self.spec.in_channels,
                input.shape()[0]
            )));
        }
        Ok(())
    }

    /// `[1, D]` embedding variable for one `[C, z, y, x]` input.
    fn embed_var(&self, g: &mut Graph, input: &Array4<f32>) -> Var {
        let sh = input.shape();
        let spatial = [sh[1], sh[2], sh[3]];
        let tensor_of = |a: ndarray::ArrayView4<f32>| {
            let c = a.shape()[0];
            Tensor::new(
                vec![1, c, spatial[0], spatial[1], spatial[2]],
                a.iter().copied().collect(),
            )
        };
        let features = match self.spec.backbone {
            Backbone::Standalone => {
                let x = g.input(tensor_of(input.view()));
                let x = centred(g, x);
                let mut h = conv_relu(g, &self.params, "backbone.stem", x, ConvCfg::cube(3, 1));
                for i in 0..self.spec.widths.len() {
                    let stride = if i == 0 { 1 } else { 2 };
                    let a = conv_relu(g, &self.params, &format!("backbone.{i}.a"), h, ConvCfg::cube(3, stride));
                    let b = conv(g, &self.params, &format!("backbone.{i}.b"), a, ConvCfg::cube(3, 1));
                    let proj = format!("backbone.{i}.proj");
                    let shortcut = if self.params.contains(&format!("{proj}.w")) {
                        conv(g, &self.params, &proj, h, ConvCfg::cube(1, stride))
                    } else {
                        h
                    };
                    let sum = g.add(b, shortcut);
                    h = g.relu(sum);
                }
                h
            }
            Backbone::Transferred => {
                let x = g.input(tensor_of(input.slice(s![0..1, .., .., ..])));
                let extra = (self.spec.in_channels > 1).then(|| {
                    let m = g.input(tensor_of(input.slice(s![1.., .., .., ..])));
                    let w = g.param(&self.params, &format!("{MASK_ADAPTER}.w"));
                    g.conv(m, w, None, ConvCfg::cube(3, 1))
                });
                let stages = encoder_forward(g, &self.params, &self.spec.widths, x, extra);
                *stages.last().expect("non-empty")
            }
        };
        g.global_avg_pool(features)
    }

    pub fn embed(&self, input: &Array4<f32>) -> Result<Embedding> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let e = self.embed_var(&mut g, input);
        Ok(Embedding::new(g.value(e).data().iter().map(|&v| v as f64).collect()))
    }

    fn logit_var(&self, g: &mut Graph, input: &Array4<f32>) -> Var {
        let e = self.embed_var(g, input);
        linear(g, &self.params, "head", e)
    }

    /// Sigmoid of the logit, regardless of training state.
    pub fn probability(&self, input: &Array4<f32>) -> Result<f64> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let z = self.logit_var(&mut g, input);
        Ok(1.0 / (1.0 + (-(g.value(z).item() as f64)).exp()))
    }

    fn reset_head(&mut self, rng: &mut ChaCha8Rng) {
        let width = self.spec.embedding_width();
        init_linear(&mut self.params, "head", 1, width, rng);
    }
}

pub fn predict_response(model: &ClassifierModel, input: &Array4<f32>) -> Result<f64> {
    if !model.is_trained() {
        return Err(Error::State("classifier has not been trained".into()));
    }
    model.probability(input)
}

/// Per-epoch mean losses of both training stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub triplet: Vec<f64>,
    pub cross_entropy: Vec<f64>,
}

fn accumulate(total: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                total.insert(name, g);
            }
        }
    }
}

fn averaged(mut total: BTreeMap<String, Tensor>, n: usize) -> BTreeMap<String, Tensor> {
    let scale = 1.0 / n as f32;
    for t in total.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    total
}

/// Stage A: backbone trained on triplet loss only; the head is not touched.
fn train_triplet_stage(
    model: &mut ClassifierModel,
    samples: &[ClassifierSample],
    cfg: &TripletConfig,
    lr: f32,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.epochs_stage_a == 0 {
        return Ok(Vec::new());
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let sampler = TripletSampler::new(&labels)?;
    let mut rng = seeded_rng(seed ^ 0x7219_1e7a);
    let mut adam = Adam::new(lr);
    let steps_per_epoch = samples.len().div_ceil(cfg.triplets_per_step).max(1);
    let mut log = Vec::with_capacity(cfg.epochs_stage_a);
    for epoch in 0..cfg.epochs_stage_a {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let triplets: Vec<(usize, usize, usize)> =
                (0..cfg.triplets_per_step).map(|_| sampler.sample(&mut rng)).collect();
            let mut g = Graph::new();
            // Each distinct case is embedded once per step.
            let mut cache: BTreeMap<usize, Var> = BTreeMap::new();
            for &(a, p, n) in &triplets {
                for i in [a, p, n] {
                    if !cache.contains_key(&i) {
                        let e = model.embed_var(&mut g, &samples[i].input);
                        cache.insert(i, e);
                    }
                }
            }
            let rows = |k: fn(&(usize, usize, usize)) -> usize| triplets.iter().map(|t| cache[&k(t)]).collect::<Vec<_>>();
            let (za, zp, zn) = (rows(|t| t.0), rows(|t| t.1), rows(|t| t.2));
            let (a, p, n) = (g.concat_rows(&za), g.concat_rows(&zp), g.concat_rows(&zn));
            let dp = g.sq_dist(a, p);
            let dn = g.sq_dist(a, n);
            let diff = g.sub(dp, dn);
            let shifted = g.add_scalar(diff, cfg.margin as f32);
            let hinge = g.relu(shifted);
            let loss = g.mean(hinge);
            epoch_loss += g.value(loss).item() as f64;
            let grads = g.backward(loss).into_params();
            adam.step(&mut model.params, &grads);
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        info!("triplet epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs_stage_a);
        log.push(mean);
    }
    Ok(log)
}

/// Stage B: fresh head, whole model fine-tuned with class-weighted cross-entropy.
fn train_cross_entropy_stage(
    model: &mut ClassifierModel,
    samples: &[ClassifierSample],
    epochs: usize,
    params: &ClassifierTrainParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let n_pos = samples.iter().filter(|s| s.label).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateDataset(format!(
            "classification needs both labels ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let pos_weight = n_neg as f32 / n_pos as f32;
    model.reset_head(&mut seeded_rng(seed ^ 0x4ead));
    let mut rng = seeded_rng(seed ^ 0xb0b0_ce11);
    let mut adam = Adam::new(params.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size.max(1)) {
            let mut total = BTreeMap::new();
            for &i in batch {
                let mut g = Graph::new();
                let z = model.logit_var(&mut g, &samples[i].input);
                let loss = g.bce_with_logits(z, &[samples[i].label as u8 as f32], pos_weight);
                epoch_loss += g.value(loss).item() as f64;
                accumulate(&mut total, g.backward(loss).into_params());
            }
            adam.step(&mut model.params, &averaged(total, batch.len()));
        }
        let mean = epoch_loss / samples.len() as f64;
        info!("bce epoch {}/{epochs}: loss {mean:.4}", epoch + 1);
        log.push(mean);
    }
    Ok(log)
}

/// Optional triplet conditioning followed by cross-entropy training.
pub fn train_two_stage(
    model: &mut ClassifierModel,
    samples: &[ClassifierSample],
    cfg: &TripletConfig,
    params: &ClassifierTrainParams,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if let Some(bad) = samples.iter().find(|s| s.input.shape()[0] != model.spec.in_channels) {
        return Err(Error::Shape(format!(
            "case {} has {} channels, classifier expects {}",
            bad.case_id,
            bad.input.shape()[0],
            model.spec.in_channels
        )));
    }
    let triplet = train_triplet_stage(model, samples, cfg, params.learning_rate, seed)?;
    let cross_entropy = train_cross_entropy_stage(model, samples, cfg.epochs_stage_b, params, seed)?;
    model.trained = true;
    Ok(TrainLog { triplet, cross_entropy })
}

/// Mean pairwise embedding distances `(within class, between classes)`.
pub fn class_distance_means(embeddings: &[Embedding], labels: &[bool]) -> Result<(f64, f64)> {
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let d = squared_distance(&embeddings[i], &embeddings[j])?.sqrt();
            let slot = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            slot.0 += d;
            slot.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::UndefinedMetric("need pairs within and across classes".into()));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn triplet_loss_examples() {
        let cfg = TripletConfig::default();
        let z = emb(&[0.0, 0.0]);
        let far = emb(&[2f64.sqrt(), 0.0]);
        assert_eq!(triplet_loss(&z, &z, &far, &cfg).unwrap(), 0.0);
        assert_eq!(triplet_loss(&z, &z, &z, &cfg).unwrap(), 1.0);
        assert_eq!(triplet_loss(&z, &emb(&[1.0, 0.0]), &emb(&[0.0, 3.0]), &cfg).unwrap(), 0.0);
        assert_eq!(triplet_loss(&z, &emb(&[1.0, 0.0]), &emb(&[0.0, 1.0]), &cfg).unwrap(), 1.0);
        assert!(matches!(triplet_loss(&z, &emb(&[1.0]), &z, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn sampler_forced_choice_and_errors() {
        let labels = [true, true, false];
        for seed in 0..20 {
            let (a, p, n) = sample_triplet(&labels, |&l| l, seed).unwrap();
            let _ = (a, p);
            assert!(!*n);
        }
        let sampler = TripletSampler::new(&labels).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            let (a, p, n) = sampler.sample(&mut rng);
            assert!(a < 2 && p < 2 && a != p && n == 2);
        }
        assert!(matches!(TripletSampler::new(&[true, false]), Err(Error::Sampling(_))));
        assert!(matches!(TripletSampler::new(&[true, true]), Err(Error::Sampling(_))));
        assert_eq!(sample_triplet(&labels, |&l| l, 9).unwrap(), sample_triplet(&labels, |&l| l, 9).unwrap());
    }

    #[test]
    fn channel_mismatch_and_untrained_state_are_errors() {
        let model = ClassifierModel::new(ClassifierSpec::default(), 0).unwrap();
        let x = Array4::<f32>::zeros((4, 4, 4, 4));
        assert!(matches!(model.probability(&x), Err(Error::Shape(_))));
        let x1 = Array4::<f32>::from_elem((1, 5, 6, 7), 0.5);
        let p = model.probability(&x1).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(p, model.probability(&x1).unwrap());
        assert!(matches!(predict_response(&model, &x1), Err(Error::State(_))));
    }

    #[test]
    fn zero_triplet_epochs_equal_plain_cross_entropy() {
        let samples: Vec<ClassifierSample> = (0..4)
            .map(|i| ClassifierSample {
                case_id: format!("c{i}"),
                input: Array4::from_elem((1, 4, 4, 4), i as f32 / 4.0),
                label: i % 2 == 0,
            })
            .collect();
        let cfg = TripletConfig { epochs_stage_a: 0, epochs_stage_b: 2, ..Default::default() };
        let params = ClassifierTrainParams::default();
        let mut a = ClassifierModel::new(ClassifierSpec::default(), 3).unwrap();
        let mut b = a.clone();
        let log = train_two_stage(&mut a, &samples, &cfg, &params, 5).unwrap();
        assert!(log.triplet.is_empty());
        assert_eq!(log.cross_entropy.len(), 2);
        train_cross_entropy_stage(&mut b, &samples, 2, &params, 5).unwrap();
        assert!(a.params.bit_eq(&b.params));
    }
}
