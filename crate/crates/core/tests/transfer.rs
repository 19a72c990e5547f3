use ndarray::{Array3, Array4};
use pdac_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pdac_core::stage2::{SegModel, SegModelSpec, ENCODER, STAGE_TAG};
use pdac_core::stage3::{
    class_distance_means, train_two_stage, Backbone, ClassifierModel, ClassifierSample, ClassifierTrainParams,
    TripletConfig,
};
use pdac_core::volume::Volume;
use pdac_core::Error;
use pdac_nn::Tensor;

fn seg_checkpoint(seed: u64) -> (SegModel, Checkpoint) {
    let model = SegModel::new(SegModelSpec::default(), [8, 16, 16], seed).unwrap();
    let config = serde_json::json!({ "spec": model.spec, "window": model.window });
    let ck = Checkpoint::new(STAGE_TAG, seed, config, model.params.clone()).with_subtree(ENCODER, ENCODER);
    (model, ck)
}

fn volume(seed: u32) -> Volume {
    Volume::from_array(Array3::from_shape_fn((8, 12, 12), |(z, y, x)| {
        ((z * 7 + y * 3 + x + seed as usize) % 11) as f32 / 10.0
    }))
    .unwrap()
}

#[test]
fn encoder_round_trips_bit_exactly_through_disk() {
    let (seg, ck) = seg_checkpoint(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let (cls, manifest) = ClassifierModel::transferred(&loaded, 1, 3).unwrap();
    assert_eq!(cls.spec.backbone, Backbone::Transferred);
    assert!(cls.export_encoder().bit_eq(&seg.encoder()));
    assert_eq!(manifest.transferred.len(), seg.encoder().len());
    assert!(manifest.fresh.iter().all(|n| n.starts_with("head")));

    let (cls4, manifest4) = ClassifierModel::transferred(&loaded, 4, 3).unwrap();
    assert!(cls4.export_encoder().bit_eq(&seg.encoder()));
    assert!(manifest4.fresh.iter().any(|n| n.starts_with("mask_adapter")));
}

#[test]
fn reshaped_tensor_is_named_in_the_error() {
    let (_, mut ck) = seg_checkpoint(2);
    let name = "encoder.1.0.w";
    let old = ck.params.get(name).expect("tensor exists").shape().to_vec();
    let mut shape = old.clone();
    shape[0] += 1;
    ck.params.insert(name, Tensor::zeros(&shape));
    match ClassifierModel::transferred(&ck, 1, 0) {
        Err(Error::Transfer { tensor, reason }) => {
            assert_eq!(tensor, name);
            assert!(reason.contains(&format!("{shape:?}")), "{reason}");
        }
        other => panic!("expected transfer error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn missing_encoder_is_a_transfer_error() {
    let (_, ck) = seg_checkpoint(2);
    let mut bare = ck.clone();
    bare.subtrees.clear();
    assert!(matches!(ClassifierModel::transferred(&bare, 1, 0), Err(Error::Transfer { .. })));

    let mut partial = ck.clone();
    partial.params.remove("encoder.0.1.w");
    match ClassifierModel::transferred(&partial, 1, 0) {
        Err(Error::Transfer { tensor, .. }) => assert_eq!(tensor, "encoder.0.1.w"),
        other => panic!("expected transfer error, got {:?}", other.map(|_| ())),
    }

    let mut wrong_stage = ck;
    wrong_stage.stage = "slice".into();
    assert!(matches!(ClassifierModel::transferred(&wrong_stage, 1, 0), Err(Error::Transfer { .. })));
}

#[test]
fn transferred_embedding_equals_segmentation_encoder_features() {
    let (seg, ck) = seg_checkpoint(5);
    let (cls1, _) = ClassifierModel::transferred(&ck, 1, 9).unwrap();
    let (cls4, _) = ClassifierModel::transferred(&ck, 4, 9).unwrap();
    for s in 0..3 {
        let v = volume(s);
        let expect = seg.pooled_encoder_features(&v);
        let x1 = v.data.clone().insert_axis(ndarray::Axis(0));
        assert_eq!(cls1.embed(&x1).unwrap().vector, expect);
        let mut x4 = Array4::<f32>::zeros((4, 8, 12, 12));
        x4.slice_mut(ndarray::s![0, .., .., ..]).assign(&v.data);
        x4.slice_mut(ndarray::s![2, .., .., ..]).fill(1.0);
        assert_eq!(cls4.embed(&x4).unwrap().vector, expect);
    }
}

fn separable_samples() -> Vec<ClassifierSample> {
    (0..8)
        .map(|i| {
            let label = i % 2 == 0;
            let input = Array4::from_shape_fn((1, 8, 8, 8), |(_, z, y, x)| {
                let inside = (2..6).contains(&z) && (2..6).contains(&y) && (2..6).contains(&x);
                let jitter = ((i * 13 + z * 5 + y * 3 + x) % 7) as f32 * 0.02;
                match (label, inside) {
                    (true, true) => 0.9 - jitter,
                    (false, true) => 0.1 + jitter,
                    _ => 0.5 + jitter,
                }
            });
            ClassifierSample {
                case_id: format!("s{i}"),
                input,
                label,
            }
        })
        .collect()
}

#[test]
fn triplet_stage_separates_classes() {
    let (_, ck) = seg_checkpoint(4);
    let (mut model, _) = ClassifierModel::transferred(&ck, 1, 4).unwrap();
    let samples = separable_samples();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let cfg = TripletConfig {
        epochs_stage_a: 20,
        epochs_stage_b: 1,
        ..Default::default()
    };
    let log = train_two_stage(&mut model, &samples, &cfg, &ClassifierTrainParams::default(), 1).unwrap();
    assert_eq!(log.triplet.len(), 20);
    let embeddings: Vec<_> = samples.iter().map(|s| model.embed(&s.input).unwrap()).collect();
    let (intra, inter) = class_distance_means(&embeddings, &labels).unwrap();
    assert!(inter > intra, "inter {inter} intra {intra}");
    assert!(log.triplet.last().unwrap() < log.triplet.first().unwrap());
}
