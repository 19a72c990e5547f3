use pdac_web::{fill_slice_gaps, metrics_json, triplet, Phantom};

#[test]
fn phantom_slices_and_boxes() {
    let p = Phantom::new(7).unwrap();
    let (d, h, w) = (p.depth(), p.height(), p.width());
    assert_eq!([d, h, w], [32, 48, 48]);
    let rgba = p.slice_rgba(d / 2, true).unwrap();
    assert_eq!(rgba.len(), h * w * 4);
    assert!(rgba.chunks(4).all(|px| px[3] == 255));
    assert!(p.slice_rgba(d, false).is_err());

    let labels = p.slice_labels();
    assert_eq!(labels.len(), d);
    let first = labels.iter().position(|&v| v == 1).unwrap();
    let last = labels.iter().rposition(|&v| v == 1).unwrap();
    assert_eq!(p.z_crop(0).unwrap(), vec![first, last]);
    assert_eq!(p.z_crop(2).unwrap(), vec![first.saturating_sub(2), (last + 2).min(d - 1)]);

    let b = p.foreground_box(0).unwrap();
    assert_eq!((b[0], b[3]), (first, last));
    assert!((0.0..=1.0).contains(&p.tumour_ratio()));
}

#[test]
fn gap_filling() {
    assert_eq!(fill_slice_gaps(&[0, 1, 0, 0, 1, 0]), vec![0, 1, 1, 1, 1, 0]);
    assert_eq!(fill_slice_gaps(&[0, 0]), vec![0, 0]);
}

#[test]
fn triplet_values_and_gradients() {
    let out = triplet(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
    assert_eq!(out, vec![1.0, -2.0, 2.0, 2.0, 0.0, 0.0, -2.0]);
    assert_eq!(triplet(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 3.0], 1.0).unwrap()[0], 0.0);
    assert!(triplet(&[0.0], &[0.0, 1.0], &[0.0], 1.0).is_err());
    assert!(triplet(&[0.0], &[0.0], &[0.0], 0.0).is_err());
}

#[test]
fn metrics_as_json() {
    let v: serde_json::Value = serde_json::from_str(&metrics_json(&[0.9, 0.2, 0.7, 0.4], &[1, 0, 0, 1], 0.5).unwrap()).unwrap();
    assert_eq!(v["accuracy"], 0.5);
    assert_eq!(v["mcc"], 0.0);
    assert_eq!(v["auc_roc"], 0.75);
    let single: serde_json::Value = serde_json::from_str(&metrics_json(&[0.1, 0.8], &[1, 1], 0.5).unwrap()).unwrap();
    assert!(single["auc_roc"].is_null());
    assert!(metrics_json(&[0.1], &[1, 0], 0.5).is_err());
}
