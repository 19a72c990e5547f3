use std::fs;

use ndarray::Array3;
use pdac_core::io::{
    load_mask, load_msd, load_volume, read_classification_manifest, write_classification_manifest, write_mask,
    write_msd_description, write_volume, CaseRecord, DatasetManifest, MsdPair, PreprocessSpec, Split,
};
use pdac_core::phantom::{case_params, generate_case, generate_dataset, PhantomParams};
use pdac_core::pipeline::load_case;
use pdac_core::volume::{LabelMask, Volume};
use pdac_core::Error;

fn wide_window() -> PreprocessSpec {
    PreprocessSpec {
        hu_window: (-1000.0, 1000.0),
        target_spacing: None,
    }
}

#[test]
fn nifti_volume_round_trip_keeps_axis_order_and_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.nii.gz");
    let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (100 * z + 10 * y + x) as f32 - 200.0);
    let v = Volume::new(data.clone(), [2.5, 0.8, 0.7], [1.0, -2.0, 3.0]).unwrap();
    write_volume(&path, &v).unwrap();
    let back = load_volume(&path, &wide_window()).unwrap();
    assert_eq!(back.shape(), [3, 4, 5]);
    assert_eq!(back.spacing, [2.5f32 as f64, 0.8f32 as f64, 0.7f32 as f64]);
    assert_eq!(back.origin, [1.0, -2.0, 3.0]);
    for ((z, y, x), &raw) in data.indexed_iter() {
        let expect = (raw + 1000.0) / 2000.0;
        assert!((back.data[[z, y, x]] - expect).abs() < 1e-6, "voxel ({z},{y},{x})");
    }
}

#[test]
fn nifti_mask_round_trip_and_invalid_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nii.gz");
    let mask = LabelMask::new(Array3::from_shape_fn((4, 3, 2), |(z, y, x)| ((z + y + x) % 3) as u8)).unwrap();
    write_mask(&path, &mask, [1.0; 3], [0.0; 3]).unwrap();
    assert_eq!(load_mask(&path, None).unwrap(), mask);

    let bad = dir.path().join("bad.nii.gz");
    let v = Volume::from_array(Array3::from_elem((2, 2, 2), 7.0)).unwrap();
    write_volume(&bad, &v).unwrap();
    assert!(matches!(load_mask(&bad, None), Err(Error::Format { .. })));
}

#[test]
fn resampling_to_target_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.nii.gz");
    let v = Volume::new(Array3::from_elem((4, 6, 6), 50.0), [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
    write_volume(&path, &v).unwrap();
    let spec = PreprocessSpec {
        target_spacing: Some([1.0, 2.0, 2.0]),
        ..wide_window()
    };
    let back = load_volume(&path, &spec).unwrap();
    assert_eq!(back.shape(), [8, 3, 3]);
    assert_eq!(back.spacing, [1.0, 2.0, 2.0]);
    assert!(back.data.iter().all(|&x| (x - 0.525).abs() < 1e-6));
}

#[test]
fn msd_description_with_281_pairs() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("imagesTr")).unwrap();
    fs::create_dir_all(dir.path().join("labelsTr")).unwrap();
    let pairs: Vec<MsdPair> = (0..281)
        .map(|i| {
            let image = format!("./imagesTr/pancreas_{i:03}.nii.gz");
            let label = format!("./labelsTr/pancreas_{i:03}.nii.gz");
            fs::write(dir.path().join(&image), b"").unwrap();
            fs::write(dir.path().join(&label), b"").unwrap();
            MsdPair { image, label }
        })
        .collect();
    write_msd_description(dir.path(), "Task07_Pancreas", pairs).unwrap();
    let m = load_msd(dir.path()).unwrap();
    assert_eq!(m.len(), 281);
    assert_eq!(m.name, "Task07_Pancreas");
    assert_eq!(m.cases[7].case_id, "pancreas_007");
    assert!(m.cases.iter().all(|c| c.mask_path.is_some() && c.response_label.is_none()));

    fs::remove_file(dir.path().join("labelsTr/pancreas_100.nii.gz")).unwrap();
    assert!(matches!(load_msd(dir.path()), Err(Error::MissingFile(p)) if p.ends_with("pancreas_100.nii.gz")));
}

#[test]
fn missing_volume_is_reported() {
    let err = load_volume(std::path::Path::new("/nonexistent/x.nii.gz"), &PreprocessSpec::default()).unwrap_err();
    assert!(matches!(err, Error::MissingFile(_)));
}

#[test]
fn classification_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let case = |id: &str, label, split| CaseRecord {
        case_id: id.into(),
        volume_path: dir.path().join(format!("{id}.nii.gz")),
        mask_path: None,
        response_label: Some(label),
        split,
    };
    let m = DatasetManifest::new("c", vec![case("a", true, Split::Train), case("b", false, Split::Test)]).unwrap();
    let path = dir.path().join("manifest.csv");
    write_classification_manifest(&m, &path).unwrap();
    let back = read_classification_manifest(&path).unwrap();
    assert_eq!(back.cases, m.cases);
    assert_eq!(back.class_counts.get(&1), Some(&1));
}

#[test]
fn phantom_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let params = PhantomParams::small();
    let manifest = generate_dataset(&params, 6, 40, dir.path()).unwrap();
    assert_eq!(manifest.len(), 6);
    assert_eq!(load_msd(dir.path()).unwrap().len(), 6);
    let read = read_classification_manifest(&dir.path().join(pdac_core::io::MANIFEST_FILE)).unwrap();
    assert_eq!(read.cases, manifest.cases);
    let spec = PreprocessSpec::default();
    for (i, record) in read.cases.iter().enumerate() {
        let loaded = load_case(record, &spec).unwrap();
        let direct = generate_case(&case_params(&params, i), 40 + i as u64).unwrap();
        let mut expect = direct.volume.data.clone();
        spec.normalize(&mut expect);
        assert_eq!(loaded.volume.data, expect, "case {i}");
        assert_eq!(loaded.mask.unwrap(), direct.mask);
        assert_eq!(record.response_label, Some(direct.label));
    }
}
