//! Volumes, label masks, boxes and the pure geometric operations on them.
//!
//! All arrays are indexed `(z, y, x)`. Boxes are inclusive on both ends.

use ndarray::{s, Array3, Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const PANCREAS: u8 = 1;
pub const TUMOUR: u8 = 2;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "pancreas", "tumour"];

/// Scalar CT grid with physical metadata (millimetres).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::InvalidVolume(format!("empty extent {:?}", data.shape())));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Self { data, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        Self::new(data, [1.0; 3], [0.0; 3])
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-voxel class ids over {background, pancreas, tumour}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub data: Array3<u8>,
}

impl LabelMask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(&value) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                value,
                n_classes: NUM_CLASSES,
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn classes(&self) -> [&'static str; NUM_CLASSES] {
        CLASS_NAMES
    }
}

/// A volume with its aligned ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub mask: LabelMask,
}

impl LabeledVolume {
    pub fn new(volume: Volume, mask: LabelMask) -> Result<Self> {
        if volume.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "volume {:?} and mask {:?} differ",
                volume.shape(),
                mask.shape()
            )));
        }
        Ok(Self { volume, mask })
    }
}

pub(crate) fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// Inclusive axis-aligned index box in `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox3 {
    /// Validated box lying inside `shape`.
    pub fn new(lo: [usize; 3], hi: [usize; 3], shape: [usize; 3]) -> Result<Self> {
        let b = Self { lo, hi };
        b.check_within(shape)?;
        Ok(b)
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: [shape[0] - 1, shape[1] - 1, shape[2] - 1],
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn check_within(&self, shape: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] > self.hi[a] || self.hi[a] >= shape[a] {
                return Err(Error::Index(format!(
                    "box {:?}..={:?} outside shape {shape:?}",
                    self.lo, self.hi
                )));
            }
        }
        Ok(())
    }

    /// Box of `other` expressed in this box's parent coordinates, where `other`
    /// was computed inside the crop defined by `self`.
    pub fn compose(&self, inner: &BBox3) -> BBox3 {
        BBox3 {
            lo: [0, 1, 2].map(|a| self.lo[a] + inner.lo[a]),
            hi: [0, 1, 2].map(|a| self.lo[a] + inner.hi[a]),
        }
    }
}

/// Channel stack `[n_classes, z, y, x]`; channel `c` is 1 exactly where `mask == c`.
pub fn one_hot_mask(mask: &LabelMask, n_classes: usize) -> Result<Array4<f32>> {
    let [d, h, w] = mask.shape();
    let mut out = Array4::zeros((n_classes, d, h, w));
    for ((z, y, x), &v) in mask.data.indexed_iter() {
        if v as usize >= n_classes {
            return Err(Error::InvalidLabel { value: v, n_classes });
        }
        out[[v as usize, z, y, x]] = 1.0;
    }
    Ok(out)
}

/// Per-voxel argmax over a channel stack; ties go to the lower channel.
pub fn argmax_channels(channels: &Array4<f32>) -> Array3<u8> {
    let sh = channels.shape();
    Array3::from_shape_fn((sh[1], sh[2], sh[3]), |(z, y, x)| {
        let mut best = 0;
        for c in 1..sh[0] {
            if channels[[c, z, y, x]] > channels[[best, z, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

/// Tightest box around voxels in `foreground`, dilated by `margin` and clipped.
pub fn bbox_from_mask(mask: &LabelMask, foreground: &[u8], margin: [usize; 3]) -> Result<BBox3> {
    let shape = mask.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), v) in mask.data.indexed_iter() {
        if foreground.contains(v) {
            any = true;
            let p = [z, y, x];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyForeground(foreground.to_vec()));
    }
    Ok(BBox3 {
        lo: [0, 1, 2].map(|a| lo[a].saturating_sub(margin[a])),
        hi: [0, 1, 2].map(|a| (hi[a] + margin[a]).min(shape[a] - 1)),
    })
}

/// Sub-array inside an inclusive box.
pub fn crop_array<T: Clone>(data: &Array3<T>, bbox: &BBox3) -> Result<Array3<T>> {
    bbox.check_within(dims(data))?;
    let (lo, hi) = (bbox.lo, bbox.hi);
    Ok(data
        .slice(s![lo[0]..=hi[0], lo[1]..=hi[1], lo[2]..=hi[2]])
        .to_owned())
}

/// Crops a volume; spacing is kept and the origin shifts by `lo·spacing`.
pub fn crop(volume: &Volume, bbox: &BBox3) -> Result<Volume> {
    let data = crop_array(&volume.data, bbox)?;
    let origin = [0, 1, 2].map(|a| volume.origin[a] + bbox.lo[a] as f64 * volume.spacing[a]);
    Ok(Volume {
        data,
        spacing: volume.spacing,
        origin,
    })
}

pub fn crop_mask(mask: &LabelMask, bbox: &BBox3) -> Result<LabelMask> {
    Ok(LabelMask {
        data: crop_array(&mask.data, bbox)?,
    })
}

/// Box keeping every slice and a centred `(y, x)` window; ties go to the lower index.
pub fn center_crop_bbox(shape: [usize; 3], out_size: (usize, usize)) -> Result<BBox3> {
    let (oy, ox) = out_size;
    if oy == 0 || ox == 0 || oy > shape[1] || ox > shape[2] {
        return Err(Error::Size(format!(
            "center crop {out_size:?} does not fit in-plane extent ({}, {})",
            shape[1], shape[2]
        )));
    }
    let y0 = (shape[1] - oy) / 2;
    let x0 = (shape[2] - ox) / 2;
    Ok(BBox3 {
        lo: [0, y0, x0],
        hi: [shape[0] - 1, y0 + oy - 1, x0 + ox - 1],
    })
}

pub fn center_crop(volume: &Volume, out_size: (usize, usize)) -> Result<Volume> {
    crop(volume, &center_crop_bbox(volume.shape(), out_size)?)
}

// Source coordinate of output index `i` under half-pixel alignment.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Trilinear resize to `shape` with half-pixel alignment.
pub fn resize_trilinear(data: &Array3<f32>, shape: [usize; 3]) -> Array3<f32> {
    let src = dims(data);
    if src == shape {
        return data.clone();
    }
    let axis = |a: usize| -> Vec<(usize, usize, f32)> {
        (0..shape[a])
            .map(|i| {
                let c = source_coord(i, src[a], shape[a]);
                let i0 = c.floor() as usize;
                let i1 = (i0 + 1).min(src[a] - 1);
                (i0, i1, (c - i0 as f64) as f32)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let (z0, z1, fz) = az[z];
        let (y0, y1, fy) = ay[y];
        let (x0, x1, fx) = ax[x];
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let plane = |zz: usize| {
            let r0 = lerp(data[[zz, y0, x0]], data[[zz, y0, x1]], fx);
            let r1 = lerp(data[[zz, y1, x0]], data[[zz, y1, x1]], fx);
            lerp(r0, r1, fy)
        };
        lerp(plane(z0), plane(z1), fz)
    })
}

/// Nearest-neighbour resize; never introduces values absent from the input.
pub fn resize_nearest<T: Clone>(data: &Array3<T>, shape: [usize; 3]) -> Array3<T> {
    let src = dims(data);
    let idx = |a: usize, i: usize| source_coord(i, src[a], shape[a]).round() as usize;
    Array3::from_shape_fn(shape, |(z, y, x)| data[[idx(0, z), idx(1, y), idx(2, x)]].clone())
}

/// Zero-pads `data` at the high end of each axis up to `shape`.
pub(crate) fn pad_to<T: Clone + Default>(data: &Array3<T>, shape: [usize; 3]) -> Array3<T> {
    let src = dims(data);
    if src == shape {
        return data.clone();
    }
    let mut out = Array3::from_elem(shape, T::default());
    out.slice_mut(s![..src[0], ..src[1], ..src[2]]).assign(data);
    out
}

/// Fraction of voxels where two masks agree.
pub fn voxel_accuracy(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut same = 0usize;
    Zip::from(&a.data).and(&b.data).for_each(|x, y| same += (x == y) as usize);
    Ok(same as f64 / a.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn mask_with(shape: [usize; 3], fg: &[[usize; 3]]) -> LabelMask {
        let mut m = LabelMask::zeros(shape);
        for p in fg {
            m.data[*p] = PANCREAS;
        }
        m
    }

    #[test]
    fn one_hot_single_background_voxel() {
        let m = LabelMask::zeros([1, 1, 1]);
        let oh = one_hot_mask(&m, 3).unwrap();
        assert_eq!(oh.iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_all_background() {
        let oh = one_hot_mask(&LabelMask::zeros([4, 4, 4]), 3).unwrap();
        assert!(oh.slice(s![0, .., .., ..]).iter().all(|&v| v == 1.0));
        assert!(oh.slice(s![1.., .., .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_rejects_out_of_range_labels() {
        let mut m = LabelMask::zeros([2, 2, 2]);
        m.data[[1, 1, 1]] = 2;
        assert!(matches!(one_hot_mask(&m, 2), Err(Error::InvalidLabel { value: 2, .. })));
        assert!(LabelMask::new(Array3::from_elem((1, 1, 1), 3)).is_err());
    }

    #[test]
    fn bbox_examples() {
        let single = mask_with([10, 10, 10], &[[3, 4, 5]]);
        let b = bbox_from_mask(&single, &[1, 2], [0; 3]).unwrap();
        assert_eq!((b.lo, b.hi), ([3, 4, 5], [3, 4, 5]));

        let two = mask_with([10, 10, 10], &[[1, 1, 1], [6, 2, 9]]);
        let b = bbox_from_mask(&two, &[1, 2], [0; 3]).unwrap();
        assert_eq!((b.lo, b.hi), ([1, 1, 1], [6, 2, 9]));
        let b = bbox_from_mask(&two, &[1, 2], [2; 3]).unwrap();
        assert_eq!((b.lo, b.hi), ([0, 0, 0], [8, 4, 9]));
    }

    #[test]
    fn bbox_empty_foreground_is_an_error() {
        let m = mask_with([4, 4, 4], &[]);
        assert!(matches!(bbox_from_mask(&m, &[1, 2], [0; 3]), Err(Error::EmptyForeground(_))));
    }

    #[test]
    fn crop_examples() {
        let data = Array3::from_shape_fn((8, 8, 8), |(z, y, x)| (z * 64 + y * 8 + x) as f32);
        let v = Volume::new(data.clone(), [2.0, 1.0, 0.5], [10.0, 0.0, 0.0]).unwrap();
        assert_eq!(crop(&v, &BBox3::full([8, 8, 8])).unwrap(), v);

        let b = BBox3::new([2, 2, 2], [5, 5, 5], [8, 8, 8]).unwrap();
        let c = crop(&v, &b).unwrap();
        assert_eq!(c.shape(), [4, 4, 4]);
        assert_eq!(c.data, data.slice(s![2..6, 2..6, 2..6]));
        assert_eq!(c.spacing, v.spacing);
        assert_eq!(c.origin, [14.0, 2.0, 1.0]);

        let again = crop(&c, &BBox3::full(c.shape())).unwrap();
        assert_eq!(again, c);

        let bad = BBox3 { lo: [0, 0, 0], hi: [8, 1, 1] };
        assert!(matches!(crop(&v, &bad), Err(Error::Index(_))));
    }

    #[test]
    fn center_crop_examples() {
        let v6 = Volume::from_array(Array3::from_shape_fn((1, 6, 6), |(_, y, x)| (y * 6 + x) as f32)).unwrap();
        assert_eq!(center_crop(&v6, (6, 6)).unwrap().data, v6.data);
        let c = center_crop(&v6, (4, 4)).unwrap();
        assert_eq!(c.data, v6.data.slice(s![.., 1..5, 1..5]));

        let v5 = Volume::from_array(Array3::from_shape_fn((1, 5, 5), |(_, y, x)| (y * 5 + x) as f32)).unwrap();
        let c = center_crop(&v5, (4, 4)).unwrap();
        assert_eq!(c.data, v5.data.slice(s![.., 0..4, 0..4]));

        assert!(matches!(center_crop(&v5, (6, 4)), Err(Error::Size(_))));
    }

    #[test]
    fn volume_invariants() {
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3], [0.0; 3]).is_err());
        assert!(Volume::new(Array3::zeros((1, 2, 2)), [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn trilinear_resize_is_exact_on_linear_ramps() {
        let data = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z + 2 * y + 3 * x) as f32);
        let up = resize_trilinear(&data, [8, 8, 8]);
        // interior samples of a linear field are reproduced exactly
        let c = source_coord(3, 4, 8) as f32;
        assert!((up[[3, 3, 3]] - 6.0 * c).abs() < 1e-5);
        let same = resize_trilinear(&data, [4, 4, 4]);
        assert_eq!(same, data);
    }

    fn small_mask() -> impl Strategy<Value = LabelMask> {
        (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(d, h, w)| {
            proptest::collection::vec(prop_oneof![6 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)], d * h * w)
                .prop_map(move |v| LabelMask::new(Array3::from_shape_vec((d, h, w), v).unwrap()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn one_hot_round_trips_through_argmax(m in small_mask()) {
            let oh = one_hot_mask(&m, 3).unwrap();
            prop_assert_eq!(argmax_channels(&oh), m.data.clone());
            let sums = oh.sum_axis(ndarray::Axis(0));
            prop_assert!(sums.iter().all(|&s| s == 1.0));
        }

        #[test]
        fn bbox_is_tight_and_crop_keeps_foreground(m in small_mask(), margin in 0usize..3) {
            let fg = [1u8, 2];
            let count = m.data.iter().filter(|v| fg.contains(v)).count();
            match bbox_from_mask(&m, &fg, [0; 3]) {
                Err(_) => prop_assert_eq!(count, 0),
                Ok(b) => {
                    for ((z, y, x), v) in m.data.indexed_iter() {
                        if fg.contains(v) { prop_assert!(b.contains([z, y, x])); }
                    }
                    // every face touches a foreground voxel
                    for a in 0..3 {
                        for face in [b.lo[a], b.hi[a]] {
                            let touches = m.data.indexed_iter().any(|((z, y, x), v)| {
                                fg.contains(v) && [z, y, x][a] == face
                            });
                            prop_assert!(touches);
                        }
                    }
                    let wide = bbox_from_mask(&m, &fg, [margin; 3]).unwrap();
                    let cropped = crop_mask(&m, &wide).unwrap();
                    let kept = cropped.data.iter().filter(|v| fg.contains(v)).count();
                    prop_assert_eq!(kept, count);
                    prop_assert!((0..3).all(|a| cropped.shape()[a] <= m.shape()[a]));
                }
            }
        }

        #[test]
        fn nearest_resize_keeps_label_set(m in small_mask(), d in 1usize..9, h in 1usize..9, w in 1usize..9) {
            let r = resize_nearest(&m.data, [d, h, w]);
            prop_assert!(r.iter().all(|v| m.data.iter().any(|u| u == v)));
        }
    }
}
