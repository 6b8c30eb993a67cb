use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Merges every positive subregion label into one binary tumor mask.
pub fn merge_tumor_labels(seg_slice: ArrayView2<'_, i32>) -> Array2<bool> {
    seg_slice.mapv(|v| v > 0)
}

/// One axial image/segmentation pair.
#[derive(Clone, Debug)]
pub struct RawSlice {
    pub slice_index: usize,
    pub image: Array2<f32>,
    pub seg: Array2<i32>,
}

/// Axial slices `lo..=hi` of a `[x, y, z]` volume, each as a `[y, x]` array
/// so that columns run along the left-right axis.
pub fn extract_slices(voxels: &Array3<f32>, seg: &Array3<i32>, lo: usize, hi: usize) -> Result<Vec<RawSlice>> {
    if voxels.shape() != seg.shape() {
        return Err(Error::DimensionMismatch {
            what: "voxels vs seg",
            left: voxels.shape().to_vec(),
            right: seg.shape().to_vec(),
        });
    }
    let depth = voxels.len_of(Axis(2));
    if lo >= hi || hi >= depth {
        return Err(Error::Range(format!("slice range {lo}..={hi} invalid for axial extent {depth}")));
    }
    Ok((lo..=hi)
        .map(|k| RawSlice {
            slice_index: k,
            image: voxels.slice(s![.., .., k]).t().to_owned(),
            seg: seg.slice(s![.., .., k]).t().to_owned(),
        })
        .collect())
}

/// Percentile with linear interpolation between order statistics
/// (the same rule numpy uses by default). `sorted` must be ascending.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Clips at the `pct` percentile of the non-zero values, scales to `[0, 1]`
/// and maps to `[-1, 1]`. An all-zero slice maps to constant `-1`.
pub fn clip_and_normalize(slice: ArrayView2<'_, f32>, pct: f64) -> Array2<f32> {
    let mut nz: Vec<f64> = slice.iter().filter(|&&v| v != 0.0).map(|&v| f64::from(v)).collect();
    if nz.is_empty() {
        return Array2::from_elem(slice.raw_dim(), -1.0);
    }
    nz.sort_by(f64::total_cmp);
    let clip = percentile_sorted(&nz, pct);
    if clip <= 0.0 {
        return Array2::from_elem(slice.raw_dim(), -1.0);
    }
    slice.mapv(|v| {
        let x = f64::from(v).clamp(0.0, clip) / clip;
        (2.0 * x - 1.0) as f32
    })
}

/// Centered zero padding to `pad_to × pad_to`, then nearest-neighbour
/// resampling to `out × out`.
pub fn pad_and_resize<T: Clone + Default>(slice: ArrayView2<'_, T>, pad_to: usize, out: usize) -> Result<Array2<T>> {
    let (h, w) = slice.dim();
    if h > pad_to || w > pad_to {
        return Err(Error::InvalidArgument(format!("slice {h}x{w} larger than pad size {pad_to}")));
    }
    if out == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let top = (pad_to - h) / 2;
    let left = (pad_to - w) / 2;
    let mut padded = Array2::from_elem((pad_to, pad_to), T::default());
    padded.slice_mut(s![top..top + h, left..left + w]).assign(&slice);
    if out == pad_to {
        return Ok(padded);
    }
    Ok(Array2::from_shape_fn((out, out), |(r, c)| padded[[r * pad_to / out, c * pad_to / out]].clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceClass {
    Tumorous,
    NonTumorous,
    Excluded,
}

/// Inclusive tumor-pixel range that qualifies a slice as tumorous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TumorRange {
    pub min: usize,
    pub max: usize,
}

impl Default for TumorRange {
    fn default() -> Self {
        Self { min: 1000, max: 3000 }
    }
}

pub fn categorize_slice(tumor_pixel_count: usize) -> SliceClass {
    categorize_with(tumor_pixel_count, TumorRange::default())
}

pub fn categorize_with(count: usize, range: TumorRange) -> SliceClass {
    if count == 0 {
        SliceClass::NonTumorous
    } else if (range.min..=range.max).contains(&count) {
        SliceClass::Tumorous
    } else {
        SliceClass::Excluded
    }
}

/// Dilation by `radius` iterations of the 3×3 cross, i.e. every pixel within
/// city-block distance `radius` of a set pixel.
pub fn dilate_mask(mask: ArrayView2<'_, bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut cur = mask.to_owned();
    for _ in 0..radius {
        let prev = cur.clone();
        for r in 0..h {
            for c in 0..w {
                if prev[[r, c]] {
                    continue;
                }
                cur[[r, c]] = (r > 0 && prev[[r - 1, c]])
                    || (r + 1 < h && prev[[r + 1, c]])
                    || (c > 0 && prev[[r, c - 1]])
                    || (c + 1 < w && prev[[r, c + 1]]);
            }
        }
    }
    cur
}

pub fn count_true(mask: ArrayView2<'_, bool>) -> usize {
    mask.iter().filter(|&&b| b).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn merge_labels_unions_subregions() {
        let seg = array![[0, 1, 2], [4, 0, 0]];
        assert_eq!(merge_tumor_labels(seg.view()), array![[false, true, true], [true, false, false]]);
    }

    #[test]
    fn extract_counts_inclusive() {
        let v = Array3::<f32>::zeros((4, 5, 155));
        let s = Array3::<i32>::zeros((4, 5, 155));
        let slices = extract_slices(&v, &s, 80, 130).unwrap();
        assert_eq!(slices.len(), 51);
        assert_eq!(slices[0].image.dim(), (5, 4));
        assert_eq!(extract_slices(&v, &s, 10, 11).unwrap().len(), 2);
        assert!(matches!(extract_slices(&v, &s, 80, 156), Err(Error::Range(_))));
    }

    #[test]
    fn extract_orientation_rows_are_y() {
        let v = Array3::from_shape_fn((3, 2, 1 + 1), |(x, y, _)| (10 * y + x) as f32);
        let s = Array3::<i32>::zeros((3, 2, 2));
        let sl = extract_slices(&v, &s, 0, 1).unwrap();
        assert_eq!(sl[0].image[[1, 2]], 12.0);
    }

    #[test]
    fn normalize_constant_and_empty() {
        let c = Array2::from_elem((4, 4), 7.5f32);
        assert!(clip_and_normalize(c.view(), 99.5).iter().all(|&v| v == 1.0));
        let z = Array2::<f32>::zeros((3, 3));
        assert!(clip_and_normalize(z.view(), 99.5).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn percentile_matches_linear_rule() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        // position 0.995 * 999 = 994.005 between 995 and 996
        assert!((percentile_sorted(&v, 99.5) - 995.005).abs() < 1e-9);
        assert_eq!(percentile_sorted(&[3.0], 50.0), 3.0);
    }

    #[test]
    fn pad_identity_and_errors() {
        let a = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f32);
        assert_eq!(pad_and_resize(a.view(), 4, 4).unwrap(), a);
        assert!(pad_and_resize(a.view(), 3, 3).is_err());
        let big = Array2::<f32>::zeros((240, 240));
        assert_eq!(pad_and_resize(big.view(), 256, 512).unwrap().dim(), (512, 512));
    }

    #[test]
    fn categorize_boundaries() {
        assert_eq!(categorize_slice(0), SliceClass::NonTumorous);
        assert_eq!(categorize_slice(999), SliceClass::Excluded);
        assert_eq!(categorize_slice(1000), SliceClass::Tumorous);
        assert_eq!(categorize_slice(1500), SliceClass::Tumorous);
        assert_eq!(categorize_slice(3000), SliceClass::Tumorous);
        assert_eq!(categorize_slice(3001), SliceClass::Excluded);
        assert_eq!(categorize_slice(500), SliceClass::Excluded);
    }

    #[test]
    fn dilate_center_pixel_is_diamond() {
        let mut m = Array2::from_elem((21, 21), false);
        m[[10, 10]] = true;
        let d = dilate_mask(m.view(), 5);
        assert_eq!(count_true(d.view()), 61);
        assert!(d[[5, 10]] && d[[7, 12]] && !d[[7, 13]]);
        let full = Array2::from_elem((5, 5), true);
        assert_eq!(dilate_mask(full.view(), 5), full);
        let empty = Array2::from_elem((5, 5), false);
        assert_eq!(dilate_mask(empty.view(), 5), empty);
    }
}
