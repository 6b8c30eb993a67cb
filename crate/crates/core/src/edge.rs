//! Canny edge maps and their mirrored contralateral composites.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    Native,
    MirroredComposite,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub edges: Array2<bool>,
    pub source: EdgeSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { low: 30.0, high: 80.0, kernel: 5, sigma: 1.0 }
    }
}

/// Reflect-101 index mapping (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel_1d(kernel: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("gaussian kernel size {kernel} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian sigma {sigma} must be positive")));
    }
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

fn convolve_separable(image: ArrayView2<'_, f64>, row_taps: &[f64], col_taps: &[f64]) -> Array2<f64> {
    let (h, w) = image.dim();
    let rr = (row_taps.len() / 2) as isize;
    let rc = (col_taps.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            tmp[[r, c]] = col_taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * image[[r, reflect(c as isize + k as isize - rc, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[r, c]] = row_taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * tmp[[reflect(r as isize + k as isize - rr, h), c]])
                .sum();
        }
    }
    out
}

/// Gaussian blur with a `kernel × kernel` normalized kernel and reflected borders.
pub fn gaussian_smooth(image: ArrayView2<'_, f64>, kernel: usize, sigma: f64) -> Result<Array2<f64>> {
    let taps = gaussian_kernel_1d(kernel, sigma)?;
    Ok(convolve_separable(image, &taps, &taps))
}

/// Canny detector on an arbitrary-range image. The input is first rescaled
/// to `[0, 255]` by its own min and max, so `low`/`high` are on that scale.
/// Magnitudes use the L1 norm of 3×3 Sobel responses.
pub fn canny_edges(image: ArrayView2<'_, f32>, params: &CannyParams) -> Result<EdgeMap> {
    if params.low >= params.high {
        return Err(Error::InvalidArgument(format!(
            "canny low threshold {} must be below high {}",
            params.low, params.high
        )));
    }
    let (h, w) = image.dim();
    let (lo, hi) = image
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(f64::from(v)), b.max(f64::from(v))));
    if !(hi > lo) {
        return Ok(EdgeMap { edges: Array2::from_elem((h, w), false), source: EdgeSource::Native });
    }
    let scaled = image.mapv(|v| (f64::from(v) - lo) / (hi - lo) * 255.0);
    // Gradients are taken on the smoothed image quantized to 8 bits, so
    // mirrored configurations produce exactly equal magnitudes.
    let smooth = gaussian_smooth(scaled.view(), params.kernel, params.sigma)?.mapv(|v| v.round().clamp(0.0, 255.0));
    let gx = convolve_separable(smooth.view(), &[1.0, 2.0, 1.0], &[-1.0, 0.0, 1.0]);
    let gy = convolve_separable(smooth.view(), &[-1.0, 0.0, 1.0], &[1.0, 2.0, 1.0]);
    let mag = Zip::from(&gx).and(&gy).map_collect(|a, b| a.abs() + b.abs());

    let tan22 = (std::f64::consts::PI / 8.0).tan();
    let tan67 = (3.0 * std::f64::consts::PI / 8.0).tan();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[[r as usize, c as usize]]
        }
    };
    // 0 = suppressed, 1 = weak, 2 = strong
    let mut class = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let m = mag[[r, c]];
            if m <= params.low {
                continue;
            }
            let (ax, ay) = (gx[[r, c]].abs(), gy[[r, c]].abs());
            let (dr, dc): (isize, isize) = if ay <= tan22 * ax {
                (0, 1)
            } else if ay > tan67 * ax {
                (1, 0)
            } else if gx[[r, c]] * gy[[r, c]] > 0.0 {
                (1, 1)
            } else {
                (1, -1)
            };
            let (ri, ci) = (r as isize, c as isize);
            let prev = at(ri - dr, ci - dc);
            let next = at(ri + dr, ci + dc);
            if m > prev && m >= next {
                class[[r, c]] = if m > params.high { 2 } else { 1 };
            }
        }
    }
    let mut edges = Array2::from_elem((h, w), false);
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for ((r, c), &k) in class.indexed_iter() {
        if k == 2 {
            edges[[r, c]] = true;
            queue.push_back((r, c));
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if class[[nr, nc]] == 1 && !edges[[nr, nc]] {
                    edges[[nr, nc]] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
    }
    Ok(EdgeMap { edges, source: EdgeSource::Native })
}

/// Left-right flip about the vertical center line.
pub fn flip_lr<T: Clone>(a: ArrayView2<'_, T>) -> Array2<T> {
    let w = a.ncols();
    Array2::from_shape_fn(a.dim(), |(r, c)| a[[r, w - 1 - c]].clone())
}

/// Flipped edges inside the mask, native edges elsewhere.
pub fn mirror_composite(edge_map: &EdgeMap, inpaint_mask: ArrayView2<'_, bool>) -> Result<EdgeMap> {
    if edge_map.edges.dim() != inpaint_mask.dim() {
        let (a, b) = (edge_map.edges.dim(), inpaint_mask.dim());
        return Err(Error::DimensionMismatch { what: "edge map vs mask", left: vec![a.0, a.1], right: vec![b.0, b.1] });
    }
    let flipped = flip_lr(edge_map.edges.view());
    let edges = Zip::from(&flipped)
        .and(&edge_map.edges)
        .and(inpaint_mask)
        .map_collect(|&f, &e, &m| if m { f } else { e });
    Ok(EdgeMap { edges, source: EdgeSource::MirroredComposite })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_101() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn impulse_reproduces_closed_form_kernel() {
        let mut img = Array2::<f64>::zeros((9, 9));
        img[[4, 4]] = 1.0;
        let out = gaussian_smooth(img.view(), 5, 1.0).unwrap();
        let z: f64 = (-2..=2).flat_map(|a| (-2..=2).map(move |b| (-(f64::from(a * a + b * b)) / 2.0).exp())).sum();
        for dr in -2i32..=2 {
            for dc in -2i32..=2 {
                let want = (-(f64::from(dr * dr + dc * dc)) / 2.0).exp() / z;
                let got = out[[(4 + dr) as usize, (4 + dc) as usize]];
                assert!((got - want).abs() < 1e-15);
            }
        }
        assert_eq!(out[[1, 4]], 0.0);
        assert!(gaussian_smooth(img.view(), 4, 1.0).is_err());
    }

    #[test]
    fn vertical_step_gives_one_line() {
        let img = Array2::from_shape_fn((16, 16), |(_, c)| if c < 8 { 0.0f32 } else { 255.0 });
        let e = canny_edges(img.view(), &CannyParams::default()).unwrap();
        for r in 0..16 {
            let cols: Vec<usize> = (0..16).filter(|&c| e.edges[[r, c]]).collect();
            assert_eq!(cols, vec![7], "row {r}");
        }
    }

    #[test]
    fn uniform_is_empty_and_bad_thresholds_fail() {
        let img = Array2::from_elem((8, 8), 3.0f32);
        let p = CannyParams::default();
        assert!(canny_edges(img.view(), &p).unwrap().edges.iter().all(|&b| !b));
        let bad = CannyParams { low: 80.0, high: 30.0, ..p };
        assert!(canny_edges(img.view(), &bad).is_err());
    }

    #[test]
    fn composite_by_hand() {
        let mut e = Array2::from_elem((3, 6), false);
        e[[1, 1]] = true;
        let mut m = Array2::from_elem((3, 6), false);
        m[[1, 4]] = true;
        let out = mirror_composite(&EdgeMap { edges: e, source: EdgeSource::Native }, m.view()).unwrap();
        assert!(out.edges[[1, 1]] && out.edges[[1, 4]]);
        assert_eq!(out.edges.iter().filter(|&&b| b).count(), 2);
        assert_eq!(out.source, EdgeSource::MirroredComposite);
    }
}
