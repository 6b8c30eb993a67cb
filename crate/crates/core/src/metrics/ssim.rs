use log::warn;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    /// Dynamic range of the inputs; 2 for images in `[-1, 1]`.
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: SSIM_WINDOW, data_range: 2.0, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

fn integral(f: impl Fn(usize, usize) -> f64, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f(r, c);
            out[[r + 1, c + 1]] = out[[r, c + 1]] + row;
        }
    }
    out
}

fn window_sum(t: &Array2<f64>, r: usize, c: usize, k: usize) -> f64 {
    t[[r + k, c + k]] - t[[r, c + k]] - t[[r + k, c]] + t[[r, c]]
}

/// Mean SSIM over all fully contained `window`×`window` uniform windows,
/// with unbiased local (co)variances.
pub fn ssim(x: ArrayView2<'_, f32>, y: ArrayView2<'_, f32>, params: &SsimParams) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { what: "ssim inputs", left: vec![x.nrows(), x.ncols()], right: vec![y.nrows(), y.ncols()] });
    }
    let (h, w) = x.dim();
    let k = params.window;
    if k < 2 || k > h || k > w {
        return Err(Error::InvalidArgument(format!("window {k} does not fit a {h}x{w} image")));
    }
    let xv = |r: usize, c: usize| f64::from(x[[r, c]]);
    let yv = |r: usize, c: usize| f64::from(y[[r, c]]);
    let sx = integral(xv, h, w);
    let sy = integral(yv, h, w);
    let sxx = integral(|r, c| xv(r, c) * xv(r, c), h, w);
    let syy = integral(|r, c| yv(r, c) * yv(r, c), h, w);
    let sxy = integral(|r, c| xv(r, c) * yv(r, c), h, w);
    let np = (k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let (c1, c2) = (params.c1(), params.c2());
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = window_sum(&sx, r, c, k) / np;
            let my = window_sum(&sy, r, c, k) / np;
            let vx = cov_norm * (window_sum(&sxx, r, c, k) / np - mx * mx);
            let vy = cov_norm * (window_sum(&syy, r, c, k) / np - my * my);
            let vxy = cov_norm * (window_sum(&sxy, r, c, k) / np - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Bounding box of `mask` grown to at least the SSIM window, and its mirror
/// across the vertical midline, as `(rows, cols, mirrored_cols)` half-open
/// ranges.
pub fn contralateral_boxes(mask: ArrayView2<'_, bool>, window: usize) -> Result<((usize, usize), (usize, usize), (usize, usize))> {
    let (h, w) = mask.dim();
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!("window {window} does not fit a {h}x{w} image")));
    }
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            rows = (rows.0.min(r), rows.1.max(r + 1));
            cols = (cols.0.min(c), cols.1.max(c + 1));
        }
    }
    if rows.0 == usize::MAX {
        return Err(Error::Empty("mask".into()));
    }
    let grow = |(lo, hi): (usize, usize), n: usize| {
        let len = hi - lo;
        if len >= window {
            return (lo, hi);
        }
        let lo = lo.saturating_sub((window - len) / 2).min(n - window);
        (lo, lo + window)
    };
    let rows = grow(rows, h);
    let cols = grow(cols, w);
    let mirrored = (w - cols.1, w - cols.0);
    if mirrored.0 < cols.1 && cols.0 < mirrored.1 {
        warn!("region columns {}..{} overlap their mirror image", cols.0, cols.1);
    }
    Ok((rows, cols, mirrored))
}

/// SSIM between the masked region's bounding box and the horizontally
/// flipped crop at the mirrored position.
pub fn contralateral_ssim(slice: ArrayView2<'_, f32>, mask: ArrayView2<'_, bool>) -> Result<f64> {
    if slice.dim() != mask.dim() {
        return Err(Error::DimensionMismatch {
            what: "slice vs mask",
            left: vec![slice.nrows(), slice.ncols()],
            right: vec![mask.nrows(), mask.ncols()],
        });
    }
    let params = SsimParams::default();
    let (rows, cols, mirrored) = contralateral_boxes(mask, params.window)?;
    let a = slice.slice(s![rows.0..rows.1, cols.0..cols.1]);
    let b = slice.slice(s![rows.0..rows.1, mirrored.0..mirrored.1;-1]);
    ssim(a, b, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_closed_form() {
        let p = SsimParams::default();
        let x = Array2::<f32>::zeros((9, 9));
        let y = Array2::<f32>::ones((9, 9));
        let want = p.c1() / (1.0 + p.c1());
        assert!((ssim(x.view(), y.view(), &p).unwrap() - want).abs() < 1e-12);
        assert!((ssim(y.view(), y.view(), &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_too_large() {
        let x = Array2::<f32>::zeros((5, 9));
        assert!(ssim(x.view(), x.view(), &SsimParams::default()).is_err());
    }

    #[test]
    fn symmetric_slice_scores_one() {
        let img = Array2::from_shape_fn((16, 16), |(r, c)| {
            let d = (c as f32 - 7.5).abs();
            (r as f32 * 0.3 + d * d * 0.05).sin()
        });
        let mut mask = Array2::from_elem((16, 16), false);
        mask[[4, 2]] = true;
        mask[[6, 3]] = true;
        assert!((contralateral_ssim(img.view(), mask.view()).unwrap() - 1.0).abs() < 1e-12);
        let ((r0, r1), (c0, c1), (m0, m1)) = contralateral_boxes(mask.view(), 7).unwrap();
        assert_eq!((r1 - r0, c1 - c0, m1 - m0), (7, 7, 7));
        assert_eq!((c0, m1), (0, 16));
    }
}
