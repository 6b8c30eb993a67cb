use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::percentile_sorted;
use crate::error::{Error, Result};

/// Tumor detector applied to generated slices.
pub trait Detector {
    fn flags(&self, image: ArrayView2<'_, f32>) -> Result<bool>;
}

/// Flags a slice when some `patch`×`patch` window has a mean intensity
/// above the slice's `percentile` plus `margin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdDetector {
    pub patch: usize,
    pub percentile: f64,
    pub margin: f64,
}

impl Default for ThresholdDetector {
    fn default() -> Self {
        Self { patch: 20, percentile: 99.0, margin: 0.0 }
    }
}

impl ThresholdDetector {
    /// The 20-pixel patch scaled to a 64-pixel field of view.
    pub fn desk() -> Self {
        Self { patch: 6, percentile: 99.0, margin: 0.0 }
    }
}

impl Detector for ThresholdDetector {
    fn flags(&self, image: ArrayView2<'_, f32>) -> Result<bool> {
        let (h, w) = image.dim();
        let k = self.patch;
        if k == 0 || k > h || k > w {
            return Err(Error::InvalidArgument(format!("patch {k} does not fit a {h}x{w} image")));
        }
        let mut sorted: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
        sorted.sort_by(f64::total_cmp);
        let threshold = percentile_sorted(&sorted, self.percentile) + self.margin;
        let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += f64::from(image[[r, c]]);
                integral[(r + 1) * (w + 1) + c + 1] = integral[r * (w + 1) + c + 1] + row;
            }
        }
        let at = |r: usize, c: usize| integral[r * (w + 1) + c];
        let area = (k * k) as f64;
        for r in 0..=h - k {
            for c in 0..=w - k {
                let sum = at(r + k, c + k) - at(r, c + k) - at(r + k, c) + at(r, c);
                if sum / area > threshold {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorKind {
    Threshold(ThresholdDetector),
    /// External segmentation network; weights are not bundled.
    Segmenter { weights: String },
}

impl DetectorKind {
    pub fn build(&self) -> Result<Box<dyn Detector>> {
        match self {
            DetectorKind::Threshold(t) => Ok(Box::new(*t)),
            DetectorKind::Segmenter { weights } => Err(Error::MissingArtifact(format!("detector '{weights}' is not configured"))),
        }
    }
}

/// Fraction of flagged verdicts.
pub fn fp_rate(verdicts: &[bool]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::Empty("verdict set".into()));
    }
    Ok(verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64)
}
