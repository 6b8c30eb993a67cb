//! Distribution distance, structural similarity against the contralateral
//! hemisphere, and detector-based false-positive rate.

mod detect;
mod fid;
mod ssim;

pub use detect::{fp_rate, Detector, DetectorKind, ThresholdDetector};
pub use fid::{desk_features, fid, fit_gaussian, ExtractorKind, FeatureStats, DESK_FEATURE_DIM};
pub use ssim::{contralateral_boxes, contralateral_ssim, ssim, SsimParams, SSIM_WINDOW};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-slice evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEval {
    pub id: String,
    pub ssim: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub ssim_mean: f64,
    pub fp_rate: f64,
    pub flagged: usize,
    pub total: usize,
    pub per_slice: Vec<SliceEval>,
    pub extractor: ExtractorKind,
    pub detector: DetectorKind,
    pub config_hash: String,
}

impl EvalReport {
    /// Per-slice rows as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ssim,flagged\n");
        for s in &self.per_slice {
            out.push_str(&format!("{},{},{}\n", s.id, s.ssim, u8::from(s.flagged)));
        }
        out
    }
}

/// A generated slice with the mask it was inpainted under.
pub struct GeneratedSlice<'a> {
    pub id: String,
    pub image: ArrayView2<'a, f32>,
    pub mask: ArrayView2<'a, bool>,
}

/// Scores generated slices against a reference set of real healthy slices.
pub fn evaluate(
    generated: &[GeneratedSlice<'_>],
    reference: &[ArrayView2<'_, f32>],
    extractor: &ExtractorKind,
    detector: &DetectorKind,
    config_hash: &str,
) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::Empty("generated set".into()));
    }
    let feats = |imgs: &mut dyn Iterator<Item = ArrayView2<'_, f32>>| -> Result<Vec<Vec<f64>>> {
        imgs.map(|i| extractor.extract(i)).collect()
    };
    let gen_stats = fit_gaussian(&feats(&mut generated.iter().map(|g| g.image))?)?;
    let ref_stats = fit_gaussian(&feats(&mut reference.iter().copied())?)?;
    let fid_value = fid(&ref_stats, &gen_stats)?;
    let det = detector.build()?;
    let mut per_slice = Vec::with_capacity(generated.len());
    for g in generated {
        per_slice.push(SliceEval { id: g.id.clone(), ssim: contralateral_ssim(g.image, g.mask)?, flagged: det.flags(g.image)? });
    }
    let verdicts: Vec<bool> = per_slice.iter().map(|s| s.flagged).collect();
    let flagged = verdicts.iter().filter(|&&v| v).count();
    Ok(EvalReport {
        fid: fid_value,
        ssim_mean: per_slice.iter().map(|s| s.ssim).sum::<f64>() / per_slice.len() as f64,
        fp_rate: fp_rate(&verdicts)?,
        flagged,
        total: verdicts.len(),
        per_slice,
        extractor: extractor.clone(),
        detector: detector.clone(),
        config_hash: config_hash.to_string(),
    })
}
