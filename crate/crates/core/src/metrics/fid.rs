use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DESK_FEATURE_DIM: usize = 128;
const HIST_BINS: usize = 64;
const POOL: usize = 8;
const EIG_TOL: f64 = 1e-8;

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Pooled statistics of the union of two sample sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { what: "feature dims", left: vec![self.dim()], right: vec![other.dim()] });
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mu - &self.mu;
        let mu = &self.mu + &delta * (nb / n);
        let m2 = &self.sigma * (na - 1.0) + &other.sigma * (nb - 1.0) + &delta * delta.transpose() * (na * nb / n);
        Ok(Self { mu, sigma: m2 / (n - 1.0), n: self.n + other.n })
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<FeatureStats> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 feature vectors, got {}", features.len())));
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch { what: "feature dims", left: vec![d], right: vec![f.len()] });
    }
    let n = features.len();
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        sigma += &c * c.transpose();
    }
    sigma /= (n - 1) as f64;
    Ok(FeatureStats { mu, sigma, n })
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if let Some(v) = eig.eigenvalues.iter().find(|&&v| v < -EIG_TOL * scale) {
        return Err(Error::Range(format!("{what} is not positive semi-definite (eigenvalue {v:e})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian fits.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { what: "feature dims", left: vec![a.dim()], right: vec![b.dim()] });
    }
    if a.mu == b.mu && a.sigma == b.sigma {
        return Ok(0.0);
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let ra = psd_sqrt(&a.sigma, "first covariance")?;
    psd_sqrt(&b.sigma, "second covariance")?;
    let inner = &ra * &b.sigma * &ra;
    let cross = psd_sqrt(&inner, "covariance product")?.trace();
    Ok((mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross).max(0.0))
}

/// Which feature extractor feeds FID.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorKind {
    /// Intensity histogram plus 8×8 block means; weight-free.
    Desk,
    /// Inception-class network; weights are not bundled.
    Pretrained { weights: String },
}

impl ExtractorKind {
    pub fn extract(&self, image: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
        match self {
            ExtractorKind::Desk => desk_features(image),
            ExtractorKind::Pretrained { weights } => {
                Err(Error::MissingArtifact(format!("feature extractor '{weights}' is not configured")))
            }
        }
    }
}

/// 64-bin histogram of `[-1, 1]` intensities (fractions) followed by the
/// 8×8 grid of block means.
pub fn desk_features(image: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
    let (h, w) = image.dim();
    if h < POOL || w < POOL {
        return Err(Error::InvalidArgument(format!("image {h}x{w} smaller than the {POOL}x{POOL} pooling grid")));
    }
    let mut out = vec![0.0; DESK_FEATURE_DIM];
    let inv = 1.0 / (h * w) as f64;
    for &v in image.iter() {
        let b = (((f64::from(v) + 1.0) * 0.5 * HIST_BINS as f64).floor()).clamp(0.0, (HIST_BINS - 1) as f64) as usize;
        out[b] += inv;
    }
    for br in 0..POOL {
        let (r0, r1) = (br * h / POOL, (br + 1) * h / POOL);
        for bc in 0..POOL {
            let (c0, c1) = (bc * w / POOL, (bc + 1) * w / POOL);
            let block = image.slice(ndarray::s![r0..r1, c0..c1]);
            out[HIST_BINS + br * POOL + bc] = block.iter().map(|&v| f64::from(v)).sum::<f64>() / block.len() as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats1(mu: f64, var: f64) -> FeatureStats {
        FeatureStats { mu: DVector::from_element(1, mu), sigma: DMatrix::from_element(1, 1, var), n: 2 }
    }

    #[test]
    fn fit_two_vectors() {
        let s = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
        assert!(fit_gaussian(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn scalar_fid() {
        assert!((fid(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((fid(&stats1(0.0, 4.0), &stats1(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(fid(&stats1(3.0, 2.0), &stats1(3.0, 2.0)).unwrap(), 0.0);
    }

    #[test]
    fn non_psd_is_rejected() {
        let bad = FeatureStats { mu: DVector::zeros(1), sigma: DMatrix::from_element(1, 1, -1.0), n: 2 };
        assert!(fid(&bad, &stats1(0.0, 1.0)).is_err());
    }

    #[test]
    fn desk_dim() {
        let img = ndarray::Array2::<f32>::zeros((64, 64));
        assert_eq!(desk_features(img.view()).unwrap().len(), DESK_FEATURE_DIM);
    }
}
