use ndarray::{Array2, ArrayView2};
use phs_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Cumulative signal coefficients `alpha_bar[t]` for `t = 0..=T`, with
/// `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..steps)
            .map(|i| {
                let u = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                BETA_START + (BETA_END - BETA_START) * u
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar, kind })
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`, evaluated in `f64`.
pub fn forward_diffuse(z0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    if t > schedule.steps() {
        return Err(Error::Range(format!("timestep {t} beyond T = {}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |x, e| (a * f64::from(x) + b * f64::from(e)) as f32).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Max-pools a pixel mask by `factor`: a latent cell is set when any pixel
/// in its window is.
pub fn downsample_mask(mask: ArrayView2<'_, bool>, factor: usize) -> Result<Array2<bool>> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!("mask {h}x{w} not divisible by factor {factor}")));
    }
    let mut out = Array2::from_elem((h / factor, w / factor), false);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            out[[r / factor, c / factor]] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoint_and_monotone() {
        let s = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 0.1e-5, "{}", s.alpha_bar(1000));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let c = make_schedule(50, ScheduleKind::Cosine).unwrap();
        assert!(c.alpha_bars().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        assert!(make_schedule(0, ScheduleKind::LinearBeta).is_err());
    }

    #[test]
    fn forward_by_hand() {
        let s = NoiseSchedule { alpha_bar: vec![1.0, 0.25], kind: ScheduleKind::LinearBeta };
        let z = forward_diffuse(&Tensor::scalar(2.0), 1, &Tensor::scalar(1.0), &s).unwrap();
        assert!((f64::from(z.data()[0]) - (1.0 + 0.75f64.sqrt())).abs() < 1e-6);
        let z = forward_diffuse(&Tensor::scalar(2.0), 0, &Tensor::scalar(1.0), &s).unwrap();
        assert_eq!(z.data()[0], 2.0);
    }

    #[test]
    fn downsample_identity_and_errors() {
        let m = Array2::from_shape_fn((4, 4), |(r, c)| r == c);
        assert_eq!(downsample_mask(m.view(), 1).unwrap(), m);
        assert!(downsample_mask(m.view(), 3).is_err());
    }
}
