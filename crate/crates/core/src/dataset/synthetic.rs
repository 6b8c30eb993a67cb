//! Left-right symmetric brain phantoms with optional blob tumors, used as
//! test fixtures and for the desk preset.
//!
//! Intensities are in T1CE-like scanner units: white matter ~620, grey
//! matter ~420, CSF ~160, enhancing vessels and tumor rim ~1000.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Fraction of subjects that carry a tumor.
    pub tumor_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { height: 60, width: 60, depth: 16, tumor_fraction: 0.75 }
    }
}

/// Anatomy of one subject. Every feature depends on `|x - center|`, so each
/// slice is mirror symmetric about the vertical center line.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub center_row: f64,
    pub semi_rows: f64,
    pub semi_cols: f64,
    pub cortex: f64,
    pub gyri: f64,
    pub gyri_phase: f64,
    pub vent_offset: f64,
    pub vent_rows: f64,
    pub vent_cols: f64,
    pub vent_row: f64,
    pub nuclei_offset: f64,
    pub nuclei_row: f64,
    pub nuclei_radius: f64,
    pub texture_freq: (f64, f64),
    pub texture_phase: (f64, f64),
}

impl PhantomParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, depth: usize) -> Self {
        let h = height as f64;
        let w = width as f64;
        Self {
            height,
            width,
            depth,
            center_row: (h - 1.0) / 2.0 + rng.random_range(-0.04..0.04) * h,
            semi_rows: rng.random_range(0.40..0.45) * h,
            semi_cols: rng.random_range(0.34..0.39) * w,
            cortex: rng.random_range(0.10..0.14),
            gyri: f64::from(rng.random_range(5u32..9)),
            gyri_phase: rng.random_range(0.0..std::f64::consts::TAU),
            vent_offset: rng.random_range(0.10..0.16) * w,
            vent_rows: rng.random_range(0.14..0.20) * h,
            vent_cols: rng.random_range(0.05..0.08) * w,
            vent_row: rng.random_range(-0.12..-0.02) * h,
            nuclei_offset: rng.random_range(0.18..0.24) * w,
            nuclei_row: rng.random_range(0.10..0.18) * h,
            nuclei_radius: rng.random_range(0.05..0.07) * w,
            texture_freq: (rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)),
            texture_phase: (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    fn center_col(&self) -> f64 {
        (self.width as f64 - 1.0) / 2.0
    }

    /// Brain extent shrinks towards the first and last slices.
    fn z_scale(&self, z: usize) -> f64 {
        let d = self.depth as f64;
        let u = (z as f64 - (d - 1.0) / 2.0) / (0.8 * d);
        (1.0 - u * u).max(0.0).sqrt()
    }

    fn intensity(&self, row: f64, col: f64, zs: f64) -> f64 {
        let dy = row - self.center_row;
        let dx = (col - self.center_col()).abs();
        let (a, b) = (self.semi_rows * zs, self.semi_cols * zs);
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        let rho = ((dy / a).powi(2) + (dx / b).powi(2)).sqrt();
        let theta = dx.atan2(dy);
        let rim = 1.0 - self.cortex * (1.0 + 0.5 * (self.gyri * theta + self.gyri_phase).cos());
        if rho > 1.0 {
            return 0.0;
        }
        // posterior sagittal sinus
        if dx < 1.6 && (dy - 0.9 * a).abs() < 1.6 {
            return 1000.0;
        }
        if rho > rim {
            return 420.0 + 30.0 * (3.0 * theta).cos();
        }
        let vy = dy - self.vent_row * zs;
        let vx = dx - self.vent_offset;
        let v = (vy / (self.vent_rows * zs)).powi(2) + (vx / (self.vent_cols * zs.max(0.5))).powi(2);
        if v < 1.0 {
            // choroid plexus
            if (vy - 0.4 * self.vent_rows * zs).powi(2) + vx.powi(2) < 1.7 {
                return 1000.0;
            }
            return 160.0;
        }
        let ny = dy - self.nuclei_row * zs;
        let nx = dx - self.nuclei_offset;
        if ny * ny + nx * nx < (self.nuclei_radius * zs).powi(2) {
            return 500.0;
        }
        if dx < 0.6 {
            return 380.0;
        }
        let (fy, fx) = self.texture_freq;
        let (py, px) = self.texture_phase;
        620.0 - 40.0 * rho + 25.0 * (fy * dy + py).sin() * (fx * dx + px).cos()
    }

    /// One axial slice as `[row, col]`, supersampled 2×2 and mirrored so the
    /// symmetry is exact.
    pub fn healthy_slice(&self, z: usize) -> Array2<f32> {
        let (h, w) = (self.height, self.width);
        let zs = self.z_scale(z);
        let mut out = Array2::<f32>::zeros((h, w));
        for r in 0..h {
            for c in 0..w.div_ceil(2) {
                let mut acc = 0.0;
                for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                    acc += self.intensity(r as f64 + oy, c as f64 + ox, zs);
                }
                let v = (acc / 4.0) as f32;
                out[[r, c]] = v;
                out[[r, w - 1 - c]] = v;
            }
        }
        out
    }
}

/// A roughly spherical lesion with necrotic core, enhancing rim and edema.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorParams {
    pub row: f64,
    pub col: f64,
    pub slice: f64,
    pub radius: f64,
    pub radius_z: f64,
    pub lobes: f64,
    pub lobe_phase: f64,
}

impl TumorParams {
    /// Places the lesion fully inside one hemisphere of the central slice.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, p: &PhantomParams, radius: (f64, f64)) -> Self {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let r0 = rng.random_range(radius.0..radius.1);
        let max_dx = (p.semi_cols * 0.75 - r0).max(r0 + 1.5);
        let dx = rng.random_range((r0 + 1.5).min(max_dx)..=max_dx);
        let span_y = (p.semi_rows * 0.5 - r0).max(0.0);
        let dy = if span_y > 0.0 { rng.random_range(-span_y..=span_y) } else { 0.0 };
        let d = p.depth as f64;
        Self {
            row: p.center_row + dy,
            col: p.center_col() + side * dx,
            slice: (d - 1.0) / 2.0 + rng.random_range(-0.15..0.15) * d,
            radius: r0,
            radius_z: rng.random_range(0.25..0.4) * d,
            lobes: rng.random_range(0.05..0.2),
            lobe_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn radius_at(&self, z: usize) -> f64 {
        let u = (z as f64 - self.slice) / self.radius_z;
        if u.abs() >= 1.0 {
            0.0
        } else {
            self.radius * (1.0 - u * u).sqrt()
        }
    }

    /// Normalized radial coordinate (`< 1` inside the lesion).
    fn rho(&self, row: f64, col: f64, rz: f64) -> f64 {
        let (dy, dx) = (row - self.row, col - self.col);
        let theta = dy.atan2(dx);
        let rr = rz * (1.0 + self.lobes * (3.0 * theta + self.lobe_phase).cos());
        (dy * dy + dx * dx).sqrt() / rr
    }

    /// Paints the lesion into slice `z` in place and writes BraTS-style
    /// labels (1 necrosis, 2 edema, 4 enhancing).
    pub fn insert(&self, image: &mut Array2<f32>, seg: &mut Array2<i32>, z: usize) {
        let rz = self.radius_at(z);
        if rz < 0.75 {
            return;
        }
        let value = |rho: f64| -> Option<(f64, i32)> {
            if rho < 0.4 {
                Some((250.0, 1))
            } else if rho < 0.72 {
                Some((1000.0, 4))
            } else if rho < 1.0 {
                Some((480.0, 2))
            } else {
                None
            }
        };
        let (h, w) = image.dim();
        for r in 0..h {
            for c in 0..w {
                if image[[r, c]] == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                let mut hits = 0;
                for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                    if let Some((v, _)) = value(self.rho(r as f64 + oy, c as f64 + ox, rz)) {
                        acc += v;
                        hits += 1;
                    }
                }
                if hits > 0 {
                    let base = f64::from(image[[r, c]]);
                    image[[r, c]] = ((acc + base * f64::from(4 - hits)) / 4.0) as f32;
                }
                if let Some((_, label)) = value(self.rho(r as f64, c as f64, rz)) {
                    seg[[r, c]] = label;
                }
            }
        }
    }
}

/// Builds a `[x, y, z]` volume for one synthetic subject.
pub fn synthetic_volume(subject_id: &str, cfg: &SyntheticConfig, seed: u64) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = PhantomParams::sample(&mut rng, cfg.height, cfg.width, cfg.depth);
    let tumor = rng
        .random_bool(cfg.tumor_fraction.clamp(0.0, 1.0))
        .then(|| TumorParams::sample(&mut rng, &p, tumor_radius_range(cfg)));
    let age = rng.random_bool(0.8).then(|| f64::from(rng.random_range(25u32..80)));
    let (h, w, d) = (cfg.height, cfg.width, cfg.depth);
    let mut voxels = Array3::<f32>::zeros((w, h, d));
    let mut seg = Array3::<i32>::zeros((w, h, d));
    for z in 0..d {
        let mut img = p.healthy_slice(z);
        let mut lab = Array2::<i32>::zeros((h, w));
        if let Some(t) = &tumor {
            t.insert(&mut img, &mut lab, z);
        }
        for r in 0..h {
            for c in 0..w {
                voxels[[c, r, z]] = img[[r, c]];
                seg[[c, r, z]] = lab[[r, c]];
            }
        }
    }
    Volume::new(voxels, seg, subject_id, age)
}

/// Lesion radius range in native pixels that puts the central slice inside
/// the tumorous pixel-count band after rescaling to a 240×240 field of view.
fn tumor_radius_range(cfg: &SyntheticConfig) -> (f64, f64) {
    let scale = ((cfg.height * cfg.width) as f64 / (240.0 * 240.0)).sqrt();
    (22.0 * scale, 28.0 * scale)
}

/// `n` subjects named `SYN_000`, `SYN_001`, ...
pub fn synthetic_cohort(n: usize, cfg: &SyntheticConfig, seed: u64) -> Result<Vec<Volume>> {
    (0..n)
        .map(|i| synthetic_volume(&format!("SYN_{i:03}"), cfg, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::flip_lr;

    #[test]
    fn healthy_slices_are_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let p = PhantomParams::sample(&mut rng, 60, 60, 16);
            let s = p.healthy_slice(8);
            assert_eq!(flip_lr(s.view()), s);
            assert!(s.iter().any(|&v| v > 900.0));
        }
    }

    #[test]
    fn volumes_are_deterministic_and_labelled() {
        let cfg = SyntheticConfig { tumor_fraction: 1.0, ..Default::default() };
        let a = synthetic_volume("A", &cfg, 7).unwrap();
        let b = synthetic_volume("A", &cfg, 7).unwrap();
        assert_eq!(a.voxels(), b.voxels());
        assert_eq!(a.seg(), b.seg());
        assert!(a.seg().iter().any(|&l| l == 4));
        assert!(a.seg().iter().all(|&l| matches!(l, 0 | 1 | 2 | 4)));
    }
}
