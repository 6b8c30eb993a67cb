use phs_tensor::Tensor;

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Descending timesteps `round(T k / S)` for `k = S..1`.
pub fn timestep_ladder(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    if steps > total {
        return Err(Error::InvalidArgument(format!("{steps} sampling steps exceed T = {total}")));
    }
    Ok((1..=steps).rev().map(|k| ((total * k) as f64 / steps as f64).round() as usize).collect())
}

/// Deterministic update from `ab_t` to `ab_prev` given a noise estimate.
pub fn ddim_step(z_t: &Tensor<f32>, eps: &Tensor<f32>, ab_t: f64, ab_prev: f64) -> Tensor<f32> {
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z_t.zip_map(eps, |z, e| {
        let (z, e) = (f64::from(z), f64::from(e));
        let x0 = (z - nt * e) / st;
        (sp * x0 + np * e) as f32
    })
    .expect("eps has the latent shape")
}

/// Content outside the inpaint region, re-noised to each timestep with the
/// initial noise draw and blended back after every update.
pub struct KnownRegion<'a> {
    pub latent: &'a Tensor<f32>,
    /// 1 where content is generated, 0 where it is known; broadcast over channels.
    pub mask: &'a Tensor<f32>,
}

fn blend(z: &mut Tensor<f32>, known: &KnownRegion<'_>, noise: &Tensor<f32>, ab: f64) {
    let (n, c, h, w) = z.dims4();
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let plane = h * w;
    let m = known.mask.data();
    let kl = known.latent.data();
    let nz = noise.data();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        let mi = (i / (c * plane)) * plane + i % plane;
        if m[mi] < 0.5 {
            *v = (a * f64::from(kl[i]) + b * f64::from(nz[i])) as f32;
        }
    }
    debug_assert_eq!(n * c * plane, kl.len());
}

/// Runs the reverse process from `z_T`. `predict(z_t, t)` returns the noise
/// estimate.
pub fn ddim_sample<F>(
    schedule: &NoiseSchedule,
    z_init: Tensor<f32>,
    steps: usize,
    known: Option<KnownRegion<'_>>,
    mut predict: F,
) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    let ladder = timestep_ladder(schedule.steps(), steps)?;
    let noise = z_init.clone();
    let mut z = z_init;
    if let Some(k) = &known {
        blend(&mut z, k, &noise, schedule.alpha_bar(ladder[0]));
    }
    for (i, &t) in ladder.iter().enumerate() {
        let t_prev = ladder.get(i + 1).copied().unwrap_or(0);
        let eps = predict(&z, t)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!("noise prediction at t = {t}")));
        }
        z = ddim_step(&z, &eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        if let Some(k) = &known {
            blend(&mut z, k, &noise, schedule.alpha_bar(t_prev));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{forward_diffuse, make_schedule, ScheduleKind};

    #[test]
    fn ladder_shape() {
        assert_eq!(timestep_ladder(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(timestep_ladder(10, 3).unwrap(), vec![10, 7, 3]);
        assert!(timestep_ladder(10, 11).is_err());
    }

    #[test]
    fn oracle_noise_recovers_z0() {
        let s = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let z0 = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 * 0.2 - 0.8);
        let eps = Tensor::from_fn(&[1, 1, 3, 3], |i| ((i * 7) % 5) as f32 * 0.5 - 1.0);
        let z_t = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        for steps in [1, 7, 50] {
            let out = ddim_sample(&s, z_t.clone(), steps, None, |_, _| Ok(eps.clone())).unwrap();
            assert!(out.max_abs_diff(&z0).unwrap() < 1e-3, "steps {steps}");
        }
    }
}
