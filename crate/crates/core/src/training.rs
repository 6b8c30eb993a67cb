//! Two-stage optimization: inpainting fine-tuning of the denoiser, then
//! control-branch training against the frozen backbone.

use ndarray::ArrayView2;
use phs_tensor::optim::{clip_grad_norm, AdamW, AdamWConfig};
use phs_tensor::{Gradients, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SliceRecord;
use crate::diffusion::{Batch, DenoiserBundle, FreezeFlags, ModelConfig, Stage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_stage1() -> Self {
        Self {
            stage: Stage::Stage1,
            batch_size: 8,
            grad_accum: 4,
            epochs: 30,
            lr: 5e-5,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    pub fn paper_stage2() -> Self {
        Self { stage: Stage::Stage2, epochs: 20, lr: 5e-4, warmup_steps: 500, ..Self::paper_stage1() }
    }

    /// Small-data settings: no accumulation, a higher rate and many more
    /// passes over a handful of slices.
    pub fn desk_stage1() -> Self {
        Self { grad_accum: 1, epochs: 25, lr: 2e-3, warmup_steps: 10, ..Self::paper_stage1() }
    }

    pub fn desk_stage2() -> Self {
        Self { stage: Stage::Stage2, grad_accum: 1, epochs: 6, lr: 1e-3, warmup_steps: 10, ..Self::paper_stage1() }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Optimizer steps for a training split of `n` records.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.effective_batch())
    }

    /// Per-key problems, empty when valid.
    pub fn problems(&self, key: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                out.push(format!("{key}.{field}: {msg}"));
            }
        };
        check(self.batch_size > 0, "batch_size", "must be positive");
        check(self.grad_accum > 0, "grad_accum", "must be positive");
        check(self.epochs > 0, "epochs", "must be positive");
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be a positive number");
        check((0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1), "betas", "must lie in [0, 1)");
        check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative");
        check(self.grad_clip > 0.0, "grad_clip", "must be positive");
        out
    }
}

/// Learning-rate factor at optimizer step `step`: linear warmup, then
/// cosine decay to zero at `total_steps`.
pub fn lr_multiplier(step: usize, total_steps: usize, warmup: usize) -> Result<f64> {
    if warmup >= total_steps {
        return Err(Error::InvalidArgument(format!("warmup {warmup} must be below the step total {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond {total_steps}")));
    }
    if step < warmup {
        return Ok(step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub log: Vec<StepLog>,
}

/// Noise draws for one micro-batch.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Tensor<f32>,
}

impl NoiseDraw {
    /// Timestep then noise per item, in item order, so the draws for an
    /// item do not depend on how the batch is split.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, latent_shape: [usize; 3], steps: usize) -> Self {
        let mut timesteps = Vec::with_capacity(n);
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            timesteps.push(rng.random_range(1..=steps));
            items.push(Tensor::randn(&latent_shape, rng));
        }
        let numel: usize = latent_shape.iter().product();
        let mut eps = Tensor::zeros(&[n, latent_shape[0], latent_shape[1], latent_shape[2]]);
        for (i, t) in items.iter().enumerate() {
            eps.data_mut()[i * numel..(i + 1) * numel].copy_from_slice(t.data());
        }
        Self { timesteps, eps }
    }
}

/// Builds a model batch from records. Edge maps are attached when
/// `with_edges` is set.
pub fn batch_from_records(bundle: &DenoiserBundle<f32>, records: &[&SliceRecord], with_edges: bool) -> Result<Batch<f32>> {
    let images: Vec<ArrayView2<'_, f32>> = records.iter().map(|r| r.image.view()).collect();
    let masks: Vec<ArrayView2<'_, bool>> = records.iter().map(|r| r.inpaint_mask.view()).collect();
    let prompts = records
        .iter()
        .map(|r| {
            r.prompt
                .as_ref()
                .map(|p| p.text.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("record {} has no prompt", r.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    let edges: Option<Vec<ArrayView2<'_, bool>>> = with_edges.then(|| records.iter().map(|r| r.edges.view()).collect());
    bundle.make_batch(&images, &masks, &prompts, edges.as_deref())
}

fn noisy_latents(bundle: &DenoiserBundle<f32>, z0: &Tensor<f32>, draw: &NoiseDraw) -> Tensor<f32> {
    let (n, c, h, w) = z0.dims4();
    let per = c * h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (i, &t) in draw.timesteps.iter().enumerate() {
        let ab = bundle.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let range = i * per..(i + 1) * per;
        for ((o, &z), &e) in out.data_mut()[range.clone()].iter_mut().zip(&z0.data()[range.clone()]).zip(&draw.eps.data()[range]) {
            *o = a * z + b * e;
        }
    }
    out
}

/// Masked loss on a batch for a given noise draw, with gradients when
/// `grad` is set.
pub fn batch_loss(bundle: &DenoiserBundle<f32>, batch: &Batch<f32>, draw: &NoiseDraw, grad: bool) -> Result<(f64, Option<Gradients<f32>>)> {
    let z_t = noisy_latents(bundle, &batch.z0, draw);
    let g = if grad { Graph::new() } else { Graph::inference() };
    let x = g.constant(z_t);
    let eps_hat = bundle.predict_noise(&g, &x, batch, &draw.timesteps)?;
    let loss = g.masked_mse(&eps_hat, &draw.eps, &batch.mask);
    let value = f64::from(loss.value().data()[0]);
    let grads = grad.then(|| g.backward(&loss));
    Ok((value, grads))
}

/// Mean masked loss over `records` with `draws` seeded noise draws per
/// record. No parameters change.
pub fn evaluate_loss(bundle: &DenoiserBundle<f32>, records: &[SliceRecord], draws: usize, seed: u64, with_edges: bool) -> Result<f64> {
    if records.is_empty() || draws == 0 {
        return Err(Error::Empty("loss evaluation set".into()));
    }
    let shape = [bundle.autoencoder().latent_channels(), bundle.config.latent_size(), bundle.config.latent_size()];
    let mut noise = rng(seed, 12);
    let mut total = 0.0;
    for _ in 0..draws {
        for chunk in records.chunks(8) {
            let refs: Vec<&SliceRecord> = chunk.iter().collect();
            let batch = batch_from_records(bundle, &refs, with_edges)?;
            let draw = NoiseDraw::sample(&mut noise, refs.len(), shape, bundle.schedule.steps());
            total += batch_loss(bundle, &batch, &draw, false)?.0 * refs.len() as f64;
        }
    }
    Ok(total / (draws * records.len()) as f64)
}

/// One optimizer step over `micro_batches` (each a list of records):
/// accumulates averaged gradients, clips, and applies AdamW. Returns the
/// mean loss and the pre-clip gradient norm.
pub fn training_step<R: Rng + ?Sized>(
    bundle: &mut DenoiserBundle<f32>,
    opt: &mut AdamW<f32>,
    micro_batches: &[Vec<&SliceRecord>],
    with_edges: bool,
    lr: f64,
    grad_clip: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if micro_batches.is_empty() {
        return Err(Error::Empty("training step without data".into()));
    }
    let shape = [bundle.autoencoder().latent_channels(), bundle.config.latent_size(), bundle.config.latent_size()];
    let mut total: Option<Gradients<f32>> = None;
    let mut loss_sum = 0.0;
    for records in micro_batches {
        let batch = batch_from_records(bundle, records, with_edges)?;
        let draw = NoiseDraw::sample(rng, records.len(), shape, bundle.schedule.steps());
        let (loss, grads) = batch_loss(bundle, &batch, &draw, true)?;
        if !loss.is_finite() {
            let ids: Vec<String> = records.iter().map(|r| r.id()).collect();
            return Err(Error::NonFinite(format!("loss {loss} on batch [{}] at timesteps {:?}", ids.join(", "), draw.timesteps)));
        }
        loss_sum += loss;
        let grads = grads.expect("recording graph");
        match total.as_mut() {
            Some(t) => t.accumulate(grads),
            None => total = Some(grads),
        }
    }
    let mut grads = total.expect("at least one micro-batch");
    grads.scale(1.0 / micro_batches.len() as f32);
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = clip_grad_norm(&mut grads, grad_clip);
    opt.step(&mut bundle.store, &grads, lr);
    Ok((loss_sum / micro_batches.len() as f64, norm))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One epoch in seeded-shuffled order, as optimizer steps of micro-batches.
fn epoch_groups<'a>(records: &'a [SliceRecord], cfg: &TrainConfig, order_rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<&'a SliceRecord>>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(order_rng);
    let micro: Vec<Vec<&SliceRecord>> = order.chunks(cfg.batch_size).map(|c| c.iter().map(|&i| &records[i]).collect()).collect();
    micro.chunks(cfg.grad_accum).map(<[_]>::to_vec).collect()
}

/// The loss `train` would log at step 0 (same batches and noise draws),
/// computed without updating anything.
pub fn first_step_loss(bundle: &DenoiserBundle<f32>, records: &[SliceRecord], cfg: &TrainConfig, with_edges: bool) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let shape = [bundle.autoencoder().latent_channels(), bundle.config.latent_size(), bundle.config.latent_size()];
    let mut noise_rng = rng(cfg.seed, 11);
    let groups = epoch_groups(records, cfg, &mut rng(cfg.seed, 10));
    let group = &groups[0];
    let mut total = 0.0;
    for micro in group {
        let batch = batch_from_records(bundle, micro, with_edges)?;
        let draw = NoiseDraw::sample(&mut noise_rng, micro.len(), shape, bundle.schedule.steps());
        total += batch_loss(bundle, &batch, &draw, false)?.0;
    }
    Ok(total / group.len() as f64)
}

/// Runs `cfg.epochs` passes over `records` with the bundle's current freeze
/// flags. `on_step` receives every log line.
pub fn train(
    bundle: &mut DenoiserBundle<f32>,
    records: &[SliceRecord],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary> {
    let problems = cfg.problems("train");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if records.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let s = bundle.config.image_size;
    if let Some(r) = records.iter().find(|r| r.dim() != (s, s)) {
        return Err(Error::DimensionMismatch { what: "slice vs model resolution", left: vec![r.dim().0, r.dim().1], right: vec![s, s] });
    }
    let with_edges = cfg.stage == Stage::Stage2;
    let total = cfg.total_steps(records.len());
    lr_multiplier(0, total, cfg.warmup_steps)?;
    let mut opt = AdamW::new(AdamWConfig { beta1: cfg.betas.0, beta2: cfg.betas.1, eps: 1e-8, weight_decay: cfg.weight_decay });
    let mut order_rng = rng(cfg.seed, 10);
    let mut noise_rng = rng(cfg.seed, 11);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for group in epoch_groups(records, cfg, &mut order_rng) {
            let lr = cfg.lr * lr_multiplier(step, total, cfg.warmup_steps)?;
            let (loss, grad_norm) = training_step(bundle, &mut opt, &group, with_edges, lr, cfg.grad_clip, &mut noise_rng)?;
            let entry = StepLog { step, epoch, lr, loss, grad_norm };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
    }
    let window = log.len().min(20);
    let final_loss = log[log.len() - window..].iter().map(|l| l.loss).sum::<f64>() / window as f64;
    Ok(TrainSummary { stage: cfg.stage, steps: step, first_loss: log[0].loss, final_loss, log })
}

/// Fresh denoiser trained on inpainting with the control branch absent.
pub fn train_stage1(
    records: &[SliceRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(DenoiserBundle<f32>, TrainSummary)> {
    if cfg.stage != Stage::Stage1 {
        return Err(Error::StageMismatch { expected: Stage::Stage1.to_string(), found: cfg.stage.to_string() });
    }
    let mut bundle = DenoiserBundle::new(model)?;
    bundle.apply_freeze(FreezeFlags::stage1());
    let summary = train(&mut bundle, records, cfg, on_step)?;
    Ok((bundle, summary))
}

/// Attaches a control branch copied from the stage-1 backbone and trains
/// only the branch.
pub fn train_stage2(
    records: &[SliceRecord],
    mut bundle: DenoiserBundle<f32>,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(DenoiserBundle<f32>, TrainSummary)> {
    if cfg.stage != Stage::Stage2 {
        return Err(Error::StageMismatch { expected: Stage::Stage2.to_string(), found: cfg.stage.to_string() });
    }
    if bundle.control.is_some() {
        return Err(Error::StageMismatch { expected: Stage::Stage1.to_string(), found: Stage::Stage2.to_string() });
    }
    bundle.attach_control()?;
    bundle.apply_freeze(FreezeFlags::stage2());
    let summary = train(&mut bundle, records, cfg, on_step)?;
    Ok((bundle, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_multiplier_examples() {
        assert_eq!(lr_multiplier(500, 2000, 500).unwrap(), 1.0);
        assert!(lr_multiplier(2000, 2000, 500).unwrap().abs() < 1e-15);
        assert!((lr_multiplier(1250, 2000, 500).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(lr_multiplier(0, 100, 0).unwrap(), 1.0);
        assert_eq!(lr_multiplier(5, 100, 10).unwrap(), 0.5);
        assert!(lr_multiplier(0, 10, 10).is_err());
    }

    #[test]
    fn paper_presets() {
        let (a, b) = (TrainConfig::paper_stage1(), TrainConfig::paper_stage2());
        assert_eq!(a.effective_batch(), 32);
        assert_eq!((a.epochs, b.epochs, a.warmup_steps, b.warmup_steps), (30, 20, 0, 500));
        assert_eq!((a.lr, b.lr), (5e-5, 5e-4));
        assert!(a.problems("s1").is_empty() && b.problems("s2").is_empty());
    }
}
