use log::warn;
use ndarray::{Array2, ArrayView2};
use phs_tensor::{Float, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autoencoder::Autoencoder;
use super::schedule::{downsample_mask, make_schedule, NoiseSchedule, ScheduleKind};
use super::text::{DeskTextEncoder, TextEncoderConfig};
use super::unet::{UNet, UNetConfig};
use crate::control::ControlBranch;
use crate::edge::EdgeMap;
use crate::error::{Error, Result};
use crate::prompt::{DeskTokenizer, TokenSequence, Tokenizer, MAX_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub autoencoder: Autoencoder,
    pub text_encoder: TextEncoderConfig,
    /// Prompt length in tokens after truncation and padding.
    pub max_tokens: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub groups: usize,
    pub temb_dim: usize,
    pub heads: usize,
    pub adapter_channels: Vec<usize>,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            autoencoder: Autoencoder::Identity { channels: 1 },
            text_encoder: TextEncoderConfig::Desk { dim: 64 },
            max_tokens: MAX_TOKENS,
            base_channels: 32,
            channel_mult: vec![1, 2],
            groups: 8,
            temb_dim: 128,
            heads: 4,
            adapter_channels: vec![16, 32],
            timesteps: 1000,
            schedule: ScheduleKind::LinearBeta,
            init_seed: 0,
        }
    }

    /// Stable Diffusion 1.5 compatible shapes. Needs pretrained weights,
    /// which are not shipped.
    pub fn paper() -> Self {
        Self {
            image_size: 512,
            autoencoder: Autoencoder::Pretrained {
                factor: 8,
                image_channels: 3,
                latent_channels: 4,
                weights: "stable-diffusion-v1-5/vae".into(),
            },
            text_encoder: TextEncoderConfig::Pretrained { dim: 768, weights: "openai/clip-vit-large-patch14".into() },
            max_tokens: MAX_TOKENS,
            base_channels: 320,
            channel_mult: vec![1, 2, 4, 4],
            groups: 32,
            temb_dim: 1280,
            heads: 8,
            adapter_channels: vec![16, 32, 96],
            timesteps: 1000,
            schedule: ScheduleKind::LinearBeta,
            init_seed: 0,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.autoencoder.factor()
    }

    pub fn unet(&self) -> UNetConfig {
        let lc = self.autoencoder.latent_channels();
        UNetConfig {
            in_channels: 2 * lc + 1,
            out_channels: lc,
            base_channels: self.base_channels,
            channel_mult: self.channel_mult.clone(),
            groups: self.groups,
            temb_dim: self.temb_dim,
            context_dim: self.text_encoder.dim(),
            heads: self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens != MAX_TOKENS {
            return Err(Error::InvalidArgument(format!("only {MAX_TOKENS}-token prompts are supported, got {}", self.max_tokens)));
        }
        self.autoencoder.validate()?;
        if let TextEncoderConfig::Pretrained { weights, .. } = &self.text_encoder {
            return Err(Error::MissingArtifact(format!("pretrained text encoder '{weights}' is not bundled")));
        }
        let u = self.unet();
        let f = self.autoencoder.factor();
        if self.channel_mult.is_empty() || self.image_size % f != 0 || self.latent_size() % u.size_divisor() != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} incompatible with factor {f} and {} levels",
                self.image_size,
                self.channel_mult.len()
            )));
        }
        let mut chans = u.skip_channels();
        chans.push(u.mid_channels());
        if chans.iter().any(|c| c % self.groups != 0) || u.mid_channels() % self.heads != 0 {
            return Err(Error::InvalidArgument("channel counts must divide by groups and heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeFlags {
    pub autoencoder: bool,
    pub text_encoder: bool,
    pub unet: bool,
    pub control: bool,
}

impl FreezeFlags {
    pub fn stage1() -> Self {
        Self { autoencoder: true, text_encoder: true, unet: false, control: true }
    }

    pub fn stage2() -> Self {
        Self { autoencoder: true, text_encoder: true, unet: true, control: false }
    }
}

/// Per-item conditioning for one step.
#[derive(Clone, Debug)]
pub struct ConditioningPack {
    pub tokens: TokenSequence,
    pub timestep: usize,
    pub latent_mask: Array2<bool>,
    pub edge_map: Option<EdgeMap>,
}

/// Model-ready tensors for a batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Clean latents `[n, lc, h, w]`.
    pub z0: Tensor<T>,
    /// Latents of the images with the inpaint region zeroed.
    pub masked: Tensor<T>,
    /// Latent masks `[n, 1, h, w]`, 1 inside the inpaint region.
    pub mask: Tensor<T>,
    pub context: Tensor<T>,
    /// Pixel-space edge maps `[n, 1, H, W]`.
    pub edges: Option<Tensor<T>>,
    pub tokens: Vec<TokenSequence>,
}

pub struct DenoiserBundle<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub unet: UNet,
    pub control: Option<ControlBranch>,
    pub text: DeskTextEncoder,
    pub tokenizer: DeskTokenizer,
    pub schedule: NoiseSchedule,
    pub freeze: FreezeFlags,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<T: Float> DenoiserBundle<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = DeskTokenizer::new();
        let mut store = ParamStore::new();
        let text = DeskTextEncoder::new(&mut store, &tokenizer, config.text_encoder.dim(), &mut rng_for(config.init_seed, 1));
        let unet = UNet::new(&mut store, &config.unet(), &mut rng_for(config.init_seed, 2));
        let schedule = make_schedule(config.timesteps, config.schedule)?;
        let mut b = Self {
            config: config.clone(),
            store,
            unet,
            control: None,
            text,
            tokenizer,
            schedule,
            freeze: FreezeFlags::stage1(),
        };
        b.apply_freeze(FreezeFlags::stage1());
        Ok(b)
    }

    /// Copies the current denoiser's encoder into a new control branch.
    pub fn attach_control(&mut self) -> Result<()> {
        let branch = ControlBranch::init_from_backbone(
            &mut self.store,
            &self.config.unet(),
            self.config.autoencoder.factor(),
            &self.config.adapter_channels,
            &mut rng_for(self.config.init_seed, 3),
        )?;
        self.control = Some(branch);
        self.apply_freeze(self.freeze);
        Ok(())
    }

    pub fn apply_freeze(&mut self, flags: FreezeFlags) {
        self.store.set_frozen_prefix(DeskTextEncoder::PREFIX, flags.text_encoder);
        self.store.set_frozen_prefix(UNet::PREFIX, flags.unet);
        self.store.set_frozen_prefix(ControlBranch::PREFIX, flags.control);
        self.freeze = flags;
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.config.autoencoder
    }

    /// Pixel images `[n, 1, H, W]` → latents.
    pub fn encode_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let ae = self.autoencoder();
        ae.encode(&ae.replicate_channels(images))
    }

    /// Latents → single-channel images (channel mean when the decoder
    /// produces replicated channels).
    pub fn decode_latents(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.autoencoder().decode(z)?;
        let (n, c, h, w) = x.dims4();
        if c == 1 {
            return Ok(x);
        }
        let plane = h * w;
        let inv = T::lit(1.0 / c as f64);
        Ok(Tensor::from_fn(&[n, 1, h, w], |i| {
            let (b, p) = (i / plane, i % plane);
            (0..c).map(|k| x.data()[(b * c + k) * plane + p]).sum::<T>() * inv
        }))
    }

    /// Assembles a batch from pixel-space slices, pixel inpaint masks and
    /// prompts. Masked pixels are zeroed before encoding.
    pub fn make_batch(
        &self,
        images: &[ArrayView2<'_, f32>],
        masks: &[ArrayView2<'_, bool>],
        prompts: &[&str],
        edges: Option<&[ArrayView2<'_, bool>]>,
    ) -> Result<Batch<T>> {
        let n = images.len();
        if masks.len() != n || prompts.len() != n || edges.is_some_and(|e| e.len() != n) {
            return Err(Error::InvalidArgument("batch components differ in length".into()));
        }
        if n == 0 {
            return Err(Error::Empty("batch".into()));
        }
        let s = self.config.image_size;
        for (im, m) in images.iter().zip(masks) {
            if im.dim() != (s, s) || m.dim() != (s, s) {
                return Err(Error::DimensionMismatch {
                    what: "slice vs model resolution",
                    left: vec![im.nrows(), im.ncols()],
                    right: vec![s, s],
                });
            }
        }
        let plane = s * s;
        let img = Tensor::from_fn(&[n, 1, s, s], |i| T::lit(f64::from(images[i / plane][[(i % plane) / s, i % s]])));
        let masked_img = Tensor::from_fn(&[n, 1, s, s], |i| {
            let (b, r, c) = (i / plane, (i % plane) / s, i % s);
            if masks[b][[r, c]] {
                T::zero()
            } else {
                T::lit(f64::from(images[b][[r, c]]))
            }
        });
        let f = self.autoencoder().factor();
        let l = s / f;
        let lmasks = masks.iter().map(|m| downsample_mask(*m, f)).collect::<Result<Vec<_>>>()?;
        let mask = Tensor::from_fn(&[n, 1, l, l], |i| {
            let (b, p) = (i / (l * l), i % (l * l));
            if lmasks[b][[p / l, p % l]] {
                T::one()
            } else {
                T::zero()
            }
        });
        let tokens = prompts.iter().map(|p| self.tokenizer.tokenize(p)).collect::<Result<Vec<_>>>()?;
        let context = self.text.encode(&self.store, &tokens)?;
        let edges = edges.map(|e| {
            Tensor::from_fn(&[n, 1, s, s], |i| {
                if e[i / plane][[(i % plane) / s, i % s]] {
                    T::one()
                } else {
                    T::zero()
                }
            })
        });
        Ok(Batch { z0: self.encode_images(&img)?, masked: self.encode_images(&masked_img)?, mask, context, edges, tokens })
    }

    /// Noise estimate for `z_t`. Edge maps in the batch require an attached
    /// control branch; without edge maps the branch is bypassed.
    pub fn predict_noise(&self, g: &Graph<T>, z_t: &Var<T>, batch: &Batch<T>, timesteps: &[usize]) -> Result<Var<T>> {
        if z_t.shape() != batch.z0.shape() {
            return Err(Error::DimensionMismatch {
                what: "z_t vs batch latents",
                left: z_t.shape().to_vec(),
                right: batch.z0.shape().to_vec(),
            });
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t < 1 || t > self.schedule.steps()) {
            return Err(Error::Range(format!("timestep {t} outside [1, {}]", self.schedule.steps())));
        }
        let cond = g.concat_channels(&g.constant(batch.mask.clone()), &g.constant(batch.masked.clone()));
        let x = g.concat_channels(z_t, &cond);
        let context = g.constant(batch.context.clone());
        let features = match (&batch.edges, &self.control) {
            (Some(e), Some(c)) => Some(c.features(g, &self.store, &x, timesteps, &context, e)),
            (Some(_), None) => {
                return Err(Error::InvalidArgument("edge map supplied but no control branch is attached".into()))
            }
            (None, _) => None,
        };
        Ok(self.unet.forward(g, &self.store, &x, timesteps, &context, features.as_ref()))
    }
}

/// Mean squared error over masked cells (all channels), averaged over the
/// batch. Items with an empty mask contribute 0.
pub fn masked_mse(eps: &Tensor<f32>, eps_hat: &Tensor<f32>, latent_mask: &Tensor<f32>) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::DimensionMismatch { what: "eps vs eps_hat", left: eps.shape().to_vec(), right: eps_hat.shape().to_vec() });
    }
    let (n, c, h, w) = eps.dims4();
    if latent_mask.shape() != [n, 1, h, w] {
        return Err(Error::DimensionMismatch {
            what: "latent mask",
            left: latent_mask.shape().to_vec(),
            right: vec![n, 1, h, w],
        });
    }
    let plane = h * w;
    let mut total = 0.0;
    for b in 0..n {
        let m = &latent_mask.data()[b * plane..(b + 1) * plane];
        let cells = m.iter().filter(|&&v| v > 0.5).count();
        if cells == 0 {
            warn!("empty latent mask for batch item {b}; it contributes zero loss");
            continue;
        }
        let mut acc = 0.0;
        for k in 0..c {
            let off = (b * c + k) * plane;
            for p in (0..plane).filter(|&p| m[p] > 0.5) {
                let d = f64::from(eps_hat.data()[off + p]) - f64::from(eps.data()[off + p]);
                acc += d * d;
            }
        }
        total += acc / (cells * c) as f64;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_mse_by_hand() {
        let eps = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let mut hat = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        hat.data_mut()[0] = 0.5;
        hat.data_mut()[3] = 9.0;
        let mask = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(masked_mse(&eps, &hat, &mask).unwrap(), 0.25);
        assert_eq!(masked_mse(&eps, &eps, &mask).unwrap(), 0.0);
    }

    #[test]
    fn desk_bundle_shapes() {
        let b = DenoiserBundle::<f32>::new(&ModelConfig::desk()).unwrap();
        let img = Array2::<f32>::zeros((64, 64));
        let mask = Array2::from_shape_fn((64, 64), |(r, c)| r > 20 && r < 30 && c > 10 && c < 20);
        let batch = b.make_batch(&[img.view()], &[mask.view()], &["T1CE MRI of a unknown age healthy individual."], None).unwrap();
        let g = Graph::inference();
        let z = g.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let out = b.predict_noise(&g, &z, &batch, &[500]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
    }
}
