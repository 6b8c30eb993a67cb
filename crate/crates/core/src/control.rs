//! Trainable encoder copy that reads an edge map and feeds the frozen
//! decoder through zero-initialized 1×1 projections.

use phs_tensor::{Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::diffusion::nn::Conv2d;
use crate::diffusion::unet::{ControlFeatures, Encoder, UNet, UNetConfig, ENCODER_PARTS};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ControlBranch {
    pub encoder: Encoder,
    adapter: Vec<Conv2d>,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
}

impl ControlBranch {
    pub const PREFIX: &'static str = "control.";

    /// Builds the branch and deep-copies the backbone's encoder and middle
    /// block parameters into it. `factor` is the autoencoder downscale, which
    /// the edge adapter's strides must reproduce.
    pub fn init_from_backbone<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &UNetConfig,
        factor: usize,
        adapter_channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if store.id(&format!("{}conv_in.weight", UNet::PREFIX)).is_none() {
            return Err(Error::InvalidArgument("no backbone denoiser in the parameter store".into()));
        }
        if store.id(&format!("{}conv_in.weight", Self::PREFIX)).is_some() {
            return Err(Error::InvalidArgument("a control branch is already attached".into()));
        }
        if !factor.is_power_of_two() || factor > 1 << adapter_channels.len() {
            return Err(Error::InvalidArgument(format!(
                "edge adapter with {} layers cannot reach latent factor {factor}",
                adapter_channels.len() + 1
            )));
        }
        let encoder = Encoder::new(store, Self::PREFIX, cfg, rng);
        let names: Vec<(String, String)> = store
            .iter()
            .filter_map(|(_, e)| {
                let suffix = e.name.strip_prefix(Self::PREFIX)?;
                ENCODER_PARTS
                    .iter()
                    .any(|p| suffix.starts_with(p))
                    .then(|| (e.name.clone(), format!("{}{suffix}", UNet::PREFIX)))
            })
            .collect();
        for (dst, src) in names {
            let src_id = store.id(&src).ok_or_else(|| Error::Checkpoint(format!("backbone lacks {src}")))?;
            let dst_id = store.id(&dst).expect("just inserted");
            let value = store.get(src_id).clone();
            if value.shape() != store.get(dst_id).shape() {
                return Err(Error::Checkpoint(format!("architecture mismatch at {dst}")));
            }
            *store.get_mut(dst_id) = (*value).clone();
        }

        let mut strides = vec![1usize; adapter_channels.len() + 1];
        for s in strides.iter_mut().take(factor.trailing_zeros() as usize) {
            *s = 2;
        }
        let mut adapter = Vec::new();
        let mut prev = 1;
        for (i, &c) in adapter_channels.iter().enumerate() {
            adapter.push(Conv2d::new(store, &format!("{}edge_adapter.{i}", Self::PREFIX), prev, c, 3, strides[i], rng));
            prev = c;
        }
        let last = adapter_channels.len();
        let out = Conv2d::new(store, &format!("{}edge_adapter.{last}", Self::PREFIX), prev, cfg.base_channels, 3, strides[last], rng);
        for id in [out.weight, out.bias] {
            store.get_mut(id).data_mut().fill(T::zero());
        }
        adapter.push(out);

        let zero_skips = cfg
            .skip_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::zero(store, &format!("{}zero_convs.{i}", Self::PREFIX), c, c))
            .collect();
        let cm = cfg.mid_channels();
        let zero_mid = Conv2d::zero(store, &format!("{}zero_mid", Self::PREFIX), cm, cm);
        Ok(Self { encoder, adapter, zero_skips, zero_mid })
    }

    pub fn num_sites(&self) -> usize {
        self.zero_skips.len() + 1
    }

    /// Edge map `[n, 1, H, W]` in pixel space → adapter features at latent
    /// resolution with `base_channels` channels.
    pub fn adapt<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, edges: &Var<T>) -> Var<T> {
        let mut h = edges.clone();
        for (i, conv) in self.adapter.iter().enumerate() {
            h = conv.forward(g, store, &h);
            if i + 1 < self.adapter.len() {
                h = g.silu(&h);
            }
        }
        h
    }

    /// One feature per decoder skip plus one for the middle block.
    pub fn features<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        timesteps: &[usize],
        context: &Var<T>,
        edges: &Tensor<T>,
    ) -> ControlFeatures<T> {
        let hint = self.adapt(g, store, &g.constant(edges.clone()));
        let enc = self.encoder.forward(g, store, x, timesteps, context, Some(&hint));
        let skips = enc.skips.iter().zip(&self.zero_skips).map(|(s, z)| z.forward(g, store, s)).collect();
        let mid = self.zero_mid.forward(g, store, &enc.mid);
        ControlFeatures { skips, mid }
    }
}
