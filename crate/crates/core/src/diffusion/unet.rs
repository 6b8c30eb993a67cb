use phs_tensor::{Float, Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{timestep_features, Conv2d, CrossAttention, GroupNorm, Linear, ResBlock};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub groups: usize,
    pub temb_dim: usize,
    pub context_dim: usize,
    pub heads: usize,
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Skip connections handed from encoder to decoder.
    pub fn num_skips(&self) -> usize {
        2 * self.levels()
    }

    /// Channel count of each skip, in push order.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut out = vec![self.base_channels];
        for l in 0..self.levels() {
            out.push(self.channels(l));
            if l + 1 < self.levels() {
                out.push(self.channels(l));
            }
        }
        out
    }

    pub fn mid_channels(&self) -> usize {
        self.channels(self.levels() - 1)
    }

    /// Spatial size must halve cleanly at every level.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Activations an encoder produces: skips in push order, the middle block
/// output, and the activated time embedding.
pub struct EncoderOut<T> {
    pub skips: Vec<Var<T>>,
    pub mid: Var<T>,
    pub temb_act: Var<T>,
}

#[derive(Clone, Debug)]
struct EncLevel {
    res: ResBlock,
    down: Option<Conv2d>,
}

/// Input convolution, time embedding, down path and middle block. The
/// denoiser owns one under `unet.` and the control branch a copy under
/// `control.`.
#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    levels: Vec<EncLevel>,
    mid_res: ResBlock,
    mid_attn: CrossAttention,
    base: usize,
}

/// Parameter-name suffixes (after the `unet.`/`control.` prefix) that make
/// up the encoder.
pub const ENCODER_PARTS: [&str; 4] = ["conv_in.", "time_embedding.", "down.", "mid."];

impl Encoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &UNetConfig, rng: &mut R) -> Self {
        let c0 = cfg.base_channels;
        let conv_in = Conv2d::new(store, &format!("{prefix}conv_in"), cfg.in_channels, c0, 3, 1, rng);
        let time1 = Linear::new(store, &format!("{prefix}time_embedding.linear_1"), c0, cfg.temb_dim, rng);
        let time2 = Linear::new(store, &format!("{prefix}time_embedding.linear_2"), cfg.temb_dim, cfg.temb_dim, rng);
        let mut levels = Vec::new();
        let mut prev = c0;
        for l in 0..cfg.levels() {
            let c = cfg.channels(l);
            let res = ResBlock::new(store, &format!("{prefix}down.{l}.res"), prev, c, cfg.temb_dim, cfg.groups, rng);
            let down = (l + 1 < cfg.levels()).then(|| Conv2d::new(store, &format!("{prefix}down.{l}.downsample"), c, c, 3, 2, rng));
            levels.push(EncLevel { res, down });
            prev = c;
        }
        let cm = cfg.mid_channels();
        let mid_res = ResBlock::new(store, &format!("{prefix}mid.res"), cm, cm, cfg.temb_dim, cfg.groups, rng);
        let mid_attn = CrossAttention::new(store, &format!("{prefix}mid.attn"), cm, cfg.context_dim, cfg.heads, cfg.groups, rng);
        Self { conv_in, time1, time2, levels, mid_res, mid_attn, base: c0 }
    }

    /// `hint`, when given, is added to the `conv_in` output.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        timesteps: &[usize],
        context: &Var<T>,
        hint: Option<&Var<T>>,
    ) -> EncoderOut<T> {
        let tfeat = g.constant(timestep_features(timesteps, self.base));
        let temb = self.time2.forward(g, store, &g.silu(&self.time1.forward(g, store, &tfeat)));
        let temb_act = g.silu(&temb);
        let mut h = self.conv_in.forward(g, store, x);
        if let Some(hint) = hint {
            h = g.add(&h, hint);
        }
        let mut skips = vec![h.clone()];
        for lvl in &self.levels {
            h = lvl.res.forward(g, store, &h, &temb_act);
            skips.push(h.clone());
            if let Some(down) = &lvl.down {
                h = down.forward(g, store, &h);
                skips.push(h.clone());
            }
        }
        let h = self.mid_res.forward(g, store, &h, &temb_act);
        let mid = self.mid_attn.forward(g, store, &h, context);
        EncoderOut { skips, mid, temb_act }
    }
}

#[derive(Clone, Debug)]
struct DecLevel {
    res: Vec<ResBlock>,
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    levels: Vec<DecLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &UNetConfig, rng: &mut R) -> Self {
        let mut skip_ch = cfg.skip_channels();
        let mut prev = cfg.mid_channels();
        let mut levels = Vec::new();
        for l in (0..cfg.levels()).rev() {
            let c = cfg.channels(l);
            let mut res = Vec::new();
            for i in 0..2 {
                let s = skip_ch.pop().expect("two skips per level");
                res.push(ResBlock::new(store, &format!("{prefix}up.{l}.res.{i}"), prev + s, c, cfg.temb_dim, cfg.groups, rng));
                prev = c;
            }
            let up = (l > 0).then(|| Conv2d::new(store, &format!("{prefix}up.{l}.upsample"), c, c, 3, 1, rng));
            levels.push(DecLevel { res, up });
        }
        let c0 = cfg.channels(0);
        Self {
            levels,
            norm_out: GroupNorm::new(store, &format!("{prefix}norm_out"), c0, cfg.groups),
            conv_out: Conv2d::new(store, &format!("{prefix}conv_out"), c0, cfg.out_channels, 3, 1, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, enc: EncoderOut<T>) -> Var<T> {
        let EncoderOut { mut skips, mid, temb_act } = enc;
        let mut h = mid;
        for lvl in &self.levels {
            for res in &lvl.res {
                let s = skips.pop().expect("skip count matches decoder");
                h = res.forward(g, store, &g.concat_channels(&h, &s), &temb_act);
            }
            if let Some(up) = &lvl.up {
                h = up.forward(g, store, &g.upsample2x(&h));
            }
        }
        let h = g.silu(&self.norm_out.forward(g, store, &h));
        self.conv_out.forward(g, store, &h)
    }
}

/// Residual features from a control branch, one per skip plus the middle.
pub struct ControlFeatures<T> {
    pub skips: Vec<Var<T>>,
    pub mid: Var<T>,
}

/// Adds control features to the decoder inputs.
///
/// # Panics
/// If the feature count or any shape disagrees with the injection sites.
pub fn inject<T: Float>(g: &Graph<T>, enc: EncoderOut<T>, features: &ControlFeatures<T>) -> EncoderOut<T> {
    assert_eq!(enc.skips.len(), features.skips.len(), "one control feature per skip");
    let skips = enc
        .skips
        .iter()
        .zip(&features.skips)
        .map(|(s, f)| {
            assert_eq!(s.shape(), f.shape(), "control feature shape");
            g.add(s, f)
        })
        .collect();
    assert_eq!(enc.mid.shape(), features.mid.shape(), "control mid feature shape");
    EncoderOut { skips, mid: g.add(&enc.mid, &features.mid), temb_act: enc.temb_act }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl UNet {
    pub const PREFIX: &'static str = "unet.";

    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &UNetConfig, rng: &mut R) -> Self {
        let encoder = Encoder::new(store, Self::PREFIX, cfg, rng);
        let decoder = Decoder::new(store, Self::PREFIX, cfg, rng);
        Self { config: cfg.clone(), encoder, decoder }
    }

    /// `x: [n, in, h, w]`, `context: [n, tokens, context_dim]`.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        timesteps: &[usize],
        context: &Var<T>,
        control: Option<&ControlFeatures<T>>,
    ) -> Var<T> {
        let enc = self.encoder.forward(g, store, x, timesteps, context, None);
        let enc = match control {
            Some(f) => inject(g, enc, f),
            None => enc,
        };
        self.decoder.forward(g, store, enc)
    }
}
