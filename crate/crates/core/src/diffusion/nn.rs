//! Layers shared by the denoiser and the control branch. Each layer owns
//! the ids of its parameters in a [`ParamStore`].

use phs_tensor::init::{fan_in_uniform, ones, zeros};
use phs_tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.insert(format!("{name}.weight"), fan_in_uniform(&[cout, cin, k, k], fan_in, rng));
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(&[cout], fan_in, rng));
        Self { weight, bias, stride, pad: k / 2 }
    }

    /// 1×1 projection with weight and bias exactly zero.
    pub fn zero<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), zeros(&[cout, cin, 1, 1]));
        let bias = store.insert(format!("{name}.bias"), zeros(&[cout]));
        Self { weight, bias, stride: 1, pad: 0 }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Var<T> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.insert(format!("{name}.weight"), fan_in_uniform(&[dout, din], din, rng));
        let bias = store.insert(format!("{name}.bias"), fan_in_uniform(&[dout], din, rng));
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Var<T> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, &w, Some(&b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{name}: {channels} channels not divisible by {groups} groups");
        let gamma = store.insert(format!("{name}.weight"), ones(&[channels]));
        let beta = store.insert(format!("{name}.bias"), zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>) -> Var<T> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, self.groups, &gamma, &beta, GN_EPS)
    }
}

/// GN → SiLU → conv → +time → GN → SiLU → conv, with a 1×1 shortcut when
/// the channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Linear::new(store, &format!("{name}.time_emb_proj"), temb, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            shortcut: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.conv_shortcut"), cin, cout, 1, 1, rng)),
        }
    }

    /// `temb_act` is `silu(time embedding)`, shape `[n, temb]`.
    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>, temb_act: &Var<T>) -> Var<T> {
        let h = g.silu(&self.norm1.forward(g, store, x));
        let h = self.conv1.forward(g, store, &h);
        let h = g.add_channel_bias(&h, &self.time.forward(g, store, temb_act));
        let h = g.silu(&self.norm2.forward(g, store, &h));
        let h = self.conv2.forward(g, store, &h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x),
            None => x.clone(),
        };
        g.add(&skip, &h)
    }
}

/// Pre-norm residual cross-attention from image tokens to text tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        context_dim: usize,
        heads: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(channels % heads == 0, "{name}: {channels} channels not divisible by {heads} heads");
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            q: Linear::new(store, &format!("{name}.to_q"), channels, channels, rng),
            k: Linear::new(store, &format!("{name}.to_k"), context_dim, channels, rng),
            v: Linear::new(store, &format!("{name}.to_v"), context_dim, channels, rng),
            out: Linear::new(store, &format!("{name}.to_out"), channels, channels, rng),
            heads,
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &Var<T>, context: &Var<T>) -> Var<T> {
        let (_, _, h, w) = x.value().dims4();
        let tokens = g.to_tokens(&self.norm.forward(g, store, x));
        let q = self.q.forward(g, store, &tokens);
        let k = self.k.forward(g, store, context);
        let v = self.v.forward(g, store, context);
        let a = g.attention(&q, &k, &v, self.heads);
        let o = self.out.forward(g, store, &a);
        g.add(x, &g.from_tokens(&o, h, w))
    }
}

/// Sinusoidal timestep features `[cos(t f_i) .., sin(t f_i) ..]`, shape `[n, dim]`.
pub fn timestep_features<T: Float>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[timesteps.len(), dim]);
    let d = out.data_mut();
    for (i, &t) in timesteps.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            d[i * dim + k] = T::lit(a.cos());
            d[i * dim + half + k] = T::lit(a.sin());
        }
    }
    out
}
