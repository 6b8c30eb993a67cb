use phs_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image ↔ latent mapping. Images are `[n, image_channels, H, W]`, latents
/// `[n, latent_channels, H/f, W/f]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Autoencoder {
    /// Pixel-space diffusion.
    Identity { channels: usize },
    /// Weight-free stand-in for a downsampling VAE: average pooling down,
    /// nearest upsampling back.
    AvgPool { factor: usize, image_channels: usize, latent_channels: usize },
    /// A pretrained VAE loaded from disk (declared, not bundled).
    Pretrained { factor: usize, image_channels: usize, latent_channels: usize, weights: String },
}

impl Autoencoder {
    pub fn factor(&self) -> usize {
        match self {
            Autoencoder::Identity { .. } => 1,
            Autoencoder::AvgPool { factor, .. } | Autoencoder::Pretrained { factor, .. } => *factor,
        }
    }

    pub fn image_channels(&self) -> usize {
        match self {
            Autoencoder::Identity { channels } => *channels,
            Autoencoder::AvgPool { image_channels, .. } | Autoencoder::Pretrained { image_channels, .. } => *image_channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Autoencoder::Identity { channels } => *channels,
            Autoencoder::AvgPool { latent_channels, .. } | Autoencoder::Pretrained { latent_channels, .. } => {
                *latent_channels
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Autoencoder::Pretrained { weights, .. } => Err(Error::MissingArtifact(format!(
                "pretrained autoencoder weights '{weights}' are not bundled; use the identity or avg_pool autoencoder"
            ))),
            _ if self.factor() == 0 || self.image_channels() == 0 || self.latent_channels() == 0 => {
                Err(Error::InvalidArgument("autoencoder sizes must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Replicates a single-channel slice batch to the channel count the
    /// encoder expects.
    pub fn replicate_channels<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let want = self.image_channels();
        if c == want {
            return x.clone();
        }
        assert_eq!(c, 1, "only single-channel inputs are replicated");
        let plane = h * w;
        Tensor::from_fn(&[n, want, h, w], |i| x.data()[(i / (want * plane)) * plane + i % plane])
    }

    pub fn encode<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let (n, c, h, w) = x.dims4();
        if c != self.image_channels() {
            return Err(Error::InvalidArgument(format!("encoder expects {} channels, got {c}", self.image_channels())));
        }
        let f = self.factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidArgument(format!("image {h}x{w} not divisible by factor {f}")));
        }
        if let Autoencoder::Identity { .. } = self {
            return Ok(x.clone());
        }
        let (lh, lw, lc) = (h / f, w / f, self.latent_channels());
        let inv = T::lit(1.0 / (f * f) as f64);
        let xs = x.data();
        Ok(Tensor::from_fn(&[n, lc, lh, lw], |i| {
            let (b, k, r, col) = (i / (lc * lh * lw), (i / (lh * lw)) % lc, (i / lw) % lh, i % lw);
            let src = &xs[(b * c + k % c) * h * w..];
            let mut acc = T::zero();
            for dy in 0..f {
                for dx in 0..f {
                    acc += src[(r * f + dy) * w + col * f + dx];
                }
            }
            acc * inv
        }))
    }

    pub fn decode<T: Float>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let (n, lc, lh, lw) = z.dims4();
        if lc != self.latent_channels() {
            return Err(Error::InvalidArgument(format!("decoder expects {} channels, got {lc}", self.latent_channels())));
        }
        if let Autoencoder::Identity { .. } = self {
            return Ok(z.clone());
        }
        let (f, c) = (self.factor(), self.image_channels());
        let (h, w) = (lh * f, lw * f);
        let zs = z.data();
        Ok(Tensor::from_fn(&[n, c, h, w], |i| {
            let (b, k, r, col) = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
            zs[((b * lc + k % lc) * lh + r / f) * lw + col / f]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_dims() {
        let ae = Autoencoder::AvgPool { factor: 8, image_channels: 3, latent_channels: 4 };
        let x = Tensor::<f32>::from_fn(&[2, 1, 16, 24], |i| i as f32);
        let x3 = ae.replicate_channels(&x);
        assert_eq!(x3.shape(), &[2, 3, 16, 24]);
        let z = ae.encode(&x3).unwrap();
        assert_eq!(z.shape(), &[2, 4, 2, 3]);
        assert_eq!(ae.decode(&z).unwrap().shape(), &[2, 3, 16, 24]);
        let id = Autoencoder::Identity { channels: 1 };
        assert_eq!(id.decode(&id.encode(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn pretrained_is_declared_only() {
        let ae = Autoencoder::Pretrained { factor: 8, image_channels: 3, latent_channels: 4, weights: "vae".into() };
        assert!(matches!(ae.encode(&Tensor::<f32>::zeros(&[1, 3, 8, 8])), Err(Error::MissingArtifact(_))));
    }
}
