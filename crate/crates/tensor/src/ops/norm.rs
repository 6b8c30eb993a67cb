use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

use super::tracked;

impl<T: Float> Graph<T> {
    /// Group normalization over `[n, c, h, w]` with per-channel affine
    /// `gamma`, `beta` of shape `[c]`. Statistics use the biased variance.
    pub fn group_norm(&self, x: &Var<T>, groups: usize, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        assert_eq!(gamma.value.shape(), &[c], "group_norm: gamma shape");
        assert_eq!(beta.value.shape(), &[c], "group_norm: beta shape");
        let cg = c / groups;
        let plane = h * w;
        let len = cg * plane;
        let xs = x.value.data();
        let gs = gamma.value.data();
        let bs = beta.value.data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        let inv_len = T::lit(1.0 / len as f64);
        for i in 0..n {
            for gi in 0..groups {
                let base = (i * c + gi * cg) * plane;
                let seg = &xs[base..base + len];
                let mean = seg.iter().copied().sum::<T>() * inv_len;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
                let istd = T::one() / (var + T::lit(eps)).sqrt();
                inv_std[i * groups + gi] = istd;
                for j in 0..len {
                    let ch = gi * cg + j / plane;
                    let xh = (seg[j] - mean) * istd;
                    xhat[base + j] = xh;
                    out[base + j] = xh * gs[ch] + bs[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out).expect("group_norm output");
        let need = tracked(&[Some(x), Some(gamma), Some(beta)]);
        let (xn, gn, bn) = (x.node, gamma.node, beta.node);
        let gamma_v = gamma.value.clone();
        self.push_op(value, need, move |gout, buf| {
            let go = gout.data();
            if let Some(bn) = bn {
                let db = buf.slot(bn, &[c]).data_mut();
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        db[ch] += go[base..base + plane].iter().copied().sum();
                    }
                }
            }
            if let Some(gn) = gn {
                let dg = buf.slot(gn, &[c]).data_mut();
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        dg[ch] += go[base..base + plane].iter().zip(&xhat[base..base + plane]).map(|(&a, &b)| a * b).sum();
                    }
                }
            }
            if let Some(xn) = xn {
                let gs = gamma_v.data();
                let dx = buf.slot(xn, &[n, c, h, w]).data_mut();
                for i in 0..n {
                    for gi in 0..groups {
                        let base = (i * c + gi * cg) * plane;
                        let istd = inv_std[i * groups + gi];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..len {
                            let d = go[base + j] * gs[gi * cg + j / plane];
                            mean_d += d;
                            mean_dx += d * xhat[base + j];
                        }
                        mean_d *= inv_len;
                        mean_dx *= inv_len;
                        for j in 0..len {
                            let d = go[base + j] * gs[gi * cg + j / plane];
                            dx[base + j] += istd * (d - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
        })
    }
}
