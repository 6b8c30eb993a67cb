use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

use super::tracked;

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Float> Graph<T> {
    /// `x * sigmoid(x)`.
    pub fn silu(&self, x: &Var<T>) -> Var<T> {
        let value = x.value.map(|v| v * sigmoid(v));
        let xv = x.clone();
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            let xn = xv.node.expect("tracked parent");
            let dx = buf.slot(xn, xv.value.shape()).data_mut();
            for ((d, &g), &v) in dx.iter_mut().zip(gout.data()).zip(xv.value.data()) {
                let s = sigmoid(v);
                *d += g * s * (T::one() + v * (T::one() - s));
            }
        })
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "add: shapes differ");
        let value = a.value.zip_map(&b.value, |x, y| x + y).expect("same shape");
        let (an, bn) = (a.node, b.node);
        self.push_op(value, tracked(&[Some(a), Some(b)]), move |gout, buf| {
            for node in [an, bn].into_iter().flatten() {
                buf.add(node, gout.clone());
            }
        })
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "mul: shapes differ");
        let value = a.value.zip_map(&b.value, |x, y| x * y).expect("same shape");
        let (av, bv) = (a.clone(), b.clone());
        self.push_op(value, tracked(&[Some(a), Some(b)]), move |gout, buf| {
            if let Some(n) = av.node {
                buf.add(n, gout.zip_map(&bv.value, |g, y| g * y).expect("same shape"));
            }
            if let Some(n) = bv.node {
                buf.add(n, gout.zip_map(&av.value, |g, x| g * x).expect("same shape"));
            }
        })
    }

    pub fn scale(&self, x: &Var<T>, s: f64) -> Var<T> {
        let st = T::lit(s);
        let value = x.value.map(|v| v * st);
        let xn = x.node;
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            buf.add(xn.expect("tracked parent"), gout.map(|g| g * st));
        })
    }

    /// Broadcast add of a per-item, per-channel vector: `x: [n, c, h, w]`, `v: [n, c]`.
    pub fn add_channel_bias(&self, x: &Var<T>, v: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        assert_eq!(v.shape(), &[n, c], "add_channel_bias: vector shape");
        let plane = h * w;
        let mut out = x.value.data().to_vec();
        for (chunk, &b) in out.chunks_mut(plane).zip(v.value.data()) {
            for e in chunk {
                *e += b;
            }
        }
        let value = Tensor::new(&[n, c, h, w], out).expect("same size");
        let (xn, vn) = (x.node, v.node);
        self.push_op(value, tracked(&[Some(x), Some(v)]), move |gout, buf| {
            if let Some(vn) = vn {
                let dv = buf.slot(vn, &[n, c]).data_mut();
                for (d, chunk) in dv.iter_mut().zip(gout.data().chunks(plane)) {
                    *d += chunk.iter().copied().sum();
                }
            }
            if let Some(xn) = xn {
                buf.add(xn, gout.clone());
            }
        })
    }

    /// Concatenate `[n, ca, h, w]` and `[n, cb, h, w]` along channels.
    pub fn concat_channels(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let (n, ca, h, w) = a.value.dims4();
        let (nb, cb, hb, wb) = b.value.dims4();
        assert_eq!((nb, hb, wb), (n, h, w), "concat_channels: spatial/batch dims differ");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&a.value.data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&b.value.data()[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out).expect("concat size");
        let (an, bn) = (a.node, b.node);
        self.push_op(value, tracked(&[Some(a), Some(b)]), move |gout, buf| {
            let go = gout.data();
            if let Some(an) = an {
                let da = buf.slot(an, &[n, ca, h, w]).data_mut();
                for i in 0..n {
                    for (d, &g) in da[i * sa..(i + 1) * sa].iter_mut().zip(&go[i * (sa + sb)..i * (sa + sb) + sa]) {
                        *d += g;
                    }
                }
            }
            if let Some(bn) = bn {
                let db = buf.slot(bn, &[n, cb, h, w]).data_mut();
                for i in 0..n {
                    let off = i * (sa + sb) + sa;
                    for (d, &g) in db[i * sb..(i + 1) * sb].iter_mut().zip(&go[off..off + sb]) {
                        *d += g;
                    }
                }
            }
        })
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let xs = x.value.data();
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, h2, w2], out).expect("upsample size");
        let xn = x.node;
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            let dx = buf.slot(xn.expect("tracked parent"), &[n, c, h, w]).data_mut();
            let go = gout.data();
            for p in 0..n * c {
                let src = &go[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
        })
    }

    pub fn sum_all(&self, x: &Var<T>) -> Var<T> {
        let value = Tensor::scalar(x.value.sum());
        let (xn, shape) = (x.node, x.shape().to_vec());
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            buf.add(xn.expect("tracked parent"), Tensor::full(&shape, gout.data()[0]));
        })
    }

    pub fn mean_all(&self, x: &Var<T>) -> Var<T> {
        let n = x.value.numel() as f64;
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_replicates_blocks() {
        let g = Graph::<f32>::inference();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.upsample2x(&x);
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn concat_interleaves_per_item() {
        let g = Graph::<f32>::inference();
        let a = g.constant(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f32));
        let b = g.constant(Tensor::from_fn(&[2, 2, 1, 2], |i| 10.0 + i as f32));
        let y = g.concat_channels(&a, &b);
        assert_eq!(y.shape(), &[2, 3, 1, 2]);
        assert_eq!(y.value().data(), &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]);
    }
}
