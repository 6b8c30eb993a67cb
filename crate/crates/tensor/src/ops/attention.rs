use crate::graph::{Graph, Var};
use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};

use super::tracked;

impl<T: Float> Graph<T> {
    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [n, l, d]`, `k: [n, s, d]`, `v: [n, s, d]`; heads split `d` evenly.
    /// Returns `[n, l, d]`.
    pub fn attention(&self, q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize) -> Var<T> {
        let [n, l, d] = q.value.shape()[..] else {
            panic!("attention: q must be rank 3");
        };
        let [nk, s, dk] = k.value.shape()[..] else {
            panic!("attention: k must be rank 3");
        };
        assert_eq!((nk, dk), (n, d), "attention: k shape");
        assert_eq!(v.value.shape(), &[n, s, d], "attention: v shape");
        assert!(heads > 0 && d % heads == 0, "attention: {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());

        let (qs, ks, vs) = (q.value.data(), k.value.data(), v.value.data());
        let mut probs = vec![T::zero(); n * heads * l * s];
        let mut out = vec![T::zero(); n * l * d];
        for i in 0..n {
            let (qi, ki, vi) = (&qs[i * l * d..(i + 1) * l * d], &ks[i * s * d..(i + 1) * s * d], &vs[i * s * d..(i + 1) * s * d]);
            for hh in 0..heads {
                let p = &mut probs[(i * heads + hh) * l * s..(i * heads + hh + 1) * l * s];
                gemm(
                    scale,
                    MatRef::new(&qi[hh * dh..], l, dh, d, 1),
                    MatRef::new(&ki[hh * dh..], s, dh, d, 1).t(),
                    T::zero(),
                    MatMut::row_major(p, l, s),
                );
                for row in p.chunks_mut(s) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        z += *e;
                    }
                    for e in row.iter_mut() {
                        *e /= z;
                    }
                }
                let oi = &mut out[i * l * d..(i + 1) * l * d];
                gemm(
                    T::one(),
                    MatRef::row_major(p, l, s),
                    MatRef::new(&vi[hh * dh..], s, dh, d, 1),
                    T::zero(),
                    MatMut::new(&mut oi[hh * dh..], l, dh, d, 1),
                );
            }
        }
        let value = Tensor::new(&[n, l, d], out).expect("attention output");
        let need = tracked(&[Some(q), Some(k), Some(v)]);
        let (qv, kv, vv) = (q.clone(), k.clone(), v.clone());
        self.push_op(value, need, move |gout, buf| {
            let go = gout.data();
            let (qs, ks, vs) = (qv.value.data(), kv.value.data(), vv.value.data());
            let mut dp = vec![T::zero(); l * s];
            for i in 0..n {
                let gi = &go[i * l * d..(i + 1) * l * d];
                for hh in 0..heads {
                    let p = &probs[(i * heads + hh) * l * s..(i * heads + hh + 1) * l * s];
                    if let Some(vn) = vv.node {
                        let dv = &mut buf.slot(vn, &[n, s, d]).data_mut()[i * s * d..(i + 1) * s * d];
                        gemm(
                            T::one(),
                            MatRef::row_major(p, l, s).t(),
                            MatRef::new(&gi[hh * dh..], l, dh, d, 1),
                            T::one(),
                            MatMut::new(&mut dv[hh * dh..], s, dh, d, 1),
                        );
                    }
                    if qv.node.is_none() && kv.node.is_none() {
                        continue;
                    }
                    // dS = P * (dP - rowsum(dP * P)), reusing dp in place.
                    gemm(
                        T::one(),
                        MatRef::new(&gi[hh * dh..], l, dh, d, 1),
                        MatRef::new(&vs[i * s * d + hh * dh..], s, dh, d, 1).t(),
                        T::zero(),
                        MatMut::row_major(&mut dp, l, s),
                    );
                    for (drow, prow) in dp.chunks_mut(s).zip(p.chunks(s)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (dv, &pv) in drow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dot);
                        }
                    }
                    if let Some(qn) = qv.node {
                        let dq = &mut buf.slot(qn, &[n, l, d]).data_mut()[i * l * d..(i + 1) * l * d];
                        gemm(
                            scale,
                            MatRef::row_major(&dp, l, s),
                            MatRef::new(&ks[i * s * d + hh * dh..], s, dh, d, 1),
                            T::one(),
                            MatMut::new(&mut dq[hh * dh..], l, dh, d, 1),
                        );
                    }
                    if let Some(kn) = kv.node {
                        let dk = &mut buf.slot(kn, &[n, s, d]).data_mut()[i * s * d..(i + 1) * s * d];
                        gemm(
                            scale,
                            MatRef::row_major(&dp, l, s).t(),
                            MatRef::new(&qs[i * l * d + hh * dh..], l, dh, d, 1),
                            T::one(),
                            MatMut::new(&mut dk[hh * dh..], s, dh, d, 1),
                        );
                    }
                }
            }
        })
    }
}
