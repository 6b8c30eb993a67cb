use crate::graph::{Graph, Var};
use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};

use super::tracked;

impl<T: Float> Graph<T> {
    /// `y = x W^T + b` over the last axis. `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let xshape = x.value.shape().to_vec();
        let din = *xshape.last().expect("linear: rank >= 1");
        let [dout, win] = weight.value.shape()[..] else {
            panic!("linear: weight must be rank 2");
        };
        assert_eq!(win, din, "linear: weight expects {win} inputs, got {din}");
        if let Some(b) = bias {
            assert_eq!(b.value.shape(), &[dout], "linear: bias shape");
        }
        let m = x.value.numel() / din;
        let mut out = vec![T::zero(); m * dout];
        gemm(
            T::one(),
            MatRef::row_major(x.value.data(), m, din),
            MatRef::row_major(weight.value.data(), dout, din).t(),
            T::zero(),
            MatMut::row_major(&mut out, m, dout),
        );
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                    *v += bv;
                }
            }
        }
        let mut oshape = xshape.clone();
        *oshape.last_mut().expect("non-empty") = dout;
        let value = Tensor::new(&oshape, out).expect("linear output");
        let need = tracked(&[Some(x), Some(weight), bias]);
        let (xv, wv) = (x.clone(), weight.clone());
        let bnode = bias.and_then(|b| b.node);
        self.push_op(value, need, move |gout, buf| {
            let go = gout.data();
            if let Some(xn) = xv.node {
                let dx = buf.slot(xn, &xshape).data_mut();
                gemm(
                    T::one(),
                    MatRef::row_major(go, m, dout),
                    MatRef::row_major(wv.value.data(), dout, din),
                    T::one(),
                    MatMut::row_major(dx, m, din),
                );
            }
            if let Some(wn) = wv.node {
                let dw = buf.slot(wn, &[dout, din]).data_mut();
                gemm(
                    T::one(),
                    MatRef::row_major(go, m, dout).t(),
                    MatRef::row_major(xv.value.data(), m, din),
                    T::one(),
                    MatMut::row_major(dw, dout, din),
                );
            }
            if let Some(bn) = bnode {
                let db = buf.slot(bn, &[dout]).data_mut();
                for row in go.chunks(dout) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        })
    }
}
