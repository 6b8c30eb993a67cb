use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

use super::tracked;

impl<T: Float> Graph<T> {
    /// Mean squared error restricted to masked cells.
    ///
    /// `pred` and `target` are `[n, c, h, w]`; `mask` is `[n, 1, h, w]` with
    /// entries in {0, 1} and applies to every channel. Each item contributes
    /// the mean over its own masked cells; items with an empty mask contribute
    /// zero. The result is the mean over items.
    pub fn masked_mse(&self, pred: &Var<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Var<T> {
        let (n, c, h, w) = pred.value.dims4();
        assert_eq!(target.shape(), pred.shape(), "masked_mse: target shape");
        assert_eq!(mask.shape(), &[n, 1, h, w], "masked_mse: mask shape");
        let plane = h * w;
        let mut weights = vec![T::zero(); n];
        let mut total = T::zero();
        for i in 0..n {
            let m = &mask.data()[i * plane..(i + 1) * plane];
            let count: T = m.iter().copied().sum::<T>() * T::lit(c as f64);
            if count == T::zero() {
                continue;
            }
            weights[i] = T::one() / (count * T::lit(n as f64));
            let mut acc = T::zero();
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in 0..plane {
                    let mj = m[j];
                    if mj != T::zero() {
                        let d = pred.value.data()[base + j] - target.data()[base + j];
                        acc += mj * d * d;
                    }
                }
            }
            total += acc * weights[i];
        }
        let value = Tensor::scalar(total);
        let pv = pred.clone();
        let (target, mask) = (target.clone(), mask.clone());
        self.push_op(value, tracked(&[Some(pred)]), move |gout, buf| {
            let g = gout.data()[0];
            let dp = buf.slot(pv.node.expect("tracked parent"), &[n, c, h, w]).data_mut();
            for i in 0..n {
                if weights[i] == T::zero() {
                    continue;
                }
                let m = &mask.data()[i * plane..(i + 1) * plane];
                let two_w = T::lit(2.0) * weights[i] * g;
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for j in 0..plane {
                        if m[j] != T::zero() {
                            dp[base + j] += two_w * m[j] * (pv.value.data()[base + j] - target.data()[base + j]);
                        }
                    }
                }
            }
        })
    }
}
