use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

use super::tracked;

fn transpose_last2<T: Float>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

impl<T: Float> Graph<T> {
    /// `[n, c, h, w] -> [n, h*w, c]`.
    pub fn to_tokens(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let value = Tensor::new(&[n, h * w, c], transpose_last2(x.value.data(), n, c, h * w)).expect("size");
        let xn = x.node;
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            let back = transpose_last2(gout.data(), n, h * w, c);
            buf.add(xn.expect("tracked parent"), Tensor::new(&[n, c, h, w], back).expect("size"));
        })
    }

    /// `[n, h*w, c] -> [n, c, h, w]`.
    pub fn from_tokens(&self, x: &Var<T>, h: usize, w: usize) -> Var<T> {
        let [n, l, c] = x.value.shape()[..] else {
            panic!("from_tokens: expected rank 3");
        };
        assert_eq!(l, h * w, "from_tokens: token count");
        let value = Tensor::new(&[n, c, h, w], transpose_last2(x.value.data(), n, l, c)).expect("size");
        let xn = x.node;
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            let back = transpose_last2(gout.data(), n, c, l);
            buf.add(xn.expect("tracked parent"), Tensor::new(&[n, l, c], back).expect("size"));
        })
    }

    /// Same data, new shape.
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Var<T> {
        let value = (*x.value).clone().reshape(shape).expect("reshape: element count");
        let (xn, orig) = (x.node, x.shape().to_vec());
        self.push_op(value, tracked(&[Some(x)]), move |gout, buf| {
            buf.add(xn.expect("tracked parent"), gout.clone().reshape(&orig).expect("same count"));
        })
    }
}
