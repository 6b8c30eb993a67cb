use crate::graph::{Graph, Var};
use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};

use super::tracked;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output column range `[lo, hi)` for which `ox * stride + kx - pad` is in bounds.
    fn valid_range(&self, kx: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if extent + self.pad > kx { (extent + self.pad - kx - 1) / s + 1 } else { 0 };
        (lo.min(out), hi.min(out))
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = xlo + kx - g.pad;
                        line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            line[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (xlo, xhi) = g.valid_range(kx, g.w, g.wo);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kx - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    /// 2-D cross-correlation. `x: [n, c_in, h, w]`, `weight: [c_out, c_in, k, k]`,
    /// `bias: [c_out]`, square kernel, symmetric zero padding.
    ///
    /// # Panics
    /// On inconsistent shapes.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let (co, ci, k, k2) = weight.value.dims4();
        assert_eq!(ci, c, "conv2d: weight expects {ci} input channels, got {c}");
        assert_eq!(k, k2, "conv2d: only square kernels");
        assert!(stride >= 1 && h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel exceeds input");
        if let Some(b) = bias {
            assert_eq!(b.value.shape(), &[co], "conv2d: bias shape");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c, h, w, k, stride, pad, ho, wo };
        let (rows, p) = (geom.rows(), geom.pixels());

        let xs = x.value.data();
        let ws = weight.value.data();
        let mut out = vec![T::zero(); n * co * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for i in 0..n {
            let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
            let colv = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols[..]
            };
            gemm(
                T::one(),
                MatRef::row_major(ws, co, rows),
                MatRef::row_major(colv, rows, p),
                T::zero(),
                MatMut::row_major(&mut out[i * co * p..(i + 1) * co * p], co, p),
            );
            if let Some(b) = bias {
                for (o, &bv) in b.value.data().iter().enumerate() {
                    for v in &mut out[(i * co + o) * p..(i * co + o + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, co, ho, wo], out).expect("conv2d output size");

        let need = tracked(&[Some(x), Some(weight), bias]);
        let (xv, wv) = (x.clone(), weight.clone());
        let bnode = bias.and_then(|b| b.node);
        self.push_op(value, need, move |gout, buf| {
            let go = gout.data();
            let xs = xv.value.data();
            let ws = wv.value.data();
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
            let mut dcols = vec![T::zero(); rows * p];
            if let Some(bn) = bnode {
                let db = buf.slot(bn, &[co]).data_mut();
                for i in 0..n {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += go[(i * co + o) * p..(i * co + o + 1) * p].iter().copied().sum();
                    }
                }
            }
            for i in 0..n {
                let gi = &go[i * co * p..(i + 1) * co * p];
                let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
                if let Some(wn) = wv.node {
                    let colv = if geom.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, &geom, &mut cols);
                        &cols[..]
                    };
                    let dw = buf.slot(wn, &[co, c, k, k]).data_mut();
                    gemm(
                        T::one(),
                        MatRef::row_major(gi, co, p),
                        MatRef::row_major(colv, rows, p).t(),
                        T::one(),
                        MatMut::row_major(dw, co, rows),
                    );
                }
                if let Some(xn) = xv.node {
                    let dx = &mut buf.slot(xn, &[n, c, h, w]).data_mut()[i * c * h * w..(i + 1) * c * h * w];
                    if geom.is_pointwise() {
                        gemm(
                            T::one(),
                            MatRef::row_major(ws, co, rows).t(),
                            MatRef::row_major(gi, co, p),
                            T::one(),
                            MatMut::row_major(dx, rows, p),
                        );
                    } else {
                        gemm(
                            T::one(),
                            MatRef::row_major(ws, co, rows).t(),
                            MatRef::row_major(gi, co, p),
                            T::zero(),
                            MatMut::row_major(&mut dcols, rows, p),
                        );
                        col2im_add(&dcols, &geom, dx);
                    }
                }
            }
        })
    }
}
