//! Dense numeric kernels behind the differentiable ops.
//!
//! Convolutions are lowered to a column matrix and a single GEMM. All kernels
//! operate on single samples laid out as `[C, H, W]` with weights laid out as
//! `[O, C, kh, kw]`.

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4};

/// Stride and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const VALID: ConvGeom = ConvGeom { stride: 1, pad: 0 };

    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom { stride, pad }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if kernel == 0 || self.stride == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, geom: ConvGeom, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let out = cols.as_slice_mut().expect("fresh array");
    let pad = geom.pad as isize;
    let s = geom.stride as isize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ho * wo;
                for oi in 0..ho {
                    let ii = oi as isize * s + ki as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + ii as usize * w;
                    let dst = row + oi * wo;
                    for oj in 0..wo {
                        let jj = oj as isize * s + kj as isize - pad;
                        if jj >= 0 && jj < w as isize {
                            out[dst + oj] = xs[src + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize), kh: usize, kw: usize, geom: ConvGeom, ho: usize, wo: usize) -> Array3<f64> {
    let (c, h, w) = shape;
    let mut x = Array3::<f64>::zeros(shape);
    let xs = x.as_slice_mut().expect("fresh array");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let pad = geom.pad as isize;
    let s = geom.stride as isize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ho * wo;
                for oi in 0..ho {
                    let ii = oi as isize * s + ki as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + ii as usize * w;
                    let src = row + oi * wo;
                    for oj in 0..wo {
                        let jj = oj as isize * s + kj as isize - pad;
                        if jj >= 0 && jj < w as isize {
                            xs[dst + jj as usize] += cs[src + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn out_dims(h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeom) -> (usize, usize) {
    let ho = geom.out_len(h, kh).expect("kernel larger than input");
    let wo = geom.out_len(w, kw).expect("kernel larger than input");
    (ho, wo)
}

/// `y[o, p] = sum_{c, q} w[o, c, q] * x[c, stride * p + q - pad]`.
pub fn conv2d(x: ArrayView3<f64>, w: ArrayView4<f64>, geom: ConvGeom) -> Array3<f64> {
    let (_, h, wd) = x.dim();
    let (o, c, kh, kw) = w.dim();
    let (ho, wo) = out_dims(h, wd, kh, kw, geom);
    let cols = im2col(x, kh, kw, geom, ho, wo);
    let wm = w
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight reshape");
    wm.dot(&cols)
        .into_shape_with_order((o, ho, wo))
        .expect("output reshape")
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gy: ArrayView3<f64>, w: ArrayView4<f64>, geom: ConvGeom, input: (usize, usize, usize)) -> Array3<f64> {
    let (o, c, kh, kw) = w.dim();
    let (_, ho, wo) = gy.dim();
    let wm = w
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight reshape");
    let gm = gy
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, ho * wo))
        .expect("grad reshape");
    let cols = wm.t().dot(&gm);
    col2im(&cols, input, kh, kw, geom, ho, wo)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: ArrayView3<f64>, gy: ArrayView3<f64>, geom: ConvGeom, kernel: (usize, usize)) -> Array4<f64> {
    let (c, _, _) = x.dim();
    let (o, ho, wo) = gy.dim();
    let (kh, kw) = kernel;
    let cols = im2col(x, kh, kw, geom, ho, wo);
    let gm = gy
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, ho * wo))
        .expect("grad reshape");
    gm.dot(&cols.t())
        .into_shape_with_order((o, c, kh, kw))
        .expect("weight grad reshape")
}

/// Flat input indices selected by a max pool (first maximum wins ties),
/// together with the pooled output shape.
pub fn max_pool_indices(x: ArrayView3<f64>, kernel: usize, stride: usize) -> (Vec<usize>, (usize, usize, usize)) {
    let (c, h, w) = x.dim();
    let geom = ConvGeom::new(stride, 0);
    let ho = geom.out_len(h, kernel).expect("pool larger than input");
    let wo = geom.out_len(w, kernel).expect("pool larger than input");
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = usize::MAX;
                let mut best_val = f64::NEG_INFINITY;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let flat = ci * h * w + (oi * stride + ki) * w + oj * stride + kj;
                        if best == usize::MAX || xs[flat] > best_val {
                            best = flat;
                            best_val = xs[flat];
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    (idx, (c, ho, wo))
}
