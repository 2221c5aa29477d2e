//! Direct 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::nn::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c_in, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input rank {:?}", input))),
        };
        let (c_out, wi, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("weight rank {:?}", weight))),
        };
        if wi != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {wi}"),
            ));
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {b:?} for {c_out} outputs")));
            }
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("non-integral output size for {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ow * stride + kj - padding`
/// falls inside `0..w`.
fn valid_cols(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let p = g.padding;
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(g.stride) };
    // Largest ow with ow * stride + kj - p <= w - 1.
    let hi = if g.w + p > kj {
        ((g.w + p - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `C x H x W` into `(C*kH*kW) x (Ho*Wo)`.
fn im2col<T: Float>(g: &ConvGeometry, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let p = g.padding as isize;
    for c in 0..g.c_in {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - p;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im_add<T: Float>(g: &ConvGeometry, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    let p = g.padding as isize;
    for c in 0..g.c_in {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - p;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let line = &src[oh * g.wo + lo..oh * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &s) in dst_row[first..first + (hi - lo)].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst_row[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Float>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * plane;
    let mut out = vec![T::zero(); g.n * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let img = &input.data()[n * in_img..(n + 1) * in_img];
        let rhs: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.c_out,
            k,
            plane,
            T::one(),
            weight.data(),
            k,
            1,
            rhs,
            plane,
            1,
            beta,
            dst,
            plane,
            1,
        );
    }
    Tensor::new(vec![g.n, g.c_out, g.ho, g.wo], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Float>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * plane;

    let mut d_input = need_input.then(|| vec![T::zero(); g.n * in_img]);
    let mut d_weight = need_weight.then(|| vec![T::zero(); g.c_out * k]);
    let mut d_bias = need_bias.then(|| vec![T::zero(); g.c_out]);

    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise && !need_input { 0 } else { k * plane }];
    for n in 0..g.n {
        let dy = &grad_out.data()[n * out_img..(n + 1) * out_img];
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in dy.chunks_exact(plane).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            let img = &input.data()[n * in_img..(n + 1) * in_img];
            let patches: &[T] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW (O x K) += dY (O x P) * cols^T (P x K)
            T::gemm(
                g.c_out,
                plane,
                k,
                T::one(),
                dy,
                plane,
                1,
                patches,
                1,
                plane,
                T::one(),
                dw,
                k,
                1,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * in_img..(n + 1) * in_img];
            if pointwise {
                // dX (I x P) = W^T (I x O) * dY (O x P)
                T::gemm(
                    k, g.c_out, plane, T::one(), weight.data(), 1, k, dy, plane, 1, T::zero(), dst,
                    plane, 1,
                );
            } else {
                T::gemm(
                    k,
                    g.c_out,
                    plane,
                    T::one(),
                    weight.data(),
                    1,
                    k,
                    dy,
                    plane,
                    1,
                    T::zero(),
                    &mut cols,
                    plane,
                    1,
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
    ConvGrads {
        input: d_input.map(|d| Tensor::new(input.shape().to_vec(), d).expect("dx shape")),
        weight: d_weight.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("dw shape")),
        bias: d_bias.map(|d| Tensor::new(vec![g.c_out], d).expect("db shape")),
    }
}
