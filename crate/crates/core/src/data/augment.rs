//! Training-time augmentation. Geometric ops move pre, post and mask together;
//! photometric ops touch the images only and use one draw for both images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Uniform choice among 0, 90, 180 and 270 degrees.
    pub rotate: bool,
    /// Independent horizontal and vertical flips with probability 1/2.
    pub flip: bool,
    /// Log-uniform zoom factor range, cropped or reflect-padded back.
    pub rescale: Option<[f64; 2]>,
    pub brightness: Option<[f64; 2]>,
    pub contrast: Option<[f64; 2]>,
    pub color: Option<[f64; 2]>,
    /// Blend factor between a smoothed image (0) and the original (1).
    pub sharpness: Option<[f64; 2]>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotate: true,
            flip: true,
            rescale: Some([0.8, 1.25]),
            brightness: Some([0.8, 1.2]),
            contrast: Some([0.8, 1.2]),
            color: Some([0.8, 1.2]),
            sharpness: Some([0.8, 1.2]),
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            rotate: false,
            flip: false,
            rescale: None,
            brightness: None,
            contrast: None,
            color: None,
            sharpness: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometricOp {
    /// Clockwise quarter turn: `(r, c)` moves to `(c, H - 1 - r)`.
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
}

impl GeometricOp {
    fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::Rot90 | Self::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Input position read by output position `(r, c)`.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::Rot90 => (h - 1 - c, r),
            Self::Rot180 => (h - 1 - r, w - 1 - c),
            Self::Rot270 => (c, w - 1 - r),
            Self::FlipHorizontal => (r, w - 1 - c),
            Self::FlipVertical => (h - 1 - r, c),
        }
    }

    /// Applies the op to a row-major `h x w x ch` buffer.
    pub fn apply<T: Copy>(self, data: &[T], h: usize, w: usize, ch: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(r, c, h, w);
                out.extend_from_slice(&data[(sr * w + sc) * ch..(sr * w + sc + 1) * ch]);
            }
        }
        (out, oh, ow)
    }

    pub fn apply_sample(self, s: &Sample) -> Sample {
        let (pre, oh, ow) = self.apply(&s.pre, s.height, s.width, 3);
        let (post, _, _) = self.apply(&s.post, s.height, s.width, 3);
        let (mask, _, _) = self.apply(&s.mask, s.height, s.width, 1);
        Sample {
            height: oh,
            width: ow,
            pre,
            post,
            mask,
            domain_id: s.domain_id.clone(),
            sample_id: s.sample_id.clone(),
        }
    }
}

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Nearest-neighbor zoom about the image center, same output size.
fn rescale<T: Copy>(data: &[T], h: usize, w: usize, ch: usize, factor: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    let (ch_, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    for r in 0..h {
        let sr = reflect(((r as f64 + 0.5 - ch_) / factor + ch_).floor() as isize, h);
        for c in 0..w {
            let sc = reflect(((c as f64 + 0.5 - cw) / factor + cw).floor() as isize, w);
            out.extend_from_slice(&data[(sr * w + sc) * ch..(sr * w + sc + 1) * ch]);
        }
    }
    out
}

struct Photometric {
    brightness: f64,
    contrast: f64,
    color: f64,
    sharpness: f64,
}

impl Photometric {
    fn apply(&self, img: &[u8], h: usize, w: usize) -> Vec<u8> {
        let mut v: Vec<f64> = img.iter().map(|&x| x as f64).collect();
        v.iter_mut().for_each(|x| *x *= self.brightness);
        let gray = |p: &[f64]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let mean_gray = v.chunks_exact(3).map(gray).sum::<f64>() / (h * w) as f64;
        v.iter_mut().for_each(|x| *x = mean_gray + (*x - mean_gray) * self.contrast);
        for p in v.chunks_exact_mut(3) {
            let g = gray(p);
            p.iter_mut().for_each(|x| *x = g + (*x - g) * self.color);
        }
        if self.sharpness != 1.0 && h >= 3 && w >= 3 {
            // Smoothing kernel [[1,1,1],[1,5,1],[1,1,1]] / 13 on the interior.
            let src = v.clone();
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    for k in 0..3 {
                        let mut acc = 4.0 * src[(r * w + c) * 3 + k];
                        for dr in 0..3 {
                            for dc in 0..3 {
                                acc += src[((r + dr - 1) * w + c + dc - 1) * 3 + k];
                            }
                        }
                        let blur = acc / 13.0;
                        v[(r * w + c) * 3 + k] = blur + (src[(r * w + c) * 3 + k] - blur) * self.sharpness;
                    }
                }
            }
        }
        v.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Draws one augmentation from `policy` and applies it.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, policy: &AugmentPolicy) -> Sample {
    let mut out = sample.clone();
    if policy.rotate {
        let op = match rng.gen_range(0..4) {
            1 => Some(GeometricOp::Rot90),
            2 => Some(GeometricOp::Rot180),
            3 => Some(GeometricOp::Rot270),
            _ => None,
        };
        if let Some(op) = op {
            out = op.apply_sample(&out);
        }
    }
    if policy.flip {
        if rng.gen_bool(0.5) {
            out = GeometricOp::FlipHorizontal.apply_sample(&out);
        }
        if rng.gen_bool(0.5) {
            out = GeometricOp::FlipVertical.apply_sample(&out);
        }
    }
    if let Some([lo, hi]) = policy.rescale {
        let f = rng.gen_range(lo.ln()..=hi.ln()).exp();
        let (h, w) = (out.height, out.width);
        out.pre = rescale(&out.pre, h, w, 3, f);
        out.post = rescale(&out.post, h, w, 3, f);
        out.mask = rescale(&out.mask, h, w, 1, f);
    }
    let mut draw = |range: Option<[f64; 2]>| range.map_or(1.0, |[lo, hi]| rng.gen_range(lo..=hi));
    let photo = Photometric {
        brightness: draw(policy.brightness),
        contrast: draw(policy.contrast),
        color: draw(policy.color),
        sharpness: draw(policy.sharpness),
    };
    let photometric = policy.brightness.is_some() || policy.contrast.is_some() || policy.color.is_some() || policy.sharpness.is_some();
    if photometric {
        out.pre = photo.apply(&out.pre, out.height, out.width);
        out.post = photo.apply(&out.post, out.height, out.width);
    }
    out
}
