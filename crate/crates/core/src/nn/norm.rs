//! Batch normalization kernels and exact per-channel moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Float, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Count, mean and sum of squared deviations of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl ChannelMoments {
    pub fn from_values(values: impl IntoIterator<Item = f64> + Clone) -> Self {
        let mut count = 0u64;
        let mut sum = 0.0;
        for v in values.clone() {
            count += 1;
            sum += v;
        }
        if count == 0 {
            return Self::default();
        }
        let mean = sum / count as f64;
        let m2 = values.into_iter().map(|v| (v - mean) * (v - mean)).sum();
        Self { count, mean, m2 }
    }

    /// Biased variance `M2 / n`.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    /// Pairwise combination of two disjoint partitions (Chan et al.).
    pub fn merge(&self, other: &ChannelMoments) -> ChannelMoments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        ChannelMoments {
            count: self.count + other.count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }
}

/// Running statistics of one BN layer. Variances are biased (`1/N`) both for
/// batch normalization and for the running estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub num_batches_tracked: u64,
}

impl<T: Float> BnRunningStats<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
            num_batches_tracked: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `new = (1 - momentum) * old + momentum * batch`.
    pub fn update(&mut self, batch: &[ChannelMoments]) -> Result<()> {
        if batch.len() != self.channels() {
            return Err(Error::shape(
                "batchnorm",
                format!("{} batch channels vs {} running", batch.len(), self.channels()),
            ));
        }
        let m = self.momentum;
        for (c, mom) in batch.iter().enumerate() {
            let old_mean = self.running_mean[c].as_f64();
            let old_var = self.running_var[c].as_f64();
            self.running_mean[c] = T::of((1.0 - m) * old_mean + m * mom.mean);
            self.running_var[c] = T::of((1.0 - m) * old_var + m * mom.variance());
        }
        self.num_batches_tracked += 1;
        Ok(())
    }
}

/// Where a BN layer takes its normalization statistics from.
#[derive(Debug, Clone, Copy)]
pub enum BnSource<'a, T> {
    /// Current batch moments (training).
    Batch { eps: f64 },
    /// Supplied statistics (running stats or an adaptation overlay).
    Fixed {
        mean: &'a [T],
        var: &'a [T],
        eps: f64,
    },
}

pub(crate) struct BnForward<T> {
    pub output: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub moments: Vec<ChannelMoments>,
}

/// Sum in f64 with eight interleaved accumulators (fixed order, so deterministic).
fn sum_f64<T: Float>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v.as_f64());
        }
    }
    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for &v in rest {
        total += f(v.as_f64());
    }
    total
}

pub(crate) fn input_moments<T: Float>(x: &Tensor<T>) -> Result<Vec<ChannelMoments>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    if n * plane == 0 {
        return Err(Error::Empty("batch normalization over a zero-size batch".into()));
    }
    let data = x.data();
    let count = (n * plane) as f64;
    let planes = |ch: usize| (0..n).map(move |b| &data[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
    Ok((0..c)
        .map(|ch| {
            let mean = planes(ch).map(|p| sum_f64(p, |v| v)).sum::<f64>() / count;
            let m2 = planes(ch).map(|p| sum_f64(p, |v| (v - mean) * (v - mean))).sum::<f64>();
            ChannelMoments {
                count: (n * plane) as u64,
                mean,
                m2,
            }
        })
        .collect())
}

pub(crate) fn forward<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    source: BnSource<'_, T>,
    keep_xhat: bool,
) -> Result<BnForward<T>> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {c} channels, layer has {}", gamma.len()),
        ));
    }
    let moments = input_moments(x)?;
    let (mean, inv_std): (Vec<T>, Vec<T>) = match source {
        BnSource::Batch { eps } => moments
            .iter()
            .map(|m| (T::of(m.mean), T::of(1.0 / (m.variance() + eps).sqrt())))
            .unzip(),
        BnSource::Fixed { mean, var, eps } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape(
                    "batchnorm",
                    format!("statistics for {} channels, input has {c}", mean.len()),
                ));
            }
            mean.iter()
                .zip(var)
                .map(|(&m, &v)| (m, T::of(1.0 / (v.as_f64() + eps).sqrt())))
                .unzip()
        }
    };
    let plane = h * w;
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = if keep_xhat {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = &x.data()[range.clone()];
            if keep_xhat {
                let xh = &mut xhat[range.clone()];
                for ((o, h), &v) in out[range].iter_mut().zip(xh.iter_mut()).zip(src) {
                    *h = (v - mu) * is;
                    *o = g * *h + bt;
                }
            } else {
                for (o, &v) in out[range].iter_mut().zip(src) {
                    *o = g * ((v - mu) * is) + bt;
                }
            }
        }
    }
    Ok(BnForward {
        output: Tensor::new(x.shape().to_vec(), out)?,
        xhat,
        inv_std,
        moments,
    })
}

pub(crate) struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn backward<T: Float>(
    shape: &[usize],
    dy: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> BnGrads<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let dyd = dy.data();
    for ch in 0..c {
        let (mut sg, mut sb) = (0.0f64, 0.0f64);
        for b in 0..n {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (d, x) = (&dyd[range.clone()], &xhat[range]);
            let mut acc_g = [T::zero(); 8];
            let mut acc_b = [T::zero(); 8];
            let (dc, xc) = (d.chunks_exact(8), x.chunks_exact(8));
            let (dr, xr) = (dc.remainder(), xc.remainder());
            for (d8, x8) in dc.zip(xc) {
                for i in 0..8 {
                    acc_g[i] += d8[i] * x8[i];
                    acc_b[i] += d8[i];
                }
            }
            sg += acc_g.iter().map(|v| v.as_f64()).sum::<f64>();
            sb += acc_b.iter().map(|v| v.as_f64()).sum::<f64>();
            for (&dv, &xv) in dr.iter().zip(xr) {
                sg += (dv * xv).as_f64();
                sb += dv.as_f64();
            }
        }
        dgamma[ch] = T::of(sg);
        dbeta[ch] = T::of(sb);
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for ch in 0..c {
        let scale = gamma[ch] * inv_std[ch];
        let mean_dy = dbeta[ch] / count;
        let mean_dy_xhat = dgamma[ch] / count;
        for b in 0..n {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (d, x) = (&dyd[range.clone()], &xhat[range.clone()]);
            let out = &mut dx[range];
            if batch_stats {
                for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(x) {
                    *o = scale * (dv - mean_dy - xv * mean_dy_xhat);
                }
            } else {
                for (o, &dv) in out.iter_mut().zip(d) {
                    *o = scale * dv;
                }
            }
        }
    }
    BnGrads {
        input: Tensor::new(shape.to_vec(), dx).expect("bn dx shape"),
        gamma: dgamma,
        beta: dbeta,
    }
}
