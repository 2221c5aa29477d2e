//! Test-time BN statistic replacement (AdaBN), pooled or per domain.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{Container, NamedTensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, Model};
use crate::nn::{BnMode, ChannelMoments, Float, Tape};

/// Exact per-channel moments for a set of BN layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentAccumulator {
    pub layers: BTreeMap<String, Vec<ChannelMoments>>,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, layer: &str, moments: &[ChannelMoments]) -> Result<()> {
        match self.layers.get_mut(layer) {
            None => {
                self.layers.insert(layer.to_string(), moments.to_vec());
            }
            Some(acc) => {
                if acc.len() != moments.len() {
                    return Err(Error::shape("moment merge", format!("`{layer}`: {} vs {} channels", acc.len(), moments.len())));
                }
                for (a, m) in acc.iter_mut().zip(moments) {
                    *a = a.merge(m);
                }
            }
        }
        Ok(())
    }

    pub fn absorb(&mut self, other: &MomentAccumulator) -> Result<()> {
        for (layer, m) in &other.layers {
            self.add(layer, m)?;
        }
        Ok(())
    }
}

/// Chan-style combination of two accumulators.
pub fn merge_moments(a: &MomentAccumulator, b: &MomentAccumulator) -> Result<MomentAccumulator> {
    let mut out = a.clone();
    out.absorb(b)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Values per channel the estimate is based on.
    pub count: u64,
}

/// Replacement BN statistics for one group of test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsOverlay {
    pub domain_tag: String,
    pub layers: BTreeMap<String, LayerStats>,
}

impl BnStatsOverlay {
    fn from_moments(domain_tag: &str, acc: &MomentAccumulator) -> Self {
        let layers = acc
            .layers
            .iter()
            .map(|(name, m)| {
                (
                    name.clone(),
                    LayerStats {
                        mean: m.iter().map(|c| c.mean).collect(),
                        var: m.iter().map(|c| c.variance()).collect(),
                        count: m.first().map_or(0, |c| c.count),
                    },
                )
            })
            .collect();
        Self {
            domain_tag: domain_tag.to_string(),
            layers,
        }
    }

    pub fn apply_in_place<T: Float>(&self, model: &mut Model<T>) -> Result<()> {
        for (layer, s) in &self.layers {
            model.set_running_stats(layer, &s.mean, &s.var)?;
        }
        Ok(())
    }

    /// A copy of `model` whose running statistics are replaced by the overlay.
    pub fn apply<T: Float>(&self, model: &Model<T>) -> Result<Model<T>> {
        let mut out = model.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let counts: BTreeMap<&str, u64> = self.layers.iter().map(|(k, s)| (k.as_str(), s.count)).collect();
        let mut c = Container::new(json!({ "domain_tag": self.domain_tag, "counts": counts }));
        for (layer, s) in &self.layers {
            c.tensors.push(NamedTensor::from_floats(format!("{layer}/adapted_mean"), vec![s.mean.len()], &s.mean));
            c.tensors.push(NamedTensor::from_floats(format!("{layer}/adapted_var"), vec![s.var.len()], &s.var));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let domain_tag = c
            .metadata
            .get("domain_tag")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint("overlay without domain_tag".into()))?
            .to_string();
        let counts = c.metadata.get("counts").and_then(Value::as_object);
        let mut layers = BTreeMap::new();
        for t in &c.tensors {
            let Some(layer) = t.name.strip_suffix("/adapted_mean") else {
                continue;
            };
            let mean = t.to_floats::<f64>()?;
            let var = c.get(&format!("{layer}/adapted_var"))?.to_floats::<f64>()?;
            if var.len() != mean.len() {
                return Err(Error::Checkpoint(format!("`{layer}` mean/var lengths differ")));
            }
            let count = counts.and_then(|m| m.get(layer)).and_then(Value::as_u64).unwrap_or(0);
            layers.insert(layer.to_string(), LayerStats { mean, var, count });
        }
        Ok(Self { domain_tag, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// How upstream BN layers normalize while statistics are being collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMode {
    /// Level by level: each layer is estimated with all upstream layers
    /// already using their new statistics.
    #[default]
    Sequential,
    /// One collection pass with the model's existing running statistics.
    SinglePass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub batch_size: usize,
    pub mode: EstimationMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            mode: EstimationMode::Sequential,
        }
    }
}

/// Moments of the BN inputs over `samples`. `stop_level` limits the pass to
/// the layers at that level; batches run in parallel and merge in order.
fn collect<T: Float>(model: &Model<T>, samples: &[&Sample], batch_size: usize, stop_level: Option<usize>) -> Result<MomentAccumulator> {
    let parts: Vec<Result<MomentAccumulator>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (h, w) = (chunk[0].height, chunk[0].width);
            let pre: Vec<&[u8]> = chunk.iter().map(|s| s.pre.as_slice()).collect();
            let post: Vec<&[u8]> = chunk.iter().map(|s| s.post.as_slice()).collect();
            let mut tape = Tape::inference();
            let out = model.forward_partial(
                &mut tape,
                &images_to_tensor(&pre, h, w)?,
                &images_to_tensor(&post, h, w)?,
                BnMode::Collect,
                stop_level,
            )?;
            let mut acc = MomentAccumulator::new();
            for (layer, m) in &out.moments {
                if stop_level.map_or(true, |k| model.bn_layer(layer).map(|l| l.level == k).unwrap_or(false)) {
                    acc.add(layer, m)?;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut acc = MomentAccumulator::new();
    for p in parts {
        acc.absorb(&p?)?;
    }
    Ok(acc)
}

/// Exact dataset statistics of every BN layer's input; gamma and beta untouched.
pub fn estimate_bn_stats<T: Float>(
    model: &Model<T>,
    samples: &[&Sample],
    config: &AdaptConfig,
    domain_tag: &str,
) -> Result<BnStatsOverlay> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("no samples to estimate BN statistics for `{domain_tag}`")));
    }
    if model.bn_layers().is_empty() {
        return Err(Error::InvalidConfig("model has no BN layers".into()));
    }
    let acc = match config.mode {
        EstimationMode::SinglePass => collect(model, samples, config.batch_size, None)?,
        EstimationMode::Sequential => {
            let mut working = model.clone();
            let mut acc = MomentAccumulator::new();
            for level in 1..=model.max_bn_level() {
                let step = collect(&working, samples, config.batch_size, Some(level))?;
                BnStatsOverlay::from_moments(domain_tag, &step).apply_in_place(&mut working)?;
                acc.absorb(&step)?;
            }
            acc
        }
    };
    Ok(BnStatsOverlay::from_moments(domain_tag, &acc))
}

pub const POOLED_TAG: &str = "pooled";

/// Classic AdaBN: one overlay from the whole (pooled) test set.
pub fn adapt_classic<T: Float>(model: &Model<T>, test_samples: &[&Sample], config: &AdaptConfig) -> Result<BnStatsOverlay> {
    estimate_bn_stats(model, test_samples, config, POOLED_TAG)
}

/// Multi-domain AdaBN: one overlay per test domain.
pub fn adapt_multidomain<T: Float>(
    model: &Model<T>,
    test_samples: &[&Sample],
    config: &AdaptConfig,
) -> Result<BTreeMap<String, BnStatsOverlay>> {
    let mut groups: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in test_samples {
        if s.domain_id.is_empty() {
            return Err(Error::InvalidConfig(format!("sample `{}` has no domain id", s.sample_id)));
        }
        groups.entry(s.domain_id.as_str()).or_default().push(s);
    }
    if groups.is_empty() {
        return Err(Error::Empty("no test samples to adapt on".into()));
    }
    groups
        .into_iter()
        .map(|(d, group)| Ok((d.to_string(), estimate_bn_stats(model, &group, config, d)?)))
        .collect()
}

/// Per-domain adapted copies of `model`.
pub fn apply_overlays<T: Float>(model: &Model<T>, overlays: &BTreeMap<String, BnStatsOverlay>) -> Result<BTreeMap<String, Model<T>>> {
    overlays.iter().map(|(d, o)| Ok((d.clone(), o.apply(model)?))).collect()
}
