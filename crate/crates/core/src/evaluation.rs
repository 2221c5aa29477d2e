//! Confusion matrices, F1-based scores, generalization gap and gain.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{argmax_classes, images_to_tensor, Model};
use crate::nn::{BnMode, Float, Tape};

pub const NUM_CLASSES: usize = 5;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        let mut cm = Self::new();
        cm.add_masks(pred, gt)?;
        Ok(cm)
    }

    pub fn add_masks(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        if let Some(&v) = pred.iter().chain(gt).find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::OutOfRange(format!("class {v}")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn merge<'a>(cms: impl IntoIterator<Item = &'a ConfusionMatrix>) -> ConfusionMatrix {
    let mut out = ConfusionMatrix::new();
    for cm in cms {
        out.merge_from(cm);
    }
    out
}

/// How a class that is neither present nor predicted is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsentClassRule {
    /// Counts as a perfect 1.0.
    #[default]
    One,
    /// Left out of the aggregate.
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub loc_weight: f64,
    pub dmg_weight: f64,
    pub absent: AbsentClassRule,
    /// Lower clamp on each damage F1 before the harmonic mean.
    pub clamp: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            loc_weight: 0.3,
            dmg_weight: 0.7,
            absent: AbsentClassRule::One,
            clamp: 1e-6,
        }
    }
}

fn f1_counts(tp: u64, fp: u64, fn_: u64, rule: AbsentClassRule) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return match rule {
            AbsentClassRule::One => Some(1.0),
            AbsentClassRule::Excluded => None,
        };
    }
    Some(2.0 * tp as f64 / denom as f64)
}

/// One-vs-rest F1 of `class`, `None` when excluded by the absent-class rule.
pub fn f1_with(cm: &ConfusionMatrix, class: usize, rule: AbsentClassRule) -> Option<f64> {
    let tp = cm.counts[class][class];
    let fp: u64 = (0..NUM_CLASSES).filter(|&g| g != class).map(|g| cm.counts[g][class]).sum();
    let fn_: u64 = (0..NUM_CLASSES).filter(|&p| p != class).map(|p| cm.counts[class][p]).sum();
    f1_counts(tp, fp, fn_, rule)
}

pub fn f1(cm: &ConfusionMatrix, class: usize) -> f64 {
    f1_with(cm, class, AbsentClassRule::One).expect("absent class scores 1")
}

/// Building-vs-background F1 (classes 1..=4 pooled).
pub fn loc_f1_with(cm: &ConfusionMatrix, rule: AbsentClassRule) -> Option<f64> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for g in 0..NUM_CLASSES {
        for p in 0..NUM_CLASSES {
            let v = cm.counts[g][p];
            match (g > 0, p > 0) {
                (true, true) => tp += v,
                (false, true) => fp += v,
                (true, false) => fn_ += v,
                (false, false) => {}
            }
        }
    }
    f1_counts(tp, fp, fn_, rule)
}

pub fn loc_f1(cm: &ConfusionMatrix) -> f64 {
    loc_f1_with(cm, AbsentClassRule::One).expect("absent class scores 1")
}

/// Harmonic mean of the clamped per-class damage F1s (`None` entries skipped).
pub fn harmonic_damage(f1s: &[Option<f64>], clamp: f64) -> f64 {
    let kept: Vec<f64> = f1s.iter().flatten().map(|&f| f.max(clamp)).collect();
    if kept.is_empty() {
        return 1.0;
    }
    kept.len() as f64 / kept.iter().map(|f| 1.0 / f).sum::<f64>()
}

pub fn dmg_f1_with(cm: &ConfusionMatrix, config: &ScoreConfig) -> f64 {
    let f1s: Vec<Option<f64>> = (1..NUM_CLASSES).map(|c| f1_with(cm, c, config.absent)).collect();
    harmonic_damage(&f1s, config.clamp)
}

pub fn dmg_f1(cm: &ConfusionMatrix) -> f64 {
    dmg_f1_with(cm, &ScoreConfig::default())
}

pub fn xview2_with(loc: f64, dmg: f64, config: &ScoreConfig) -> f64 {
    config.loc_weight * loc + config.dmg_weight * dmg
}

pub fn xview2(loc: f64, dmg: f64) -> f64 {
    xview2_with(loc, dmg, &ScoreConfig::default())
}

/// IID score minus OOD score of the same model.
pub fn gap(iid_score: f64, ood_score: f64) -> f64 {
    iid_score - ood_score
}

/// OOD improvement of a method over its baseline.
pub fn gain(ood_method: f64, ood_baseline: f64) -> f64 {
    ood_method - ood_baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split_name: String,
    pub n_pixels: u64,
    pub loc_f1: f64,
    /// Damage classes undamaged, minor, major, destroyed (ids 1..=4);
    /// `None` for a class left out by the absent-class rule.
    pub f1_per_class: [Option<f64>; 4],
    pub dmg_f1: f64,
    pub xview2: f64,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub domains: BTreeMap<String, MetricsReport>,
}

impl MetricsReport {
    pub fn from_confusion(split_name: impl Into<String>, cm: ConfusionMatrix, config: &ScoreConfig) -> Self {
        let loc = loc_f1_with(&cm, config.absent).unwrap_or(1.0);
        let per: Vec<Option<f64>> = (1..NUM_CLASSES).map(|c| f1_with(&cm, c, config.absent)).collect();
        let dmg = harmonic_damage(&per, config.clamp);
        let f1_per_class = [per[0], per[1], per[2], per[3]];
        Self {
            split_name: split_name.into(),
            n_pixels: cm.total(),
            loc_f1: loc,
            f1_per_class,
            dmg_f1: dmg,
            xview2: xview2_with(loc, dmg, config),
            confusion: cm,
            domains: BTreeMap::new(),
        }
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn fold_summary(scores: &[f64]) -> Result<FoldSummary> {
    if scores.is_empty() {
        return Err(Error::Empty("no fold scores".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(FoldSummary {
        mean,
        std: var.sqrt(),
        n: scores.len(),
    })
}

/// The model (or per-domain adapted models) used for inference.
#[derive(Debug, Clone, Copy)]
pub enum ModelViews<'a, T> {
    Shared(&'a Model<T>),
    PerDomain(&'a BTreeMap<String, Model<T>>),
}

impl<'a, T> ModelViews<'a, T> {
    fn for_domain(&self, domain: &str) -> Result<&'a Model<T>> {
        match self {
            Self::Shared(m) => Ok(m),
            Self::PerDomain(map) => map.get(domain).ok_or_else(|| Error::MissingDomainView(domain.to_string())),
        }
    }
}

/// Eval-mode class predictions, one mask per sample.
pub fn predict<T: Float>(model: &Model<T>, samples: &[&Sample], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let batch_size = batch_size.max(1);
    let chunks: Vec<Result<Vec<Vec<u8>>>> = samples
        .par_chunks(batch_size)
        .map(|chunk| {
            let (h, w) = (chunk[0].height, chunk[0].width);
            if chunk.iter().any(|s| s.height != h || s.width != w) {
                return Err(Error::shape("predict", "mixed image sizes in one batch".to_string()));
            }
            let pre: Vec<&[u8]> = chunk.iter().map(|s| s.pre.as_slice()).collect();
            let post: Vec<&[u8]> = chunk.iter().map(|s| s.post.as_slice()).collect();
            let mut tape = Tape::inference();
            let out = model.forward(&mut tape, &images_to_tensor(&pre, h, w)?, &images_to_tensor(&post, h, w)?, BnMode::Eval)?;
            let logits = out.logits.expect("full pass yields logits");
            let classes = argmax_classes(tape.value(logits))?;
            Ok(classes.chunks_exact(h * w).map(<[u8]>::to_vec).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Scores `samples`, globally and per domain.
pub fn evaluate<T: Float>(
    views: ModelViews<'_, T>,
    samples: &[&Sample],
    split_name: &str,
    batch_size: usize,
    config: &ScoreConfig,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty(format!("no samples to evaluate for `{split_name}`")));
    }
    let mut by_domain: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_domain.entry(s.domain_id.as_str()).or_default().push(s);
    }
    let mut domain_cms = BTreeMap::new();
    for (domain, group) in &by_domain {
        let model = views.for_domain(domain)?;
        let preds = predict(model, group, batch_size)?;
        let mut cm = ConfusionMatrix::new();
        for (p, s) in preds.iter().zip(group) {
            cm.add_masks(p, &s.mask)?;
        }
        domain_cms.insert(domain.to_string(), cm);
    }
    let mut report = MetricsReport::from_confusion(split_name, merge(domain_cms.values()), config);
    report.domains = domain_cms
        .into_iter()
        .map(|(d, cm)| (d.clone(), MetricsReport::from_confusion(d, cm, config)))
        .collect();
    Ok(report)
}
