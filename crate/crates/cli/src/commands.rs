//! Single-step subcommands: synth, split, train, adapt, eval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use driftseg_core::adaptation::{adapt_classic, adapt_multidomain, AdaptConfig, BnStatsOverlay, POOLED_TAG};
use driftseg_core::checkpoint::{load_model, save_model};
use driftseg_core::data::{save_dataset, Sample};
use driftseg_core::evaluation::{evaluate, MetricsReport, ModelViews, ScoreConfig};
use driftseg_core::model::{Model, ModelConfig};
use driftseg_core::splits::{gupta_split, iid_split, SplitKind, SplitSpec};
use driftseg_core::training::{refresh_bn, swa_average, train, EpochLog, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{config_error, read_json, DatasetSource, SyntheticSpec};

pub fn synth(spec: Option<&Path>, out: &Path) -> Result<usize> {
    let spec: SyntheticSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    for d in &spec.domains {
        d.validate().map_err(|e| config_error(e.to_string()))?;
    }
    let samples = spec.generate()?;
    fs::create_dir_all(out)?;
    save_dataset(out, &samples, &spec.domains)?;
    Ok(samples.len())
}

/// One split plus, for IID splits, the sample ids of each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub spec: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub dataset: PathBuf,
    pub splits: Vec<SplitEntry>,
}

impl SplitFile {
    pub fn entry(&self, fold: usize) -> Result<&SplitEntry> {
        if fold == 0 || fold > self.splits.len() {
            return Err(config_error(format!("fold {fold} not in 1..={}", self.splits.len())));
        }
        Ok(&self.splits[fold - 1])
    }
}

impl SplitEntry {
    /// Samples on the requested side.
    pub fn select<'a>(&self, samples: &'a [Sample], test: bool) -> Vec<&'a Sample> {
        let ids = if test { &self.test_samples } else { &self.train_samples };
        match ids {
            Some(ids) => {
                let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                samples.iter().filter(|s| ids.contains(s.sample_id.as_str())).collect()
            }
            None => {
                let domains = if test { &self.spec.test_domains } else { &self.spec.train_domains };
                samples.iter().filter(|s| domains.contains(&s.domain_id)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitCommandKind {
    Iid,
    OodFolds,
    Gupta,
}

pub fn split(
    dataset: &Path,
    kind: SplitCommandKind,
    test_fraction: f64,
    seed: u64,
    tier3: Option<Vec<String>>,
) -> Result<SplitFile> {
    let (samples, domains) = DatasetSource::Path(dataset.to_path_buf()).load()?;
    let names: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
    let splits = match kind {
        SplitCommandKind::Iid => {
            let iid = iid_split(&samples, test_fraction, seed).map_err(|e| config_error(e.to_string()))?;
            let ids = |idx: &[usize]| idx.iter().map(|&i| samples[i].sample_id.clone()).collect();
            vec![SplitEntry {
                train_samples: Some(ids(&iid.train)),
                test_samples: Some(ids(&iid.test)),
                spec: iid.spec,
            }]
        }
        SplitCommandKind::OodFolds => driftseg_core::splits::ood_folds(&domains)
            .map_err(|e| config_error(e.to_string()))?
            .into_iter()
            .map(|spec| SplitEntry {
                spec,
                train_samples: None,
                test_samples: None,
            })
            .collect(),
        SplitCommandKind::Gupta => vec![SplitEntry {
            spec: gupta_split(&names, tier3.as_deref()).map_err(|e| config_error(e.to_string()))?,
            train_samples: None,
            test_samples: None,
        }],
    };
    Ok(SplitFile {
        dataset: dataset.to_path_buf(),
        splits,
    })
}

fn default_fold() -> usize {
    1
}

/// Input of `driftseg train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    /// File written by `driftseg split`.
    pub split: PathBuf,
    #[serde(default = "default_fold")]
    pub fold: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// Used to refresh BN statistics of the SWA model.
    #[serde(default)]
    pub adaptation: AdaptConfig,
    /// Refresh the final model's BN statistics on the training set too.
    #[serde(default = "default_true")]
    pub precise_bn: bool,
    /// Checkpoint path; the SWA model goes next to it with a `-swa` suffix.
    pub output: PathBuf,
}

fn default_true() -> bool {
    true
}

pub fn swa_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    output.with_file_name(format!("{stem}-swa.dseg"))
}

pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub swa_checkpoint: Option<PathBuf>,
    pub log: Vec<EpochLog>,
}

pub fn train_job(path: &Path) -> Result<TrainResult> {
    let job: TrainJob = read_json(path)?;
    job.model.validate().map_err(|e| config_error(e.to_string()))?;
    job.training.validate().map_err(|e| config_error(e.to_string()))?;
    let split_file: SplitFile = read_json(&job.split)?;
    let entry = split_file.entry(job.fold)?;
    let (samples, _) = DatasetSource::Path(split_file.dataset.clone()).load()?;
    let train_set = entry.select(&samples, false);
    if train_set.is_empty() {
        bail!("split `{}` selects no training samples", entry.spec.name);
    }
    let model = Model::<f32>::build_two_stream(&job.model, job.training.seed)?;
    let outcome = train(model, &train_set, &job.training)?;
    let meta = |kind: &str| -> BTreeMap<String, Value> {
        [
            ("split".to_string(), json!(entry.spec.name)),
            ("training".to_string(), json!(job.training)),
            ("kind".to_string(), json!(kind)),
        ]
        .into()
    };
    if let Some(dir) = job.output.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut last = outcome.model;
    if job.precise_bn {
        refresh_bn(&mut last, &train_set, &job.adaptation)?;
    }
    save_model(&job.output, &last, meta("last"))?;
    let swa_checkpoint = if job.training.swa.enabled {
        let mut swa = last.clone();
        swa.load_state(&swa_average(&outcome.checkpoints)?)?;
        refresh_bn(&mut swa, &train_set, &job.adaptation)?;
        let p = swa_path(&job.output);
        save_model(&p, &swa, meta("swa"))?;
        Some(p)
    } else {
        None
    };
    fs::write(job.output.with_extension("log.json"), serde_json::to_vec_pretty(&outcome.log)?)?;
    Ok(TrainResult {
        checkpoint: job.output,
        swa_checkpoint,
        log: outcome.log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AdaptMethod {
    Classic,
    Multidomain,
}

/// Writes `<out>/<tag>.bnstats` for each overlay and returns the paths.
pub fn adapt(ckpt: &Path, method: AdaptMethod, data: &Path, domains: Option<&[String]>, out: &Path, config: &AdaptConfig) -> Result<Vec<PathBuf>> {
    let (model, _) = load_model::<f32>(ckpt)?;
    let (samples, _) = DatasetSource::Path(data.to_path_buf()).load()?;
    let chosen: Vec<&Sample> = samples
        .iter()
        .filter(|s| domains.map_or(true, |d| d.contains(&s.domain_id)))
        .collect();
    if chosen.is_empty() {
        return Err(config_error("no samples selected for adaptation"));
    }
    let overlays: Vec<BnStatsOverlay> = match method {
        AdaptMethod::Classic => vec![adapt_classic(&model, &chosen, config)?],
        AdaptMethod::Multidomain => adapt_multidomain(&model, &chosen, config)?.into_values().collect(),
    };
    fs::create_dir_all(out)?;
    overlays
        .iter()
        .map(|o| {
            let p = out.join(format!("{}.bnstats", o.domain_tag));
            o.save(&p).with_context(|| format!("writing {}", p.display()))?;
            Ok(p)
        })
        .collect()
}

/// Scores a checkpoint on one side of a split, optionally with BN overlays.
/// A `pooled` overlay applies to every sample; otherwise each sample uses
/// its own domain's overlay.
pub fn eval(
    ckpt: &Path,
    overlays: &[PathBuf],
    split_path: &Path,
    fold: usize,
    train_side: bool,
    batch_size: usize,
    scoring: &ScoreConfig,
) -> Result<MetricsReport> {
    let (model, _) = load_model::<f32>(ckpt)?;
    let split_file: SplitFile = read_json(split_path)?;
    let entry = split_file.entry(fold)?;
    let (samples, _) = DatasetSource::Path(split_file.dataset.clone()).load()?;
    let chosen = entry.select(&samples, !train_side);
    if chosen.is_empty() {
        return Err(config_error(format!("split `{}` selects no samples", entry.spec.name)));
    }
    let name = match (entry.spec.kind, train_side) {
        (_, true) => format!("{}/train", entry.spec.name),
        (SplitKind::Iid, false) => format!("{}/iid", entry.spec.name),
        (SplitKind::Ood, false) => format!("{}/ood", entry.spec.name),
    };
    let loaded = overlays.iter().map(|p| BnStatsOverlay::load(p)).collect::<driftseg_core::Result<Vec<_>>>()?;
    let report = match loaded.as_slice() {
        [] => evaluate(ModelViews::Shared(&model), &chosen, &name, batch_size, scoring)?,
        [o] if o.domain_tag == POOLED_TAG => {
            let adapted = o.apply(&model)?;
            evaluate(ModelViews::Shared(&adapted), &chosen, &name, batch_size, scoring)?
        }
        many => {
            let views = many
                .iter()
                .map(|o| Ok((o.domain_tag.clone(), o.apply(&model)?)))
                .collect::<driftseg_core::Result<BTreeMap<_, _>>>()?;
            evaluate(ModelViews::PerDomain(&views), &chosen, &name, batch_size, scoring)?
        }
    };
    Ok(report)
}
