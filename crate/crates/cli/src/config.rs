//! Experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use driftseg_core::adaptation::AdaptConfig;
use driftseg_core::data::{benchmark_domains, load_dataset, synth_domain, DomainSpec, Sample};
use driftseg_core::evaluation::ScoreConfig;
use driftseg_core::model::ModelConfig;
use driftseg_core::splits::{DomainInfo, SplitKind, SplitSpec};
use driftseg_core::training::{SamplerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Invalid or unreadable configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Reads and parses a JSON file, reporting failures as configuration errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainSpec>,
    pub samples_per_domain: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: benchmark_domains(),
            samples_per_domain: 150,
            height: 64,
            width: 64,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> driftseg_core::Result<Vec<Sample>> {
        let mut out = Vec::new();
        for spec in &self.domains {
            out.extend(synth_domain(spec, self.samples_per_domain, self.height, self.width)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Directory written by `driftseg synth`.
    Path(PathBuf),
}

impl DatasetSource {
    /// Samples plus per-domain summaries (force known for synthetic domains).
    pub fn load(&self) -> anyhow::Result<(Vec<Sample>, Vec<DomainInfo>)> {
        let (samples, forces): (Vec<Sample>, Vec<(String, Option<driftseg_core::data::Force>)>) = match self {
            DatasetSource::Synthetic(spec) => {
                for d in &spec.domains {
                    d.validate().map_err(|e| config_error(e.to_string()))?;
                }
                let samples = spec.generate().map_err(|e| match e {
                    driftseg_core::Error::InvalidConfig(_) => config_error(e.to_string()),
                    e => e.into(),
                })?;
                (samples, spec.domains.iter().map(|d| (d.name.clone(), Some(d.force))).collect())
            }
            DatasetSource::Path(dir) => {
                let (manifest, samples) = load_dataset(dir)?;
                let forces = manifest
                    .domains
                    .iter()
                    .map(|d| (d.name.clone(), d.spec.as_ref().map(|s| s.force)))
                    .collect();
                (samples, forces)
            }
        };
        let infos = forces
            .into_iter()
            .map(|(name, force)| {
                let n = samples.iter().filter(|s| s.domain_id == name).count();
                DomainInfo { name, force, samples: n }
            })
            .collect();
        Ok((samples, infos))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    /// The three leave-domain-out folds.
    OodFolds,
    Gupta {
        #[serde(default)]
        tier3: Option<Vec<String>>,
    },
    Explicit {
        splits: Vec<SplitSpec>,
    },
}

impl SplitConfig {
    /// Group label used in reports.
    pub fn group(&self) -> &'static str {
        match self {
            SplitConfig::OodFolds => "ood_folds",
            SplitConfig::Gupta { .. } => "gupta",
            SplitConfig::Explicit { .. } => "explicit",
        }
    }

    pub fn build(&self, domains: &[DomainInfo]) -> anyhow::Result<Vec<SplitSpec>> {
        let splits = match self {
            SplitConfig::OodFolds => driftseg_core::splits::ood_folds(domains).map_err(|e| config_error(e.to_string()))?,
            SplitConfig::Gupta { tier3 } => {
                let names: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
                vec![driftseg_core::splits::gupta_split(&names, tier3.as_deref()).map_err(|e| config_error(e.to_string()))?]
            }
            SplitConfig::Explicit { splits } => {
                for s in splits {
                    s.validate().map_err(|e| config_error(e.to_string()))?;
                    if s.kind != SplitKind::Ood {
                        return Err(config_error(format!("explicit split `{}` must be of kind ood", s.name)));
                    }
                    for d in s.train_domains.iter().chain(&s.test_domains) {
                        if !domains.iter().any(|i| &i.name == d) {
                            return Err(config_error(format!("split `{}` names unknown domain `{d}`", s.name)));
                        }
                    }
                }
                splits.clone()
            }
        };
        Ok(splits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "swa")]
    Swa,
    #[serde(rename = "adabn_classic")]
    AdabnClassic,
    #[serde(rename = "adabn_multidomain")]
    AdabnMultidomain,
    #[serde(rename = "adabn_multidomain+swa")]
    AdabnMultidomainSwa,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::Swa,
        Method::AdabnClassic,
        Method::AdabnMultidomain,
        Method::AdabnMultidomainSwa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Swa => "swa",
            Method::AdabnClassic => "adabn_classic",
            Method::AdabnMultidomain => "adabn_multidomain",
            Method::AdabnMultidomainSwa => "adabn_multidomain+swa",
        }
    }

    /// Row label in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "Baseline",
            Method::Swa => "+SWA",
            Method::AdabnClassic => "+classic AdaBN",
            Method::AdabnMultidomain => "+multi-domain AdaBN",
            Method::AdabnMultidomainSwa => "+multi-domain AdaBN +SWA",
        }
    }

    pub fn uses_swa(self) -> bool {
        matches!(self, Method::Swa | Method::AdabnMultidomainSwa)
    }

    pub fn is_multidomain(self) -> bool {
        matches!(self, Method::AdabnMultidomain | Method::AdabnMultidomainSwa)
    }

    /// Sampler the method's model is trained with.
    pub fn sampler(self, baseline_sampler: SamplerKind) -> SamplerKind {
        if self.is_multidomain() {
            SamplerKind::Stratified
        } else {
            baseline_sampler
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_holdout() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    /// 1-based fold indices to run; all when absent.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    /// Fraction of the training domains' samples held out for the IID score.
    #[serde(default = "default_holdout")]
    pub iid_holdout: f64,
    #[serde(default)]
    pub model: ModelConfig,
    /// `sampler`, `swa.enabled` and `seed` are set per run.
    #[serde(default)]
    pub training: TrainConfig,
    /// Sampler of the baseline, SWA and classic AdaBN models.
    #[serde(default)]
    pub baseline_sampler: SamplerKind,
    #[serde(default)]
    pub adaptation: AdaptConfig,
    /// Replace the final model's running BN statistics with exact
    /// training-set statistics, as the SWA model always gets.
    #[serde(default = "default_true")]
    pub precise_bn: bool,
    #[serde(default)]
    pub scoring: ScoreConfig,
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let config: Self = read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.methods.is_empty() {
            return Err(config_error("no methods selected"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("no seeds"));
        }
        let mut dedup = self.methods.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != self.methods.len() {
            return Err(config_error("methods are listed twice"));
        }
        if !(self.iid_holdout > 0.0 && self.iid_holdout < 1.0) {
            return Err(config_error(format!("iid_holdout {} not in (0, 1)", self.iid_holdout)));
        }
        self.model.validate().map_err(|e| config_error(e.to_string()))?;
        self.training_config(SamplerKind::Mixed, true).validate().map_err(|e| config_error(e.to_string()))?;
        if let Some(folds) = &self.folds {
            if folds.is_empty() || folds.contains(&0) {
                return Err(config_error("folds are 1-based and must not be empty"));
            }
        }
        if self.adaptation.batch_size == 0 {
            return Err(config_error("adaptation.batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Training config for one model; SWA settings only validated when used.
    pub fn training_config(&self, sampler: SamplerKind, swa: bool) -> TrainConfig {
        let mut t = self.training.clone();
        t.sampler = sampler;
        t.swa.enabled = swa && self.methods.iter().any(|m| m.uses_swa());
        t
    }

    /// Hex sha256 of everything that determines a record's value. `methods`,
    /// `folds`, `seeds` and `output_dir` only select cells, so processes
    /// running disjoint cells share one hash and one results file.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            for key in ["output_dir", "methods", "folds", "seeds"] {
                obj.remove(key);
            }
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
