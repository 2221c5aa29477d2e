//! Config-driven pipeline: split, train (cached per sampler), adapt, evaluate,
//! and append one JSON line per (method, split, seed).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use driftseg_core::adaptation::{adapt_classic, adapt_multidomain, apply_overlays, AdaptConfig};
use driftseg_core::checkpoint::{load_model, save_model};
use driftseg_core::data::Sample;
use driftseg_core::evaluation::{evaluate, gain, gap, MetricsReport, ModelViews, ScoreConfig};
use driftseg_core::model::Model;
use driftseg_core::splits::{iid_split, SplitSpec};
use driftseg_core::training::{refresh_bn, swa_average, CheckpointSet, EpochLog, SamplerKind, Snapshot, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Method};

pub const RESULTS_FILE: &str = "results.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub split_group: String,
    pub split: String,
    pub seed: u64,
    /// Sampler the evaluated model was trained with.
    pub sampler: SamplerKind,
    pub iid_xview2: f64,
    pub ood_xview2: f64,
    pub gap: f64,
    /// OOD score minus the baseline's for the same split and seed.
    pub gain: Option<f64>,
    /// Seconds, including any training first needed by this record.
    pub wall_time: f64,
    pub config_hash: String,
    pub iid_report: MetricsReport,
    pub ood_report: MetricsReport,
}

impl RunRecord {
    pub fn key(&self) -> (Method, String, u64) {
        (self.method, self.split.clone(), self.seed)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

/// Outcome of one `run` call.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub new_records: Vec<RunRecord>,
    /// Every record of this config, old and new.
    pub records: Vec<RunRecord>,
}

/// The final and (optionally) SWA-averaged model of one training run.
struct TrainedModels {
    last: Model<f32>,
    swa: Option<Model<f32>>,
}

struct Cell<'a> {
    config: &'a ExperimentConfig,
    hash: &'a str,
    split: &'a SplitSpec,
    seed: u64,
    train: Vec<&'a Sample>,
    iid_test: Vec<&'a Sample>,
    ood_test: Vec<&'a Sample>,
    models_dir: PathBuf,
    trained: BTreeMap<SamplerKind, TrainedModels>,
}

impl<'a> Cell<'a> {
    fn needs_swa(&self, sampler: SamplerKind) -> bool {
        self.config
            .methods
            .iter()
            .any(|m| m.uses_swa() && m.sampler(self.config.baseline_sampler) == sampler)
    }

    fn model_path(&self, sampler: SamplerKind, kind: &str) -> PathBuf {
        let sampler = match sampler {
            SamplerKind::Mixed => "mixed",
            SamplerKind::Stratified => "stratified",
        };
        self.models_dir.join(format!("{}-seed{}-{sampler}-{kind}.dseg", self.split.name, self.seed))
    }

    fn metadata(&self, sampler: SamplerKind, kind: &str) -> BTreeMap<String, Value> {
        [
            ("config_hash".to_string(), json!(self.hash)),
            ("split".to_string(), json!(self.split.name)),
            ("seed".to_string(), json!(self.seed)),
            ("sampler".to_string(), json!(sampler)),
            ("kind".to_string(), json!(kind)),
        ]
        .into()
    }

    fn load_cached(&self, sampler: SamplerKind) -> Option<TrainedModels> {
        let load = |kind: &str| -> Option<Model<f32>> {
            let (model, meta) = load_model::<f32>(&self.model_path(sampler, kind)).ok()?;
            (meta.get("config_hash").and_then(Value::as_str) == Some(self.hash)).then_some(model)
        };
        let last = load("last")?;
        let swa = if self.needs_swa(sampler) { Some(load("swa")?) } else { None };
        Some(TrainedModels { last, swa })
    }

    fn models(&mut self, sampler: SamplerKind) -> Result<&TrainedModels> {
        if !self.trained.contains_key(&sampler) {
            let models = match self.load_cached(sampler) {
                Some(m) => {
                    log::info!("{} seed {}: reusing cached {sampler:?} model", self.split.name, self.seed);
                    m
                }
                None => self.train(sampler)?,
            };
            self.trained.insert(sampler, models);
        }
        Ok(&self.trained[&sampler])
    }

    fn train(&self, sampler: SamplerKind) -> Result<TrainedModels> {
        let need_swa = self.needs_swa(sampler);
        let mut config = self.config.training_config(sampler, need_swa);
        config.seed = self.seed;
        log::info!(
            "{} seed {}: training {sampler:?} model on {} samples ({} epochs)",
            self.split.name,
            self.seed,
            self.train.len(),
            config.epochs
        );
        let model = Model::<f32>::build_two_stream(&self.config.model, self.seed)?;
        let mut trainer = Trainer::new(model, &self.train, config.clone())?;
        let (last, swa, log) = match config.swa_start() {
            None => {
                while !trainer.finished() {
                    trainer.run_epoch(config.lr)?;
                }
                (trainer.model, None, trainer.log)
            }
            Some(start) => {
                while trainer.epoch < start {
                    trainer.run_epoch(config.lr)?;
                }
                let swa_lr = config.swa.swa_lr;
                // Equal rates: the SWA tail is the end of the plain run itself.
                let mut branch = (swa_lr != config.lr).then(|| trainer.clone());
                let mut checkpoints = CheckpointSet::default();
                while !trainer.finished() {
                    trainer.run_epoch(config.lr)?;
                    if branch.is_none() {
                        checkpoints.snapshots.push(Snapshot {
                            epoch: trainer.epoch - 1,
                            state: trainer.model.state(),
                        });
                    }
                }
                let mut log = trainer.log.clone();
                if let Some(b) = branch.as_mut() {
                    while !b.finished() {
                        b.run_epoch(swa_lr)?;
                        checkpoints.snapshots.push(Snapshot {
                            epoch: b.epoch - 1,
                            state: b.model.state(),
                        });
                    }
                    log.extend(b.log[start..].iter().cloned());
                }
                let mut swa = trainer.model.clone();
                swa.load_state(&swa_average(&checkpoints)?)?;
                refresh_bn(&mut swa, &self.train, &self.config.adaptation)?;
                (trainer.model, Some(swa), log)
            }
        };
        let mut last = last;
        if self.config.precise_bn {
            refresh_bn(&mut last, &self.train, &self.config.adaptation)?;
        }
        fs::create_dir_all(&self.models_dir)?;
        save_model(&self.model_path(sampler, "last"), &last, self.metadata(sampler, "last"))?;
        if let Some(swa) = &swa {
            save_model(&self.model_path(sampler, "swa"), swa, self.metadata(sampler, "swa"))?;
        }
        write_log(&self.model_path(sampler, "log").with_extension("json"), &log)?;
        Ok(TrainedModels { last, swa })
    }

    fn score(&mut self, method: Method) -> Result<(MetricsReport, MetricsReport, SamplerKind)> {
        let sampler = method.sampler(self.config.baseline_sampler);
        let adapt: AdaptConfig = self.config.adaptation;
        let scoring: ScoreConfig = self.config.scoring;
        let batch = adapt.batch_size;
        let (iid_test, ood_test) = (self.iid_test.clone(), self.ood_test.clone());
        let models = self.models(sampler)?;
        let model = if method.uses_swa() {
            models.swa.as_ref().expect("SWA model trained when an SWA method is configured")
        } else {
            &models.last
        };
        let eval_on = |samples: &[&Sample], name: &str| -> Result<MetricsReport> {
            Ok(match method {
                Method::Baseline | Method::Swa => evaluate(ModelViews::Shared(model), samples, name, batch, &scoring)?,
                Method::AdabnClassic => {
                    let adapted = adapt_classic(model, samples, &adapt)?.apply(model)?;
                    evaluate(ModelViews::Shared(&adapted), samples, name, batch, &scoring)?
                }
                Method::AdabnMultidomain | Method::AdabnMultidomainSwa => {
                    let views = apply_overlays(model, &adapt_multidomain(model, samples, &adapt)?)?;
                    evaluate(ModelViews::PerDomain(&views), samples, name, batch, &scoring)?
                }
            })
        };
        let iid = eval_on(&iid_test, "iid")?;
        let ood = eval_on(&ood_test, "ood")?;
        Ok((iid, ood, sampler))
    }
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(log)?)?;
    Ok(())
}

fn select<'a>(samples: &'a [Sample], domains: &[String]) -> Vec<&'a Sample> {
    let set: BTreeSet<&str> = domains.iter().map(String::as_str).collect();
    samples.iter().filter(|s| set.contains(s.domain_id.as_str())).collect()
}

/// Runs every pending (split, seed, method) cell of `config`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let hash = config.hash();
    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating output directory {}", config.output_dir.display()))?;
    fs::write(config.output_dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    let results_path = config.output_dir.join(RESULTS_FILE);
    let mut records: Vec<RunRecord> = read_records(&results_path)?
        .into_iter()
        .filter(|r| r.config_hash == hash)
        .collect();
    let done: BTreeSet<(Method, String, u64)> = records.iter().map(RunRecord::key).collect();

    let (samples, domains) = config.dataset.load()?;
    let mut splits = config.split.build(&domains)?;
    if let Some(folds) = &config.folds {
        if let Some(&bad) = folds.iter().find(|&&f| f > splits.len()) {
            return Err(crate::config::config_error(format!("fold {bad} requested but only {} exist", splits.len())));
        }
        splits = folds.iter().map(|&f| splits[f - 1].clone()).collect();
    }
    let models_dir = config.output_dir.join("models").join(&hash[..16]);
    let mut new_records = Vec::new();
    for split in &splits {
        for &seed in &config.seeds {
            // Canonical order puts the baseline first so later records get a gain.
            let pending: Vec<Method> = Method::ALL
                .into_iter()
                .filter(|m| config.methods.contains(m) && !done.contains(&(*m, split.name.clone(), seed)))
                .collect();
            if pending.is_empty() {
                continue;
            }
            let train_all = select(&samples, &split.train_domains);
            let ood_test = select(&samples, &split.test_domains);
            if train_all.is_empty() || ood_test.is_empty() {
                return Err(crate::config::config_error(format!("split `{}` selects no samples on one side", split.name)));
            }
            let iid = iid_split(&train_all, config.iid_holdout, seed)?;
            let mut cell = Cell {
                config,
                hash: &hash,
                split,
                seed,
                train: iid.train.iter().map(|&i| train_all[i]).collect(),
                iid_test: iid.test.iter().map(|&i| train_all[i]).collect(),
                ood_test,
                models_dir: models_dir.clone(),
                trained: BTreeMap::new(),
            };
            let mut baseline_ood = records
                .iter()
                .find(|r| r.method == Method::Baseline && r.split == split.name && r.seed == seed)
                .map(|r| r.ood_xview2);
            for method in pending {
                let start = Instant::now();
                let (iid_report, ood_report, sampler) = cell.score(method)?;
                let record = RunRecord {
                    method,
                    split_group: config.split.group().to_string(),
                    split: split.name.clone(),
                    seed,
                    sampler,
                    iid_xview2: iid_report.xview2,
                    ood_xview2: ood_report.xview2,
                    gap: gap(iid_report.xview2, ood_report.xview2),
                    gain: match method {
                        Method::Baseline => None,
                        _ => baseline_ood.map(|b| gain(ood_report.xview2, b)),
                    },
                    wall_time: start.elapsed().as_secs_f64(),
                    config_hash: hash.clone(),
                    iid_report,
                    ood_report,
                };
                if method == Method::Baseline {
                    baseline_ood = Some(record.ood_xview2);
                }
                log::info!(
                    "{} seed {seed} {method}: iid {:.4} ood {:.4} ({:.1}s)",
                    split.name,
                    record.iid_xview2,
                    record.ood_xview2,
                    record.wall_time
                );
                append_record(&results_path, &record)?;
                records.push(record.clone());
                new_records.push(record);
            }
        }
    }
    Ok(RunSummary { new_records, records })
}
