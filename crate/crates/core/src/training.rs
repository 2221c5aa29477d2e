//! Class weighting, ADAM, the epoch loop with either sampler, SWA snapshots
//! and averaging.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{estimate_bn_stats, AdaptConfig};
use crate::data::{augment, AugmentPolicy, Sample};
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, Model, ModelState};
use crate::nn::{BnMode, Float, ParameterStore, Tape, Tensor};
use crate::splits::{mixed_batches, stratified_batches, BatchPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Mixed,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwaConfig {
    pub enabled: bool,
    pub num_snapshots: usize,
    pub swa_lr: f64,
}

impl Default for SwaConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            num_snapshots: 10,
            swa_lr: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub swa: SwaConfig,
    pub augment_policy: AugmentPolicy,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-4,
            batch_size: 8,
            sampler: SamplerKind::Mixed,
            swa: SwaConfig::default(),
            augment_policy: AugmentPolicy::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.swa.enabled {
            if self.swa.num_snapshots == 0 || self.swa.num_snapshots > self.epochs {
                return bad(format!(
                    "swa.num_snapshots = {} must be in 1..=epochs ({})",
                    self.swa.num_snapshots, self.epochs
                ));
            }
            if !(self.swa.swa_lr > 0.0 && self.swa.swa_lr.is_finite()) {
                return bad(format!("swa_lr must be positive, got {}", self.swa.swa_lr));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }

    /// Learning rate of a zero-based epoch: the final `num_snapshots` epochs
    /// run at `swa_lr` when SWA is enabled.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.swa.enabled && epoch + self.swa.num_snapshots >= self.epochs {
            self.swa.swa_lr
        } else {
            self.lr
        }
    }

    /// First epoch of the SWA phase, if any.
    pub fn swa_start(&self) -> Option<usize> {
        self.swa.enabled.then(|| self.epochs - self.swa.num_snapshots)
    }
}

/// Median-frequency class weights from global pixel counts.
pub fn median_freq_weights(counts: &[u64; 5]) -> Result<[f64; 5]> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("all class counts are zero".into()));
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let k = present.len();
    let median = if k % 2 == 1 {
        present[k / 2]
    } else {
        0.5 * (present[k / 2 - 1] + present[k / 2])
    };
    let mut weights = [0.0; 5];
    for (w, &f) in weights.iter_mut().zip(&freqs) {
        if f > 0.0 {
            *w = median / f;
        }
    }
    let cap = 10.0 * weights.iter().copied().fold(0.0, f64::max);
    for (w, &f) in weights.iter_mut().zip(&freqs) {
        if f == 0.0 {
            *w = cap;
        }
    }
    Ok(weights)
}

/// First and second moment estimates, one per parameter storage slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParameterStore<T>, config: AdamConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
            config,
        }
    }
}

/// One bias-corrected ADAM update from the gradients held in `params`.
pub fn adam_step<T: Float>(params: &mut ParameterStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape("adam", format!("{} moment slots for {} parameters", state.m.len(), params.len())));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for `{}` at step {}", p.name, state.t + 1)));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::shape("adam", format!("moment shape for `{}`", p.name)));
        }
        let g = p.grad.data();
        for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            *theta -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Parameter snapshot taken after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub epoch: usize,
    pub state: ModelState<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointSet<T> {
    pub snapshots: Vec<Snapshot<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    pub dropped: usize,
}

/// Resumable training state: model, optimizer and epoch counter. Cloning a
/// trainer branches a run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub class_weights: [f64; 5],
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    samples: &'a [&'a Sample],
}

impl<'a> Trainer<'a> {
    /// Prepares training on `samples`; class weights are computed once from
    /// their masks.
    pub fn new(model: Model<f32>, samples: &'a [&'a Sample], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Empty("empty training set".into()));
        }
        let mut counts = [0u64; 5];
        for s in samples {
            for (c, n) in counts.iter_mut().zip(s.class_counts()) {
                *c += n;
            }
        }
        let class_weights = median_freq_weights(&counts)?;
        let adam = AdamState::new(&model.params, config.adam);
        Ok(Self {
            model,
            adam,
            config,
            class_weights,
            epoch: 0,
            log: Vec::new(),
            samples,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Batch plan of the upcoming epoch.
    pub fn plan(&self) -> Result<BatchPlan> {
        let seed = epoch_rng(self.config.seed, self.epoch).gen::<u64>();
        match self.config.sampler {
            SamplerKind::Mixed => mixed_batches(self.samples, self.config.batch_size, seed),
            SamplerKind::Stratified => stratified_batches(self.samples, self.config.batch_size, seed),
        }
    }

    /// Runs one epoch at `lr` and returns its log entry.
    pub fn run_epoch(&mut self, lr: f64) -> Result<EpochLog> {
        let plan = self.plan()?;
        if plan.batches.is_empty() {
            return Err(Error::Empty(format!(
                "no full batch of size {} in the training set",
                self.config.batch_size
            )));
        }
        if plan.dropped > 0 {
            log::debug!("epoch {}: drop-last left out {} samples", self.epoch, plan.dropped);
        }
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let _ = rng.gen::<u64>();
        let weights: Vec<f32> = self.class_weights.iter().map(|&w| w as f32).collect();
        let mut loss_sum = 0.0;
        for batch in &plan.batches {
            if self.config.sampler == SamplerKind::Stratified {
                debug_assert!(batch.indices.iter().all(|&i| self.samples[i].domain_id == batch.domain));
            }
            let seeds: Vec<u64> = batch.indices.iter().map(|_| rng.gen()).collect();
            let policy = &self.config.augment_policy;
            let augmented: Vec<Sample> = batch
                .indices
                .par_iter()
                .zip(seeds)
                .map(|(&i, s)| {
                    if policy.is_identity() {
                        self.samples[i].clone()
                    } else {
                        augment(self.samples[i], &mut ChaCha8Rng::seed_from_u64(s), policy)
                    }
                })
                .collect();
            loss_sum += self.step(&augmented, &weights, lr)?;
        }
        let entry = EpochLog {
            epoch: self.epoch,
            lr,
            mean_loss: loss_sum / plan.batches.len() as f64,
            batches: plan.batches.len(),
            dropped: plan.dropped,
        };
        log::info!("epoch {} lr {:.2e} loss {:.5}", entry.epoch, lr, entry.mean_loss);
        self.log.push(entry.clone());
        self.epoch += 1;
        Ok(entry)
    }

    fn step(&mut self, batch: &[Sample], weights: &[f32], lr: f64) -> Result<f64> {
        let (h, w) = (batch[0].height, batch[0].width);
        if batch.iter().any(|s| s.height != h || s.width != w) {
            return Err(Error::shape("train", "mixed image sizes in one batch".to_string()));
        }
        let pre: Vec<&[u8]> = batch.iter().map(|s| s.pre.as_slice()).collect();
        let post: Vec<&[u8]> = batch.iter().map(|s| s.post.as_slice()).collect();
        let targets: Vec<u8> = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let mut tape = Tape::new();
        let out = self.model.forward(
            &mut tape,
            &images_to_tensor(&pre, h, w)?,
            &images_to_tensor(&post, h, w)?,
            BnMode::Train,
        )?;
        let logits = out.logits.expect("full pass yields logits");
        let loss = tape.weighted_softmax_ce(logits, &targets, weights).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(format!("non-finite loss in epoch {}", self.epoch)),
            other => other,
        })?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {value} in epoch {}", self.epoch)));
        }
        self.model.params.zero_grad();
        tape.backward(loss, &mut self.model.params)?;
        adam_step(&mut self.model.params, &mut self.adam, lr)?;
        self.model.apply_bn_updates(&out.moments)?;
        Ok(value)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trained model, SWA snapshots (empty without SWA) and the loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub checkpoints: CheckpointSet<f32>,
    pub log: Vec<EpochLog>,
}

/// Full training run per `config`.
pub fn train(model: Model<f32>, samples: &[&Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, samples, config.clone())?;
    let mut checkpoints = CheckpointSet::default();
    while !trainer.finished() {
        let epoch = trainer.epoch;
        trainer.run_epoch(config.lr_at(epoch))?;
        if config.swa_start().is_some_and(|s| epoch >= s) {
            checkpoints.snapshots.push(Snapshot {
                epoch,
                state: trainer.model.state(),
            });
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoints,
        log: trainer.log,
    })
}

/// Elementwise mean of the learnable parameters (accumulated in f64). BN
/// buffers are copied from the last snapshot and should be refreshed.
pub fn swa_average<T: Float>(checkpoints: &CheckpointSet<T>) -> Result<ModelState<T>> {
    let first = checkpoints
        .snapshots
        .first()
        .ok_or_else(|| Error::Empty("no SWA snapshots".into()))?;
    let mut sums: Vec<Vec<f64>> = first.state.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for snap in &checkpoints.snapshots {
        if snap.state.params.len() != first.state.params.len() {
            return Err(Error::shape("swa_average", format!("snapshot of epoch {} has a different parameter set", snap.epoch)));
        }
        for ((acc, (name, t)), (name0, t0)) in sums.iter_mut().zip(&snap.state.params).zip(&first.state.params) {
            if name != name0 || t.shape() != t0.shape() {
                return Err(Error::shape("swa_average", format!("`{name}` in epoch {} does not match `{name0}`", snap.epoch)));
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v.as_f64();
            }
        }
    }
    let k = checkpoints.snapshots.len() as f64;
    let last = &checkpoints.snapshots[checkpoints.snapshots.len() - 1].state;
    let params = first
        .state
        .params
        .iter()
        .zip(sums)
        .map(|((name, t), acc)| {
            let data = acc.into_iter().map(|s| T::of(s / k)).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    Ok(ModelState {
        params,
        bn: last.bn.clone(),
    })
}

/// Recomputes every BN layer's running statistics as exact moments over
/// `samples` (eval-mode augmentation-free inputs).
pub fn refresh_bn<T: Float>(model: &mut Model<T>, samples: &[&Sample], config: &AdaptConfig) -> Result<()> {
    let overlay = estimate_bn_stats(model, samples, config, "refresh")?;
    overlay.apply_in_place(model)
}

/// Per-epoch learning rates of a config, for inspection.
pub fn lr_schedule(config: &TrainConfig) -> BTreeMap<usize, f64> {
    (0..config.epochs).map(|e| (e, config.lr_at(e))).collect()
}
