//! IID and leave-domain-out splits, and the mixed and single-domain batch samplers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Force, HasDomain};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Iid,
    Ood,
}

/// Assignment of domains to the train and test side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub kind: SplitKind,
    pub train_domains: Vec<String>,
    pub test_domains: Vec<String>,
}

impl SplitSpec {
    pub fn ood(name: impl Into<String>, train: impl IntoIterator<Item = String>, test: impl IntoIterator<Item = String>) -> Result<Self> {
        let spec = SplitSpec {
            name: name.into(),
            kind: SplitKind::Ood,
            train_domains: train.into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
            test_domains: test.into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_domains.is_empty() || self.test_domains.is_empty() {
            return Err(Error::InvalidConfig(format!("split `{}` has an empty side", self.name)));
        }
        if self.kind == SplitKind::Ood {
            if let Some(d) = self.train_domains.iter().find(|d| self.test_domains.contains(d)) {
                return Err(Error::InvalidConfig(format!("split `{}` has `{d}` on both sides", self.name)));
            }
        }
        Ok(())
    }

    pub fn is_train(&self, domain: &str) -> bool {
        self.train_domains.iter().any(|d| d == domain)
    }

    pub fn is_test(&self, domain: &str) -> bool {
        self.test_domains.iter().any(|d| d == domain)
    }
}

/// Disasters in the test sets of the three OOD-xBD folds.
pub const XBD_OOD_FOLDS: [&[&str]; 3] = [
    &["joplin-tornado", "pinery-bushfire", "sunda-tsunami"],
    &["moore-tornado", "portugal-wildfire"],
    &["tuscaloosa-tornado", "lower-puna-volcano", "woolsey-fire"],
];

/// All nineteen xBD disasters.
pub const XBD_DISASTERS: [&str; 19] = [
    "guatemala-volcano",
    "hurricane-florence",
    "hurricane-harvey",
    "hurricane-matthew",
    "hurricane-michael",
    "joplin-tornado",
    "lower-puna-volcano",
    "mexico-earthquake",
    "midwest-flooding",
    "moore-tornado",
    "nepal-flooding",
    "palu-tsunami",
    "pinery-bushfire",
    "portugal-wildfire",
    "santa-rosa-wildfire",
    "socal-fire",
    "sunda-tsunami",
    "tuscaloosa-tornado",
    "woolsey-fire",
];

/// Canonical form of a disaster name: lowercase, words joined by `-`.
pub fn canonical_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Domain summary used to build leave-domain-out splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub name: String,
    pub force: Option<Force>,
    pub samples: usize,
}

/// Train/test sample indices of an IID split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IidSplit {
    pub spec: SplitSpec,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn group_by_domain<S: HasDomain>(samples: &[S]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.domain()).or_default().push(i);
    }
    groups
}

/// Random per-domain proportional partition; every domain with at least two
/// samples lands on both sides.
pub fn iid_split<S: HasDomain>(samples: &[S], test_fraction: f64, seed: u64) -> Result<IidSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::OutOfRange(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    if samples.len() < 2 {
        return Err(Error::Empty("an IID split needs at least two samples".into()));
    }
    let groups = group_by_domain(samples);
    // Largest-remainder apportionment of the global test count.
    let target = (test_fraction * samples.len() as f64).round() as usize;
    let ideal: Vec<f64> = groups.values().map(|g| test_fraction * g.len() as f64).collect();
    let mut quota: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &k in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[k] < groups.values().nth(k).map_or(0, Vec::len) {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((domain, idx), q) in groups.iter().zip(quota) {
        let n = idx.len();
        let q = if n >= 2 { q.clamp(1, n - 1) } else { 0 };
        if n < 2 {
            log::warn!("domain `{domain}` has a single sample; it stays on the train side");
        }
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        test.extend_from_slice(&shuffled[..q]);
        train.extend_from_slice(&shuffled[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let domains: Vec<String> = groups.keys().map(|d| d.to_string()).collect();
    Ok(IidSplit {
        spec: SplitSpec {
            name: format!("iid-{seed}"),
            kind: SplitKind::Iid,
            train_domains: domains.clone(),
            test_domains: domains,
        },
        train,
        test,
    })
}

/// The three OOD folds. Uses the built-in OOD-xBD tables when all eight fold
/// disasters are present; otherwise each fold tests one domain per force,
/// spreading test duty evenly and balancing test sample counts.
pub fn ood_folds(domains: &[DomainInfo]) -> Result<Vec<SplitSpec>> {
    if domains.len() < 2 {
        return Err(Error::InvalidConfig("leave-domain-out folds need at least two domains".into()));
    }
    let canon: BTreeMap<String, &str> = domains.iter().map(|d| (canonical_name(&d.name), d.name.as_str())).collect();
    let xbd = XBD_OOD_FOLDS.iter().flat_map(|f| f.iter()).all(|n| canon.contains_key(*n));
    let test_sets: Vec<Vec<String>> = if xbd {
        XBD_OOD_FOLDS
            .iter()
            .map(|fold| fold.iter().map(|n| canon[*n].to_string()).collect())
            .collect()
    } else {
        balanced_test_sets(domains)
    };
    test_sets
        .into_iter()
        .enumerate()
        .map(|(f, test)| {
            let train: Vec<String> = domains.iter().map(|d| d.name.clone()).filter(|d| !test.contains(d)).collect();
            SplitSpec::ood(format!("ood-fold{}", f + 1), train, test)
        })
        .collect()
}

fn balanced_test_sets(domains: &[DomainInfo]) -> Vec<Vec<String>> {
    let mut by_force: BTreeMap<Option<Force>, Vec<&DomainInfo>> = BTreeMap::new();
    for d in domains {
        by_force.entry(d.force).or_default().push(d);
    }
    for list in by_force.values_mut() {
        list.sort_by(|a, b| a.name.cmp(&b.name));
    }
    let present: Vec<Force> = by_force.keys().flatten().copied().collect();
    if present.len() < Force::ALL.len() {
        log::warn!("domains cover forces {present:?} only; folds balance what is available");
    }
    let total: usize = domains.iter().map(|d| d.samples).sum();
    let mut usage: BTreeMap<&str, usize> = BTreeMap::new();
    let mut together: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut folds = Vec::new();
    for _ in 0..3 {
        let mut fold: Vec<&DomainInfo> = Vec::new();
        let groups = by_force.len();
        for list in by_force.values() {
            // Keep at least one domain of every force on the train side.
            if list.len() < 2 && groups > 1 {
                continue;
            }
            let target = total as f64 / (2 * groups) as f64;
            let so_far: usize = fold.iter().map(|d| d.samples).sum();
            let pick = list
                .iter()
                .min_by(|a, b| {
                    let key = |d: &DomainInfo| {
                        let co: usize = fold
                            .iter()
                            .map(|o| together.get(&pair(&d.name, &o.name)).copied().unwrap_or(0))
                            .sum();
                        let imbalance = ((so_far + d.samples) as f64 - target * (fold.len() + 1) as f64).abs();
                        (usage.get(d.name.as_str()).copied().unwrap_or(0), co, imbalance)
                    };
                    let (ka, kb) = (key(a), key(b));
                    ka.0.cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.total_cmp(&kb.2)).then(a.name.cmp(&b.name))
                })
                .expect("non-empty force group");
            fold.push(pick);
        }
        if fold.is_empty() {
            // Single-force data: rotate through its domains.
            let list = by_force.values().next().expect("at least one domain");
            let pick = list
                .iter()
                .min_by_key(|d| (usage.get(d.name.as_str()).copied().unwrap_or(0), d.name.clone()))
                .expect("non-empty");
            fold.push(pick);
        }
        for d in &fold {
            *usage.entry(d.name.as_str()).or_default() += 1;
            for o in &fold {
                if d.name < o.name {
                    *together.entry(pair(&d.name, &o.name)).or_default() += 1;
                }
            }
        }
        folds.push(fold.iter().map(|d| d.name.clone()).collect());
    }
    folds
}

fn pair<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// The Gupta split: tier-3 disasters (explicit list, or the union of the
/// OOD-xBD fold test sets) against everything else.
pub fn gupta_split(domains: &[String], tier3: Option<&[String]>) -> Result<SplitSpec> {
    let test: Vec<String> = match tier3 {
        Some(list) => {
            if let Some(missing) = list.iter().find(|t| !domains.contains(t)) {
                return Err(Error::UnknownName(missing.clone()));
            }
            list.to_vec()
        }
        None => {
            let canon: BTreeMap<String, &String> = domains.iter().map(|d| (canonical_name(d), d)).collect();
            XBD_OOD_FOLDS
                .iter()
                .flat_map(|f| f.iter())
                .map(|n| {
                    canon
                        .get(*n)
                        .map(|d| d.to_string())
                        .ok_or_else(|| Error::InvalidConfig(format!("no xBD disaster `{n}` and no explicit tier-3 list")))
                })
                .collect::<Result<_>>()?
        }
    };
    let train: Vec<String> = domains.iter().filter(|d| !test.contains(d)).cloned().collect();
    SplitSpec::ood("gupta", train, test)
}

/// One minibatch: sample indices and the domain they share (`"mixed"` otherwise).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    /// Samples left out of this epoch by drop-last.
    pub dropped: usize,
}

pub const MIXED_DOMAIN: &str = "mixed";

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    Ok(())
}

/// Global shuffle, then cut into full batches.
pub fn mixed_batches<S: HasDomain>(samples: &[S], batch_size: usize, seed: u64) -> Result<BatchPlan> {
    check_batch_size(batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    let batches: Vec<Batch> = idx
        .chunks_exact(batch_size)
        .map(|c| Batch {
            indices: c.to_vec(),
            domain: MIXED_DOMAIN.to_string(),
        })
        .collect();
    let dropped = samples.len() - batches.len() * batch_size;
    if dropped > 0 {
        log::debug!("mixed sampler dropped {dropped} samples");
    }
    Ok(BatchPlan { batches, dropped })
}

/// Per-domain shuffles and cuts, then a global shuffle of batch order; every
/// batch holds samples of a single domain.
pub fn stratified_batches<S: HasDomain>(samples: &[S], batch_size: usize, seed: u64) -> Result<BatchPlan> {
    check_batch_size(batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    let mut dropped = 0;
    for (domain, mut idx) in group_by_domain(samples) {
        if idx.len() < batch_size {
            log::warn!("domain `{domain}` has {} samples, fewer than the batch size {batch_size}", idx.len());
        }
        idx.shuffle(&mut rng);
        let chunks = idx.chunks_exact(batch_size);
        dropped += chunks.remainder().len();
        batches.extend(chunks.map(|c| Batch {
            indices: c.to_vec(),
            domain: domain.to_string(),
        }));
    }
    batches.shuffle(&mut rng);
    if dropped > 0 {
        log::debug!("stratified sampler dropped {dropped} samples");
    }
    Ok(BatchPlan { batches, dropped })
}
