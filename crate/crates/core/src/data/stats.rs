//! Per-domain sample counts and class pixel distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub samples: usize,
    pub pixels: u64,
    pub class_pixels: [u64; 5],
    /// `class_pixels / pixels`; sums to 1.
    pub class_fractions: [f64; 5],
}

/// Tabulates samples and class pixel fractions per domain.
pub fn dataset_stats(samples: &[Sample]) -> Result<BTreeMap<String, DomainStats>> {
    if samples.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let mut table: BTreeMap<String, (usize, [u64; 5])> = BTreeMap::new();
    for s in samples {
        let entry = table.entry(s.domain_id.clone()).or_insert((0, [0; 5]));
        entry.0 += 1;
        for (acc, c) in entry.1.iter_mut().zip(s.class_counts()) {
            *acc += c;
        }
    }
    Ok(table
        .into_iter()
        .map(|(domain, (n, counts))| {
            let total: u64 = counts.iter().sum();
            let fractions = counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 });
            (
                domain,
                DomainStats {
                    samples: n,
                    pixels: total,
                    class_pixels: counts,
                    class_fractions: fractions,
                },
            )
        })
        .collect())
}
