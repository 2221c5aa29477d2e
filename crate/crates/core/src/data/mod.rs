//! Samples, xBD label ingestion, the synthetic multi-domain generator,
//! augmentation, dataset statistics and on-disk datasets.

mod augment;
mod io;
mod labels;
mod raster;
mod stats;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentPolicy, GeometricOp};
pub use io::{load_dataset, save_dataset, DatasetManifest, DomainEntry};
pub use labels::{parse_labels, parse_wkt, write_labels, DamageClass, Point, PolygonAnnotation, Unclassified};
pub use raster::{rasterize, scanline_crossings};
pub use stats::{dataset_stats, DomainStats};
pub use synth::{benchmark_domains, synth_annotated, synth_domain, DomainSpec, Force};

/// One co-registered pre/post image pair with its damage mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `H x W x 3` RGB, row-major.
    pub pre: Vec<u8>,
    pub post: Vec<u8>,
    /// `H x W` classes 0..=4.
    pub mask: Vec<u8>,
    pub domain_id: String,
    pub sample_id: String,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        if self.pre.len() != plane * 3 || self.post.len() != plane * 3 || self.mask.len() != plane {
            return Err(Error::shape(
                "sample",
                format!("`{}` buffers do not match {}x{}", self.sample_id, self.height, self.width),
            ));
        }
        if let Some(v) = self.mask.iter().find(|&&v| v > 4) {
            return Err(Error::OutOfRange(format!("mask value {v} in `{}`", self.sample_id)));
        }
        Ok(())
    }

    /// Pixel counts per class.
    pub fn class_counts(&self) -> [u64; 5] {
        let mut counts = [0u64; 5];
        for &v in &self.mask {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Anything that belongs to a domain; used by splits and samplers.
pub trait HasDomain {
    fn domain(&self) -> &str;
}

impl HasDomain for Sample {
    fn domain(&self) -> &str {
        &self.domain_id
    }
}

impl<T: HasDomain + ?Sized> HasDomain for &T {
    fn domain(&self) -> &str {
        (**self).domain()
    }
}
