//! Dataset directories: `<root>/<domain>/<sample_id>_{pre,post,mask}.png`
//! plus a `manifest.json` describing the domains.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::DomainSpec;
use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    /// Generator parameters when the domain is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DomainSpec>,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub domains: Vec<DomainEntry>,
}

fn check_component(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(Error::InvalidConfig(format!("`{name}` is not a valid file name component")));
    }
    Ok(())
}

/// Writes samples as PNGs and the manifest. `specs` annotates synthetic domains.
pub fn save_dataset(root: &Path, samples: &[Sample], specs: &[DomainSpec]) -> Result<DatasetManifest> {
    let first = samples.first().ok_or_else(|| Error::Empty("no samples to save".into()))?;
    let (h, w) = (first.height, first.width);
    let mut domains: Vec<DomainEntry> = Vec::new();
    for s in samples {
        s.validate()?;
        if (s.height, s.width) != (h, w) {
            return Err(Error::shape("save_dataset", format!("`{}` is {}x{}, expected {h}x{w}", s.sample_id, s.height, s.width)));
        }
        check_component(&s.domain_id)?;
        check_component(&s.sample_id)?;
        let dir = root.join(&s.domain_id);
        fs::create_dir_all(&dir)?;
        let rgb = |data: &[u8]| RgbImage::from_raw(w as u32, h as u32, data.to_vec()).expect("validated size");
        rgb(&s.pre).save(dir.join(format!("{}_pre.png", s.sample_id)))?;
        rgb(&s.post).save(dir.join(format!("{}_post.png", s.sample_id)))?;
        GrayImage::from_raw(w as u32, h as u32, s.mask.clone())
            .expect("validated size")
            .save(dir.join(format!("{}_mask.png", s.sample_id)))?;
        match domains.iter_mut().find(|d| d.name == s.domain_id) {
            Some(d) => d.samples.push(s.sample_id.clone()),
            None => domains.push(DomainEntry {
                name: s.domain_id.clone(),
                spec: specs.iter().find(|sp| sp.name == s.domain_id).cloned(),
                samples: vec![s.sample_id.clone()],
            }),
        }
    }
    let manifest = DatasetManifest {
        height: h,
        width: w,
        domains,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a dataset directory in manifest order.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(root.join("manifest.json"))?)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::new();
    for domain in &manifest.domains {
        check_component(&domain.name)?;
        let dir = root.join(&domain.name);
        for id in &domain.samples {
            check_component(id)?;
            let rgb = |kind: &str| -> Result<Vec<u8>> {
                let img = image::open(dir.join(format!("{id}_{kind}.png")))?.into_rgb8();
                if img.dimensions() != (w as u32, h as u32) {
                    return Err(Error::shape("load_dataset", format!("`{id}_{kind}.png` has the wrong size")));
                }
                Ok(img.into_raw())
            };
            let mask = image::open(dir.join(format!("{id}_mask.png")))?.into_luma8();
            if mask.dimensions() != (w as u32, h as u32) {
                return Err(Error::shape("load_dataset", format!("`{id}_mask.png` has the wrong size")));
            }
            let sample = Sample {
                height: h,
                width: w,
                pre: rgb("pre")?,
                post: rgb("post")?,
                mask: mask.into_raw(),
                domain_id: domain.name.clone(),
                sample_id: id.clone(),
            };
            sample.validate()?;
            samples.push(sample);
        }
    }
    Ok((manifest, samples))
}
