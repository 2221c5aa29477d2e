//! Synthetic multi-domain pre/post image pairs with controllable covariate shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::labels::{DamageClass, PolygonAnnotation};
use super::raster::rasterize;
use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Force {
    Wind,
    Fire,
    Water,
}

impl Force {
    pub const ALL: [Force; 3] = [Force::Wind, Force::Fire, Force::Water];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub force: Force,
    /// Mean background color, RGB in [0, 1].
    pub base_palette: [f64; 3],
    /// Per-channel multiplicative gain applied to the whole post image.
    pub gain_shift: [f64; 3],
    /// Side of a value-noise cell in pixels.
    pub texture_scale: f64,
    /// Expected buildings per image.
    pub building_density: f64,
    /// Probabilities of classes 1..=4.
    pub damage_profile: [f64; 4],
    pub seed: u64,
}

/// Amplitude of the shared luminance texture.
const TEXTURE_AMPLITUDE: f64 = 0.10;
/// Amplitude of the per-channel texture.
const CHROMA_AMPLITUDE: f64 = 0.03;
const RUBBLE: [f64; 3] = [0.46, 0.40, 0.33];
const ROOFS: [[f64; 3]; 4] = [[0.58, 0.57, 0.55], [0.70, 0.36, 0.26], [0.32, 0.32, 0.38], [0.84, 0.80, 0.72]];

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("domain `{}`: {msg}", self.name)));
        let total: f64 = self.damage_profile.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.damage_profile.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad(format!("damage_profile {:?} is not a distribution", self.damage_profile));
        }
        if !(self.building_density > 0.0 && self.building_density.is_finite()) {
            return bad("building_density must be positive".into());
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return bad("texture_scale must be positive".into());
        }
        if self.base_palette.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("base_palette must lie in [0, 1]".into());
        }
        if self.gain_shift.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("gain_shift must be positive".into());
        }
        Ok(())
    }
}

/// Six domains, two per force, with distinct palettes and post-image gains.
pub fn benchmark_domains() -> Vec<DomainSpec> {
    let spec = |name: &str, force, palette, gain, texture, density, profile, seed| DomainSpec {
        name: name.to_string(),
        force,
        base_palette: palette,
        gain_shift: gain,
        texture_scale: texture,
        building_density: density,
        damage_profile: profile,
        seed,
    };
    vec![
        spec("gale-coast", Force::Wind, [0.40, 0.50, 0.34], [1.22, 1.10, 0.92], 8.0, 7.0, [0.40, 0.25, 0.20, 0.15], 101),
        spec("gale-plains", Force::Wind, [0.55, 0.52, 0.38], [0.82, 0.90, 1.12], 12.0, 6.0, [0.35, 0.25, 0.20, 0.20], 102),
        spec("ember-ridge", Force::Fire, [0.48, 0.44, 0.32], [1.05, 0.80, 0.72], 10.0, 6.0, [0.35, 0.15, 0.20, 0.30], 103),
        spec("ember-valley", Force::Fire, [0.36, 0.44, 0.30], [0.76, 0.84, 1.18], 6.0, 8.0, [0.40, 0.15, 0.15, 0.30], 104),
        spec("flood-delta", Force::Water, [0.44, 0.48, 0.42], [1.16, 1.20, 1.24], 9.0, 8.0, [0.40, 0.30, 0.20, 0.10], 105),
        spec("flood-river", Force::Water, [0.52, 0.46, 0.40], [0.84, 0.78, 0.74], 14.0, 6.0, [0.35, 0.30, 0.25, 0.10], 106),
    ]
}

/// Bilinear value noise in [-1, 1] on a lattice with cells of `cell` pixels.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let fy = r as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for c in 0..w {
            let fx = c as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |y: usize, x: usize| lattice[y * gw + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

struct Building {
    corners: Vec<(f64, f64)>,
    center: (f64, f64),
    bbox: (f64, f64, f64, f64),
    roof: [f64; 3],
}

fn place_buildings(rng: &mut ChaCha8Rng, spec: &DomainSpec, h: usize, w: usize) -> Vec<Building> {
    let scale = h.min(w) as f64 / 64.0;
    let d = spec.building_density;
    let count = rng.gen_range((0.5 * d).round() as usize..=(1.5 * d).round() as usize);
    let mut placed: Vec<Building> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..30 {
            let bw = rng.gen_range(5.0..12.0) * scale;
            let bh = rng.gen_range(5.0..12.0) * scale;
            let angle: f64 = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-0.5..0.5) };
            let half = 0.5 * (bw * bw + bh * bh).sqrt();
            if 2.0 * half + 2.0 >= h.min(w) as f64 {
                continue;
            }
            let cx = rng.gen_range(half + 1.0..w as f64 - half - 1.0);
            let cy = rng.gen_range(half + 1.0..h as f64 - half - 1.0);
            let (s, c) = angle.sin_cos();
            let corners: Vec<(f64, f64)> = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
                .iter()
                .map(|&(u, v)| {
                    let (x, y) = (u * bw, v * bh);
                    (cx + x * c - y * s, cy + x * s + y * c)
                })
                .collect();
            let bbox = corners.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |b, &(x, y)| (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y)),
            );
            let margin = 2.0;
            let clash = placed.iter().any(|o| {
                bbox.0 < o.bbox.2 + margin && o.bbox.0 < bbox.2 + margin && bbox.1 < o.bbox.3 + margin && o.bbox.1 < bbox.3 + margin
            });
            if clash {
                continue;
            }
            let base = ROOFS[rng.gen_range(0..ROOFS.len())];
            let jitter = rng.gen_range(-0.05..0.05);
            let roof = base.map(|v| (v + jitter).clamp(0.0, 1.0));
            placed.push(Building {
                corners,
                center: (cx, cy),
                bbox,
                roof,
            });
            break;
        }
    }
    placed
}

/// Per-image damage-driving field; larger values attract heavier damage.
enum Field {
    /// Gradient along a wind direction.
    Wind { dir: (f64, f64) },
    /// Radial falloff from an ignition point.
    Fire { center: (f64, f64), radius: f64 },
    /// Band around a water level.
    Water { level: f64, band: f64 },
}

impl Field {
    fn draw(rng: &mut ChaCha8Rng, force: Force, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        match force {
            Force::Wind => {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Field::Wind { dir: (a.cos(), a.sin()) }
            }
            Force::Fire => Field::Fire {
                center: (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf)),
                radius: rng.gen_range(0.35..0.6) * hf.max(wf),
            },
            Force::Water => Field::Water {
                level: rng.gen_range(0.3..0.9) * hf,
                band: rng.gen_range(0.12..0.22) * hf,
            },
        }
    }

    fn at(&self, x: f64, y: f64, h: usize, w: usize) -> f64 {
        match *self {
            Field::Wind { dir } => {
                let (u, v) = (x / w as f64 - 0.5, y / h as f64 - 0.5);
                0.5 + (u * dir.0 + v * dir.1) / std::f64::consts::SQRT_2
            }
            Field::Fire { center, radius } => {
                let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                (1.0 - d / radius).max(0.0)
            }
            Field::Water { level, band } => (-((y - level) / band).powi(2)).exp(),
        }
    }
}

fn draw_class(rng: &mut ChaCha8Rng, profile: &[f64; 4]) -> DamageClass {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in profile.iter().enumerate() {
        acc += p;
        if u < acc {
            return DamageClass::ALL[i];
        }
    }
    // Rounding slack: the last class with positive probability.
    let last = profile.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    DamageClass::ALL[last]
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Generates sample `index` of a domain together with its building polygons;
/// a pure function of `(spec, index, h, w)`.
pub fn synth_annotated(spec: &DomainSpec, index: usize, h: usize, w: usize) -> (Sample, Vec<PolygonAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let plane = h * w;

    let luminance = value_noise(&mut rng, h, w, spec.texture_scale);
    let fine = value_noise(&mut rng, h, w, (spec.texture_scale / 2.0).max(1.0));
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| value_noise(&mut rng, h, w, spec.texture_scale)).collect();
    let mut pre = vec![0.0f64; plane * 3];
    for p in 0..plane {
        let lum = TEXTURE_AMPLITUDE * (0.7 * luminance[p] + 0.3 * fine[p]);
        for c in 0..3 {
            pre[p * 3 + c] = spec.base_palette[c] + lum + CHROMA_AMPLITUDE * chroma[c][p];
        }
    }

    let buildings = place_buildings(&mut rng, spec, h, w);
    let field = Field::draw(&mut rng, spec.force, h, w);
    // Classes are drawn from the profile, then handed out in order of field strength.
    let mut classes: Vec<DamageClass> = buildings.iter().map(|_| draw_class(&mut rng, &spec.damage_profile)).collect();
    classes.sort_unstable_by(|a, b| b.cmp(a));
    let mut order: Vec<(f64, usize)> = buildings
        .iter()
        .enumerate()
        .map(|(i, b)| (field.at(b.center.0, b.center.1, h, w) + rng.gen_range(-0.2..0.2), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut class_of = vec![DamageClass::Undamaged; buildings.len()];
    for (&(_, i), &class) in order.iter().zip(&classes) {
        class_of[i] = class;
    }

    let annotations: Vec<PolygonAnnotation> = buildings
        .iter()
        .zip(&class_of)
        .enumerate()
        .map(|(i, (b, &class))| PolygonAnnotation {
            ring: b.corners.clone(),
            holes: Vec::new(),
            damage_class: class,
            uid: format!("b{i}"),
        })
        .collect();
    let footprints: Vec<Vec<u8>> = annotations
        .iter()
        .map(|a| {
            let mut one = a.clone();
            one.damage_class = DamageClass::Undamaged;
            rasterize(std::slice::from_ref(&one), h, w)
        })
        .collect();
    let mask = rasterize(&annotations, h, w);

    for (b, fp) in buildings.iter().zip(&footprints) {
        for p in (0..plane).filter(|&p| fp[p] != 0) {
            let t = 0.04 * fine[p];
            for c in 0..3 {
                pre[p * 3 + c] = b.roof[c] + t;
            }
        }
    }
    let pre_u8: Vec<u8> = pre.iter().map(|&v| to_u8(v)).collect();

    let mut post: Vec<f64> = pre_u8.iter().map(|&v| v as f64 / 255.0).collect();
    for ((b, fp), &class) in buildings.iter().zip(&footprints).zip(&class_of) {
        let split: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (sx, sy) = (split.cos(), split.sin());
        for p in (0..plane).filter(|&p| fp[p] != 0) {
            let px = &mut post[p * 3..p * 3 + 3];
            let rubble = |rng: &mut ChaCha8Rng| {
                let n = rng.gen_range(-0.12..0.12);
                RUBBLE.map(|v| v + n + rng.gen_range(-0.04..0.04))
            };
            match class {
                DamageClass::Undamaged => {}
                DamageClass::Minor => {
                    if rng.gen_bool(0.15) {
                        px.copy_from_slice(&rubble(&mut rng));
                    } else {
                        px.iter_mut().for_each(|v| *v *= 0.8);
                    }
                }
                DamageClass::Major => {
                    let (x, y) = ((p % w) as f64 + 0.5 - b.center.0, (p / w) as f64 + 0.5 - b.center.1);
                    if x * sx + y * sy > 0.0 || rng.gen_bool(0.2) {
                        px.copy_from_slice(&rubble(&mut rng));
                    } else {
                        px.iter_mut().for_each(|v| *v *= 0.7);
                    }
                }
                DamageClass::Destroyed => px.copy_from_slice(&rubble(&mut rng)),
            }
        }
    }

    // Force-specific traces on the background.
    let streaks: Vec<(f64, f64)> = (0..rng.gen_range(2..6))
        .map(|_| (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
        .collect();
    for p in (0..plane).filter(|&p| mask[p] == 0) {
        let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        let px = &mut post[p * 3..p * 3 + 3];
        match field {
            Field::Fire { .. } => {
                let t = ((field.at(x, y, h, w) - 0.5) / 0.5).clamp(0.0, 1.0);
                px.iter_mut().for_each(|v| *v *= 1.0 - 0.55 * t);
            }
            Field::Water { level, band } => {
                if (y - level).abs() < 0.6 * band {
                    let water = [0.36, 0.34, 0.27];
                    for c in 0..3 {
                        px[c] = 0.4 * px[c] + 0.6 * water[c];
                    }
                }
            }
            Field::Wind { dir } => {
                let on_streak = streaks.iter().any(|&(sx, sy)| {
                    let (dx, dy) = (x - sx, y - sy);
                    let along = dx * dir.0 + dy * dir.1;
                    let across = -dx * dir.1 + dy * dir.0;
                    across.abs() < 0.8 && (0.0..0.35 * w as f64).contains(&along)
                });
                if on_streak {
                    px.copy_from_slice(&RUBBLE);
                }
            }
        }
    }

    let post_u8: Vec<u8> = post
        .iter()
        .enumerate()
        .map(|(i, &v)| to_u8(v * spec.gain_shift[i % 3]))
        .collect();

    let sample = Sample {
        height: h,
        width: w,
        pre: pre_u8,
        post: post_u8,
        mask,
        domain_id: spec.name.clone(),
        sample_id: format!("{}-{index:05}", spec.name),
    };
    (sample, annotations)
}

/// Generates `n` samples of one domain, deterministically from the spec.
pub fn synth_domain(spec: &DomainSpec, n: usize, h: usize, w: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    if h < 32 || w < 32 {
        return Err(Error::InvalidConfig(format!("image size {h}x{w} below 32x32")));
    }
    Ok((0..n).into_par_iter().map(|i| synth_annotated(spec, i, h, w).0).collect())
}
