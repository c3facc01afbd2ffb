//! Synthetic texture datasets for end-to-end runs without real images.
//!
//! Every class is a two-tone texture (stripes, checkerboard, ...) with a
//! period of 14 to 18 pixels. Colors, phase and noise are drawn from the same
//! distributions for every class, so the class is only visible at a spatial
//! resolution finer than the period.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, DatasetManifest, ImageRecord, Split, FRAME};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const TEXTURES: [&str; 5] = ["hstripes", "vstripes", "checker", "diagonal", "grid"];

/// Side of the uniform patches planted in the two-domain variant.
const FLAT_SIDE: u32 = 72;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthVariant {
    /// One domain with a `default` train/test split.
    Scene { per_class: usize, train_per_class: usize },
    /// Several domains; the second and later ones are noisier and shifted in
    /// brightness. Half the images carry a uniform patch.
    Domains { domains: Vec<(String, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Random boxes per image (a fraction fails the proposal filter).
    pub proposals: usize,
    pub seed: u64,
    pub variant: SynthVariant,
}

impl SynthConfig {
    /// 3 classes x 40 images, 20 of each class for training.
    pub fn toy_scene(seed: u64) -> Self {
        Self { classes: 3, proposals: 80, seed, variant: SynthVariant::Scene { per_class: 40, train_per_class: 20 } }
    }

    pub fn toy_office(seed: u64) -> Self {
        Self {
            classes: 3,
            proposals: 80,
            seed,
            variant: SynthVariant::Domains { domains: vec![("amazon".into(), 24), ("webcam".into(), 14)] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=TEXTURES.len()).contains(&self.classes) {
            return Err(Error::invalid(format!("synthetic classes must be in 2..={}", TEXTURES.len())));
        }
        match &self.variant {
            SynthVariant::Scene { per_class, train_per_class } if *train_per_class == 0 || train_per_class >= per_class => {
                Err(Error::invalid("need 1 <= train_per_class < per_class"))
            }
            SynthVariant::Domains { domains } if domains.is_empty() || domains.iter().any(|(_, n)| *n == 0) => {
                Err(Error::invalid("every synthetic domain needs at least one image per class"))
            }
            _ => Ok(()),
        }
    }
}

/// Style parameters of one domain.
#[derive(Debug, Clone, Copy)]
struct Style {
    noise: f32,
    brightness: f32,
    flat_patch: bool,
}

fn texture_on(class: usize, x: u32, y: u32, period: f32, phase: (f32, f32)) -> bool {
    let half = period / 2.0;
    let band = |v: u32, p: f32| (((v as f32 + p) / half).floor() as i64).rem_euclid(2) == 0;
    match class {
        0 => band(y, phase.1),
        1 => band(x, phase.0),
        2 => band(x, phase.0) ^ band(y, phase.1),
        3 => (((x as f32 + y as f32 + phase.0) / (half * std::f32::consts::SQRT_2)).floor() as i64).rem_euclid(2) == 0,
        _ => {
            // thin grid lines
            let line = |v: u32, p: f32| ((v as f32 + p).rem_euclid(period)) < period / 4.0;
            line(x, phase.0) || line(y, phase.1)
        }
    }
}

fn render(class: usize, style: Style, rng: &mut ChaCha8Rng) -> (RgbImage, Option<BBox>) {
    let period = rng.random_range(14.0f32..=18.0);
    let phase = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let dark: [f32; 3] = std::array::from_fn(|_| rng.random_range(20.0..110.0));
    let light: [f32; 3] = std::array::from_fn(|_| rng.random_range(145.0..235.0));
    let noise = Normal::new(0.0f32, style.noise.max(1e-6)).expect("valid sigma");
    let flat = style.flat_patch && rng.random_bool(0.5);
    let patch = flat.then(|| {
        let x = rng.random_range(0..=FRAME - FLAT_SIDE);
        let y = rng.random_range(0..=FRAME - FLAT_SIDE);
        BBox { x1: x, y1: y, x2: x + FLAT_SIDE, y2: y + FLAT_SIDE }
    });
    let flat_color: [f32; 3] = std::array::from_fn(|_| rng.random_range(60.0..200.0));
    let mut img = RgbImage::new(FRAME, FRAME);
    for y in 0..FRAME {
        for x in 0..FRAME {
            let inside = patch.is_some_and(|b| x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2);
            let px = if inside {
                flat_color.map(|c| c.round() as u8)
            } else {
                let base = if texture_on(class, x, y, period, phase) { light } else { dark };
                base.map(|c| (c + style.brightness + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    (img, patch)
}

fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(48..=176u32);
            let h = rng.random_range(48..=176u32);
            let x = rng.random_range(0..=FRAME - w);
            let y = rng.random_range(0..=FRAME - h);
            BBox { x1: x, y1: y, x2: x + w, y2: y + h }
        })
        .collect()
}

fn make_record(id: String, class: usize, style: Style, cfg: &SynthConfig) -> Result<(ImageRecord, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &id));
    let (img, patch) = render(class, style, &mut rng);
    let mut boxes = random_boxes(cfg.proposals, &mut rng);
    if let Some(p) = patch {
        // proposals covering the flat patch exercise the variance filter
        boxes.push(p);
        boxes.push(BBox { x1: p.x1 + 4, y1: p.y1 + 4, x2: p.x2 - 4, y2: p.y2 - 4 });
    }
    let mut rec = ImageRecord::new(id.clone(), class).with_pixels(img.clone())?;
    rec.image_path = Some(format!("images/{id}.png"));
    rec.proposals = Some(boxes);
    Ok((rec, img))
}

/// Generates the dataset in memory, pixels attached.
pub fn generate(cfg: &SynthConfig) -> Result<(DatasetManifest, Vec<RgbImage>)> {
    cfg.validate()?;
    let classes: Vec<String> = TEXTURES[..cfg.classes].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut splits = BTreeMap::new();
    match &cfg.variant {
        SynthVariant::Scene { per_class, train_per_class } => {
            let style = Style { noise: 8.0, brightness: 0.0, flat_patch: false };
            let mut split = Split::default();
            for (c, name) in classes.iter().enumerate() {
                for k in 0..*per_class {
                    let id = format!("{name}-{k:03}");
                    if k < *train_per_class {
                        split.train.push(id.clone());
                    } else {
                        split.test.push(id.clone());
                    }
                    let (rec, img) = make_record(id, c, style, cfg)?;
                    records.push(rec);
                    images.push(img);
                }
            }
            splits.insert("default".to_string(), split);
        }
        SynthVariant::Domains { domains } => {
            for (d, (domain, per_class)) in domains.iter().enumerate() {
                let style = Style { noise: 6.0 + 6.0 * d as f32, brightness: -15.0 * d as f32, flat_patch: true };
                for (c, name) in classes.iter().enumerate() {
                    for k in 0..*per_class {
                        let (mut rec, img) = make_record(format!("{domain}-{name}-{k:03}"), c, style, cfg)?;
                        rec.domain = Some(domain.clone());
                        records.push(rec);
                        images.push(img);
                    }
                }
            }
        }
    }
    Ok((DatasetManifest::new(classes, records, splits, Default::default())?, images))
}

/// Writes `manifest.json` and `images/*.png` under `out_dir`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let (mut manifest, images) = generate(cfg)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    for (rec, img) in manifest.records.iter().zip(&images) {
        img.save(out_dir.join(rec.image_path.as_deref().expect("synthetic records have paths")))?;
    }
    manifest.base_dir = out_dir.to_path_buf();
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
