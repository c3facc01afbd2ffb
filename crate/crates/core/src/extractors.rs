//! Feature extraction contract.
//!
//! Everything downstream consumes region vectors, dense-grid tensors,
//! multi-scale conv tensors and global FC vectors through
//! [`FeatureExtractor`]. Two backends exist: a store-backed one reading
//! features dumped offline by a real network, and a deterministic synthetic
//! one (seeded Gaussian projections of 8x8 mean-pooled RGB patches).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, DatasetManifest, FeatureStore, FeatureTensor, FeatureVec, ImageRecord, FRAME};
use crate::error::{Error, Result};

/// Side of the centered crop used for `central` FC features.
pub const CENTRAL_CROP: u32 = 224;

/// Patch side and stride of the synthetic conv layer, in pixels of the
/// rescaled image.
pub const CONV_PATCH: u32 = 32;
pub const CONV_STRIDE: u32 = 8;

const POOL: usize = 8;
const PATCH_DIM: usize = POOL * POOL * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FcLayer {
    Fc1,
    Fc2,
}

impl FcLayer {
    fn tag(self) -> u8 {
        match self {
            FcLayer::Fc1 => 1,
            FcLayer::Fc2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    Whole,
    Central,
}

impl Crop {
    pub fn suffix(self) -> char {
        match self {
            Crop::Whole => 'w',
            Crop::Central => 'c',
        }
    }

    pub fn bbox(self) -> BBox {
        match self {
            Crop::Whole => BBox { x1: 0, y1: 0, x2: FRAME, y2: FRAME },
            Crop::Central => {
                let off = (FRAME - CENTRAL_CROP) / 2;
                BBox { x1: off, y1: off, x2: off + CENTRAL_CROP, y2: off + CENTRAL_CROP }
            }
        }
    }
}

/// Input scale for the conv pathway: factor `sqrt(2)^exponent`. `index` is the
/// scale's position in the configured scale list and names the store key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvScale {
    pub index: usize,
    pub exponent: i32,
}

impl ConvScale {
    pub fn factor(&self) -> f64 {
        std::f64::consts::SQRT_2.powi(self.exponent)
    }

    /// Side of the rescaled image.
    pub fn side(&self) -> u32 {
        (f64::from(FRAME) * self.factor()).round().max(1.0) as u32
    }
}

pub fn region_key(image_id: &str, b: &BBox) -> String {
    format!("{image_id}#box:{b}")
}

pub fn conv_key(image_id: &str, scale_index: usize) -> String {
    format!("{image_id}#conv:s{scale_index}")
}

pub fn fcr_key(image_id: &str, layer: FcLayer, crop: Crop) -> String {
    format!("{image_id}#fcr{}:{}", layer.tag(), crop.suffix())
}

/// Number of grid positions per side for a `square` window moved by `stride`
/// over a frame of side `side`. Partial windows at the border are dropped.
pub fn grid_side(side: u32, square: u32, stride: u32) -> usize {
    ((side - square) / stride + 1) as usize
}

pub trait FeatureExtractor: Send + Sync {
    /// Dimensionality of region and FC vectors.
    fn dim(&self) -> usize;

    /// Feature of one box (FC2 pathway, after ReLU).
    fn region(&self, image: &ImageRecord, bbox: BBox) -> Result<FeatureVec>;

    /// Multi-scale conv descriptors (before ReLU) at one input scale.
    fn conv(&self, image: &ImageRecord, scale: ConvScale) -> Result<FeatureTensor>;

    /// Global FC vector, unnormalized.
    fn fcr(&self, image: &ImageRecord, layer: FcLayer, crop: Crop) -> Result<FeatureVec>;

    /// Region features of `square x square` windows placed every `stride`
    /// pixels; position `(i, j)` holds the window at `(j * stride, i * stride)`.
    fn dense_grid(&self, image: &ImageRecord, square: u32, stride: u32) -> Result<FeatureTensor> {
        check_grid(square, stride)?;
        let n = grid_side(FRAME, square, stride);
        let mut cols = Vec::with_capacity(n * n);
        for i in 0..n as u32 {
            for j in 0..n as u32 {
                let b = BBox { x1: j * stride, y1: i * stride, x2: j * stride + square, y2: i * stride + square };
                cols.push(self.region(image, b)?.into_vec());
            }
        }
        FeatureTensor::from_columns(self.dim(), n, n, &cols)
    }
}

fn check_grid(square: u32, stride: u32) -> Result<()> {
    if square == 0 || square > FRAME {
        return Err(Error::invalid(format!("grid square {square} must be in 1..={FRAME}")));
    }
    if stride == 0 {
        return Err(Error::invalid("grid stride must be >= 1"));
    }
    Ok(())
}

fn check_scale(scale: ConvScale) -> Result<()> {
    if !(-6..=4).contains(&scale.exponent) {
        return Err(Error::invalid(format!("conv scale exponent {} outside -6..=4", scale.exponent)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorKind {
    Synthetic { seed: u64 },
    StoreBacked { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    #[serde(flatten)]
    pub kind: ExtractorKind,
    pub d: usize,
}

impl ExtractorSpec {
    pub fn synthetic(d: usize, seed: u64) -> Self {
        Self { kind: ExtractorKind::Synthetic { seed }, d }
    }

    pub fn store_backed(d: usize, paths: Vec<PathBuf>) -> Self {
        Self { kind: ExtractorKind::StoreBacked { paths }, d }
    }

    pub fn build(&self) -> Result<Arc<dyn FeatureExtractor>> {
        if self.d == 0 {
            return Err(Error::invalid("extractor dimension must be >= 1"));
        }
        Ok(match &self.kind {
            ExtractorKind::Synthetic { seed } => Arc::new(SyntheticExtractor::new(self.d, *seed)),
            ExtractorKind::StoreBacked { paths } => Arc::new(StoreExtractor::open(self.d, paths)?),
        })
    }
}

/// Deterministic stand-in for a CNN.
pub struct SyntheticExtractor {
    d: usize,
    fc1: Vec<f32>,
    fc2: Vec<f32>,
    conv: Vec<f32>,
}

impl SyntheticExtractor {
    pub fn new(d: usize, seed: u64) -> Self {
        let proj = |salt: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let scale = 1.0 / (PATCH_DIM as f32).sqrt();
            (0..d * PATCH_DIM)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect::<Vec<f32>>()
        };
        Self { d, fc1: proj(1), fc2: proj(2), conv: proj(3) }
    }

    fn project(&self, weights: &[f32], patch: &[f32; PATCH_DIM], relu: bool) -> Vec<f32> {
        weights
            .chunks_exact(PATCH_DIM)
            .map(|row| {
                let v: f32 = row.iter().zip(patch.iter()).map(|(w, x)| w * x).sum();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }
}

fn pixels(image: &ImageRecord) -> Result<&RgbImage> {
    image
        .pixels
        .as_deref()
        .ok_or_else(|| Error::MissingFeature(format!("pixels of `{}`", image.id)))
}

/// Bin `b` of `POOL` over a span of length `len`, never empty.
fn bin_range(b: usize, len: u32) -> (u32, u32) {
    let len = len as usize;
    let start = b * len / POOL;
    let end = ((b + 1) * len / POOL).max(start + 1);
    (start as u32, end as u32)
}

/// 8x8 mean-pooled RGB patch of a box, channel-major, scaled to [0, 1].
fn pool_direct(img: &RgbImage, b: &BBox) -> [f32; PATCH_DIM] {
    let mut out = [0.0f32; PATCH_DIM];
    for by in 0..POOL {
        let (y0, y1) = bin_range(by, b.height());
        for bx in 0..POOL {
            let (x0, x1) = bin_range(bx, b.width());
            let mut sums = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(b.x1 + x, b.y1 + y).0;
                    for c in 0..3 {
                        sums[c] += u64::from(p[c]);
                    }
                }
            }
            let count = u64::from((y1 - y0) * (x1 - x0));
            for c in 0..3 {
                out[c * POOL * POOL + by * POOL + bx] = mean_unit(sums[c], count);
            }
        }
    }
    out
}

fn mean_unit(sum: u64, count: u64) -> f32 {
    (sum as f64 / (count as f64 * 255.0)) as f32
}

/// Summed-area table; pooled values equal [`pool_direct`] exactly since
/// both reduce integer sums.
struct SummedArea {
    w: usize,
    table: Vec<[u64; 3]>,
}

impl SummedArea {
    fn new(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut table = vec![[0u64; 3]; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = [0u64; 3];
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    row[c] += u64::from(p[c]);
                    table[(y + 1) * (w + 1) + x + 1][c] = table[y * (w + 1) + x + 1][c] + row[c];
                }
            }
        }
        Self { w, table }
    }

    fn sum(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> [u64; 3] {
        let at = |x: u32, y: u32| self.table[y as usize * (self.w + 1) + x as usize];
        let (a, b, c, d) = (at(x1, y1), at(x0, y1), at(x1, y0), at(x0, y0));
        [0, 1, 2].map(|k| a[k] + d[k] - b[k] - c[k])
    }

    fn pool(&self, b: &BBox) -> [f32; PATCH_DIM] {
        let mut out = [0.0f32; PATCH_DIM];
        for by in 0..POOL {
            let (y0, y1) = bin_range(by, b.height());
            for bx in 0..POOL {
                let (x0, x1) = bin_range(bx, b.width());
                let s = self.sum(b.x1 + x0, b.y1 + y0, b.x1 + x1, b.y1 + y1);
                let count = u64::from((y1 - y0) * (x1 - x0));
                for c in 0..3 {
                    out[c * POOL * POOL + by * POOL + bx] = mean_unit(s[c], count);
                }
            }
        }
        out
    }
}

impl FeatureExtractor for SyntheticExtractor {
    fn dim(&self) -> usize {
        self.d
    }

    fn region(&self, image: &ImageRecord, bbox: BBox) -> Result<FeatureVec> {
        let img = pixels(image)?;
        if !bbox.fits(img.width(), img.height()) {
            return Err(Error::invalid(format!("box ({bbox}) outside image `{}`", image.id)));
        }
        Ok(FeatureVec::from_raw(self.project(&self.fc2, &pool_direct(img, &bbox), true)))
    }

    fn dense_grid(&self, image: &ImageRecord, square: u32, stride: u32) -> Result<FeatureTensor> {
        check_grid(square, stride)?;
        let sat = SummedArea::new(pixels(image)?);
        let n = grid_side(FRAME, square, stride);
        let mut cols = Vec::with_capacity(n * n);
        for i in 0..n as u32 {
            for j in 0..n as u32 {
                let b = BBox { x1: j * stride, y1: i * stride, x2: j * stride + square, y2: i * stride + square };
                cols.push(self.project(&self.fc2, &sat.pool(&b), true));
            }
        }
        FeatureTensor::from_columns(self.d, n, n, &cols)
    }

    fn conv(&self, image: &ImageRecord, scale: ConvScale) -> Result<FeatureTensor> {
        check_scale(scale)?;
        let img = pixels(image)?;
        let side = scale.side();
        let resized;
        let img = if side == img.width() {
            img
        } else {
            resized = image::imageops::resize(img, side, side, FilterType::Triangle);
            &resized
        };
        let patch = CONV_PATCH.min(side);
        let n = grid_side(side, patch, CONV_STRIDE);
        let sat = SummedArea::new(img);
        let mut cols = Vec::with_capacity(n * n);
        for i in 0..n as u32 {
            for j in 0..n as u32 {
                let b = BBox {
                    x1: j * CONV_STRIDE,
                    y1: i * CONV_STRIDE,
                    x2: j * CONV_STRIDE + patch,
                    y2: i * CONV_STRIDE + patch,
                };
                cols.push(self.project(&self.conv, &sat.pool(&b), false));
            }
        }
        Ok(FeatureTensor::from_columns(self.d, n, n, &cols)?.with_scale(scale.index))
    }

    fn fcr(&self, image: &ImageRecord, layer: FcLayer, crop: Crop) -> Result<FeatureVec> {
        let img = pixels(image)?;
        let weights = match layer {
            FcLayer::Fc1 => &self.fc1,
            FcLayer::Fc2 => &self.fc2,
        };
        Ok(FeatureVec::from_raw(self.project(weights, &pool_direct(img, &crop.bbox()), true)))
    }
}

/// Extractor backed by features dumped to one or more feature stores.
pub struct StoreExtractor {
    d: usize,
    store: FeatureStore,
}

impl StoreExtractor {
    pub fn open<P: AsRef<Path>>(d: usize, paths: &[P]) -> Result<Self> {
        let mut store = FeatureStore::new();
        for p in paths {
            for (id, t) in crate::datamodel::read_feature_store(p)? {
                store.insert(id, t)?;
            }
        }
        Ok(Self { d, store })
    }

    pub fn from_store(d: usize, store: FeatureStore) -> Self {
        Self { d, store }
    }

    fn vector(&self, key: &str) -> Result<FeatureVec> {
        let t = self.store.require(key)?;
        if t.h() != 1 || t.w() != 1 || t.d() != self.d {
            return Err(Error::invalid(format!(
                "store entry `{key}` is {}x{}x{}, expected a {}-vector",
                t.d(),
                t.h(),
                t.w(),
                self.d
            )));
        }
        Ok(t.to_vec())
    }
}

impl FeatureExtractor for StoreExtractor {
    fn dim(&self) -> usize {
        self.d
    }

    fn region(&self, image: &ImageRecord, bbox: BBox) -> Result<FeatureVec> {
        self.vector(&region_key(&image.id, &bbox))
    }

    fn conv(&self, image: &ImageRecord, scale: ConvScale) -> Result<FeatureTensor> {
        check_scale(scale)?;
        Ok(self.store.require(&conv_key(&image.id, scale.index))?.clone().with_scale(scale.index))
    }

    fn fcr(&self, image: &ImageRecord, layer: FcLayer, crop: Crop) -> Result<FeatureVec> {
        self.vector(&fcr_key(&image.id, layer, crop))
    }
}

/// Decodes an 8-bit RGB image and resizes it (bilinear) to the working frame.
pub fn load_image<P: AsRef<Path>>(path: P) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    if img.dimensions() == (FRAME, FRAME) {
        Ok(img)
    } else {
        Ok(image::imageops::resize(&img, FRAME, FRAME, FilterType::Triangle))
    }
}

/// Loads pixels for every record that has an image path and no pixels yet.
pub fn attach_pixels(manifest: &mut DatasetManifest) -> Result<()> {
    let base = manifest.base_dir.clone();
    for r in manifest.records.iter_mut() {
        if r.pixels.is_some() {
            continue;
        }
        if let Some(rel) = &r.image_path {
            let path = if Path::new(rel).is_absolute() { PathBuf::from(rel) } else { base.join(rel) };
            let img = load_image(&path).map_err(|e| e.in_stage("load-image", r.id.clone()))?;
            r.pixels = Some(Arc::new(img));
        }
    }
    Ok(())
}
