//! Domain types shared by every stage of the pipeline.

mod manifest;
mod store;

pub use manifest::{load_manifest, DatasetManifest, ImageRecord, Split};
pub use store::{read_feature_store, sidecar_path, write_feature_store, FeatureStore, STORE_MAGIC, STORE_VERSION};

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the working image frame. Every image is resized to
/// `FRAME x FRAME` before proposals or features are computed.
pub const FRAME: u32 = 256;

/// Axis-aligned pixel box, half-open: `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    /// Builds a box checked against a `width x height` frame.
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32, width: u32, height: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 || x2 > width || y2 > height {
            return Err(Error::invalid(format!(
                "box ({x1},{y1},{x2},{y2}) is empty or outside {width}x{height}"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box in the standard 256x256 frame.
    pub fn in_frame(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        Self::new(x1, y1, x2, y2, FRAME, FRAME)
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        u64::from(w) * u64::from(h)
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.x2 <= width && self.y2 <= height
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Dense feature vector with finite entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVec(Vec<f32>);

impl FeatureVec {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("feature vector must have d >= 1"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature vector entry {i}")));
        }
        Ok(Self(data))
    }

    /// Wraps data already known to be finite.
    pub(crate) fn from_raw(data: Vec<f32>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self(data)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f32 {
        l2_norm(&self.0)
    }
}

impl Deref for FeatureVec {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl AsRef<[f32]> for FeatureVec {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// `d x h x w` activation grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    d: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
    pub scale_id: usize,
}

impl FeatureTensor {
    pub fn new(d: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("tensor dims must be >= 1, got {d}x{h}x{w}")));
        }
        let expected = d
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::DimensionOverflow(format!("{d}x{h}x{w}")))?;
        if data.len() != expected {
            return Err(Error::dims(expected, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i}")));
        }
        Ok(Self { d, h, w, data, scale_id: 0 })
    }

    /// Builds a tensor from per-location descriptors laid out row-major over
    /// `(i, j)`; each descriptor has `d` entries.
    pub fn from_columns(d: usize, h: usize, w: usize, columns: &[Vec<f32>]) -> Result<Self> {
        if columns.len() != h * w {
            return Err(Error::dims(h * w, columns.len()));
        }
        let mut data = vec![0.0; d * h * w];
        for (pos, col) in columns.iter().enumerate() {
            if col.len() != d {
                return Err(Error::dims(d, col.len()));
            }
            for (c, &v) in col.iter().enumerate() {
                data[c * h * w + pos] = v;
            }
        }
        Self::new(d, h, w, data)
    }

    pub fn with_scale(mut self, scale_id: usize) -> Self {
        self.scale_id = scale_id;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[c * self.h * self.w + i * self.w + j]
    }

    /// The `d`-dimensional descriptor at grid location `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<f32> {
        let plane = self.h * self.w;
        let off = i * self.w + j;
        (0..self.d).map(|c| self.data[c * plane + off]).collect()
    }

    /// All descriptors in row-major location order.
    pub fn columns(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::with_capacity(self.positions());
        for i in 0..self.h {
            for j in 0..self.w {
                out.push(self.column(i, j));
            }
        }
        out
    }

    /// A tensor with `h = w = 1` viewed as a vector.
    pub fn to_vec(&self) -> FeatureVec {
        FeatureVec::from_raw(self.data.clone())
    }
}

impl From<FeatureVec> for FeatureTensor {
    fn from(v: FeatureVec) -> Self {
        let d = v.dim();
        Self { d, h: 1, w: 1, data: v.into_vec(), scale_id: 0 }
    }
}

/// Row-major `rows x cols` f32 matrix; rows are atoms, centers or means.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Named block of a hybrid representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Mlr,
    Cfv,
    Fcr1,
    Fcr2,
    /// Externally supplied block (e.g. features from another network).
    Ext(String),
}

impl Block {
    pub fn parse(name: &str) -> Result<Self> {
        let upper = name.trim().to_ascii_uppercase();
        // crop suffixes ("FCR1-w") name the same block
        let base = upper
            .strip_suffix("-W")
            .or_else(|| upper.strip_suffix("-C"))
            .unwrap_or(&upper);
        Ok(match base {
            "MLR" => Block::Mlr,
            "CFV" => Block::Cfv,
            "FCR1" => Block::Fcr1,
            "FCR2" => Block::Fcr2,
            "" => return Err(Error::invalid("empty block name")),
            _ => match name.trim().strip_prefix("EXT:") {
                Some(ext) if !ext.is_empty() => Block::Ext(ext.to_string()),
                _ => Block::Ext(name.trim().to_string()),
            },
        })
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Mlr => f.write_str("MLR"),
            Block::Cfv => f.write_str("CFV"),
            Block::Fcr1 => f.write_str("FCR1"),
            Block::Fcr2 => f.write_str("FCR2"),
            Block::Ext(name) => write!(f, "EXT:{name}"),
        }
    }
}

/// Ordered concatenation of named feature blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridRepresentation {
    blocks: Vec<(Block, FeatureVec)>,
}

impl HybridRepresentation {
    pub fn new(blocks: Vec<(Block, FeatureVec)>) -> Result<Self> {
        for (i, (name, _)) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::DuplicateId(name.to_string()));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[(Block, FeatureVec)] {
        &self.blocks
    }

    pub fn block_dims(&self) -> Vec<(Block, usize)> {
        self.blocks.iter().map(|(b, v)| (b.clone(), v.dim())).collect()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|(_, v)| v.dim()).sum()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, v) in &self.blocks {
            out.extend_from_slice(v);
        }
        out
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn sq_dist_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

pub(crate) fn l2_norm(a: &[f32]) -> f32 {
    a.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_rejects_empty_and_out_of_frame() {
        assert!(BBox::in_frame(10, 10, 10, 20).is_err());
        assert!(BBox::in_frame(0, 0, 257, 10).is_err());
        assert!(BBox::in_frame(0, 0, 256, 256).is_ok());
        assert_eq!(BBox::in_frame(0, 0, 10, 20).unwrap().area(), 200);
    }

    #[test]
    fn feature_vec_rejects_nan() {
        assert!(FeatureVec::new(vec![1.0, f32::NAN]).is_err());
        assert!(FeatureVec::new(vec![]).is_err());
    }

    #[test]
    fn tensor_columns_are_channel_major() {
        let t = FeatureTensor::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.column(0, 0), vec![1.0, 3.0]);
        assert_eq!(t.column(0, 1), vec![2.0, 4.0]);
        let back = FeatureTensor::from_columns(2, 1, 2, &t.columns()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn block_names_parse_with_crop_suffix() {
        assert_eq!(Block::parse("FCR1-w").unwrap(), Block::Fcr1);
        assert_eq!(Block::parse("fcr2-c").unwrap(), Block::Fcr2);
        assert_eq!(Block::parse("G_P205").unwrap(), Block::Ext("G_P205".into()));
        assert_eq!(Block::parse("EXT:vgg").unwrap(), Block::Ext("vgg".into()));
    }

    #[test]
    fn hybrid_rejects_duplicate_blocks() {
        let v = FeatureVec::zeros(2);
        assert!(HybridRepresentation::new(vec![(Block::Mlr, v.clone()), (Block::Mlr, v)]).is_err());
    }
}
