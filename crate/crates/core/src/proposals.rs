//! First clustering stage: from region proposals to per-image prototypes.
//!
//! Proposals are filtered by size and aspect, linked by a graph mixing box
//! overlap and feature affinity, spectrally clustered, and the largest
//! clusters each contribute one randomly drawn box. Chosen boxes are grown
//! by a context margin and re-extracted.

use std::collections::BTreeSet;

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, FeatureVec, ImageRecord, FRAME};
use crate::dictionary::{kmeans_restarts, KMeansParams};
use crate::error::{Error, Result};
use crate::extractors::FeatureExtractor;
use crate::seed::derive_seed;

pub const MIN_PROPOSAL_AREA: u64 = 60 * 60;
pub const MAX_PROPOSAL_AREA: u64 = 160 * 160;
pub const MAX_ASPECT: u32 = 3;
pub const DEFAULT_VAR_THRESHOLD: f64 = 125.0;
pub const DEFAULT_CONTEXT_PAD: u32 = 16;
/// Degree assigned to isolated graph nodes.
const ISOLATED_DEGREE: f64 = 1e-12;
const SPECTRAL_RESTARTS: usize = 10;

/// Keeps boxes with area in `[60*60, 160*160]` and aspect ratio below 3.
pub fn filter_proposals(boxes: &[BBox]) -> Vec<BBox> {
    boxes
        .iter()
        .filter(|b| {
            let (w, h) = (b.width(), b.height());
            (MIN_PROPOSAL_AREA..=MAX_PROPOSAL_AREA).contains(&b.area()) && w.max(h) < MAX_ASPECT * w.min(h)
        })
        .copied()
        .collect()
}

pub fn box_iou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter as f64 / union as f64) as f32
}

/// Gaussian affinity `exp(-|f1 - f2|^2 / (2 sigma^2))`.
pub fn feature_affinity(f1: &[f32], f2: &[f32], sigma: f32) -> Result<f32> {
    if f1.len() != f2.len() {
        return Err(Error::dims(f1.len(), f2.len()));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let d2 = crate::datamodel::sq_dist_f64(f1, f2);
    let s = f64::from(sigma);
    Ok((-d2 / (2.0 * s * s)).exp() as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub n: usize,
    /// Row-major `n x n` edge weights.
    pub weights: Vec<f32>,
    pub lambda_b: f32,
    pub lambda_f: f32,
    pub sigma: f32,
}

impl SimilarityGraph {
    pub fn weight(&self, i: usize, j: usize) -> f32 {
        self.weights[i * self.n + j]
    }

    /// Graph over arbitrary symmetric weights.
    pub fn from_weights(n: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::dims(n * n, weights.len()));
        }
        for i in 0..n {
            for j in 0..i {
                if weights[i * n + j] != weights[j * n + i] {
                    return Err(Error::invalid(format!("weights not symmetric at ({i},{j})")));
                }
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        Ok(Self { n, weights, lambda_b: 1.0, lambda_f: 0.0, sigma: 1.0 })
    }
}

fn check_lambdas(lambda_b: f32, lambda_f: f32) -> Result<()> {
    if lambda_b < 0.0 || lambda_f < 0.0 || (lambda_b + lambda_f - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "lambda_b + lambda_f must equal 1 with both >= 0, got {lambda_b} + {lambda_f}"
        )));
    }
    Ok(())
}

/// `W = lambda_b * W_B + lambda_f * W_F` with `W_B` the box IoU and `W_F`
/// the feature affinity.
pub fn build_graph<F: AsRef<[f32]>>(
    boxes: &[BBox],
    feats: &[F],
    lambda_b: f32,
    lambda_f: f32,
    sigma: f32,
) -> Result<SimilarityGraph> {
    if boxes.len() != feats.len() {
        return Err(Error::dims(boxes.len(), feats.len()));
    }
    check_lambdas(lambda_b, lambda_f)?;
    let n = boxes.len();
    let mut weights = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let wb = box_iou(&boxes[i], &boxes[j]);
            let wf = feature_affinity(feats[i].as_ref(), feats[j].as_ref(), sigma)?;
            let w = lambda_b * wb + lambda_f * wf;
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(SimilarityGraph { n, weights, lambda_b, lambda_f, sigma })
}

/// Normalized spectral clustering into `q` groups: eigenvectors of the `q`
/// smallest eigenvalues of `I - D^-1/2 W D^-1/2`, rows L2-normalized, then
/// seeded k-means++ with restarts.
pub fn spectral_cluster(g: &SimilarityGraph, q: usize, seed: u64) -> Result<Vec<usize>> {
    let n = g.n;
    if q == 0 || q > n {
        return Err(Error::invalid(format!("cluster count {q} must be in 1..={n}")));
    }
    if q == 1 {
        return Ok(vec![0; n]);
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| f64::from(g.weight(i, j))).sum();
            1.0 / deg.max(ISOLATED_DEGREE).sqrt()
        })
        .collect();
    let norm = DMatrix::from_fn(n, n, |i, j| f64::from(g.weight(i, j)) * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
    let eig = SymmetricEigen::try_new(norm, 1e-12, 10_000)
        .ok_or_else(|| Error::Eigen(format!("no convergence on a {n}-node graph")))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalues".into()));
    }

    // largest eigenvalues of the normalized affinity = smallest of the Laplacian
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let embedding: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = order[..q].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let len = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| if len > 0.0 { (v / len) as f32 } else { 0.0 }).collect()
        })
        .collect();
    let res = kmeans_restarts(&embedding, q, seed, SPECTRAL_RESTARTS, KMeansParams::default())?;
    Ok(res.assignments)
}

/// Ranks clusters by size (descending, ties to the lower id) and draws one
/// member box uniformly from each of the top `t`.
pub fn select_prototypes(labels: &[usize], boxes: &[BBox], t: usize, seed: u64) -> Result<Vec<BBox>> {
    if labels.len() != boxes.len() {
        return Err(Error::dims(boxes.len(), labels.len()));
    }
    let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut ranked: Vec<usize> = (0..clusters).filter(|&c| !members[c].is_empty()).collect();
    ranked.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ranked
        .iter()
        .take(t)
        .map(|&c| boxes[members[c][rng.random_range(0..members[c].len())]])
        .collect())
}

/// Grows a box by `pad` pixels per side, clamped to `width x height`.
pub fn context_pad(b: &BBox, pad: u32, width: u32, height: u32) -> BBox {
    BBox {
        x1: b.x1.saturating_sub(pad),
        y1: b.y1.saturating_sub(pad),
        x2: (b.x2 + pad).min(width),
        y2: (b.y2 + pad).min(height),
    }
}

/// Population variance of the crop's gray levels (`0.299 R + 0.587 G + 0.114 B`).
pub fn gray_variance(img: &RgbImage, b: &BBox) -> f64 {
    // gray levels scaled by 1000 are integers, so the sums are exact
    let (mut sum, mut sum_sq) = (0u128, 0u128);
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            let [r, g, bl] = img.get_pixel(x, y).0;
            let v = 299 * u128::from(r) + 587 * u128::from(g) + 114 * u128::from(bl);
            sum += v;
            sum_sq += v * v;
        }
    }
    let n = u128::from(b.area());
    let num = n * sum_sq - sum * sum;
    num as f64 / (n * n) as f64 / 1e6
}

/// Whether a prototype box survives the low-variance filter.
pub fn variance_filter(img: &RgbImage, b: &BBox, threshold: f64) -> bool {
    gray_variance(img, b) >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub lambda_b: f32,
    pub lambda_f: f32,
    pub sigma: f32,
    /// Spectral cluster count.
    pub clusters: usize,
    /// Number of prototypes kept per image.
    pub top: usize,
    pub context_pad: u32,
    /// Set for domain-adaptation runs only.
    pub var_threshold: Option<f64>,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            lambda_b: 0.5,
            lambda_f: 0.5,
            sigma: 1.0,
            clusters: 10,
            top: 5,
            context_pad: DEFAULT_CONTEXT_PAD,
            var_threshold: None,
        }
    }
}

impl ProposalParams {
    pub fn validate(&self) -> Result<()> {
        check_lambdas(self.lambda_b, self.lambda_f)?;
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma must be > 0"));
        }
        if self.clusters == 0 || self.top == 0 || self.top > self.clusters {
            return Err(Error::invalid(format!(
                "need 1 <= T <= Q, got T = {} and Q = {}",
                self.top, self.clusters
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub image_id: String,
    /// Context-padded boxes.
    pub boxes: Vec<BBox>,
    pub features: Vec<FeatureVec>,
}

/// Runs the first clustering stage on one image. `seed` is the global seed;
/// the per-image draw uses a seed derived from it and the image id.
pub fn mine_prototypes(
    image: &ImageRecord,
    extractor: &dyn FeatureExtractor,
    params: &ProposalParams,
    seed: u64,
) -> Result<PrototypeSet> {
    params.validate()?;
    let image_seed = derive_seed(seed, &image.id);
    let boxes: Vec<BBox> = filter_proposals(image.boxes()).into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let mut set = PrototypeSet { image_id: image.id.clone(), boxes: Vec::new(), features: Vec::new() };
    if boxes.is_empty() {
        log::warn!("image `{}` has no proposals left after filtering", image.id);
        return Ok(set);
    }
    let feats = boxes.iter().map(|b| extractor.region(image, *b)).collect::<Result<Vec<_>>>()?;
    let graph = build_graph(&boxes, &feats, params.lambda_b, params.lambda_f, params.sigma)?;
    let q = params.clusters.min(boxes.len());
    let labels = spectral_cluster(&graph, q, image_seed)?;
    let chosen = select_prototypes(&labels, &boxes, params.top, image_seed.rotate_left(17))?;

    for b in chosen {
        if let Some(threshold) = params.var_threshold {
            let img = image
                .pixels
                .as_deref()
                .ok_or_else(|| Error::MissingFeature(format!("pixels of `{}` for the variance filter", image.id)))?;
            if !variance_filter(img, &b, threshold) {
                continue;
            }
        }
        let padded = context_pad(&b, params.context_pad, FRAME, FRAME);
        set.features.push(extractor.region(image, padded)?);
        set.boxes.push(padded);
    }
    Ok(set)
}
