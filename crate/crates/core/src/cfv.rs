//! Convolutional Fisher vectors: per-scale FV encoding of conv descriptors,
//! cross-scale max-pooling of the L2-normalized vectors, then power and L2
//! normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureTensor, FeatureVec, ImageRecord};
use crate::error::{Error, Result};
use crate::extractors::{ConvScale, FeatureExtractor};
use crate::gmm::GmmModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvConfig {
    /// Scale factors are `sqrt(2)^e` for each exponent `e`.
    pub exponents: Vec<i32>,
    pub alpha: f64,
    pub include_weight_grad: bool,
}

impl Default for FvConfig {
    fn default() -> Self {
        Self::five_scales()
    }
}

impl FvConfig {
    pub fn five_scales() -> Self {
        Self { exponents: (0..=4).collect(), alpha: 0.5, include_weight_grad: false }
    }

    pub fn ten_scales() -> Self {
        Self { exponents: (-6..=3).collect(), ..Self::five_scales() }
    }

    pub fn scales(&self) -> Vec<ConvScale> {
        self.exponents.iter().enumerate().map(|(index, &exponent)| ConvScale { index, exponent }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.exponents.is_empty() {
            return Err(Error::invalid("CFV needs at least one scale"));
        }
        check_alpha(self.alpha)
    }

    pub fn output_dim(&self, gmm: &GmmModel) -> usize {
        let m = gmm.components();
        2 * m * gmm.dim() + if self.include_weight_grad { m } else { 0 }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("power exponent {alpha} must be in (0, 1]")))
    }
}

/// Unnormalized Fisher vector of a descriptor set, averaged over descriptors.
/// Layout: optional weight block (M), mean block (M x d), variance block (M x d).
pub fn fisher_vector<D: AsRef<[f32]>>(xs: &[D], gmm: &GmmModel, weight_grad: bool) -> Result<FeatureVec> {
    if xs.is_empty() {
        return Err(Error::invalid("Fisher vector of an empty descriptor set"));
    }
    let (m, d) = (gmm.components(), gmm.dim());
    let mut gw = vec![0.0f64; m];
    let mut gmu = vec![0.0f64; m * d];
    let mut gsig = vec![0.0f64; m * d];
    for x in xs {
        let x = x.as_ref();
        let (g, _) = gmm.posteriors(x)?;
        for i in 0..m {
            if g[i] == 0.0 {
                continue;
            }
            gw[i] += g[i];
            let (mu, var) = (gmm.mean(i), gmm.var(i));
            for j in 0..d {
                let z = (f64::from(x[j]) - mu[j]) / var[j].sqrt();
                gmu[i * d + j] += g[i] * z;
                gsig[i * d + j] += g[i] * (z * z - 1.0);
            }
        }
    }
    let n = xs.len() as f64;
    let mut out = Vec::with_capacity(2 * m * d + if weight_grad { m } else { 0 });
    if weight_grad {
        for i in 0..m {
            let w = gmm.weights()[i];
            out.push(((gw[i] - n * w) / (n * w.sqrt())) as f32);
        }
    }
    for i in 0..m {
        let s = n * gmm.weights()[i].sqrt();
        out.extend(gmu[i * d..(i + 1) * d].iter().map(|v| (v / s) as f32));
    }
    for i in 0..m {
        let s = n * (2.0 * gmm.weights()[i]).sqrt();
        out.extend(gsig[i * d..(i + 1) * d].iter().map(|v| (v / s) as f32));
    }
    FeatureVec::new(out)
}

/// Fisher vector of one scale's conv tensor, without the weight block.
pub fn fv_encode_scale(tensor: &FeatureTensor, gmm: &GmmModel) -> Result<FeatureVec> {
    if tensor.d() != gmm.dim() {
        return Err(Error::dims(gmm.dim(), tensor.d()));
    }
    fisher_vector(&tensor.columns(), gmm, false)
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
    }
}

/// L2-normalizes each scale's vector, then takes the elementwise max.
pub fn msp_pool(per_scale: &[FeatureVec]) -> Result<FeatureVec> {
    let first = per_scale.first().ok_or_else(|| Error::invalid("pooling needs at least one scale"))?;
    let mut out = vec![f32::NEG_INFINITY; first.dim()];
    for v in per_scale {
        if v.dim() != first.dim() {
            return Err(Error::dims(first.dim(), v.dim()));
        }
        for (o, x) in out.iter_mut().zip(l2_normalized(v)) {
            *o = o.max(x);
        }
    }
    FeatureVec::new(out)
}

/// Signed power `sign(z) |z|^alpha`, then L2 normalization.
pub fn power_l2(v: &FeatureVec, alpha: f64) -> Result<FeatureVec> {
    check_alpha(alpha)?;
    let p: Vec<f32> = v.iter().map(|&z| (f64::from(z).signum() * f64::from(z).abs().powf(alpha)) as f32).collect();
    FeatureVec::new(l2_normalized(&p))
}

/// CFV of one image.
pub fn encode_cfv(
    image: &ImageRecord,
    extractor: &dyn FeatureExtractor,
    gmm: &GmmModel,
    cfg: &FvConfig,
) -> Result<FeatureVec> {
    cfg.validate()?;
    let per_scale = cfg
        .scales()
        .par_iter()
        .map(|&s| {
            let t = extractor.conv(image, s)?;
            if t.d() != gmm.dim() {
                return Err(Error::dims(gmm.dim(), t.d()));
            }
            fisher_vector(&t.columns(), gmm, cfg.include_weight_grad)
        })
        .collect::<Result<Vec<_>>>()?;
    power_l2(&msp_pool(&per_scale)?, cfg.alpha)
}
