//! One-vs-rest linear SVM: L2-regularized hinge loss solved by dual
//! coordinate descent, with the bias learned as an extra constant feature.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::dot;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub max_epochs: usize,
    /// Stop once the duality gap is below this fraction of the primal value.
    pub gap_tol: f64,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self { c: 1.0, max_epochs: 2000, gap_tol: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub c: f64,
    /// One weight vector per class, in class order.
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
}

impl SvmModel {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        Ok(self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, x) + b).collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Argmax of the class scores; ties go to the lowest class index.
pub fn svm_predict(model: &SvmModel, x: &[f32]) -> Result<usize> {
    let s = model.scores(x)?;
    let mut best = 0;
    for (c, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = c;
        }
    }
    Ok(best)
}

/// One binary problem with labels in `{-1, +1}`; returns `(w, b)`.
fn train_binary<P: AsRef<[f32]>>(xs: &[P], y: &[f64], p: &SvmParams, seed: u64) -> (Vec<f64>, f64) {
    let d = xs[0].as_ref().len();
    let n = xs.len();
    // augmented feature vector [x, 1]
    let q: Vec<f64> = xs.iter().map(|x| x.as_ref().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() + 1.0).collect();
    let margin = |w: &[f64], b: f64, x: &[f32]| -> f64 { x.iter().zip(w).map(|(&v, w)| f64::from(v) * w).sum::<f64>() + b };
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut alpha = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..p.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = xs[i].as_ref();
            let g = y[i] * margin(&w, b, x) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == p.c {
                g.max(0.0)
            } else {
                g
            };
            if pg == 0.0 {
                continue;
            }
            let new = (alpha[i] - g / q[i]).clamp(0.0, p.c);
            let step = (new - alpha[i]) * y[i];
            alpha[i] = new;
            for (wj, &v) in w.iter_mut().zip(x) {
                *wj += step * f64::from(v);
            }
            b += step;
        }
        let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
        let hinge: f64 = xs.iter().zip(y).map(|(x, &yi)| (1.0 - yi * margin(&w, b, x.as_ref())).max(0.0)).sum();
        let primal = reg + p.c * hinge;
        let dual = alpha.iter().sum::<f64>() - reg;
        if primal - dual <= p.gap_tol * primal.abs().max(1e-12) {
            break;
        }
    }
    (w, b)
}

/// Trains one binary SVM per class (class `c` against the rest).
pub fn svm_train<P: AsRef<[f32]> + Sync>(xs: &[P], y: &[usize], classes: usize, params: &SvmParams) -> Result<SvmModel> {
    if xs.len() != y.len() {
        return Err(Error::dims(xs.len(), y.len()));
    }
    let d = xs.first().ok_or_else(|| Error::invalid("SVM needs training data"))?.as_ref().len();
    if let Some(x) = xs.iter().find(|x| x.as_ref().len() != d) {
        return Err(Error::dims(d, x.as_ref().len()));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
    }
    if y.iter().all(|&l| l == y[0]) {
        return Err(Error::invalid("SVM training needs at least two classes"));
    }
    if !(params.c > 0.0) || params.max_epochs == 0 {
        return Err(Error::invalid("SVM needs C > 0 and at least one epoch"));
    }
    let per_class: Vec<(Vec<f64>, f64)> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let yc: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(xs, &yc, params, derive_seed(params.seed, &format!("class{c}")))
        })
        .collect();
    Ok(SvmModel {
        c: params.c,
        weights: per_class.iter().map(|(w, _)| w.iter().map(|&v| v as f32).collect()).collect(),
        bias: per_class.iter().map(|&(_, b)| b as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut y = Vec::new();
        for k in 0..10 {
            let t = k as f32 * 0.3;
            xs.push(vec![-1.0 - t, t - 1.5]);
            y.push(0);
            xs.push(vec![1.0 + t, 1.5 - t]);
            y.push(1);
        }
        (xs, y)
    }

    #[test]
    fn separable_toy_is_fit() {
        let (xs, y) = separable();
        let m = svm_train(&xs, &y, 2, &SvmParams::default()).unwrap();
        for (x, &l) in xs.iter().zip(&y) {
            assert_eq!(svm_predict(&m, x).unwrap(), l);
        }
    }

    #[test]
    fn duplicated_data_predicts_the_same() {
        let (xs, y) = separable();
        let a = svm_train(&xs, &y, 2, &SvmParams::default()).unwrap();
        let xs2: Vec<Vec<f32>> = xs.iter().chain(&xs).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let b = svm_train(&xs2, &y2, 2, &SvmParams::default()).unwrap();
        for i in -10..=10 {
            for j in -10..=10 {
                let x = [i as f32 * 0.5, j as f32 * 0.5];
                let s = a.scores(&x).unwrap();
                // points near the boundary may flip within the solver tolerance
                if (s[0] - s[1]).abs() > 0.2 {
                    assert_eq!(svm_predict(&a, &x).unwrap(), svm_predict(&b, &x).unwrap(), "{x:?}");
                }
            }
        }
    }

    #[test]
    fn ties_go_to_class_zero() {
        let m = SvmModel { c: 1.0, weights: vec![vec![0.0; 2]; 3], bias: vec![0.5; 3] };
        assert_eq!(svm_predict(&m, &[1.0, 2.0]).unwrap(), 0);
    }

    #[test]
    fn deterministic() {
        let (xs, y) = separable();
        let p = SvmParams { seed: 4, ..Default::default() };
        assert_eq!(svm_train(&xs, &y, 2, &p).unwrap(), svm_train(&xs, &y, 2, &p).unwrap());
    }

    #[test]
    fn errors() {
        let (xs, _) = separable();
        assert!(svm_train(&xs, &vec![0; xs.len()], 2, &SvmParams::default()).is_err());
        assert!(svm_train(&[vec![0.0f32], vec![0.0, 1.0]], &[0, 1], 2, &SvmParams::default()).is_err());
        let m = SvmModel { c: 1.0, weights: vec![vec![0.0; 2]; 2], bias: vec![0.0; 2] };
        assert!(svm_predict(&m, &[1.0]).is_err());
    }
}
