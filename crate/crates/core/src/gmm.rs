//! Diagonal-covariance Gaussian mixture trained by EM over conv descriptors.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{sidecar_path, FeatureStore, FeatureTensor, FeatureVec};
use crate::dictionary::{kmeans, KMeansParams};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Variance floor relative to the global per-dimension data variance.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-4;

/// Components whose soft count drops below this are re-seeded.
const COLLAPSE_MASS: f64 = 1e-6;

const E_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    /// `M x d`, row-major.
    means: Vec<f64>,
    vars: Vec<f64>,
    /// Per-dimension variance lower bound.
    floor: Vec<f64>,
    d: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "M")]
    m: usize,
    d: usize,
    floor: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>, floor: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::invalid("GMM needs at least one component"));
        }
        let d = floor.len();
        if d == 0 || means.len() != m * d || vars.len() != m * d {
            return Err(Error::invalid(format!(
                "GMM shape mismatch: M = {m}, d = {d}, {} means, {} variances",
                means.len(),
                vars.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("GMM weights must be positive and sum to 1, got sum {sum}")));
        }
        if floor.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::invalid("GMM variance floor must be positive"));
        }
        for (i, &v) in vars.iter().enumerate() {
            if !(v >= floor[i % d]) || !v.is_finite() {
                return Err(Error::invalid(format!("GMM variance {v} below floor {}", floor[i % d])));
            }
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GMM means".into()));
        }
        Ok(Self { weights, means, vars, floor, d })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.d..(i + 1) * self.d]
    }

    pub fn var(&self, i: usize) -> &[f64] {
        &self.vars[i * self.d..(i + 1) * self.d]
    }

    pub fn floor(&self) -> &[f64] {
        &self.floor
    }

    fn log_norms(&self) -> Vec<f64> {
        (0..self.components())
            .map(|i| self.weights[i].ln() - 0.5 * self.var(i).iter().map(|v| LN_2PI + v.ln()).sum::<f64>())
            .collect()
    }

    fn log_joint(&self, x: &[f32], norms: &[f64], out: &mut [f64]) -> f64 {
        for (i, o) in out.iter_mut().enumerate() {
            let (mu, var) = (self.mean(i), self.var(i));
            let q: f64 = x
                .iter()
                .zip(mu.iter().zip(var))
                .map(|(&xv, (&m, &v))| {
                    let r = f64::from(xv) - m;
                    r * r / v
                })
                .sum();
            *o = norms[i] - 0.5 * q;
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    /// Posterior responsibilities of `x` and its log-density.
    pub fn posteriors(&self, x: &[f32]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.d {
            return Err(Error::dims(self.d, x.len()));
        }
        let norms = self.log_norms();
        let mut g = vec![0.0; self.components()];
        let lse = self.log_joint(x, &norms, &mut g);
        for v in &mut g {
            *v = (*v - lse).exp();
        }
        Ok((g, lse))
    }

    /// Sum of per-descriptor log-densities.
    pub fn log_likelihood<P: AsRef<[f32]>>(&self, xs: &[P]) -> Result<f64> {
        let norms = self.log_norms();
        let mut buf = vec![0.0; self.components()];
        let mut total = 0.0;
        for x in xs {
            let x = x.as_ref();
            if x.len() != self.d {
                return Err(Error::dims(self.d, x.len()));
            }
            total += self.log_joint(x, &norms, &mut buf);
        }
        Ok(total)
    }

    /// Writes `gmm#w`, `gmm#mu:{m}`, `gmm#var:{m}` plus a JSON sidecar.
    /// Parameters are stored as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let to_vec = |v: &[f64]| FeatureVec::new(v.iter().map(|&x| x as f32).collect());
        let mut store = FeatureStore::new();
        store.insert("gmm#w".into(), to_vec(&self.weights)?.into())?;
        for i in 0..self.components() {
            store.insert(format!("gmm#mu:{i}"), to_vec(self.mean(i))?.into())?;
        }
        for i in 0..self.components() {
            store.insert(format!("gmm#var:{i}"), to_vec(self.var(i))?.into())?;
        }
        store.save(path)?;
        let side = Sidecar { m: self.components(), d: self.d, floor: self.floor.clone() };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = FeatureStore::open(path)?;
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let read = |key: &str, n: usize| -> Result<Vec<f64>> {
            let t = store.require(key)?;
            if t.data().len() != n {
                return Err(Error::dims(n, t.data().len()));
            }
            Ok(t.data().iter().map(|&v| f64::from(v)).collect())
        };
        let mut weights = read("gmm#w", side.m)?;
        // f32 rounding can push the sum slightly off 1
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        let mut means = Vec::with_capacity(side.m * side.d);
        let mut vars = Vec::with_capacity(side.m * side.d);
        for i in 0..side.m {
            means.extend(read(&format!("gmm#mu:{i}"), side.d)?);
        }
        for i in 0..side.m {
            vars.extend(read(&format!("gmm#var:{i}"), side.d)?);
        }
        // rounding is monotone, so the rounded floor still bounds the rounded variances
        let floor: Vec<f64> = side.floor.iter().map(|&f| f64::from(f as f32).min(f)).collect();
        Self::new(weights, means, vars, floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub max_iter: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the training data before every M-step and
    /// for the final model.
    pub log_likelihood: Vec<f64>,
    /// Indices into `log_likelihood` reached right after a collapse re-seed;
    /// the likelihood may drop there.
    pub reseeded: Vec<usize>,
}

/// Sufficient statistics of one E-step.
struct Stats {
    nk: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    ll: f64,
    /// Point with the lowest log-density, ties to the lower index.
    worst: (f64, usize),
}

impl Stats {
    fn zeros(m: usize, d: usize) -> Self {
        Self { nk: vec![0.0; m], sx: vec![0.0; m * d], sxx: vec![0.0; m * d], ll: 0.0, worst: (f64::INFINITY, 0) }
    }

    fn merge(mut self, o: Stats) -> Self {
        self.nk.iter_mut().zip(&o.nk).for_each(|(a, b)| *a += b);
        self.sx.iter_mut().zip(&o.sx).for_each(|(a, b)| *a += b);
        self.sxx.iter_mut().zip(&o.sxx).for_each(|(a, b)| *a += b);
        self.ll += o.ll;
        if o.worst.0 < self.worst.0 {
            self.worst = o.worst;
        }
        self
    }
}

fn e_step<P: AsRef<[f32]> + Sync>(model: &GmmModel, xs: &[P]) -> Stats {
    let (m, d) = (model.components(), model.dim());
    let norms = model.log_norms();
    // fixed blocks reduced in order, so the result does not depend on the
    // thread count
    let blocks: Vec<Stats> = xs
        .par_chunks(E_BLOCK)
        .enumerate()
        .map(|(b, chunk)| {
            let mut st = Stats::zeros(m, d);
            let mut g = vec![0.0; m];
            for (k, x) in chunk.iter().enumerate() {
                let x = x.as_ref();
                let lse = model.log_joint(x, &norms, &mut g);
                st.ll += lse;
                if lse < st.worst.0 {
                    st.worst = (lse, b * E_BLOCK + k);
                }
                for i in 0..m {
                    let gi = (g[i] - lse).exp();
                    st.nk[i] += gi;
                    let (sx, sxx) = (&mut st.sx[i * d..(i + 1) * d], &mut st.sxx[i * d..(i + 1) * d]);
                    for j in 0..d {
                        let v = f64::from(x[j]);
                        sx[j] += gi * v;
                        sxx[j] += gi * v * v;
                    }
                }
            }
            st
        })
        .collect();
    blocks.into_iter().fold(Stats::zeros(m, d), Stats::merge)
}

fn global_floor<P: AsRef<[f32]>>(xs: &[P], d: usize) -> Vec<f64> {
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        mean.iter_mut().zip(x.as_ref()).for_each(|(m, &v)| *m += f64::from(v));
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in xs {
        for ((s, &v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
            let r = f64::from(v) - m;
            *s += r * r;
        }
    }
    var.iter().map(|s| (VARIANCE_FLOOR_RATIO * s / n).max(1e-10)).collect()
}

/// Fits an `m`-component diagonal GMM: k-means initialization, then EM.
pub fn train_gmm<P: AsRef<[f32]> + Sync>(xs: &[P], m: usize, seed: u64, params: GmmParams) -> Result<GmmFit> {
    if m == 0 || xs.len() < m {
        return Err(Error::invalid(format!("GMM with M = {m} needs at least M descriptors, got {}", xs.len())));
    }
    if params.max_iter == 0 || !(params.tol >= 0.0) {
        return Err(Error::invalid("GMM needs max_iter >= 1 and tol >= 0"));
    }
    let km = kmeans(xs, m, seed, KMeansParams::default())?;
    let d = km.centers.cols();
    let n = xs.len() as f64;
    let floor = global_floor(xs, d);

    let mut counts = vec![0usize; m];
    let mut sxx = vec![0.0; m * d];
    for (x, &a) in xs.iter().zip(&km.assignments) {
        counts[a] += 1;
        for (j, &v) in x.as_ref().iter().enumerate() {
            let r = f64::from(v) - f64::from(km.centers.row(a)[j]);
            sxx[a * d + j] += r * r;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let wsum: f64 = weights.iter().sum();
    let weights = weights.iter().map(|w| w / wsum).collect();
    let means = km.centers.data().iter().map(|&v| f64::from(v)).collect();
    let vars = (0..m * d).map(|k| (sxx[k] / counts[k / d].max(1) as f64).max(floor[k % d])).collect();
    let mut model = GmmModel::new(weights, means, vars, floor)?;

    let mut history = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_iter {
        let st = e_step(&model, xs);
        let ll = st.ll / n;
        if let Some(&prev) = history.last() {
            let exempt = reseeded.last() == Some(&(history.len()));
            debug_assert!(exempt || ll >= prev - 1e-8, "EM log-likelihood decreased: {prev} -> {ll}");
            if !exempt && ll - prev < params.tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        if m_step(&mut model, &st, xs) {
            reseeded.push(history.len());
        }
    }
    if !converged {
        history.push(e_step(&model, xs).ll / n);
    }
    Ok(GmmFit { model, log_likelihood: history, reseeded })
}

/// Updates the parameters in place; returns whether a component was re-seeded.
fn m_step<P: AsRef<[f32]>>(model: &mut GmmModel, st: &Stats, xs: &[P]) -> bool {
    let (m, d) = (model.components(), model.dim());
    let n = xs.len() as f64;
    let mut reseed = false;
    for i in 0..m {
        let nk = st.nk[i];
        if nk < COLLAPSE_MASS {
            reseed = true;
            let x = xs[st.worst.1].as_ref();
            for j in 0..d {
                model.means[i * d + j] = f64::from(x[j]);
                model.vars[i * d + j] = model.floor[j] / VARIANCE_FLOOR_RATIO;
            }
            model.weights[i] = 1.0 / n;
            continue;
        }
        model.weights[i] = nk / n;
        for j in 0..d {
            let mu = st.sx[i * d + j] / nk;
            model.means[i * d + j] = mu;
            model.vars[i * d + j] = (st.sxx[i * d + j] / nk - mu * mu).max(model.floor[j]);
        }
    }
    let s: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= s);
    reseed
}

/// Per-scale draw counts for one image: `round(budget * n_s / sum n)`, clamped
/// to `n_s`.
pub fn scale_quotas(counts: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    counts
        .iter()
        .map(|&c| ((budget as f64 * c as f64 / total as f64).round() as usize).min(c))
        .collect()
}

/// Draws GMM training descriptors from per-image, per-scale conv tensors.
/// The budget is split evenly over images, then proportionally over scales.
pub fn sample_descriptors(tensors: &[Vec<FeatureTensor>], budget: usize, seed: u64) -> Result<Vec<FeatureVec>> {
    if budget == 0 {
        return Err(Error::invalid("descriptor budget must be >= 1"));
    }
    if tensors.iter().flatten().all(|t| t.positions() == 0) {
        return Err(Error::invalid("no conv descriptors to sample from"));
    }
    let images = tensors.len();
    let mut out = Vec::new();
    for (i, scales) in tensors.iter().enumerate() {
        let share = budget / images + usize::from(i < budget % images);
        let counts: Vec<usize> = scales.iter().map(FeatureTensor::positions).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("image{i}")));
        for (t, q) in scales.iter().zip(scale_quotas(&counts, share)) {
            let mut idx = sample(&mut rng, t.positions(), q).into_vec();
            idx.sort_unstable();
            for p in idx {
                let (r, c) = (p / t.w(), p % t.w());
                out.push(FeatureVec::new(t.column(r, c))?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let mut xs = Vec::new();
        for k in 0..300 {
            let c = if k < 100 { [-4.0f32, 0.0] } else { [4.0, 1.0] };
            xs.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
        }
        xs
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f32>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let fit = train_gmm(&xs, 1, 0, GmmParams::default()).unwrap();
        for j in 0..3 {
            let mean = xs.iter().map(|x| f64::from(x[j])).sum::<f64>() / 50.0;
            let var = xs.iter().map(|x| (f64::from(x[j]) - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((fit.model.mean(0)[j] - mean).abs() < 1e-6);
            assert!((fit.model.var(0)[j] - var).abs() < 1e-6);
        }
        assert_eq!(fit.model.weights(), &[1.0]);
    }

    #[test]
    fn two_blobs() {
        let xs = blobs(1);
        let fit = train_gmm(&xs, 2, 7, GmmParams::default()).unwrap();
        let mut comps: Vec<usize> = (0..2).collect();
        comps.sort_by(|&a, &b| fit.model.mean(a)[0].total_cmp(&fit.model.mean(b)[0]));
        let (lo, hi) = (comps[0], comps[1]);
        let mean_of = |r: std::ops::Range<usize>, j: usize| xs[r.clone()].iter().map(|x| f64::from(x[j])).sum::<f64>() / r.len() as f64;
        assert!((fit.model.mean(lo)[0] - mean_of(0..100, 0)).abs() < 0.1);
        assert!((fit.model.mean(hi)[1] - mean_of(100..300, 1)).abs() < 0.1);
        assert!((fit.model.weights()[lo] - 1.0 / 3.0).abs() < 0.05);
        assert!((fit.model.weights()[hi] - 2.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn likelihood_never_decreases() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f32>> = (0..120).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let fit = train_gmm(&xs, 4, seed, GmmParams { max_iter: 60, tol: 0.0 }).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihood);
            }
        }
    }

    #[test]
    fn responsibilities_sum_to_one_and_respect_floor() {
        let xs = blobs(2);
        let fit = train_gmm(&xs, 3, 0, GmmParams::default()).unwrap();
        for x in &xs {
            let (g, _) = fit.model.posteriors(x).unwrap();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for i in 0..3 {
            for (v, f) in fit.model.var(i).iter().zip(fit.model.floor()) {
                assert!(v >= f);
            }
        }
    }

    #[test]
    fn duplicate_points_hit_the_floor() {
        let xs = vec![vec![1.0f32, 1.0]; 10];
        let mut more = xs.clone();
        more.push(vec![2.0, 3.0]);
        let fit = train_gmm(&more, 2, 0, GmmParams::default()).unwrap();
        for i in 0..2 {
            assert!(fit.model.var(i).iter().zip(fit.model.floor()).all(|(v, f)| v >= f));
        }
    }

    #[test]
    fn too_few_descriptors() {
        assert!(train_gmm(&[vec![0.0f32]], 2, 0, GmmParams::default()).is_err());
    }

    #[test]
    fn quotas_are_proportional() {
        assert_eq!(scale_quotas(&[25, 50, 100], 35), vec![5, 10, 20]);
        assert_eq!(scale_quotas(&[4, 4], 100), vec![4, 4]);
    }

    #[test]
    fn sampling_counts_and_determinism() {
        let t = |h, w| FeatureTensor::new(2, h, w, (0..2 * h * w).map(|v| v as f32).collect()).unwrap();
        let tensors = vec![vec![t(5, 5), t(5, 10), t(10, 10)], vec![t(5, 5), t(5, 10), t(10, 10)]];
        let a = sample_descriptors(&tensors, 70, 9).unwrap();
        assert_eq!(a.len(), 70);
        assert_eq!(a, sample_descriptors(&tensors, 70, 9).unwrap());
        let all = sample_descriptors(&tensors, 10_000, 9).unwrap();
        assert_eq!(all.len(), 2 * 175);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmm.hfrs");
        let fit = train_gmm(&blobs(4), 2, 0, GmmParams::default()).unwrap();
        fit.model.save(&path).unwrap();
        let back = GmmModel::load(&path).unwrap();
        assert_eq!(back.components(), 2);
        for i in 0..2 {
            for (a, b) in back.mean(i).iter().zip(fit.model.mean(i)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        back.save(&path).unwrap();
        assert_eq!(GmmModel::load(&path).unwrap(), back);
    }
}
