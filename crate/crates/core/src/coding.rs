//! Descriptor coding against a dictionary: locality-constrained linear coding
//! (exact closed form and the k-nearest-atom approximation) and VLAD.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{sq_dist_f64, FeatureVec, Matrix};
use crate::dictionary::PartDictionary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlcParams {
    /// Locality penalty weight.
    pub lambda: f64,
    /// Locality bandwidth.
    pub tau: f64,
    /// Atoms used by the approximate coder.
    pub knn: usize,
}

impl LlcParams {
    pub const DEFAULT_LAMBDA: f64 = 1e-4;
    pub const DEFAULT_KNN: usize = 5;

    /// Defaults with `tau = 10 * (mean pairwise atom distance)^2`.
    pub fn for_dictionary(dict: &PartDictionary) -> Self {
        Self { lambda: Self::DEFAULT_LAMBDA, tau: default_tau(dict), knn: Self::DEFAULT_KNN }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) || self.knn == 0 {
            return Err(Error::invalid(format!(
                "LLC needs lambda >= 0, tau > 0, knn >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn default_tau(dict: &PartDictionary) -> f64 {
    let k = dict.len();
    if k < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += sq_dist_f64(dict.atom(i), dict.atom(j)).sqrt();
        }
    }
    let mean = total / (k * (k - 1) / 2) as f64;
    if mean > 0.0 {
        10.0 * mean * mean
    } else {
        1.0
    }
}

fn check_dim(x: &[f32], dict: &PartDictionary) -> Result<()> {
    if x.len() != dict.dim() {
        return Err(Error::dims(dict.dim(), x.len()));
    }
    Ok(())
}

/// Cholesky solve that refuses numerically singular systems.
fn spd_solve(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::Singular(format!("{what} is rank deficient")));
    }
    Ok(chol.solve(&b))
}

/// Exact minimizer of `|x - D v|^2 + lambda |dist . v|^2` with
/// `dist_k = exp(|x - d_k|^2 / tau)`.
pub fn llc_exact(x: &[f32], dict: &PartDictionary, p: &LlcParams) -> Result<FeatureVec> {
    p.validate()?;
    check_dim(x, dict)?;
    let k = dict.len();
    let mut a = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let g: f64 = dict.atom(i).iter().zip(dict.atom(j)).map(|(&u, &v)| f64::from(u) * f64::from(v)).sum();
            a[(i, j)] = g;
            a[(j, i)] = g;
        }
    }
    let mut b = DVector::<f64>::zeros(k);
    for i in 0..k {
        let dist = (sq_dist_f64(x, dict.atom(i)) / p.tau).exp();
        let penalty = p.lambda * dist * dist;
        if !penalty.is_finite() {
            return Err(Error::NonFinite(format!("locality weight of atom {i} (tau too small)")));
        }
        a[(i, i)] += penalty;
        b[i] = dict.atom(i).iter().zip(x).map(|(&u, &v)| f64::from(u) * f64::from(v)).sum();
    }
    let v = spd_solve(a, b, "LLC system")?;
    FeatureVec::new(v.iter().map(|&c| c as f32).collect())
}

/// Indices of the `knn` nearest atoms, ties to the lower index.
fn nearest_atoms(x: &[f32], dict: &PartDictionary, knn: usize) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = (0..dict.len()).map(|k| (sq_dist_f64(x, dict.atom(k)), k)).collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.truncate(knn);
    dists.into_iter().map(|(_, k)| k).collect()
}

/// Approximate LLC: least-squares reconstruction from the `knn` nearest atoms
/// under a sum-to-one constraint, scattered into a `K`-vector.
pub fn llc_approx(x: &[f32], dict: &PartDictionary, p: &LlcParams) -> Result<FeatureVec> {
    check_dim(x, dict)?;
    if p.knn == 0 || p.knn > dict.len() {
        return Err(Error::invalid(format!("knn = {} must be in 1..={}", p.knn, dict.len())));
    }
    let idx = nearest_atoms(x, dict, p.knn);
    let m = idx.len();
    let mut code = vec![0.0f32; dict.len()];
    if m == 1 {
        code[idx[0]] = 1.0;
        return Ok(FeatureVec::from_raw(code));
    }
    // shifted atoms z_i = d_i - x; local covariance C = Z Z^T
    let z: Vec<Vec<f64>> = idx
        .iter()
        .map(|&k| dict.atom(k).iter().zip(x).map(|(&a, &v)| f64::from(a) - f64::from(v)).collect())
        .collect();
    let mut c = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    let reg = (1e-4 * c.trace()).max(1e-12);
    for i in 0..m {
        c[(i, i)] += reg;
    }
    let w = Cholesky::new(c)
        .ok_or_else(|| Error::Singular("approximate LLC covariance".into()))?
        .solve(&DVector::from_element(m, 1.0));
    let total: f64 = w.iter().sum();
    for (&k, &wk) in idx.iter().zip(w.iter()) {
        code[k] = (wk / total) as f32;
    }
    FeatureVec::new(code)
}

/// VLAD: per-center sums of residuals of the descriptors assigned to it
/// (nearest center, ties to the lower index), concatenated.
pub fn vlad_encode<D: AsRef<[f32]>>(descriptors: &[D], centers: &Matrix) -> Result<FeatureVec> {
    let (m, d) = (centers.rows(), centers.cols());
    if m == 0 || d == 0 {
        return Err(Error::invalid("VLAD needs at least one center"));
    }
    let mut out = vec![0.0f32; m * d];
    for x in descriptors {
        let x = x.as_ref();
        if x.len() != d {
            return Err(Error::dims(d, x.len()));
        }
        let mut best = (0, f32::INFINITY);
        for (j, c) in centers.iter_rows().enumerate() {
            let dist = crate::datamodel::sq_dist(x, c);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        let c = centers.row(best.0);
        for ((o, &xi), &ci) in out[best.0 * d..(best.0 + 1) * d].iter_mut().zip(x).zip(c) {
            *o += xi - ci;
        }
    }
    FeatureVec::new(out)
}

/// Objective of the exact LLC problem, for checks.
pub fn llc_objective(x: &[f32], dict: &PartDictionary, p: &LlcParams, v: &[f64]) -> f64 {
    let d = dict.dim();
    let mut resid = vec![0.0f64; d];
    for (r, &xi) in resid.iter_mut().zip(x) {
        *r = f64::from(xi);
    }
    let mut penalty = 0.0;
    for (k, &vk) in v.iter().enumerate() {
        for (r, &a) in resid.iter_mut().zip(dict.atom(k)) {
            *r -= f64::from(a) * vk;
        }
        let dist = (sq_dist_f64(x, dict.atom(k)) / p.tau).exp();
        penalty += (dist * vk).powi(2);
    }
    resid.iter().map(|r| r * r).sum::<f64>() + p.lambda * penalty
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict(rows: &[Vec<f32>]) -> PartDictionary {
        PartDictionary::from_atoms(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn orthonormal_dictionary_without_penalty() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let d = dict(&[vec![s, s], vec![-s, s]]);
        let p = LlcParams { lambda: 0.0, tau: 1.0, knn: 1 };
        let x = [0.3f32, -1.2];
        let v = llc_exact(&x, &d, &p).unwrap();
        let expected = [s * 0.3 + s * -1.2, -s * 0.3 + s * -1.2];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn strong_locality_picks_matching_atom() {
        let d = dict(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.7, 0.7, 0.1]]);
        let p = LlcParams { lambda: 10.0, tau: 0.5, knn: 1 };
        let v = llc_exact(d.atom(0), &d, &p).unwrap();
        let argmax = v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        assert_eq!(argmax, 0);
    }

    #[test]
    fn rank_deficient_without_penalty_is_reported() {
        let d = dict(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        let p = LlcParams { lambda: 0.0, tau: 1.0, knn: 1 };
        assert!(matches!(llc_exact(&[1.0, 1.0], &d, &p), Err(Error::Singular(_))));
    }

    #[test]
    fn approx_single_neighbor() {
        let d = dict(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![1.0, 1.2]]);
        let p = LlcParams { lambda: 1e-4, tau: 1.0, knn: 1 };
        let v = llc_approx(&[0.9, 1.0], &d, &p).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn approx_midpoint_splits_evenly() {
        let d = dict(&[vec![0.0, 2.0], vec![4.0, 0.0]]);
        let p = LlcParams { lambda: 1e-4, tau: 1.0, knn: 2 };
        let v = llc_approx(&[2.0, 1.0], &d, &p).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-6 && (v[1] - 0.5).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn approx_rejects_too_many_neighbors() {
        let d = dict(&[vec![0.0], vec![1.0]]);
        assert!(llc_approx(&[0.5], &d, &LlcParams { lambda: 0.0, tau: 1.0, knn: 3 }).is_err());
    }

    #[test]
    fn vlad_single_center_at_origin_sums() {
        let centers = Matrix::zeros(1, 2);
        let xs = [vec![1.0f32, 2.0], vec![-3.0, 0.5]];
        assert_eq!(vlad_encode(&xs, &centers).unwrap().as_slice(), &[-2.0, 2.5]);
    }

    #[test]
    fn vlad_descriptors_on_centers_are_zero() {
        let centers = Matrix::from_rows(&[vec![1.0f32, 1.0], vec![-2.0, 3.0]]).unwrap();
        let xs = [vec![1.0f32, 1.0], vec![-2.0, 3.0], vec![1.0, 1.0]];
        assert!(vlad_encode(&xs, &centers).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_tau_scales_with_spacing() {
        let d = dict(&[vec![0.0], vec![2.0]]);
        assert!((default_tau(&d) - 40.0).abs() < 1e-9);
    }
}
