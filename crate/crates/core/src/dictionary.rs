//! k-means and part-dictionary construction.
//!
//! The class-specific dictionary clusters each class's prototypes separately
//! and concatenates the centers in class order; the class-mixture dictionary
//! clusters all prototypes together with `per_class_k * class_count` centers.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{sidecar_path, FeatureStore, FeatureVec, Matrix};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once total center movement falls below `tol` times the total
    /// center norm.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn check_points<P: AsRef<[f32]>>(points: &[P], k: usize) -> Result<usize> {
    let first = points.first().ok_or_else(|| Error::invalid("k-means needs at least one point"))?;
    let d = first.as_ref().len();
    if d == 0 {
        return Err(Error::invalid("k-means points must have d >= 1"));
    }
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::dims(d, p.as_ref().len()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} must be in 1..={}", points.len())));
    }
    Ok(d)
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

/// k-means++ seeding; returns indices of the chosen points.
pub fn plus_plus_init<P: AsRef<[f32]>>(points: &[P], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| {
            let c: Vec<f64> = points[first].as_ref().iter().map(|&v| f64::from(v)).collect();
            sq_dist(p.as_ref(), &c)
        })
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target at the very end
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // all points coincide with chosen centers
            taken.iter().position(|&t| !t).unwrap()
        };
        chosen.push(next);
        taken[next] = true;
        let c: Vec<f64> = points[next].as_ref().iter().map(|&v| f64::from(v)).collect();
        for (p, d) in points.iter().zip(nearest.iter_mut()) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
    }
    chosen
}

/// Nearest center per point (ties to the lowest index) and its squared
/// distance.
fn assign<P: AsRef<[f32]> + Sync>(points: &[P], centers: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p.as_ref(), center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Lloyd iterations from k-means++ seeding.
pub fn kmeans<P: AsRef<[f32]> + Sync>(points: &[P], k: usize, seed: u64, params: KMeansParams) -> Result<KMeansResult> {
    check_points(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<&[f32]> = plus_plus_init(points, k, &mut rng).into_iter().map(|i| points[i].as_ref()).collect();
    kmeans_with_init(points, &Matrix::from_rows(&init)?, params)
}

/// Best of `restarts` seeded runs by inertia (ties to the earliest run).
pub fn kmeans_restarts<P: AsRef<[f32]> + Sync>(
    points: &[P],
    k: usize,
    seed: u64,
    restarts: usize,
    params: KMeansParams,
) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, k, derive_seed(seed, &format!("restart{r}")), params)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Lloyd iterations from explicit initial centers.
pub fn kmeans_with_init<P: AsRef<[f32]> + Sync>(points: &[P], init: &Matrix, params: KMeansParams) -> Result<KMeansResult> {
    let k = init.rows();
    let d = check_points(points, k)?;
    if init.cols() != d {
        return Err(Error::dims(d, init.cols()));
    }
    let mut centers: Vec<Vec<f64>> = init.iter_rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let mut assigned = assign(points, &centers);
    let mut history = vec![assigned.iter().map(|a| a.1).sum::<f64>()];

    for _ in 0..params.max_iter {
        let mut counts = vec![0usize; k];
        for &(c, _) in &assigned {
            counts[c] += 1;
        }
        // move the farthest points into empty clusters
        let mut reseeded = false;
        for empty in (0..k).filter(|&c| counts[c] == 0).collect::<Vec<_>>() {
            let far = assigned
                .iter()
                .enumerate()
                .filter(|(_, a)| a.1 > 0.0 && counts[a.0] > 1)
                .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
                    Some((_, bd)) if bd >= a.1 => best,
                    _ => Some((i, a.1)),
                });
            if let Some((i, _)) = far {
                counts[assigned[i].0] -= 1;
                counts[empty] += 1;
                assigned[i] = (empty, 0.0);
                centers[empty] = points[i].as_ref().iter().map(|&v| f64::from(v)).collect();
                reseeded = true;
            }
        }

        let mut sums = vec![vec![0.0f64; d]; k];
        for (p, &(c, _)) in points.iter().zip(&assigned) {
            for (s, &v) in sums[c].iter_mut().zip(p.as_ref()) {
                *s += f64::from(v);
            }
        }
        let mut shift = 0.0;
        let mut norm = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (old, s) in centers[c].iter_mut().zip(&sums[c]) {
                let new = s * inv;
                shift += (new - *old) * (new - *old);
                norm += *old * *old;
                *old = new;
            }
        }

        assigned = assign(points, &centers);
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        let prev = *history.last().unwrap();
        debug_assert!(
            inertia <= prev + 1e-9 * prev.max(1.0),
            "k-means inertia increased: {prev} -> {inertia}"
        );
        history.push(inertia);
        if !reseeded && shift.sqrt() <= params.tol * norm.sqrt().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let data: Vec<f32> = centers.iter().flatten().map(|&v| v as f32).collect();
    Ok(KMeansResult {
        centers: Matrix::new(k, d, data)?,
        assignments: assigned.iter().map(|a| a.0).collect(),
        inertia: *history.last().unwrap(),
        inertia_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryMode {
    ClassSpecific,
    ClassMixture,
}

impl std::str::FromStr for DictionaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" | "class_specific" | "class-specific" => Ok(DictionaryMode::ClassSpecific),
            "cm" | "class_mixture" | "class-mixture" => Ok(DictionaryMode::ClassMixture),
            other => Err(Error::invalid(format!("unknown dictionary mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartDictionary {
    pub atoms: Matrix,
    pub mode: DictionaryMode,
    pub per_class_k: usize,
    /// Atom index range of every class (class-specific mode only).
    pub class_ranges: Vec<Range<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    mode: DictionaryMode,
    per_class_k: usize,
    class_ranges: Vec<[usize; 2]>,
}

impl PartDictionary {
    pub fn len(&self) -> usize {
        self.atoms.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.atoms.cols()
    }

    pub fn atom(&self, k: usize) -> &[f32] {
        self.atoms.row(k)
    }

    pub fn from_atoms(atoms: Matrix) -> Result<Self> {
        if atoms.rows() == 0 || atoms.cols() == 0 {
            return Err(Error::invalid("dictionary needs at least one atom of d >= 1"));
        }
        let k = atoms.rows();
        Ok(Self { atoms, mode: DictionaryMode::ClassMixture, per_class_k: k, class_ranges: Vec::new() })
    }

    /// Writes atoms as `dict#atom:{k}` store entries plus a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = FeatureStore::new();
        for (k, atom) in self.atoms.iter_rows().enumerate() {
            store.insert(format!("dict#atom:{k}"), FeatureVec::new(atom.to_vec())?.into())?;
        }
        store.save(path)?;
        let side = Sidecar {
            mode: self.mode,
            per_class_k: self.per_class_k,
            class_ranges: self.class_ranges.iter().map(|r| [r.start, r.end]).collect(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = FeatureStore::open(path)?;
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut rows = Vec::with_capacity(store.len());
        for k in 0..store.len() {
            rows.push(store.require(&format!("dict#atom:{k}"))?.to_vec());
        }
        let atoms = Matrix::from_rows(&rows)?;
        let dict = Self {
            atoms,
            mode: side.mode,
            per_class_k: side.per_class_k,
            class_ranges: side.class_ranges.iter().map(|r| r[0]..r[1]).collect(),
        };
        if dict.is_empty() {
            return Err(Error::invalid("dictionary file has no atoms"));
        }
        Ok(dict)
    }
}

/// Builds a part dictionary from `(label, feature)` prototype samples.
///
/// Classes with fewer prototypes than `per_class_k` get their k clamped to
/// the prototype count (a warning is logged).
pub fn build_dictionary(
    samples: &[(usize, FeatureVec)],
    class_count: usize,
    mode: DictionaryMode,
    per_class_k: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<PartDictionary> {
    if samples.is_empty() {
        return Err(Error::invalid("no prototypes to build a dictionary from"));
    }
    if per_class_k == 0 {
        return Err(Error::invalid("per_class_k must be >= 1"));
    }
    if let Some((label, _)) = samples.iter().find(|(l, _)| *l >= class_count) {
        return Err(Error::invalid(format!("prototype label {label} >= class count {class_count}")));
    }

    match mode {
        DictionaryMode::ClassMixture => {
            let points: Vec<&[f32]> = samples.iter().map(|(_, f)| f.as_slice()).collect();
            let mut k = per_class_k * class_count;
            if k > points.len() {
                log::warn!("class-mixture dictionary: clamping K from {k} to {} prototypes", points.len());
                k = points.len();
            }
            let res = kmeans(&points, k, seed, params)?;
            Ok(PartDictionary { atoms: res.centers, mode, per_class_k, class_ranges: Vec::new() })
        }
        DictionaryMode::ClassSpecific => {
            let per_class: Vec<Vec<&[f32]>> = (0..class_count)
                .map(|c| samples.iter().filter(|(l, _)| *l == c).map(|(_, f)| f.as_slice()).collect())
                .collect();
            let runs: Vec<Option<Matrix>> = per_class
                .par_iter()
                .enumerate()
                .map(|(c, pts)| {
                    if pts.is_empty() {
                        log::warn!("class {c} has no prototypes; it contributes no atoms");
                        return Ok(None);
                    }
                    let mut k = per_class_k;
                    if k > pts.len() {
                        log::warn!("class {c}: clamping k from {k} to {} prototypes", pts.len());
                        k = pts.len();
                    }
                    kmeans(pts, k, seed.wrapping_add(c as u64), params).map(|r| Some(r.centers))
                })
                .collect::<Result<_>>()?;

            let mut rows: Vec<&[f32]> = Vec::new();
            let mut class_ranges = Vec::with_capacity(class_count);
            for centers in &runs {
                let start = rows.len();
                if let Some(m) = centers {
                    rows.extend(m.iter_rows());
                }
                class_ranges.push(start..rows.len());
            }
            Ok(PartDictionary { atoms: Matrix::from_rows(&rows)?, mode, per_class_k, class_ranges })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f32>>, [f64; 2], [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        for i in 0..n {
            let (cx, cy) = if i % 2 == 0 { (0.0, 0.0) } else { (10.0, 5.0) };
            pts.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
        }
        let mean = |parity: usize| {
            let sel: Vec<&Vec<f32>> = pts.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, p)| p).collect();
            let m = sel.len() as f64;
            [
                sel.iter().map(|p| f64::from(p[0])).sum::<f64>() / m,
                sel.iter().map(|p| f64::from(p[1])).sum::<f64>() / m,
            ]
        };
        let (a, b) = (mean(0), mean(1));
        (pts, a, b)
    }

    #[test]
    fn distinct_points_become_centers() {
        let pts = vec![vec![0.0f32, 1.0], vec![5.0, 5.0], vec![-3.0, 2.0]];
        let res = kmeans(&pts, 3, 11, KMeansParams::default()).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut centers: Vec<Vec<f32>> = res.centers.iter_rows().map(<[f32]>::to_vec).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected = pts.clone();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, expected);
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, a, b) = blobs(200, 4);
        let res = kmeans(&pts, 2, 1, KMeansParams::default()).unwrap();
        for target in [a, b] {
            let best = res
                .centers
                .iter_rows()
                .map(|c| ((f64::from(c[0]) - target[0]).powi(2) + (f64::from(c[1]) - target[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "center off by {best}");
        }
    }

    #[test]
    fn deterministic_and_monotone() {
        let (pts, _, _) = blobs(120, 9);
        let a = kmeans(&pts, 5, 3, KMeansParams::default()).unwrap();
        let b = kmeans(&pts, 5, 3, KMeansParams::default()).unwrap();
        assert_eq!(a.centers, b.centers);
        for w in a.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
    }

    #[test]
    fn k_larger_than_points_is_an_error() {
        let pts = vec![vec![1.0f32]];
        assert!(kmeans(&pts, 2, 0, KMeansParams::default()).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // two far-apart init centers both closer to the left group leave one empty
        let pts = vec![vec![0.0f32], vec![0.1], vec![0.2], vec![10.0]];
        let init = Matrix::from_rows(&[vec![0.0f32], vec![-50.0]]).unwrap();
        let res = kmeans_with_init(&pts, &init, KMeansParams::default()).unwrap();
        let mut counts = [0; 2];
        for &a in &res.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert!(res.inertia < 0.05);
    }

    #[test]
    fn shuffled_points_same_inertia() {
        let (pts, _, _) = blobs(60, 2);
        let init = Matrix::from_rows(&[pts[0].clone(), pts[1].clone(), pts[7].clone()]).unwrap();
        let a = kmeans_with_init(&pts, &init, KMeansParams::default()).unwrap();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        let b = kmeans_with_init(&shuffled, &init, KMeansParams::default()).unwrap();
        assert!((a.inertia - b.inertia).abs() <= 1e-9 * a.inertia.max(1.0));
    }

    fn samples(classes: usize, per_class: usize, d: usize) -> Vec<(usize, FeatureVec)> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut out = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let v: Vec<f32> = (0..d).map(|_| c as f32 + rng.random::<f32>()).collect();
                out.push((c, FeatureVec::new(v).unwrap()));
            }
        }
        out
    }

    #[test]
    fn indoor_sized_class_specific_dictionary() {
        let s = samples(67, 45, 3);
        let dict = build_dictionary(&s, 67, DictionaryMode::ClassSpecific, 40, 1, KMeansParams::default()).unwrap();
        assert_eq!(dict.len(), 2680);
        assert_eq!(dict.class_ranges.len(), 67);
        for (c, r) in dict.class_ranges.iter().enumerate() {
            assert_eq!(*r, c * 40..(c + 1) * 40);
        }
    }

    #[test]
    fn sun_sized_class_specific_dictionary() {
        let s = samples(397, 12, 2);
        let dict = build_dictionary(&s, 397, DictionaryMode::ClassSpecific, 10, 1, KMeansParams::default()).unwrap();
        assert_eq!(dict.len(), 3970);
    }

    #[test]
    fn small_classes_are_clamped() {
        let mut s = samples(2, 6, 2);
        s.truncate(9); // class 1 keeps 3 prototypes
        let dict = build_dictionary(&s, 2, DictionaryMode::ClassSpecific, 5, 1, KMeansParams::default()).unwrap();
        assert_eq!(dict.class_ranges, vec![0..5, 5..8]);
    }

    #[test]
    fn single_class_modes_agree() {
        let s = samples(1, 30, 4);
        let cs = build_dictionary(&s, 1, DictionaryMode::ClassSpecific, 4, 1, KMeansParams::default()).unwrap();
        let cm = build_dictionary(&s, 1, DictionaryMode::ClassMixture, 4, 1, KMeansParams::default()).unwrap();
        assert_eq!(cs.atoms, cm.atoms);
    }

    #[test]
    fn no_prototypes_is_an_error() {
        assert!(build_dictionary(&[], 3, DictionaryMode::ClassMixture, 2, 0, KMeansParams::default()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let s = samples(3, 8, 4);
        let dict = build_dictionary(&s, 3, DictionaryMode::ClassSpecific, 3, 2, KMeansParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dict.hfrs");
        dict.save(&p).unwrap();
        assert_eq!(PartDictionary::load(&p).unwrap(), dict);
    }
}
