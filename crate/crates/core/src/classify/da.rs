//! Domain-adaptation protocol: seeded source/target partitions, per-partition
//! encoding and SVM training, mean and sample standard deviation over seeds.

use std::str::FromStr;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::overall_accuracy;
use super::svm::{svm_predict, svm_train, SvmParams};
use super::assemble;
use crate::datamodel::{Block, DatasetManifest, FeatureVec, ImageRecord};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Labeled target samples per class added in the semi-supervised setting.
pub const SEMI_TARGET_PER_CLASS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DaMode {
    Unsupervised,
    SemiSupervised,
}

impl FromStr for DaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsup" | "unsupervised" => Ok(DaMode::Unsupervised),
            "semi" | "semi-supervised" => Ok(DaMode::SemiSupervised),
            _ => Err(Error::invalid(format!("unknown DA mode `{s}` (expected unsup or semi)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceCap {
    /// 20 source images per class from amazon, 8 from any other domain.
    Standard,
    All,
}

impl FromStr for SourceCap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" | "standard" => Ok(SourceCap::Standard),
            "all" => Ok(SourceCap::All),
            _ => Err(Error::invalid(format!("unknown source cap `{s}` (expected std or all)"))),
        }
    }
}

/// Per-class source sample count, `None` meaning all.
pub fn source_cap(domain: &str, cap: SourceCap) -> Option<usize> {
    match cap {
        SourceCap::All => None,
        SourceCap::Standard if domain.eq_ignore_ascii_case("amazon") => Some(20),
        SourceCap::Standard => Some(8),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaSetting {
    pub mode: DaMode,
    pub cap: SourceCap,
    pub seeds: Vec<u64>,
}

impl Default for DaSetting {
    fn default() -> Self {
        Self { mode: DaMode::Unsupervised, cap: SourceCap::Standard, seeds: (0..5).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaPartition {
    pub seed: u64,
    pub source_train: Vec<String>,
    pub target_train: Vec<String>,
    pub test: Vec<String>,
}

impl DaPartition {
    pub fn train(&self) -> impl Iterator<Item = &String> {
        self.source_train.iter().chain(&self.target_train)
    }
}

/// Draws `k` of `recs` uniformly without replacement, kept in input order.
fn draw<'a>(recs: &[&'a ImageRecord], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a ImageRecord> {
    let mut idx = sample(rng, recs.len(), k.min(recs.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| recs[i]).collect()
}

pub fn draw_da_partition(
    manifest: &DatasetManifest,
    source: &str,
    target: &str,
    setting: &DaSetting,
    seed: u64,
) -> Result<DaPartition> {
    if source == target {
        return Err(Error::invalid("source and target domains must differ"));
    }
    let domains = manifest.domains();
    let get = |name: &str| {
        domains.get(name).ok_or_else(|| {
            let known: Vec<&String> = domains.keys().collect();
            Error::invalid(format!("domain `{name}` not in manifest (have {known:?})"))
        })
    };
    let (src, tgt) = (get(source)?, get(target)?);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("da:{source}->{target}")));
    let cap = source_cap(source, setting.cap);
    let mut source_train = Vec::new();
    let mut target_train = Vec::new();
    for c in 0..manifest.classes.len() {
        let pool: Vec<&ImageRecord> = src.iter().copied().filter(|r| r.label == c).collect();
        let k = cap.unwrap_or(pool.len());
        if pool.len() < k {
            warn!("{source}: class {c} has {} images, fewer than the cap {k}; using all", pool.len());
        }
        source_train.extend(draw(&pool, k, &mut rng).into_iter().map(|r| r.id.clone()));
        if setting.mode == DaMode::SemiSupervised {
            let pool: Vec<&ImageRecord> = tgt.iter().copied().filter(|r| r.label == c).collect();
            if pool.len() <= SEMI_TARGET_PER_CLASS {
                warn!("{target}: class {c} has only {} images; none left for testing", pool.len());
            }
            target_train.extend(draw(&pool, SEMI_TARGET_PER_CLASS, &mut rng).into_iter().map(|r| r.id.clone()));
        }
    }
    let test = tgt.iter().filter(|r| !target_train.contains(&r.id)).map(|r| r.id.clone()).collect();
    Ok(DaPartition { seed, source_train, target_train, test })
}

/// Produces the feature blocks of a DA partition. Anything learned (part
/// dictionary, GMM) must be fit on `train` only.
pub trait DaEncoder: Sync {
    fn encode(&self, train: &[&ImageRecord], images: &[&ImageRecord]) -> Result<Vec<Vec<(Block, FeatureVec)>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaReport {
    pub source: String,
    pub target: String,
    pub rows: Vec<String>,
    /// `accuracy[row][partition]`, overall accuracy on the target test set.
    pub accuracy: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Sample standard deviation over partitions.
    pub std: Vec<f64>,
    pub partitions: Vec<DaPartition>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every partition of `setting` and evaluates each `(label, blocks)` row.
pub fn run_da(
    manifest: &DatasetManifest,
    source: &str,
    target: &str,
    setting: &DaSetting,
    encoder: &dyn DaEncoder,
    rows: &[(String, Vec<Block>)],
    svm: &SvmParams,
) -> Result<DaReport> {
    if setting.seeds.is_empty() || rows.is_empty() {
        return Err(Error::invalid("DA run needs at least one seed and one block selection"));
    }
    let classes = manifest.classes.len();
    let per_seed = setting
        .seeds
        .par_iter()
        .map(|&seed| {
            let part = draw_da_partition(manifest, source, target, setting, seed)?;
            if part.test.is_empty() {
                return Err(Error::invalid(format!("partition {seed} leaves no target test images")));
            }
            let train: Vec<&ImageRecord> = part.train().map(|id| manifest.require(id)).collect::<Result<_>>()?;
            let test: Vec<&ImageRecord> = part.test.iter().map(|id| manifest.require(id)).collect::<Result<_>>()?;
            let all: Vec<&ImageRecord> = train.iter().chain(&test).copied().collect();
            let blocks = encoder.encode(&train, &all)?;
            if blocks.len() != all.len() {
                return Err(Error::dims(all.len(), blocks.len()));
            }
            let (train_blocks, test_blocks) = blocks.split_at(train.len());
            let y_train: Vec<usize> = train.iter().map(|r| r.label).collect();
            let y_test: Vec<usize> = test.iter().map(|r| r.label).collect();
            let mut acc = Vec::with_capacity(rows.len());
            for (_, sel) in rows {
                let xs = |bs: &[Vec<(Block, FeatureVec)>]| -> Result<Vec<Vec<f32>>> {
                    bs.iter().map(|b| assemble(b, sel).map(|h| h.to_vec())).collect()
                };
                let model = svm_train(&xs(train_blocks)?, &y_train, classes, &SvmParams { seed, ..*svm })?;
                let pred = xs(test_blocks)?.iter().map(|x| svm_predict(&model, x)).collect::<Result<Vec<_>>>()?;
                acc.push(overall_accuracy(&y_test, &pred));
            }
            Ok((part, acc))
        })
        .collect::<Result<Vec<_>>>()?;

    let accuracy: Vec<Vec<f64>> = (0..rows.len()).map(|r| per_seed.iter().map(|(_, a)| a[r]).collect()).collect();
    let (mean, std) = accuracy.iter().map(|a| mean_std(a)).unzip();
    Ok(DaReport {
        source: source.to_string(),
        target: target.to_string(),
        rows: rows.iter().map(|(l, _)| l.clone()).collect(),
        accuracy,
        mean,
        std,
        partitions: per_seed.into_iter().map(|(p, _)| p).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn office() -> DatasetManifest {
        let mut recs = Vec::new();
        for (dom, n) in [("amazon", 25), ("webcam", 10)] {
            for c in 0..2 {
                for k in 0..n {
                    let mut r = ImageRecord::new(format!("{dom}-{c}-{k}"), c);
                    r.domain = Some(dom.into());
                    recs.push(r);
                }
            }
        }
        DatasetManifest::new(vec!["a".into(), "b".into()], recs, Default::default(), PathBuf::new()).unwrap()
    }

    #[test]
    fn caps() {
        assert_eq!(source_cap("amazon", SourceCap::Standard), Some(20));
        assert_eq!(source_cap("webcam", SourceCap::Standard), Some(8));
        assert_eq!(source_cap("dslr", SourceCap::All), None);
    }

    #[test]
    fn unsupervised_partition() {
        let m = office();
        let p = draw_da_partition(&m, "amazon", "webcam", &DaSetting::default(), 1).unwrap();
        assert_eq!(p.source_train.len(), 40);
        assert!(p.target_train.is_empty());
        assert_eq!(p.test.len(), 20);
        let p = draw_da_partition(&m, "webcam", "amazon", &DaSetting::default(), 1).unwrap();
        assert_eq!(p.source_train.len(), 16);
    }

    #[test]
    fn semi_supervised_moves_three_per_class() {
        let m = office();
        let s = DaSetting { mode: DaMode::SemiSupervised, ..Default::default() };
        let p = draw_da_partition(&m, "amazon", "webcam", &s, 2).unwrap();
        assert_eq!(p.target_train.len(), 6);
        assert_eq!(p.test.len(), 14);
        assert!(p.target_train.iter().all(|id| !p.test.contains(id)));
        for c in 0..2 {
            let n = p.target_train.iter().filter(|id| m.record(id).unwrap().label == c).count();
            assert_eq!(n, 3);
        }
    }

    #[test]
    fn all_cap_and_determinism() {
        let m = office();
        let s = DaSetting { cap: SourceCap::All, ..Default::default() };
        let p = draw_da_partition(&m, "amazon", "webcam", &s, 3).unwrap();
        assert_eq!(p.source_train.len(), 50);
        let d = DaSetting::default();
        assert_eq!(draw_da_partition(&m, "amazon", "webcam", &d, 5).unwrap(), draw_da_partition(&m, "amazon", "webcam", &d, 5).unwrap());
        assert_ne!(
            draw_da_partition(&m, "amazon", "webcam", &d, 5).unwrap().source_train,
            draw_da_partition(&m, "amazon", "webcam", &d, 6).unwrap().source_train
        );
    }

    #[test]
    fn bad_domains() {
        let m = office();
        assert!(draw_da_partition(&m, "amazon", "amazon", &DaSetting::default(), 0).is_err());
        assert!(draw_da_partition(&m, "amazon", "dslr", &DaSetting::default(), 0).is_err());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[0.5; 5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
