//! End-to-end orchestration: proposals, part dictionary, MLR, GMM, CFV and
//! FCR stages, then classification for scene or domain-adaptation tasks.
//!
//! Stage outputs are cached in the work directory under a name derived from
//! a hash of every input that affects them, so re-runs with an unchanged
//! configuration reuse earlier results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfv::{encode_cfv, FvConfig};
use crate::classify::{
    assemble, evaluate_scene, l2_normalize, parse_selection, run_da, svm_train, DaEncoder, DaMode, DaReport,
    DaSetting, ResultsTable, SceneEval, SourceCap, SvmParams,
};
use crate::coding::{default_tau, LlcParams};
use crate::datamodel::{load_manifest, BBox, Block, DatasetManifest, FeatureStore, FeatureTensor, FeatureVec, ImageRecord};
use crate::dictionary::{build_dictionary, DictionaryMode, KMeansParams, PartDictionary};
use crate::error::{Error, Result};
use crate::extractors::{attach_pixels, fcr_key, Crop, ExtractorSpec, FcLayer, FeatureExtractor};
use crate::gmm::{sample_descriptors, train_gmm, GmmModel, GmmParams};
use crate::mlr::{encode_mlr, MlrConfig, SpmLayout};
use crate::proposals::{mine_prototypes, ProposalParams, PrototypeSet, DEFAULT_CONTEXT_PAD, DEFAULT_VAR_THRESHOLD};

/// Every tunable of a run. Unset fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub lambda_b: f32,
    pub lambda_f: f32,
    pub sigma: f32,
    pub clusters: usize,
    pub top: usize,
    pub context_pad: u32,
    pub var_threshold: f64,
    /// Variance filtering of prototypes; unset means on for DA, off for scenes.
    pub variance_filter: Option<bool>,
    pub dict_mode: DictionaryMode,
    pub per_class_k: usize,
    pub llc_lambda: f64,
    /// Unset means `10 * (mean pairwise atom distance)^2`.
    pub llc_tau: Option<f64>,
    pub llc_knn: usize,
    pub mlr_squares: Vec<u32>,
    pub mlr_stride: u32,
    pub gmm_components: usize,
    pub gmm_budget: usize,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    /// Conv scale exponents (factor `sqrt(2)^e`).
    pub scales: Vec<i32>,
    pub alpha: f64,
    pub weight_grad: bool,
    /// Unset means whole image for scenes, central crop for DA.
    pub fcr_crop: Option<Crop>,
    pub normalize_mlr: bool,
    pub svm_c: f64,
    pub svm_max_epochs: usize,
    pub svm_gap_tol: f64,
    pub seed: u64,
    pub da_seeds: Vec<u64>,
}

impl Default for Params {
    fn default() -> Self {
        let llc = LlcParams { lambda: LlcParams::DEFAULT_LAMBDA, tau: 1.0, knn: LlcParams::DEFAULT_KNN };
        let mlr = MlrConfig::new(llc);
        let gmm = GmmParams::default();
        let fv = FvConfig::default();
        let svm = SvmParams::default();
        Self {
            lambda_b: 0.5,
            lambda_f: 0.5,
            sigma: 1.0,
            clusters: 10,
            top: 5,
            context_pad: DEFAULT_CONTEXT_PAD,
            var_threshold: DEFAULT_VAR_THRESHOLD,
            variance_filter: None,
            dict_mode: DictionaryMode::ClassSpecific,
            per_class_k: 40,
            llc_lambda: llc.lambda,
            llc_tau: None,
            llc_knn: llc.knn,
            mlr_squares: mlr.squares,
            mlr_stride: mlr.stride,
            gmm_components: 64,
            gmm_budget: 256_000,
            gmm_max_iter: gmm.max_iter,
            gmm_tol: gmm.tol,
            scales: fv.exponents,
            alpha: fv.alpha,
            weight_grad: fv.include_weight_grad,
            fcr_crop: None,
            normalize_mlr: true,
            svm_c: svm.c,
            svm_max_epochs: svm.max_epochs,
            svm_gap_tol: svm.gap_tol,
            seed: 0,
            da_seeds: (0..5).collect(),
        }
    }
}

impl Params {
    pub fn proposal_params(&self, variance_filter: bool) -> ProposalParams {
        ProposalParams {
            lambda_b: self.lambda_b,
            lambda_f: self.lambda_f,
            sigma: self.sigma,
            clusters: self.clusters,
            top: self.top,
            context_pad: self.context_pad,
            var_threshold: variance_filter.then_some(self.var_threshold),
        }
    }

    pub fn llc_params(&self, dict: &PartDictionary) -> LlcParams {
        LlcParams { lambda: self.llc_lambda, tau: self.llc_tau.unwrap_or_else(|| default_tau(dict)), knn: self.llc_knn }
    }

    pub fn mlr_config(&self, dict: &PartDictionary) -> MlrConfig {
        MlrConfig {
            squares: self.mlr_squares.clone(),
            stride: self.mlr_stride,
            llc: self.llc_params(dict),
            layout: SpmLayout::default(),
        }
    }

    pub fn fv_config(&self) -> FvConfig {
        FvConfig { exponents: self.scales.clone(), alpha: self.alpha, include_weight_grad: self.weight_grad }
    }

    pub fn gmm_params(&self) -> GmmParams {
        GmmParams { max_iter: self.gmm_max_iter, tol: self.gmm_tol }
    }

    pub fn svm_params(&self) -> SvmParams {
        SvmParams { c: self.svm_c, max_epochs: self.svm_max_epochs, gap_tol: self.svm_gap_tol, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.proposal_params(false).validate()?;
        if self.per_class_k == 0 || self.gmm_components == 0 || self.gmm_budget == 0 {
            return Err(Error::invalid("per_class_k, gmm_components and gmm_budget must be >= 1"));
        }
        if self.llc_knn == 0 || !(self.llc_lambda >= 0.0) || self.llc_tau.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::invalid("LLC needs knn >= 1, lambda >= 0 and tau > 0"));
        }
        if self.mlr_squares.is_empty() || self.mlr_squares.iter().any(|&s| s == 0 || s > crate::datamodel::FRAME) {
            return Err(Error::invalid("MLR squares must be non-empty and within the 256 frame"));
        }
        if self.mlr_stride == 0 {
            return Err(Error::invalid("MLR stride must be >= 1"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|e| !(-6..=4).contains(e)) {
            return Err(Error::invalid("scales must be a non-empty list of exponents in -6..=4"));
        }
        self.fv_config().validate()?;
        if !(self.svm_c > 0.0) || self.svm_max_epochs == 0 || self.gmm_max_iter == 0 {
            return Err(Error::invalid("need svm_c > 0, svm_max_epochs >= 1 and gmm_max_iter >= 1"));
        }
        if self.da_seeds.is_empty() {
            return Err(Error::invalid("da_seeds must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Proposals,
    Dictionary,
    Mlr,
    Gmm,
    Cfv,
    Fcr,
    Classify,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Proposals, Stage::Dictionary, Stage::Mlr, Stage::Gmm, Stage::Cfv, Stage::Fcr, Stage::Classify];

    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Dictionary => &[Stage::Proposals],
            Stage::Mlr => &[Stage::Proposals, Stage::Dictionary],
            Stage::Cfv => &[Stage::Gmm],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Task {
    Scene {
        #[serde(default = "default_split")]
        split: String,
    },
    Da {
        /// `(source, target)` domain pairs, one results column each.
        transfers: Vec<(String, String)>,
        mode: DaMode,
        cap: SourceCap,
    },
}

fn default_split() -> String {
    "default".into()
}

fn default_rows() -> Vec<String> {
    vec!["MLR+CFV+FCR1+FCR2".into()]
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub work_dir: PathBuf,
    pub extractor: ExtractorSpec,
    pub task: Task,
    /// Block combinations to evaluate, e.g. `"MLR+CFV+FCR1-w"`.
    #[serde(default = "default_rows")]
    pub rows: Vec<String>,
    /// Stores holding external blocks, keyed `{image_id}#ext:{name}`.
    #[serde(default)]
    pub external: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub params: Params,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve(&base, &mut cfg.manifest);
        resolve(&base, &mut cfg.work_dir);
        for p in cfg.external.values_mut() {
            resolve(&base, p);
        }
        if let crate::extractors::ExtractorKind::StoreBacked { paths } = &mut cfg.extractor.kind {
            paths.iter_mut().for_each(|p| resolve(&base, p));
        }
        Ok(cfg)
    }

    pub fn is_da(&self) -> bool {
        matches!(self.task, Task::Da { .. })
    }

    pub fn crop(&self) -> Crop {
        self.params.fcr_crop.unwrap_or(if self.is_da() { Crop::Central } else { Crop::Whole })
    }

    pub fn variance_filter(&self) -> bool {
        self.params.variance_filter.unwrap_or(self.is_da())
    }

    pub fn parsed_rows(&self) -> Result<Vec<(String, Vec<Block>)>> {
        self.rows.iter().map(|r| Ok((r.clone(), parse_selection(r)?))).collect()
    }

    fn enabled(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }

    /// Cross-field checks, run before any work.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.extractor.d == 0 {
            return Err(Error::invalid("extractor dimension must be >= 1"));
        }
        for s in &self.stages {
            if let Some(r) = s.requires().iter().find(|r| !self.enabled(**r)) {
                return Err(Error::invalid(format!("stage {s:?} requires stage {r:?}")));
            }
        }
        if self.rows.is_empty() {
            return Err(Error::invalid("at least one result row is required"));
        }
        for (label, blocks) in self.parsed_rows()? {
            for b in blocks {
                let stage = match &b {
                    Block::Mlr => Stage::Mlr,
                    Block::Cfv => Stage::Cfv,
                    Block::Fcr1 | Block::Fcr2 => Stage::Fcr,
                    Block::Ext(name) => {
                        if !self.external.contains_key(name) {
                            return Err(Error::invalid(format!("row `{label}` uses unknown external block `{name}`")));
                        }
                        continue;
                    }
                };
                if self.enabled(Stage::Classify) && !self.enabled(stage) {
                    return Err(Error::invalid(format!("row `{label}` needs stage {stage:?}, which is disabled")));
                }
            }
        }
        if let Task::Da { transfers, .. } = &self.task {
            if transfers.is_empty() {
                return Err(Error::invalid("DA task needs at least one transfer"));
            }
            if let Some((s, _)) = transfers.iter().find(|(s, t)| s == t) {
                return Err(Error::invalid(format!("transfer {s} -> {s} has identical source and target")));
            }
        }
        Ok(())
    }
}

fn hash_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn ids_key(records: &[&ImageRecord]) -> String {
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    hash_hex(&ids)
}

/// File-backed stage cache; `None` directory disables caching.
#[derive(Debug, Clone)]
pub struct StageCache {
    dir: Option<PathBuf>,
}

impl StageCache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self { dir })
    }

    fn path(&self, stage: &str, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}-{}.hfrs", &key[..16])))
    }

    fn get_or<T>(
        &self,
        stage: &'static str,
        key: &str,
        load: impl Fn(&Path) -> Result<T>,
        save: impl Fn(&T, &Path) -> Result<()>,
        describe: impl Fn(&T) -> (usize, usize),
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let path = self.path(stage, key);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            match load(p) {
                Ok(v) => {
                    let (n, d) = describe(&v);
                    info!("stage={stage} items={n} dim={d} cache=hit wall_ms={}", start.elapsed().as_millis());
                    return Ok(v);
                }
                Err(e) => warn!("stage={stage} ignoring unreadable cache {}: {e}", p.display()),
            }
        }
        let v = compute()?;
        if let Some(p) = &path {
            save(&v, p)?;
        }
        let (n, d) = describe(&v);
        info!("stage={stage} items={n} dim={d} cache=miss wall_ms={}", start.elapsed().as_millis());
        Ok(v)
    }

    fn store(
        &self,
        stage: &'static str,
        key: &str,
        compute: impl FnOnce() -> Result<FeatureStore>,
    ) -> Result<FeatureStore> {
        self.get_or(
            stage,
            key,
            |p| FeatureStore::open(p),
            |s, p| s.save(p),
            |s| (s.len(), s.entries().first().map_or(0, |(_, t)| t.data().len())),
            compute,
        )
    }
}

fn prototype_key(id: &str, k: usize, b: &BBox) -> String {
    format!("{id}#proto:{k}:{b}")
}

/// Prototype features keyed `{image_id}#proto:{k}:{x1},{y1},{x2},{y2}`.
pub fn prototypes_to_store(sets: &[PrototypeSet]) -> Result<FeatureStore> {
    let mut store = FeatureStore::new();
    for s in sets {
        for (k, (b, f)) in s.boxes.iter().zip(&s.features).enumerate() {
            store.insert(prototype_key(&s.image_id, k, b), f.clone().into())?;
        }
    }
    Ok(store)
}

/// Inverse of [`prototypes_to_store`]; images without prototypes are absent.
pub fn prototypes_from_store(store: &FeatureStore) -> Result<Vec<PrototypeSet>> {
    let mut out: Vec<PrototypeSet> = Vec::new();
    for (key, t) in store.entries() {
        let bad = || Error::invalid(format!("malformed prototype key `{key}`"));
        let (id, rest) = key.rsplit_once("#proto:").ok_or_else(bad)?;
        let (_, coords) = rest.split_once(':').ok_or_else(bad)?;
        let c: Vec<u32> = coords.split(',').map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if c.len() != 4 {
            return Err(bad());
        }
        let b = BBox::in_frame(c[0], c[1], c[2], c[3])?;
        if out.last().is_none_or(|s| s.image_id != id) {
            out.push(PrototypeSet { image_id: id.to_string(), boxes: Vec::new(), features: Vec::new() });
        }
        let s = out.last_mut().expect("just pushed");
        s.boxes.push(b);
        s.features.push(FeatureVec::new(t.data().to_vec())?);
    }
    Ok(out)
}

/// Mines prototypes of every record in parallel.
pub fn mine_all(
    records: &[&ImageRecord],
    extractor: &dyn FeatureExtractor,
    params: &ProposalParams,
    seed: u64,
) -> Result<Vec<PrototypeSet>> {
    params.validate()?;
    records
        .par_iter()
        .map(|r| mine_prototypes(r, extractor, params, seed).map_err(|e| e.in_stage("proposals", r.id.clone())))
        .collect()
}

/// `(label, feature)` dictionary samples of the given prototype sets.
pub fn dictionary_samples(manifest: &DatasetManifest, sets: &[&PrototypeSet]) -> Result<Vec<(usize, FeatureVec)>> {
    let mut out = Vec::new();
    for s in sets {
        let label = manifest.require(&s.image_id)?.label;
        out.extend(s.features.iter().map(|f| (label, f.clone())));
    }
    Ok(out)
}

/// Encodes `records` in parallel into a store keyed `{id}{suffix}`.
pub fn encode_all(
    stage: &'static str,
    records: &[&ImageRecord],
    suffix: &str,
    f: impl Fn(&ImageRecord) -> Result<FeatureVec> + Sync,
) -> Result<FeatureStore> {
    let vecs: Vec<FeatureVec> =
        records.par_iter().map(|r| f(r).map_err(|e| e.in_stage(stage, r.id.clone()))).collect::<Result<_>>()?;
    let mut store = FeatureStore::new();
    for (r, v) in records.iter().zip(vecs) {
        store.insert(format!("{}{suffix}", r.id), v.into())?;
    }
    Ok(store)
}

/// GMM training set: conv descriptors of `records` at every scale, sampled
/// proportionally to scale size.
pub fn gmm_training_set(
    records: &[&ImageRecord],
    extractor: &dyn FeatureExtractor,
    fv: &FvConfig,
    budget: usize,
    seed: u64,
) -> Result<Vec<FeatureVec>> {
    let tensors: Vec<Vec<FeatureTensor>> = records
        .par_iter()
        .map(|r| {
            fv.scales()
                .into_iter()
                .map(|s| extractor.conv(r, s))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("gmm", r.id.clone()))
        })
        .collect::<Result<_>>()?;
    sample_descriptors(&tensors, budget, seed)
}

/// FCR1 and FCR2 of every record, unnormalized, under the standard keys.
pub fn encode_fcr_all(records: &[&ImageRecord], extractor: &dyn FeatureExtractor, crop: Crop) -> Result<FeatureStore> {
    let vecs: Vec<[FeatureVec; 2]> = records
        .par_iter()
        .map(|r| {
            Ok([extractor.fcr(r, FcLayer::Fc1, crop)?, extractor.fcr(r, FcLayer::Fc2, crop)?])
                .map_err(|e: Error| e.in_stage("fcr", r.id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut store = FeatureStore::new();
    for (r, [f1, f2]) in records.iter().zip(vecs) {
        store.insert(fcr_key(&r.id, FcLayer::Fc1, crop), f1.into())?;
        store.insert(fcr_key(&r.id, FcLayer::Fc2, crop), f2.into())?;
    }
    Ok(store)
}

fn vec_of(store: &FeatureStore, key: &str) -> Result<FeatureVec> {
    FeatureVec::new(store.require(key)?.data().to_vec())
}

/// Block assembly inputs for one image, normalized as configured: MLR (L2
/// unless disabled), CFV (already power+L2), FCR and external blocks (L2).
#[allow(clippy::too_many_arguments)]
pub fn image_blocks(
    id: &str,
    needed: &BTreeSet<Block>,
    mlr: Option<&FeatureStore>,
    cfv: Option<&FeatureStore>,
    fcr: Option<&FeatureStore>,
    external: &BTreeMap<String, FeatureStore>,
    crop: Crop,
    normalize_mlr: bool,
) -> Result<Vec<(Block, FeatureVec)>> {
    let missing = |b: &Block| Error::invalid(format!("block {b} requested but its stage did not run"));
    let mut out = Vec::new();
    for b in needed {
        let v = match b {
            Block::Mlr => {
                let v = vec_of(mlr.ok_or_else(|| missing(b))?, &format!("{id}#mlr"))?;
                if normalize_mlr {
                    l2_normalize(&v)
                } else {
                    v
                }
            }
            Block::Cfv => vec_of(cfv.ok_or_else(|| missing(b))?, &format!("{id}#cfv"))?,
            Block::Fcr1 => l2_normalize(&vec_of(fcr.ok_or_else(|| missing(b))?, &fcr_key(id, FcLayer::Fc1, crop))?),
            Block::Fcr2 => l2_normalize(&vec_of(fcr.ok_or_else(|| missing(b))?, &fcr_key(id, FcLayer::Fc2, crop))?),
            Block::Ext(name) => {
                let store = external.get(name).ok_or_else(|| missing(b))?;
                l2_normalize(&vec_of(store, &format!("{id}#ext:{name}"))?)
            }
        };
        out.push((b.clone(), v));
    }
    Ok(out)
}

/// Computes hybrid blocks with every learned component fit on the training
/// images only. Stage outputs go through the cache.
pub struct HybridEncoder<'a> {
    cfg: &'a RunConfig,
    manifest: &'a DatasetManifest,
    extractor: Arc<dyn FeatureExtractor>,
    cache: StageCache,
    base_key: String,
    needed: BTreeSet<Block>,
    prototypes: HashMap<String, PrototypeSet>,
    external: BTreeMap<String, FeatureStore>,
}

impl<'a> HybridEncoder<'a> {
    /// Mines prototypes up front for every image that may be used for
    /// training.
    pub fn new(
        cfg: &'a RunConfig,
        manifest: &'a DatasetManifest,
        cache: StageCache,
        trainable: &[&ImageRecord],
    ) -> Result<Self> {
        let extractor = cfg.extractor.build()?;
        let manifest_text = manifest.to_json()?;
        let base_key = hash_hex(&[&manifest_text, &json(&cfg.extractor)]);
        let needed: BTreeSet<Block> = cfg.parsed_rows()?.into_iter().flat_map(|(_, b)| b).collect();
        let mut enc = Self {
            cfg,
            manifest,
            extractor,
            cache,
            base_key,
            needed,
            prototypes: HashMap::new(),
            external: BTreeMap::new(),
        };
        for (name, path) in &cfg.external {
            enc.external.insert(name.clone(), FeatureStore::open(path)?);
        }
        if cfg.enabled(Stage::Proposals) {
            let params = cfg.params.proposal_params(cfg.variance_filter());
            let key = hash_hex(&[&enc.base_key, &json(&params), &cfg.params.seed.to_string(), &ids_key(trainable)]);
            let ex = enc.extractor.clone();
            let store = enc.cache.store("proposals", &key, || {
                prototypes_to_store(&mine_all(trainable, ex.as_ref(), &params, cfg.params.seed)?)
            })?;
            enc.prototypes = prototypes_from_store(&store)?.into_iter().map(|s| (s.image_id.clone(), s)).collect();
        }
        Ok(enc)
    }

    fn dictionary(&self, train: &[&ImageRecord]) -> Result<(PartDictionary, String)> {
        let p = &self.cfg.params;
        let key = hash_hex(&[
            &self.base_key,
            "dictionary",
            &json(&p.proposal_params(self.cfg.variance_filter())),
            &json(&(p.dict_mode, p.per_class_k, p.seed)),
            &ids_key(train),
        ]);
        let dict = self.cache.get_or(
            "dictionary",
            &key,
            PartDictionary::load,
            |d, path| d.save(path),
            |d| (d.len(), d.dim()),
            || {
                let sets: Vec<&PrototypeSet> = train.iter().filter_map(|r| self.prototypes.get(&r.id)).collect();
                let samples = dictionary_samples(self.manifest, &sets)?;
                build_dictionary(
                    &samples,
                    self.manifest.classes.len(),
                    p.dict_mode,
                    p.per_class_k,
                    p.seed,
                    KMeansParams::default(),
                )
            },
        )?;
        Ok((dict, key))
    }

    fn gmm(&self, train: &[&ImageRecord]) -> Result<(GmmModel, String)> {
        let p = &self.cfg.params;
        let fv = p.fv_config();
        let key = hash_hex(&[
            &self.base_key,
            "gmm",
            &json(&(&fv.exponents, p.gmm_components, p.gmm_budget, p.gmm_params(), p.seed)),
            &ids_key(train),
        ]);
        let model = self.cache.get_or(
            "gmm",
            &key,
            GmmModel::load,
            |m, path| m.save(path),
            |m| (m.components(), m.dim()),
            || {
                let xs = gmm_training_set(train, self.extractor.as_ref(), &fv, p.gmm_budget, p.seed)?;
                Ok(train_gmm(&xs, p.gmm_components, p.seed, p.gmm_params())?.model)
            },
        )?;
        Ok((model, key))
    }

    fn wants(&self, f: impl Fn(&Block) -> bool) -> bool {
        self.needed.iter().any(f) || !self.cfg.enabled(Stage::Classify)
    }

    /// Runs the enabled stages; returns the MLR, CFV and FCR stores.
    pub fn stores(
        &self,
        train: &[&ImageRecord],
        images: &[&ImageRecord],
    ) -> Result<(Option<FeatureStore>, Option<FeatureStore>, Option<FeatureStore>)> {
        let p = &self.cfg.params;
        let ex = self.extractor.as_ref();
        let images_key = ids_key(images);
        let mut mlr = None;
        if self.cfg.enabled(Stage::Mlr) && self.wants(|b| *b == Block::Mlr) {
            let (dict, dkey) = self.dictionary(train)?;
            let mcfg = p.mlr_config(&dict);
            let key = hash_hex(&[&dkey, "mlr", &json(&mcfg), &images_key]);
            mlr = Some(self.cache.store("mlr", &key, || encode_all("mlr", images, "#mlr", |r| encode_mlr(r, ex, &dict, &mcfg)))?);
        }
        let mut cfv = None;
        if self.cfg.enabled(Stage::Cfv) && self.wants(|b| *b == Block::Cfv) {
            let (gmm, gkey) = self.gmm(train)?;
            let fv = p.fv_config();
            let key = hash_hex(&[&gkey, "cfv", &json(&fv), &images_key]);
            cfv = Some(self.cache.store("cfv", &key, || encode_all("cfv", images, "#cfv", |r| encode_cfv(r, ex, &gmm, &fv)))?);
        }
        let mut fcr = None;
        if self.cfg.enabled(Stage::Fcr) && self.wants(|b| matches!(b, Block::Fcr1 | Block::Fcr2)) {
            let crop = self.cfg.crop();
            let key = hash_hex(&[&self.base_key, "fcr", &json(&crop), &images_key]);
            fcr = Some(self.cache.store("fcr", &key, || encode_fcr_all(images, ex, crop))?);
        }
        Ok((mlr, cfv, fcr))
    }
}

impl DaEncoder for HybridEncoder<'_> {
    fn encode(&self, train: &[&ImageRecord], images: &[&ImageRecord]) -> Result<Vec<Vec<(Block, FeatureVec)>>> {
        let (mlr, cfv, fcr) = self.stores(train, images)?;
        images
            .iter()
            .map(|r| {
                image_blocks(
                    &r.id,
                    &self.needed,
                    mlr.as_ref(),
                    cfv.as_ref(),
                    fcr.as_ref(),
                    &self.external,
                    self.cfg.crop(),
                    self.cfg.params.normalize_mlr,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub table: ResultsTable,
    /// Per-row scene evaluation (scene tasks only).
    pub scene: Vec<(String, SceneEval)>,
    pub da: Vec<DaReport>,
}

/// Loads the manifest, attaching pixels when records reference images.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let mut m = load_manifest(path)?;
    attach_pixels(&mut m)?;
    Ok(m)
}

/// Runs the configured task and writes `results.json`, `results.txt` and
/// `details.json` to the work directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let manifest = load_dataset(&cfg.manifest)?;
    let cache = StageCache::new(Some(cfg.work_dir.join("cache")))?;
    let rows = cfg.parsed_rows()?;
    let outcome = match &cfg.task {
        Task::Scene { split } => {
            let split = manifest.split(split)?.clone();
            let train: Vec<&ImageRecord> = split.train.iter().map(|id| manifest.require(id)).collect::<Result<_>>()?;
            let test: Vec<&ImageRecord> = split.test.iter().map(|id| manifest.require(id)).collect::<Result<_>>()?;
            let enc = HybridEncoder::new(cfg, &manifest, cache, &train)?;
            let all: Vec<&ImageRecord> = train.iter().chain(&test).copied().collect();
            if !cfg.enabled(Stage::Classify) {
                enc.stores(&train, &all)?;
                return Ok(RunOutcome { table: ResultsTable::new(Vec::new(), Vec::new()), scene: Vec::new(), da: Vec::new() });
            }
            let blocks = enc.encode(&train, &all)?;
            let (train_blocks, test_blocks) = blocks.split_at(train.len());
            let y_train: Vec<usize> = train.iter().map(|r| r.label).collect();
            let y_test: Vec<usize> = test.iter().map(|r| r.label).collect();
            let col = format!("{}:{}", file_stem(&cfg.manifest), match &cfg.task {
                Task::Scene { split } => split.as_str(),
                Task::Da { .. } => unreachable!(),
            });
            let mut table = ResultsTable::new(cfg.rows.clone(), vec![col.clone()]);
            let mut scene = Vec::new();
            for (label, sel) in &rows {
                let t0 = Instant::now();
                let xs = |bs: &[Vec<(Block, FeatureVec)>]| -> Result<Vec<Vec<f32>>> {
                    bs.iter().map(|b| assemble(b, sel).map(|h| h.to_vec())).collect()
                };
                let x_train = xs(train_blocks)?;
                let model = svm_train(&x_train, &y_train, manifest.classes.len(), &cfg.params.svm_params())
                    .map_err(|e| e.in_stage("classify", label.clone()))?;
                let eval = evaluate_scene(&model, &xs(test_blocks)?, &y_test)?;
                info!(
                    "stage=classify row={label} items={} dim={} accuracy={:.4} wall_ms={}",
                    x_train.len(),
                    model.dim(),
                    eval.accuracy,
                    t0.elapsed().as_millis()
                );
                table.set(label, &col, eval.accuracy, None)?;
                scene.push((label.clone(), eval));
            }
            RunOutcome { table, scene, da: Vec::new() }
        }
        Task::Da { transfers, mode, cap } => {
            let setting = DaSetting { mode: *mode, cap: *cap, seeds: cfg.params.da_seeds.clone() };
            let domains: BTreeSet<&str> = transfers.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
            let trainable: Vec<&ImageRecord> = manifest
                .records
                .iter()
                .filter(|r| r.domain.as_deref().is_some_and(|d| domains.contains(d)))
                .collect();
            let enc = HybridEncoder::new(cfg, &manifest, cache, &trainable)?;
            let mut reports = Vec::new();
            for (s, t) in transfers {
                let t0 = Instant::now();
                let rep = run_da(&manifest, s, t, &setting, &enc, &rows, &cfg.params.svm_params())?;
                info!("stage=da transfer={s}->{t} rows={} mean={:?} wall_ms={}", rep.rows.len(), rep.mean, t0.elapsed().as_millis());
                reports.push(rep);
            }
            RunOutcome { table: ResultsTable::from_da(&reports)?, scene: Vec::new(), da: reports }
        }
    };
    outcome.table.save(&cfg.work_dir.join("results.json"))?;
    std::fs::write(cfg.work_dir.join("details.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
    info!("stage=pipeline wall_ms={}", start.elapsed().as_millis());
    Ok(outcome)
}

fn file_stem(p: &Path) -> String {
    p.parent()
        .and_then(|d| d.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}
