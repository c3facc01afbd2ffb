//! `hybrep`: stage-by-stage and end-to-end experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use hybrep::cfv::{encode_cfv, FvConfig};
use hybrep::classify::{
    assemble, evaluate_scene, l2_normalize, parse_selection, svm_train, DaMode, SourceCap, SvmModel, SvmParams,
};
use hybrep::coding::LlcParams;
use hybrep::datamodel::{FeatureStore, ImageRecord};
use hybrep::dictionary::{build_dictionary, DictionaryMode, KMeansParams, PartDictionary};
use hybrep::extractors::{fcr_key, Crop, ExtractorSpec, FcLayer};
use hybrep::gmm::{train_gmm, GmmModel, GmmParams};
use hybrep::mlr::{encode_mlr, MlrConfig};
use hybrep::pipeline::{
    dictionary_samples, encode_all, encode_fcr_all, gmm_training_set, load_dataset, mine_all, prototypes_from_store,
    prototypes_to_store, run_pipeline, Params, RunConfig, Task,
};
use hybrep::proposals::{filter_proposals, variance_filter, ProposalParams, DEFAULT_CONTEXT_PAD};
use hybrep::synth::{synth_dataset, SynthConfig, SynthVariant};
use hybrep::{Block, DatasetManifest, FeatureVec};

#[derive(Parser)]
#[command(name = "hybrep", version, about = "Hybrid image representations for scene recognition and domain adaptation")]
struct Cli {
    /// Worker threads for image-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply the proposal box constraints (and optionally the variance filter)
    /// and write a manifest holding the surviving boxes.
    ProposalsFilter(ProposalsFilterArgs),
    /// Mine part prototypes of every training image into a store.
    ClusterParts(ClusterPartsArgs),
    /// Cluster prototypes into a part dictionary.
    BuildDictionary(BuildDictionaryArgs),
    /// Encode MLR vectors (`{id}#mlr`).
    EncodeMlr(EncodeMlrArgs),
    /// Fit the GMM on sampled conv descriptors.
    TrainGmm(TrainGmmArgs),
    /// Encode CFV vectors (`{id}#cfv`).
    EncodeCfv(EncodeCfvArgs),
    /// Extract FCR1/FCR2 vectors (`{id}#fcr{1|2}:{w|c}`).
    EncodeFcr(EncodeFcrArgs),
    /// Concatenate blocks into hybrid vectors (`{id}#hybrid`).
    Assemble(AssembleArgs),
    /// Train one-vs-rest linear SVMs on a split's training images.
    TrainSvm(TrainSvmArgs),
    /// Average class accuracy of a model on a split's test images.
    Evaluate(EvaluateArgs),
    /// Run the domain-adaptation protocol for one transfer task.
    DaRun(DaRunArgs),
    /// Run every configured stage from manifest to results table.
    Pipeline(PipelineArgs),
    /// Generate a synthetic texture dataset and a matching pipeline config.
    SynthDataset(SynthArgs),
}

#[derive(Args)]
struct ExtractorArgs {
    /// Feature dimension of the extractor.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Read features from these stores instead of the synthetic extractor.
    #[arg(long = "store")]
    stores: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
}

impl ExtractorArgs {
    fn spec(&self) -> ExtractorSpec {
        if self.stores.is_empty() {
            ExtractorSpec::synthetic(self.dim, self.extractor_seed)
        } else {
            ExtractorSpec::store_backed(self.dim, self.stores.clone())
        }
    }
}

#[derive(Args)]
struct ProposalsFilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also drop boxes whose gray-level variance is below this value.
    #[arg(long)]
    var_threshold: Option<f64>,
}

#[derive(Args)]
struct ClusterPartsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Use the training images of this split (default: every image).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lambda_b: f32,
    #[arg(long, default_value_t = 0.5)]
    lambda_f: f32,
    #[arg(long, default_value_t = 1.0)]
    sigma: f32,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long, default_value_t = DEFAULT_CONTEXT_PAD)]
    context_pad: u32,
    /// Enable the variance filter with this threshold.
    #[arg(long, num_args = 0..=1, default_missing_value = "125")]
    var_threshold: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct BuildDictionaryArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Prototype store written by `cluster-parts`.
    #[arg(long)]
    prototypes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `cs` (class-specific) or `cm` (class-mixture).
    #[arg(long, default_value = "cs")]
    mode: DictionaryMode,
    #[arg(long, default_value_t = 40)]
    per_class_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EncodeMlrArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = LlcParams::DEFAULT_LAMBDA)]
    llc_lambda: f64,
    #[arg(long)]
    llc_tau: Option<f64>,
    #[arg(long, default_value_t = LlcParams::DEFAULT_KNN)]
    llc_knn: usize,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct TrainGmmArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    components: usize,
    /// Total number of sampled descriptors.
    #[arg(long, default_value_t = 256_000)]
    budget: usize,
    /// 5 (exponents 0..=4) or 10 (exponents -6..=3).
    #[arg(long, default_value_t = 5)]
    scales: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct EncodeCfvArgs {
    #[arg(long)]
    gmm: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    scales: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    weight_grad: bool,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct EncodeFcrArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `whole` or `central`.
    #[arg(long, default_value = "whole")]
    crop: String,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct AssembleArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Stores holding the block vectors (searched in order).
    #[arg(long = "stores", value_delimiter = ',', required = true)]
    stores: Vec<PathBuf>,
    /// Block selection, e.g. `MLR+CFV+FCR1`.
    #[arg(long)]
    blocks: String,
    /// FCR crop the stores were extracted with.
    #[arg(long, default_value = "whole")]
    crop: String,
    #[arg(long)]
    no_normalize_mlr: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSvmArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Store with one vector per image.
    #[arg(long)]
    features: PathBuf,
    /// Key suffix of the vectors.
    #[arg(long, default_value = "#hybrid")]
    suffix: String,
    #[arg(long, default_value = "default")]
    split: String,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "#hybrid")]
    suffix: String,
    #[arg(long, default_value = "default")]
    split: String,
    #[arg(long)]
    model: PathBuf,
    /// Write the evaluation as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DaRunArgs {
    /// Pipeline config supplying paths and parameters; its task is replaced.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    /// `unsup` or `semi`.
    #[arg(long, default_value = "unsup")]
    mode: DaMode,
    /// `std` or `all`.
    #[arg(long, default_value = "std")]
    cap: SourceCap,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// `scene` (one domain with a train/test split) or `office` (two domains).
    #[arg(long, default_value = "scene")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

fn fv_scales(n: usize) -> anyhow::Result<FvConfig> {
    Ok(match n {
        5 => FvConfig::five_scales(),
        10 => FvConfig::ten_scales(),
        _ => return Err(hybrep::Error::invalid(format!("--scales must be 5 or 10, got {n}")).into()),
    })
}

fn parse_crop(s: &str) -> anyhow::Result<Crop> {
    match s {
        "whole" | "w" => Ok(Crop::Whole),
        "central" | "c" => Ok(Crop::Central),
        _ => Err(hybrep::Error::invalid(format!("unknown crop `{s}` (expected whole or central)")).into()),
    }
}

/// Training records of `split`, or every record.
fn select<'a>(m: &'a DatasetManifest, split: Option<&str>) -> anyhow::Result<Vec<&'a ImageRecord>> {
    match split {
        Some(s) => Ok(m.split(s)?.train.iter().map(|id| m.require(id)).collect::<hybrep::Result<_>>()?),
        None => Ok(m.records.iter().collect()),
    }
}

fn save_store(store: &FeatureStore, out: &Path) -> anyhow::Result<()> {
    store.save(out)?;
    info!("wrote {} entries to {}", store.len(), out.display());
    Ok(())
}

fn vectors(
    m: &DatasetManifest,
    store: &FeatureStore,
    ids: &[String],
    suffix: &str,
) -> anyhow::Result<(Vec<Vec<f32>>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(ids.len());
    let mut y = Vec::with_capacity(ids.len());
    for id in ids {
        xs.push(store.require(&format!("{id}{suffix}"))?.data().to_vec());
        y.push(m.require(id)?.label);
    }
    Ok((xs, y))
}

fn write_json(value: serde_json::Value, out: &Path) -> anyhow::Result<()> {
    std::fs::write(out, serde_json::to_string_pretty(&value)? + "\n").with_context(|| format!("writing {}", out.display()))
}

/// Config that runs the whole pipeline on a synthetic dataset at toy scale.
fn toy_config(office: bool) -> RunConfig {
    let params = Params {
        per_class_k: 10,
        gmm_components: 8,
        gmm_budget: 20_000,
        scales: vec![0, 1],
        ..Params::default()
    };
    let task = if office {
        Task::Da { transfers: vec![("amazon".into(), "webcam".into())], mode: DaMode::Unsupervised, cap: SourceCap::Standard }
    } else {
        Task::Scene { split: "default".into() }
    };
    let rows = ["MLR", "CFV", "FCR1", "FCR2", "FCR1+FCR2", "MLR+CFV", "MLR+CFV+FCR1+FCR2"];
    RunConfig {
        manifest: "manifest.json".into(),
        work_dir: "work".into(),
        extractor: ExtractorSpec::synthetic(64, 0),
        task,
        rows: rows.iter().map(|s| s.to_string()).collect(),
        external: Default::default(),
        params,
        stages: hybrep::pipeline::Stage::ALL.to_vec(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::ProposalsFilter(a) => {
            let mut m = load_dataset(&a.manifest)?;
            let (mut before, mut after) = (0, 0);
            for r in &mut m.records {
                let boxes = r.boxes().to_vec();
                before += boxes.len();
                let mut kept = filter_proposals(&boxes);
                if let Some(t) = a.var_threshold {
                    let img = r.pixels.clone().ok_or_else(|| {
                        hybrep::Error::invalid(format!("image {} has no pixels for the variance filter", r.id))
                    })?;
                    kept.retain(|b| variance_filter(&img, b, t));
                }
                after += kept.len();
                r.proposals = Some(kept);
            }
            m.save(&a.out)?;
            info!("kept {after} of {before} proposals");
        }
        Command::ClusterParts(a) => {
            let m = load_dataset(&a.manifest)?;
            let params = ProposalParams {
                lambda_b: a.lambda_b,
                lambda_f: a.lambda_f,
                sigma: a.sigma,
                clusters: a.clusters,
                top: a.top,
                context_pad: a.context_pad,
                var_threshold: a.var_threshold,
            };
            let ex = a.extractor.spec().build()?;
            let records = select(&m, a.split.as_deref())?;
            let sets = mine_all(&records, ex.as_ref(), &params, a.seed)?;
            save_store(&prototypes_to_store(&sets)?, &a.out)?;
        }
        Command::BuildDictionary(a) => {
            let m = load_manifest_only(&a.manifest)?;
            let sets = prototypes_from_store(&FeatureStore::open(&a.prototypes)?)?;
            let samples = dictionary_samples(&m, &sets.iter().collect::<Vec<_>>())?;
            let dict =
                build_dictionary(&samples, m.classes.len(), a.mode, a.per_class_k, a.seed, KMeansParams::default())?;
            dict.save(&a.out)?;
            info!("dictionary: {} atoms of dim {}", dict.len(), dict.dim());
        }
        Command::EncodeMlr(a) => {
            let m = load_dataset(&a.manifest)?;
            let dict = PartDictionary::load(&a.dict)?;
            let llc = LlcParams {
                lambda: a.llc_lambda,
                tau: a.llc_tau.unwrap_or_else(|| hybrep::coding::default_tau(&dict)),
                knn: a.llc_knn,
            };
            let cfg = MlrConfig::new(llc);
            let ex = a.extractor.spec().build()?;
            let records: Vec<&ImageRecord> = m.records.iter().collect();
            save_store(&encode_all("mlr", &records, "#mlr", |r| encode_mlr(r, ex.as_ref(), &dict, &cfg))?, &a.out)?;
        }
        Command::TrainGmm(a) => {
            let m = load_dataset(&a.manifest)?;
            let fv = fv_scales(a.scales)?;
            let ex = a.extractor.spec().build()?;
            let records = select(&m, a.split.as_deref())?;
            let xs = gmm_training_set(&records, ex.as_ref(), &fv, a.budget, a.seed)?;
            let fit = train_gmm(&xs, a.components, a.seed, GmmParams::default())?;
            fit.model.save(&a.out)?;
            info!(
                "gmm: {} components, {} iterations, final mean log-likelihood {:.6}",
                fit.model.components(),
                fit.log_likelihood.len(),
                fit.log_likelihood.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::EncodeCfv(a) => {
            let m = load_dataset(&a.manifest)?;
            let gmm = GmmModel::load(&a.gmm)?;
            let fv = FvConfig { alpha: a.alpha, include_weight_grad: a.weight_grad, ..fv_scales(a.scales)? };
            fv.validate()?;
            let ex = a.extractor.spec().build()?;
            let records: Vec<&ImageRecord> = m.records.iter().collect();
            save_store(&encode_all("cfv", &records, "#cfv", |r| encode_cfv(r, ex.as_ref(), &gmm, &fv))?, &a.out)?;
        }
        Command::EncodeFcr(a) => {
            let m = load_dataset(&a.manifest)?;
            let ex = a.extractor.spec().build()?;
            let records: Vec<&ImageRecord> = m.records.iter().collect();
            save_store(&encode_fcr_all(&records, ex.as_ref(), parse_crop(&a.crop)?)?, &a.out)?;
        }
        Command::Assemble(a) => {
            let m = load_manifest_only(&a.manifest)?;
            let crop = parse_crop(&a.crop)?;
            let selection = parse_selection(&a.blocks)?;
            let stores = a.stores.iter().map(FeatureStore::open).collect::<hybrep::Result<Vec<_>>>()?;
            let lookup = |key: &str| -> hybrep::Result<FeatureVec> {
                let t = stores
                    .iter()
                    .find_map(|s| s.get(key))
                    .ok_or_else(|| hybrep::Error::MissingFeature(key.to_string()))?;
                FeatureVec::new(t.data().to_vec())
            };
            let mut out = FeatureStore::new();
            for r in &m.records {
                let mut blocks = Vec::new();
                for b in &selection {
                    let v = match b {
                        Block::Mlr if a.no_normalize_mlr => lookup(&format!("{}#mlr", r.id))?,
                        Block::Mlr => l2_normalize(&lookup(&format!("{}#mlr", r.id))?),
                        Block::Cfv => lookup(&format!("{}#cfv", r.id))?,
                        Block::Fcr1 => l2_normalize(&lookup(&fcr_key(&r.id, FcLayer::Fc1, crop))?),
                        Block::Fcr2 => l2_normalize(&lookup(&fcr_key(&r.id, FcLayer::Fc2, crop))?),
                        Block::Ext(name) => l2_normalize(&lookup(&format!("{}#ext:{name}", r.id))?),
                    };
                    blocks.push((b.clone(), v));
                }
                let h = assemble(&blocks, &selection).map_err(|e| e.in_stage("assemble", r.id.clone()))?;
                out.insert(format!("{}#hybrid", r.id), FeatureVec::new(h.to_vec())?.into())?;
            }
            save_store(&out, &a.out)?;
        }
        Command::TrainSvm(a) => {
            let m = load_manifest_only(&a.manifest)?;
            let store = FeatureStore::open(&a.features)?;
            let (xs, y) = vectors(&m, &store, &m.split(&a.split)?.train, &a.suffix)?;
            let params = SvmParams { c: a.c, seed: a.seed, ..SvmParams::default() };
            let model = svm_train(&xs, &y, m.classes.len(), &params)?;
            model.save(&a.out)?;
            info!("svm: {} classes, dim {}", model.classes(), model.dim());
        }
        Command::Evaluate(a) => {
            let m = load_manifest_only(&a.manifest)?;
            let store = FeatureStore::open(&a.features)?;
            let model = SvmModel::load(&a.model)?;
            let (xs, y) = vectors(&m, &store, &m.split(&a.split)?.test, &a.suffix)?;
            let eval = evaluate_scene(&model, &xs, &y)?;
            println!("accuracy {:.2}", 100.0 * eval.accuracy);
            if let Some(out) = &a.out {
                write_json(serde_json::to_value(&eval)?, out)?;
            }
        }
        Command::DaRun(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            cfg.task = Task::Da { transfers: vec![(a.source, a.target)], mode: a.mode, cap: a.cap };
            let outcome = run_pipeline(&cfg)?;
            print!("{}", outcome.table.render_text());
        }
        Command::Pipeline(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let outcome = run_pipeline(&cfg)?;
            print!("{}", outcome.table.render_text());
        }
        Command::SynthDataset(a) => {
            let office = match a.variant.as_str() {
                "scene" => false,
                "office" => true,
                v => bail!(hybrep::Error::invalid(format!("unknown variant `{v}` (expected scene or office)"))),
            };
            let base = if office { SynthConfig::toy_office(a.seed) } else { SynthConfig::toy_scene(a.seed) };
            let cfg = SynthConfig { classes: a.classes, ..base };
            let m = synth_dataset(&cfg, &a.out)?;
            write_json(serde_json::to_value(toy_config(office))?, &a.out.join("pipeline.json"))?;
            info!(
                "wrote {} images ({} classes, {}) to {}",
                m.records.len(),
                m.classes.len(),
                match cfg.variant {
                    SynthVariant::Scene { .. } => "scene",
                    SynthVariant::Domains { .. } => "domains",
                },
                a.out.display()
            );
        }
    }
    Ok(())
}

fn load_manifest_only(path: &Path) -> hybrep::Result<DatasetManifest> {
    hybrep::datamodel::load_manifest(path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<hybrep::Error>().is_some_and(hybrep::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
