//! One function per pipeline stage. Every stage reads its inputs from the
//! output directory, writes its artifacts there, merges its section into
//! `report.json` and appends to `run.jsonl`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use tofe_core::config::ExperimentConfig;
use tofe_core::datagen::{seed_for, Corpus};
use tofe_core::denoiser::DenoiserParams;
use tofe_core::evalharness::{
    ablation_csv, descent_summary, detection_csv, evaluate_detector, extract_corpus, robustness_csv,
    run_all_ablations, run_reconstruction, run_robustness, run_separation_analysis, separation_csv,
    separation_groups, train_detector, train_model, ExperimentReport,
};
use tofe_core::store;
use tofe_core::tofe::TofeFeature;
use tofe_core::{Error, Result};

use crate::{Cli, Stage};

pub const REPORT_FILE: &str = "report.json";
pub const RUN_LOG_FILE: &str = "run.jsonl";
pub const FEATURE_FILE: &str = "features.tfea";
pub const DETECTOR_FILE: &str = "detector.tmlp";

/// Seeds replaced by `--seed`, each derived from the master seed and its key.
fn apply_master_seed(cfg: &mut ExperimentConfig, seed: u64) {
    let derive = |key: &str| seed_for(seed, key);
    cfg.models.data_seed = derive("models.data_seed");
    cfg.models.bank_seed = derive("models.bank_seed");
    cfg.training.seed = derive("training.seed");
    cfg.dataset.real_seed = derive("dataset.real_seed");
    cfg.classifier.seed = derive("classifier.seed");
    cfg.analysis.tsne.seed = derive("analysis.tsne.seed");
    cfg.robustness.seed = derive("robustness.seed");
}

struct RunLog {
    path: PathBuf,
}

impl RunLog {
    fn event(&self, mut record: Value) -> Result<()> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        record["ts"] = json!(ts);
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{record}")?;
        Ok(())
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    data: PathBuf,
    log: RunLog,
    /// Artifact path (relative to `out` where possible) to content hash.
    artifacts: BTreeMap<String, String>,
}

impl Ctx {
    fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    fn extractor_path(&self) -> PathBuf {
        self.models_dir().join("extractor.tdnz")
    }

    fn generator_path(&self, seed: u64) -> PathBuf {
        self.models_dir().join(format!("generator-{seed}.tdnz"))
    }

    fn record(&mut self, path: &Path, hash: String) {
        let shown = path.strip_prefix(&self.out).unwrap_or(path);
        self.artifacts.insert(shown.display().to_string(), hash);
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        let hash = store::atomic_write(&path, text.as_bytes())?;
        self.record(&path, hash);
        Ok(())
    }

    fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.out.join(name);
        let hash = store::write_json(&path, value)?;
        self.record(&path, hash);
        Ok(())
    }

    fn timed<T>(&self, step: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f()?;
        self.log.event(json!({
            "event": "step",
            "step": step,
            "duration_s": start.elapsed().as_secs_f64(),
        }))?;
        Ok(value)
    }

    fn dataset(&self) -> Result<Corpus> {
        self.timed("load dataset", || store::load_dataset(&self.data).map(|(_, corpus)| corpus))
    }

    fn features(&self) -> Result<Vec<TofeFeature>> {
        store::read_feature_file(&self.out.join(FEATURE_FILE))
    }

    fn extractor(&self) -> Result<DenoiserParams> {
        store::read_denoiser(&self.extractor_path())
    }

    /// Loads the report (or starts one), lets `f` fill its section and
    /// writes it back. Config and seeds always reflect the current run.
    fn update_report(&mut self, f: impl FnOnce(&mut ExperimentReport)) -> Result<()> {
        let path = self.out.join(REPORT_FILE);
        let fresh = ExperimentReport::new(&self.cfg);
        let mut report = match store::read_json::<ExperimentReport>(&path) {
            Ok(r) => ExperimentReport { code_version: fresh.code_version, config: fresh.config, seeds: fresh.seeds, ..r },
            Err(Error::MissingInput(_)) => fresh,
            Err(e) => return Err(e),
        };
        f(&mut report);
        self.write_json(REPORT_FILE, &report)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        apply_master_seed(&mut cfg, seed);
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out)?;
    let mut ctx = Ctx {
        data: cli.dataset.clone().unwrap_or_else(|| cli.out.join("data")),
        log: RunLog { path: cli.out.join(RUN_LOG_FILE) },
        out: cli.out.clone(),
        artifacts: BTreeMap::new(),
        cfg,
    };
    let seeds = ExperimentReport::new(&ctx.cfg).seeds;
    ctx.log.event(json!({
        "event": "start",
        "stage": cli.command.name(),
        "config": ctx.cfg,
        "seeds": seeds,
        "threads": rayon::current_num_threads(),
    }))?;
    let start = Instant::now();
    let outcome = match cli.command {
        Stage::TrainGenerators => train_generators(&mut ctx),
        Stage::BuildDataset => build_dataset(&mut ctx),
        Stage::Extract => extract(&mut ctx),
        Stage::Analyze => analyze(&mut ctx),
        Stage::TrainDetector => train_detector_stage(&mut ctx),
        Stage::Evaluate => evaluate(&mut ctx),
        Stage::Robustness => robustness(&mut ctx),
        Stage::Ablate => ablate(&mut ctx),
    };
    let status = match &outcome {
        Ok(()) => json!("ok"),
        Err(e) => json!(e.to_string()),
    };
    ctx.log.event(json!({
        "event": "finish",
        "stage": cli.command.name(),
        "status": status,
        "duration_s": start.elapsed().as_secs_f64(),
        "artifacts": ctx.artifacts,
    }))?;
    outcome
}

fn train_generators(ctx: &mut Ctx) -> Result<()> {
    let mut seeds: Vec<u64> = ctx.cfg.generators.iter().map(|g| g.model_seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut summaries = Vec::new();
    let extractor_seed = ctx.cfg.models.extractor_seed;
    let jobs: Vec<(u64, PathBuf)> = std::iter::once((extractor_seed, ctx.extractor_path()))
        .chain(seeds.iter().map(|&s| (s, ctx.generator_path(s))))
        .collect();
    for (seed, path) in jobs {
        let (params, summary) = ctx.timed(&format!("train model {seed}"), || train_model(&ctx.cfg, seed))?;
        let hash = store::write_denoiser(&path, &params)?;
        ctx.record(&path, hash);
        summaries.push(summary);
    }
    ctx.update_report(|r| r.models = Some(summaries))
}

fn build_dataset(ctx: &mut Ctx) -> Result<()> {
    let mut models = BTreeMap::new();
    for g in &ctx.cfg.generators {
        if !models.contains_key(&g.model_seed) {
            models.insert(g.model_seed, store::read_denoiser(&ctx.generator_path(g.model_seed))?);
        }
    }
    let corpus = ctx.timed("sample corpus", || tofe_core::evalharness::build_dataset(&ctx.cfg, &models))?;
    let manifest = store::write_dataset(&ctx.data, &corpus, &ctx.cfg.dataset)?;
    ctx.record(&ctx.data.join(store::MANIFEST_FILE), store::content_hash(&std::fs::read(ctx.data.join(store::MANIFEST_FILE))?));
    ctx.log.event(json!({ "event": "dataset", "images": manifest.items.len(), "content_hash": manifest.content_hash }))?;
    Ok(())
}

fn extract(ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.dataset()?;
    let extractor = ctx.extractor()?;
    let sched = ctx.cfg.schedule()?;
    let extractions = ctx.timed("extract features", || extract_corpus(&corpus, &extractor, &sched, &ctx.cfg.tofe))?;
    let features: Vec<TofeFeature> = extractions.iter().map(|e| e.feature.clone()).collect();
    let path = ctx.out.join(FEATURE_FILE);
    let hash = store::write_feature_file(&path, &features)?;
    ctx.record(&path, hash);
    let descent = descent_summary(&extractions);
    ctx.write_json("descent.json", &descent)?;
    ctx.update_report(|r| r.descent = Some(descent))
}

fn analyze(ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.dataset()?;
    let features = ctx.features()?;
    let extractor = ctx.extractor()?;
    let sched = ctx.cfg.schedule()?;
    let analysis = &ctx.cfg.analysis;
    let rows = ctx.timed("separation analysis", || {
        let (tofe, pixels) = separation_groups(&corpus, &features, analysis.per_class)?;
        run_separation_analysis(&tofe, &pixels, analysis)
    })?;
    let recon = ctx.timed("reconstruction", || {
        run_reconstruction(&corpus, &features, &extractor, &sched, &ctx.cfg.tofe, analysis.reconstruction_images)
    })?;
    ctx.write_text("separation.csv", &separation_csv(&rows)?)?;
    ctx.write_json("reconstruction.json", &recon)?;
    ctx.update_report(|r| {
        r.separation = Some(rows);
        r.reconstruction = Some(recon);
    })
}

fn train_detector_stage(ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.dataset()?;
    let features = ctx.features()?;
    let trained = ctx.timed("train detector", || train_detector(&corpus, &features, &ctx.cfg.classifier))?;
    let path = ctx.out.join(DETECTOR_FILE);
    let hash = store::write_classifier(&path, &trained.model)?;
    ctx.record(&path, hash);
    ctx.log.event(json!({
        "event": "detector",
        "batches": trained.loss_curve.len(),
        "final_batch_loss": trained.loss_curve.last(),
    }))
}

fn evaluate(ctx: &mut Ctx) -> Result<()> {
    let features = ctx.features()?;
    let model = store::read_classifier(&ctx.out.join(DETECTOR_FILE))?;
    let corpus = ctx.dataset()?;
    let report = ctx.timed("evaluate detector", || evaluate_detector(&corpus, &features, &model))?;
    ctx.write_text("detection.csv", &detection_csv(&report)?)?;
    ctx.update_report(|r| r.detection = Some(report))
}

fn robustness(ctx: &mut Ctx) -> Result<()> {
    let model = store::read_classifier(&ctx.out.join(DETECTOR_FILE))?;
    let extractor = ctx.extractor()?;
    let corpus = ctx.dataset()?;
    let sched = ctx.cfg.schedule()?;
    let report = ctx.timed("robustness sweep", || {
        run_robustness(&corpus, &extractor, &sched, &ctx.cfg.tofe, &model, &ctx.cfg.robustness)
    })?;
    ctx.write_text("robustness.csv", &robustness_csv(&report)?)?;
    ctx.update_report(|r| r.robustness = Some(report))
}

fn ablate(ctx: &mut Ctx) -> Result<()> {
    let extractor = ctx.extractor()?;
    let corpus = ctx.dataset()?;
    let sched = ctx.cfg.schedule()?;
    let rows = ctx.timed("ablations", || run_all_ablations(&ctx.cfg, &corpus, &extractor, &sched))?;
    ctx.write_text("ablation.csv", &ablation_csv(&rows)?)?;
    ctx.update_report(|r| r.ablation = Some(rows))
}
