use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use medslip::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use medslip::eval::{
    checkpoint_query_embeddings, global_existence, ground_for_bundle, measure_latent_alignment,
    zero_shot_classify,
};
use medslip::finetune::{finetune_classifier, finetune_segmenter, sample_fraction, FinetuneConfig};
use medslip::gradcheck::run_suite;
use medslip::metrics::{classification_report, dice_iou, pointing_game, GtRegion, MetricReport};
use medslip::model::{forward, ModelConfig};
use medslip::report::{
    build_existence_matrix, parse_report, select_queries, write_triplets, KnowledgeTable,
    TripletRecord,
};
use medslip::synth::{generate_corpus, Corpus, Split, SynthConfig};
use medslip::text::ProviderConfig;
use medslip::train::{pretrain, TrainConfig};
use medslip::{Error, Result};

#[derive(Parser)]
#[command(
    name = "medslip",
    version,
    about = "Dual-stream vision-language pre-training on a synthetic radiology benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic study corpus: images, masks, reports, triplets.
    Synth(SynthArgs),
    /// Parse corpus reports back into (anatomy, pathology, existence) triplets.
    ExtractTriplets(ExtractArgs),
    /// Pre-train the dual-stream model on a corpus train split.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint: zero-shot classification, grounding, or latent alignment.
    Eval(EvalArgs),
    /// Fine-tune a checkpoint on a labeled fraction of the train split.
    Finetune(FinetuneArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Shorthand for `eval --task latent`.
    MeasureLatent(MeasureLatentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config with corpus settings and study count; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory to write the corpus into.
    #[arg(long)]
    out: PathBuf,
    /// Override the study count from the config.
    #[arg(long)]
    count: Option<usize>,
    /// Override the corpus seed (beats MEDSLIP_SEED, which beats the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Corpus directory produced by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for the extracted triplets and summary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON config with train, model, provider, and query-set settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory produced by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for the checkpoint and loss trace.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed (beats MEDSLIP_SEED, which beats the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train without the prototypical contrastive loss.
    #[arg(long)]
    no_pcl: bool,
    /// Collapse both query streams onto one shared parameter set.
    #[arg(long)]
    no_ds: bool,
    /// Feed entangled tokens to the streams instead of gated views.
    #[arg(long)]
    no_mg: bool,
    /// Train without the inter-stream correlation loss.
    #[arg(long)]
    no_icl: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    ZeroshotCls,
    Grounding,
    Latent,
}

impl EvalTask {
    fn name(self) -> &'static str {
        match self {
            EvalTask::ZeroshotCls => "zeroshot-cls",
            EvalTask::Grounding => "grounding",
            EvalTask::Latent => "latent",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory produced by `pretrain` or `finetune`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory whose test split is evaluated.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    task: EvalTask,
    /// Directory for the metric files.
    #[arg(long)]
    out: PathBuf,
    /// Heatmap quantile that binarizes grounding masks.
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
    /// Score threshold behind F1 and accuracy.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FinetuneTask {
    Classification,
    Segmentation,
}

impl FinetuneTask {
    fn name(self) -> &'static str {
        match self {
            FinetuneTask::Classification => "classification",
            FinetuneTask::Segmentation => "segmentation",
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Checkpoint directory produced by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory supplying the train and test splits.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    task: FinetuneTask,
    /// Labeled fraction of the train split, in (0, 1].
    #[arg(long)]
    fraction: f64,
    /// Directory for the tuned checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    /// JSON config with fine-tuning hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the fine-tuning seed (beats MEDSLIP_SEED, which beats the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Directory for the check report.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the random instances (beats MEDSLIP_SEED; default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per loss selector.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Whole-model instances checked coordinate-wise.
    #[arg(long, default_value_t = 4)]
    forward_instances: usize,
    /// Shift the named parameter group's analytic gradient (failure-path hook).
    #[arg(long, hide = true)]
    tamper: Option<String>,
}

#[derive(Args)]
struct MeasureLatentArgs {
    /// Checkpoint directory produced by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus whose co-occurrence statistics are compared against.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for the summary.
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to rerun a command: resolved config, seed, content
/// hashes of the inputs, and the paths written.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
    details: serde_json::Value,
    duration_seconds: f64,
}

/// Written last and renamed into place so a crash never leaves a truncated
/// manifest behind.
fn write_run_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(manifest)?;
    let tmp = out.join("run_manifest.json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, out.join("run_manifest.json"))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string_pretty(value)?)?)
}

fn load_config_or_default<T>(path: Option<&Path>) -> Result<T>
where
    T: Default + serde::de::DeserializeOwned,
{
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

/// Explicit --seed wins, then MEDSLIP_SEED, then the config value.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("MEDSLIP_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("MEDSLIP_SEED {v:?} is not a valid seed"))),
        Err(std::env::VarError::NotPresent) => Ok(fallback),
        Err(e) => Err(Error::Config(format!("MEDSLIP_SEED: {e}"))),
    }
}

fn hex_digest(digest: impl AsRef<[u8]>) -> String {
    digest.as_ref().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).map_err(|e| Error::Input(format!("hash {}: {e}", path.display())))?;
    Ok(hex_digest(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("entry lives under the walk root")
                .to_string_lossy()
                .into_owned();
            // The manifest describes the run that wrote the directory, so it
            // stays out of the content identity.
            if rel != "run_manifest.json" {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Content hash of a directory: sorted relative paths, each fed as
/// `path \0 bytes`, so renames and edits both change the digest.
fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(dir.join(rel))?);
    }
    Ok(hex_digest(hasher.finalize()))
}

fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut text = String::from("class,auc,f1,acc\n");
    for c in &report.per_class {
        let auc = c.auc.map(|v| format!("{v:.12}")).unwrap_or_default();
        let _ = writeln!(text, "{},{auc},{:.12},{:.12}", c.class, c.f1, c.acc);
    }
    let _ = writeln!(
        text,
        "macro,{:.12},{:.12},{:.12}",
        report.macro_auc, report.macro_f1, report.macro_acc
    );
    Ok(fs::write(path, text)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthCommandConfig {
    corpus: SynthConfig,
    count: usize,
}

impl Default for SynthCommandConfig {
    fn default() -> Self {
        SynthCommandConfig { corpus: SynthConfig::default(), count: 1000 }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg: SynthCommandConfig = load_config_or_default(args.config.as_deref())?;
    if let Some(count) = args.count {
        cfg.count = count;
    }
    cfg.corpus.seed = resolve_seed(args.seed, cfg.corpus.seed)?;

    let manifest = generate_corpus(&cfg.corpus, cfg.count, &args.out)?;
    let corpus_hash = hash_dir(&args.out)?;
    println!(
        "wrote {} studies to {} (train {}, val {}, test {})",
        manifest.count,
        args.out.display(),
        manifest.train_ids.len(),
        manifest.val_ids.len(),
        manifest.test_ids.len()
    );
    println!("corpus content hash {corpus_hash}");

    let mut input_hashes = BTreeMap::new();
    if let Some(path) = &args.config {
        input_hashes.insert("config".into(), sha256_file(path)?);
    }
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "synth".into(),
            config: serde_json::to_value(&cfg)?,
            seed: Some(cfg.corpus.seed),
            input_hashes,
            outputs: vec![args.out.display().to_string()],
            details: json!({
                "corpus_hash": corpus_hash,
                "train": manifest.train_ids.len(),
                "val": manifest.val_ids.len(),
                "test": manifest.test_ids.len(),
            }),
            duration_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let start = Instant::now();
    let corpus = Corpus::open(&args.corpus)?;
    let grammar = corpus.manifest.config.grammar();
    let reports = corpus.reports()?;

    let mut records: Vec<TripletRecord> = Vec::new();
    let mut skipped = 0;
    for (study_id, text) in &reports {
        let parsed = parse_report(study_id, text, &grammar)?;
        skipped += parsed.skipped_sentences;
        records.extend(parsed.triplets);
    }

    fs::create_dir_all(&args.out)?;
    let triplet_path = args.out.join("triplets.jsonl");
    write_triplets(&triplet_path, &records)?;
    let summary = json!({
        "studies": reports.len(),
        "triplets": records.len(),
        "skipped_sentences": skipped,
    });
    let summary_path = args.out.join("summary.json");
    write_json(&summary_path, &summary)?;
    println!(
        "extracted {} triplets from {} reports ({} sentences skipped)",
        records.len(),
        reports.len(),
        skipped
    );

    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "extract-triplets".into(),
            config: serde_json::Value::Null,
            seed: None,
            input_hashes: BTreeMap::from([("corpus".into(), hash_dir(&args.corpus)?)]),
            outputs: vec![
                triplet_path.display().to_string(),
                summary_path.display().to_string(),
            ],
            details: summary,
            duration_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PretrainCommandConfig {
    train: TrainConfig,
    model: ModelConfig,
    provider: ProviderConfig,
    query_anatomies: usize,
    query_pathologies: usize,
}

impl Default for PretrainCommandConfig {
    fn default() -> Self {
        PretrainCommandConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            provider: ProviderConfig::default(),
            query_anatomies: 6,
            query_pathologies: 5,
        }
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg: PretrainCommandConfig = load_config_or_default(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if args.no_pcl {
        cfg.train.flags.pcl = false;
    }
    if args.no_ds {
        cfg.train.flags.ds = false;
    }
    if args.no_mg {
        cfg.train.flags.mg = false;
    }
    if args.no_icl {
        cfg.train.flags.icl = false;
    }
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;

    let corpus = Corpus::open(&args.corpus)?;
    let by_study = corpus.triplets_by_study()?;
    let mut train_triplets: Vec<TripletRecord> = Vec::new();
    for study_id in corpus.split_ids(Split::Train) {
        if let Some(triplets) = by_study.get(study_id) {
            train_triplets.extend_from_slice(triplets);
        }
    }
    let qs = select_queries(
        &train_triplets,
        cfg.query_anatomies,
        cfg.query_pathologies,
        &KnowledgeTable::default_table(),
    )?;

    let outcome = pretrain(&cfg.train, &cfg.model, &cfg.provider, &corpus, &qs, &args.out)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "final step loss total {:.6} (protocl {:.6}, icl {:.6}, exist {:.6})",
            last.total, last.protocl, last.icl, last.exist
        );
    }
    if let Some(mean) = outcome.epoch_means.last() {
        println!("final epoch mean total loss {mean:.6}");
    }
    println!("checkpoint {}", outcome.checkpoint_dir.display());

    let mut input_hashes = BTreeMap::from([("corpus".into(), hash_dir(&args.corpus)?)]);
    if let Some(path) = &args.config {
        input_hashes.insert("config".into(), sha256_file(path)?);
    }
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "pretrain".into(),
            config: serde_json::to_value(&cfg)?,
            seed: Some(cfg.train.seed),
            input_hashes,
            outputs: vec![
                outcome.checkpoint_dir.display().to_string(),
                outcome.trace_path.display().to_string(),
            ],
            details: json!({
                "flags": cfg.train.flags,
                "steps": outcome.trace.len(),
                "epoch_means": outcome.epoch_means,
                "anatomy_queries": qs.anatomy_terms,
                "pathology_queries": qs.pathology_terms,
            }),
            duration_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_eval(args: EvalArgs, command: &str) -> Result<()> {
    let start = Instant::now();
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = Corpus::open(&args.corpus)?;
    fs::create_dir_all(&args.out)?;

    let (summary, outputs) = match args.task {
        EvalTask::ZeroshotCls => eval_zeroshot(&ckpt, &corpus, args.threshold, &args.out)?,
        EvalTask::Grounding => eval_grounding(&ckpt, &corpus, args.quantile, &args.out)?,
        EvalTask::Latent => eval_latent(&ckpt, &corpus, &args.out)?,
    };

    write_run_manifest(
        &args.out,
        &RunManifest {
            command: command.into(),
            config: json!({
                "task": args.task.name(),
                "quantile": args.quantile,
                "threshold": args.threshold,
            }),
            seed: None,
            input_hashes: BTreeMap::from([
                ("checkpoint".into(), hash_dir(&args.checkpoint)?),
                ("corpus".into(), hash_dir(&args.corpus)?),
            ]),
            outputs,
            details: summary,
            duration_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

type EvalOutput = (serde_json::Value, Vec<String>);

fn eval_zeroshot(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    threshold: f64,
    out: &Path,
) -> Result<EvalOutput> {
    let qe = checkpoint_query_embeddings(ckpt)?;
    let qs = &ckpt.config.query_set;
    let ids = corpus.split_ids(Split::Test);
    if ids.is_empty() {
        return Err(Error::Config("corpus has no test split".into()));
    }

    let by_study = corpus.triplets_by_study()?;
    let mut images = Vec::with_capacity(ids.len());
    let mut labels = Array2::zeros((ids.len(), qs.m()));
    for (i, study_id) in ids.iter().enumerate() {
        images.push(corpus.image(study_id)?);
        let triplets = by_study.get(study_id).map_or(&[][..], Vec::as_slice);
        let em = build_existence_matrix(study_id, triplets, qs)?;
        labels.row_mut(i).assign(&em.y_pathology);
    }

    let scores = zero_shot_classify(&ckpt.params, &ckpt.config.model, &qe, &images)?;
    let report = classification_report(&scores, &labels, &qs.pathology_terms, threshold)?;
    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&metrics_path, &report)?;

    let summary = json!({
        "task": "zeroshot-cls",
        "studies": ids.len(),
        "threshold": threshold,
        "macro_auc": report.macro_auc,
        "macro_f1": report.macro_f1,
        "macro_acc": report.macro_acc,
        "auc_skipped": report.auc_skipped,
        "per_class": report.per_class,
    });
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    println!(
        "zero-shot classification over {} studies: macro AUC {:.4}, F1 {:.4}, ACC {:.4}",
        ids.len(),
        report.macro_auc,
        report.macro_f1,
        report.macro_acc
    );
    Ok((summary, vec![metrics_path.display().to_string(), summary_path.display().to_string()]))
}

struct GroundRow {
    study: String,
    pathology: String,
    anatomy: String,
    hit: bool,
    dice: f64,
    iou: f64,
}

fn eval_grounding(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    quantile: f64,
    out: &Path,
) -> Result<EvalOutput> {
    let qe = checkpoint_query_embeddings(ckpt)?;
    let qs = &ckpt.config.query_set;
    let regions = corpus.regions()?;
    let ids = corpus.split_ids(Split::Test);
    if ids.is_empty() {
        return Err(Error::Config("corpus has no test split".into()));
    }

    // One forward per study serves every region on it.
    let per_study: Vec<(Vec<GroundRow>, usize)> = ids
        .par_iter()
        .map(|study_id| {
            let Some(entries) = regions.get(study_id).filter(|e| !e.is_empty()) else {
                return Ok((Vec::new(), 0));
            };
            let image = corpus.image(study_id)?;
            let bundle = forward(&image, &qe, &ckpt.params, &ckpt.config.model)?;
            let mut rows = Vec::new();
            let mut skipped = 0;
            for entry in entries {
                let Some(index) =
                    qs.pathology_terms.iter().position(|t| t == &entry.pathology)
                else {
                    skipped += 1;
                    continue;
                };
                let g = ground_for_bundle(&bundle, &image, index, quantile)?;
                let hit = pointing_game(g.peak, GtRegion::Bbox(entry.bbox));
                let gt = corpus.load_region_mask(entry)?;
                let (dice, iou) = dice_iou(&g.binary_mask, &gt)?;
                rows.push(GroundRow {
                    study: study_id.clone(),
                    pathology: entry.pathology.clone(),
                    anatomy: entry.anatomy.clone(),
                    hit,
                    dice,
                    iou,
                });
            }
            Ok((rows, skipped))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("study,pathology,anatomy,hit,dice,iou\n");
    let (mut hits, mut evaluated, mut skipped) = (0usize, 0usize, 0usize);
    let (mut dice_sum, mut iou_sum) = (0.0, 0.0);
    for (rows, s) in &per_study {
        skipped += s;
        for r in rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.12},{:.12}",
                r.study,
                r.pathology,
                r.anatomy,
                u8::from(r.hit),
                r.dice,
                r.iou
            );
            hits += usize::from(r.hit);
            dice_sum += r.dice;
            iou_sum += r.iou;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Input(
            "no test regions match the checkpoint's pathology queries".into(),
        ));
    }
    let csv_path = out.join("grounding.csv");
    fs::write(&csv_path, csv)?;

    let denom = evaluated as f64;
    let summary = json!({
        "task": "grounding",
        "evaluated": evaluated,
        "skipped": skipped,
        "pointing_game": hits as f64 / denom,
        "mean_dice": dice_sum / denom,
        "mean_iou": iou_sum / denom,
        "quantile": quantile,
    });
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    println!(
        "grounded {evaluated} regions: pointing game {:.4}, mean Dice {:.4}, mean IoU {:.4} ({skipped} skipped)",
        hits as f64 / denom,
        dice_sum / denom,
        iou_sum / denom
    );
    Ok((summary, vec![csv_path.display().to_string(), summary_path.display().to_string()]))
}

fn eval_latent(ckpt: &Checkpoint, corpus: &Corpus, out: &Path) -> Result<EvalOutput> {
    let qe = checkpoint_query_embeddings(ckpt)?;
    let qs = &ckpt.config.query_set;
    let by_study = corpus.triplets_by_study()?;

    // Co-occurrence is a corpus-level statistic, so every split contributes.
    let mut ems = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for study_id in corpus.split_ids(split) {
            let triplets = by_study.get(study_id).map_or(&[][..], Vec::as_slice);
            ems.push(build_existence_matrix(study_id, triplets, qs)?);
        }
    }
    let l_global = global_existence(&ems)?;
    let kl = measure_latent_alignment(&qe, &l_global)?;

    let summary = json!({
        "task": "latent",
        "kl": kl,
        "studies": ems.len(),
        "pathology_queries": qs.m(),
        "anatomy_queries": qs.n(),
    });
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    println!("latent alignment KL {kl:.6} over {} studies", ems.len());
    Ok((summary, vec![summary_path.display().to_string()]))
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg: FinetuneConfig = load_config_or_default(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = Corpus::open(&args.corpus)?;
    // Same draw the trainer makes internally, replayed for the manifest.
    let train_ids = corpus.split_ids(Split::Train);
    let picked = sample_fraction(train_ids.len(), args.fraction, cfg.seed)?;
    let sampled_ids: Vec<&String> = picked.iter().map(|&i| &train_ids[i]).collect();

    fs::create_dir_all(&args.out)?;
    let ckpt_dir = args.out.join("checkpoint");
    let mut outputs = vec![ckpt_dir.display().to_string()];
    let summary = match args.task {
        FinetuneTask::Classification => {
            let outcome = finetune_classifier(&ckpt, &corpus, args.fraction, &cfg)?;
            save_checkpoint(&ckpt_dir, &outcome.params, &ckpt.config)?;
            let metrics_path = args.out.join("metrics.csv");
            write_metrics_csv(&metrics_path, &outcome.report)?;
            outputs.push(metrics_path.display().to_string());
            println!(
                "fine-tuned classifier on {} studies: macro AUC {:.4}, F1 {:.4}, ACC {:.4}",
                outcome.train_count,
                outcome.report.macro_auc,
                outcome.report.macro_f1,
                outcome.report.macro_acc
            );
            json!({
                "task": "classification",
                "fraction": args.fraction,
                "train_count": outcome.train_count,
                "macro_auc": outcome.report.macro_auc,
                "macro_f1": outcome.report.macro_f1,
                "macro_acc": outcome.report.macro_acc,
                "epoch_losses": outcome.epoch_losses,
                "sampled_ids": sampled_ids,
            })
        }
        FinetuneTask::Segmentation => {
            let outcome = finetune_segmenter(&ckpt, &corpus, args.fraction, &cfg)?;
            save_checkpoint(&ckpt_dir, &outcome.params, &ckpt.config)?;
            println!(
                "fine-tuned segmenter on {} studies: mean Dice {:.4}, mean IoU {:.4}",
                outcome.train_count, outcome.mean_dice, outcome.mean_iou
            );
            json!({
                "task": "segmentation",
                "fraction": args.fraction,
                "train_count": outcome.train_count,
                "mean_dice": outcome.mean_dice,
                "mean_iou": outcome.mean_iou,
                "epoch_losses": outcome.epoch_losses,
                "sampled_ids": sampled_ids,
            })
        }
    };
    let summary_path = args.out.join("summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path.display().to_string());

    let mut input_hashes = BTreeMap::from([
        ("checkpoint".into(), hash_dir(&args.checkpoint)?),
        ("corpus".into(), hash_dir(&args.corpus)?),
    ]);
    if let Some(path) = &args.config {
        input_hashes.insert("config".into(), sha256_file(path)?);
    }
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "finetune".into(),
            config: json!({
                "task": args.task.name(),
                "fraction": args.fraction,
                "train": cfg,
            }),
            seed: Some(cfg.seed),
            input_hashes,
            outputs,
            details: summary,
            duration_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let seed = resolve_seed(args.seed, 0)?;
    let reports = run_suite(seed, args.instances, args.forward_instances, args.tamper.as_deref())?;
    for r in &reports {
        println!(
            "{}: max relative error {:.3e} over {} instances (worst group: {})",
            r.loss, r.max_rel_err, r.instances, r.worst_group
        );
    }
    println!("all gradient checks passed");

    fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.json");
    write_json(&report_path, &reports)?;
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "gradcheck".into(),
            config: json!({
                "instances": args.instances,
                "forward_instances": args.forward_instances,
            }),
            seed: Some(seed),
            input_hashes: BTreeMap::new(),
            outputs: vec![report_path.display().to_string()],
            details: serde_json::to_value(&reports)?,
            duration_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::ExtractTriplets(args) => cmd_extract(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Eval(args) => cmd_eval(args, "eval"),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::MeasureLatent(args) => cmd_eval(
            EvalArgs {
                checkpoint: args.checkpoint,
                corpus: args.corpus,
                task: EvalTask::Latent,
                out: args.out,
                quantile: 0.95,
                threshold: 0.5,
            },
            "measure-latent",
        ),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
