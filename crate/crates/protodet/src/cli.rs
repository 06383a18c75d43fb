//! Command-line surface: training, evaluation, single-episode inference,
//! gradient auditing, and the three-variant comparison run.
//!
//! Every command emits one JSON document, to stdout by default or to the
//! `--out` path. Exit code 0 means success, 1 a usage or input problem, 2 a
//! runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::episodic::{
    label_proposal, prepare_episode, sample_episode, EpisodeHyper, ProposalLabel, TrainConfig,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::eval::{detect_prepared, evaluate, EvalParams};
use crate::meta::{embeddings_to_table, EmbeddingRole, EmbeddingRow};
use crate::metric::{MetricConfig, MetricKind};
use crate::model::Model;
use crate::par::with_workers;
use crate::toydata::{Split, ToyDataset};

#[derive(Debug, Parser)]
#[command(
    name = "protodet",
    version,
    about = "Few-shot shape detection on procedural scenes: episodic training, \
             correlation-based prototype matching, and evaluation tooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for parallel sections (default: one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run (or resume) episodic training from a JSON config.
    Train(TrainArgs),
    /// Measure detection quality of a checkpoint over seeded episode groups.
    Eval(EvalArgs),
    /// Run one episode end to end and dump its detections.
    Infer(InferArgs),
    /// Audit analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the metric/embedding variants side by side.
    Ablate(AblateArgs),
}

#[derive(Debug, Parser)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for checkpoints and the metrics log.
    #[arg(long, default_value = "runs/train")]
    pub out_dir: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's similarity metric (pearson|cosine).
    #[arg(long)]
    pub metric: Option<String>,
    /// Disable the episodic reconstructor (pooled-embedding variant).
    #[arg(long)]
    pub no_mr: bool,
    /// Write the summary JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct EvalArgs {
    /// Trained checkpoint manifest.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Class split to sample episodes from (base|novel).
    #[arg(long, default_value = "novel")]
    pub split: String,
    /// Total episodes, divided over the seed groups.
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// Seed groups contributing to the dispersion estimate.
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
    /// Episode classes including background (default: training value).
    #[arg(long)]
    pub way: Option<usize>,
    /// Supports per class (default: training value).
    #[arg(long)]
    pub shot: Option<usize>,
    /// Query scenes per foreground class (default: training value).
    #[arg(long)]
    pub n_query: Option<usize>,
    /// Base seed for the episode groups.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum confidence for a detection to count.
    #[arg(long, default_value_t = 0.0)]
    pub score_threshold: f64,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct InferArgs {
    /// Trained checkpoint manifest.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Class split to sample the episode from (base|novel).
    #[arg(long, default_value = "novel")]
    pub split: String,
    /// Episode seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Episode classes including background (default: training value).
    #[arg(long)]
    pub way: Option<usize>,
    /// Supports per class (default: training value).
    #[arg(long)]
    pub shot: Option<usize>,
    /// Query scenes per foreground class (default: training value).
    #[arg(long)]
    pub n_query: Option<usize>,
    /// Minimum confidence for a detection to count.
    #[arg(long, default_value_t = 0.7)]
    pub score_threshold: f64,
    /// Also write prototype and query embeddings to this CSV file.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Random instances per suite; 0 is reported as a vacuous pass.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Write the report JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct AblateArgs {
    /// Training config (JSON); each variant reuses it with its own metric
    /// and embedding mode.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving one subdirectory per variant.
    #[arg(long, default_value = "runs/ablate")]
    pub out_dir: PathBuf,
    /// Evaluation episodes per variant.
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the comparison JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Serializes `value` as pretty JSON to `out` or stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

/// Training settings recovered from a checkpoint's metadata, used as eval
/// and inference defaults.
fn checkpoint_config(extra: &serde_json::Value) -> Option<TrainConfig> {
    serde_json::from_value(extra.get("config")?.clone()).ok()
}

fn hyper_from_config(cfg: Option<&TrainConfig>, extra: &serde_json::Value) -> EpisodeHyper {
    match cfg {
        Some(c) => c.hyper(),
        None => {
            // Fall back to defaults, trusting at least the stored metric.
            let kind = extra
                .get("metric_kind")
                .and_then(|v| serde_json::from_value::<MetricKind>(v.clone()).ok())
                .unwrap_or(MetricKind::Pearson);
            EpisodeHyper {
                metric: MetricConfig { kind, ..MetricConfig::default() },
                ..EpisodeHyper::default()
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args, cli.workers),
        Command::Eval(args) => cmd_eval(args, cli.workers),
        Command::Infer(args) => cmd_infer(args, cli.workers),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => cmd_ablate(args, cli.workers),
    }
}

fn cmd_train(args: TrainArgs, workers: Option<usize>) -> Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(metric) = &args.metric {
        cfg.metric_kind = metric.parse()?;
    }
    if args.no_mr {
        cfg.mr_enabled = false;
    }
    let opts = TrainOptions { out_dir: args.out_dir, resume: args.checkpoint, workers };
    let summary = crate::episodic::train(&cfg, &opts)?;
    emit(&summary, args.out.as_deref())
}

fn cmd_eval(args: EvalArgs, workers: Option<usize>) -> Result<()> {
    let (model, extra) = Model::load(&args.checkpoint)?;
    let cfg = checkpoint_config(&extra);
    let hyper = hyper_from_config(cfg.as_ref(), &extra);
    let dataset =
        ToyDataset::new(cfg.as_ref().map(|c| c.dataset.clone()).unwrap_or_default())?;
    let params = EvalParams {
        split: args.split.parse()?,
        way: args.way.or(cfg.as_ref().map(|c| c.way)).unwrap_or(3),
        shot: args.shot.or(cfg.as_ref().map(|c| c.shot)).unwrap_or(5),
        n_query: args.n_query.or(cfg.as_ref().map(|c| c.n_query)).unwrap_or(6),
        episodes: args.episodes,
        base_seed: args.seed,
        groups: args.groups,
        score_threshold: args.score_threshold,
        nms_iou: 0.5,
        hyper,
    };
    let result = with_workers(workers, || evaluate(&model, &dataset, &params))?;
    emit(&result, args.out.as_deref())
}

#[derive(Serialize)]
struct InferObject {
    class_id: usize,
    episode_class: Option<usize>,
    bbox: crate::toydata::BoxF,
}

#[derive(Serialize)]
struct InferScene {
    objects: Vec<InferObject>,
    detections: Vec<crate::eval::Detection>,
}

#[derive(Serialize)]
struct InferOutput {
    episode_seed: u64,
    split: String,
    way: usize,
    shot: usize,
    /// Dataset class ids behind episode classes 1..way.
    fg_classes: Vec<usize>,
    score_threshold: f64,
    inner_losses: Vec<f64>,
    scenes: Vec<InferScene>,
}

fn cmd_infer(args: InferArgs, workers: Option<usize>) -> Result<()> {
    let (model, extra) = Model::load(&args.checkpoint)?;
    let cfg = checkpoint_config(&extra);
    let hyper = hyper_from_config(cfg.as_ref(), &extra);
    let dataset =
        ToyDataset::new(cfg.as_ref().map(|c| c.dataset.clone()).unwrap_or_default())?;
    let split: Split = args.split.parse()?;
    let way = args.way.or(cfg.as_ref().map(|c| c.way)).unwrap_or(3);
    let shot = args.shot.or(cfg.as_ref().map(|c| c.shot)).unwrap_or(5);
    let n_query = args.n_query.or(cfg.as_ref().map(|c| c.n_query)).unwrap_or(6);

    let output = with_workers(workers, || -> Result<InferOutput> {
        let episode = sample_episode(&dataset, split, way, shot, n_query, args.seed)?;
        let prepared = prepare_episode(&model, &episode, &hyper)?;
        let dets = detect_prepared(
            &model,
            &dataset,
            &episode,
            &prepared,
            &hyper,
            args.score_threshold,
            0.5,
        )?;

        if let Some(path) = &args.embeddings {
            let mut rows = Vec::new();
            for proto in &prepared.prototypes {
                rows.push(EmbeddingRow {
                    episode: args.seed,
                    role: EmbeddingRole::SupportPrototype,
                    class_id: proto.class_id,
                    values: proto.vector.data().to_vec(),
                });
            }
            for query in &episode.queries {
                for proposal in &query.proposals {
                    let class = match label_proposal(
                        &proposal.bbox,
                        &query.scene.objects,
                        &query.object_labels,
                    ) {
                        ProposalLabel::Ignored => continue,
                        ProposalLabel::Background => 0,
                        ProposalLabel::Foreground { class, .. } => class,
                    };
                    let crop = dataset.crop_support(&query.scene.image, &proposal.bbox)?;
                    let features = model.backbone_forward(&crop)?;
                    let v = prepared.embedder.embed(&features)?;
                    rows.push(EmbeddingRow {
                        episode: args.seed,
                        role: EmbeddingRole::QueryRoi,
                        class_id: class,
                        values: v.data().to_vec(),
                    });
                }
            }
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, embeddings_to_table(&rows)?)?;
        }

        let scenes = episode
            .queries
            .iter()
            .zip(&dets.scenes)
            .map(|(q, d)| InferScene {
                objects: q
                    .scene
                    .objects
                    .iter()
                    .zip(&q.object_labels)
                    .map(|(o, l)| InferObject {
                        class_id: o.class_id,
                        episode_class: *l,
                        bbox: o.bbox,
                    })
                    .collect(),
                detections: d.clone(),
            })
            .collect();
        Ok(InferOutput {
            episode_seed: args.seed,
            split: args.split.clone(),
            way,
            shot,
            fg_classes: episode.fg_classes.clone(),
            score_threshold: args.score_threshold,
            inner_losses: dets.inner_losses,
            scenes,
        })
    })?;
    emit(&output, args.out.as_deref())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = crate::gradcheck::run_gradcheck(
        args.seed,
        args.trials,
        args.tolerance,
        crate::gradcheck::Corruption::None,
    )?;
    emit(&report, args.out.as_deref())?;
    if !report.passed {
        return Err(Error::Training("gradient audit failed; see the report above".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    variant: String,
    metric: MetricKind,
    reconstructor: bool,
    final_l_det: Option<f64>,
    ap50_mean: f64,
    ap50_std: f64,
    ap75_mean: f64,
    checkpoint: PathBuf,
}

fn cmd_ablate(args: AblateArgs, workers: Option<usize>) -> Result<()> {
    let mut base_cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        base_cfg.seed = seed;
    }
    let variants: [(&str, MetricKind, bool); 3] = [
        ("pearson-reconstructor", MetricKind::Pearson, true),
        ("cosine-reconstructor", MetricKind::Cosine, true),
        ("pearson-pooled", MetricKind::Pearson, false),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (name, metric, reconstructor) in variants {
        let mut cfg = base_cfg.clone();
        cfg.metric_kind = metric;
        cfg.mr_enabled = reconstructor;
        let dir = args.out_dir.join(name);
        log::info!("training variant {name}");
        let summary = crate::episodic::train(
            &cfg,
            &TrainOptions { out_dir: dir, resume: None, workers },
        )?;
        let (model, _) = Model::load(&summary.checkpoint)?;
        let dataset = ToyDataset::new(cfg.dataset.clone())?;
        let params = EvalParams {
            split: Split::Novel,
            way: cfg.way,
            shot: cfg.shot,
            n_query: cfg.n_query,
            episodes: args.episodes,
            base_seed: cfg.seed,
            groups: 5,
            score_threshold: 0.0,
            nms_iou: 0.5,
            hyper: cfg.hyper(),
        };
        let eval = with_workers(workers, || evaluate(&model, &dataset, &params))?;
        rows.push(AblateRow {
            variant: name.to_string(),
            metric,
            reconstructor,
            final_l_det: summary.final_l_det,
            ap50_mean: eval.ap50.mean,
            ap50_std: eval.ap50.std,
            ap75_mean: eval.ap75.mean,
            checkpoint: summary.checkpoint,
        });
    }
    emit(&rows, args.out.as_deref())
}
