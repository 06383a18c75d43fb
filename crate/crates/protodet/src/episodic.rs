//! Episode construction and episodic training.
//!
//! An episode holds `way` classes: index 0 is always background, indices
//! `1..way` are foreground classes drawn from the requested split. Each class
//! gets `shot` support crops; each foreground class gets `n_query` query
//! scenes. A training step adapts the reconstructor on the supports, scores
//! every usable query proposal against the class prototypes, and applies one
//! SGD update to the shared parameters from the detection loss
//! `L_det = L_cls + lambda * L_reg`.
//!
//! Gradients reach the shared parameters along two routes: through the query
//! embeddings and, because prototypes are themselves functions of the
//! network, through the support embeddings. Both routes are first-order: the
//! adapted clone's gradients are applied to the shared reconstructor directly.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{build_prototypes, inner_adapt, InnerLoopConfig, Prototype};
use crate::metric::{
    classification_loss, loss_grad_sims, similarity_grad_prototype, similarity_grad_query,
    similarity_row, MetricConfig, MetricKind,
};
use crate::model::{BackboneCache, EmbedderCache, EpisodeEmbedder, Model};
use crate::par::{par_map, with_workers};
use crate::rng::{self, tags};
use crate::tensor::{maxpool2d_backward, sgd_step, MaxPoolCache, Tensor};
use crate::toydata::{iou, BoxF, DatasetParams, SceneSpec, Split, ToyDataset, ToyScene};

use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------------------
// Box regression targets.
// ---------------------------------------------------------------------------

/// Largest magnitude accepted for log-scale deltas when decoding, keeping
/// `exp` bounded for wild regressor outputs.
const MAX_LOG_DELTA: f64 = 4.0;

/// Encodes how to move `proposal` onto `target`: center offsets relative to
/// the proposal size and log scale ratios, `[dx, dy, dw, dh]`.
pub fn encode_box(proposal: &BoxF, target: &BoxF) -> Result<[f64; 4]> {
    if proposal.w <= 0.0 || proposal.h <= 0.0 || target.w <= 0.0 || target.h <= 0.0 {
        return Err(Error::Degenerate(format!(
            "cannot encode deltas between degenerate boxes {proposal:?} and {target:?}"
        )));
    }
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    Ok([
        (tcx - pcx) / proposal.w,
        (tcy - pcy) / proposal.h,
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
    ])
}

/// Applies `[dx, dy, dw, dh]` deltas to a proposal.
pub fn decode_box(proposal: &BoxF, deltas: &[f64; 4]) -> BoxF {
    let (pcx, pcy) = proposal.center();
    let dw = deltas[2].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA);
    let dh = deltas[3].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA);
    BoxF::from_center(
        pcx + deltas[0] * proposal.w,
        pcy + deltas[1] * proposal.h,
        proposal.w * dw.exp(),
        proposal.h * dh.exp(),
    )
}

/// Quadratic inside the unit interval, linear outside; continuous at 1.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

// ---------------------------------------------------------------------------
// Episodes.
// ---------------------------------------------------------------------------

/// One query scene with episode-local object labels and fixed proposals.
#[derive(Debug, Clone)]
pub struct QueryScene {
    pub scene: ToyScene,
    /// Episode-local class per object; `None` marks an object outside the
    /// episode's classes.
    pub object_labels: Vec<Option<usize>>,
    pub proposals: Vec<crate::toydata::Proposal>,
}

/// A self-contained few-shot task. Class index 0 is background.
#[derive(Debug, Clone)]
pub struct Episode {
    pub seed: u64,
    /// Total classes including background.
    pub way: usize,
    pub shot: usize,
    /// Dataset class ids behind episode classes `1..way`.
    pub fg_classes: Vec<usize>,
    /// Support crops per episode class, `[3, S, S]` each.
    pub support_crops: BTreeMap<usize, Vec<Tensor>>,
    pub queries: Vec<QueryScene>,
    /// Random relabeling used by the adaptation loop.
    pub label_perm: Vec<usize>,
}

/// Background support crops must overlap every object no more than this.
const BG_SUPPORT_MAX_IOU: f64 = 0.1;

/// Samples a complete episode from one split. All randomness derives from
/// `seed`, so the same seed always yields the bit-identical episode.
pub fn sample_episode(
    dataset: &ToyDataset,
    split: Split,
    way: usize,
    shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode> {
    if way < 2 {
        return Err(Error::Config(format!("an episode needs at least 2 classes, got way={way}")));
    }
    if shot == 0 || n_query == 0 {
        return Err(Error::Config("shot and per-class query count must be positive".into()));
    }
    let pool = dataset.classes_of(split);
    let n_fg = way - 1;
    if pool.len() < n_fg {
        return Err(Error::Sampling(format!(
            "split {split:?} holds {} classes but the episode needs {n_fg} foreground classes",
            pool.len()
        )));
    }
    let mut r = rng::rng_from(rng::mix(seed, tags::EPISODE));
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(&mut r);
    let fg_classes: Vec<usize> = shuffled[..n_fg].to_vec();

    let mut support_crops: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();

    // Foreground supports: single-object scenes cropped at the true box.
    for (slot, &class) in fg_classes.iter().enumerate() {
        let mut crops = Vec::with_capacity(shot);
        for _ in 0..shot {
            let spec =
                SceneSpec { class_pool: &[class], must_include: Some(class), n_objects: Some(1) };
            let scene = dataset.render_scene(&spec, r.random())?;
            crops.push(dataset.crop_support(&scene.image, &scene.objects[0].bbox)?);
        }
        support_crops.insert(slot + 1, crops);
    }

    // Background supports: crops that barely overlap any object.
    let mut bg_crops = Vec::with_capacity(shot);
    for _ in 0..shot {
        let spec = SceneSpec { class_pool: &fg_classes, must_include: None, n_objects: None };
        let scene = dataset.render_scene(&spec, r.random())?;
        let img = dataset.params.image_size as f64;
        let mut found = None;
        for _ in 0..60 {
            let w = r.random_range(10.0..40.0_f64.min(img));
            let h = r.random_range(10.0..40.0_f64.min(img));
            let bbox = BoxF::new(
                r.random_range(0.0..(img - w)),
                r.random_range(0.0..(img - h)),
                w,
                h,
            );
            let overlap =
                scene.objects.iter().map(|o| iou(&bbox, &o.bbox)).fold(0.0, f64::max);
            if overlap <= BG_SUPPORT_MAX_IOU {
                found = Some(bbox);
                break;
            }
        }
        let bbox = found.ok_or_else(|| {
            Error::Sampling("could not place a background support crop".into())
        })?;
        bg_crops.push(dataset.crop_support(&scene.image, &bbox)?);
    }
    support_crops.insert(0, bg_crops);

    // Query scenes: every foreground class appears in `n_query` scenes; other
    // objects in those scenes come from the episode's foreground pool.
    let mut queries = Vec::with_capacity(n_fg * n_query);
    for (slot, &class) in fg_classes.iter().enumerate() {
        let _ = slot;
        for _ in 0..n_query {
            let spec =
                SceneSpec { class_pool: &fg_classes, must_include: Some(class), n_objects: None };
            let scene = dataset.render_scene(&spec, r.random())?;
            let object_labels = scene
                .objects
                .iter()
                .map(|o| fg_classes.iter().position(|&c| c == o.class_id).map(|i| i + 1))
                .collect();
            let proposals = dataset.make_proposals(&scene, r.random());
            queries.push(QueryScene { scene, object_labels, proposals });
        }
    }

    let mut label_perm: Vec<usize> = (0..way).collect();
    label_perm.shuffle(&mut r);

    Ok(Episode { seed, way, shot, fg_classes, support_crops, queries, label_perm })
}

// ---------------------------------------------------------------------------
// Proposal labeling.
// ---------------------------------------------------------------------------

/// Overlap at or above which a proposal takes an object's class.
pub const FG_IOU: f64 = 0.5;
/// Overlap below which a proposal counts as background; between the two
/// thresholds the proposal is ambiguous and skipped.
pub const BG_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub enum ProposalLabel {
    Foreground { class: usize, gt: BoxF },
    Background,
    Ignored,
}

/// Assigns an episode-local label to a proposal by its best overlap.
/// Objects outside the episode (label `None`) can only force `Ignored`.
pub fn label_proposal(
    bbox: &BoxF,
    objects: &[crate::toydata::SceneObject],
    object_labels: &[Option<usize>],
) -> ProposalLabel {
    let mut best_labeled: Option<(f64, usize)> = None;
    let mut best_unlabeled = 0.0_f64;
    for (obj, label) in objects.iter().zip(object_labels) {
        let v = iou(bbox, &obj.bbox);
        match label {
            Some(idx) => {
                if best_labeled.is_none_or(|(b, _)| v > b) {
                    best_labeled = Some((v, *idx));
                }
                let _ = idx;
            }
            None => best_unlabeled = best_unlabeled.max(v),
        }
    }
    let (best_iou, best_obj) = match best_labeled {
        Some((v, i)) => (v, Some(i)),
        None => (0.0, None),
    };
    if best_unlabeled >= BG_IOU && best_unlabeled > best_iou {
        return ProposalLabel::Ignored;
    }
    if best_iou >= FG_IOU {
        let class = best_obj.expect("labeled best exists when iou > 0");
        // Recover the matched box (max IoU among objects with this label).
        let gt = objects
            .iter()
            .zip(object_labels)
            .filter(|(_, l)| **l == Some(class))
            .map(|(o, _)| (iou(bbox, &o.bbox), o.bbox))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, b)| b)
            .expect("class has at least one object");
        ProposalLabel::Foreground { class, gt }
    } else if best_iou < BG_IOU {
        ProposalLabel::Background
    } else {
        ProposalLabel::Ignored
    }
}

// ---------------------------------------------------------------------------
// Episode preparation shared by training and evaluation.
// ---------------------------------------------------------------------------

/// Hyperparameters governing a single episode's processing.
#[derive(Debug, Clone)]
pub struct EpisodeHyper {
    pub metric: MetricConfig,
    pub meta_lr: f64,
    pub inner_steps: usize,
    pub lambda: f64,
    /// Foreground confidence (1 - background confidence) a matched proposal
    /// must exceed before its box regression contributes.
    pub fg_gate: f64,
}

impl Default for EpisodeHyper {
    fn default() -> Self {
        EpisodeHyper {
            metric: MetricConfig::default(),
            meta_lr: 0.01,
            inner_steps: 30,
            lambda: 1.0,
            fg_gate: 0.7,
        }
    }
}

struct SupportForward {
    maps: BTreeMap<usize, Vec<Tensor>>,
    caches: BTreeMap<usize, Vec<(BackboneCache, MaxPoolCache)>>,
}

fn forward_supports(model: &Model, episode: &Episode) -> Result<SupportForward> {
    let mut maps = BTreeMap::new();
    let mut caches = BTreeMap::new();
    for (&class, crops) in &episode.support_crops {
        let mut class_maps = Vec::with_capacity(crops.len());
        let mut class_caches = Vec::with_capacity(crops.len());
        for crop in crops {
            let (features, bb_cache) = model.backbone_forward_with_cache(crop)?;
            let (pooled, pool_cache) = Model::pool_support(&features)?;
            class_maps.push(pooled);
            class_caches.push((bb_cache, pool_cache));
        }
        maps.insert(class, class_maps);
        caches.insert(class, class_caches);
    }
    Ok(SupportForward { maps, caches })
}

/// Adapts the reconstructor on the supports (no-op for the pooled fallback)
/// and returns the episode's embedder plus the adaptation loss trace.
fn make_embedder(
    model: &Model,
    maps: &BTreeMap<usize, Vec<Tensor>>,
    episode: &Episode,
    hyper: &EpisodeHyper,
) -> Result<(EpisodeEmbedder, Vec<f64>)> {
    match model.mr.as_ref() {
        Some(mr) => {
            let cfg = InnerLoopConfig {
                meta_lr: hyper.meta_lr,
                steps: hyper.inner_steps,
                label_perm: episode.label_perm.clone(),
                head_seed: rng::mix(episode.seed, tags::HEAD_INIT),
                epsilon: hyper.metric.epsilon,
            };
            let res = inner_adapt(mr, maps, &cfg)?;
            Ok((EpisodeEmbedder::Adapted(res.adapted), res.losses))
        }
        None => Ok((EpisodeEmbedder::Pooling, Vec::new())),
    }
}

/// Everything needed to score queries: the adapted embedder and the class
/// prototypes, in episode class order.
pub struct PreparedEpisode {
    pub embedder: EpisodeEmbedder,
    pub prototypes: Vec<Prototype>,
    pub inner_losses: Vec<f64>,
}

/// Forward-only episode preparation, used by evaluation and inference.
pub fn prepare_episode(
    model: &Model,
    episode: &Episode,
    hyper: &EpisodeHyper,
) -> Result<PreparedEpisode> {
    let sup = forward_supports(model, episode)?;
    let (embedder, inner_losses) = make_embedder(model, &sup.maps, episode, hyper)?;
    let mut embeds: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for (&class, class_maps) in &sup.maps {
        let mut list = Vec::with_capacity(class_maps.len());
        for m in class_maps {
            list.push(embedder.embed(m)?);
        }
        embeds.insert(class, list);
    }
    let prototypes = build_prototypes(&embeds, hyper.metric.epsilon)?;
    Ok(PreparedEpisode { embedder, prototypes, inner_losses })
}

// ---------------------------------------------------------------------------
// The outer training step.
// ---------------------------------------------------------------------------

/// Selects which gradient routes contribute; losses are always computed.
/// The query route covers the query-embedding chain and the box head; the
/// support route covers gradients flowing through the prototypes.
#[derive(Debug, Clone, Copy)]
pub struct PathMask {
    pub query_path: bool,
    pub support_path: bool,
}

impl Default for PathMask {
    fn default() -> Self {
        PathMask { query_path: true, support_path: true }
    }
}

#[derive(Debug, Clone)]
pub struct OuterStepOptions {
    pub hyper: EpisodeHyper,
    pub lr: f64,
    pub path: PathMask,
    /// When false, gradients are accumulated but no update is applied.
    pub apply_update: bool,
}

/// Loss summary of one outer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_det: f64,
    /// Proposals that received a class label (background or foreground).
    pub n_rois: usize,
    /// Foreground proposals confident enough to train the box head.
    pub n_gated: usize,
    /// Adaptation losses, empty when the reconstructor is disabled.
    pub inner_losses: Vec<f64>,
}

/// Per-scene gradient work: everything a query scene contributes.
struct SceneWork {
    acc_cls: Model,
    acc_reg: Model,
    emb: EpisodeEmbedder,
    /// Unnormalized classification-loss gradient per prototype.
    proto_grads: Vec<Vec<f64>>,
    sum_cls: f64,
    n_rois: usize,
    sum_reg: f64,
    n_gated: usize,
}

fn scene_pass(
    model: &Model,
    dataset: &ToyDataset,
    query: &QueryScene,
    embedder: &EpisodeEmbedder,
    protos: &[Vec<f64>],
    opts: &OuterStepOptions,
) -> Result<SceneWork> {
    let dim = protos[0].len();
    let mut w = SceneWork {
        acc_cls: { let mut m = model.clone(); m.zero_grads(); m },
        acc_reg: { let mut m = model.clone(); m.zero_grads(); m },
        emb: { let mut e = embedder.clone(); e.zero_grads(); e },
        proto_grads: vec![vec![0.0; dim]; protos.len()],
        sum_cls: 0.0,
        n_rois: 0,
        sum_reg: 0.0,
        n_gated: 0,
    };
    let proto_refs: Vec<&[f64]> = protos.iter().map(|p| p.as_slice()).collect();
    for proposal in &query.proposals {
        let label = label_proposal(&proposal.bbox, &query.scene.objects, &query.object_labels);
        let (class, fg_gt) = match label {
            ProposalLabel::Ignored => continue,
            ProposalLabel::Background => (0, None),
            ProposalLabel::Foreground { class, gt } => (class, Some(gt)),
        };
        let crop = dataset.crop_support(&query.scene.image, &proposal.bbox)?;
        let (features, bb_cache) = model.backbone_forward_with_cache(&crop)?;
        let (v, emb_cache) = w.emb.embed_with_cache(&features)?;
        let row = similarity_row(v.data(), &proto_refs, &opts.hyper.metric)?;
        w.sum_cls += classification_loss(&row.confidences, class)?;
        w.n_rois += 1;

        let g_sims = loss_grad_sims(&row.confidences, class, opts.hyper.metric.alpha)?;
        if opts.path.query_path {
            let mut grad_v = vec![0.0; dim];
            for (n, p) in protos.iter().enumerate() {
                let gq = similarity_grad_query(v.data(), p, &opts.hyper.metric)?;
                for (a, b) in grad_v.iter_mut().zip(&gq) {
                    *a += g_sims[n] * b;
                }
            }
            let grad_map =
                w.emb.embed_backward(&Tensor::new(vec![dim], grad_v)?, &emb_cache)?;
            w.acc_cls.backbone_backward(&grad_map, &bb_cache)?;
        }
        if opts.path.support_path {
            for (n, p) in protos.iter().enumerate() {
                let gp = similarity_grad_prototype(v.data(), p, &opts.hyper.metric)?;
                for (a, b) in w.proto_grads[n].iter_mut().zip(&gp) {
                    *a += g_sims[n] * b;
                }
            }
        }

        // Box refinement: matched proposals that the classifier already
        // considers confidently foreground.
        if let Some(gt) = fg_gt {
            let fg_conf = 1.0 - row.confidences[0];
            if fg_conf > opts.hyper.fg_gate {
                let (deltas, box_cache) = model.box_forward_with_cache(&features)?;
                let target = encode_box(&proposal.bbox, &gt)?;
                let mut grad_deltas = vec![0.0; 4];
                for i in 0..4 {
                    let x = deltas.data()[i] - target[i];
                    w.sum_reg += smooth_l1(x);
                    grad_deltas[i] = smooth_l1_grad(x);
                }
                w.n_gated += 1;
                if opts.path.query_path {
                    let grad_map = w
                        .acc_reg
                        .box_backward(&Tensor::new(vec![4], grad_deltas)?, &box_cache)?;
                    w.acc_reg.backbone_backward(&grad_map, &bb_cache)?;
                }
            }
        }
    }
    Ok(w)
}

/// One episodic training step: adapt on supports, score query proposals,
/// accumulate both gradient routes, and (optionally) update the parameters.
/// On error the parameters are unchanged but gradient buffers may be dirty;
/// callers that continue must call [`Model::zero_grads`].
pub fn outer_step(
    model: &mut Model,
    dataset: &ToyDataset,
    episode: &Episode,
    opts: &OuterStepOptions,
) -> Result<StepReport> {
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::Config(format!("outer learning rate must be >= 0, got {}", opts.lr)));
    }
    model.zero_grads();

    // Supports: forward with caches, adapt, build prototypes with caches.
    let sup = forward_supports(model, episode)?;
    let (mut embedder, inner_losses) = make_embedder(model, &sup.maps, episode, &opts.hyper)?;
    embedder.zero_grads();
    let mut proto_embeds: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    let mut proto_caches: BTreeMap<usize, Vec<EmbedderCache>> = BTreeMap::new();
    for (&class, class_maps) in &sup.maps {
        let mut embeds = Vec::with_capacity(class_maps.len());
        let mut caches = Vec::with_capacity(class_maps.len());
        for m in class_maps {
            let (e, cache) = embedder.embed_with_cache(m)?;
            embeds.push(e);
            caches.push(cache);
        }
        proto_embeds.insert(class, embeds);
        proto_caches.insert(class, caches);
    }
    let prototypes = build_prototypes(&proto_embeds, opts.hyper.metric.epsilon)?;
    let protos: Vec<Vec<f64>> = prototypes.iter().map(|p| p.vector.data().to_vec()).collect();

    // Query scenes in parallel; fold the work in scene order so the result
    // is identical however many workers run.
    let works: Vec<Result<SceneWork>> = {
        let model_ref: &Model = model;
        par_map(&episode.queries, |q| {
            scene_pass(model_ref, dataset, q, &embedder, &protos, opts)
        })
    };
    let dim = protos[0].len();
    let mut acc_cls = model.clone();
    acc_cls.zero_grads();
    let mut acc_reg = model.clone();
    acc_reg.zero_grads();
    let mut emb_acc = embedder.clone();
    emb_acc.zero_grads();
    let mut proto_grads = vec![vec![0.0; dim]; protos.len()];
    let (mut sum_cls, mut n_rois, mut sum_reg, mut n_gated) = (0.0, 0usize, 0.0, 0usize);
    for work in works {
        let w = work?;
        acc_cls.absorb_grads(&w.acc_cls)?;
        acc_reg.absorb_grads(&w.acc_reg)?;
        emb_acc.absorb_grads(&w.emb)?;
        for (total, part) in proto_grads.iter_mut().zip(&w.proto_grads) {
            for (a, b) in total.iter_mut().zip(part) {
                *a += b;
            }
        }
        sum_cls += w.sum_cls;
        n_rois += w.n_rois;
        sum_reg += w.sum_reg;
        n_gated += w.n_gated;
    }
    if n_rois == 0 {
        return Err(Error::Degenerate("episode produced no usable query proposals".into()));
    }

    // Normalize: classification averages over labeled proposals, regression
    // over gated foreground proposals.
    let inv_r = 1.0 / n_rois as f64;
    acc_cls.scale_grads(inv_r);
    emb_acc.scale_grads(inv_r);
    let l_cls = sum_cls * inv_r;
    let l_reg = if n_gated > 0 { sum_reg / n_gated as f64 } else { 0.0 };
    if n_gated > 0 {
        acc_reg.scale_grads(opts.hyper.lambda / n_gated as f64);
    } else {
        acc_reg.zero_grads();
    }

    // Support route: spread each prototype's (normalized) gradient over its
    // supports, then back through the embedder, the pooling, and the backbone.
    if opts.path.support_path {
        for (slot, (class, caches)) in proto_caches.iter().enumerate() {
            let k = caches.len() as f64;
            let seed: Vec<f64> = proto_grads[slot].iter().map(|g| g * inv_r / k).collect();
            let seed = Tensor::new(vec![dim], seed)?;
            for (j, emb_cache) in caches.iter().enumerate() {
                let grad_map = emb_acc.embed_backward(&seed, emb_cache)?;
                let (_, pool_cache) = &sup.caches[class][j];
                let grad_features = maxpool2d_backward(&grad_map, pool_cache)?;
                let (bb_cache, _) = &sup.caches[class][j];
                acc_cls.backbone_backward(&grad_features, bb_cache)?;
            }
        }
    }

    // Merge both routes into the shared parameter gradients. The adapted
    // clone's gradients transfer to the shared reconstructor as-is.
    model.absorb_grads(&acc_cls)?;
    model.absorb_grads(&acc_reg)?;
    if let (Some(mr), EpisodeEmbedder::Adapted(a)) = (model.mr.as_mut(), &emb_acc) {
        mr.conv1.absorb_grads(&a.conv1)?;
        mr.conv2.absorb_grads(&a.conv2)?;
    }

    let l_det = l_cls + opts.hyper.lambda * l_reg;
    if opts.apply_update {
        sgd_step(model.params_mut(), opts.lr)?;
    }
    Ok(StepReport { l_cls, l_reg, l_det, n_rois, n_gated, inner_losses })
}

// ---------------------------------------------------------------------------
// Training configuration and loop.
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}
fn default_fg_gate() -> f64 {
    0.7
}
fn default_epsilon() -> f64 {
    1e-12
}

/// Full training recipe. The required fields are the experiment identity;
/// the defaulted ones rarely move.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Episode classes including background (so 3 means 2 foreground).
    pub way: usize,
    pub shot: usize,
    /// Query scenes per foreground class.
    pub n_query: usize,
    /// Softmax temperature on similarities.
    pub alpha: f64,
    /// Adaptation-loop learning rate.
    pub meta_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    /// Weight of the box-regression loss.
    pub lambda: f64,
    /// Step at which the outer learning rate drops by 10x.
    pub decay_step: usize,
    pub epochs: usize,
    /// Steps per epoch.
    pub iters: usize,
    pub seed: u64,
    pub metric_kind: MetricKind,
    pub mr_enabled: bool,
    #[serde(default = "default_true")]
    pub support_path_grad: bool,
    #[serde(default = "default_fg_gate")]
    pub fg_gate: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub dataset: DatasetParams,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config("way must be at least 2 (background plus one class)".into()));
        }
        if self.shot == 0 || self.n_query == 0 {
            return Err(Error::Config("shot and n_query must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (name, v) in
            [("meta_lr", self.meta_lr), ("outer_lr", self.outer_lr), ("lambda", self.lambda)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.epochs == 0 || self.iters == 0 {
            return Err(Error::Config("epochs and iters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_gate) {
            return Err(Error::Config(format!("fg_gate must lie in [0, 1], got {}", self.fg_gate)));
        }
        if self.epsilon <= 0.0 || self.epsilon.is_nan() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hyper(&self) -> EpisodeHyper {
        EpisodeHyper {
            metric: MetricConfig {
                alpha: self.alpha,
                epsilon: self.epsilon,
                kind: self.metric_kind,
            },
            meta_lr: self.meta_lr,
            inner_steps: self.inner_steps,
            lambda: self.lambda,
            fg_gate: self.fg_gate,
        }
    }

    /// Learning rate at a given global step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.decay_step {
            self.outer_lr * 0.1
        } else {
            self.outer_lr
        }
    }

    /// The episode seed for a global step; stateless so resumed runs see the
    /// exact same episode stream.
    pub fn episode_seed(&self, step: usize) -> u64 {
        rng::mix2(self.seed, tags::EPISODE, step as u64)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_det: f64,
    pub lr: f64,
    pub episode_seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Worker thread count; `None` uses the default pool.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    /// Last completed global step.
    pub final_step: usize,
    pub skipped_episodes: usize,
    pub final_l_det: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn checkpoint_extra(cfg: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({
        "step": step,
        "metric_kind": cfg.metric_kind,
        "mr_enabled": cfg.mr_enabled,
        "config": cfg,
    })
}

/// Runs (or resumes) the episodic training loop, writing per-step metrics and
/// per-epoch checkpoints into `out_dir`.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = ToyDataset::new(cfg.dataset.clone())?;
    std::fs::create_dir_all(&opts.out_dir)?;

    let (mut model, start_step) = match &opts.resume {
        None => (Model::new(cfg.seed, cfg.mr_enabled), 0usize),
        Some(path) => {
            let (model, extra) = Model::load(path)?;
            if extra["mr_enabled"].as_bool() != Some(cfg.mr_enabled) {
                return Err(Error::Config(
                    "checkpoint embedding mode does not match the config".into(),
                ));
            }
            if extra["metric_kind"] != serde_json::json!(cfg.metric_kind) {
                return Err(Error::Config(
                    "checkpoint similarity metric does not match the config".into(),
                ));
            }
            let step = extra["step"].as_u64().ok_or_else(|| {
                Error::Checkpoint("checkpoint carries no step counter to resume from".into())
            })? as usize;
            (model, step + 1)
        }
    };

    let metrics_path = opts.out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(if start_step == 0 {
        std::fs::File::create(&metrics_path)?
    } else {
        std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    });

    let total = cfg.epochs * cfg.iters;
    let hyper = cfg.hyper();
    let mut skipped = 0usize;
    let mut last_l_det = None;
    let mut steps_run = 0usize;

    with_workers(opts.workers, || -> Result<()> {
        for step in start_step..total {
            let lr = cfg.lr_at(step);
            let episode_seed = cfg.episode_seed(step);
            let step_opts = OuterStepOptions {
                hyper: hyper.clone(),
                lr,
                path: PathMask {
                    query_path: true,
                    support_path: cfg.support_path_grad,
                },
                apply_update: true,
            };
            let outcome = sample_episode(
                &dataset,
                Split::Base,
                cfg.way,
                cfg.shot,
                cfg.n_query,
                episode_seed,
            )
            .and_then(|episode| outer_step(&mut model, &dataset, &episode, &step_opts));
            match outcome {
                Ok(report) => {
                    last_l_det = Some(report.l_det);
                    let record = MetricsRecord {
                        step,
                        l_cls: report.l_cls,
                        l_reg: report.l_reg,
                        l_det: report.l_det,
                        lr,
                        episode_seed,
                    };
                    serde_json::to_writer(&mut metrics, &record)?;
                    metrics.write_all(b"\n")?;
                }
                Err(err) => {
                    log::warn!("step {step}: episode skipped: {err}");
                    model.zero_grads();
                    skipped += 1;
                }
            }
            steps_run += 1;
            if (step + 1) % cfg.iters == 0 {
                let epoch = (step + 1) / cfg.iters;
                let path = opts.out_dir.join(format!("checkpoint_ep{epoch:03}.json"));
                model.save(&path, checkpoint_extra(cfg, step))?;
            }
        }
        Ok(())
    })?;
    metrics.flush()?;

    let final_step = total.saturating_sub(1);
    let final_path = opts.out_dir.join("checkpoint_final.json");
    model.save(&final_path, checkpoint_extra(cfg, final_step))?;
    Ok(TrainSummary {
        steps_run,
        final_step,
        skipped_episodes: skipped,
        final_l_det: last_l_det,
        checkpoint: final_path,
        metrics: metrics_path,
    })
}
