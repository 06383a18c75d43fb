//! Detection, matching, and average-precision evaluation.
//!
//! Evaluation never touches parameters: models are taken by shared reference
//! throughout. An evaluation run splits its episode budget over several seed
//! groups; per-group means give a dispersion estimate across episode streams.

use serde::{Deserialize, Serialize};

use crate::episodic::{
    decode_box, prepare_episode, sample_episode, Episode, EpisodeHyper, PreparedEpisode,
};
use crate::error::{Error, Result};
use crate::metric::similarity_row_inference;
use crate::model::Model;
use crate::par::par_map;
use crate::rng::{self, tags};
use crate::toydata::{iou, BoxF, Split, ToyDataset};

/// One scored box. `class` is the episode-local foreground index (1-based;
/// background never becomes a detection).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxF,
    pub class: usize,
    pub score: f64,
}

/// Greedy non-maximum suppression for one class within one scene: keep boxes
/// in descending score order, dropping any box whose overlap with an already
/// kept box exceeds `iou_thr`. Ties keep their input order.
pub fn nms(detections: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        if kept.iter().all(|k| k.class != cand.class || iou(&k.bbox, &cand.bbox) <= iou_thr) {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Detections for every query scene of one episode, NMS already applied.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeDetections {
    pub scenes: Vec<Vec<Detection>>,
    pub inner_losses: Vec<f64>,
}

/// Runs the full detection pipeline on one episode without mutating the
/// model: adapt on supports, score and refine every proposal, keep
/// above-threshold foreground predictions, and suppress duplicates.
pub fn detect_episode(
    model: &Model,
    dataset: &ToyDataset,
    episode: &Episode,
    hyper: &EpisodeHyper,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<EpisodeDetections> {
    let prepared = prepare_episode(model, episode, hyper)?;
    detect_prepared(model, dataset, episode, &prepared, hyper, score_threshold, nms_iou)
}

/// Same as [`detect_episode`], reusing an already-adapted episode.
pub fn detect_prepared(
    model: &Model,
    dataset: &ToyDataset,
    episode: &Episode,
    prepared: &PreparedEpisode,
    hyper: &EpisodeHyper,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<EpisodeDetections> {
    let protos: Vec<&[f64]> = prepared.prototypes.iter().map(|p| p.vector.data()).collect();
    let img = dataset.params.image_size as f64;
    let mut scenes = Vec::with_capacity(episode.queries.len());
    for query in &episode.queries {
        let mut dets: Vec<Detection> = Vec::new();
        for proposal in &query.proposals {
            let crop = dataset.crop_support(&query.scene.image, &proposal.bbox)?;
            let features = model.backbone_forward(&crop)?;
            let v = prepared.embedder.embed(&features)?;
            let row = similarity_row_inference(v.data(), &protos, &hyper.metric, 0)?;
            let class = row.predicted_class;
            if class == 0 {
                continue;
            }
            let score = row.confidences[class];
            if score < score_threshold {
                continue;
            }
            let deltas = model.box_forward(&features)?;
            let d = [deltas.data()[0], deltas.data()[1], deltas.data()[2], deltas.data()[3]];
            let Some(bbox) = clamp_to_image(&decode_box(&proposal.bbox, &d), img) else {
                continue;
            };
            dets.push(Detection { bbox, class, score });
        }
        scenes.push(nms(&dets, nms_iou));
    }
    Ok(EpisodeDetections { scenes, inner_losses: prepared.inner_losses.clone() })
}

/// Intersects a box with the image square; `None` when nothing remains.
fn clamp_to_image(b: &BoxF, img: f64) -> Option<BoxF> {
    let x1 = b.x.max(0.0);
    let y1 = b.y.max(0.0);
    let x2 = b.x2().min(img);
    let y2 = b.y2().min(img);
    (x2 > x1 && y2 > y1).then(|| BoxF::new(x1, y1, x2 - x1, y2 - y1))
}

/// All-point interpolated average precision from (score, is-true-positive)
/// records. Stable-sorts by descending score, so equal scores keep insertion
/// order and any order-preserving score rescale leaves the result unchanged.
pub fn average_precision(records: &[(f64, bool)], n_ground_truth: usize) -> f64 {
    if n_ground_truth == 0 || records.is_empty() {
        return 0.0;
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(sorted.len());
    let mut recall = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, hit) in &sorted {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_ground_truth as f64);
    }
    // Interpolate: precision at recall r is the best precision at any
    // recall >= r; integrate over the recall increments.
    let mut best = 0.0_f64;
    let mut interp = vec![0.0; precision.len()];
    for i in (0..precision.len()).rev() {
        best = best.max(precision[i]);
        interp[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..interp.len() {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * interp[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Greedily matches one scene's detections of one class against that class's
/// ground-truth boxes: best unmatched overlap at or above `iou_thr` is a true
/// positive, everything else a false positive. Returns (score, tp) records.
fn match_scene_class(
    detections: &[Detection],
    gt_boxes: &[BoxF],
    iou_thr: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut taken = vec![false; gt_boxes.len()];
    let mut records = Vec::with_capacity(detections.len());
    for idx in order {
        let det = &detections[idx];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gt_boxes.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if v >= iou_thr && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        match best {
            Some((_, g)) => {
                taken[g] = true;
                records.push((det.score, true));
            }
            None => records.push((det.score, false)),
        }
    }
    records
}

/// Mean average precision over the episode's foreground classes at one IoU
/// threshold: detections pool across all query scenes into a single
/// precision-recall curve per class.
pub fn episode_map(episode: &Episode, detections: &EpisodeDetections, iou_thr: f64) -> f64 {
    let mut class_aps = Vec::new();
    for class in 1..episode.way {
        let mut records = Vec::new();
        let mut n_gt = 0usize;
        for (query, dets) in episode.queries.iter().zip(&detections.scenes) {
            let gt: Vec<BoxF> = query
                .scene
                .objects
                .iter()
                .zip(&query.object_labels)
                .filter(|(_, l)| **l == Some(class))
                .map(|(o, _)| o.bbox)
                .collect();
            n_gt += gt.len();
            let class_dets: Vec<Detection> =
                dets.iter().filter(|d| d.class == class).cloned().collect();
            records.extend(match_scene_class(&class_dets, &gt, iou_thr));
        }
        if n_gt > 0 {
            class_aps.push(average_precision(&records, n_gt));
        }
    }
    if class_aps.is_empty() {
        0.0
    } else {
        class_aps.iter().sum::<f64>() / class_aps.len() as f64
    }
}

/// Evaluation request.
#[derive(Debug, Clone)]
pub struct EvalParams {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub n_query: usize,
    /// Total episodes, divided across the seed groups.
    pub episodes: usize,
    pub base_seed: u64,
    pub groups: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub hyper: EpisodeHyper,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            split: Split::Novel,
            way: 3,
            shot: 5,
            n_query: 6,
            episodes: 100,
            base_seed: 0,
            groups: 5,
            score_threshold: 0.0,
            nms_iou: 0.5,
            hyper: EpisodeHyper::default(),
        }
    }
}

/// Mean and (population) standard deviation over seed-group means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub per_group: Vec<f64>,
}

fn group_stats(per_group: Vec<f64>) -> GroupStats {
    let n = per_group.len().max(1) as f64;
    let mean = per_group.iter().sum::<f64>() / n;
    let var = per_group.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    GroupStats { mean, std: var.sqrt(), per_group }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub split: String,
    pub way: usize,
    pub shot: usize,
    pub episodes_requested: usize,
    pub episodes_run: usize,
    pub episodes_skipped: usize,
    pub score_threshold: f64,
    /// Mean AP at IoU 0.5, aggregated over seed groups.
    pub ap50: GroupStats,
    /// Mean AP at IoU 0.75.
    pub ap75: GroupStats,
    /// Fraction of episodes whose adaptation loss ended below its start
    /// (absent for the pooled-embedding model).
    pub inner_loss_decreased: Option<f64>,
}

struct EpisodeOutcome {
    group: usize,
    ap50: f64,
    ap75: f64,
    inner_drop: Option<bool>,
}

/// Evaluates a trained model over seeded episode groups. The episode budget
/// is split as evenly as possible, earlier groups taking any remainder.
pub fn evaluate(model: &Model, dataset: &ToyDataset, params: &EvalParams) -> Result<EvalResult> {
    if params.groups == 0 || params.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one group and one episode".into()));
    }
    let mut jobs: Vec<(usize, u64)> = Vec::with_capacity(params.episodes);
    for g in 0..params.groups {
        let count = params.episodes / params.groups
            + usize::from(g < params.episodes % params.groups);
        let group_seed = rng::mix(params.base_seed.wrapping_add(g as u64), tags::EVAL_GROUP);
        for e in 0..count {
            jobs.push((g, rng::mix2(group_seed, tags::EPISODE, e as u64)));
        }
    }

    let outcomes: Vec<Result<EpisodeOutcome>> = par_map(&jobs, |&(group, seed)| {
        let episode =
            sample_episode(dataset, params.split, params.way, params.shot, params.n_query, seed)?;
        let dets = detect_episode(
            model,
            dataset,
            &episode,
            &params.hyper,
            params.score_threshold,
            params.nms_iou,
        )?;
        let inner_drop = (dets.inner_losses.len() >= 2)
            .then(|| dets.inner_losses.last().unwrap() < &dets.inner_losses[0]);
        Ok(EpisodeOutcome {
            group,
            ap50: episode_map(&episode, &dets, 0.5),
            ap75: episode_map(&episode, &dets, 0.75),
            inner_drop,
        })
    });

    let mut group_ap50 = vec![Vec::new(); params.groups];
    let mut group_ap75 = vec![Vec::new(); params.groups];
    let mut skipped = 0usize;
    let (mut drops, mut drop_total) = (0usize, 0usize);
    for outcome in outcomes {
        match outcome {
            Ok(o) => {
                group_ap50[o.group].push(o.ap50);
                group_ap75[o.group].push(o.ap75);
                if let Some(d) = o.inner_drop {
                    drop_total += 1;
                    drops += usize::from(d);
                }
            }
            Err(err) => {
                log::warn!("evaluation episode skipped: {err}");
                skipped += 1;
            }
        }
    }
    let episodes_run = params.episodes - skipped;
    if episodes_run == 0 {
        return Err(Error::Degenerate("every evaluation episode failed to sample".into()));
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let nonempty = |groups: &[Vec<f64>]| -> Vec<f64> {
        groups.iter().filter(|g| !g.is_empty()).map(mean).collect()
    };
    Ok(EvalResult {
        split: format!("{:?}", params.split).to_lowercase(),
        way: params.way,
        shot: params.shot,
        episodes_requested: params.episodes,
        episodes_run,
        episodes_skipped: skipped,
        score_threshold: params.score_threshold,
        ap50: group_stats(nonempty(&group_ap50)),
        ap75: group_stats(nonempty(&group_ap75)),
        inner_loss_decreased: (drop_total > 0).then(|| drops as f64 / drop_total as f64),
    })
}
