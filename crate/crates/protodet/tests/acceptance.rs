//! Release gate: eight numbered checks that qualify a build, printed one
//! PASS/FAIL line each. Run with `--nocapture` to watch progress:
//!
//! ```text
//! cargo test -p protodet --test acceptance -- --nocapture
//! ```
//!
//! Checks 5–7 need the three model variants trained on the full schedule
//! (30 epochs x 100 steps, roughly 15 minutes each on one core). The trained
//! checkpoints are cached under the target directory and revalidated against
//! the exact training config, so only the first run pays that cost; delete
//! the cache directory to force retraining.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protodet::episodic::{
    label_proposal, prepare_episode, sample_episode, train, EpisodeHyper, ProposalLabel,
    TrainConfig, TrainOptions,
};
use protodet::eval::{evaluate, EvalParams, EvalResult};
use protodet::metric::{
    classification_loss, cosine_similarity, loss_grad_sims, pearson_grad_prototype,
    pearson_grad_query, pearson_similarity, temperature_softmax,
};
use protodet::model::Model;
use protodet::rng::rng_from;
use protodet::tensor::{conv2d_forward, LayerParams, Tensor};
use protodet::toydata::{DatasetParams, Split, ToyDataset};
use rand::Rng;

// Every tolerance and threshold the gate enforces, in one place.

/// Step size for central finite differences.
const FD_EPS: f64 = 1e-5;
/// Maximum relative disagreement between analytic and numeric gradients.
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative gradient error: central differences carry
/// about 1e-11 of absolute noise, so below this scale a relative comparison
/// would measure roundoff, not gradient error.
const GRAD_FLOOR: f64 = 1e-6;
/// Shift/scale invariance slack for the correlation metric.
const INVARIANCE_TOL: f64 = 1e-9;
/// Agreement required between an implementation and its independent oracle.
const ORACLE_TOL: f64 = 1e-12;
/// Fraction of episodes whose adaptation loss must end below its start.
const ADAPT_DECREASE_MIN: f64 = 0.95;
/// Required gap between within-class and cross-class prototype similarity.
const CLUSTER_MARGIN_MIN: f64 = 0.1;
/// Detection quality floor for the full model on unseen classes.
const AP50_MIN: f64 = 0.80;
/// Wall-clock budgets (seconds) for the checks that carry one.
const BUDGET_GRADIENTS: f64 = 60.0;
const BUDGET_INVARIANCE: f64 = 10.0;
const BUDGET_ADAPTATION: f64 = 300.0;
const BUDGET_VARIANTS: f64 = 7200.0;

type Verdict = Result<String, String>;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(GRAD_FLOOR)
}

fn gaussian(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(rand_distr::StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// 1. Composed classification gradient vs central finite differences.
// ---------------------------------------------------------------------------

fn check_gradients() -> Verdict {
    let started = Instant::now();
    let alpha = 10.0;
    let eps = 1e-12;
    let mut r = rng_from(0xACCE_9701);
    let mut draws = 0usize;
    let mut max_err = 0.0_f64;

    // Loss of one query against C prototypes under correlation + softmax + CE.
    let loss_of = |query: &[f64], protos: &[Vec<f64>], target: usize| -> f64 {
        let sims: Vec<f64> = protos
            .iter()
            .map(|p| pearson_similarity(query, p, eps).expect("non-degenerate draw"))
            .collect();
        let conf = temperature_softmax(&sims, alpha).unwrap();
        classification_loss(&conf, target).unwrap()
    };

    for &dim in &[8usize, 32, 128] {
        for _ in 0..400 {
            draws += 1;
            let query = gaussian(&mut r, dim);
            let protos: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut r, dim)).collect();
            let target = r.random_range(0..3);

            let sims: Vec<f64> = protos
                .iter()
                .map(|p| pearson_similarity(&query, p, eps).unwrap())
                .collect();
            let conf = temperature_softmax(&sims, alpha).unwrap();
            let gsims = loss_grad_sims(&conf, target, alpha).unwrap();

            // Analytic gradient with respect to the query, probed coordinates.
            let dquery: Vec<Vec<f64>> = protos
                .iter()
                .map(|p| pearson_grad_query(&query, p, eps).unwrap())
                .collect();
            for _ in 0..3 {
                let i = r.random_range(0..dim);
                let analytic: f64 = (0..3).map(|c| gsims[c] * dquery[c][i]).sum();
                let mut probe = query.clone();
                probe[i] = query[i] + FD_EPS;
                let hi = loss_of(&probe, &protos, target);
                probe[i] = query[i] - FD_EPS;
                let lo = loss_of(&probe, &protos, target);
                max_err = max_err.max(rel_err(analytic, (hi - lo) / (2.0 * FD_EPS)));
            }

            // And with respect to one prototype.
            let c = r.random_range(0..3);
            let dproto = pearson_grad_prototype(&query, &protos[c], eps).unwrap();
            for _ in 0..2 {
                let i = r.random_range(0..dim);
                let analytic = gsims[c] * dproto[i];
                let mut moved = protos.clone();
                moved[c][i] = protos[c][i] + FD_EPS;
                let hi = loss_of(&query, &moved, target);
                moved[c][i] = protos[c][i] - FD_EPS;
                let lo = loss_of(&query, &moved, target);
                max_err = max_err.max(rel_err(analytic, (hi - lo) / (2.0 * FD_EPS)));
            }
        }
    }

    let secs = started.elapsed().as_secs_f64();
    let detail =
        format!("max rel err {max_err:.2e} over {draws} draws at dims 8/32/128 ({secs:.1}s)");
    if max_err >= GRAD_TOL {
        return Err(format!("{detail}; tolerance {GRAD_TOL:.0e}"));
    }
    if secs >= BUDGET_GRADIENTS {
        return Err(format!("{detail}; budget {BUDGET_GRADIENTS}s"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 2. Shift/scale invariance of the correlation metric, with a witness that
//    plain cosine lacks the shift half.
// ---------------------------------------------------------------------------

fn check_invariance() -> Verdict {
    let started = Instant::now();
    let eps = 1e-12;
    let mut r = rng_from(0xACCE_9702);
    let mut max_dev = 0.0_f64;
    for _ in 0..1000 {
        let dim = r.random_range(3..64);
        let v = gaussian(&mut r, dim);
        let s = gaussian(&mut r, dim);
        let a = r.random_range(0.1..10.0);
        let b = r.random_range(-5.0..5.0);
        let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let base = pearson_similarity(&v, &s, eps).unwrap();
        let transformed = pearson_similarity(&moved, &s, eps).unwrap();
        max_dev = max_dev.max((base - transformed).abs());
    }
    if max_dev >= INVARIANCE_TOL {
        return Err(format!(
            "correlation moved by {max_dev:.2e} under positive affine rescaling (limit {INVARIANCE_TOL:.0e})"
        ));
    }

    // A shifted pair: cosine tells them apart, correlation cannot.
    let v1 = [1.0, 2.0, 3.0];
    let v2 = [2.0, 3.0, 4.0]; // v1 + 1
    let s = [1.0, 2.0, 4.0];
    let cos1 = cosine_similarity(&v1, &s, eps).unwrap();
    let cos2 = cosine_similarity(&v2, &s, eps).unwrap();
    let pr1 = pearson_similarity(&v1, &s, eps).unwrap();
    let pr2 = pearson_similarity(&v2, &s, eps).unwrap();
    if (cos1 - 0.9914601339836673).abs() > 1e-12 || (cos2 - 0.9725290781677293).abs() > 1e-12 {
        return Err(format!("cosine witness drifted: {cos1:.16} / {cos2:.16}"));
    }
    if (pr1 - 0.9819805060619656).abs() > 1e-12 || (pr1 - pr2).abs() > 1e-12 {
        return Err(format!("correlation witness drifted: {pr1:.16} / {pr2:.16}"));
    }

    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "1000 affine draws within {max_dev:.2e}; witness cos {cos1:.5}/{cos2:.5}, corr {pr1:.5} both ({secs:.1}s)"
    );
    if secs >= BUDGET_INVARIANCE {
        return Err(format!("{detail}; budget {BUDGET_INVARIANCE}s"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 3. Implementations vs independent in-test oracles.
// ---------------------------------------------------------------------------

/// Textbook two-pass correlation: covariance over the product of the two
/// standard deviations, each with explicit 1/n normalization.
fn correlation_oracle(v: &[f64], s: &[f64]) -> f64 {
    let n = v.len() as f64;
    let vm = v.iter().sum::<f64>() / n;
    let sm = s.iter().sum::<f64>() / n;
    let cov = v.iter().zip(s).map(|(a, b)| (a - vm) * (b - sm)).sum::<f64>() / n;
    let sv = (v.iter().map(|a| (a - vm) * (a - vm)).sum::<f64>() / n).sqrt();
    let ss = (s.iter().map(|b| (b - sm) * (b - sm)).sum::<f64>() / n).sqrt();
    cov / (sv * ss)
}

/// Direct seven-loop convolution with zero padding.
fn conv_oracle(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let out_ch = params.weights.shape()[0];
    let k = params.weights.shape()[2];
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; out_ch * out_h * out_w];
    for o in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = params.bias.data()[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let input_v =
                                input.data()[(c * h + iy as usize) * w + ix as usize];
                            let weight_v = params.weights.data()
                                [((o * c_in + c) * k + ky) * k + kx];
                            acc += input_v * weight_v;
                        }
                    }
                }
                out[(o * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Tensor::new(vec![out_ch, out_h, out_w], out).unwrap()
}

fn check_oracles() -> Verdict {
    let mut r = rng_from(0xACCE_9703);

    let mut max_corr = 0.0_f64;
    for _ in 0..10_000 {
        let dim = r.random_range(2..128);
        let v = gaussian(&mut r, dim);
        let s = gaussian(&mut r, dim);
        let ours = pearson_similarity(&v, &s, 1e-12).unwrap();
        max_corr = max_corr.max((ours - correlation_oracle(&v, &s)).abs());
    }
    if max_corr >= ORACLE_TOL {
        return Err(format!(
            "correlation drifted {max_corr:.2e} from the two-pass oracle (limit {ORACLE_TOL:.0e})"
        ));
    }

    let mut max_conv = 0.0_f64;
    for case in 0..60 {
        let c_in = r.random_range(1..4);
        let out_ch = r.random_range(1..5);
        let h = r.random_range(4..10);
        let w = r.random_range(4..10);
        let stride = 1 + (case % 2);
        let pad = (case / 2) % 2;
        let input = Tensor::new(vec![c_in, h, w], gaussian(&mut r, c_in * h * w)).unwrap();
        let params = protodet::tensor::kaiming_conv("probe", out_ch, c_in, 3, r.random());
        let ours = conv2d_forward(&input, &params, stride, pad).unwrap();
        let reference = conv_oracle(&input, &params, stride, pad);
        assert_eq!(ours.shape(), reference.shape(), "conv output geometry");
        for (a, b) in ours.data().iter().zip(reference.data()) {
            max_conv = max_conv.max((a - b).abs());
        }
    }
    if max_conv >= ORACLE_TOL {
        return Err(format!(
            "convolution drifted {max_conv:.2e} from the direct-loop oracle (limit {ORACLE_TOL:.0e})"
        ));
    }

    Ok(format!(
        "correlation within {max_corr:.1e} of the two-pass oracle (10000 draws); \
         convolution within {max_conv:.1e} of the direct loop (60 cases)"
    ))
}

// ---------------------------------------------------------------------------
// 4. The adaptation loop lowers its own loss on fresh episodes.
// ---------------------------------------------------------------------------

fn check_adaptation() -> Verdict {
    let started = Instant::now();
    let dataset = ToyDataset::new(DatasetParams::default()).map_err(|e| e.to_string())?;
    let model = Model::new(7, true);
    let hyper = EpisodeHyper::default(); // correlation metric, lr 0.01, 30 steps
    let episodes = 100;
    let mut decreased = 0usize;
    for e in 0..episodes {
        let episode = sample_episode(&dataset, Split::Base, 3, 5, 1, 1000 + e as u64)
            .map_err(|err| format!("episode {e} failed to sample: {err}"))?;
        let prepared =
            prepare_episode(&model, &episode, &hyper).map_err(|err| err.to_string())?;
        let losses = &prepared.inner_losses;
        if losses.len() != hyper.inner_steps + 1 {
            return Err(format!("expected {} loss entries, got {}", 31, losses.len()));
        }
        if losses[losses.len() - 1] < losses[0] {
            decreased += 1;
        }
    }
    let fraction = decreased as f64 / episodes as f64;
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "loss fell in {decreased}/{episodes} episodes ({:.0}%) after 30 adaptation steps ({secs:.1}s)",
        fraction * 100.0
    );
    if fraction < ADAPT_DECREASE_MIN {
        return Err(format!("{detail}; need {:.0}%", ADAPT_DECREASE_MIN * 100.0));
    }
    if secs >= BUDGET_ADAPTATION {
        return Err(format!("{detail}; budget {BUDGET_ADAPTATION}s"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Shared trained variants for checks 5-7.
// ---------------------------------------------------------------------------

fn full_config(metric: &str, reconstructor: bool) -> TrainConfig {
    TrainConfig {
        way: 3,
        shot: 5,
        n_query: 6,
        alpha: 10.0,
        meta_lr: 0.01,
        inner_steps: 30,
        outer_lr: 0.001,
        lambda: 1.0,
        decay_step: 2000,
        epochs: 30,
        iters: 100,
        seed: 42,
        metric_kind: metric.parse().unwrap(),
        mr_enabled: reconstructor,
        support_path_grad: true,
        fg_gate: 0.7,
        epsilon: 1e-12,
        dataset: DatasetParams::default(),
    }
}

struct TrainedVariant {
    name: &'static str,
    model: Model,
    eval: EvalResult,
    trained_now: bool,
}

/// Loads a cached checkpoint if it matches `cfg` exactly, else trains one.
fn obtain_model(dir: &Path, cfg: &TrainConfig) -> Result<(Model, bool), String> {
    let ckpt = dir.join("checkpoint_final.json");
    if let Ok((model, extra)) = Model::load(&ckpt) {
        let want = serde_json::to_value(cfg).map_err(|e| e.to_string())?;
        let final_step = (cfg.epochs * cfg.iters - 1) as u64;
        if extra.get("config") == Some(&want)
            && extra.get("step").and_then(|s| s.as_u64()) == Some(final_step)
        {
            return Ok((model, false));
        }
    }
    fs::remove_dir_all(dir).ok();
    let summary = train(
        cfg,
        &TrainOptions { out_dir: dir.to_path_buf(), resume: None, workers: None },
    )
    .map_err(|e| e.to_string())?;
    if summary.skipped_episodes > 0 {
        println!("[gate]   note: {} episodes were skipped during training", summary.skipped_episodes);
    }
    let (model, _) = Model::load(&summary.checkpoint).map_err(|e| e.to_string())?;
    Ok((model, true))
}

fn train_variants() -> Result<(Vec<TrainedVariant>, f64), String> {
    let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("variants");
    let specs: [(&'static str, &str, bool); 3] = [
        ("correlation+reconstructor", "pearson", true),
        ("cosine+reconstructor", "cosine", true),
        ("correlation+pooled", "pearson", false),
    ];
    let started = Instant::now();
    let mut variants = Vec::with_capacity(3);
    for (name, metric, reconstructor) in specs {
        let cfg = full_config(metric, reconstructor);
        let dir = cache.join(name.replace('+', "-"));
        let t = Instant::now();
        let (model, trained_now) = obtain_model(&dir, &cfg)?;
        println!(
            "[gate] {} {} ({:.0}s)",
            if trained_now { "trained" } else { "reusing cached" },
            name,
            t.elapsed().as_secs_f64()
        );
        let dataset = ToyDataset::new(cfg.dataset.clone()).map_err(|e| e.to_string())?;
        let params = EvalParams {
            split: Split::Novel,
            way: cfg.way,
            shot: cfg.shot,
            n_query: cfg.n_query,
            episodes: 200,
            base_seed: 0,
            groups: 5,
            score_threshold: 0.0,
            nms_iou: 0.5,
            hyper: cfg.hyper(),
        };
        let t = Instant::now();
        let eval = evaluate(&model, &dataset, &params).map_err(|e| e.to_string())?;
        println!(
            "[gate] evaluated {} over {} episodes: ap50 {:.3} ({:.0}s)",
            name,
            eval.episodes_run,
            eval.ap50.mean,
            t.elapsed().as_secs_f64()
        );
        variants.push(TrainedVariant { name, model, eval, trained_now });
    }
    Ok((variants, started.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 5. Query embeddings cluster at their own class prototype.
// ---------------------------------------------------------------------------

fn check_clustering(trained: &TrainedVariant) -> Verdict {
    let dataset = ToyDataset::new(DatasetParams::default()).map_err(|e| e.to_string())?;
    let hyper = EpisodeHyper::default();
    let episodes = 100;
    let mut margins = Vec::with_capacity(episodes);
    let mut within_all = 0.0;
    let mut cross_all = 0.0;
    for e in 0..episodes {
        let episode = sample_episode(&dataset, Split::Novel, 3, 5, 6, 5000 + e as u64)
            .map_err(|err| format!("episode {e} failed to sample: {err}"))?;
        let prepared =
            prepare_episode(&trained.model, &episode, &hyper).map_err(|err| err.to_string())?;
        let mut within = Vec::new();
        let mut cross = Vec::new();
        for query in &episode.queries {
            for proposal in &query.proposals {
                let class = match label_proposal(
                    &proposal.bbox,
                    &query.scene.objects,
                    &query.object_labels,
                ) {
                    ProposalLabel::Foreground { class, .. } => class,
                    _ => continue,
                };
                let crop = dataset
                    .crop_support(&query.scene.image, &proposal.bbox)
                    .map_err(|err| err.to_string())?;
                let features = trained.model.backbone_forward(&crop).map_err(|e| e.to_string())?;
                let v = prepared.embedder.embed(&features).map_err(|e| e.to_string())?;
                for proto in &prepared.prototypes {
                    let sim = pearson_similarity(v.data(), proto.vector.data(), 1e-12)
                        .map_err(|err| err.to_string())?;
                    if proto.class_id == class {
                        within.push(sim);
                    } else {
                        cross.push(sim);
                    }
                }
            }
        }
        if within.is_empty() || cross.is_empty() {
            continue; // no scored foreground region in this episode
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (w, c) = (mean(&within), mean(&cross));
        within_all += w;
        cross_all += c;
        margins.push(w - c);
    }
    if margins.is_empty() {
        return Err("no episode produced scored foreground regions".into());
    }
    let n = margins.len() as f64;
    let margin = margins.iter().sum::<f64>() / n;
    let detail = format!(
        "own-prototype similarity {:.3} vs cross-class {:.3}, margin {margin:.3} over {} episodes",
        within_all / n,
        cross_all / n,
        margins.len()
    );
    if margin < CLUSTER_MARGIN_MIN {
        return Err(format!("{detail}; need >= {CLUSTER_MARGIN_MIN}"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. The two design choices each buy measurable detection quality.
// ---------------------------------------------------------------------------

fn check_variant_ordering(variants: &[TrainedVariant], secs: f64) -> Verdict {
    let ap: Vec<f64> = variants.iter().map(|v| v.eval.ap50.mean).collect();
    let names: Vec<&str> = variants.iter().map(|v| v.name).collect();
    let detail = format!(
        "ap50 {} {:.3} > {} {:.3} > {} {:.3} ({secs:.0}s total)",
        names[0], ap[0], names[1], ap[1], names[2], ap[2]
    );
    if !(ap[0] > ap[1] && ap[1] > ap[2]) {
        return Err(format!("ordering violated: {detail}"));
    }
    if variants.iter().any(|v| v.trained_now) && secs >= BUDGET_VARIANTS {
        return Err(format!("{detail}; budget {BUDGET_VARIANTS}s"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. Detection quality floor on unseen classes, adaptation only.
// ---------------------------------------------------------------------------

fn check_benchmark(trained: &TrainedVariant) -> Verdict {
    let eval = &trained.eval;
    let detail = format!(
        "ap50 {:.3} +/- {:.3} over {} episodes of unseen classes (ap75 {:.3})",
        eval.ap50.mean, eval.ap50.std, eval.episodes_run, eval.ap75.mean
    );
    if eval.episodes_run < 200 {
        return Err(format!("{detail}; need the full 200 episodes"));
    }
    if eval.ap50.mean < AP50_MIN {
        return Err(format!("{detail}; need >= {AP50_MIN}"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Bit-exact reproducibility of training and checkpoints.
// ---------------------------------------------------------------------------

fn check_reproducibility() -> Verdict {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("repro");
    fs::remove_dir_all(&base).ok();
    let cfg = TrainConfig { epochs: 1, iters: 2, ..full_config("pearson", true) };

    let run = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>, PathBuf), String> {
        let summary = train(
            &cfg,
            &TrainOptions { out_dir: dir.to_path_buf(), resume: None, workers: None },
        )
        .map_err(|e| e.to_string())?;
        Ok((
            fs::read(&summary.metrics).map_err(|e| e.to_string())?,
            fs::read(summary.checkpoint.with_extension("bin")).map_err(|e| e.to_string())?,
            summary.checkpoint,
        ))
    };
    let (metrics_a, blob_a, ckpt_a) = run(&base.join("a"))?;
    let (metrics_b, blob_b, _) = run(&base.join("b"))?;
    if metrics_a != metrics_b {
        return Err("two identically configured runs wrote different metrics logs".into());
    }
    if blob_a != blob_b {
        return Err("two identically configured runs wrote different weights".into());
    }

    let (model, extra) = Model::load(&ckpt_a).map_err(|e| e.to_string())?;
    let copy = base.join("copy.json");
    model.save(&copy, extra).map_err(|e| e.to_string())?;
    let blob_copy = fs::read(copy.with_extension("bin")).map_err(|e| e.to_string())?;
    if blob_copy != blob_a {
        return Err("checkpoint round-trip changed the stored weights".into());
    }
    Ok(format!(
        "same config and seed: metrics logs byte-identical ({}B), weights bit-exact ({}B), round-trip exact",
        metrics_a.len(),
        blob_a.len()
    ))
}

// ---------------------------------------------------------------------------

#[test]
fn release_gate() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();

    println!("[gate] running fast checks");
    results.push((1, "classification-gradients", check_gradients()));
    results.push((2, "correlation-invariance", check_invariance()));
    results.push((3, "oracle-equivalence", check_oracles()));
    results.push((4, "episode-adaptation", check_adaptation()));
    results.push((8, "reproducibility", check_reproducibility()));

    println!("[gate] preparing trained variants (cached after the first run)");
    match train_variants() {
        Ok((variants, secs)) => {
            results.push((5, "embedding-clustering", check_clustering(&variants[0])));
            results.push((6, "variant-ordering", check_variant_ordering(&variants, secs)));
            results.push((7, "novel-class-benchmark", check_benchmark(&variants[0])));
        }
        Err(e) => {
            for (i, name) in
                [(5, "embedding-clustering"), (6, "variant-ordering"), (7, "novel-class-benchmark")]
            {
                results.push((i, name, Err(format!("trained variants unavailable: {e}"))));
            }
        }
    }

    results.sort_by_key(|(i, _, _)| *i);
    let mut failed = Vec::new();
    for (i, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("criterion {i} {name}: PASS — {detail}"),
            Err(detail) => {
                println!("criterion {i} {name}: FAIL — {detail}");
                failed.push(format!("{i} {name}"));
            }
        }
    }
    assert!(failed.is_empty(), "release criteria failed: {}", failed.join(", "));
}
