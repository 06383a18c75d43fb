//! Similarity measures between query embeddings and class prototypes, the
//! temperature softmax over them, the classification loss, and analytic
//! gradients for all of it.
//!
//! Pearson similarity is the population correlation
//!
//! ```text
//! r(v, s) = sum_i (v_i - mean(v)) (s_i - mean(s)) / (||v - mean(v)|| ||s - mean(s)||)
//! ```
//!
//! which is invariant under positive affine rescaling of either argument.
//! Cosine similarity shares the scale invariance but not the shift
//! invariance; the difference is what the metric ablation measures.
//!
//! With centered vectors `a = v - mean(v)`, `b = s - mean(s)` the exact
//! derivative with respect to the query is
//!
//! ```text
//! d r / d v = (b / ||b|| - r * a / ||a||) / ||a||
//! ```
//!
//! (the `- mean` terms cancel because `b` sums to zero), and the prototype
//! gradient is the mirror image. Both are validated against central finite
//! differences in the tests and in the gradcheck suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which similarity drives classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Pearson,
    Cosine,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Pearson => write!(f, "pearson"),
            MetricKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pearson" => Ok(MetricKind::Pearson),
            "cosine" => Ok(MetricKind::Cosine),
            other => Err(Error::Config(format!(
                "unknown metric '{other}', expected 'pearson' or 'cosine'"
            ))),
        }
    }
}

/// Settings for similarity scoring.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Softmax temperature multiplier on similarities.
    pub alpha: f64,
    /// Norm threshold below which a vector counts as degenerate.
    pub epsilon: f64,
    pub kind: MetricKind,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { alpha: 10.0, epsilon: 1e-12, kind: MetricKind::Pearson }
    }
}

/// Scores for one query against every episode prototype.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityRow {
    /// Raw similarity per episode class, in class order.
    pub sims: Vec<f64>,
    /// Softmax of `alpha * sims`; sums to 1.
    pub confidences: Vec<f64>,
    /// Argmax of confidences; ties resolve to the lowest index.
    pub predicted_class: usize,
    pub kind: MetricKind,
}

fn check_pair(query: &[f64], proto: &[f64]) -> Result<()> {
    if query.len() != proto.len() {
        return Err(Error::Shape(format!(
            "similarity arguments differ in length: {} vs {}",
            query.len(),
            proto.len()
        )));
    }
    if query.len() < 2 {
        return Err(Error::Shape(format!(
            "similarity needs vectors of length >= 2, got {}",
            query.len()
        )));
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Subtracts the mean, returning the centered vector and its norm.
fn center(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let a: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let n = norm(&a);
    (a, n)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(query: &[f64], proto: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(query, proto)?;
    let nq = norm(query);
    let np = norm(proto);
    if nq <= epsilon {
        return Err(Error::Degenerate("query vector has near-zero norm".into()));
    }
    if np <= epsilon {
        return Err(Error::Degenerate("prototype has near-zero norm".into()));
    }
    let dot: f64 = query.iter().zip(proto).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * np)).clamp(-1.0, 1.0))
}

/// Pearson correlation, clamped to `[-1, 1]`. Population (1/D) statistics;
/// the 1/D factors cancel between covariance and the two deviations.
pub fn pearson_similarity(query: &[f64], proto: &[f64], epsilon: f64) -> Result<f64> {
    check_pair(query, proto)?;
    let (a, na) = center(query);
    let (b, nb) = center(proto);
    if na <= epsilon {
        return Err(Error::Degenerate("query vector has near-zero spread".into()));
    }
    if nb <= epsilon {
        return Err(Error::Degenerate("prototype has near-zero spread".into()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Exact derivative of [`pearson_similarity`] with respect to the query.
pub fn pearson_grad_query(query: &[f64], proto: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_pair(query, proto)?;
    let (a, na) = center(query);
    let (b, nb) = center(proto);
    if na <= epsilon {
        return Err(Error::Degenerate("query vector has near-zero spread".into()));
    }
    if nb <= epsilon {
        return Err(Error::Degenerate("prototype has near-zero spread".into()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let r = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(a.iter().zip(&b).map(|(ai, bi)| (bi / nb - r * ai / na) / na).collect())
}

/// Exact derivative of [`pearson_similarity`] with respect to the prototype.
pub fn pearson_grad_prototype(query: &[f64], proto: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    pearson_grad_query(proto, query, epsilon)
}

/// Derivative of [`cosine_similarity`] with respect to the query.
pub fn cosine_grad_query(query: &[f64], proto: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_pair(query, proto)?;
    let nq = norm(query);
    let np = norm(proto);
    if nq <= epsilon {
        return Err(Error::Degenerate("query vector has near-zero norm".into()));
    }
    if np <= epsilon {
        return Err(Error::Degenerate("prototype has near-zero norm".into()));
    }
    let dot: f64 = query.iter().zip(proto).map(|(a, b)| a * b).sum();
    let c = (dot / (nq * np)).clamp(-1.0, 1.0);
    Ok(query.iter().zip(proto).map(|(qi, pi)| (pi / np - c * qi / nq) / nq).collect())
}

/// Derivative of [`cosine_similarity`] with respect to the prototype.
pub fn cosine_grad_prototype(query: &[f64], proto: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    cosine_grad_query(proto, query, epsilon)
}

/// Similarity between query and prototype under the configured metric.
pub fn similarity(query: &[f64], proto: &[f64], cfg: &MetricConfig) -> Result<f64> {
    match cfg.kind {
        MetricKind::Pearson => pearson_similarity(query, proto, cfg.epsilon),
        MetricKind::Cosine => cosine_similarity(query, proto, cfg.epsilon),
    }
}

/// Metric gradient with respect to the query under the configured metric.
pub fn similarity_grad_query(query: &[f64], proto: &[f64], cfg: &MetricConfig) -> Result<Vec<f64>> {
    match cfg.kind {
        MetricKind::Pearson => pearson_grad_query(query, proto, cfg.epsilon),
        MetricKind::Cosine => cosine_grad_query(query, proto, cfg.epsilon),
    }
}

/// Metric gradient with respect to the prototype under the configured metric.
pub fn similarity_grad_prototype(
    query: &[f64],
    proto: &[f64],
    cfg: &MetricConfig,
) -> Result<Vec<f64>> {
    match cfg.kind {
        MetricKind::Pearson => pearson_grad_prototype(query, proto, cfg.epsilon),
        MetricKind::Cosine => cosine_grad_prototype(query, proto, cfg.epsilon),
    }
}

/// Softmax of `alpha * sims` with max-subtraction for overflow safety.
pub fn temperature_softmax(sims: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if sims.len() < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least 2 entries, got {}",
            sims.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("softmax temperature must be finite and > 0, got {alpha}")));
    }
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (alpha * (s - m)).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Negative log likelihood of the true class, floored at 1e-15 so a zero
/// confidence yields a large finite loss instead of infinity.
pub fn classification_loss(confidences: &[f64], true_class: usize) -> Result<f64> {
    if true_class >= confidences.len() {
        return Err(Error::Shape(format!(
            "true class {true_class} out of range for {} confidences",
            confidences.len()
        )));
    }
    Ok(-confidences[true_class].max(1e-15).ln())
}

/// Gradient of [`classification_loss`] composed with [`temperature_softmax`]
/// with respect to the raw similarities: `alpha * (confidence - onehot)`.
/// Components sum to zero.
pub fn loss_grad_sims(confidences: &[f64], true_class: usize, alpha: f64) -> Result<Vec<f64>> {
    if true_class >= confidences.len() {
        return Err(Error::Shape(format!(
            "true class {true_class} out of range for {} confidences",
            confidences.len()
        )));
    }
    Ok(confidences
        .iter()
        .enumerate()
        .map(|(n, &c)| alpha * (c - if n == true_class { 1.0 } else { 0.0 }))
        .collect())
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn row_from_sims(sims: Vec<f64>, cfg: &MetricConfig) -> Result<SimilarityRow> {
    let confidences = temperature_softmax(&sims, cfg.alpha)?;
    let predicted_class = argmax(&confidences);
    Ok(SimilarityRow { sims, confidences, predicted_class, kind: cfg.kind })
}

/// Scores a query against all prototypes. A degenerate query is an error;
/// this is the training-path entry point.
pub fn similarity_row(
    query: &[f64],
    prototypes: &[&[f64]],
    cfg: &MetricConfig,
) -> Result<SimilarityRow> {
    let sims = prototypes
        .iter()
        .map(|p| similarity(query, p, cfg))
        .collect::<Result<Vec<f64>>>()?;
    row_from_sims(sims, cfg)
}

/// Scores a query against all prototypes, mapping a degenerate (constant)
/// query to a confident background prediction instead of an error; this is
/// the inference-path entry point.
pub fn similarity_row_inference(
    query: &[f64],
    prototypes: &[&[f64]],
    cfg: &MetricConfig,
    background_class: usize,
) -> Result<SimilarityRow> {
    match similarity_row(query, prototypes, cfg) {
        Ok(row) => Ok(row),
        Err(Error::Degenerate(msg)) if msg.starts_with("query") => {
            let sims: Vec<f64> = (0..prototypes.len())
                .map(|n| if n == background_class { 1.0 } else { -1.0 })
                .collect();
            row_from_sims(sims, cfg)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    /// Independent oracle: textbook two-pass covariance over population
    /// standard deviations.
    fn pearson_oracle(v: &[f64], s: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mv = v.iter().sum::<f64>() / n;
        let ms = s.iter().sum::<f64>() / n;
        let cov = v.iter().zip(s).map(|(a, b)| (a - mv) * (b - ms)).sum::<f64>() / n;
        let sv = (v.iter().map(|a| (a - mv) * (a - mv)).sum::<f64>() / n).sqrt();
        let ss = (s.iter().map(|b| (b - ms) * (b - ms)).sum::<f64>() / n).sqrt();
        cov / (sv * ss)
    }

    fn random_vec(seed: u64, d: usize) -> Vec<f64> {
        let mut r = crate::rng::rng_from(seed);
        (0..d).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn cosine_identical_and_orthogonal() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], EPS).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0], EPS).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cosine_frozen_example() {
        // dot([1,2,3],[1,2,4]) = 17, norms sqrt(14) and sqrt(21).
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0], EPS).unwrap();
        let want = 17.0 / 294.0f64.sqrt();
        assert!((got - want).abs() < 1e-12, "got {got:.15}, want {want:.15}");
        assert!((got - 0.9914601339836673).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_not_shift_invariant() {
        // Shifting [1,2,3] by +1 changes cosine but must not change Pearson.
        let c1 = cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0], EPS).unwrap();
        let c2 = cosine_similarity(&[2.0, 3.0, 4.0], &[1.0, 2.0, 4.0], EPS).unwrap();
        let want2 = 24.0 / 609.0f64.sqrt();
        assert!((c2 - want2).abs() < 1e-12, "got {c2:.15}, want {want2:.15}");
        assert!((c1 - c2).abs() > 1e-3, "cosine should move under shift: {c1} vs {c2}");
    }

    #[test]
    fn cosine_zero_vector_is_degenerate() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], EPS),
            Err(Error::Degenerate(msg)) if msg.contains("query")
        ));
        assert!(matches!(
            cosine_similarity(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], EPS),
            Err(Error::Degenerate(msg)) if msg.contains("prototype")
        ));
    }

    #[test]
    fn pearson_frozen_example_and_shift_equality() {
        let p1 = pearson_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0], EPS).unwrap();
        assert!((p1 - 0.9819805060619656).abs() < 1e-12, "got {p1:.15}");
        // Integer shift keeps the centered values bit-identical.
        let p2 = pearson_similarity(&[2.0, 3.0, 4.0], &[1.0, 2.0, 4.0], EPS).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn pearson_perfect_correlation_and_anticorrelation() {
        let s = [0.5, 1.5, -2.0, 3.0];
        let v: Vec<f64> = s.iter().map(|x| 3.0 * x + 7.0).collect();
        assert!((pearson_similarity(&v, &s, EPS).unwrap() - 1.0).abs() < 1e-12);
        let w: Vec<f64> = s.iter().map(|x| -2.0 * x + 1.0).collect();
        assert!((pearson_similarity(&w, &s, EPS).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_vector_is_degenerate_naming_the_argument() {
        let c = [5.0, 5.0, 5.0];
        let v = [1.0, 2.0, 3.0];
        assert!(matches!(
            pearson_similarity(&c, &v, EPS),
            Err(Error::Degenerate(msg)) if msg.contains("query")
        ));
        assert!(matches!(
            pearson_similarity(&v, &c, EPS),
            Err(Error::Degenerate(msg)) if msg.contains("prototype")
        ));
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        for trial in 0..1000u64 {
            let d = [2, 8, 32][(trial % 3) as usize];
            let v = random_vec(1000 + trial, d);
            let s = random_vec(5000 + trial, d);
            let got = pearson_similarity(&v, &s, EPS).unwrap();
            let want = pearson_oracle(&v, &s);
            assert!(
                (got - want).abs() <= 1e-12,
                "trial {trial}: impl {got:.15} vs oracle {want:.15}"
            );
        }
    }

    #[test]
    fn softmax_frozen_example() {
        let p = temperature_softmax(&[1.0, 0.5, 0.0], 10.0).unwrap();
        let want = [0.9932623568421743, 0.006692549116589287, 4.509404123635488e-05];
        for (g, w) in p.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "got {g:.15}, want {w:.15}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_input_gives_uniform_output() {
        let p = temperature_softmax(&[0.4, 0.4, 0.4], 10.0).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_huge_inputs() {
        let p = temperature_softmax(&[1e6, 1e6 - 1.0], 10.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn classification_loss_frozen_examples() {
        assert_eq!(classification_loss(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        let uniform = classification_loss(&[1.0 / 3.0; 3], 1).unwrap();
        assert!((uniform - 3.0f64.ln()).abs() < 1e-12);
        let near = classification_loss(&[0.9932623568421743, 0.0066, 0.0001], 0).unwrap();
        assert!((near - 0.006760443547121283).abs() < 1e-12);
        // Zero confidence must floor, not blow up.
        let floored = classification_loss(&[0.0, 1.0], 0).unwrap();
        assert!(floored.is_finite());
        assert!((floored - (-(1e-15f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn loss_grad_sims_is_zero_sum_and_zero_at_perfect_prediction() {
        let g = loss_grad_sims(&[1.0, 0.0, 0.0], 0, 10.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let conf = temperature_softmax(&[0.3, -0.1, 0.8], 10.0).unwrap();
        let g = loss_grad_sims(&conf, 2, 10.0).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn pearson_grad_matches_finite_differences() {
        let eps = 1e-5;
        for trial in 0..50u64 {
            let v = random_vec(100 + trial, 32);
            let s = random_vec(200 + trial, 32);
            let gq = pearson_grad_query(&v, &s, EPS).unwrap();
            let gp = pearson_grad_prototype(&v, &s, EPS).unwrap();
            for i in 0..32 {
                let mut hi = v.clone();
                let mut lo = v.clone();
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (pearson_similarity(&hi, &s, EPS).unwrap()
                    - pearson_similarity(&lo, &s, EPS).unwrap())
                    / (2.0 * eps);
                assert!(
                    rel_err(fd, gq[i]) < 1e-6,
                    "trial {trial} query[{i}]: fd {fd:.12} vs analytic {:.12}",
                    gq[i]
                );
                let mut hi = s.clone();
                let mut lo = s.clone();
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (pearson_similarity(&v, &hi, EPS).unwrap()
                    - pearson_similarity(&v, &lo, EPS).unwrap())
                    / (2.0 * eps);
                assert!(
                    rel_err(fd, gp[i]) < 1e-6,
                    "trial {trial} proto[{i}]: fd {fd:.12} vs analytic {:.12}",
                    gp[i]
                );
            }
        }
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let eps = 1e-5;
        for trial in 0..50u64 {
            let v = random_vec(300 + trial, 16);
            let s = random_vec(400 + trial, 16);
            let gq = cosine_grad_query(&v, &s, EPS).unwrap();
            let gp = cosine_grad_prototype(&v, &s, EPS).unwrap();
            for i in 0..16 {
                let mut hi = v.clone();
                let mut lo = v.clone();
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (cosine_similarity(&hi, &s, EPS).unwrap()
                    - cosine_similarity(&lo, &s, EPS).unwrap())
                    / (2.0 * eps);
                assert!(rel_err(fd, gq[i]) < 1e-6);
                let mut hi = s.clone();
                let mut lo = s.clone();
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (cosine_similarity(&v, &hi, EPS).unwrap()
                    - cosine_similarity(&v, &lo, EPS).unwrap())
                    / (2.0 * eps);
                assert!(rel_err(fd, gp[i]) < 1e-6);
            }
        }
    }

    #[test]
    fn pearson_grad_vanishes_at_perfect_correlation() {
        // v is a positive affine image of s, so r = 1 is the maximum; the
        // derivative there must vanish and no ascent direction may exist.
        let s = [1.0, 2.0, 3.0, 4.0];
        let v: Vec<f64> = s.iter().map(|x| 2.0 * x + 3.0).collect();
        let g = pearson_grad_query(&v, &s, EPS).unwrap();
        for (i, gi) in g.iter().enumerate() {
            assert!(gi.abs() <= 1e-9, "component {i} = {gi}");
        }
        let dirs = [random_vec(77, 4), random_vec(78, 4), random_vec(79, 4)];
        for dir in &dirs {
            let dd: f64 = g.iter().zip(dir).map(|(a, b)| a * b).sum();
            assert!(dd.abs() <= 1e-9, "directional derivative {dd}");
        }
    }

    #[test]
    fn grad_prototype_is_the_mirror_of_grad_query() {
        let v = random_vec(500, 24);
        let s = random_vec(501, 24);
        let a = pearson_grad_prototype(&v, &s, EPS).unwrap();
        let b = pearson_grad_query(&s, &v, EPS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pearson_grad_is_shift_invariant() {
        let v = random_vec(600, 16);
        let s = random_vec(601, 16);
        let g0 = pearson_grad_query(&v, &s, EPS).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + 3.5).collect();
        let g1 = pearson_grad_query(&v, &shifted, EPS).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        // d classification_loss / d query through softmax and pearson.
        let cfg = MetricConfig::default();
        let eps = 1e-5;
        for trial in 0..20u64 {
            let d = 8;
            let v = random_vec(700 + trial, d);
            let protos: Vec<Vec<f64>> =
                (0..3).map(|k| random_vec(800 + trial * 3 + k, d)).collect();
            let true_class = (trial % 3) as usize;
            let loss_of = |q: &[f64]| -> f64 {
                let sims: Vec<f64> = protos
                    .iter()
                    .map(|p| pearson_similarity(q, p, cfg.epsilon).unwrap())
                    .collect();
                let conf = temperature_softmax(&sims, cfg.alpha).unwrap();
                classification_loss(&conf, true_class).unwrap()
            };
            // Analytic: dL/dsims then chain through each prototype's grad.
            let sims: Vec<f64> = protos
                .iter()
                .map(|p| pearson_similarity(&v, p, cfg.epsilon).unwrap())
                .collect();
            let conf = temperature_softmax(&sims, cfg.alpha).unwrap();
            let gs = loss_grad_sims(&conf, true_class, cfg.alpha).unwrap();
            let mut analytic = vec![0.0; d];
            for (n, p) in protos.iter().enumerate() {
                let gq = pearson_grad_query(&v, p, cfg.epsilon).unwrap();
                for i in 0..d {
                    analytic[i] += gs[n] * gq[i];
                }
            }
            for i in 0..d {
                let mut hi = v.clone();
                let mut lo = v.clone();
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
                assert!(
                    rel_err(fd, analytic[i]) < 1e-6,
                    "trial {trial} dim {i}: fd {fd:.12} vs analytic {:.12}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn similarity_row_ranks_prototypes_and_breaks_ties_low() {
        let cfg = MetricConfig::default();
        let q = [1.0, 2.0, 3.0, 4.0];
        let protos: Vec<Vec<f64>> = vec![
            vec![4.0, 3.0, 2.0, 1.0],          // anticorrelated
            vec![1.1, 2.2, 2.9, 4.2],          // close match
            vec![1.0, 1.0, 4.0, 1.0],          // unrelated
        ];
        let refs: Vec<&[f64]> = protos.iter().map(|p| p.as_slice()).collect();
        let row = similarity_row(&q, &refs, &cfg).unwrap();
        assert_eq!(row.predicted_class, 1);
        assert!((row.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.sims.iter().all(|s| (-1.0..=1.0).contains(s)));
        // Identical prototypes tie; lowest index must win.
        let twin: Vec<&[f64]> = vec![&protos[1], &protos[1]];
        let row = similarity_row(&q, &twin, &cfg).unwrap();
        assert_eq!(row.predicted_class, 0);
    }

    #[test]
    fn degenerate_query_errors_in_training_but_backgrounds_at_inference() {
        let cfg = MetricConfig::default();
        let flat = [2.0, 2.0, 2.0, 2.0];
        let protos: Vec<Vec<f64>> = vec![
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.5, 0.25, 0.75, 0.25],
        ];
        let refs: Vec<&[f64]> = protos.iter().map(|p| p.as_slice()).collect();
        assert!(matches!(similarity_row(&flat, &refs, &cfg), Err(Error::Degenerate(_))));
        let row = similarity_row_inference(&flat, &refs, &cfg, 0).unwrap();
        assert_eq!(row.predicted_class, 0);
        assert!(row.confidences[0] > 0.99);
    }

    proptest! {
        #[test]
        fn prop_pearson_is_invariant_under_positive_affine_maps(
            seed in 0u64..5000,
            d in 4usize..64,
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let v = random_vec(seed, d);
            let s = random_vec(seed.wrapping_add(99991), d);
            let r0 = pearson_similarity(&v, &s, EPS).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let r1 = pearson_similarity(&scaled, &s, EPS).unwrap();
            prop_assert!((r0 - r1).abs() < 1e-9, "r0={r0} r1={r1}");
        }

        #[test]
        fn prop_pearson_is_symmetric(seed in 0u64..2000, d in 2usize..48) {
            let v = random_vec(seed, d);
            let s = random_vec(seed.wrapping_add(7777), d);
            let a = pearson_similarity(&v, &s, EPS).unwrap();
            let b = pearson_similarity(&s, &v, EPS).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn prop_argmax_survives_strictly_increasing_transforms(
            seed in 0u64..2000,
            n in 2usize..8,
            scale in 0.05f64..20.0,
            shift in -10.0f64..10.0,
        ) {
            let sims = random_vec(seed, n);
            let base = argmax(&sims);
            let affine: Vec<f64> = sims.iter().map(|x| scale * x + shift).collect();
            prop_assert_eq!(argmax(&affine), base);
            let cubed: Vec<f64> = sims.iter().map(|x| x * x * x).collect();
            prop_assert_eq!(argmax(&cubed), base);
        }

        #[test]
        fn prop_higher_temperature_sharpens_the_winner(seed in 0u64..2000, n in 2usize..6) {
            let sims = random_vec(seed, n);
            let spread = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - sims.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 0.01);
            let sharp = temperature_softmax(&sims, 10.0).unwrap();
            let soft = temperature_softmax(&sims, 1.0).unwrap();
            let k = argmax(&sims);
            prop_assert!(sharp[k] > soft[k]);
        }

        #[test]
        fn prop_softmax_sums_to_one_and_stays_positive(seed in 0u64..2000, n in 2usize..10) {
            let sims = random_vec(seed, n);
            let p = temperature_softmax(&sims, 10.0).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }
}
