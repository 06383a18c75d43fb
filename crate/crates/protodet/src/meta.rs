//! The episodic feature reconstructor: a two-conv embedding head that is
//! cloned and adapted on each episode's support crops before it embeds
//! queries.
//!
//! Adaptation is a short SGD loop: embed the supports, average them into
//! class prototypes, classify the prototypes with a throwaway fully connected
//! head under freshly permuted labels, and step the clone's parameters on the
//! cross-entropy. Labels are re-randomized every episode so the head can
//! never memorize class identities; only the geometry of the support set
//! matters. The outer training loop later reads gradients off the adapted
//! clone, first-order style, and applies them to the shared parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    avgpool_global_backward, avgpool_global_forward, conv2d_backward, conv2d_forward, fc_backward,
    fc_forward, kaiming_conv, kaiming_fc, relu_backward, relu_forward, sgd_step, LayerParams,
    Tensor,
};

/// Embedding head: `conv 3x3 stride 2` doubling the channel count, then
/// `conv 3x3 stride 1`, relu after each, global average pool to a vector of
/// length `2 * in_channels`.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub conv1: LayerParams,
    pub conv2: LayerParams,
    /// Episode-local prototype classifier; `Some` only on adapted clones.
    pub head: Option<LayerParams>,
    pub embed_dim: usize,
}

impl Reconstructor {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let out = 2 * in_channels;
        Reconstructor {
            conv1: kaiming_conv("mr.conv1", out, in_channels, 3, rng::mix(seed, 1)),
            conv2: kaiming_conv("mr.conv2", out, out, 3, rng::mix(seed, 2)),
            head: None,
            embed_dim: out,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.weights.shape()[1]
    }

    /// Embeds a `[C, H, W]` feature map into a `[embed_dim]` vector.
    pub fn embed(&self, feature_map: &Tensor) -> Result<Tensor> {
        Ok(self.embed_with_cache(feature_map)?.0)
    }

    /// Embeds while keeping the activations needed for a backward pass.
    pub fn embed_with_cache(&self, feature_map: &Tensor) -> Result<(Tensor, EmbedCache)> {
        if feature_map.shape().first() != Some(&self.in_channels()) {
            return Err(Error::Shape(format!(
                "reconstructor expects {} input channels, got {:?}",
                self.in_channels(),
                feature_map.shape()
            )));
        }
        let z1 = conv2d_forward(feature_map, &self.conv1, 2, 1)?;
        let a1 = relu_forward(&z1);
        let z2 = conv2d_forward(&a1, &self.conv2, 1, 1)?;
        let a2 = relu_forward(&z2);
        let embedding = avgpool_global_forward(&a2)?;
        let cache = EmbedCache { input: feature_map.clone(), z1, a1, z2, a2_shape: a2.shape().to_vec() };
        Ok((embedding, cache))
    }

    /// Backward pass of [`Self::embed_with_cache`]: accumulates conv
    /// gradients and returns the gradient with respect to the feature map so
    /// callers can keep propagating into whatever produced it.
    pub fn embed_backward(&mut self, grad_embedding: &Tensor, cache: &EmbedCache) -> Result<Tensor> {
        let g = avgpool_global_backward(grad_embedding, &cache.a2_shape)?;
        let g = relu_backward(&g, &cache.z2)?;
        let g = conv2d_backward(&g, &cache.a1, &mut self.conv2, 1, 1)?;
        let g = relu_backward(&g, &cache.z1)?;
        conv2d_backward(&g, &cache.input, &mut self.conv1, 2, 1)
    }

    pub fn zero_grads(&mut self) {
        self.conv1.zero_grads();
        self.conv2.zero_grads();
        if let Some(h) = self.head.as_mut() {
            h.zero_grads();
        }
    }

    /// Multiplies the conv gradient buffers by `factor` (the episode head has
    /// no life outside the inner loop and is left alone).
    pub fn scale_grads(&mut self, factor: f64) {
        self.conv1.scale_grads(factor);
        self.conv2.scale_grads(factor);
    }
}

/// Saved activations for one embed call.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    a2_shape: Vec<usize>,
}

/// Per-class mean of support embeddings.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Tensor,
}

/// Averages each class's support embeddings into a prototype, in ascending
/// class order. A class with no embeddings is a sampling error; a prototype
/// with near-zero spread is degenerate and rejects the episode.
pub fn build_prototypes(
    embeddings: &BTreeMap<usize, Vec<Tensor>>,
    epsilon: f64,
) -> Result<Vec<Prototype>> {
    let mut out = Vec::with_capacity(embeddings.len());
    for (&class_id, list) in embeddings {
        if list.is_empty() {
            return Err(Error::Sampling(format!("class {class_id} has no support embeddings")));
        }
        let d = list[0].len();
        let mut mean = vec![0.0; d];
        for e in list {
            if e.len() != d {
                return Err(Error::Shape(format!(
                    "class {class_id} mixes embedding lengths {d} and {}",
                    e.len()
                )));
            }
            for (m, v) in mean.iter_mut().zip(e.data()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= list.len() as f64;
        }
        let centered_norm = {
            let mu = mean.iter().sum::<f64>() / d as f64;
            mean.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>().sqrt()
        };
        if centered_norm <= epsilon {
            return Err(Error::Degenerate(format!(
                "prototype for class {class_id} is constant"
            )));
        }
        out.push(Prototype { class_id, vector: Tensor::new(vec![d], mean)? });
    }
    Ok(out)
}

/// Settings for one episode's adaptation.
#[derive(Debug, Clone)]
pub struct InnerLoopConfig {
    pub meta_lr: f64,
    pub steps: usize,
    /// `label_perm[c]` is the target index assigned to class `c`'s prototype.
    pub label_perm: Vec<usize>,
    /// Seed for the episode's fresh classifier head.
    pub head_seed: u64,
    /// Degeneracy threshold forwarded to prototype construction.
    pub epsilon: f64,
}

/// Adapted clone plus the loss measured before every step and once after the
/// last one (`steps + 1` entries).
#[derive(Debug)]
pub struct InnerAdaptResult {
    pub adapted: Reconstructor,
    pub losses: Vec<f64>,
}

fn validate_perm(perm: &[usize]) -> Result<()> {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Config(format!("label permutation {perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Mean prototype cross-entropy under the given labels; forward only.
pub fn inner_loss(
    mr: &Reconstructor,
    support_maps: &BTreeMap<usize, Vec<Tensor>>,
    label_perm: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let head = mr
        .head
        .as_ref()
        .ok_or_else(|| Error::State("inner loss needs a reconstructor with a head".into()))?;
    let mut embedded: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for (&c, maps) in support_maps {
        let mut list = Vec::with_capacity(maps.len());
        for m in maps {
            list.push(mr.embed(m)?);
        }
        embedded.insert(c, list);
    }
    let prototypes = build_prototypes(&embedded, epsilon)?;
    let n = prototypes.len() as f64;
    let mut loss = 0.0;
    for (i, proto) in prototypes.iter().enumerate() {
        let logits = fc_forward(&proto.vector, head)?;
        let probs = crate::metric::temperature_softmax(logits.data(), 1.0)?;
        loss += crate::metric::classification_loss(&probs, label_perm[i])? / n;
    }
    Ok(loss)
}

/// One forward/backward pass of the adaptation objective: returns the loss
/// and accumulates gradients into the clone's conv and head buffers.
fn inner_loss_and_grads(
    mr: &mut Reconstructor,
    support_maps: &BTreeMap<usize, Vec<Tensor>>,
    label_perm: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let n_classes = support_maps.len();
    // Embed every support with caches, build prototypes.
    let mut caches: BTreeMap<usize, Vec<EmbedCache>> = BTreeMap::new();
    let mut embedded: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for (&c, maps) in support_maps {
        let mut class_caches = Vec::with_capacity(maps.len());
        let mut class_embeds = Vec::with_capacity(maps.len());
        for m in maps {
            let (e, cache) = mr.embed_with_cache(m)?;
            class_embeds.push(e);
            class_caches.push(cache);
        }
        caches.insert(c, class_caches);
        embedded.insert(c, class_embeds);
    }
    let prototypes = build_prototypes(&embedded, epsilon)?;

    // Classify each prototype; mean cross-entropy over prototypes.
    let mut loss = 0.0;
    let mut grad_protos: Vec<Tensor> = Vec::with_capacity(n_classes);
    {
        let head = mr
            .head
            .as_mut()
            .ok_or_else(|| Error::State("inner adaptation needs a classifier head".into()))?;
        for (i, proto) in prototypes.iter().enumerate() {
            let target = label_perm[i];
            let logits = fc_forward(&proto.vector, head)?;
            let probs = crate::metric::temperature_softmax(logits.data(), 1.0)?;
            loss += crate::metric::classification_loss(&probs, target)? / n_classes as f64;
            // d(mean CE)/d(logits) = (softmax - onehot) / N.
            let grad_logits = Tensor::new(
                vec![probs.len()],
                probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (p - if k == target { 1.0 } else { 0.0 }) / n_classes as f64)
                    .collect(),
            )?;
            grad_protos.push(fc_backward(&grad_logits, &proto.vector, head)?);
        }
    }

    // Spread each prototype gradient over its supports and push through the
    // embedding. The feature maps are episode constants: their gradient is
    // dropped here, the inner loop touches only the clone.
    for (i, (&c, class_caches)) in caches.iter().enumerate() {
        let k = class_caches.len() as f64;
        let per_support = Tensor::new(
            vec![grad_protos[i].len()],
            grad_protos[i].data().iter().map(|g| g / k).collect(),
        )?;
        let _ = c;
        for cache in class_caches {
            mr.embed_backward(&per_support, cache)?;
        }
    }
    Ok(loss)
}

/// Clones the reconstructor, gives the clone a fresh seeded head, and runs
/// `steps` SGD updates of the prototype-classification objective. The input
/// reconstructor is untouched; backbone features are treated as constants.
pub fn inner_adapt(
    mr: &Reconstructor,
    support_maps: &BTreeMap<usize, Vec<Tensor>>,
    cfg: &InnerLoopConfig,
) -> Result<InnerAdaptResult> {
    let n = support_maps.len();
    if n < 2 {
        return Err(Error::Sampling(format!("adaptation needs at least 2 classes, got {n}")));
    }
    if cfg.label_perm.len() != n {
        return Err(Error::Config(format!(
            "label permutation covers {} classes but the episode has {n}",
            cfg.label_perm.len()
        )));
    }
    validate_perm(&cfg.label_perm)?;
    if !(cfg.meta_lr >= 0.0 && cfg.meta_lr.is_finite()) {
        return Err(Error::Config(format!("inner learning rate must be >= 0, got {}", cfg.meta_lr)));
    }

    let mut adapted = mr.clone();
    adapted.zero_grads();
    adapted.head = Some(kaiming_fc("mr.head", n, mr.embed_dim, cfg.head_seed));

    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let loss = inner_loss_and_grads(&mut adapted, support_maps, &cfg.label_perm, cfg.epsilon)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("inner loss became non-finite at step {step}")));
        }
        losses.push(loss);
        let Reconstructor { conv1, conv2, head, .. } = &mut adapted;
        let head = head.as_mut().expect("head installed above");
        sgd_step([conv1, conv2, head], cfg.meta_lr)?;
    }
    losses.push(inner_loss(&adapted, support_maps, &cfg.label_perm, cfg.epsilon)?);
    Ok(InnerAdaptResult { adapted, losses })
}

/// Embeds query feature maps with the adapted parameters. The classifier
/// head plays no part here; downstream scoring is metric-based.
pub fn reconstruct_queries(adapted: &Reconstructor, roi_maps: &[Tensor]) -> Result<Vec<Tensor>> {
    roi_maps.iter().map(|m| adapted.embed(m)).collect()
}

/// Who produced an exported embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingRole {
    #[serde(rename = "support-prototype")]
    SupportPrototype,
    #[serde(rename = "query-roi")]
    QueryRoi,
}

impl std::fmt::Display for EmbeddingRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingRole::SupportPrototype => write!(f, "support-prototype"),
            EmbeddingRole::QueryRoi => write!(f, "query-roi"),
        }
    }
}

/// One exported embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub episode: u64,
    pub role: EmbeddingRole,
    /// Episode-local class index.
    pub class_id: usize,
    pub values: Vec<f64>,
}

/// Renders rows as a comma-separated table with a header. All rows must share
/// one embedding length.
pub fn embeddings_to_table(rows: &[EmbeddingRow]) -> Result<String> {
    let dim = rows.first().map(|r| r.values.len()).unwrap_or(0);
    let mut out = String::from("episode,role,class");
    for i in 0..dim {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for row in rows {
        if row.values.len() != dim {
            return Err(Error::Shape(format!(
                "embedding export mixes lengths {dim} and {}",
                row.values.len()
            )));
        }
        out.push_str(&format!("{},{},{}", row.episode, row.role, row.class_id));
        for v in &row.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
