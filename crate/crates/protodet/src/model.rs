//! The detector: a small shared convolutional backbone, an optional episodic
//! reconstructor for embeddings, and a box-refinement head.
//!
//! Geometry, with the default 32x32 crops:
//!
//! ```text
//! crop [3,32,32] -> conv 3x3/2 +relu -> [8,16,16] -> conv 3x3/2 +relu -> [16,8,8]
//!   supports: maxpool 2x2/2 -> [16,4,4] -> embed
//!   queries:                   [16,8,8] -> embed
//!   boxes:    conv 3x3/1 +relu -> avgpool -> fc -> [4] deltas
//! ```
//!
//! The embedding is either the reconstructor (adapted per episode, 32-dim) or
//! a plain global average pool of the backbone map (16-dim) when the
//! reconstructor is disabled for comparison runs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::{EmbedCache, Reconstructor};
use crate::rng;
use crate::tensor::{
    avgpool_global_backward, avgpool_global_forward, conv2d_backward, conv2d_forward, fc_backward,
    fc_forward, kaiming_conv, load_tensors, maxpool2d_forward, relu_backward, relu_forward,
    save_tensors, LayerParams, MaxPoolCache, Tensor,
};

/// Image channels accepted by the backbone.
pub const IMAGE_CHANNELS: usize = 3;
/// Channels after the first backbone conv.
pub const BACKBONE_MID: usize = 8;
/// Channels of the backbone feature map.
pub const BACKBONE_OUT: usize = 16;

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone1: LayerParams,
    pub backbone2: LayerParams,
    /// `None` runs the pooled-embedding ablation.
    pub mr: Option<Reconstructor>,
    pub box_conv: LayerParams,
    pub box_fc: LayerParams,
}

/// Saved activations for one backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
}

/// Saved activations for one box-head pass.
#[derive(Debug, Clone)]
pub struct BoxHeadCache {
    input: Tensor,
    zc: Tensor,
    ac_shape: Vec<usize>,
    pooled: Tensor,
}

impl Model {
    pub fn new(seed: u64, mr_enabled: bool) -> Self {
        let s = rng::mix(seed, rng::tags::MODEL_INIT);
        Model {
            backbone1: kaiming_conv("backbone.conv1", BACKBONE_MID, IMAGE_CHANNELS, 3, rng::mix(s, 1)),
            backbone2: kaiming_conv("backbone.conv2", BACKBONE_OUT, BACKBONE_MID, 3, rng::mix(s, 2)),
            mr: mr_enabled.then(|| Reconstructor::new(BACKBONE_OUT, rng::mix(s, 3))),
            box_conv: kaiming_conv("box.conv", BACKBONE_OUT, BACKBONE_OUT, 3, rng::mix(s, 4)),
            // Zero-initialized regressor: untrained deltas are exactly zero,
            // so predicted boxes start at the proposals.
            box_fc: LayerParams::new(
                "box.fc",
                Tensor::zeros(vec![4, BACKBONE_OUT]),
                Tensor::zeros(vec![4]),
            ),
        }
    }

    /// Embedding length produced by the active embedding path.
    pub fn embed_dim(&self) -> usize {
        self.mr.as_ref().map_or(BACKBONE_OUT, |m| m.embed_dim)
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.backbone_forward_with_cache(image)?.0)
    }

    pub fn backbone_forward_with_cache(&self, image: &Tensor) -> Result<(Tensor, BackboneCache)> {
        if image.shape().first() != Some(&IMAGE_CHANNELS) {
            return Err(Error::Shape(format!(
                "backbone expects {IMAGE_CHANNELS}-channel images, got {:?}",
                image.shape()
            )));
        }
        let z1 = conv2d_forward(image, &self.backbone1, 2, 1)?;
        let a1 = relu_forward(&z1);
        let z2 = conv2d_forward(&a1, &self.backbone2, 2, 1)?;
        let features = relu_forward(&z2);
        Ok((features, BackboneCache { input: image.clone(), z1, a1, z2 }))
    }

    /// Accumulates backbone gradients; the gradient with respect to the image
    /// is discarded (images are data, not parameters).
    pub fn backbone_backward(&mut self, grad_features: &Tensor, cache: &BackboneCache) -> Result<()> {
        let g = relu_backward(grad_features, &cache.z2)?;
        let g = conv2d_backward(&g, &cache.a1, &mut self.backbone2, 2, 1)?;
        let g = relu_backward(&g, &cache.z1)?;
        conv2d_backward(&g, &cache.input, &mut self.backbone1, 2, 1)?;
        Ok(())
    }

    /// Support branch: halve the spatial extent before embedding.
    pub fn pool_support(features: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
        maxpool2d_forward(features, 2, 2)
    }

    /// Predicts `[dx, dy, dw, dh]` box deltas from a backbone feature map.
    pub fn box_forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.box_forward_with_cache(features)?.0)
    }

    pub fn box_forward_with_cache(&self, features: &Tensor) -> Result<(Tensor, BoxHeadCache)> {
        let zc = conv2d_forward(features, &self.box_conv, 1, 1)?;
        let ac = relu_forward(&zc);
        let pooled = avgpool_global_forward(&ac)?;
        let deltas = fc_forward(&pooled, &self.box_fc)?;
        let cache =
            BoxHeadCache { input: features.clone(), zc, ac_shape: ac.shape().to_vec(), pooled };
        Ok((deltas, cache))
    }

    /// Accumulates box-head gradients and returns the gradient with respect
    /// to the input feature map (which continues into the backbone).
    pub fn box_backward(&mut self, grad_deltas: &Tensor, cache: &BoxHeadCache) -> Result<Tensor> {
        let g = fc_backward(grad_deltas, &cache.pooled, &mut self.box_fc)?;
        let g = avgpool_global_backward(&g, &cache.ac_shape)?;
        let g = relu_backward(&g, &cache.zc)?;
        conv2d_backward(&g, &cache.input, &mut self.box_conv, 1, 1)
    }

    /// All trainable layers, in checkpoint order.
    pub fn params(&self) -> Vec<&LayerParams> {
        let mut out: Vec<&LayerParams> = vec![&self.backbone1, &self.backbone2];
        if let Some(mr) = self.mr.as_ref() {
            out.push(&mr.conv1);
            out.push(&mr.conv2);
        }
        out.push(&self.box_conv);
        out.push(&self.box_fc);
        out
    }

    /// Adds another copy's accumulated gradients into this one's buffers.
    pub fn absorb_grads(&mut self, other: &Model) -> Result<()> {
        let theirs = other.params();
        let mut mine = self.params_mut();
        if mine.len() != theirs.len() {
            return Err(Error::State("cannot merge gradients across model layouts".into()));
        }
        for (m, t) in mine.iter_mut().zip(theirs) {
            m.absorb_grads(t)?;
        }
        Ok(())
    }

    /// Multiplies every gradient buffer by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.scale_grads(factor);
        }
    }

    /// All trainable layers, in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut out: Vec<&mut LayerParams> = vec![&mut self.backbone1, &mut self.backbone2];
        if let Some(mr) = self.mr.as_mut() {
            out.push(&mut mr.conv1);
            out.push(&mut mr.conv2);
        }
        out.push(&mut self.box_conv);
        out.push(&mut self.box_fc);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grads();
        }
    }

    fn entry_list(&self) -> Vec<(String, &Tensor)> {
        let mut layers: Vec<(&str, &LayerParams)> =
            vec![("backbone.conv1", &self.backbone1), ("backbone.conv2", &self.backbone2)];
        if let Some(mr) = self.mr.as_ref() {
            layers.push(("mr.conv1", &mr.conv1));
            layers.push(("mr.conv2", &mr.conv2));
        }
        layers.push(("box.conv", &self.box_conv));
        layers.push(("box.fc", &self.box_fc));
        let mut out = Vec::with_capacity(2 * layers.len());
        for (name, layer) in layers {
            out.push((format!("{name}.weights"), &layer.weights));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    /// Writes all parameters plus caller metadata to a manifest/blob pair.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let entries = self.entry_list();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        save_tensors(path, &refs, extra)
    }

    /// Restores a model from [`Self::save`] output. The reconstructor is
    /// present exactly when the checkpoint carries `mr.*` entries.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (entries, extra) = load_tensors(path)?;
        let mr_enabled = entries.iter().any(|(n, _)| n.starts_with("mr."));
        let mut model = Model::new(0, mr_enabled);
        let mut expected: std::collections::BTreeMap<String, &mut Tensor> =
            std::collections::BTreeMap::new();
        {
            let Model { backbone1, backbone2, mr, box_conv, box_fc } = &mut model;
            let mut layers: Vec<(&str, &mut LayerParams)> =
                vec![("backbone.conv1", backbone1), ("backbone.conv2", backbone2)];
            if let Some(mr) = mr.as_mut() {
                layers.push(("mr.conv1", &mut mr.conv1));
                layers.push(("mr.conv2", &mut mr.conv2));
            }
            layers.push(("box.conv", box_conv));
            layers.push(("box.fc", box_fc));
            for (name, layer) in layers {
                expected.insert(format!("{name}.weights"), &mut layer.weights);
                expected.insert(format!("{name}.bias"), &mut layer.bias);
            }
            for (name, tensor) in &entries {
                match expected.remove(name) {
                    None => {
                        return Err(Error::Checkpoint(format!(
                            "checkpoint entry '{name}' does not match any model parameter"
                        )))
                    }
                    Some(slot) => {
                        if slot.shape() != tensor.shape() {
                            return Err(Error::Checkpoint(format!(
                                "checkpoint entry '{name}' has shape {:?}, model expects {:?}",
                                tensor.shape(),
                                slot.shape()
                            )));
                        }
                        *slot = tensor.clone();
                    }
                }
            }
        }
        if !expected.is_empty() {
            let missing: Vec<&String> = expected.keys().collect();
            return Err(Error::Checkpoint(format!("checkpoint is missing entries: {missing:?}")));
        }
        model.zero_grads();
        Ok((model, extra))
    }
}

/// Episode-scoped embedding path: either an adapted reconstructor or the
/// pooled fallback. Owns its gradient state so per-scene work can run on
/// independent copies and be merged afterwards.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // Adapted dominates; boxing would cost an indirection per embed
pub enum EpisodeEmbedder {
    Adapted(Reconstructor),
    Pooling,
}

/// Cache for one [`EpisodeEmbedder::embed_with_cache`] call.
#[derive(Debug, Clone)]
pub enum EmbedderCache {
    Mr(EmbedCache),
    Pool(Vec<usize>),
}

impl EpisodeEmbedder {
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        match self {
            EpisodeEmbedder::Adapted(mr) => mr.embed(features),
            EpisodeEmbedder::Pooling => avgpool_global_forward(features),
        }
    }

    pub fn embed_with_cache(&self, features: &Tensor) -> Result<(Tensor, EmbedderCache)> {
        match self {
            EpisodeEmbedder::Adapted(mr) => {
                let (e, c) = mr.embed_with_cache(features)?;
                Ok((e, EmbedderCache::Mr(c)))
            }
            EpisodeEmbedder::Pooling => {
                let e = avgpool_global_forward(features)?;
                Ok((e, EmbedderCache::Pool(features.shape().to_vec())))
            }
        }
    }

    /// Backward through the embedding: accumulates reconstructor gradients
    /// (when adapted) and returns the gradient with respect to the feature map.
    pub fn embed_backward(&mut self, grad_embedding: &Tensor, cache: &EmbedderCache) -> Result<Tensor> {
        match (self, cache) {
            (EpisodeEmbedder::Adapted(mr), EmbedderCache::Mr(c)) => mr.embed_backward(grad_embedding, c),
            (EpisodeEmbedder::Pooling, EmbedderCache::Pool(shape)) => {
                avgpool_global_backward(grad_embedding, shape)
            }
            _ => Err(Error::State("embedder cache does not match the embedder kind".into())),
        }
    }

    pub fn zero_grads(&mut self) {
        if let EpisodeEmbedder::Adapted(mr) = self {
            mr.zero_grads();
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        if let EpisodeEmbedder::Adapted(mr) = self {
            mr.scale_grads(factor);
        }
    }

    /// Folds another copy's accumulated gradients into this one.
    pub fn absorb_grads(&mut self, other: &EpisodeEmbedder) -> Result<()> {
        match (self, other) {
            (EpisodeEmbedder::Adapted(a), EpisodeEmbedder::Adapted(b)) => {
                a.conv1.absorb_grads(&b.conv1)?;
                a.conv2.absorb_grads(&b.conv2)?;
                Ok(())
            }
            (EpisodeEmbedder::Pooling, EpisodeEmbedder::Pooling) => Ok(()),
            _ => Err(Error::State("cannot merge gradients across embedder kinds".into())),
        }
    }
}
