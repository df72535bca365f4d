use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    embed_text, logits_from_projected, ClassVocabulary, ImageExtractor, PointExtractor, ProjectionHead,
    TextEmbeddings,
};
use crate::engine::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scenegen::{IMAGE_CHANNELS, POINT_FEATURES};
use crate::transfer::VpmParams;

/// Network sizes. `logit_scale` multiplies the cosine logits before any
/// softmax-based loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub text_seed: u64,
    pub image_conv: [usize; 2],
    pub image_feat: usize,
    pub point_hidden: usize,
    pub point_feat: usize,
    pub vpm_heads: usize,
    pub logit_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            text_seed: 0,
            image_conv: [12, 24],
            image_feat: 24,
            point_hidden: 48,
            point_feat: 24,
            vpm_heads: 2,
            logit_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.embed_dim,
            self.image_conv[0],
            self.image_conv[1],
            self.image_feat,
            self.point_hidden,
            self.point_feat,
        ];
        if sizes.contains(&0) {
            return Err(Error::config("model layer sizes must be positive"));
        }
        if self.vpm_heads == 0 || !self.embed_dim.is_multiple_of(self.vpm_heads) {
            return Err(Error::config(format!(
                "model.vpm_heads ({}) must divide model.embed_dim ({})",
                self.vpm_heads, self.embed_dim
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config("model.logit_scale must be positive"));
        }
        Ok(())
    }
}

/// All learned components plus the frozen text embeddings.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: TextEmbeddings,
    pub image: ImageExtractor,
    pub image_head: ProjectionHead,
    pub point: PointExtractor,
    pub point_head: ProjectionHead,
    pub vpm: VpmParams,
}

impl Model {
    pub fn new(config: &ModelConfig, vocab: &ClassVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let embeddings = embed_text(vocab, config.embed_dim, config.text_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageExtractor::new(
            &mut store,
            IMAGE_CHANNELS,
            (config.image_conv[0], config.image_conv[1]),
            config.image_feat,
            &mut rng,
        );
        let image_head = ProjectionHead::new(&mut store, "image.head", config.image_feat, config.embed_dim, &mut rng);
        let point = PointExtractor::new(&mut store, POINT_FEATURES, config.point_hidden, config.point_feat, &mut rng);
        let point_head = ProjectionHead::new(&mut store, "point.head", config.point_feat, config.embed_dim, &mut rng);
        let vpm = VpmParams::new(&mut store, config.embed_dim, config.vpm_heads, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            embeddings,
            image,
            image_head,
            point,
            point_head,
            vpm,
        })
    }

    /// Image extractor and its text-space head.
    pub fn image_params(&self) -> Vec<ParamId> {
        let mut ids = self.image.params();
        ids.push(self.image_head.weight);
        ids
    }

    /// Point extractor, its head and the matching module.
    pub fn point_params(&self) -> Vec<ParamId> {
        let mut ids = self.point.params();
        ids.push(self.point_head.weight);
        ids.extend(self.vpm.params());
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Text-space projections and cosine logits for N×[`POINT_FEATURES`] inputs.
    pub fn point_forward(&self, g: &mut Graph, store: &ParamStore, inputs: &[f64]) -> Result<(Var, Var)> {
        let feats = self.point.forward(g, store, inputs)?;
        let projected = self.point_head.project(g, store, feats)?;
        let logits = logits_from_projected(g, projected, &self.embeddings)?;
        Ok((projected, logits))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax of a row-major matrix with `cols` columns.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values.chunks(cols).map(argmax).collect()
}
