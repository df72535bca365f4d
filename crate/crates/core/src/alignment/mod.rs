//! Class vocabulary, frozen text embeddings, feature extractors, cosine
//! logit heads and the per-branch segmentation losses.

mod embed;
mod extractor;
mod losses;
mod vocab;

pub use embed::{embed_text, TextEmbeddings};
pub use extractor::{
    compute_logits, logits_from_projected, FeatureImage, ImageExtractor, Linear, PixelRef,
    PointExtractor, ProjectionHead,
};
pub use losses::{ce_dice_loss, image_branch_loss, point_branch_loss, LossTerm, SegLoss, DICE_SMOOTH};
pub use vocab::{ClassId, ClassVocabulary, Split};

#[cfg(test)]
pub(crate) use losses::tests::ce_dice_oracle;
