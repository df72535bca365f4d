//! Weighted multi-task objective and the two-stage training schedule.

mod model;

pub use model::{argmax, argmax_rows, Model, ModelConfig};

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    image_branch_loss, logits_from_projected, point_branch_loss, ClassId, ClassVocabulary, LossTerm, PixelRef,
};
use crate::engine::{
    clip_grad_global_norm, global_grad_norm, AdamWConfig, AdamWState, Graph, ParamStore, Var,
};
use crate::error::{Error, Result};
use crate::geometry::{matched_pairs_for_distill, project_points, transfer_labels, LabelGrid, PairEntry, PointPixelPairing};
use crate::scenegen::{SyntheticScene, POINT_FEATURES};
use crate::transfer::{
    build_distill_targets, feature_distill_loss, logit_distill_loss, vpm_forward, vpm_loss, vpm_match_labels,
    DistillTargets,
};

/// Loss values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Names of the logged loss components, in log order.
pub const COMPONENTS: [&str; 5] = ["image", "point", "distill_logit", "distill_feature", "vpm"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            delta: 1.0,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [("beta", self.beta), ("delta", self.delta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("loss weight {n} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Global gradient-norm cap for the image branch in stage 1.
    pub clip_norm: f64,
    pub image_optim: AdamWConfig,
    pub point_optim: AdamWConfig,
    /// Labelled pixels sampled per step for the image loss.
    pub pixels_per_step: usize,
    /// Points sampled per step in stage 2.
    pub points_per_step: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 300,
            stage2_steps: 300,
            clip_norm: 1.0,
            image_optim: AdamWConfig::new(3e-3, 1e-2),
            point_optim: AdamWConfig::new(1e-2, 1e-2),
            pixels_per_step: 1024,
            points_per_step: 1024,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("trainer.clip_norm must be positive"));
        }
        if self.pixels_per_step == 0 || self.points_per_step == 0 {
            return Err(Error::config("trainer per-step sample sizes must be positive"));
        }
        for (name, o) in [("image_optim", &self.image_optim), ("point_optim", &self.point_optim)] {
            if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2))
            {
                return Err(Error::config(format!("trainer.{name} has invalid hyperparameters")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VpmOptions {
    pub r_max: usize,
}

impl Default for VpmOptions {
    fn default() -> Self {
        Self { r_max: 1024 }
    }
}

/// Which transfer losses run in stage 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferOptions {
    /// Distill only novel-class pseudo-labels on unannotated points; when
    /// false every paired point is distilled with its pseudo-label.
    pub novel_only_distill: bool,
    pub feature_distill: bool,
    pub use_vpm: bool,
    /// Drop feature-distillation pairs the matcher scores below 0.5.
    pub use_vpm_filter: bool,
    /// Use the image branch as it was at the end of stage 1 as the teacher.
    pub freeze_teacher: bool,
    pub vpm: VpmOptions,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            novel_only_distill: true,
            feature_distill: true,
            use_vpm: true,
            use_vpm_filter: false,
            freeze_teacher: false,
            vpm: VpmOptions::default(),
        }
    }
}

impl TransferOptions {
    pub fn validate(&self) -> Result<()> {
        if self.vpm.r_max == 0 {
            return Err(Error::config("transfer.vpm.r_max must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    ImageOnly = 1,
    Joint = 2,
}

/// Logged values of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    /// (component name, value); one entry in stage 1, all five in stage 2.
    pub components: Vec<(&'static str, f64)>,
    pub total: f64,
    /// Image-branch gradient norm before clipping.
    pub image_grad_norm: f64,
    /// Image-branch gradient norm actually applied.
    pub image_grad_norm_applied: f64,
    pub point_grad_norm: f64,
    /// Checksum of the point-side parameters after the step.
    pub point_checksum: u64,
}

/// One training scene with its cached point inputs, pairing and labelled pixels.
#[derive(Clone, Debug)]
pub struct PreparedScene<'a> {
    pub scene: &'a SyntheticScene,
    pub inputs: Vec<f64>,
    pub pairing: PointPixelPairing,
    pub labelled_pixels: Vec<PixelRef>,
}

impl<'a> PreparedScene<'a> {
    pub fn new(scene: &'a SyntheticScene, extent: f64, vocab: &ClassVocabulary) -> Result<Self> {
        scene.cloud.validate(vocab)?;
        let pairing = project_points(&scene.cloud, &scene.calibrations);
        let mut labelled_pixels = Vec::new();
        for (cam, grid) in scene.pseudo_labels.iter().enumerate() {
            for row in 0..grid.height {
                for col in 0..grid.width {
                    if grid.get(col, row) != vocab.ignore() {
                        labelled_pixels.push((cam, col, row));
                    }
                }
            }
        }
        Ok(Self {
            scene,
            inputs: scene.point_inputs(extent),
            pairing,
            labelled_pixels,
        })
    }
}

pub fn prepare<'a>(scenes: &'a [SyntheticScene], extent: f64, vocab: &ClassVocabulary) -> Result<Vec<PreparedScene<'a>>> {
    scenes.iter().map(|s| PreparedScene::new(s, extent, vocab)).collect()
}

/// Optimiser states, step counter and loss log.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub stage: Stage,
    pub image_opt: AdamWState,
    pub point_opt: AdamWState,
    pub log: Vec<StepRecord>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    teacher: Option<ParamStore>,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &StageConfig) -> Self {
        Self {
            step: 0,
            stage: Stage::ImageOnly,
            image_opt: AdamWState::new(cfg.image_optim, &model.store, &model.image_params()),
            point_opt: AdamWState::new(cfg.point_optim, &model.store, &model.point_params()),
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1b),
            order: Vec::new(),
            teacher: None,
        }
    }

    /// Next scene index: scenes are visited in a seeded shuffled order, one
    /// fresh permutation per pass.
    fn next_scene(&mut self, n: usize) -> usize {
        if self.order.is_empty() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().expect("non-empty order")
    }
}

/// The five loss terms of one joint step.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub image: LossTerm,
    pub point: LossTerm,
    pub distill_logit: LossTerm,
    pub distill_feature: LossTerm,
    pub vpm: LossTerm,
}

impl LossComponents {
    pub fn values(&self) -> [f64; 5] {
        [
            self.image.value,
            self.point.value,
            self.distill_logit.value,
            self.distill_feature.value,
            self.vpm.value,
        ]
    }
}

/// β·image + δ·point + γ·(distill_logit + distill_feature) + γ·vpm on plain values.
pub fn total_loss_value(values: [f64; 5], w: &LossWeights) -> f64 {
    let [image, point, dl, df, vpm] = values;
    w.beta * image + w.delta * point + w.gamma * (dl + df) + w.gamma * vpm
}

/// Graph node for the weighted objective. A NaN component is reported by name.
pub fn total_loss(g: &mut Graph, c: &LossComponents, w: &LossWeights, step: usize) -> Result<Var> {
    for (name, v) in COMPONENTS.iter().zip(c.values()) {
        if v.is_nan() {
            return Err(Error::Training {
                step,
                component: (*name).to_string(),
                reason: "loss is NaN".into(),
            });
        }
    }
    let image = g.scale(c.image.var, w.beta);
    let point = g.scale(c.point.var, w.delta);
    let distill = g.add(c.distill_logit.var, c.distill_feature.var)?;
    let distill = g.scale(distill, w.gamma);
    let vpm = g.scale(c.vpm.var, w.gamma);
    let total = g.add(image, point)?;
    let total = g.add(total, distill)?;
    g.add(total, vpm)
}

fn check_divergence(step: usize, component: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value > DIVERGENCE_LIMIT {
        return Err(Error::Training {
            step,
            component: component.to_string(),
            reason: format!("loss diverged ({value})"),
        });
    }
    Ok(())
}

fn sample_sorted(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn scaled_logits(g: &mut Graph, model: &Model, projected: Var) -> Result<Var> {
    let logits = logits_from_projected(g, projected, &model.embeddings)?;
    Ok(g.scale(logits, model.config.logit_scale))
}

/// Image-branch loss over a random subset of labelled pixels.
fn image_loss(
    g: &mut Graph,
    model: &Model,
    prep: &PreparedScene,
    cfg: &StageConfig,
    vocab: &ClassVocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerm> {
    let chosen = sample_sorted(rng, prep.labelled_pixels.len(), cfg.pixels_per_step);
    if chosen.is_empty() {
        return Ok(LossTerm::empty(g));
    }
    let pixels: Vec<PixelRef> = chosen.iter().map(|&i| prep.labelled_pixels[i]).collect();
    let labels: Vec<ClassId> = pixels
        .iter()
        .map(|&(cam, col, row)| prep.scene.pseudo_labels[cam].get(col, row))
        .collect();
    let feats = model.image.forward(g, &model.store, &prep.scene.images, &pixels)?;
    let projected = model.image_head.project(g, &model.store, feats)?;
    let logits = scaled_logits(g, model, projected)?;
    Ok(image_branch_loss(g, logits, &labels, vocab)?.term)
}

/// Stage 1: image branch only, with gradient clipping.
pub fn train_stage1(
    model: &mut Model,
    data: &[PreparedScene],
    state: &mut TrainState,
    cfg: &StageConfig,
    vocab: &ClassVocabulary,
) -> Result<()> {
    if state.stage != Stage::ImageOnly {
        return Err(Error::contract("stage 1 requested after the stage transition"));
    }
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let image_ids = model.image_params();
    let point_ids = model.point_params();
    for _ in 0..cfg.stage1_steps {
        let step = state.step;
        let prep = &data[state.next_scene(data.len())];
        let mut g = Graph::new();
        let loss = image_loss(&mut g, model, prep, cfg, vocab, &mut state.rng)?;
        check_divergence(step, "image", loss.value)?;
        let (mut pre, mut post) = (0.0, 0.0);
        if !loss.empty {
            model.store.zero_grads(&image_ids);
            g.backward(loss.var, &mut model.store)?;
            pre = clip_grad_global_norm(&mut model.store, &image_ids, cfg.clip_norm);
            post = global_grad_norm(&model.store, &image_ids);
            state.image_opt.step(&mut model.store)?;
        }
        state.log.push(StepRecord {
            step,
            stage: Stage::ImageOnly,
            components: vec![("image", loss.value)],
            total: loss.value,
            image_grad_norm: pre,
            image_grad_norm_applied: post,
            point_grad_norm: 0.0,
            point_checksum: model.store.checksum(&point_ids),
        });
        state.step += 1;
    }
    Ok(())
}

/// Teacher predictions at a set of pixels: text-space projections and the
/// argmax class per pixel.
struct Teacher {
    index: HashMap<PixelRef, usize>,
    projected: Vec<f64>,
    grids: Vec<LabelGrid>,
}

fn run_teacher(
    model: &Model,
    store: &ParamStore,
    scene: &SyntheticScene,
    entries: &[PairEntry],
    ignore: ClassId,
) -> Result<Teacher> {
    let mut index = HashMap::new();
    let mut pixels = Vec::new();
    for e in entries {
        let (col, row) = e.pixel();
        let key = (e.camera, col, row);
        if let std::collections::hash_map::Entry::Vacant(e) = index.entry(key) {
            e.insert(pixels.len());
            pixels.push(key);
        }
    }
    let mut grids: Vec<LabelGrid> = scene
        .calibrations
        .iter()
        .map(|c| LabelGrid::filled(c.width, c.height, ignore))
        .collect();
    if pixels.is_empty() {
        return Ok(Teacher {
            index,
            projected: Vec::new(),
            grids,
        });
    }
    let mut g = Graph::new();
    let feats = model.image.forward(&mut g, store, &scene.images, &pixels)?;
    let projected = model.image_head.project(&mut g, store, feats)?;
    let logits = logits_from_projected(&mut g, projected, &model.embeddings)?;
    // argmax of σ(logits) equals argmax of the logits
    let classes = argmax_rows(g.value(logits), model.embeddings.classes());
    for (&(cam, col, row), &c) in pixels.iter().zip(&classes) {
        grids[cam].set(col, row, c);
    }
    Ok(Teacher {
        index,
        projected: g.value(projected).to_vec(),
        grids,
    })
}

impl Teacher {
    /// Constant node holding the teacher projections of the given entries' pixels.
    fn rows(&self, g: &mut Graph, entries: &[PairEntry], dim: usize) -> Result<Var> {
        let mut data = Vec::with_capacity(entries.len() * dim);
        for e in entries {
            let (col, row) = e.pixel();
            let i = self.index[&(e.camera, col, row)];
            data.extend_from_slice(&self.projected[i * dim..(i + 1) * dim]);
        }
        g.constant(entries.len(), dim, data)
    }
}

/// Stage 2: joint training of both branches with all loss components.
pub fn train_stage2(
    model: &mut Model,
    data: &[PreparedScene],
    state: &mut TrainState,
    cfg: &StageConfig,
    w: &LossWeights,
    opts: &TransferOptions,
    vocab: &ClassVocabulary,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if state.stage == Stage::ImageOnly {
        state.stage = Stage::Joint;
        if opts.freeze_teacher {
            state.teacher = Some(model.store.clone());
        }
    }
    let image_ids = model.image_params();
    let point_ids = model.point_params();
    let all_ids = model.all_params();
    let ignore = vocab.ignore();
    let dim = model.config.embed_dim;
    for _ in 0..cfg.stage2_steps {
        let step = state.step;
        let prep = &data[state.next_scene(data.len())];
        let scene = prep.scene;

        let points = sample_sorted(&mut state.rng, scene.num_points(), cfg.points_per_step);
        let pairing = prep.pairing.restrict(&points);
        let teacher_store = state.teacher.as_ref().unwrap_or(&model.store);
        let teacher = run_teacher(model, teacher_store, scene, &pairing.entries, ignore)?;

        let mut g = Graph::new();
        let image = image_loss(&mut g, model, prep, cfg, vocab, &mut state.rng)?;

        let inputs: Vec<f64> = points
            .iter()
            .flat_map(|&p| prep.inputs[p * POINT_FEATURES..(p + 1) * POINT_FEATURES].iter().copied())
            .collect();
        let (point_proj, point_cos) = model.point_forward(&mut g, &model.store, &inputs)?;
        let point_logits = g.scale(point_cos, model.config.logit_scale);

        let gt = scene.gt();
        let mask = scene.base_mask();
        let annotated: Vec<ClassId> = points
            .iter()
            .map(|&p| if mask[p] { gt[p] } else { ignore })
            .collect();
        let point = point_branch_loss(&mut g, point_logits, &annotated, true, vocab)?.term;

        let pseudo = transfer_labels(&pairing, &teacher.grids, vocab)?;
        let targets = if opts.novel_only_distill {
            let sub_mask: Vec<bool> = points.iter().map(|&p| mask[p]).collect();
            build_distill_targets(&pseudo, &sub_mask, vocab)?
        } else {
            DistillTargets(pseudo)
        };
        let distill_logit = logit_distill_loss(&mut g, point_logits, &targets, ignore)?.term;

        let point_classes = argmax_rows(g.value(point_cos), vocab.len());
        let distill_feature = if opts.feature_distill {
            let mut matched = matched_pairs_for_distill(&pairing, &teacher.grids, &point_classes, ignore);
            if opts.use_vpm_filter {
                matched = filter_by_matcher(model, &g, point_proj, &teacher, matched)?;
            }
            if matched.is_empty() {
                LossTerm::empty(&mut g)
            } else {
                let img = teacher.rows(&mut g, &matched, dim)?;
                let idx: Vec<usize> = matched.iter().map(|e| e.point).collect();
                let pts = g.gather_rows(point_proj, &idx)?;
                feature_distill_loss(&mut g, img, pts)?
            }
        } else {
            LossTerm::empty(&mut g)
        };

        let vpm = if opts.use_vpm && !pairing.is_empty() {
            let keep = sample_sorted(&mut state.rng, pairing.len(), opts.vpm.r_max);
            let entries: Vec<PairEntry> = keep.iter().map(|&i| pairing.entries[i]).collect();
            let labels = vpm_match_labels(&entries, &point_classes, &teacher.grids, ignore);
            let img = teacher.rows(&mut g, &entries, dim)?;
            let idx: Vec<usize> = entries.iter().map(|e| e.point).collect();
            let pts = g.gather_rows(point_proj, &idx)?;
            let logits = vpm_forward(&mut g, &model.store, img, pts, &model.vpm)?;
            vpm_loss(&mut g, logits, &labels)?
        } else {
            LossTerm::empty(&mut g)
        };

        let parts = LossComponents {
            image,
            point,
            distill_logit,
            distill_feature,
            vpm,
        };
        let total = total_loss(&mut g, &parts, w, step)?;
        for (name, v) in COMPONENTS.iter().zip(parts.values()) {
            check_divergence(step, name, v)?;
        }
        let total_value = g.scalar(total);
        check_divergence(step, "total", total_value)?;

        model.store.zero_grads(&all_ids);
        g.backward(total, &mut model.store)?;
        let image_norm = global_grad_norm(&model.store, &image_ids);
        let point_norm = global_grad_norm(&model.store, &point_ids);
        state.image_opt.step(&mut model.store)?;
        state.point_opt.step(&mut model.store)?;
        state.log.push(StepRecord {
            step,
            stage: Stage::Joint,
            components: COMPONENTS.iter().copied().zip(parts.values()).collect(),
            total: total_value,
            image_grad_norm: image_norm,
            image_grad_norm_applied: image_norm,
            point_grad_norm: point_norm,
            point_checksum: model.store.checksum(&point_ids),
        });
        state.step += 1;
    }
    Ok(())
}

/// Keeps the pairs whose matcher probability of "matched" is at least 0.5.
fn filter_by_matcher(
    model: &Model,
    g: &Graph,
    point_proj: Var,
    teacher: &Teacher,
    matched: Vec<PairEntry>,
) -> Result<Vec<PairEntry>> {
    if matched.is_empty() {
        return Ok(matched);
    }
    let dim = model.config.embed_dim;
    let values = g.value(point_proj);
    let mut scratch = Graph::new();
    let img = teacher.rows(&mut scratch, &matched, dim)?;
    let mut pts = Vec::with_capacity(matched.len() * dim);
    for e in &matched {
        pts.extend_from_slice(&values[e.point * dim..(e.point + 1) * dim]);
    }
    let pts = scratch.constant(matched.len(), dim, pts)?;
    let logits = vpm_forward(&mut scratch, &model.store, img, pts, &model.vpm)?;
    let probs = scratch.softmax_rows(logits);
    let p = scratch.value(probs);
    Ok(matched
        .into_iter()
        .enumerate()
        .filter(|(i, _)| p[i * 2 + 1] >= 0.5)
        .map(|(_, e)| e)
        .collect())
}

/// Everything needed to train one model besides data and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub stage: StageConfig,
    pub weights: LossWeights,
    pub transfer: TransferOptions,
    /// Workspace half-width used to normalise point coordinates.
    pub extent: f64,
}

impl TrainSetup {
    pub fn train(&self, data: &[PreparedScene], vocab: &ClassVocabulary, seed: u64) -> Result<(Model, TrainState)> {
        let stage = StageConfig {
            seed,
            ..self.stage.clone()
        };
        run_two_stage(data, &self.model, &stage, &self.weights, &self.transfer, vocab)
    }
}

/// Stage 1 followed by stage 2 on a freshly initialised model.
pub fn run_two_stage(
    data: &[PreparedScene],
    model_cfg: &ModelConfig,
    cfg: &StageConfig,
    w: &LossWeights,
    opts: &TransferOptions,
    vocab: &ClassVocabulary,
) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    w.validate()?;
    opts.validate()?;
    let mut model = Model::new(model_cfg, vocab, cfg.seed)?;
    let mut state = TrainState::new(&model, cfg);
    train_stage1(&mut model, data, &mut state, cfg, vocab)?;
    train_stage2(&mut model, data, &mut state, cfg, w, opts, vocab)?;
    Ok((model, state))
}

#[cfg(test)]
mod tests;
