//! The three-stage training driver: schedules, freeze plans, AdamW and the
//! per-stage step loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{nets, params, Component, ComponentSet, ModelState, TextTokens, VitParams};
use crate::objectives::{self, RegionTask};
use crate::patching::{patchify, sample_mask, ImageTensor, TokenSequence, PATCH, SNAP_MULTIPLE};
use crate::real::Real;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(Stage::I),
            2 => Some(Stage::II),
            3 => Some(Stage::III),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }
}

fn default_warmup() -> f64 {
    0.03
}
fn default_unfreeze() -> f64 {
    0.5
}
fn default_mask_ratio() -> f64 {
    0.75
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.05
}

/// Hyperparameters of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub samples_target: u64,
    pub batch_size: usize,
    pub max_resolution: u32,
    pub lr_peak: f64,
    /// Defaults to `lr_peak / 100`.
    #[serde(default)]
    pub lr_min: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub trainable: ComponentSet,
    /// Text context cap `(start, end)`, interpolated over the stage.
    pub context_cap_schedule: (usize, usize),
    /// Maximum image side `(start, end)`, interpolated over the stage.
    pub resolution_schedule: (u32, u32),
    /// Progress after which the text encoder joins the trainable set.
    #[serde(default = "default_unfreeze")]
    pub text_unfreeze_fraction: f64,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl StageConfig {
    /// MIM against a frozen teacher at 256² (snapped to 252²).
    pub fn paper_stage1() -> Self {
        Self {
            stage: Stage::I,
            samples_target: 1_800_000_000,
            batch_size: 4096,
            max_resolution: 256,
            lr_peak: 1e-3,
            lr_min: None,
            warmup_fraction: default_warmup(),
            trainable: ComponentSet::of(&[Component::Vit]),
            context_cap_schedule: (64, 64),
            resolution_schedule: (256, 256),
            text_unfreeze_fraction: default_unfreeze(),
            mask_ratio: default_mask_ratio(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            grad_clip: Some(1.0),
        }
    }

    /// Sigmoid contrastive alignment, resolution 336→448, context 64→256.
    pub fn paper_stage2() -> Self {
        Self {
            stage: Stage::II,
            samples_target: 9_300_000_000,
            batch_size: 49_152,
            max_resolution: 448,
            lr_peak: 1e-4,
            trainable: ComponentSet::of(&[Component::Vit, Component::TextEncoder]),
            context_cap_schedule: (64, 256),
            resolution_schedule: (336, 448),
            ..Self::paper_stage1()
        }
    }

    /// Autoregressive alignment with the decoder at up to 1000².
    pub fn paper_stage3() -> Self {
        Self {
            stage: Stage::III,
            samples_target: 500_000_000,
            batch_size: 4096,
            max_resolution: 1000,
            lr_peak: 1e-5,
            trainable: ComponentSet::of(&[Component::Vit, Component::Projector, Component::Decoder]),
            context_cap_schedule: (256, 256),
            resolution_schedule: (1000, 1000),
            ..Self::paper_stage1()
        }
    }

    pub fn paper(stage: Stage) -> Self {
        match stage {
            Stage::I => Self::paper_stage1(),
            Stage::II => Self::paper_stage2(),
            Stage::III => Self::paper_stage3(),
        }
    }

    /// Desk-scale presets sized for the synthetic shapes corpora.
    pub fn toy(stage: Stage) -> Self {
        let base = Self::paper(stage);
        match stage {
            Stage::I => Self {
                samples_target: 200 * 8,
                batch_size: 8,
                max_resolution: 56,
                resolution_schedule: (56, 56),
                lr_peak: 1e-3,
                weight_decay: 0.0,
                ..base
            },
            Stage::II => Self {
                samples_target: 1_500 * 16,
                batch_size: 16,
                max_resolution: 56,
                resolution_schedule: (56, 56),
                lr_peak: 3e-3,
                weight_decay: 0.0,
                ..base
            },
            Stage::III => Self {
                samples_target: 3_000 * 8,
                batch_size: 8,
                max_resolution: 56,
                resolution_schedule: (56, 56),
                lr_peak: 2e-3,
                weight_decay: 0.0,
                ..base
            },
        }
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_min.unwrap_or(self.lr_peak / 100.0)
    }

    pub fn total_steps(&self) -> u64 {
        self.samples_target.div_ceil(self.batch_size.max(1) as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("stage{}.{f}", self.stage.number());
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be positive"));
        }
        if self.samples_target == 0 {
            return Err(Error::config(field("samples_target"), "must be positive"));
        }
        if !(self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            return Err(Error::config(field("lr_peak"), "must be positive"));
        }
        if !(0.0..=self.lr_peak).contains(&self.lr_min()) {
            return Err(Error::config(field("lr_min"), "must lie in [0, lr_peak]"));
        }
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("text_unfreeze_fraction", self.text_unfreeze_fraction),
            ("mask_ratio", self.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field(name), "must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(field("beta1"), "betas must lie in [0, 1)"));
        }
        if self.max_resolution < SNAP_MULTIPLE {
            return Err(Error::config(field("max_resolution"), format!("must be at least {SNAP_MULTIPLE}")));
        }
        let (a, b) = self.resolution_schedule;
        if a < SNAP_MULTIPLE || b < SNAP_MULTIPLE || a.max(b) > self.max_resolution {
            return Err(Error::config(
                field("resolution_schedule"),
                format!("endpoints must lie in [{SNAP_MULTIPLE}, max_resolution]"),
            ));
        }
        if self.context_cap_schedule.0 == 0 || self.context_cap_schedule.1 == 0 {
            return Err(Error::config(field("context_cap_schedule"), "caps must be positive"));
        }
        if self.trainable.is_empty() {
            return Err(Error::config(field("trainable"), "no trainable component"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak` over `floor(warmup_fraction · total)`
/// steps, then cosine decay to `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr_peak: f64, lr_min: f64, warmup_fraction: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine_lr: total must be positive"));
    }
    if step > total {
        return Err(Error::invalid(format!("cosine_lr: step {step} beyond total {total}")));
    }
    let warmup = libm::floor(warmup_fraction.clamp(0.0, 1.0) * total as f64) as u64;
    if step < warmup {
        return Ok(lr_peak * step as f64 / warmup as f64);
    }
    let decay = total - warmup;
    let progress = if decay == 0 { 1.0 } else { (step - warmup) as f64 / decay as f64 };
    Ok(lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

/// Trainable set at `progress`: the stage set, minus the text encoder until
/// `text_unfreeze_fraction` is reached.
pub fn freeze_plan(stage: &StageConfig, progress: f64) -> ComponentSet {
    let mut set = stage.trainable;
    if progress < stage.text_unfreeze_fraction {
        set.remove(Component::TextEncoder);
    }
    set
}

/// Maximum side at `progress`, linearly interpolated and snapped down to a
/// multiple of 28.
pub fn resolution_at(stage: &StageConfig, progress: f64) -> u32 {
    let (a, b) = stage.resolution_schedule;
    let p = progress.clamp(0.0, 1.0);
    let side = a as f64 + (b as f64 - a as f64) * p;
    let snapped = (libm::floor(side / SNAP_MULTIPLE as f64) as u32) * SNAP_MULTIPLE;
    snapped.clamp(SNAP_MULTIPLE, stage.max_resolution.max(SNAP_MULTIPLE))
}

/// Text context cap at `progress`, linearly interpolated and floored.
pub fn context_at(stage: &StageConfig, progress: f64) -> usize {
    let (a, b) = stage.context_cap_schedule;
    let p = progress.clamp(0.0, 1.0);
    libm::floor(a as f64 + (b as f64 - a as f64) * p).max(1.0) as usize
}

/// AdamW moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keyed by parameter name; each slot counts its own steps so that a
    /// component unfrozen mid-stage gets full bias correction.
    pub slots: BTreeMap<String, Moments<S>>,
}

impl<S: Real> OptimizerState<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    pub fn for_stage(cfg: &StageConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }
}

/// One bias-corrected AdamW update of every `(name, param)` with its
/// gradient. Weight decay is decoupled and skips tensors of rank below 2.
/// Nothing is modified when any gradient is non-finite.
pub fn adamw_step<S: Real>(
    opt: &mut OptimizerState<S>,
    params: &mut [(&str, &mut Tensor<S>)],
    grads: &[&Tensor<S>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: alloc::vec![params.len()],
            rhs: alloc::vec![grads.len()],
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite((*name).into()));
        }
    }
    for ((name, p), g) in params.iter_mut().zip(grads) {
        update(opt, name, p, g, lr);
    }
    Ok(())
}

fn update<S: Real>(opt: &mut OptimizerState<S>, name: &str, p: &mut Tensor<S>, g: &Tensor<S>, lr: f64) {
    let slot = opt.slots.entry(name.into()).or_insert_with(|| Moments {
        m: Tensor::zeros(p.shape()),
        v: Tensor::zeros(p.shape()),
        step: 0,
    });
    slot.step += 1;
    let c1 = 1.0 - libm::pow(opt.beta1, slot.step as f64);
    let c2 = 1.0 - libm::pow(opt.beta2, slot.step as f64);
    let decay = if p.rank() >= 2 { 1.0 - lr * opt.weight_decay } else { 1.0 };
    let (b1, b2) = (S::of(opt.beta1), S::of(opt.beta2));
    let (c1, c2, eps, lr, decay) = (S::of(c1), S::of(c2), S::of(opt.eps), S::of(lr), S::of(decay));
    let m = slot.m.data_mut();
    let v = slot.v.data_mut();
    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
        m[i] = b1 * m[i] + (S::one() - b1) * gi;
        v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
        *w = *w * decay - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Image { id: String, image: ImageTensor },
    Pair { id: String, image: ImageTensor, caption: String },
    Region { id: String, image: ImageTensor, task: RegionTask },
}

impl Sample {
    pub fn id(&self) -> &str {
        match self {
            Sample::Image { id, .. } | Sample::Pair { id, .. } | Sample::Region { id, .. } => id,
        }
    }

    pub fn image(&self) -> &ImageTensor {
        match self {
            Sample::Image { image, .. } | Sample::Pair { image, .. } | Sample::Region { image, .. } => image,
        }
    }
}

/// One metrics line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub res: u32,
    pub ctx: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub metrics: Vec<MetricRow>,
    pub steps: u64,
    pub samples: u64,
    /// The stream ran dry before `samples_target`.
    pub exhausted: bool,
    /// Text inputs cut at the context cap.
    pub truncated_texts: u64,
}

/// Patch tokens of `image` at the snapped native resolution under `max_side`.
pub fn tokens_at(image: &ImageTensor, max_side: u32) -> Result<TokenSequence> {
    patchify(&image.snapped(max_side), PATCH)
}

/// Encoder features without gradient tracking.
fn features<S: Real>(vit: &VitParams<Tensor<S>>, cfg: &crate::models::EncoderConfig, seq: &TokenSequence) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let p = params::bind(vit, &mut g, false);
    let out = nets::encode_image(&mut g, &p, cfg, seq, None)?;
    Ok(g.value(out.features).clone())
}

struct Bound {
    vit: Option<VitParams<Var>>,
    text: Option<crate::models::TextParams<Var>>,
    projector: Option<crate::models::ProjectorParams<Var>>,
    decoder: Option<crate::models::DecoderParams<Var>>,
}

/// Runs `stage` over `data` and updates `state` in place.
///
/// Every step draws `batch_size` samples; the stream running dry ends the
/// stage after the last (possibly partial) batch with `exhausted` set.
/// Components outside the current freeze plan are never written.
pub fn run_stage<S: Real>(
    cfg: &StageConfig,
    data: &mut dyn Iterator<Item = Sample>,
    state: &mut ModelState<S>,
    seed: u64,
) -> Result<StageReport> {
    cfg.validate()?;
    let total = cfg.total_steps();
    let mut opt = OptimizerState::for_stage(cfg);
    let teacher = (cfg.stage == Stage::I).then(|| ModelState::<S>::teacher(&state.config.encoder, seed));
    let mut teacher_cache: BTreeMap<(String, u32), Tensor<S>> = BTreeMap::new();
    let mut report = StageReport {
        metrics: Vec::new(),
        steps: 0,
        samples: 0,
        exhausted: false,
        truncated_texts: 0,
    };

    for step in 0..total {
        // The first step sits at progress 0 and the last at 1, so both ends
        // of every schedule appear in the log.
        let progress = if total > 1 { step as f64 / (total - 1) as f64 } else { 0.0 };
        let plan = freeze_plan(cfg, progress);
        let res = resolution_at(cfg, progress);
        let ctx = context_at(cfg, progress);
        let lr = cosine_lr(step + 1, total, cfg.lr_peak, cfg.lr_min(), cfg.warmup_fraction)?;

        let batch: Vec<Sample> = data.take(cfg.batch_size).collect();
        if batch.is_empty() {
            report.exhausted = true;
            break;
        }
        let partial = batch.len() < cfg.batch_size;

        let mut g = Graph::new();
        let needs = |c: Component| match cfg.stage {
            Stage::I => c == Component::Vit,
            Stage::II => matches!(c, Component::Vit | Component::TextEncoder),
            Stage::III => matches!(c, Component::Vit | Component::Projector | Component::Decoder),
        };
        let bound = Bound {
            vit: needs(Component::Vit).then(|| params::bind(&state.vit, &mut g, plan.contains(Component::Vit))),
            text: needs(Component::TextEncoder)
                .then(|| params::bind(&state.text, &mut g, plan.contains(Component::TextEncoder))),
            projector: needs(Component::Projector)
                .then(|| params::bind(&state.projector, &mut g, plan.contains(Component::Projector))),
            decoder: needs(Component::Decoder)
                .then(|| params::bind(&state.decoder, &mut g, plan.contains(Component::Decoder))),
        };
        let vit = bound.vit.as_ref().expect("every stage uses the image encoder");

        let loss = match cfg.stage {
            Stage::I => {
                let teacher = teacher.as_ref().expect("teacher exists in stage I");
                let mut parts = Vec::with_capacity(batch.len());
                for (i, s) in batch.iter().enumerate() {
                    let seq = tokens_at(s.image(), res)?;
                    let key = (String::from(s.id()), res);
                    if !teacher_cache.contains_key(&key) {
                        let t = features(teacher, &state.config.encoder, &seq)?;
                        teacher_cache.insert(key.clone(), t);
                    }
                    let mask_seed = rng::derive_seed(seed, &format!("mask/{step}/{i}"));
                    let mask = sample_mask(seq.len(), cfg.mask_ratio, mask_seed)?;
                    if mask.is_empty() {
                        continue;
                    }
                    let out = nets::encode_image(&mut g, vit, &state.config.encoder, &seq, Some(&mask))?;
                    parts.push(objectives::mim_loss(&mut g, out.features, &teacher_cache[&key], &mask)?);
                }
                mean_of(&mut g, &parts)?
            }
            Stage::II => {
                let text = bound.text.as_ref().expect("stage II binds the text encoder");
                let d = state.config.embed_dim();
                let mut imgs = Vec::with_capacity(batch.len());
                let mut txts = Vec::with_capacity(batch.len());
                for s in &batch {
                    let Sample::Pair { image, caption, .. } = s else {
                        return Err(Error::invalid(format!("stage II needs image-text pairs, got {:?}", s.id())));
                    };
                    let seq = tokens_at(image, res)?;
                    let out = nets::encode_image(&mut g, vit, &state.config.encoder, &seq, None)?;
                    imgs.push(g.reshape(out.pooled, &[1, d])?);
                    let tokens = TextTokens::from_text(caption, ctx);
                    report.truncated_texts += tokens.truncated() as u64;
                    let e = nets::encode_text(&mut g, text, &state.config.text, tokens.ids())?;
                    txts.push(g.reshape(e, &[1, d])?);
                }
                let img = g.concat(&imgs, 0)?;
                let txt = g.concat(&txts, 0)?;
                objectives::siglip_loss(&mut g, img, txt, vit.log_tau, vit.logit_bias)?
            }
            Stage::III => {
                let projector = bound.projector.as_ref().expect("stage III binds the projector");
                let decoder = bound.decoder.as_ref().expect("stage III binds the decoder");
                let mut parts = Vec::with_capacity(batch.len());
                for s in &batch {
                    let Sample::Region { image, task, .. } = s else {
                        return Err(Error::invalid(format!("stage III needs region tasks, got {:?}", s.id())));
                    };
                    let seq = tokens_at(image, res)?;
                    let out = nets::encode_image(&mut g, vit, &state.config.encoder, &seq, None)?;
                    let prefix = nets::project(&mut g, projector, out.features)?;
                    let (mut ids, mut sup) = objectives::task_tokens(task);
                    if ids.len() > ctx {
                        report.truncated_texts += 1;
                        ids.truncate(ctx);
                        sup.truncate(ctx);
                    }
                    if !sup.iter().any(|&s| s) {
                        continue;
                    }
                    let vp = nets::VisualPrefix {
                        tokens: prefix,
                        grid: seq.grid,
                    };
                    let logits = nets::decode(&mut g, decoder, &state.config.decoder, Some(vp), &ids)?;
                    parts.push(objectives::ar_loss(&mut g, logits, &ids, Some(&sup))?.mean);
                }
                mean_of(&mut g, &parts)?
            }
        };

        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("stage {} loss at step {}", cfg.stage.number(), step + 1)));
        }
        g.backward(loss)?;

        let mut grads: Vec<(Component, Vec<Tensor<S>>)> = Vec::new();
        for c in plan.iter() {
            let gs = match c {
                Component::Vit => bound.vit.as_ref().map(|b| params::grads(b, &g)),
                Component::TextEncoder => bound.text.as_ref().map(|b| params::grads(b, &g)),
                Component::Projector => bound.projector.as_ref().map(|b| params::grads(b, &g)),
                Component::Decoder => bound.decoder.as_ref().map(|b| params::grads(b, &g)),
            };
            if let Some(gs) = gs {
                grads.push((c, gs));
            }
        }
        drop(g);

        if let Some(max_norm) = cfg.grad_clip {
            let sq: f64 = grads
                .iter()
                .flat_map(|(_, gs)| gs.iter())
                .flat_map(|t| t.data().iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum();
            let norm = libm::sqrt(sq);
            if norm > max_norm {
                let f = S::of(max_norm / norm);
                for t in grads.iter_mut().flat_map(|(_, gs)| gs.iter_mut()) {
                    t.data_mut().iter_mut().for_each(|v| *v *= f);
                }
            }
        }

        for (c, gs) in &grads {
            let mut names = Vec::with_capacity(gs.len());
            state.visit(*c, &mut |name, _| names.push(format!("{}.{name}", c.name())));
            if let Some(i) = gs.iter().position(|t| !t.is_finite()) {
                return Err(Error::NonFinite(names[i].clone()));
            }
            let mut i = 0;
            state.visit_mut(*c, &mut |_, t| {
                update(&mut opt, &names[i], t, &gs[i], lr);
                i += 1;
            });
        }

        state.trainable = plan;
        report.steps += 1;
        report.samples += batch.len() as u64;
        report.metrics.push(MetricRow {
            step: step + 1,
            loss: loss_value,
            lr,
            res,
            ctx,
        });
        if partial {
            report.exhausted = true;
            break;
        }
    }
    Ok(report)
}

fn mean_of<S: Real>(g: &mut Graph<S>, parts: &[Var]) -> Result<Var> {
    let Some(&first) = parts.first() else {
        return Err(Error::invalid("batch produced no loss terms"));
    };
    let mut acc = first;
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let total = 1000;
        let warm = 30;
        assert_eq!(cosine_lr(warm, total, 1.0, 0.01, 0.03).unwrap(), 1.0);
        assert_eq!(cosine_lr(total, total, 1.0, 0.01, 0.03).unwrap(), 0.01);
        let mid = cosine_lr(warm + (total - warm) / 2, total, 1.0, 0.01, 0.03).unwrap();
        assert!((mid - 0.505).abs() < 1e-12);
        assert!(cosine_lr(0, 0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn paper_resolutions() {
        let s2 = StageConfig::paper_stage2();
        assert_eq!(resolution_at(&s2, 0.0), 336);
        assert_eq!(resolution_at(&s2, 1.0), 448);
        assert_eq!(resolution_at(&StageConfig::paper_stage3(), 0.4), 980);
        assert_eq!(resolution_at(&StageConfig::paper_stage1(), 0.0), 252);
        assert_eq!(context_at(&s2, 0.0), 64);
        assert_eq!(context_at(&s2, 1.0), 256);
    }

    #[test]
    fn freeze_plans() {
        let s2 = StageConfig::paper_stage2();
        assert_eq!(freeze_plan(&s2, 0.1), ComponentSet::of(&[Component::Vit]));
        assert_eq!(freeze_plan(&s2, 0.9), ComponentSet::of(&[Component::Vit, Component::TextEncoder]));
        let s3 = StageConfig::paper_stage3();
        assert_eq!(
            freeze_plan(&s3, 0.0),
            ComponentSet::of(&[Component::Vit, Component::Projector, Component::Decoder])
        );
    }

    #[test]
    fn adamw_examples() {
        let mut opt = OptimizerState::<f64>::new(0.9, 0.999, 1e-8, 0.0);
        let mut p = Tensor::zeros(&[1, 1]);
        let g = Tensor::full(&[1, 1], 1.0);
        adamw_step(&mut opt, &mut [("w", &mut p)], &[&g], 0.1).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-6);

        let mut opt = OptimizerState::<f64>::new(0.9, 0.999, 1e-8, 0.5);
        let mut p = Tensor::full(&[2, 2], 2.0);
        let z = Tensor::zeros(&[2, 2]);
        adamw_step(&mut opt, &mut [("w", &mut p)], &[&z], 0.1).unwrap();
        assert!(p.data().iter().all(|&v| (v - 2.0 * (1.0 - 0.05)).abs() < 1e-15));

        let bad = Tensor::full(&[2, 2], f64::NAN);
        let err = adamw_step(&mut opt, &mut [("layer.w", &mut p)], &[&bad], 0.1).unwrap_err();
        assert!(format!("{err}").contains("layer.w"));
    }
}
