//! Evaluation reports over trained states.

use std::collections::BTreeMap;

use anyhow::Result;
use forge_core::curriculum::{tokens_at, StageConfig};
use forge_core::evalkit::{self, synth::GroundingExample, Direction};
use forge_core::models::{ModelState, TextTokens};
use forge_core::objectives::{
    format_region_task, parse_box, quantize_box, task_prompt, RegionAnnotation, RegionKind, RegionTask, TaskKind,
};
use forge_core::patching::ImageTensor;
use forge_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::grounding_sample;

/// Resolution cap and text context used at evaluation: the end of Stage II.
pub fn eval_geometry(stage2: &StageConfig) -> (u32, usize) {
    (stage2.resolution_schedule.1, stage2.context_cap_schedule.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: String,
    pub n: usize,
    /// Recall keyed `"t2i@1"`, `"i2t@5"` and so on.
    pub recall: BTreeMap<String, f64>,
    pub truncated_texts: usize,
}

pub fn retrieval(
    state: &ModelState<f32>,
    images: &[ImageTensor],
    captions: &[String],
    (res, ctx): (u32, usize),
    ks: &[usize],
) -> Result<RetrievalReport> {
    let seqs = images.iter().map(|i| tokens_at(i, res)).collect::<forge_core::Result<Vec<_>>>()?;
    let texts: Vec<TextTokens> = captions.iter().map(|c| TextTokens::from_text(c, ctx)).collect();
    let sim = evalkit::similarity(&evalkit::embed_images(state, &seqs)?, &evalkit::embed_texts(state, &texts)?)?;
    let mut recall = BTreeMap::new();
    for &k in ks {
        for (name, d) in [("t2i", Direction::T2I), ("i2t", Direction::I2T)] {
            recall.insert(format!("{name}@{k}"), evalkit::recall_at_k(&sim, k, d)?);
        }
    }
    Ok(RetrievalReport {
        task: "retrieval".into(),
        n: images.len(),
        recall,
        truncated_texts: texts.iter().filter(|t| t.truncated()).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub task: String,
    pub n: usize,
    pub classes: usize,
    pub accuracy: f64,
}

/// Prompt templates per class label.
pub const CLASS_TEMPLATES: [&str; 3] = ["{}", "a {}", "a picture of a {}"];

/// Zero-shot classification of `images` against `labels` (the class of
/// image `i` is `truth[i]`).
pub fn classify(
    state: &ModelState<f32>,
    images: &[ImageTensor],
    truth: &[usize],
    labels: &[String],
    (res, ctx): (u32, usize),
) -> Result<ClassifyReport> {
    let classes: Vec<Tensor<f32>> = labels
        .iter()
        .map(|l| {
            let prompts: Vec<TextTokens> = CLASS_TEMPLATES
                .iter()
                .map(|t| TextTokens::from_text(&t.replace("{}", l), ctx))
                .collect();
            evalkit::embed_texts(state, &prompts)
        })
        .collect::<forge_core::Result<_>>()?;
    let mut hits = 0;
    for (img, &t) in images.iter().zip(truth) {
        let seq = tokens_at(img, res)?;
        let e = evalkit::embed_images(state, std::slice::from_ref(&seq))?;
        let e = Tensor::new(&[e.cols()], e.into_data())?;
        hits += (evalkit::zeroshot_classify(&e, &classes)? == t) as usize;
    }
    Ok(ClassifyReport {
        task: "classify".into(),
        n: images.len(),
        classes: labels.len(),
        accuracy: hits as f64 / images.len().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub task: String,
    pub n: usize,
    pub iou_threshold: f64,
    pub accuracy: f64,
    /// Outputs that contained a well-formed box.
    pub parsed: usize,
    /// Every gold box's bbox-to-string prompt parses back to its quantized
    /// coordinates.
    pub roundtrip_exact: bool,
}

/// One grounding query: image, string-to-bbox task and gold pixel box.
pub struct GroundingQuery {
    pub image: ImageTensor,
    pub task: RegionTask,
    pub gold: [f64; 4],
}

pub fn grounding_queries(examples: &[GroundingExample]) -> Result<Vec<GroundingQuery>> {
    examples
        .iter()
        .map(|ex| {
            let forge_core::curriculum::Sample::Region { image, task, .. } = grounding_sample(ex, false)? else {
                unreachable!("grounding_sample builds region samples")
            };
            Ok(GroundingQuery {
                image,
                task,
                gold: ex.item().bbox(),
            })
        })
        .collect()
}

/// Whether the bbox-to-string prompt built for `bbox` parses back to its
/// quantized coordinates.
pub fn box_roundtrip_exact(bbox: [f64; 4], size: (u32, u32)) -> bool {
    let Ok(q) = quantize_box(bbox, size) else {
        return false;
    };
    let region = RegionAnnotation {
        bbox,
        label: String::new(),
        caption: "x".into(),
        confidence: 1.0,
        kind: RegionKind::General,
    };
    format_region_task(&region, TaskKind::BboxToString, size, "roundtrip")
        .ok()
        .and_then(|t| parse_box(&t.prompt).ok())
        == Some(q)
}

pub fn grounding(state: &ModelState<f32>, queries: &[GroundingQuery], res: u32, iou_threshold: f64) -> Result<GroundingReport> {
    let mut predicted = Vec::with_capacity(queries.len());
    let mut gold = Vec::with_capacity(queries.len());
    let mut roundtrip_exact = true;
    for q in queries {
        let size = (q.image.width() as u32, q.image.height() as u32);
        let seq = tokens_at(&q.image, res)?;
        predicted.push(evalkit::predict_box(state, &seq, &task_prompt(&q.task), size)?);
        gold.push(q.gold);
        roundtrip_exact &= box_roundtrip_exact(q.gold, size);
    }
    Ok(GroundingReport {
        task: "ground".into(),
        n: queries.len(),
        iou_threshold,
        accuracy: evalkit::grounding_accuracy(&predicted, &gold, iou_threshold)?,
        parsed: predicted.iter().filter(|p| p.is_some()).count(),
        roundtrip_exact,
    })
}
