//! Training streams, from a manifest or from the synthetic corpora.

use std::path::Path;

use anyhow::{bail, Context, Result};
use forge_core::curriculum::{Sample, Stage};
use forge_core::evalkit::synth::{self, GroundingExample};
use forge_core::finecap::ManifestRecord;
use forge_core::objectives::{format_region_task, RegionAnnotation, RegionKind, TaskKind};
use forge_core::rng;
use rand::seq::SliceRandom;

use crate::manifest;

/// Training images in the synthetic Stage III corpus.
pub const GROUNDING_TRAIN: usize = 512;
/// Held-out images for grounding evaluation.
pub const GROUNDING_TEST: usize = 64;
/// Two shapes on a 2×2 grid of cells (56×56 pixels).
pub const GROUNDING_CELLS: (usize, usize) = (2, 2);
pub const GROUNDING_SHAPES: usize = 2;
/// Every n-th synthetic region task is bbox-to-string; the rest ground.
pub const CAPTION_EVERY: usize = 4;

/// Endless reshuffled passes over `items`, one fresh permutation per
/// epoch drawn from the data stream of `seed`.
pub struct Epochs<T> {
    items: Vec<T>,
    order: Vec<usize>,
    pos: usize,
    rng: rng::StreamRng,
    cycle: bool,
    started: bool,
}

impl<T: Clone> Epochs<T> {
    pub fn new(items: Vec<T>, seed: u64, cycle: bool) -> Self {
        let order = (0..items.len()).collect();
        Self {
            items,
            order,
            pos: 0,
            rng: rng::stream(seed, rng::streams::DATA),
            cycle,
            started: false,
        }
    }
}

impl<T: Clone> Iterator for Epochs<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        if self.items.is_empty() {
            return None;
        }
        if !self.started || self.pos == self.order.len() {
            if self.started && !self.cycle {
                return None;
            }
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.started = true;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        Some(self.items[i].clone())
    }
}

/// Region task for one grounding example: string-to-bbox, or bbox-to-string
/// when `caption` is set.
pub fn grounding_sample(ex: &GroundingExample, caption: bool) -> Result<Sample> {
    let it = ex.item();
    let region = RegionAnnotation {
        bbox: it.bbox(),
        label: it.phrase(),
        caption: it.phrase(),
        confidence: 1.0,
        kind: RegionKind::General,
    };
    let kind = if caption {
        TaskKind::BboxToString
    } else {
        TaskKind::StringToBbox
    };
    let task = format_region_task(&region, kind, ex.image.size(), &ex.image.id)?;
    Ok(Sample::Region {
        id: ex.image.id.clone(),
        image: ex.image.image.clone(),
        task,
    })
}

pub fn grounding_train(seed: u64) -> Vec<GroundingExample> {
    synth::grounding_corpus(
        GROUNDING_TRAIN,
        GROUNDING_CELLS,
        GROUNDING_SHAPES,
        rng::derive_seed(seed, "data/grounding/train"),
    )
}

pub fn grounding_test(seed: u64) -> Vec<GroundingExample> {
    synth::grounding_corpus(
        GROUNDING_TEST,
        GROUNDING_CELLS,
        GROUNDING_SHAPES,
        rng::derive_seed(seed, "data/grounding/test"),
    )
}

/// Samples suitable for `stage` from the synthetic corpora.
pub fn synthetic_samples(stage: Stage, seed: u64) -> Result<Vec<Sample>> {
    Ok(match stage {
        Stage::I => synth::pair_corpus()
            .into_iter()
            .map(|p| Sample::Image {
                id: p.image.id,
                image: p.image.image,
            })
            .collect(),
        Stage::II => synth::pair_corpus()
            .into_iter()
            .map(|p| Sample::Pair {
                id: p.image.id,
                image: p.image.image,
                caption: p.caption,
            })
            .collect(),
        Stage::III => grounding_train(seed)
            .iter()
            .enumerate()
            .map(|(i, ex)| grounding_sample(ex, i % CAPTION_EVERY == CAPTION_EVERY - 1))
            .collect::<Result<_>>()?,
    })
}

/// Samples for `stage` from manifest records: images for Stage I, the first
/// caption for Stage II, and one task per region for Stage III (alternating
/// between the two directions of the region's task family).
pub fn manifest_samples(stage: Stage, records: &[ManifestRecord], manifest_path: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for rec in records {
        let image = manifest::record_image(rec, manifest_path)?;
        if (image.width() as u32, image.height() as u32) != (rec.width, rec.height) {
            bail!(
                "record {}: image is {}x{}, manifest says {}x{}",
                rec.image_id,
                image.width(),
                image.height(),
                rec.width,
                rec.height
            );
        }
        match stage {
            Stage::I => out.push(Sample::Image {
                id: rec.image_id.clone(),
                image,
            }),
            Stage::II => {
                if let Some(c) = rec.captions.first() {
                    out.push(Sample::Pair {
                        id: rec.image_id.clone(),
                        image,
                        caption: c.text.clone(),
                    });
                }
            }
            Stage::III => {
                for (i, region) in rec.regions.iter().enumerate() {
                    let kind = match (region.kind.is_ocr(), i % 2 == 0) {
                        (false, true) => TaskKind::StringToBbox,
                        (false, false) => TaskKind::BboxToString,
                        (true, true) => TaskKind::OcrToBbox,
                        (true, false) => TaskKind::BboxToOcr,
                    };
                    let task = format_region_task(region, kind, (rec.width, rec.height), &rec.image_id)
                        .with_context(|| format!("record {} region {i}", rec.image_id))?;
                    out.push(Sample::Region {
                        id: rec.image_id.clone(),
                        image: image.clone(),
                        task,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        bail!("no stage {} samples in the manifest", stage.number());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_visit_everything_once_per_pass() {
        let it = Epochs::new((0..10).collect::<Vec<u32>>(), 3, true);
        let first: Vec<u32> = it.take(20).collect();
        let mut a = first[..10].to_vec();
        let mut b = first[10..].to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        assert_eq!(a, b);
        assert_ne!(first[..10], first[10..]);
    }

    #[test]
    fn single_pass_ends() {
        assert_eq!(Epochs::new(vec![1, 2, 3], 0, false).count(), 3);
    }

    #[test]
    fn synthetic_stage3_mixes_directions() {
        let s = synthetic_samples(Stage::III, 0).unwrap();
        let captions = s
            .iter()
            .filter(|x| matches!(x, Sample::Region { task, .. } if task.kind == TaskKind::BboxToString))
            .count();
        assert_eq!(captions, GROUNDING_TRAIN / CAPTION_EVERY);
    }
}
