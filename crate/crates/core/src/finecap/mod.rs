//! Desk-scale data curation: image filters, perceptual-hash deduplication,
//! caption filtering, region post-processing, stratified category sampling
//! and distribution statistics.

mod clients;
mod quality;
mod sampling;
mod stats;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::objectives::{RegionAnnotation, RegionKind};

pub use clients::{
    ClientError, DetectRequest, Detection, Detector, OcrBox, OcrEngine, RecaptionRequest, Recaptioner, StubDetector,
    StubOcr, StubRecaptioner,
};
pub use quality::{hamming, laplacian_variance, measure_quality, phash};
pub use sampling::{stratified_sample, SamplingParams};
pub use stats::{compute_stats, Histogram, Stats, AREA_EDGES, ASPECT_EDGES, CUMULATIVE_SIDES, RESOLUTION_EDGES, TOKEN_EDGES};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    #[serde(default)]
    pub source_model: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    /// Variance of the 3×3 Laplacian of grayscale in `[0, 1]` units.
    pub blur_score: f64,
    pub mean_luma: f64,
    /// Mean HSV saturation.
    pub mean_saturation: f64,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, with = "hex_hash", skip_serializing_if = "Option::is_none")]
    pub phash: Option<u64>,
    #[serde(default)]
    pub captions: Vec<Caption>,
    #[serde(default)]
    pub regions: Vec<RegionAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Quality>,
    /// Image file, relative to the manifest, when pixels are available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// 64-bit hashes travel as 16 hex digits so that JSON readers with 53-bit
/// integers cannot corrupt them.
mod hex_hash {
    use alloc::format;
    use alloc::string::String;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(h) => s.serialize_str(&format!("{h:016x}")),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        match s {
            None => Ok(None),
            Some(s) => u64::from_str_radix(&s, 16).map(Some).map_err(de::Error::custom),
        }
    }
}

/// Acceptance bounds for mean luma, saturation and sharpness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityThresholds {
    pub min_blur: f64,
    pub luma_range: [f64; 2],
    pub max_saturation: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            min_blur: 0.0015,
            luma_range: [0.08, 0.92],
            max_saturation: 0.85,
        }
    }
}

/// Per-stage filtering rules; `None` disables a rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRules {
    pub min_short_side: u32,
    #[serde(default)]
    pub aspect_range: Option<[f64; 2]>,
    #[serde(default)]
    pub require_quality: bool,
    #[serde(default)]
    pub min_confidence: Option<f64>,
    #[serde(default)]
    pub min_area_fraction: Option<f64>,
    #[serde(default)]
    pub nms_iou: Option<f64>,
    #[serde(default)]
    pub quality: QualityThresholds,
}

impl StageRules {
    /// Stage I and II: short side at least 224, nothing else.
    pub fn stage1() -> Self {
        Self {
            min_short_side: 224,
            aspect_range: None,
            require_quality: false,
            min_confidence: None,
            min_area_fraction: None,
            nms_iou: None,
            quality: QualityThresholds::default(),
        }
    }

    pub fn stage2() -> Self {
        Self::stage1()
    }

    pub fn stage3() -> Self {
        Self {
            min_short_side: 448,
            aspect_range: Some([1.0 / 3.0, 3.0]),
            require_quality: true,
            min_confidence: Some(0.3),
            min_area_fraction: Some(0.01),
            nms_iou: Some(0.7),
            quality: QualityThresholds::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "stage1" => Some(Self::stage1()),
            "stage2" => Some(Self::stage2()),
            "stage3" => Some(Self::stage3()),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ShortSide,
    Aspect,
    Blur,
    Luma,
    Saturation,
    Null,
    Repetition,
    Duplicate,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::ShortSide => "short_side",
            RejectReason::Aspect => "aspect",
            RejectReason::Blur => "blur",
            RejectReason::Luma => "luma",
            RejectReason::Saturation => "saturation",
            RejectReason::Null => "null",
            RejectReason::Repetition => "repetition",
            RejectReason::Duplicate => "duplicate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_keep(self) -> bool {
        self == Verdict::Keep
    }
}

/// Checks run in a fixed order; the first failing rule names the verdict.
pub fn filter_image(rec: &ManifestRecord, rules: &StageRules) -> Result<Verdict> {
    if rec.width == 0 || rec.height == 0 {
        return Err(Error::invalid(alloc::format!("{}: empty image", rec.image_id)));
    }
    if rec.width.min(rec.height) < rules.min_short_side {
        return Ok(Verdict::Reject(RejectReason::ShortSide));
    }
    if let Some([lo, hi]) = rules.aspect_range {
        let r = rec.width as f64 / rec.height as f64;
        if r < lo || r > hi {
            return Ok(Verdict::Reject(RejectReason::Aspect));
        }
    }
    if rules.require_quality {
        let q = rec
            .quality
            .ok_or_else(|| Error::MissingField(alloc::format!("{}: quality", rec.image_id)))?;
        let t = &rules.quality;
        if q.blur_score < t.min_blur {
            return Ok(Verdict::Reject(RejectReason::Blur));
        }
        if q.mean_luma < t.luma_range[0] || q.mean_luma > t.luma_range[1] {
            return Ok(Verdict::Reject(RejectReason::Luma));
        }
        if q.mean_saturation > t.max_saturation {
            return Ok(Verdict::Reject(RejectReason::Saturation));
        }
    }
    Ok(Verdict::Keep)
}

/// Kept records in input order and the number dropped as near-duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct Dedup {
    pub kept: Vec<ManifestRecord>,
    pub duplicates: usize,
}

/// Keeps the first record of every group within `hamming_threshold` of an
/// already kept hash.
pub fn dedup(records: impl IntoIterator<Item = ManifestRecord>, hamming_threshold: u32) -> Result<Dedup> {
    let mut seen = alloc::collections::BTreeSet::new();
    let mut hashes: Vec<u64> = Vec::new();
    let mut kept = Vec::new();
    let mut duplicates = 0;
    for rec in records {
        let h = rec
            .phash
            .ok_or_else(|| Error::MissingField(alloc::format!("{}: phash", rec.image_id)))?;
        let dup = if hamming_threshold == 0 {
            seen.contains(&h)
        } else {
            hashes.iter().any(|&k| hamming(h, k) <= hamming_threshold)
        };
        if dup {
            duplicates += 1;
            continue;
        }
        seen.insert(h);
        hashes.push(h);
        kept.push(rec);
    }
    Ok(Dedup { kept, duplicates })
}

/// Largest share a single word 3-gram may take of all 3-grams.
pub const MAX_TRIGRAM_SHARE: f64 = 0.3;

pub fn filter_caption(text: &str) -> Verdict {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Verdict::Reject(RejectReason::Null);
    }
    if words.len() < 3 {
        return Verdict::Keep;
    }
    let mut counts: BTreeMap<(&str, &str, &str), usize> = BTreeMap::new();
    for w in words.windows(3) {
        *counts.entry((w[0], w[1], w[2])).or_default() += 1;
    }
    let total = words.len() - 2;
    let top = counts.values().copied().max().unwrap_or(0);
    if top as f64 > MAX_TRIGRAM_SHARE * total as f64 {
        Verdict::Reject(RejectReason::Repetition)
    } else {
        Verdict::Keep
    }
}

/// Intersection over union of `[x_min, y_min, x_max, y_max]` boxes; 0 when
/// both are empty.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Class-agnostic greedy suppression. Boxes are visited by descending score
/// (ties: lower index first); a box is dropped when its IoU with any kept box
/// reaches `iou_threshold`. Returns kept indices in ascending order.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "nms",
            lhs: alloc::vec![boxes.len()],
            rhs: alloc::vec![scores.len()],
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) < iou_threshold) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Confidence filter, then area filter, then NMS, each only when its rule is set.
pub fn region_post(regions: &[RegionAnnotation], rules: &StageRules, image_size: (u32, u32)) -> Result<Vec<RegionAnnotation>> {
    let image_area = image_size.0 as f64 * image_size.1 as f64;
    let survivors: Vec<&RegionAnnotation> = regions
        .iter()
        .filter(|r| rules.min_confidence.is_none_or(|c| r.confidence >= c))
        .filter(|r| rules.min_area_fraction.is_none_or(|f| image_area > 0.0 && r.area() / image_area >= f))
        .collect();
    let Some(thr) = rules.nms_iou else {
        return Ok(survivors.into_iter().cloned().collect());
    };
    let boxes: Vec<[f64; 4]> = survivors.iter().map(|r| r.bbox).collect();
    let scores: Vec<f64> = survivors.iter().map(|r| r.confidence).collect();
    Ok(nms(&boxes, &scores, thr)?.into_iter().map(|i| survivors[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateOptions {
    pub hamming_threshold: u32,
    pub sampling: SamplingParams,
    pub seed: u64,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self {
            hamming_threshold: 0,
            sampling: SamplingParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurateReport {
    pub input: usize,
    pub output: usize,
    /// Records dropped per reason code.
    pub rejected: BTreeMap<String, usize>,
    pub captions_dropped: usize,
    pub regions_dropped: usize,
    pub regions_sampled_out: usize,
}

/// The whole pipeline in its fixed order: image filter, dedup, caption
/// filter, region post-processing, stratified sampling over region labels.
///
/// A record that had captions and loses all of them is dropped with the
/// reason of its last rejected caption.
pub fn curate(
    records: Vec<ManifestRecord>,
    rules: &StageRules,
    opts: &CurateOptions,
) -> Result<(Vec<ManifestRecord>, CurateReport)> {
    let mut report = CurateReport {
        input: records.len(),
        ..Default::default()
    };
    let bump = |report: &mut CurateReport, r: RejectReason| {
        *report.rejected.entry(r.code().into()).or_default() += 1;
    };

    let mut passed = Vec::with_capacity(records.len());
    for rec in records {
        match filter_image(&rec, rules)? {
            Verdict::Keep => passed.push(rec),
            Verdict::Reject(r) => bump(&mut report, r),
        }
    }

    let d = dedup(passed, opts.hamming_threshold)?;
    if d.duplicates > 0 {
        *report.rejected.entry(RejectReason::Duplicate.code().into()).or_default() += d.duplicates;
    }

    let mut captioned = Vec::with_capacity(d.kept.len());
    for mut rec in d.kept {
        let had = rec.captions.len();
        let mut last = None;
        rec.captions.retain(|c| match filter_caption(&c.text) {
            Verdict::Keep => true,
            Verdict::Reject(r) => {
                last = Some(r);
                false
            }
        });
        report.captions_dropped += had - rec.captions.len();
        match last {
            Some(r) if rec.captions.is_empty() => bump(&mut report, r),
            _ => captioned.push(rec),
        }
    }

    for rec in &mut captioned {
        let before = rec.regions.len();
        rec.regions = region_post(&rec.regions, rules, (rec.width, rec.height))?;
        report.regions_dropped += before - rec.regions.len();
    }

    // Group every surviving region by label across the batch, sample, and
    // write the selection back in original order.
    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (ri, rec) in captioned.iter().enumerate() {
        for (gi, reg) in rec.regions.iter().enumerate() {
            groups.entry(reg.label.clone()).or_default().push((ri, gi));
        }
    }
    let total: usize = groups.values().map(Vec::len).sum();
    let sampled = stratified_sample(&groups, &opts.sampling, opts.seed)?;
    let mut keep: alloc::collections::BTreeSet<(usize, usize)> = alloc::collections::BTreeSet::new();
    for items in sampled.values() {
        keep.extend(items.iter().copied());
    }
    report.regions_sampled_out = total - keep.len();
    for (ri, rec) in captioned.iter_mut().enumerate() {
        let mut gi = 0;
        rec.regions.retain(|_| {
            let k = keep.contains(&(ri, gi));
            gi += 1;
            k
        });
    }

    report.output = captioned.len();
    Ok((captioned, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(w: u32, h: u32) -> ManifestRecord {
        ManifestRecord {
            image_id: "x".into(),
            width: w,
            height: h,
            phash: Some(1),
            captions: Vec::new(),
            regions: Vec::new(),
            quality: Some(Quality {
                blur_score: 0.01,
                mean_luma: 0.5,
                mean_saturation: 0.3,
            }),
            path: None,
        }
    }

    #[test]
    fn image_rules() {
        assert_eq!(filter_image(&rec(200, 600), &StageRules::stage1()).unwrap(), Verdict::Reject(RejectReason::ShortSide));
        assert_eq!(filter_image(&rec(500, 2000), &StageRules::stage3()).unwrap(), Verdict::Reject(RejectReason::Aspect));
        assert_eq!(filter_image(&rec(448, 448), &StageRules::stage3()).unwrap(), Verdict::Keep);
        let mut r = rec(448, 448);
        r.quality = None;
        assert!(filter_image(&r, &StageRules::stage3()).is_err());
    }

    #[test]
    fn caption_rules() {
        assert_eq!(filter_caption(""), Verdict::Reject(RejectReason::Null));
        assert_eq!(filter_caption("  \t"), Verdict::Reject(RejectReason::Null));
        assert_eq!(
            filter_caption("the cat the cat the cat the cat the cat"),
            Verdict::Reject(RejectReason::Repetition)
        );
        assert_eq!(filter_caption("a small dog runs across wet grass"), Verdict::Keep);
    }

    #[test]
    fn nms_examples() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(nms(&[a, [0.0, 0.0, 10.0, 12.0]], &[0.9, 0.8], 0.7).unwrap(), [0]);
        assert_eq!(nms(&[a, [1.0, 1.0, 11.0, 11.0]], &[0.9, 0.8], 0.7).unwrap(), [0, 1]);
        assert_eq!(nms(&[a], &[0.1], 0.7).unwrap(), [0]);
        assert!(nms(&[], &[], 0.7).unwrap().is_empty());
        // Equal scores: the lower index wins.
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.7).unwrap(), [0]);
    }

    #[test]
    fn phash_serializes_as_hex() {
        let mut r = rec(10, 10);
        r.phash = Some(u64::MAX - 1);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"fffffffffffffffe\""), "{s}");
        let back: ManifestRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
