use std::collections::BTreeMap;

use forge_core::finecap::{
    curate, dedup, filter_image, iou, nms, stratified_sample, Caption, CurateOptions, ManifestRecord, Quality, SamplingParams,
    StageRules,
};
use forge_core::objectives::{RegionAnnotation, RegionKind};
use proptest::prelude::*;

/// Greedy suppression written as plainly as possible.
fn oracle(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) < thr) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

fn boxes() -> impl Strategy<Value = (Vec<[f64; 4]>, Vec<f64>)> {
    let bx = (0u32..30, 0u32..30, 1u32..20, 1u32..20)
        .prop_map(|(x, y, w, h)| [x as f64, y as f64, (x + w) as f64, (y + h) as f64]);
    prop::collection::vec((bx, 0u32..4), 0..=20).prop_map(|v| v.into_iter().map(|(b, s)| (b, s as f64)).unzip())
}

fn record(i: usize, w: u32, h: u32, hash: u64) -> ManifestRecord {
    ManifestRecord {
        image_id: format!("r{i}"),
        width: w,
        height: h,
        phash: Some(hash),
        captions: vec![Caption {
            text: format!("a photo of item number {i} on a table"),
            source_model: "stub".into(),
        }],
        regions: vec![RegionAnnotation {
            bbox: [0.0, 0.0, w as f64 / 2.0, h as f64 / 2.0],
            label: ["cat", "dog", "cup"][i % 3].into(),
            caption: "a thing".into(),
            confidence: 0.9,
            kind: RegionKind::General,
        }],
        quality: Some(Quality {
            blur_score: 0.05,
            mean_luma: 0.5,
            mean_saturation: 0.3,
        }),
        path: None,
    }
}

fn records() -> impl Strategy<Value = Vec<ManifestRecord>> {
    prop::collection::vec((100u32..2000, 100u32..2000, 0u64..8), 0..30)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (w, h, p))| record(i, w, h, p)).collect())
}

proptest! {
    #[test]
    fn nms_matches_greedy_oracle((b, s) in boxes(), thr in prop::sample::select(vec![0.3, 0.5, 0.7])) {
        prop_assert_eq!(nms(&b, &s, thr).unwrap(), oracle(&b, &s, thr));
    }

    #[test]
    fn dedup_is_idempotent(recs in records(), thr in 0u32..3) {
        let once = dedup(recs, thr).unwrap().kept;
        let twice = dedup(once.clone(), thr).unwrap();
        prop_assert_eq!(twice.duplicates, 0);
        prop_assert_eq!(twice.kept, once);
    }

    #[test]
    fn tightening_short_side_never_admits(w in 1u32..3000, h in 1u32..3000, lo in 0u32..1500, extra in 0u32..1500) {
        let rec = record(0, w, h, 0);
        let loose = StageRules { min_short_side: lo, ..StageRules::stage1() };
        let tight = StageRules { min_short_side: lo + extra, ..loose.clone() };
        if !filter_image(&rec, &loose).unwrap().is_keep() {
            prop_assert!(!filter_image(&rec, &tight).unwrap().is_keep());
        }
    }

    #[test]
    fn stratified_sample_contract(
        sizes in prop::collection::btree_map("[a-f]{2}", 0usize..3000, 1..8),
        seed in any::<u64>(),
    ) {
        let params = SamplingParams { batch_images: 100_000, ..SamplingParams::default() };
        let groups: BTreeMap<String, Vec<usize>> = sizes.iter().map(|(k, &n)| (k.clone(), (0..n).collect())).collect();
        let a = stratified_sample(&groups, &params, seed).unwrap();
        prop_assert_eq!(&a, &stratified_sample(&groups, &params, seed).unwrap());
        for (k, items) in &groups {
            prop_assert!(a[k].len() as u64 <= params.scaled_cap());
            if (items.len() as u64) < params.scaled_min_retain() {
                prop_assert_eq!(&a[k], items);
            }
        }
    }

    #[test]
    fn curated_output_is_a_valid_input(recs in records()) {
        let rules = StageRules::stage3();
        let opts = CurateOptions::default();
        let (out, report) = curate(recs.clone(), &rules, &opts).unwrap();
        prop_assert_eq!(report.input, recs.len());
        prop_assert_eq!(report.output, out.len());
        // A second pass finds nothing left to drop.
        let (again, _) = curate(out.clone(), &rules, &opts).unwrap();
        prop_assert_eq!(again, out);
    }
}
