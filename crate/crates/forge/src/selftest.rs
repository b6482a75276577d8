//! `forge selftest`: a fast pass over the invariants the test suite checks
//! in depth, runnable from an installed binary.

use std::collections::BTreeMap;
use std::time::Instant;

use forge_core::curriculum::{cosine_lr, resolution_at, run_stage, Sample, Stage, StageConfig};
use forge_core::evalkit::synth;
use forge_core::finecap::{self, compute_stats, curate, nms, CurateOptions, SamplingParams, StageRules};
use forge_core::models::{Component, ComponentSet, ModelConfig, ModelState};
use forge_core::objectives::{self, ar_loss_value, mim_loss_value, siglip_loss_value, SigmoidLossParams};
use forge_core::patching::{self, ImageTensor, MaskSet};
use forge_core::tensor::grad_check;
use forge_core::{rng, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::checkpoint;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

type Check = fn() -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("gradients", gradients),
    ("loss_identities", loss_identities),
    ("nms_oracle", nms_oracle),
    ("sampling_invariants", sampling_invariants),
    ("native_resolution", native_resolution),
    ("rope_relative", rope_relative),
    ("schedules", schedules),
    ("box_roundtrip", box_roundtrip),
    ("checkpoint_roundtrip", checkpoint_roundtrip),
    ("frozen_components", frozen_components),
    ("curate_determinism", curate_determinism),
    ("stats_oracle", stats_oracle),
];

pub fn run() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f();
            let millis = t.elapsed().as_millis();
            match r {
                Ok(detail) => CheckResult {
                    name,
                    passed: true,
                    detail,
                    millis,
                },
                Err(detail) => CheckResult {
                    name,
                    passed: false,
                    detail,
                    millis,
                },
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn gradients() -> Result<String, String> {
    let mut r = rng::stream(1, "selftest/grad");
    let x = rand_tensor(&mut r, &[3, 8]);
    let w = rand_tensor(&mut r, &[8, 4]);
    let teacher = rand_tensor(&mut r, &[3, 8]);
    let mask = MaskSet {
        masked: vec![0, 2],
        token_count: 3,
    };
    let txt = rand_tensor(&mut r, &[3, 8]);
    let mut worst = 0.0f64;
    let checks: Vec<Box<dyn Fn(&Tensor<f64>) -> forge_core::Result<f64>>> = vec![
        Box::new(|x| {
            let w = w.clone();
            grad_check(
                move |g, v| {
                    let w = g.constant(w);
                    let y = g.matmul(v, w)?;
                    let y = g.silu(y);
                    Ok(g.sum(y))
                },
                x,
                1e-6,
            )
        }),
        Box::new(|x| {
            grad_check(
                |g, v| {
                    let ones = g.constant(Tensor::full(&[8], 1.0));
                    let zeros = g.constant(Tensor::zeros(&[8]));
                    let y = g.layer_norm(v, ones, zeros, 1e-5)?;
                    let y = g.softmax(y);
                    let y = g.log(y);
                    Ok(g.mean(y))
                },
                x,
                1e-6,
            )
        }),
        Box::new(|x| {
            grad_check(
                |g, v| {
                    let y = g.rope(v, &[(0, 0), (1, 2), (3, 1)], 2, 10_000.0)?;
                    let y = g.mul(y, v)?;
                    Ok(g.sum(y))
                },
                x,
                1e-6,
            )
        }),
        Box::new(|x| {
            let teacher = teacher.clone();
            let mask = mask.clone();
            grad_check(move |g, v| objectives::mim_loss(g, v, &teacher, &mask), x, 1e-6)
        }),
        Box::new(|x| {
            let txt = txt.clone();
            grad_check(
                move |g, v| {
                    let t = g.constant(txt);
                    let tau = g.constant(Tensor::scalar(1.0f64.ln()));
                    let b = g.constant(Tensor::scalar(-1.0));
                    let a = g.normalize_rows(v);
                    let t = g.normalize_rows(t);
                    objectives::siglip_loss(g, a, t, tau, b)
                },
                x,
                1e-6,
            )
        }),
        Box::new(|x| {
            grad_check(
                |g, v| Ok(objectives::ar_loss(g, v, &[1, 7, 3], None)?.mean),
                x,
                1e-6,
            )
        }),
    ];
    for c in &checks {
        worst = worst.max(c(&x).map_err(|e| e.to_string())?);
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("6 functions, max relative error {worst:.2e}"))
}

fn loss_identities() -> Result<String, String> {
    let e = |e: forge_core::Error| e.to_string();
    let s = Tensor::<f64>::from_fn(&[4, 6], |i| i as f64 * 0.1);
    let mask = MaskSet {
        masked: vec![1, 3],
        token_count: 4,
    };
    let mim = mim_loss_value(&s, &s, &mask).map_err(e)?;
    ensure(mim == 0.0, || format!("mim at identity = {mim}"))?;
    let z = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]).map_err(e)?;
    let o = Tensor::<f64>::new(&[1, 2], vec![0.0, 1.0]).map_err(e)?;
    let sig = siglip_loss_value(&z, &o, SigmoidLossParams::new(1.0, 0.0).map_err(e)?).map_err(e)?;
    ensure((sig - 2f64.ln()).abs() <= 1e-9, || format!("siglip = {sig}"))?;
    let logits = Tensor::<f64>::zeros(&[5, 8]);
    let ar = ar_loss_value(&logits, &[0, 1, 2, 3, 7], None).map_err(e)?.mean;
    ensure((ar - 8f64.ln()).abs() <= 1e-9, || format!("ar = {ar}"))?;
    Ok("mim 0, siglip ln 2, ar ln 8".into())
}

/// Greedy suppression spelled out directly.
fn nms_greedy(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| finecap::iou(&boxes[k], &boxes[i]) < thr) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

fn nms_oracle() -> Result<String, String> {
    let mut r = rng::stream(2, "selftest/nms");
    for case in 0..200 {
        let n = r.random_range(0..=20);
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let x = r.random_range(0.0..50.0);
                let y = r.random_range(0.0..50.0);
                [x, y, x + r.random_range(1.0..30.0), y + r.random_range(1.0..30.0)]
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
        let got = nms(&boxes, &scores, 0.7).map_err(|e| e.to_string())?;
        let want = nms_greedy(&boxes, &scores, 0.7);
        ensure(got == want, || format!("case {case}: {got:?} vs {want:?}"))?;
    }
    Ok("200 random instances".into())
}

fn sampling_invariants() -> Result<String, String> {
    let mut r = rng::stream(3, "selftest/sampling");
    let params = SamplingParams {
        batch_images: 1_000,
        ..SamplingParams::default()
    };
    let (min_retain, cap) = (params.scaled_min_retain() as usize, params.scaled_cap() as usize);
    for case in 0..20 {
        let groups: BTreeMap<String, Vec<u32>> = (0..r.random_range(1..8))
            .map(|g| (format!("c{g}"), (0..r.random_range(0..40)).collect()))
            .collect();
        let seed = r.random();
        let a = finecap::stratified_sample(&groups, &params, seed).map_err(|e| e.to_string())?;
        let b = finecap::stratified_sample(&groups, &params, seed).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {case}: not deterministic"))?;
        for (label, items) in &groups {
            let kept = a[label].len();
            ensure(kept <= cap.max(items.len().min(min_retain.saturating_sub(1))), || {
                format!("case {case}: {label} kept {kept} over cap {cap}")
            })?;
            if items.len() < min_retain {
                ensure(kept == items.len(), || format!("case {case}: {label} below min_retain was cut"))?;
            }
        }
    }
    Ok(format!("20 taxonomies, min_retain {min_retain}, cap {cap}"))
}

fn native_resolution() -> Result<String, String> {
    let mut r = rng::stream(4, "selftest/snap");
    for _ in 0..30 {
        let (w, h) = (r.random_range(1..300), r.random_range(1..300));
        let cap = r.random_range(28..200);
        let (sw, sh) = patching::snap_resolution(w, h, 28, cap);
        ensure(sw % 28 == 0 && sh % 28 == 0 && sw.max(sh) <= cap.max(28), || {
            format!("({w},{h}) cap {cap} -> ({sw},{sh})")
        })?;
        let img = ImageTensor::filled(w as usize, h as usize, [0.5; 3]).snapped(cap);
        let seq = patching::patchify(&img, 14).map_err(|e| e.to_string())?;
        ensure(seq.len() == (sw as usize / 14) * (sh as usize / 14), || "token count".into())?;
    }
    Ok("30 random sizes".into())
}

fn rope_relative() -> Result<String, String> {
    let mut r = rng::stream(5, "selftest/rope");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = rand_tensor(&mut r, &[1, 16]);
        let k = rand_tensor(&mut r, &[1, 16]);
        let (pq, pk) = ((r.random_range(0..20), r.random_range(0..20)), (r.random_range(0..20), r.random_range(0..20)));
        let shift = (r.random_range(0..20), r.random_range(0..20));
        let dot = |a: (u32, u32), b: (u32, u32)| -> forge_core::Result<f64> {
            let rq = patching::rope2d(&q, &[a], 2, 10_000.0)?;
            let rk = patching::rope2d(&k, &[b], 2, 10_000.0)?;
            Ok(rq.data().iter().zip(rk.data()).map(|(x, y)| x * y).sum())
        };
        let base = dot(pq, pk).map_err(|e| e.to_string())?;
        let moved = dot((pq.0 + shift.0, pq.1 + shift.1), (pk.0 + shift.0, pk.1 + shift.1)).map_err(|e| e.to_string())?;
        worst = worst.max((base - moved).abs());
    }
    ensure(worst <= 1e-6, || format!("max drift {worst:e}"))?;
    Ok(format!("20 triples, max drift {worst:.1e}"))
}

fn schedules() -> Result<String, String> {
    let e = |e: forge_core::Error| e.to_string();
    let (total, peak, min) = (1000, 1e-3, 1e-5);
    let warm = (0.03 * total as f64) as u64;
    let at_peak = cosine_lr(warm, total, peak, min, 0.03).map_err(e)?;
    let at_end = cosine_lr(total, total, peak, min, 0.03).map_err(e)?;
    ensure(at_peak == peak && at_end == min, || format!("peak {at_peak}, end {at_end}"))?;
    let s2 = StageConfig::paper(Stage::II);
    let (a, b) = (resolution_at(&s2, 0.0), resolution_at(&s2, 1.0));
    ensure((a, b) == (336, 448), || format!("stage II resolution {a} -> {b}"))?;
    Ok("cosine endpoints exact, stage II 336 -> 448".into())
}

fn box_roundtrip() -> Result<String, String> {
    let mut r = rng::stream(6, "selftest/box");
    for _ in 0..1000 {
        let q: [u32; 4] = {
            let (x0, y0) = (r.random_range(0..998), r.random_range(0..998));
            [x0, y0, r.random_range(x0 + 1..=999), r.random_range(y0 + 1..=999)]
        };
        let back = objectives::parse_box(&objectives::format_box(q)).map_err(|e| e.to_string())?;
        ensure(back == q, || format!("{q:?} -> {back:?}"))?;
    }
    Ok("1000 boxes".into())
}

fn checkpoint_roundtrip() -> Result<String, String> {
    let mut state = ModelState::<f32>::new(ModelConfig::toy(), 7).map_err(|e| e.to_string())?;
    state.trainable = ComponentSet::of(&[Component::Vit, Component::Decoder]);
    let a = checkpoint::to_bytes(&state).map_err(|e| e.to_string())?;
    let back = checkpoint::from_bytes(&a).map_err(|e| e.to_string())?;
    let b = checkpoint::to_bytes(&back).map_err(|e| e.to_string())?;
    ensure(a == b, || "bytes differ after a round trip".into())?;
    ensure(back.trainable == state.trainable, || "freeze flags lost".into())?;
    Ok(format!("{} bytes", a.len()))
}

fn frozen_components() -> Result<String, String> {
    let e = |e: forge_core::Error| e.to_string();
    let mut state = ModelState::<f32>::new(ModelConfig::toy(), 8).map_err(e)?;
    let before = state.clone();
    let cfg = StageConfig {
        samples_target: 4 * 4,
        batch_size: 4,
        ..StageConfig::toy(Stage::II)
    };
    let pairs: Vec<Sample> = synth::pair_corpus()
        .into_iter()
        .take(8)
        .map(|p| Sample::Pair {
            id: p.image.id,
            image: p.image.image,
            caption: p.caption,
        })
        .collect();
    // Only half the budget is supplied, so the run stops before the text
    // encoder's unfreeze point.
    let report = run_stage(&cfg, &mut pairs.into_iter(), &mut state, 8).map_err(e)?;
    ensure(report.exhausted && report.steps == 2, || format!("{} steps", report.steps))?;
    for c in [Component::TextEncoder, Component::Projector, Component::Decoder] {
        let mut same = true;
        let mut old = Vec::new();
        before.visit(c, &mut |_, t| old.push(t.clone()));
        let mut i = 0;
        state.visit(c, &mut |_, t| {
            same &= t.data().iter().zip(old[i].data()).all(|(a, b)| a.to_bits() == b.to_bits());
            i += 1;
        });
        ensure(same, || format!("{} changed while frozen", c.name()))?;
    }
    Ok("text, projector and decoder bit-identical over 2 early stage II steps".into())
}

fn sample_manifest() -> Vec<finecap::ManifestRecord> {
    synth::pair_corpus()
        .iter()
        .map(|p| {
            let mut rec = p.image.record(&p.caption);
            rec.width *= 10;
            rec.height *= 10;
            rec
        })
        .collect()
}

fn curate_determinism() -> Result<String, String> {
    let rules = StageRules::stage1();
    let opts = CurateOptions::default();
    let run = || -> Result<String, String> {
        let (out, _) = curate(sample_manifest(), &rules, &opts).map_err(|e| e.to_string())?;
        let mut s = String::new();
        for r in &out {
            s.push_str(&serde_json::to_string(r).map_err(|e| e.to_string())?);
            s.push('\n');
        }
        Ok(s)
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "two runs differ".into())?;
    Ok(format!("{} bytes, identical twice", a.len()))
}

fn stats_oracle() -> Result<String, String> {
    let recs = sample_manifest();
    let stats = compute_stats(&recs);
    let mut counts = vec![0u64; finecap::RESOLUTION_EDGES.len()];
    for r in &recs {
        let side = ((r.width as f64) * (r.height as f64)).sqrt();
        let bin = finecap::RESOLUTION_EDGES.iter().rposition(|&e| side >= e).unwrap_or(0);
        counts[bin] += 1;
    }
    ensure(stats.resolution.counts == counts, || {
        format!("{:?} vs {:?}", stats.resolution.counts, counts)
    })?;
    Ok(format!("{} records", recs.len()))
}
