use forge_core::objectives::{
    format_region_task, parse_box, quantize_box, siglip_loss_value, RegionAnnotation, RegionKind, SigmoidLossParams,
    TaskKind,
};
use forge_core::Tensor;
use proptest::prelude::*;

fn embeddings(n: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * d).prop_map(move |v| Tensor::new(&[n, d], v).unwrap())
}

fn permute_rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn region(bbox: [f64; 4]) -> RegionAnnotation {
    RegionAnnotation {
        bbox,
        label: "thing".into(),
        caption: "the thing".into(),
        confidence: 1.0,
        kind: RegionKind::General,
    }
}

proptest! {
    #[test]
    fn siglip_is_permutation_equivariant(
        img in embeddings(5, 3),
        txt in embeddings(5, 3),
        order in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let p = SigmoidLossParams::new(10.0, -1.0).unwrap();
        let a = siglip_loss_value(&img, &txt, p).unwrap();
        let b = siglip_loss_value(&permute_rows(&img, &order), &permute_rows(&txt, &order), p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn box_prompt_parses_to_its_coordinates(
        (w, h) in (2u32..2000, 2u32..2000),
        (x0, y0, x1, y1) in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let (w_, h_) = (w as f64, h as f64);
        let bbox = [x0.min(x1) * w_, y0.min(y1) * h_, x0.max(x1) * w_, y0.max(y1) * h_];
        let Ok(q) = quantize_box(bbox, (w, h)) else {
            return Ok(());
        };
        for kind in [TaskKind::BboxToString, TaskKind::StringToBbox] {
            let task = format_region_task(&region(bbox), kind, (w, h), "img").unwrap();
            let text = if kind == TaskKind::BboxToString { &task.prompt } else { &task.target };
            prop_assert_eq!(parse_box(text).unwrap(), q);
        }
    }
}

#[test]
fn siglip_falls_as_diagonal_rises() {
    // Two orthogonal off-diagonal directions stay fixed while the matched
    // pairs turn from anti-aligned to aligned.
    let p = SigmoidLossParams::new(10.0, -1.0).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..=40 {
        let t = -1.0 + step as f64 / 20.0;
        let s = (1.0 - t * t).max(0.0).sqrt();
        let img = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let txt = Tensor::new(&[2, 3], vec![t, 0.0, s, 0.0, t, s]).unwrap();
        let loss = siglip_loss_value(&img, &txt, p).unwrap();
        assert!(loss < last, "t = {t}: {loss} !< {last}");
        last = loss;
    }
}

#[test]
fn thousand_random_boxes_round_trip() {
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let boxes = (28u32..1400, 28u32..1400).prop_flat_map(|(w, h)| {
        (Just((w, h)), 0..w - 1, 0..h - 1).prop_flat_map(|((w, h), x0, y0)| {
            (Just((w, h)), Just((x0, y0)), (x0 + 2..=w), (y0 + 2..=h))
        })
    });
    let count = std::cell::Cell::new(0);
    runner
        .run(&boxes, |((w, h), (x0, y0), x1, y1)| {
            let bbox = [x0 as f64, y0 as f64, x1 as f64, y1 as f64];
            let q = quantize_box(bbox, (w, h)).unwrap();
            let task = format_region_task(&region(bbox), TaskKind::BboxToString, (w, h), "img").unwrap();
            prop_assert_eq!(parse_box(&task.prompt).unwrap(), q);
            count.set(count.get() + 1);
            Ok(())
        })
        .unwrap();
    assert_eq!(count.get(), 1000);
}
