use forge_core::curriculum::{context_at, tokens_at, StageConfig, Stage};
use forge_core::evalkit::{embed_images, embed_texts, recall_at_k, similarity, synth, Direction, SimilarityMatrix};
use forge_core::models::{ModelConfig, ModelState, TextTokens};
use forge_core::Tensor;
use proptest::prelude::*;

fn matrix(n: usize, m: usize) -> impl Strategy<Value = SimilarityMatrix> {
    prop::collection::vec(-4i32..4, n * m)
        .prop_map(move |v| SimilarityMatrix::from_values(v.into_iter().map(f64::from).collect(), n, m).unwrap())
}

/// A random rotation from Gram–Schmidt on a random matrix.
fn orthogonal(seed: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v: Vec<f64> = seed[i * d..(i + 1) * d].to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    q
}

fn rotate(t: &Tensor<f64>, q: &[Vec<f64>]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|r| q.iter().map(|col| t.row(r).iter().zip(col).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn recall_grows_with_k(sim in matrix(6, 6)) {
        for d in [Direction::T2I, Direction::I2T] {
            let r: Vec<f64> = (1..=6).map(|k| recall_at_k(&sim, k, d).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]), "{:?}", r);
            prop_assert_eq!(r[5], 1.0);
        }
    }

    #[test]
    fn similarity_survives_joint_rotation(
        img in prop::collection::vec(-1.0f64..1.0, 4 * 5),
        txt in prop::collection::vec(-1.0f64..1.0, 3 * 5),
        seed in prop::collection::vec(-1.0f64..1.0, 25),
    ) {
        let img = Tensor::new(&[4, 5], img).unwrap();
        let txt = Tensor::new(&[3, 5], txt).unwrap();
        let q = orthogonal(&seed, 5);
        let a = similarity(&img, &txt).unwrap();
        let b = similarity(&rotate(&img, &q), &rotate(&txt, &q)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn long_captions_fit_the_late_stage_two_context() {
    let stage2 = StageConfig::paper(Stage::II);
    let ctx = context_at(&stage2, 1.0);
    assert_eq!(ctx, 256);
    let pairs: Vec<_> = synth::pair_corpus().into_iter().step_by(8).collect();
    let texts: Vec<TextTokens> = pairs
        .iter()
        .map(|p| TextTokens::from_text(&synth::long_caption(p), ctx))
        .collect();
    for t in &texts {
        assert!(t.len() >= 200, "caption of {} tokens", t.len());
        assert!(!t.truncated());
    }
    // The early context cap cuts the same captions.
    assert!(TextTokens::from_text(&synth::long_caption(&pairs[0]), context_at(&stage2, 0.0)).truncated());

    let state = ModelState::<f32>::new(ModelConfig::toy(), 2).unwrap();
    let seqs: Vec<_> = pairs.iter().map(|p| tokens_at(&p.image.image, 56).unwrap()).collect();
    let sim = similarity(&embed_images(&state, &seqs).unwrap(), &embed_texts(&state, &texts).unwrap()).unwrap();
    assert_eq!((sim.n_images(), sim.n_texts()), (pairs.len(), pairs.len()));
    for d in [Direction::T2I, Direction::I2T] {
        let r = recall_at_k(&sim, 1, d).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert_eq!(recall_at_k(&sim, pairs.len(), d).unwrap(), 1.0);
    }
}
