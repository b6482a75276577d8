//! Retrieval recall, zero-shot classification and grounding accuracy, plus
//! the procedurally generated corpora they are measured on.

pub mod synth;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finecap::iou;
use crate::models::{self, ModelState, TextTokens};
use crate::objectives::{dequantize_box, parse_box};
use crate::patching::TokenSequence;
use crate::real::Real;
use crate::tensor::{kernels, Tensor};

/// Cosine similarities, `values[i · n_texts + j]` for image `i`, text `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<f64>,
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_ids.len()
    }

    pub fn get(&self, image: usize, text: usize) -> f64 {
        self.values[image * self.n_texts() + text]
    }

    pub fn from_values(values: Vec<f64>, n_images: usize, n_texts: usize) -> Result<Self> {
        if values.len() != n_images * n_texts {
            return Err(Error::DataLength {
                shape: alloc::vec![n_images, n_texts],
                expected: n_images * n_texts,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity".into()));
        }
        Ok(Self {
            values,
            image_ids: index_ids(n_images),
            text_ids: index_ids(n_texts),
        })
    }
}

fn index_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| alloc::format!("{i}")).collect()
}

/// Cosine similarity of every image row with every text row.
pub fn similarity<S: Real>(img: &Tensor<S>, txt: &Tensor<S>) -> Result<SimilarityMatrix> {
    let (n, d) = img.dims2();
    let (m, e) = txt.dims2();
    if d != e {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            lhs: img.shape().to_vec(),
            rhs: txt.shape().to_vec(),
        });
    }
    let norms = |t: &Tensor<S>, rows: usize| -> Vec<f64> {
        (0..rows)
            .map(|r| libm::sqrt(kernels::dot(t.row(r), t.row(r)).as_f64()).max(1e-12))
            .collect()
    };
    let (ni, nt) = (norms(img, n), norms(txt, m));
    let dots = kernels::matmul_nt(img.data(), txt.data(), n, d, m);
    let values = (0..n * m).map(|i| dots[i].as_f64() / (ni[i / m] * nt[i % m])).collect();
    SimilarityMatrix::from_values(values, n, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Text queries ranking images.
    #[serde(rename = "t2i")]
    T2I,
    /// Image queries ranking texts.
    #[serde(rename = "i2t")]
    I2T,
}

/// Fraction of queries whose paired item (same index) ranks in the top `k`.
/// A candidate outranks the true match when it scores higher, or scores
/// equal and has a lower index.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, direction: Direction) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("recall_at_k: k must be at least 1"));
    }
    let n = sim.n_images();
    if n != sim.n_texts() {
        return Err(Error::ShapeMismatch {
            op: "recall_at_k",
            lhs: alloc::vec![n],
            rhs: alloc::vec![sim.n_texts()],
        });
    }
    if n == 0 {
        return Err(Error::invalid("recall_at_k: empty similarity matrix"));
    }
    let score = |query: usize, cand: usize| match direction {
        Direction::I2T => sim.get(query, cand),
        Direction::T2I => sim.get(cand, query),
    };
    let hits = (0..n)
        .filter(|&q| {
            let truth = score(q, q);
            let ahead = (0..n)
                .filter(|&c| c != q && (score(q, c) > truth || (score(q, c) == truth && c < q)))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Class whose prompts have the highest mean cosine similarity to `img`
/// (`[d]`); each class is `[prompts, d]`. Ties go to the lower class id.
pub fn zeroshot_classify<S: Real>(img: &Tensor<S>, classes: &[Tensor<S>]) -> Result<usize> {
    if classes.is_empty() {
        return Err(Error::invalid("zeroshot_classify: no classes"));
    }
    let query = Tensor::new(&[1, img.numel()], img.data().to_vec())?;
    let mut best = (0, f64::NEG_INFINITY);
    for (c, prompts) in classes.iter().enumerate() {
        if prompts.rows() == 0 {
            return Err(Error::invalid(alloc::format!("zeroshot_classify: class {c} has no prompts")));
        }
        let sim = similarity(&query, prompts)?;
        let mean = sim.values.iter().sum::<f64>() / sim.values.len() as f64;
        if mean > best.1 {
            best = (c, mean);
        }
    }
    Ok(best.0)
}

/// Fraction of predictions with IoU at least `iou_threshold` against gold;
/// a missing prediction counts as a miss.
pub fn grounding_accuracy(predicted: &[Option<[f64; 4]>], gold: &[[f64; 4]], iou_threshold: f64) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::ShapeMismatch {
            op: "grounding_accuracy",
            lhs: alloc::vec![predicted.len()],
            rhs: alloc::vec![gold.len()],
        });
    }
    if gold.is_empty() {
        return Err(Error::invalid("grounding_accuracy: no examples"));
    }
    let hits = predicted
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.is_some_and(|p| iou(&p, g) >= iou_threshold))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Pooled image embeddings stacked as `[n, d]`.
pub fn embed_images<S: Real>(state: &ModelState<S>, seqs: &[TokenSequence]) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    for s in seqs {
        data.extend_from_slice(models::encode_image(state, s, None)?.1.data());
    }
    Tensor::new(&[seqs.len(), state.config.embed_dim()], data)
}

/// Text embeddings stacked as `[n, d]`.
pub fn embed_texts<S: Real>(state: &ModelState<S>, texts: &[TextTokens]) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    for t in texts {
        data.extend_from_slice(models::encode_text(state, t)?.embedding.data());
    }
    Tensor::new(&[texts.len(), state.config.embed_dim()], data)
}

/// Greedy box prediction for a decoder prompt; `None` when the output does
/// not parse. The box is returned in pixels of `image_size`.
pub fn predict_box<S: Real>(
    state: &ModelState<S>,
    seq: &TokenSequence,
    prompt: &[u32],
    image_size: (u32, u32),
) -> Result<Option<[f64; 4]>> {
    let out = models::generate(state, seq, prompt, MAX_BOX_TOKENS)?;
    let text = models::tokenizer::decode(&out);
    Ok(parse_box(&text).ok().map(|q| dequantize_box(q, image_size)))
}

/// `<box>999,999,999,999</box>` plus slack.
pub const MAX_BOX_TOKENS: usize = 32;
