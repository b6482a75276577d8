//! Training losses and the region-task serializer.
//!
//! Each loss exists twice: as a graph builder used for training and gradient
//! checks, and as a plain evaluation on tensors used as an oracle and for
//! reporting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::tokenizer;
use crate::patching::MaskSet;
use crate::real::{log_sigmoid, Real};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// `Σ_{i∈M} ‖student_i − teacher_i‖²`; the teacher enters as a constant.
pub fn mim_loss<S: Real>(g: &mut Graph<S>, student: Var, teacher: &Tensor<S>, mask: &MaskSet) -> Result<Var> {
    let shape = g.value(student).shape().to_vec();
    if shape != teacher.shape() || shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mim_loss",
            lhs: shape,
            rhs: teacher.shape().to_vec(),
        });
    }
    check_mask(mask, shape[0])?;
    let t = Tensor::from_fn(&[mask.len(), shape[1]], |i| teacher.row(mask.masked[i / shape[1]])[i % shape[1]]);
    let s = g.gather(student, &mask.masked)?;
    let t = g.constant(t);
    let d = g.sub(s, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

pub fn mim_loss_value<S: Real>(student: &Tensor<S>, teacher: &Tensor<S>, mask: &MaskSet) -> Result<S> {
    if student.shape() != teacher.shape() || student.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mim_loss",
            lhs: student.shape().to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    check_mask(mask, student.rows())?;
    let mut total = S::zero();
    for &i in &mask.masked {
        for (a, b) in student.row(i).iter().zip(teacher.row(i)) {
            total += (*a - *b) * (*a - *b);
        }
    }
    Ok(total)
}

fn check_mask(mask: &MaskSet, tokens: usize) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::invalid("mim_loss: empty mask"));
    }
    if mask.token_count != tokens {
        return Err(Error::ShapeMismatch {
            op: "mim_loss.mask",
            lhs: alloc::vec![tokens],
            rhs: alloc::vec![mask.token_count],
        });
    }
    Ok(())
}

/// Scale and bias of the sigmoid contrastive head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidLossParams {
    pub tau: f64,
    pub bias: f64,
}

impl SigmoidLossParams {
    pub fn new(tau: f64, bias: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() || !bias.is_finite() {
            return Err(Error::invalid(format!("sigmoid loss needs finite tau > 0, got tau {tau}, bias {bias}")));
        }
        Ok(Self { tau, bias })
    }
}

/// `−(1/n) Σ_ij log σ(y_ij · τ(x_i·t_j + b))` with `y = +1` on the diagonal.
///
/// `log_tau` and `bias` are `[1]` variables so that both can be learned.
pub fn siglip_loss<S: Real>(g: &mut Graph<S>, img: Var, txt: Var, log_tau: Var, bias: Var) -> Result<Var> {
    let (n, d) = g.value(img).dims2();
    let (m, e) = g.value(txt).dims2();
    if n != m || d != e {
        return Err(Error::ShapeMismatch {
            op: "siglip_loss",
            lhs: g.value(img).shape().to_vec(),
            rhs: g.value(txt).shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("siglip_loss: empty batch"));
    }
    let dots = g.matmul_nt(img, txt)?;
    let shifted = g.add(dots, bias)?;
    let tau = g.exp(log_tau);
    let z = g.mul(shifted, tau)?;
    let y = g.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { -S::one() }));
    let zy = g.mul(z, y)?;
    let ls = g.log_sigmoid(zy);
    let total = g.sum(ls);
    Ok(g.scale(total, -1.0 / n as f64))
}

pub fn siglip_loss_value<S: Real>(img: &Tensor<S>, txt: &Tensor<S>, params: SigmoidLossParams) -> Result<S> {
    let (n, d) = img.dims2();
    if img.shape() != txt.shape() {
        return Err(Error::ShapeMismatch {
            op: "siglip_loss",
            lhs: img.shape().to_vec(),
            rhs: txt.shape().to_vec(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("siglip_loss: empty batch"));
    }
    let params = SigmoidLossParams::new(params.tau, params.bias)?;
    let dots = kernels::matmul_nt(img.data(), txt.data(), n, d, n);
    let (tau, b) = (S::of(params.tau), S::of(params.bias));
    let mut total = S::zero();
    for i in 0..n {
        for j in 0..n {
            let y = if i == j { S::one() } else { -S::one() };
            total += log_sigmoid(y * tau * (dots[i * n + j] + b));
        }
    }
    Ok(-total / S::of(n as f64))
}

/// Token-level negative log-likelihood, summed and averaged over supervised positions.
#[derive(Clone, Copy, Debug)]
pub struct ArLoss<T> {
    pub sum: T,
    pub mean: T,
}

fn check_targets(rows: usize, vocab: usize, targets: &[u32], supervise: Option<&[bool]>) -> Result<usize> {
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "ar_loss",
            lhs: alloc::vec![rows, vocab],
            rhs: alloc::vec![targets.len()],
        });
    }
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("ar_loss: target id {bad} outside vocabulary of {vocab}")));
    }
    let count = match supervise {
        Some(m) if m.len() != rows => {
            return Err(Error::ShapeMismatch {
                op: "ar_loss.mask",
                lhs: alloc::vec![rows],
                rhs: alloc::vec![m.len()],
            })
        }
        Some(m) => m.iter().filter(|&&s| s).count(),
        None => rows,
    };
    if count == 0 {
        return Err(Error::invalid("ar_loss: no supervised positions"));
    }
    Ok(count)
}

/// `logits: [L, V]`, `targets: [L]`; `supervise[i] == false` masks position `i` out.
pub fn ar_loss<S: Real>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &[u32],
    supervise: Option<&[bool]>,
) -> Result<ArLoss<Var>> {
    let (rows, vocab) = g.value(logits).dims2();
    let count = check_targets(rows, vocab, targets, supervise)?;
    let lp = g.log_softmax(logits);
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let mut picked = g.pick(lp, &cols)?;
    if let Some(m) = supervise {
        let w = g.constant(Tensor::from_fn(&[rows], |i| if m[i] { S::one() } else { S::zero() }));
        picked = g.mul(picked, w)?;
    }
    let total = g.sum(picked);
    let sum = g.scale(total, -1.0);
    let mean = g.scale(total, -1.0 / count as f64);
    Ok(ArLoss { sum, mean })
}

pub fn ar_loss_value<S: Real>(logits: &Tensor<S>, targets: &[u32], supervise: Option<&[bool]>) -> Result<ArLoss<S>> {
    let (rows, vocab) = logits.dims2();
    let count = check_targets(rows, vocab, targets, supervise)?;
    let lp = kernels::log_softmax_rows(logits.data(), vocab);
    let mut sum = S::zero();
    for (i, &t) in targets.iter().enumerate() {
        if supervise.is_none_or(|m| m[i]) {
            sum -= lp[i * vocab + t as usize];
        }
    }
    Ok(ArLoss {
        sum,
        mean: sum / S::of(count as f64),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    #[default]
    General,
    RichTextOcr,
    DocOcr,
}

impl RegionKind {
    pub const ALL: [RegionKind; 3] = [RegionKind::General, RegionKind::RichTextOcr, RegionKind::DocOcr];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::General => "general",
            RegionKind::RichTextOcr => "rich_text_ocr",
            RegionKind::DocOcr => "doc_ocr",
        }
    }

    pub fn is_ocr(self) -> bool {
        self != RegionKind::General
    }
}

/// A box in pixels with its label, caption (or transcribed text for OCR
/// kinds) and detector confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default = "full_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub kind: RegionKind,
}

fn full_confidence() -> f64 {
    1.0
}

impl RegionAnnotation {
    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    /// `x_min < x_max`, `y_min < y_max` and the box lies within the image.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        let ok = self.bbox.iter().all(|v| v.is_finite())
            && x0 >= 0.0
            && y0 >= 0.0
            && x0 < x1
            && y0 < y1
            && x1 <= width as f64
            && y1 <= height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("box {:?} invalid in a {width}x{height} image", self.bbox)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BboxToString,
    StringToBbox,
    BboxToOcr,
    OcrToBbox,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::BboxToString,
        TaskKind::StringToBbox,
        TaskKind::BboxToOcr,
        TaskKind::OcrToBbox,
    ];

    /// Coordinates go in the prompt (and text in the target).
    pub fn box_in_prompt(self) -> bool {
        matches!(self, TaskKind::BboxToString | TaskKind::BboxToOcr)
    }

    pub fn is_ocr(self) -> bool {
        matches!(self, TaskKind::BboxToOcr | TaskKind::OcrToBbox)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTask {
    pub kind: TaskKind,
    pub prompt: String,
    pub target: String,
    pub image_id: String,
}

/// Largest serialized coordinate.
pub const COORD_MAX: u32 = 999;

/// Box coordinates as integers in `[0, 999]`: `floor(999·x/w)`.
///
/// This maps the right and bottom edges to 999 and the image center to 499,
/// the two reference points the serialization has to hit.
pub fn quantize_box(bbox: [f64; 4], image_size: (u32, u32)) -> Result<[u32; 4]> {
    let (w, h) = image_size;
    if w == 0 || h == 0 {
        return Err(Error::invalid("quantize_box: empty image"));
    }
    let q = |v: f64, side: u32| -> u32 {
        let x = libm::floor(COORD_MAX as f64 * v / side as f64);
        x.clamp(0.0, COORD_MAX as f64) as u32
    };
    let out = [q(bbox[0], w), q(bbox[1], h), q(bbox[2], w), q(bbox[3], h)];
    if out[0] >= out[2] || out[1] >= out[3] {
        return Err(Error::invalid(format!("box {bbox:?} is degenerate after normalization: {out:?}")));
    }
    Ok(out)
}

/// Pixel box covering quantized coordinates.
pub fn dequantize_box(q: [u32; 4], image_size: (u32, u32)) -> [f64; 4] {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let s = COORD_MAX as f64;
    [q[0] as f64 * w / s, q[1] as f64 * h / s, q[2] as f64 * w / s, q[3] as f64 * h / s]
}

pub fn format_box(q: [u32; 4]) -> String {
    format!("<box>{},{},{},{}</box>", q[0], q[1], q[2], q[3])
}

/// Inverse of [`format_box`]; surrounding text is ignored, the first box wins.
pub fn parse_box(text: &str) -> Result<[u32; 4]> {
    let bad = || Error::Parse(format!("no box in {text:?}"));
    let start = text.find("<box>").ok_or_else(bad)? + "<box>".len();
    let len = text[start..].find("</box>").ok_or_else(bad)?;
    let mut out = [0u32; 4];
    let mut parts = text[start..start + len].split(',');
    for slot in &mut out {
        let p = parts.next().ok_or_else(bad)?;
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        *slot = p.parse().map_err(|_| bad())?;
        if *slot > COORD_MAX {
            return Err(bad());
        }
    }
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(out)
}

pub fn format_region_task(
    region: &RegionAnnotation,
    kind: TaskKind,
    image_size: (u32, u32),
    image_id: &str,
) -> Result<RegionTask> {
    region.validate(image_size.0, image_size.1)?;
    if kind.is_ocr() && !region.kind.is_ocr() {
        return Err(Error::invalid(format!("{kind:?} needs an OCR region, got {}", region.kind.name())));
    }
    let text = region.caption.trim();
    if text.is_empty() {
        return Err(Error::invalid("region task needs a nonempty caption"));
    }
    let coords = format_box(quantize_box(region.bbox, image_size)?);
    let (prompt, target) = if kind.box_in_prompt() {
        (coords, text.into())
    } else {
        (text.into(), coords)
    };
    Ok(RegionTask {
        kind,
        prompt,
        target,
        image_id: image_id.into(),
    })
}

/// Decoder sequence `prompt SEP target EOS` and its supervision mask, which
/// covers the target and EOS only.
pub fn task_tokens(task: &RegionTask) -> (Vec<u32>, Vec<bool>) {
    let mut ids = tokenizer::encode(&task.prompt);
    ids.push(tokenizer::SEP);
    let prompt_len = ids.len();
    ids.extend(tokenizer::encode(&task.target));
    ids.push(tokenizer::EOS);
    let supervise = (0..ids.len()).map(|i| i >= prompt_len).collect();
    (ids, supervise)
}

/// Decoder prompt `prompt SEP` that a model continues with the target.
pub fn task_prompt(task: &RegionTask) -> Vec<u32> {
    let mut ids = tokenizer::encode(&task.prompt);
    ids.push(tokenizer::SEP);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(bbox: [f64; 4]) -> RegionAnnotation {
        RegionAnnotation {
            bbox,
            label: "cat".into(),
            caption: "a cat".into(),
            confidence: 0.9,
            kind: RegionKind::General,
        }
    }

    #[test]
    fn box_reference_points() {
        assert_eq!(quantize_box([0.0, 0.0, 448.0, 448.0], (448, 448)).unwrap(), [0, 0, 999, 999]);
        let t = format_region_task(&region([224.0, 224.0, 448.0, 448.0]), TaskKind::StringToBbox, (448, 448), "x").unwrap();
        assert_eq!(t.target, "<box>499,499,999,999</box>");
        assert_eq!(t.prompt, "a cat");
    }

    #[test]
    fn degenerate_and_ocr_mismatch() {
        assert!(quantize_box([10.0, 10.0, 10.2, 50.0], (4000, 4000)).is_err());
        assert!(format_region_task(&region([0.0, 0.0, 5.0, 5.0]), TaskKind::BboxToOcr, (10, 10), "x").is_err());
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(parse_box("see <box>1,2,3,4</box>").unwrap(), [1, 2, 3, 4]);
        for s in ["", "<box>1,2,3</box>", "<box>1,2,3,4,5</box>", "<box>1,2,3,1000</box>", "<box>a,2,3,4</box>"] {
            assert!(parse_box(s).is_err(), "{s}");
        }
    }

    #[test]
    fn task_kind_names() {
        let t = RegionTask {
            kind: TaskKind::OcrToBbox,
            prompt: "p".into(),
            target: "t".into(),
            image_id: "i".into(),
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"kind":"ocr-to-bbox","prompt":"p","target":"t","image_id":"i"}"#);
    }
}
