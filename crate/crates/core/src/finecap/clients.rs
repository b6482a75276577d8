//! Interfaces to the external models of the curation pipeline, each with a
//! seeded, pure stub.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("client timed out after {0} ms")]
    Timeout(u64),
    #[error("client failed: {0}")]
    Failed(String),
}

/// A recaption request carries the whole image and, for region captions,
/// the crop of interest, so both views reach the captioner.
#[derive(Clone, Debug, PartialEq)]
pub struct RecaptionRequest<'a> {
    pub image_id: &'a str,
    pub size: (u32, u32),
    pub crop: Option<[f64; 4]>,
    /// Label of the crop, when known.
    pub hint: Option<&'a str>,
}

pub trait Recaptioner {
    fn caption(&self, req: &RecaptionRequest<'_>) -> Result<String, ClientError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectRequest<'a> {
    pub image_id: &'a str,
    pub size: (u32, u32),
    pub nouns: &'a [String],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub label: String,
    pub score: f64,
}

pub trait Detector {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<Vec<Detection>, ClientError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcrBox {
    pub bbox: [f64; 4],
    pub text: String,
}

pub trait OcrEngine {
    fn read(&self, image_id: &str, size: (u32, u32)) -> Result<Vec<OcrBox>, ClientError>;
}

/// Echoes a templated caption; the crop, when present, is named in it.
#[derive(Clone, Debug, Default)]
pub struct StubRecaptioner {
    pub seed: u64,
}

const ADJECTIVES: [&str; 6] = ["bright", "small", "large", "weathered", "colorful", "quiet"];

impl Recaptioner for StubRecaptioner {
    fn caption(&self, req: &RecaptionRequest<'_>) -> Result<String, ClientError> {
        let mut r = rng::stream(self.seed, req.image_id);
        let adj = ADJECTIVES[r.random_range(0..ADJECTIVES.len())];
        let subject = req.hint.unwrap_or("scene");
        Ok(match req.crop {
            Some(b) => format!(
                "a {adj} {subject} at ({:.0}, {:.0}) to ({:.0}, {:.0}) within the full {}x{} image",
                b[0], b[1], b[2], b[3], req.size.0, req.size.1
            ),
            None => format!("a {adj} {subject} photographed at {}x{}", req.size.0, req.size.1),
        })
    }
}

/// One box per requested noun, placed by a generator keyed on image and noun.
#[derive(Clone, Debug, Default)]
pub struct StubDetector {
    pub seed: u64,
}

impl Detector for StubDetector {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<Vec<Detection>, ClientError> {
        let (w, h) = (req.size.0 as f64, req.size.1 as f64);
        let root = rng::derive_seed(self.seed, req.image_id);
        Ok(req
            .nouns
            .iter()
            .map(|noun| {
                let mut r = rng::stream(root, noun);
                let x0 = r.random_range(0.0..0.7) * w;
                let y0 = r.random_range(0.0..0.7) * h;
                let bw = r.random_range(0.05..0.3) * w;
                let bh = r.random_range(0.05..0.3) * h;
                Detection {
                    bbox: [x0, y0, (x0 + bw).min(w), (y0 + bh).min(h)],
                    label: noun.clone(),
                    score: r.random_range(0.0..1.0),
                }
            })
            .collect())
    }
}

/// Returns `lines` text boxes stacked from the top of the image.
#[derive(Clone, Debug, Default)]
pub struct StubOcr {
    pub seed: u64,
    pub lines: usize,
}

impl OcrEngine for StubOcr {
    fn read(&self, image_id: &str, size: (u32, u32)) -> Result<Vec<OcrBox>, ClientError> {
        let mut r = rng::stream(self.seed, image_id);
        let (w, h) = (size.0 as f64, size.1 as f64);
        let line_h = h / (self.lines.max(1) as f64 + 1.0);
        Ok((0..self.lines)
            .map(|i| OcrBox {
                bbox: [0.05 * w, i as f64 * line_h, 0.95 * w, (i as f64 + 0.8) * line_h],
                text: format!("line {i} code {:04}", r.random_range(0..10_000)),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stubs_are_pure() {
        let d = StubDetector { seed: 3 };
        let nouns = alloc::vec![String::from("dog"), String::from("cat")];
        let req = DetectRequest {
            image_id: "a",
            size: (100, 80),
            nouns: &nouns,
        };
        assert_eq!(d.detect(&req).unwrap(), d.detect(&req).unwrap());
        for det in d.detect(&req).unwrap() {
            assert!(det.bbox[0] < det.bbox[2] && det.bbox[2] <= 100.0);
        }
        let c = StubRecaptioner { seed: 1 };
        let req = RecaptionRequest {
            image_id: "a",
            size: (10, 10),
            crop: Some([0.0, 0.0, 5.0, 5.0]),
            hint: Some("dog"),
        };
        assert_eq!(c.caption(&req), c.caption(&req));
        assert!(c.caption(&req).unwrap().contains("dog"));
    }
}
