use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use super::ManifestRecord;

/// Bin edges over `sqrt(width · height)`.
pub const RESOLUTION_EDGES: [f64; 9] = [0.0, 128.0, 256.0, 384.0, 512.0, 768.0, 1024.0, 1536.0, 2048.0];
/// Bin edges over width / height (images and boxes).
pub const ASPECT_EDGES: [f64; 9] = [0.0, 0.25, 1.0 / 3.0, 0.5, 0.75, 1.0, 4.0 / 3.0, 2.0, 3.0];
/// Bin edges over whitespace-separated word counts.
pub const TOKEN_EDGES: [f64; 8] = [0.0, 10.0, 20.0, 50.0, 100.0, 200.0, 300.0, 500.0];
/// Bin edges over box area divided by image area.
pub const AREA_EDGES: [f64; 8] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75];
/// Sides of the square resolutions at which cumulative fractions are read out.
pub const CUMULATIVE_SIDES: [u32; 3] = [256, 512, 1024];

/// Fixed-edge histogram. Bin `i` is `[edges[i], edges[i + 1])`; the last bin
/// is open above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(edges: &[f64]) -> Self {
        Self {
            edges: edges.to_vec(),
            counts: alloc::vec![0; edges.len()],
        }
    }

    /// Bin of `v`; values below the first edge land in bin 0.
    pub fn bin(&self, v: f64) -> usize {
        self.edges.iter().rposition(|&e| v >= e).unwrap_or(0)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `lo,hi,count` rows under a header; the open bound is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let hi = self.edges.get(i + 1).map_or_else(|| "inf".into(), |e| format!("{e}"));
            let _ = writeln!(s, "{},{},{}", self.edges[i], hi, c);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub images: u64,
    pub resolution: Histogram,
    pub aspect_ratio: Histogram,
    /// Keyed by `image` for image captions, else by region kind.
    pub caption_tokens: BTreeMap<String, Histogram>,
    pub bbox_area_fraction: BTreeMap<String, Histogram>,
    pub bbox_aspect: BTreeMap<String, Histogram>,
    /// `(side, fraction of images with width·height < side²)`.
    pub cumulative_resolution: Vec<(u32, f64)>,
}

impl Stats {
    /// File name and CSV body of every histogram.
    pub fn csv_files(&self) -> Vec<(String, String)> {
        let mut out = alloc::vec![
            ("resolution.csv".into(), self.resolution.to_csv()),
            ("aspect_ratio.csv".into(), self.aspect_ratio.to_csv()),
        ];
        for (prefix, map) in [
            ("caption_tokens", &self.caption_tokens),
            ("bbox_area_fraction", &self.bbox_area_fraction),
            ("bbox_aspect", &self.bbox_aspect),
        ] {
            for (kind, h) in map {
                out.push((format!("{prefix}_{kind}.csv"), h.to_csv()));
            }
        }
        let mut cum = String::from("side,fraction_below\n");
        for (side, f) in &self.cumulative_resolution {
            let _ = writeln!(cum, "{side},{f:.6}");
        }
        out.push(("cumulative_resolution.csv".into(), cum));
        out
    }
}

pub const IMAGE_CAPTION_KIND: &str = "image";

pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>) -> Stats {
    let mut stats = Stats {
        images: 0,
        resolution: Histogram::new(&RESOLUTION_EDGES),
        aspect_ratio: Histogram::new(&ASPECT_EDGES),
        caption_tokens: BTreeMap::new(),
        bbox_area_fraction: BTreeMap::new(),
        bbox_aspect: BTreeMap::new(),
        cumulative_resolution: Vec::new(),
    };
    let mut below = [0u64; CUMULATIVE_SIDES.len()];
    let words = |t: &str| t.split_whitespace().count() as f64;
    for rec in records {
        stats.images += 1;
        let (w, h) = (rec.width as f64, rec.height as f64);
        stats.resolution.add(libm::sqrt(w * h));
        if h > 0.0 {
            stats.aspect_ratio.add(w / h);
        }
        let pixels = rec.width as u64 * rec.height as u64;
        for (b, &side) in below.iter_mut().zip(&CUMULATIVE_SIDES) {
            if pixels < side as u64 * side as u64 {
                *b += 1;
            }
        }
        for c in &rec.captions {
            hist(&mut stats.caption_tokens, IMAGE_CAPTION_KIND, &TOKEN_EDGES).add(words(&c.text));
        }
        for r in &rec.regions {
            let kind = r.kind.name();
            if !r.caption.trim().is_empty() {
                hist(&mut stats.caption_tokens, kind, &TOKEN_EDGES).add(words(&r.caption));
            }
            if w * h > 0.0 {
                hist(&mut stats.bbox_area_fraction, kind, &AREA_EDGES).add(r.area() / (w * h));
            }
            let (bw, bh) = (r.bbox[2] - r.bbox[0], r.bbox[3] - r.bbox[1]);
            if bh > 0.0 {
                hist(&mut stats.bbox_aspect, kind, &ASPECT_EDGES).add(bw / bh);
            }
        }
    }
    let n = stats.images.max(1) as f64;
    stats.cumulative_resolution = CUMULATIVE_SIDES.iter().zip(below).map(|(&s, b)| (s, b as f64 / n)).collect();
    stats
}

fn hist<'m>(map: &'m mut BTreeMap<String, Histogram>, kind: &str, edges: &[f64]) -> &'m mut Histogram {
    map.entry(kind.into()).or_insert_with(|| Histogram::new(edges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finecap::Caption;

    fn rec(w: u32, h: u32, captions: &[&str]) -> ManifestRecord {
        ManifestRecord {
            image_id: "i".into(),
            width: w,
            height: h,
            phash: None,
            captions: captions
                .iter()
                .map(|t| Caption {
                    text: (*t).into(),
                    source_model: "m".into(),
                })
                .collect(),
            regions: Vec::new(),
            quality: None,
            path: None,
        }
    }

    #[test]
    fn single_image_cumulative_is_strictly_below() {
        let s = compute_stats([&rec(512, 512, &[])]);
        assert_eq!(s.cumulative_resolution, [(256, 0.0), (512, 0.0), (1024, 1.0)]);
    }

    #[test]
    fn short_captions_fill_first_bin() {
        let r = rec(100, 100, &["a b c d", "e f g h", "one two three four"]);
        let s = compute_stats([&r]);
        let h = &s.caption_tokens[IMAGE_CAPTION_KIND];
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn csv_has_open_last_bin() {
        let mut h = Histogram::new(&[0.0, 1.0]);
        h.add(5.0);
        h.add(-1.0);
        assert_eq!(h.to_csv(), "lo,hi,count\n0,1,1\n1,inf,1\n");
    }
}
