//! Colored-shape images with exact ground truth.
//!
//! Images are grids of 28-pixel cells; each shape sits inset in one cell.
//! The background is a smooth two-axis color ramp, so every patch carries
//! its absolute position in its pixels, which is what lets a decoder read
//! coordinates off patch features.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::finecap::{Caption, ManifestRecord};
use crate::objectives::{RegionAnnotation, RegionKind};
use crate::patching::ImageTensor;
use crate::rng;

pub const CELL: usize = 28;
/// Gap between a shape's bounding box and its cell border.
pub const INSET: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether local point `(u, v)` in `[0, 1]²` of the shape's box is inked.
    fn covers(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Square => (0.1..=0.9).contains(&u) && (0.1..=0.9).contains(&v),
            Shape::Circle => (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25,
            Shape::Triangle => v >= 0.05 && (u - 0.5).abs() <= 0.5 * v,
            Shape::Cross => (u - 0.5).abs() <= 0.15 || (v - 0.5).abs() <= 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeItem {
    pub color: Color,
    pub shape: Shape,
    /// `(row, col)` of the cell.
    pub cell: (usize, usize),
}

impl ShapeItem {
    /// Pixel box `[x_min, y_min, x_max, y_max]` of the shape.
    pub fn bbox(&self) -> [f64; 4] {
        let (r, c) = self.cell;
        let x0 = (c * CELL + INSET) as f64;
        let y0 = (r * CELL + INSET) as f64;
        let side = (CELL - 2 * INSET) as f64;
        [x0, y0, x0 + side, y0 + side]
    }

    /// "red circle"
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: String,
    /// `(rows, cols)` of cells.
    pub cells: (usize, usize),
    pub items: Vec<ShapeItem>,
    pub image: ImageTensor,
}

impl SynthImage {
    pub fn size(&self) -> (u32, u32) {
        (self.image.width() as u32, self.image.height() as u32)
    }

    /// Manifest line with one region per shape.
    pub fn record(&self, caption: &str) -> ManifestRecord {
        let (w, h) = self.size();
        ManifestRecord {
            image_id: self.id.clone(),
            width: w,
            height: h,
            phash: Some(crate::finecap::phash(&self.image)),
            captions: alloc::vec![Caption {
                text: caption.into(),
                source_model: "template".into(),
            }],
            regions: self
                .items
                .iter()
                .map(|it| RegionAnnotation {
                    bbox: it.bbox(),
                    label: it.phrase(),
                    caption: it.phrase(),
                    confidence: 1.0,
                    kind: RegionKind::General,
                })
                .collect(),
            quality: Some(crate::finecap::measure_quality(&self.image)),
            path: None,
        }
    }
}

fn background(x: usize, y: usize, w: usize, h: usize) -> [f32; 3] {
    let u = (x as f32 + 0.5) / w as f32;
    let v = (y as f32 + 0.5) / h as f32;
    [0.25 + 0.5 * u, 0.25 + 0.5 * v, 0.5]
}

pub fn render(id: &str, cells: (usize, usize), items: &[ShapeItem]) -> SynthImage {
    let (rows, cols) = cells;
    let (w, h) = (cols * CELL, rows * CELL);
    let mut image = ImageTensor::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            image.set_pixel(x, y, background(x, y, w, h));
        }
    }
    let side = (CELL - 2 * INSET) as f32;
    for it in items {
        let b = it.bbox();
        for y in b[1] as usize..b[3] as usize {
            for x in b[0] as usize..b[2] as usize {
                let u = (x as f32 + 0.5 - b[0] as f32) / side;
                let v = (y as f32 + 0.5 - b[1] as f32) / side;
                if it.shape.covers(u, v) {
                    image.set_pixel(x, y, it.color.rgb());
                }
            }
        }
    }
    SynthImage {
        id: id.into(),
        cells,
        items: items.to_vec(),
        image,
    }
}

pub const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

/// An image and its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub image: SynthImage,
    pub caption: String,
}

/// Every (color, shape, quadrant) combination once: 64 distinct 56×56
/// images, each with a one-line caption.
pub fn pair_corpus() -> Vec<Pair> {
    let mut out = Vec::with_capacity(64);
    for color in Color::ALL {
        for shape in Shape::ALL {
            for (q, quadrant) in QUADRANTS.iter().enumerate() {
                let item = ShapeItem {
                    color,
                    shape,
                    cell: (q / 2, q % 2),
                };
                let id = format!("pair-{}-{}-{}", color.name(), shape.name(), q);
                out.push(Pair {
                    image: render(&id, (2, 2), &[item]),
                    caption: format!("a {} in the {quadrant}", item.phrase()),
                });
            }
        }
    }
    out
}

/// A caption of 200 to 256 bytes (one token per byte) describing a
/// single-shape pair image: long, yet inside the late Stage II context.
pub fn long_caption(pair: &Pair) -> String {
    let it = pair.image.items[0];
    let q = QUADRANTS[it.cell.0 * 2 + it.cell.1];
    let (c, s) = (it.color.name(), it.shape.name());
    format!(
        "{}. The picture is a small square canvas split into four equal cells. Only the {q} cell holds \
         anything: a flat {c} {s} with crisp edges. The other three cells show nothing but the soft \
         background ramp.",
        pair.caption
    )
}

/// One referring-expression example: which item of `image` is asked for.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingExample {
    pub image: SynthImage,
    pub target: usize,
}

impl GroundingExample {
    pub fn item(&self) -> &ShapeItem {
        &self.image.items[self.target]
    }
}

/// `count` images of `cells` with `shapes` distinct-looking shapes in
/// distinct cells; the referred shape is drawn uniformly. Deterministic in
/// `seed`.
pub fn grounding_corpus(count: usize, cells: (usize, usize), shapes: usize, seed: u64) -> Vec<GroundingExample> {
    let n_cells = cells.0 * cells.1;
    let shapes = shapes.clamp(1, n_cells.min(16));
    let mut r = rng::stream(seed, rng::streams::DATA);
    let looks: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    (0..count)
        .map(|i| {
            let mut cell_ids: Vec<usize> = (0..n_cells).collect();
            cell_ids.shuffle(&mut r);
            let mut pool = looks.clone();
            pool.shuffle(&mut r);
            let items: Vec<ShapeItem> = (0..shapes)
                .map(|k| ShapeItem {
                    color: pool[k].0,
                    shape: pool[k].1,
                    cell: (cell_ids[k] / cells.1, cell_ids[k] % cells.1),
                })
                .collect();
            let target = r.random_range(0..shapes);
            GroundingExample {
                image: render(&format!("ground-{seed}-{i}"), cells, &items),
                target,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_corpus_is_distinct() {
        let pairs = pair_corpus();
        assert_eq!(pairs.len(), 64);
        for (i, a) in pairs.iter().enumerate() {
            assert_eq!(a.image.size(), (56, 56));
            assert!((200..=256).contains(&long_caption(a).len()));
            for b in &pairs[i + 1..] {
                assert_ne!(a.image.image, b.image.image);
                assert_ne!(a.caption, b.caption);
            }
        }
    }

    #[test]
    fn shapes_ink_their_box_only() {
        let it = ShapeItem {
            color: Color::Red,
            shape: Shape::Square,
            cell: (1, 0),
        };
        let img = render("t", (2, 2), &[it]);
        assert_eq!(it.bbox(), [4.0, 32.0, 24.0, 52.0]);
        assert_eq!(img.image.pixel(14, 42), Color::Red.rgb());
        assert_ne!(img.image.pixel(14, 14), Color::Red.rgb());
    }

    #[test]
    fn grounding_corpus_is_deterministic() {
        let a = grounding_corpus(5, (2, 2), 2, 9);
        assert_eq!(a, grounding_corpus(5, (2, 2), 2, 9));
        for ex in &a {
            assert_eq!(ex.image.items.len(), 2);
            assert_ne!(ex.image.items[0].cell, ex.image.items[1].cell);
        }
    }
}
