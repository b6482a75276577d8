//! Native-resolution preprocessing.
//!
//! Images keep their aspect ratio: sides are snapped to the nearest
//! multiple of [`SNAP_MULTIPLE`] (after an optional downscale to a maximum
//! side), cut into [`PATCH`]×[`PATCH`] patches, and turned into a
//! variable-length token sequence with 2-D grid positions.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::{kernels, Tensor};

pub const PATCH: usize = 14;
pub const SNAP_MULTIPLE: u32 = 28;
pub const ROPE_BASE: f64 = 10_000.0;
pub const CHANNELS: usize = 3;

/// RGB image, `values` laid out row-major as `[y][x][channel]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image: zero-sized image"));
        }
        if values.len() != width * height * CHANNELS {
            return Err(Error::DataLength {
                shape: alloc::vec![height, width, CHANNELS],
                expected: width * height * CHANNELS,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut values = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            values.extend_from_slice(&rgb);
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.values[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Rec. 601 luma per pixel.
    pub fn grayscale(&self) -> Vec<f32> {
        self.values
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> ImageTensor {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Vec::with_capacity(width * height * 3);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for oy in 0..height {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..width {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let (a, b, c, d) = (
                    self.pixel(x0, y0),
                    self.pixel(x1, y0),
                    self.pixel(x0, y1),
                    self.pixel(x1, y1),
                );
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * wx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * wx;
                    out.push(top + (bottom - top) * wy);
                }
            }
        }
        ImageTensor {
            width,
            height,
            values: out,
        }
    }

    /// Resizes to the snapped native resolution under `max_side`.
    pub fn snapped(&self, max_side: u32) -> ImageTensor {
        let (w, h) = snap_resolution(self.width as u32, self.height as u32, SNAP_MULTIPLE, max_side);
        self.resize(w as usize, h as usize)
    }
}

/// Nearest multiple-of-`multiple` resolution, after downscaling (aspect
/// preserved) so the longer side fits in `max_side`. Never below `multiple`.
pub fn snap_resolution(width: u32, height: u32, multiple: u32, max_side: u32) -> (u32, u32) {
    let m = multiple.max(1) as f64;
    let w = width.max(1) as f64;
    let h = height.max(1) as f64;
    let cap = (max_side / multiple.max(1)).max(1) as f64 * m;
    let scale = (cap / w.max(h)).min(1.0);
    let snap = |side: f64| -> u32 {
        let s = libm::round(side * scale / m) * m;
        s.clamp(m, cap) as u32
    };
    (snap(w), snap(h))
}

/// Patch tokens of one image.
///
/// `patches` holds the flattened `PATCH×PATCH×3` pixel block of each token
/// (row-major over `[y][x][channel]`); the learnable linear patch embedding
/// is the first layer of the image encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub patches: Tensor<f32>,
    pub positions: Vec<(u32, u32)>,
    pub grid: (u32, u32),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorders tokens (and their positions) by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<TokenSequence> {
        let n = self.len();
        let mut seen = alloc::vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || core::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("permuted: order is not a permutation"));
        }
        let c = self.patches.cols();
        let mut data = Vec::with_capacity(n * c);
        for &i in order {
            data.extend_from_slice(self.patches.row(i));
        }
        Ok(TokenSequence {
            patches: Tensor::new(&[n, c], data)?,
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            grid: self.grid,
        })
    }
}

/// Cuts an image into a row-major grid of `patch × patch` tokens.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<TokenSequence> {
    if patch == 0 || image.width % patch != 0 || image.height % patch != 0 {
        return Err(Error::invalid(format!(
            "patchify: {}x{} is not divisible into {patch}x{patch} patches",
            image.width, image.height
        )));
    }
    let rows = image.height / patch;
    let cols = image.width / patch;
    let dim = patch * patch * CHANNELS;
    let mut data = Vec::with_capacity(rows * cols * dim);
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..patch {
                let start = ((r * patch + y) * image.width + c * patch) * CHANNELS;
                data.extend_from_slice(&image.values[start..start + patch * CHANNELS]);
            }
            positions.push((r as u32, c as u32));
        }
    }
    Ok(TokenSequence {
        patches: Tensor::new(&[rows * cols, dim], data)?,
        positions,
        grid: (rows as u32, cols as u32),
    })
}

/// Token indices hidden from the student during masked image modeling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    /// Sorted, unique.
    pub masked: Vec<usize>,
    pub token_count: usize,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.token_count.max(1) as f64
    }
}

/// Uniform subset of `round(ratio · token_count)` indices, deterministic in `seed`.
pub fn sample_mask(token_count: usize, ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("sample_mask: ratio {ratio} outside [0, 1]")));
    }
    if token_count == 0 {
        return Err(Error::invalid("sample_mask: no tokens"));
    }
    let k = (libm::round(ratio * token_count as f64) as usize).min(token_count);
    let mut r = rng::stream(seed, rng::streams::MASK);
    let mut masked = index::sample(&mut r, token_count, k).into_vec();
    masked.sort_unstable();
    Ok(MaskSet { masked, token_count })
}

/// Rotates per-head blocks of `vectors[tokens × heads·head_dim]` by their
/// token's grid position.
pub fn rope2d<S: Real>(vectors: &Tensor<S>, positions: &[(u32, u32)], heads: usize, base: f64) -> Result<Tensor<S>> {
    let (tokens, width) = vectors.dims2();
    if heads == 0 || width % heads != 0 || (width / heads) % 4 != 0 {
        return Err(Error::invalid(format!(
            "rope2d: width {width} with {heads} heads needs a head dimension divisible by 4"
        )));
    }
    if tokens != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "rope2d",
            lhs: vectors.shape().to_vec(),
            rhs: alloc::vec![positions.len(), 2],
        });
    }
    let head_dim = width / heads;
    let (cos, sin) = kernels::rope_table::<S>(positions, head_dim, base);
    let mut data = vectors.data().to_vec();
    kernels::rope_apply(&mut data, &cos, &sin, heads, head_dim, false);
    Tensor::new(vectors.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snap_examples() {
        assert_eq!(snap_resolution(448, 448, 28, 448), (448, 448));
        assert_eq!(snap_resolution(300, 500, 28, 1008), (308, 504));
        assert_eq!(snap_resolution(4000, 4000, 28, 448), (448, 448));
        assert_eq!(snap_resolution(1, 1, 28, 448), (28, 28));
        assert_eq!(snap_resolution(256, 256, 28, 256), (252, 252));
        assert_eq!(snap_resolution(10, 5000, 28, 448), (28, 448));
    }

    #[test]
    fn patchify_grids() {
        for (w, h, rows, cols) in [(448, 448, 32, 32), (504, 308, 22, 36), (28, 28, 2, 2)] {
            let img = ImageTensor::filled(w, h, [0.5, 0.5, 0.5]);
            let seq = patchify(&img, PATCH).unwrap();
            assert_eq!(seq.grid, (rows, cols));
            assert_eq!(seq.len(), (rows * cols) as usize);
            assert_eq!(seq.patches.cols(), 588);
        }
        let img = ImageTensor::filled(30, 28, [0.0; 3]);
        assert!(patchify(&img, PATCH).is_err());
    }

    #[test]
    fn patch_contents_are_row_major() {
        let mut img = ImageTensor::filled(28, 28, [0.0; 3]);
        img.set_pixel(14, 0, [1.0, 0.5, 0.25]);
        let seq = patchify(&img, PATCH).unwrap();
        assert_eq!(seq.positions[1], (0, 1));
        assert_eq!(&seq.patches.row(1)[..3], &[1.0, 0.5, 0.25]);
        assert!(seq.patches.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_sizes_and_determinism() {
        assert_eq!(sample_mask(4, 0.75, 9).unwrap().len(), 3);
        let a = sample_mask(324, 0.75, 1).unwrap();
        assert_eq!(a.len(), 243);
        assert_eq!(a, sample_mask(324, 0.75, 1).unwrap());
        assert!(sample_mask(10, 1.5, 0).is_err());
        assert!(sample_mask(10, -0.1, 0).is_err());
    }

    #[test]
    fn rope_identity_at_origin() {
        let v = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64 - 3.0);
        let r = rope2d(&v, &[(0, 0)], 2, ROPE_BASE).unwrap();
        assert_eq!(r, v);
        assert!(rope2d(&Tensor::<f64>::zeros(&[1, 6]), &[(0, 0)], 1, ROPE_BASE).is_err());
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = ImageTensor::filled(50, 30, [0.2, 0.4, 0.6]);
        let r = img.resize(28, 56);
        assert_eq!((r.width(), r.height()), (28, 56));
        assert!(r.values().chunks(3).all(|p| (p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6));
    }
}
