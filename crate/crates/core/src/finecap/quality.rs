use alloc::vec::Vec;

use crate::patching::ImageTensor;

use super::Quality;

/// Variance of the 4-neighbour Laplacian over interior pixels of a
/// row-major grayscale image.
pub fn laplacian_variance(gray: &[f32], width: usize, height: usize) -> f64 {
    if width < 3 || height < 3 {
        return 0.0;
    }
    let at = |x: usize, y: usize| gray[y * width + x] as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let l = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            sum += l;
            sq += l * l;
            n += 1.0;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0)
}

pub fn measure_quality(image: &ImageTensor) -> Quality {
    let gray = image.grayscale();
    let blur_score = laplacian_variance(&gray, image.width(), image.height());
    let mean_luma = gray.iter().map(|&v| v as f64).sum::<f64>() / gray.len() as f64;
    let mut sat = 0.0;
    for px in image.values().chunks_exact(3) {
        let max = px[0].max(px[1]).max(px[2]) as f64;
        let min = px[0].min(px[1]).min(px[2]) as f64;
        if max > 0.0 {
            sat += (max - min) / max;
        }
    }
    Quality {
        blur_score,
        mean_luma,
        mean_saturation: sat / gray.len() as f64,
    }
}

const HASH_SIDE: usize = 32;
const HASH_LOW: usize = 8;

/// DCT perceptual hash: grayscale at 32×32, 2-D DCT-II, the 8×8 lowest
/// frequencies thresholded at their median. Bit `8·u + v` is coefficient `(u, v)`.
pub fn phash(image: &ImageTensor) -> u64 {
    let small = image.resize(HASH_SIDE, HASH_SIDE);
    let gray: Vec<f64> = small.grayscale().iter().map(|&v| v as f64).collect();
    let n = HASH_SIDE as f64;
    // cos((2x + 1)·u·π / 2N) for u < 8
    let basis: Vec<f64> = (0..HASH_LOW * HASH_SIDE)
        .map(|i| {
            let (u, x) = (i / HASH_SIDE, i % HASH_SIDE);
            libm::cos((2.0 * x as f64 + 1.0) * u as f64 * core::f64::consts::PI / (2.0 * n))
        })
        .collect();
    // Rows first, then columns.
    let mut rows = alloc::vec![0.0; HASH_SIDE * HASH_LOW];
    for y in 0..HASH_SIDE {
        for v in 0..HASH_LOW {
            let b = &basis[v * HASH_SIDE..(v + 1) * HASH_SIDE];
            rows[y * HASH_LOW + v] = (0..HASH_SIDE).map(|x| gray[y * HASH_SIDE + x] * b[x]).sum();
        }
    }
    let mut coeffs = [0.0f64; HASH_LOW * HASH_LOW];
    for u in 0..HASH_LOW {
        let b = &basis[u * HASH_SIDE..(u + 1) * HASH_SIDE];
        for v in 0..HASH_LOW {
            coeffs[u * HASH_LOW + v] = (0..HASH_SIDE).map(|y| rows[y * HASH_LOW + v] * b[y]).sum();
        }
    }
    let mut sorted = coeffs;
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[31] + sorted[32]);
    coeffs
        .iter()
        .enumerate()
        .fold(0u64, |h, (i, &c)| if c > median { h | (1 << i) } else { h })
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_image_is_blurry_and_unsaturated() {
        let img = ImageTensor::filled(40, 30, [0.5, 0.5, 0.5]);
        let q = measure_quality(&img);
        assert_eq!(q.blur_score, 0.0);
        assert!((q.mean_luma - 0.5).abs() < 1e-6);
        assert_eq!(q.mean_saturation, 0.0);
    }

    #[test]
    fn phash_is_stable_under_tiny_noise() {
        let mut img = ImageTensor::filled(64, 64, [0.0; 3]);
        for y in 0..64 {
            for x in 0..64 {
                let v = ((x * 7 + y * 3) % 64) as f32 / 64.0;
                img.set_pixel(x, y, [v, 1.0 - v, 0.5]);
            }
        }
        let mut noisy = img.clone();
        let p = noisy.pixel(10, 10);
        noisy.set_pixel(10, 10, [p[0] + 0.01, p[1], p[2]]);
        assert!(hamming(phash(&img), phash(&noisy)) <= 4);
    }
}
