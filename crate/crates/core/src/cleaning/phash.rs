use std::f64::consts::PI;
use std::fmt;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

const SAMPLE_SIZE: usize = 32;
const HASH_SIDE: usize = 8;

/// 64-bit DCT perceptual hash of image luminance.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PerceptualHash(pub u64);

impl PerceptualHash {
    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn distance(self, other: Self) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Decode `bytes` and hash the decoded luminance.
    pub fn from_image_bytes(bytes: &[u8]) -> Result<Self, image::ImageError> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_image(&img))
    }

    pub fn from_image(img: &image::DynamicImage) -> Self {
        let small = img
            .resize_exact(SAMPLE_SIZE as u32, SAMPLE_SIZE as u32, FilterType::Triangle)
            .to_luma8();
        let pixels: Vec<f64> = small.as_raw().iter().map(|&p| f64::from(p)).collect();
        Self::from_luma(&pixels)
    }

    /// Hash a row-major 32x32 luminance grid.
    pub fn from_luma(pixels: &[f64]) -> Self {
        assert_eq!(pixels.len(), SAMPLE_SIZE * SAMPLE_SIZE);
        let coeffs = low_frequency_dct(pixels);
        // median of the AC terms; the DC term only shifts brightness
        let mut ac: Vec<f64> = coeffs[1..].to_vec();
        ac.sort_by(|a, b| a.total_cmp(b));
        let median = (ac[ac.len() / 2 - 1] + ac[ac.len() / 2]) / 2.0;
        let bits = coeffs
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &c)| if c > median { acc | (1 << i) } else { acc });
        Self(bits)
    }
}

impl fmt::Debug for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PerceptualHash({:016x})", self.0)
    }
}

/// Top-left 8x8 block of the 2D DCT-II of a 32x32 grid, row-major.
fn low_frequency_dct(pixels: &[f64]) -> Vec<f64> {
    let n = SAMPLE_SIZE;
    let basis: Vec<f64> = (0..HASH_SIDE)
        .flat_map(|k| (0..n).map(move |x| ((2 * x + 1) as f64 * k as f64 * PI / (2 * n) as f64).cos()))
        .collect();
    // rows first: tmp[y][k] = sum_x p[y][x] * basis[k][x]
    let mut tmp = vec![0.0; n * HASH_SIDE];
    for y in 0..n {
        for k in 0..HASH_SIDE {
            tmp[y * HASH_SIDE + k] = (0..n).map(|x| pixels[y * n + x] * basis[k * n + x]).sum();
        }
    }
    let mut out = vec![0.0; HASH_SIDE * HASH_SIDE];
    for v in 0..HASH_SIDE {
        for u in 0..HASH_SIDE {
            out[v * HASH_SIDE + u] = (0..n).map(|y| tmp[y * HASH_SIDE + u] * basis[v * n + y]).sum();
        }
    }
    out
}
