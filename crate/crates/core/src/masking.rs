//! Binary masks, erasure and final composition.
//!
//! Mask polarity: 1 marks a valid (kept) pixel, 0 an erased one, so erasing is a plain
//! product `M * I` and the final image is `M * I + (1 - M) * G`.

use std::fmt;
use std::str::FromStr;

use gatefill_tensor::{par, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

/// Closed interval of erased ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskBand {
    pub lo: f64,
    pub hi: f64,
}

impl MaskBand {
    pub const EASY: MaskBand = MaskBand { lo: 0.0, hi: 0.4 };
    pub const DIFFICULT: MaskBand = MaskBand { lo: 0.4, hi: 1.0 };
    pub const FULL: MaskBand = MaskBand { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::Config(format!("mask band needs 0 <= lo < hi <= 1, got {self}")));
        }
        Ok(())
    }

    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.lo && ratio <= self.hi
    }

    pub fn label(&self) -> String {
        format!("{:.2}-{:.2}", self.lo, self.hi)
    }
}

impl fmt::Display for MaskBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lo, self.hi)
    }
}

impl FromStr for MaskBand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("mask band must be `lo,hi`, got `{s}`")))?;
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("mask band bound `{x}` is not a number")))
        };
        MaskBand::new(num(lo)?, num(hi)?)
    }
}

/// `1 x H x W` mask with values in {0, 1}; 1 = valid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!("mask buffer {} != {height}x{width}", bits.len())));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Mask(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![1; height * width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![0; height * width] }
    }

    /// Reads a `[1, H, W]` (or `[H, W]`) tensor; every value must be exactly 0 or 1.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::Dimension(format!("mask tensor must be [1, H, W], got {s:?}"))),
        };
        let bits = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(1)
                } else if v == T::zero() {
                    Ok(0)
                } else {
                    Err(Error::Mask(format!("non-binary mask value {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { height: h, width: w, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    /// Fraction of erased pixels.
    pub fn erased_ratio(&self) -> f64 {
        let erased = self.bits.iter().filter(|&&b| b == 0).count();
        erased as f64 / self.bits.len().max(1) as f64
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask dims")
    }

    /// Swaps valid and erased pixels.
    pub fn complement(&self) -> Self {
        Self { height: self.height, width: self.width, bits: self.bits.iter().map(|b| 1 - b).collect() }
    }
}

/// Stacks masks into an `[N, 1, H, W]` tensor.
pub fn mask_batch<T: Real>(masks: &[BinaryMask]) -> Result<Tensor<T>> {
    let ts: Vec<Tensor<T>> = masks.iter().map(|m| m.to_tensor()).collect();
    Ok(Tensor::stack(&ts)?)
}

const MAX_ATTEMPTS: usize = 1000;

/// Draws a mask whose erased ratio lies in `band`.
///
/// Shapes are unions of 1..=4 axis-aligned rectangles and 0..=4 thick strokes, redrawn
/// until the ratio falls inside the band.
pub fn sample_mask(band: MaskBand, size: usize, seed: u64) -> Result<BinaryMask> {
    band.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let m = draw_shapes(size, &mut rng);
        if band.contains(m.erased_ratio()) {
            return Ok(m);
        }
    }
    Err(Error::Sampling(format!("no mask with erased ratio in [{}, {}] after {MAX_ATTEMPTS} attempts", band.lo, band.hi)))
}

/// `n` masks with per-item seeds drawn from `rng`, sampled in parallel.
pub fn sample_masks<R: Rng>(band: MaskBand, size: usize, n: usize, rng: &mut R) -> Result<Vec<BinaryMask>> {
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    par::map_range(n, |i| sample_mask(band, size, seeds[i])).into_iter().collect()
}

fn draw_shapes(size: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let s = size as f64;
    let mut bits = vec![1u8; size * size];
    // overall scale of this attempt, so both small and large holes are reachable
    let scale: f64 = rng.gen_range(0.15..1.0);
    let rects = rng.gen_range(1..=4);
    for _ in 0..rects {
        let w = (rng.gen_range(0.25..1.0) * scale * s).max(1.0);
        let h = (rng.gen_range(0.25..1.0) * scale * s).max(1.0);
        let x0 = rng.gen_range(-0.1 * s..s - 0.5 * w);
        let y0 = rng.gen_range(-0.1 * s..s - 0.5 * h);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h {
                    bits[y * size + x] = 0;
                }
            }
        }
    }
    let strokes = rng.gen_range(0..=4);
    for _ in 0..strokes {
        let thick = rng.gen_range(s / 16.0..s / 6.0) * scale.sqrt();
        let vertices = rng.gen_range(2..=5);
        let mut p = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        for _ in 1..vertices {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(0.1..0.5) * s;
            let q = ((p.0 + len * angle.cos()).clamp(0.0, s), (p.1 + len * angle.sin()).clamp(0.0, s));
            stamp_segment(&mut bits, size, p, q, thick / 2.0);
            p = q;
        }
    }
    BinaryMask { height: size, width: size, bits }
}

fn stamp_segment(bits: &mut [u8], size: usize, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
            if (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius {
                bits[y * size + x] = 0;
            }
        }
    }
}

fn check_pair<T: Real>(img: &Tensor<T>, m: &BinaryMask) -> Result<()> {
    match img.shape() {
        [_, h, w] if *h == m.height && *w == m.width => Ok(()),
        s => Err(Error::Dimension(format!("image {s:?} incompatible with {}x{} mask", m.height, m.width))),
    }
}

/// `M * I`, the mask broadcast over channels.
pub fn erase<T: Real>(img: &Tensor<T>, m: &BinaryMask) -> Result<Tensor<T>> {
    check_pair(img, m)?;
    let plane = m.height * m.width;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if m.bits[i % plane] == 0 {
            *v = T::zero();
        }
    }
    Ok(out)
}

/// `M * input + (1 - M) * generated`: valid pixels copied verbatim from `input`,
/// erased pixels taken from `generated`.
pub fn compose_final<T: Real>(input: &Tensor<T>, m: &BinaryMask, generated: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(input, m)?;
    dim_check("generated image", generated.shape(), input.shape())?;
    let plane = m.height * m.width;
    let data = input
        .data()
        .iter()
        .zip(generated.data())
        .enumerate()
        .map(|(i, (&a, &g))| if m.bits[i % plane] == 1 { a } else { g })
        .collect();
    Ok(Tensor::from_vec(input.shape(), data)?)
}

/// Batched [`compose_final`]: `masks` is `[N, 1, H, W]`, images `[N, C, H, W]`.
pub fn compose_batch<T: Real>(input: &Tensor<T>, masks: &Tensor<T>, generated: &Tensor<T>) -> Result<Tensor<T>> {
    dim_check("generated image", generated.shape(), input.shape())?;
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [N, C, H, W] images, got {s:?}")));
    }
    dim_check("masks", masks.shape(), &[s[0], 1, s[2], s[3]])?;
    let plane = s[2] * s[3];
    let per_image = s[1] * plane;
    let m = masks.data();
    let data = input
        .data()
        .iter()
        .zip(generated.data())
        .enumerate()
        .map(|(i, (&a, &g))| if m[(i / per_image) * plane + i % plane] == T::one() { a } else { g })
        .collect();
    Ok(Tensor::from_vec(s, data)?)
}

/// In-graph composition for batches: `masks` is `[N, 1, H, W]`, images `[N, C, H, W]`.
pub fn compose_var<'g, T: Real>(input: Var<'g, T>, masks: &Tensor<T>, generated: Var<'g, T>) -> Var<'g, T> {
    let inv = masks.map(|m| T::one() - m);
    input.mul_tensor(masks).add(generated.mul_tensor(&inv))
}
