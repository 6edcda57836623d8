//! Stochastic attack layer: the distortions a watermarked image may suffer,
//! applied during training at fixed sampling weights and exposed standalone
//! for evaluation and the CLI.
//!
//! All attacks map [0,1] images to [0,1] images of the same shape and are
//! deterministic given an explicit seeded generator. Gradient contract:
//! Gaussian noise and dropout are differentiable through the drawn
//! noise/mask; salt & pepper and JPEG are straight-through (backward is the
//! identity).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One concrete attack with its parameter.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AttackSpec {
    NoAttack,
    SaltPepper { p: f32 },
    Gaussian { sigma: f32 },
    Jpeg { quality: u8 },
    Dropout { p: f32 },
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackSpec::SaltPepper { p } | AttackSpec::Dropout { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("probability {p} not in [0,1]")));
                }
            }
            AttackSpec::Gaussian { sigma } => {
                if sigma < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative sigma {sigma}")));
                }
            }
            AttackSpec::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(Error::InvalidArgument(format!(
                        "jpeg quality {quality} not in [1,100]"
                    )));
                }
            }
            AttackSpec::NoAttack => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::NoAttack => "none",
            AttackSpec::SaltPepper { .. } => "salt-pepper",
            AttackSpec::Gaussian { .. } => "gaussian",
            AttackSpec::Jpeg { .. } => "jpeg",
            AttackSpec::Dropout { .. } => "dropout",
        }
    }
}

impl std::fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            AttackSpec::NoAttack => write!(f, "none"),
            AttackSpec::SaltPepper { p } => write!(f, "salt-pepper(p={p})"),
            AttackSpec::Gaussian { sigma } => write!(f, "gaussian(sigma={sigma})"),
            AttackSpec::Jpeg { quality } => write!(f, "jpeg(quality={quality})"),
            AttackSpec::Dropout { p } => write!(f, "dropout(p={p})"),
        }
    }
}

/// Weighted attack choices for the training-time simulator.
#[derive(Clone, Debug)]
pub struct AttackDistribution {
    entries: Vec<(AttackSpec, f64)>,
}

impl AttackDistribution {
    pub fn new(entries: Vec<(AttackSpec, f64)>) -> Result<Self> {
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        if entries.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "attack weights must sum to 1, got {total}"
            )));
        }
        for (spec, w) in &entries {
            spec.validate()?;
            if *w < 0.0 {
                return Err(Error::InvalidArgument("negative attack weight".into()));
            }
        }
        Ok(AttackDistribution { entries })
    }

    /// No attack 1/3; salt & pepper p=0.1, Gaussian sigma=0.15, JPEG
    /// quality=50, dropout p=0.3 at 1/6 each.
    pub fn standard() -> Self {
        AttackDistribution {
            entries: vec![
                (AttackSpec::NoAttack, 1.0 / 3.0),
                (AttackSpec::SaltPepper { p: 0.1 }, 1.0 / 6.0),
                (AttackSpec::Gaussian { sigma: 0.15 }, 1.0 / 6.0),
                (AttackSpec::Jpeg { quality: 50 }, 1.0 / 6.0),
                (AttackSpec::Dropout { p: 0.3 }, 1.0 / 6.0),
            ],
        }
    }

    pub fn entries(&self) -> &[(AttackSpec, f64)] {
        &self.entries
    }
}

/// One i.i.d. draw from the distribution.
pub fn sample_attack(dist: &AttackDistribution, rng: &mut impl Rng) -> AttackSpec {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (spec, w) in &dist.entries {
        acc += w;
        if u < acc {
            return *spec;
        }
    }
    dist.entries.last().unwrap().0
}

/// Each pixel independently becomes 0 or 1 (equal odds) with probability `p`.
pub fn salt_pepper(image: &Tensor, p: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(image.shape(), |i| {
        if rng.gen_range(0.0f32..1.0) < p {
            if rng.gen_range(0..2u8) == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            image[i]
        }
    })
}

/// i.i.d. zero-mean Gaussian noise, clamped back into [0, 1].
pub fn gaussian_noise(image: &Tensor, sigma: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(image.shape(), |i| {
        (image[i] + sigma * sample_standard_normal(rng)).clamp(0.0, 1.0)
    })
}

// Box-Muller; two uniforms per draw keeps the stream simple and seedable.
fn sample_standard_normal(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Each pixel reverts to the original (host) pixel with probability `p`.
pub fn dropout_attack(
    watermarked: &Tensor,
    original: &Tensor,
    p: f32,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if watermarked.shape() != original.shape() {
        return Err(Error::shape("dropout_attack", watermarked.shape(), original.shape()));
    }
    Ok(Tensor::from_fn(watermarked.shape(), |i| {
        if rng.gen_range(0.0f32..1.0) < p {
            original[i]
        } else {
            watermarked[i]
        }
    }))
}

/// Dispatch one attack. `original` is required only by the dropout attack.
pub fn apply_attack(
    spec: AttackSpec,
    watermarked: &Tensor,
    original: Option<&Tensor>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    spec.validate()?;
    match spec {
        AttackSpec::NoAttack => Ok(watermarked.clone()),
        AttackSpec::SaltPepper { p } => Ok(salt_pepper(watermarked, p, rng)),
        AttackSpec::Gaussian { sigma } => Ok(gaussian_noise(watermarked, sigma, rng)),
        AttackSpec::Jpeg { quality } => jpeg_attack(watermarked, quality),
        AttackSpec::Dropout { p } => {
            let orig = original.ok_or_else(|| {
                Error::InvalidArgument("dropout attack needs the original image".into())
            })?;
            dropout_attack(watermarked, orig, p, rng)
        }
    }
}

/// Attack plus the elementwise gradient scale for the training graph:
/// 1 everywhere for the straight-through attacks (none, salt & pepper,
/// JPEG), the clamp mask for Gaussian, `1 - mask` for dropout.
pub fn apply_attack_with_grad(
    spec: AttackSpec,
    watermarked: &Tensor,
    original: &Tensor,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let ones = || Tensor::full(watermarked.shape(), 1.0);
    match spec {
        AttackSpec::NoAttack => Ok((watermarked.clone(), ones())),
        AttackSpec::SaltPepper { p } => Ok((salt_pepper(watermarked, p, rng), ones())),
        AttackSpec::Jpeg { quality } => Ok((jpeg_attack(watermarked, quality)?, ones())),
        AttackSpec::Gaussian { sigma } => {
            let mut grad = Tensor::zeros(watermarked.shape());
            let out = Tensor::from_fn(watermarked.shape(), |i| {
                let raw = watermarked[i] + sigma * sample_standard_normal(rng);
                if (0.0..=1.0).contains(&raw) {
                    grad[i] = 1.0;
                }
                raw.clamp(0.0, 1.0)
            });
            Ok((out, grad))
        }
        AttackSpec::Dropout { p } => {
            if watermarked.shape() != original.shape() {
                return Err(Error::shape("dropout_attack", watermarked.shape(), original.shape()));
            }
            let mut grad = Tensor::zeros(watermarked.shape());
            let out = Tensor::from_fn(watermarked.shape(), |i| {
                if rng.gen_range(0.0f32..1.0) < p {
                    original[i]
                } else {
                    grad[i] = 1.0;
                    watermarked[i]
                }
            });
            Ok((out, grad))
        }
    }
}

/// Derive an independent per-item generator from a step seed.
pub fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (item as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

// --- JPEG quantization round trip ---------------------------------------
//
// Per-channel 8x8 block DCT, quantization with the standard luminance table
// scaled by the libjpeg quality rule, dequantization, inverse DCT, clamp.
// Entropy coding is lossless and pixel-irrelevant, so it is omitted.

#[rustfmt::skip]
const LUMA_QUANT: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0,  24.0,  40.0,  51.0,  61.0,
    12.0, 12.0, 14.0, 19.0,  26.0,  58.0,  60.0,  55.0,
    14.0, 13.0, 16.0, 24.0,  40.0,  57.0,  69.0,  56.0,
    14.0, 17.0, 22.0, 29.0,  51.0,  87.0,  80.0,  62.0,
    18.0, 22.0, 37.0, 56.0,  68.0, 109.0, 103.0,  77.0,
    24.0, 35.0, 55.0, 64.0,  81.0, 104.0, 113.0,  92.0,
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0,
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0,  99.0,
];

/// Quality-scaled quantization table (libjpeg rule).
fn quant_table(quality: u8) -> [f32; 64] {
    let q = quality.clamp(1, 100) as f32;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0f32; 64];
    for (dst, &base) in t.iter_mut().zip(&LUMA_QUANT) {
        *dst = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_cos_table() -> [[f32; 8]; 8] {
    let mut t = [[0.0f32; 8]; 8];
    for (x, row) in t.iter_mut().enumerate() {
        for (u, v) in row.iter_mut().enumerate() {
            *v = (((2 * x + 1) as f32) * (u as f32) * std::f32::consts::PI / 16.0).cos();
        }
    }
    t
}

/// JPEG-style quantization round trip on a [0,1] image of shape
/// `[H, W, C]`, `[H, W]`, or `[N, C, H, W]` (each channel independently).
pub fn jpeg_attack(image: &Tensor, quality: u8) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} not in [1,100]")));
    }
    let shape = image.shape().to_vec();
    // resolve to a list of (H, W) planes over a scratch channel-major copy
    let (h, w, planes): (usize, usize, usize) = match shape.as_slice() {
        &[h, w] => (h, w, 1),
        &[h, w, c] => (h, w, c),
        &[n, c, h, w] => (h, w, n * c),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "jpeg_attack: unsupported shape {shape:?}"
            )))
        }
    };
    let interleaved = shape.len() == 3;
    let qt = quant_table(quality);
    let cos = dct_cos_table();
    let alpha = |u: usize| if u == 0 { std::f32::consts::FRAC_1_SQRT_2 } else { 1.0 };

    let mut out = image.clone();
    let mut plane = vec![0.0f32; h * w];
    for p in 0..planes {
        // gather
        for y in 0..h {
            for x in 0..w {
                let idx = if interleaved { (y * w + x) * planes + p } else { p * h * w + y * w + x };
                plane[y * w + x] = image[idx] * 255.0 - 128.0;
            }
        }
        // per 8x8 block (edge blocks replicate the border pixel)
        let mut block = [[0.0f32; 8]; 8];
        let mut coef = [[0.0f32; 8]; 8];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (dy, row) in block.iter_mut().enumerate() {
                    let sy = (by + dy).min(h - 1);
                    for (dx, cell) in row.iter_mut().enumerate() {
                        let sx = (bx + dx).min(w - 1);
                        *cell = plane[sy * w + sx];
                    }
                }
                // forward DCT-II
                for (u, crow) in coef.iter_mut().enumerate() {
                    for v in 0..8 {
                        let mut acc = 0.0f32;
                        for (x, brow) in block.iter().enumerate() {
                            for (y, &b) in brow.iter().enumerate() {
                                acc += b * cos[x][u] * cos[y][v];
                            }
                        }
                        crow[v] = 0.25 * alpha(u) * alpha(v) * acc;
                    }
                }
                // quantize + dequantize
                for u in 0..8 {
                    for v in 0..8 {
                        let q = qt[u * 8 + v];
                        coef[u][v] = (coef[u][v] / q).round() * q;
                    }
                }
                // inverse DCT
                for (x, brow) in block.iter_mut().enumerate() {
                    for (y, b) in brow.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, &cv) in crow.iter().enumerate() {
                                acc += alpha(u) * alpha(v) * cv * cos[x][u] * cos[y][v];
                            }
                        }
                        *b = 0.25 * acc;
                    }
                }
                for dy in 0..8 {
                    if by + dy >= h {
                        break;
                    }
                    for dx in 0..8 {
                        if bx + dx >= w {
                            break;
                        }
                        plane[(by + dy) * w + bx + dx] = block[dy][dx];
                    }
                }
            }
        }
        // scatter
        for y in 0..h {
            for x in 0..w {
                let idx = if interleaved { (y * w + x) * planes + p } else { p * h * w + y * w + x };
                out[idx] = ((plane[y * w + x] + 128.0) / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
