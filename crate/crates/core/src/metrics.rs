//! Quality and robustness metrics plus the standard evaluation sweep.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::model::{embed_pipeline, extract_pipeline, ModelParameters, PipelineConfig, WatermarkBits};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB between two [0,1] images, computed on
/// 8-bit quantized values over every channel. Identical images give
/// `f32::INFINITY`.
pub fn psnr(reference: &Tensor, distorted: &Tensor) -> Result<f32> {
    if reference.shape() != distorted.shape() {
        return Err(Error::shape("psnr", reference.shape(), distorted.shape()));
    }
    if reference.len() == 0 {
        return Err(Error::InvalidArgument("psnr of empty image".into()));
    }
    let mut acc = 0.0f64;
    for i in 0..reference.len() {
        let a = (reference[i].clamp(0.0, 1.0) * 255.0).round() as f64;
        let b = (distorted[i].clamp(0.0, 1.0) * 255.0).round() as f64;
        acc += (a - b) * (a - b);
    }
    let mse = acc / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f32::INFINITY);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()) as f32)
}

/// Bit error rate in percent between two watermarks of equal length.
pub fn ber(expected: &WatermarkBits, decoded: &WatermarkBits) -> f32 {
    let wrong = expected
        .bits()
        .iter()
        .zip(decoded.bits())
        .filter(|(a, b)| a != b)
        .count();
    100.0 * wrong as f32 / expected.bits().len() as f32
}

/// Render an infinite PSNR as the conventional sentinel.
pub fn format_psnr(value: f32) -> String {
    if value.is_infinite() {
        "inf".to_string()
    } else {
        format!("{value:.2}")
    }
}

/// Robustness of the model under one attack, averaged over a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub mean_ber: f32,
}

/// Full evaluation sweep output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub images: usize,
    pub mean_psnr: f32,
    pub attacks: Vec<AttackResult>,
}

impl EvaluationReport {
    /// Plain-text table, one attack per row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("images: {}\n", self.images));
        out.push_str(&format!("mean psnr: {} dB\n", format_psnr(self.mean_psnr)));
        out.push_str(&format!("{:<24} {:>10}\n", "attack", "ber (%)"));
        for row in &self.attacks {
            out.push_str(&format!("{:<24} {:>10.3}\n", row.attack, row.mean_ber));
        }
        out
    }
}

/// Attack list used by the evaluation sweep: clean plus the four training
/// distortions at their standard strengths.
pub fn standard_evaluation_attacks() -> Vec<AttackSpec> {
    vec![
        AttackSpec::NoAttack,
        AttackSpec::SaltPepper { p: 0.1 },
        AttackSpec::Gaussian { sigma: 0.15 },
        AttackSpec::Jpeg { quality: 50 },
        AttackSpec::Dropout { p: 0.3 },
    ]
}

/// Embed a fresh random watermark into every image, measure imperceptibility
/// (mean PSNR of watermarked vs host) and robustness (mean BER after each
/// attack). Fully deterministic for a given seed.
pub fn evaluate(
    params: &ModelParameters,
    config: &PipelineConfig,
    images: &[Tensor],
    attacks: &[AttackSpec],
    seed: u64,
) -> Result<EvaluationReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("evaluation requires at least one image".into()));
    }
    let mut psnr_sum = 0.0f64;
    let mut finite_psnr = true;
    let mut ber_sums = vec![0.0f64; attacks.len()];
    for (idx, host) in images.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let wm = WatermarkBits::random(&mut rng);
        let marked = embed_pipeline(host, &wm, params, config)?;
        let p = psnr(host, &marked)?;
        if p.is_infinite() {
            finite_psnr = false;
        } else {
            psnr_sum += p as f64;
        }
        for (a, spec) in attacks.iter().enumerate() {
            let attacked = apply_attack(*spec, &marked, Some(host), &mut rng)?;
            let decoded = extract_pipeline(&attacked, params, config)?;
            ber_sums[a] += ber(&wm, &decoded) as f64;
        }
    }
    let n = images.len() as f64;
    Ok(EvaluationReport {
        images: images.len(),
        mean_psnr: if finite_psnr { (psnr_sum / n) as f32 } else { f32::INFINITY },
        attacks: attacks
            .iter()
            .zip(ber_sums)
            .map(|(spec, s)| AttackResult { attack: spec.to_string(), mean_ber: (s / n) as f32 })
            .collect(),
    })
}
