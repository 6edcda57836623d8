//! Loss functions, Adam optimizer, and the mini-batch training loop.
//!
//! Each step embeds a fresh random 256-bit payload into every batch item,
//! optionally passes the result through a per-item sampled attack, extracts,
//! and descends the weighted sum of image distortion (mean squared error on
//! the embedded channel) and payload error (mean absolute error on the soft
//! bits).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{apply_attack_with_grad, sample_attack, AttackDistribution, AttackSpec};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::metrics::{ber, format_psnr, psnr};
use crate::model::{
    channel_plane, embed_graph, extract_graph, extract_pipeline, init_parameters, set_channel_plane,
    ForwardPass, Mode, ModelParameters, PipelineConfig, WatermarkBits, WATERMARK_LEN,
};
use crate::tensor::Tensor;
use crate::wavelet::BandId;

/// Hyperparameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Image-distortion loss weight.
    pub lambda1: f32,
    /// Payload-error loss weight.
    pub lambda2: f32,
    pub learning_rate: f32,
    pub seed: u64,
    pub attack_simulator: bool,
    pub band: BandId,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 10,
            epochs: 1,
            lambda1: 33.0,
            lambda2: 0.2,
            learning_rate: 0.001,
            seed: 0,
            attack_simulator: true,
            band: BandId::Ll,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be nonnegative with a positive sum".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 2 (batch statistics)".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig::for_band(self.band)
    }
}

/// Model parameters plus Adam accumulators and the global step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParameters,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParameters) -> Self {
        TrainState {
            params,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn fresh(config: &TrainingConfig) -> Self {
        TrainState::new(init_parameters(config.seed, config.band))
    }
}

/// Mean squared error between two equal-shape images or planes.
pub fn loss_image(host: &Tensor, watermarked: &Tensor) -> Result<f32> {
    if host.shape() != watermarked.shape() {
        return Err(Error::shape("loss_image", host.shape(), watermarked.shape()));
    }
    let n = host.len() as f64;
    let sum: f64 = host
        .data()
        .iter()
        .zip(watermarked.data())
        .map(|(a, b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok((sum / n) as f32)
}

/// Mean absolute error between the original bits and the extracted soft bits.
pub fn loss_watermark(original: &[f32], extracted: &[f32]) -> Result<f32> {
    if original.len() != extracted.len() {
        return Err(Error::shape("loss_watermark", &[original.len()], &[extracted.len()]));
    }
    let n = original.len() as f64;
    let sum: f64 = original
        .iter()
        .zip(extracted)
        .map(|(a, b)| ((a - b) as f64).abs())
        .sum();
    Ok((sum / n) as f32)
}

/// Weighted total loss.
pub fn loss_total(l1: f32, l2: f32, lambda1: f32, lambda2: f32) -> f32 {
    lambda1 * l1 + lambda2 * l2
}

/// 256 i.i.d. fair bits.
pub fn random_watermark(rng: &mut impl Rng) -> WatermarkBits {
    WatermarkBits::random(rng)
}

/// Loss scalars plus training-set metrics for one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub l1: f32,
    pub l2: f32,
    pub l3: f32,
    /// PSNR of the first batch item, host vs watermarked, before any attack.
    pub psnr: f32,
    /// Thresholded bit error rate over the whole batch, after attacks.
    pub ber: f32,
}

fn stack_planes(images: &[Tensor], channel: usize) -> Result<Tensor> {
    let first = images[0].shape().to_vec();
    let (h, w) = (first[0], first[1]);
    let mut out = Tensor::zeros(&[images.len(), 1, h, w]);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.as_slice() {
            return Err(Error::shape("batch images", &first, img.shape()));
        }
        let plane = channel_plane(img, channel)?;
        out.data_mut()[i * h * w..(i + 1) * h * w].copy_from_slice(plane.data());
    }
    Ok(out)
}

fn item_view(batch: &Tensor, item: usize) -> Tensor {
    let s = batch.shape();
    let plane = s[1] * s[2] * s[3];
    Tensor::new(&[1, s[1], s[2], s[3]], batch.data()[item * plane..(item + 1) * plane].to_vec())
        .unwrap()
}

/// One forward/backward pass and Adam update over a mini-batch.
///
/// Every item gets a fresh random watermark; when the attack simulator is on,
/// every item also gets an independently sampled attack from the standard
/// distribution. Aborts (without updating parameters) if any layer produces a
/// non-finite value, naming that layer.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Tensor],
    rng: &mut ChaCha8Rng,
    config: &TrainingConfig,
) -> Result<StepStats> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset("train_step needs a non-empty batch".into()));
    }
    let pipeline = config.pipeline();
    pipeline.validate()?;
    let n = batch.len();

    let host_planes = stack_planes(batch, pipeline.host_channel)?;
    let watermarks: Vec<WatermarkBits> = (0..n).map(|_| random_watermark(rng)).collect();
    let mut wm_planes = Tensor::zeros(&[n, 1, 16, 16]);
    let mut wm_targets = Tensor::zeros(&[n, WATERMARK_LEN]);
    for (i, wm) in watermarks.iter().enumerate() {
        wm_planes.data_mut()[i * 256..(i + 1) * 256].copy_from_slice(wm.to_plane().data());
        for (j, &b) in wm.bits().iter().enumerate() {
            wm_targets[i * WATERMARK_LEN + j] = b as f32;
        }
    }

    let mut tape = Tape::new();
    let host_var = tape.constant(host_planes.clone());
    let wm_var = tape.constant(wm_planes);
    let target_var = tape.constant(wm_targets);

    let mut params_run = state.params.clone();
    let mut fp = ForwardPass::new(&mut tape, Mode::Train, true);
    let marked = embed_graph(&mut fp, &mut params_run, &pipeline, host_var, wm_var)?;

    // per-item attacks, realized as one externally computed node
    let extract_input = if config.attack_simulator {
        let dist = AttackDistribution::standard();
        let marked_val = fp.tape.value(marked).clone();
        let mut value = Tensor::zeros(marked_val.shape());
        let mut grad_scale = Tensor::zeros(marked_val.shape());
        let plane = marked_val.len() / n;
        for i in 0..n {
            let spec = sample_attack(&dist, rng);
            let item = item_view(&marked_val, i);
            let orig = item_view(&host_planes, i);
            let (av, ag) = apply_attack_with_grad(spec, &item, &orig, rng)?;
            value.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(av.data());
            grad_scale.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(ag.data());
        }
        fp.tape.external(marked, value, grad_scale, "attack")?
    } else {
        marked
    };

    let soft = extract_graph(&mut fp, &mut params_run, &pipeline, extract_input)?;

    let l1_var = fp.tape.mse(host_var, marked, "loss_image")?;
    let l2_var = fp.tape.mae(target_var, soft, "loss_watermark")?;
    let l3_var = fp.tape.weighted_sum(l1_var, config.lambda1, l2_var, config.lambda2);

    if let Some(layer) = fp.tape.first_non_finite() {
        return Err(Error::NonFinite { layer: layer.to_string() });
    }

    let param_vars = fp.param_vars().to_vec();
    drop(fp);

    let mut grads = tape.backward(l3_var)?;
    let mut named_grads: BTreeMap<String, Tensor> = BTreeMap::new();
    // a parameter bound several times accumulates across bindings
    for (name, var) in param_vars {
        if let Some(g) = grads.take(var) {
            match named_grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    named_grads.insert(name, g);
                }
            }
        }
    }

    let l1 = tape.value(l1_var).item();
    let l2 = tape.value(l2_var).item();
    let l3 = tape.value(l3_var).item();

    let first_host = item_view(&host_planes, 0).reshape(&[pipeline.image_size, pipeline.image_size])?;
    let first_marked = item_view(tape.value(marked), 0)
        .reshape(&[pipeline.image_size, pipeline.image_size])?;
    let step_psnr = psnr(&first_host, &first_marked)?;
    let soft_vals = tape.value(soft);
    let mut wrong = 0usize;
    for (i, wm) in watermarks.iter().enumerate() {
        let decoded =
            WatermarkBits::from_soft(&soft_vals.data()[i * WATERMARK_LEN..(i + 1) * WATERMARK_LEN])?;
        wrong += wm
            .bits()
            .iter()
            .zip(decoded.bits())
            .filter(|(a, b)| a != b)
            .count();
    }
    let step_ber = 100.0 * wrong as f32 / (n * WATERMARK_LEN) as f32;

    // batch statistics advanced during the forward pass
    state.params = params_run;
    adam_update(state, &named_grads, config.learning_rate)?;

    Ok(StepStats { l1, l2, l3, psnr: step_psnr, ber: step_ber })
}

/// One Adam step over every trainable tensor. Parameters without a gradient
/// entry are treated as having zero gradient.
pub fn adam_update(
    state: &mut TrainState,
    grads: &BTreeMap<String, Tensor>,
    learning_rate: f32,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let TrainState { params, first_moment, second_moment, .. } = state;
    for (name, tensor) in params.trainable_tensors_mut() {
        let grad = grads.get(&name);
        if let Some(g) = grad {
            if g.shape() != tensor.shape() {
                return Err(Error::shape(format!("gradient for {name}"), tensor.shape(), g.shape()));
            }
        }
        let m = first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(tensor.shape()));
        let v = second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(tensor.shape()));
        adam_tensor_step(tensor, m, v, grad, learning_rate, t);
    }
    Ok(())
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_tensor_step(
    param: &mut Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    grad: Option<&Tensor>,
    learning_rate: f32,
    step: u64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad.map_or(0.0, |g| g[i]) as f64;
        let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
        let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = learning_rate as f64 * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
        param[i] -= update as f32;
    }
}

/// One log record per epoch: mean losses over the epoch's steps plus
/// held-out PSNR/BER measured with frozen parameters.
#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub l1: f32,
    pub l2: f32,
    pub l3: f32,
    pub psnr: f32,
    pub ber: f32,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}, {:.6}, {:.6}, {:.6}, {}, {:.3}",
            self.epoch,
            self.l1,
            self.l2,
            self.l3,
            format_psnr(self.psnr),
            self.ber
        )
    }
}

/// Per-epoch callback: the state after the epoch, its log record, and
/// whether this epoch is the best so far by held-out bit error rate.
pub type CheckpointSink<'a> = dyn FnMut(&TrainState, &EpochLog, bool) -> Result<()> + 'a;

/// Run `config.epochs` epochs over `dataset` with seeded per-epoch
/// reshuffling. The held-out slice for epoch metrics is the tail of the
/// dataset (up to 4 images); with tiny datasets it overlaps training data.
pub fn train_loop(
    config: &TrainingConfig,
    dataset: &[Tensor],
    sink: &mut CheckpointSink,
) -> Result<(TrainState, Vec<EpochLog>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training dataset is empty".into()));
    }
    let pipeline = config.pipeline();
    let mut state = TrainState::fresh(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let holdout_len = dataset.len().min(4);
    let holdout = &dataset[dataset.len() - holdout_len..];
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best_ber = f32::INFINITY;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let stats = train_step(&mut state, &batch, &mut rng, config)?;
            sums.0 += stats.l1 as f64;
            sums.1 += stats.l2 as f64;
            sums.2 += stats.l3 as f64;
            steps += 1;
        }
        let (hpsnr, hber) = holdout_metrics(&state.params, &pipeline, holdout, config.seed ^ epoch as u64)?;
        let log = EpochLog {
            epoch,
            l1: (sums.0 / steps as f64) as f32,
            l2: (sums.1 / steps as f64) as f32,
            l3: (sums.2 / steps as f64) as f32,
            psnr: hpsnr,
            ber: hber,
        };
        let is_best = hber < best_ber;
        if is_best {
            best_ber = hber;
        }
        sink(&state, &log, is_best)?;
        logs.push(log);
    }
    Ok((state, logs))
}

/// Attack-free embed/extract metrics with frozen parameters.
fn holdout_metrics(
    params: &ModelParameters,
    pipeline: &PipelineConfig,
    images: &[Tensor],
    seed: u64,
) -> Result<(f32, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psnr_sum = 0.0f64;
    let mut finite = true;
    let mut ber_sum = 0.0f64;
    for host in images {
        let wm = WatermarkBits::random(&mut rng);
        let marked = crate::model::embed_pipeline(host, &wm, params, pipeline)?;
        let p = psnr(host, &marked)?;
        if p.is_infinite() {
            finite = false;
        } else {
            psnr_sum += p as f64;
        }
        ber_sum += ber(&wm, &extract_pipeline(&marked, params, pipeline)?) as f64;
    }
    let n = images.len() as f64;
    Ok((
        if finite { (psnr_sum / n) as f32 } else { f32::INFINITY },
        (ber_sum / n) as f32,
    ))
}

/// Embed with one attack applied afterwards, outside any training graph.
/// Convenience for robustness probes.
pub fn attacked_roundtrip_ber(
    params: &ModelParameters,
    pipeline: &PipelineConfig,
    host: &Tensor,
    spec: AttackSpec,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wm = WatermarkBits::random(&mut rng);
    let marked = crate::model::embed_pipeline(host, &wm, params, pipeline)?;
    let mut attacked = marked.clone();
    let plane = channel_plane(&marked, pipeline.host_channel)?;
    let host_plane = channel_plane(host, pipeline.host_channel)?;
    let (av, _) = apply_attack_with_grad(spec, &plane, &host_plane, &mut rng)?;
    set_channel_plane(&mut attacked, pipeline.host_channel, &av);
    Ok(ber(&wm, &extract_pipeline(&attacked, params, pipeline)?))
}
