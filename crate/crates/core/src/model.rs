//! The fixed 11-conv-layer watermarking network and the full
//! embed/extract pipelines.
//!
//! Stage layout (filter counts in parentheses):
//! - host preprocess: one stride-1 conv (64) on the normalized subband
//! - watermark preprocess: three blocks of stride-2 transposed conv
//!   (512, 128, 1) + batchnorm + ReLU + size-preserving avgpool,
//!   growing 16 -> 32 -> 64 -> 128
//! - embedding: channel concat, three conv+BN+ReLU blocks (64, 64, 64),
//!   then a 1-filter conv with tanh
//! - extraction: stride-2 conv+BN+ReLU blocks (128, 256), then a 1-filter
//!   stride-2 conv with sigmoid, shrinking 128 -> 64 -> 32 -> 16

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, VarId};
use crate::ops::batchnorm::BatchNormParams;
use crate::ops::conv::{ConvLayerParams, Padding};
use crate::tensor::Tensor;
use crate::wavelet::BandId;

pub const WATERMARK_LEN: usize = 256;
pub const WATERMARK_SIDE: usize = 16;
pub const IMAGE_SIZE: usize = 256;

/// Ordered 256-bit payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WatermarkBits {
    bits: Vec<u8>,
}

impl WatermarkBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.len() != WATERMARK_LEN {
            return Err(Error::InvalidArgument(format!(
                "watermark must have {WATERMARK_LEN} bits, got {}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("watermark bits must be 0 or 1".into()));
        }
        Ok(WatermarkBits { bits })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        WatermarkBits {
            bits: (0..WATERMARK_LEN).map(|_| rng.gen_range(0..2u8)).collect(),
        }
    }

    /// Threshold soft extractor outputs at 0.5.
    pub fn from_soft(soft: &[f32]) -> Result<Self> {
        if soft.len() != WATERMARK_LEN {
            return Err(Error::InvalidArgument(format!(
                "expected {WATERMARK_LEN} soft bits, got {}",
                soft.len()
            )));
        }
        Ok(WatermarkBits {
            bits: soft.iter().map(|&v| if v >= 0.5 { 1 } else { 0 }).collect(),
        })
    }

    /// 64 hex chars, MSB-first within each byte.
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for &b in chunk {
                byte = (byte << 1) | b;
            }
            s.push_str(&format!("{byte:02x}"));
        }
        s
    }

    pub fn from_hex(hex: &str) -> Result<Self> {
        if hex.len() != 64 {
            return Err(Error::InvalidArgument(format!(
                "watermark hex must be 64 characters, got {}",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(WATERMARK_LEN);
        for i in (0..64).step_by(2) {
            let byte = u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| {
                Error::InvalidArgument(format!("invalid hex in watermark: {}", &hex[i..i + 2]))
            })?;
            for bit in (0..8).rev() {
                bits.push((byte >> bit) & 1);
            }
        }
        Ok(WatermarkBits { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Row-major 16x16 plane as `[1, 1, 16, 16]`.
    pub fn to_plane(&self) -> Tensor {
        Tensor::from_fn(&[1, 1, WATERMARK_SIDE, WATERMARK_SIDE], |i| self.bits[i] as f32)
    }
}

/// One conv (or transposed conv) followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnBlock {
    pub conv: ConvLayerParams,
    pub bn: BatchNormParams,
}

/// Every learnable weight and running statistic of the network, plus the
/// subband the model was configured to embed into.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub band: BandId,
    pub version: u32,
    pub host_pre: ConvLayerParams,
    pub wm_pre: [ConvBnBlock; 3],
    pub embed: [ConvBnBlock; 3],
    pub embed_out: ConvLayerParams,
    pub extract: [ConvBnBlock; 2],
    pub extract_out: ConvLayerParams,
}

pub const MODEL_VERSION: u32 = 1;

fn init_conv(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize) -> ConvLayerParams {
    let fan_in = (in_c * 9) as f32;
    let limit = (6.0 / fan_in).sqrt();
    ConvLayerParams {
        kernels: Tensor::from_fn(&[out_c, in_c, 3, 3], |_| rng.gen_range(-limit..limit)),
        bias: Tensor::zeros(&[out_c]),
    }
}

/// Deterministic parameter initialization: fan-in-scaled uniform conv
/// weights, zero biases, identity batchnorm.
pub fn init_parameters(seed: u64, band: BandId) -> ModelParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv_bn = |rng: &mut ChaCha8Rng, out_c: usize, in_c: usize| ConvBnBlock {
        conv: init_conv(rng, out_c, in_c),
        bn: BatchNormParams::new(out_c),
    };
    ModelParameters {
        band,
        version: MODEL_VERSION,
        host_pre: init_conv(&mut rng, 64, 1),
        wm_pre: [
            conv_bn(&mut rng, 512, 1),
            conv_bn(&mut rng, 128, 512),
            conv_bn(&mut rng, 1, 128),
        ],
        embed: [
            conv_bn(&mut rng, 64, 65),
            conv_bn(&mut rng, 64, 64),
            conv_bn(&mut rng, 64, 64),
        ],
        embed_out: init_conv(&mut rng, 1, 64),
        extract: [conv_bn(&mut rng, 128, 1), conv_bn(&mut rng, 256, 128)],
        extract_out: init_conv(&mut rng, 1, 256),
    }
}

impl ModelParameters {
    /// `(layer name, filter count)` for the 11 conv/transpose layers, in
    /// network order.
    pub fn conv_census(&self) -> Vec<(String, usize)> {
        let mut out = vec![("host_pre".to_string(), self.host_pre.shape().0)];
        for (i, b) in self.wm_pre.iter().enumerate() {
            out.push((format!("wm_pre.{i}.conv"), b.conv.shape().0));
        }
        for (i, b) in self.embed.iter().enumerate() {
            out.push((format!("embed.{i}.conv"), b.conv.shape().0));
        }
        out.push(("embed_out".to_string(), self.embed_out.shape().0));
        for (i, b) in self.extract.iter().enumerate() {
            out.push((format!("extract.{i}.conv"), b.conv.shape().0));
        }
        out.push(("extract_out".to_string(), self.extract_out.shape().0));
        out
    }

    fn conv_entries(&self) -> Vec<(String, &ConvLayerParams)> {
        let mut v = vec![("host_pre".to_string(), &self.host_pre)];
        for (i, b) in self.wm_pre.iter().enumerate() {
            v.push((format!("wm_pre.{i}.conv"), &b.conv));
        }
        for (i, b) in self.embed.iter().enumerate() {
            v.push((format!("embed.{i}.conv"), &b.conv));
        }
        v.push(("embed_out".to_string(), &self.embed_out));
        for (i, b) in self.extract.iter().enumerate() {
            v.push((format!("extract.{i}.conv"), &b.conv));
        }
        v.push(("extract_out".to_string(), &self.extract_out));
        v
    }

    fn bn_entries(&self) -> Vec<(String, &BatchNormParams)> {
        let mut v = Vec::new();
        for (i, b) in self.wm_pre.iter().enumerate() {
            v.push((format!("wm_pre.{i}.bn"), &b.bn));
        }
        for (i, b) in self.embed.iter().enumerate() {
            v.push((format!("embed.{i}.bn"), &b.bn));
        }
        for (i, b) in self.extract.iter().enumerate() {
            v.push((format!("extract.{i}.bn"), &b.bn));
        }
        v
    }

    /// All tensors by stable name, cloned, for serialization. Batchnorm
    /// update counters ride along as one-element tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, c) in self.conv_entries() {
            out.push((format!("{name}.kernels"), c.kernels.clone()));
            out.push((format!("{name}.bias"), c.bias.clone()));
        }
        for (name, bn) in self.bn_entries() {
            out.push((format!("{name}.gamma"), bn.gamma.clone()));
            out.push((format!("{name}.beta"), bn.beta.clone()));
            out.push((format!("{name}.running_mean"), bn.running_mean.clone()));
            out.push((format!("{name}.running_var"), bn.running_var.clone()));
            out.push((format!("{name}.updates"), Tensor::new(&[1], vec![bn.updates as f32]).unwrap()));
        }
        out
    }

    /// Names of the trainable tensors in optimizer order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, _) in self.conv_entries() {
            out.push(format!("{name}.kernels"));
            out.push(format!("{name}.bias"));
        }
        for (name, _) in self.bn_entries() {
            out.push(format!("{name}.gamma"));
            out.push(format!("{name}.beta"));
        }
        out
    }

    /// Mutable references to the trainable tensors, in [`Self::trainable_names`] order.
    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let ModelParameters {
            host_pre,
            wm_pre,
            embed,
            embed_out,
            extract,
            extract_out,
            ..
        } = self;
        fn conv<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: &str, c: &'a mut ConvLayerParams) {
            let ConvLayerParams { kernels, bias } = c;
            out.push((format!("{name}.kernels"), kernels));
            out.push((format!("{name}.bias"), bias));
        }
        // one destructuring pass per block; convs first, then batchnorms,
        // matching `trainable_names`
        let mut convs: Vec<(String, &mut Tensor)> = Vec::new();
        let mut bns: Vec<(String, &mut Tensor)> = Vec::new();
        let mut wm_convs: Vec<(String, &mut Tensor)> = Vec::new();
        let mut embed_convs: Vec<(String, &mut Tensor)> = Vec::new();
        let mut extract_convs: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, block) in wm_pre.iter_mut().enumerate() {
            let ConvBnBlock { conv: c, bn } = block;
            conv(&mut wm_convs, &format!("wm_pre.{i}.conv"), c);
            bns.push((format!("wm_pre.{i}.bn.gamma"), &mut bn.gamma));
            bns.push((format!("wm_pre.{i}.bn.beta"), &mut bn.beta));
        }
        let mut embed_bns: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, block) in embed.iter_mut().enumerate() {
            let ConvBnBlock { conv: c, bn } = block;
            conv(&mut embed_convs, &format!("embed.{i}.conv"), c);
            embed_bns.push((format!("embed.{i}.bn.gamma"), &mut bn.gamma));
            embed_bns.push((format!("embed.{i}.bn.beta"), &mut bn.beta));
        }
        let mut extract_bns: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, block) in extract.iter_mut().enumerate() {
            let ConvBnBlock { conv: c, bn } = block;
            conv(&mut extract_convs, &format!("extract.{i}.conv"), c);
            extract_bns.push((format!("extract.{i}.bn.gamma"), &mut bn.gamma));
            extract_bns.push((format!("extract.{i}.bn.beta"), &mut bn.beta));
        }
        conv(&mut convs, "host_pre", host_pre);
        convs.extend(wm_convs);
        convs.extend(embed_convs);
        conv(&mut convs, "embed_out", embed_out);
        convs.extend(extract_convs);
        conv(&mut convs, "extract_out", extract_out);
        convs.extend(bns);
        convs.extend(embed_bns);
        convs.extend(extract_bns);
        convs
    }

    /// Overwrite tensors from a name -> tensor map (checkpoint loading).
    pub fn load_named(&mut self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        fn fetch<'m>(
            map: &'m std::collections::HashMap<String, Tensor>,
            name: &str,
            expected: &[usize],
        ) -> Result<&'m Tensor> {
            let t = map
                .get(name)
                .ok_or_else(|| Error::CheckpointMissingTensor(name.to_string()))?;
            if t.shape() != expected {
                return Err(Error::shape(format!("checkpoint tensor {name}"), expected, t.shape()));
            }
            Ok(t)
        }
        let conv_names: Vec<String> = self.conv_entries().iter().map(|(n, _)| n.clone()).collect();
        let bn_names: Vec<String> = self.bn_entries().iter().map(|(n, _)| n.clone()).collect();
        for name in conv_names {
            let (kernels, bias) = {
                let k = fetch(map, &format!("{name}.kernels"), self.conv_by_name(&name)?.kernels.shape())?.clone();
                let b = fetch(map, &format!("{name}.bias"), self.conv_by_name(&name)?.bias.shape())?.clone();
                (k, b)
            };
            let c = self.conv_by_name_mut(&name)?;
            c.kernels = kernels;
            c.bias = bias;
        }
        for name in bn_names {
            let (gamma, beta, rm, rv, updates) = {
                let bn = self.bn_by_name(&name)?;
                (
                    fetch(map, &format!("{name}.gamma"), bn.gamma.shape())?.clone(),
                    fetch(map, &format!("{name}.beta"), bn.beta.shape())?.clone(),
                    fetch(map, &format!("{name}.running_mean"), bn.running_mean.shape())?.clone(),
                    fetch(map, &format!("{name}.running_var"), bn.running_var.shape())?.clone(),
                    fetch(map, &format!("{name}.updates"), &[1])?.item() as u64,
                )
            };
            let bn = self.bn_by_name_mut(&name)?;
            bn.gamma = gamma;
            bn.beta = beta;
            bn.running_mean = rm;
            bn.running_var = rv;
            bn.updates = updates;
        }
        Ok(())
    }

    fn conv_by_name(&self, name: &str) -> Result<&ConvLayerParams> {
        self.conv_entries()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::CheckpointMissingTensor(name.to_string()))
    }

    fn conv_by_name_mut(&mut self, name: &str) -> Result<&mut ConvLayerParams> {
        match name {
            "host_pre" => Ok(&mut self.host_pre),
            "embed_out" => Ok(&mut self.embed_out),
            "extract_out" => Ok(&mut self.extract_out),
            _ => {
                if let Some(i) = name.strip_prefix("wm_pre.").and_then(|s| s.strip_suffix(".conv")) {
                    return Ok(&mut self.wm_pre[i.parse::<usize>().map_err(|_| Error::CheckpointMissingTensor(name.into()))?].conv);
                }
                if let Some(i) = name.strip_prefix("embed.").and_then(|s| s.strip_suffix(".conv")) {
                    return Ok(&mut self.embed[i.parse::<usize>().map_err(|_| Error::CheckpointMissingTensor(name.into()))?].conv);
                }
                if let Some(i) = name.strip_prefix("extract.").and_then(|s| s.strip_suffix(".conv")) {
                    return Ok(&mut self.extract[i.parse::<usize>().map_err(|_| Error::CheckpointMissingTensor(name.into()))?].conv);
                }
                Err(Error::CheckpointMissingTensor(name.to_string()))
            }
        }
    }

    fn bn_by_name(&self, name: &str) -> Result<&BatchNormParams> {
        self.bn_entries()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::CheckpointMissingTensor(name.to_string()))
    }

    fn bn_by_name_mut(&mut self, name: &str) -> Result<&mut BatchNormParams> {
        if let Some(i) = name.strip_prefix("wm_pre.").and_then(|s| s.strip_suffix(".bn")) {
            return Ok(&mut self.wm_pre[i.parse::<usize>().map_err(|_| Error::CheckpointMissingTensor(name.into()))?].bn);
        }
        if let Some(i) = name.strip_prefix("embed.").and_then(|s| s.strip_suffix(".bn")) {
            return Ok(&mut self.embed[i.parse::<usize>().map_err(|_| Error::CheckpointMissingTensor(name.into()))?].bn);
        }
        if let Some(i) = name.strip_prefix("extract.").and_then(|s| s.strip_suffix(".bn")) {
            return Ok(&mut self.extract[i.parse::<usize>().map_err(|_| Error::CheckpointMissingTensor(name.into()))?].bn);
        }
        Err(Error::CheckpointMissingTensor(name.to_string()))
    }
}

/// Pipeline-wide configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub image_size: usize,
    pub band: BandId,
    pub host_channel: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            image_size: IMAGE_SIZE,
            band: BandId::Ll,
            host_channel: 0,
        }
    }
}

impl PipelineConfig {
    pub fn for_band(band: BandId) -> Self {
        PipelineConfig { band, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be divisible by 16",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Affine map taking the subband value range into [-1, 1]: the LL band of a
/// [0,1] image lives in [0,2], the detail bands already straddle zero.
pub fn band_norm(band: BandId) -> (f32, f32) {
    match band {
        BandId::Ll => (1.0, -1.0),
        _ => (1.0, 0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Builds network stages on a tape, binding parameters as leaves and
/// remembering which `VarId` belongs to which trainable tensor.
pub struct ForwardPass<'t> {
    pub tape: &'t mut Tape,
    mode: Mode,
    trainable: bool,
    param_vars: Vec<(String, VarId)>,
}

impl<'t> ForwardPass<'t> {
    pub fn new(tape: &'t mut Tape, mode: Mode, trainable: bool) -> Self {
        ForwardPass { tape, mode, trainable, param_vars: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `(trainable tensor name, tape leaf)` pairs bound so far.
    pub fn param_vars(&self) -> &[(String, VarId)] {
        &self.param_vars
    }

    fn bind_conv(&mut self, name: &str, c: &ConvLayerParams) -> (VarId, VarId) {
        let w = self.tape.leaf(c.kernels.clone(), self.trainable);
        let b = self.tape.leaf(c.bias.clone(), self.trainable);
        self.param_vars.push((format!("{name}.kernels"), w));
        self.param_vars.push((format!("{name}.bias"), b));
        (w, b)
    }

    fn bind_bn(&mut self, name: &str, bn: &BatchNormParams) -> (VarId, VarId) {
        let g = self.tape.leaf(bn.gamma.clone(), self.trainable);
        let b = self.tape.leaf(bn.beta.clone(), self.trainable);
        self.param_vars.push((format!("{name}.gamma"), g));
        self.param_vars.push((format!("{name}.beta"), b));
        (g, b)
    }

    fn conv(
        &mut self,
        x: VarId,
        name: &str,
        c: &ConvLayerParams,
        stride: usize,
        label: &'static str,
    ) -> Result<VarId> {
        let (w, b) = self.bind_conv(name, c);
        self.tape.conv2d(x, c, w, b, stride, Padding::Same, label)
    }

    fn convt(
        &mut self,
        x: VarId,
        name: &str,
        c: &ConvLayerParams,
        stride: usize,
        label: &'static str,
    ) -> Result<VarId> {
        let (w, b) = self.bind_conv(name, c);
        self.tape.conv_transpose2d(x, c, w, b, stride, label)
    }

    fn batchnorm(
        &mut self,
        x: VarId,
        name: &str,
        bn: &mut BatchNormParams,
        label: &'static str,
    ) -> Result<VarId> {
        let (g, b) = self.bind_bn(name, bn);
        match self.mode {
            Mode::Train => self.tape.batchnorm_train(x, g, b, bn, label),
            Mode::Infer => self.tape.batchnorm_infer(x, g, b, bn, label),
        }
    }
}

/// Host preprocessing: one 64-filter stride-1 conv on the normalized subband.
pub fn preprocess_host(fp: &mut ForwardPass, params: &ModelParameters, ll_norm: VarId) -> Result<VarId> {
    fp.conv(ll_norm, "host_pre", &params.host_pre, 1, "host_pre.conv")
}

/// Watermark preprocessing: 16x16 payload grows to a 128x128 single-channel
/// map through three transposed-conv blocks.
pub fn preprocess_watermark(
    fp: &mut ForwardPass,
    params: &mut ModelParameters,
    wm: VarId,
) -> Result<VarId> {
    const LABELS: [[&str; 3]; 3] = [
        ["wm_pre.0.convt", "wm_pre.0.bn", "wm_pre.0.pool"],
        ["wm_pre.1.convt", "wm_pre.1.bn", "wm_pre.1.pool"],
        ["wm_pre.2.convt", "wm_pre.2.bn", "wm_pre.2.pool"],
    ];
    let mut x = wm;
    for (i, block) in params.wm_pre.iter_mut().enumerate() {
        let name = format!("wm_pre.{i}");
        x = fp.convt(x, &format!("{name}.conv"), &block.conv, 2, LABELS[i][0])?;
        x = fp.batchnorm(x, &format!("{name}.bn"), &mut block.bn, LABELS[i][1])?;
        x = fp.tape.relu(x, LABELS[i][0]);
        x = fp.tape.avgpool2d(x, LABELS[i][2])?;
    }
    Ok(x)
}

/// Embedding: concat host and watermark features, three conv+BN+ReLU blocks,
/// one-filter conv with tanh. Output is the watermarked subband in the
/// normalized [-1, 1] domain.
pub fn embed(
    fp: &mut ForwardPass,
    params: &mut ModelParameters,
    host_feat: VarId,
    wm_feat: VarId,
) -> Result<VarId> {
    const LABELS: [[&str; 2]; 3] = [
        ["embed.0.conv", "embed.0.bn"],
        ["embed.1.conv", "embed.1.bn"],
        ["embed.2.conv", "embed.2.bn"],
    ];
    let mut x = fp.tape.concat_channels(host_feat, wm_feat, "embed.concat")?;
    for (i, block) in params.embed.iter_mut().enumerate() {
        let name = format!("embed.{i}");
        x = fp.conv(x, &format!("{name}.conv"), &block.conv, 1, LABELS[i][0])?;
        x = fp.batchnorm(x, &format!("{name}.bn"), &mut block.bn, LABELS[i][1])?;
        x = fp.tape.relu(x, LABELS[i][0]);
    }
    let out = fp.conv(x, "embed_out", &params.embed_out, 1, "embed_out.conv")?;
    Ok(fp.tape.tanh(out, "embed_out.tanh"))
}

/// Extraction: stride-2 conv chain 128 -> 64 -> 32 -> 16, sigmoid, flatten
/// to `[N, 256]` soft bits.
pub fn extract(
    fp: &mut ForwardPass,
    params: &mut ModelParameters,
    ll_norm: VarId,
) -> Result<VarId> {
    const LABELS: [[&str; 2]; 2] = [
        ["extract.0.conv", "extract.0.bn"],
        ["extract.1.conv", "extract.1.bn"],
    ];
    let mut x = ll_norm;
    for (i, block) in params.extract.iter_mut().enumerate() {
        let name = format!("extract.{i}");
        x = fp.conv(x, &format!("{name}.conv"), &block.conv, 2, LABELS[i][0])?;
        x = fp.batchnorm(x, &format!("{name}.bn"), &mut block.bn, LABELS[i][1])?;
        x = fp.tape.relu(x, LABELS[i][0]);
    }
    let out = fp.conv(x, "extract_out", &params.extract_out, 2, "extract_out.conv")?;
    let soft = fp.tape.sigmoid(out, "extract_out.sigmoid");
    let n = fp.tape.value(soft).shape()[0];
    fp.tape.reshape(soft, &[n, WATERMARK_LEN])
}

/// Graph from a host-channel plane + payload plane to the clamped
/// watermarked plane. `plane` is `[N, 1, S, S]`, `wm` is `[N, 1, 16, 16]`.
pub fn embed_graph(
    fp: &mut ForwardPass,
    params: &mut ModelParameters,
    config: &PipelineConfig,
    plane: VarId,
    wm: VarId,
) -> Result<VarId> {
    let band = config.band;
    let (scale, offset) = band_norm(band);
    let bands = fp.tape.dwt2(plane)?;
    let sub = fp.tape.band_select(bands, band.index())?;
    let sub_norm = fp.tape.affine(sub, scale, offset, "band_normalize");
    let host_feat = preprocess_host(fp, params, sub_norm)?;
    let wm_feat = preprocess_watermark(fp, params, wm)?;
    let marked_norm = embed(fp, params, host_feat, wm_feat)?;
    let marked = fp.tape.affine(marked_norm, 1.0 / scale, -offset / scale, "band_denormalize");
    let replaced = fp.tape.band_replace(bands, band.index(), marked)?;
    let out_plane = fp.tape.idwt2(replaced)?;
    Ok(fp.tape.clamp01(out_plane))
}

/// Graph from a (possibly attacked) plane to `[N, 256]` soft bits.
pub fn extract_graph(
    fp: &mut ForwardPass,
    params: &mut ModelParameters,
    config: &PipelineConfig,
    plane: VarId,
) -> Result<VarId> {
    let (scale, offset) = band_norm(config.band);
    let bands = fp.tape.dwt2(plane)?;
    let sub = fp.tape.band_select(bands, config.band.index())?;
    let sub_norm = fp.tape.affine(sub, scale, offset, "band_normalize");
    extract(fp, params, sub_norm)
}

fn validate_image(image: &Tensor, config: &PipelineConfig) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    let (h, w, c) = match s {
        &[h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "expected an [H, W, C] image, got shape {s:?}"
            )))
        }
    };
    if h != config.image_size || w != config.image_size {
        return Err(Error::shape(
            "pipeline image size",
            &[config.image_size, config.image_size, c],
            s,
        ));
    }
    if config.host_channel >= c {
        return Err(Error::InvalidArgument(format!(
            "host channel {} out of range for {c} channels",
            config.host_channel
        )));
    }
    const TOL: f32 = 1e-6;
    if image.data().iter().any(|&v| !(-TOL..=1.0 + TOL).contains(&v)) {
        return Err(Error::InvalidArgument(
            "image values must lie in [0, 1]".into(),
        ));
    }
    Ok((h, w, c))
}

/// Pull channel `idx` of an `[H, W, C]` image into `[1, 1, H, W]`.
pub fn channel_plane(image: &Tensor, idx: usize) -> Result<Tensor> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    Ok(Tensor::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        image[(y * w + x) * c + idx]
    }))
}

/// Write a `[1, 1, H, W]` plane back into channel `idx` of `image`.
pub fn set_channel_plane(image: &mut Tensor, idx: usize, plane: &Tensor) {
    let s = image.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    for y in 0..h {
        for x in 0..w {
            image[(y * w + x) * c + idx] = plane[y * w + x];
        }
    }
}

/// Full inference-mode embedding: host image in, watermarked image out.
/// Channels other than the configured host channel pass through untouched.
pub fn embed_pipeline(
    image: &Tensor,
    wm: &WatermarkBits,
    params: &ModelParameters,
    config: &PipelineConfig,
) -> Result<Tensor> {
    config.validate()?;
    validate_image(image, config)?;
    let mut tape = Tape::new();
    let plane = {
        let p = channel_plane(image, config.host_channel)?;
        tape.constant(p)
    };
    let wm_var = tape.constant(wm.to_plane());
    let mut params_run = params.clone();
    let mut fp = ForwardPass::new(&mut tape, Mode::Infer, false);
    let out_plane = embed_graph(&mut fp, &mut params_run, config, plane, wm_var)?;
    let mut out = image.clone();
    set_channel_plane(&mut out, config.host_channel, tape.value(out_plane));
    Ok(out)
}

/// Inference-mode extraction to soft bit probabilities in (0, 1).
pub fn extract_soft(
    image: &Tensor,
    params: &ModelParameters,
    config: &PipelineConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    validate_image(image, config)?;
    let mut tape = Tape::new();
    let plane = {
        let p = channel_plane(image, config.host_channel)?;
        tape.constant(p)
    };
    let mut params_run = params.clone();
    let mut fp = ForwardPass::new(&mut tape, Mode::Infer, false);
    let soft = extract_graph(&mut fp, &mut params_run, config, plane)?;
    Ok(tape.value(soft).data().to_vec())
}

/// Inference-mode extraction with 0.5 thresholding.
pub fn extract_pipeline(
    image: &Tensor,
    params: &ModelParameters,
    config: &PipelineConfig,
) -> Result<WatermarkBits> {
    WatermarkBits::from_soft(&extract_soft(image, params, config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn watermark_hex_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let wm = WatermarkBits::random(&mut rng);
        let hex = wm.to_hex();
        assert_eq!(hex.len(), 64);
        assert_eq!(WatermarkBits::from_hex(&hex).unwrap(), wm);
        assert!(WatermarkBits::from_hex("zz").is_err());
        assert!(WatermarkBits::new(vec![0; 255]).is_err());
        assert!(WatermarkBits::new(vec![2; 256]).is_err());
    }

    #[test]
    fn census_is_eleven_layers_with_mandated_filters() {
        let p = init_parameters(0, BandId::Ll);
        let census = p.conv_census();
        assert_eq!(census.len(), 11);
        let counts: Vec<usize> = census.iter().map(|(_, f)| *f).collect();
        assert_eq!(counts, vec![64, 512, 128, 1, 64, 64, 64, 1, 128, 256, 1]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_parameters(42, BandId::Ll);
        let b = init_parameters(42, BandId::Ll);
        assert_eq!(a, b);
        let c = init_parameters(43, BandId::Ll);
        assert_ne!(a.host_pre.kernels, c.host_pre.kernels);
    }

    #[test]
    fn watermark_preprocess_doubling_schedule() {
        let mut params = init_parameters(1, BandId::Ll);
        let mut tape = Tape::new();
        let wm = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let mut fp = ForwardPass::new(&mut tape, Mode::Infer, false);
        // shape trace oracle: walk the blocks one at a time
        let mut x = wm;
        let mut expect = 16usize;
        for i in 0..3 {
            let name = format!("wm_pre.{i}");
            let conv = params.wm_pre[i].conv.clone();
            let y = fp.convt(x, &format!("{name}.conv"), &conv, 2, "t").unwrap();
            let y = fp.batchnorm(y, &format!("{name}.bn"), &mut params.wm_pre[i].bn, "b").unwrap();
            let y = fp.tape.relu(y, "r");
            let block_out = fp.tape.avgpool2d(y, "p").unwrap();
            expect *= 2;
            assert_eq!(fp.tape.value(block_out).shape()[2], expect, "block {i}");
            x = block_out;
        }
        assert_eq!(fp.tape.value(x).shape(), &[1, 1, 128, 128]);
    }

    #[test]
    fn stage_shapes() {
        let mut params = init_parameters(2, BandId::Ll);
        let mut tape = Tape::new();
        let ll = tape.constant(Tensor::zeros(&[1, 1, 128, 128]));
        let wm = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let mut fp = ForwardPass::new(&mut tape, Mode::Infer, false);
        let host_feat = preprocess_host(&mut fp, &params.clone(), ll).unwrap();
        assert_eq!(fp.tape.value(host_feat).shape(), &[1, 64, 128, 128]);
        let wm_feat = preprocess_watermark(&mut fp, &mut params, wm).unwrap();
        assert_eq!(fp.tape.value(wm_feat).shape(), &[1, 1, 128, 128]);
        let marked = embed(&mut fp, &mut params, host_feat, wm_feat).unwrap();
        assert_eq!(fp.tape.value(marked).shape(), &[1, 1, 128, 128]);
        // tanh range
        assert!(fp.tape.value(marked).data().iter().all(|v| v.abs() < 1.0));
        let soft = extract(&mut fp, &mut params, marked).unwrap();
        assert_eq!(fp.tape.value(soft).shape(), &[1, 256]);
        assert!(fp.tape.value(soft).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_input_zero_bias_host_pre_is_zero() {
        let params = init_parameters(3, BandId::Ll);
        let mut tape = Tape::new();
        let ll = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let mut fp = ForwardPass::new(&mut tape, Mode::Infer, false);
        let out = preprocess_host(&mut fp, &params, ll).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pipelines_shape_contract_and_untouched_channels() {
        let params = init_parameters(4, BandId::Ll);
        let config = PipelineConfig::default();
        let image = Tensor::from_fn(&[256, 256, 3], |i| ((i * 31 % 255) as f32) / 255.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let wm = WatermarkBits::random(&mut rng);
        let marked = embed_pipeline(&image, &wm, &params, &config).unwrap();
        assert_eq!(marked.shape(), image.shape());
        // untouched channels bit-identical
        for y in 0..256usize {
            for x in 0..256usize {
                for ch in 1..3usize {
                    let i = (y * 256 + x) * 3 + ch;
                    assert_eq!(marked[i].to_bits(), image[i].to_bits());
                }
            }
        }
        let bits = extract_pipeline(&marked, &params, &config).unwrap();
        assert_eq!(bits.bits().len(), 256);
        // deterministic
        let again = extract_pipeline(&marked, &params, &config).unwrap();
        assert_eq!(bits, again);
    }

    #[test]
    fn changing_band_changes_only_that_subband() {
        use crate::wavelet::{dwt2_haar, BandId};
        // constant mid-gray host keeps the reconstruction inside (0,1), so
        // clamping never couples energy into the other bands
        let image = Tensor::full(&[256, 256, 3], 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let wm = WatermarkBits::random(&mut rng);
        for band in [BandId::Ll, BandId::Hh] {
            let params = init_parameters(5, band);
            let config = PipelineConfig::for_band(band);
            let marked = embed_pipeline(&image, &wm, &params, &config).unwrap();
            let host_plane = channel_plane(&image, 0).unwrap().reshape(&[256, 256]).unwrap();
            let marked_plane = channel_plane(&marked, 0).unwrap().reshape(&[256, 256]).unwrap();
            let hb = dwt2_haar(&host_plane).unwrap();
            let mb = dwt2_haar(&marked_plane).unwrap();
            let mut diffs = Vec::new();
            for b in BandId::ALL {
                diffs.push((b, hb.band(b).max_abs_diff(mb.band(b))));
            }
            for (b, d) in diffs {
                if b == band {
                    assert!(d > 1e-3, "configured band {b:?} unchanged");
                } else {
                    assert!(d < 1e-5, "band {b:?} changed by {d}");
                }
            }
        }
    }

    #[test]
    fn bad_image_rejected() {
        let params = init_parameters(0, BandId::Ll);
        let config = PipelineConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let wm = WatermarkBits::random(&mut rng);
        let small = Tensor::zeros(&[128, 128, 3]);
        assert!(embed_pipeline(&small, &wm, &params, &config).is_err());
        let out_of_range = Tensor::full(&[256, 256, 3], 1.5);
        assert!(embed_pipeline(&out_of_range, &wm, &params, &config).is_err());
    }
}
