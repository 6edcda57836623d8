//! Single-level orthonormal 2D Haar analysis and synthesis.
//!
//! Each 2x2 block `[a b; c d]` maps to
//! `LL=(a+b+c+d)/2, HL=(a-b+c-d)/2, LH=(a+b-c-d)/2, HH=(a-b-c+d)/2`.
//! The /2 normalization makes the transform orthonormal, so synthesis is the
//! transpose of analysis and energy is conserved exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One of the four wavelet subbands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BandId {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl BandId {
    pub const ALL: [BandId; 4] = [BandId::Ll, BandId::Lh, BandId::Hl, BandId::Hh];

    /// Index within a stacked `[4, H/2, W/2]` band tensor; matches the
    /// LL, LH, HL, HH ordering used everywhere in this crate.
    pub fn index(self) -> usize {
        match self {
            BandId::Ll => 0,
            BandId::Lh => 1,
            BandId::Hl => 2,
            BandId::Hh => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BandId::Ll => "LL",
            BandId::Lh => "LH",
            BandId::Hl => "HL",
            BandId::Hh => "HH",
        }
    }
}

impl std::str::FromStr for BandId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LL" => Ok(BandId::Ll),
            "LH" => Ok(BandId::Lh),
            "HL" => Ok(BandId::Hl),
            "HH" => Ok(BandId::Hh),
            other => Err(Error::InvalidArgument(format!(
                "unknown band `{other}` (expected LL, LH, HL, or HH)"
            ))),
        }
    }
}

impl std::fmt::Display for BandId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The four half-resolution subbands of one channel, each `[H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubbandSet {
    pub fn band(&self, which: BandId) -> &Tensor {
        match which {
            BandId::Ll => &self.ll,
            BandId::Lh => &self.lh,
            BandId::Hl => &self.hl,
            BandId::Hh => &self.hh,
        }
    }

    fn check_consistent(&self) -> Result<(usize, usize)> {
        let shape = self.ll.dims2()?;
        for b in [&self.lh, &self.hl, &self.hh] {
            if b.dims2()? != shape {
                return Err(Error::shape("subband shapes", self.ll.shape(), b.shape()));
            }
        }
        Ok(shape)
    }
}

/// Single-level Haar analysis of an even-sized `[H, W]` channel.
pub fn dwt2_haar(channel: &Tensor) -> Result<SubbandSet> {
    let (h, w) = channel.dims2()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "dwt2_haar requires even dimensions, got {h}x{w}"
        )));
    }
    let (hh2, wh2) = (h / 2, w / 2);
    let mut ll = Tensor::zeros(&[hh2, wh2]);
    let mut lh = Tensor::zeros(&[hh2, wh2]);
    let mut hl = Tensor::zeros(&[hh2, wh2]);
    let mut hh = Tensor::zeros(&[hh2, wh2]);
    let src = channel.data();
    for y in 0..hh2 {
        for x in 0..wh2 {
            let a = src[(2 * y) * w + 2 * x];
            let b = src[(2 * y) * w + 2 * x + 1];
            let c = src[(2 * y + 1) * w + 2 * x];
            let d = src[(2 * y + 1) * w + 2 * x + 1];
            let i = y * wh2 + x;
            ll[i] = (a + b + c + d) * 0.5;
            hl[i] = (a - b + c - d) * 0.5;
            lh[i] = (a + b - c - d) * 0.5;
            hh[i] = (a - b - c + d) * 0.5;
        }
    }
    Ok(SubbandSet { ll, lh, hl, hh })
}

/// Exact inverse of [`dwt2_haar`].
pub fn idwt2_haar(bands: &SubbandSet) -> Result<Tensor> {
    let (hh2, wh2) = bands.check_consistent()?;
    let (h, w) = (hh2 * 2, wh2 * 2);
    let mut out = Tensor::zeros(&[h, w]);
    let dst = out.data_mut();
    for y in 0..hh2 {
        for x in 0..wh2 {
            let i = y * wh2 + x;
            let (ll, lh, hl, hh) = (bands.ll[i], bands.lh[i], bands.hl[i], bands.hh[i]);
            dst[(2 * y) * w + 2 * x] = (ll + hl + lh + hh) * 0.5;
            dst[(2 * y) * w + 2 * x + 1] = (ll - hl + lh - hh) * 0.5;
            dst[(2 * y + 1) * w + 2 * x] = (ll + hl - lh - hh) * 0.5;
            dst[(2 * y + 1) * w + 2 * x + 1] = (ll - hl - lh + hh) * 0.5;
        }
    }
    Ok(out)
}

/// Returns `bands` with the named band swapped for `replacement`.
pub fn replace_band(bands: &SubbandSet, which: BandId, replacement: Tensor) -> Result<SubbandSet> {
    if replacement.shape() != bands.band(which).shape() {
        return Err(Error::shape(
            "replace_band",
            bands.band(which).shape(),
            replacement.shape(),
        ));
    }
    let mut out = bands.clone();
    match which {
        BandId::Ll => out.ll = replacement,
        BandId::Lh => out.lh = replacement,
        BandId::Hl => out.hl = replacement,
        BandId::Hh => out.hh = replacement,
    }
    Ok(out)
}

// Batched stacked forms used by the network graph: [N, 1, H, W] <-> [N, 4, H/2, W/2]
// with channel order LL, LH, HL, HH.

pub(crate) fn dwt2_stack(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if c != 1 {
        return Err(Error::shape("dwt2_stack", &[n, 1, h, w], input.shape()));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "dwt2_stack requires even dimensions, got {h}x{w}"
        )));
    }
    let (hh2, wh2) = (h / 2, w / 2);
    let plane = hh2 * wh2;
    let mut out = Tensor::zeros(&[n, 4, hh2, wh2]);
    for item in 0..n {
        let src = &input.data()[item * h * w..][..h * w];
        let dst = &mut out.data_mut()[item * 4 * plane..][..4 * plane];
        for y in 0..hh2 {
            for x in 0..wh2 {
                let a = src[(2 * y) * w + 2 * x];
                let b = src[(2 * y) * w + 2 * x + 1];
                let c = src[(2 * y + 1) * w + 2 * x];
                let d = src[(2 * y + 1) * w + 2 * x + 1];
                let i = y * wh2 + x;
                dst[i] = (a + b + c + d) * 0.5;
                dst[plane + i] = (a + b - c - d) * 0.5;
                dst[2 * plane + i] = (a - b + c - d) * 0.5;
                dst[3 * plane + i] = (a - b - c + d) * 0.5;
            }
        }
    }
    Ok(out)
}

pub(crate) fn idwt2_stack(bands: &Tensor) -> Result<Tensor> {
    let (n, c, hh2, wh2) = bands.dims4()?;
    if c != 4 {
        return Err(Error::shape("idwt2_stack", &[n, 4, hh2, wh2], bands.shape()));
    }
    let (h, w) = (hh2 * 2, wh2 * 2);
    let plane = hh2 * wh2;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    for item in 0..n {
        let src = &bands.data()[item * 4 * plane..][..4 * plane];
        let dst = &mut out.data_mut()[item * h * w..][..h * w];
        for y in 0..hh2 {
            for x in 0..wh2 {
                let i = y * wh2 + x;
                let (ll, lh, hl, hh) = (src[i], src[plane + i], src[2 * plane + i], src[3 * plane + i]);
                dst[(2 * y) * w + 2 * x] = (ll + hl + lh + hh) * 0.5;
                dst[(2 * y) * w + 2 * x + 1] = (ll - hl + lh - hh) * 0.5;
                dst[(2 * y + 1) * w + 2 * x] = (ll + hl - lh - hh) * 0.5;
                dst[(2 * y + 1) * w + 2 * x + 1] = (ll - hl - lh + hh) * 0.5;
            }
        }
    }
    Ok(out)
}
