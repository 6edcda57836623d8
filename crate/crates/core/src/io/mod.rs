//! Image files, dataset directories, and model checkpoints.
//!
//! Images are always surfaced as `[H, W, 3]` tensors in [0, 1]. PNG goes
//! through the `image` crate; PPM (P6) and PGM (P5) are read and written
//! directly so tests run without any codec.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::MODEL_VERSION;
use crate::tensor::Tensor;
use crate::training::TrainState;
use crate::wavelet::BandId;

fn read_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ImageRead { path: path.to_path_buf(), reason: reason.into() }
}

fn write_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ImageWrite { path: path.to_path_buf(), reason: reason.into() }
}

/// Load a PNG/PPM/PGM file as `[H, W, 3]` in [0, 1]. Grayscale images are
/// replicated across the three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" | "pgm" => load_pnm(path),
        "png" => load_png(path),
        other => Err(read_err(path, format!("unsupported image extension `{other}`"))),
    }
}

fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| read_err(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Tensor::from_fn(&[h, w, 3], |i| rgb.as_raw()[i] as f32 / 255.0))
}

fn load_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| read_err(path, e.to_string()))?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and `#` comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(read_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3usize,
        "P5" => 1usize,
        other => return Err(read_err(path, format!("unsupported PNM magic `{other}`"))),
    };
    let w: usize = token()?.parse().map_err(|_| read_err(path, "bad width"))?;
    let h: usize = token()?.parse().map_err(|_| read_err(path, "bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| read_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(read_err(path, format!("only maxval 255 supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(read_err(path, "zero image dimension"));
    }
    let data_start = pos + 1; // single whitespace byte after maxval
    let need = w * h * channels;
    if bytes.len() < data_start + need {
        return Err(read_err(path, "pixel data truncated"));
    }
    let raster = &bytes[data_start..data_start + need];
    Ok(Tensor::from_fn(&[h, w, 3], |i| {
        let (pix, c) = (i / 3, i % 3);
        let b = if channels == 3 { raster[pix * 3 + c] } else { raster[pix] };
        b as f32 / 255.0
    }))
}

/// Round-half-away-from-zero 8-bit quantization of a [0,1] value.
pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save an `[H, W, 3]` tensor as PNG or PPM, by extension.
pub fn save_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    let (h, w) = match s {
        &[h, w, 3] => (h, w),
        _ => return Err(write_err(path, format!("expected an [H, W, 3] image, got {s:?}"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize8(v)).collect();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => {
            let mut f = BufWriter::new(fs::File::create(path).map_err(|e| write_err(path, e.to_string()))?);
            write!(f, "P6\n{w} {h}\n255\n").map_err(|e| write_err(path, e.to_string()))?;
            f.write_all(&bytes).map_err(|e| write_err(path, e.to_string()))?;
            Ok(())
        }
        "png" => {
            let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| write_err(path, "buffer size mismatch"))?;
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| write_err(path, e.to_string()))
        }
        other => Err(write_err(path, format!("unsupported image extension `{other}`"))),
    }
}

/// Corner-aligned bilinear resize of an `[H, W, 3]` image.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    let (h, w, c) = match s {
        &[h, w, c] => (h, w, c),
        _ => return Err(Error::InvalidArgument(format!("resize expects [H, W, C], got {s:?}"))),
    };
    if h == out_h && w == out_w {
        return Ok(image.clone());
    }
    let map = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f32 * (n_in - 1) as f32 / (n_out - 1) as f32;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f32)
    };
    Ok(Tensor::from_fn(&[out_h, out_w, c], |i| {
        let ch = i % c;
        let x = (i / c) % out_w;
        let y = i / (c * out_w);
        let (y0, y1, fy) = map(y, out_h, h);
        let (x0, x1, fx) = map(x, out_w, w);
        let at = |yy: usize, xx: usize| image[(yy * w + xx) * c + ch];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Resize to the network's native 256x256x3.
pub fn resize_to_256(image: &Tensor) -> Result<Tensor> {
    resize_bilinear(image, 256, 256)
}

/// A directory scan: loadable images (sorted by filename) plus the count of
/// entries that were skipped as unreadable or non-image.
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub paths: Vec<PathBuf>,
    pub skipped: usize,
}

/// Load every readable image in `dir` (sorted by name, resized to 256),
/// skipping unreadable/non-image entries deterministically.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| read_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut images = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = 0usize;
    for path in entries {
        match load_image(&path).and_then(|img| resize_to_256(&img)) {
            Ok(img) => {
                images.push(img);
                paths.push(path);
            }
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", path.display());
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("no readable images in {}", dir.display())));
    }
    Ok(Dataset { images, paths, skipped })
}

// --- checkpoint format ---------------------------------------------------
//
// magic "WMCK" | u32 LE version | u32 LE metadata length | metadata text
// (key=value lines) | u32 LE tensor count | per tensor: u32 LE name length,
// name bytes, u32 LE ndim, u32 LE dims, f32 LE data.

const CHECKPOINT_MAGIC: &[u8; 4] = b"WMCK";

fn trunc(what: &str) -> Error {
    Error::CheckpointTruncated(what.to_string())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| trunc(what))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r, "tensor name length")? as usize;
    if name_len > 4096 {
        return Err(trunc("tensor name length out of range"));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|_| trunc("tensor name"))?;
    let name = String::from_utf8(name).map_err(|_| trunc("tensor name not UTF-8"))?;
    let ndim = read_u32(r, "tensor rank")? as usize;
    if ndim > 8 {
        return Err(trunc("tensor rank out of range"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r, "tensor dim")? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0u8; len * 4];
    r.read_exact(&mut data).map_err(|_| trunc(&format!("data of tensor `{name}`")))?;
    let vals: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name.clone(), Tensor::new(&shape, vals).map_err(|_| trunc(&name))?))
}

/// Write parameters and optimizer state (`opt.m.*`, `opt.v.*`, `opt.step`).
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut f, MODEL_VERSION)?;
    let meta = format!("band={}\nstep={}\n", state.params.band, state.step);
    write_u32(&mut f, meta.len() as u32)?;
    f.write_all(meta.as_bytes())?;

    let mut tensors = state.params.named_tensors();
    for (name, t) in &state.first_moment {
        tensors.push((format!("opt.m.{name}"), t.clone()));
    }
    for (name, t) in &state.second_moment {
        tensors.push((format!("opt.v.{name}"), t.clone()));
    }
    write_u32(&mut f, tensors.len() as u32)?;
    for (name, t) in &tensors {
        write_tensor(&mut f, name, t)?;
    }
    f.flush()?;
    Ok(())
}

/// Read back a full [`TrainState`], bit-exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let mut f = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| trunc("magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = read_u32(&mut f, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let meta_len = read_u32(&mut f, "metadata length")? as usize;
    if meta_len > 1 << 20 {
        return Err(trunc("metadata length out of range"));
    }
    let mut meta = vec![0u8; meta_len];
    f.read_exact(&mut meta).map_err(|_| trunc("metadata"))?;
    let meta = String::from_utf8(meta).map_err(|_| trunc("metadata not UTF-8"))?;
    let mut band = BandId::Ll;
    let mut step = 0u64;
    for line in meta.lines() {
        match line.split_once('=') {
            Some(("band", v)) => band = v.parse()?,
            Some(("step", v)) => {
                step = v.parse().map_err(|_| trunc("step metadata"))?;
            }
            _ => {}
        }
    }

    let count = read_u32(&mut f, "tensor count")? as usize;
    let mut map: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_tensor(&mut f)?;
        map.insert(name, t);
    }
    // anything left over means the writer and reader disagree
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(trunc("trailing bytes after tensor section"));
    }

    let mut params = crate::model::init_parameters(0, band);
    params.load_named(&map)?;
    let mut state = TrainState::new(params);
    state.step = step;
    for (name, t) in map {
        if let Some(p) = name.strip_prefix("opt.m.") {
            state.first_moment.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            state.second_moment.insert(p.to_string(), t);
        }
    }
    Ok(state)
}
