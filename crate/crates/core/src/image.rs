//! Raw face images: binary PPM (P6) or a single-tensor `MBFW` file.
//!
//! Both decode to a planar `[3, H, W]` tensor of pixel values in `0..=255`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Image("not a binary PPM (expected `P6` magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Image("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image(format!("malformed PPM header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("PPM header field {i} out of range")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Image("missing whitespace after PPM maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Image(format!("invalid PPM size {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Image(format!("invalid PPM maxval {maxval}")));
    }
    Ok(Header { width, height, maxval, data_start: pos })
}

/// Decodes P6 bytes to `[3, H, W]`, rescaling samples to `0..=255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let bytes_per_sample = if h.maxval < 256 { 1 } else { 2 };
    let plane = h.width * h.height;
    let need = plane * 3 * bytes_per_sample;
    let raster = &bytes[h.data_start..];
    if raster.len() < need {
        return Err(Error::Image(format!("truncated PPM raster: need {need} bytes, have {}", raster.len())));
    }
    let scale = 255.0 / h.maxval as f32;
    let mut data = vec![0.0f32; 3 * plane];
    for px in 0..plane {
        for ch in 0..3 {
            let i = px * 3 + ch;
            let v = if bytes_per_sample == 1 {
                raster[i] as usize
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
            };
            if v > h.maxval {
                return Err(Error::Image(format!("sample {v} exceeds maxval {}", h.maxval)));
            }
            data[ch * plane + px] = if h.maxval == 255 { v as f32 } else { v as f32 * scale };
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

/// Encodes a `[3, H, W]` tensor as 8-bit P6, rounding and clamping to `0..=255`.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Rank { expected: 3, shape: t.shape().to_vec() }),
    };
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, actual: c });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for px in 0..plane {
        for ch in 0..3 {
            out.push(t.data()[ch * plane + px].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Loads a raw image: `.ppm`/`.pnm` files as P6, anything else as an `MBFW`
/// container holding exactly one `[3, H, W]` (or `[1, 3, H, W]`) tensor.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("ppm" | "pnm")) {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return decode_ppm(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())));
    }
    let store = WeightStore::load(path)?;
    if store.len() != 1 {
        return Err(Error::Image(format!("{}: expected one tensor, found {}", path.display(), store.len())));
    }
    let (_, t) = store.iter().next().expect("one entry");
    match *t.shape() {
        [3, h, w] | [1, 3, h, w] => t.clone().reshape(&[3, h, w]),
        _ => Err(Error::Image(format!("{}: unexpected tensor shape {:?}", path.display(), t.shape()))),
    }
}
