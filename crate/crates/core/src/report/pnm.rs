//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::fs;
use std::path::Path;

use super::ReportError;
use crate::tensor::Tensor;

/// `[0, 1]` to a byte, rounding half up. Values outside the range saturate.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes a `[c, h, w]` or `[1, c, h, w]` image with one (PGM) or three
/// (PPM) channels.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>, ReportError> {
    let shape = image.shape();
    let (c, h, w) = match *shape {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(ReportError::Image(format!("cannot write image of shape {shape:?}"))),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(ReportError::Image(format!("{c} channels; expected 1 or 3"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(data[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn dump_image(image: &Tensor, path: impl AsRef<Path>) -> Result<(), ReportError> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize), ReportError> {
    let bad = || ReportError::Image("malformed PNM header".into());
    let mut fields = Vec::with_capacity(count);
    let mut i = 2;
    while fields.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let text = std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?;
        fields.push(text.parse().map_err(|_| bad())?);
    }
    // Exactly one whitespace byte separates the header from the samples.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(bad());
    }
    Ok((fields, i + 1))
}

/// Decodes a `P5`/`P6` file with maxval 255 into a `[1, c, h, w]` tensor in
/// `[0, 1]`.
pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor, ReportError> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(ReportError::Image("not a binary PGM or PPM file".into())),
    };
    let (fields, start) = header_fields(bytes, 3)?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(ReportError::Image(format!("maxval {maxval}; only 255 is supported")));
    }
    let plane = h * w;
    let samples = &bytes[start..];
    if samples.len() != plane * c {
        return Err(ReportError::Image(format!(
            "expected {} samples, found {}",
            plane * c,
            samples.len()
        )));
    }
    let mut data = vec![0.0; plane * c];
    for (p, px) in samples.chunks_exact(c).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            data[ch * plane + p] = f64::from(b) / 255.0;
        }
    }
    Ok(Tensor::new(vec![1, c, h, w], data)?)
}
