//! Binary PGM (`P5`) and PPM (`P6`) images.

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, String)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(start, "unexpected end of header"));
    }
    Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
}

/// Decodes to a `(1, C, H, W)` tensor with values scaled into `[0, 1]`.
pub fn read_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(0, "expected `P5` or `P6` magic")),
    };
    let mut pos = 2;
    let num = |pos: &mut usize, what: &str| -> Result<(usize, usize)> {
        let (at, tok) = header_token(bytes, pos)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .map(|v| (at, v))
            .ok_or_else(|| Error::parse(at, format!("invalid {what} `{tok}`")))
    };
    let (_, width) = num(&mut pos, "width")?;
    let (_, height) = num(&mut pos, "height")?;
    let (at, maxval) = num(&mut pos, "maxval")?;
    if maxval != 255 && maxval != 65535 {
        return Err(Error::parse(at, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "missing whitespace after maxval")),
    }
    let bps = if maxval == 255 { 1 } else { 2 };
    let count = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < count * bps {
        return Err(Error::parse(
            bytes.len(),
            format!("payload truncated: need {} bytes, have {}", count * bps, payload.len()),
        ));
    }
    let mut data = vec![0f32; count];
    let scale = maxval as f32;
    for i in 0..count {
        let raw = if bps == 1 {
            payload[i] as f32
        } else {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as f32
        };
        let (pix, c) = (i / channels, i % channels);
        data[c * width * height + pix] = raw / scale;
    }
    Tensor::from_vec(Shape::new(1, channels, height, width), data)
}

/// Encodes a `(1, 1|3, H, W)` tensor with values in `[0, 1]` as 8-bit
/// (`maxval` 255) or 16-bit (`maxval` 65535) binary PNM.
pub fn write_pnm(t: &Tensor<f32>, maxval: u16) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n() != 1 || (s.c() != 1 && s.c() != 3) {
        return Err(Error::contract(format!("PNM needs (1, 1|3, H, W), got {s}")));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::contract(format!("unsupported maxval {maxval}")));
    }
    let (c, h, w) = (s.c(), s.h(), s.w());
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let m = maxval as f32;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let q = (t.at(0, ch, y, x).clamp(0.0, 1.0) * m).round() as u16;
                if maxval == 255 {
                    out.push(q as u8);
                } else {
                    out.extend_from_slice(&q.to_be_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// 8-bit grayscale visualisation mapping `[0, disp_cap]` linearly onto
/// `[0, 255]`.
pub fn disparity_to_pgm(d: &DisparityMap, disp_cap: f32) -> Result<Vec<u8>> {
    if !(disp_cap > 0.0) {
        return Err(Error::contract("disp_cap must be positive"));
    }
    let data = d
        .data
        .iter()
        .map(|&v| if v.is_finite() { v / disp_cap } else { 0.0 })
        .collect();
    let t = Tensor::from_vec(Shape::new(1, 1, d.height, d.width), data)?;
    write_pnm(&t, 255)
}
