//! Portable Float Map codec.
//!
//! `Pf` is single channel, `PF` is interleaved RGB. A negative scale marks
//! little-endian payloads. Rows are stored bottom to top.

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> Result<(usize, &'a str)> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, "unexpected end of header"));
        }
        let s = std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| Error::parse(start, "header is not ASCII"))?;
        Ok((start, s))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end_header(&mut self) -> Result<()> {
        match self.buf.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::parse(self.pos, "missing whitespace after scale")),
        }
    }
}

/// Decodes to a `(1, C, H, W)` tensor with the top row first.
pub fn read_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"Pf") => 1,
        Some(b"PF") => 3,
        _ => return Err(Error::parse(0, "expected `Pf` or `PF` magic")),
    };
    cur.pos = 2;
    let dim = |cur: &mut Cursor| -> Result<usize> {
        let (at, tok) = cur.token()?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::parse(at, format!("invalid extent `{tok}`"))),
        }
    };
    let width = dim(&mut cur)?;
    let height = dim(&mut cur)?;
    let (at, tok) = cur.token()?;
    let scale: f32 = tok
        .parse()
        .map_err(|_| Error::parse(at, format!("invalid scale `{tok}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(at, "scale must be finite and non-zero"));
    }
    cur.end_header()?;
    let little = scale < 0.0;
    let count = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < count * 4 {
        return Err(Error::parse(
            bytes.len(),
            format!("payload truncated: need {} bytes, have {}", count * 4, payload.len()),
        ));
    }
    let mul = scale.abs();
    let mut data = vec![0f32; count];
    for (i, chunk) in payload[..count * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let mut v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if mul != 1.0 {
            v *= mul;
        }
        let (pix, c) = (i / channels, i % channels);
        let (row_from_bottom, x) = (pix / width, pix % width);
        let y = height - 1 - row_from_bottom;
        data[(c * height + y) * width + x] = v;
    }
    Tensor::from_vec(Shape::new(1, channels, height, width), data)
}

/// Encodes a `(1, 1|3, H, W)` tensor with the canonical header
/// `P?\n<w> <h>\n-1\n` and a little-endian payload.
pub fn write_pfm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n() != 1 || (s.c() != 1 && s.c() != 3) {
        return Err(Error::contract(format!("PFM needs (1, 1|3, H, W), got {s}")));
    }
    let (c, h, w) = (s.c(), s.h(), s.w());
    let magic = if c == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{w} {h}\n-1\n").into_bytes();
    out.reserve(c * h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&t.at(0, ch, y, x).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_pfm_disparity(bytes: &[u8]) -> Result<DisparityMap> {
    let t = read_pfm(bytes)?;
    if t.shape().c() != 1 {
        return Err(Error::parse(0, "disparity PFM must be single channel (`Pf`)"));
    }
    DisparityMap::from_tensor(&t, 0)
}

pub fn write_pfm_disparity(d: &DisparityMap) -> Result<Vec<u8>> {
    write_pfm(&d.to_tensor())
}
