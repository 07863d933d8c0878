//! Binary netpbm (P5/P6, maxval 255) and 16-bit PCM mono WAV.

use super::SignalGrid;
use crate::error::{Error, Result};

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_netpbm(grid: &SignalGrid, magic: &str, channels: usize) -> Result<Vec<u8>> {
    if grid.dims() != 2 || grid.channels() != channels {
        return Err(Error::contract(format!(
            "{magic} needs a 2-D grid with {channels} channel(s), got {:?}x{}",
            grid.shape(),
            grid.channels()
        )));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize8(v)));
    Ok(out)
}

pub fn save_pgm(grid: &SignalGrid) -> Result<Vec<u8>> {
    encode_netpbm(grid, "P5", 1)
}

pub fn save_ppm(grid: &SignalGrid) -> Result<Vec<u8>> {
    encode_netpbm(grid, "P6", 3)
}

struct HeaderCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            let b = self.buf[self.pos];
            if b == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Header(format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Header(format!("{what} out of range")))
    }
}

/// Reads P5 or P6; the grid has 1 or 3 channels accordingly.
pub fn load_netpbm(bytes: &[u8]) -> Result<SignalGrid> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::BadMagic { expected: "P5 or P6" });
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' | b'7' => {
            return Err(Error::Unsupported(format!(
                "netpbm variant P{}",
                bytes[1] as char
            )))
        }
        _ => return Err(Error::BadMagic { expected: "P5 or P6" }),
    };
    let mut cur = HeaderCursor { buf: bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::Header(format!("degenerate size {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::Unsupported(format!("maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::Header("missing whitespace after maxval".into())),
    }
    let payload = &bytes[cur.pos + 1..];
    let need = w * h * channels;
    if payload.len() < need {
        return Err(Error::ShortPayload {
            expected: need,
            found: payload.len(),
        });
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    SignalGrid::new(vec![h, w], channels, data)
}

pub fn load_pgm(bytes: &[u8]) -> Result<SignalGrid> {
    let g = load_netpbm(bytes)?;
    if g.channels() != 1 {
        return Err(Error::BadMagic { expected: "P5" });
    }
    Ok(g)
}

pub fn load_ppm(bytes: &[u8]) -> Result<SignalGrid> {
    let g = load_netpbm(bytes)?;
    if g.channels() != 3 {
        return Err(Error::BadMagic { expected: "P6" });
    }
    Ok(g)
}

/// Writes a 1-D single-channel grid as 16-bit PCM; sample `v` becomes
/// `round((2v - 1) * 32768)` saturated to the i16 range.
pub fn save_wav(grid: &SignalGrid, sample_rate: u32) -> Result<Vec<u8>> {
    if grid.dims() != 1 || grid.channels() != 1 {
        return Err(Error::contract("WAV output needs a 1-D mono grid"));
    }
    let n = grid.points();
    let data_len = u32::try_from(n * 2).map_err(|_| Error::contract("signal too long for WAV"))?;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in grid.data() {
        let s = ((2.0 * v - 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

/// Reads a PCM16 mono WAV into a 1-D grid with samples `(s/32768 + 1)/2`,
/// returning the sample rate alongside.
pub fn load_wav(bytes: &[u8]) -> Result<(SignalGrid, u32)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::BadMagic { expected: "RIFF/WAVE" });
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if id == b"fmt " {
            if len < 16 || body_start + 16 > bytes.len() {
                return Err(Error::Header("fmt chunk too short".into()));
            }
            let b = &bytes[body_start..];
            let tag = u16::from_le_bytes([b[0], b[1]]);
            let ch = u16::from_le_bytes([b[2], b[3]]);
            let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
            let bits = u16::from_le_bytes([b[14], b[15]]);
            format = Some((tag, ch, rate, bits));
        } else if id == b"data" {
            let (tag, ch, rate, bits) =
                format.ok_or_else(|| Error::Header("data chunk before fmt chunk".into()))?;
            if tag != 1 {
                return Err(Error::Unsupported(format!("WAV format tag {tag}")));
            }
            if ch != 1 {
                return Err(Error::Unsupported(format!("{ch} WAV channels")));
            }
            if bits != 16 {
                return Err(Error::Unsupported(format!("{bits}-bit WAV samples")));
            }
            let avail = bytes.len() - body_start;
            if avail < len {
                return Err(Error::ShortPayload {
                    expected: len / 2,
                    found: avail / 2,
                });
            }
            if len == 0 || !len.is_multiple_of(2) {
                return Err(Error::Header(format!("data chunk of {len} bytes")));
            }
            let data = bytes[body_start..body_start + len]
                .chunks_exact(2)
                .map(|s| (i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0 + 1.0) / 2.0)
                .collect::<Vec<_>>();
            let n = data.len();
            return Ok((SignalGrid::new(vec![n], 1, data)?, rate));
        }
        pos = body_start + len + (len & 1);
    }
    Err(Error::Header("no data chunk".into()))
}
