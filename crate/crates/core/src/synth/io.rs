//! Sequence directories: `frames/%05d.ppm` (binary P6), `flow/%05d.flo`
//! (Middlebury), `vis/%05d.pgm` (binary P5, 255 = visible) and
//! `config.json`. Indices are 0-based.

use std::fs;
use std::path::Path;

use crate::decoder::FlowField;
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Mask, SceneConfig, SequenceRecord};

/// Sanity value opening every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { offset, msg: msg.into() })
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let d = flow.0.data();
    for i in 0..h * w {
        out.extend_from_slice(&d[i].to_le_bytes());
        out.extend_from_slice(&d[h * w + i].to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return parse_err(bytes.len(), "truncated .flo header");
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[4 * i..4 * i + 4]).unwrap();
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return parse_err(0, format!("bad .flo magic {magic}"));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return parse_err(4, format!("bad .flo size {w}x{h}"));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return parse_err(bytes.len(), format!("truncated .flo payload: expected {need} bytes"));
    }
    if bytes.len() > need {
        return parse_err(need, "trailing bytes after .flo payload");
    }
    let mut data = vec![0.0f32; 2 * w * h];
    for i in 0..w * h {
        data[i] = f32::from_le_bytes(word(3 + 2 * i));
        data[w * h + i] = f32::from_le_bytes(word(4 + 2 * i));
    }
    Ok(FlowField(Tensor::new([2, h, w], data)?))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    Ok(fs::write(path, encode_flo(flow))?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

/// Parses a binary netpbm header; returns `(width, height, payload offset)`.
fn pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return parse_err(0, format!("expected {} image", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return parse_err(pos, "expected a number in image header");
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .or_else(|_| parse_err(start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return parse_err(pos, "missing whitespace after image header");
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return parse_err(pos, format!("only 8-bit images are supported, got maxval {maxval}"));
    }
    Ok((w, h, pos + 1))
}

fn pnm_payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    match bytes.len().cmp(&(offset + len)) {
        std::cmp::Ordering::Less => parse_err(bytes.len(), format!("truncated image payload: expected {len} bytes")),
        std::cmp::Ordering::Greater => parse_err(offset + len, "trailing bytes after image payload"),
        std::cmp::Ordering::Equal => Ok(&bytes[offset..]),
    }
}

/// Encodes `[3×H×W]` values in `[0, 1]` as P6, rounding to 8 bits.
pub fn encode_ppm(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    let (w, h, off) = pnm_header(bytes, b"P6")?;
    let px = pnm_payload(bytes, off, 3 * w * h)?;
    let mut data = vec![0.0f32; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * w * h + i] = px[3 * i + c] as f32 / 255.0;
        }
    }
    Frame::new(Tensor::new([3, h, w], data)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Frame> {
    decode_ppm(&fs::read(path)?)
}

pub fn encode_pgm(width: usize, height: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

/// Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, off) = pnm_header(bytes, b"P5")?;
    Ok((w, h, pnm_payload(bytes, off, w * h)?.to_vec()))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, px: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_pgm(width, height, px))?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path)?)
}

fn mask_px(m: &Mask) -> Vec<u8> {
    m.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
}

/// Writes the directory layout described in the module docs.
pub fn save_sequence(rec: &SequenceRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["frames", "flow", "vis"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (t, ((frame, flow), vis)) in rec.frames.iter().zip(&rec.gt_flow).zip(&rec.gt_vis).enumerate() {
        write_ppm(dir.join(format!("frames/{t:05}.ppm")), frame.tensor())?;
        write_flo(dir.join(format!("flow/{t:05}.flo")), flow)?;
        write_pgm(dir.join(format!("vis/{t:05}.pgm")), vis.width, vis.height, &mask_px(vis))?;
    }
    let json = serde_json::to_string_pretty(&rec.config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("config.json"), json)?;
    Ok(())
}

/// Reads a directory written by [`save_sequence`]. The frame count comes
/// from `config.json`.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<SequenceRecord> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("config.json"))?;
    let config: SceneConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { offset: 0, msg: format!("config.json: {e}") })?;
    let mut rec = SequenceRecord { frames: vec![], gt_flow: vec![], gt_vis: vec![], config };
    for t in 0..rec.config.frames {
        rec.frames.push(read_ppm(dir.join(format!("frames/{t:05}.ppm")))?);
        rec.gt_flow.push(read_flo(dir.join(format!("flow/{t:05}.flo")))?);
        let (w, h, px) = read_pgm(dir.join(format!("vis/{t:05}.pgm")))?;
        rec.gt_vis.push(Mask { height: h, width: w, data: px.iter().map(|&b| b > 127).collect() });
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_magic_and_truncation() {
        let f = FlowField(Tensor::from_fn([2, 2, 3], |i| i as f32 * 0.5 - 1.0));
        let bytes = encode_flo(&f);
        assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 202021.25);
        assert_eq!(decode_flo(&bytes).unwrap(), f);
        assert!(matches!(decode_flo(&bytes[..bytes.len() - 1]), Err(Error::Parse { .. })));
        assert!(matches!(decode_flo(&bytes[..7]), Err(Error::Parse { .. })));
    }

    #[test]
    fn pnm_header_with_comment() {
        let bytes = b"P5\n# note\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pgm(bytes).unwrap(), (2, 1, vec![0, 255]));
        assert!(matches!(decode_pgm(b"P5\n2 x\n255\n"), Err(Error::Parse { offset: 5, .. })));
    }
}
