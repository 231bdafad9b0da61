//! Input files: raw tensors (`IVPT`) and binary PGM/PPM.
//!
//! Every file is kept as `header ++ payload`, so the exact bytes can be
//! rebuilt from the header and a decoded payload.
//!
//! Raw tensor layout: `"IVPT" | dtype u8 (1 = u8) | rank u8 | dims u32 LE × rank | payload`.

use anyhow::{bail, ensure, Context, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"IVPT";
pub const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub header: Vec<u8>,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.clone();
        out.extend_from_slice(&self.data);
        out
    }

    /// Wrap a payload in a fresh raw-tensor header.
    #[cfg(test)]
    pub fn raw(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        ensure!(shape.len() <= 255, "rank {} is too large", shape.len());
        ensure!(shape.iter().product::<usize>() == data.len(), "payload does not match shape {shape:?}");
        let mut header = TENSOR_MAGIC.to_vec();
        header.push(DTYPE_U8);
        header.push(shape.len() as u8);
        for &d in shape {
            header.extend_from_slice(&u32::try_from(d)?.to_le_bytes());
        }
        Ok(Self { header, shape: shape.to_vec(), data })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        match bytes.get(..2) {
            _ if bytes.starts_with(TENSOR_MAGIC) => parse_raw(bytes),
            Some(b"P5") => parse_netpbm(bytes, 1),
            Some(b"P6") => parse_netpbm(bytes, 3),
            _ => bail!("unrecognized input format (expected IVPT, binary PGM or binary PPM)"),
        }
    }
}

fn parse_raw(bytes: &[u8]) -> Result<Tensor> {
    ensure!(bytes.len() >= 6, "raw tensor header is truncated");
    ensure!(bytes[4] == DTYPE_U8, "unsupported raw tensor dtype {}", bytes[4]);
    let rank = bytes[5] as usize;
    let end = 6 + 4 * rank;
    ensure!(bytes.len() >= end, "raw tensor header is truncated");
    let shape: Vec<usize> =
        bytes[6..end].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let n: usize = shape.iter().product();
    ensure!(bytes.len() - end == n, "raw tensor payload has {} bytes, shape {shape:?} needs {n}", bytes.len() - end);
    Ok(Tensor { header: bytes[..end].to_vec(), shape, data: bytes[end..].to_vec() })
}

fn parse_netpbm(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => bail!("image header is truncated"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        ensure!(pos > start, "malformed image header");
        *field = std::str::from_utf8(&bytes[start..pos])?.parse().context("image header number")?;
    }
    ensure!(bytes.get(pos).is_some_and(u8::is_ascii_whitespace), "malformed image header");
    pos += 1;
    let [width, height, maxval] = fields;
    ensure!(width > 0 && height > 0, "image has zero size");
    ensure!((1..=255).contains(&maxval), "only 8-bit images are supported (maxval {maxval})");
    let n = width * height * channels;
    ensure!(bytes.len() - pos == n, "image raster has {} bytes, expected {n}", bytes.len() - pos);
    Ok(Tensor { header: bytes[..pos].to_vec(), shape: vec![height, width, channels], data: bytes[pos..].to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let t = Tensor::raw(&[2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let back = Tensor::parse(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn pgm_with_comment() {
        let mut f = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        f.extend_from_slice(&[0, 1, 2, 3, 4, 5]);
        let t = Tensor::parse(&f).unwrap();
        assert_eq!(t.shape, vec![2, 3, 1]);
        assert_eq!(t.data, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(t.to_bytes(), f);
    }

    #[test]
    fn ppm_shape() {
        let mut f = b"P6 2 1 200\n".to_vec();
        f.extend_from_slice(&[9; 6]);
        assert_eq!(Tensor::parse(&f).unwrap().shape, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Tensor::parse(b"P5 2 2 65535\n\0\0\0\0\0\0\0\0").is_err());
        assert!(Tensor::parse(b"P5 2 2 255\n\0\0\0").is_err());
        assert!(Tensor::parse(b"P2 1 1 255\n0").is_err());
        assert!(Tensor::parse(b"IVPT\x01\x01\x03\0\0\0ab").is_err());
    }
}
