//! Byte layout of compressed items (all integers big-endian):
//!
//! ```text
//! "IVPF" | version u8 | h u8 | k u8 | C u8 | n u8 | rank u8 | dims u32×rank
//! | model hash [32] | item count u32 | r u32×items | word count u32 | words u32×count
//! ```
//!
//! Items in one container share the coder stream, encoded first to last, and
//! each keeps its own final register.
//!
//! An archive is a `u32` item count followed by that many containers.

use crate::error::{Error, Result};
use byteorder::{BigEndian as BE, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read};

pub const CONTAINER_MAGIC: &[u8; 4] = b"IVPF";
pub const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub h: u32,
    pub k: u32,
    pub c_bits: u32,
    pub freq_bits: u32,
    pub shape: Vec<usize>,
    pub model_hash: [u8; 32],
    /// Final auxiliary register of each item; only the low `c_bits` bits may be set.
    pub registers: Vec<u32>,
    /// Flushed coder state.
    pub words: Vec<u32>,
}

fn truncated(_: std::io::Error) -> Error {
    Error::Stream("container is truncated".into())
}

/// A `u32` count followed by that many `u32`s.
fn read_words(r: &mut Cursor<&[u8]>, what: &str) -> Result<Vec<u32>> {
    let count = r.read_u32::<BE>().map_err(truncated)? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if count.saturating_mul(4) > left {
        return Err(Error::Stream(format!("container announces {count} {what} but only {left} bytes remain")));
    }
    (0..count).map(|_| r.read_u32::<BE>().map_err(truncated)).collect()
}

impl Container {
    pub fn header_bytes(&self) -> usize {
        4 + 1 + 4 + 1 + 4 * self.shape.len() + 32 + 4 + 4 * self.registers.len() + 4
    }

    pub fn total_bytes(&self) -> usize {
        self.header_bytes() + 4 * self.words.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(CONTAINER_VERSION);
        out.extend_from_slice(&[self.h as u8, self.k as u8, self.c_bits as u8, self.freq_bits as u8]);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.write_u32::<BE>(d as u32).expect("vec write");
        }
        out.extend_from_slice(&self.model_hash);
        out.write_u32::<BE>(self.registers.len() as u32).expect("vec write");
        for &r in &self.registers {
            out.write_u32::<BE>(r).expect("vec write");
        }
        out.write_u32::<BE>(self.words.len() as u32).expect("vec write");
        for &w in &self.words {
            out.write_u32::<BE>(w).expect("vec write");
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        self.write_to(&mut out);
        out
    }

    pub fn read_from(r: &mut Cursor<&[u8]>) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Stream("not an ivpf container (bad magic)".into()));
        }
        let version = r.read_u8().map_err(truncated)?;
        if version != CONTAINER_VERSION {
            return Err(Error::Stream(format!("unsupported container version {version}")));
        }
        let mut cfg = [0u8; 4];
        r.read_exact(&mut cfg).map_err(truncated)?;
        let rank = r.read_u8().map_err(truncated)? as usize;
        let shape =
            (0..rank).map(|_| r.read_u32::<BE>().map(|d| d as usize).map_err(truncated)).collect::<Result<Vec<_>>>()?;
        let mut model_hash = [0u8; 32];
        r.read_exact(&mut model_hash).map_err(truncated)?;
        let registers = read_words(r, "registers")?;
        let words = read_words(r, "words")?;
        let c_bits = cfg[2] as u32;
        if let Some(reg) = registers.iter().find(|&&reg| c_bits > 32 || (c_bits < 32 && reg >> c_bits != 0)) {
            return Err(Error::Stream(format!("register value {reg} exceeds {c_bits} bits")));
        }
        Ok(Self {
            h: cfg[0] as u32,
            k: cfg[1] as u32,
            c_bits,
            freq_bits: cfg[3] as u32,
            shape,
            model_hash,
            registers,
            words,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let c = Self::read_from(&mut cur)?;
        if cur.position() as usize != bytes.len() {
            return Err(Error::Stream("trailing bytes after container".into()));
        }
        Ok(c)
    }
}

pub fn write_archive(items: &[Container]) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u32::<BE>(items.len() as u32).expect("vec write");
    for c in items {
        c.write_to(&mut out);
    }
    out
}

pub fn read_archive(bytes: &[u8]) -> Result<Vec<Container>> {
    let mut cur = Cursor::new(bytes);
    let n = cur.read_u32::<BE>().map_err(truncated)? as usize;
    let mut items = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        items.push(Container::read_from(&mut cur)?);
    }
    if cur.position() as usize != bytes.len() {
        return Err(Error::Stream("trailing bytes after archive".into()));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            h: 8,
            k: 14,
            c_bits: 16,
            freq_bits: 30,
            shape: vec![32, 32, 3],
            model_hash: [7; 32],
            registers: vec![0xbeef, 3],
            words: vec![1, 2, 0xdead_beef],
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let c = sample();
        let b = c.to_bytes();
        assert_eq!(b.len(), c.total_bytes());
        assert_eq!(&b[..4], b"IVPF");
        assert_eq!(&b[b.len() - 4..], &[0xde, 0xad, 0xbe, 0xef]);
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
        let arch = write_archive(&[c.clone(), c.clone()]);
        assert_eq!(read_archive(&arch).unwrap(), vec![c.clone(), c]);
    }

    #[test]
    fn truncation_and_garbage() {
        let b = sample().to_bytes();
        for cut in 0..b.len() {
            assert!(matches!(Container::from_bytes(&b[..cut]), Err(Error::Stream(_))), "cut {cut}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut bad = sample();
        bad.registers[1] = 1 << 20;
        assert!(Container::from_bytes(&bad.to_bytes()).is_err());
    }
}
