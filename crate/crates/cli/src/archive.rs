//! Archive file written by `compress`:
//!
//! ```text
//! "IVPA" | version u8 | item count u32
//! | per item: name len u16 | name | header len u32 | header
//! | container count u32 | containers
//! ```
//!
//! Items are assigned to containers in order, one per stored register, so
//! independent items use one container each and a shared stream uses one
//! container for all. Integers are big-endian, matching the container layout.

use anyhow::{bail, ensure, Context, Result};
use ivpf::Container;
use std::io::Cursor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"IVPA";
pub const ARCHIVE_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    /// Input file bytes that precede the payload.
    pub header: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Archive {
    pub entries: Vec<Entry>,
    pub containers: Vec<Container>,
}

impl Archive {
    pub fn new(entries: Vec<Entry>, containers: Vec<Container>) -> Result<Self> {
        let a = Self { entries, containers };
        a.check()?;
        Ok(a)
    }

    fn check(&self) -> Result<()> {
        let slots: usize = self.containers.iter().map(|c| c.registers.len()).sum();
        ensure!(
            slots == self.entries.len(),
            "archive lists {} items but its containers hold {slots}",
            self.entries.len()
        );
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = ARCHIVE_MAGIC.to_vec();
        out.push(ARCHIVE_VERSION);
        out.extend_from_slice(&u32::try_from(self.entries.len())?.to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&u16::try_from(e.name.len()).context("item name too long")?.to_be_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&u32::try_from(e.header.len())?.to_be_bytes());
            out.extend_from_slice(&e.header);
        }
        out.extend_from_slice(&u32::try_from(self.containers.len())?.to_be_bytes());
        for c in &self.containers {
            c.write_to(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        ensure!(take(bytes, &mut pos, 4)? == ARCHIVE_MAGIC, "not an archive (bad magic)");
        let version = take(bytes, &mut pos, 1)?[0];
        ensure!(version == ARCHIVE_VERSION, "unsupported archive version {version}");
        let count = read_u32(bytes, &mut pos)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u16::from_be_bytes(take(bytes, &mut pos, 2)?.try_into()?) as usize;
            let name = String::from_utf8(take(bytes, &mut pos, len)?.to_vec()).context("item name is not UTF-8")?;
            let len = read_u32(bytes, &mut pos)? as usize;
            let header = take(bytes, &mut pos, len)?.to_vec();
            entries.push(Entry { name, header });
        }
        let count = read_u32(bytes, &mut pos)?;
        let mut containers = Vec::new();
        for _ in 0..count {
            let mut cur = Cursor::new(&bytes[pos..]);
            containers.push(Container::read_from(&mut cur)?);
            pos += cur.position() as usize;
        }
        ensure!(pos == bytes.len(), "archive has {} trailing bytes", bytes.len() - pos);
        Self::new(entries, containers)
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let Some(s) = bytes.get(*pos..*pos + n) else {
        bail!("archive is truncated");
    };
    *pos += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_be_bytes(take(bytes, pos, 4)?.try_into()?))
}
