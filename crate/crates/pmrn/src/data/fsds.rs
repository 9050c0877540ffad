//! FSDS binary image container and the split manifest beside it.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "FSDS"
//! version u16 (currently 1)
//! count   u32
//! side    u16
//! chans   u8
//! then per image: class_id u32 + side*side*chans raw 8-bit pixels (RGB
//! interleaved, row-major)
//! ```
//!
//! The manifest is plain text, one line per split:
//! `train: 0 1 2` / `val: 3` / `novel: 4 5`. A class id may appear in at
//! most one split.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSDS";
pub const VERSION: u16 = 1;
pub const DATA_FILE: &str = "data.fsds";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FsdsContents {
    pub side: usize,
    pub channels: usize,
    /// (class id, raw pixels) per image, in file order.
    pub images: Vec<(u32, Vec<u8>)>,
}

/// Byte-offset-tracking reader.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse(bytes: &[u8]) -> Result<FsdsContents> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("image count")? as usize;
    let side = r.u16("side")? as usize;
    let channels = r.u8("channels")? as usize;
    if side == 0 || channels == 0 {
        return Err(Error::Format {
            offset: 10,
            msg: format!("degenerate geometry {side}x{side}x{channels}"),
        });
    }
    let pixel_len = side
        .checked_mul(side)
        .and_then(|v| v.checked_mul(channels))
        .ok_or(Error::Format {
            offset: 10,
            msg: "image size overflows".into(),
        })?;
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let class = r.u32(&format!("class id of image {i}"))?;
        let pixels = r.take(pixel_len, &format!("pixels of image {i}"))?.to_vec();
        images.push((class, pixels));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(FsdsContents {
        side,
        channels,
        images,
    })
}

pub fn encode(contents: &FsdsContents) -> Vec<u8> {
    let pixel_len = contents.side * contents.side * contents.channels;
    let mut out = Vec::with_capacity(11 + contents.images.len() * (4 + pixel_len));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(contents.images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(contents.side as u16).to_le_bytes());
    out.push(contents.channels as u8);
    for (class, pixels) in &contents.images {
        debug_assert_eq!(pixels.len(), pixel_len);
        out.extend_from_slice(&class.to_le_bytes());
        out.extend_from_slice(pixels);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let fmt = |ids: &[u32]| {
            ids.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "train: {}\nval: {}\nnovel: {}\n",
            fmt(&self.train),
            fmt(&self.val),
            fmt(&self.novel)
        )
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let mut seen = std::collections::BTreeMap::new();
    let mut offset = 0usize;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((split, rest)) = trimmed.split_once(':') else {
            return Err(Error::Format {
                offset: line_offset,
                msg: format!("expected 'split: ids', got {trimmed:?}"),
            });
        };
        let target = match split.trim() {
            "train" => &mut manifest.train,
            "val" => &mut manifest.val,
            "novel" => &mut manifest.novel,
            other => {
                return Err(Error::Format {
                    offset: line_offset,
                    msg: format!("unknown split {other:?}"),
                })
            }
        };
        for tok in rest.split_whitespace() {
            let id: u32 = tok.parse().map_err(|_| Error::Format {
                offset: line_offset,
                msg: format!("bad class id {tok:?}"),
            })?;
            if let Some(prev) = seen.insert(id, split.trim().to_string()) {
                return Err(Error::Dataset(format!(
                    "class {id} appears in both {prev} and {}",
                    split.trim()
                )));
            }
            target.push(id);
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FsdsContents {
        FsdsContents {
            side: 2,
            channels: 3,
            images: vec![(0, vec![1; 12]), (1, vec![200; 12]), (0, vec![7; 12])],
        }
    }

    #[test]
    fn encode_parse_round_trip() {
        let c = sample();
        assert_eq!(parse(&encode(&c)).unwrap(), c);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(parse(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 5];
        match parse(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset <= cut.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_overlap_rejection() {
        let m = Manifest {
            train: vec![0, 1],
            val: vec![2],
            novel: vec![3, 4],
        };
        assert_eq!(parse_manifest(&m.to_text()).unwrap(), m);
        let overlapping = "train: 0 1\nnovel: 1 2\n";
        assert!(parse_manifest(overlapping).is_err());
    }

    #[test]
    fn manifest_tolerates_comments_and_blank_lines() {
        let text = "# splits\n\ntrain: 5\nval:\nnovel: 6\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.train, vec![5]);
        assert!(m.val.is_empty());
        assert_eq!(m.novel, vec![6]);
    }
}
