//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   "PMRN"
//! version u16 (currently 1)
//! count   u32
//! per entry: name_len u16 + UTF-8 name + rank u8 + dims u32[rank]
//!            + f64 values
//! config  u32 length + UTF-8 key=value text
//! state   episode u64 + rng seed [32] + rng stream u64 + word_pos u64·2
//! ```
//!
//! Optimizer moments ride along as reserved entries (`opt.m.*`, `opt.v.*`,
//! `opt.step`) so a resumed run continues the trajectory bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use crate::byteio::Reader;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMRN";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub episode: u64,
    pub rng: RngState,
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    // One sorted namespace: model parameters plus reserved optimizer rows.
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, t) in ck.params.iter() {
        entries.insert(name.clone(), (t.shape().to_vec(), t.data().to_vec()));
    }
    for (prefix, side) in [("opt.m.", &ck.adam.first), ("opt.v.", &ck.adam.second)] {
        for (name, data) in side {
            entries.insert(format!("{prefix}{name}"), (vec![data.len()], data.clone()));
        }
    }
    entries.insert("opt.step".into(), (vec![1], vec![ck.adam.step as f64]));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &entries {
        write_entry(&mut out, name, shape, data);
    }
    let config = ck.config.to_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&ck.episode.to_le_bytes());
    out.extend_from_slice(&ck.rng.seed);
    out.extend_from_slice(&ck.rng.stream.to_le_bytes());
    out.extend_from_slice(&(ck.rng.word_pos as u64).to_le_bytes());
    out.extend_from_slice(&((ck.rng.word_pos >> 64) as u64).to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
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
    let count = r.u32("entry count")? as usize;
    let mut params = ParamSet::new();
    let mut adam = AdamState::new();
    for i in 0..count {
        let name_len = r.u16(&format!("name length of entry {i}"))? as usize;
        let name_bytes = r.take(name_len, "entry name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format {
                offset: r.pos - name_len,
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("value")?);
        }
        if name == "opt.step" {
            adam.step = data.first().copied().unwrap_or(0.0) as u64;
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            adam.first.insert(rest.to_string(), data);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            adam.second.insert(rest.to_string(), data);
        } else {
            params.insert(
                name,
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
        }
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes).map_err(|_| Error::Format {
        offset: r.pos - config_len,
        msg: "config block is not UTF-8".into(),
    })?;
    let config = TrainConfig::from_text(config_text)?;
    let episode = r.u64("episode counter")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let lo = r.u64("rng word pos")? as u128;
    let hi = r.u64("rng word pos high")? as u128;
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(Checkpoint {
        params,
        adam,
        config,
        episode,
        rng: RngState {
            seed,
            stream,
            word_pos: lo | (hi << 64),
        },
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
