//! Checkpoint files.
//!
//! ```text
//! "VQDR" | version: u16 | header_len: u32 | header (TOML text)
//!        | blob_count: u32 | blob*
//! blob   = name_len: u16 | name | rank: u8 | dims: u32 * rank | f32 data
//! ```
//!
//! Integers and floats are little-endian. Blobs are named `param/<name>`,
//! `adam.m/<name>` and `adam.v/<name>`, in parameter order. The header holds
//! both configurations, step counters and the random generator position.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refiner::{Refiner, RefinerConfig};
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VQDR";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    state: State,
    refiner: RefinerConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct State {
    step: u64,
    skipped: u64,
    adam_step: u64,
    elapsed_seconds: f64,
    /// Hex of the 32-byte generator seed.
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn push_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::InvalidArgument(format!("blob name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} of {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn checkpoint_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let rng = &trainer.rng;
    let header = Header {
        state: State {
            step: trainer.step,
            skipped: trainer.skipped,
            adam_step: trainer.adam.step,
            elapsed_seconds: trainer.elapsed_seconds,
            rng_seed: hex(&rng.get_seed()),
            rng_stream: rng.get_stream().to_string(),
            rng_word_pos: rng.get_word_pos().to_string(),
        },
        refiner: trainer.refiner.config().clone(),
        train: trainer.config.clone(),
    };
    let text =
        toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let params = trainer.refiner.params();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(3 * params.len() as u32).to_le_bytes());
    for (prefix, tensors) in [
        ("param", params.tensors()),
        ("adam.m", &trainer.adam.m[..]),
        ("adam.v", &trainer.adam.v[..]),
    ] {
        for (id, t) in params.ids().zip(tensors) {
            push_blob(&mut out, &format!("{prefix}/{}", params.name(id)), t)?;
        }
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let bytes = checkpoint_bytes(trainer)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn blob(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16("blob name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "blob name")?)
            .map_err(|_| Error::Format("blob name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8("blob rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("blob shape")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| {
                Error::Format(format!("blob {name} has an impossible shape {dims:?}"))
            })?;
        let data = self
            .take(count, &format!("blob {name}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("blob {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parses a checkpoint fully before building any state.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint: magic {magic:02x?}"
        )));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let header: Header =
        toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        blobs.push(r.blob()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.pos
        )));
    }

    header.train.validate()?;
    let rng_seed =
        unhex(&header.state.rng_seed).ok_or_else(|| Error::Format("bad rng_seed".into()))?;
    let stream: u64 = header
        .state
        .rng_stream
        .parse()
        .map_err(|_| Error::Format("bad rng_stream".into()))?;
    let word_pos: u128 = header
        .state
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Format("bad rng_word_pos".into()))?;

    let mut refiner = Refiner::<f32>::new(header.refiner, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Format(format!("checkpoint configuration: {e}")))?;
    let n = refiner.params().len();
    if blobs.len() != 3 * n {
        return Err(Error::Format(format!(
            "{} blobs, expected {}",
            blobs.len(),
            3 * n
        )));
    }
    let mut groups = Vec::with_capacity(3);
    let mut blobs = blobs.into_iter();
    for prefix in ["param", "adam.m", "adam.v"] {
        let mut group = Vec::with_capacity(n);
        for id in refiner.params().ids() {
            let (name, t) = blobs.next().expect("count checked");
            let want = format!("{prefix}/{}", refiner.params().name(id));
            if name != want {
                return Err(Error::Format(format!(
                    "blob {name} found where {want} was expected"
                )));
            }
            if t.shape() != refiner.params().get(id).shape() {
                return Err(Error::Format(format!(
                    "blob {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    refiner.params().get(id).shape()
                )));
            }
            group.push(t);
        }
        groups.push(group);
    }
    let v = groups.pop().expect("three groups");
    let m = groups.pop().expect("three groups");
    refiner
        .params_mut()
        .assign(groups.pop().expect("three groups"))?;

    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(Trainer {
        refiner,
        adam: AdamState {
            step: header.state.adam_step,
            m,
            v,
        },
        config: header.train,
        rng,
        step: header.state.step,
        skipped: header.state.skipped,
        elapsed_seconds: header.state.elapsed_seconds,
    })
}

/// Loads a checkpoint. With `expected` set, the stored model configuration
/// must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&RefinerConfig>) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let trainer = parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if let Some(want) = expected {
        let have = trainer.refiner.config();
        if have.options != want.options {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has K={}, expected K={}",
                have.options, want.options
            )));
        }
        if have.stages != want.stages {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has N={}, expected N={}",
                have.stages, want.stages
            )));
        }
        if have != want {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model {have:?} differs from requested {want:?}"
            )));
        }
    }
    Ok(trainer)
}
