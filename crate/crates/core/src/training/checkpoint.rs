//! Binary checkpoints.
//!
//! Layout (little-endian): magic `CFLW`, `u32` format version, then six
//! sections each prefixed by a `u64` byte length — architecture config as
//! canonical text, parameter values as `f64` in declaration order,
//! batch-norm running statistics, optimizer state, RNG state, step counter
//! — and finally a CRC32 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{arch_to_text, parse_arch_text};
use crate::error::{Error, Result};
use crate::flow::{build_flow, FlowModel};
use crate::numerics::{Adam, AdamConfig, AdamState, RngStream, Tensor};

pub const MAGIC: &[u8; 4] = b"CFLW";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or reproduce scores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub optimizer: Adam,
    pub rng: RngStream,
    pub step: u64,
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn section(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        section(&mut out, arch_to_text(self.model.config()).as_bytes());

        let mut params = Vec::new();
        put_f64s(&mut params, self.model.params().flat_values());
        section(&mut out, &params);

        let mut stats = Vec::new();
        put_f64s(&mut stats, self.model.running_stats());
        section(&mut out, &stats);

        let mut opt = Vec::new();
        let c = self.optimizer.config;
        put_f64s(&mut opt, [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]);
        opt.extend_from_slice(&self.optimizer.state.step.to_le_bytes());
        for t in self.optimizer.state.m.iter().chain(&self.optimizer.state.v) {
            put_f64s(&mut opt, t.data().iter().copied());
        }
        section(&mut out, &opt);

        let (state, inc) = self.rng.raw_state();
        let mut rng = Vec::new();
        rng.extend_from_slice(&state.to_le_bytes());
        rng.extend_from_slice(&inc.to_le_bytes());
        section(&mut out, &rng);

        section(&mut out, &self.step.to_le_bytes());

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: 0,
                detail: "missing CFLW magic".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Integrity(format!(
                "file is only {} bytes long",
                bytes.len()
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "CRC32 mismatch (stored {stored:#010x}, computed {actual:#010x}); the file is truncated or corrupted"
            )));
        }

        let mut reader = Sections { body, pos: 8 };
        let config_text = std::str::from_utf8(reader.next()?)
            .map_err(|_| Error::Integrity("config section is not UTF-8".into()))?;
        let arch = parse_arch_text(config_text)?;
        let mut model = build_flow(&arch)?;

        let params = to_f64s(reader.next()?)?;
        model
            .params_mut()
            .set_flat_values(&params)
            .map_err(|e| Error::Integrity(format!("parameter section: {e}")))?;
        let stats = to_f64s(reader.next()?)?;
        model
            .set_running_stats(&stats)
            .map_err(|e| Error::Integrity(format!("running statistics: {e}")))?;

        let opt = reader.next()?;
        if opt.len() < 48 {
            return Err(Error::Integrity("optimizer section too short".into()));
        }
        let head = to_f64s(&opt[..40])?;
        let config = AdamConfig {
            lr: head[0],
            beta1: head[1],
            beta2: head[2],
            eps: head[3],
            weight_decay: head[4],
        };
        let mut state = AdamState::for_params(model.params());
        state.step = u64::from_le_bytes(opt[40..48].try_into().expect("8 bytes"));
        let moments = to_f64s(&opt[48..])?;
        let numel = model.params().numel();
        if moments.len() != 2 * numel {
            return Err(Error::Integrity(format!(
                "optimizer holds {} moment values, model needs {}",
                moments.len(),
                2 * numel
            )));
        }
        let mut offset = 0;
        for t in state.m.iter_mut().chain(state.v.iter_mut()) {
            let len = t.len();
            *t = Tensor::new(t.shape().to_vec(), moments[offset..offset + len].to_vec())?;
            offset += len;
        }

        let rng = reader.next()?;
        if rng.len() != 16 {
            return Err(Error::Integrity("RNG section must be 16 bytes".into()));
        }
        let rng = RngStream::from_raw_state(
            u64::from_le_bytes(rng[..8].try_into().expect("8 bytes")),
            u64::from_le_bytes(rng[8..].try_into().expect("8 bytes")),
        );
        let step = reader.next()?;
        if step.len() != 8 {
            return Err(Error::Integrity("step section must be 8 bytes".into()));
        }
        let step = u64::from_le_bytes(step.try_into().expect("8 bytes"));
        if reader.pos != body.len() {
            return Err(Error::Integrity(
                "unexpected bytes after the last section".into(),
            ));
        }
        Ok(Checkpoint {
            model,
            optimizer: Adam { config, state },
            rng,
            step,
        })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Sections<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Sections<'a> {
    fn next(&mut self) -> Result<&'a [u8]> {
        let len_end = self.pos + 8;
        let len = self
            .body
            .get(self.pos..len_end)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| {
                Error::Integrity(format!("section header missing at byte {}", self.pos))
            })?;
        let end = len_end
            .checked_add(len)
            .filter(|&e| e <= self.body.len())
            .ok_or_else(|| {
                Error::Integrity(format!("section at byte {} overruns the file", self.pos))
            })?;
        self.pos = end;
        Ok(&self.body[len_end..end])
    }
}

fn to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Integrity(
            "real-valued section length is not a multiple of 8".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
