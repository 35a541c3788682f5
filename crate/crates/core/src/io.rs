//! On-disk formats: CRC-protected binary checkpoints, ASCII PGM images and
//! raw little-endian `f64` maps.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SAILCKPT"  u32 version  u64 meta_len  meta JSON
//! u32 n_params  { u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[..] }
//! u8 has_optimizer  [ u64 step  u32 n  { u8 frozen  u64 len  f64 m[len]  f64 v[len] } ]
//! u32 crc32(all previous bytes)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{bail, Result, SailError};
use crate::model::SailModel;
use crate::tensor::Tensor;
use crate::training::{OptimizerState, Stage, TrainedCheckpoint};

pub const MAGIC: &[u8; 8] = b"SAILCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config_hash: String,
    pub best_epoch: usize,
    pub from_scratch: bool,
    /// The run config in canonical form (see [`RunConfig::canonical_json`]).
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_trained(trained: &TrainedCheckpoint, config: &RunConfig) -> Self {
        let mut canonical = config.clone();
        canonical.out_dir = Default::default();
        Checkpoint {
            meta: CheckpointMeta {
                stage: trained.stage,
                config_hash: config.hash(),
                best_epoch: trained.best_epoch,
                from_scratch: trained.from_scratch,
                config: canonical,
            },
            params: trained
                .model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: Some(trained.optimizer.clone()),
        }
    }

    /// Rebuilds the model described by the stored config and fills in the
    /// stored parameters; names and shapes must match exactly.
    pub fn to_model(&self) -> Result<SailModel> {
        let mut model = SailModel::new(self.meta.config.model.clone(), self.meta.config.seed)?;
        if model.params().len() != self.params.len() {
            bail!(
                Corrupt,
                "checkpoint has {} parameters, architecture expects {}",
                self.params.len(),
                model.params().len()
            );
        }
        for (slot, (name, value)) in model.params_mut().iter_mut().zip(&self.params) {
            if &slot.name != name || slot.value.shape() != value.shape() {
                bail!(Corrupt, "checkpoint entry '{name}' {:?} does not match '{}'", value.shape(), slot.name);
            }
            slot.value = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
                for i in 0..o.m.len() {
                    out.push(u8::from(o.frozen[i]));
                    out.extend_from_slice(&(o.m[i].len() as u64).to_le_bytes());
                    put_f64s(&mut out, &o.m[i]);
                    put_f64s(&mut out, &o.v[i]);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            bail!(Corrupt, "not a checkpoint (bad magic)");
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            bail!(Corrupt, "checkpoint CRC mismatch");
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            bail!(Corrupt, "unsupported checkpoint version {version}");
        }
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| SailError::Corrupt(format!("bad metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| SailError::Corrupt("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.len_u64()).collect::<Result<_>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(count) = count else {
                bail!(Corrupt, "parameter '{name}' shape overflows");
            };
            let data = r.f64s(count)?;
            params.push((name, Tensor::new(shape, data).map_err(|e| SailError::Corrupt(e.to_string()))?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let k = r.u32()? as usize;
                let (mut m, mut v, mut frozen) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..k {
                    frozen.push(r.u8()? != 0);
                    let len = r.len_u64()?;
                    m.push(r.f64s(len)?);
                    v.push(r.f64s(len)?);
                }
                Some(OptimizerState { step, m, v, frozen })
            }
            f => bail!(Corrupt, "bad optimizer flag {f}"),
        };
        if r.pos != body.len() {
            bail!(Corrupt, "{} trailing bytes in checkpoint", body.len() - r.pos);
        }
        Ok(Checkpoint {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a checkpoint; a missing file is a usage error, anything
    /// unreadable after that is corrupt.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SailError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Corrupt, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| SailError::Corrupt("length overflows".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let Some(bytes) = n.checked_mul(8) else {
            bail!(Corrupt, "length overflows");
        };
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

// ---- PGM -----------------------------------------------------------------

/// ASCII PGM (P2) text for integer samples `<= maxval`, one image row per line.
pub fn pgm_text(samples: &[u16], height: usize, width: usize, maxval: u16) -> Result<String> {
    if samples.len() != height * width {
        bail!(Dimension, "{} samples for a {height}x{width} image", samples.len());
    }
    if maxval == 0 || samples.iter().any(|&s| s > maxval) {
        bail!(Input, "PGM samples must lie in 0..={maxval} with maxval > 0");
    }
    let mut s = format!("P2\n{width} {height}\n{maxval}\n");
    for row in samples.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(u16::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

/// Quantizes `[0, 1]` values to `0..=maxval` by rounding.
pub fn quantize(values: &[f64], maxval: u16) -> Vec<u16> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * f64::from(maxval)).round() as u16)
        .collect()
}

pub fn write_pgm(path: &Path, samples: &[u16], height: usize, width: usize, maxval: u16) -> Result<()> {
    fs::write(path, pgm_text(samples, height, width, maxval)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

/// Parses ASCII PGM (P2), skipping `#` comments.
pub fn parse_pgm(text: &str) -> Result<Pgm> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        bail!(Input, "not an ASCII PGM (missing P2)");
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SailError::Input(format!("PGM: bad or missing {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > u16::MAX as usize {
        bail!(Input, "PGM maxval {maxval} out of range");
    }
    let samples: Vec<u16> = (0..width * height)
        .map(|_| {
            let v = num("sample")?;
            if v > maxval {
                bail!(Input, "PGM sample {v} exceeds maxval {maxval}");
            }
            Ok(v as u16)
        })
        .collect::<Result<_>>()?;
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    parse_pgm(&fs::read_to_string(path)?)
}

// ---- raw maps --------------------------------------------------------------

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(values.len() * 8);
    put_f64s(&mut out, values);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        bail!(Corrupt, "{} is not a whole number of f64 values", path.display());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
