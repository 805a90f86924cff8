//! Model checkpoint file.
//!
//! Little-endian layout:
//!
//! | field | type |
//! |---|---|
//! | magic `DPWCKPT1` | 8 bytes |
//! | version (1) | u32 |
//! | width, height, channels, time_dim, label_dim, num_classes, hidden0, hidden1 | 8 × u32 |
//! | optimizer step | u64 |
//! | schedule length `T` | u32 |
//! | betas | `T` × f64 |
//! | parameter count `P` | u64 |
//! | parameters | `P` × f64 |
//! | SHA-256 of all preceding bytes | 32 bytes |

use std::path::Path;

use super::denoiser::{DenoiserManifest, DenoiserParams};
use super::schedule::NoiseSchedule;
use crate::dataset_io::bytes::{put_f64s, put_u32, put_u64, seal, to_u32, unseal, Reader};
use crate::error::{Error, Result};
use crate::tensor::ImageShape;

const MAGIC: &[u8; 8] = b"DPWCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams<f64>,
    pub schedule: NoiseSchedule<f64>,
    /// Number of optimizer steps already applied (for resumption).
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.params.manifest;
        let mut buf = Vec::with_capacity(80 + 8 * (self.params.len() + self.schedule.steps()));
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        for (v, what) in [
            (m.shape.width, "width"),
            (m.shape.height, "height"),
            (m.shape.channels, "channels"),
            (m.time_dim, "time_dim"),
            (m.label_dim, "label_dim"),
            (m.num_classes, "num_classes"),
            (m.hidden[0], "hidden0"),
            (m.hidden[1], "hidden1"),
        ] {
            put_u32(&mut buf, to_u32(v, what)?);
        }
        put_u64(&mut buf, self.step);
        put_u32(&mut buf, to_u32(self.schedule.steps(), "schedule length")?);
        put_f64s(&mut buf, self.schedule.betas().iter().copied());
        put_u64(&mut buf, self.params.len() as u64);
        put_f64s(&mut buf, self.params.values.iter().copied());
        seal(&mut buf);
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let body = unseal(buf)?;
        let mut r = Reader::new(body);
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::parse(0, "not a checkpoint file (bad magic)"));
        }
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != VERSION {
            return Err(Error::parse(at, format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32_le("manifest")? as usize;
        }
        let at = r.offset();
        let shape = ImageShape::new(dims[0], dims[1], dims[2]).map_err(|e| Error::parse(at, e.to_string()))?;
        let manifest = DenoiserManifest::new(shape, dims[3], dims[4], dims[5], [dims[6], dims[7]])
            .map_err(|e| Error::parse(at, e.to_string()))?;
        let step = r.u64_le("step")?;
        let t = r.u32_le("schedule length")? as usize;
        let at = r.offset();
        let schedule = NoiseSchedule::from_betas(r.f64s_le(t, "betas")?).map_err(|e| Error::parse(at, e.to_string()))?;
        let n = r.u64_le("parameter count")? as usize;
        let at = r.offset();
        if n != manifest.param_count() {
            return Err(Error::parse(at, format!("parameter count {n} does not match manifest ({})", manifest.param_count())));
        }
        let values = r.f64s_le(n, "parameters")?;
        r.expect_end()?;
        let params = DenoiserParams::new(manifest, values).map_err(|e| Error::parse(at, e.to_string()))?;
        Ok(Self { params, schedule, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
