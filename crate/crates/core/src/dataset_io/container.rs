//! Native image container for sensitive, central and synthetic image sets.
//!
//! Little-endian layout:
//!
//! | field | type |
//! |---|---|
//! | magic `DPWIMG01` | 8 bytes |
//! | version (1) | u32 |
//! | kind (0 sensitive, 1 central, 2 synthetic) | u8 |
//! | has-labels flag | u8 |
//! | reserved (0) | u16 |
//! | width, height, channels, num_classes | 4 × u32 |
//! | image count `n` | u64 |
//! | provenance length `p` | u64 |
//! | provenance (UTF-8 JSON) | `p` bytes |
//! | labels, if flagged (−1 = none) | `n` × i32 |
//! | pixels | `n·W·H·C` × f64 |
//! | SHA-256 of all preceding bytes | 32 bytes |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bytes::{put_f64s, put_u32, put_u64, seal, to_u32, unseal, Reader};
use crate::central_query::CentralImageSet;
use crate::error::{Error, Result};
use crate::tensor::{ImageShape, ImageTensor, LabeledDataset};

const MAGIC: &[u8; 8] = b"DPWIMG01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Sensitive,
    Central,
    Synthetic,
}

impl ContainerKind {
    fn code(self) -> u8 {
        match self {
            ContainerKind::Sensitive => 0,
            ContainerKind::Central => 1,
            ContainerKind::Synthetic => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ContainerKind::Sensitive),
            1 => Some(ContainerKind::Central),
            2 => Some(ContainerKind::Synthetic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub shape: ImageShape,
    pub num_classes: usize,
    pub images: Vec<ImageTensor<f64>>,
    /// Per-image labels; `None` when the file carries no label block.
    pub labels: Option<Vec<Option<usize>>>,
    /// Free-form JSON describing how the images were made.
    pub provenance: String,
}

impl Container {
    pub fn from_dataset(kind: ContainerKind, ds: &LabeledDataset<f64>, provenance: String) -> Self {
        Self {
            kind,
            shape: ds.shape(),
            num_classes: ds.num_classes(),
            images: ds.images().to_vec(),
            labels: Some(ds.labels().iter().map(|&l| Some(l)).collect()),
            provenance,
        }
    }

    pub fn from_central(set: &CentralImageSet<f64>, num_classes: usize) -> Result<Self> {
        let provenance = serde_json::to_string(&set.provenance).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            kind: ContainerKind::Central,
            shape: set.shape,
            num_classes,
            images: set.images.clone(),
            labels: Some(set.labels.clone()),
            provenance,
        })
    }

    /// Inverse of [`Container::from_central`].
    pub fn to_central(&self) -> Result<CentralImageSet<f64>> {
        if self.kind != ContainerKind::Central {
            return Err(Error::invalid(format!("expected a central image container, found {:?}", self.kind)));
        }
        let provenance = serde_json::from_str(&self.provenance).map_err(|e| Error::Config(format!("central provenance: {e}")))?;
        let labels = self.labels.clone().unwrap_or_else(|| vec![None; self.images.len()]);
        Ok(CentralImageSet { shape: self.shape, images: self.images.clone(), labels, provenance })
    }

    /// Labeled dataset view; fails if any image lacks a label.
    pub fn to_dataset(&self) -> Result<LabeledDataset<f64>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("container has no labels"))?
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::invalid(format!("image {i} has no label"))))
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(self.shape, self.images.clone(), labels, self.num_classes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.shape.len();
        let mut buf = Vec::with_capacity(64 + self.provenance.len() + self.images.len() * (4 + 8 * d));
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        buf.push(self.kind.code());
        buf.push(u8::from(self.labels.is_some()));
        buf.extend_from_slice(&[0, 0]);
        put_u32(&mut buf, to_u32(self.shape.width, "width")?);
        put_u32(&mut buf, to_u32(self.shape.height, "height")?);
        put_u32(&mut buf, to_u32(self.shape.channels, "channels")?);
        put_u32(&mut buf, to_u32(self.num_classes, "num_classes")?);
        put_u64(&mut buf, self.images.len() as u64);
        put_u64(&mut buf, self.provenance.len() as u64);
        buf.extend_from_slice(self.provenance.as_bytes());
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::invalid(format!("{} labels for {} images", labels.len(), self.images.len())));
            }
            for l in labels {
                let v = match l {
                    None => -1,
                    Some(l) => i32::try_from(*l).map_err(|_| Error::invalid(format!("label {l} too large")))?,
                };
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != self.shape {
                return Err(Error::invalid(format!("image {i} has shape {}, container is {}", img.shape(), self.shape)));
            }
            put_f64s(&mut buf, img.data().iter().copied());
        }
        seal(&mut buf);
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let body = unseal(buf)?;
        let mut r = Reader::new(body);
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::parse(0, "not an image container (bad magic)"));
        }
        let version = r.u32_le("version")?;
        if version != VERSION {
            return Err(Error::parse(8, format!("unsupported container version {version}")));
        }
        let kind_at = r.offset();
        let kind = ContainerKind::from_code(r.u8("kind")?)
            .ok_or_else(|| Error::parse(kind_at, "unknown container kind"))?;
        let flag_at = r.offset();
        let has_labels = match r.u8("label flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::parse(flag_at, format!("label flag must be 0 or 1, got {other}"))),
        };
        r.take(2, "reserved")?;
        let shape_at = r.offset();
        let (w, h, c) = (r.u32_le("width")?, r.u32_le("height")?, r.u32_le("channels")?);
        let shape = ImageShape::new(w as usize, h as usize, c as usize).map_err(|e| Error::parse(shape_at, e.to_string()))?;
        let num_classes = r.u32_le("num_classes")? as usize;
        let count = r.u64_le("count")? as usize;
        let plen = r.u64_le("provenance length")? as usize;
        let prov_at = r.offset();
        let provenance = String::from_utf8(r.take(plen, "provenance")?.to_vec())
            .map_err(|e| Error::parse(prov_at + e.utf8_error().valid_up_to() as u64, "provenance is not UTF-8"))?;
        let labels = if has_labels {
            let mut v = Vec::with_capacity(count.min(r.remaining() / 4));
            for _ in 0..count {
                let at = r.offset();
                v.push(match r.i32_le("label")? {
                    -1 => None,
                    l if l >= 0 && (l as usize) < num_classes.max(1) => Some(l as usize),
                    l => return Err(Error::parse(at, format!("label {l} outside [0, {num_classes})"))),
                });
            }
            Some(v)
        } else {
            None
        };
        let d = shape.len();
        let need = count.checked_mul(d).and_then(|n| n.checked_mul(8));
        if need.is_none_or(|n| n != r.remaining()) {
            return Err(Error::parse(
                r.offset(),
                format!("pixel payload is {} bytes, header declares {count} images of {d} values", r.remaining()),
            ));
        }
        let pixels = r.f64s_le(count * d, "pixels")?;
        let images = pixels
            .chunks_exact(d)
            .map(|c| ImageTensor::new(shape, c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self { kind, shape, num_classes, images, labels, provenance })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let s = ImageShape::new(2, 3, 1).unwrap();
        Container {
            kind: ContainerKind::Central,
            shape: s,
            num_classes: 3,
            images: vec![
                ImageTensor::new(s, vec![-0.5, 1.25, 0.0, 3.0, f64::MIN_POSITIVE, -0.0]).unwrap(),
                ImageTensor::new(s, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            ],
            labels: Some(vec![Some(2), None]),
            provenance: r#"{"query":"mean","note":"ünïcode"}"#.into(),
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.provenance, c.provenance);
        assert_eq!(back.labels, c.labels);
        assert!(back.images[0].data()[5].is_sign_negative());
    }

    #[test]
    fn central_set_round_trip() {
        use crate::central_query::{query_central_set, CentralQuery, MeanQueryConfig};
        use crate::dataset_io::generate_toy_glyphs;
        use crate::rng::RngSeed;
        let ds = generate_toy_glyphs(20, 3, ImageShape::new(8, 8, 1).unwrap(), RngSeed::new(3)).unwrap();
        let query = CentralQuery::Mean(MeanQueryConfig { n_c: 6, q_c: 0.5, sigma_c: 5.0, clip_norm: 4.0 });
        let set = query_central_set(&ds, &query, true, RngSeed::new(4)).unwrap();
        let c = Container::from_bytes(&Container::from_central(&set, 3).unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(c.to_central().unwrap(), set);
        assert!(sample().to_central().is_err());
        let mut synthetic = c.clone();
        synthetic.kind = ContainerKind::Synthetic;
        assert!(synthetic.to_central().is_err());
    }

    #[test]
    fn unlabeled_round_trip() {
        let mut c = sample();
        c.labels = None;
        c.kind = ContainerKind::Synthetic;
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.labels, None);
        assert_eq!(back.kind, ContainerKind::Synthetic);
        assert!(back.to_dataset().is_err());
    }

    #[test]
    fn corrupted_files_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[60] ^= 0x40;
        match Container::from_bytes(&flipped) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, (bytes.len() - 32) as u64);
                assert!(msg.contains("checksum"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Parse { .. })));

        // Re-seal a body with a bad kind code so the checksum passes.
        let mut body = bytes[..bytes.len() - 32].to_vec();
        body[12] = 9;
        seal(&mut body);
        assert!(matches!(Container::from_bytes(&body), Err(Error::Parse { offset: 12, .. })));

        // Truncated payload behind a valid checksum.
        let mut short = bytes[..bytes.len() - 40].to_vec();
        seal(&mut short);
        assert!(matches!(Container::from_bytes(&short), Err(Error::Parse { .. })));
    }
}
