//! IDX files (the MNIST family): unsigned-byte images and labels.
//!
//! Header: two zero bytes, type code `0x08` (u8), dimension count, then one
//! big-endian u32 per dimension. Images are `[n, rows, cols]` or
//! `[n, rows, cols, channels]`; labels are `[n]`. Pixels are divided by 255
//! on read and multiplied back (rounded) on write, so read∘write reproduces
//! the original bytes.

use std::path::Path;

use super::bytes::Reader;
use crate::error::{Error, Result};
use crate::tensor::{ImageShape, ImageTensor, LabeledDataset};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed IDX image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub shape: ImageShape,
    pub images: Vec<ImageTensor<f64>>,
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages> {
    let mut r = Reader::new(buf);
    let magic = r.u32_be("magic")?;
    let ndim = match magic {
        IMAGES_MAGIC => 3,
        IMAGES_RGB_MAGIC => 4,
        other => return Err(Error::parse(0, format!("bad IDX image magic 0x{other:08x}"))),
    };
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32_be("dimension")? as usize);
    }
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let channels = if ndim == 4 { dims[3] } else { 1 };
    let shape = ImageShape::new(cols, rows, channels).map_err(|e| Error::parse(4, e.to_string()))?;
    let d = shape.len();
    let payload = n
        .checked_mul(d)
        .ok_or_else(|| Error::parse(4, "declared dimensions overflow"))?;
    let start = r.offset();
    if r.remaining() < payload {
        return Err(Error::parse(
            start + r.remaining() as u64,
            format!("truncated payload: dimensions declare {payload} bytes from offset {start}, file has {}", r.remaining()),
        ));
    }
    let bytes = r.take(payload, "payload")?;
    r.expect_end()?;
    let images = bytes
        .chunks_exact(d.max(1))
        .take(n)
        .map(|c| ImageTensor::new(shape, c.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect::<Result<_>>()?;
    Ok(IdxImages { shape, images })
}

pub fn parse_idx_labels(buf: &[u8], num_classes: usize) -> Result<Vec<usize>> {
    let mut r = Reader::new(buf);
    let magic = r.u32_be("magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(0, format!("bad IDX label magic 0x{magic:08x}")));
    }
    let n = r.u32_be("dimension")? as usize;
    let start = r.offset();
    if r.remaining() < n {
        return Err(Error::parse(
            start + r.remaining() as u64,
            format!("truncated payload: header declares {n} labels from offset {start}, file has {}", r.remaining()),
        ));
    }
    let bytes = r.take(n, "labels")?;
    r.expect_end()?;
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if usize::from(b) >= num_classes {
                Err(Error::parse(start + i as u64, format!("label {b} outside [0, {num_classes})")))
            } else {
                Ok(usize::from(b))
            }
        })
        .collect()
}

fn pixel_byte(v: f64, at: usize) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("pixel {at} has value {v}, IDX needs [0, 1]")));
    }
    Ok((v * 255.0).round() as u8)
}

pub fn encode_idx_images(shape: ImageShape, images: &[ImageTensor<f64>]) -> Result<Vec<u8>> {
    let rgb = shape.channels != 1;
    let mut buf = Vec::with_capacity(20 + images.len() * shape.len());
    buf.extend_from_slice(&(if rgb { IMAGES_RGB_MAGIC } else { IMAGES_MAGIC }).to_be_bytes());
    let mut dims = vec![images.len(), shape.height, shape.width];
    if rgb {
        dims.push(shape.channels);
    }
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_be_bytes());
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape {
            return Err(Error::invalid(format!("image {i} has shape {}, expected {shape}", img.shape())));
        }
        for (j, &v) in img.data().iter().enumerate() {
            buf.push(pixel_byte(v, i * shape.len() + j)?);
        }
    }
    Ok(buf)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&u32::try_from(labels.len()).map_err(|_| Error::invalid("too many labels"))?.to_be_bytes());
    for &l in labels {
        buf.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?);
    }
    Ok(buf)
}

/// Reads a paired image/label IDX dataset.
pub fn read_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<LabeledDataset<f64>> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?, num_classes)?;
    if labels.len() != imgs.images.len() {
        return Err(Error::parse(4, format!("{} labels for {} images", labels.len(), imgs.images.len())));
    }
    LabeledDataset::new(imgs.shape, imgs.images, labels, num_classes)
}

/// Writes a dataset as paired IDX image/label files.
pub fn write_idx(ds: &LabeledDataset<f64>, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    std::fs::write(images, encode_idx_images(ds.shape(), ds.images())?)?;
    std::fs::write(labels, encode_idx_labels(ds.labels())?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 128, 255, 0, 255, 255, 128, 0]);
        b
    }

    #[test]
    fn hand_crafted_fixture() {
        let parsed = parse_idx_images(&fixture()).unwrap();
        assert_eq!(parsed.shape, ImageShape::new(2, 2, 1).unwrap());
        assert_eq!(parsed.images[0].data(), &[0.0, 128.0 / 255.0, 1.0, 0.0]);
        assert_eq!(parsed.images[1].data(), &[1.0, 1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(encode_idx_images(parsed.shape, &parsed.images).unwrap(), fixture());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let f = fixture();
        match parse_idx_images(&f[..f.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, (f.len() - 3) as u64),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&f[..9]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        let mut bad = f.clone();
        bad[2] = 9;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut extra = f;
        extra.push(0);
        assert!(matches!(parse_idx_images(&extra), Err(Error::Parse { offset: 24, .. })));
    }

    #[test]
    fn labels_validated() {
        let good = encode_idx_labels(&[0, 3, 1]).unwrap();
        assert_eq!(parse_idx_labels(&good, 4).unwrap(), vec![0, 3, 1]);
        match parse_idx_labels(&good, 3) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        assert!(parse_idx_labels(&good[..10], 4).is_err());
    }

    #[test]
    fn color_round_trip() {
        let s = ImageShape::new(3, 2, 3).unwrap();
        let imgs: Vec<_> = (0..2)
            .map(|i| ImageTensor::new(s, (0..18).map(|j| ((i * 18 + j) * 7 % 256) as f64 / 255.0).collect()).unwrap())
            .collect();
        let bytes = encode_idx_images(s, &imgs).unwrap();
        let back = parse_idx_images(&bytes).unwrap();
        assert_eq!(back.images, imgs);
        assert_eq!(encode_idx_images(s, &back.images).unwrap(), bytes);
    }
}
