//! IDX files, the container format of the MNIST distribution.
//!
//! Header: two zero bytes, a type byte (0x08 = unsigned byte), the number of
//! dimensions, then one big-endian `u32` per dimension. Data follows as raw
//! bytes in row-major order.

use std::path::Path;

use crate::data::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn parse_idx(buf: &[u8], expected_magic: u32) -> Result<IdxArray> {
    if buf.len() < 4 {
        return Err(Error::Format(format!(
            "IDX file too short: {} bytes",
            buf.len()
        )));
    }
    let magic = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndims = buf[3] as usize;
    let header = 4 + 4 * ndims;
    if buf.len() < header {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = buf[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match expected {
        Some(n) if n == buf.len() - header => Ok(IdxArray {
            dims,
            bytes: buf[header..].to_vec(),
        }),
        _ => Err(Error::Format(format!(
            "IDX dimensions {dims:?} do not match the {} data bytes present",
            buf.len() - header
        ))),
    }
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    if array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::InvalidArgument(
            "IDX needs 1..=255 dimensions".into(),
        ));
    }
    if array.dims.iter().product::<usize>() != array.bytes.len() {
        return Err(Error::InvalidArgument(
            "IDX dimensions disagree with data length".into(),
        ));
    }
    let mut out = vec![0, 0, 0x08, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.bytes);
    Ok(out)
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&buf, expected_magic).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    std::fs::write(path, encode_idx(array)?).map_err(|e| Error::io(path, e))
}

/// Loads a 3-D image file as `[n, 1, rows, cols]` pixels in `[0, 1]`, with
/// optional labels.
pub fn load_idx(images: &Path, labels: Option<&Path>, split: Split) -> Result<Dataset> {
    let img = read_idx(images, IMAGES_MAGIC)?;
    let [count, rows, cols] = img.dims[..] else {
        return Err(Error::Format(format!(
            "image file has dims {:?}, expected 3",
            img.dims
        )));
    };
    let labels = match labels {
        Some(path) => {
            let lab = read_idx(path, LABELS_MAGIC)?;
            if lab.dims != [count] {
                return Err(Error::Format(format!(
                    "{} labels for {count} images",
                    lab.dims.first().copied().unwrap_or(0)
                )));
            }
            Some(lab.bytes)
        }
        None => None,
    };
    let norm = Normalization::UNIT_BYTE;
    let data = img.bytes.iter().map(|&b| norm.normalize(b)).collect();
    let examples = Tensor::new([count, 1, rows, cols], data)?;
    Dataset::new(examples, labels, split, norm)
}
