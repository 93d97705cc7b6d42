//! Big-endian IDX containers (`0x00000803` images, `0x00000801` labels).

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Validates magic and length, returning `(dims, payload)`.
fn parse<'a>(bytes: &'a [u8], path: &Path, magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let name = path.display().to_string();
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: name,
            expected: 4,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: name,
            expected: magic,
            found,
        });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: name,
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            path: name,
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an image/label IDX pair as a single-channel dataset. The class
/// count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ibytes = read(ip)?;
    let lbytes = read(lp)?;
    let (idims, pixels) = parse(&ibytes, ip, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = parse(&lbytes, lp, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        images: pixels.to_vec(),
        image_shape: vec![1, idims[1], idims[2]],
        labels,
        num_classes,
    })
}

pub fn write_idx_images(path: impl AsRef<Path>, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), count * rows * cols, "pixel buffer size");
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write(path.as_ref(), &out)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write(path.as_ref(), &out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
