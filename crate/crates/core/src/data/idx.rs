//! IDX binary format (big-endian), as distributed for MNIST-family datasets.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `(n, 1, rows, cols)`, pixel bytes divided by 255.
    Images(Tensor),
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("header truncated at byte {at}")))
}

/// Parses an IDX stream; gzip input is detected by its magic and inflated.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip: {e}")))?;
        return parse_idx(&out);
    }
    let magic = read_u32(bytes, 0)?;
    let (dims, header) = match magic {
        IMAGES_MAGIC => (3, 16),
        LABELS_MAGIC => (1, 8),
        other => return Err(Error::Format(format!("unknown IDX magic {other:#010x}"))),
    };
    let sizes = (0..dims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload: usize = sizes.iter().product();
    let body = &bytes[header..];
    if body.len() < payload {
        return Err(Error::Length(format!(
            "payload has {} bytes, header announces {payload}",
            body.len()
        )));
    }
    let body = &body[..payload];
    if dims == 1 {
        return Ok(IdxData::Labels(body.to_vec()));
    }
    if payload == 0 {
        return Err(Error::Format("empty image file".into()));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxData::Images(Tensor::new(vec![sizes[0], 1, sizes[1], sizes[2]], data)?))
}

pub fn serialize_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn serialize_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn find(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{name}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads `<split>-images-idx3-ubyte[.gz]` and `<split>-labels-idx1-ubyte[.gz]`.
pub fn load_idx_split(dir: &Path, split: Split, class_count: usize) -> Result<Dataset> {
    let images = parse_idx(&fs::read(find(dir, &format!("{}-images-idx3-ubyte", split.stem()))?)?)?;
    let labels = parse_idx(&fs::read(find(dir, &format!("{}-labels-idx1-ubyte", split.stem()))?)?)?;
    match (images, labels) {
        (IdxData::Images(img), IdxData::Labels(lab)) => {
            Dataset::new(img, lab.into_iter().map(usize::from).collect(), class_count)
        }
        _ => Err(Error::Format("image/label files swapped or mislabelled".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn single_pixel_image() {
        let bytes = serialize_idx_images(1, 1, 1, &[51]);
        match parse_idx(&bytes).unwrap() {
            IdxData::Images(t) => {
                assert_eq!(t.shape(), &[1, 1, 1, 1]);
                assert_eq!(t.data()[0], 51.0 / 255.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = serialize_idx_labels(&[1, 2, 3]);
        bytes[3] = 0x02;
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
        let bytes = serialize_idx_labels(&[1, 2, 3]);
        assert!(matches!(parse_idx(&bytes[..10]), Err(Error::Length(_))));
        assert!(matches!(parse_idx(&bytes[..5]), Err(Error::Length(_))));
    }

    #[test]
    fn gzip_is_transparent() {
        let raw = serialize_idx_labels(&[4, 0, 9]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&gz).unwrap(), IdxData::Labels(vec![4, 0, 9]));
    }
}
