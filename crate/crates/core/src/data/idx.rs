//! MNIST IDX files: big-endian, magic `[0, 0, dtype, ndim]` followed by
//! `ndim` u32 dimension sizes and the payload. Only unsigned-byte payloads
//! (dtype `0x08`) are supported.

use super::DataError;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[n, 1, rows, cols]`, scaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let magic = read_u32(bytes, 0)?;
    let ndim = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => return Err(DataError::BadMagic(other)),
    };
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != count {
        return Err(DataError::Truncated {
            expected: header + count,
            found: bytes.len(),
        });
    }
    if magic == LABELS_MAGIC {
        if let Some(&bad) = payload.iter().find(|&&b| b > 9) {
            return Err(DataError::LabelOutOfRange(bad));
        }
        return Ok(IdxData::Labels(payload.iter().map(|&b| b as usize).collect()));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(IdxData::Images(images))
}

/// Encodes `[n, 1, rows, cols]` images in `[0, 1]` as an IDX image file,
/// rounding each pixel to the nearest byte.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>, DataError> {
    let [n, c, h, w] = match images.shape() {
        &[n, c, h, w] => [n, c, h, w],
        s => return Err(DataError::Invalid(format!("expected [n, 1, h, w], got {s:?}"))),
    };
    if c != 1 {
        return Err(DataError::Invalid("IDX images are single-channel".into()));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 9 {
            return Err(DataError::LabelOutOfRange(l.min(255) as u8));
        }
        out.push(l as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn handcrafted_image_blob() {
        let mut blob = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        blob.extend_from_slice(&[0, 255, 0, 255]);
        let IdxData::Images(t) = parse_idx(&blob).unwrap() else {
            panic!("expected images")
        };
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn wrong_magic() {
        let blob = [0x12, 0x34, 0x56, 0x78, 0, 0, 0, 0];
        assert!(matches!(parse_idx(&blob), Err(DataError::BadMagic(0x1234_5678))));
    }

    #[test]
    fn truncated_payload() {
        let mut blob = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        blob.extend_from_slice(&[1; 7]);
        assert!(matches!(parse_idx(&blob), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn labels_and_range_check() {
        let blob = [0, 0, 8, 1, 0, 0, 0, 3, 1, 9, 0];
        assert_eq!(parse_idx(&blob).unwrap(), IdxData::Labels(vec![1, 9, 0]));
        let bad = [0, 0, 8, 1, 0, 0, 0, 1, 10];
        assert!(matches!(parse_idx(&bad), Err(DataError::LabelOutOfRange(10))));
    }

    proptest! {
        #[test]
        fn byte_images_round_trip(bytes in proptest::collection::vec(any::<u8>(), 12)) {
            let data: Vec<f64> = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
            let t = Tensor::new(vec![3, 1, 2, 2], data).unwrap();
            let enc = encode_idx_images(&t).unwrap();
            let IdxData::Images(back) = parse_idx(&enc).unwrap() else { panic!() };
            prop_assert_eq!(back, t);
        }
    }
}
