//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32x32 planes in row-major order.

use super::{DataError, Dataset};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = PIXELS + 1;

pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() % RECORD != 0 {
        return Err(DataError::RecordLength(bytes.len()));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for record in bytes.chunks_exact(RECORD) {
        if record[0] > 9 {
            return Err(DataError::LabelOutOfRange(record[0]));
        }
        labels.push(record[0] as usize);
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::new(vec![n, 3, SIDE, SIDE], data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_black_record() {
        let mut bytes = vec![0u8; RECORD];
        bytes[0] = 3;
        let d = parse_cifar10_bin(&bytes).unwrap();
        assert_eq!(d.labels, vec![3]);
        assert_eq!(d.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(d.images.max_abs(), 0.0);
    }

    #[test]
    fn plane_order_is_rgb() {
        let mut bytes = vec![0u8; RECORD];
        bytes[1] = 255; // red plane, pixel (0, 0)
        bytes[1 + 1024 + 33] = 51; // green plane, pixel (1, 1)
        let d = parse_cifar10_bin(&bytes).unwrap();
        assert_eq!(d.images.data()[0], 1.0);
        assert_eq!(d.images.data()[1024 + 33], 0.2);
    }

    #[test]
    fn empty_stream() {
        assert!(parse_cifar10_bin(&[]).unwrap().is_empty());
    }

    #[test]
    fn bad_length() {
        assert!(matches!(
            parse_cifar10_bin(&vec![0u8; 3074]),
            Err(DataError::RecordLength(3074))
        ));
    }

    #[test]
    fn bad_label() {
        let mut bytes = vec![0u8; RECORD];
        bytes[0] = 10;
        assert!(matches!(parse_cifar10_bin(&bytes), Err(DataError::LabelOutOfRange(10))));
    }
}
