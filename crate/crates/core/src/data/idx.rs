//! Loader for the IDX image/label file pair used by the MNIST family.
//!
//! Both headers are big-endian `u32` sequences: images carry magic
//! `0x00000803` followed by count, rows, and columns; labels carry magic
//! `0x00000801` followed by count. Pixel bytes are scaled to `[0, 1]` by
//! dividing by 255.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DataError, Dataset};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image file and its companion label file into a [`Dataset`]
/// with `image_shape = (rows, cols, 1)` and pixel values in `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let n_images = be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, images_path)? as usize;
    let expected = 16 + n_images * rows * cols;
    if img_bytes.len() < expected {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            expected,
            got: img_bytes.len(),
        });
    }

    let lab_bytes = read_file(labels_path)?;
    let magic = be_u32(&lab_bytes, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n_labels = be_u32(&lab_bytes, 4, labels_path)? as usize;
    let expected = 8 + n_labels;
    if lab_bytes.len() < expected {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            expected,
            got: lab_bytes.len(),
        });
    }
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let n_features = rows * cols;
    let mut inputs = Array2::zeros((n_images, n_features));
    for i in 0..n_images {
        let start = 16 + i * n_features;
        let src = &img_bytes[start..start + n_features];
        let mut row = inputs.row_mut(i);
        for (dst, &b) in row.iter_mut().zip(src) {
            *dst = b as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = lab_bytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(inputs, labels, n_classes.max(2), Some((rows, cols, 1)))
}
