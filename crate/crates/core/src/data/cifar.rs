//! CIFAR-10 binary batches: fixed 3073-byte records, one label byte then
//! the red, green and blue 32x32 planes.

use std::fs;
use std::path::Path;

use super::{Dataset, CHANNELS};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = CHANNELS * SIDE * SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + PIXELS;
const NUM_CLASSES: usize = 10;

const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

/// Concatenates the records of every file in `paths`, in order. Pixels are
/// scaled by `1/255`.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            bail!(
                Format,
                "{}: {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                path.display(),
                bytes.len()
            );
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = record[0] as usize;
            if label >= NUM_CLASSES {
                bail!(Format, "{}: record {r} has label byte {label}", path.display());
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        bail!(Format, "no CIFAR-10 records found");
    }
    let images = Tensor::new(vec![labels.len(), CHANNELS, SIDE, SIDE], pixels)?;
    Ok(Dataset::new(images, labels, NUM_CLASSES)?
        .with_class_names(CLASS_NAMES.iter().map(|s| s.to_string()).collect()))
}

/// Writes `dataset` in the CIFAR-10 record layout. Pixels are quantized with
/// `round(255 * v)`, so a loaded file round-trips bit-exactly.
pub fn write_cifar10_bin(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.image_size() != SIDE {
        bail!(Format, "CIFAR-10 records hold 32x32 images, dataset has {0}x{0}", dataset.image_size());
    }
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for (i, &label) in dataset.labels().iter().enumerate() {
        if label >= NUM_CLASSES {
            bail!(Format, "label {label} does not fit a CIFAR-10 record");
        }
        bytes.push(label as u8);
        bytes.extend(
            dataset
                .image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
