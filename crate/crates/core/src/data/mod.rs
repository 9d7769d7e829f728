//! Image files, manifests, splits, synthetic corpora and in-memory loading.
//! No augmentation happens anywhere on these paths.

pub mod manifest;
pub mod pgm;
pub mod resize;
pub mod synth;

pub use manifest::{
    scan_and_validate, split, split_sizes, DatasetManifest, Entry, Rejection, ScanReport, SplitSpec, Splits,
    TaskKind, MANIFEST_FILE,
};
pub use pgm::{load_image, load_mask, read_pgm, write_image, write_pgm, GrayImage};
pub use resize::{resize_bilinear, resize_values};
pub use synth::gen_synthetic;

use crate::error::{Error, Result};
use crate::heads::{HeadDataset, Targets};
use crate::scalar::Scalar;

/// Every image of the manifest as `size * size` values in [0,1].
pub fn load_images<T: Scalar>(manifest: &DatasetManifest, size: usize) -> Result<Vec<Vec<T>>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let img = load_image::<T>(&manifest.image_path(e))?;
            Ok(resize_bilinear(&img, size)?.to_vec())
        })
        .collect()
}

fn load_mask_values<T: Scalar>(path: &std::path::Path, size: usize) -> Result<Vec<T>> {
    let m = load_mask(path)?;
    let vals: Vec<T> = m.pixels.iter().map(|&b| T::of(f64::from(b))).collect();
    if m.width == size && m.height == size {
        return Ok(vals);
    }
    let half = T::of(0.5);
    Ok(resize_values(&vals, m.height, m.width, size)
        .into_iter()
        .map(|v| if v >= half { T::one() } else { T::zero() })
        .collect())
}

/// Images plus labels or masks for a downstream task.
pub fn load_head_dataset<T: Scalar>(manifest: &DatasetManifest, size: usize) -> Result<HeadDataset<T>> {
    let images = load_images(manifest, size)?;
    let targets = match manifest.task {
        TaskKind::Classify => Targets::Labels(
            manifest
                .entries
                .iter()
                .map(|e| e.label.expect("validated classify manifest"))
                .collect(),
        ),
        TaskKind::Segment => Targets::Masks(
            manifest
                .entries
                .iter()
                .map(|e| load_mask_values(&manifest.mask_path(e).expect("validated segment manifest"), size))
                .collect::<Result<_>>()?,
        ),
        TaskKind::Pretrain => {
            return Err(Error::Config("a pretrain manifest has no downstream targets".into()))
        }
    };
    Ok(HeadDataset { size, images, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loaded_values_are_unit_range_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_synthetic(TaskKind::Segment, 3, 64, 1, dir.path()).unwrap();
        let a = load_head_dataset::<f32>(&m, 64).unwrap();
        let b = load_head_dataset::<f32>(&m, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        let Targets::Masks(masks) = &a.targets else { panic!() };
        assert!(masks.iter().flatten().all(|&v| v == 0.0 || v == 1.0));
        let small = load_head_dataset::<f32>(&m, 32).unwrap();
        assert_eq!(small.images[0].len(), 1024);
    }
}
