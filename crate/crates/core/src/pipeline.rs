//! End-to-end workflows shared by the command line and the tests:
//! masked pre-training over an in-memory corpus and the reconstruction demo.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{batch_images, mae_loss, Mae, MaeModel, TARGET_EPS};
use crate::optim::{OptimConfig, RunLog, Trainer};
use crate::patch::{keep_count, make_mask_plan, patch_stats, patchify_values, unpatchify_values};
use crate::scalar::Scalar;

/// Gray level written over masked patches.
pub const MASK_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub log: RunLog,
    pub epoch_losses: Vec<f64>,
}

/// Masked pre-training. Mask plans are drawn per sample from the run's
/// seeded generator. `on_epoch(epoch, mean_loss, model)` runs after every
/// epoch, e.g. to write checkpoints.
pub fn pretrain<T, F>(
    model: &mut MaeModel<T>,
    images: &[Vec<T>],
    mask_ratio: f64,
    opts: &OptimConfig,
    mut on_epoch: F,
) -> Result<PretrainReport>
where
    T: Scalar,
    F: FnMut(usize, f64, &MaeModel<T>) -> Result<()>,
{
    let n = model.cfg.num_patches();
    if keep_count(n, mask_ratio) == 0 || keep_count(n, mask_ratio) == n {
        return Err(Error::Config(format!(
            "mask ratio {mask_ratio} must leave at least one visible and one masked patch of {n}"
        )));
    }
    let size = model.cfg.patch.image_size;
    let mut trainer = Trainer::new(opts.clone(), images.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let cfg = model.cfg;
    for epoch in 0..opts.epochs {
        let loss = trainer.train_epoch(&mut model.params, images.len(), &mut rng, |store, idx, rng| {
            let refs: Vec<&[T]> = idx.iter().map(|&i| images[i].as_slice()).collect();
            let batch = batch_images(&refs, size)?;
            let plans = idx
                .iter()
                .map(|_| make_mask_plan(n, mask_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            let bound = store.bind(true);
            let mae = Mae::new(&cfg, &bound);
            let pred = mae.decode(&mae.encode(&batch, &plans)?, &plans)?;
            Ok((mae_loss(&pred, &batch, &plans, &cfg, T::of(TARGET_EPS))?, bound))
        })?;
        epoch_losses.push(loss);
        on_epoch(epoch, loss, model)?;
    }
    Ok(PretrainReport {
        log: trainer.log,
        epoch_losses,
    })
}

/// The three images of the reconstruction demo, as bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconstruction {
    pub original: Vec<u8>,
    /// Masked patches painted mid-gray.
    pub masked: Vec<u8>,
    /// Visible patches copied from the original, masked patches from the
    /// de-normalized prediction.
    pub reconstruction: Vec<u8>,
    pub masked_patches: usize,
}

/// Masks `image` (`size * size` bytes) with a plan drawn from `seed` and
/// reconstructs it.
pub fn reconstruct<T: Scalar>(model: &MaeModel<T>, image: &[u8], mask_ratio: f64, seed: u64) -> Result<Reconstruction> {
    let cfg = &model.cfg;
    let size = cfg.patch.image_size;
    if image.len() != size * size {
        return Err(Error::Config(format!(
            "image has {} pixels, model expects {size}x{size}",
            image.len()
        )));
    }
    let n = cfg.num_patches();
    let p2 = cfg.patch_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = make_mask_plan(n, mask_ratio, &mut rng)?;
    if plan.keep_count == 0 {
        return Err(Error::Config(format!("mask ratio {mask_ratio} hides every patch")));
    }

    let values = crate::data::pgm::to_unit::<T>(image);
    let patches = patchify_values(&values, &cfg.patch)?;
    let byte_patches = patchify_values(&image.iter().map(|&b| T::of(f64::from(b))).collect::<Vec<_>>(), &cfg.patch)?;

    let pred = if plan.num_masked() > 0 {
        let bound = model.params.bind(false);
        let mae = Mae::new(cfg, &bound);
        let batch = batch_images(&[values.as_slice()], size)?;
        let plans = [plan.clone()];
        mae.decode(&mae.encode(&batch, &plans)?, &plans)?.to_vec()
    } else {
        Vec::new()
    };
    let stats = patch_stats(&patches, p2, T::of(TARGET_EPS));

    let mut masked = Vec::with_capacity(n * p2);
    let mut recon = Vec::with_capacity(n * p2);
    for k in 0..n {
        let src = &byte_patches[k * p2..(k + 1) * p2];
        if plan.is_masked(k) {
            masked.extend(std::iter::repeat_n(T::of(f64::from(MASK_GRAY)), p2));
            let (mean, std) = stats[k];
            recon.extend(pred[k * p2..(k + 1) * p2].iter().map(|&v| {
                let px = (v * std + mean).as_f64().clamp(0.0, 1.0);
                T::of((px * 255.0).round())
            }));
        } else {
            masked.extend_from_slice(src);
            recon.extend_from_slice(src);
        }
    }
    let to_bytes = |p: Vec<T>| -> Result<Vec<u8>> {
        Ok(unpatchify_values(&p, &cfg.patch)?
            .into_iter()
            .map(|v| v.as_f64() as u8)
            .collect())
    };
    Ok(Reconstruction {
        original: image.to_vec(),
        masked: to_bytes(masked)?,
        reconstruction: to_bytes(recon)?,
        masked_patches: plan.num_masked(),
    })
}
