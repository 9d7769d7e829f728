//! ViT encoder over visible patches, lightweight decoder with a shared mask
//! token, and the masked reconstruction loss.

mod config;
pub mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ArchConfig, Preset};
use layers::{block, block_specs, init_store, linear, linear_specs, mask_token_spec, norm, norm_specs, ParamSpec};

use crate::checkpoint::{self, header_value};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::patch::{normalize_patch_rows, patchify_values, positional_embedding, MaskPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// eps inside the per-patch target normalization.
pub const TARGET_EPS: f64 = 1e-6;

pub const CHECKPOINT_KIND: &str = "mae";

/// Every backbone parameter with its shape and initializer.
pub fn param_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let (p2, e, dd) = (cfg.patch_dim(), cfg.enc_dim, cfg.dec_dim);
    let mut v = linear_specs("patch_embed", p2, e);
    for i in 0..cfg.enc_depth {
        v.extend(block_specs(&format!("encoder.blocks.{i:02}"), e, cfg.mlp_ratio));
    }
    v.extend(norm_specs("encoder.norm", e));
    v.extend(linear_specs("decoder.embed", e, dd));
    v.push(mask_token_spec("decoder.mask_token", dd));
    for i in 0..cfg.dec_depth {
        v.extend(block_specs(&format!("decoder.blocks.{i:02}"), dd, cfg.mlp_ratio));
    }
    v.extend(norm_specs("decoder.norm", dd));
    v.extend(linear_specs("decoder.pred", dd, p2));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel<T> {
    pub cfg: ArchConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> MaeModel<T> {
    /// Deterministic initialization: truncated-normal weights, zero biases,
    /// unit norm gains, normal mask token.
    pub fn init(cfg: ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cfg,
            params: init_store(&param_specs(&cfg), &mut rng),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn header(&self) -> checkpoint::Header {
        let mut h = self.cfg.to_header();
        h.insert("kind".into(), CHECKPOINT_KIND.into());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.header(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, params) = checkpoint::decode(bytes)?;
        Self::from_parts(&h, params)
    }

    fn from_parts(h: &checkpoint::Header, params: ParamStore<T>) -> Result<Self> {
        let kind = header_value(h, "kind")?;
        if kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND:?} checkpoint, found kind {kind:?}"
            )));
        }
        let cfg = ArchConfig::from_header(h)?;
        for spec in param_specs(&cfg) {
            let p = params
                .get(&spec.name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if p.shape != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    spec.name, p.shape, spec.shape
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load(path)?;
        Self::from_parts(&h, params)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        checkpoint::digest(&self.header(), &self.params)
    }

    pub fn cast<U: Scalar>(&self) -> MaeModel<U> {
        MaeModel {
            cfg: self.cfg,
            params: self.params.cast(),
        }
    }

    /// Mean reconstruction loss on one batch, with fresh bindings.
    pub fn loss(
        &self,
        images: &Tensor<T>,
        plans: &[MaskPlan],
        trainable: bool,
    ) -> Result<(Tensor<T>, Bound<T>)> {
        let bound = self.params.bind(trainable);
        let mae = Mae::new(&self.cfg, &bound);
        let latent = mae.encode(images, plans)?;
        let pred = mae.decode(&latent, plans)?;
        let loss = mae_loss(&pred, images, plans, &self.cfg, T::of(TARGET_EPS))?;
        Ok((loss, bound))
    }
}

/// Stacks single-channel images into a `[B, 1, H, W]` constant.
pub fn batch_images<T: Scalar>(images: &[&[T]], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.len() != size * size {
            return Err(Error::Config(format!(
                "image with {} pixels in a batch of {size}x{size}",
                img.len()
            )));
        }
        data.extend_from_slice(img);
    }
    Tensor::constant(&[images.len(), 1, size, size], data)
}

fn check_images<T: Scalar>(images: &Tensor<T>, cfg: &ArchConfig) -> Result<usize> {
    let s = cfg.patch.image_size;
    match *images.shape() {
        [b, 1, h, w] if h == s && w == s => Ok(b),
        _ => Err(Error::Config(format!(
            "images of shape {:?} do not match [B, 1, {s}, {s}]",
            images.shape()
        ))),
    }
}

/// `[B*N, P*P]` patch rows of every image in the batch.
fn batch_patches<T: Scalar>(images: &Tensor<T>, cfg: &ArchConfig) -> Result<Vec<T>> {
    let px = cfg.patch.num_pixels();
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks(px) {
        out.extend(patchify_values(img, &cfg.patch)?);
    }
    Ok(out)
}

fn check_plans(plans: &[MaskPlan], batch: usize, n: usize) -> Result<usize> {
    if plans.len() != batch {
        return Err(Error::Contract(format!(
            "{} mask plans for a batch of {batch}",
            plans.len()
        )));
    }
    let keep = plans[0].keep_count;
    for p in plans {
        if p.num_patches() != n {
            return Err(Error::Contract(format!(
                "mask plan covers {} patches, model has {n}",
                p.num_patches()
            )));
        }
        if p.keep_count != keep {
            return Err(Error::Contract(
                "mask plans in one batch must keep the same number of patches".into(),
            ));
        }
    }
    if keep == 0 {
        return Err(Error::Contract("mask plan leaves no visible patch".into()));
    }
    Ok(keep)
}

/// Forward view of a backbone over bound parameters.
pub struct Mae<'a, T: Scalar> {
    cfg: &'a ArchConfig,
    params: &'a Bound<T>,
}

impl<'a, T: Scalar> Mae<'a, T> {
    pub fn new(cfg: &'a ArchConfig, params: &'a Bound<T>) -> Self {
        Self { cfg, params }
    }

    /// Patch embedding plus positional embedding for all `N` patches,
    /// then selection of each plan's visible patches, encoder blocks and
    /// final norm. Returns `[B, keep, enc_dim]`.
    pub fn encode(&self, images: &Tensor<T>, plans: &[MaskPlan]) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let batch = check_images(images, cfg)?;
        let n = cfg.num_patches();
        let keep = check_plans(plans, batch, n)?;
        let e = cfg.enc_dim;

        let patches = Tensor::constant(&[batch * n, cfg.patch_dim()], batch_patches(images, cfg)?)?;
        let x = linear(&patches, self.params, "patch_embed")?
            .reshape(&[batch, n, e])?
            .add(&positional_embedding(n, e)?)?
            .reshape(&[batch * n, e])?;

        let idx: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.visible().iter().map(move |&k| b * n + k))
            .collect();
        let mut x = x.gather_rows(&idx)?;
        for i in 0..cfg.enc_depth {
            x = block(&x, self.params, &format!("encoder.blocks.{i:02}"), batch, keep, cfg.enc_heads)?;
        }
        norm(&x, self.params, "encoder.norm")?.reshape(&[batch, keep, e])
    }

    /// Decoder tokens in grid order with positional embeddings added, before
    /// any decoder block: projected visible tokens plus one mask token per
    /// masked patch. `[B*N, dec_dim]`.
    pub fn decoder_input(&self, latent: &Tensor<T>, plans: &[MaskPlan]) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let (n, dd) = (cfg.num_patches(), cfg.dec_dim);
        let (batch, keep) = match *latent.shape() {
            [b, k, e] if e == cfg.enc_dim => (b, k),
            _ => {
                return Err(Error::Contract(format!(
                    "latent shape {:?} is not [B, keep, {}]",
                    latent.shape(),
                    cfg.enc_dim
                )))
            }
        };
        if check_plans(plans, batch, n)? != keep {
            return Err(Error::Contract(format!(
                "latent holds {keep} tokens per sample, plans keep {}",
                plans[0].keep_count
            )));
        }
        let masked = n - keep;
        let visible = linear(&latent.reshape(&[batch * keep, cfg.enc_dim])?, self.params, "decoder.embed")?;
        let seq = if masked > 0 {
            let token = self.params.get("decoder.mask_token")?.reshape(&[1, dd])?;
            let fill = token.gather_rows(&vec![0; batch * masked])?;
            Tensor::concat(&[visible, fill], 0)?
        } else {
            visible
        };
        let idx: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| {
                p.restore_idx.iter().map(move |&r| {
                    if r < keep {
                        b * keep + r
                    } else {
                        batch * keep + b * masked + (r - keep)
                    }
                })
            })
            .collect();
        seq.gather_rows(&idx)?
            .reshape(&[batch, n, dd])?
            .add(&positional_embedding(n, dd)?)?
            .reshape(&[batch * n, dd])
    }

    /// Per-patch pixel predictions for every grid position, `[B, N, P*P]`.
    pub fn decode(&self, latent: &Tensor<T>, plans: &[MaskPlan]) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let n = cfg.num_patches();
        let batch = plans.len();
        let mut x = self.decoder_input(latent, plans)?;
        for i in 0..cfg.dec_depth {
            x = block(&x, self.params, &format!("decoder.blocks.{i:02}"), batch, n, cfg.dec_heads)?;
        }
        let x = norm(&x, self.params, "decoder.norm")?;
        linear(&x, self.params, "decoder.pred")?.reshape(&[batch, n, cfg.patch_dim()])
    }
}

/// Normalized per-patch targets for a batch, `[B, N, P*P]` values.
pub fn patch_targets<T: Scalar>(images: &Tensor<T>, cfg: &ArchConfig, eps: T) -> Result<Vec<T>> {
    Ok(normalize_patch_rows(&batch_patches(images, cfg)?, cfg.patch_dim(), eps))
}

/// Squared error averaged over pixels of each patch, then over the masked
/// patches of each sample, then over the batch. Visible patches carry zero
/// weight.
pub fn mae_loss<T: Scalar>(
    pred: &Tensor<T>,
    images: &Tensor<T>,
    plans: &[MaskPlan],
    cfg: &ArchConfig,
    eps: T,
) -> Result<Tensor<T>> {
    let batch = check_images(images, cfg)?;
    let (n, p2) = (cfg.num_patches(), cfg.patch_dim());
    if pred.shape() != [batch, n, p2] {
        return Err(Error::Contract(format!(
            "prediction shape {:?} is not [{batch}, {n}, {p2}]",
            pred.shape()
        )));
    }
    if plans.len() != batch {
        return Err(Error::Contract(format!(
            "{} mask plans for a batch of {batch}",
            plans.len()
        )));
    }
    let mut weights = Vec::with_capacity(batch * n);
    for p in plans {
        let masked = p.num_masked();
        if masked == 0 {
            return Err(Error::Contract(
                "reconstruction loss is undefined when no patch is masked".into(),
            ));
        }
        let w = T::one() / T::of((masked * batch) as f64);
        weights.extend(p.mask_flags.iter().map(|&f| if f == 1 { w } else { T::zero() }));
    }
    let target = Tensor::constant(&[batch, n, p2], patch_targets(images, cfg, eps)?)?;
    let diff = pred.sub(&target)?;
    let per_patch = diff.mul(&diff)?.mean_axis(2)?;
    Ok(per_patch.mul(&Tensor::constant(&[batch, n], weights)?)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::make_mask_plan;

    #[test]
    fn spec_enumeration_matches_closed_form() {
        for cfg in [ArchConfig::desk(), ArchConfig::vit_b(), ArchConfig::micro()] {
            let enumerated: usize = param_specs(&cfg).iter().map(ParamSpec::numel).sum();
            assert_eq!(enumerated, cfg.param_count());
        }
        let m = MaeModel::<f32>::init(ArchConfig::desk(), 0).unwrap();
        assert_eq!(m.num_params(), 252_544);
    }

    #[test]
    fn init_is_seeded_and_conventional() {
        let a = MaeModel::<f32>::init(ArchConfig::desk(), 7).unwrap();
        let b = MaeModel::<f32>::init(ArchConfig::desk(), 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = MaeModel::<f32>::init(ArchConfig::desk(), 8).unwrap();
        assert_ne!(a.digest(), c.digest());
        for (name, p) in a.params.iter() {
            if name.ends_with(".gain") {
                assert!(p.data.iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".offset") || name.ends_with(".bias") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with(".weight") {
                assert!(p.data.iter().all(|&v| v.abs() <= 0.04 + 1e-7), "{name}");
            }
        }
    }

    #[test]
    fn encode_shapes() {
        let cfg = ArchConfig {
            patch: crate::patch::PatchConfig::new(16, 4).unwrap(),
            ..ArchConfig::micro()
        };
        let m = MaeModel::<f64>::init(cfg, 1).unwrap();
        let bound = m.params.bind(false);
        let mae = Mae::new(&m.cfg, &bound);
        let imgs = Tensor::constant(&[2, 1, 16, 16], (0..512).map(|v| (v % 17) as f64 / 17.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plans: Vec<_> = (0..2).map(|_| make_mask_plan(16, 0.75, &mut rng).unwrap()).collect();
        let z = mae.encode(&imgs, &plans).unwrap();
        assert_eq!(z.shape(), &[2, 4, 8]);
        assert_eq!(mae.decode(&z, &plans).unwrap().shape(), &[2, 16, 16]);

        let full = vec![MaskPlan::identity(16), MaskPlan::identity(16)];
        assert_eq!(mae.encode(&imgs, &full).unwrap().shape(), &[2, 16, 8]);
    }

    #[test]
    fn plan_mismatch_is_a_contract_error() {
        let m = MaeModel::<f64>::init(ArchConfig::micro(), 1).unwrap();
        let bound = m.params.bind(false);
        let mae = Mae::new(&m.cfg, &bound);
        let imgs = Tensor::constant(&[1, 1, 8, 8], vec![0.5; 64]).unwrap();
        let plans = vec![MaskPlan::identity(9)];
        assert!(matches!(mae.encode(&imgs, &plans), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_rejects_unmasked_plans() {
        let m = MaeModel::<f64>::init(ArchConfig::micro(), 1).unwrap();
        let imgs = Tensor::constant(&[1, 1, 8, 8], vec![0.5; 64]).unwrap();
        let err = m.loss(&imgs, &[MaskPlan::identity(4)], false).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn wrong_kind_checkpoint_is_rejected() {
        let m = MaeModel::<f32>::init(ArchConfig::micro(), 1).unwrap();
        let mut h = m.header();
        h.insert("kind".into(), "head-linear".into());
        let bytes = checkpoint::encode(&h, &m.params);
        assert!(MaeModel::<f32>::from_bytes(&bytes).is_err());
    }
}
