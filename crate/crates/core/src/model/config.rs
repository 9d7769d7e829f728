use std::fmt;
use std::str::FromStr;

use crate::checkpoint::{header_usize, Header};
use crate::error::{Error, Result};
use crate::patch::PatchConfig;

/// Encoder/decoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub patch: PatchConfig,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 64px images, runs in minutes on one core.
    Desk,
    /// 224px ViT-B/16 encoder with a 512-wide, 8-deep decoder.
    VitB,
    /// 8px images, 4px patches, 8-wide layers; used for gradient checks.
    Micro,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "vit-b" => Ok(Preset::VitB),
            "micro" => Ok(Preset::Micro),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk, vit-b or micro)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::VitB => "vit-b",
            Preset::Micro => "micro",
        })
    }
}

impl ArchConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                patch: PatchConfig {
                    image_size: 64,
                    patch_size: 16,
                },
                enc_dim: 64,
                enc_depth: 4,
                enc_heads: 4,
                dec_dim: 32,
                dec_depth: 2,
                dec_heads: 4,
                mlp_ratio: 4,
            },
            Preset::VitB => Self {
                patch: PatchConfig {
                    image_size: 224,
                    patch_size: 16,
                },
                enc_dim: 768,
                enc_depth: 12,
                enc_heads: 12,
                dec_dim: 512,
                dec_depth: 8,
                dec_heads: 16,
                mlp_ratio: 4,
            },
            Preset::Micro => Self {
                patch: PatchConfig {
                    image_size: 8,
                    patch_size: 4,
                },
                enc_dim: 8,
                enc_depth: 1,
                enc_heads: 2,
                dec_dim: 8,
                dec_depth: 1,
                dec_heads: 2,
                mlp_ratio: 4,
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn vit_b() -> Self {
        Self::preset(Preset::VitB)
    }

    pub fn micro() -> Self {
        Self::preset(Preset::Micro)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        for (what, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{what} width {dim} is not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "{what} width {dim} must be a multiple of 4 for 2-D sin-cos embeddings"
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.patch.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.patch_dim()
    }

    /// Closed-form parameter count. A pre-norm block of width `d` with MLP
    /// hidden width `r*d` holds `(4 + 2r) d^2 + (9 + r) d` scalars
    /// (two norms, qkv, projection, two MLP layers).
    pub fn param_count(&self) -> usize {
        let block = |d: usize| {
            let r = self.mlp_ratio;
            (4 + 2 * r) * d * d + (9 + r) * d
        };
        let (p2, e, dd) = (self.patch_dim(), self.enc_dim, self.dec_dim);
        (p2 * e + e)
            + self.enc_depth * block(e)
            + 2 * e
            + (e * dd + dd)
            + dd
            + self.dec_depth * block(dd)
            + 2 * dd
            + (dd * p2 + p2)
    }

    pub fn to_header(&self) -> Header {
        let mut h = Header::new();
        for (k, v) in [
            ("dec_depth", self.dec_depth),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("enc_depth", self.enc_depth),
            ("enc_dim", self.enc_dim),
            ("enc_heads", self.enc_heads),
            ("image_size", self.patch.image_size),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch.patch_size),
        ] {
            h.insert(k.to_string(), v.to_string());
        }
        h
    }

    pub fn from_header(h: &Header) -> Result<Self> {
        let cfg = Self {
            patch: PatchConfig {
                image_size: header_usize(h, "image_size")?,
                patch_size: header_usize(h, "patch_size")?,
            },
            enc_dim: header_usize(h, "enc_dim")?,
            enc_depth: header_usize(h, "enc_depth")?,
            enc_heads: header_usize(h, "enc_heads")?,
            dec_dim: header_usize(h, "dec_dim")?,
            dec_depth: header_usize(h, "dec_depth")?,
            dec_heads: header_usize(h, "dec_heads")?,
            mlp_ratio: header_usize(h, "mlp_ratio")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::VitB, Preset::Micro] {
            ArchConfig::preset(p).validate().unwrap();
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn documented_parameter_counts() {
        assert_eq!(ArchConfig::desk().param_count(), 252_544);
        assert_eq!(ArchConfig::vit_b().param_count(), 110_999_040);
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let mut cfg = ArchConfig::desk();
        cfg.enc_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn header_round_trip() {
        let cfg = ArchConfig::vit_b();
        assert_eq!(ArchConfig::from_header(&cfg.to_header()).unwrap(), cfg);
    }
}
