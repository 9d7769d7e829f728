//! Image/patch-sequence conversion, random masking, fixed positional
//! embeddings and per-patch target normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{inverse_permutation, Tensor};

/// Square grayscale geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchConfig {
    pub fn new(image_size: usize, patch_size: usize) -> Result<Self> {
        let cfg = Self {
            image_size,
            patch_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Splits a row-major `image_size x image_size` image into `N` rows of
/// `P*P` values. Row `k` is grid cell `(k / G, k % G)`.
pub fn patchify_values<T: Scalar>(image: &[T], cfg: &PatchConfig) -> Result<Vec<T>> {
    if image.len() != cfg.num_pixels() {
        return Err(Error::Config(format!(
            "image has {} pixels, patch config expects {}x{}",
            image.len(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let (p, g, side) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                let row = (gy * p + y) * side + gx * p;
                out.extend_from_slice(&image[row..row + p]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify_values<T: Scalar>(patches: &[T], cfg: &PatchConfig) -> Result<Vec<T>> {
    if patches.len() != cfg.num_pixels() {
        return Err(Error::Config(format!(
            "{} patch values do not fill a {}x{} image",
            patches.len(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let (p, g, side) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut image = vec![T::zero(); patches.len()];
    for k in 0..g * g {
        let (gy, gx) = (k / g, k % g);
        for y in 0..p {
            let row = (gy * p + y) * side + gx * p;
            image[row..row + p].copy_from_slice(&patches[k * p * p + y * p..k * p * p + (y + 1) * p]);
        }
    }
    Ok(image)
}

/// `[1, H, W]` image tensor to `[N, P*P]` patch rows.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    let expected = [1, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(Error::Config(format!(
            "image shape {:?} does not match patch config {:?}",
            image.shape(),
            expected
        )));
    }
    Tensor::constant(
        &[cfg.num_patches(), cfg.patch_dim()],
        patchify_values(image.data(), cfg)?,
    )
}

pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    Tensor::constant(
        &[1, cfg.image_size, cfg.image_size],
        unpatchify_values(patches.data(), cfg)?,
    )
}

/// Per-sample split of the patch sequence into visible and masked sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub keep_count: usize,
    /// `shuffle_idx[i]` is the grid position placed at sequence slot `i`;
    /// the first `keep_count` slots are visible.
    pub shuffle_idx: Vec<usize>,
    pub restore_idx: Vec<usize>,
    /// 1 where the patch is masked.
    pub mask_flags: Vec<u8>,
}

/// `floor(n * (1 - ratio))`, tolerant of binary rounding just below an
/// integer.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    let exact = n as f64 * (1.0 - ratio);
    ((exact + 1e-9).floor() as usize).min(n)
}

impl MaskPlan {
    /// Nothing masked, sequence in grid order.
    pub fn identity(n: usize) -> Self {
        Self {
            ratio: 0.0,
            keep_count: n,
            shuffle_idx: (0..n).collect(),
            restore_idx: (0..n).collect(),
            mask_flags: vec![0; n],
        }
    }

    pub fn num_patches(&self) -> usize {
        self.shuffle_idx.len()
    }

    pub fn num_masked(&self) -> usize {
        self.num_patches() - self.keep_count
    }

    pub fn visible(&self) -> &[usize] {
        &self.shuffle_idx[..self.keep_count]
    }

    pub fn masked(&self) -> &[usize] {
        &self.shuffle_idx[self.keep_count..]
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.mask_flags[patch] == 1
    }
}

/// Draws a plan by argsorting `n` i.i.d. uniforms; the lowest
/// `keep_count` noise values stay visible.
pub fn make_mask_plan<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "mask ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut shuffle_idx: Vec<usize> = (0..n).collect();
    shuffle_idx.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]));
    let restore_idx = inverse_permutation(&shuffle_idx);
    let keep = keep_count(n, ratio);
    let mut mask_flags = vec![1u8; n];
    for &p in &shuffle_idx[..keep] {
        mask_flags[p] = 0;
    }
    Ok(MaskPlan {
        ratio,
        keep_count: keep,
        shuffle_idx,
        restore_idx,
        mask_flags,
    })
}

/// Fixed 2-D sine-cosine embedding over a `sqrt(n) x sqrt(n)` grid.
///
/// The first `d/2` channels encode the column, the last `d/2` the row; each
/// half is `[sin(pos * w_i), cos(pos * w_i)]` with `w_i = 10000^(-i/(d/4))`.
pub fn positional_embedding<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding dim must be a positive multiple of 4, got {d}"
        )));
    }
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || n == 0 {
        return Err(Error::Config(format!(
            "positional embedding needs a square patch count, got {n}"
        )));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for k in 0..n {
        let (row, col) = ((k / g) as f64, (k % g) as f64);
        for pos in [col, row] {
            data.extend(omega.iter().map(|w| T::of((pos * w).sin())));
            data.extend(omega.iter().map(|w| T::of((pos * w).cos())));
        }
    }
    Tensor::constant(&[n, d], data)
}

/// Standardizes each row: `(x - mean) / sqrt(var + eps)`, population
/// variance. Rows have `row_len` values.
pub fn normalize_patch_rows<T: Scalar>(patches: &[T], row_len: usize, eps: T) -> Vec<T> {
    let inv = T::one() / T::of(row_len as f64);
    let mut out = Vec::with_capacity(patches.len());
    for row in patches.chunks(row_len) {
        // a rounded mean would leave residue on constant rows
        if row.iter().all(|&x| x == row[0]) {
            out.extend(std::iter::repeat_n(T::zero(), row.len()));
            continue;
        }
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv;
        let denom = (var + eps).sqrt();
        if denom == T::zero() {
            out.extend(std::iter::repeat_n(T::zero(), row.len()));
        } else {
            out.extend(row.iter().map(|&x| (x - mean) / denom));
        }
    }
    out
}

/// Per-patch mean and `sqrt(var + eps)` of each row.
pub fn patch_stats<T: Scalar>(patches: &[T], row_len: usize, eps: T) -> Vec<(T, T)> {
    let inv = T::one() / T::of(row_len as f64);
    patches
        .chunks(row_len)
        .map(|row| {
            if row.iter().all(|&x| x == row[0]) {
                return (row[0], eps.sqrt());
            }
            let mean = row.iter().copied().sum::<T>() * inv;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv;
            (mean, (var + eps).sqrt())
        })
        .collect()
}

/// Tensor form of [`normalize_patch_rows`] for `[N, P*P]` patches.
pub fn normalize_patch_targets<T: Scalar>(patches: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let row = *patches.shape().last().unwrap();
    Tensor::constant(patches.shape(), normalize_patch_rows(patches.data(), row, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_zero_is_top_left_block() {
        let cfg = PatchConfig::new(4, 2).unwrap();
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = patchify_values(&img, &cfg).unwrap();
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn full_scale_geometry() {
        let cfg = PatchConfig::new(224, 16).unwrap();
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.patch_dim(), 256);
        let img = Tensor::<f32>::zeros(&[1, 224, 224]).unwrap();
        assert_eq!(patchify(&img, &cfg).unwrap().shape(), &[196, 256]);
    }

    #[test]
    fn config_errors() {
        assert!(PatchConfig::new(10, 3).is_err());
        let cfg = PatchConfig::new(4, 2).unwrap();
        let wrong = Tensor::<f32>::zeros(&[1, 6, 6]).unwrap();
        assert!(matches!(patchify(&wrong, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mask_plan_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = make_mask_plan(196, 0.75, &mut rng).unwrap();
        assert_eq!(plan.keep_count, 49);
        assert_eq!(plan.mask_flags.iter().filter(|&&f| f == 1).count(), 147);
        let plan = make_mask_plan(196, 0.0, &mut rng).unwrap();
        assert_eq!(plan.keep_count, 196);
        assert!(plan.mask_flags.iter().all(|&f| f == 0));
        assert!(matches!(make_mask_plan(10, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(make_mask_plan(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn keep_count_handles_rounding() {
        // 10 * (1 - 0.9) evaluates to 0.9999999999999998 in binary
        assert_eq!(keep_count(10, 0.9), 1);
        assert_eq!(keep_count(196, 0.75), 49);
        assert_eq!(keep_count(7, 0.5), 3);
    }

    #[test]
    fn masking_is_uniform_over_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let plan = make_mask_plan(8, 0.5, &mut rng).unwrap();
            for (c, &f) in counts.iter_mut().zip(&plan.mask_flags) {
                *c += f as usize;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "{freq}");
        }
    }

    #[test]
    fn positional_embedding_properties() {
        let pe = positional_embedding::<f64>(196, 64).unwrap();
        let rows: Vec<&[f64]> = pe.data().chunks(64).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-6, "rows {i} and {j} collide");
            }
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let again = positional_embedding::<f64>(196, 64).unwrap();
        assert_eq!(
            pe.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(positional_embedding::<f64>(196, 30), Err(Error::Config(_))));
        assert!(positional_embedding::<f64>(10, 8).is_err());
    }

    #[test]
    fn normalization_hand_cases() {
        assert_eq!(normalize_patch_rows(&[5.0f64, 5.0, 5.0, 5.0], 4, 1e-6), vec![0.0; 4]);
        assert_eq!(normalize_patch_rows(&[0.0f64, 2.0], 2, 0.0), vec![-1.0, 1.0]);
        assert_eq!(normalize_patch_rows(&[3.0f64, 3.0], 2, 0.0), vec![0.0, 0.0]);
    }
}
