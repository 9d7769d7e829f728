//! Seeded synthetic datasets: smooth blob images for pre-training,
//! rectangle-vs-ring images for classification, and the same shapes with
//! exact masks for segmentation.
//!
//! Shape sizes are given for 64px images and scale with `size`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Entry, TaskKind, MANIFEST_FILE};
use super::pgm::{write_pgm, GrayImage};
use crate::error::{Error, Result};

/// Rectangle side range (px at 64px).
pub const RECT_SIDE: (f64, f64) = (30.0, 40.0);
/// Ring outer radius and thickness ranges for classification.
pub const RING_RADIUS: (f64, f64) = (10.0, 16.0);
pub const RING_THICKNESS: (f64, f64) = (2.0, 4.0);
/// Segmentation rings are thicker so that most foreground pixels sit away
/// from a patch-scale edge.
pub const SEG_RING_RADIUS: (f64, f64) = (14.0, 20.0);
pub const SEG_RING_THICKNESS: (f64, f64) = (6.0, 9.0);

/// Width of the broad backdrop Gaussian under the pretraining blobs.
pub const BACKDROP_SIGMA: (f64, f64) = (40.0, 64.0);

const BACKGROUND: f64 = 0.1;
const NOISE: f64 = 0.05;
const SHAPE_LEVEL: f64 = 0.8;
const SHAPE_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { x0: f64, y0: f64, w: f64, h: f64 },
    Ring { cx: f64, cy: f64, outer: f64, inner: f64 },
}

impl Shape {
    /// Pixel centers inside the shape are foreground.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Rect { x0, y0, w, h } => px >= x0 && px < x0 + w && py >= y0 && py < y0 + h,
            Shape::Ring { cx, cy, outer, inner } => {
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                d <= outer && d >= inner
            }
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn random_rect<R: Rng>(rng: &mut R, size: usize) -> Shape {
    let s = size as f64 / 64.0;
    let w = uniform(rng, RECT_SIDE) * s;
    let h = uniform(rng, RECT_SIDE) * s;
    Shape::Rect {
        x0: rng.random_range(0.0..=(size as f64 - w)),
        y0: rng.random_range(0.0..=(size as f64 - h)),
        w,
        h,
    }
}

fn random_ring<R: Rng>(rng: &mut R, size: usize, radius: (f64, f64), thickness: (f64, f64)) -> Shape {
    let s = size as f64 / 64.0;
    let outer = uniform(rng, radius) * s;
    let inner = outer - uniform(rng, thickness) * s;
    let margin = outer + 1.0;
    Shape::Ring {
        cx: rng.random_range(margin..=(size as f64 - margin)),
        cy: rng.random_range(margin..=(size as f64 - margin)),
        outer,
        inner,
    }
}

fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// A sum of Gaussians: one broad backdrop centered anywhere within half an
/// image of the frame, plus 2-5 small bumps.
pub fn blob_image<R: Rng>(rng: &mut R, size: usize) -> Vec<u8> {
    let s = size as f64 / 64.0;
    let n = size as f64;
    // the backdrop gives every patch a gradient well above quantization
    // noise once targets are normalized per patch
    let mut blobs = vec![(
        rng.random_range(-n / 2.0..1.5 * n),
        rng.random_range(-n / 2.0..1.5 * n),
        rng.random_range(BACKDROP_SIGMA.0..BACKDROP_SIGMA.1) * s,
        rng.random_range(0.3..0.5),
    )];
    let base = rng.random_range(0.1..0.2);
    let count = rng.random_range(2..=5);
    for _ in 0..count {
        blobs.push((
            rng.random_range(0.0..n),
            rng.random_range(0.0..n),
            rng.random_range(5.0..14.0) * s,
            rng.random_range(0.1..0.35),
        ));
    }
    let mut v = vec![base; size * size];
    for y in 0..size {
        for x in 0..size {
            for &(cx, cy, sigma, amp) in &blobs {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                v[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    quantize(&v)
}

/// Noisy background with one bright shape; returns the image and its mask.
pub fn shape_image<R: Rng>(rng: &mut R, size: usize, shape: &Shape) -> (Vec<u8>, Vec<u8>) {
    let level = SHAPE_LEVEL + rng.random_range(-SHAPE_JITTER..=SHAPE_JITTER);
    let mut v = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let noise = rng.random_range(-NOISE..=NOISE);
            let inside = shape.contains(x, y);
            v.push(if inside { level } else { BACKGROUND } + noise);
            mask.push(if inside { 255 } else { 0 });
        }
    }
    (quantize(&v), mask)
}

/// Class 0 draws a rectangle, class 1 a ring.
pub fn classify_sample<R: Rng>(rng: &mut R, size: usize, class: usize) -> Vec<u8> {
    let shape = if class == 0 {
        random_rect(rng, size)
    } else {
        random_ring(rng, size, RING_RADIUS, RING_THICKNESS)
    };
    shape_image(rng, size, &shape).0
}

/// Alternates rectangles and thick rings; mask bytes are 0 or 255.
pub fn segment_sample<R: Rng>(rng: &mut R, size: usize, index: usize) -> (Vec<u8>, Vec<u8>) {
    let shape = if index.is_multiple_of(2) {
        random_rect(rng, size)
    } else {
        random_ring(rng, size, SEG_RING_RADIUS, SEG_RING_THICKNESS)
    };
    shape_image(rng, size, &shape)
}

fn save(path: &Path, size: usize, pixels: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_pgm(
        path,
        &GrayImage {
            width: size,
            height: size,
            pixels,
        },
    )
}

/// Writes `n` images (plus masks for segmentation) under `out` in the
/// directory layout `scan_and_validate` expects, and a `manifest.tsv`.
/// Classification labels alternate 0, 1, 0, ...
pub fn gen_synthetic(kind: TaskKind, n: usize, size: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if size < 32 {
        return Err(Error::Config(format!("synthetic images need at least 32px, got {size}")));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest::new(out, kind);
    for i in 0..n {
        let name = format!("img_{i:05}.pgm");
        let entry = match kind {
            TaskKind::Pretrain => {
                let image = PathBuf::from(&name);
                save(&out.join(&image), size, blob_image(&mut rng, size))?;
                Entry {
                    image,
                    label: None,
                    mask: None,
                }
            }
            TaskKind::Classify => {
                let class = i % 2;
                let image = PathBuf::from(class.to_string()).join(&name);
                save(&out.join(&image), size, classify_sample(&mut rng, size, class))?;
                Entry {
                    image,
                    label: Some(class),
                    mask: None,
                }
            }
            TaskKind::Segment => {
                let image = PathBuf::from("images").join(&name);
                let mask = PathBuf::from("masks").join(&name);
                let (px, m) = segment_sample(&mut rng, size, i);
                save(&out.join(&image), size, px)?;
                save(&out.join(&mask), size, m)?;
                Entry {
                    image,
                    label: None,
                    mask: Some(mask),
                }
            }
        };
        manifest.entries.push(entry);
    }
    // keep the manifest order identical to a directory scan
    manifest.entries.sort();
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
