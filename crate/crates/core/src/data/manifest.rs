use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use super::pgm::{decode_pgm, GrayImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Pretrain,
    Classify,
    Segment,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TaskKind::Pretrain),
            "classify" => Ok(TaskKind::Classify),
            "segment" => Ok(TaskKind::Segment),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected pretrain, classify or segment)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Pretrain => "pretrain",
            TaskKind::Classify => "classify",
            TaskKind::Segment => "segment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Entry {
    /// Relative to the manifest root.
    pub image: PathBuf,
    pub label: Option<usize>,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub task: TaskKind,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, task: TaskKind) -> Self {
        Self {
            root: root.into(),
            task,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, e: &Entry) -> PathBuf {
        self.root.join(&e.image)
    }

    pub fn mask_path(&self, e: &Entry) -> Option<PathBuf> {
        e.mask.as_ref().map(|m| self.root.join(m))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            let ok = match self.task {
                TaskKind::Pretrain => e.label.is_none() && e.mask.is_none(),
                TaskKind::Classify => e.label.is_some() && e.mask.is_none(),
                TaskKind::Segment => e.label.is_none() && e.mask.is_some(),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "entry {} does not fit a {} manifest",
                    e.image.display(),
                    self.task
                )));
            }
            if !seen.insert(&e.image) {
                return Err(Error::Config(format!("duplicate image {}", e.image.display())));
            }
        }
        Ok(())
    }

    /// `image_path[<TAB>label_or_mask_path]` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.image.to_string_lossy());
            if let Some(l) = e.label {
                s.push('\t');
                s.push_str(&l.to_string());
            }
            if let Some(m) = &e.mask {
                s.push('\t');
                s.push_str(&m.to_string_lossy());
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, task: TaskKind) -> Result<Self> {
        let mut m = Self::new(root, task);
        for (no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let image = PathBuf::from(cols.next().unwrap_or_default());
            let extra = cols.next();
            if cols.next().is_some() {
                return Err(Error::Config(format!("manifest line {}: too many columns", no + 1)));
            }
            let (label, mask) = match (task, extra) {
                (TaskKind::Pretrain, None) => (None, None),
                (TaskKind::Classify, Some(l)) => (
                    Some(l.parse().map_err(|_| {
                        Error::Config(format!("manifest line {}: bad label {l:?}", no + 1))
                    })?),
                    None,
                ),
                (TaskKind::Segment, Some(p)) => (None, Some(PathBuf::from(p))),
                _ => {
                    return Err(Error::Config(format!(
                        "manifest line {} does not fit a {task} manifest",
                        no + 1
                    )))
                }
            };
            m.entries.push(Entry { image, label, mask });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path, task: TaskKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, root, task)
    }

    /// Largest label plus one, for classification manifests.
    pub fn num_classes(&self) -> usize {
        self.entries.iter().filter_map(|e| e.label).max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    pub rejections: Vec<Rejection>,
    pub warnings: Vec<String>,
}

impl ScanReport {
    /// `path<TAB>reason` lines.
    pub fn render_rejections(&self) -> String {
        self.rejections
            .iter()
            .map(|r| format!("{}\t{}\n", r.path.display(), r.reason))
            .collect()
    }
}

fn is_pgm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// `.pgm` files below `dir`, sorted lexicographically per directory level.
fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in WalkDir::new(dir).sort_by_file_name() {
        let item = item.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk failed")))
        })?;
        if item.file_type().is_file() && is_pgm(item.path()) {
            out.push(item.into_path());
        }
    }
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|d| d.ok())
        .map(|d| d.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn check_image(path: &Path) -> std::result::Result<GrayImage, String> {
    let bytes = fs::read(path).map_err(|e| format!("unreadable: {e}"))?;
    decode_pgm(&bytes)
}

fn relative(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).unwrap_or(p).to_path_buf()
}

/// Walks `root` in lexicographic order and keeps every parseable image.
///
/// Layouts: pretrain takes every `.pgm` below the root; classify expects one
/// subdirectory per class named by its index; segment expects `images/` and
/// `masks/` with matching file names.
pub fn scan_and_validate(root: &Path, task: TaskKind) -> Result<ScanReport> {
    fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = DatasetManifest::new(root, task);
    let mut rejections = Vec::new();
    let mut warnings = Vec::new();
    let mut reject = |p: &Path, reason: String| {
        rejections.push(Rejection {
            path: relative(root, p),
            reason,
        })
    };

    match task {
        TaskKind::Pretrain => {
            for p in pgm_files(root)? {
                match check_image(&p) {
                    Ok(_) => manifest.entries.push(Entry {
                        image: relative(root, &p),
                        label: None,
                        mask: None,
                    }),
                    Err(r) => reject(&p, r),
                }
            }
        }
        TaskKind::Classify => {
            for dir in sorted_subdirs(root)? {
                let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let Ok(label) = name.parse::<usize>() else {
                    warnings.push(format!("skipping directory {name:?}: not a class index"));
                    continue;
                };
                for p in pgm_files(&dir)? {
                    match check_image(&p) {
                        Ok(_) => manifest.entries.push(Entry {
                            image: relative(root, &p),
                            label: Some(label),
                            mask: None,
                        }),
                        Err(r) => reject(&p, r),
                    }
                }
            }
        }
        TaskKind::Segment => {
            let (images, masks) = (root.join("images"), root.join("masks"));
            if !images.is_dir() || !masks.is_dir() {
                return Err(Error::Config(format!(
                    "segmentation data at {} needs images/ and masks/ subdirectories",
                    root.display()
                )));
            }
            for p in pgm_files(&images)? {
                let mask = masks.join(relative(&images, &p));
                let img = match check_image(&p) {
                    Ok(g) => g,
                    Err(r) => {
                        reject(&p, r);
                        continue;
                    }
                };
                if !mask.is_file() {
                    reject(&p, "no matching mask".into());
                    continue;
                }
                match check_image(&mask) {
                    Ok(m) if (m.width, m.height) == (img.width, img.height) => manifest.entries.push(Entry {
                        image: relative(root, &p),
                        label: None,
                        mask: Some(relative(root, &mask)),
                    }),
                    Ok(m) => reject(
                        &p,
                        format!(
                            "mask is {}x{}, image is {}x{}",
                            m.width, m.height, img.width, img.height
                        ),
                    ),
                    Err(r) => reject(&mask, r),
                }
            }
        }
    }
    if manifest.is_empty() {
        warnings.push(format!("no usable images found under {}", root.display()));
    }
    Ok(ScanReport {
        manifest,
        rejections,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(Error::Config(format!("split ratios must be positive: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Sizes of the three parts: floor each share, then hand the leftover items
/// one at a time to the parts in order of decreasing ratio (ties by
/// position), skipping parts whose exact share was already whole.
pub fn split_sizes(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..3).filter(|&i| exact[i] - sizes[i] as f64 > 1e-9).collect();
    order.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(left) {
        sizes[i] += 1;
    }
    left = n.saturating_sub(sizes.iter().sum());
    sizes[0] += left;
    sizes
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Seeded permutation cut into contiguous train/val/test slices.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Config("cannot split an empty manifest".into()));
    }
    let sizes = split_sizes(manifest.len(), &spec.ratios);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut parts = Vec::with_capacity(3);
    let mut warnings = Vec::new();
    let mut start = 0;
    for (name, &size) in ["train", "val", "test"].iter().zip(&sizes) {
        if size == 0 {
            warnings.push(format!("{name} split is empty"));
        }
        let mut m = DatasetManifest::new(manifest.root.clone(), manifest.task);
        m.entries = order[start..start + size]
            .iter()
            .map(|&i| manifest.entries[i].clone())
            .collect();
        parts.push(m);
        start += size;
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits {
        train,
        val,
        test,
        warnings,
    })
}
