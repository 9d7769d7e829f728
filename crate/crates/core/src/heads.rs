//! Downstream heads on top of the encoder: a linear classifier over
//! mean-pooled tokens and a transposed-convolution segmentation decoder over
//! the token grid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, header_usize, header_value, Header};
use crate::error::{Error, Result};
use crate::metrics::{argmax, f_score, ConfusionCounts};
use crate::model::layers::{init_store, linear_specs, Init, ParamSpec};
use crate::model::{batch_images, ArchConfig, Mae, MaeModel};
use crate::optim::{OptimConfig, RunLog, Trainer};
use crate::params::{Bound, ParamStore};
use crate::patch::MaskPlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LINEAR_KIND: &str = "head-linear";
pub const SEGMENT_KIND: &str = "head-segment";

/// Output channels of the four upsampling stages.
pub const SEG_CHANNELS: [usize; 4] = [256, 128, 64, 32];
/// Four 2x stages restore exactly this patch size.
pub const SEG_PATCH: usize = 16;
pub const MASK_THRESHOLD: f64 = 0.5;

/// Images per forward pass when extracting frozen features.
const FEATURE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Backbone frozen; only head parameters move.
    LinearProbe,
    FullFinetune,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TrainMode::LinearProbe),
            "full" => Ok(TrainMode::FullFinetune),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected linear or full)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::LinearProbe => "linear",
            TrainMode::FullFinetune => "full",
        })
    }
}

fn check_enc_dim(head_dim: usize, cfg: &ArchConfig) -> Result<()> {
    if head_dim != cfg.enc_dim {
        return Err(Error::Config(format!(
            "head expects {head_dim}-wide features, backbone produces {}",
            cfg.enc_dim
        )));
    }
    Ok(())
}

fn check_kind(h: &Header, kind: &str) -> Result<()> {
    let found = header_value(h, "kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found kind {found:?}")));
    }
    Ok(())
}

fn check_shapes<T: Scalar>(specs: &[ParamSpec], params: &ParamStore<T>) -> Result<()> {
    if specs.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "head checkpoint holds {} tensors, expected {}",
            params.len(),
            specs.len()
        )));
    }
    for s in specs {
        let p = params
            .get(&s.name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {}", s.name)))?;
        if p.shape != s.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                s.name, p.shape, s.shape
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeHead<T> {
    pub enc_dim: usize,
    pub num_classes: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> LinearProbeHead<T> {
    pub fn specs(enc_dim: usize, num_classes: usize) -> Vec<ParamSpec> {
        linear_specs("head.fc", enc_dim, num_classes)
    }

    pub fn new(enc_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            enc_dim,
            num_classes,
            params: init_store(&Self::specs(enc_dim, num_classes), &mut rng),
        })
    }

    /// `[B, E]` pooled features to `[B, K]` logits.
    pub fn logits(bound: &Bound<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        crate::model::layers::linear(features, bound, "head.fc")
    }

    pub fn header(&self) -> Header {
        let mut h = Header::new();
        h.insert("kind".into(), LINEAR_KIND.into());
        h.insert("enc_dim".into(), self.enc_dim.to_string());
        h.insert("num_classes".into(), self.num_classes.to_string());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.header(), &self.params)
    }

    fn from_parts(h: &Header, params: ParamStore<T>) -> Result<Self> {
        check_kind(h, LINEAR_KIND)?;
        let enc_dim = header_usize(h, "enc_dim")?;
        let num_classes = header_usize(h, "num_classes")?;
        check_shapes(&Self::specs(enc_dim, num_classes), &params)?;
        Ok(Self {
            enc_dim,
            num_classes,
            params,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, p) = checkpoint::decode(bytes)?;
        Self::from_parts(&h, p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, p) = checkpoint::load(path)?;
        Self::from_parts(&h, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationHead<T> {
    pub enc_dim: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SegmentationHead<T> {
    pub fn specs(enc_dim: usize) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let mut c_in = enc_dim;
        for (i, &c_out) in SEG_CHANNELS.iter().enumerate() {
            v.push(ParamSpec::new(format!("head.up.{i}.weight"), vec![c_in, c_out, 2, 2], Init::TruncNormal));
            v.push(ParamSpec::new(format!("head.up.{i}.bias"), vec![c_out], Init::Zeros));
            c_in = c_out;
        }
        v.extend(linear_specs("head.out", c_in, 1));
        v
    }

    pub fn new(enc_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            enc_dim,
            params: init_store(&Self::specs(enc_dim), &mut rng),
        }
    }

    /// `[B, E, G, G]` token grid to `[B, 1, 16G, 16G]` logits.
    pub fn logits(bound: &Bound<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = grid.clone();
        for (i, &c) in SEG_CHANNELS.iter().enumerate() {
            let bias = bound.get(&format!("head.up.{i}.bias"))?.reshape(&[c, 1, 1])?;
            x = x
                .conv_transpose2d(bound.get(&format!("head.up.{i}.weight"))?, 2)?
                .add(&bias)?
                .gelu();
        }
        let bias = bound.get("head.out.bias")?.reshape(&[1, 1, 1])?;
        x.conv1x1(bound.get("head.out.weight")?)?.add(&bias)
    }

    pub fn header(&self) -> Header {
        let mut h = Header::new();
        h.insert("kind".into(), SEGMENT_KIND.into());
        h.insert("enc_dim".into(), self.enc_dim.to_string());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.header(), &self.params)
    }

    fn from_parts(h: &Header, params: ParamStore<T>) -> Result<Self> {
        check_kind(h, SEGMENT_KIND)?;
        let enc_dim = header_usize(h, "enc_dim")?;
        check_shapes(&Self::specs(enc_dim), &params)?;
        Ok(Self { enc_dim, params })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, p) = checkpoint::decode(bytes)?;
        Self::from_parts(&h, p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, p) = checkpoint::load(path)?;
        Self::from_parts(&h, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead<T> {
    Linear(LinearProbeHead<T>),
    Segment(SegmentationHead<T>),
}

impl<T: Scalar> TaskHead<T> {
    pub fn params(&self) -> &ParamStore<T> {
        match self {
            TaskHead::Linear(h) => &h.params,
            TaskHead::Segment(h) => &h.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            TaskHead::Linear(h) => &mut h.params,
            TaskHead::Segment(h) => &mut h.params,
        }
    }

    pub fn enc_dim(&self) -> usize {
        match self {
            TaskHead::Linear(h) => h.enc_dim,
            TaskHead::Segment(h) => h.enc_dim,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TaskHead::Linear(h) => h.save(path),
            TaskHead::Segment(h) => h.save(path),
        }
    }
}

fn check_segmentable(cfg: &ArchConfig) -> Result<()> {
    if cfg.patch.patch_size != SEG_PATCH {
        return Err(Error::Unsupported(format!(
            "segmentation head needs patch size {SEG_PATCH} (four 2x upsampling stages), backbone uses {}",
            cfg.patch.patch_size
        )));
    }
    Ok(())
}

fn full_plans(batch: usize, n: usize) -> Vec<MaskPlan> {
    vec![MaskPlan::identity(n); batch]
}

/// Mean over all `N` encoder tokens with nothing masked, `[B, E]`.
pub fn pooled_features<T: Scalar>(mae: &Mae<'_, T>, cfg: &ArchConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let b = images.shape()[0];
    mae.encode(images, &full_plans(b, cfg.num_patches()))?.mean_axis(1)
}

/// Encoder tokens laid out row-major on the patch grid, `[B, E, G, G]`.
pub fn token_grid<T: Scalar>(mae: &Mae<'_, T>, cfg: &ArchConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let b = images.shape()[0];
    let g = cfg.patch.grid();
    mae.encode(images, &full_plans(b, cfg.num_patches()))?
        .transpose()?
        .reshape(&[b, cfg.enc_dim, g, g])
}

/// Class probabilities `[B, K]`.
pub fn classify_forward<T: Scalar>(
    images: &Tensor<T>,
    model: &MaeModel<T>,
    head: &LinearProbeHead<T>,
) -> Result<Tensor<T>> {
    check_enc_dim(head.enc_dim, &model.cfg)?;
    let bb = model.params.bind(false);
    let hb = head.params.bind(false);
    let feats = pooled_features(&Mae::new(&model.cfg, &bb), &model.cfg, images)?;
    LinearProbeHead::logits(&hb, &feats)?.softmax(1)
}

/// Foreground probabilities `[B, 1, H, W]`.
pub fn segment_forward<T: Scalar>(
    images: &Tensor<T>,
    model: &MaeModel<T>,
    head: &SegmentationHead<T>,
) -> Result<Tensor<T>> {
    check_segmentable(&model.cfg)?;
    check_enc_dim(head.enc_dim, &model.cfg)?;
    let bb = model.params.bind(false);
    let hb = head.params.bind(false);
    let grid = token_grid(&Mae::new(&model.cfg, &bb), &model.cfg, images)?;
    Ok(SegmentationHead::logits(&hb, &grid)?.sigmoid())
}

/// `1` where `p >= threshold`, else `0`.
pub fn binarize_mask<T: Scalar>(probs: &[T], threshold: f64) -> Vec<u8> {
    let t = T::of(threshold);
    probs.iter().map(|&p| u8::from(p >= t)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Labels(Vec<usize>),
    /// Per-image foreground masks with values in {0, 1}.
    Masks(Vec<Vec<T>>),
}

/// In-memory downstream dataset; images are `size * size` values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDataset<T> {
    pub size: usize,
    pub images: Vec<Vec<T>>,
    pub targets: Targets<T>,
}

impl<T: Scalar> HeadDataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let imgs: Vec<&[T]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        batch_images(&imgs, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy or micro f-score, measured on each batch before its update.
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadTrainReport {
    pub history: Vec<EpochRecord>,
    pub log: RunLog,
}

impl HeadTrainReport {
    /// `epoch<TAB>loss<TAB>metric` lines.
    pub fn render_history(&self) -> String {
        self.history
            .iter()
            .map(|r| format!("{}\t{:.6}\t{:.6}\n", r.epoch, r.loss, r.metric))
            .collect()
    }
}

/// Running train metric over one epoch.
#[derive(Default)]
struct Tally {
    correct: usize,
    seen: usize,
    conf: ConfusionCounts,
}

impl Tally {
    fn value(&self, seg: bool) -> f64 {
        if seg {
            f_score(&self.conf)
        } else if self.seen == 0 {
            0.0
        } else {
            self.correct as f64 / self.seen as f64
        }
    }
}

/// Loss of one batch from head logits; also feeds the epoch tally.
fn head_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Targets<T>,
    idx: &[usize],
    tally: &mut Tally,
) -> Result<Tensor<T>> {
    match targets {
        Targets::Labels(labels) => {
            let k = logits.shape()[1];
            let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            for (row, &l) in logits.data().chunks(k).zip(&lab) {
                tally.correct += usize::from(argmax(row) == l);
                tally.seen += 1;
            }
            logits.cross_entropy(&lab)
        }
        Targets::Masks(masks) => {
            let mut t = Vec::with_capacity(logits.len());
            for &i in idx {
                t.extend_from_slice(&masks[i]);
            }
            if t.len() != logits.len() {
                return Err(Error::Config(format!(
                    "mask holds {} pixels, head predicts {}",
                    t.len(),
                    logits.len()
                )));
            }
            for (&z, &y) in logits.data().iter().zip(&t) {
                let pred = z >= T::zero();
                let truth = y >= T::of(0.5);
                match (pred, truth) {
                    (true, true) => tally.conf.tp += 1,
                    (true, false) => tally.conf.fp += 1,
                    (false, true) => tally.conf.fn_ += 1,
                    (false, false) => tally.conf.tn += 1,
                }
            }
            logits.bce_with_logits(&t)
        }
    }
}

fn check_dataset<T: Scalar>(head: &TaskHead<T>, data: &HeadDataset<T>, cfg: &ArchConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("downstream dataset is empty".into()));
    }
    if data.size != cfg.patch.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0}, backbone expects {1}x{1}",
            data.size, cfg.patch.image_size
        )));
    }
    match (head, &data.targets) {
        (TaskHead::Linear(h), Targets::Labels(l)) => {
            if l.len() != data.len() {
                return Err(Error::Config(format!("{} labels for {} images", l.len(), data.len())));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= h.num_classes) {
                return Err(Error::Config(format!(
                    "label {bad} out of range for a {}-class head",
                    h.num_classes
                )));
            }
        }
        (TaskHead::Segment(_), Targets::Masks(m)) => {
            check_segmentable(cfg)?;
            if m.len() != data.len() {
                return Err(Error::Config(format!("{} masks for {} images", m.len(), data.len())));
            }
        }
        (TaskHead::Linear(_), Targets::Masks(_)) => {
            return Err(Error::Config("classification head given mask targets".into()))
        }
        (TaskHead::Segment(_), Targets::Labels(_)) => {
            return Err(Error::Config("segmentation head given class labels".into()))
        }
    }
    check_enc_dim(head.enc_dim(), cfg)
}

/// Backbone features for every image, computed once with frozen weights.
fn frozen_features<T: Scalar>(model: &MaeModel<T>, head: &TaskHead<T>, data: &HeadDataset<T>) -> Result<Vec<Vec<T>>> {
    let bound = model.params.bind(false);
    let mae = Mae::new(&model.cfg, &bound);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in all.chunks(FEATURE_CHUNK) {
        let images = data.batch(chunk)?;
        let f = match head {
            TaskHead::Linear(_) => pooled_features(&mae, &model.cfg, &images)?,
            TaskHead::Segment(_) => token_grid(&mae, &model.cfg, &images)?,
        };
        let per = f.len() / chunk.len();
        out.extend(f.data().chunks(per).map(<[T]>::to_vec));
    }
    Ok(out)
}

/// Trains `head` on `data`. In linear-probe mode the backbone is never
/// touched; in full fine-tuning both are updated jointly.
pub fn train_head<T: Scalar>(
    model: &mut MaeModel<T>,
    head: &mut TaskHead<T>,
    data: &HeadDataset<T>,
    mode: TrainMode,
    opts: &OptimConfig,
) -> Result<HeadTrainReport> {
    check_dataset(head, data, &model.cfg)?;
    let mut trainer = Trainer::new(opts.clone(), data.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seg = matches!(head, TaskHead::Segment(_));
    let cfg = model.cfg;
    let g = cfg.patch.grid();
    let mut history = Vec::with_capacity(opts.epochs);

    match mode {
        TrainMode::LinearProbe => {
            let feats = frozen_features(model, head, data)?;
            let per = feats[0].len();
            let feat_shape = |b: usize| if seg { vec![b, cfg.enc_dim, g, g] } else { vec![b, per] };
            let is_linear = !seg;
            for epoch in 0..opts.epochs {
                let mut tally = Tally::default();
                let loss = trainer.train_epoch(head.params_mut(), data.len(), &mut rng, |store, idx, _| {
                    let mut x = Vec::with_capacity(idx.len() * per);
                    for &i in idx {
                        x.extend_from_slice(&feats[i]);
                    }
                    let x = Tensor::constant(&feat_shape(idx.len()), x)?;
                    let hb = store.bind(true);
                    let logits = if is_linear {
                        LinearProbeHead::logits(&hb, &x)?
                    } else {
                        SegmentationHead::logits(&hb, &x)?
                    };
                    Ok((head_loss(&logits, &data.targets, idx, &mut tally)?, hb))
                })?;
                history.push(EpochRecord {
                    epoch,
                    loss,
                    metric: tally.value(seg),
                });
            }
        }
        TrainMode::FullFinetune => {
            let mut joint = model.params.clone();
            joint.absorb(head.params().clone())?;
            for epoch in 0..opts.epochs {
                let mut tally = Tally::default();
                let loss = trainer.train_epoch(&mut joint, data.len(), &mut rng, |store, idx, _| {
                    let bound = store.bind(true);
                    let mae = Mae::new(&cfg, &bound);
                    let images = data.batch(idx)?;
                    let logits = if seg {
                        SegmentationHead::logits(&bound, &token_grid(&mae, &cfg, &images)?)?
                    } else {
                        LinearProbeHead::logits(&bound, &pooled_features(&mae, &cfg, &images)?)?
                    };
                    Ok((head_loss(&logits, &data.targets, idx, &mut tally)?, bound))
                })?;
                history.push(EpochRecord {
                    epoch,
                    loss,
                    metric: tally.value(seg),
                });
            }
            *head.params_mut() = joint.split_prefix("head.");
            model.params = joint;
        }
    }
    Ok(HeadTrainReport {
        history,
        log: trainer.log,
    })
}

/// Argmax class per image.
pub fn predict_classes<T: Scalar>(
    model: &MaeModel<T>,
    head: &LinearProbeHead<T>,
    images: &[Vec<T>],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(FEATURE_CHUNK) {
        let refs: Vec<&[T]> = chunk.iter().map(Vec::as_slice).collect();
        let probs = classify_forward(&batch_images(&refs, model.cfg.patch.image_size)?, model, head)?;
        out.extend(probs.data().chunks(head.num_classes).map(argmax));
    }
    Ok(out)
}

/// Binary mask per image at the default threshold.
pub fn predict_masks<T: Scalar>(
    model: &MaeModel<T>,
    head: &SegmentationHead<T>,
    images: &[Vec<T>],
) -> Result<Vec<Vec<u8>>> {
    let px = model.cfg.patch.num_pixels();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(FEATURE_CHUNK) {
        let refs: Vec<&[T]> = chunk.iter().map(Vec::as_slice).collect();
        let probs = segment_forward(&batch_images(&refs, model.cfg.patch.image_size)?, model, head)?;
        out.extend(probs.data().chunks(px).map(|p| binarize_mask(p, MASK_THRESHOLD)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::PatchConfig;

    fn tiny_seg_cfg() -> ArchConfig {
        ArchConfig {
            patch: PatchConfig::new(32, 16).unwrap(),
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
        }
    }

    fn images(b: usize, s: usize) -> Tensor<f64> {
        Tensor::constant(&[b, 1, s, s], (0..b * s * s).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn classify_rows_are_distributions() {
        let m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let h = LinearProbeHead::new(8, 3, 1).unwrap();
        let p = classify_forward(&images(2, 8), &m, &h).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let mut h = LinearProbeHead::new(8, 4, 1).unwrap();
        for (_, p) in h.params.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let p = classify_forward(&images(1, 8), &m, &h).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn class_count_and_width_checks() {
        assert!(LinearProbeHead::<f32>::new(8, 1, 0).is_err());
        let m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let h = LinearProbeHead::new(16, 2, 0).unwrap();
        assert!(matches!(classify_forward(&images(1, 8), &m, &h), Err(Error::Config(_))));
    }

    #[test]
    fn segmentation_restores_resolution() {
        let m = MaeModel::<f64>::init(tiny_seg_cfg(), 0).unwrap();
        let h = SegmentationHead::new(8, 2);
        let p = segment_forward(&images(2, 32), &m, &h).unwrap();
        assert_eq!(p.shape(), &[2, 1, 32, 32]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn segmentation_rejects_other_patch_sizes() {
        let m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let h = SegmentationHead::new(8, 2);
        assert!(matches!(segment_forward(&images(1, 8), &m, &h), Err(Error::Unsupported(_))));
    }

    #[test]
    fn binarize_tie_is_foreground() {
        assert_eq!(binarize_mask(&[0.9f64, 0.5, 0.49], 0.5), vec![1, 1, 0]);
    }

    #[test]
    fn head_checkpoints_round_trip() {
        let h = LinearProbeHead::<f32>::new(8, 3, 5).unwrap();
        assert_eq!(LinearProbeHead::from_bytes(&h.to_bytes()).unwrap(), h);
        let s = SegmentationHead::<f32>::new(8, 5);
        assert_eq!(SegmentationHead::from_bytes(&s.to_bytes()).unwrap(), s);
        assert!(SegmentationHead::<f32>::from_bytes(&h.to_bytes()).is_err());
    }

    fn toy_classify(n: usize) -> HeadDataset<f64> {
        let images: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![if i % 2 == 0 { 0.1 } else { 0.9 }; 64])
            .collect();
        HeadDataset {
            size: 8,
            images,
            targets: Targets::Labels((0..n).map(|i| i % 2).collect()),
        }
    }

    #[test]
    fn linear_probe_freezes_backbone() {
        let mut m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let before = m.params.checksum();
        let mut head = TaskHead::Linear(LinearProbeHead::new(8, 2, 0).unwrap());
        let head_before = head.params().checksum();
        let mut opts = OptimConfig::head(3);
        opts.batch_size = 4;
        let r = train_head(&mut m, &mut head, &toy_classify(8), TrainMode::LinearProbe, &opts).unwrap();
        assert_eq!(r.history.len(), 3);
        assert_eq!(m.params.checksum(), before);
        assert_ne!(head.params().checksum(), head_before);
    }

    #[test]
    fn full_finetune_moves_backbone() {
        let mut m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let before = m.params.checksum();
        let mut head = TaskHead::Linear(LinearProbeHead::new(8, 2, 0).unwrap());
        let mut opts = OptimConfig::head(1);
        opts.batch_size = 4;
        train_head(&mut m, &mut head, &toy_classify(8), TrainMode::FullFinetune, &opts).unwrap();
        assert_ne!(m.params.checksum(), before);
        assert_eq!(head.params().len(), 2);
        assert!(!m.params.contains("head.fc.weight"));
    }

    #[test]
    fn dataset_mismatches_are_config_errors() {
        let mut m = MaeModel::<f64>::init(ArchConfig::micro(), 0).unwrap();
        let mut head = TaskHead::Linear(LinearProbeHead::new(8, 2, 0).unwrap());
        let opts = OptimConfig::head(1);
        let mut empty = toy_classify(0);
        assert!(matches!(
            train_head(&mut m, &mut head, &empty, TrainMode::LinearProbe, &opts),
            Err(Error::Config(_))
        ));
        empty = toy_classify(2);
        empty.targets = Targets::Masks(vec![vec![0.0; 64]; 2]);
        assert!(matches!(
            train_head(&mut m, &mut head, &empty, TrainMode::LinearProbe, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn segmentation_probe_runs() {
        let mut m = MaeModel::<f32>::init(tiny_seg_cfg(), 0).unwrap();
        let before = m.params.checksum();
        let mut head = TaskHead::Segment(SegmentationHead::new(8, 0));
        let images: Vec<Vec<f32>> = (0..4).map(|i| vec![i as f32 / 4.0; 1024]).collect();
        let masks: Vec<Vec<f32>> = images.iter().map(|im| im.iter().map(|&v| f32::from(v > 0.3)).collect()).collect();
        let data = HeadDataset {
            size: 32,
            images,
            targets: Targets::Masks(masks),
        };
        let mut opts = OptimConfig::head(2);
        opts.batch_size = 2;
        let r = train_head(&mut m, &mut head, &data, TrainMode::LinearProbe, &opts).unwrap();
        assert!(r.history.iter().all(|e| e.loss.is_finite()));
        assert_eq!(m.params.checksum(), before);
    }
}
