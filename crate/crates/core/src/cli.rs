//! `maekit` command line: pre-training, the two downstream heads, the
//! reconstruction demo, the gradient-check suite and synthetic data.
//!
//! Every subcommand accepts `--config FILE` with `key = value` lines using
//! the long flag names; flags given on the command line win. Runs write
//! the fully resolved settings to `config.txt` in their output directory,
//! in the same format, so `--config out/config.txt` replays a run.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or data error, 3 numeric
//! abort during training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    gen_synthetic, load_head_dataset, load_images, read_pgm, scan_and_validate, split, write_pgm, DatasetManifest,
    GrayImage, SplitSpec, TaskKind,
};
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::heads::{
    predict_classes, predict_masks, train_head, HeadDataset, LinearProbeHead, SegmentationHead, TaskHead, Targets,
    TrainMode,
};
use crate::metrics::{accuracy, f_score, segmentation_confusion, MetricsReport};
use crate::model::{ArchConfig, MaeModel, Preset};
use crate::optim::{OptimConfig, ScheduleKind};
use crate::pipeline::{pretrain, reconstruct};
use crate::tensor::inject_backward_fault;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MAEKIT_OUT";
pub const CONFIG_FILE: &str = "config.txt";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "maekit", version, about = "Masked-autoencoder pre-training for grayscale images")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Masked-autoencoder pre-training on a directory of images.
    Pretrain(PretrainArgs),
    /// Train a classification head on a frozen or fine-tuned backbone.
    Probe(ProbeArgs),
    /// Train the transposed-convolution segmentation head.
    Segment(SegmentArgs),
    /// Mask an image and write original, masked and reconstructed views.
    Reconstruct(ReconstructArgs),
    /// Finite-difference check of every backward rule, in double precision.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic dataset.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct PretrainArgs {
    /// Image directory; every .pgm below it is used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Defaults to 8 for desk and 64 for vit-b.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Defaults to 5% of the epochs.
    #[arg(long)]
    warmup_epochs: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value = "cosine")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key = value` file with defaults for any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Flags shared by the two head commands.
#[derive(Debug, Args)]
struct HeadArgs {
    /// Backbone checkpoint written by `pretrain`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate on this directory and train on all of `--data` instead of
    /// splitting `--data` 70/15/15.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    mode: TrainMode,
    /// Defaults to 30 for probe and 40 for segment.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value = "constant")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the train/val/test permutation.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ProbeArgs {
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    #[command(flatten)]
    head: HeadArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SegmentArgs {
    #[command(flatten)]
    head: HeadArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// P5 image with exactly the backbone's input size.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: scale the gradients of this op's backward rule.
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct GenArgs {
    #[arg(long)]
    kind: TaskKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericAbort { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Parses a `key = value` file. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("config line {}: expected key = value", no + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices the config file's values in front of the explicit flags so the
/// flags override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (k, v) in parse_config(&text)? {
        if k == "config" {
            continue;
        }
        injected.push(format!("--{k}"));
        injected.push(v);
    }
    // argv[0], subcommand, then the file values, then the real flags
    let split = args.len().min(2);
    let mut out = args[..split].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[split..]);
    Ok(out)
}

fn out_dir(out: &Option<PathBuf>, cmd: &str) -> PathBuf {
    match out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(cmd),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolved settings in config-file form.
#[derive(Default)]
struct Resolved(String);

impl Resolved {
    fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.0, "{key} = {value}");
        self
    }

    fn path(&mut self, key: &str, value: &Path) -> &mut Self {
        self.set(key, value.display())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(CONFIG_FILE), &self.0)
    }
}

/// Scans a data directory, writing any rejections next to the outputs.
/// Fails only when nothing usable is left.
fn scan(root: &Path, task: TaskKind, out: &Path, report_name: &str) -> std::result::Result<DatasetManifest, Failure> {
    let report = scan_and_validate(root, task)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let report_path = out.join(report_name);
    if !report.rejections.is_empty() {
        write_text(&report_path, &report.render_rejections())?;
        eprintln!(
            "warning: {} file(s) rejected, see {}",
            report.rejections.len(),
            report_path.display()
        );
    }
    if report.manifest.is_empty() {
        let detail = if report.rejections.is_empty() {
            String::new()
        } else {
            format!("; rejection report at {}", report_path.display())
        };
        return Err(usage(format!(
            "no usable {task} data under {}{detail}",
            root.display()
        )));
    }
    Ok(report.manifest)
}

fn cmd_pretrain(a: &PretrainArgs) -> CmdResult {
    let cfg = ArchConfig::preset(a.preset);
    let out = out_dir(&a.out, "pretrain");
    ensure_dir(&out)?;
    let manifest = scan(&a.data, TaskKind::Pretrain, &out, "rejections.txt")?;

    let mut opts = OptimConfig::pretrain(a.epochs);
    opts.base_lr = a.lr;
    opts.batch_size = a.batch.unwrap_or(if a.preset == Preset::VitB { 64 } else { 8 });
    opts.weight_decay = a.weight_decay;
    opts.schedule = a.schedule;
    if let Some(w) = a.warmup_epochs {
        opts.warmup_epochs = w;
    }
    opts.seed = a.seed;
    opts.validate()?;

    let mut resolved = Resolved::default();
    resolved
        .path("data", &a.data)
        .set("preset", a.preset)
        .set("mask-ratio", a.mask_ratio)
        .set("epochs", opts.epochs)
        .set("batch", opts.batch_size)
        .set("lr", opts.base_lr)
        .set("warmup-epochs", opts.warmup_epochs)
        .set("weight-decay", opts.weight_decay)
        .set("schedule", opts.schedule)
        .set("seed", opts.seed)
        .path("out", &out);
    resolved.write(&out)?;

    let images = load_images::<f32>(&manifest, cfg.patch.image_size)?;
    let mut model = MaeModel::<f32>::init(cfg, a.seed)?;
    println!(
        "pretraining {} on {} images, {} parameters",
        a.preset,
        images.len(),
        model.num_params()
    );
    let mut best = f64::INFINITY;
    let mut epochs_tsv = String::new();
    let result = pretrain(&mut model, &images, a.mask_ratio, &opts, |epoch, loss, m| {
        let _ = writeln!(epochs_tsv, "{epoch}\t{loss:.6}");
        m.save(&out.join("latest.ckpt"))?;
        if loss < best {
            best = loss;
            m.save(&out.join("best.ckpt"))?;
        }
        println!("epoch {epoch}\tloss {loss:.6}");
        Ok(())
    });
    write_text(&out.join("epochs.tsv"), &epochs_tsv)?;
    let report = result?;
    report.log.write(&out.join("run_log.tsv"))?;
    println!("checkpoint {}", model.digest());
    println!("outputs in {}", out.display());
    Ok(())
}

/// Train, validation and test manifests for a head command.
fn head_splits(
    h: &HeadArgs,
    task: TaskKind,
    out: &Path,
) -> std::result::Result<(DatasetManifest, Option<DatasetManifest>, DatasetManifest), Failure> {
    let data = scan(&h.data, task, out, "rejections.txt")?;
    if let Some(test_dir) = &h.test_data {
        let test = scan(test_dir, task, out, "test_rejections.txt")?;
        return Ok((data, None, test));
    }
    let s = split(
        &data,
        &SplitSpec {
            ratios: [0.7, 0.15, 0.15],
            seed: h.split_seed,
        },
    )?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    if s.train.is_empty() {
        return Err(usage("training split is empty"));
    }
    if s.test.is_empty() {
        return Err(usage("test split is empty; add data or pass --test-data"));
    }
    let val = (!s.val.is_empty()).then_some(s.val);
    Ok((s.train, val, s.test))
}

fn head_opts(h: &HeadArgs, default_epochs: usize) -> Result<OptimConfig> {
    let mut o = OptimConfig::head(h.epochs.unwrap_or(default_epochs));
    o.base_lr = h.lr;
    o.batch_size = h.batch;
    o.weight_decay = h.weight_decay;
    o.schedule = h.schedule;
    o.seed = h.seed;
    o.validate()?;
    Ok(o)
}

fn head_resolved(h: &HeadArgs, opts: &OptimConfig, out: &Path) -> Resolved {
    let mut r = Resolved::default();
    r.path("ckpt", &h.ckpt).path("data", &h.data);
    if let Some(t) = &h.test_data {
        r.path("test-data", t);
    }
    r.set("mode", h.mode)
        .set("epochs", opts.epochs)
        .set("batch", h.batch)
        .set("lr", h.lr)
        .set("weight-decay", h.weight_decay)
        .set("schedule", h.schedule)
        .set("seed", h.seed)
        .set("split-seed", h.split_seed)
        .path("out", out);
    r
}

fn evaluate(model: &MaeModel<f32>, head: &TaskHead<f32>, data: &HeadDataset<f32>) -> Result<f64> {
    match (head, &data.targets) {
        (TaskHead::Linear(h), Targets::Labels(labels)) => accuracy(&predict_classes(model, h, &data.images)?, labels),
        (TaskHead::Segment(h), Targets::Masks(masks)) => {
            let pred = predict_masks(model, h, &data.images)?;
            let truth: Vec<Vec<u8>> = masks
                .iter()
                .map(|m| m.iter().map(|&v| u8::from(v >= 0.5)).collect())
                .collect();
            Ok(f_score(&segmentation_confusion(&pred, &truth)?))
        }
        _ => Err(Error::Config("head and targets disagree".into())),
    }
}

fn run_head(h: &HeadArgs, task: TaskKind, classes: Option<usize>, cmd: &str) -> CmdResult {
    let out = out_dir(&h.out, cmd);
    ensure_dir(&out)?;
    let mut model = MaeModel::<f32>::load(&h.ckpt)?;
    let (train_m, val_m, test_m) = head_splits(h, task, &out)?;
    let opts = head_opts(h, if task == TaskKind::Classify { 30 } else { 40 })?;
    let size = model.cfg.patch.image_size;

    let mut resolved = head_resolved(h, &opts, &out);
    let mut head = match task {
        TaskKind::Classify => {
            let seen = train_m.num_classes().max(test_m.num_classes());
            let k = classes.unwrap_or(seen.max(2));
            if k < seen {
                return Err(usage(format!("--classes {k} but the data has labels up to {}", seen - 1)));
            }
            resolved.set("classes", k);
            TaskHead::Linear(LinearProbeHead::new(model.cfg.enc_dim, k, h.seed)?)
        }
        _ => TaskHead::Segment(SegmentationHead::new(model.cfg.enc_dim, h.seed)),
    };
    resolved.write(&out)?;

    let train = load_head_dataset::<f32>(&train_m, size)?;
    let test = load_head_dataset::<f32>(&test_m, size)?;
    let before = model.digest();
    println!("backbone {before}");
    println!(
        "training {cmd} head ({} mode) on {} images, testing on {}",
        h.mode,
        train.len(),
        test.len()
    );
    let report = train_head(&mut model, &mut head, &train, h.mode, &opts)?;
    let after = model.digest();
    report.log.write(&out.join("run_log.tsv"))?;
    write_text(&out.join("history.tsv"), &report.render_history())?;
    head.save(&out.join("head.ckpt"))?;

    let name = if task == TaskKind::Classify { "accuracy" } else { "f_score" };
    let mut metrics = MetricsReport::default();
    if let Some(last) = report.history.last() {
        metrics.push(format!("train_{name}"), last.metric);
    }
    if let Some(v) = &val_m {
        let val = load_head_dataset::<f32>(v, size)?;
        metrics.push(format!("val_{name}"), evaluate(&model, &head, &val)?);
    }
    let score = evaluate(&model, &head, &test)?;
    metrics.push(format!("test_{name}"), score);
    metrics.write(&out.join("metrics.tsv"))?;
    print!("{}", metrics.render());

    match h.mode {
        TrainMode::LinearProbe => {
            println!("backbone {after} (unchanged)");
            if after != before {
                return Err(Failure {
                    code: EXIT_CHECK,
                    message: format!("linear probing changed the backbone: {before} -> {after}"),
                });
            }
        }
        TrainMode::FullFinetune => {
            model.save(&out.join("backbone.ckpt"))?;
            println!("backbone {after} (fine-tuned)");
        }
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> CmdResult {
    let out = out_dir(&a.out, "reconstruct");
    let model = MaeModel::<f32>::load(&a.ckpt)?;
    let img = read_pgm(&a.image)?;
    let size = model.cfg.patch.image_size;
    if (img.width, img.height) != (size, size) {
        return Err(usage(format!(
            "{} is {}x{}, the checkpoint expects {size}x{size}",
            a.image.display(),
            img.width,
            img.height
        )));
    }
    let r = reconstruct(&model, &img.pixels, a.mask_ratio, a.seed)?;
    ensure_dir(&out)?;
    let mut resolved = Resolved::default();
    resolved
        .path("ckpt", &a.ckpt)
        .path("image", &a.image)
        .set("mask-ratio", a.mask_ratio)
        .set("seed", a.seed)
        .path("out", &out);
    resolved.write(&out)?;
    for (name, pixels) in [
        ("original.pgm", &r.original),
        ("masked.pgm", &r.masked),
        ("reconstruction.pgm", &r.reconstruction),
    ] {
        write_pgm(
            &out.join(name),
            &GrayImage {
                width: size,
                height: size,
                pixels: pixels.clone(),
            },
        )?;
    }
    println!(
        "masked {} of {} patches; images in {}",
        r.masked_patches,
        model.cfg.num_patches(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    if let Some(op) = &a.corrupt_op {
        // the fault hook wants a static name; this runs once per process
        inject_backward_fault(Some(Box::leak(op.clone().into_boxed_str())));
    }
    let results = run_suite(a.seed);
    inject_backward_fault(None);
    let results = results?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        println!(
            "{:<20} max_err {:.3e}  tol {:.0e}  cases {:>3}  {}",
            r.name,
            r.max_error,
            r.tolerance,
            r.cases,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            message: format!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    let out = out_dir(&a.out, "synthetic");
    let m = gen_synthetic(a.kind, a.n, a.size, a.seed, &out)?;
    println!("wrote {} {} images to {}", m.len(), a.kind, out.display());
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => run_head(&a.head, TaskKind::Classify, a.classes, "probe"),
        Command::Segment(a) => run_head(&a.head, TaskKind::Segment, None, "segment"),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenSynthetic(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let kv = parse_config("# run\nlr = 0.002\n\n seed=4 \n").unwrap();
        assert_eq!(kv, vec![("lr".into(), "0.002".into()), ("seed".into(), "4".into())]);
        assert!(parse_config("lr 0.1").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        fs::write(&f, "lr = 0.5\nseed = 3\n").unwrap();
        let argv: Vec<String> = ["maekit", "pretrain", "--data", "d", "--lr", "0.25", "--config"]
            .iter()
            .map(|s| s.to_string())
            .chain([f.display().to_string()])
            .collect();
        let cli = Cli::try_parse_from(expand_config(argv).unwrap()).unwrap();
        let Command::Pretrain(a) = cli.cmd else { panic!() };
        assert_eq!(a.lr, 0.25);
        assert_eq!(a.seed, 3);
    }

    #[test]
    fn missing_data_is_usage_error() {
        assert_eq!(run(["maekit", "pretrain"]), EXIT_USAGE);
        assert_eq!(run(["maekit", "frobnicate"]), EXIT_USAGE);
    }
}
