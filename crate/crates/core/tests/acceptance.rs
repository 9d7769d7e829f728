//! End-to-end acceptance checks. Each test prints one PASS/FAIL line with
//! the measured quantity before asserting, so `--nocapture` gives a summary.
//!
//! The pipeline checks drive the real command line (`maekit::cli::run`)
//! against synthetic data written under cargo's per-target temp directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maekit::checkpoint;
use maekit::cli;
use maekit::data::{read_pgm, split, split_sizes, write_pgm, DatasetManifest, Entry, GrayImage, SplitSpec, TaskKind};
use maekit::gradsuite::run_suite;
use maekit::heads::{segment_forward, SegmentationHead, SEG_CHANNELS};
use maekit::metrics::{f_score, ConfusionCounts};
use maekit::model::{batch_images, mae_loss, ArchConfig, MaeModel, TARGET_EPS};
use maekit::patch::{keep_count, make_mask_plan, normalize_patch_rows, PatchConfig};
use maekit::tensor::Tensor;

// written to the raw stderr handle so the line shows even when the test passes
fn report(id: u32, what: &str, ok: bool, detail: String) {
    let line = format!("[{id:>2}] {} {what}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn work_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn maekit(args: &[&str]) -> i32 {
    let mut argv = vec!["maekit".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli::run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(kind: &str, n: usize, seed: u64, out: &Path) {
    let (n, seed) = (n.to_string(), seed.to_string());
    assert_eq!(maekit(&["gen-synthetic", "--kind", kind, "--n", &n, "--seed", &seed, "--out", p(out)]), 0);
}

fn metric(path: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name}\t")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("{name} missing from {}", path.display()))
}

fn run_log_losses(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn gradient_correctness() {
    let t = Instant::now();
    let results = run_suite(0).unwrap();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let ok = failing.is_empty() && worst < 1e-5 && results.iter().any(|r| r.name == "mae_loss");
    report(
        1,
        "gradient check over every op and the full loss",
        ok,
        format!("{} checks, max rel error {worst:.2e}, failing {failing:?}, {:.1?}", results.len(), t.elapsed()),
    );
    assert!(ok);
}

#[test]
fn masking_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = Vec::new();
    for draw in 0..1000 {
        let n = rng.random_range(1..=400usize);
        // ratios on a 1/1000 grid so the floor has an exact integer oracle
        let k = rng.random_range(0..1000i64);
        let r = k as f64 / 1000.0;
        let expect = (n as i64 * (1000 - k)).div_euclid(1000) as usize;
        let plan = make_mask_plan(n, r, &mut rng).unwrap();
        let rows: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = Tensor::constant(&[n, 1], rows.clone()).unwrap();
        let back = x
            .gather_rows(&plan.shuffle_idx)
            .unwrap()
            .gather_rows(&plan.restore_idx)
            .unwrap();
        let mut seen = vec![0u8; n];
        for &i in plan.visible().iter().chain(plan.masked()) {
            seen[i] += 1;
        }
        let partition = seen.iter().all(|&c| c == 1)
            && plan.visible().iter().all(|&i| !plan.is_masked(i))
            && plan.masked().iter().all(|&i| plan.is_masked(i));
        if keep_count(n, r) != expect || plan.keep_count != expect || back.data() != rows.as_slice() || !partition {
            bad.push(draw);
        }
    }
    let geometry = PatchConfig::new(224, 16).unwrap().num_patches();
    let visible = make_mask_plan(geometry, 0.75, &mut rng).unwrap().visible().len();
    let ok = bad.is_empty() && geometry == 196 && visible == 49;
    report(
        2,
        "masking invariants",
        ok,
        format!("1000 draws, {} bad; N={geometry} r=0.75 keeps {visible}", bad.len()),
    );
    assert!(ok, "bad draws {bad:?}");
}

#[test]
fn loss_locality() {
    let cfg = ArchConfig::micro();
    let (n, p2) = (cfg.num_patches(), cfg.patch_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..cfg.patch.num_pixels()).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let batch = batch_images(&refs, cfg.patch.image_size).unwrap();
    let plans: Vec<_> = (0..2).map(|_| make_mask_plan(n, 0.5, &mut rng).unwrap()).collect();
    let pred: Vec<f64> = (0..2 * n * p2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |v: &[f64]| {
        mae_loss(&Tensor::constant(&[2, n, p2], v.to_vec()).unwrap(), &batch, &plans, &cfg, TARGET_EPS)
            .unwrap()
            .item()
            .unwrap()
    };
    let base = loss(&pred);
    let (mut visible_moved, mut masked_still) = (0, 0);
    for (b, plan) in plans.iter().enumerate() {
        for k in 0..n {
            for j in 0..p2 {
                let mut v = pred.clone();
                v[(b * n + k) * p2 + j] += 0.25;
                let l = loss(&v);
                if plan.is_masked(k) {
                    masked_still += usize::from(l == base);
                } else {
                    visible_moved += usize::from(l.to_bits() != base.to_bits());
                }
            }
        }
    }
    let ok = visible_moved == 0 && masked_still == 0;
    report(
        3,
        "loss locality",
        ok,
        format!("{visible_moved} visible perturbations moved the loss, {masked_still} masked ones did not"),
    );
    assert!(ok);
}

#[test]
fn normalized_targets() {
    let row = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut patches = Vec::new();
    let mut constant = Vec::new();
    for i in 0..200 {
        if i % 10 == 0 {
            let c: f64 = rng.random_range(0.0..1.0);
            patches.extend(std::iter::repeat_n(c, row));
            constant.push(true);
        } else {
            patches.extend((0..row).map(|_| rng.random_range(0.0..1.0)));
            constant.push(false);
        }
    }
    let out = normalize_patch_rows(&patches, row, TARGET_EPS);
    let (mut worst_mean, mut worst_var, mut nonzero_const) = (0.0f64, 0.0f64, 0);
    for (t, &is_const) in out.chunks(row).zip(&constant) {
        if is_const {
            nonzero_const += usize::from(t.iter().any(|&v| v != 0.0));
            continue;
        }
        let mean = t.iter().sum::<f64>() / row as f64;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    let ok = worst_mean < 1e-6 && worst_var < 1e-4 && nonzero_const == 0;
    report(
        4,
        "normalized patch targets",
        ok,
        format!("max |mean| {worst_mean:.1e}, max |var-1| {worst_var:.1e}, {nonzero_const} constant patches not zeroed"),
    );
    assert!(ok);
}

#[test]
fn overfit_run() {
    let t = Instant::now();
    let dir = work_dir("overfit");
    let data = dir.join("data");
    gen("pretrain", 8, 5, &data);
    let out = dir.join("run");
    let code = maekit(&["pretrain", "--data", p(&data), "--epochs", "300", "--seed", "0", "--out", p(&out)]);
    assert_eq!(code, 0);
    let losses = run_log_losses(&out.join("run_log.tsv"));
    // steps draw fresh masks, so the final loss is the mean of the last 20
    let initial = losses[0];
    let tail = &losses[losses.len() - 20..];
    let fin = tail.iter().sum::<f64>() / tail.len() as f64;
    let ok = losses.len() == 300 && fin < 0.1 * initial;
    report(
        5,
        "overfit 8 images in 300 steps",
        ok,
        format!(
            "{} steps, initial {initial:.4}, final {fin:.4}, ratio {:.3} (need < 0.1), {:.1?}",
            losses.len(),
            fin / initial,
            t.elapsed()
        ),
    );
    assert!(ok);
}

/// Desk backbone pre-trained on 256 synthetic images for 5 epochs, shared
/// by the two head pipelines.
fn backbone() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = work_dir("backbone");
        let data = dir.join("data");
        gen("pretrain", 256, 11, &data);
        let out = dir.join("run");
        assert_eq!(
            maekit(&["pretrain", "--data", p(&data), "--epochs", "5", "--seed", "1", "--out", p(&out)]),
            0
        );
        out.join("latest.ckpt")
    })
}

#[test]
fn linear_probe_pipeline() {
    let t = Instant::now();
    let ckpt = backbone();
    let dir = work_dir("probe");
    let (train, test) = (dir.join("train"), dir.join("test"));
    gen("classify", 200, 21, &train);
    gen("classify", 50, 22, &test);
    let before = fs::read(ckpt).unwrap();
    let digest = MaeModel::<f32>::load(ckpt).unwrap().digest();
    let out = dir.join("run");
    let code = maekit(&[
        "probe", "--ckpt", p(ckpt), "--data", p(&train), "--test-data", p(&test), "--mode", "linear", "--out", p(&out),
    ]);
    let acc = metric(&out.join("metrics.tsv"), "test_accuracy");
    let unchanged = fs::read(ckpt).unwrap() == before && MaeModel::<f32>::load(ckpt).unwrap().digest() == digest;
    let ok = code == 0 && acc >= 0.95 && unchanged;
    report(
        6,
        "linear probe on the frozen backbone",
        ok,
        format!("test accuracy {acc:.3} (need >= 0.95), backbone unchanged {unchanged}, {:.1?}", t.elapsed()),
    );
    assert!(ok);
}

#[test]
fn segmentation_pipeline() {
    let t = Instant::now();
    let ckpt = backbone();
    let dir = work_dir("segment");
    let (train, test) = (dir.join("train"), dir.join("test"));
    gen("segment", 200, 31, &train);
    gen("segment", 50, 32, &test);
    let out = dir.join("run");
    let code = maekit(&[
        "segment", "--ckpt", p(ckpt), "--data", p(&train), "--test-data", p(&test), "--mode", "linear", "--out", p(&out),
    ]);
    let f = metric(&out.join("metrics.tsv"), "test_f_score");

    let model = MaeModel::<f32>::load(ckpt).unwrap();
    let head = SegmentationHead::<f32>::load(&out.join("head.ckpt")).unwrap();
    let img = maekit::data::load_image::<f32>(&test.join("images").join("img_00000.pgm")).unwrap();
    let probs = segment_forward(&img.reshape(&[1, 1, 64, 64]).unwrap(), &model, &head).unwrap();
    let shape_ok = probs.shape() == [1, 1, 64, 64];
    let widths_ok = SEG_CHANNELS == [256, 128, 64, 32];

    let ok = code == 0 && f >= 0.90 && shape_ok && widths_ok;
    report(
        7,
        "segmentation head",
        ok,
        format!("test micro f-score {f:.3} (need >= 0.90), output {:?}, {:.1?}", probs.shape(), t.elapsed()),
    );
    assert!(ok);
}

#[test]
fn f_score_oracle() {
    let mut worst = 0.0f64;
    let mut inexact = 0;
    for tp in 0..=10u64 {
        for fp in 0..=10u64 {
            for fn_ in 0..=10u64 {
                let den = (2 * tp + fp + fn_) as i64;
                let exact = if den == 0 {
                    Rational64::from_integer(0)
                } else {
                    Rational64::new(2 * tp as i64, den)
                };
                let got = f_score(&ConfusionCounts { tp, fp, fn_, tn: 0 });
                let back = Rational64::approximate_float(got).unwrap();
                inexact += usize::from(back != exact);
                worst = worst.max((got - *exact.numer() as f64 / *exact.denom() as f64).abs());
            }
        }
    }
    let two_thirds = f_score(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 });
    let ok = worst <= 1e-12 && inexact == 0 && Rational64::approximate_float(two_thirds) == Some(Rational64::new(2, 3));
    report(
        8,
        "f-score against the rational oracle",
        ok,
        format!("1331 cases, max |diff| {worst:.1e}, {inexact} rational mismatches, (2,1,1) -> {two_thirds}"),
    );
    assert!(ok);
}

#[test]
fn determinism_and_persistence() {
    let dir = work_dir("determinism");
    let data = dir.join("data");
    gen("pretrain", 12, 41, &data);
    let run = |name: &str| {
        let out = dir.join(name);
        assert_eq!(
            maekit(&["pretrain", "--data", p(&data), "--epochs", "3", "--batch", "4", "--seed", "9", "--out", p(&out)]),
            0
        );
        (
            fs::read(out.join("run_log.tsv")).unwrap(),
            fs::read(out.join("latest.ckpt")).unwrap(),
            fs::read(out.join("best.ckpt")).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    let runs_equal = a == b;

    let (header, params) = checkpoint::decode::<f32>(&a.1).unwrap();
    let again = checkpoint::encode(&header, &params);
    let resaved = dir.join("resaved.ckpt");
    MaeModel::<f32>::load(&dir.join("a").join("latest.ckpt"))
        .unwrap()
        .save(&resaved)
        .unwrap();
    let roundtrip = again == a.1 && fs::read(&resaved).unwrap() == a.1;
    let ok = runs_equal && roundtrip;
    report(
        9,
        "determinism and checkpoint persistence",
        ok,
        format!("identical runs {runs_equal}, save-load-save byte-identical {roundtrip}"),
    );
    assert!(ok);
}

#[test]
fn split_arithmetic() {
    let sizes = split_sizes(612, &[0.7, 0.15, 0.15]);
    let mut m = DatasetManifest::new("root", TaskKind::Classify);
    m.entries = (0..612)
        .map(|i| Entry {
            image: PathBuf::from(format!("{}/img_{i:05}.pgm", i % 3)),
            label: Some(i % 3),
            mask: None,
        })
        .collect();
    let s = split(&m, &SplitSpec { ratios: [0.7, 0.15, 0.15], seed: 7 }).unwrap();
    let got = [s.train.len(), s.val.len(), s.test.len()];
    let mut all: Vec<Entry> = [&s.train, &s.val, &s.test].iter().flat_map(|x| x.entries.clone()).collect();
    all.sort();
    let mut want = m.entries.clone();
    want.sort();
    let partition = all == want;
    let ok = sizes == [429, 92, 91] && got == sizes && partition;
    report(
        10,
        "split arithmetic",
        ok,
        format!("612 at 70/15/15 -> {got:?}, partition {partition}"),
    );
    assert!(ok);
}

#[test]
fn reconstruction_demo() {
    let dir = work_dir("reconstruct");
    // a small model on the 224/16 geometry keeps this fast
    let cfg = ArchConfig {
        patch: PatchConfig::new(224, 16).unwrap(),
        enc_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
    };
    let ckpt = dir.join("model.ckpt");
    MaeModel::<f32>::init(cfg, 3).unwrap().save(&ckpt).unwrap();
    // no patch of the input is uniformly mid-gray
    let pixels: Vec<u8> = (0..224 * 224).map(|i| ((i % 224 + 3 * (i / 224)) % 120) as u8).collect();
    let image = dir.join("input.pgm");
    write_pgm(&image, &GrayImage { width: 224, height: 224, pixels: pixels.clone() }).unwrap();

    let zero = dir.join("r0");
    let c0 = maekit(&["reconstruct", "--ckpt", p(&ckpt), "--image", p(&image), "--mask-ratio", "0", "--out", p(&zero)]);
    let exact = fs::read(zero.join("reconstruction.pgm")).unwrap() == fs::read(&image).unwrap();

    let q = dir.join("r75");
    let c75 = maekit(&["reconstruct", "--ckpt", p(&ckpt), "--image", p(&image), "--mask-ratio", "0.75", "--out", p(&q)]);
    let all_three = ["original.pgm", "masked.pgm", "reconstruction.pgm"].iter().all(|f| q.join(f).is_file());
    let masked = read_pgm(&q.join("masked.pgm")).unwrap();
    let mut gray = 0;
    for gy in 0..14 {
        for gx in 0..14 {
            let uniform = (0..16).all(|y| (0..16).all(|x| masked.pixels[(gy * 16 + y) * 224 + gx * 16 + x] == 128));
            gray += usize::from(uniform);
        }
    }
    let ok = c0 == 0 && exact && c75 == 0 && all_three && gray == 147;
    report(
        11,
        "reconstruction demo",
        ok,
        format!("ratio 0 byte-exact {exact}; ratio 0.75 wrote all three {all_three}, {gray} of 196 patches gray"),
    );
    assert!(ok);
}
