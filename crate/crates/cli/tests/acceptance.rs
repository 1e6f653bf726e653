//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails the
//! test if any criterion fails. Run with `--nocapture` to see the report.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cdp_core::corpus::{build_manifest, synth_corpus, Corpus, Split, SplitFractions};
use cdp_core::distortion::{
    add_gaussian_noise, adjust_brightness, adjust_color, adjust_contrast, adjust_sharpness,
    SMOOTH_KERNEL, SMOOTH_SCALE,
};
use cdp_core::net::gradcheck;
use cdp_core::net::{forward, images_to_tensor, init_params, Checkpoint, Heads, NetConfig};
use cdp_core::pixel::{convolve3x3, to_grayscale};
use cdp_core::trainer::{cosine_similarity, embed_images, pretext_image_loss};
use cdp_core::{distort, encode_ppm, DistortionKind, DistortionParams, ImageBuffer, SamplerConfig};
use serde_json::{json, Value};
use tempfile::TempDir;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget of {budget:?}")),
            Err(e) => (false, e),
        };
        println!(
            "{} {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        self.results.push((name.to_owned(), ok));
    }
}

// ---- independent scalar references ----------------------------------------

fn ref_luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn ref_blend(base: f64, over: f64, alpha: f64) -> f64 {
    alpha * over + (1.0 - alpha) * base
}

fn ref_color(rgb: [f64; 3], alpha: f64) -> [f64; 3] {
    let g = ref_luma(rgb);
    rgb.map(|v| ref_blend(g, v, alpha))
}

/// 3x3 smoothing at an interior pixel of a single-channel grid.
fn ref_smooth_at(grid: &[Vec<f64>], x: usize, y: usize) -> f64 {
    let mut acc = 0.0;
    for dy in 0..3 {
        for dx in 0..3 {
            let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
            acc += w * grid[y + dy - 1][x + dx - 1];
        }
    }
    acc / 13.0
}

fn ref_contrast_constant(v: f64, alpha: f64) -> f64 {
    ref_blend(ref_luma([v, v, v]) + 0.5, v, alpha)
}

fn ref_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

// ---- helpers ---------------------------------------------------------------

fn cdp(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`cdp {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.trim()).map_err(|e| format!("bad summary line: {e}"))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn gradient_image(w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |x, y| {
        [
            (x * 37 % 256) as f64,
            (y * 53 % 256) as f64,
            ((x + y) * 19 % 256) as f64,
        ]
    })
    .unwrap()
}

// ---- criteria --------------------------------------------------------------

fn identity_suite() -> Check {
    let img = gradient_image(13, 9);
    let canonical = encode_ppm(&img);
    for kind in DistortionKind::ALL {
        let out = distort(&img, &DistortionParams::identity(kind)).map_err(|e| e.to_string())?;
        ensure!(
            encode_ppm(&out) == canonical,
            "{} identity changed bytes",
            kind.name()
        );
    }
    let gray = ImageBuffer::from_fn(7, 7, |x, y| [(x * 30 + y) as f64; 3]).unwrap();
    for alpha in [0.0, 0.5, 1.7] {
        ensure!(
            encode_ppm(&adjust_color(&gray, alpha)) == encode_ppm(&gray),
            "gray not fixed under color α={alpha}"
        );
    }
    let constant = ImageBuffer::filled(6, 5, [12.0, 200.0, 99.0]).unwrap();
    for alpha in [0.0, 0.5, 1.5] {
        ensure!(
            encode_ppm(&adjust_sharpness(&constant, alpha)) == encode_ppm(&constant),
            "constant not fixed under sharpness α={alpha}"
        );
    }
    ensure!(
        adjust_brightness(&img, 0.0)
            .data()
            .iter()
            .all(|&v| v == 0.0),
        "brightness α=0 not all zero"
    );
    Ok("4 kinds identity, gray/constant fixed points, brightness α=0 zero".into())
}

fn scalar_oracles() -> Check {
    let red = ImageBuffer::filled(4, 4, [255.0, 0.0, 0.0]).unwrap();
    let got = adjust_color(&red, 0.5).pixel(2, 2);
    let want = ref_color([255.0, 0.0, 0.0], 0.5);
    for c in 0..3 {
        ensure!(
            (got[c] - want[c]).abs() <= 1e-4,
            "color channel {c}: {} vs reference {}",
            got[c],
            want[c]
        );
    }
    for (c, lit) in [165.6225, 38.1225, 38.1225].into_iter().enumerate() {
        ensure!(
            (want[c] - lit).abs() <= 1e-4,
            "reference color {} vs {lit}",
            want[c]
        );
    }

    let n = 5;
    let mut grid = vec![vec![0.0; n]; n];
    grid[2][2] = 255.0;
    let impulse = ImageBuffer::from_fn(n, n, |x, y| [grid[y][x]; 3]).unwrap();
    let conv = convolve3x3(&impulse, &SMOOTH_KERNEL, SMOOTH_SCALE).map_err(|e| e.to_string())?;
    let center = ref_smooth_at(&grid, 2, 2);
    ensure!(
        (conv.pixel(2, 2)[0] - center).abs() <= 1e-3,
        "impulse {} vs {center}",
        conv.pixel(2, 2)[0]
    );
    ensure!(
        (center - 98.0769).abs() <= 1e-3,
        "reference impulse {center}"
    );
    let neighbour = ref_smooth_at(&grid, 1, 2);
    ensure!(
        (conv.pixel(1, 2)[0] - neighbour).abs() <= 1e-9,
        "neighbour {} vs {neighbour}",
        conv.pixel(1, 2)[0]
    );

    let gray = to_grayscale(&red).pixel(0, 0)[0];
    ensure!(
        (gray - ref_luma([255.0, 0.0, 0.0])).abs() <= 1e-12,
        "grayscale {gray}"
    );

    let flat = ImageBuffer::filled(8, 8, [100.0; 3]).unwrap();
    let c = adjust_contrast(&flat, 0.8).data().to_vec();
    let flat_ref = ref_contrast_constant(100.0, 0.8);
    ensure!(
        c.iter().all(|v| (v - flat_ref).abs() <= 1e-9),
        "contrast {} vs {flat_ref}",
        c[0]
    );
    ensure!(
        (flat_ref - 100.1).abs() <= 1e-9,
        "reference contrast {flat_ref}"
    );
    Ok(format!(
        "color ({:.4}, {:.4}, {:.4}), impulse {:.4}, contrast {:.9}",
        got[0],
        got[1],
        got[2],
        conv.pixel(2, 2)[0],
        c[0]
    ))
}

fn noise_statistics() -> Check {
    let gray = ImageBuffer::filled(64, 64, [127.5; 3]).unwrap();
    let noisy = add_gaussian_noise(&gray, 0.02, 12345).map_err(|e| e.to_string())?;
    let d: Vec<f64> = noisy.data().iter().map(|v| (v - 127.5) / 255.0).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    ensure!((0.018..=0.022).contains(&std), "std/255 = {std}");
    ensure!(mean.abs() <= 0.002, "mean/255 = {mean}");
    let same = add_gaussian_noise(&gray, 0.0, 12345).map_err(|e| e.to_string())?;
    ensure!(same == gray, "β=0 changed the image");
    Ok(format!("std/255 {std:.5}, mean/255 {mean:.5}"))
}

fn gradient_verification() -> Check {
    let reports = gradcheck::full_suite(0).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for r in &reports {
        ensure!(
            r.passed(),
            "{}: {} of {} entries failed, worst {:?}",
            r.name,
            r.failures,
            r.checked,
            r.worst
        );
        checked += r.checked;
        worst = worst.max(r.max_rel_error);
    }
    // Same checks at a finer step over many random points, so the verdict
    // does not hinge on one point that happens to avoid every kink.
    let cfg = NetConfig {
        input_size: 16,
        conv_channels: vec![4, 6],
        embedding_dim: 8,
        main_classes: Some(3),
    };
    let (h, tol) = (gradcheck::FINE_STEP, gradcheck::DEFAULT_TOLERANCE);
    let mut fine_worst: f64 = 0.0;
    for seed in 1..=20 {
        let sweep = [
            gradcheck::check_conv_layer(seed, h, tol),
            gradcheck::check_pool_layer(seed, h, tol),
            gradcheck::check_dense_layer(seed, h, tol),
            gradcheck::check_softmax_cross_entropy(seed, h, tol),
            gradcheck::check_network(&cfg, 2, seed, h, tol).map_err(|e| e.to_string())?,
        ];
        for r in &sweep {
            ensure!(
                r.passed(),
                "seed {seed}, h {h:e}: {}: {} of {} failed, worst {:?}",
                r.name,
                r.failures,
                r.checked,
                r.worst
            );
            checked += r.checked;
            fine_worst = fine_worst.max(r.max_rel_error);
        }
    }
    Ok(format!(
        "{checked} entries; h 1e-4 max rel error {worst:.2e}; h 1e-6 over 20 points max rel error {fine_worst:.2e}"
    ))
}

fn pretext_loss_exactness() -> Check {
    let corpus = Corpus::from_images(synth_corpus(4, 16, 8).unwrap()).unwrap();
    let manifest = build_manifest(
        &corpus,
        &SamplerConfig::default(),
        &SplitFractions::default(),
        8,
    )
    .map_err(|e| e.to_string())?;
    let cfg = NetConfig {
        input_size: 16,
        conv_channels: vec![4, 6],
        embedding_dim: 8,
        main_classes: None,
    };
    let params = gradcheck::randomized_params(&cfg, 5).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for group in manifest
        .groups(Split::Train)
        .into_iter()
        .chain(manifest.groups(Split::Val))
        .chain(manifest.groups(Split::Test))
    {
        let image = corpus.image(group.image_id).map_err(|e| e.to_string())?;
        let (loss, _) =
            pretext_image_loss(&params, &image, &group.samples).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for s in group.samples {
            let copy = distort(&image, &s.params()).map_err(|e| e.to_string())?;
            let x = images_to_tensor::<f64>(&[&copy]).map_err(|e| e.to_string())?;
            let out = forward(&params, &x, Heads::PRETEXT).map_err(|e| e.to_string())?;
            total += ref_cross_entropy(out.pretext_logits.unwrap().row(0), s.label.index());
        }
        worst = worst.max((loss - total / 4.0).abs());
    }
    ensure!(
        worst <= 1e-9,
        "loss differs from mean of four cross-entropies by {worst:e}"
    );

    let zero = init_params::<f64>(&cfg, 1).map_err(|e| e.to_string())?;
    let group = &manifest.groups(Split::Train)[0];
    let image = corpus.image(group.image_id).map_err(|e| e.to_string())?;
    let (l0, _) = pretext_image_loss(&zero, &image, &group.samples).map_err(|e| e.to_string())?;
    ensure!((l0 - 4f64.ln()).abs() <= 1e-6, "zero-head loss {l0}");
    ensure!(
        (l0 - 1.386294).abs() <= 1e-6,
        "zero-head loss {l0} vs 1.386294"
    );
    Ok(format!("max |Δ| {worst:.1e}, zero-head loss {l0:.7}"))
}

fn determinism(work: &Path) -> Check {
    let corpus = work.join("det_corpus");
    cdp(&[
        "synth",
        "--count",
        "200",
        "--size",
        "64",
        "--seed",
        "21",
        "--out",
        &s(&corpus),
    ])?;
    let run = |tag: &str, threads: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let m = work.join(format!("det_{tag}.jsonl"));
        let ck = work.join(format!("det_{tag}.ckpt"));
        let log = work.join(format!("det_{tag}.log"));
        let ev = work.join(format!("det_{tag}.eval.json"));
        cdp(&[
            "--threads",
            threads,
            "manifest",
            "--corpus",
            &s(&corpus),
            "--seed",
            "21",
            "--out",
            &s(&m),
        ])?;
        cdp(&[
            "--threads",
            threads,
            "train",
            "--manifest",
            &s(&m),
            "--corpus",
            &s(&corpus),
            "--epochs",
            "5",
            "--seed",
            "21",
            "--out",
            &s(&ck),
            "--log",
            &s(&log),
        ])?;
        cdp(&[
            "--threads",
            threads,
            "eval",
            "--checkpoint",
            &s(&ck),
            "--manifest",
            &s(&m),
            "--corpus",
            &s(&corpus),
            "--split",
            "test",
            "--out",
            &s(&ev),
        ])?;
        Ok(vec![
            ("manifest".into(), read(&m)?),
            ("checkpoint".into(), read(&ck)?),
            ("metrics log".into(), read(&log)?),
            ("eval report".into(), read(&ev)?),
        ])
    };
    let a = run("a", "1")?;
    let b = run("b", "1")?;
    let c = run("c", "4")?;
    for ((name, x), ((_, y), (_, z))) in a.iter().zip(b.iter().zip(&c)) {
        ensure!(x == y, "{name} differs between two runs");
        ensure!(x == z, "{name} differs between --threads 1 and --threads 4");
    }
    Ok(
        "manifest, checkpoint, metrics log and eval report byte-identical (2 runs, 1 vs 4 threads)"
            .into(),
    )
}

fn learnability(work: &Path, probe: &mut Option<(PathBuf, PathBuf, PathBuf)>) -> Check {
    let corpus = work.join("learn_corpus");
    let m = work.join("learn.jsonl");
    let ck = work.join("learn.ckpt");
    let log = work.join("learn.log");
    cdp(&[
        "synth",
        "--count",
        "1000",
        "--size",
        "64",
        "--seed",
        "1",
        "--out",
        &s(&corpus),
    ])?;
    cdp(&[
        "manifest",
        "--corpus",
        &s(&corpus),
        "--alpha-range",
        "0.5,1.5",
        "--alpha-exclude",
        "0.2",
        "--beta-range",
        "0.02,0.05",
        "--seed",
        "1",
        "--out",
        &s(&m),
    ])?;
    cdp(&[
        "train",
        "--manifest",
        &s(&m),
        "--corpus",
        &s(&corpus),
        "--mode",
        "pretext",
        "--epochs",
        "20",
        "--batch",
        "64",
        "--seed",
        "1",
        "--out",
        &s(&ck),
        "--log",
        &s(&log),
    ])?;
    let lines = String::from_utf8_lossy(&read(&log)?).lines().count();
    ensure!(lines == 20, "{lines} log lines, expected 20");
    let ev = cdp(&[
        "eval",
        "--checkpoint",
        &s(&ck),
        "--manifest",
        &s(&m),
        "--corpus",
        &s(&corpus),
        "--split",
        "test",
    ])?;
    let acc = ev["accuracy"]
        .as_f64()
        .ok_or("no accuracy in eval summary")?;
    *probe = Some((corpus, m, ck));
    ensure!(acc >= 0.70, "test accuracy {acc:.4} < 0.70");
    Ok(format!(
        "test accuracy {acc:.4} over {} samples, 20 log lines",
        ev["samples"]
    ))
}

/// A swatch should sit closer to its slightly darkened copy than to a swatch
/// of another family.
fn embedding_probe(trained: &Option<(PathBuf, PathBuf, PathBuf)>) -> Check {
    let (corpus_dir, _, ck) = trained
        .as_ref()
        .ok_or("learnability run produced no checkpoint")?;
    let ck = Checkpoint::from_bytes(&read(ck)?).map_err(|e| e.to_string())?;
    let corpus = Corpus::open_dir(corpus_dir).map_err(|e| e.to_string())?;
    let items: Vec<_> = corpus.items().iter().take(100).collect();
    let mut wins = 0;
    for (i, item) in items.iter().enumerate() {
        let family = corpus
            .main_label(&item.image_id)
            .map_err(|e| e.to_string())?;
        let other = (1..items.len())
            .map(|k| items[(i + k) % items.len()])
            .find(|o| corpus.main_label(&o.image_id).ok() != Some(family))
            .ok_or("no swatch of another family")?;
        let img = corpus.image(&item.image_id).map_err(|e| e.to_string())?;
        let other_img = corpus.image(&other.image_id).map_err(|e| e.to_string())?;
        let dark = adjust_brightness(&img, 0.95);
        let e = embed_images(&ck.params, &[&img, &dark, &other_img]).map_err(|e| e.to_string())?;
        if cosine_similarity(&e[0], &e[1]) > cosine_similarity(&e[0], &e[2]) {
            wins += 1;
        }
    }
    let rate = wins as f64 / items.len() as f64;
    ensure!(
        rate >= 0.80,
        "variant closer for {wins}/{} swatches",
        items.len()
    );
    Ok(format!(
        "variant closer for {wins}/{} swatches",
        items.len()
    ))
}

fn multitask(work: &Path) -> Check {
    let corpus = work.join("mt_corpus");
    let m = work.join("mt.jsonl");
    cdp(&[
        "synth",
        "--count",
        "500",
        "--size",
        "64",
        "--seed",
        "11",
        "--out",
        &s(&corpus),
    ])?;
    cdp(&[
        "manifest",
        "--corpus",
        &s(&corpus),
        "--alpha-exclude",
        "0.2",
        "--seed",
        "11",
        "--out",
        &s(&m),
    ])?;
    let mut rows = Vec::new();
    let mut means = [0.0; 2];
    for seed in 0..5u64 {
        let mut acc = [0.0; 2];
        for (i, lambda) in ["0", "0.5"].into_iter().enumerate() {
            let tag = format!("mt_s{seed}_l{lambda}");
            let out = cdp(&[
                "train",
                "--manifest",
                &s(&m),
                "--corpus",
                &s(&corpus),
                "--mode",
                "multitask",
                "--lambda",
                lambda,
                "--labeled-fraction",
                "0.1",
                "--seed",
                &seed.to_string(),
                "--out",
                &s(&work.join(format!("{tag}.ckpt"))),
                "--log",
                &s(&work.join(format!("{tag}.log"))),
            ])?;
            acc[i] = out["main_val_acc"]
                .as_f64()
                .ok_or("no main_val_acc in train summary")?;
            means[i] += acc[i] / 5.0;
        }
        rows.push(json!({
            "seed": seed,
            "main_val_acc_lambda_0": acc[0],
            "main_val_acc_lambda_0.5": acc[1],
            "delta": acc[1] - acc[0],
        }));
    }
    let report_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let report = report_dir.join("multitask_deltas.jsonl");
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(&report, &text).map_err(|e| e.to_string())?;
    for r in &rows {
        println!("    {r}");
    }
    let deltas: Vec<String> = rows
        .iter()
        .map(|r| format!("{:+.3}", r["delta"].as_f64().unwrap()))
        .collect();
    let detail = format!(
        "mean main val acc λ=0 {:.4}, λ=0.5 {:.4}, deltas [{}], log {}",
        means[0],
        means[1],
        deltas.join(", "),
        report.display()
    );
    ensure!(means[1] >= means[0], "{detail}");
    Ok(detail)
}

fn main() {
    let work = TempDir::new().unwrap();
    let mut suite = Suite {
        results: Vec::new(),
    };
    let secs = Duration::from_secs;
    suite.run("distortion identity suite", secs(1), identity_suite);
    suite.run("scalar oracle suite", secs(1), scalar_oracles);
    suite.run("noise statistics", secs(1), noise_statistics);
    suite.run("gradient verification", secs(30), gradient_verification);
    suite.run("pretext loss exactness", secs(5), pretext_loss_exactness);
    suite.run("determinism", secs(180), || determinism(work.path()));
    let mut trained = None;
    suite.run("learnability", secs(600), || {
        learnability(work.path(), &mut trained)
    });
    suite.run("embedding probe (supplementary)", secs(30), || {
        embedding_probe(&trained)
    });
    suite.run("directional multitask effect", secs(1800), || {
        multitask(work.path())
    });

    let failed: Vec<_> = suite
        .results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n.as_str())
        .collect();
    println!(
        "{} of {} criteria passed",
        suite.results.len() - failed.len(),
        suite.results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
