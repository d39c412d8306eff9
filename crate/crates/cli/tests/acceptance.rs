//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order. Exits
//! nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfsr_core::checkpoint::Checkpoint;
use sfsr_core::data::{
    apply_modality_dropout, draw_drop, load_dataset, stream_rng, synth_samples, BitDepth, Batch, DropoutMode, Stream,
    SynthConfig,
};
use sfsr_core::gradsuite::{model_check, op_suite, worst};
use sfsr_core::metrics::{psnr, psnr_slices, ssim};
use sfsr_core::model::infer;
use sfsr_core::resample::{bicubic_resize, bicubic_resize_tensor};
use sfsr_core::training::{bicubic_baseline, evaluate, lr_at, EvalMode, TrainConfig, Trainer, ADAM_PREFIX};
use sfsr_core::{count_params, Image, ModelConfig, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn sfsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfsr"))
        .args(args)
        .output()
        .expect("spawn sfsr")
}

fn sfsr_ok(args: &[&str]) -> Result<String, String> {
    let out = sfsr(args);
    if !out.status.success() {
        return Err(format!(
            "sfsr {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn random_image(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Image {
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let ops = op_suite().map_err(|e| e.to_string())?;
    let w = worst(&ops).expect("ops");
    ensure!(ops.iter().all(|e| e.report.max_rel_err < 1e-6), "op {} rel err {:e}", w.name, w.report.max_rel_err);
    let model = model_check(6).map_err(|e| e.to_string())?;
    ensure!(model.report.max_rel_err < 1e-4, "tiny model rel err {:e}", model.report.max_rel_err);
    let took = t0.elapsed();
    ensure!(took < Duration::from_secs(300), "took {took:?}");
    Ok(format!(
        "{} ops, worst {} {:.1e}; tiny model {:.1e} over {} coords; {:.1}s",
        ops.len(),
        w.name,
        w.report.max_rel_err,
        model.report.max_rel_err,
        model.report.checked,
        took.as_secs_f64()
    ))
}

fn c2_skip_identity(dir: &Path) -> Outcome {
    let cfg = ModelConfig::tiny();
    let trainer = Trainer::new(cfg, TrainConfig::default()).map_err(|e| e.to_string())?;
    ensure!(
        trainer.params.rec.conv_out.w.data().iter().all(|&v| v == 0.0),
        "final conv is not zero at init"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ir = Tensor::from_fn([2, 1, 3, 4], |_| rng.gen::<f32>());
    let rgb = Tensor::from_fn([2, 3, 24, 32], |_| rng.gen::<f32>());
    let out = infer(&cfg, &trainer.params, &ir, &rgb).map_err(|e| e.to_string())?;
    let up = bicubic_resize_tensor(&ir, 24, 32).map_err(|e| e.to_string())?;
    ensure!(out.shape() == up.shape(), "shape {:?} vs {:?}", out.shape(), up.shape());
    let same = out.data().iter().zip(up.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(same, "forward output differs from bicubic");

    let data = dir.join("c2_data");
    let ckpt = dir.join("c2.ckpt");
    sfsr_ok(&["synth", "--out", p(&data), "--n", "6", "--size", "32x40", "--seed", "2"])?;
    trainer.to_checkpoint().save(&ckpt).map_err(|e| e.to_string())?;
    let samples = load_dataset(&data, cfg.scale).map_err(|e| e.to_string())?;
    let base = bicubic_baseline(&samples).map_err(|e| e.to_string())?;
    let stdout = sfsr_ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--mode", "both"])?;
    let mut seen = 0;
    for line in stdout.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() == 5 && (f[0] == "guided" || f[0] == "unguided") {
            let (ps, ss): (f64, f64) = (f[2].parse().map_err(|_| line.to_string())?, f[4].parse().map_err(|_| line.to_string())?);
            ensure!(
                ps.to_bits() == base.psnr.to_bits() && ss.to_bits() == base.ssim.to_bits(),
                "{line} vs in-process baseline {} {}",
                base.psnr,
                base.ssim
            );
            seen += 1;
        }
    }
    ensure!(seen == 2, "eval printed {seen} model rows:\n{stdout}");
    Ok(format!("bit-exact forward; eval == baseline {:.4} dB / {:.4}", base.psnr, base.ssim))
}

fn c3_learnability() -> Outcome {
    let t0 = Instant::now();
    let samples = synth_samples(&SynthConfig {
        n: 4,
        h: 64,
        w: 64,
        seed: 3,
        scale: 8,
        bits: BitDepth::Eight,
    })
    .map_err(|e| e.to_string())?;
    ensure!(samples[0].ir_lr.height() == 8 && samples[0].ir_lr.width() == 8, "LR is not 8x8");
    let cfg = TrainConfig {
        epochs: 2000,
        batch: 4,
        patch: 64,
        augment: false,
        lr_high: 1e-3,
        lr_low: 1e-3,
        t_loss: 2000,
        t_lr: 2000,
        eval_every: 0,
        ckpt_every: 0,
        ..TrainConfig::default()
    };
    let base = bicubic_baseline(&samples).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).map_err(|e| e.to_string())?;
    let mut last = 0.0;
    for step in 1..=2000 {
        trainer.run_epoch(&samples).map_err(|e| e.to_string())?;
        if step % 50 == 0 || step == 2000 {
            let e = evaluate(&trainer.model, &trainer.params, &samples, EvalMode::Guided).map_err(|e| e.to_string())?;
            last = e.psnr;
            if e.psnr >= 40.0 {
                let took = t0.elapsed();
                ensure!(took < Duration::from_secs(1800), "took {took:?}");
                return Ok(format!(
                    "{:.2} dB after {step} steps (bicubic {:.2} dB), {:.0}s",
                    e.psnr,
                    base.psnr,
                    took.as_secs_f64()
                ));
            }
        }
    }
    Err(format!("train PSNR {last:.2} dB after 2000 steps"))
}

fn c4_budget() -> Outcome {
    let cfg = ModelConfig::full();
    ensure!((cfg.n_stl, cfg.n_acf, cfg.n_rec) == (2, 3, 3), "full preset depths");
    ensure!((cfg.embed, cfg.heads, cfg.window, cfg.mlp_ratio) == (60, 6, 9, 2), "full preset widths");
    let n = count_params(&cfg);
    let rel = n as f64 / 3.30e6 - 1.0;
    ensure!(rel.abs() <= 0.15, "{n} params ({:+.1}%)", rel * 100.0);
    Ok(format!("{n} params ({:+.1}% vs 3.30M)", rel * 100.0))
}

fn c5_dropout() -> Outcome {
    let draws = 10_000u64;
    let frac = |p_th: f64| {
        let dropped = (0..draws)
            .filter(|&i| draw_drop(p_th, &mut stream_rng(17, Stream::BatchDropout, 0, i)))
            .count();
        dropped as f64 / draws as f64
    };
    let (f0, f2, f1) = (frac(0.0), frac(0.2), frac(1.0));
    ensure!((0.188..=0.212).contains(&f2), "p_th 0.2 dropped {f2}");
    ensure!(f0 == 0.0 && f1 == 1.0, "extremes {f0} {f1}");

    // the same statistic through whole batches
    let mut rng = stream_rng(18, Stream::BatchDropout, 0, 0);
    let mut dropped = 0usize;
    for _ in 0..draws / 16 {
        let mut b = Batch {
            ir_lr: Tensor::zeros([16, 1, 1, 1]),
            rgb: Tensor::full([16, 3, 8, 8], 0.5),
            ir_hr: Tensor::zeros([16, 1, 8, 8]),
            guide_dropped: vec![false; 16],
        };
        apply_modality_dropout(&mut b, 0.2, DropoutMode::PerSample, &mut rng).map_err(|e| e.to_string())?;
        dropped += b.guide_dropped.iter().filter(|&&d| d).count();
    }
    let fb = dropped as f64 / (draws / 16 * 16) as f64;
    ensure!((0.188..=0.212).contains(&fb), "batched p_th 0.2 dropped {fb}");
    Ok(format!("p_th 0.2 -> {f2:.4} (batched {fb:.4}); p_th 0 -> {f0}; p_th 1 -> {f1}"))
}

fn c6_robustness(dir: &Path) -> Outcome {
    let t0 = Instant::now();
    let (train, val, out) = (dir.join("c6_train"), dir.join("c6_val"), dir.join("c6_sweep"));
    sfsr_ok(&["synth", "--out", p(&train), "--n", "200", "--size", "32x32", "--seed", "11"])?;
    sfsr_ok(&["synth", "--out", p(&val), "--n", "24", "--size", "32x32", "--seed", "12"])?;
    sfsr_ok(&[
        "sweep", "--data", p(&train), "--val", p(&val), "--out", p(&out), "--preset", "tiny", "--p-th-list", "0,0.2",
        "--epochs", "200", "--batch", "16", "--patch", "16", "--seed", "5", "--set", "lr_high=1e-3", "--set",
        "eval_every=0", "--set", "ckpt_every=0", "--quiet",
    ])?;
    let csv = fs::read_to_string(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        ensure!(f.len() == 7, "bad row {line}");
        rows.push(f);
    }
    ensure!(rows.len() == 2, "expected two sweep rows:\n{csv}");
    let gap = |r: &[f64]| (r[1] - r[3]) / r[1];
    let (g0, g2) = (gap(&rows[0]), gap(&rows[1]));
    ensure!(
        (g0 - rows[0][5]).abs() < 1e-12 && (g2 - rows[1][5]).abs() < 1e-12,
        "relative drop column disagrees with the metrics"
    );
    let detail = format!(
        "gap p_th=0: {:.2}% (g {:.2} / u {:.2} dB), p_th=0.2: {:.2}% (g {:.2} / u {:.2} dB); {:.0}s",
        g0 * 100.0,
        rows[0][1],
        rows[0][3],
        g2 * 100.0,
        rows[1][1],
        rows[1][3],
        t0.elapsed().as_secs_f64()
    );
    ensure!(g2 < g0, "gap did not shrink: {detail}");
    Ok(detail)
}

/// Direct 11×11 Gaussian-window SSIM over every fully covered position.
fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    ma += k * a[(y + i) * w + x + j];
                    mb += k * b[(y + i) * w + x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let (da, db) = (a[(y + i) * w + x + j] - ma, b[(y + i) * w + x + j] - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn c7_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let (mut worst_p, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let a = random_image(1, 64, 64, &mut rng);
        let noise: f32 = rng.gen_range(0.01..0.3);
        let bd: Vec<f32> = a.data().iter().map(|&v| (v + noise * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect();
        let b = Image::new(1, 64, 64, bd).unwrap();
        let (x, y): (Vec<f64>, Vec<f64>) = a.data().iter().zip(b.data()).map(|(&u, &v)| (u as f64, v as f64)).unzip();
        let mse = x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / x.len() as f64;
        let p_ref = -10.0 * mse.log10();
        worst_p = worst_p.max((psnr(&a, &b).map_err(|e| e.to_string())? - p_ref).abs());
        worst_s = worst_s.max((ssim(&a, &b).map_err(|e| e.to_string())? - ssim_reference(&x, &y, 64, 64)).abs());
    }
    ensure!(worst_p < 1e-6, "psnr differs by {worst_p:e} dB");
    ensure!(worst_s < 1e-4, "ssim differs by {worst_s:e}");
    // 0.1 has no exact binary form, so "exactly" means to f64 rounding
    let zeros = vec![0.0f64; 4096];
    let off = vec![0.1f64; 4096];
    let p20 = psnr_slices(&zeros, &off, 1.0).map_err(|e| e.to_string())?;
    ensure!((p20 - 20.0).abs() < 1e-12, "offset psnr {p20}");
    Ok(format!("max |dPSNR| {worst_p:.1e} dB, max |dSSIM| {worst_s:.1e}, offset 0.1 -> {p20} dB"))
}

fn keys_reference(t: f64) -> f64 {
    let t = t.abs();
    match t {
        t if t < 1.0 => 1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0,
        t if t < 2.0 => -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0,
        _ => 0.0,
    }
}

/// Per-pixel 4×4 tap gather with clamped indices.
fn resize_reference(img: &Image, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let mut acc = 0.0;
            for iy in sy.floor() as i64 - 1..=sy.floor() as i64 + 2 {
                for ix in sx.floor() as i64 - 1..=sx.floor() as i64 + 2 {
                    let v = img.get(0, iy.clamp(0, h as i64 - 1) as usize, ix.clamp(0, w as i64 - 1) as usize) as f64;
                    acc += keys_reference(sy - iy as f64) * keys_reference(sx - ix as f64) * v;
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

fn c8_resampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let img = random_image(1, 13, 17, &mut rng);
    let same = bicubic_resize(&img, 13, 17).map_err(|e| e.to_string())?;
    let id_err = img.data().iter().zip(same.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure!(id_err < 1e-6, "identity error {id_err}");

    let (h, w, s) = (10usize, 12usize, 8usize);
    let ramp = |y: f64, x: f64| 0.1 + 0.03 * y + 0.02 * x;
    let src = Image::new(1, h, w, (0..h * w).map(|i| ramp((i / w) as f64, (i % w) as f64) as f32).collect()).unwrap();
    let up = bicubic_resize(&src, h * s, w * s).map_err(|e| e.to_string())?;
    let mut ramp_err = 0.0f64;
    // interior: all four taps in bounds
    for oy in 2 * s..(h - 2) * s {
        for ox in 2 * s..(w - 2) * s {
            let sy = (oy as f64 + 0.5) / s as f64 - 0.5;
            let sx = (ox as f64 + 0.5) / s as f64 - 0.5;
            ramp_err = ramp_err.max((up.get(0, oy, ox) as f64 - ramp(sy, sx)).abs());
        }
    }
    ensure!(ramp_err < 1e-6, "ramp error {ramp_err:e}");

    let mut ref_err = 0.0f64;
    for (ih, iw, oh, ow) in [(5, 7, 40, 56), (16, 16, 2, 2), (9, 6, 13, 11), (8, 8, 8, 8)] {
        let img = random_image(1, ih, iw, &mut rng);
        let got = bicubic_resize(&img, oh, ow).map_err(|e| e.to_string())?;
        let want = resize_reference(&img, oh, ow);
        for (g, r) in got.data().iter().zip(&want) {
            ref_err = ref_err.max((*g as f64 - r).abs());
        }
    }
    ensure!(ref_err < 1e-6, "reference error {ref_err:e}");
    Ok(format!("identity {id_err:.1e}, ramp {ramp_err:.1e}, reference {ref_err:.1e}"))
}

fn losses(report: &Path) -> Result<Vec<(usize, String)>, String> {
    let text = fs::read_to_string(report).map_err(|e| format!("{}: {e}", report.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap_or(usize::MAX), f[1].to_string())
        })
        .collect())
}

fn c9_persistence(dir: &Path) -> Outcome {
    let data = dir.join("c9_data");
    sfsr_ok(&["synth", "--out", p(&data), "--n", "8", "--size", "32x32", "--seed", "4"])?;
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train", "--data", p(&data), "--out", p(out), "--preset", "tiny", "--epochs", "4", "--batch", "4",
            "--patch", "16", "--seed", "9", "--p-th", "0.2", "--set", "ckpt_every=2", "--set", "eval_every=0",
        ];
        args.extend_from_slice(extra);
        sfsr_ok(&args)
    };
    let (a, b, c) = (dir.join("c9_a"), dir.join("c9_b"), dir.join("c9_c"));
    run(&a, &[])?;
    run(&b, &[])?;
    let (la, lb) = (losses(&a.join("report.csv"))?, losses(&b.join("report.csv"))?);
    ensure!(la.len() == 4 && la == lb, "loss sequences differ:\n{la:?}\n{lb:?}");
    let ck = |d: &Path| Checkpoint::load(&d.join("last.ckpt")).map_err(|e| e.to_string());
    ensure!(ck(&a)?.tensors == ck(&b)?.tensors, "final parameters differ");

    let orig = ck(&a)?;
    let copy = dir.join("c9_copy.ckpt");
    orig.save(&copy).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&copy).map_err(|e| e.to_string())?;
    let bit_exact = orig.tensors.iter().all(|(k, t)| {
        back.tensors[k].shape() == t.shape()
            && back.tensors[k].data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure!(bit_exact && back == orig, "checkpoint round trip is not bit-exact");
    let raw = |path: &Path| fs::read(path).map_err(|e| e.to_string());
    ensure!(raw(&copy)? == raw(&a.join("last.ckpt"))?, "re-saved bytes differ");

    run(&c, &["--resume", p(&a.join("epoch_000002.ckpt"))])?;
    let lc = losses(&c.join("report.csv"))?;
    ensure!(lc == la[2..], "resumed losses {lc:?} vs uninterrupted {:?}", &la[2..]);
    let strip = |ck: Checkpoint| ck.params(&[ADAM_PREFIX]).map(|p| p.to_named()).map_err(|e| e.to_string());
    ensure!(strip(ck(&c)?)? == strip(ck(&a)?)?, "resumed final parameters differ");
    Ok(format!("4 identical losses, bit-exact checkpoint, resume from epoch 2 matches {} losses", lc.len()))
}

fn c10_schedule(dir: &Path) -> Outcome {
    let d = TrainConfig::default();
    ensure!(d.t_loss == 3300 && d.t_lr == 3300, "default switch epochs {} {}", d.t_loss, d.t_lr);
    ensure!(lr_at(0, &d) == 4e-4 && lr_at(3299, &d) == 4e-4 && lr_at(3300, &d) == 1e-4, "default lr schedule");

    let data = dir.join("c10_data");
    let out = dir.join("c10_run");
    sfsr_ok(&["synth", "--out", p(&data), "--n", "4", "--size", "16x16", "--seed", "5"])?;
    sfsr_ok(&[
        "train", "--data", p(&data), "--out", p(&out), "--preset", "tiny", "--epochs", "6", "--batch", "2", "--patch",
        "16", "--set", "t=3", "--set", "eval_every=0", "--set", "ckpt_every=0",
    ])?;
    let text = fs::read_to_string(out.join("report.csv")).map_err(|e| e.to_string())?;
    let mut n = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let epoch: usize = f[0].parse().map_err(|_| line.to_string())?;
        let lr: f64 = f[3].parse().map_err(|_| line.to_string())?;
        let (kind, want_lr) = if epoch < 3 { ("L1", 4e-4) } else { ("L2", 1e-4) };
        ensure!(f[2] == kind && lr == want_lr, "epoch {epoch}: {} lr {lr}", f[2]);
        n += 1;
    }
    ensure!(n == 6, "{n} report rows");
    Ok("L1->L2 and lr 4e-4->1e-4 at epoch T=3 in report.csv; defaults T=3300".into())
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 gradient suite", Box::new(c1_gradients)),
        ("2 skip identity", Box::new(|| c2_skip_identity(dir))),
        ("3 learnability", Box::new(c3_learnability)),
        ("4 parameter budget", Box::new(c4_budget)),
        ("5 dropout statistics", Box::new(c5_dropout)),
        ("6 robustness trend", Box::new(|| c6_robustness(dir))),
        ("7 metric oracles", Box::new(c7_metrics)),
        ("8 resampling oracles", Box::new(c8_resampling)),
        ("9 determinism and persistence", Box::new(|| c9_persistence(dir))),
        ("10 loss schedule", Box::new(|| c10_schedule(dir))),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f) in &criteria {
        if only.as_ref().is_some_and(|o| !name.contains(o.as_str())) {
            continue;
        }
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match res {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
