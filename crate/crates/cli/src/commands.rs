use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use sfsr_core::checkpoint::Checkpoint;
use sfsr_core::data::{load_dataset, read_gray, read_rgb, synth_dataset, write_image, BitDepth, Sample, SynthConfig};
use sfsr_core::gradsuite::{model_check, op_suite, worst, SuiteEntry};
use sfsr_core::training::{
    bicubic_baseline, dataset_checksum, evaluate, run_metadata, super_resolve, train as run_training, EvalMode,
    EvalResult, ReportRow, RunOutput, Trainer, ADAM_PREFIX,
};
use sfsr_core::{Image, ModelConfig, ModelParams, Tensor};

use crate::config::{parse_prob_list, parse_size, Guide, RunConfig};
use crate::{ConfigArgs, EvalArgs, GradcheckArgs, InferArgs, Level, ModeArg, SweepArgs, SynthArgs, TrainArgs};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Tags an error with the exit status it maps to.
trait Exit<T> {
    /// Bad arguments or inputs, detected before any computation.
    fn invalid(self) -> CmdResult<T>;
    /// Failure while computing or writing results.
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Exit<T> for Result<T, E> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(|e| Failure { code: 1, error: e.into() })
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure { code: 2, error: e.into() })
    }
}

fn bits_arg(bits: u32) -> anyhow::Result<BitDepth> {
    Ok(BitDepth::from_bits(bits)?)
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let (h, w) = parse_size(&a.size).invalid()?;
    let cfg = SynthConfig {
        n: a.n,
        h,
        w,
        seed: a.seed,
        scale: a.scale,
        bits: bits_arg(a.bits).invalid()?,
    };
    if a.n == 0 {
        return Err(anyhow!("--n must be at least 1")).invalid();
    }
    if a.scale == 0 || h == 0 || w == 0 || h % a.scale != 0 || w % a.scale != 0 {
        return Err(anyhow!("size {h}x{w} must be positive multiples of the scale {}", a.scale)).invalid();
    }
    let files = synth_dataset(&cfg, &a.out).runtime()?;
    println!("wrote {} files for {} samples under {}", files.len(), a.n, a.out.display());
    Ok(())
}

/// Resolves the run configuration on top of `base`.
fn resolve(args: &ConfigArgs, base: RunConfig) -> anyhow::Result<RunConfig> {
    let mut rc = base;
    if let Some(path) = &args.config {
        rc.apply_file(path)?;
    }
    rc.apply_sets(&args.sets)?;
    let m = &mut rc.model;
    for (slot, v) in [(&mut m.n_stl, args.n_stl), (&mut m.n_acf, args.n_acf), (&mut m.n_rec, args.n_rec)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(g) = args.guide {
        rc.model.guide_channels = g.channels();
    }
    let t = &mut rc.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.p_th {
        t.p_th = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.batch {
        t.batch = v;
    }
    if let Some(v) = args.patch {
        t.patch = v;
    }
    rc.validate()?;
    guide_for(&rc.model)?;
    Ok(rc)
}

fn guide_for(model: &ModelConfig) -> anyhow::Result<Guide> {
    match model.guide_channels {
        3 => Ok(Guide::Rgb),
        1 => Ok(Guide::Luminance),
        c => bail!("guide_channels must be 3 (RGB) or 1 (luminance), got {c}"),
    }
}

fn load_samples(root: &Path, model: &ModelConfig) -> anyhow::Result<Vec<Sample>> {
    let samples = load_dataset(root, model.scale)?;
    if samples.is_empty() {
        bail!("{} holds no samples", root.display());
    }
    Ok(match guide_for(model)? {
        Guide::Rgb => samples,
        Guide::Luminance => samples.into_iter().map(Sample::with_luminance_guide).collect(),
    })
}

fn check_patch(samples: &[Sample], patch: usize) -> anyhow::Result<()> {
    if let Some(s) = samples.iter().find(|s| s.height() < patch || s.width() < patch) {
        bail!("patch {patch} does not fit sample {} of size {}x{}", s.id, s.height(), s.width());
    }
    Ok(())
}

fn fmt_metrics(m: Option<EvalResult>) -> String {
    m.map_or("-".into(), |m| format!("{:.3}/{:.4}", m.psnr, m.ssim))
}

fn print_row(row: &ReportRow, quiet: bool) {
    if quiet && row.guided.is_none() {
        return;
    }
    eprintln!(
        "epoch {:>5} loss {:.6} {} lr {:e} guided {} unguided {}",
        row.epoch,
        row.loss,
        row.loss_kind,
        row.lr,
        fmt_metrics(row.guided),
        fmt_metrics(row.unguided)
    );
}

/// Everything a training run needs, checked before any file is written.
struct Prepared {
    trainer: Trainer,
    samples: Vec<Sample>,
    val: Option<Vec<Sample>>,
}

fn prepare(cfg: &ConfigArgs, data: &Path, val: Option<&Path>, resume: Option<&Path>) -> anyhow::Result<Prepared> {
    let (base, ck) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stored = Trainer::from_checkpoint(&ck, None)?;
            let base = RunConfig {
                model: stored.model,
                train: stored.cfg,
            };
            (base, Some(ck))
        }
        None => (RunConfig::preset(cfg.preset), None),
    };
    let rc = resolve(cfg, base)?;
    let samples = load_samples(data, &rc.model)?;
    check_patch(&samples, rc.train.patch)?;
    let val = val.map(|v| load_samples(v, &rc.model)).transpose()?;
    let trainer = match ck {
        Some(ck) => {
            if let Some((key, want, got)) = rc.model.mismatch(&ck.config) {
                bail!("cannot resume: config sets {key}={want} but the checkpoint has {got}");
            }
            Trainer::from_checkpoint(&ck, Some(rc.train.clone()))?
        }
        None => Trainer::new(rc.model, rc.train.clone())?,
    };
    Ok(Prepared { trainer, samples, val })
}

fn metadata(p: &Prepared, data: &Path, val: Option<&Path>, extra: &[(&str, String)]) -> String {
    let mut m = BTreeMap::new();
    m.insert("data".to_string(), data.display().to_string());
    if let Some(v) = val {
        m.insert("val".into(), v.display().to_string());
    }
    m.insert("samples".into(), p.samples.len().to_string());
    m.insert("dataset_checksum".into(), format!("{:016x}", dataset_checksum(&p.samples)));
    for (k, v) in extra {
        m.insert(k.to_string(), v.clone());
    }
    run_metadata(&p.trainer.model, &p.trainer.cfg, &m)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train(a: TrainArgs) -> CmdResult {
    let p = prepare(&a.cfg, &a.data, a.val.as_deref(), a.resume.as_deref()).invalid()?;
    let resume = a.resume.as_ref().map_or("none".into(), |r| r.display().to_string());
    let meta = metadata(&p, &a.data, a.val.as_deref(), &[("resume", resume)]);
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    write_file(&a.out.join("run.txt"), &meta).runtime()?;
    let out = RunOutput { dir: a.out.clone() };
    let outcome = run_training(p.trainer, &p.samples, p.val.as_deref(), Some(&out), |r| print_row(r, a.quiet)).runtime()?;
    match outcome.report.best_guided() {
        Some((epoch, m)) => println!("best guided psnr {:.4} ssim {:.4} at epoch {epoch}", m.psnr, m.ssim),
        None => println!("trained {} epochs (no evaluation)", outcome.trainer.epoch),
    }
    println!("report {}", out.report_path().display());
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<(ModelConfig, ModelParams<Tensor<f32>>)> {
    let ck = Checkpoint::load(path)?;
    let params = ck.params(&[ADAM_PREFIX])?;
    guide_for(&ck.config)?;
    Ok((ck.config, params))
}

pub fn infer(a: InferArgs) -> CmdResult {
    let (model, params) = load_model(&a.ckpt).invalid()?;
    let bits = bits_arg(a.bits).invalid()?;
    let ir = read_gray(&a.ir).invalid()?;
    let guide = match a.rgb.as_str() {
        "none" => None,
        path => {
            let g = read_rgb(Path::new(path)).invalid()?;
            Some(match guide_for(&model).invalid()? {
                Guide::Rgb => g,
                Guide::Luminance => g.luminance(),
            })
        }
    };
    if let Some(g) = &guide {
        let (h, w) = (ir.height() * model.scale, ir.width() * model.scale);
        if (g.height(), g.width()) != (h, w) {
            return Err(anyhow!(
                "guide is {}x{} but IR {}x{} at scale {} needs {}x{}",
                g.height(),
                g.width(),
                ir.height(),
                ir.width(),
                model.scale,
                h,
                w
            ))
            .invalid();
        }
    }
    let out: Image = super_resolve(&model, &params, &ir, guide.as_ref()).runtime()?;
    write_image(&a.out, &out, bits).runtime()?;
    println!("wrote {}x{} image to {}", out.height(), out.width(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let (model, params) = load_model(&a.ckpt).invalid()?;
    let samples = load_samples(&a.data, &model).invalid()?;
    let mut rows = vec![("bicubic", bicubic_baseline(&samples).runtime()?)];
    if matches!(a.mode, ModeArg::Guided | ModeArg::Both) {
        rows.push(("guided", evaluate(&model, &params, &samples, EvalMode::Guided).runtime()?));
    }
    if matches!(a.mode, ModeArg::Unguided | ModeArg::Both) {
        rows.push(("unguided", evaluate(&model, &params, &samples, EvalMode::Unguided).runtime()?));
    }
    let mut csv = String::from("mode,psnr,ssim\n");
    for (name, m) in &rows {
        println!("{name:<8} psnr {} ssim {}", m.psnr, m.ssim);
        let _ = writeln!(csv, "{name},{},{}", m.psnr, m.ssim);
    }
    if let Some(path) = &a.csv {
        write_file(path, &csv).runtime()?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.coords == 0 {
        return Err(anyhow!("--coords must be positive")).invalid();
    }
    if a.max_rel_err.is_some_and(|t| !(t > 0.0)) {
        return Err(anyhow!("--max-rel-err must be positive")).invalid();
    }
    let mut entries: Vec<SuiteEntry> = Vec::new();
    if matches!(a.level, Level::Op | Level::All) {
        entries.extend(op_suite().runtime()?);
    }
    if matches!(a.level, Level::Model | Level::All) {
        entries.push(model_check(a.coords).runtime()?);
    }
    if let Some(t) = a.max_rel_err {
        entries.iter_mut().for_each(|e| e.tolerance = t);
    }
    println!("{:<24} {:>12} {:>10} {:>8}  result", "check", "max_rel_err", "tolerance", "coords");
    for e in &entries {
        println!(
            "{:<24} {:>12.3e} {:>10.0e} {:>8}  {}",
            e.name,
            e.report.max_rel_err,
            e.tolerance,
            e.report.checked,
            if e.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        let w = worst(&entries).expect("nonempty");
        return Err(anyhow!(
            "{failed} of {} checks failed; worst offender {} with relative error {:.3e} (tolerance {:.0e})",
            entries.len(),
            w.name,
            w.report.max_rel_err,
            w.tolerance
        ))
        .runtime();
    }
    println!("all {} checks passed", entries.len());
    Ok(())
}

/// `(guided − unguided) / guided`.
pub fn relative_drop(guided: f64, unguided: f64) -> f64 {
    (guided - unguided) / guided
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    if a.cfg.p_th.is_some() {
        return Err(anyhow!("use --p-th-list with sweep, not --p-th")).invalid();
    }
    let list = parse_prob_list(&a.p_th_list).invalid()?;
    let mut runs = Vec::new();
    for &p in &list {
        let mut cfg = a.cfg.clone();
        cfg.p_th = Some(p);
        let prep = prepare(&cfg, &a.data, a.val.as_deref(), None).invalid()?;
        runs.push((p, prep));
    }
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    let mut csv = String::from("p_th,psnr_g,ssim_g,psnr_u,ssim_u,psnr_rel_drop,ssim_rel_drop\n");
    let csv_path = a.out.join("sweep.csv");
    for (p, prep) in runs {
        let dir = a.out.join(format!("p_th_{p}"));
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .runtime()?;
        write_file(&dir.join("run.txt"), &metadata(&prep, &a.data, a.val.as_deref(), &[])).runtime()?;
        eprintln!("training p_th={p}");
        let out = RunOutput { dir };
        let Prepared { trainer, samples, val } = prep;
        let outcome = run_training(trainer, &samples, val.as_deref(), Some(&out), |r| print_row(r, a.quiet)).runtime()?;
        let eval_set = val.as_deref().unwrap_or(&samples);
        let t = &outcome.trainer;
        let g = evaluate(&t.model, &t.params, eval_set, EvalMode::Guided).runtime()?;
        let u = evaluate(&t.model, &t.params, eval_set, EvalMode::Unguided).runtime()?;
        let line = format!(
            "{p},{},{},{},{},{},{}",
            g.psnr,
            g.ssim,
            u.psnr,
            u.ssim,
            relative_drop(g.psnr, u.psnr),
            relative_drop(g.ssim, u.ssim)
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
        write_file(&csv_path, &csv).runtime()?;
    }
    println!("sweep table {}", csv_path.display());
    Ok(())
}
