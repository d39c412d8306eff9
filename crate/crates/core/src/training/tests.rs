use super::*;
use crate::data::{synth_samples, BitDepth, SynthConfig};
use crate::model::ModelParams;

fn samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    synth_samples(&SynthConfig { n, h: size, w: size, seed, scale: 8, bits: BitDepth::Eight }).unwrap()
}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 2,
        patch: 16,
        lr_high: 1e-3,
        lr_low: 5e-4,
        eval_every: 0,
        ckpt_every: 0,
        ..TrainConfig::default()
    }
}

fn bits(p: &ModelParams<Tensor<f32>>) -> Vec<u32> {
    let mut out = Vec::new();
    p.for_each(|_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut p = vec![Tensor::new([3], vec![1.0f32, -2.0, 0.5]).unwrap()];
    let before = p.clone();
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::zeros([3])], &mut st, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(p, before);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_first_step_is_lr_sized() {
    let mut p = vec![Tensor::scalar(0.0f32)];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 0.1, &AdamConfig::default()).unwrap();
    // bias-corrected m / sqrt(v) is exactly 1 on the first step
    let want = -0.1 / (1.0 + 1e-8);
    assert!((p[0].data()[0] as f64 - want).abs() < 1e-7);
}

#[test]
fn adam_matches_scalar_reference() {
    // independent scalar Adam in f64
    let cfg = AdamConfig { beta1: 0.8, beta2: 0.99, eps: 1e-6 };
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4];
    let (mut x, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
    let mut p = vec![Tensor::scalar(0.25f32)];
    let mut st = AdamState::new(&p);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        x -= 0.05 * mh / (vh.sqrt() + cfg.eps);
        adam_step(&mut p, &[Tensor::scalar(g as f32)], &mut st, 0.05, &cfg).unwrap();
        assert!((p[0].data()[0] as f64 - x).abs() < 1e-6, "step {t}");
    }
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut p = vec![Tensor::<f32>::zeros([2, 2])];
    let mut st = AdamState::new(&p);
    assert!(adam_step(&mut p, &[Tensor::zeros([4])], &mut st, 0.1, &AdamConfig::default()).is_err());
    assert!(adam_step(&mut p, &[], &mut st, 0.1, &AdamConfig::default()).is_err());
    assert_eq!(st.t, 0);
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = vec![Tensor::new([2], vec![3.0f32, 0.0]).unwrap(), Tensor::new([1], vec![4.0f32]).unwrap()];
    assert!((clip_global_norm(&mut g, 1.0) - 5.0).abs() < 1e-12);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-6 && (g[1].data()[0] - 0.8).abs() < 1e-6);
    let before = g.clone();
    clip_global_norm(&mut g, 10.0);
    assert_eq!(g, before);
}

#[test]
fn lr_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 4e-4);
    assert_eq!(lr_at(3299, &cfg), 4e-4);
    assert_eq!(lr_at(3300, &cfg), 1e-4);
    let flat = TrainConfig { lr_high: 1e-3, lr_low: 1e-3, ..cfg };
    assert!((0..5000).step_by(250).all(|e| lr_at(e, &flat) == 1e-3));
}

#[test]
fn config_text_round_trip() {
    let mut cfg = TrainConfig::default();
    for (k, v) in [("p_th", "0.2"), ("epochs", "7"), ("grad_clip", "1.5"), ("dropout", "per-batch"), ("augment", "false")] {
        cfg.set(k, v).unwrap();
    }
    let mut back = TrainConfig::default();
    for line in cfg.to_kv().lines() {
        let (k, v) = line.split_once('=').unwrap();
        back.set(k, v).unwrap();
    }
    assert_eq!(back, cfg);
    cfg.set("t", "12").unwrap();
    assert_eq!((cfg.t_loss, cfg.t_lr), (12, 12));
    assert!(cfg.set("bogus", "1").unwrap_err().to_string().contains("bogus"));
    assert!(cfg.set("epochs", "x").is_err());
    let model = ModelConfig::tiny();
    assert!(TrainConfig { p_th: 1.5, ..TrainConfig::default() }.validate(&model).is_err());
    assert!(TrainConfig { patch: 12, ..TrainConfig::default() }.validate(&model).is_err());
    assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate(&model).is_err());
    assert!(TrainConfig::default().validate(&model).is_ok());
}

#[test]
fn one_epoch_smoke() {
    let s = samples(1, 16, 1);
    let tr = Trainer::new(ModelConfig::tiny(), TrainConfig { eval_every: 1, ..small_cfg(1) }).unwrap();
    let mut seen = 0;
    let out = train(tr, &s, None, None, |_| seen += 1).unwrap();
    assert_eq!(out.report.rows.len(), 1);
    assert_eq!(seen, 1);
    let row = &out.report.rows[0];
    assert!(row.loss.is_finite() && row.guided.is_some() && row.unguided.is_some());
    assert_eq!(out.trainer.epoch, 1);
    assert_eq!(out.trainer.adam.t, 1);
}

#[test]
fn empty_dataset_is_rejected() {
    let tr = Trainer::new(ModelConfig::tiny(), small_cfg(1)).unwrap();
    assert!(matches!(train(tr, &[], None, None, |_| {}), Err(Error::Dataset(_))));
    let p = ModelParams::init(&ModelConfig::tiny(), &mut stream_rng(0, Stream::Init, 0, 0)).unwrap();
    assert!(evaluate(&ModelConfig::tiny(), &p, &[], EvalMode::Guided).is_err());
}

#[test]
fn dropout_extremes_reach_the_batches() {
    let s = samples(4, 16, 2);
    for (p_th, want) in [(0.0, false), (1.0, true)] {
        let mut tr = Trainer::new(ModelConfig::tiny(), TrainConfig { p_th, ..small_cfg(3) }).unwrap();
        for _ in 0..3 {
            let st = tr.run_epoch(&s).unwrap();
            assert!(st.guide_dropped.iter().flatten().all(|&d| d == want));
        }
    }
}

#[test]
fn training_is_deterministic_and_leaves_data_alone() {
    let s = samples(3, 16, 3);
    let sum = dataset_checksum(&s);
    let run = || {
        let tr = Trainer::new(ModelConfig::tiny(), TrainConfig { p_th: 0.3, ..small_cfg(3) }).unwrap();
        train(tr, &s, None, None, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    let la: Vec<f64> = a.epochs.iter().flat_map(|e| e.step_losses.clone()).collect();
    let lb: Vec<f64> = b.epochs.iter().flat_map(|e| e.step_losses.clone()).collect();
    assert_eq!(la, lb);
    assert_eq!(bits(&a.trainer.params), bits(&b.trainer.params));
    assert_eq!(dataset_checksum(&s), sum);
    // training moved the weights
    let init = Trainer::new(ModelConfig::tiny(), small_cfg(1)).unwrap();
    assert_ne!(bits(&init.params), bits(&a.trainer.params));
}

#[test]
fn loss_kind_and_lr_switch_at_their_epochs() {
    let s = samples(1, 16, 4);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: dir.path().to_path_buf() };
    let cfg = TrainConfig { t_loss: 2, t_lr: 3, ..small_cfg(5) };
    train(Trainer::new(ModelConfig::tiny(), cfg).unwrap(), &s, None, Some(&out), |_| {}).unwrap();
    let text = fs::read_to_string(out.report_path()).unwrap();
    assert!(text.starts_with(REPORT_HEADER));
    let report = MetricsReport::from_csv(&text).unwrap();
    let kinds: Vec<LossKind> = report.rows.iter().map(|r| r.loss_kind).collect();
    assert_eq!(kinds, [LossKind::L1, LossKind::L1, LossKind::L2, LossKind::L2, LossKind::L2]);
    let lrs: Vec<f64> = report.rows.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, [1e-3, 1e-3, 1e-3, 5e-4, 5e-4]);
    let epochs: Vec<usize> = report.rows.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [0, 1, 2, 3, 4]);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let s = samples(3, 16, 5);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: dir.path().to_path_buf() };
    let cfg = TrainConfig { p_th: 0.5, ckpt_every: 2, eval_every: 2, ..small_cfg(4) };
    let full = train(Trainer::new(ModelConfig::tiny(), cfg.clone()).unwrap(), &s, None, Some(&out), |_| {}).unwrap();
    assert!(out.best_path().exists() && out.last_path().exists());

    let ck = Checkpoint::load(&out.epoch_path(2)).unwrap();
    let resumed = Trainer::from_checkpoint(&ck, None).unwrap();
    assert_eq!(resumed.epoch, 2);
    assert_eq!(resumed.cfg, cfg);
    let dir2 = tempfile::tempdir().unwrap();
    let rest = train(resumed, &s, None, Some(&RunOutput { dir: dir2.path().to_path_buf() }), |_| {}).unwrap();
    let tail: Vec<f64> = full.epochs[2..].iter().flat_map(|e| e.step_losses.clone()).collect();
    let again: Vec<f64> = rest.epochs.iter().flat_map(|e| e.step_losses.clone()).collect();
    assert_eq!(tail, again);
    assert_eq!(bits(&full.trainer.params), bits(&rest.trainer.params));
    assert_eq!(full.trainer.adam, rest.trainer.adam);
}

#[test]
fn resume_needs_optimizer_state() {
    let tr = Trainer::new(ModelConfig::tiny(), small_cfg(1)).unwrap();
    let mut ck = tr.to_checkpoint();
    let key = ck.tensors.keys().find(|k| k.starts_with("adam.v.")).unwrap().clone();
    ck.tensors.remove(&key);
    let err = Trainer::from_checkpoint(&ck, None).unwrap_err().to_string();
    assert!(err.contains(&key), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let s = samples(2, 16, 6);
    let mut tr = Trainer::new(ModelConfig::tiny(), small_cfg(1)).unwrap();
    tr.params.rec.conv_out.b.data_mut()[0] = f32::NAN;
    match train(tr, &s, None, None, |_| {}) {
        Err(Error::NonFiniteLoss { epoch, batch, value }) => {
            assert_eq!((epoch, batch), (0, 0));
            assert!(value.is_nan());
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.report)),
    }
}

#[test]
fn zero_residual_model_scores_the_bicubic_baseline() {
    let s = samples(3, 24, 7);
    let cfg = ModelConfig::tiny();
    let p = ModelParams::init(&cfg, &mut stream_rng(9, Stream::Init, 0, 0)).unwrap();
    let base = bicubic_baseline(&s).unwrap();
    for mode in [EvalMode::Guided, EvalMode::Unguided] {
        assert_eq!(evaluate(&cfg, &p, &s, mode).unwrap(), base);
    }
}

#[test]
fn trained_model_sees_the_guide() {
    let s = samples(2, 16, 8);
    let tr = Trainer::new(ModelConfig::tiny(), small_cfg(3)).unwrap();
    let out = train(tr, &s, None, None, |_| {}).unwrap();
    let g = evaluate(&out.trainer.model, &out.trainer.params, &s, EvalMode::Guided).unwrap();
    let u = evaluate(&out.trainer.model, &out.trainer.params, &s, EvalMode::Unguided).unwrap();
    assert_ne!(g, u);
}

#[test]
fn guide_shape_errors_name_both_shapes() {
    let cfg = ModelConfig::tiny();
    let p = ModelParams::init(&cfg, &mut stream_rng(0, Stream::Init, 0, 0)).unwrap();
    let ir = Image::filled(1, 2, 3, 0.5);
    let rgb = Image::filled(3, 16, 16, 0.5);
    let err = super_resolve(&cfg, &p, &ir, Some(&rgb)).unwrap_err().to_string();
    assert!(err.contains("3x16x16") && err.contains("2x3") && err.contains("16x24"), "{err}");
    let out = super_resolve(&cfg, &p, &ir, None).unwrap();
    assert_eq!((out.height(), out.width()), (16, 24));
}

#[test]
fn report_csv_round_trip() {
    let report = MetricsReport {
        rows: vec![
            ReportRow { epoch: 0, loss: 0.25, loss_kind: LossKind::L1, lr: 4e-4, guided: None, unguided: None },
            ReportRow {
                epoch: 1,
                loss: 0.125,
                loss_kind: LossKind::L2,
                lr: 1e-4,
                guided: Some(EvalResult { psnr: 30.5, ssim: 0.9 }),
                unguided: Some(EvalResult { psnr: 28.0, ssim: 0.8 }),
            },
        ],
    };
    let back = MetricsReport::from_csv(&report.to_csv()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.best_guided().unwrap().0, 1);
    assert!(MetricsReport::from_csv("nope\n").is_err());
}
