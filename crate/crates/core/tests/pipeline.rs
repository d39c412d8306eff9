use sfsr_core::data::{load_dataset, synth_dataset, BitDepth, SynthConfig};
use sfsr_core::training::{bicubic_baseline, evaluate, super_resolve, EvalMode, TrainConfig, Trainer};
use sfsr_core::{Checkpoint, ModelConfig};

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch: 2,
        patch: 16,
        eval_every: 0,
        ckpt_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn disk_dataset_trains_saves_and_restores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n: 4, h: 32, w: 24, seed: 9, scale: 8, bits: BitDepth::Sixteen };
    synth_dataset(&cfg, dir.path()).unwrap();
    let samples = load_dataset(dir.path(), 8).unwrap();
    assert_eq!(samples.len(), 4);
    assert_eq!((samples[0].ir_lr.height(), samples[0].ir_lr.width()), (4, 3));

    let model = ModelConfig::tiny();
    let mut trainer = Trainer::new(model, small_train()).unwrap();
    let before = evaluate(&model, &trainer.params, &samples, EvalMode::Guided).unwrap();
    assert_eq!(before, bicubic_baseline(&samples).unwrap());
    for _ in 0..3 {
        let stats = trainer.run_epoch(&samples).unwrap();
        assert!(stats.step_losses.iter().all(|l| l.is_finite()));
    }

    let path = dir.path().join("t.ckpt");
    trainer.to_checkpoint().save(&path).unwrap();
    let back = Trainer::from_checkpoint(&Checkpoint::load_expecting(&path, &model).unwrap(), None).unwrap();
    assert_eq!(back.epoch, trainer.epoch);
    assert_eq!(back.cfg, trainer.cfg);
    let a = super_resolve(&model, &trainer.params, &samples[1].ir_lr, Some(&samples[1].rgb)).unwrap();
    let b = super_resolve(&model, &back.params, &samples[1].ir_lr, Some(&samples[1].rgb)).unwrap();
    assert_eq!(a, b);
    assert!(Checkpoint::load_expecting(&path, &ModelConfig::full()).is_err());
}
