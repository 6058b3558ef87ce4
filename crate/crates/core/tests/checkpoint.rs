mod common;

use common::{micro_config, synth_split};
use mamba_cnn::data::AugmentConfig;
use mamba_cnn::layers::Mode;
use mamba_cnn::training::{peek_precision, Checkpoint, TrainConfig, Trainer};
use mamba_cnn::{Error, Precision, Rng};

fn config() -> TrainConfig {
    let mut c = TrainConfig {
        epochs: 6,
        batch_size: 8,
        seed: 21,
        precision: Precision::F64,
        augment: Some(AugmentConfig::for_input(16)),
        ..TrainConfig::default()
    };
    c.optimizer.lr = 3e-3;
    c
}

#[test]
fn save_load_save_is_byte_identical() {
    let (train, val, stats) = synth_split::<f64>(12, 4, 16, 1);
    let mut trainer = Trainer::<f64>::new(&micro_config(), &config(), &stats).unwrap();
    trainer.run_until(&train, &val, 2, &mut ()).unwrap();
    let ckpt = Checkpoint::from_trainer(&trainer);
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.mckp");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(peek_precision(&path).unwrap(), Precision::F64);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (train, val, stats) = synth_split::<f64>(12, 4, 16, 2);
    let mut straight = Trainer::<f64>::new(&micro_config(), &config(), &stats).unwrap();
    let full = straight.fit(&train, &val, &mut ()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.mckp");
    let mut first = Trainer::<f64>::new(&micro_config(), &config(), &stats).unwrap();
    first.run_until(&train, &val, 3, &mut ()).unwrap();
    Checkpoint::from_trainer(&first).save(&path).unwrap();
    drop(first);

    let mut resumed = Checkpoint::<f64>::load(&path).unwrap().into_trainer().unwrap();
    assert_eq!(resumed.state.epoch, 3);
    let rest = resumed.fit(&train, &val, &mut ()).unwrap();
    assert_eq!(rest.history, full.history);
    assert_eq!(resumed.model.snapshot(), straight.model.snapshot());
}

#[test]
fn weights_only_checkpoint_rebuilds_the_model() {
    let (train, val, stats) = synth_split::<f32>(8, 4, 16, 3);
    let cfg = TrainConfig { precision: Precision::F32, ..config() };
    let mut trainer = Trainer::<f32>::new(&micro_config(), &cfg, &stats).unwrap();
    trainer.run_until(&train, &val, 1, &mut ()).unwrap();
    let ckpt = Checkpoint::from_model(&trainer.model, &cfg, &stats);
    let back = Checkpoint::<f32>::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert!(back.train.is_none());
    let mut model = back.build_model().unwrap();
    model.set_mode(Mode::Eval);
    trainer.model.set_mode(Mode::Eval);
    let x = val.batch_images(&[0, 1, 2]).unwrap();
    assert_eq!(
        model.forward(&x, &mut Rng::new(0)).unwrap(),
        trainer.model.forward(&x, &mut Rng::new(0)).unwrap()
    );
    assert_eq!(back.stats, stats);
}

#[test]
fn corruption_is_detected() {
    let (train, val, stats) = synth_split::<f64>(8, 4, 16, 4);
    let mut trainer = Trainer::<f64>::new(&micro_config(), &config(), &stats).unwrap();
    trainer.run_until(&train, &val, 1, &mut ()).unwrap();
    let bytes = Checkpoint::from_trainer(&trainer).to_bytes().unwrap();

    let truncated = &bytes[..bytes.len() - 7];
    assert!(matches!(Checkpoint::<f64>::from_bytes(truncated), Err(Error::Checksum { .. })));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::<f64>::from_bytes(&flipped), Err(Error::Checksum { .. })));

    let mut version = bytes.clone();
    version[5..9].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&version),
        Err(Error::VersionMismatch { found: 7, expected: 1 })
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&magic), Err(Error::Format { .. })));

    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes),
        Err(Error::PrecisionMismatch { found: Precision::F64, expected: Precision::F32 })
    ));
}
