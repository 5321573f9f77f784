use spglift::dataio::{generate_dataset, Dataset, GeneratorConfig, ValidationTolerance};
use spglift::encoder::EncoderConfig;
use spglift::evaluator::{evaluate_clips, Protocols};
use spglift::trainer::{train, validation_mpjpe, Checkpoint, TrainConfig, TrainIo};
use spglift::Error;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        subjects: 3,
        train_subjects: 2,
        frames: 40,
        actions: vec!["walk".into(), "sit".into()],
        ..Default::default()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        seed: 3,
        encoder: EncoderConfig {
            window: 9,
            channels: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.spg");
    let data = generate_dataset(&small(), 11).unwrap();
    data.write(&path).unwrap();
    let back = Dataset::read(&path).unwrap();
    back.validate(ValidationTolerance::STORED).unwrap();
    assert_eq!(back.hash().unwrap(), data.hash().unwrap());
    assert_eq!(back.clips.len(), data.clips.len());
    assert_eq!(back.train_clips().len() + back.test_clips().len(), back.clips.len());
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.spg");
    generate_dataset(&small(), 11).unwrap().write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(Dataset::read(&path).is_err());
}

#[test]
fn checkpoint_on_disk_evaluates_like_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small(), 12).unwrap();
    let io = TrainIo {
        checkpoint: Some(dir.path().join("m.spg")),
        best_checkpoint: Some(dir.path().join("m.best.spg")),
        log: Some(dir.path().join("m.csv")),
        inject_nan_at: None,
    };
    let out = train(&data, &tiny_train(3), &io, None).unwrap();
    assert_eq!(out.history.len(), 3);

    let ck = Checkpoint::read(&dir.path().join("m.spg")).unwrap();
    assert_eq!(ck.hash().unwrap(), out.last.hash().unwrap());
    let best = Checkpoint::read(&dir.path().join("m.best.spg")).unwrap();
    assert_eq!(best.meta.val_mpjpe_mm.len(), best.meta.epochs_completed);
    let v = validation_mpjpe(&ck.model, &data).unwrap();
    assert!((v - ck.meta.val_mpjpe_mm[2]).abs() < 1e-6 * v, "{v} vs {}", ck.meta.val_mpjpe_mm[2]);

    let report = evaluate_clips(&ck.model, &data.test_clips(), &data.skeleton, Protocols::Both, true).unwrap();
    let p1 = report.average.mpjpe_mm.unwrap();
    let p2 = report.average.pmpjpe_mm.unwrap();
    assert!((p1 - v).abs() < 1e-6 * v);
    assert!(p2 > 0.0 && p2 <= p1);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(std::fs::read_to_string(dir.path().join("m.csv")).unwrap().lines().count(), 4);
}

#[test]
fn resume_rejects_a_different_run() {
    let data = generate_dataset(&small(), 13).unwrap();
    let first = train(&data, &tiny_train(1), &TrainIo::default(), None).unwrap();
    let mut other = tiny_train(2);
    other.lr0 = 5e-4;
    let err = train(&data, &other, &TrainIo::default(), Some(first.last)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
