use dod_core::data::{DatasetConfig, ShapesDataset};
use dod_core::io::Checkpoint;
use dod_core::model::{DodModel, ModelConfig};
use dod_core::train::{train, LatentSet, TrainConfig, TrainState};
use dod_core::Error;

fn setup() -> (DodModel, TrainState<f32>, LatentSet<f32>, TrainConfig, ModelConfig) {
    let mc = ModelConfig::preset("micro").unwrap();
    let (model, params) = DodModel::init::<f32>(mc.clone(), 5).unwrap();
    let data = ShapesDataset::new(DatasetConfig {
        samples: 64,
        ..DatasetConfig::default()
    })
    .unwrap()
    .train_split()
    .unwrap();
    let cfg = TrainConfig {
        batch: 8,
        ..TrainConfig::default()
    };
    (model, TrainState::new(params, 5), data, cfg, mc)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (model, mut straight, data, cfg, mc) = setup();
    train(&model, &mut straight, &cfg, &data, 6, |_, _| Ok(())).unwrap();

    let (_, mut first, ..) = setup();
    train(&model, &mut first, &cfg, &data, 3, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step3.ckpt");
    Checkpoint::from_train_state(&first, &mc, "fp".into()).save(&path).unwrap();
    drop(first);

    let loaded = Checkpoint::load(&path).unwrap();
    let (_, layout, ..) = setup();
    let mut resumed = loaded.train_state(&layout.params).unwrap();
    assert_eq!(resumed.step, 3);
    train(&model, &mut resumed, &cfg, &data, 3, |_, _| Ok(())).unwrap();

    let a = Checkpoint::from_train_state(&straight, &mc, "fp".into());
    let b = Checkpoint::from_train_state(&resumed, &mc, "fp".into());
    assert_eq!(a.hash(), b.hash());
    assert_eq!(straight.params, resumed.params);
}

#[test]
fn corrupted_files_fail_loudly() {
    let (_, state, _, _, mc) = setup();
    let bytes = Checkpoint::from_train_state(&state, &mc, "fp".into()).encode();
    let (_, layout, ..) = setup();
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Checkpoint::decode(&newer), Err(Error::UnsupportedVersion { .. })));
    let other = ModelConfig::preset("mini").unwrap();
    let (_, other_params) = DodModel::init::<f32>(other, 0).unwrap();
    let ck = Checkpoint::decode(&bytes).unwrap();
    assert!(ck.params(&other_params).is_err());
    assert_eq!(ck.params(&layout.params).unwrap(), layout.params);
}
