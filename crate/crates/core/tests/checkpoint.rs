use gracaps::checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
use gracaps::trainer::TrainState;
use gracaps::{Aggregation, ConvSpec, Error, ModelConfig};
use gracaps_tensor::Tensor;

fn tiny(aggregation: Aggregation) -> ModelConfig {
    ModelConfig {
        input_side: 6,
        input_channels: 1,
        conv: vec![
            ConvSpec { out_channels: 2, kernel: 3, stride: 1 },
            ConvSpec { out_channels: 6, kernel: 2, stride: 1 },
        ],
        heads: 2,
        grid_side: 3,
        capsule_dim_in: 3,
        capsule_dim_out: 2,
        classes: 2,
        sigma: 0.75,
        aggregation,
        routing_iterations: 2,
        normalize_adjacency: true,
        decoder_hidden: vec![4],
    }
}

fn state(aggregation: Aggregation) -> TrainState {
    let mut s = TrainState::init(tiny(aggregation), 5).unwrap();
    s.epoch = 3;
    s.adam.step = 17;
    for (_, t) in s.adam.m.iter_mut() {
        t.data_mut().fill(0.25);
    }
    s
}

#[test]
fn round_trip_is_exact_for_every_aggregation() {
    for aggregation in Aggregation::ALL {
        let ck = state(aggregation).to_checkpoint();
        let bytes = ck.encode();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let resumed = TrainState::from_checkpoint(&back).unwrap();
        assert_eq!(resumed, state(aggregation));
    }
}

#[test]
fn optional_sections_can_be_absent() {
    let mut ck = state(Aggregation::GraphPool).to_checkpoint();
    ck.adam = None;
    ck.decoder = None;
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(back, ck);
    assert!(TrainState::from_checkpoint(&back).is_err());
}

#[test]
fn save_is_byte_stable_and_load_checks_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let ck = state(Aggregation::GraphPool).to_checkpoint();
    ck.save(&a).unwrap();
    ck.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(Checkpoint::load(&a, Some(&ck.config)).unwrap(), ck);

    let other = ModelConfig { sigma: 2.0, ..ck.config.clone() };
    match Checkpoint::load(&a, Some(&other)) {
        Err(Error::Checkpoint(CheckpointError::ConfigMismatch { field, found, expected })) => {
            assert_eq!(field, "sigma");
            assert_eq!((found.as_str(), expected.as_str()), ("0.75", "2.0"));
        }
        other => panic!("expected a config mismatch, got {other:?}"),
    }
    // No temp files left behind.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = state(Aggregation::Average).to_checkpoint().encode();
    for cut in 0..bytes.len() {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::decode(&long), Err(CheckpointError::Corrupt(_))));
}

#[test]
fn header_errors() {
    let bytes = state(Aggregation::GraphPool).to_checkpoint().encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::decode(&newer),
        Err(CheckpointError::Version { found }) if found == VERSION + 1
    ));
}

#[test]
fn wrong_record_shape_is_named() {
    let mut ck = state(Aggregation::GraphPool).to_checkpoint();
    let pool = ck.model.get_mut("pool").unwrap();
    *pool = Tensor::zeros([2, 3]).reshape([3, 2]).unwrap();
    match Checkpoint::decode(&ck.encode()) {
        Err(CheckpointError::Shape { name, expected, found }) => {
            assert_eq!(name, "pool");
            assert_eq!((expected, found), (vec![2, 2], vec![3, 2]));
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn bit_flips_never_panic() {
    let bytes = state(Aggregation::DynamicRouting).to_checkpoint().encode();
    for i in (0..bytes.len()).step_by(7) {
        let mut flipped = bytes.clone();
        flipped[i] ^= 0x5a;
        let _ = Checkpoint::decode(&flipped);
    }
}
