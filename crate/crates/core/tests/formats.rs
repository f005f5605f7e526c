use sbanet_autograd::TensorError;
use sbanet_core::checkpoint::*;
use sbanet_core::{CoreError, Model, ModelConfig};

fn tiny() -> ModelConfig {
    ModelConfig { image_size: 32, base_channels: 8, text_dim: 16, guidance_dim: 16, ..ModelConfig::default() }
}

#[test]
fn checkpoint_round_trips_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sbck");
    let (model, store) = Model::build(&tiny()).unwrap();
    write_checkpoint(&path, &model.cfg, &store).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"SBCK");
    let (cfg, back) = read_checkpoint(&path).unwrap();
    assert_eq!(cfg, model.cfg);
    assert_eq!(back.names(), store.names());
    assert_eq!(back.tensors(), store.tensors());
    assert_eq!(encode_checkpoint(&cfg, &back), bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (model, store) = Model::build(&tiny()).unwrap();
    let bytes = encode_checkpoint(&model.cfg, &store);

    let mut bad = bytes.clone();
    bad[1] = b'X';
    match decode_checkpoint(&bad) {
        Err(CoreError::Tensor(TensorError::Format { offset, .. })) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
    for cut in [2, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).unwrap_err().is_data());
    }
    let mut long = bytes.clone();
    long.push(7);
    assert!(decode_checkpoint(&long).unwrap_err().is_data());
}

#[test]
fn checkpoint_must_match_its_config() {
    let (_, store) = Model::build(&tiny()).unwrap();
    let other = ModelConfig { use_tcsa: false, ..tiny() };
    let bytes = encode_checkpoint(&other, &store);
    match decode_checkpoint(&bytes) {
        Err(CoreError::Data(msg)) => assert!(msg.contains("parameter"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_rejects_unknown_keys_by_name() {
    match ModelConfig::from_json(r#"{"image_size": 64, "use_tcas": false}"#) {
        Err(CoreError::Config(msg)) => assert!(msg.contains("use_tcas"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let cfg = ModelConfig::from_json(r#"{"use_tcsa": false, "seed": 9}"#).unwrap();
    assert_eq!(cfg, ModelConfig { use_tcsa: false, seed: 9, ..ModelConfig::default() });
    assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn config_validation_errors() {
    let bad = [
        r#"{"image_size": 60}"#,
        r#"{"base_channels": 0}"#,
        r#"{"m_override": [1, 2, 3]}"#,
        r#"{"pyramid_group": [9]}"#,
        r#"{"grid_stage": 5}"#,
        r#"{"tcsa_heads": 3}"#,
        r#"{"pwam_heads": 3}"#,
    ];
    for text in bad {
        assert!(matches!(ModelConfig::from_json(text), Err(CoreError::Config(_))), "{text}");
    }
    // Infeasible bins are clipped per stage rather than rejected.
    let cfg = ModelConfig::default();
    assert_eq!(cfg.stage_sizes(), [16, 8, 4, 2]);
    assert_eq!(cfg.feasible_group(2), vec![1, 2]);
    assert_eq!(cfg.feasible_group(16), vec![1, 2, 3, 6]);
}

#[test]
fn config_hash_is_stable() {
    let a = ModelConfig::default();
    assert_eq!(a.hash(), ModelConfig::default().hash());
    assert_eq!(a.hash().len(), 16);
    assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));
    assert_ne!(a.hash(), ModelConfig { seed: 1, ..a.clone() }.hash());
}
