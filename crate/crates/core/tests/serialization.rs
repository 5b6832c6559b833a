mod common;

use cgmf_core::cgmf::MODULE_NAMES;
use cgmf_core::io::{
    inputs_from_container, inputs_to_container, load_weights, load_weights_with, save_weights,
    save_weights_as, weights_to_container, ConfigFile, Dtype, IoError, LoadMode, StoredTensor,
    TensorContainer,
};
use cgmf_core::pipeline::{synth_tokens, TokenDistribution};
use cgmf_core::{CgmfWeights, FusionConfig, Toggles};
use common::random_weights;

fn bits(w: &CgmfWeights) -> Vec<u64> {
    w.params()
        .iter()
        .flat_map(|(_, v)| v.iter().map(|x| x.to_bits()))
        .chain(w.modules().iter().filter_map(|(_, m)| match m {
            cgmf_core::cgmf::ModuleRef::Norm(p) => Some(p.epsilon().to_bits()),
            _ => None,
        }))
        .collect()
}

#[test]
fn weight_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = FusionConfig::tiny();
    for seed in 0..50 {
        let w = random_weights(&config, seed);
        let path = dir.path().join(format!("w{seed}.cgmf"));
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path, &config).unwrap();
        assert_eq!(bits(&back), bits(&w));

        // Saving the loaded weights reproduces the file byte for byte.
        let again = dir.path().join(format!("again{seed}.cgmf"));
        save_weights(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn truncated_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = FusionConfig::tiny();
    let path = dir.path().join("w.cgmf");
    save_weights(&random_weights(&config, 1), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 4, 8, 12, 16, 40, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(
            matches!(load_weights(&path, &config), Err(IoError::Corrupt(_))),
            "cut at {cut}"
        );
    }
    assert!(matches!(
        load_weights(dir.path().join("absent"), &config),
        Err(IoError::File { .. })
    ));
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let small = FusionConfig::tiny();
    let c = weights_to_container(&random_weights(&small, 2), Dtype::F64);
    let wider = FusionConfig {
        d_visual: 10,
        ..small
    };
    match cgmf_core::io::weights_from_container(&c, &wider, LoadMode::Strict) {
        Err(IoError::Shape { name, expected, actual }) => {
            assert_eq!(name, "ln_v.gain");
            assert_eq!((expected, actual), (vec![10], vec![8]));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn strict_mode_rejects_extra_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let config = FusionConfig::tiny();
    let mut c = weights_to_container(&random_weights(&config, 3), Dtype::F64);
    c.insert("stray", StoredTensor::f64(vec![1], vec![0.0]));
    let path = dir.path().join("w.cgmf");
    c.write(&path).unwrap();
    match load_weights(&path, &config) {
        Err(IoError::Unexpected(names)) => assert_eq!(names, vec!["stray".to_string()]),
        other => panic!("{other:?}"),
    }
    assert!(load_weights_with(&path, &config, LoadMode::Permissive).is_ok());

    let mut missing = TensorContainer::new();
    missing.insert("ln_v.gain", StoredTensor::f64(vec![8], vec![1.0; 8]));
    assert!(matches!(
        cgmf_core::io::weights_from_container(&missing, &config, LoadMode::Strict),
        Err(IoError::Missing(_))
    ));
}

#[test]
fn f32_storage_widens_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = FusionConfig::tiny();
    let w = random_weights(&config, 4);
    let path = dir.path().join("w32.cgmf");
    save_weights_as(&w, &path, Dtype::F32).unwrap();
    let back = load_weights(&path, &config).unwrap();
    for ((_, a), (_, b)) in w.params().iter().zip(back.params()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    let f64_len = weights_to_container(&w, Dtype::F64).to_bytes().len();
    assert!(std::fs::metadata(&path).unwrap().len() < f64_len as u64);
}

#[test]
fn container_names_cover_every_module() {
    let c = weights_to_container(&CgmfWeights::zeros(&FusionConfig::tiny()), Dtype::F64);
    for module in MODULE_NAMES {
        assert!(
            c.tensors.keys().any(|k| k.starts_with(&format!("{module}."))),
            "{module}"
        );
    }
}

#[test]
fn token_streams_round_trip() {
    let config = FusionConfig::tiny();
    let inputs = synth_tokens(&config, 5, TokenDistribution::UnitSphere).unwrap();
    let c = inputs_to_container(&inputs, Dtype::F64);
    let back = inputs_from_container(&TensorContainer::from_bytes(&c.to_bytes()).unwrap()).unwrap();
    assert_eq!(back, inputs);
    assert_eq!(c.get("f_v").unwrap().shape, vec![2, 4, 8]);
    assert_eq!(c.get("f_register").unwrap().shape, vec![2, 4, 6]);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = FusionConfig::tiny().with_toggles(Toggles {
        enable_gate: false,
        ..Toggles::all()
    });
    let file = ConfigFile::from_config(&config, Some(42));
    let path = dir.path().join("c.toml");
    file.write(&path).unwrap();
    let back = ConfigFile::read(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.config(), config);
}
