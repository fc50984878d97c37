//! Checkpoint container and artifact round-trip tests.

use rotrnn_harness::checkpoint::{
    export_dataset, load_checkpoint, load_dataset_array, read_manifest, save_checkpoint,
};
use rotrnn_harness::config::{ExperimentConfig, TaskConfig};
use rotrnn_harness::train::{model_dims, run_train};
use rotrnn::model::init_model;
use rotrnn::tasks::{gen_batch, Split};

use std::fs;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskConfig::Majority {
        t: 10,
        signal_count: 3,
        noise_vocab: 2,
        val_size: 32,
        test_size: 32,
    };
    cfg.model.d_u = 6;
    cfg.model.d_x = 8;
    cfg.model.layers = 2;
    cfg.model.heads = 2;
    cfg.optimizer.batch = 8;
    cfg.optimizer.iters = 4;
    cfg.optimizer.warmup = 1;
    cfg.log_interval = 2;
    cfg.eval_interval = 4;
    cfg.eval_batches = 2;
    cfg
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let cfg = small_config();
    let dims = model_dims(&cfg).unwrap();
    let params = init_model(3, &dims).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    save_checkpoint(&first, &params, &cfg.hash()).unwrap();

    let mut loaded = init_model(99, &dims).unwrap(); // different values, same shapes
    load_checkpoint(&first, &mut loaded, Some(&cfg.hash())).unwrap();
    let second = tmp.path().join("second");
    save_checkpoint(&second, &loaded, &cfg.hash()).unwrap();

    assert_eq!(dir_bytes(&first), dir_bytes(&second));
}

#[test]
fn manifest_lists_every_leaf_exactly_once() {
    let cfg = small_config();
    let dims = model_dims(&cfg).unwrap();
    let params = init_model(5, &dims).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &params, "h").unwrap();
    let manifest = read_manifest(tmp.path()).unwrap();
    let names: Vec<String> = manifest.leaves.iter().map(|l| l.name.clone()).collect();
    let expected = params.all_leaf_names();
    assert_eq!(names, expected);
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len(), "duplicate leaf names");
}

#[test]
fn corrupted_leaf_fails_with_its_name() {
    let cfg = small_config();
    let dims = model_dims(&cfg).unwrap();
    let params = init_model(7, &dims).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &params, "h").unwrap();

    // truncate the classifier weight leaf
    let manifest = read_manifest(tmp.path()).unwrap();
    let cls = manifest.leaves.iter().find(|l| l.name == "cls_w").unwrap();
    let path = tmp.path().join(&cls.file);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();

    let mut target = init_model(7, &dims).unwrap();
    let err = load_checkpoint(tmp.path(), &mut target, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("cls_w"), "error should name the leaf: {msg}");
}

#[test]
fn config_hash_mismatch_is_rejected() {
    let cfg = small_config();
    let dims = model_dims(&cfg).unwrap();
    let params = init_model(11, &dims).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &params, &cfg.hash()).unwrap();
    let mut target = init_model(11, &dims).unwrap();
    assert!(load_checkpoint(tmp.path(), &mut target, Some("different")).is_err());
    // and without an expected hash it loads fine
    load_checkpoint(tmp.path(), &mut target, None).unwrap();
}

#[test]
fn wrong_architecture_is_rejected() {
    let cfg = small_config();
    let dims = model_dims(&cfg).unwrap();
    let params = init_model(13, &dims).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &params, "h").unwrap();

    let mut bigger = cfg.clone();
    bigger.model.d_u = 8;
    let dims2 = model_dims(&bigger).unwrap();
    let mut target = init_model(13, &dims2).unwrap();
    assert!(load_checkpoint(tmp.path(), &mut target, None).is_err());
}

#[test]
fn dataset_export_round_trips() {
    let cfg = small_config();
    let spec = cfg.task_spec();
    let batch = gen_batch(&spec, Split::Test, 0, 8).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    export_dataset(tmp.path(), &batch, &cfg.hash()).unwrap();

    let (shape, tokens) = load_dataset_array(tmp.path(), "tokens").unwrap();
    assert_eq!(shape, vec![8, 10]);
    let original = match &batch.input.input {
        rotrnn::model::ModelInput::Tokens(t) => t,
        _ => unreachable!(),
    };
    for (a, b) in tokens.iter().zip(original.iter()) {
        assert_eq!(*a, *b as f64);
    }
    let (lshape, labels) = load_dataset_array(tmp.path(), "labels").unwrap();
    assert_eq!(lshape, vec![8]);
    assert!(labels.iter().all(|l| *l == 0.0 || *l == 1.0));
}

#[test]
fn train_then_eval_checkpoint_through_cli() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    run_train(&cfg, &out).unwrap();

    let cfg_path = tmp.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_json_pretty()).unwrap();
    let code = rotrnn_harness::cli::run([
        "rotrnn".to_string(),
        "eval".to_string(),
        "--config".to_string(),
        cfg_path.display().to_string(),
        "--checkpoint".to_string(),
        out.join("final").display().to_string(),
        "--split".to_string(),
        "val".to_string(),
    ]);
    assert_eq!(code, 0);
}
