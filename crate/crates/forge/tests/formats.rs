use std::path::Path;

use forge::checkpoint::{self, CheckpointError};
use forge::config::{ConfigError, ForgeConfig};
use forge::manifest;
use forge_core::finecap::ManifestRecord;
use forge_core::models::{Component, ComponentSet, ModelConfig, ModelState};
use forge_core::patching::ImageTensor;
use proptest::prelude::*;

fn repo(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_save_load_save_is_identical(seed in any::<u64>(), frozen in prop::collection::vec(any::<bool>(), 4)) {
        let mut state = ModelState::<f32>::new(ModelConfig::toy(), seed).unwrap();
        let kept: Vec<Component> = Component::ALL.iter().zip(&frozen).filter(|(_, f)| !**f).map(|(c, _)| *c).collect();
        state.trainable = ComponentSet::of(&kept);
        let a = checkpoint::to_bytes(&state).unwrap();
        let back = checkpoint::from_bytes(&a).unwrap();
        prop_assert_eq!(&back, &state);
        prop_assert_eq!(checkpoint::to_bytes(&back).unwrap(), a);
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let state = ModelState::<f32>::new(ModelConfig::toy(), 3).unwrap();
    checkpoint::save(&state, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), state);
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::to_bytes(&state).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let state = ModelState::<f32>::new(ModelConfig::toy(), 3).unwrap();
    let bytes = checkpoint::to_bytes(&state).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&bad), Err(CheckpointError::Magic)));
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(checkpoint::from_bytes(&bytes[..12]).is_err());
}

#[test]
fn shipped_configs_match_presets() {
    let toy = ForgeConfig::from_json(&std::fs::read_to_string(repo("configs/toy.json")).unwrap()).unwrap();
    assert_eq!(toy, ForgeConfig::toy());
    let paper = ForgeConfig::from_json(&std::fs::read_to_string(repo("configs/paper.json")).unwrap()).unwrap();
    assert_eq!(paper, ForgeConfig::paper());
    assert_eq!(paper.stage2.resolution_schedule, (336, 448));
    assert_eq!(paper.stage2.context_cap_schedule, (64, 256));
    assert_eq!(paper.model.encoder.depth, 28);
}

#[test]
fn missing_config_file_names_the_path() {
    match ForgeConfig::load(Path::new("/nonexistent/forge.json")) {
        Err(ConfigError::Io { path, .. }) => assert!(path.contains("forge.json")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let records = manifest::read_manifest(&repo("data/sample_raw.jsonl")).unwrap();
    let path = dir.path().join("copy.jsonl");
    manifest::write_jsonl(&path, &records).unwrap();
    let back: Vec<ManifestRecord> = manifest::read_jsonl(&path).unwrap();
    assert_eq!(back, records);
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"image_id\":\"a\",\"width\":4,\"height\":4}\n\n{oops}\n").unwrap();
    let err = manifest::read_manifest(&path).unwrap_err();
    assert!(format!("{err:#}").contains("bad.jsonl:3"), "{err:#}");
}

#[test]
fn png_images_load_as_unit_floats() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = ImageTensor::filled(30, 20, [0.0, 0.5, 1.0]);
    img.set_pixel(3, 4, [1.0, 0.0, 0.0]);
    let path = dir.path().join("x.png");
    manifest::save_png(&img, &path).unwrap();
    let back = manifest::load_image(&path).unwrap();
    assert_eq!((back.width(), back.height()), (30, 20));
    assert_eq!(back.pixel(3, 4), [1.0, 0.0, 0.0]);
    let [r, g, b] = back.pixel(0, 0);
    assert_eq!((r, b), (0.0, 1.0));
    assert!((g - 0.5).abs() <= 1.0 / 255.0);
}
