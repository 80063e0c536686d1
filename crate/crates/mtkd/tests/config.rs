use std::path::Path;

use mtkd::config::RunConfig;
use mtkd::Error;

fn default_file() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn documented_defaults_match_built_in_defaults() {
    let mut parsed = RunConfig::from_toml(&default_file()).unwrap();
    let mut built_in = RunConfig::default();
    // The output directory may come from the environment.
    parsed.out_dir = built_in.out_dir.clone();
    built_in.task.seed = parsed.task.seed;
    assert_eq!(parsed, built_in);
}

#[test]
fn serialized_config_round_trips_and_hash_follows_content() {
    let config = RunConfig::default();
    let back = RunConfig::from_toml(&config.to_toml()).unwrap();
    assert_eq!(back.to_toml(), config.to_toml());
    let mut other = config.clone();
    other.train.student_lr = 2e-3;
    assert_eq!(config.hash(), RunConfig::default().hash());
    assert_ne!(config.hash(), other.hash());
    let mut moved = config.clone();
    moved.out_dir = "elsewhere".into();
    moved.record_wall_clock = true;
    assert_eq!(moved.hash(), config.hash());
}

#[test]
fn depth_mismatch_is_a_config_error() {
    let err = RunConfig::from_toml("[teacher]\nnum_layers = 3\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("T·K"), "{err}");
}

#[test]
fn invalid_settings_are_rejected() {
    for text in [
        "repeats = 0",
        "unknown_key = 1",
        "variants = [\"full\", \"single:7\"]",
        "[distill]\nweighting = \"median\"",
        "[student]\nhidden_dim = 16",
        "[diversity]\nshard_fraction = 0.0",
        "[diversity]\nnoisy_teacher = 3",
        "[train]\nstudent_from = 3",
        "[task]\nvocab_size = 20",
        "[distill]\nhidden_loss = false\ndistill_loss = false\ntask_loss = false",
    ] {
        let err = RunConfig::from_toml(text).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{text}: {err}");
    }
}

#[test]
fn seeds_count_up_from_the_master_seed() {
    let config = RunConfig::from_toml("seed = 10\nrepeats = 3").unwrap();
    assert_eq!(config.seeds().collect::<Vec<_>>(), [10, 11, 12]);
}
