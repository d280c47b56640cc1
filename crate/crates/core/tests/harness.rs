use icuda::harness::{cmd_gen, load_dataset, ExperimentConfig};

fn config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig { seeds: vec![0, 1], out_dir: dir.to_path_buf(), ..ExperimentConfig::default() }
}

#[test]
fn generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = cmd_gen(&config(a.path())).unwrap();
    let mb = cmd_gen(&config(b.path())).unwrap();
    assert_eq!(ma.files.len(), mb.files.len());
    for (fa, fb) in ma.files.iter().zip(&mb.files) {
        assert_eq!(fa.sha256, fb.sha256, "{}", fa.path);
    }
    for f in &ma.files {
        let rel = std::path::Path::new(&f.path).file_name().unwrap();
        let x = std::fs::read(a.path().join("data").join(rel)).unwrap();
        let y = std::fs::read(b.path().join("data").join(rel)).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn datasets_reload_with_declared_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    cmd_gen(&cfg).unwrap();
    let (pair, held) = load_dataset(&cfg, 1).unwrap();
    assert_eq!((pair.n(), pair.n_prime()), (32, 32));
    assert_eq!(held.target_labels.len(), 32);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(&config(dir.path()), 0).unwrap_err();
    assert!(matches!(err, icuda::Error::Config(_)));
}
