use std::path::PathBuf;

use pullsim::runner::build_images;
use pullsim::scenario::ScenarioConfig;

fn bundled() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn every_bundled_scenario_loads() {
    let files = bundled();
    assert!(files.len() >= 13);
    for f in files {
        let cfg = ScenarioConfig::load(&f).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        build_images(&cfg).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        let stem = f.file_stem().unwrap().to_str().unwrap();
        assert_eq!(cfg.scenario.name, stem);
    }
}
