use std::path::Path;

use metaxl_cli::config::ExperimentConfig;
use metaxl_cli::study::cells;

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap().resolve();
        let cfg = cfg.unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        assert!(!cells(&cfg).is_empty(), "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 5);
}
