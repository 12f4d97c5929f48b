use std::fs;
use std::path::Path;

use mtkd::data::synthetic;
use mtkd::pipeline::RunConfig;

#[test]
fn bundled_suite_matches_generator() {
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic");
    let dir = tempfile::tempdir().unwrap();
    synthetic::write_suite(dir.path(), 7).unwrap();
    let mut names: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for name in names {
        let fresh = fs::read(dir.path().join(&name)).unwrap();
        let shipped = fs::read(bundled.join(&name)).unwrap();
        assert!(fresh == shipped, "{name:?} differs from the generator output");
    }
}

#[test]
fn bundled_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.conf");
    let cfg = RunConfig::load(&path).unwrap();
    let names: Vec<&str> = cfg.tasks.iter().map(|t| t.task.name.as_str()).collect();
    assert_eq!(names, ["sent", "para", "sim", "rank"]);
    assert!(cfg.tasks.iter().all(|t| t.dev.is_some()));
}
