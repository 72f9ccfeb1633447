use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tariffshift::forecaster::ModelVariant;
use tariffshift::harness::{self, report, CellPaths, ExperimentConfig, Selection};

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        n_seeds: 1,
        n_consumers: 2,
        months: 3,
        split_months: (1, 1, 1),
        t_in_sizes: vec![3],
        t_out_size: 4,
        variants: vec![ModelVariant::NoX, ModelVariant::FC, ModelVariant::UB],
        output_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.training.epochs = 2;
    cfg
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn rerun_is_byte_identical_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let cfg = small_config(dir.path());
        let fails = harness::cmd_sweep(&cfg, &Selection::all(&cfg));
        assert!(fails.is_empty(), "{fails:?}");
    }
    let first = csv_files(a.path());
    assert!(first.keys().any(|p| p.ends_with("gain_summary.csv")));
    assert!(first.keys().any(|p| p.ends_with("models/UB.json")));
    assert_eq!(first, csv_files(b.path()));

    let cfg = small_config(a.path());
    let paths = CellPaths::new(a.path(), 3, 3);
    std::fs::remove_file(paths.aql()).unwrap();
    assert!(harness::cmd_sweep(&cfg, &Selection::all(&cfg)).is_empty());
    assert_eq!(first, csv_files(a.path()));

    let rows = report::collect_results(&cfg).unwrap();
    assert!(rows.iter().any(|r| r.variant == "Oracle" && r.aql.is_none()));
    assert!(rows.iter().filter(|r| r.variant == "FC").all(|r| r.gains.values().all(|g| g.1 == Some(0.0))));
}

#[test]
fn missing_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sel = Selection::all(&cfg);
    assert!(harness::cmd_simulate(&cfg, &sel).is_empty());
    let fails = harness::cmd_evaluate(&cfg, &sel);
    assert_eq!(fails.len(), cfg.variants.len());
    assert!(fails.iter().all(|f| matches!(f.error, tariffshift::Error::Missing(_))));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"n_seeds": 2, "training": {"epochs": 5}}"#).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.seeds(), vec![1, 2]);
    assert_eq!(cfg.training.epochs, 5);
    assert_eq!(cfg.training.batch_size, 16);
    std::fs::write(&path, r#"{"n_seed": 2}"#).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}
