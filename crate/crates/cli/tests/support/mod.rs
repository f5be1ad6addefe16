#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn rarefy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rarefy")).args(args).output().expect("spawn rarefy")
}

pub fn default_config() -> toml::Table {
    let out = rarefy(&["default-config"]);
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap().parse().unwrap()
}

pub fn set(table: &mut toml::Table, path: &str, value: toml::Value) {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().unwrap();
    let mut t = table;
    for k in keys {
        t = t.get_mut(k).and_then(toml::Value::as_table_mut).unwrap_or_else(|| panic!("no table {k}"));
    }
    t.insert(last.to_string(), value);
}

/// A few-second pipeline on a 12x12 field.
pub fn small_config() -> toml::Table {
    let mut c = default_config();
    set(&mut c, "seed", 3.into());
    set(&mut c, "canopy_threshold", 0.15.into());
    set(&mut c, "train.epochs", 2.into());
    set(&mut c, "search.budget", 1.into());
    set(&mut c, "search.refine.stage1_epochs", 1.into());
    set(&mut c, "search.refine.stage2_epochs", 1.into());
    set(&mut c, "search.refine.subset_fraction", 0.5.into());
    set(&mut c, "lr_find.steps", 10.into());
    set(&mut c, "kmeans.restarts", 5.into());
    set(&mut c, "field.sat_rows", 12.into());
    set(&mut c, "field.sat_cols", 12.into());
    let parcels: toml::Value = toml::Value::Array(vec![
        toml::Value::Table(toml::toml! { id = 1 row = 0 col = 0 rows = 6 cols = 12 }),
        toml::Value::Table(toml::toml! { id = 2 row = 6 col = 0 rows = 6 cols = 12 }),
    ]);
    set(&mut c, "field.parcels", parcels);
    c
}

pub fn write_config(dir: &Path, table: &toml::Table) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, toml::to_string(table).unwrap()).unwrap();
    path
}

/// Parsed `{"error": {"code", "message"}}` from stderr.
pub fn error_code(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)));
    v["error"]["code"].as_str().unwrap().to_string()
}

/// Relative path and bytes of every file under `root`, sorted.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}
