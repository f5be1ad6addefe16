use crate::error::CliResult;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use walkdir::WalkDir;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

/// Lists every file under `root` (except the manifest itself) with its
/// SHA-256, sorted by relative path.
pub fn write(root: &Path) -> CliResult<()> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST {
            continue;
        }
        let data = fs::read(entry.path())?;
        files.push(Artifact { path: rel, bytes: data.len() as u64, sha256: hex::encode(Sha256::digest(&data)) });
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({ "files": files })).map_err(rarefy::Error::from)?;
    fs::write(root.join(MANIFEST), text + "\n")?;
    Ok(())
}
