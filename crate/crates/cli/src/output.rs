// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Provenance written next to every CSV, TSV and manifest output.
#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    config_digest: &'a str,
    seed: Option<u64>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_meta(path: &Path, command: &str, digest: &str, seed: Option<u64>) -> anyhow::Result<()> {
    let meta = Meta {
        command,
        config_digest: digest,
        seed,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    write_text(&meta_path(path), &text)
}

pub fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

pub fn require_out(out: &Option<PathBuf>) -> anyhow::Result<&Path> {
    out.as_deref().context("--out is required for this command")
}
