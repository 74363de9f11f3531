use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Raster, ScenePair};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub pair_id: u64,
    pub ground_path: String,
    pub aerial_path: String,
    pub tile_origin: (f64, f64),
    pub tile_size: f64,
}

/// Dataset index. Image paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub items: Vec<ManifestItem>,
}

fn parse_err(field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Parse {
        field: field.into(),
        detail: detail.into(),
    }
}

fn parse_item(k: usize, v: &Value) -> Result<ManifestItem> {
    let pair_id = v
        .get("pair_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| parse_err(format!("items[{k}].pair_id"), "missing or not an unsigned integer"))?;
    let field = |name: &str| {
        v.get(name)
            .ok_or_else(|| parse_err(format!("items[{k}].{name}"), format!("missing for pair_id {pair_id}")))
    };
    let path = |name: &str| -> Result<String> {
        field(name)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| parse_err(format!("items[{k}].{name}"), format!("not a string for pair_id {pair_id}")))
    };
    let ground_path = path("ground_path")?;
    let aerial_path = path("aerial_path")?;
    let tile_origin = serde_json::from_value(field("tile_origin")?.clone())
        .map_err(|e| parse_err(format!("items[{k}].tile_origin"), format!("pair_id {pair_id}: {e}")))?;
    let tile_size = field("tile_size")?
        .as_f64()
        .ok_or_else(|| parse_err(format!("items[{k}].tile_size"), format!("not a number for pair_id {pair_id}")))?;
    Ok(ManifestItem {
        pair_id,
        ground_path,
        aerial_path,
        tile_origin,
        tile_size,
    })
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// Reads a manifest, checking its version, unique pair ids, and that every
/// referenced image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_str(&text)?;
    let version = raw
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| parse_err("version", "missing or not an unsigned integer"))? as u32;
    if version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let split = raw
        .get("split")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err("split", "missing or not a string"))?
        .to_owned();
    let items = raw
        .get("items")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err("items", "missing or not an array"))?
        .iter()
        .enumerate()
        .map(|(k, v)| parse_item(k, v))
        .collect::<Result<Vec<_>>>()?;
    let base = base_dir(path);
    let mut seen = HashSet::new();
    for item in &items {
        if !seen.insert(item.pair_id) {
            return Err(parse_err("items", format!("duplicate pair_id {}", item.pair_id)));
        }
        for (name, rel) in [("ground_path", &item.ground_path), ("aerial_path", &item.aerial_path)] {
            if !base.join(rel).is_file() {
                return Err(parse_err(
                    name,
                    format!("pair_id {}: file {rel} does not exist", item.pair_id),
                ));
            }
        }
    }
    Ok(Manifest { version, split, items })
}

/// Writes every pair as two PNGs plus `manifest.json` under `dir`.
pub fn save_dataset(pairs: &[ScenePair], split: &str, dir: &Path) -> Result<Manifest> {
    for sub in ["ground", "aerial"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut items = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ground_path = format!("ground/{:06}.png", p.pair_id);
        let aerial_path = format!("aerial/{:06}.png", p.pair_id);
        p.ground.save_png(&dir.join(&ground_path))?;
        p.aerial.save_png(&dir.join(&aerial_path))?;
        items.push(ManifestItem {
            pair_id: p.pair_id,
            ground_path,
            aerial_path,
            tile_origin: p.tile_origin,
            tile_size: p.tile_size,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        split: split.to_owned(),
        items,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads the manifest and decodes every referenced image.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Vec<ScenePair>)> {
    let manifest = load_manifest(manifest_path)?;
    let base = base_dir(manifest_path);
    let pairs = manifest
        .items
        .iter()
        .map(|item| {
            Ok(ScenePair {
                pair_id: item.pair_id,
                ground: Raster::load_png(&base.join(&item.ground_path))?,
                aerial: Raster::load_png(&base.join(&item.aerial_path))?,
                tile_origin: item.tile_origin,
                tile_size: item.tile_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}
