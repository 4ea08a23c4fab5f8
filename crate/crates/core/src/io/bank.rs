use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_points, encode_points, read_bytes, write_atomic, FormatError};
use crate::augment::{BankEntry, InstanceBank};
use crate::cloud::{ClassId, InstanceId};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    class_points: BTreeMap<ClassId, u64>,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    class: ClassId,
    source_scan: usize,
    source_instance: InstanceId,
    points: usize,
}

/// One point file per entry plus `manifest.json`; the manifest is written
/// last.
pub fn save_bank(bank: &InstanceBank, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(bank.len());
    for (n, e) in bank.entries().iter().enumerate() {
        let file = format!("instance_{n:06}.bin");
        write_atomic(&dir.join(&file), &encode_points(&e.points))?;
        entries.push(ManifestEntry {
            file,
            class: e.class,
            source_scan: e.source_scan,
            source_instance: e.source_instance,
            points: e.points.len(),
        });
    }
    let manifest = Manifest {
        class_points: bank.class_points().clone(),
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_bank(dir: &Path) -> Result<InstanceBank> {
    let raw = read_bytes(&dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for m in manifest.entries {
        if m.file.contains(['/', '\\']) {
            return Err(FormatError::Manifest(format!("entry file {:?} must be a bare name", m.file)).into());
        }
        let points = decode_points(&read_bytes(&dir.join(&m.file))?)?;
        if points.len() != m.points {
            return Err(FormatError::Manifest(format!(
                "{} holds {} points, manifest says {}",
                m.file,
                points.len(),
                m.points
            ))
            .into());
        }
        entries.push(BankEntry {
            class: m.class,
            points,
            source_scan: m.source_scan,
            source_instance: m.source_instance,
        });
    }
    InstanceBank::from_parts(entries, manifest.class_points)
}
