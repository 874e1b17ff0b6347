use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pgm, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "id,image_path,mask_path,has_lesion";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub has_lesion: bool,
}

/// Writes `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.csv` under
/// `dir`, returning the manifest path.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::csv(&manifest, e))?;
    for s in samples {
        let row = ManifestRow {
            id: s.id.clone(),
            image_path: format!("images/{}.pgm", s.id),
            mask_path: format!("masks/{}.pgm", s.id),
            has_lesion: s.has_lesion,
        };
        pgm::write_image(&s.image, &dir.join(&row.image_path))?;
        pgm::write_mask(&s.mask, &dir.join(&row.mask_path))?;
        writer.serialize(&row).map_err(|e| Error::csv(&manifest, e))?;
    }
    if samples.is_empty() {
        writer
            .write_record(MANIFEST_HEADER.split(','))
            .map_err(|e| Error::csv(&manifest, e))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != MANIFEST_HEADER {
        return Err(Error::format(path, format!("manifest header must be '{MANIFEST_HEADER}'")));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Loads every sample listed in a manifest, checking that the files exist,
/// parse, agree in size, and that `has_lesion` matches the mask.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let image = pgm::read_image(&root.join(&row.image_path))?;
            let mask = pgm::read_mask(&root.join(&row.mask_path))?;
            let sample = Sample::new(row.id.clone(), image, mask)?;
            if sample.has_lesion != row.has_lesion {
                return Err(Error::format(
                    manifest,
                    format!(
                        "row '{}' says has_lesion={} but its mask disagrees",
                        row.id, row.has_lesion
                    ),
                ));
            }
            Ok(sample)
        })
        .collect()
}
