//! Dataset manifest: one CSV record per image.
//!
//! Header: `image_id,split,image_path,mask_path,gt_path`. `split` is one of
//! `train`, `val`, `test`. Paths are relative to the manifest's directory
//! (absolute paths are kept as is). `mask_path` (foreground) is optional;
//! `gt_path` must be empty for train records and present for val/test.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{Image2D, Mask, Modality};
use crate::io;

pub const HEADER: &str = "image_id,split,image_path,mask_path,gt_path";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub gt_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Manifest {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.image_id.is_empty() || r.image_id.contains(['/', '\\', ',']) {
                return Err(CoreError::Manifest(format!("invalid image id {:?}", r.image_id)));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(CoreError::Manifest(format!("duplicate image id {}", r.image_id)));
            }
            match (r.split, &r.gt_path) {
                (Split::Train, Some(_)) => {
                    return Err(CoreError::Manifest(format!("train record {} has a gt mask", r.image_id)))
                }
                (Split::Val | Split::Test, None) => {
                    return Err(CoreError::Manifest(format!("{:?} record {} lacks a gt mask", r.split, r.image_id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let first = text.lines().next().unwrap_or("").trim_end_matches('\r');
        if first != HEADER {
            return Err(CoreError::Manifest(format!("{}: header must be `{HEADER}`", path.display())));
        }
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()
            .map_err(|e| CoreError::Manifest(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(root, records)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| CoreError::Manifest(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CoreError::Manifest(e.to_string()))?;
        let mut s = String::from_utf8(bytes).map_err(|e| CoreError::Manifest(e.to_string()))?;
        if self.records.is_empty() {
            s = format!("{HEADER}\n");
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_image(&self, r: &ManifestRecord, modality: Modality) -> Result<Image2D> {
        let px = io::read_f32(&self.resolve(&r.image_path))?;
        let mask = r.mask_path.as_ref().map(|p| io::read_mask(&self.resolve(p))).transpose()?;
        let img = Image2D::new(px, modality, mask)?;
        img.validate()?;
        Ok(img)
    }

    pub fn load_gt(&self, r: &ManifestRecord) -> Result<Option<Mask>> {
        r.gt_path.as_ref().map(|p| io::read_mask(&self.resolve(p))).transpose()
    }
}
