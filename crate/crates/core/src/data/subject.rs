//! BraTS directory layout:
//!
//! ```text
//! <root>/<split>/<subject_id>/<subject_id>_t1.nii.gz
//!                             <subject_id>_t1ce.nii.gz
//!                             <subject_id>_t2.nii.gz
//!                             <subject_id>_flair.nii.gz
//!                             <subject_id>_seg.nii.gz     (optional)
//! ```
//!
//! Uncompressed `.nii` files are accepted wherever `.nii.gz` is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti;
use super::normalize::z_normalize;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ModalityId, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grade {
    HGG,
    LGG,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub modality_paths: BTreeMap<ModalityId, PathBuf>,
    pub label_path: Option<PathBuf>,
    pub grade: Option<Grade>,
    pub split: Option<String>,
}

/// One subject held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub modalities: BTreeMap<ModalityId, Volume>,
    pub label: Option<LabelVolume>,
}

fn existing(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Builds the record for `<dir>` named after its final component. Modalities
/// whose files are absent are left out so that loading names them.
pub fn record_from_dir(dir: &Path, split: Option<&str>) -> Result<SubjectRecord> {
    let subject_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidValue(format!("bad subject directory {}", dir.display())))?
        .to_string();
    let modality_paths = ModalityId::ALL
        .iter()
        .filter_map(|&m| existing(dir, &format!("{subject_id}_{}", m.file_suffix())).map(|p| (m, p)))
        .collect();
    Ok(SubjectRecord {
        label_path: existing(dir, &format!("{subject_id}_seg")),
        subject_id,
        modality_paths,
        grade: None,
        split: split.map(str::to_string),
    })
}

/// Lists the subjects under `<root>/<split>`, sorted by id.
pub fn discover(root: &Path, split: &str) -> Result<Vec<SubjectRecord>> {
    let dir = root.join(split);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| record_from_dir(d, Some(split))).collect()
}

/// Reads all four modalities and the optional label, checking that every
/// grid shares one shape and spacing.
pub fn load_subject(record: &SubjectRecord) -> Result<(BTreeMap<ModalityId, Volume>, Option<LabelVolume>)> {
    let mut vols = BTreeMap::new();
    for m in ModalityId::ALL {
        let path = record.modality_paths.get(&m).ok_or_else(|| Error::MissingModality {
            subject: record.subject_id.clone(),
            modality: m,
        })?;
        if !path.exists() {
            return Err(Error::MissingModality { subject: record.subject_id.clone(), modality: m });
        }
        vols.insert(m, nifti::read_volume(path)?);
    }
    let reference = &vols[&ModalityId::T1];
    for (m, v) in &vols {
        if v.dims() != reference.dims() || v.spacing() != reference.spacing() {
            return Err(Error::Shape(format!(
                "subject `{}`: {m} grid {:?} @ {:?} differs from T1 {:?} @ {:?}",
                record.subject_id,
                v.dims(),
                v.spacing(),
                reference.dims(),
                reference.spacing()
            )));
        }
    }
    let label = match &record.label_path {
        Some(p) => {
            let l = nifti::read_labels(p)?;
            if l.dims() != reference.dims() {
                return Err(Error::Shape(format!(
                    "subject `{}`: label grid {:?} differs from modality grid {:?}",
                    record.subject_id,
                    l.dims(),
                    reference.dims()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok((vols, label))
}

/// Loads a subject and z-normalises every modality.
pub fn load_normalized(record: &SubjectRecord) -> Result<Subject> {
    let (vols, label) = load_subject(record)?;
    let modalities = vols
        .into_iter()
        .map(|(m, v)| Ok((m, z_normalize(&v)?)))
        .collect::<Result<_>>()?;
    Ok(Subject { id: record.subject_id.clone(), modalities, label })
}
