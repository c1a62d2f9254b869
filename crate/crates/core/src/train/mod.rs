//! The two training phases and their shared plumbing: seeded data
//! sampling, config fingerprints and line-delimited training logs.

pub mod cmff;
pub mod cmft;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{discover, load_normalized, Subject};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::Volume;

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Normalised training subjects with seeded, epoch-based ordering.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    subjects: Vec<Subject>,
}

impl TrainingSet {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Empty("training set"));
        }
        Ok(Self { subjects })
    }

    /// Loads and z-normalises every subject under `<root>/<split>`.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let records = discover(root, split)?;
        Self::new(records.iter().map(load_normalized).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }

    /// Subject index for `step` in stream `stream`: each pass over the data
    /// is a fresh permutation drawn from `(seed, stream, epoch)`.
    pub fn pick(&self, seed: u64, stream: &str, step: u64) -> usize {
        let n = self.subjects.len() as u64;
        let epoch = step / n;
        let mut order: Vec<usize> = (0..self.subjects.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch)));
        order[(step % n) as usize]
    }
}

/// Appends one JSON record per line.
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    /// Opens `path`, keeping only its first `keep_lines` lines so a resumed
    /// run continues the log where the checkpoint left off.
    pub fn open(path: &Path, keep_lines: u64) -> Result<Self> {
        let kept = if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines().take(keep_lines as usize).map(|l| format!("{l}\n")).collect::<String>()
        } else {
            String::new()
        };
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn scaled(v: &Volume, s: f32) -> Volume {
    let data = v.data().iter().map(|x| x * s).collect();
    Volume::from_parts(v.channels(), v.dims(), v.spacing(), data)
}

pub(crate) fn added(a: &Volume, b: &Volume) -> Volume {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Volume::from_parts(a.channels(), a.dims(), a.spacing(), data)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn set(n: usize) -> TrainingSet {
        let s = |i: usize| Subject { id: format!("s{i}"), modalities: BTreeMap::new(), label: None };
        TrainingSet::new((0..n).map(s).collect()).unwrap()
    }

    #[test]
    fn every_epoch_visits_each_subject_once() {
        let data = set(7);
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|k| data.pick(5, "x", epoch * 7 + k)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        assert_eq!(data.pick(5, "x", 40), data.pick(5, "x", 40));
    }

    #[test]
    fn config_hash_is_stable() {
        let h = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&serde_json::json!({"a": 1})).unwrap());
        assert_ne!(h, config_hash(&serde_json::json!({"a": 2})).unwrap());
    }

    #[test]
    fn log_writer_truncates_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut w = LogWriter::open(&p, 0).unwrap();
        for i in 0..5 {
            w.write_line(&format!("{i}")).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let mut w = LogWriter::open(&p, 2).unwrap();
        w.write_line("x").unwrap();
        w.flush().unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "0\n1\nx\n");
    }
}
