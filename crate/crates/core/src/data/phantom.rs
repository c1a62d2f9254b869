//! Synthetic four-modality brain phantom with nested ellipsoidal lesions.
//!
//! Pair-A modalities (T1, T1c) carry the anatomy and lesion appearance.
//! Pair-B modalities (T2, FLAIR) are an invertible intensity map of their
//! pair-A counterpart: a monotone cubic outside lesions, and the same cubic
//! applied to the contrast-inverted intensity inside lesions. Translating
//! between the pairs therefore needs to know where the lesion is, and the
//! map can be undone given that knowledge.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nifti;
use super::subject::{record_from_dir, Subject, SubjectRecord};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::{voxel_count, Dims, LabelVolume, ModalityId, Volume, UNIT_SPACING};

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Cross-pair intensity transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMap {
    /// `h(x) = 0.6 x + 0.4 x^3` on healthy tissue, `h(2 - x)` inside lesions.
    CubicInversion,
}

impl IntensityMap {
    const INVERSION_PIVOT: f32 = 2.0;

    fn cubic(x: f32) -> f32 {
        0.6 * x + 0.4 * x * x * x
    }

    /// Maps a pair-A intensity to its pair-B counterpart.
    pub fn apply(self, value: f32, in_lesion: bool) -> f32 {
        match self {
            IntensityMap::CubicInversion => {
                let x = if in_lesion { Self::INVERSION_PIVOT - value } else { value };
                Self::cubic(x)
            }
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            IntensityMap::CubicInversion => "cubic_inversion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub grid_size: Dims,
    pub n_subjects: usize,
    /// The last `n_test` subjects go to the `test` split.
    #[serde(default)]
    pub n_test: usize,
    /// Inclusive bounds on lesions per subject.
    pub lesion_count_range: (usize, usize),
    #[serde(default = "default_map")]
    pub intensity_map: IntensityMap,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_map() -> IntensityMap {
    IntensityMap::CubicInversion
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: [64, 64, 64],
            n_subjects: 20,
            n_test: 5,
            lesion_count_range: (1, 2),
            intensity_map: IntensityMap::CubicInversion,
            noise_sigma: 0.03,
            seed: 2024,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.grid_size.iter().any(|&g| g < 32) {
            issues.push(format!("synth.grid_size {:?}: every axis must be >= 32", self.grid_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            issues.push(format!("synth.noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            issues.push(format!("synth.lesion_count_range {:?} is empty", self.lesion_count_range));
        }
        if self.n_test > self.n_subjects {
            issues.push(format!("synth.n_test {} exceeds n_subjects {}", self.n_test, self.n_subjects));
        }
        issues
    }

    pub fn split_of(&self, index: usize) -> &'static str {
        if index >= self.n_subjects - self.n_test {
            "test"
        } else {
            "train"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub split: String,
    pub seed: u64,
    pub lesions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub transform: String,
    pub grid_size: Dims,
    pub noise_sigma: f64,
    pub subjects: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Raw (un-normalised) phantom subject with its lesion count.
pub struct PhantomSubject {
    pub subject: Subject,
    pub seed: u64,
    pub lesions: usize,
}

struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f32; 3]) -> f32 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum()
    }

    fn scaled(&self, k: [f32; 3]) -> Ellipsoid {
        Ellipsoid { center: self.center, radii: std::array::from_fn(|a| self.radii[a] * k[a]) }
    }
}

pub fn subject_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Generates subject `index` in memory.
pub fn generate_subject(cfg: &PhantomConfig, index: usize) -> PhantomSubject {
    let seed = derive_seed(cfg.seed, "phantom", index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = cfg.grid_size;
    let fd: [f32; 3] = dims.map(|d| d as f32);
    let min_dim = fd.iter().cloned().fold(f32::MAX, f32::min);

    let brain = Ellipsoid {
        center: std::array::from_fn(|a| fd[a] / 2.0 + rng.random_range(-1.0..1.0) * fd[a] / 32.0),
        radii: std::array::from_fn(|a| fd[a] * rng.random_range(0.38..0.44)),
    };
    let ventricle = Ellipsoid {
        center: brain.center,
        radii: std::array::from_fn(|a| brain.radii[a] * rng.random_range(0.12..0.2)),
    };
    // low-frequency tissue texture
    let waves: Vec<([f32; 3], f32, f32)> = (0..3)
        .map(|_| {
            let freq = std::array::from_fn(|_| rng.random_range(0.5..2.5f32) * std::f32::consts::TAU);
            (freq, rng.random_range(0.0..std::f32::consts::TAU), rng.random_range(0.3..1.0f32))
        })
        .collect();
    let amp_norm: f32 = waves.iter().map(|w| w.2).sum();

    let lesions = rng.random_range(cfg.lesion_count_range.0..=cfg.lesion_count_range.1);
    let mut tumours = Vec::with_capacity(lesions);
    for _ in 0..lesions {
        let wt = loop {
            let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.55..0.55f32));
            if offset.iter().map(|o| o * o).sum::<f32>() > 0.3 {
                continue;
            }
            break Ellipsoid {
                center: std::array::from_fn(|a| brain.center[a] + offset[a] * brain.radii[a]),
                radii: std::array::from_fn(|_| min_dim * rng.random_range(0.10..0.16)),
            };
        };
        let tc = wt.scaled(std::array::from_fn(|_| rng.random_range(0.7..0.8)));
        let et = tc.scaled(std::array::from_fn(|_| rng.random_range(0.6..0.72)));
        tumours.push((wt, tc, et));
    }

    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let mut pair_a = [vec![0.0f32; n], vec![0.0f32; n]];
    let mut inside = vec![false; n];
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f32 + 0.5, y as f32 + 0.5, x as f32 + 0.5];
                if brain.level(p) <= 1.0 {
                    inside[i] = true;
                    let texture: f32 = waves
                        .iter()
                        .map(|(f, phase, amp)| amp * ((0..3).map(|a| f[a] * p[a] / fd[a]).sum::<f32>() + phase).cos())
                        .sum::<f32>()
                        / amp_norm;
                    let base = if ventricle.level(p) <= 1.0 { 0.4 } else { 0.75 + 0.15 * texture };
                    let code = tumours.iter().fold(0u8, |acc, (wt, tc, et)| {
                        let here = if et.level(p) <= 1.0 {
                            4
                        } else if tc.level(p) <= 1.0 {
                            1
                        } else if wt.level(p) <= 1.0 {
                            2
                        } else {
                            0
                        };
                        // enhancing beats core beats edema where lesions overlap
                        let rank = |c: u8| [0u8, 2, 1, 0, 3][c as usize];
                        if rank(here) > rank(acc) {
                            here
                        } else {
                            acc
                        }
                    });
                    labels[i] = code;
                    let t1c_base = 0.9 * base + 0.05;
                    let (t1, t1c) = match code {
                        0 => (base, t1c_base),
                        2 => (0.85 * base, 0.85 * t1c_base),
                        1 => (0.5, 0.45),
                        _ => (0.6, 1.5),
                    };
                    pair_a[0][i] = t1;
                    pair_a[1][i] = t1c;
                }
                i += 1;
            }
        }
    }

    let noise = Normal::new(0.0f32, cfg.noise_sigma as f32).expect("validated sigma");
    let draw = |rng: &mut ChaCha8Rng| if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
    let mut vols = BTreeMap::new();
    for (k, (ma, mb)) in [(ModalityId::T1, ModalityId::T2), (ModalityId::T1c, ModalityId::Flair)]
        .into_iter()
        .enumerate()
    {
        let mut a = vec![0.0f32; n];
        let mut b = vec![0.0f32; n];
        for j in 0..n {
            if inside[j] {
                a[j] = (pair_a[k][j] + draw(&mut rng)).max(0.01);
                b[j] = (cfg.intensity_map.apply(a[j], labels[j] != 0) + draw(&mut rng)).max(0.01);
            }
        }
        vols.insert(ma, Volume::from_parts(1, dims, UNIT_SPACING, a));
        vols.insert(mb, Volume::from_parts(1, dims, UNIT_SPACING, b));
    }
    let label = LabelVolume::new(dims, UNIT_SPACING, labels).expect("phantom codes are valid");
    PhantomSubject {
        subject: Subject { id: subject_id(index), modalities: vols, label: Some(label) },
        seed,
        lesions,
    }
}

/// Writes the phantom dataset under `root` in the BraTS layout plus a
/// manifest, returning the subject records.
pub fn synth_phantom(cfg: &PhantomConfig, root: &Path) -> Result<Vec<SubjectRecord>> {
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(cfg.n_subjects);
    let mut entries = Vec::with_capacity(cfg.n_subjects);
    for index in 0..cfg.n_subjects {
        let ps = generate_subject(cfg, index);
        let split = cfg.split_of(index);
        let dir = root.join(split).join(&ps.subject.id);
        for (m, v) in &ps.subject.modalities {
            nifti::write_volume(&dir.join(format!("{}_{}.nii.gz", ps.subject.id, m.file_suffix())), v, 0)?;
        }
        if let Some(l) = &ps.subject.label {
            nifti::write_labels(&dir.join(format!("{}_seg.nii.gz", ps.subject.id)), l)?;
        }
        records.push(record_from_dir(&dir, Some(split))?);
        entries.push(ManifestEntry {
            subject_id: ps.subject.id.clone(),
            split: split.to_string(),
            seed: ps.seed,
            lesions: ps.lesions,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        transform: cfg.intensity_map.id().to_string(),
        grid_size: cfg.grid_size,
        noise_sigma: cfg.noise_sigma,
        subjects: entries,
    };
    let path = root.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}
