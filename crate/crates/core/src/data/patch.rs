use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, ModalityId, Volume};

/// Upper bound on rejection-sampling draws for one patch.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForegroundRule {
    /// The window holds at least one nonzero (brain) voxel.
    BrainOverlap,
    /// The window holds at least one tumor-labelled voxel.
    TumorOverlap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: Dims,
    pub foreground_rule: ForegroundRule,
    pub seed: u64,
}

impl PatchSpec {
    /// Checks the size against a U-Net of the given depth.
    pub fn validate(&self, depth: usize) -> Result<()> {
        let unit = 1usize << depth;
        if self.size.iter().any(|&s| s < 16 || s % unit != 0) {
            return Err(Error::InvalidValue(format!(
                "patch size {:?} must be >= 16 and divisible by {unit} on every axis",
                self.size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: Dims,
    pub modalities: BTreeMap<ModalityId, Volume>,
    pub label: Option<LabelVolume>,
}

fn window_has(origin: Dims, size: Dims, dims: Dims, mut hit: impl FnMut(usize) -> bool) -> bool {
    for z in origin[0]..origin[0] + size[0] {
        for y in origin[1]..origin[1] + size[1] {
            let row = (z * dims[1] + y) * dims[2];
            if (origin[2]..origin[2] + size[2]).any(|x| hit(row + x)) {
                return true;
            }
        }
    }
    false
}

/// Draws the same random window from every modality (and the label) such
/// that the window satisfies the foreground rule. The window is a pure
/// function of `(spec.seed, volume)`.
pub fn sample_patch(
    vols: &BTreeMap<ModalityId, Volume>,
    label: Option<&LabelVolume>,
    spec: &PatchSpec,
) -> Result<Patch> {
    let first = vols.values().next().ok_or(Error::Empty("modality map"))?;
    let dims = first.dims();
    for (m, v) in vols {
        if v.dims() != dims || v.channels() != 1 {
            return Err(Error::Shape(format!("modality {m} is {:?}, expected 1x{dims:?}", v.dims())));
        }
    }
    if let Some(l) = label {
        if l.dims() != dims {
            return Err(Error::Shape(format!("label grid {:?} vs modality grid {dims:?}", l.dims())));
        }
    }
    if (0..3).any(|a| spec.size[a] > dims[a]) {
        return Err(Error::Shape(format!("patch {:?} larger than volume {dims:?}", spec.size)));
    }

    let satisfies = |origin: Dims| match spec.foreground_rule {
        ForegroundRule::BrainOverlap => vols
            .values()
            .any(|v| window_has(origin, spec.size, dims, |i| v.data()[i] != 0.0)),
        ForegroundRule::TumorOverlap => match label {
            Some(l) => window_has(origin, spec.size, dims, |i| l.labels()[i] != 0),
            None => false,
        },
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let origin: Dims = std::array::from_fn(|a| rng.random_range(0..=dims[a] - spec.size[a]));
        if satisfies(origin) {
            let modalities = vols
                .iter()
                .map(|(m, v)| Ok((*m, v.crop(origin, spec.size)?)))
                .collect::<Result<_>>()?;
            let label = label.map(|l| l.crop(origin, spec.size)).transpose()?;
            return Ok(Patch { origin, modalities, label });
        }
    }
    Err(Error::NoValidWindow { attempts: MAX_ATTEMPTS })
}

/// Concatenates the listed modalities, in order, into one multi-channel volume.
pub fn build_pair_input(vols: &BTreeMap<ModalityId, Volume>, pair: &[ModalityId]) -> Result<Volume> {
    let parts = pair
        .iter()
        .map(|m| {
            vols.get(m).ok_or(Error::MissingModality { subject: String::new(), modality: *m })
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::concat(&parts)
}
