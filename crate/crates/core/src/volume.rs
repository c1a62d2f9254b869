//! Volumetric carriers shared by every stage of the pipeline: dense
//! multi-channel grids, BraTS label grids and the derived tumor regions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial extent `(depth, height, width)`.
pub type Dims = [usize; 3];

/// Voxel size in millimetres along `(depth, height, width)`.
pub type Spacing = [f64; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("voxel spacing must be positive, got {spacing:?}")))
    }
}

/// Dense `channels × depth × height × width` grid stored channel-major with
/// the width axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "volume dimensions must be >= 1, got {channels}x{dims:?}"
            )));
        }
        check_spacing(spacing)?;
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "buffer holds {} values, {channels}x{dims:?} needs {}",
                data.len(),
                channels * voxel_count(dims)
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("volume contains non-finite value {bad}")));
        }
        Ok(Self { channels, dims, spacing, data })
    }

    /// Internal constructor for buffers produced by finite arithmetic.
    pub(crate) fn from_parts(channels: usize, dims: Dims, spacing: Spacing, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * voxel_count(dims));
        Self { channels, dims, spacing, data }
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self::from_parts(channels, dims, UNIT_SPACING, vec![0.0; channels * voxel_count(dims)])
    }

    pub fn from_fn(channels: usize, dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * voxel_count(dims));
        for c in 0..channels {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        data.push(f(c, z, y, x));
                    }
                }
            }
        }
        Self::from_parts(channels, dims, UNIT_SPACING, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    /// Copies channel `c` into a single-channel volume.
    pub fn channel_volume(&self, c: usize) -> Volume {
        Volume::from_parts(1, self.dims, self.spacing, self.channel(c).to_vec())
    }

    /// Stacks volumes along the channel axis, in order.
    pub fn concat(parts: &[&Volume]) -> Result<Volume> {
        let first = parts.first().ok_or(Error::Empty("channel concatenation"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.dims, first.dims
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Volume::from_parts(channels, first.dims, first.spacing, data))
    }

    /// Extracts the window starting at `origin` with extent `size`.
    pub fn crop(&self, origin: Dims, size: Dims) -> Result<Volume> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "window {origin:?}+{size:?} exceeds volume {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(self.channels * voxel_count(size));
        for c in 0..self.channels {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = self.index(c, origin[0] + z, origin[1] + y, origin[2]);
                    data.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        Ok(Volume::from_parts(self.channels, size, self.spacing, data))
    }

    /// Zero-pads to `dims`, placing the content at `origin`.
    pub(crate) fn embed(&self, dims: Dims, origin: Dims) -> Volume {
        let mut out = Volume::from_parts(
            self.channels,
            dims,
            self.spacing,
            vec![0.0; self.channels * voxel_count(dims)],
        );
        for c in 0..self.channels {
            for z in 0..self.dims[0] {
                for y in 0..self.dims[1] {
                    let src = self.index(c, z, y, 0);
                    let dst = out.index(c, origin[0] + z, origin[1] + y, origin[2]);
                    out.data[dst..dst + self.dims[2]].copy_from_slice(&self.data[src..src + self.dims[2]]);
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// MRI acquisition protocol, in the fixed order T1 < T1c < T2 < FLAIR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityId {
    T1,
    T1c,
    T2,
    Flair,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [ModalityId::T1, ModalityId::T1c, ModalityId::T2, ModalityId::Flair];

    /// File-name suffix used by the BraTS directory layout.
    pub fn file_suffix(self) -> &'static str {
        match self {
            ModalityId::T1 => "t1",
            ModalityId::T1c => "t1ce",
            ModalityId::T2 => "t2",
            ModalityId::Flair => "flair",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityId::T1 => "T1",
            ModalityId::T1c => "T1c",
            ModalityId::T2 => "T2",
            ModalityId::Flair => "FLAIR",
        })
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(ModalityId::T1),
            "t1c" | "t1ce" | "t1-c" => Ok(ModalityId::T1c),
            "t2" => Ok(ModalityId::T2),
            "flair" => Ok(ModalityId::Flair),
            other => Err(Error::InvalidValue(format!("unknown modality `{other}`"))),
        }
    }
}

/// The two translation endpoints. One modality per side is the
/// two-modality mode, two per side is the quaternion mode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPairSpec", into = "RawPairSpec")]
pub struct ModalityPairSpec {
    pair_a: Vec<ModalityId>,
    pair_b: Vec<ModalityId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPairSpec {
    pair_a: Vec<ModalityId>,
    pair_b: Vec<ModalityId>,
}

impl TryFrom<RawPairSpec> for ModalityPairSpec {
    type Error = Error;

    fn try_from(raw: RawPairSpec) -> Result<Self> {
        ModalityPairSpec::new(raw.pair_a, raw.pair_b)
    }
}

impl From<ModalityPairSpec> for RawPairSpec {
    fn from(p: ModalityPairSpec) -> Self {
        RawPairSpec { pair_a: p.pair_a, pair_b: p.pair_b }
    }
}

impl ModalityPairSpec {
    pub fn new(pair_a: Vec<ModalityId>, pair_b: Vec<ModalityId>) -> Result<Self> {
        if pair_a.len() != pair_b.len() || !(1..=2).contains(&pair_a.len()) {
            return Err(Error::InvalidValue(format!(
                "modality pairs must both hold 1 or 2 modalities, got {} and {}",
                pair_a.len(),
                pair_b.len()
            )));
        }
        let mut seen = Vec::new();
        for m in pair_a.iter().chain(&pair_b) {
            if seen.contains(m) {
                return Err(Error::InvalidValue(format!("modality {m} listed twice")));
            }
            seen.push(*m);
        }
        Ok(Self { pair_a, pair_b })
    }

    /// {T1, T1c} against {T2, FLAIR}.
    pub fn quaternion() -> Self {
        Self {
            pair_a: vec![ModalityId::T1, ModalityId::T1c],
            pair_b: vec![ModalityId::T2, ModalityId::Flair],
        }
    }

    pub fn pair_a(&self) -> &[ModalityId] {
        &self.pair_a
    }

    pub fn pair_b(&self) -> &[ModalityId] {
        &self.pair_b
    }

    /// Channels per side.
    pub fn width(&self) -> usize {
        self.pair_a.len()
    }
}

impl Default for ModalityPairSpec {
    fn default() -> Self {
        Self::quaternion()
    }
}

/// BraTS label codes, in one-hot channel order.
pub const LABEL_CODES: [u8; 4] = [0, 1, 2, 4];

fn channel_of(code: u8) -> Option<usize> {
    LABEL_CODES.iter().position(|&c| c == code)
}

/// Ground-truth grid with values in {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) || labels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} labels do not fill a {dims:?} grid",
                labels.len()
            )));
        }
        check_spacing(spacing)?;
        if let Some(&bad) = labels.iter().find(|&&v| channel_of(v).is_none()) {
            return Err(Error::InvalidLabel { value: bad as i32 });
        }
        Ok(Self { dims, spacing, labels })
    }

    /// Accepts arbitrary integers, rejecting anything outside the code set.
    pub fn from_codes(dims: Dims, spacing: Spacing, codes: &[i32]) -> Result<Self> {
        let labels = codes
            .iter()
            .map(|&v| match u8::try_from(v) {
                Ok(b) if channel_of(b).is_some() => Ok(b),
                _ => Err(Error::InvalidLabel { value: v }),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, spacing, labels)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, spacing: UNIT_SPACING, labels: vec![0; voxel_count(dims)] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn crop(&self, origin: Dims, size: Dims) -> Result<LabelVolume> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Shape(format!(
                    "window {origin:?}+{size:?} exceeds label grid {:?}",
                    self.dims
                )));
            }
        }
        let mut labels = Vec::with_capacity(voxel_count(size));
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = ((origin[0] + z) * self.dims[1] + origin[1] + y) * self.dims[2] + origin[2];
                labels.extend_from_slice(&self.labels[start..start + size[2]]);
            }
        }
        Ok(LabelVolume { dims: size, spacing: self.spacing, labels })
    }

    pub fn has_tumor(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }
}

/// Evaluation region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumor: labels {1, 2, 4}.
    WT,
    /// Tumor core: labels {1, 4}.
    TC,
    /// Enhancing tumor: label 4.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn contains(self, code: u8) -> bool {
        match self {
            Region::WT => matches!(code, 1 | 2 | 4),
            Region::TC => matches!(code, 1 | 4),
            Region::ET => code == 4,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub region: Region,
    dims: Dims,
    spacing: Spacing,
    mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(region: Region, dims: Dims, spacing: Spacing, mask: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) || mask.len() != voxel_count(dims) {
            return Err(Error::Shape(format!("{} mask values for a {dims:?} grid", mask.len())));
        }
        check_spacing(spacing)?;
        Ok(Self { region, dims, spacing, mask })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }
}

pub fn region_mask(label: &LabelVolume, region: Region) -> RegionMask {
    RegionMask {
        region,
        dims: label.dims,
        spacing: label.spacing,
        mask: label.labels.iter().map(|&l| region.contains(l)).collect(),
    }
}

/// Whole tumor, tumor core and enhancing tumor masks, in that order.
pub fn derive_region_masks(label: &LabelVolume) -> [RegionMask; 3] {
    Region::ALL.map(|r| region_mask(label, r))
}

/// Four-channel indicator volume in channel order (0, 1, 2, 4).
pub fn one_hot(label: &LabelVolume) -> Volume {
    let n = voxel_count(label.dims);
    let mut data = vec![0.0f32; 4 * n];
    for (i, &l) in label.labels.iter().enumerate() {
        let c = channel_of(l).expect("LabelVolume holds only valid codes");
        data[c * n + i] = 1.0;
    }
    Volume::from_parts(4, label.dims, label.spacing, data)
}

/// Per-voxel argmax decoding; ties resolve to the lowest channel.
pub fn probs_to_labels(probs: &Volume) -> Result<LabelVolume> {
    if probs.channels() != 4 {
        return Err(Error::Shape(format!(
            "label decoding needs 4 probability channels, got {}",
            probs.channels()
        )));
    }
    let n = probs.voxels();
    let d = probs.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..4 {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            LABEL_CODES[best]
        })
        .collect();
    Ok(LabelVolume { dims: probs.dims(), spacing: probs.spacing(), labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: Dims, codes: &[u8]) -> LabelVolume {
        LabelVolume::new(dims, UNIT_SPACING, codes.to_vec()).unwrap()
    }

    #[test]
    fn empty_label_gives_empty_regions() {
        let l = LabelVolume::zeros([3, 3, 3]);
        assert!(derive_region_masks(&l).iter().all(RegionMask::is_empty));
    }

    #[test]
    fn enhancing_voxel_is_in_every_region() {
        let mut codes = vec![0u8; 8];
        codes[5] = 4;
        let masks = derive_region_masks(&grid([2, 2, 2], &codes));
        for m in &masks {
            assert_eq!(m.count(), 1);
            assert!(m.mask()[5]);
        }
    }

    #[test]
    fn region_counts_small_grid() {
        let masks = derive_region_masks(&grid([2, 2, 2], &[1, 2, 4, 0, 0, 0, 0, 0]));
        let counts: Vec<_> = masks.iter().map(RegionMask::count).collect();
        assert_eq!(counts, vec![3, 2, 1]);
    }

    #[test]
    fn invalid_codes_rejected() {
        assert!(matches!(
            LabelVolume::from_codes([1, 1, 2], UNIT_SPACING, &[0, 3]),
            Err(Error::InvalidLabel { value: 3 })
        ));
        assert!(LabelVolume::from_codes([1, 1, 1], UNIT_SPACING, &[-1]).is_err());
        assert!(LabelVolume::new([1, 1, 1], UNIT_SPACING, vec![5]).is_err());
    }

    #[test]
    fn one_hot_of_background() {
        let v = one_hot(&LabelVolume::zeros([2, 2, 2]));
        assert!(v.channel(0).iter().all(|&x| x == 1.0));
        assert!((1..4).all(|c| v.channel(c).iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn one_hot_edema_channel() {
        let v = one_hot(&grid([1, 1, 2], &[2, 0]));
        assert_eq!(v.get(2, 0, 0, 0), 1.0);
        assert_eq!(v.get(0, 0, 0, 0), 0.0);
        assert_eq!(v.get(1, 0, 0, 0), 0.0);
        assert_eq!(v.get(3, 0, 0, 0), 0.0);
    }

    #[test]
    fn uniform_probabilities_decode_to_background() {
        let p = Volume::new(4, [1, 1, 1], UNIT_SPACING, vec![0.25; 4]).unwrap();
        assert_eq!(probs_to_labels(&p).unwrap().labels(), &[0]);
    }

    #[test]
    fn decoding_needs_four_channels() {
        assert!(probs_to_labels(&Volume::zeros(3, [1, 1, 1])).is_err());
    }

    #[test]
    fn volume_rejects_nan_and_zero_dims() {
        assert!(Volume::new(1, [1, 1, 1], UNIT_SPACING, vec![f32::NAN]).is_err());
        assert!(Volume::new(1, [0, 1, 1], UNIT_SPACING, vec![]).is_err());
        assert!(Volume::new(1, [1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn pair_spec_invariants() {
        use ModalityId::*;
        assert!(ModalityPairSpec::new(vec![T1], vec![T2]).is_ok());
        assert!(ModalityPairSpec::new(vec![T1, T1c], vec![T2]).is_err());
        assert!(ModalityPairSpec::new(vec![T1, T2], vec![T2, Flair]).is_err());
        assert!(ModalityPairSpec::new(vec![], vec![]).is_err());
        let q = ModalityPairSpec::default();
        assert_eq!(q.pair_a(), &[T1, T1c]);
        assert_eq!(q.pair_b(), &[T2, Flair]);
    }

    fn label_grid() -> impl Strategy<Value = LabelVolume> {
        (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(d, h, w)| {
            proptest::collection::vec(proptest::sample::select(LABEL_CODES.to_vec()), d * h * w)
                .prop_map(move |codes| LabelVolume::new([d, h, w], UNIT_SPACING, codes).unwrap())
        })
    }

    proptest! {
        #[test]
        fn regions_nest(label in label_grid()) {
            let [wt, tc, et] = derive_region_masks(&label);
            for i in 0..wt.mask().len() {
                prop_assert!(!et.mask()[i] || tc.mask()[i]);
                prop_assert!(!tc.mask()[i] || wt.mask()[i]);
            }
        }

        #[test]
        fn one_hot_round_trips(label in label_grid()) {
            let oh = one_hot(&label);
            let n = oh.voxels();
            for i in 0..n {
                let sum: f32 = (0..4).map(|c| oh.data()[c * n + i]).sum();
                prop_assert_eq!(sum, 1.0);
            }
            prop_assert_eq!(probs_to_labels(&oh).unwrap(), label);
        }

        #[test]
        fn argmax_matches_scan(raw in proptest::collection::vec(0.01f32..1.0, 4 * 27)) {
            // normalise each voxel onto the simplex
            let n = 27;
            let mut data = raw.clone();
            for i in 0..n {
                let s: f32 = (0..4).map(|c| raw[c * n + i]).sum();
                for c in 0..4 { data[c * n + i] = raw[c * n + i] / s; }
            }
            let probs = Volume::new(4, [3, 3, 3], UNIT_SPACING, data.clone()).unwrap();
            let decoded = probs_to_labels(&probs).unwrap();
            for i in 0..n {
                let vals: Vec<f32> = (0..4).map(|c| data[c * n + i]).collect();
                let max = vals.iter().cloned().fold(f32::MIN, f32::max);
                let first = vals.iter().position(|&v| v == max).unwrap();
                prop_assert_eq!(decoded.labels()[i], LABEL_CODES[first]);
            }
            let again = probs_to_labels(&probs).unwrap();
            prop_assert_eq!(derive_region_masks(&decoded), derive_region_masks(&again));
        }
    }
}
