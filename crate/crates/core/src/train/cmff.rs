//! Segmentation phase: two single-pair segmentation branches initialised
//! from the translation generators, a fusion branch over their decoder
//! features, and the ablation variants.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cmft::{pair_input, GeneratorPair, TrunkArch};
use super::{added, config_hash, ensure_dir, LogWriter, TrainingSet};
use crate::data::{sample_patch, ForegroundRule, PatchSpec, Subject};
use crate::error::{Error, Result};
use crate::losses::{log_line, soft_dice_loss_grad, CmffLossReport};
use crate::nn::{
    attention_map, attention_map_backward, backward, build_fusion_branch, build_seg_branch, check_params, forward,
    forward_trace, init_params, transfer_parameters, Adam, Archive, NetworkSpec, ParamSet, Phase, Trace, HEAD_ID,
};
use crate::seed::derive_seed;
use crate::volume::{one_hot, probs_to_labels, Dims, LabelVolume, ModalityPairSpec, Volume};

pub const MODEL_FILE: &str = "cmff_model.ckpt";
pub const LOG_FILE: &str = "cmff_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    CmftTransfer,
    Random,
    SelfReconTransfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMaskGuidance,
    BranchAOnly,
    BranchBOnly,
    AverageFusion,
}

impl Variant {
    pub fn has_fusion(self) -> bool {
        self != Variant::AverageFusion
    }

    pub fn mask_guided(self) -> bool {
        self != Variant::NoMaskGuidance
    }

    /// Which of (branch A, branch B, fusion) the variant optimises.
    pub fn objective(self) -> [bool; 3] {
        match self {
            Variant::Full | Variant::NoMaskGuidance => [true, true, true],
            Variant::BranchAOnly => [true, false, false],
            Variant::BranchBOnly => [false, true, false],
            Variant::AverageFusion => [true, true, false],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmffConfig {
    pub init_mode: InitMode,
    pub variant: Variant,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Generator file from the translation (or self-reconstruction) phase.
    pub cmft_checkpoint: Option<PathBuf>,
    pub pair_spec: ModalityPairSpec,
    pub patch: PatchSpec,
    pub base_filters: usize,
    pub depth: usize,
    /// Linear decay of the learning rate to zero over `steps`.
    pub lr_decay: bool,
}

impl Default for CmffConfig {
    fn default() -> Self {
        Self {
            init_mode: InitMode::CmftTransfer,
            variant: Variant::Full,
            lr: 1e-4,
            steps: 1000,
            seed: 0,
            checkpoint_every: 100,
            cmft_checkpoint: None,
            pair_spec: ModalityPairSpec::quaternion(),
            patch: PatchSpec { size: [32; 3], foreground_rule: ForegroundRule::TumorOverlap, seed: 0 },
            base_filters: 16,
            depth: 3,
            lr_decay: false,
        }
    }
}

impl CmffConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push(format!("lr: must be a positive number, got {}", self.lr));
        }
        if self.base_filters == 0 {
            errs.push("base_filters: must be >= 1".into());
        }
        if !(1..=6).contains(&self.depth) {
            errs.push(format!("depth: must be in 1..=6, got {}", self.depth));
        } else if let Err(e) = self.patch.validate(self.depth) {
            errs.push(format!("patch.size: {e}"));
        }
        match (&self.cmft_checkpoint, self.init_mode) {
            (None, InitMode::CmftTransfer | InitMode::SelfReconTransfer) => {
                errs.push(format!("cmft_checkpoint: required by init_mode {:?}", self.init_mode));
            }
            (Some(p), InitMode::CmftTransfer | InitMode::SelfReconTransfer) if !p.is_file() => {
                errs.push(format!("cmft_checkpoint: {} does not exist", p.display()));
            }
            _ => {}
        }
        errs
    }

    pub fn fingerprint(&self) -> Result<String> {
        config_hash(&Self { steps: 0, checkpoint_every: 0, ..self.clone() })
    }

    fn learning_rate(&self, step: u64) -> f64 {
        if self.lr_decay && self.steps > 0 {
            self.lr * (1.0 - step as f64 / self.steps as f64)
        } else {
            self.lr
        }
    }
}

/// Class probabilities of both branches and the fusion head, plus the
/// labels decoded from the head the variant designates.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    pub probs_a: Volume,
    pub probs_b: Volume,
    pub probs_f: Volume,
    pub final_labels: LabelVolume,
}

#[derive(Clone, Debug)]
pub struct CmffModel {
    pub variant: Variant,
    pub seg_spec: NetworkSpec,
    pub fusion_spec: Option<NetworkSpec>,
    pub s_a: ParamSet,
    pub s_b: ParamSet,
    pub fusion: Option<ParamSet>,
    /// Sliding-window extent used by [`CmffModel::predict`].
    pub window: Dims,
    /// Modalities feeding branch A and branch B.
    pub pair_spec: ModalityPairSpec,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    opt_a: Adam,
    opt_b: Adam,
    opt_f: Option<Adam>,
}

/// Initial background probability of a freshly initialised class head.
pub const BACKGROUND_PRIOR: f64 = 0.97;

/// Sets the bias of a 4-class head so that, before training, every voxel
/// reads as background with probability [`BACKGROUND_PRIOR`]. The loss
/// ignores the background channel, so without this the tumor channels start
/// out tied with it and argmax decoding labels most of the volume as tumor
/// for a long stretch of early training.
pub fn set_background_prior(params: &mut ParamSet, head: &str) {
    if let Some(b) = params.get_mut(head).and_then(|p| p.bias.as_mut()) {
        if b.data.len() == 4 {
            b.data = vec![(BACKGROUND_PRIOR / ((1.0 - BACKGROUND_PRIOR) / 3.0)).ln() as f32, 0.0, 0.0, 0.0];
        }
    }
}

fn channel_range(v: &Volume, start: usize, count: usize) -> Volume {
    let n = v.voxels();
    Volume::from_parts(count, v.dims(), v.spacing(), v.data()[start * n..(start + count) * n].to_vec())
}

fn mean_probs(a: &Volume, b: &Volume) -> Volume {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Volume::from_parts(a.channels(), a.dims(), a.spacing(), data)
}

impl CmffModel {
    /// Model over arbitrary branch and fusion specs. The fusion input must be
    /// the branch taps of A followed by those of B.
    pub fn with_specs(
        variant: Variant,
        seg_spec: NetworkSpec,
        fusion_spec: Option<NetworkSpec>,
        s_a: ParamSet,
        s_b: ParamSet,
        seed: u64,
        lr: f64,
        window: Dims,
    ) -> Result<Self> {
        if seg_spec.out_channels() != 4 {
            return Err(Error::InvalidValue("segmentation branch must emit 4 class channels".into()));
        }
        check_params(&seg_spec, &s_a)?;
        check_params(&seg_spec, &s_b)?;
        if variant.has_fusion() != fusion_spec.is_some() {
            return Err(Error::InvalidValue(format!("variant {variant:?} and fusion branch presence disagree")));
        }
        let fusion = match &fusion_spec {
            Some(f) => {
                let tap_channels: usize = seg_spec.taps.iter().map(|t| seg_spec.layer(t).expect("validated").out_channels).sum();
                if f.in_channels != 2 * tap_channels || f.out_channels() != 4 {
                    return Err(Error::InvalidValue(format!(
                        "fusion branch must take {} tap channels and emit 4, takes {}",
                        2 * tap_channels,
                        f.in_channels
                    )));
                }
                let mut p = init_params(f, derive_seed(seed, "fusion", 0));
                if let Some(head) = f.param_layers().last() {
                    set_background_prior(&mut p, &head.id);
                }
                Some(p)
            }
            None => None,
        };
        Ok(Self {
            opt_a: Adam::new(&s_a, lr),
            opt_b: Adam::new(&s_b, lr),
            opt_f: fusion.as_ref().map(|p| Adam::new(p, lr)),
            variant,
            seg_spec,
            fusion_spec,
            s_a,
            s_b,
            fusion,
            window,
            pair_spec: ModalityPairSpec::quaternion(),
            step: 0,
            seed,
            config_hash: String::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_a.lr = lr;
        self.opt_b.lr = lr;
        if let Some(o) = self.opt_f.as_mut() {
            o.lr = lr;
        }
    }

    fn fusion_input(&self, fa: &Trace, fb: &Trace) -> Result<Volume> {
        let mut parts = Vec::new();
        for t in [fa, fb] {
            for id in &self.seg_spec.taps {
                parts.push(t.layer_output(id).expect("trace keeps all"));
            }
        }
        Volume::concat(&parts)
    }

    fn attention(&self, pa: &Volume, pb: &Volume) -> Result<Option<Volume>> {
        if self.variant.mask_guided() {
            Ok(Some(attention_map(pa, pb)?))
        } else {
            Ok(None)
        }
    }

    /// One update on aligned inputs `a`, `b` and label `y`. Terms outside
    /// the variant's objective are neither optimised nor reported (zero).
    pub fn train_step(&mut self, a: &Volume, b: &Volume, y: &LabelVolume) -> Result<CmffLossReport> {
        let [use_a, use_b, use_f] = self.variant.objective();
        let target = one_hot(y);
        let spec = &self.seg_spec;
        let need_a = use_a || use_f;
        let need_b = use_b || use_f;
        let ta = if need_a { Some(forward_trace(spec, &self.s_a, a, None)?) } else { None };
        let tb = if need_b { Some(forward_trace(spec, &self.s_b, b, None)?) } else { None };

        let mut dice = [0.0; 3];
        let mut grad_a: Option<Volume> = None;
        let mut grad_b: Option<Volume> = None;
        let mut taps_a: Vec<(String, Volume)> = Vec::new();
        let mut taps_b: Vec<(String, Volume)> = Vec::new();
        let mut fusion_grads = None;
        if use_a {
            let (l, g) = soft_dice_loss_grad(ta.as_ref().expect("needed").output(), &target)?;
            dice[0] = l;
            grad_a = Some(g);
        }
        if use_b {
            let (l, g) = soft_dice_loss_grad(tb.as_ref().expect("needed").output(), &target)?;
            dice[1] = l;
            grad_b = Some(g);
        }
        if use_f {
            let (ta, tb) = (ta.as_ref().expect("needed"), tb.as_ref().expect("needed"));
            let fspec = self.fusion_spec.as_ref().expect("fusion variant");
            let fparams = self.fusion.as_ref().expect("fusion variant");
            let att = self.attention(ta.output(), tb.output())?;
            let tf = forward_trace(fspec, fparams, &self.fusion_input(ta, tb)?, att.as_ref())?;
            let (l, g) = soft_dice_loss_grad(tf.output(), &target)?;
            dice[2] = l;
            let fg = backward(fspec, fparams, &tf, Some(&g), &[], true)?;
            let gin = fg.input.as_ref().expect("requested");
            let mut offset = 0;
            for (i, taps) in [&mut taps_a, &mut taps_b].into_iter().enumerate() {
                for id in &spec.taps {
                    let c = spec.layer(id).expect("validated").out_channels;
                    taps.push((id.clone(), channel_range(gin, offset, c)));
                    offset += c;
                }
                debug_assert!(i < 2);
            }
            if let Some(gm) = fg.attention.as_ref() {
                let (ga, gb) = attention_map_backward(ta.output(), tb.output(), gm);
                grad_a = Some(grad_a.map_or(ga.clone(), |g| added(&g, &ga)));
                grad_b = Some(grad_b.map_or(gb.clone(), |g| added(&g, &gb)));
            }
            fusion_grads = Some(fg.params);
        }
        let report = CmffLossReport::new(dice[0], dice[1], dice[2])?;

        let branch = |t: &Option<Trace>, params: &ParamSet, g: &Option<Volume>, taps: &[(String, Volume)]| -> Result<Option<ParamSet>> {
            if g.is_none() && taps.is_empty() {
                return Ok(None);
            }
            let tap_refs: Vec<(&str, &Volume)> = taps.iter().map(|(id, v)| (id.as_str(), v)).collect();
            Ok(Some(backward(spec, params, t.as_ref().expect("needed"), g.as_ref(), &tap_refs, false)?.params))
        };
        let ga = branch(&ta, &self.s_a, &grad_a, &taps_a)?;
        let gb = branch(&tb, &self.s_b, &grad_b, &taps_b)?;
        if let Some(g) = ga {
            self.opt_a.update(&mut self.s_a, &g)?;
        }
        if let Some(g) = gb {
            self.opt_b.update(&mut self.s_b, &g)?;
        }
        if let (Some(g), Some(p), Some(o)) = (fusion_grads, self.fusion.as_mut(), self.opt_f.as_mut()) {
            o.update(p, &g)?;
        }
        self.step += 1;
        Ok(report)
    }

    /// Class probabilities of both branches and the fused head on one input
    /// window; for average fusion the head is the mean of the branches.
    fn predict_window(&self, a: &Volume, b: &Volume) -> Result<[Volume; 3]> {
        let fa = forward(&self.seg_spec, &self.s_a, a, None)?;
        let fb = forward(&self.seg_spec, &self.s_b, b, None)?;
        let pf = match (&self.fusion_spec, &self.fusion) {
            (Some(fspec), Some(fparams)) => {
                let mut parts = Vec::new();
                for f in [&fa, &fb] {
                    for id in &self.seg_spec.taps {
                        parts.push(&f.taps[id]);
                    }
                }
                let att = self.attention(&fa.output, &fb.output)?;
                forward(fspec, fparams, &Volume::concat(&parts)?, att.as_ref())?.output
            }
            _ => mean_probs(&fa.output, &fb.output),
        };
        Ok([fa.output, fb.output, pf])
    }

    fn decode(&self, probs_a: Volume, probs_b: Volume, probs_f: Volume) -> Result<SegOutput> {
        let final_labels = match self.variant {
            Variant::Full | Variant::NoMaskGuidance | Variant::AverageFusion => probs_to_labels(&probs_f)?,
            Variant::BranchAOnly => probs_to_labels(&probs_a)?,
            Variant::BranchBOnly => probs_to_labels(&probs_b)?,
        };
        Ok(SegOutput { probs_a, probs_b, probs_f, final_labels })
    }

    /// Whole-volume prediction in a single pass (dims must suit the network).
    pub fn predict_untiled(&self, a: &Volume, b: &Volume) -> Result<SegOutput> {
        let [pa, pb, pf] = self.predict_window(a, b)?;
        self.decode(pa, pb, pf)
    }

    /// Sliding-window prediction with `self.window` windows at half-window
    /// stride (the last window on each axis is aligned to the far edge) and
    /// uniform averaging of overlapping probabilities.
    pub fn predict(&self, a: &Volume, b: &Volume) -> Result<SegOutput> {
        let dims = a.dims();
        if b.dims() != dims {
            return Err(Error::Shape(format!("pair inputs differ: {dims:?} vs {:?}", b.dims())));
        }
        if (0..3).any(|ax| dims[ax] < self.window[ax]) {
            return Err(Error::Shape(format!("volume {dims:?} is smaller than the prediction window {:?}", self.window)));
        }
        let starts = |ax: usize| window_starts(dims[ax], self.window[ax]);
        let (sz, sy, sx) = (starts(0), starts(1), starts(2));
        let mut acc: [Volume; 3] = std::array::from_fn(|_| Volume::zeros(4, dims).with_spacing(a.spacing()).expect("valid spacing"));
        let mut count = vec![0u32; a.voxels()];
        let w = self.window;
        for &z in &sz {
            for &y in &sy {
                for &x in &sx {
                    let o = [z, y, x];
                    let probs = self.predict_window(&a.crop(o, w)?, &b.crop(o, w)?)?;
                    for (dst, src) in acc.iter_mut().zip(&probs) {
                        add_window(dst, src, o);
                    }
                    for dz in 0..w[0] {
                        for dy in 0..w[1] {
                            let row = ((z + dz) * dims[1] + y + dy) * dims[2] + x;
                            count[row..row + w[2]].iter_mut().for_each(|c| *c += 1);
                        }
                    }
                }
            }
        }
        for v in acc.iter_mut() {
            for ch in v.data_mut().chunks_exact_mut(count.len()) {
                ch.iter_mut().zip(&count).for_each(|(p, &c)| *p /= c as f32);
            }
        }
        let [pa, pb, pf] = acc;
        self.decode(pa, pb, pf)
    }

    pub fn predict_subject(&self, subject: &Subject) -> Result<SegOutput> {
        let a = pair_input(&subject.id, &subject.modalities, self.pair_spec.pair_a())?;
        let b = pair_input(&subject.id, &subject.modalities, self.pair_spec.pair_b())?;
        self.predict(&a, &b)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(serde_json::json!({
            "kind": "cmff_model",
            "phase": Phase::Cmff,
            "variant": self.variant,
            "seg_spec": serde_json::to_value(&self.seg_spec)?,
            "fusion_spec": serde_json::to_value(&self.fusion_spec)?,
            "window": self.window,
            "pair_spec": serde_json::to_value(&self.pair_spec)?,
            "step": self.step,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }));
        a.insert_params("s_a/", &self.s_a);
        a.insert_params("s_b/", &self.s_b);
        self.opt_a.store(&mut a, "opt/s_a/");
        self.opt_b.store(&mut a, "opt/s_b/");
        if let (Some(p), Some(o)) = (&self.fusion, &self.opt_f) {
            a.insert_params("fusion/", p);
            o.store(&mut a, "opt/fusion/");
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive, path: &Path) -> Result<Self> {
        let meta = &archive.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("cmff_model") {
            return Err(Error::format(path, "not a segmentation model"));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::format(path, format!("missing `{k}` metadata")));
        let variant: Variant = serde_json::from_value(field("variant")?)?;
        let seg_spec: NetworkSpec = serde_json::from_value(field("seg_spec")?)?;
        let fusion_spec: Option<NetworkSpec> = serde_json::from_value(field("fusion_spec")?)?;
        seg_spec.validate()?;
        if let Some(f) = &fusion_spec {
            f.validate()?;
        }
        let step: u64 = serde_json::from_value(field("step")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let s_a = archive.extract_params("s_a/")?;
        let s_b = archive.extract_params("s_b/")?;
        let mut m = Self::with_specs(variant, seg_spec, fusion_spec, s_a, s_b, seed, 0.0, serde_json::from_value(field("window")?)?)?;
        m.step = step;
        m.pair_spec = serde_json::from_value(field("pair_spec")?)?;
        m.config_hash = serde_json::from_value(field("config_hash")?)?;
        m.opt_a = Adam::restore(archive, "opt/s_a/", 0.0, step)?;
        m.opt_b = Adam::restore(archive, "opt/s_b/", 0.0, step)?;
        if let Some(fspec) = &m.fusion_spec {
            let p = archive.extract_params("fusion/")?;
            check_params(fspec, &p)?;
            m.fusion = Some(p);
            m.opt_f = Some(Adam::restore(archive, "opt/fusion/", 0.0, step)?);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }
}

fn window_starts(n: usize, w: usize) -> Vec<usize> {
    let stride = (w / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + w < n).collect();
    starts.push(n - w);
    starts.dedup();
    starts
}

fn add_window(dst: &mut Volume, src: &Volume, origin: Dims) {
    let w = src.dims();
    for c in 0..src.channels() {
        for z in 0..w[0] {
            for y in 0..w[1] {
                let s = src.index(c, z, y, 0);
                let d = dst.index(c, origin[0] + z, origin[1] + y, origin[2]);
                let row = &src.data()[s..s + w[2]];
                dst.data_mut()[d..d + w[2]].iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
    }
}

fn check_source(pair: &GeneratorPair, expected: TrunkArch, mode: InitMode, path: &Path) -> Result<()> {
    if pair.arch != expected {
        return Err(Error::Transfer(format!(
            "{} holds generators with {:?}, the config asks for {:?}",
            path.display(),
            pair.arch,
            expected
        )));
    }
    let want = if mode == InitMode::SelfReconTransfer { Phase::SelfRecon } else { Phase::Cmft };
    if pair.g_ab.meta.phase != want {
        return Err(Error::Transfer(format!(
            "{} was written by the {:?} phase but init_mode {mode:?} needs {want:?}",
            path.display(),
            pair.g_ab.meta.phase
        )));
    }
    Ok(())
}

/// Builds the segmentation model: branch A from the `a -> b` generator,
/// branch B from the `b -> a` generator (heads fresh), fusion fresh; or
/// everything fresh in random mode.
pub fn init_cmff(cfg: &CmffConfig) -> Result<CmffModel> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let arch = TrunkArch { in_channels: cfg.pair_spec.width(), base_filters: cfg.base_filters, depth: cfg.depth };
    let seg = build_seg_branch(arch.in_channels, arch.base_filters, arch.depth)?;
    let (mut s_a, mut s_b) = match cfg.init_mode {
        InitMode::Random => (
            init_params(&seg, derive_seed(cfg.seed, "s_a", 0)),
            init_params(&seg, derive_seed(cfg.seed, "s_b", 0)),
        ),
        mode => {
            let path = cfg.cmft_checkpoint.as_ref().expect("validated");
            let pair = GeneratorPair::load(path)?;
            check_source(&pair, arch, mode, path)?;
            (
                transfer_parameters(&pair.g_ab, &seg, derive_seed(cfg.seed, "s_a.head", 0))?.params,
                transfer_parameters(&pair.g_ba, &seg, derive_seed(cfg.seed, "s_b.head", 0))?.params,
            )
        }
    };
    set_background_prior(&mut s_a, HEAD_ID);
    set_background_prior(&mut s_b, HEAD_ID);
    let fusion = if cfg.variant.has_fusion() {
        Some(build_fusion_branch(cfg.base_filters, cfg.variant.mask_guided())?)
    } else {
        None
    };
    let mut m = CmffModel::with_specs(cfg.variant, seg, fusion, s_a, s_b, cfg.seed, cfg.lr, cfg.patch.size)?;
    m.config_hash = cfg.fingerprint()?;
    m.pair_spec = cfg.pair_spec.clone();
    Ok(m)
}

/// Aligned `(a, b, label)` patch for a step, from one subject.
pub fn sample_batch(cfg: &CmffConfig, data: &TrainingSet, step: u64) -> Result<(Volume, Volume, LabelVolume)> {
    let s = data.subject(data.pick(cfg.seed, "cmff", step));
    let label = s.label.as_ref().ok_or_else(|| Error::InvalidValue(format!("subject {} has no label", s.id)))?;
    let spec = PatchSpec { seed: derive_seed(cfg.patch.seed, "cmff.patch", step), ..cfg.patch.clone() };
    let patch = sample_patch(&s.modalities, Some(label), &spec)?;
    let a = pair_input(&s.id, &patch.modalities, cfg.pair_spec.pair_a())?;
    let b = pair_input(&s.id, &patch.modalities, cfg.pair_spec.pair_b())?;
    Ok((a, b, patch.label.expect("label cropped with the patch")))
}

#[derive(Clone, Debug)]
pub struct CmffRun {
    pub model: CmffModel,
    pub reports: Vec<CmffLossReport>,
}

/// Trains up to `cfg.steps`, optionally resuming from a saved model. With
/// an output directory, writes the per-step Dice log, periodic models under
/// `checkpoints/` and the final model.
pub fn run_cmff(cfg: &CmffConfig, data: &TrainingSet, out_dir: Option<&Path>, resume: Option<&Path>) -> Result<CmffRun> {
    let mut model = match resume {
        Some(p) => {
            let errs = cfg.validate();
            if !errs.is_empty() {
                return Err(Error::Config(errs));
            }
            let m = CmffModel::load(p)?;
            if m.config_hash != cfg.fingerprint()? {
                return Err(Error::format(p, "model was written under a different configuration"));
            }
            m
        }
        None => init_cmff(cfg)?,
    };
    let mut log = match out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            Some(LogWriter::open(&dir.join(LOG_FILE), model.step)?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    while model.step < cfg.steps {
        let step = model.step;
        model.set_lr(cfg.learning_rate(step));
        let (a, b, y) = sample_batch(cfg, data, step)?;
        let report = model.train_step(&a, &b, &y)?;
        if let Some(log) = log.as_mut() {
            log.write_line(&log_line(step, "cmff", &report)?)?;
        }
        reports.push(report);
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && model.step % cfg.checkpoint_every == 0) {
            let ckdir = dir.join(CHECKPOINT_DIR);
            ensure_dir(&ckdir)?;
            log.as_mut().expect("log open with out_dir").flush()?;
            model.save(&ckdir.join(format!("cmff_step_{:06}.ckpt", model.step)))?;
        }
    }
    model.set_lr(cfg.lr);
    if let Some(dir) = out_dir {
        log.as_mut().expect("log open with out_dir").flush()?;
        model.save(&dir.join(MODEL_FILE))?;
    }
    Ok(CmffRun { model, reports })
}
