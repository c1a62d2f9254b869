//! Translation phase: two U-Net generators and two patch discriminators
//! trained on unpaired patches with least-squares adversarial and L1 cycle
//! losses. Also hosts the self-reconstruction pretraining baseline, which
//! trains the same generators to reproduce their own input.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{added, config_hash, ensure_dir, scaled, LogWriter, TrainingSet};
use crate::data::{build_pair_input, sample_patch, ForegroundRule, PatchSpec};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_discriminator, adv_loss_discriminator_grad, adv_loss_generator_grad, cmft_total, cycle_loss_grad, log_line,
    mean_abs_error, CmftLossReport, DEFAULT_LAMBDA,
};
use crate::nn::{
    add_params, backward, build_discriminator, build_generator, check_params, forward, forward_trace, init_params, Adam,
    Archive, Checkpoint, CheckpointMeta, NetworkSpec, ParamSet, Phase, Tensor,
};
use crate::seed::derive_seed;
use crate::volume::{Dims, ModalityId, ModalityPairSpec, Volume};

pub const STATE_FILE: &str = "cmft_state.ckpt";
pub const GENERATORS_FILE: &str = "generators.ckpt";
pub const LOG_FILE: &str = "cmft_log.jsonl";
pub const SELF_RECON_LOG_FILE: &str = "self_recon_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmftConfig {
    pub pair_spec: ModalityPairSpec,
    pub patch: PatchSpec,
    pub base_filters: usize,
    pub depth: usize,
    pub lambda: f64,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    /// Write a resumable state file every this many steps (0 = never).
    pub checkpoint_every: u64,
    /// Linear decay of the learning rate to zero over `steps`.
    pub lr_decay: bool,
    /// Size of the generated-sample history shown to the discriminators
    /// (0 = always use the newest fakes).
    pub replay_pool: usize,
}

impl Default for CmftConfig {
    fn default() -> Self {
        Self {
            pair_spec: ModalityPairSpec::quaternion(),
            patch: PatchSpec { size: [32; 3], foreground_rule: ForegroundRule::BrainOverlap, seed: 0 },
            base_filters: 16,
            depth: 3,
            lambda: DEFAULT_LAMBDA,
            lr: 1e-4,
            steps: 1000,
            seed: 0,
            checkpoint_every: 100,
            lr_decay: false,
            replay_pool: 0,
        }
    }
}

impl CmftConfig {
    /// Every problem with the config, prefixed by the offending key.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push(format!("lr: must be a positive number, got {}", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            errs.push(format!("lambda: must be >= 0, got {}", self.lambda));
        }
        if self.base_filters == 0 {
            errs.push("base_filters: must be >= 1".into());
        }
        if !(1..=6).contains(&self.depth) {
            errs.push(format!("depth: must be in 1..=6, got {}", self.depth));
        } else if let Err(e) = self.patch.validate(self.depth) {
            errs.push(format!("patch.size: {e}"));
        }
        errs
    }

    /// Hash of everything that shapes the training trajectory; the step
    /// budget and checkpoint cadence are excluded so runs can be extended.
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

/// Architecture of a generator trunk, recorded in checkpoints so the fusion
/// phase can rebuild matching branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkArch {
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
}

/// The two trained translators, `a -> b` and `b -> a`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPair {
    pub arch: TrunkArch,
    pub g_ab: Checkpoint,
    pub g_ba: Checkpoint,
}

impl GeneratorPair {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(serde_json::json!({
            "kind": "generators",
            "architecture": serde_json::to_value(self.arch)?,
            "g_ab": serde_json::to_value(&self.g_ab.meta)?,
            "g_ba": serde_json::to_value(&self.g_ba.meta)?,
        }));
        a.insert_params("g_ab/", &self.g_ab.params);
        a.insert_params("g_ba/", &self.g_ba.params);
        Ok(a)
    }

    /// Reads the generators from a generator file or a full training state.
    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| Error::format(path, format!("missing `{k}` metadata")));
        let arch: TrunkArch = serde_json::from_value(field("architecture")?)?;
        let g_ab = Checkpoint { meta: serde_json::from_value(field("g_ab")?)?, params: a.extract_params("g_ab/")? };
        let g_ba = Checkpoint { meta: serde_json::from_value(field("g_ba")?)?, params: a.extract_params("g_ba/")? };
        let spec = build_generator(arch.in_channels, arch.base_filters, arch.depth)?;
        check_params(&spec, &g_ab.params)?;
        check_params(&spec, &g_ba.params)?;
        Ok(Self { arch, g_ab, g_ba })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }
}

/// Generators, discriminators, their optimizers and the step counter.
#[derive(Clone, Debug)]
pub struct CmftModel {
    pub gen_spec: NetworkSpec,
    pub disc_spec: NetworkSpec,
    pub g_ab: ParamSet,
    pub g_ba: ParamSet,
    pub d_a: ParamSet,
    pub d_b: ParamSet,
    pub lambda: f64,
    pub step: u64,
    seed: u64,
    opt_g_ab: Adam,
    opt_g_ba: Adam,
    opt_d_a: Adam,
    opt_d_b: Adam,
    disc_extent: usize,
    pool_size: usize,
    pool_a: Vec<Volume>,
    pool_b: Vec<Volume>,
}

fn pad_origin(dims: Dims, min: usize) -> (Dims, Dims) {
    let padded = dims.map(|d| d.max(min));
    (padded, [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2))
}

fn query_pool(pool: &mut Vec<Volume>, size: usize, fake: Volume, seed: u64) -> Volume {
    if size == 0 {
        return fake;
    }
    if pool.len() < size {
        pool.push(fake.clone());
        return fake;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        let i = rng.random_range(0..size);
        std::mem::replace(&mut pool[i], fake)
    } else {
        fake
    }
}

impl CmftModel {
    /// Fresh model over arbitrary generator / discriminator specs. The
    /// generator must map its input channel count to itself.
    pub fn new(gen_spec: NetworkSpec, disc_spec: NetworkSpec, seed: u64, lr: f64, lambda: f64, pool_size: usize) -> Result<Self> {
        if gen_spec.out_channels() != gen_spec.in_channels || disc_spec.in_channels != gen_spec.in_channels {
            return Err(Error::InvalidValue("generator must preserve channels and match the discriminator input".into()));
        }
        let disc_extent = disc_spec
            .min_input_extent()
            .ok_or_else(|| Error::InvalidValue("discriminator accepts no input size".into()))?;
        let init = |tag: &str, spec: &NetworkSpec| init_params(spec, derive_seed(seed, tag, 0));
        let (g_ab, g_ba) = (init("g_ab", &gen_spec), init("g_ba", &gen_spec));
        let (d_a, d_b) = (init("d_a", &disc_spec), init("d_b", &disc_spec));
        Ok(Self {
            opt_g_ab: Adam::new(&g_ab, lr),
            opt_g_ba: Adam::new(&g_ba, lr),
            opt_d_a: Adam::new(&d_a, lr),
            opt_d_b: Adam::new(&d_b, lr),
            gen_spec,
            disc_spec,
            g_ab,
            g_ba,
            d_a,
            d_b,
            lambda,
            step: 0,
            seed,
            disc_extent,
            pool_size,
            pool_a: Vec::new(),
            pool_b: Vec::new(),
        })
    }

    pub fn from_config(cfg: &CmftConfig) -> Result<Self> {
        let width = cfg.pair_spec.width();
        Self::new(
            build_generator(width, cfg.base_filters, cfg.depth)?,
            build_discriminator(width)?,
            cfg.seed,
            cfg.lr,
            cfg.lambda,
            cfg.replay_pool,
        )
    }

    pub fn set_lr(&mut self, lr: f64) {
        for o in [&mut self.opt_g_ab, &mut self.opt_g_ba, &mut self.opt_d_a, &mut self.opt_d_b] {
            o.lr = lr;
        }
    }

    /// Zero-pads (centred) a volume smaller than the discriminator's
    /// smallest accepted input.
    fn pad(&self, v: &Volume) -> (Volume, Dims) {
        let (padded, origin) = pad_origin(v.dims(), self.disc_extent);
        if padded == v.dims() {
            (v.clone(), origin)
        } else {
            (v.embed(padded, origin), origin)
        }
    }

    /// Gradient w.r.t. the discriminator's (unpadded) input for a gradient
    /// on its scores.
    fn disc_input_grad(&self, params: &ParamSet, input: &Volume, score_grad_of: impl Fn(&Volume) -> Result<Volume>) -> Result<Volume> {
        let (padded, origin) = self.pad(input);
        let trace = forward_trace(&self.disc_spec, params, &padded, None)?;
        let g = score_grad_of(trace.output())?;
        let grads = backward(&self.disc_spec, params, &trace, Some(&g), &[], true)?;
        grads.input.expect("requested").crop(origin, input.dims())
    }

    fn disc_param_grads(&self, params: &ParamSet, real: &Volume, fake: &Volume) -> Result<ParamSet> {
        let tr = forward_trace(&self.disc_spec, params, &self.pad(real).0, None)?;
        let tf = forward_trace(&self.disc_spec, params, &self.pad(fake).0, None)?;
        let (_, gr, gf) = adv_loss_discriminator_grad(tr.output(), tf.output())?;
        let a = backward(&self.disc_spec, params, &tr, Some(&gr), &[], false)?.params;
        let b = backward(&self.disc_spec, params, &tf, Some(&gf), &[], false)?.params;
        Ok(add_params(&a, &b))
    }

    fn score(&self, params: &ParamSet, v: &Volume) -> Result<Volume> {
        Ok(forward(&self.disc_spec, params, &self.pad(v).0, None)?.output)
    }

    /// One generator update followed by one discriminator update on fakes
    /// from the updated generators. Returns the losses measured before
    /// either update.
    pub fn train_step(&mut self, a: &Volume, b: &Volume) -> Result<CmftLossReport> {
        let gs = &self.gen_spec;
        let t_fb = forward_trace(gs, &self.g_ab, a, None)?;
        let t_ra = forward_trace(gs, &self.g_ba, t_fb.output(), None)?;
        let t_fa = forward_trace(gs, &self.g_ba, b, None)?;
        let t_rb = forward_trace(gs, &self.g_ab, t_fa.output(), None)?;
        let (fake_b, fake_a) = (t_fb.output(), t_fa.output());

        let s_fb = self.score(&self.d_b, fake_b)?;
        let s_fa = self.score(&self.d_a, fake_a)?;
        let adv_g_ab = adv_loss_generator_grad(&s_fb)?.0;
        let adv_g_ba = adv_loss_generator_grad(&s_fa)?.0;
        let adv_d_a = adv_loss_discriminator(&self.score(&self.d_a, a)?, &s_fa)?;
        let adv_d_b = adv_loss_discriminator(&self.score(&self.d_b, b)?, &s_fb)?;
        let (cyc, g_ra, g_rb) = cycle_loss_grad(a, t_ra.output(), b, t_rb.output())?;
        let report = cmft_total(adv_g_ab, adv_g_ba, adv_d_a, adv_d_b, cyc, self.lambda)?;

        let lam = self.lambda as f32;
        let adv_grad = |s: &Volume| Ok(adv_loss_generator_grad(s)?.1);
        // a -> fake_b: adversarial signal through D_B plus the cycle through G_BA
        let d_fb_adv = self.disc_input_grad(&self.d_b, fake_b, adv_grad)?;
        let ba_cycle = backward(gs, &self.g_ba, &t_ra, Some(&scaled(&g_ra, lam)), &[], true)?;
        let d_fb = added(&d_fb_adv, ba_cycle.input.as_ref().expect("requested"));
        let ab_main = backward(gs, &self.g_ab, &t_fb, Some(&d_fb), &[], false)?;
        // b -> fake_a, symmetrically
        let d_fa_adv = self.disc_input_grad(&self.d_a, fake_a, adv_grad)?;
        let ab_cycle = backward(gs, &self.g_ab, &t_rb, Some(&scaled(&g_rb, lam)), &[], true)?;
        let d_fa = added(&d_fa_adv, ab_cycle.input.as_ref().expect("requested"));
        let ba_main = backward(gs, &self.g_ba, &t_fa, Some(&d_fa), &[], false)?;

        self.opt_g_ab.update(&mut self.g_ab, &add_params(&ab_main.params, &ab_cycle.params))?;
        self.opt_g_ba.update(&mut self.g_ba, &add_params(&ba_main.params, &ba_cycle.params))?;

        let fresh_b = forward(gs, &self.g_ab, a, None)?.output;
        let fresh_a = forward(gs, &self.g_ba, b, None)?.output;
        let fresh_b = query_pool(&mut self.pool_b, self.pool_size, fresh_b, derive_seed(self.seed, "pool_b", self.step));
        let fresh_a = query_pool(&mut self.pool_a, self.pool_size, fresh_a, derive_seed(self.seed, "pool_a", self.step));
        let gd_b = self.disc_param_grads(&self.d_b, b, &fresh_b)?;
        let gd_a = self.disc_param_grads(&self.d_a, a, &fresh_a)?;
        self.opt_d_b.update(&mut self.d_b, &gd_b)?;
        self.opt_d_a.update(&mut self.d_a, &gd_a)?;
        self.step += 1;
        Ok(report)
    }

    fn meta(&self, fingerprint: &str, phase: Phase) -> CheckpointMeta {
        CheckpointMeta { phase, seed: self.seed, step: self.step, config_hash: fingerprint.to_string() }
    }

    pub fn generators(&self, arch: TrunkArch, fingerprint: &str) -> GeneratorPair {
        let ck = |params: &ParamSet| Checkpoint { meta: self.meta(fingerprint, Phase::Cmft), params: params.clone() };
        GeneratorPair { arch, g_ab: ck(&self.g_ab), g_ba: ck(&self.g_ba) }
    }

    /// Full resumable state: generator file contents plus discriminators,
    /// optimizer moments and the sample history.
    pub fn state_archive(&self, arch: TrunkArch, fingerprint: &str) -> Result<Archive> {
        let mut a = self.generators(arch, fingerprint).to_archive()?;
        a.meta["kind"] = "cmft_state".into();
        a.meta["step"] = self.step.into();
        a.insert_params("d_a/", &self.d_a);
        a.insert_params("d_b/", &self.d_b);
        self.opt_g_ab.store(&mut a, "opt/g_ab/");
        self.opt_g_ba.store(&mut a, "opt/g_ba/");
        self.opt_d_a.store(&mut a, "opt/d_a/");
        self.opt_d_b.store(&mut a, "opt/d_b/");
        for (tag, pool) in [("pool_a", &self.pool_a), ("pool_b", &self.pool_b)] {
            for (i, v) in pool.iter().enumerate() {
                let [d, h, w] = v.dims();
                let t = Tensor::new(vec![v.channels(), d, h, w], v.data().to_vec())?;
                a.tensors.insert(format!("{tag}/{i:06}"), t);
            }
        }
        Ok(a)
    }

    /// Rebuilds the model from a state archive written under the same config.
    pub fn restore(cfg: &CmftConfig, archive: &Archive, path: &Path) -> Result<Self> {
        let pair = GeneratorPair::from_archive(archive, path)?;
        if pair.g_ab.meta.config_hash != cfg.fingerprint()? {
            return Err(Error::format(path, "state was written under a different configuration"));
        }
        if archive.meta.get("kind").and_then(|k| k.as_str()) != Some("cmft_state") {
            return Err(Error::format(path, "not a resumable translation state"));
        }
        let mut m = Self::from_config(cfg)?;
        m.step = pair.g_ab.meta.step;
        m.g_ab = pair.g_ab.params;
        m.g_ba = pair.g_ba.params;
        m.d_a = archive.extract_params("d_a/")?;
        m.d_b = archive.extract_params("d_b/")?;
        check_params(&m.disc_spec, &m.d_a)?;
        check_params(&m.disc_spec, &m.d_b)?;
        m.opt_g_ab = Adam::restore(archive, "opt/g_ab/", cfg.lr, m.step)?;
        m.opt_g_ba = Adam::restore(archive, "opt/g_ba/", cfg.lr, m.step)?;
        m.opt_d_a = Adam::restore(archive, "opt/d_a/", cfg.lr, m.step)?;
        m.opt_d_b = Adam::restore(archive, "opt/d_b/", cfg.lr, m.step)?;
        for (tag, pool) in [("pool_a/", &mut m.pool_a), ("pool_b/", &mut m.pool_b)] {
            for (name, t) in archive.tensors.range(tag.to_string()..) {
                if !name.starts_with(tag) {
                    break;
                }
                pool.push(Volume::new(t.shape[0], [t.shape[1], t.shape[2], t.shape[3]], [1.0; 3], t.data.clone())?);
            }
        }
        Ok(m)
    }
}

pub(crate) fn pair_input(subject_id: &str, vols: &std::collections::BTreeMap<ModalityId, Volume>, pair: &[ModalityId]) -> Result<Volume> {
    build_pair_input(vols, pair).map_err(|e| match e {
        Error::MissingModality { modality, .. } => Error::MissingModality { subject: subject_id.to_string(), modality },
        other => other,
    })
}

/// The unpaired `(a, b)` patches for a given step: drawn from two different
/// subjects (when more than one exists) as a pure function of the seeds and
/// the step index.
pub fn sample_batch(cfg: &CmftConfig, data: &TrainingSet, step: u64) -> Result<(Volume, Volume)> {
    let ia = data.pick(cfg.seed, "cmft.a", step);
    let mut ib = data.pick(cfg.seed, "cmft.b", step);
    if ib == ia && data.len() > 1 {
        ib = (ib + 1) % data.len();
    }
    let draw = |i: usize, stream: &str, pair: &[ModalityId]| -> Result<Volume> {
        let s = data.subject(i);
        let spec = PatchSpec { seed: derive_seed(cfg.patch.seed, stream, step), ..cfg.patch.clone() };
        let patch = sample_patch(&s.modalities, s.label.as_ref(), &spec)?;
        pair_input(&s.id, &patch.modalities, pair)
    };
    Ok((draw(ia, "cmft.patch_a", cfg.pair_spec.pair_a())?, draw(ib, "cmft.patch_b", cfg.pair_spec.pair_b())?))
}

/// Result of a translation run.
#[derive(Clone, Debug)]
pub struct CmftRun {
    pub model: CmftModel,
    pub generators: GeneratorPair,
    /// Reports of the steps executed by this call.
    pub reports: Vec<CmftLossReport>,
}

pub fn trunk_arch(cfg: &CmftConfig) -> TrunkArch {
    TrunkArch { in_channels: cfg.pair_spec.width(), base_filters: cfg.base_filters, depth: cfg.depth }
}

/// Trains up to `cfg.steps`, optionally resuming from a state archive.
/// With an output directory, writes the per-step log, periodic states under
/// `checkpoints/`, the final state and the generator file.
pub fn run_cmft(cfg: &CmftConfig, data: &TrainingSet, out_dir: Option<&Path>, resume: Option<&Path>) -> Result<CmftRun> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let fingerprint = cfg.fingerprint()?;
    let arch = trunk_arch(cfg);
    let mut model = match resume {
        Some(p) => CmftModel::restore(cfg, &Archive::load(p)?, p)?,
        None => CmftModel::from_config(cfg)?,
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
        let (a, b) = sample_batch(cfg, data, step)?;
        let report = model.train_step(&a, &b)?;
        if let Some(log) = log.as_mut() {
            log.write_line(&log_line(step, "cmft", &report)?)?;
        }
        reports.push(report);
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && model.step % cfg.checkpoint_every == 0) {
            let ckdir = dir.join(CHECKPOINT_DIR);
            ensure_dir(&ckdir)?;
            log.as_mut().expect("log open with out_dir").flush()?;
            model.state_archive(arch, &fingerprint)?.save(&ckdir.join(format!("cmft_step_{:06}.ckpt", model.step)))?;
        }
    }
    model.set_lr(cfg.lr);
    let generators = model.generators(arch, &fingerprint);
    if let Some(dir) = out_dir {
        log.as_mut().expect("log open with out_dir").flush()?;
        model.state_archive(arch, &fingerprint)?.save(&dir.join(STATE_FILE))?;
        generators.save(&dir.join(GENERATORS_FILE))?;
    }
    Ok(CmftRun { model, generators, reports })
}

/// Per-step losses of the self-reconstruction baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub recon_a: f64,
    pub recon_b: f64,
    pub total: f64,
}

/// One self-reconstruction update of a generator: L1 between `g(x)` and `x`.
pub fn self_recon_step(spec: &NetworkSpec, params: &mut ParamSet, opt: &mut Adam, x: &Volume) -> Result<f64> {
    let t = forward_trace(spec, params, x, None)?;
    let (loss, g) = mean_abs_error(
        &t.output().data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite { term: "recon".into() });
    }
    let gv = Volume::new(x.channels(), x.dims(), x.spacing(), g.into_iter().map(|v| v as f32).collect())?;
    let grads = backward(spec, params, &t, Some(&gv), &[], false)?;
    opt.update(params, &grads.params)?;
    Ok(loss)
}

/// Baseline feature learning without translation: each generator learns to
/// reproduce its own input. Uses the same initialisation and data stream as
/// [`run_cmft`]; the output is interchangeable with its generator file.
pub fn pretrain_self_recon(cfg: &CmftConfig, data: &TrainingSet, out_dir: Option<&Path>) -> Result<(GeneratorPair, Vec<ReconReport>)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let fingerprint = cfg.fingerprint()?;
    let model = CmftModel::from_config(cfg)?;
    let spec = model.gen_spec.clone();
    let (mut g_ab, mut g_ba) = (model.g_ab, model.g_ba);
    let (mut o_ab, mut o_ba) = (Adam::new(&g_ab, cfg.lr), Adam::new(&g_ba, cfg.lr));
    let mut log = match out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            Some(LogWriter::open(&dir.join(SELF_RECON_LOG_FILE), 0)?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    for step in 0..cfg.steps {
        let lr = cfg.learning_rate(step);
        o_ab.lr = lr;
        o_ba.lr = lr;
        let (a, b) = sample_batch(cfg, data, step)?;
        let recon_a = self_recon_step(&spec, &mut g_ab, &mut o_ab, &a)?;
        let recon_b = self_recon_step(&spec, &mut g_ba, &mut o_ba, &b)?;
        let r = ReconReport { recon_a, recon_b, total: recon_a + recon_b };
        if let Some(log) = log.as_mut() {
            log.write_line(&log_line(step, "self_recon", &r)?)?;
        }
        reports.push(r);
    }
    let meta = CheckpointMeta { phase: Phase::SelfRecon, seed: cfg.seed, step: cfg.steps, config_hash: fingerprint };
    let pair = GeneratorPair {
        arch: trunk_arch(cfg),
        g_ab: Checkpoint { meta: meta.clone(), params: g_ab },
        g_ba: Checkpoint { meta, params: g_ba },
    };
    if let Some(dir) = out_dir {
        log.as_mut().expect("log open with out_dir").flush()?;
        pair.save(&dir.join(GENERATORS_FILE))?;
    }
    Ok((pair, reports))
}

/// Location of the generator file inside a translation output directory.
pub fn generators_path(out_dir: &Path) -> PathBuf {
    out_dir.join(GENERATORS_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, LayerParams};

    fn toy_spec() -> NetworkSpec {
        let mut l = LayerSpec::conv("w", 1, 1, 1, 1, 0);
        l.bias = false;
        NetworkSpec::new(1, vec![l], vec![], 1).unwrap()
    }

    fn set_w(p: &mut ParamSet, w: f32) {
        p.get_mut("w").unwrap().weight.data[0] = w;
    }

    fn w(p: &ParamSet) -> f64 {
        p["w"].weight.data[0] as f64
    }

    fn voxel(v: f32) -> Volume {
        Volume::new(1, [1; 3], [1.0; 3], vec![v]).unwrap()
    }

    #[test]
    fn toy_generator_step_matches_adam_formula() {
        let lr = 0.01;
        let lambda = 10.0;
        let mut m = CmftModel::new(toy_spec(), toy_spec(), 1, lr, lambda, 0).unwrap();
        set_w(&mut m.g_ab, 0.8);
        set_w(&mut m.g_ba, 0.5);
        set_w(&mut m.d_a, 0.3);
        set_w(&mut m.d_b, -0.4);
        let (a, b) = (1.5f64, -0.7f64);
        let (w1, w2, da, db) = (0.8f64, 0.5f64, 0.3f64, -0.4f64);
        // hand derivative of (db w1 a - 1)^2 + (da w2 b - 1)^2 + λ(|w2 w1 a - a| + |w1 w2 b - b|)
        let sgn = |x: f64| x.signum();
        let g1 = 2.0 * (db * w1 * a - 1.0) * db * a + lambda * (sgn(w2 * w1 * a - a) * w2 * a + sgn(w1 * w2 * b - b) * w2 * b);
        let g2 = 2.0 * (da * w2 * b - 1.0) * da * b + lambda * (sgn(w2 * w1 * a - a) * w1 * a + sgn(w1 * w2 * b - b) * w1 * b);
        // first Adam step: m̂ = g, v̂ = g², Δ = lr·g/(|g| + eps)
        let adam = |w: f64, g: f64| w - lr * g / (g.abs() + 1e-8);
        let report = m.train_step(&voxel(a as f32), &voxel(b as f32)).unwrap();
        assert!((w(&m.g_ab) - adam(w1, g1)).abs() < 1e-6);
        assert!((w(&m.g_ba) - adam(w2, g2)).abs() < 1e-6);
        let cyc = (w2 * w1 * a - a).abs() + (w1 * w2 * b - b).abs();
        assert!((report.cyc - cyc).abs() < 1e-6);
        assert!((report.total_g - ((db * w1 * a - 1.0).powi(2) + (da * w2 * b - 1.0).powi(2) + lambda * cyc)).abs() < 1e-5);
        // discriminators see fakes from the updated generators
        let (n1, n2) = (adam(w1, g1), adam(w2, g2));
        let gdb = 2.0 * (db * b - 1.0) * b + 2.0 * (db * n1 * a) * n1 * a;
        let gda = 2.0 * (da * a - 1.0) * a + 2.0 * (da * n2 * b) * n2 * b;
        assert!((w(&m.d_b) - adam(db, gdb)).abs() < 1e-6);
        assert!((w(&m.d_a) - adam(da, gda)).abs() < 1e-6);
    }

    fn small_cfg() -> CmftConfig {
        CmftConfig {
            patch: PatchSpec { size: [16; 3], foreground_rule: ForegroundRule::BrainOverlap, seed: 3 },
            base_filters: 2,
            depth: 1,
            steps: 3,
            seed: 9,
            checkpoint_every: 2,
            ..Default::default()
        }
    }

    fn phantom_data(n: usize) -> TrainingSet {
        let cfg = crate::data::PhantomConfig { grid_size: [20; 3], n_subjects: n, n_test: 0, ..Default::default() };
        TrainingSet::new((0..n).map(|i| {
            let mut s = crate::data::phantom::generate_subject(&cfg, i).subject;
            s.modalities = s.modalities.iter().map(|(m, v)| (*m, crate::data::z_normalize(v).unwrap())).collect();
            s
        }).collect()).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let cfg = small_cfg();
        let data = phantom_data(2);
        let mut m = CmftModel::from_config(&cfg).unwrap();
        m.set_lr(0.0);
        let before = m.clone();
        let (a, b) = sample_batch(&cfg, &data, 0).unwrap();
        m.train_step(&a, &b).unwrap();
        for (x, y) in [(&m.g_ab, &before.g_ab), (&m.g_ba, &before.g_ba), (&m.d_a, &before.d_a), (&m.d_b, &before.d_b)] {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn discriminator_update_does_not_touch_generators() {
        let cfg = small_cfg();
        let data = phantom_data(2);
        let mut m = CmftModel::from_config(&cfg).unwrap();
        let (a, b) = sample_batch(&cfg, &data, 0).unwrap();
        // isolate the discriminator half of the step
        let g_before = (m.g_ab.clone(), m.g_ba.clone());
        let gd = m.disc_param_grads(&m.d_b, &b, &forward(&m.gen_spec, &m.g_ab, &a, None).unwrap().output).unwrap();
        m.opt_d_b.update(&mut m.d_b, &gd).unwrap();
        assert_eq!((m.g_ab.clone(), m.g_ba.clone()), g_before);
        assert!(gd.values().any(|p: &LayerParams| p.weight.data.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn batches_are_unpaired_and_reproducible() {
        let cfg = small_cfg();
        let data = phantom_data(3);
        let (a1, b1) = sample_batch(&cfg, &data, 4).unwrap();
        let (a2, b2) = sample_batch(&cfg, &data, 4).unwrap();
        assert_eq!((a1.data(), b1.data()), (a2.data(), b2.data()));
        assert_eq!((a1.channels(), a1.dims()), (2, [16; 3]));
        for step in 0..12 {
            assert_ne!(data.pick(cfg.seed, "cmft.a", step), {
                let ia = data.pick(cfg.seed, "cmft.a", step);
                let ib = data.pick(cfg.seed, "cmft.b", step);
                if ib == ia { (ib + 1) % 3 } else { ib }
            });
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_cfg();
        let data = phantom_data(2);
        let dir = tempfile::tempdir().unwrap();
        let full = run_cmft(&cfg, &data, Some(&dir.path().join("full")), None).unwrap();
        let first = CmftConfig { steps: 2, ..cfg.clone() };
        run_cmft(&first, &data, Some(&dir.path().join("part")), None).unwrap();
        let resumed = run_cmft(&cfg, &data, Some(&dir.path().join("part")), Some(&dir.path().join("part").join(STATE_FILE))).unwrap();
        assert_eq!(resumed.generators, full.generators);
        assert_eq!(resumed.model.d_a, full.model.d_a);
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&dir.path().join("full").join(LOG_FILE)), read(&dir.path().join("part").join(LOG_FILE)));
        assert_eq!(read(&dir.path().join("full").join(STATE_FILE)), read(&dir.path().join("part").join(STATE_FILE)));
        // periodic checkpoint at step 2 exists and reloads
        let ck = dir.path().join("full").join(CHECKPOINT_DIR).join("cmft_step_000002.ckpt");
        let state = CmftModel::restore(&cfg, &Archive::load(&ck).unwrap(), &ck).unwrap();
        assert_eq!(state.step, 2);
        let text = std::fs::read_to_string(dir.path().join("full").join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = CmftConfig { steps: 0, ..small_cfg() };
        let data = phantom_data(2);
        let run = run_cmft(&cfg, &data, None, None).unwrap();
        let fresh = CmftModel::from_config(&cfg).unwrap();
        assert_eq!(run.generators.g_ab.params, fresh.g_ab);
        assert!(run.reports.is_empty());
    }

    #[test]
    fn replay_pool_round_trips_through_state() {
        let cfg = CmftConfig { replay_pool: 2, steps: 3, ..small_cfg() };
        let data = phantom_data(2);
        let dir = tempfile::tempdir().unwrap();
        let run = run_cmft(&cfg, &data, Some(dir.path()), None).unwrap();
        let p = dir.path().join(STATE_FILE);
        let back = CmftModel::restore(&cfg, &Archive::load(&p).unwrap(), &p).unwrap();
        assert_eq!(back.pool_a.len(), 2);
        assert_eq!(back.pool_b[1].data(), run.model.pool_b[1].data());
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = CmftConfig { lr: 0.0, lambda: -1.0, depth: 0, ..Default::default() };
        assert_eq!(cfg.validate().len(), 3);
    }

    #[test]
    fn self_recon_first_loss_matches_forward() {
        let cfg = CmftConfig { steps: 1, ..small_cfg() };
        let data = phantom_data(2);
        let init = CmftModel::from_config(&cfg).unwrap();
        let (a, _) = sample_batch(&cfg, &data, 0).unwrap();
        let out = forward(&init.gen_spec, &init.g_ab, &a, None).unwrap().output;
        let l1 = out.data().iter().zip(a.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.data().len() as f64;
        let (pair, reports) = pretrain_self_recon(&cfg, &data, None).unwrap();
        assert!((reports[0].recon_a - l1).abs() < 1e-9);
        assert_eq!(pair.g_ab.meta.phase, Phase::SelfRecon);
        let (zero, _) = pretrain_self_recon(&CmftConfig { steps: 0, ..cfg }, &data, None).unwrap();
        assert_eq!(zero.g_ab.params, init.g_ab);
    }
}
