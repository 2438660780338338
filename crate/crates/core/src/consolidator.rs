//! Feature consolidation: a trainable copy of the teacher sees clean images
//! and is aligned with the teacher's noisy-input features through
//! timestep-conditioned projection heads.
//!
//! Each head is three residual point-wise FFN blocks. A block computes
//! `h + W_out(act(u))` where `u` is the conditioned input:
//!
//! * FiLM: `u = (1 + scale(t)) * h + shift(t)`
//! * AdaRMS: `u = (1 + scale(t)) * h / rms(h)`
//!
//! and `act` is SwiGLU (`silu(W_a u) * W_b u`) or Swish (`silu(W_a u)`). The
//! modulation maps and `W_out` start at zero, so an untrained head is the
//! identity.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{sample_indices, DenoiserParams, Role};
use crate::checkpoint::Container;
use crate::nn::{self, Initializer, ParamStore};
use crate::optim::WarmupAdam;
use crate::schedule::{forward_noise_batch, gaussian_noise, sample_stratified_timesteps, NoiseSchedule};
use crate::stack::{FeatureStack, TapBatch};
use crate::{Error, Result};

pub const HEADS_COMPONENT: &str = "heads";
pub const BLOCKS_PER_HEAD: usize = 3;
/// Hidden width of every head FFN, as a multiple of the stage width.
pub const HIDDEN_MULTIPLIER: usize = 2;
/// Vectors with a norm below this count as zero under the cosine metric.
pub const ZERO_NORM: f64 = 1e-8;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`",
                        stringify!($name)
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(Metric { Cosine => "cosine", L2 => "l2", L1 => "l1" });
string_enum!(Conditioning { Film => "film", AdaRms => "adarms" });
string_enum!(Gating { SwiGlu => "swiglu", Swish => "swish" });
string_enum!(HeadPretraining {
    None => "none",
    Joint => "joint",
    FrozenAfterPretrain => "frozen_after_pretrain",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub metric: Metric,
    pub use_heads: bool,
    /// Stratification bins `I`.
    pub bins: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub head_conditioning: Conditioning,
    pub head_gating: Gating,
    pub head_pretraining: HeadPretraining,
    /// Head-only steps run before distillation when pretraining is enabled.
    pub head_pretrain_steps: usize,
    /// Per-stage loss weights; empty means all ones.
    #[serde(default)]
    pub stage_weights: Vec<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub log_every: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            use_heads: true,
            bins: 3,
            steps: 200,
            batch_size: 8,
            learning_rate: 1e-4,
            warmup_steps: 20,
            head_conditioning: Conditioning::Film,
            head_gating: Gating::SwiGlu,
            head_pretraining: HeadPretraining::None,
            head_pretrain_steps: 50,
            stage_weights: Vec::new(),
            grad_clip: None,
            log_every: 100,
        }
    }
}

impl AlignmentConfig {
    /// The budget used for foundation-scale backbones: 400 steps at 2e-6.
    pub fn paper_scale() -> Self {
        Self {
            steps: 400,
            learning_rate: 2e-6,
            warmup_steps: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_timesteps: usize) -> Result<()> {
        if self.bins == 0 || self.bins > num_timesteps {
            return Err(Error::Config(format!("bins {} outside [1, {num_timesteps}]", self.bins)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stage_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("stage weights must be finite".into()));
        }
        Ok(())
    }

    fn weights(&self, k: usize) -> Result<Vec<f64>> {
        if self.stage_weights.is_empty() {
            Ok(vec![1.0; k])
        } else if self.stage_weights.len() == k {
            Ok(self.stage_weights.clone())
        } else {
            Err(Error::Config(format!(
                "{} stage weights for {k} stages",
                self.stage_weights.len()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadsSpec {
    pub stage_channels: Vec<usize>,
    pub conditioning: Conditioning,
    pub gating: Gating,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ProjectionHeadParams {
    pub spec: HeadsSpec,
    pub params: ParamStore,
}

pub fn init_heads(spec: &HeadsSpec, seed: u64) -> Result<ProjectionHeadParams> {
    init_heads_dtype(spec, seed, DType::F32)
}

pub fn init_heads_dtype(spec: &HeadsSpec, seed: u64, dtype: DType) -> Result<ProjectionHeadParams> {
    if spec.stage_channels.is_empty() || spec.stage_channels.contains(&0) {
        return Err(Error::Config("heads need at least one non-empty stage".into()));
    }
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), dtype);
    let mut ps = ParamStore::new();
    let e = spec.embed_dim;
    init.linear(&mut ps, "time.fc1", e, e)?;
    for (k, &c) in spec.stage_channels.iter().enumerate() {
        let hidden = HIDDEN_MULTIPLIER * c;
        for b in 0..BLOCKS_PER_HEAD {
            let p = format!("head.{k}.{b}");
            let mod_width = match spec.conditioning {
                Conditioning::Film => 2 * c,
                Conditioning::AdaRms => c,
            };
            init.zero_linear(&mut ps, &format!("{p}.mod"), e, mod_width)?;
            init.linear(&mut ps, &format!("{p}.w_a"), c, hidden)?;
            if spec.gating == Gating::SwiGlu {
                init.linear(&mut ps, &format!("{p}.w_b"), c, hidden)?;
            }
            init.zero_linear(&mut ps, &format!("{p}.w_out"), hidden, c)?;
        }
    }
    Ok(ProjectionHeadParams {
        spec: spec.clone(),
        params: ps,
    })
}

impl ProjectionHeadParams {
    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    pub fn num_stages(&self) -> usize {
        self.spec.stage_channels.len()
    }

    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            params: self.params.deep_copy()?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            params: self.params.to_dtype(dtype)?,
        })
    }

    fn time_features(&self, timesteps: &[usize], device: &Device) -> Result<Tensor> {
        let emb = nn::timestep_embedding(timesteps, self.spec.embed_dim, self.params.dtype(), device)?;
        Ok(nn::linear(&self.params, "time.fc1", &emb)?.silu()?)
    }

    /// Projects batched maps `(B, C_k, H_k, W_k)` at per-image timesteps.
    pub fn project(&self, taps: &TapBatch, timesteps: &[usize]) -> Result<TapBatch> {
        if taps.maps.len() != self.num_stages() {
            return Err(Error::Shape(format!(
                "{} maps for {} heads",
                taps.maps.len(),
                self.num_stages()
            )));
        }
        let batch = taps.batch_size()?;
        if timesteps.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for batch {batch}", timesteps.len())));
        }
        let temb = self.time_features(timesteps, &Device::Cpu)?;
        let maps = taps
            .maps
            .iter()
            .enumerate()
            .map(|(k, m)| self.project_stage(k, m, &temb))
            .collect::<Result<Vec<_>>>()?;
        Ok(TapBatch {
            stage_ids: taps.stage_ids.clone(),
            maps,
        })
    }

    fn project_stage(&self, k: usize, map: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = map.dims4()?;
        if c != self.spec.stage_channels[k] {
            return Err(Error::Shape(format!(
                "stage {k} has {c} channels, head expects {}",
                self.spec.stage_channels[k]
            )));
        }
        let ps = &self.params;
        // (B, HW, C): every position is an independent row.
        let mut x = map.to_dtype(ps.dtype())?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        for blk in 0..BLOCKS_PER_HEAD {
            let p = format!("head.{k}.{blk}");
            let modulation = nn::linear(ps, &format!("{p}.mod"), temb)?.unsqueeze(1)?;
            let u = match self.spec.conditioning {
                Conditioning::Film => {
                    let scale = modulation.narrow(D::Minus1, 0, c)?;
                    let shift = modulation.narrow(D::Minus1, c, c)?;
                    x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?
                }
                Conditioning::AdaRms => {
                    let rms = (x.sqr()?.mean_keepdim(D::Minus1)? + 1e-6)?.sqrt()?;
                    x.broadcast_div(&rms)?.broadcast_mul(&(modulation + 1.0)?)?
                }
            };
            let a = nn::linear(ps, &format!("{p}.w_a"), &u)?.silu()?;
            let act = match self.spec.gating {
                Gating::SwiGlu => (a * nn::linear(ps, &format!("{p}.w_b"), &u)?)?,
                Gating::Swish => a,
            };
            x = (x + nn::linear(ps, &format!("{p}.w_out"), &act)?)?;
        }
        Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut c = Container::new(HEADS_COMPONENT, serde_json::to_value(&self.spec)?);
        for (name, t) in self.params.tensors() {
            c.push(name, t.to_dtype(DType::F32)?);
        }
        c.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_component(HEADS_COMPONENT)?;
        let spec: HeadsSpec = serde_json::from_value(c.metadata.clone())?;
        let reference = init_heads(&spec, 0)?;
        let mut ps = ParamStore::new();
        for (name, t) in &c.tensors {
            let expected = reference
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if expected.dims() != t.dims() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}", t.dims())));
            }
            ps.insert(name.clone(), t.clone())?;
        }
        if ps.len() != reference.params.len() {
            return Err(Error::Checkpoint("heads checkpoint is missing tensors".into()));
        }
        Ok(Self { spec, params: ps })
    }
}

/// Projects one image's stack at timestep `t`.
pub fn project_features(heads: &ProjectionHeadParams, stack: &FeatureStack, t: usize) -> Result<FeatureStack> {
    for (m, &c) in stack.entries.iter().zip(&heads.spec.stage_channels) {
        if m.channels != c {
            return Err(Error::Shape(format!(
                "stage {} has {} channels, head expects {c}",
                m.stage_id, m.channels
            )));
        }
    }
    let batch = TapBatch::from_stacks(std::slice::from_ref(stack))?;
    let projected = heads.project(&batch, &[t])?;
    let mut provenance = stack.provenance.clone();
    provenance.projected_t = Some(t);
    Ok(projected.into_stacks(&[provenance])?.remove(0))
}

/// Per-image, per-stage mean over positions of the channel cosine. Returns
/// `(B, 1)` per stage. Positions where either vector has a norm below
/// [`ZERO_NORM`] contribute a similarity of 0.
fn stage_cosine(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let dot = (p * q)?.sum(1)?;
    let np = p.sqr()?.sum(1)?;
    let nq = q.sqr()?.sum(1)?;
    let floor = ZERO_NORM * ZERO_NORM;
    let valid = (np.ge(floor)?.to_dtype(DType::U8)? * nq.ge(floor)?.to_dtype(DType::U8)?)?;
    let ones = np.ones_like()?;
    let denom = valid.where_cond(&(np * nq)?, &ones)?.sqrt()?;
    let cos = valid.where_cond(&(dot / denom)?, &ones.zeros_like()?)?;
    Ok(cos.flatten_from(1)?.mean_keepdim(1)?)
}

/// The per-stage, per-image loss term `(B, 1)`.
fn stage_term(p: &Tensor, q: &Tensor, metric: Metric) -> Result<Tensor> {
    Ok(match metric {
        Metric::Cosine => stage_cosine(p, q)?.neg()?,
        Metric::L2 => (p - q)?.sqr()?.flatten_from(1)?.mean_keepdim(1)?,
        Metric::L1 => (p - q)?.abs()?.flatten_from(1)?.mean_keepdim(1)?,
    })
}

/// Batched loss: mean over the batch of `sum_k w_k * term_k`, plus the mean
/// per-stage cosine similarity (always cosine, for logging).
pub fn alignment_loss_batch(
    projected: &TapBatch,
    teacher: &TapBatch,
    metric: Metric,
    weights: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    if projected.maps.len() != teacher.maps.len() || weights.len() != projected.maps.len() {
        return Err(Error::Shape(format!(
            "{} projected maps, {} teacher maps, {} weights",
            projected.maps.len(),
            teacher.maps.len(),
            weights.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut sims = Vec::with_capacity(weights.len());
    for ((p, q), w) in projected.maps.iter().zip(&teacher.maps).zip(weights) {
        if p.dims() != q.dims() {
            return Err(Error::Shape(format!("maps {:?} vs {:?}", p.dims(), q.dims())));
        }
        let q = q.to_dtype(p.dtype())?;
        let term = stage_term(p, &q, metric)?;
        let cos = if metric == Metric::Cosine {
            term.neg()?
        } else {
            stage_cosine(p, &q)?
        };
        sims.push(cos.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        let term = if *w == 1.0 { term } else { term.affine(*w, 0.0)? };
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("empty stacks".into()))?;
    Ok((total.mean_all()?, sims))
}

/// Loss between one projected stack and one teacher stack, computed in f64.
/// Returns the scalar and the per-stage values of the metric's term
/// (similarity for cosine, mean error for l1/l2).
pub fn alignment_loss(projected: &FeatureStack, teacher: &FeatureStack, metric: Metric) -> Result<(f64, Vec<f64>)> {
    if !projected.same_shape(teacher) {
        return Err(Error::Shape("projected and teacher stacks differ in shape".into()));
    }
    let p = TapBatch::from_stacks(std::slice::from_ref(projected))?;
    let q = TapBatch::from_stacks(std::slice::from_ref(teacher))?;
    let mut total = 0.0;
    let mut per_stage = Vec::with_capacity(p.maps.len());
    for (a, b) in p.maps.iter().zip(&q.maps) {
        let a = a.to_dtype(DType::F64)?;
        let b = b.to_dtype(DType::F64)?;
        let term = stage_term(&a, &b, metric)?.mean_all()?.to_scalar::<f64>()?;
        total += term;
        per_stage.push(if metric == Metric::Cosine { -term } else { term });
    }
    Ok((total, per_stage))
}

/// A trainable copy of the teacher.
pub fn init_student_from_teacher(teacher: &DenoiserParams) -> Result<DenoiserParams> {
    if teacher.role() != Role::TeacherFrozen {
        return Err(Error::Invalid("student must be copied from a frozen teacher".into()));
    }
    let mut student = teacher.deep_copy()?;
    student.set_role(Role::StudentTrainable);
    Ok(student)
}

pub fn heads_spec_for(teacher: &DenoiserParams, cfg: &AlignmentConfig) -> HeadsSpec {
    HeadsSpec {
        stage_channels: teacher.config.tap_sites().iter().map(|s| s.channels).collect(),
        conditioning: cfg.head_conditioning,
        gating: cfg.head_gating,
        embed_dim: teacher.config.timestep_embed_dim,
    }
}

/// The timestep fed to the student.
pub const STUDENT_TIMESTEP: usize = 0;

/// Student taps for clean images.
pub fn student_features(student: &DenoiserParams, x0: &Tensor) -> Result<TapBatch> {
    let b = x0.dim(0)?;
    student.features(x0, &vec![STUDENT_TIMESTEP; b])
}

/// Training objective for one mini-batch: the student stack of `x0` is
/// reused for every draw; `teacher_taps` and `timesteps` hold the draws
/// concatenated along the batch axis (draw-major, `I * B` rows). The result
/// is the loss summed over draws and averaged over images.
pub fn distillation_objective(
    teacher_taps: &TapBatch,
    timesteps: &[usize],
    student: &DenoiserParams,
    heads: Option<&ProjectionHeadParams>,
    x0: &Tensor,
    metric: Metric,
    weights: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    let b = x0.dim(0)?;
    if b == 0 || timesteps.len() % b != 0 {
        return Err(Error::Shape(format!("{} timesteps for batch {b}", timesteps.len())));
    }
    let draws = timesteps.len() / b;
    let s = student_features(student, x0)?;
    let repeated = TapBatch {
        stage_ids: s.stage_ids.clone(),
        maps: s
            .maps
            .iter()
            .map(|m| Tensor::cat(&vec![m; draws], 0))
            .collect::<candle_core::Result<Vec<_>>>()?,
    };
    let projected = match heads {
        Some(h) => h.project(&repeated, timesteps)?,
        None => repeated,
    };
    let (loss, sims) = alignment_loss_batch(&projected, teacher_taps, metric, weights)?;
    Ok((loss.affine(draws as f64, 0.0)?, sims))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Mean cosine per stage over the step's draws.
    pub stage_cosine: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub steps: Vec<StepLog>,
}

impl DistillLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// What the alignment loop updates.
struct Trainables<'a> {
    student: &'a DenoiserParams,
    heads: Option<&'a ProjectionHeadParams>,
    vars: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn alignment_loop(
    teacher: &DenoiserParams,
    tr: Trainables<'_>,
    images: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &AlignmentConfig,
    steps: usize,
    rng: &mut ChaCha8Rng,
    phase: &str,
) -> Result<DistillLog> {
    if teacher.role() != Role::TeacherFrozen {
        return Err(Error::Invalid("teacher must be frozen".into()));
    }
    cfg.validate(schedule.num_timesteps())?;
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    let weights = cfg.weights(teacher.config.num_taps)?;
    let mut opt = WarmupAdam::new(tr.vars.clone(), cfg.learning_rate, cfg.warmup_steps, cfg.grad_clip)?;
    let big_t = schedule.num_timesteps();
    let b = cfg.batch_size;
    let mut log = DistillLog::default();
    for step in 0..steps {
        let idx = sample_indices(rng, n, b);
        let x0 = images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
        // Draw-major timesteps: row i * B + j is draw i of image j.
        let mut per_image = Vec::with_capacity(b);
        for _ in 0..b {
            per_image.push(sample_stratified_timesteps(cfg.bins, big_t, rng)?.timesteps);
        }
        let timesteps: Vec<usize> = (0..cfg.bins).flat_map(|i| per_image.iter().map(move |d| d[i])).collect();
        let x_rep = Tensor::cat(&vec![&x0; cfg.bins], 0)?;
        let eps = gaussian_noise(rng, x_rep.dims())?;
        let xt = forward_noise_batch(&x_rep, &eps, &timesteps, schedule)?;
        let teacher_taps = teacher.features(&xt, &timesteps)?.detach();
        let heads = if cfg.use_heads { tr.heads } else { None };
        let (loss, sims) = distillation_objective(&teacher_taps, &timesteps, tr.student, heads, &x0, cfg.metric, &weights)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let stage = sims.iter().position(|s| !s.is_finite());
            return Err(Error::NonFinite { step, stage });
        }
        let lr = opt.lr_at(step);
        if !tr.vars.is_empty() {
            opt.backward_step(&loss)?;
        }
        log.steps.push(StepLog {
            step,
            loss: value,
            lr,
            stage_cosine: sims,
        });
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let window = &log.steps[log.steps.len().saturating_sub(cfg.log_every)..];
            let mean = window.iter().map(|s| s.loss).sum::<f64>() / window.len() as f64;
            log::info!("{phase} step {}/{steps}: loss {mean:.4}", step + 1);
        }
    }
    Ok(log)
}

/// Trains `student` (and `heads` when `cfg.use_heads` and the heads are not
/// frozen) against the frozen teacher.
pub fn run_distillation(
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    heads: &ProjectionHeadParams,
    images: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &AlignmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DistillLog> {
    if student.role() != Role::StudentTrainable {
        return Err(Error::Invalid("student must be trainable".into()));
    }
    let mut vars = student.params.vars();
    if cfg.use_heads && !heads.params.is_frozen() {
        vars.extend(heads.params.vars());
    }
    let tr = Trainables {
        student,
        heads: Some(heads),
        vars,
    };
    alignment_loop(teacher, tr, images, schedule, cfg, cfg.steps, rng, "distill")
}

/// Trains only the heads, against a fixed student.
pub fn pretrain_heads(
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    heads: &ProjectionHeadParams,
    images: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &AlignmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DistillLog> {
    if heads.params.is_frozen() {
        return Err(Error::Invalid("cannot pretrain frozen heads".into()));
    }
    let fixed = student.deep_copy()?.freeze();
    let tr = Trainables {
        student: &fixed,
        heads: Some(heads),
        vars: heads.params.vars(),
    };
    let cfg = AlignmentConfig {
        use_heads: true,
        ..cfg.clone()
    };
    alignment_loop(teacher, tr, images, schedule, &cfg, cfg.head_pretrain_steps, rng, "head pretrain")
}

#[derive(Debug, Clone)]
pub struct Consolidated {
    pub student: DenoiserParams,
    pub heads: ProjectionHeadParams,
    pub pretrain_log: Option<DistillLog>,
    pub log: DistillLog,
}

/// Copies the teacher, builds heads, optionally pretrains them, and distills.
pub fn consolidate(
    teacher: &DenoiserParams,
    images: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &AlignmentConfig,
    seed: u64,
) -> Result<Consolidated> {
    let student = init_student_from_teacher(teacher)?;
    let mut heads = init_heads(&heads_spec_for(teacher, cfg), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pretrain_log = if cfg.use_heads && cfg.head_pretraining != HeadPretraining::None {
        Some(pretrain_heads(teacher, &student, &heads, images, schedule, cfg, &mut rng)?)
    } else {
        None
    };
    if cfg.head_pretraining == HeadPretraining::FrozenAfterPretrain {
        heads.params.set_frozen(true);
    }
    let log = run_distillation(teacher, &student, &heads, images, schedule, cfg, &mut rng)?;
    heads.params.set_frozen(false);
    let mut student = student;
    student.set_role(Role::StudentTrainable);
    Ok(Consolidated {
        student,
        heads,
        pretrain_log,
        log,
    })
}

/// Held-out alignment per stratification bin: for every bin, each image gets
/// one timestep and one noise draw from `seed`; reports the mean cosine
/// (over images) per stage, `[bin][stage]`.
pub fn evaluate_alignment(
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    heads: Option<&ProjectionHeadParams>,
    images: &Tensor,
    schedule: &NoiseSchedule,
    bins: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = images.dim(0)?;
    let draws: Vec<Vec<usize>> = (0..b)
        .map(|_| sample_stratified_timesteps(bins, schedule.num_timesteps(), &mut rng).map(|d| d.timesteps))
        .collect::<Result<_>>()?;
    let s = student_features(&student.deep_copy()?.freeze(), images)?;
    let k = teacher.config.num_taps;
    let mut out = Vec::with_capacity(bins);
    for bin in 0..bins {
        let ts: Vec<usize> = draws.iter().map(|d| d[bin]).collect();
        let eps = gaussian_noise(&mut rng, images.dims())?;
        let xt = forward_noise_batch(images, &eps, &ts, schedule)?;
        let t_taps = teacher.features(&xt, &ts)?;
        let projected = match heads {
            Some(h) => h.project(&s, &ts)?,
            None => s.clone(),
        };
        let (_, sims) = alignment_loss_batch(&projected.detach(), &t_taps, Metric::Cosine, &vec![1.0; k])?;
        out.push(sims);
    }
    Ok(out)
}
