//! Pixel-space U-Net denoiser with feature taps.
//!
//! Layout for `L = stage_multipliers.len()` resolutions with widths
//! `c_i = base_channels * stage_multipliers[i]`:
//!
//! * `conv_in`: 3x3, `in_channels -> c_0`
//! * encoder: one residual block per level (`enc.i`, `c_{i-1} -> c_i`), its
//!   output kept as the skip for level `i`, then 2x average pooling between
//!   levels
//! * `mid`: one residual block at the coarsest level
//! * decoder, coarsest level first: `blocks_per_level` residual blocks per
//!   level (`dec.i.j`). The first block of a level concatenates the skip.
//!   Between levels the map is upsampled 2x (nearest) and passed through a
//!   3x3 convolution (`up.i`)
//! * `out_norm`, SiLU, zero-initialised `out_conv` back to `in_channels`
//!
//! Every residual block adds a learned projection of the timestep embedding
//! after its first convolution. Taps sit after the middle block and after
//! every decoder block except the final two; the first `num_taps` of those
//! locations are exported, in forward order.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::nn::{self, Initializer, ParamStore};
use crate::optim::WarmupAdam;
use crate::schedule::{forward_noise_batch, gaussian_noise, NoiseSchedule};
use crate::stack::{FeatureStack, Provenance, TapBatch};
use crate::{Error, Result};

pub const CHECKPOINT_COMPONENT: &str = "backbone";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub base_channels: usize,
    pub stage_multipliers: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_level: usize,
    pub num_taps: usize,
    pub timestep_embed_dim: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_blocks() -> usize {
    2
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 16,
            stage_multipliers: vec![1, 2, 2],
            blocks_per_level: 2,
            num_taps: 5,
            timestep_embed_dim: 64,
        }
    }
}

/// One tappable location in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapSite {
    pub stage_id: usize,
    pub channels: usize,
    pub resolution: usize,
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.stage_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.stage_multipliers[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    /// Largest admissible `num_taps`.
    pub fn max_taps(&self) -> usize {
        1 + (self.levels() * self.blocks_per_level).saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage_multipliers.is_empty() || self.stage_multipliers.contains(&0) {
            return fail("stage_multipliers must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.blocks_per_level == 0 {
            return fail("channel and block counts must be positive".into());
        }
        let down = 1usize << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return fail(format!(
                "image_size {} not divisible by {down} for {} levels",
                self.image_size,
                self.levels()
            ));
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return fail(format!("timestep_embed_dim {} must be even", self.timestep_embed_dim));
        }
        if self.num_taps < 2 || self.num_taps > self.max_taps() {
            return fail(format!(
                "num_taps {} outside [2, {}] for this decoder",
                self.num_taps,
                self.max_taps()
            ));
        }
        Ok(())
    }

    /// All tap sites, middle block first.
    pub fn tap_sites(&self) -> Vec<TapSite> {
        let last = self.levels() - 1;
        let mut sites = vec![TapSite {
            stage_id: 0,
            channels: self.channels(last),
            resolution: self.resolution(last),
        }];
        for level in (0..self.levels()).rev() {
            for _ in 0..self.blocks_per_level {
                sites.push(TapSite {
                    stage_id: sites.len(),
                    channels: self.channels(level),
                    resolution: self.resolution(level),
                });
            }
        }
        sites.truncate(self.num_taps);
        sites
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TeacherFrozen,
    StudentTrainable,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: BackboneConfig,
    pub params: ParamStore,
    role: Role,
}

/// What a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    Eps,
    Features,
    Both,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Option<Tensor>,
    pub taps: Option<TapBatch>,
}

fn init_res_block(init: &mut Initializer, ps: &mut ParamStore, p: &str, cin: usize, cout: usize, emb: usize) -> Result<()> {
    init.norm(ps, &format!("{p}.norm1"), cin)?;
    init.conv(ps, &format!("{p}.conv1"), cin, cout, 3)?;
    init.linear(ps, &format!("{p}.temb"), emb, cout)?;
    init.norm(ps, &format!("{p}.norm2"), cout)?;
    init.conv(ps, &format!("{p}.conv2"), cout, cout, 3)?;
    if cin != cout {
        init.conv(ps, &format!("{p}.skip"), cin, cout, 1)?;
    }
    Ok(())
}

fn res_block(ps: &ParamStore, p: &str, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
    let cin = x.dim(1)?;
    let h = nn::group_norm(ps, &format!("{p}.norm1"), x, nn::norm_groups(cin))?.silu()?;
    let h = nn::conv2d(ps, &format!("{p}.conv1"), &h)?;
    let cout = h.dim(1)?;
    let t = nn::linear(ps, &format!("{p}.temb"), temb)?;
    let h = h.broadcast_add(&t.reshape((t.dim(0)?, cout, 1, 1))?)?;
    let h = nn::group_norm(ps, &format!("{p}.norm2"), &h, nn::norm_groups(cout))?.silu()?;
    let h = nn::conv2d(ps, &format!("{p}.conv2"), &h)?;
    let skip = if ps.contains(&format!("{p}.skip.weight")) {
        nn::conv2d(ps, &format!("{p}.skip"), x)?
    } else {
        x.clone()
    };
    Ok((skip + h)?)
}

/// Initialises all parameters from `seed`: fan-in uniform for convolutions
/// and linear maps, unit/zero norms, and a zero output convolution.
pub fn init_denoiser(config: &BackboneConfig, seed: u64) -> Result<DenoiserParams> {
    init_denoiser_dtype(config, seed, DType::F32)
}

pub fn init_denoiser_dtype(config: &BackboneConfig, seed: u64, dtype: DType) -> Result<DenoiserParams> {
    config.validate()?;
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), dtype);
    let mut ps = ParamStore::new();
    let emb = config.timestep_embed_dim;
    init.linear(&mut ps, "time.fc1", emb, emb)?;
    init.linear(&mut ps, "time.fc2", emb, emb)?;
    init.conv(&mut ps, "conv_in", config.in_channels, config.channels(0), 3)?;
    let levels = config.levels();
    for i in 0..levels {
        let cin = config.channels(i.saturating_sub(1));
        init_res_block(&mut init, &mut ps, &format!("enc.{i}"), cin, config.channels(i), emb)?;
    }
    let last = levels - 1;
    init_res_block(&mut init, &mut ps, "mid", config.channels(last), config.channels(last), emb)?;
    for i in (0..levels).rev() {
        let c = config.channels(i);
        let incoming = if i == last { config.channels(last) } else { config.channels(i + 1) };
        for j in 0..config.blocks_per_level {
            let cin = if j == 0 { incoming + c } else { c };
            init_res_block(&mut init, &mut ps, &format!("dec.{i}.{j}"), cin, c, emb)?;
        }
        if i > 0 {
            init.conv(&mut ps, &format!("up.{i}"), c, c, 3)?;
        }
    }
    init.norm(&mut ps, "out_norm", config.channels(0))?;
    init.zero_conv(&mut ps, "out_conv", config.channels(0), config.in_channels, 3)?;
    Ok(DenoiserParams {
        config: config.clone(),
        params: ps,
        role: Role::StudentTrainable,
    })
}

impl DenoiserParams {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
        self.params.set_frozen(role == Role::TeacherFrozen);
    }

    pub fn freeze(mut self) -> Self {
        self.set_role(Role::TeacherFrozen);
        self
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_copy()?,
            role: self.role,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.to_dtype(dtype)?,
            role: self.role,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let cfg = &self.config;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Shape(format!(
                "input {:?} does not match ({}, {}, {})",
                x.dims(),
                cfg.in_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        Ok(())
    }

    /// Batched forward pass over `x (B, C, H, W)` with one timestep per image.
    /// With `Want::Features` the pass stops after the last tap.
    pub fn forward(&self, x: &Tensor, timesteps: &[usize], want: Want) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let batch = x.dim(0)?;
        if timesteps.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for batch {batch}", timesteps.len())));
        }
        let ps = &self.params;
        let cfg = &self.config;
        let dtype = ps.dtype();
        let x = x.to_dtype(dtype)?;
        let temb = nn::timestep_embedding(timesteps, cfg.timestep_embed_dim, dtype, x.device())?;
        let temb = nn::linear(ps, "time.fc1", &temb)?.silu()?;
        let temb = nn::linear(ps, "time.fc2", &temb)?.silu()?;

        let levels = cfg.levels();
        let mut h = nn::conv2d(ps, "conv_in", &x)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = res_block(ps, &format!("enc.{i}"), &h, &temb)?;
            skips.push(h.clone());
            if i + 1 < levels {
                h = h.avg_pool2d(2)?;
            }
        }
        h = res_block(ps, "mid", &h, &temb)?;

        let num_taps = cfg.num_taps;
        let want_taps = want != Want::Eps;
        let mut maps = Vec::with_capacity(num_taps);
        if want_taps {
            maps.push(h.clone());
        }
        let mut site = 1;
        for i in (0..levels).rev() {
            for j in 0..cfg.blocks_per_level {
                if j == 0 {
                    h = Tensor::cat(&[&h, &skips[i]], 1)?;
                }
                h = res_block(ps, &format!("dec.{i}.{j}"), &h, &temb)?;
                if want_taps && site < num_taps {
                    maps.push(h.clone());
                }
                site += 1;
                if want == Want::Features && maps.len() == num_taps {
                    return Ok(ForwardOutput {
                        eps: None,
                        taps: Some(TapBatch {
                            stage_ids: (0..num_taps).collect(),
                            maps,
                        }),
                    });
                }
            }
            if i > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(hh * 2, ww * 2)?;
                h = nn::conv2d(ps, &format!("up.{i}"), &h)?;
            }
        }
        let h = nn::group_norm(ps, "out_norm", &h, nn::norm_groups(cfg.channels(0)))?.silu()?;
        let eps = nn::conv2d(ps, "out_conv", &h)?;
        Ok(ForwardOutput {
            eps: (want != Want::Features).then_some(eps),
            taps: want_taps.then(|| TapBatch {
                stage_ids: (0..num_taps).collect(),
                maps,
            }),
        })
    }

    /// Tapped features only, for a batch.
    pub fn features(&self, x: &Tensor, timesteps: &[usize]) -> Result<TapBatch> {
        self.forward(x, timesteps, Want::Features)?
            .taps
            .ok_or_else(|| Error::Invalid("forward produced no taps".into()))
    }

    pub fn predict_eps(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        self.forward(x, timesteps, Want::Eps)?
            .eps
            .ok_or_else(|| Error::Invalid("forward produced no prediction".into()))
    }
}

/// Single-image forward pass. `x` is `(C, H, W)`; `provenance` is attached to
/// the returned stack and its `t` must match the conditioning timestep.
pub fn denoise_forward(
    params: &DenoiserParams,
    x: &Tensor,
    t: usize,
    max_timestep: usize,
    want_features: bool,
    provenance: Provenance,
) -> Result<(Tensor, Option<FeatureStack>)> {
    if t > max_timestep {
        return Err(Error::OutOfRange(format!("timestep {t} outside [0, {max_timestep}]")));
    }
    if provenance.t != t {
        return Err(Error::Invalid(format!(
            "provenance timestep {} differs from conditioning timestep {t}",
            provenance.t
        )));
    }
    let batch = x.unsqueeze(0)?;
    let want = if want_features { Want::Both } else { Want::Eps };
    let out = params.forward(&batch, &[t], want)?;
    let eps = out.eps.expect("eps requested").squeeze(0)?;
    let stack = match out.taps {
        Some(taps) => Some(taps.into_stacks(&[provenance])?.remove(0)),
        None => None,
    };
    Ok((eps, stack))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub log_every: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 100,
            grad_clip: Some(1.0),
            seed: 0,
            log_every: 100,
        }
    }
}

/// Random mini-batch of image indices.
pub(crate) fn sample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<u32> {
    (0..batch).map(|_| rng.random_range(0..n) as u32).collect()
}

/// Trains `params` in place with the ε-prediction objective and timesteps
/// drawn uniformly from `1..=T`. `images` is `(N, C, H, W)` in `[-1, 1]`.
/// Returns the per-step mean squared error.
pub fn train_denoiser(
    params: &mut DenoiserParams,
    images: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TeacherTrainConfig,
) -> Result<Vec<f32>> {
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    params.check_input(images)?;
    if params.role == Role::TeacherFrozen {
        return Err(Error::Invalid("cannot train a frozen denoiser".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = WarmupAdam::new(params.params.vars(), cfg.learning_rate, cfg.warmup_steps, cfg.grad_clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let big_t = schedule.num_timesteps();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut rng, n, cfg.batch_size);
        let x0 = images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(1..=big_t)).collect();
        let eps = gaussian_noise(&mut rng, x0.dims())?;
        let xt = forward_noise_batch(&x0, &eps, &ts, schedule)?;
        let pred = params.predict_eps(&xt, &ts)?;
        let loss = (pred - eps.to_dtype(params.params.dtype())?)?.sqr()?.mean_all()?;
        let value = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, stage: None });
        }
        opt.backward_step(&loss)?;
        curve.push(value);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let window = &curve[curve.len().saturating_sub(cfg.log_every)..];
            log::info!(
                "teacher step {}/{}: mse {:.4}",
                step + 1,
                cfg.steps,
                window.iter().sum::<f32>() / window.len() as f32
            );
        }
    }
    Ok(curve)
}

/// Initialises, trains and freezes a teacher.
pub fn train_teacher(
    config: &BackboneConfig,
    images: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TeacherTrainConfig,
) -> Result<(DenoiserParams, Vec<f32>)> {
    let mut params = init_denoiser(config, cfg.seed)?;
    let curve = train_denoiser(&mut params, images, schedule, cfg)?;
    Ok((params.freeze(), curve))
}

/// Mean squared ε-prediction error on `images` at a fixed timestep.
pub fn eps_mse(params: &DenoiserParams, images: &Tensor, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    schedule.check_timestep(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian_noise(&mut rng, images.dims())?;
    let ts = vec![t; images.dim(0)?];
    let xt = forward_noise_batch(images, &eps, &ts, schedule)?;
    let pred = params.predict_eps(&xt, &ts)?;
    let mse = (pred.to_dtype(DType::F32)? - eps)?.sqr()?.mean_all()?.to_scalar::<f32>()?;
    Ok(mse as f64)
}

/// Ancestral sampling over `steps` evenly spaced timesteps from `T` down to 1.
/// The predicted clean image is clipped to `[-1, 1]` at every step, and so is
/// the returned sample.
pub fn sample_images(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let big_t = schedule.num_timesteps();
    if steps == 0 || steps > big_t {
        return Err(Error::Config(format!("sampling steps {steps} outside [1, {big_t}]")));
    }
    let cfg = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [count, cfg.in_channels, cfg.image_size, cfg.image_size];
    let mut x = gaussian_noise(&mut rng, &shape)?;
    // t_k = round(T * k / steps), k = steps..1
    let taus: Vec<usize> = (1..=steps).rev().map(|k| ((big_t * k) as f64 / steps as f64).round() as usize).collect();
    for (i, &t) in taus.iter().enumerate() {
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(prev);
        let eps = params.predict_eps(&x, &vec![t; count])?.to_dtype(DType::F32)?.detach();
        let x0 = ((&x - eps.affine((1.0 - ab_t).sqrt(), 0.0)?)? / ab_t.sqrt())?.clamp(-1f32, 1f32)?;
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mean = (x0.affine(c0, 0.0)? + x.affine(ct, 0.0)?)?;
        x = if prev > 0 {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            (mean + gaussian_noise(&mut rng, &shape)?.affine(var.sqrt(), 0.0)?)?
        } else {
            mean
        };
    }
    Ok(x.clamp(-1f32, 1f32)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: BackboneConfig,
    schedule: NoiseSchedule,
    role: Role,
}

pub fn save_checkpoint(params: &DenoiserParams, schedule: &NoiseSchedule, path: impl AsRef<std::path::Path>) -> Result<()> {
    let meta = CheckpointMeta {
        config: params.config.clone(),
        schedule: schedule.clone(),
        role: params.role,
    };
    let mut c = Container::new(CHECKPOINT_COMPONENT, serde_json::to_value(&meta)?);
    for (name, t) in params.params.tensors() {
        c.push(name, t.to_dtype(DType::F32)?);
    }
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<(DenoiserParams, NoiseSchedule)> {
    let c = Container::load(path)?;
    c.expect_component(CHECKPOINT_COMPONENT)?;
    let meta: CheckpointMeta = serde_json::from_value(c.metadata.clone())?;
    let schedule = NoiseSchedule::from_alpha_bar(meta.schedule.alpha_bars().to_vec())?;
    meta.config.validate()?;
    // Rebuild the expected layout and check every tensor against it.
    let reference = init_denoiser(&meta.config, 0)?;
    let mut ps = ParamStore::new();
    for (name, t) in &c.tensors {
        let expected = reference
            .params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if expected.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.dims(),
                expected.dims()
            )));
        }
        ps.insert(name.clone(), t.clone())?;
    }
    if ps.len() != reference.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors, expected {}",
            ps.len(),
            reference.params.len()
        )));
    }
    let mut params = DenoiserParams {
        config: meta.config,
        params: ps,
        role: Role::StudentTrainable,
    };
    params.set_role(meta.role);
    Ok((params, schedule))
}

/// Mean over positions of the channel-wise cosine between two `(B, C, H, W)`
/// maps, per image. Used for logging only.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?;
    let nb = b.sqr()?.sum(1)?;
    let cos = (dot / (na * nb)?.sqrt()?.clamp(1e-12f32, f32::MAX)?)?;
    Ok(cos.flatten_from(1)?.mean(D::Minus1)?.to_vec1::<f32>()?)
}
