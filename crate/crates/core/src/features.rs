//! Feature extraction over teacher and student, with noise ensembling,
//! point lookup, pooling and a content-addressed disk cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::DenoiserParams;
use crate::checkpoint::{atomic_write, Container};
use crate::consolidator::{ProjectionHeadParams, STUDENT_TIMESTEP};
use crate::data::derive_seed;
use crate::nn::tensor_le_bytes;
use crate::schedule::{forward_noise_batch, gaussian_noise, NoiseSchedule};
use crate::stack::{FeatureMap, FeatureStack, Provenance, TapBatch};
use crate::{Error, Result};

pub const CACHE_COMPONENT: &str = "feature_stack";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRef {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputMode {
    /// Student on the clean image (always conditioned on t = 0).
    CleanStudent,
    /// Teacher on `x_t` built from seeded noise.
    NoisyTeacher { t: usize, noise_seed: u64 },
    /// Teacher on the clean image with timestep conditioning `t`.
    CleanTeacher { t: usize },
}

impl InputMode {
    pub fn model(&self) -> ModelRef {
        match self {
            InputMode::CleanStudent => ModelRef::Student,
            _ => ModelRef::Teacher,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InputMode::CleanStudent => "student",
            InputMode::NoisyTeacher { .. } => "noisy_teacher",
            InputMode::CleanTeacher { .. } => "clean_teacher_control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractionRequest {
    pub mode: InputMode,
    /// Stage ids to keep; empty keeps every tap.
    #[serde(default)]
    pub stages: Vec<usize>,
    /// Noise draws averaged per image (noisy mode only).
    pub ensemble_n: usize,
}

impl ExtractionRequest {
    pub fn new(mode: InputMode) -> Self {
        Self {
            mode,
            stages: Vec::new(),
            ensemble_n: 1,
        }
    }

    pub fn student() -> Self {
        Self::new(InputMode::CleanStudent)
    }

    pub fn noisy(t: usize, noise_seed: u64) -> Self {
        Self::new(InputMode::NoisyTeacher { t, noise_seed })
    }

    pub fn clean_teacher(t: usize) -> Self {
        Self::new(InputMode::CleanTeacher { t })
    }

    pub fn with_ensemble(mut self, n: usize) -> Self {
        self.ensemble_n = n;
        self
    }

    pub fn with_stages(mut self, stages: Vec<usize>) -> Self {
        self.stages = stages;
        self
    }

    pub fn validate(&self, max_timestep: usize) -> Result<()> {
        if self.ensemble_n == 0 {
            return Err(Error::Invalid("ensemble_n must be at least 1".into()));
        }
        match self.mode {
            InputMode::NoisyTeacher { t, .. } | InputMode::CleanTeacher { t } if t > max_timestep => {
                Err(Error::OutOfRange(format!("timestep {t} outside [0, {max_timestep}]")))
            }
            InputMode::NoisyTeacher { .. } => Ok(()),
            _ if self.ensemble_n > 1 => Err(Error::Invalid("noise ensembling applies to noisy inputs only".into())),
            _ => Ok(()),
        }
    }
}

/// Seeds of the ensemble members: the request seed itself, then derived seeds.
pub fn ensemble_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| if i == 0 { seed } else { derive_seed(seed, 3, i as u64) })
        .collect()
}

/// Hex sha256 of an image tensor's little-endian bytes and shape.
pub fn image_digest(image: &Tensor) -> Result<String> {
    let mut h = Sha256::new();
    for d in image.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(tensor_le_bytes(&image.to_dtype(candle_core::DType::F32)?)?);
    Ok(hex::encode(h.finalize()))
}

/// Noise for one image: seeded by the request seed and the image content, so
/// different images never share a noise field.
pub fn image_noise(seed: u64, digest: &str, shape: &[usize]) -> Result<Tensor> {
    let key = u64::from_str_radix(&digest[..16], 16).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4, key));
    gaussian_noise(&mut rng, shape)
}

#[derive(Debug, Default)]
pub struct Counters {
    /// Images passed through a backbone.
    pub backbone_images: AtomicUsize,
    /// Images passed through projection heads, per timestep.
    pub head_images: AtomicUsize,
}

impl Counters {
    pub fn backbone(&self) -> usize {
        self.backbone_images.load(Ordering::Relaxed)
    }

    pub fn heads(&self) -> usize {
        self.head_images.load(Ordering::Relaxed)
    }
}

pub struct FeatureExtractor<'a> {
    teacher: &'a DenoiserParams,
    student: Option<&'a DenoiserParams>,
    schedule: &'a NoiseSchedule,
    cache: Option<&'a FeatureCache>,
    teacher_checksum: String,
    student_checksum: Option<String>,
    pub batch_size: usize,
    pub counters: Counters,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(teacher: &'a DenoiserParams, student: Option<&'a DenoiserParams>, schedule: &'a NoiseSchedule) -> Result<Self> {
        if let Some(s) = student {
            if s.config != teacher.config {
                return Err(Error::Invalid("student and teacher configs differ".into()));
            }
        }
        Ok(Self {
            teacher,
            student,
            schedule,
            cache: None,
            teacher_checksum: teacher.checksum()?,
            student_checksum: student.map(|s| s.checksum()).transpose()?,
            batch_size: 32,
            counters: Counters::default(),
        })
    }

    pub fn with_cache(mut self, cache: &'a FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    pub fn num_taps(&self) -> usize {
        self.teacher.config.num_taps
    }

    fn model(&self, m: ModelRef) -> Result<(&DenoiserParams, &str)> {
        match m {
            ModelRef::Teacher => Ok((self.teacher, &self.teacher_checksum)),
            ModelRef::Student => match (self.student, &self.student_checksum) {
                (Some(s), Some(c)) => Ok((s, c)),
                _ => Err(Error::Invalid("no student model loaded".into())),
            },
        }
    }

    /// Stacks for a single `(C, H, W)` image.
    pub fn extract(&self, req: &ExtractionRequest, image: &Tensor) -> Result<FeatureStack> {
        Ok(self.extract_many(req, &image.unsqueeze(0)?)?.remove(0))
    }

    /// Stacks for every image of `(N, C, H, W)`, in order.
    pub fn extract_many(&self, req: &ExtractionRequest, images: &Tensor) -> Result<Vec<FeatureStack>> {
        req.validate(self.schedule.num_timesteps())?;
        let (model, checksum) = self.model(req.mode.model())?;
        let n = images.dim(0)?;
        let digests = (0..n).map(|i| image_digest(&images.get(i)?)).collect::<Result<Vec<_>>>()?;
        let mut out: Vec<Option<FeatureStack>> = vec![None; n];
        let mut missing = Vec::new();
        for (i, d) in digests.iter().enumerate() {
            match self.cache {
                Some(c) => match c.get(&cache_key(req, d, checksum)?) {
                    Some(stack) => out[i] = Some(stack),
                    None => missing.push(i),
                },
                None => missing.push(i),
            }
        }
        for chunk in missing.chunks(self.batch_size.max(1)) {
            let compute = |chunk: &[usize]| -> Result<Vec<FeatureStack>> {
                let idx: Vec<u32> = chunk.iter().map(|i| *i as u32).collect();
                let x = images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
                let ds: Vec<&str> = chunk.iter().map(|i| digests[*i].as_str()).collect();
                self.compute(model, req, &x, &ds)
            };
            let stacks = match self.cache {
                // Single flight: the lock is held while a miss is computed.
                Some(c) => {
                    let _guard = c.inflight.lock().unwrap_or_else(|e| e.into_inner());
                    let stacks = compute(chunk)?;
                    for (i, s) in chunk.iter().zip(&stacks) {
                        c.put(&cache_key(req, &digests[*i], checksum)?, req, s)?;
                    }
                    stacks
                }
                None => compute(chunk)?,
            };
            for (i, s) in chunk.iter().zip(stacks) {
                out[*i] = Some(s);
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every image filled")).collect())
    }

    fn compute(&self, model: &DenoiserParams, req: &ExtractionRequest, x0: &Tensor, digests: &[&str]) -> Result<Vec<FeatureStack>> {
        let b = x0.dim(0)?;
        let select = |stacks: Vec<FeatureStack>| -> Result<Vec<FeatureStack>> {
            if req.stages.is_empty() {
                Ok(stacks)
            } else {
                stacks.iter().map(|s| s.select(&req.stages)).collect()
            }
        };
        let forward = |x: &Tensor, t: usize| -> Result<TapBatch> {
            self.counters.backbone_images.fetch_add(b, Ordering::Relaxed);
            model.features(x, &vec![t; b])
        };
        match req.mode {
            InputMode::CleanStudent => {
                let taps = forward(x0, STUDENT_TIMESTEP)?;
                select(taps.into_stacks(&vec![Provenance::clean(STUDENT_TIMESTEP); b])?)
            }
            InputMode::CleanTeacher { t } => {
                let taps = forward(x0, t)?;
                select(taps.into_stacks(&vec![Provenance::clean(t); b])?)
            }
            InputMode::NoisyTeacher { t, noise_seed } => {
                let shape: Vec<usize> = x0.dims()[1..].to_vec();
                let mut members = Vec::with_capacity(req.ensemble_n);
                for seed in ensemble_seeds(noise_seed, req.ensemble_n) {
                    let eps = digests
                        .iter()
                        .map(|d| image_noise(seed, d, &shape))
                        .collect::<Result<Vec<_>>>()?;
                    let eps = Tensor::stack(&eps, 0)?;
                    let xt = forward_noise_batch(x0, &eps, &vec![t; b], self.schedule)?;
                    let taps = forward(&xt, t)?;
                    members.push(taps.into_stacks(&vec![Provenance::noisy(t, seed); b])?);
                }
                let stacks = (0..b)
                    .map(|i| {
                        if members.len() == 1 {
                            return Ok(members[0][i].clone());
                        }
                        let per: Vec<FeatureStack> = members.iter().map(|m| m[i].clone()).collect();
                        let mut mean = FeatureStack::mean(&per)?;
                        mean.provenance.noise_seed = Some(noise_seed);
                        Ok(mean)
                    })
                    .collect::<Result<Vec<_>>>()?;
                select(stacks)
            }
        }
    }

    /// Passes a student stack through the heads at `t`.
    pub fn project_at_timestep(&self, heads: &ProjectionHeadParams, stack: &FeatureStack, t: usize) -> Result<FeatureStack> {
        self.counters.head_images.fetch_add(1, Ordering::Relaxed);
        crate::consolidator::project_features(heads, stack, t)
    }

    /// Batched projection of many stacks at one timestep.
    pub fn project_many(&self, heads: &ProjectionHeadParams, stacks: &[FeatureStack], t: usize) -> Result<Vec<FeatureStack>> {
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(self.batch_size.max(1)) {
            self.counters.head_images.fetch_add(chunk.len(), Ordering::Relaxed);
            let batch = TapBatch::from_stacks(chunk)?;
            let projected = heads.project(&batch, &vec![t; chunk.len()])?;
            let prov: Vec<Provenance> = chunk
                .iter()
                .map(|s| Provenance {
                    projected_t: Some(t),
                    ..s.provenance.clone()
                })
                .collect();
            out.extend(projected.into_stacks(&prov)?);
        }
        Ok(out)
    }
}

/// Bilinear lookup at normalized `(u, v)` with align-corners = false: the
/// center of cell `(r, c)` sits at `((c + 0.5) / W, (r + 0.5) / H)`.
/// Coordinates beyond the outer cell centers clamp to the edge.
pub fn sample_at_point(map: &FeatureMap, u: f64, v: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange(format!("point ({u}, {v}) outside [0, 1]^2")));
    }
    let axis = |coord: f64, size: usize| {
        let p = (coord * size as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, p - lo as f64)
    };
    let (c0, c1, wx) = axis(u, map.width);
    let (r0, r1, wy) = axis(v, map.height);
    let plane = map.positions();
    let at = |c: usize, r: usize, col: usize| map.data[c * plane + r * map.width + col] as f64;
    Ok((0..map.channels)
        .map(|c| {
            let top = at(c, r0, c0) * (1.0 - wx) + at(c, r0, c1) * wx;
            let bottom = at(c, r1, c0) * (1.0 - wx) + at(c, r1, c1) * wx;
            (top * (1.0 - wy) + bottom * wy) as f32
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Mean,
    Max,
}

pub fn pool(stack: &FeatureStack, stage_id: usize, method: PoolMethod) -> Result<Vec<f32>> {
    let map = stack.stage(stage_id)?;
    let plane = map.positions();
    Ok((0..map.channels)
        .map(|c| {
            let values = &map.data[c * plane..(c + 1) * plane];
            match method {
                PoolMethod::Mean => (values.iter().map(|v| *v as f64).sum::<f64>() / plane as f64) as f32,
                PoolMethod::Max => values.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            }
        })
        .collect())
}

pub fn cache_key(req: &ExtractionRequest, image_digest: &str, model_checksum: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(req)?);
    h.update(b"\0");
    h.update(image_digest.as_bytes());
    h.update(b"\0");
    h.update(model_checksum.as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// One container file per entry plus a `manifest.json` listing every key.
pub struct FeatureCache {
    dir: PathBuf,
    inflight: Mutex<()>,
    manifest: Mutex<BTreeMap<String, serde_json::Value>>,
    pub hits: AtomicUsize,
    pub misses: AtomicUsize,
}

impl FeatureCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = match fs::read(&manifest_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("ignoring unreadable cache manifest {}: {e}", manifest_path.display());
                BTreeMap::new()
            }),
            Err(_) => BTreeMap::new(),
        };
        Ok(Self {
            dir,
            inflight: Mutex::new(()),
            manifest: Mutex::new(manifest),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.fstk"))
    }

    /// Cached stack, or `None` on a miss. Corrupt entries count as misses
    /// and are overwritten by the next `put`.
    pub fn get(&self, key: &str) -> Option<FeatureStack> {
        let path = self.path(key);
        if !path.exists() {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        match Container::load(&path).and_then(|c| decode_stack(&c)) {
            Ok(stack) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(stack)
            }
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; recomputing", path.display());
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, key: &str, req: &ExtractionRequest, stack: &FeatureStack) -> Result<()> {
        let meta = serde_json::json!({
            "request": req,
            "provenance": stack.provenance,
            "stage_ids": stack.stage_ids(),
        });
        let mut c = Container::new(CACHE_COMPONENT, meta.clone());
        for m in &stack.entries {
            c.push(format!("stage.{}", m.stage_id), m.to_tensor()?);
        }
        c.save(self.path(key))?;
        let mut manifest = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        manifest.insert(key.to_string(), meta);
        atomic_write(&self.dir.join("manifest.json"), &serde_json::to_vec_pretty(&*manifest)?)
    }

    pub fn len(&self) -> usize {
        self.manifest.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn decode_stack(c: &Container) -> Result<FeatureStack> {
    c.expect_component(CACHE_COMPONENT)?;
    let provenance: Provenance = serde_json::from_value(c.metadata["provenance"].clone())?;
    let stage_ids: Vec<usize> = serde_json::from_value(c.metadata["stage_ids"].clone())?;
    let entries = stage_ids
        .iter()
        .map(|sid| {
            let t = c
                .get(&format!("stage.{sid}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing stage {sid}")))?;
            FeatureMap::from_tensor(*sid, t)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureStack::new(entries, provenance)
}
