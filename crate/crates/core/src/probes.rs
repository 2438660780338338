//! Downstream protocols on frozen features: kNN classification of pooled
//! vectors and per-position linear probes for depth and segmentation.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::correspondence::cosine;
use crate::data::{Dataset, DEPTH_MAX, DEPTH_MIN, NUM_CLASSES};
use crate::features::{pool, ExtractionRequest, FeatureExtractor, PoolMethod};
use crate::optim::WarmupAdam;
use crate::stack::{FeatureMap, FeatureStack};
use crate::{Error, ProjectionHeadParams, Result};

/// Majority label among the `k` most cosine-similar training vectors.
/// Neighbour ties go to the lower index; vote ties to the larger summed
/// similarity, then the lower label.
pub fn knn_classify(train: &[Vec<f32>], labels: &[usize], query: &[f32], k: usize) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if train.len() != labels.len() {
        return Err(Error::Shape(format!("{} vectors, {} labels", train.len(), labels.len())));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Invalid(format!("k = {k} with {} training vectors", train.len())));
    }
    let mut sims: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, v)| (cosine(query, v), i)).collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
    for (s, i) in &sims[..k] {
        let e = votes.entry(labels[*i]).or_default();
        e.0 += 1;
        e.1 += s;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (label, (count, sum)) in votes {
        let better = match best {
            None => true,
            Some((_, c, s)) => count > c || (count == c && sum > s),
        };
        if better {
            best = Some((label, count, sum));
        }
    }
    Ok(best.expect("k >= 1").0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBinning {
    pub num_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for DepthBinning {
    fn default() -> Self {
        Self {
            num_bins: 256,
            depth_min: DEPTH_MIN as f64,
            depth_max: DEPTH_MAX as f64,
        }
    }
}

impl DepthBinning {
    pub fn width(&self) -> f64 {
        (self.depth_max - self.depth_min) / self.num_bins as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.num_bins).map(|i| self.depth_min + i as f64 * self.width()).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.num_bins).map(|i| self.depth_min + (i as f64 + 0.5) * self.width()).collect()
    }

    /// Bin index of a depth value; values outside the range clamp to the end bins.
    pub fn bin_of(&self, depth: f64) -> usize {
        let b = ((depth - self.depth_min) / self.width()).floor();
        (b.max(0.0) as usize).min(self.num_bins - 1)
    }
}

/// Expected depth under each row of `probs` (positions × bins).
pub fn depth_decode(probs: &[Vec<f64>], binning: &DepthBinning) -> Result<Vec<f64>> {
    let centers = binning.centers();
    probs
        .iter()
        .map(|p| {
            if p.len() != binning.num_bins {
                return Err(Error::Shape(format!("{} probabilities for {} bins", p.len(), binning.num_bins)));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|v| v.is_nan() || *v < 0.0) || (total - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid("malformed probability vector".into()));
            }
            Ok(p.iter().zip(&centers).map(|(a, c)| a * c).sum())
        })
        .collect()
}

/// Root mean squared error over positions where `valid` is set.
pub fn depth_rmse(predicted: &[f64], truth: &[f64], valid: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.len() != valid.len() {
        return Err(Error::Shape("depth arrays differ in length".into()));
    }
    let (mut sum, mut n) = (0f64, 0usize);
    for ((p, t), v) in predicted.iter().zip(truth).zip(valid) {
        if *v {
            sum += (p - t).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("empty validity mask".into()));
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Intersection and union counts per class, accumulated over many images.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub in_truth: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            in_truth: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, predicted: &[u8], truth: &[u8]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape("label maps differ in size".into()));
        }
        let k = self.union.len();
        for (p, t) in predicted.iter().zip(truth) {
            let (p, t) = (*p as usize, *t as usize);
            if p >= k || t >= k {
                return Err(Error::OutOfRange(format!("class id {} with {k} classes", p.max(t))));
            }
            self.in_truth[t] += 1;
            if p == t {
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over the classes present in the ground truth.
    pub fn finish(&self) -> Result<MiouResult> {
        let per_class: Vec<Option<f64>> = (0..self.union.len())
            .map(|c| (self.in_truth[c] > 0).then(|| self.intersection[c] as f64 / self.union[c] as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("no ground-truth pixels".into()));
        }
        Ok(MiouResult {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

pub fn segmentation_miou(predicted: &[u8], truth: &[u8], num_classes: usize) -> Result<MiouResult> {
    let mut counts = IouCounts::new(num_classes);
    counts.add(predicted, truth)?;
    counts.finish()
}

/// Nearest-neighbour upsampling of a row-major `(h, w)` grid to `(size, size)`.
pub fn upsample_nearest<T: Copy>(values: &[T], h: usize, w: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let r = (y * h) / size;
        for x in 0..size {
            out.push(values[r * w + (x * w) / size]);
        }
    }
    out
}

/// Pixel of a `size` image at the center of cell `i` on an axis with `cells` cells.
fn cell_center_pixel(i: usize, cells: usize, size: usize) -> usize {
    (((i as f64 + 0.5) * size as f64 / cells as f64).floor() as usize).min(size - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbeTask {
    Depth { binning: DepthBinning },
    Segmentation { num_classes: usize },
}

impl ProbeTask {
    pub fn depth() -> Self {
        ProbeTask::Depth {
            binning: DepthBinning::default(),
        }
    }

    pub fn segmentation() -> Self {
        ProbeTask::Segmentation { num_classes: NUM_CLASSES }
    }

    pub fn outputs(&self) -> usize {
        match self {
            ProbeTask::Depth { binning } => binning.num_bins,
            ProbeTask::Segmentation { num_classes } => *num_classes,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            ProbeTask::Depth { .. } => "rmse",
            ProbeTask::Segmentation { .. } => "miou",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 512,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Position-major feature rows with one target class per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub channels: usize,
    pub rows: Vec<f32>,
    pub targets: Vec<u32>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Pairs every cell of `stage_id` with the ground truth sampled at the
/// cell's center pixel.
pub fn probe_data(stacks: &[FeatureStack], dataset: &Dataset, stage_id: usize, task: &ProbeTask) -> Result<ProbeData> {
    if stacks.len() != dataset.scenes.len() {
        return Err(Error::Shape(format!("{} stacks for {} scenes", stacks.len(), dataset.scenes.len())));
    }
    let mut out = ProbeData {
        channels: 0,
        rows: Vec::new(),
        targets: Vec::new(),
    };
    for (stack, (_, scene)) in stacks.iter().zip(&dataset.scenes) {
        let map = stack.stage(stage_id)?;
        out.channels = map.channels;
        out.rows.extend(map.position_major());
        let s = scene.size;
        for r in 0..map.height {
            let py = cell_center_pixel(r, map.height, s);
            for c in 0..map.width {
                let px = cell_center_pixel(c, map.width, s);
                let target = match task {
                    ProbeTask::Depth { binning } => binning.bin_of(scene.depth[py * s + px] as f64),
                    ProbeTask::Segmentation { .. } => scene.mask[py * s + px] as usize,
                };
                out.targets.push(target as u32);
            }
        }
    }
    Ok(out)
}

/// Linear map on standardized features: `logits = W · (x − mean) / std + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeParams {
    pub task: ProbeTask,
    pub in_channels: usize,
    /// `(outputs, in_channels)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LinearProbeParams {
    pub fn init(task: ProbeTask, data: &ProbeData, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invalid("no probe training rows".into()));
        }
        let c = data.channels;
        let n = data.len() as f64;
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for row in data.rows.chunks(c) {
            for (j, v) in row.iter().enumerate() {
                mean[j] += *v as f64;
                sq[j] += (*v as f64).powi(2);
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt() + 1e-5) as f32)
            .collect();
        let out = task.outputs();
        let bound = 1.0 / (c as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..out * c).map(|_| rng.random_range(-bound..bound) as f32).collect();
        Ok(Self {
            task,
            in_channels: c,
            weight,
            bias: vec![0.0; out],
            mean: mean.iter().map(|m| *m as f32).collect(),
            std,
        })
    }

    fn standardize(&self, rows: &[f32]) -> Result<Tensor> {
        let c = self.in_channels;
        if rows.len() % c != 0 {
            return Err(Error::Shape(format!("feature rows not a multiple of {c} channels")));
        }
        let data: Vec<f32> = rows
            .chunks(c)
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]))
            .collect();
        Ok(Tensor::from_vec(data, (rows.len() / c, c), &Device::Cpu)?)
    }

    fn tensors(&self) -> Result<(Tensor, Tensor)> {
        let dev = Device::Cpu;
        Ok((
            Tensor::from_vec(self.weight.clone(), (self.task.outputs(), self.in_channels), &dev)?,
            Tensor::from_vec(self.bias.clone(), self.task.outputs(), &dev)?,
        ))
    }

    /// Softmax probabilities per row.
    pub fn predict_proba(&self, rows: &[f32]) -> Result<Vec<Vec<f64>>> {
        let x = self.standardize(rows)?;
        let (w, b) = self.tensors()?;
        let logits = x.matmul(&w.t()?)?.broadcast_add(&b)?.to_dtype(DType::F64)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok(probs.to_vec2::<f64>()?)
    }

    pub fn predict_labels(&self, rows: &[f32]) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(rows)?
            .iter()
            .map(|p| {
                let mut best = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect())
    }

    /// Mean cross-entropy over the rows of `data`.
    pub fn loss(&self, data: &ProbeData) -> Result<f64> {
        let x = self.standardize(&data.rows)?;
        let (w, b) = self.tensors()?;
        let logits = x.matmul(&w.t()?)?.broadcast_add(&b)?;
        let y = Tensor::new(data.targets.as_slice(), &Device::Cpu)?;
        Ok(candle_nn::loss::cross_entropy(&logits, &y)?.to_scalar::<f32>()? as f64)
    }

    pub fn accuracy(&self, data: &ProbeData) -> Result<f64> {
        let pred = self.predict_labels(&data.rows)?;
        let hits = pred.iter().zip(&data.targets).filter(|(p, t)| **p as u32 == **t).count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = serde_json::json!({ "task": self.task, "in_channels": self.in_channels });
        let mut c = Container::new("linear_probe", meta);
        let dev = Device::Cpu;
        let (w, b) = self.tensors()?;
        c.push("weight", w);
        c.push("bias", b);
        c.push("mean", Tensor::new(self.mean.as_slice(), &dev)?);
        c.push("std", Tensor::new(self.std.as_slice(), &dev)?);
        c.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_component("linear_probe")?;
        let task: ProbeTask = serde_json::from_value(c.metadata["task"].clone())?;
        let in_channels = c.metadata["in_channels"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing in_channels".into()))? as usize;
        let get = |name: &str| -> Result<Vec<f32>> {
            let t = c.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            Ok(t.flatten_all()?.to_vec1::<f32>()?)
        };
        let p = Self {
            task,
            in_channels,
            weight: get("weight")?,
            bias: get("bias")?,
            mean: get("mean")?,
            std: get("std")?,
        };
        if p.weight.len() != task.outputs() * in_channels || p.bias.len() != task.outputs() {
            return Err(Error::Checkpoint("probe tensor sizes disagree with its task".into()));
        }
        Ok(p)
    }
}

/// Mini-batch softmax regression with Adam on a fixed step budget.
pub fn train_linear_probe(data: &ProbeData, task: ProbeTask, cfg: &ProbeConfig) -> Result<LinearProbeParams> {
    let mut probe = LinearProbeParams::init(task, data, cfg.seed)?;
    if cfg.steps == 0 {
        return Ok(probe);
    }
    if let Some(t) = data.targets.iter().find(|t| **t as usize >= task.outputs()) {
        return Err(Error::OutOfRange(format!("target {t} with {} outputs", task.outputs())));
    }
    let x = probe.standardize(&data.rows)?;
    let y = Tensor::new(data.targets.as_slice(), &Device::Cpu)?;
    let (w0, b0) = probe.tensors()?;
    let w = Var::from_tensor(&w0)?;
    let b = Var::from_tensor(&b0)?;
    let mut opt = WarmupAdam::new(vec![w.clone(), b.clone()], cfg.learning_rate, 0, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9b0be);
    let n = data.len();
    let batch = cfg.batch_size.min(n).max(1);
    for step in 0..cfg.steps {
        let idx: Vec<u32> = if batch == n {
            (0..n as u32).collect()
        } else {
            (0..batch).map(|_| rng.random_range(0..n as u32)).collect()
        };
        let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
        let xb = x.index_select(&idx, 0)?;
        let yb = y.index_select(&idx, 0)?;
        let logits = xb.matmul(&w.as_tensor().t()?)?.broadcast_add(b.as_tensor())?;
        let loss = candle_nn::loss::cross_entropy(&logits, &yb)?;
        let value = loss.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, stage: None });
        }
        opt.backward_step(&loss)?;
    }
    probe.weight = w.as_tensor().flatten_all()?.to_vec1()?;
    probe.bias = b.as_tensor().to_vec1()?;
    Ok(probe)
}

/// Task metric of a probe on one stage of `stacks`, scored at full image
/// resolution after nearest-neighbour upsampling.
pub fn evaluate_probe(probe: &LinearProbeParams, stacks: &[FeatureStack], dataset: &Dataset, stage_id: usize) -> Result<f64> {
    if stacks.len() != dataset.scenes.len() {
        return Err(Error::Shape(format!("{} stacks for {} scenes", stacks.len(), dataset.scenes.len())));
    }
    match probe.task {
        ProbeTask::Depth { binning } => {
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for (stack, (_, scene)) in stacks.iter().zip(&dataset.scenes) {
                let map = stack.stage(stage_id)?;
                let decoded = depth_decode(&probe.predict_proba(&map.position_major())?, &binning)?;
                pred.extend(upsample_nearest(&decoded, map.height, map.width, scene.size));
                truth.extend(scene.depth.iter().map(|d| *d as f64));
            }
            depth_rmse(&pred, &truth, &vec![true; truth.len()])
        }
        ProbeTask::Segmentation { num_classes } => {
            let mut counts = IouCounts::new(num_classes);
            for (stack, (_, scene)) in stacks.iter().zip(&dataset.scenes) {
                let map = stack.stage(stage_id)?;
                let labels = probe.predict_labels(&map.position_major())?;
                counts.add(&upsample_nearest(&labels, map.height, map.width, scene.size), &scene.mask)?;
            }
            Ok(counts.finish()?.miou)
        }
    }
}

/// Top-1 kNN accuracy of mean-pooled `stage_id` vectors.
pub fn knn_accuracy(train: &[FeatureStack], train_ds: &Dataset, test: &[FeatureStack], test_ds: &Dataset, stage_id: usize, k: usize) -> Result<f64> {
    let pooled = |stacks: &[FeatureStack]| -> Result<Vec<Vec<f32>>> { stacks.iter().map(|s| pool(s, stage_id, PoolMethod::Mean)).collect() };
    let train_vecs = pooled(train)?;
    let labels: Vec<usize> = train_ds.scenes.iter().map(|(_, s)| s.class_label as usize).collect();
    let test_vecs = pooled(test)?;
    let mut hits = 0;
    for (v, (_, s)) in test_vecs.iter().zip(&test_ds.scenes) {
        if knn_classify(&train_vecs, &labels, v, k)? == s.class_label as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_vecs.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    NoisyTeacher,
    Student,
    ProjectedStudent,
}

impl FeatureSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureSource::NoisyTeacher => "noisy_teacher",
            FeatureSource::Student => "student",
            FeatureSource::ProjectedStudent => "projected_student",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SweepTask {
    Probe(ProbeTask),
    Knn { k: usize },
}

impl SweepTask {
    pub fn metric_name(&self) -> &'static str {
        match self {
            SweepTask::Probe(p) => p.metric_name(),
            SweepTask::Knn { .. } => "knn_accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweepRow {
    pub source: String,
    pub t: usize,
    pub feature_map: usize,
    pub metric_name: String,
    pub metric_value: f64,
    pub seed: u64,
}

pub struct ProbeSweep<'a> {
    pub extractor: &'a FeatureExtractor<'a>,
    pub heads: Option<&'a ProjectionHeadParams>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub probe: ProbeConfig,
    /// Noise seed for noisy-teacher features; also seeds probe init.
    pub seed: u64,
}

impl ProbeSweep<'_> {
    /// Feature stacks of both splits for `source` at `t`.
    pub fn stacks(&self, source: FeatureSource, t: usize) -> Result<(Vec<FeatureStack>, Vec<FeatureStack>)> {
        let get = |ds: &Dataset| -> Result<Vec<FeatureStack>> {
            let images = ds.images_tensor()?;
            match source {
                FeatureSource::NoisyTeacher => self.extractor.extract_many(&ExtractionRequest::noisy(t, self.seed), &images),
                FeatureSource::Student => self.extractor.extract_many(&ExtractionRequest::student(), &images),
                FeatureSource::ProjectedStudent => {
                    let heads = self.heads.ok_or_else(|| Error::Invalid("projected_student needs heads".into()))?;
                    let s = self.extractor.extract_many(&ExtractionRequest::student(), &images)?;
                    self.extractor.project_many(heads, &s, t)
                }
            }
        };
        Ok((get(self.train)?, get(self.test)?))
    }

    fn cell(&self, task: &SweepTask, train: &[FeatureStack], test: &[FeatureStack], stage: usize) -> Result<f64> {
        match task {
            SweepTask::Probe(p) => {
                let data = probe_data(train, self.train, stage, p)?;
                let probe = train_linear_probe(
                    &data,
                    *p,
                    &ProbeConfig {
                        seed: self.seed,
                        ..self.probe.clone()
                    },
                )?;
                evaluate_probe(&probe, test, self.test, stage)
            }
            SweepTask::Knn { k } => knn_accuracy(train, self.train, test, self.test, stage, *k),
        }
    }

    /// One row per `(t, feature_map)`. Student cells are computed once and
    /// repeated for every `t`.
    pub fn run(&self, source: FeatureSource, task: &SweepTask, timesteps: &[usize], feature_maps: &[usize]) -> Result<Vec<ProbeSweepRow>> {
        if timesteps.is_empty() || feature_maps.is_empty() {
            return Err(Error::Invalid("sweep needs timesteps and feature maps".into()));
        }
        let row = |t: usize, stage: usize, value: f64| ProbeSweepRow {
            source: source.as_str().into(),
            t,
            feature_map: stage,
            metric_name: task.metric_name().into(),
            metric_value: value,
            seed: self.seed,
        };
        let mut rows = Vec::new();
        if source == FeatureSource::Student {
            let (train, test) = self.stacks(source, 0)?;
            let values = feature_maps
                .iter()
                .map(|s| self.cell(task, &train, &test, *s))
                .collect::<Result<Vec<_>>>()?;
            for &t in timesteps {
                for (s, v) in feature_maps.iter().zip(&values) {
                    rows.push(row(t, *s, *v));
                }
            }
            return Ok(rows);
        }
        for &t in timesteps {
            let (train, test) = self.stacks(source, t)?;
            for &s in feature_maps {
                rows.push(row(t, s, self.cell(task, &train, &test, s)?));
            }
        }
        Ok(rows)
    }

    /// Teacher probe on teacher features, student probe on student
    /// features, and the teacher probe applied to student features.
    pub fn transfer_table(&self, task: ProbeTask, t: usize, stage_id: usize) -> Result<TransferResult> {
        let (t_train, t_test) = self.stacks(FeatureSource::NoisyTeacher, t)?;
        let (s_train, s_test) = self.stacks(FeatureSource::Student, t)?;
        let cfg = ProbeConfig {
            seed: self.seed,
            ..self.probe.clone()
        };
        let teacher_probe = train_linear_probe(&probe_data(&t_train, self.train, stage_id, &task)?, task, &cfg)?;
        let student_probe = train_linear_probe(&probe_data(&s_train, self.train, stage_id, &task)?, task, &cfg)?;
        let row = |probe: &str, features: &str, value: f64| TransferRow {
            probe: probe.into(),
            features: features.into(),
            t,
            feature_map: stage_id,
            metric_name: task.metric_name().into(),
            metric_value: value,
        };
        let rows = vec![
            row("teacher", "teacher", evaluate_probe(&teacher_probe, &t_test, self.test, stage_id)?),
            row("student", "student", evaluate_probe(&student_probe, &s_test, self.test, stage_id)?),
            row("teacher", "student", evaluate_probe(&teacher_probe, &s_test, self.test, stage_id)?),
        ];
        Ok(TransferResult {
            rows,
            teacher_probe,
            student_probe,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub rows: Vec<TransferRow>,
    pub teacher_probe: LinearProbeParams,
    pub student_probe: LinearProbeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub probe: String,
    pub features: String,
    pub t: usize,
    pub feature_map: usize,
    pub metric_name: String,
    pub metric_value: f64,
}

/// A single-map stack, handy for feeding hand-built grids through the probe path.
pub fn single_map_stack(map: FeatureMap) -> Result<FeatureStack> {
    FeatureStack::new(vec![map], crate::Provenance::clean(0))
}
