//! Feature maps tapped from the denoiser.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Clean,
    Noisy,
}

/// Where a stack came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub input: InputKind,
    /// Timestep conditioning fed to the backbone.
    pub t: usize,
    pub noise_seed: Option<u64>,
    /// Number of noise draws averaged into the stack (1 when not ensembled).
    #[serde(default = "one")]
    pub ensemble_n: usize,
    /// Set when the stack was passed through projection heads at this timestep.
    #[serde(default)]
    pub projected_t: Option<usize>,
}

fn one() -> usize {
    1
}

impl Provenance {
    pub fn clean(t: usize) -> Self {
        Self {
            input: InputKind::Clean,
            t,
            noise_seed: None,
            ensemble_n: 1,
            projected_t: None,
        }
    }

    pub fn noisy(t: usize, seed: u64) -> Self {
        Self {
            input: InputKind::Noisy,
            t,
            noise_seed: Some(seed),
            ensemble_n: 1,
            projected_t: None,
        }
    }
}

/// One dense map, channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub stage_id: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(stage_id: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            stage_id,
            channels,
            height,
            width,
            data,
        })
    }

    /// From a `(C, H, W)` tensor.
    pub fn from_tensor(stage_id: usize, t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(stage_id, c, h, w, data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (self.channels, self.height, self.width),
            &Device::Cpu,
        )?)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn value(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Channel vector at one grid cell.
    pub fn vector_at(&self, row: usize, col: usize) -> Vec<f32> {
        let plane = self.positions();
        let idx = row * self.width + col;
        (0..self.channels).map(|c| self.data[c * plane + idx]).collect()
    }

    /// All channel vectors in row-major position order, `positions x channels`.
    pub fn position_major(&self) -> Vec<f32> {
        let plane = self.positions();
        let mut out = vec![0f32; self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.stage_id == other.stage_id
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Ordered tapped maps from one forward pass over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub entries: Vec<FeatureMap>,
    pub provenance: Provenance,
}

impl FeatureStack {
    pub fn new(entries: Vec<FeatureMap>, provenance: Provenance) -> Result<Self> {
        let stack = Self { entries, provenance };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            if pair[1].stage_id <= pair[0].stage_id {
                return Err(Error::Invalid("stack entries must be sorted by stage id".into()));
            }
            if pair[1].height < pair[0].height || pair[1].width < pair[0].width {
                return Err(Error::Invalid("stack resolutions must be non-decreasing".into()));
            }
        }
        if let Some(bad) = self.entries.iter().find(|m| !m.is_finite()) {
            return Err(Error::Invalid(format!("stage {} has non-finite values", bad.stage_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stage(&self, stage_id: usize) -> Result<&FeatureMap> {
        self.entries
            .iter()
            .find(|m| m.stage_id == stage_id)
            .ok_or_else(|| Error::Invalid(format!("stage {stage_id} not in stack")))
    }

    pub fn stage_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|m| m.stage_id).collect()
    }

    pub fn same_shape(&self, other: &FeatureStack) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.same_shape(b))
    }

    /// Keeps only the requested stages (in stack order).
    pub fn select(&self, stages: &[usize]) -> Result<Self> {
        for s in stages {
            self.stage(*s)?;
        }
        let entries = self
            .entries
            .iter()
            .filter(|m| stages.contains(&m.stage_id))
            .cloned()
            .collect();
        Ok(Self {
            entries,
            provenance: self.provenance.clone(),
        })
    }

    /// Element-wise arithmetic mean of shape-identical stacks.
    pub fn mean(stacks: &[FeatureStack]) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::Invalid("cannot average zero stacks".into()))?;
        if stacks.iter().any(|s| !s.same_shape(first)) {
            return Err(Error::Shape("stacks to average differ in shape".into()));
        }
        let n = stacks.len() as f32;
        let entries = first
            .entries
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut data = vec![0f32; m.data.len()];
                for s in stacks {
                    for (acc, v) in data.iter_mut().zip(&s.entries[k].data) {
                        *acc += v;
                    }
                }
                data.iter_mut().for_each(|v| *v /= n);
                FeatureMap { data, ..m.clone() }
            })
            .collect();
        let mut provenance = first.provenance.clone();
        provenance.ensemble_n = stacks.len();
        Ok(Self { entries, provenance })
    }
}

/// Batched taps: one `(B, C, H, W)` tensor per stage.
#[derive(Debug, Clone)]
pub struct TapBatch {
    pub stage_ids: Vec<usize>,
    pub maps: Vec<Tensor>,
}

impl TapBatch {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.maps.first().map(|m| m.dim(0)).transpose()?.unwrap_or(0))
    }

    pub fn detach(&self) -> Self {
        Self {
            stage_ids: self.stage_ids.clone(),
            maps: self.maps.iter().map(|m| m.detach()).collect(),
        }
    }

    pub fn index_select(&self, indices: &Tensor) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|m| m.index_select(indices, 0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            stage_ids: self.stage_ids.clone(),
            maps,
        })
    }

    /// Splits into per-image stacks, all sharing `provenance`.
    pub fn into_stacks(&self, provenance: &[Provenance]) -> Result<Vec<FeatureStack>> {
        let b = self.batch_size()?;
        if provenance.len() != b {
            return Err(Error::Shape(format!("{} provenances for batch {b}", provenance.len())));
        }
        let mut per_stage = Vec::with_capacity(self.maps.len());
        for (sid, m) in self.stage_ids.iter().zip(&self.maps) {
            let (_, c, h, w) = m.dims4()?;
            let flat = m.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            per_stage.push((*sid, c, h, w, flat));
        }
        (0..b)
            .map(|i| {
                let entries = per_stage
                    .iter()
                    .map(|(sid, c, h, w, flat)| {
                        let n = c * h * w;
                        FeatureMap::new(*sid, *c, *h, *w, flat[i * n..(i + 1) * n].to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                FeatureStack::new(entries, provenance[i].clone())
            })
            .collect()
    }

    /// Stacks per-image feature stacks back into batched tensors.
    pub fn from_stacks(stacks: &[FeatureStack]) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::Invalid("empty stack list".into()))?;
        let mut maps = Vec::with_capacity(first.len());
        for (k, m) in first.entries.iter().enumerate() {
            let mut data = Vec::with_capacity(stacks.len() * m.data.len());
            for s in stacks {
                let e = &s.entries[k];
                if !e.same_shape(m) {
                    return Err(Error::Shape("stacks differ in shape".into()));
                }
                data.extend_from_slice(&e.data);
            }
            maps.push(Tensor::from_vec(
                data,
                (stacks.len(), m.channels, m.height, m.width),
                &Device::Cpu,
            )?);
        }
        Ok(Self {
            stage_ids: first.stage_ids(),
            maps,
        })
    }
}
