//! Parameter storage and the small set of layers shared by the denoiser,
//! the projection heads and the probes.

use std::collections::BTreeMap;

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Named parameters. A frozen store hands out detached tensors so that no
/// gradient is ever accumulated for it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.vars.insert(name, Var::from_tensor(&value.detach())?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        Ok(if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Variables in name order, for handing to an optimizer.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// `(name, detached tensor)` pairs in name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Tensor)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v.as_detached_tensor()))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.vars.values().next().map(|v| v.dtype()).unwrap_or(DType::F32)
    }

    /// Copies every tensor into fresh storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_detached_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            frozen: self.frozen,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            let t = var.as_detached_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars,
            frozen: self.frozen,
        })
    }

    /// Overwrites one parameter in place, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        var.set(value)?;
        Ok(())
    }

    /// SHA-256 over names, shapes, dtypes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(var.dtype().as_str().as_bytes());
            hasher.update(tensor_le_bytes(&var.as_detached_tensor())?);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Raw little-endian bytes of an f32 or f64 tensor, row-major.
pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Invalid(format!("unsupported dtype {other:?}"))),
    })
}

/// Seeded parameter initialisation.
pub struct Initializer {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng, dtype: DType) -> Self {
        Self {
            rng,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &self.device)?)
    }

    /// Adds `prefix.weight` / `prefix.bias` for a convolution with the
    /// usual fan-in uniform bound `1 / sqrt(cin * k * k)`.
    pub fn conv(&mut self, ps: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        ps.insert(format!("{prefix}.weight"), self.uniform(&[cout, cin, k, k], bound)?)?;
        ps.insert(format!("{prefix}.bias"), self.uniform(&[cout], bound)?)?;
        Ok(())
    }

    pub fn zero_conv(&mut self, ps: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        ps.insert(format!("{prefix}.weight"), self.zeros(&[cout, cin, k, k])?)?;
        ps.insert(format!("{prefix}.bias"), self.zeros(&[cout])?)?;
        Ok(())
    }

    pub fn linear(&mut self, ps: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        ps.insert(format!("{prefix}.weight"), self.uniform(&[fan_out, fan_in], bound)?)?;
        ps.insert(format!("{prefix}.bias"), self.uniform(&[fan_out], bound)?)?;
        Ok(())
    }

    pub fn zero_linear(&mut self, ps: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        ps.insert(format!("{prefix}.weight"), self.zeros(&[fan_out, fan_in])?)?;
        ps.insert(format!("{prefix}.bias"), self.zeros(&[fan_out])?)?;
        Ok(())
    }

    pub fn norm(&mut self, ps: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
        ps.insert(format!("{prefix}.weight"), self.ones(&[channels])?)?;
        ps.insert(format!("{prefix}.bias"), self.zeros(&[channels])?)?;
        Ok(())
    }
}

/// Stride-1 convolution with "same" zero padding for an odd square kernel.
///
/// The forward pass is candle's im2col convolution; the backward pass is
/// expressed with two more forward convolutions instead of a transposed one.
struct SameConv2d;

impl SameConv2d {
    fn run<T: candle_core::WithDType>(x: &[T], lx: &Layout, w: &[T], lw: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let x = contiguous_slice(x, lx)?;
        let w = contiguous_slice(w, lw)?;
        let x = Tensor::from_slice(x, lx.shape(), &Device::Cpu)?;
        let w = Tensor::from_slice(w, lw.shape(), &Device::Cpu)?;
        let pad = w.dim(2)? / 2;
        let y = x.conv2d(&w, pad, 1, 1, 1)?;
        let shape = y.shape().clone();
        Ok((y.flatten_all()?.to_vec1::<T>()?, shape))
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("same-conv2d expects contiguous inputs"),
    }
}

impl CustomOp2 for SameConv2d {
    fn name(&self) -> &'static str {
        "same-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                let (y, shape) = Self::run(x, l1, w, l2)?;
                Ok((CpuStorage::F32(y), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                let (y, shape) = Self::run(x, l1, w, l2)?;
                Ok((CpuStorage::F64(y), shape))
            }
            _ => candle_core::bail!("same-conv2d: unsupported dtypes {:?} / {:?}", s1.dtype(), s2.dtype()),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let pad = w.dim(2)? / 2;
        let grad = grad.contiguous()?;
        let w_flipped = w.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
        let grad_x = grad.conv2d(&w_flipped, pad, 1, 1, 1)?;
        let grad_w = x
            .transpose(0, 1)?
            .contiguous()?
            .conv2d(&grad.transpose(0, 1)?.contiguous()?, pad, 1, 1, 1)?
            .transpose(0, 1)?
            .contiguous()?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// `x (B, Cin, H, W)` convolved with `w (Cout, Cin, k, k)`, output `(B, Cout, H, W)`.
pub fn same_conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let k = w.dim(2)?;
    if k % 2 == 0 || w.dim(3)? != k {
        return Err(Error::Shape(format!("kernel {:?} is not odd and square", w.dims())));
    }
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(&w, SameConv2d)?)
}

pub fn conv2d(ps: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{prefix}.weight"))?;
    let b = ps.get(&format!("{prefix}.bias"))?;
    let y = same_conv2d(x, &w)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

/// Affine map over the last dimension; weight is stored `(out, in)`.
pub fn linear(ps: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{prefix}.weight"))?;
    let b = ps.get(&format!("{prefix}.bias"))?;
    let y = match x.rank() {
        2 => x.matmul(&w.t()?)?,
        _ => x.broadcast_matmul(&w.t()?)?,
    };
    Ok(y.broadcast_add(&b)?)
}

pub fn group_norm(ps: &ParamStore, prefix: &str, x: &Tensor, groups: usize) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (b, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
    }
    let grouped = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = grouped.mean_keepdim(D::Minus1)?;
    let centered = grouped.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + EPS)?.sqrt()?)?.reshape((b, c, h, w))?;
    let gamma = ps.get(&format!("{prefix}.weight"))?.reshape((1, c, 1, 1))?;
    let beta = ps.get(&format!("{prefix}.bias"))?.reshape((1, c, 1, 1))?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// Largest group count `<= 8` dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Sinusoidal timestep features `[cos(t f_i), sin(t f_i)]` with geometric
/// frequencies `f_i = 10000^(-i / half)`. Returns `(N, dim)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dim {dim} must be even and >= 2")));
    }
    let half = dim / 2;
    let mut values = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        values.extend(angles.iter().map(|a| a.cos()));
        values.extend(angles.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_vec(values, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed), dtype);
        init.uniform(shape, 1.0).unwrap()
    }

    #[test]
    fn same_conv_matches_candle_conv() {
        let x = rand_tensor(1, &[2, 3, 5, 6], DType::F64);
        let w = rand_tensor(2, &[4, 3, 3, 3], DType::F64);
        let ours = same_conv2d(&x, &w).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn same_conv_gradients_match_candle() {
        for k in [1usize, 3] {
            let x = Var::from_tensor(&rand_tensor(3, &[2, 3, 4, 5], DType::F64)).unwrap();
            let w = Var::from_tensor(&rand_tensor(4, &[2, 3, k, k], DType::F64)).unwrap();
            let probe = rand_tensor(5, &[2, 2, 4, 5], DType::F64);
            let ours = (same_conv2d(x.as_tensor(), w.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
            let g1 = ours.backward().unwrap();
            let reference = (x.as_tensor().conv2d(w.as_tensor(), k / 2, 1, 1, 1).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap();
            let g2 = reference.backward().unwrap();
            for v in [&x, &w] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(diff < 1e-10, "k={k} diff {diff}");
            }
        }
    }

    #[test]
    fn deep_copy_is_independent() {
        let mut ps = ParamStore::new();
        ps.insert("a", rand_tensor(1, &[3], DType::F32)).unwrap();
        let copy = ps.deep_copy().unwrap();
        let before = ps.checksum().unwrap();
        copy.set("a", &Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(ps.checksum().unwrap(), before);
        assert_ne!(copy.checksum().unwrap(), before);
    }

    #[test]
    fn frozen_store_hands_out_detached() {
        let mut ps = ParamStore::new();
        ps.insert("a", rand_tensor(1, &[3], DType::F32)).unwrap();
        ps.set_frozen(true);
        let t = ps.get("a").unwrap();
        let loss = t.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(ps.vars()[0].as_tensor()).is_none());
    }

    #[test]
    fn embedding_shape_and_zero() {
        let e = timestep_embedding(&[0, 5], 8, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(e.dims(), &[2, 8]);
        let row = e.get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&row[..4], &[1.0; 4]);
        assert_eq!(&row[4..], &[0.0; 4]);
    }

    #[test]
    fn group_norm_normalises() {
        let mut ps = ParamStore::new();
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(0), DType::F64);
        init.norm(&mut ps, "gn", 4).unwrap();
        let x = rand_tensor(9, &[2, 4, 3, 3], DType::F64).affine(3.0, 1.0).unwrap();
        let y = group_norm(&ps, "gn", &x, 2).unwrap();
        let g = y.reshape((2, 2, 18)).unwrap();
        let mean = g.mean_keepdim(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
    }
}
