//! How much of a noisy-input feature map is explained by the features of
//! the noise alone, and how much of the remainder by clean-image features.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::schedule::{forward_noise_batch, gaussian_noise};
use crate::{DenoiserParams, Error, NoiseSchedule, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares `c` minimizing `|f - c n|²`, no intercept.
pub fn fit_scalar_coefficient(f: &[f64], n: &[f64]) -> Result<f64> {
    if f.len() != n.len() {
        return Err(Error::Shape(format!("lengths {} and {}", f.len(), n.len())));
    }
    let nn = dot(n, n);
    if nn == 0.0 {
        return Err(Error::Invalid("basis vector is zero".into()));
    }
    Ok(dot(f, n) / nn)
}

/// `1 - |f - a|² / |f|²`, clamped to `[0, 1]`. For a least-squares scalar
/// fit the unclamped value already lies in that range up to rounding.
pub fn explained_fraction(f: &[f64], a: &[f64]) -> Result<f64> {
    if f.len() != a.len() {
        return Err(Error::Shape(format!("lengths {} and {}", f.len(), a.len())));
    }
    let ff = dot(f, f);
    if ff == 0.0 {
        return Err(Error::Invalid("target vector is zero".into()));
    }
    let rr: f64 = f.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((1.0 - rr / ff).clamp(0.0, 1.0))
}

/// Fraction of `f` explained by the best scalar multiple of `n`, and the residual.
fn decompose(f: &[f64], n: &[f64]) -> Result<(f64, Vec<f64>)> {
    let c = fit_scalar_coefficient(f, n)?;
    let approx: Vec<f64> = n.iter().map(|v| c * v).collect();
    let frac = explained_fraction(f, &approx)?;
    let residual = f.iter().zip(&approx).map(|(x, y)| x - y).collect();
    Ok((frac, residual))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One coefficient per image, fractions averaged over images.
    PerImage,
    /// One coefficient shared by all images.
    Global,
}

/// Mean removal applied to each feature set before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Raw second moments.
    None,
    /// Subtract each channel's spatial mean, per image.
    PerImage,
    /// Subtract each channel's mean over all images and positions.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub timesteps: Vec<usize>,
    /// Stages whose maps are concatenated into one vector per image.
    pub stages: Vec<usize>,
    pub granularity: Granularity,
    pub centering: Centering,
    pub seed: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub t: usize,
    pub fraction_noise: f64,
    pub fraction_clean_of_residual: f64,
    pub fraction_unexplained: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub granularity: Granularity,
    pub centering: Centering,
    pub stages: Vec<usize>,
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    pub fn timesteps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t as f64).collect()
    }

    pub fn fraction_noise(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fraction_noise).collect()
    }
}

/// Selected stage maps of every image, `(N, C, H, W)` each, in f64.
fn stage_maps(teacher: &DenoiserParams, x: &Tensor, t: usize, stages: &[usize], batch: usize) -> Result<Vec<Tensor>> {
    let n = x.dim(0)?;
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); stages.len()];
    for start in (0..n).step_by(batch) {
        let len = batch.min(n - start);
        let taps = teacher.features(&x.narrow(0, start, len)?, &vec![t; len])?;
        for (k, s) in stages.iter().enumerate() {
            let i = taps
                .stage_ids
                .iter()
                .position(|id| id == s)
                .ok_or_else(|| Error::Invalid(format!("stage {s} not tapped")))?;
            parts[k].push(taps.maps[i].to_dtype(DType::F64)?);
        }
    }
    parts.iter().map(|p| Ok(Tensor::cat(p, 0)?)).collect()
}

/// One vector per image: the centered stage maps, channel-major, concatenated.
fn flatten(maps: &[Tensor], centering: Centering) -> Result<Vec<Vec<f64>>> {
    let n = maps[0].dim(0)?;
    let mut out = vec![Vec::new(); n];
    for m in maps {
        let m = match centering {
            Centering::None => m.clone(),
            Centering::PerImage => m.broadcast_sub(&m.mean_keepdim(3)?.mean_keepdim(2)?)?,
            Centering::Dataset => m.broadcast_sub(&m.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?)?,
        };
        for (o, row) in out.iter_mut().zip(m.flatten_from(1)?.to_vec2::<f64>()?) {
            o.extend(row);
        }
    }
    Ok(out)
}

/// Two-stage decomposition `F(x_t; t) ≈ c₁ F(ε; T) + c₂ F(x₀; 0) + r` for
/// every `t`. The noise draw of each image is fixed across timesteps.
pub fn noise_decomposition_sweep(teacher: &DenoiserParams, schedule: &NoiseSchedule, images: &Tensor, cfg: &DecompositionConfig) -> Result<VarianceReport> {
    let n = images.dim(0)?;
    if n == 0 || cfg.timesteps.is_empty() || cfg.stages.is_empty() {
        return Err(Error::Invalid("decomposition needs images, timesteps and stages".into()));
    }
    for t in &cfg.timesteps {
        schedule.check_timestep(*t)?;
    }
    let big_t = schedule.num_timesteps();
    let shape: Vec<usize> = images.dims()[1..].to_vec();
    let eps = (0..n)
        .map(|i| gaussian_noise(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5, i as u64)), &shape))
        .collect::<Result<Vec<_>>>()?;
    let eps = Tensor::stack(&eps, 0)?.to_dtype(images.dtype())?;
    let batch = cfg.batch_size.max(1);
    let feats = |x: &Tensor, t: usize| flatten(&stage_maps(teacher, x, t, &cfg.stages, batch)?, cfg.centering);
    let noise_feats = feats(&eps, big_t)?;
    let clean_feats = feats(images, 0)?;
    let mut rows = Vec::with_capacity(cfg.timesteps.len());
    for &t in &cfg.timesteps {
        let xt = forward_noise_batch(images, &eps, &vec![t; n], schedule)?;
        let noisy = feats(&xt, t)?;
        let (fn_, fc) = match cfg.granularity {
            Granularity::PerImage => {
                let (mut sn, mut sc) = (0.0, 0.0);
                for i in 0..n {
                    let (a, b) = two_stage(&noisy[i], &noise_feats[i], &clean_feats[i])?;
                    sn += a;
                    sc += b;
                }
                (sn / n as f64, sc / n as f64)
            }
            Granularity::Global => two_stage(&noisy.concat(), &noise_feats.concat(), &clean_feats.concat())?,
        };
        rows.push(VarianceRow {
            t,
            fraction_noise: fn_,
            fraction_clean_of_residual: fc,
            fraction_unexplained: (1.0 - fn_) * (1.0 - fc),
            n_images: n,
        });
    }
    Ok(VarianceReport {
        granularity: cfg.granularity,
        centering: cfg.centering,
        stages: cfg.stages.clone(),
        rows,
    })
}

/// `(fraction_noise, fraction_clean_of_residual)`. A zero residual counts
/// as fully explained.
fn two_stage(f: &[f64], noise: &[f64], clean: &[f64]) -> Result<(f64, f64)> {
    let (fn_, residual) = decompose(f, noise)?;
    if dot(&residual, &residual) == 0.0 {
        return Ok((fn_, 1.0));
    }
    let (fc, _) = decompose(&residual, clean)?;
    Ok((fn_, fc))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid("correlation needs two equal-length series of length >= 2".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Invalid("constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_fit_cases() {
        let n = [1.0, -2.0, 0.5];
        let f: Vec<f64> = n.iter().map(|v| 2.0 * v).collect();
        assert_eq!(fit_scalar_coefficient(&f, &n).unwrap(), 2.0);
        assert_eq!(fit_scalar_coefficient(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(fit_scalar_coefficient(&[1.0], &[0.0]).is_err());
        let c = fit_scalar_coefficient(&[3.0, 4.0], &[1.0, 0.0]).unwrap();
        assert_eq!(c, 3.0);
        assert!((explained_fraction(&[3.0, 4.0], &[3.0, 0.0]).unwrap() - 0.36).abs() < 1e-15);
        assert_eq!(explained_fraction(&f, &f).unwrap(), 1.0);
        assert_eq!(explained_fraction(&f, &[0.0; 3]).unwrap(), 0.0);
        assert!(explained_fraction(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[10.0, 30.0, 20.0, 20.0]), vec![1.0, 4.0, 2.5, 2.5]);
        let t = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&t, &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&t, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_stage_exact_mixture() {
        // f = 2n + 3c with n ⊥ c: the noise fit is exact on n and the
        // residual is exactly 3c.
        let n = [1.0, 0.0, 0.0];
        let c = [0.0, 1.0, 1.0];
        let f: Vec<f64> = n.iter().zip(&c).map(|(a, b)| 2.0 * a + 3.0 * b).collect();
        let (fn_, fc) = two_stage(&f, &n, &c).unwrap();
        assert!((fn_ - 4.0 / 22.0).abs() < 1e-15);
        assert!((fc - 1.0).abs() < 1e-15);
    }
}
