//! Discrete forward diffusion process and timestep samplers.
//!
//! A schedule stores the cumulative signal coefficients `alpha_bar[t]` for
//! `t = 0..=T`. Noising follows `x_t = sqrt(alpha_bar[t]) x_0 + sqrt(1 - alpha_bar[t]) eps`.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Offset used by the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper bound applied to every per-step beta.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Cosine,
    Linear,
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown schedule family `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Closed form of the squared-cosine schedule before beta clipping,
/// normalised so that the value at `t = 0` is one.
pub fn cosine_alpha_bar(t: f64, num_timesteps: f64) -> f64 {
    let f = |t: f64| {
        let angle = (t / num_timesteps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        angle.cos().powi(2)
    };
    f(t) / f(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_timesteps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(num_timesteps: usize, family: ScheduleFamily) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 timesteps, got {num_timesteps}"
            )));
        }
        let n = num_timesteps as f64;
        let betas: Vec<f64> = match family {
            ScheduleFamily::Cosine => (1..=num_timesteps)
                .map(|t| {
                    let ratio = cosine_alpha_bar(t as f64, n) / cosine_alpha_bar((t - 1) as f64, n);
                    (1.0 - ratio).min(MAX_BETA)
                })
                .collect(),
            ScheduleFamily::Linear => {
                // DDPM endpoints, rescaled so the total noise matches a 1000-step chain.
                let scale = 1000.0 / n;
                let (start, end) = (1e-4 * scale, 0.02 * scale);
                (0..num_timesteps)
                    .map(|i| {
                        let frac = i as f64 / (num_timesteps - 1) as f64;
                        (start + (end - start) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(num_timesteps + 1);
        alpha_bar.push(1.0);
        for beta in betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Builds a schedule from explicit coefficients, checking every invariant.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::Config("alpha_bar must cover at least 2 timesteps".into()));
        }
        if let Some(bad) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("alpha_bar entry {bad} outside (0, 1]")));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("alpha_bar must be non-increasing".into()));
        }
        if alpha_bar[0] < 1.0 - 1e-6 {
            return Err(Error::Config(format!("alpha_bar[0] = {} must be ~1", alpha_bar[0])));
        }
        let last = *alpha_bar.last().unwrap();
        if last > 1e-3 {
            return Err(Error::Config(format!("alpha_bar[T] = {last} must be <= 1e-3")));
        }
        Ok(Self {
            num_timesteps: alpha_bar.len() - 1,
            alpha_bar,
        })
    }

    /// `T`, the largest valid timestep.
    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_timesteps {
            return Err(Error::OutOfRange(format!(
                "timestep {t} outside [0, {}]",
                self.num_timesteps
            )));
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }
}

/// A clean image, the noise added to it, and the resulting noised image.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub xt: Tensor,
}

pub fn forward_noise(x0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<NoisySample> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and noise {:?} differ",
            x0.dims(),
            eps.dims()
        )));
    }
    schedule.check_timestep(t)?;
    let (signal, noise) = schedule.coefficients(t);
    let xt = (x0.affine(signal, 0.0)? + eps.affine(noise, 0.0)?)?;
    Ok(NoisySample {
        x0: x0.clone(),
        eps: eps.clone(),
        t,
        xt,
    })
}

/// Noises a batch `(B, ...)` with one timestep per leading index.
pub fn forward_noise_batch(x0: &Tensor, eps: &Tensor, timesteps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and noise {:?} differ",
            x0.dims(),
            eps.dims()
        )));
    }
    let batch = x0.dim(0)?;
    if timesteps.len() != batch {
        return Err(Error::Shape(format!(
            "{} timesteps for a batch of {batch}",
            timesteps.len()
        )));
    }
    let mut signal = Vec::with_capacity(batch);
    let mut noise = Vec::with_capacity(batch);
    for &t in timesteps {
        schedule.check_timestep(t)?;
        let (s, n) = schedule.coefficients(t);
        signal.push(s);
        noise.push(n);
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = batch;
    let device = x0.device();
    let signal = Tensor::from_vec(signal, shape.as_slice(), device)?.to_dtype(x0.dtype())?;
    let noise = Tensor::from_vec(noise, shape.as_slice(), device)?.to_dtype(x0.dtype())?;
    let xt = (x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?;
    Ok(xt)
}

/// Standard-normal `f32` noise of the given shape.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?)
}

/// One timestep per stratification bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedDraw {
    pub bins: usize,
    pub timesteps: Vec<usize>,
}

/// Half-open integer range `[floor(i T / I), floor((i + 1) T / I))` of bin `i`.
pub fn stratum_bounds(bin: usize, bins: usize, max_timestep: usize) -> (usize, usize) {
    (bin * max_timestep / bins, (bin + 1) * max_timestep / bins)
}

pub fn sample_stratified_timesteps<R: Rng + ?Sized>(
    bins: usize,
    max_timestep: usize,
    rng: &mut R,
) -> Result<StratifiedDraw> {
    if bins == 0 || bins > max_timestep {
        return Err(Error::OutOfRange(format!(
            "bin count {bins} outside [1, {max_timestep}]"
        )));
    }
    let timesteps = (0..bins)
        .map(|i| {
            let (lo, hi) = stratum_bounds(i, bins, max_timestep);
            rng.random_range(lo..hi)
        })
        .collect();
    Ok(StratifiedDraw { bins, timesteps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_endpoints() {
        let s = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        assert!((s.alpha_bar(0) - 1.0).abs() < 1e-6);
        assert!(s.alpha_bar(1000) <= 1e-3);
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn cosine_midpoint_matches_closed_form() {
        let s = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        // Independent evaluation of cos^2(((0.5 + 0.008) / 1.008) * pi / 2) / cos^2((0.008 / 1.008) * pi / 2).
        let num = ((0.508f64 / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        let den = ((0.008f64 / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        assert!((s.alpha_bar(500) - num / den).abs() < 1e-9);
    }

    #[test]
    fn linear_schedule_is_valid() {
        for t in [2, 3, 10, 50, 1000] {
            let s = NoiseSchedule::build(t, ScheduleFamily::Linear).unwrap();
            assert_eq!(s.num_timesteps(), t);
            assert!(s.alpha_bar(t) <= 1e-3);
        }
    }

    #[test]
    fn rejects_short_schedules() {
        assert!(NoiseSchedule::build(1, ScheduleFamily::Cosine).is_err());
        assert!(NoiseSchedule::build(0, ScheduleFamily::Linear).is_err());
    }

    #[test]
    fn from_alpha_bar_rejects_increasing() {
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.6, 1e-4]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 1e-4]).is_ok());
    }

    #[test]
    fn forward_noise_endpoints() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::build(1000, ScheduleFamily::Cosine).unwrap();
        let x0 = Tensor::new(&[0.25f32, -1.0, 0.75, 1.0], &dev).unwrap();
        let eps = Tensor::new(&[1.5f32, 0.3, -0.2, -2.0], &dev).unwrap();
        let at0 = forward_noise(&x0, &eps, 0, &s).unwrap();
        assert_eq!(at0.xt.to_vec1::<f32>().unwrap(), x0.to_vec1::<f32>().unwrap());
        let at_t = forward_noise(&x0, &eps, 1000, &s).unwrap();
        let bound = s.alpha_bar(1000).sqrt() + 1e-6;
        for (a, b) in at_t.xt.to_vec1::<f32>().unwrap().iter().zip(eps.to_vec1::<f32>().unwrap()) {
            assert!((a - b).abs() as f64 <= bound);
        }
    }

    #[test]
    fn forward_noise_hand_value() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 1e-4]).unwrap();
        let x0 = Tensor::new(&[1.0f64], &dev).unwrap();
        let eps = Tensor::new(&[-1.0f64], &dev).unwrap();
        let out = forward_noise(&x0, &eps, 1, &s).unwrap();
        let v = out.xt.to_vec1::<f64>().unwrap()[0];
        assert!((v - (0.5 - 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - (-0.3660)).abs() < 1e-4);
    }

    #[test]
    fn forward_noise_errors() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::build(10, ScheduleFamily::Cosine).unwrap();
        let a = Tensor::zeros(4, candle_core::DType::F32, &dev).unwrap();
        let b = Tensor::zeros(3, candle_core::DType::F32, &dev).unwrap();
        assert!(matches!(forward_noise(&a, &b, 1, &s), Err(Error::Shape(_))));
        assert!(matches!(forward_noise(&a, &a, 11, &s), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn batch_noise_matches_single() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::build(100, ScheduleFamily::Cosine).unwrap();
        let x0 = Tensor::arange(0f32, 12.0, &dev).unwrap().reshape((3, 4)).unwrap();
        let eps = Tensor::ones((3, 4), candle_core::DType::F32, &dev).unwrap();
        let ts = [0usize, 40, 100];
        let batch = forward_noise_batch(&x0, &eps, &ts, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let one = forward_noise(&x0.get(i).unwrap(), &eps.get(i).unwrap(), t, &s).unwrap();
            let a = one.xt.to_vec1::<f32>().unwrap();
            let b = batch.get(i).unwrap().to_vec1::<f32>().unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stratified_bins_for_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let d = sample_stratified_timesteps(3, 999, &mut rng).unwrap();
            assert!(d.timesteps[0] < 333);
            assert!((333..666).contains(&d.timesteps[1]));
            assert!((666..999).contains(&d.timesteps[2]));
        }
    }

    #[test]
    fn stratified_rejects_bad_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_stratified_timesteps(0, 10, &mut rng).is_err());
        assert!(sample_stratified_timesteps(11, 10, &mut rng).is_err());
        assert!(sample_stratified_timesteps(10, 10, &mut rng).is_ok());
    }

    #[test]
    fn stratified_is_seeded() {
        let a = sample_stratified_timesteps(4, 1000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_stratified_timesteps(4, 1000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_chi_square_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let (bins, max_t, draws, buckets) = (4usize, 1000usize, 10_000usize, 8usize);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hist = vec![vec![0usize; buckets]; bins];
        for _ in 0..draws {
            let d = sample_stratified_timesteps(bins, max_t, &mut rng).unwrap();
            for (i, &t) in d.timesteps.iter().enumerate() {
                let (lo, hi) = stratum_bounds(i, bins, max_t);
                hist[i][(t - lo) * buckets / (hi - lo)] += 1;
            }
        }
        let critical = ChiSquared::new((buckets - 1) as f64).unwrap().inverse_cdf(0.99);
        for (i, h) in hist.iter().enumerate() {
            let (lo, hi) = stratum_bounds(i, bins, max_t);
            let width = hi - lo;
            let mut support = vec![0usize; buckets];
            for k in 0..width {
                support[k * buckets / width] += 1;
            }
            let stat: f64 = h
                .iter()
                .zip(&support)
                .map(|(&c, &n)| {
                    let expected = draws as f64 * n as f64 / width as f64;
                    (c as f64 - expected).powi(2) / expected
                })
                .sum();
            assert!(stat < critical, "chi-square {stat} >= {critical}");
        }
    }
}
