//! Run configuration: presets, TOML files and `--section.key value` overrides.
//!
//! Precedence is command line, then file, then preset. Keys are the dotted
//! paths of [`RunConfig`]; anything not present in the preset is rejected.

use std::path::Path;

use cleandift_core::analysis::{Centering, DecompositionConfig, Granularity};
use cleandift_core::backbone::TeacherTrainConfig;
use cleandift_core::consolidator::{Conditioning, Gating, HeadPretraining, Metric};
use cleandift_core::probes::ProbeConfig;
use cleandift_core::{AlignmentConfig, BackboneConfig, NoiseSchedule, ScheduleFamily};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Default,
    PaperScale,
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "default" => Ok(Preset::Default),
            "paper_scale" => Ok(Preset::PaperScale),
            other => Err(err(format!("unknown preset `{other}` (expected tiny, default or paper_scale)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub num_timesteps: usize,
    /// `cosine` or `linear`.
    pub family: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub image_size: usize,
    pub base_channels: usize,
    pub stage_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub num_taps: usize,
    pub timestep_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub metric: String,
    pub use_heads: bool,
    pub bins: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub head_conditioning: String,
    pub head_gating: String,
    pub head_pretraining: String,
    pub head_pretrain_steps: usize,
    /// Empty means all ones.
    pub stage_weights: Vec<f64>,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
    /// Step budget of every ablation cell.
    pub ablation_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub alpha: f64,
    /// Feature map used for matching and analysis; -1 picks the first tap at
    /// the second-coarsest resolution.
    pub match_stage: i64,
    pub pck_timesteps: Vec<usize>,
    /// Timestep of the single-timestep noisy-teacher baseline.
    pub baseline_t: usize,
    /// Ensemble size of the extra baseline row; 1 disables it.
    pub ensemble_n: usize,
    pub noise_seed: u64,
    pub probe_timesteps: Vec<usize>,
    /// Empty means every tap.
    pub feature_maps: Vec<usize>,
    pub probe_steps: usize,
    pub probe_batch_size: usize,
    pub probe_learning_rate: f64,
    pub knn_k: usize,
    /// Timestep of the probe-transfer table.
    pub transfer_t: usize,
    pub analysis_timesteps: Vec<usize>,
    pub analysis_images: usize,
    /// `per_image` or `global`.
    pub analysis_granularity: String,
    /// `none`, `per_image` or `dataset`.
    pub analysis_centering: String,
    /// Include the ablation grid in `pipeline`.
    pub pipeline_ablation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub distill_images: usize,
    pub teacher_extra_images: usize,
    pub pairs: usize,
    pub probe_train: usize,
    pub probe_test: usize,
    pub heldout: usize,
    /// Optional folder of external images used for distillation instead of
    /// generated scenes.
    pub ingest_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Parent of the timestamped run directories.
    pub out: String,
    /// Earlier run directory to take missing inputs from.
    pub from_run: String,
    /// Dataset root written by `gen-data`; empty regenerates splits from the seed.
    pub data: String,
    pub teacher: String,
    pub student: String,
    pub heads: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub backbone: BackboneSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let default = Self {
            seed: 0,
            schedule: ScheduleSection {
                num_timesteps: 1000,
                family: "cosine".into(),
            },
            backbone: BackboneSection {
                image_size: 32,
                base_channels: 16,
                stage_multipliers: vec![1, 2, 2],
                blocks_per_level: 2,
                num_taps: 5,
                timestep_embed_dim: 64,
            },
            teacher: TeacherSection {
                steps: 300,
                batch_size: 16,
                learning_rate: 2e-3,
                warmup_steps: 100,
                grad_clip: 1.0,
                log_every: 50,
            },
            distill: DistillSection {
                metric: "cosine".into(),
                use_heads: true,
                bins: 3,
                steps: 200,
                batch_size: 8,
                learning_rate: 1e-4,
                warmup_steps: 20,
                head_conditioning: "film".into(),
                head_gating: "swiglu".into(),
                head_pretraining: "none".into(),
                head_pretrain_steps: 50,
                stage_weights: Vec::new(),
                grad_clip: 0.0,
                log_every: 20,
                ablation_steps: 50,
            },
            eval: EvalSection {
                alpha: 0.1,
                match_stage: -1,
                pck_timesteps: vec![0, 50, 100, 200, 261, 300, 400, 500, 600, 700, 800, 900],
                baseline_t: 261,
                ensemble_n: 1,
                noise_seed: 0,
                probe_timesteps: vec![0, 100, 261, 500, 900],
                feature_maps: Vec::new(),
                probe_steps: 300,
                probe_batch_size: 512,
                probe_learning_rate: 1e-2,
                knn_k: 10,
                transfer_t: 261,
                analysis_timesteps: (0..=10).map(|i| i * 100).collect(),
                analysis_images: 32,
                analysis_granularity: "per_image".into(),
                analysis_centering: "none".into(),
                pipeline_ablation: false,
            },
            data: DataSection {
                distill_images: 4096,
                teacher_extra_images: 512,
                pairs: 256,
                probe_train: 512,
                probe_test: 256,
                heldout: 64,
                ingest_dir: String::new(),
            },
            paths: PathsSection {
                out: "runs".into(),
                from_run: String::new(),
                data: String::new(),
                teacher: String::new(),
                student: String::new(),
                heads: String::new(),
            },
        };
        match preset {
            Preset::Default => default,
            Preset::PaperScale => {
                let a = AlignmentConfig::paper_scale();
                Self {
                    distill: DistillSection {
                        steps: a.steps,
                        batch_size: a.batch_size,
                        learning_rate: a.learning_rate,
                        warmup_steps: a.warmup_steps,
                        bins: a.bins,
                        ..default.distill
                    },
                    ..default
                }
            }
            Preset::Tiny => Self {
                backbone: BackboneSection {
                    image_size: 16,
                    base_channels: 8,
                    stage_multipliers: vec![1, 2],
                    blocks_per_level: 2,
                    num_taps: 3,
                    timestep_embed_dim: 32,
                },
                teacher: TeacherSection {
                    steps: 20,
                    batch_size: 8,
                    warmup_steps: 5,
                    log_every: 5,
                    ..default.teacher
                },
                distill: DistillSection {
                    steps: 6,
                    batch_size: 4,
                    warmup_steps: 2,
                    head_pretrain_steps: 2,
                    log_every: 2,
                    ablation_steps: 2,
                    ..default.distill
                },
                eval: EvalSection {
                    pck_timesteps: vec![0, 500, 900],
                    baseline_t: 261,
                    probe_timesteps: vec![0, 500],
                    probe_steps: 20,
                    probe_batch_size: 128,
                    knn_k: 3,
                    analysis_timesteps: (0..=8).map(|i| i * 125).collect(),
                    analysis_images: 8,
                    pipeline_ablation: true,
                    ..default.eval
                },
                data: DataSection {
                    distill_images: 32,
                    teacher_extra_images: 8,
                    pairs: 6,
                    probe_train: 16,
                    probe_test: 8,
                    heldout: 8,
                    ingest_dir: String::new(),
                },
                ..default
            },
        }
    }

    /// Preset, then `file`, then dotted overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let base = Value::try_from(Self::preset(preset)).map_err(|e| err(e.to_string()))?;
        let mut table = match base {
            Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
            let file_table: Table = text.parse().map_err(|e| err(format!("invalid config {}: {e}", path.display())))?;
            merge(&mut table, file_table, "")?;
        }
        for (key, raw) in overrides {
            set_dotted(&mut table, key, raw)?;
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone_config().validate().map_err(|e| err(e.to_string()))?;
        let schedule = self.schedule()?;
        self.alignment(self.distill.steps)?
            .validate(schedule.num_timesteps())
            .map_err(|e| err(e.to_string()))?;
        let t_max = schedule.num_timesteps();
        let all_t = self
            .eval
            .pck_timesteps
            .iter()
            .chain(&self.eval.probe_timesteps)
            .chain(&self.eval.analysis_timesteps)
            .chain([&self.eval.baseline_t, &self.eval.transfer_t]);
        for t in all_t {
            if *t > t_max {
                return Err(err(format!("timestep {t} exceeds schedule.num_timesteps = {t_max}")));
            }
        }
        let taps = self.backbone.num_taps;
        if self.eval.match_stage >= taps as i64 || self.eval.match_stage < -1 {
            return Err(err(format!("eval.match_stage must be -1 or below {taps}")));
        }
        if let Some(s) = self.eval.feature_maps.iter().find(|s| **s >= taps) {
            return Err(err(format!("eval.feature_maps contains {s}, only {taps} taps")));
        }
        if self.eval.alpha.is_nan() || self.eval.alpha <= 0.0 {
            return Err(err("eval.alpha must be positive"));
        }
        if self.eval.ensemble_n == 0 || self.eval.knn_k == 0 {
            return Err(err("eval.ensemble_n and eval.knn_k must be positive"));
        }
        if self.eval.knn_k > self.data.probe_train {
            return Err(err("eval.knn_k exceeds data.probe_train"));
        }
        if self.eval.analysis_images == 0 || self.data.pairs == 0 || self.data.probe_train == 0 || self.data.probe_test == 0 {
            return Err(err("data split sizes and eval.analysis_images must be positive"));
        }
        if self.data.distill_images + self.data.teacher_extra_images == 0 {
            return Err(err("no teacher training images"));
        }
        self.granularity()?;
        self.centering()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        let family = match self.schedule.family.as_str() {
            "cosine" => ScheduleFamily::Cosine,
            "linear" => ScheduleFamily::Linear,
            other => return Err(err(format!("schedule.family `{other}` (expected cosine or linear)"))),
        };
        NoiseSchedule::build(self.schedule.num_timesteps, family).map_err(|e| err(e.to_string()))
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            image_size: b.image_size,
            in_channels: 3,
            base_channels: b.base_channels,
            stage_multipliers: b.stage_multipliers.clone(),
            blocks_per_level: b.blocks_per_level,
            num_taps: b.num_taps,
            timestep_embed_dim: b.timestep_embed_dim,
        }
    }

    pub fn teacher_train(&self) -> TeacherTrainConfig {
        let t = &self.teacher;
        TeacherTrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            seed: self.seed,
            log_every: t.log_every,
        }
    }

    pub fn alignment(&self, steps: usize) -> Result<AlignmentConfig, ConfigError> {
        let d = &self.distill;
        let parse = |what: &str, v: &str| err(format!("distill.{what}: {v}"));
        Ok(AlignmentConfig {
            metric: d.metric.parse::<Metric>().map_err(|e| parse("metric", &e.to_string()))?,
            use_heads: d.use_heads,
            bins: d.bins,
            steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            warmup_steps: d.warmup_steps,
            head_conditioning: d
                .head_conditioning
                .parse::<Conditioning>()
                .map_err(|e| parse("head_conditioning", &e.to_string()))?,
            head_gating: d.head_gating.parse::<Gating>().map_err(|e| parse("head_gating", &e.to_string()))?,
            head_pretraining: d
                .head_pretraining
                .parse::<HeadPretraining>()
                .map_err(|e| parse("head_pretraining", &e.to_string()))?,
            head_pretrain_steps: d.head_pretrain_steps,
            stage_weights: d.stage_weights.clone(),
            grad_clip: (d.grad_clip > 0.0).then_some(d.grad_clip),
            log_every: d.log_every,
        })
    }

    pub fn match_stage(&self) -> usize {
        if self.eval.match_stage < 0 {
            cleandift_core::correspondence::default_match_stage(&self.backbone_config())
        } else {
            self.eval.match_stage as usize
        }
    }

    pub fn feature_maps(&self) -> Vec<usize> {
        if self.eval.feature_maps.is_empty() {
            (0..self.backbone.num_taps).collect()
        } else {
            self.eval.feature_maps.clone()
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.eval.probe_steps,
            batch_size: self.eval.probe_batch_size,
            learning_rate: self.eval.probe_learning_rate,
            seed: self.seed,
        }
    }

    fn granularity(&self) -> Result<Granularity, ConfigError> {
        match self.eval.analysis_granularity.as_str() {
            "per_image" => Ok(Granularity::PerImage),
            "global" => Ok(Granularity::Global),
            other => Err(err(format!("eval.analysis_granularity `{other}` (expected per_image or global)"))),
        }
    }

    fn centering(&self) -> Result<Centering, ConfigError> {
        match self.eval.analysis_centering.as_str() {
            "none" => Ok(Centering::None),
            "per_image" => Ok(Centering::PerImage),
            "dataset" => Ok(Centering::Dataset),
            other => Err(err(format!("eval.analysis_centering `{other}` (expected none, per_image or dataset)"))),
        }
    }

    pub fn decomposition(&self) -> Result<DecompositionConfig, ConfigError> {
        Ok(DecompositionConfig {
            timesteps: self.eval.analysis_timesteps.clone(),
            stages: vec![self.match_stage()],
            granularity: self.granularity()?,
            centering: self.centering()?,
            seed: self.eval.noise_seed,
            batch_size: 32,
        })
    }
}

/// Merges `src` into `dst`, rejecting keys `dst` does not have.
fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (None, _) => return Err(err(format!("unknown config key `{path}`"))),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(Value::Table(_)), _) => return Err(err(format!("`{path}` is a section, not a value"))),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Sets `a.b.c` from a command-line string. The string is read as a TOML
/// value when it parses as one, otherwise as a bare string.
pub fn set_dotted(table: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        cur = match cur.get_mut(*s) {
            Some(Value::Table(t)) => t,
            _ => return Err(err(format!("unknown config key `{key}`"))),
        };
    }
    let slot = cur.get_mut(*last).ok_or_else(|| err(format!("unknown config key `{key}`")))?;
    if slot.is_table() {
        return Err(err(format!("`{key}` is a section, not a value")));
    }
    if slot.is_integer() && raw.parse::<i64>().is_err() && raw.parse::<u128>().is_ok() {
        return Err(err(format!("`{key}` = {raw} is out of range (at most {})", i64::MAX)));
    }
    let value = parse_value(raw);
    // keep the preset's type when a number was given for a float
    *slot = match (&*slot, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::String(_), v) if !v.is_str() => Value::String(raw.to_string()),
        (_, v) => v,
    };
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `(dotted key, raw value)` pairs from the command line.
pub type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` pairs (any flag containing a dot, or
/// `--seed`) out of the argument list. Returns the remaining arguments.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--").filter(|k| k.contains('.')) else {
            rest.push(a);
            continue;
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| err(format!("missing value for --{key}")))?;
                (key.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Tiny, Preset::Default, Preset::PaperScale] {
            RunConfig::preset(p).validate().unwrap();
        }
        let scaled = RunConfig::preset(Preset::PaperScale);
        assert_eq!((scaled.distill.steps, scaled.distill.batch_size, scaled.distill.bins), (400, 8, 3));
        assert_eq!(scaled.distill.learning_rate, 2e-6);
    }

    #[test]
    fn overrides_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 5\n[distill]\nsteps = 7\nmetric = \"l2\"\n").unwrap();
        let cfg = RunConfig::resolve(Preset::Tiny, Some(&file), &ov(&[("distill.steps", "9"), ("distill.learning_rate", "1")])).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.distill.steps, 9);
        assert_eq!(cfg.distill.metric, "l2");
        assert_eq!(cfg.distill.learning_rate, 1.0);
        let cfg = RunConfig::resolve(Preset::Tiny, None, &ov(&[("eval.pck_timesteps", "[0, 10]"), ("paths.out", "/tmp/x")])).unwrap();
        assert_eq!(cfg.eval.pck_timesteps, vec![0, 10]);
        assert_eq!(cfg.paths.out, "/tmp/x");
    }

    #[test]
    fn rejects_bad_keys_and_values() {
        assert!(RunConfig::resolve(Preset::Tiny, None, &ov(&[("distill.nope", "1")])).is_err());
        assert!(RunConfig::resolve(Preset::Tiny, None, &ov(&[("distill", "1")])).is_err());
        assert!(RunConfig::resolve(Preset::Tiny, None, &ov(&[("distill.metric", "l3")])).is_err());
        assert!(RunConfig::resolve(Preset::Tiny, None, &ov(&[("distill.steps", "many")])).is_err());
        assert!(RunConfig::resolve(Preset::Tiny, None, &ov(&[("eval.baseline_t", "5000")])).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[extra]\nx = 1\n").unwrap();
        assert!(RunConfig::resolve(Preset::Tiny, Some(&file), &[]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::preset(Preset::Default);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn split_args() {
        let args: Vec<String> = ["distill", "--preset", "tiny", "--distill.steps", "3", "--eval.alpha=0.2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, o) = split_overrides(args).unwrap();
        assert_eq!(rest, vec!["distill", "--preset", "tiny"]);
        assert_eq!(o, ov(&[("distill.steps", "3"), ("eval.alpha", "0.2")]));
    }

    #[test]
    fn match_stage_auto() {
        assert_eq!(RunConfig::preset(Preset::Default).match_stage(), 3);
        assert_eq!(RunConfig::preset(Preset::Tiny).match_stage(), 2);
    }
}
