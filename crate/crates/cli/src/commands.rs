//! Subcommand implementations. Every command writes into a [`RunDir`];
//! `pipeline` runs them all in one directory.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use candle_core::Tensor;
use cleandift_core::analysis::{noise_decomposition_sweep, spearman};
use cleandift_core::backbone::{self, init_denoiser};
use cleandift_core::consolidator::{
    consolidate, evaluate_alignment, heads_spec_for, init_heads, init_student_from_teacher, Conditioning, Gating,
    HeadPretraining, Metric,
};
use cleandift_core::correspondence::{evaluate_pck, stacks_for_pairs, timestep_sweep, PckMode, PckTally};
use cleandift_core::data::{derive_seed, ingest_folder, Dataset, CATEGORY_NAMES};
use cleandift_core::features::{ExtractionRequest, FeatureExtractor};
use cleandift_core::probes::{FeatureSource, ProbeSweep, ProbeTask, SweepTask};
use cleandift_core::{DenoiserParams, NoiseSchedule, ProjectionHeadParams};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::run::RunDir;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const HEADS_CKPT: &str = "heads.ckpt";
pub const DATA_DIR: &str = "data";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Distill,
    TeacherExtra,
    Pairs,
    ProbeTrain,
    ProbeTest,
    Heldout,
    Analysis,
}

impl Split {
    pub const ALL: [Split; 7] = [
        Split::Distill,
        Split::TeacherExtra,
        Split::Pairs,
        Split::ProbeTrain,
        Split::ProbeTest,
        Split::Heldout,
        Split::Analysis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Distill => "distill",
            Split::TeacherExtra => "teacher_extra",
            Split::Pairs => "pairs",
            Split::ProbeTrain => "probe_train",
            Split::ProbeTest => "probe_test",
            Split::Heldout => "heldout",
            Split::Analysis => "analysis",
        }
    }

    fn stream(self) -> u64 {
        Split::ALL.iter().position(|s| *s == self).expect("listed") as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Depth,
    Seg,
    Knn,
}

impl std::str::FromStr for ProbeKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "depth" => Ok(ProbeKind::Depth),
            "seg" => Ok(ProbeKind::Seg),
            "knn" => Ok(ProbeKind::Knn),
            other => Err(ConfigError(format!("unknown probe task `{other}` (expected depth, seg or knn)"))),
        }
    }
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Depth => "depth",
            ProbeKind::Seg => "seg",
            ProbeKind::Knn => "knn",
        }
    }
}

/// Shared state of one invocation: resolved config, schedule and cached splits.
pub struct Ctx {
    pub cfg: RunConfig,
    pub schedule: NoiseSchedule,
    splits: RefCell<BTreeMap<&'static str, Rc<Dataset>>>,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let schedule = cfg.schedule()?;
        Ok(Self {
            cfg,
            schedule,
            splits: RefCell::new(BTreeMap::new()),
        })
    }

    fn split_size(&self, split: Split) -> usize {
        let d = &self.cfg.data;
        match split {
            Split::Distill => d.distill_images,
            Split::TeacherExtra => d.teacher_extra_images,
            Split::Pairs => d.pairs,
            Split::ProbeTrain => d.probe_train,
            Split::ProbeTest => d.probe_test,
            Split::Heldout => d.heldout,
            Split::Analysis => self.cfg.eval.analysis_images,
        }
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let size = self.cfg.backbone.image_size;
        let seed = derive_seed(self.cfg.seed, 10, split.stream());
        let n = self.split_size(split);
        Ok(match split {
            Split::Pairs => Dataset::pairs(n, size, seed)?,
            other => Dataset::scenes(n, size, seed, &format!("{}_", other.name()))?,
        })
    }

    /// A split read from `paths.data` when set, otherwise generated from the seed.
    pub fn split(&self, split: Split, run: &mut RunDir) -> Result<Rc<Dataset>> {
        if let Some(ds) = self.splits.borrow().get(split.name()) {
            return Ok(ds.clone());
        }
        let ds = if self.cfg.paths.data.is_empty() {
            self.generate(split)?
        } else {
            let dir = Path::new(&self.cfg.paths.data).join(split.name());
            run.record_input(&dir)?;
            let ds = Dataset::read(&dir).with_context(|| format!("reading split {}", dir.display()))?;
            if ds.image_size != self.cfg.backbone.image_size {
                bail!("split {} has image size {}, config expects {}", dir.display(), ds.image_size, self.cfg.backbone.image_size);
            }
            ds
        };
        let ds = Rc::new(ds);
        self.splits.borrow_mut().insert(split.name(), ds.clone());
        Ok(ds)
    }

    /// Distillation images: an ingested folder when configured, else the distill split.
    fn distill_images(&self, run: &mut RunDir) -> Result<Tensor> {
        if self.cfg.data.ingest_dir.is_empty() {
            return Ok(self.split(Split::Distill, run)?.images_tensor()?);
        }
        let dir = PathBuf::from(&self.cfg.data.ingest_dir);
        run.record_input(&dir)?;
        Ok(ingest_folder(&dir, self.cfg.backbone.image_size)?)
    }

    /// Explicit path, else the current run directory, else `paths.from_run`.
    fn input(&self, run: &mut RunDir, explicit: &str, file: &str, required: bool) -> Result<Option<PathBuf>> {
        let candidates = [
            (!explicit.is_empty()).then(|| PathBuf::from(explicit)),
            Some(run.file(file)),
            (!self.cfg.paths.from_run.is_empty()).then(|| Path::new(&self.cfg.paths.from_run).join(file)),
        ];
        if !explicit.is_empty() && !Path::new(explicit).exists() {
            bail!("input {explicit} does not exist");
        }
        for c in candidates.into_iter().flatten() {
            if c.exists() {
                if !c.starts_with(&run.path) {
                    run.record_input(&c)?;
                }
                return Ok(Some(c));
            }
        }
        if required {
            return Err(anyhow!(ConfigError(format!(
                "no {file} found: pass --paths.{} PATH or --paths.from_run RUN_DIR",
                file.trim_end_matches(".ckpt")
            ))));
        }
        Ok(None)
    }

    fn teacher(&self, run: &mut RunDir) -> Result<DenoiserParams> {
        let path = self.input(run, &self.cfg.paths.teacher.clone(), TEACHER_CKPT, true)?.expect("required");
        let (teacher, schedule) = backbone::load_checkpoint(&path)?;
        if teacher.config != self.cfg.backbone_config() {
            bail!("teacher {} was trained with a different backbone config", path.display());
        }
        if schedule != self.schedule {
            bail!("teacher {} was trained with a different noise schedule", path.display());
        }
        Ok(teacher.freeze())
    }

    fn student(&self, run: &mut RunDir) -> Result<DenoiserParams> {
        let path = self.input(run, &self.cfg.paths.student.clone(), STUDENT_CKPT, true)?.expect("required");
        Ok(backbone::load_checkpoint(&path)?.0)
    }

    fn heads(&self, run: &mut RunDir, required: bool) -> Result<Option<ProjectionHeadParams>> {
        match self.input(run, &self.cfg.paths.heads.clone(), HEADS_CKPT, required)? {
            Some(p) => Ok(Some(ProjectionHeadParams::load(&p)?)),
            None => Ok(None),
        }
    }
}

pub fn gen_data(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let root = run.file(DATA_DIR);
    for split in Split::ALL {
        let ds = ctx.split(split, run)?;
        ds.write(&root.join(split.name()))?;
        log::info!("wrote {} ({} images, {} annotations)", split.name(), ds.len(), ds.pairs.len());
    }
    run.record_output(DATA_DIR);
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f32,
}

pub fn train_teacher(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let distill = ctx.split(Split::Distill, run)?.images_tensor()?;
    let extra = ctx.split(Split::TeacherExtra, run)?;
    let images = if extra.is_empty() {
        distill
    } else {
        Tensor::cat(&[&distill, &extra.images_tensor()?], 0)?
    };
    let start = Instant::now();
    let (teacher, curve) = backbone::train_teacher(&ctx.cfg.backbone_config(), &images, &ctx.schedule, &ctx.cfg.teacher_train())?;
    log::info!("teacher trained in {:.1}s", start.elapsed().as_secs_f64());
    backbone::save_checkpoint(&teacher, &ctx.schedule, run.file(TEACHER_CKPT))?;
    run.record_output(TEACHER_CKPT);
    let rows: Vec<LossRow> = curve.iter().enumerate().map(|(step, loss)| LossRow { step, loss: *loss }).collect();
    run.write_csv("teacher_loss.csv", &rows)
}

#[derive(Serialize)]
struct AlignmentRow {
    bin: usize,
    stage: usize,
    cosine_before: f64,
    cosine_after: f64,
}

fn write_distill_log(run: &mut RunDir, name: &str, log: &cleandift_core::consolidator::DistillLog) -> Result<()> {
    let path = run.file(name);
    let mut w = csv::Writer::from_path(&path)?;
    let k = log.steps.first().map_or(0, |s| s.stage_cosine.len());
    let mut header = vec!["step".to_string(), "loss".into(), "lr".into()];
    header.extend((0..k).map(|i| format!("cosine_stage_{i}")));
    w.write_record(&header)?;
    for s in &log.steps {
        let mut rec = vec![s.step.to_string(), s.loss.to_string(), s.lr.to_string()];
        rec.extend(s.stage_cosine.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    run.record_output(name);
    Ok(())
}

pub fn distill(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let teacher = ctx.teacher(run)?;
    let images = ctx.distill_images(run)?;
    let acfg = ctx.cfg.alignment(ctx.cfg.distill.steps)?;
    let start = Instant::now();
    let out = consolidate(&teacher, &images, &ctx.schedule, &acfg, ctx.cfg.seed)?;
    log::info!("distilled in {:.1}s", start.elapsed().as_secs_f64());
    backbone::save_checkpoint(&out.student, &ctx.schedule, run.file(STUDENT_CKPT))?;
    out.heads.save(run.file(HEADS_CKPT))?;
    run.record_output(STUDENT_CKPT);
    run.record_output(HEADS_CKPT);
    write_distill_log(run, "distill_log.csv", &out.log)?;
    if let Some(pre) = &out.pretrain_log {
        write_distill_log(run, "head_pretrain_log.csv", pre)?;
    }
    let heldout = ctx.split(Split::Heldout, run)?.images_tensor()?;
    let seed = derive_seed(ctx.cfg.seed, 11, 0);
    let student0 = init_student_from_teacher(&teacher)?;
    let heads0 = init_heads(&heads_spec_for(&teacher, &acfg), ctx.cfg.seed)?;
    let use_heads = acfg.use_heads;
    let before = evaluate_alignment(&teacher, &student0, use_heads.then_some(&heads0), &heldout, &ctx.schedule, acfg.bins, seed)?;
    let after = evaluate_alignment(&teacher, &out.student, use_heads.then_some(&out.heads), &heldout, &ctx.schedule, acfg.bins, seed)?;
    let mut rows = Vec::new();
    for (bin, (b, a)) in before.iter().zip(&after).enumerate() {
        for (stage, (cb, ca)) in b.iter().zip(a).enumerate() {
            rows.push(AlignmentRow {
                bin,
                stage,
                cosine_before: *cb,
                cosine_after: *ca,
            });
        }
    }
    run.write_csv("alignment.csv", &rows)
}

#[derive(Serialize)]
struct PckSummaryRow {
    model: String,
    t: usize,
    ensemble_n: usize,
    stage: usize,
    pck_img: f64,
    pck_bbox: f64,
    n_keypoints: usize,
}

#[derive(Serialize)]
struct PckCategoryRow {
    model: String,
    t: usize,
    category: u8,
    category_name: String,
    pck_img: f64,
    pck_bbox: f64,
    n_keypoints: usize,
}

pub fn eval_pck(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let teacher = ctx.teacher(run)?;
    let student = ctx.student(run)?;
    let pairs = ctx.split(Split::Pairs, run)?;
    let ex = FeatureExtractor::new(&teacher, Some(&student), &ctx.schedule)?;
    let e = &ctx.cfg.eval;
    let stage = ctx.cfg.match_stage();
    let sweep = timestep_sweep(&ex, &pairs, &e.pck_timesteps, stage, e.alpha, e.noise_seed, 1, true)?;
    run.write_csv("pck_sweep.csv", &sweep)?;

    let mut evaluated: Vec<(String, usize, usize, PckTally)> = Vec::new();
    let mut eval = |model: &str, t: usize, req: ExtractionRequest| -> Result<()> {
        let n = req.ensemble_n;
        let stacks = stacks_for_pairs(&ex, &req.with_stages(vec![stage]), &pairs)?;
        evaluated.push((model.to_string(), t, n, evaluate_pck(&pairs.pairs, &stacks, stage, e.alpha)?));
        Ok(())
    };
    eval("student", 0, ExtractionRequest::student())?;
    eval("noisy_teacher", e.baseline_t, ExtractionRequest::noisy(e.baseline_t, e.noise_seed))?;
    if e.ensemble_n > 1 {
        eval(
            "noisy_teacher_ensemble",
            e.baseline_t,
            ExtractionRequest::noisy(e.baseline_t, e.noise_seed).with_ensemble(e.ensemble_n),
        )?;
    }
    let summary: Vec<PckSummaryRow> = evaluated
        .iter()
        .map(|(model, t, n, tally)| PckSummaryRow {
            model: model.clone(),
            t: *t,
            ensemble_n: *n,
            stage,
            pck_img: tally.pck(PckMode::Img),
            pck_bbox: tally.pck(PckMode::Bbox),
            n_keypoints: tally.n_keypoints,
        })
        .collect();
    run.write_csv("pck_summary.csv", &summary)?;
    let mut per_cat = Vec::new();
    for (model, t, _, tally) in &evaluated {
        for (cat, (n, _, _)) in &tally.per_category {
            per_cat.push(PckCategoryRow {
                model: model.clone(),
                t: *t,
                category: *cat,
                category_name: CATEGORY_NAMES.get(*cat as usize).unwrap_or(&"unknown").to_string(),
                pck_img: tally.category_pck(*cat, PckMode::Img).unwrap_or(0.0),
                pck_bbox: tally.category_pck(*cat, PckMode::Bbox).unwrap_or(0.0),
                n_keypoints: *n,
            });
        }
    }
    run.write_csv("pck_per_category.csv", &per_cat)
}

pub fn eval_probe(ctx: &Ctx, run: &mut RunDir, kind: ProbeKind) -> Result<()> {
    let teacher = ctx.teacher(run)?;
    let student = ctx.student(run)?;
    let heads = ctx.heads(run, false)?;
    let train = ctx.split(Split::ProbeTrain, run)?;
    let test = ctx.split(Split::ProbeTest, run)?;
    let ex = FeatureExtractor::new(&teacher, Some(&student), &ctx.schedule)?;
    let e = &ctx.cfg.eval;
    let sweep = ProbeSweep {
        extractor: &ex,
        heads: heads.as_ref(),
        train: &train,
        test: &test,
        probe: ctx.cfg.probe(),
        seed: e.noise_seed,
    };
    let task = match kind {
        ProbeKind::Depth => SweepTask::Probe(ProbeTask::depth()),
        ProbeKind::Seg => SweepTask::Probe(ProbeTask::segmentation()),
        ProbeKind::Knn => SweepTask::Knn { k: e.knn_k },
    };
    let maps = ctx.cfg.feature_maps();
    let mut sources = vec![FeatureSource::NoisyTeacher, FeatureSource::Student];
    if heads.is_some() {
        sources.push(FeatureSource::ProjectedStudent);
    } else {
        log::warn!("no heads checkpoint; skipping projected_student rows");
    }
    let mut rows = Vec::new();
    for source in sources {
        rows.extend(sweep.run(source, &task, &e.probe_timesteps, &maps)?);
    }
    run.write_csv(&format!("probe_{}_sweep.csv", kind.name()), &rows)?;
    if let SweepTask::Probe(p) = task {
        let result = sweep.transfer_table(p, e.transfer_t, ctx.cfg.match_stage())?;
        run.write_csv(&format!("probe_{}_transfer.csv", kind.name()), &result.rows)?;
        for (who, probe) in [("teacher", &result.teacher_probe), ("student", &result.student_probe)] {
            let name = format!("probe_{}_{who}.ckpt", kind.name());
            probe.save(run.file(&name))?;
            run.record_output(&name);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalysisMeta {
    granularity: cleandift_core::analysis::Granularity,
    centering: cleandift_core::analysis::Centering,
    stages: Vec<usize>,
    n_images: usize,
    spearman_fraction_noise_t: Option<f64>,
}

pub fn analyze_noise(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let teacher = ctx.teacher(run)?;
    let images = ctx.split(Split::Analysis, run)?.images_tensor()?;
    let dcfg = ctx.cfg.decomposition()?;
    let report = noise_decomposition_sweep(&teacher, &ctx.schedule, &images, &dcfg)?;
    run.write_csv("variance.csv", &report.rows)?;
    let meta = AnalysisMeta {
        granularity: report.granularity,
        centering: report.centering,
        stages: report.stages.clone(),
        n_images: images.dim(0)?,
        spearman_fraction_noise_t: spearman(&report.timesteps(), &report.fraction_noise()).ok(),
    };
    std::fs::write(run.file("variance_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    run.record_output("variance_meta.json");
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub metric: String,
    pub use_heads: bool,
    pub conditioning: String,
    pub gating: String,
    pub pretraining: String,
    pub steps: usize,
    pub final_loss: f64,
    pub pck_img: f64,
    pub pck_bbox: f64,
    pub n_keypoints: usize,
    /// 1 = best PCK_bbox within the group.
    pub rank: usize,
}

/// The objective × heads grid and the head-architecture grid.
pub fn ablation_cells(base: &cleandift_core::AlignmentConfig) -> Vec<(&'static str, cleandift_core::AlignmentConfig)> {
    let mut cells = Vec::new();
    for &metric in Metric::ALL {
        for use_heads in [true, false] {
            cells.push((
                "objective",
                cleandift_core::AlignmentConfig {
                    metric,
                    use_heads,
                    head_conditioning: Conditioning::Film,
                    head_gating: Gating::SwiGlu,
                    head_pretraining: HeadPretraining::None,
                    ..base.clone()
                },
            ));
        }
    }
    for &conditioning in Conditioning::ALL {
        for &gating in Gating::ALL {
            for pretraining in [HeadPretraining::Joint, HeadPretraining::FrozenAfterPretrain] {
                cells.push((
                    "head",
                    cleandift_core::AlignmentConfig {
                        metric: Metric::Cosine,
                        use_heads: true,
                        head_conditioning: conditioning,
                        head_gating: gating,
                        head_pretraining: pretraining,
                        ..base.clone()
                    },
                ));
            }
        }
    }
    cells
}

pub fn ablate(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let teacher = ctx.teacher(run)?;
    let images = ctx.distill_images(run)?;
    let pairs = ctx.split(Split::Pairs, run)?;
    let base = ctx.cfg.alignment(ctx.cfg.distill.ablation_steps)?;
    let stage = ctx.cfg.match_stage();
    let mut rows = Vec::new();
    for (group, acfg) in ablation_cells(&base) {
        let start = Instant::now();
        let out = consolidate(&teacher, &images, &ctx.schedule, &acfg, ctx.cfg.seed)?;
        let ex = FeatureExtractor::new(&teacher, Some(&out.student), &ctx.schedule)?;
        let stacks = stacks_for_pairs(&ex, &ExtractionRequest::student().with_stages(vec![stage]), &pairs)?;
        let tally = evaluate_pck(&pairs.pairs, &stacks, stage, ctx.cfg.eval.alpha)?;
        log::info!(
            "ablation {group} {} heads={} {} {} {}: {:.1}s",
            acfg.metric,
            acfg.use_heads,
            acfg.head_conditioning,
            acfg.head_gating,
            acfg.head_pretraining,
            start.elapsed().as_secs_f64()
        );
        rows.push(AblationRow {
            group: group.into(),
            metric: acfg.metric.to_string(),
            use_heads: acfg.use_heads,
            conditioning: acfg.head_conditioning.to_string(),
            gating: acfg.head_gating.to_string(),
            pretraining: acfg.head_pretraining.to_string(),
            steps: acfg.steps,
            final_loss: out.log.steps.last().map_or(f64::NAN, |s| s.loss),
            pck_img: tally.pck(PckMode::Img),
            pck_bbox: tally.pck(PckMode::Bbox),
            n_keypoints: tally.n_keypoints,
            rank: 0,
        });
    }
    rank_within_groups(&mut rows);
    run.write_csv("ablation.csv", &rows)
}

/// Dense ranks by PCK_bbox then PCK_img, descending, ties by row order.
fn rank_within_groups(rows: &mut [AblationRow]) {
    let groups: Vec<String> = rows.iter().map(|r| r.group.clone()).collect();
    for g in groups.iter().collect::<std::collections::BTreeSet<_>>() {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|i| &rows[*i].group == g).collect();
        idx.sort_by(|a, b| {
            rows[*b]
                .pck_bbox
                .total_cmp(&rows[*a].pck_bbox)
                .then(rows[*b].pck_img.total_cmp(&rows[*a].pck_img))
                .then(a.cmp(b))
        });
        for (r, i) in idx.into_iter().enumerate() {
            rows[i].rank = r + 1;
        }
    }
}

/// Teacher training data only; used by tests that need a fresh denoiser.
pub fn untrained_teacher(ctx: &Ctx) -> Result<DenoiserParams> {
    Ok(init_denoiser(&ctx.cfg.backbone_config(), ctx.cfg.seed)?.freeze())
}

/// Everything, in dependency order, in one run directory.
pub fn pipeline(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    gen_data(ctx, run)?;
    train_teacher(ctx, run)?;
    distill(ctx, run)?;
    eval_pck(ctx, run)?;
    for kind in [ProbeKind::Depth, ProbeKind::Seg, ProbeKind::Knn] {
        eval_probe(ctx, run, kind)?;
    }
    analyze_noise(ctx, run)?;
    if ctx.cfg.eval.pipeline_ablation {
        ablate(ctx, run)?;
    }
    crate::plot::plot_run(&run.path);
    Ok(())
}
