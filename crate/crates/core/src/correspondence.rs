//! Zero-shot keypoint transfer by nearest-neighbour feature matching and
//! PCK scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::features::{sample_at_point, ExtractionRequest, FeatureExtractor};
use crate::stack::{FeatureMap, FeatureStack};
use crate::{BackboneConfig, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    /// `(x, y)` in source pixels.
    pub source: [f64; 2],
    /// `(x, y)` in target pixels.
    pub target: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceAnnotation {
    pub source: String,
    pub target: String,
    pub category: u8,
    /// `(width, height)` of both images.
    pub image_size: [usize; 2],
    pub keypoints: Vec<KeypointPair>,
    /// `(x, y, w, h)` in target pixels.
    pub target_bbox: [f64; 4],
}

impl CorrespondenceAnnotation {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        let inside = |p: &[f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w as f64 && p[1] <= h as f64;
        if self.keypoints.iter().any(|k| !inside(&k.source) || !inside(&k.target)) {
            return Err(Error::Data("keypoint outside its image".into()));
        }
        if self.target_bbox[2] <= 0.0 || self.target_bbox[3] <= 0.0 {
            return Err(Error::Data("bounding box must have positive size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckMode {
    Img,
    Bbox,
}

/// Cosine between two vectors, 0 when either has a norm below 1e-8.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na < 1e-16 || nb < 1e-16 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Grid cell of the target map with the highest cosine similarity to
/// `source`; ties go to the lowest row-major index.
pub fn best_cell(source: &[f32], target: &FeatureMap) -> Result<(usize, usize)> {
    if source.len() != target.channels {
        return Err(Error::Shape(format!(
            "source vector has {} channels, map has {}",
            source.len(),
            target.channels
        )));
    }
    if source.iter().any(|v| !v.is_finite()) || !target.is_finite() {
        return Err(Error::Invalid("non-finite features".into()));
    }
    let rows = target.position_major();
    let c = target.channels;
    let mut best = (0usize, f64::NEG_INFINITY);
    for p in 0..target.positions() {
        let s = cosine(source, &rows[p * c..(p + 1) * c]);
        if s > best.1 {
            best = (p, s);
        }
    }
    Ok((best.0 / target.width, best.0 % target.width))
}

/// Predicted target pixel `(x, y)`: the center of the best cell, scaled to
/// an image of `image_size = (width, height)`.
pub fn match_keypoint(source: &[f32], target: &FeatureMap, image_size: [usize; 2]) -> Result<(f64, f64)> {
    let (r, c) = best_cell(source, target)?;
    let sx = image_size[0] as f64 / target.width as f64;
    let sy = image_size[1] as f64 / target.height as f64;
    Ok(((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub mode: PckMode,
    pub alpha: f64,
    pub threshold: f64,
    pub hits: Vec<bool>,
    pub pck: f64,
}

pub fn pck_threshold(annotation: &CorrespondenceAnnotation, alpha: f64, mode: PckMode) -> f64 {
    match mode {
        PckMode::Img => alpha * annotation.image_size[0].max(annotation.image_size[1]) as f64,
        PckMode::Bbox => alpha * annotation.target_bbox[2].max(annotation.target_bbox[3]),
    }
}

/// Hit iff the Euclidean distance to ground truth is at most the threshold.
pub fn compute_pck(predictions: &[(f64, f64)], annotation: &CorrespondenceAnnotation, alpha: f64, mode: PckMode) -> Result<PckResult> {
    if annotation.keypoints.is_empty() {
        return Err(Error::Invalid("annotation has no keypoints".into()));
    }
    if predictions.len() != annotation.keypoints.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} keypoints",
            predictions.len(),
            annotation.keypoints.len()
        )));
    }
    let threshold = pck_threshold(annotation, alpha, mode);
    let hits: Vec<bool> = predictions
        .iter()
        .zip(&annotation.keypoints)
        .map(|((x, y), kp)| ((x - kp.target[0]).powi(2) + (y - kp.target[1]).powi(2)).sqrt() <= threshold)
        .collect();
    let pck = hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64;
    Ok(PckResult {
        mode,
        alpha,
        threshold,
        hits,
        pck,
    })
}

/// Hit counts aggregated per keypoint over many annotations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PckTally {
    pub n_keypoints: usize,
    pub hits_img: usize,
    pub hits_bbox: usize,
    pub per_category: BTreeMap<u8, (usize, usize, usize)>,
}

impl PckTally {
    pub fn add(&mut self, category: u8, img: &PckResult, bbox: &PckResult) {
        let hi = img.hits.iter().filter(|h| **h).count();
        let hb = bbox.hits.iter().filter(|h| **h).count();
        let n = img.hits.len();
        self.n_keypoints += n;
        self.hits_img += hi;
        self.hits_bbox += hb;
        let e = self.per_category.entry(category).or_default();
        e.0 += n;
        e.1 += hi;
        e.2 += hb;
    }

    pub fn merge(&mut self, other: &PckTally) {
        self.n_keypoints += other.n_keypoints;
        self.hits_img += other.hits_img;
        self.hits_bbox += other.hits_bbox;
        for (k, v) in &other.per_category {
            let e = self.per_category.entry(*k).or_default();
            e.0 += v.0;
            e.1 += v.1;
            e.2 += v.2;
        }
    }

    pub fn pck(&self, mode: PckMode) -> f64 {
        if self.n_keypoints == 0 {
            return 0.0;
        }
        let hits = match mode {
            PckMode::Img => self.hits_img,
            PckMode::Bbox => self.hits_bbox,
        };
        hits as f64 / self.n_keypoints as f64
    }

    pub fn category_pck(&self, category: u8, mode: PckMode) -> Option<f64> {
        self.per_category.get(&category).map(|(n, hi, hb)| match mode {
            PckMode::Img => *hi as f64 / *n as f64,
            PckMode::Bbox => *hb as f64 / *n as f64,
        })
    }
}

/// Transfers every keypoint of every annotation with the given stacks (one
/// per scene id) at `stage_id` and tallies hits.
pub fn evaluate_pck(
    annotations: &[CorrespondenceAnnotation],
    stacks: &BTreeMap<String, FeatureStack>,
    stage_id: usize,
    alpha: f64,
) -> Result<PckTally> {
    let mut tally = PckTally::default();
    for ann in annotations {
        ann.validate()?;
        let lookup = |id: &str| stacks.get(id).ok_or_else(|| Error::Data(format!("no features for scene `{id}`")));
        let src = lookup(&ann.source)?.stage(stage_id)?;
        let tgt = lookup(&ann.target)?.stage(stage_id)?;
        let [w, h] = ann.image_size;
        let predictions = ann
            .keypoints
            .iter()
            .map(|kp| {
                let v = sample_at_point(src, kp.source[0] / w as f64, kp.source[1] / h as f64)?;
                match_keypoint(&v, tgt, ann.image_size)
            })
            .collect::<Result<Vec<_>>>()?;
        let img = compute_pck(&predictions, ann, alpha, PckMode::Img)?;
        let bbox = compute_pck(&predictions, ann, alpha, PckMode::Bbox)?;
        tally.add(ann.category, &img, &bbox);
    }
    Ok(tally)
}

/// Stacks for every scene referenced by the annotations, keyed by scene id.
pub fn stacks_for_pairs(ex: &FeatureExtractor<'_>, req: &ExtractionRequest, dataset: &Dataset) -> Result<BTreeMap<String, FeatureStack>> {
    let images = dataset.images_tensor()?;
    let stacks = ex.extract_many(req, &images)?;
    Ok(dataset.scenes.iter().map(|(id, _)| id.clone()).zip(stacks).collect())
}

/// First tap at the second-coarsest tapped resolution, or the last tap when
/// every tap shares one resolution.
pub fn default_match_stage(config: &BackboneConfig) -> usize {
    let sites = config.tap_sites();
    let coarsest = sites.iter().map(|s| s.resolution).min().unwrap_or(0);
    sites
        .iter()
        .filter(|s| s.resolution > coarsest)
        .min_by_key(|s| (s.resolution, s.stage_id))
        .or(sites.last())
        .map_or(0, |s| s.stage_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    pub t: usize,
    pub pck_img: f64,
    pub pck_bbox: f64,
    pub n_keypoints: usize,
}

/// Correspondence accuracy against noise level: noisy teacher and
/// clean-input teacher at every `t`, and the student (evaluated once,
/// repeated on every row).
#[allow(clippy::too_many_arguments)]
pub fn timestep_sweep(
    ex: &FeatureExtractor<'_>,
    dataset: &Dataset,
    timesteps: &[usize],
    stage_id: usize,
    alpha: f64,
    noise_seed: u64,
    ensemble_n: usize,
    include_student: bool,
) -> Result<Vec<SweepRow>> {
    if dataset.pairs.is_empty() || timesteps.is_empty() {
        return Err(Error::Invalid("sweep needs annotations and timesteps".into()));
    }
    let stage = vec![stage_id];
    let run = |req: ExtractionRequest| -> Result<PckTally> {
        let stacks = stacks_for_pairs(ex, &req.with_stages(stage.clone()), dataset)?;
        evaluate_pck(&dataset.pairs, &stacks, stage_id, alpha)
    };
    let student = if include_student {
        Some(run(ExtractionRequest::student())?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &t in timesteps {
        let noisy = run(ExtractionRequest::noisy(t, noise_seed).with_ensemble(ensemble_n))?;
        let clean = run(ExtractionRequest::clean_teacher(t))?;
        let mut push = |mode: &str, tally: &PckTally| {
            rows.push(SweepRow {
                mode: mode.to_string(),
                t,
                pck_img: tally.pck(PckMode::Img),
                pck_bbox: tally.pck(PckMode::Bbox),
                n_keypoints: tally.n_keypoints,
            })
        };
        push("noisy_teacher", &noisy);
        push("clean_teacher_control", &clean);
        if let Some(s) = &student {
            push("student", s);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::Provenance;

    fn ann(keypoints: Vec<([f64; 2], [f64; 2])>, size: usize, bbox: [f64; 4]) -> CorrespondenceAnnotation {
        CorrespondenceAnnotation {
            source: "a".into(),
            target: "b".into(),
            category: 1,
            image_size: [size, size],
            keypoints: keypoints.into_iter().map(|(s, t)| KeypointPair { source: s, target: t }).collect(),
            target_bbox: bbox,
        }
    }

    #[test]
    fn self_match_and_tie_break() {
        let m = FeatureMap::new(0, 2, 2, 2, vec![1.0, 0.0, -1.0, 0.5, 0.0, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(best_cell(&[0.0, 1.0], &m).unwrap(), (0, 1));
        assert_eq!(best_cell(&[-1.0, 0.0], &m).unwrap(), (1, 0));
        let flat = FeatureMap::new(0, 2, 2, 2, vec![1.0; 8]).unwrap();
        assert_eq!(best_cell(&[0.3, 0.3], &flat).unwrap(), (0, 0));
        assert_eq!(best_cell(&[0.0, 0.0], &m).unwrap(), (0, 0));
        // pixel center of cell (1, 0) on a 32 px image with a 2x2 map
        assert_eq!(match_keypoint(&[-1.0, 0.0], &m, [32, 32]).unwrap(), (8.0, 24.0));
    }

    #[test]
    fn match_stage_default() {
        assert_eq!(default_match_stage(&BackboneConfig::default()), 3);
        let one_res = BackboneConfig {
            image_size: 16,
            stage_multipliers: vec![1, 2],
            num_taps: 3,
            ..BackboneConfig::default()
        };
        assert_eq!(default_match_stage(&one_res), 2);
    }

    #[test]
    fn pck_thresholds() {
        let a = ann(
            vec![([0.0, 0.0], [50.0, 50.0]), ([0.0, 0.0], [50.0, 50.0]), ([0.0, 0.0], [50.0, 50.0])],
            100,
            [10.0, 10.0, 40.0, 20.0],
        );
        let preds = [(55.0, 50.0), (50.0, 60.0), (50.0, 35.0)];
        let r = compute_pck(&preds, &a, 0.1, PckMode::Img).unwrap();
        assert_eq!(r.hits, vec![true, true, false]);
        assert!((r.pck - 2.0 / 3.0).abs() < 1e-15);
        let b = compute_pck(&preds, &a, 0.1, PckMode::Bbox).unwrap();
        assert_eq!(b.threshold, 4.0);
        let exact: Vec<(f64, f64)> = a.keypoints.iter().map(|k| (k.target[0], k.target[1])).collect();
        assert_eq!(compute_pck(&exact, &a, 0.1, PckMode::Img).unwrap().pck, 1.0);
        assert_eq!(compute_pck(&exact, &a, 0.1, PckMode::Bbox).unwrap().pck, 1.0);
        assert!(compute_pck(&preds[..2], &a, 0.1, PckMode::Img).is_err());
        assert!(compute_pck(&[], &ann(vec![], 100, [0.0, 0.0, 1.0, 1.0]), 0.1, PckMode::Img).is_err());
    }

    #[test]
    fn per_point_aggregation() {
        let one = ann(vec![([0.0, 0.0], [10.0, 10.0])], 100, [0.0, 0.0, 50.0, 50.0]);
        let three = ann(vec![([0.0, 0.0], [10.0, 10.0]); 3], 100, [0.0, 0.0, 50.0, 50.0]);
        let mut tally = PckTally::default();
        let r1 = compute_pck(&[(10.0, 10.0)], &one, 0.1, PckMode::Img).unwrap();
        tally.add(1, &r1, &r1);
        let r3 = compute_pck(&[(90.0, 90.0); 3], &three, 0.1, PckMode::Img).unwrap();
        tally.add(2, &r3, &r3);
        assert_eq!(tally.pck(PckMode::Img), 0.25);
        assert_eq!(tally.category_pck(1, PckMode::Img), Some(1.0));
        assert_eq!(tally.category_pck(2, PckMode::Img), Some(0.0));
    }

    #[test]
    fn evaluate_identity_stacks() {
        // A map whose vectors are one-hot per cell matches every point to itself.
        let n = 4;
        let mut data = vec![0f32; n * n * n * n];
        for p in 0..n * n {
            data[p * n * n + p] = 1.0;
        }
        let m = FeatureMap::new(0, n * n, n, n, data).unwrap();
        let s = FeatureStack::new(vec![m], Provenance::clean(0)).unwrap();
        let stacks: BTreeMap<String, FeatureStack> = [("a".to_string(), s.clone()), ("b".to_string(), s)].into();
        let a = ann(vec![([2.0, 2.0], [2.0, 2.0]), ([13.0, 5.0], [13.0, 5.0])], 16, [0.0, 0.0, 16.0, 16.0]);
        let tally = evaluate_pck(&[a], &stacks, 0, 0.1).unwrap();
        assert_eq!(tally.pck(PckMode::Img), 1.0);
    }
}
