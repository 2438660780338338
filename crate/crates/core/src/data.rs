//! Procedural scenes with exact ground truth, annotated pairs, and folder
//! ingestion.
//!
//! A scene is a textured background with 2-4 flat shapes at distinct depths.
//! Each shape carries a brightness ramp along its local x axis so that its
//! landmarks are distinguishable after rotation. Pixel `(i, j)` covers
//! `[j, j + 1) x [i, i + 1)` in continuous coordinates and is shaded by the
//! geometry at its center. Images are quantized to 8 bits at generation time
//! so that in-memory samples and PNG files agree exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::correspondence::{CorrespondenceAnnotation, KeypointPair};
use crate::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const NUM_CLASSES: usize = 5;
pub const CATEGORY_NAMES: [&str; NUM_CLASSES] = ["background", "disk", "square", "triangle", "ring"];
pub const DEPTH_MIN: f32 = 1.0;
pub const DEPTH_MAX: f32 = 10.0;
pub const NUM_TEXTURES: u8 = 4;
const MAX_PLACEMENT_ATTEMPTS: usize = 64;
/// Smallest visible share of an object's own area accepted during placement.
const MIN_VISIBLE_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring];

    pub fn class_id(self) -> u8 {
        match self {
            Shape::Disk => 1,
            Shape::Square => 2,
            Shape::Triangle => 3,
            Shape::Ring => 4,
        }
    }

    pub fn from_class_id(id: u8) -> Option<Self> {
        Self::ALL.get((id as usize).wrapping_sub(1)).copied()
    }

    /// Membership in object-local coordinates (unit size, no rotation).
    pub fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk => x * x + y * y <= 1.0,
            Shape::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            Shape::Triangle => {
                let v = triangle_vertices();
                (0..3).all(|i| {
                    let (a, b) = (v[i], v[(i + 1) % 3]);
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
                })
            }
            Shape::Ring => {
                let r2 = x * x + y * y;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
        }
    }

    /// Named landmarks in object-local coordinates.
    pub fn landmarks(self) -> Vec<(&'static str, f64, f64)> {
        match self {
            Shape::Disk => vec![("center", 0.0, 0.0), ("bright", 0.6, 0.0), ("dark", -0.6, 0.0)],
            Shape::Square => vec![
                ("center", 0.0, 0.0),
                ("corner_a", 0.6, 0.6),
                ("corner_b", -0.6, 0.6),
                ("corner_c", -0.6, -0.6),
                ("corner_d", 0.6, -0.6),
            ],
            Shape::Triangle => {
                let v = triangle_vertices();
                vec![
                    ("center", 0.0, 0.0),
                    ("apex_a", 0.5 * v[0].0, 0.5 * v[0].1),
                    ("apex_b", 0.5 * v[1].0, 0.5 * v[1].1),
                    ("apex_c", 0.5 * v[2].0, 0.5 * v[2].1),
                ]
            }
            Shape::Ring => vec![
                ("band_e", 0.775, 0.0),
                ("band_w", -0.775, 0.0),
                ("band_s", 0.0, 0.775),
                ("band_n", 0.0, -0.775),
            ],
        }
    }
}

/// Unit-circumradius triangle, counter-clockwise in image coordinates.
fn triangle_vertices() -> [(f64, f64); 3] {
    let angle = |deg: f64| {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    };
    [angle(-90.0), angle(150.0), angle(30.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub size: f64,
    /// Radians, counter-clockwise on screen.
    pub orientation: f64,
    pub color: [f32; 3],
    pub depth: f32,
}

impl ObjectSpec {
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.orientation.sin_cos();
        ((c * dx + s * dy) / self.size, (-s * dx + c * dy) / self.size)
    }

    fn to_pixel(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.orientation.sin_cos();
        let (x, y) = (lx * self.size, ly * self.size);
        (self.cx + c * x - s * y, self.cy + s * x + c * y)
    }

    fn inside_canvas(&self, canvas: usize) -> bool {
        let r = self.size;
        let max = canvas as f64;
        self.cx - r >= 0.0 && self.cy - r >= 0.0 && self.cx + r <= max && self.cy + r <= max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: usize,
    pub objects: Vec<ObjectSpec>,
    pub background_texture: u8,
    pub background_color: [f32; 3],
}

impl SceneSpec {
    /// Random inventory of 2-4 objects. Placement is retried until every
    /// object is inside the canvas and keeps a visible share of its area.
    pub fn random(seed: u64, canvas: usize) -> Result<Self> {
        if canvas < 8 {
            return Err(Error::Data(format!("canvas {canvas} too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=4usize);
        let texture = rng.random_range(0..NUM_TEXTURES);
        let background_color = [0.2 + 0.3 * rng.random::<f32>(), 0.2 + 0.3 * rng.random::<f32>(), 0.2 + 0.3 * rng.random::<f32>()];
        let s = canvas as f64;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            // Distinct depth planes: shuffle evenly spaced slots.
            let mut slots: Vec<usize> = (0..8).collect();
            for i in (1..slots.len()).rev() {
                slots.swap(i, rng.random_range(0..=i));
            }
            let objects: Vec<ObjectSpec> = (0..n)
                .map(|i| {
                    let size = s * rng.random_range(0.14..0.24);
                    ObjectSpec {
                        shape: Shape::ALL[rng.random_range(0..4)],
                        cx: rng.random_range(size..s - size),
                        cy: rng.random_range(size..s - size),
                        size,
                        orientation: rng.random_range(0.0..std::f64::consts::TAU),
                        color: random_color(&mut rng),
                        depth: 1.5 + 0.5 * slots[i] as f32,
                    }
                })
                .collect();
            let spec = SceneSpec {
                seed,
                canvas,
                objects,
                background_texture: texture,
                background_color,
            };
            if spec.placement_ok() {
                return Ok(spec);
            }
        }
        Err(Error::Data(format!(
            "no feasible placement for seed {seed} after {MAX_PLACEMENT_ATTEMPTS} attempts"
        )))
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.iter().any(|o| !o.inside_canvas(self.canvas) || o.size <= 0.0) {
            return Err(Error::Data("object extends outside the canvas".into()));
        }
        let mut depths: Vec<f32> = self.objects.iter().map(|o| o.depth).collect();
        depths.sort_by(f32::total_cmp);
        if depths.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("object depth planes must be distinct".into()));
        }
        if depths.iter().any(|d| !(DEPTH_MIN..DEPTH_MAX).contains(d)) {
            return Err(Error::Data("object depth outside the scene range".into()));
        }
        Ok(())
    }

    fn placement_ok(&self) -> bool {
        if self.validate().is_err() {
            return false;
        }
        let instances = self.instance_map();
        self.objects.iter().enumerate().all(|(k, o)| {
            let own = self.object_area(o);
            let visible = instances.iter().filter(|v| **v == k as i16).count();
            own > 0 && visible as f64 >= MIN_VISIBLE_FRACTION * own as f64
        })
    }

    fn object_area(&self, o: &ObjectSpec) -> usize {
        let n = self.canvas;
        (0..n * n)
            .filter(|p| {
                let (lx, ly) = o.to_local((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
                o.shape.contains(lx, ly)
            })
            .count()
    }

    /// Index of the visible object per pixel, `-1` for background.
    pub fn instance_map(&self) -> Vec<i16> {
        let n = self.canvas;
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by(|a, b| self.objects[*b].depth.total_cmp(&self.objects[*a].depth));
        let mut map = vec![-1i16; n * n];
        for k in order {
            let o = &self.objects[k];
            for (p, slot) in map.iter_mut().enumerate() {
                let (lx, ly) = o.to_local((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
                if o.shape.contains(lx, ly) {
                    *slot = k as i16;
                }
            }
        }
        map
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // One saturated channel so objects stand out from the muted background.
    let mut c = [0.1 + 0.3 * rng.random::<f32>(), 0.1 + 0.3 * rng.random::<f32>(), 0.1 + 0.3 * rng.random::<f32>()];
    c[rng.random_range(0..3)] = 0.75 + 0.25 * rng.random::<f32>();
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: u8,
    /// `(x, y, w, h)` of the visible pixels.
    pub bbox: [f64; 4],
    /// Visible landmarks only.
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub size: usize,
    /// Channel-major RGB in `[-1, 1]`, 8-bit quantized.
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub depth: Vec<f32>,
    pub class_label: u8,
    pub objects: Vec<ObjectAnnotation>,
}

impl SceneSample {
    pub fn image_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.image.clone(), (3, self.size, self.size), &Device::Cpu)?)
    }

    pub fn rgb8(&self) -> Vec<u8> {
        let plane = self.size * self.size;
        (0..plane)
            .flat_map(|p| (0..3).map(move |c| (c, p)))
            .map(|(c, p)| to_u8(self.image[c * plane + p]))
            .collect()
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn background(spec: &SceneSpec, x: f64, y: f64) -> [f32; 3] {
    let s = spec.canvas as f64;
    let (u, v) = (x / s, y / s);
    let period = (s / 4.0).max(2.0);
    let m = match spec.background_texture {
        0 => 0.8 + 0.4 * v,
        1 => {
            if ((y / period).floor() as i64) % 2 == 0 {
                0.85
            } else {
                1.15
            }
        }
        2 => {
            if ((x / period).floor() as i64 + (y / period).floor() as i64) % 2 == 0 {
                0.85
            } else {
                1.15
            }
        }
        _ => 0.8 + 0.2 * (u + v),
    } as f32;
    spec.background_color.map(|c| c * m)
}

fn background_depth(spec: &SceneSpec, y: f64) -> f32 {
    // Receding floor: far at the top, nearer at the bottom.
    DEPTH_MAX - 3.0 * (y / spec.canvas as f64) as f32
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let n = spec.canvas;
    let plane = n * n;
    let instances = spec.instance_map();
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![BACKGROUND; plane];
    let mut depth = vec![0f32; plane];
    for p in 0..plane {
        let (x, y) = ((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
        let (rgb, d, class) = match instances[p] {
            k if k >= 0 => {
                let o = &spec.objects[k as usize];
                let (lx, _) = o.to_local(x, y);
                let shade = (0.75 + 0.25 * lx) as f32;
                (o.color.map(|c| c * shade), o.depth, o.shape.class_id())
            }
            _ => (background(spec, x, y), background_depth(spec, y), BACKGROUND),
        };
        for c in 0..3 {
            image[c * plane + p] = from_u8(quantize(rgb[c]));
        }
        depth[p] = d;
        mask[p] = class;
    }
    let objects = spec
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| annotate_object(spec, &instances, k, o))
        .collect();
    let class_label = dominant_class(&mask);
    Ok(SceneSample {
        size: n,
        image,
        mask,
        depth,
        class_label,
        objects,
    })
}

fn annotate_object(spec: &SceneSpec, instances: &[i16], k: usize, o: &ObjectSpec) -> ObjectAnnotation {
    let n = spec.canvas;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (p, v) in instances.iter().enumerate() {
        if *v == k as i16 {
            let (x, y) = (p % n, p / n);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    let bbox = if x0 == usize::MAX {
        [0.0; 4]
    } else {
        [x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64]
    };
    let keypoints = o
        .shape
        .landmarks()
        .into_iter()
        .map(|(name, lx, ly)| {
            let (x, y) = o.to_pixel(lx, ly);
            Keypoint {
                name: name.to_string(),
                x,
                y,
            }
        })
        .filter(|kp| visible_at(instances, n, kp.x, kp.y) == Some(k))
        .collect();
    ObjectAnnotation {
        category: o.shape.class_id(),
        bbox,
        keypoints,
    }
}

fn visible_at(instances: &[i16], n: usize, x: f64, y: f64) -> Option<usize> {
    if !(x >= 0.0 && y >= 0.0 && x < n as f64 && y < n as f64) {
        return None;
    }
    let v = instances[(y.floor() as usize) * n + x.floor() as usize];
    (v >= 0).then_some(v as usize)
}

/// Most frequent non-background class; ties go to the lowest id.
fn dominant_class(mask: &[u8]) -> u8 {
    let mut counts = [0usize; NUM_CLASSES];
    for &m in mask {
        counts[m as usize] += 1;
    }
    (1..NUM_CLASSES as u8).fold(1, |best, c| if counts[c as usize] > counts[best as usize] { c } else { best })
}

/// Similarity transform about the canvas center plus photometric jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTransform {
    pub scale: f64,
    /// Radians.
    pub rotation: f64,
    pub dx: f64,
    pub dy: f64,
    pub brightness: f32,
    pub contrast: f32,
}

impl PairTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            dx: 0.0,
            dy: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, canvas: usize) -> Self {
        let shift = 0.1 * canvas as f64;
        Self {
            scale: rng.random_range(0.85..1.15),
            rotation: rng.random_range(-0.5..0.5),
            dx: rng.random_range(-shift..shift),
            dy: rng.random_range(-shift..shift),
            brightness: rng.random_range(-0.08..0.08),
            contrast: rng.random_range(0.85..1.15),
        }
    }

    pub fn apply(&self, canvas: usize, x: f64, y: f64) -> (f64, f64) {
        let c = canvas as f64 / 2.0;
        let (s, co) = self.rotation.sin_cos();
        let (px, py) = (x - c, y - c);
        (
            c + self.scale * (co * px - s * py) + self.dx,
            c + self.scale * (s * px + co * py) + self.dy,
        )
    }

    pub fn apply_to(&self, spec: &SceneSpec) -> SceneSpec {
        let objects = spec
            .objects
            .iter()
            .map(|o| {
                let (cx, cy) = self.apply(spec.canvas, o.cx, o.cy);
                ObjectSpec {
                    cx,
                    cy,
                    size: o.size * self.scale,
                    orientation: o.orientation + self.rotation,
                    color: o.color.map(|c| self.contrast * (c - 0.5) + 0.5 + self.brightness),
                    ..o.clone()
                }
            })
            .collect();
        SceneSpec {
            objects,
            background_color: spec.background_color.map(|c| self.contrast * (c - 0.5) + 0.5 + self.brightness),
            ..spec.clone()
        }
    }
}

/// Renders the source scene and its transformed copy. One annotation per
/// object, holding landmarks visible in both images; target keypoints are
/// the transformed source keypoints.
pub fn make_pair(
    spec: &SceneSpec,
    transform: &PairTransform,
    source_id: &str,
    target_id: &str,
) -> Result<(SceneSample, SceneSample, Vec<CorrespondenceAnnotation>)> {
    let target_spec = transform.apply_to(spec);
    if target_spec.objects.iter().any(|o| !o.inside_canvas(spec.canvas)) {
        return Err(Error::Data("transform moves an object outside the canvas".into()));
    }
    let source = generate_scene(spec)?;
    let target = generate_scene(&target_spec)?;
    let n = spec.canvas;
    let src_inst = spec.instance_map();
    let tgt_inst = target_spec.instance_map();
    let mut annotations = Vec::new();
    for (k, o) in spec.objects.iter().enumerate() {
        let mut keypoints = Vec::new();
        for (_, lx, ly) in o.shape.landmarks() {
            let (sx, sy) = o.to_pixel(lx, ly);
            let (tx, ty) = transform.apply(n, sx, sy);
            if !(tx >= 0.0 && ty >= 0.0 && tx < n as f64 && ty < n as f64) {
                return Err(Error::Data("transformed keypoint leaves the canvas".into()));
            }
            if visible_at(&src_inst, n, sx, sy) == Some(k) && visible_at(&tgt_inst, n, tx, ty) == Some(k) {
                keypoints.push(KeypointPair {
                    source: [sx, sy],
                    target: [tx, ty],
                });
            }
        }
        let bbox = target.objects[k].bbox;
        if keypoints.is_empty() || bbox[2] <= 0.0 || bbox[3] <= 0.0 {
            continue;
        }
        annotations.push(CorrespondenceAnnotation {
            source: source_id.to_string(),
            target: target_id.to_string(),
            category: o.shape.class_id(),
            image_size: [n, n],
            keypoints,
            target_bbox: bbox,
        });
    }
    Ok((source, target, annotations))
}

/// Deterministic per-item seed derivation (splitmix64).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A split on disk or in memory: scenes keyed by id, plus pair annotations.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub image_size: usize,
    pub scenes: Vec<(String, SceneSample)>,
    pub pairs: Vec<CorrespondenceAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    image: String,
    mask: String,
    depth: String,
    class_label: u8,
    objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    image_size: usize,
    num_classes: usize,
    categories: Vec<String>,
    scenes: Vec<SceneRecord>,
    pairs: Vec<CorrespondenceAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthSidecar {
    shape: [usize; 2],
    dtype: String,
}

impl Dataset {
    /// `count` independent scenes.
    pub fn scenes(count: usize, image_size: usize, seed: u64, prefix: &str) -> Result<Self> {
        let scenes = (0..count)
            .map(|i| {
                let spec = SceneSpec::random(derive_seed(seed, 1, i as u64), image_size)?;
                Ok((format!("{prefix}{i:05}"), generate_scene(&spec)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_size,
            scenes,
            pairs: Vec::new(),
        })
    }

    /// `count` source/target pairs; transforms are redrawn (bounded) until
    /// every object and keypoint stays inside the canvas.
    pub fn pairs(count: usize, image_size: usize, seed: u64) -> Result<Self> {
        let mut ds = Self {
            image_size,
            ..Self::default()
        };
        for i in 0..count {
            let item_seed = derive_seed(seed, 2, i as u64);
            let spec = SceneSpec::random(item_seed, image_size)?;
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed ^ 0x5eed);
            let (src_id, tgt_id) = (format!("pair{i:05}_a"), format!("pair{i:05}_b"));
            let mut made = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let tf = PairTransform::random(&mut rng, image_size);
                if let Ok(out) = make_pair(&spec, &tf, &src_id, &tgt_id) {
                    made = Some(out);
                    break;
                }
            }
            let (src, tgt, ann) = made.ok_or_else(|| Error::Data(format!("no admissible transform for pair {i}")))?;
            ds.scenes.push((src_id, src));
            ds.scenes.push((tgt_id, tgt));
            ds.pairs.extend(ann);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, id: &str) -> Result<&SceneSample> {
        self.scenes
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Data(format!("unknown scene `{id}`")))
    }

    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.scenes.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect()
    }

    /// All images as one `(N, 3, S, S)` tensor.
    pub fn images_tensor(&self) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(self.scenes.len() * 3 * s * s);
        for (_, sc) in &self.scenes {
            data.extend_from_slice(&sc.image);
        }
        Ok(Tensor::from_vec(data, (self.scenes.len(), 3, s, s), &Device::Cpu)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks", "depth"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let n = self.image_size as u32;
        let mut records = Vec::with_capacity(self.scenes.len());
        for (id, sc) in &self.scenes {
            let image = format!("images/{id}.png");
            let mask = format!("masks/{id}.png");
            let depth = format!("depth/{id}.npybin");
            write_png(&dir.join(&image), image::RgbImage::from_raw(n, n, sc.rgb8()).expect("sized buffer"))?;
            write_png(&dir.join(&mask), image::GrayImage::from_raw(n, n, sc.mask.clone()).expect("sized buffer"))?;
            let bytes: Vec<u8> = sc.depth.iter().flat_map(|v| v.to_le_bytes()).collect();
            atomic_write(&dir.join(&depth), &bytes)?;
            let sidecar = DepthSidecar {
                shape: [sc.size, sc.size],
                dtype: "<f4".into(),
            };
            atomic_write(&dir.join(format!("depth/{id}.json")), &serde_json::to_vec(&sidecar)?)?;
            records.push(SceneRecord {
                id: id.clone(),
                image,
                mask,
                depth,
                class_label: sc.class_label,
                objects: sc.objects.clone(),
            });
        }
        let file = AnnotationFile {
            image_size: self.image_size,
            num_classes: NUM_CLASSES,
            categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
            scenes: records,
            pairs: self.pairs.clone(),
        };
        atomic_write(&dir.join("annotations.json"), &serde_json::to_vec_pretty(&file)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let ann_path = dir.join("annotations.json");
        let text = fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let file: AnnotationFile = serde_json::from_slice(&text)?;
        let s = file.image_size;
        let mut scenes = Vec::with_capacity(file.scenes.len());
        for r in file.scenes {
            let img = image::open(dir.join(&r.image))?.to_rgb8();
            let mask = image::open(dir.join(&r.mask))?.to_luma8();
            if img.dimensions() != (s as u32, s as u32) || mask.dimensions() != (s as u32, s as u32) {
                return Err(Error::Data(format!("scene `{}` has the wrong size", r.id)));
            }
            let plane = s * s;
            let raw = img.into_raw();
            let mut image = vec![0f32; 3 * plane];
            for p in 0..plane {
                for c in 0..3 {
                    image[c * plane + p] = from_u8(raw[p * 3 + c]);
                }
            }
            let dpath = dir.join(&r.depth);
            let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
            if bytes.len() != plane * 4 {
                return Err(Error::Data(format!("depth file for `{}` has {} bytes", r.id, bytes.len())));
            }
            let depth = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            scenes.push((
                r.id,
                SceneSample {
                    size: s,
                    image,
                    mask: mask.into_raw(),
                    depth,
                    class_label: r.class_label,
                    objects: r.objects,
                },
            ));
        }
        Ok(Self {
            image_size: s,
            scenes,
            pairs: file.pairs,
        })
    }
}

fn write_png<P, C>(path: &Path, img: image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    atomic_write(path, buf.get_ref())
}

/// Loads every decodable image in `dir` (sorted by file name), center-crops
/// to a square, resizes to `target_size`, and returns `(N, 3, S, S)` in `[-1, 1]`.
pub fn ingest_folder(dir: &Path, target_size: usize) -> Result<Tensor> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut data = Vec::new();
    let mut count = 0;
    for path in entries {
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let img = crop_resize(&img, target_size as u32);
        let plane = target_size * target_size;
        let raw = img.into_raw();
        let mut chw = vec![0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                chw[c * plane + p] = from_u8(raw[p * 3 + c]);
            }
        }
        data.extend(chw);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(format!("no decodable images in {}", dir.display())));
    }
    Ok(Tensor::from_vec(data, (count, 3, target_size, target_size), &Device::Cpu)?)
}

/// Center crop box `(x, y, side)` of a `w x h` image.
pub fn center_crop_box(w: u32, h: u32) -> (u32, u32, u32) {
    let side = w.min(h);
    ((w - side) / 2, (h - side) / 2, side)
}

fn crop_resize(img: &image::RgbImage, size: u32) -> image::RgbImage {
    let (x, y, side) = center_crop_box(img.width(), img.height());
    let cropped = image::imageops::crop_imm(img, x, y, side, side).to_image();
    if side == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size, size, image::imageops::FilterType::Triangle)
    }
}
