//! Synthetic hand-object interaction clips. Each class is defined only by
//! how the entities move relative to each other; colors, shapes and sizes
//! are drawn independently of the class. Also: ground-truth detection
//! records, a detection-noise injector, the on-disk dataset layout and the
//! certification checks (rule oracle, appearance permutation test).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::VideoClip;
use crate::config::canonical_hash;
use crate::detections::{BoundingBox, DetectionRecord, FrameRecord, RawDetection, Role};
use crate::error::{IrnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassKind {
    /// Right hand and object circle a static left object held by the left hand.
    Stir,
    /// Left hand holds a static object; right hand lifts its object upward.
    HoldAndLift,
    /// Right hand and object oscillate horizontally; optional static left object.
    ShakeRight,
    /// Both hands converge on one static object.
    BothApproach,
    /// Hands oscillate against each other; no objects.
    RubHands,
    /// Static right hand, optional static left hand; no objects.
    PointStatic,
}

impl ClassKind {
    pub const ALL: [ClassKind; 6] = [
        ClassKind::Stir,
        ClassKind::HoldAndLift,
        ClassKind::ShakeRight,
        ClassKind::BothApproach,
        ClassKind::RubHands,
        ClassKind::PointStatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassKind::Stir => "stir",
            ClassKind::HoldAndLift => "hold-and-lift",
            ClassKind::ShakeRight => "shake-right",
            ClassKind::BothApproach => "both-approach",
            ClassKind::RubHands => "rub-hands",
            ClassKind::PointStatic => "point-static",
        }
    }

    pub fn from_name(name: &str) -> Option<ClassKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// No objects take part.
    pub fn hands_only(self) -> bool {
        matches!(self, ClassKind::RubHands | ClassKind::PointStatic)
    }

    /// Classes that share a presence pattern with another class and are told
    /// apart only by where hands and objects are and how they move.
    pub fn position_defined(self) -> bool {
        matches!(
            self,
            ClassKind::Stir | ClassKind::HoldAndLift | ClassKind::ShakeRight | ClassKind::BothApproach
        )
    }

    /// Classes whose entities move during the clip.
    pub fn motion_defined(self) -> bool {
        self != ClassKind::PointStatic
    }
}

/// Catalog entry: class index and the motion generator behind it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MotionProgram {
    pub class_id: usize,
    pub kind: ClassKind,
}

pub fn default_catalog() -> Vec<MotionProgram> {
    ClassKind::ALL
        .iter()
        .enumerate()
        .map(|(class_id, &kind)| MotionProgram { class_id, kind })
        .collect()
}

/// Frame count and side length of rendered clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub frames: usize,
    pub size: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self { frames: 16, size: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// Sampled look of one entity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entity {
    pub role: Role,
    pub shape: Shape,
    pub color: [f64; 3],
    /// Half width and half height in pixels.
    pub half: (f64, f64),
}

/// Motion parameters of a generated clip (class dependent meaning:
/// angular rate in rad/frame for stir, speed in px/frame for lift,
/// cycles/frame for the oscillating classes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionParams {
    pub rate: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub clip_id: String,
    pub label: usize,
    pub kind: ClassKind,
    pub spec: RenderSpec,
    /// `[T, H, W, 3]` RGB bytes.
    pub frames: Vec<u8>,
    pub record: DetectionRecord,
    pub entities: Vec<Entity>,
    pub background: [f64; 3],
    /// Per-role pixel centers per frame, `None` for absent roles.
    pub paths: [Option<Vec<(f64, f64)>>; 4],
    pub motion: MotionParams,
}

impl SyntheticClip {
    pub fn video(&self) -> Result<VideoClip> {
        video_from_bytes(&self.clip_id, self.label, [self.spec.frames, self.spec.size, self.spec.size], &self.frames)
    }

    pub fn entity(&self, role: Role) -> Option<&Entity> {
        self.entities.iter().find(|e| e.role == role)
    }
}

pub fn video_from_bytes(clip_id: &str, label: usize, dims: [usize; 3], bytes: &[u8]) -> Result<VideoClip> {
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    VideoClip::new(clip_id, label, Tensor::from_vec(&[dims[0], dims[1], dims[2], 3], data)?)
}

type Path2 = Vec<(f64, f64)>;

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn constant(p: (f64, f64), n: usize) -> Path2 {
    vec![p; n]
}

fn offset(path: &Path2, d: (f64, f64)) -> Path2 {
    path.iter().map(|&(x, y)| (x + d.0, y + d.1)).collect()
}

/// Per-role centers (in pixels of a 64-pixel frame) and motion parameters.
fn sample_paths(kind: ClassKind, n: usize, rng: &mut ChaCha8Rng) -> ([Option<Path2>; 4], MotionParams) {
    let ts: Vec<f64> = (0..n).map(|t| t as f64).collect();
    let mut paths: [Option<Path2>; 4] = [None, None, None, None];
    let (hl, hr, ol, or) = (
        Role::HandLeft.index(),
        Role::HandRight.index(),
        Role::ObjectLeft.index(),
        Role::ObjectRight.index(),
    );
    let motion = match kind {
        ClassKind::Stir => {
            let c = (u(rng, 26.0, 38.0), u(rng, 26.0, 38.0));
            let r = u(rng, 10.0, 14.0);
            let rate = u(rng, 0.3, 0.5);
            let phase = u(rng, 0.0, 2.0 * PI);
            let orbit: Path2 = ts
                .iter()
                .map(|&t| (c.0 + r * (phase + rate * t).cos(), c.1 + r * (phase + rate * t).sin()))
                .collect();
            paths[ol] = Some(constant(c, n));
            paths[hl] = Some(constant((c.0 - 12.0, c.1 + 2.0), n));
            paths[hr] = Some(offset(&orbit, (4.0, -8.0)));
            paths[or] = Some(orbit);
            MotionParams { rate, amplitude: r }
        }
        ClassKind::HoldAndLift => {
            let h = (u(rng, 10.0, 20.0), u(rng, 28.0, 40.0));
            let start = (u(rng, 38.0, 50.0), u(rng, 46.0, 52.0));
            let speed = u(rng, 1.8, 2.4);
            let lift: Path2 = ts.iter().map(|&t| (start.0, start.1 - speed * t)).collect();
            paths[hl] = Some(constant(h, n));
            paths[ol] = Some(constant((h.0 + 8.0, h.1 + 4.0), n));
            paths[hr] = Some(offset(&lift, (0.0, 8.0)));
            paths[or] = Some(lift);
            MotionParams { rate: speed, amplitude: 0.0 }
        }
        ClassKind::ShakeRight => {
            let o = (u(rng, 36.0, 48.0), u(rng, 20.0, 44.0));
            let amp = u(rng, 5.0, 9.0);
            let freq = u(rng, 0.15, 0.3);
            let phase = u(rng, 0.0, 2.0 * PI);
            let shake: Path2 = ts
                .iter()
                .map(|&t| (o.0 + amp * (2.0 * PI * freq * t + phase).sin(), o.1))
                .collect();
            paths[hl] = Some(constant((u(rng, 8.0, 20.0), u(rng, 20.0, 44.0)), n));
            if rng.gen_bool(0.5) {
                paths[ol] = Some(constant((u(rng, 10.0, 24.0), u(rng, 40.0, 54.0)), n));
            }
            paths[hr] = Some(offset(&shake, (5.0, 6.0)));
            paths[or] = Some(shake);
            MotionParams { rate: freq, amplitude: amp }
        }
        ClassKind::BothApproach => {
            let o = (u(rng, 28.0, 36.0), u(rng, 28.0, 36.0));
            let l0 = (u(rng, 6.0, 12.0), u(rng, 16.0, 48.0));
            let r0 = (u(rng, 52.0, 58.0), u(rng, 16.0, 48.0));
            let (lt, rt) = ((o.0 - 7.0, o.1), (o.0 + 7.0, o.1));
            let last = (n - 1).max(1) as f64;
            let lerp = |a: (f64, f64), b: (f64, f64)| -> Path2 {
                ts.iter()
                    .map(|&t| {
                        let s = t / last;
                        (a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s)
                    })
                    .collect()
            };
            paths[or] = Some(constant(o, n));
            paths[hl] = Some(lerp(l0, lt));
            paths[hr] = Some(lerp(r0, rt));
            MotionParams { rate: 1.0 / last, amplitude: r0.0 - l0.0 }
        }
        ClassKind::RubHands => {
            let c = (u(rng, 24.0, 40.0), u(rng, 24.0, 40.0));
            let amp = u(rng, 6.0, 10.0);
            let freq = u(rng, 0.15, 0.3);
            let phase = u(rng, 0.0, 2.0 * PI);
            let d: Vec<f64> = ts
                .iter()
                .map(|&t| 4.0 + amp * (1.0 + (2.0 * PI * freq * t + phase).sin()) / 2.0)
                .collect();
            let wob: Vec<f64> = ts.iter().map(|&t| 2.0 * (2.0 * PI * freq * t + phase).cos()).collect();
            paths[hl] = Some(d.iter().zip(&wob).map(|(d, w)| (c.0 - d, c.1 + w)).collect());
            paths[hr] = Some(d.iter().zip(&wob).map(|(d, w)| (c.0 + d, c.1 - w)).collect());
            MotionParams { rate: freq, amplitude: amp }
        }
        ClassKind::PointStatic => {
            paths[hr] = Some(constant((u(rng, 36.0, 54.0), u(rng, 16.0, 48.0)), n));
            if rng.gen_bool(0.5) {
                paths[hl] = Some(constant((u(rng, 8.0, 26.0), u(rng, 16.0, 48.0)), n));
            }
            MotionParams { rate: 0.0, amplitude: 0.0 }
        }
    };
    (paths, motion)
}

fn sample_color(rng: &mut ChaCha8Rng, background: [f64; 3]) -> [f64; 3] {
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let d: f64 = c.iter().zip(&background).map(|(a, b)| (a - b).abs()).sum();
        if d >= 0.45 {
            return c;
        }
    }
}

/// Continuous box of an entity centered at `c` (pixels), clipped to the
/// frame and normalized. `None` when nothing of it is inside.
fn entity_box(e: &Entity, c: (f64, f64), size: usize, confidence: f64) -> Option<BoundingBox> {
    let s = size as f64;
    let x0 = (c.0 - e.half.0).clamp(0.0, s);
    let x1 = (c.0 + e.half.0).clamp(0.0, s);
    let y0 = (c.1 - e.half.1).clamp(0.0, s);
    let y1 = (c.1 + e.half.1).clamp(0.0, s);
    if x1 - x0 < 0.5 || y1 - y0 < 0.5 {
        return None;
    }
    BoundingBox::new(x0 / s, y0 / s, x1 / s, y1 / s, confidence).ok()
}

fn paint(frame: &mut [f64], size: usize, e: &Entity, c: (f64, f64)) {
    let (hx, hy) = e.half;
    let xs = ((c.0 - hx).floor().max(0.0) as usize)..((c.0 + hx).ceil().min(size as f64) as usize);
    let ys = ((c.1 - hy).floor().max(0.0) as usize)..((c.1 + hy).ceil().min(size as f64) as usize);
    for y in ys {
        for x in xs.clone() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match e.shape {
                Shape::Rect => (px - c.0).abs() <= hx && (py - c.1).abs() <= hy,
                Shape::Ellipse => ((px - c.0) / hx).powi(2) + ((py - c.1) / hy).powi(2) <= 1.0,
            };
            if inside {
                frame[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&e.color);
            }
        }
    }
}

/// Renders one clip of `catalog[class_id]`, deterministically from `seed`.
pub fn generate_clip(catalog: &[MotionProgram], class_id: usize, seed: u64, spec: RenderSpec) -> Result<SyntheticClip> {
    let program = catalog
        .iter()
        .find(|p| p.class_id == class_id)
        .ok_or_else(|| IrnError::Dataset(format!("class {class_id} not in catalog")))?;
    if spec.frames == 0 || spec.size < 16 {
        return Err(IrnError::Dataset(format!("render spec {spec:?} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.frames;
    let size = spec.size;
    let (mut paths, motion) = sample_paths(program.kind, n, &mut rng);
    // Paths are authored for a 64-pixel frame and time-compressed to 16 steps.
    let (k, tscale) = (size as f64 / 64.0, 16.0 / n as f64);
    if (k, tscale) != (1.0, 1.0) {
        for p in paths.iter_mut().flatten() {
            let src = p.clone();
            *p = (0..n)
                .map(|t| {
                    let f = (t as f64 * tscale).min(15.0);
                    let i = (f.floor() as usize).min(src.len() - 1);
                    let j = (i + 1).min(src.len() - 1);
                    let a = f - i as f64;
                    (k * (src[i].0 * (1.0 - a) + src[j].0 * a), k * (src[i].1 * (1.0 - a) + src[j].1 * a))
                })
                .collect();
        }
    }
    // Clamp hand centers so hands stay mostly in view.
    for role in [Role::HandLeft, Role::HandRight] {
        if let Some(p) = &mut paths[role.index()] {
            let (lo, hi) = (6.0 * k, size as f64 - 6.0 * k);
            p.iter_mut().for_each(|c| *c = (c.0.clamp(lo, hi), c.1.clamp(lo, hi)));
        }
    }

    let background = [u(&mut rng, 0.2, 0.8), u(&mut rng, 0.2, 0.8), u(&mut rng, 0.2, 0.8)];
    let texture: Vec<f64> = (0..size * size * 3).map(|_| u(&mut rng, -0.15, 0.15)).collect();
    let mut entities = Vec::new();
    // Painter's order: objects below hands.
    for role in [Role::ObjectLeft, Role::ObjectRight, Role::HandLeft, Role::HandRight] {
        if paths[role.index()].is_none() {
            continue;
        }
        let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
        let color = sample_color(&mut rng, background);
        let (lo, hi) = if role.kind() == crate::detections::ActorKind::Hand {
            (4.0, 6.0)
        } else {
            (4.0, 7.0)
        };
        let half = (k * u(&mut rng, lo, hi), k * u(&mut rng, lo, hi));
        entities.push(Entity { role, shape, color, half });
    }

    let mut frames = Vec::with_capacity(n * size * size * 3);
    let mut records = Vec::with_capacity(n);
    for t in 0..n {
        let mut frame: Vec<f64> = (0..size * size * 3)
            .map(|i| background[i % 3] + texture[i] + u(&mut rng, -0.03, 0.03))
            .collect();
        let mut dets = Vec::new();
        for e in &entities {
            let c = paths[e.role.index()].as_ref().expect("entity has a path")[t];
            paint(&mut frame, size, e, c);
            let conf = u(&mut rng, 0.7, 1.0);
            if let Some(b) = entity_box(e, c, size, conf) {
                dets.push(RawDetection::from_box(e.role, &b));
                // Occasional weaker duplicate, removed by confidence filtering.
                if rng.gen_bool(0.1) {
                    let d = (u(&mut rng, -3.0, 3.0), u(&mut rng, -3.0, 3.0));
                    if let Some(dup) = entity_box(e, (c.0 + d.0, c.1 + d.1), size, u(&mut rng, 0.3, conf)) {
                        dets.push(RawDetection::from_box(e.role, &dup));
                    }
                }
            }
        }
        // Occasional sub-threshold false positive for a missing role.
        if rng.gen_bool(0.05) {
            let role = Role::ALL[rng.gen_range(0..4)];
            if paths[role.index()].is_none() {
                let x0 = u(&mut rng, 0.0, 0.7);
                let y0 = u(&mut rng, 0.0, 0.7);
                let b = BoundingBox::new(x0, y0, x0 + 0.2, y0 + 0.2, u(&mut rng, 0.05, 0.45))?;
                dets.push(RawDetection::from_box(role, &b));
            }
        }
        frames.extend(frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        records.push(FrameRecord {
            frame_index: t,
            detections: dets,
        });
    }
    let clip_id = format!("{}-{seed}", program.kind.name());
    Ok(SyntheticClip {
        record: DetectionRecord {
            clip_id: clip_id.clone(),
            num_frames: n,
            frames: records,
        },
        clip_id,
        label: class_id,
        kind: program.kind,
        spec,
        frames,
        entities,
        background,
        paths,
        motion,
    })
}

/// Detection corruption applied independently per frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Probability of dropping a role's detections in a frame.
    pub p_drop: f64,
    /// Probability of exchanging all left/right labels in a frame.
    pub p_swap: f64,
    /// Box-coordinate noise, as a fraction of the box size.
    pub jitter: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        p_drop: 0.0,
        p_swap: 0.0,
        jitter: 0.0,
    };

    pub fn new(p_drop: f64, p_swap: f64, jitter: f64) -> Result<Self> {
        let s = Self { p_drop, p_swap, jitter };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) || !(0.0..=1.0).contains(&self.p_swap) || !(self.jitter >= 0.0) {
            return Err(IrnError::Config(format!("invalid noise spec {self:?}")));
        }
        Ok(())
    }
}

/// Applies drops, L/R swaps and jitter. Deterministic given `seed`.
pub fn inject_noise(record: &DetectionRecord, noise: &NoiseSpec, seed: u64) -> Result<DetectionRecord> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = record.clone();
    for frame in &mut out.frames {
        let swap = rng.gen::<f64>() < noise.p_swap;
        let drop: [bool; 4] = std::array::from_fn(|_| rng.gen::<f64>() < noise.p_drop);
        let mut kept = Vec::with_capacity(frame.detections.len());
        for d in &frame.detections {
            let z: [f64; 4] = std::array::from_fn(|_| normal.sample(&mut rng));
            if drop[d.role.index()] {
                continue;
            }
            let mut d = d.clone();
            if swap {
                d.role = d.role.mirrored();
            }
            if noise.jitter > 0.0 {
                let [x0, y0, x1, y1] = d.bbox;
                let (w, h) = (x1 - x0, y1 - y0);
                let j = [
                    (x0 + noise.jitter * w * z[0]).clamp(0.0, 1.0),
                    (y0 + noise.jitter * h * z[1]).clamp(0.0, 1.0),
                    (x1 + noise.jitter * w * z[2]).clamp(0.0, 1.0),
                    (y1 + noise.jitter * h * z[3]).clamp(0.0, 1.0),
                ];
                if j[0] < j[2] && j[1] < j[3] {
                    d.bbox = j;
                }
            }
            kept.push(d);
        }
        frame.detections = kept;
    }
    Ok(out)
}

// On-disk layout.

pub const FRAME_MAGIC: &[u8; 4] = b"IRNF";
pub const FRAME_VERSION: u32 = 1;

/// Writes `magic, version, T, H, W, C` (u32 LE) followed by the RGB bytes.
pub fn write_frames(path: &Path, dims: [usize; 3], bytes: &[u8]) -> Result<()> {
    let [t, h, w] = dims;
    if bytes.len() != t * h * w * 3 {
        return Err(IrnError::Dataset(format!("{} bytes for dims {dims:?}", bytes.len())));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(FRAME_MAGIC)?;
    for v in [FRAME_VERSION, t as u32, h as u32, w as u32, 3] {
        f.write_u32::<LittleEndian>(v)?;
    }
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != FRAME_MAGIC {
        return Err(IrnError::Dataset(format!("{}: not a frame file", path.display())));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != FRAME_VERSION {
        return Err(IrnError::Dataset(format!("{}: frame file version {version}", path.display())));
    }
    let mut d = [0usize; 4];
    for v in &mut d {
        *v = f.read_u32::<LittleEndian>()? as usize;
    }
    if d[3] != 3 {
        return Err(IrnError::Dataset(format!("{}: {} channels", path.display(), d[3])));
    }
    let mut bytes = vec![0u8; d[0] * d[1] * d[2] * 3];
    f.read_exact(&mut bytes)?;
    Ok(([d[0], d[1], d[2]], bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub label: usize,
    pub class_name: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub render: RenderSpec,
    pub catalog: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn hash(&self) -> String {
        canonical_hash(&serde_json::to_value(self).expect("manifest serializes"))
    }

    pub fn num_classes(&self) -> usize {
        self.catalog.len()
    }
}

/// Stratified split plan with disjoint per-clip seeds; no disk access.
pub fn plan_dataset(
    catalog: &[MotionProgram],
    n_train: usize,
    n_val: usize,
    seed: u64,
    render: RenderSpec,
) -> Result<Manifest> {
    if catalog.is_empty() {
        return Err(IrnError::Dataset("empty catalog".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut split = |prefix: &str, n: usize| -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| {
                let program = catalog[i % catalog.len()];
                let clip_seed = loop {
                    let s: u64 = rng.gen();
                    if used.insert(s) {
                        break s;
                    }
                };
                ManifestEntry {
                    clip_id: format!("{prefix}-{i:05}"),
                    label: program.class_id,
                    class_name: program.kind.name().to_string(),
                    seed: clip_seed,
                }
            })
            .collect()
    };
    let train = split("train", n_train);
    let val = split("val", n_val);
    let mut names: Vec<(usize, String)> = catalog.iter().map(|p| (p.class_id, p.kind.name().to_string())).collect();
    names.sort();
    Ok(Manifest {
        version: 1,
        master_seed: seed,
        render,
        catalog: names.into_iter().map(|(_, n)| n).collect(),
        train,
        val,
    })
}

fn catalog_for(manifest: &Manifest) -> Result<Vec<MotionProgram>> {
    manifest
        .catalog
        .iter()
        .enumerate()
        .map(|(class_id, name)| {
            ClassKind::from_name(name)
                .map(|kind| MotionProgram { class_id, kind })
                .ok_or_else(|| IrnError::Dataset(format!("unknown class {name:?} in manifest")))
        })
        .collect()
}

pub fn clip_dir(root: &Path, clip_id: &str) -> PathBuf {
    root.join("clips").join(clip_id)
}

/// Generates every clip of the plan and writes `manifest.json` last.
pub fn build_dataset(
    root: &Path,
    catalog: &[MotionProgram],
    n_train: usize,
    n_val: usize,
    seed: u64,
    render: RenderSpec,
) -> Result<Manifest> {
    let manifest = plan_dataset(catalog, n_train, n_val, seed, render)?;
    for entry in manifest.train.iter().chain(&manifest.val) {
        let mut clip = generate_clip(catalog, entry.label, entry.seed, render)?;
        clip.record.clip_id = entry.clip_id.clone();
        let dir = clip_dir(root, &entry.clip_id);
        fs::create_dir_all(&dir)?;
        write_frames(&dir.join("frames.bin"), [render.frames, render.size, render.size], &clip.frames)?;
        fs::write(dir.join("detections.json"), clip.record.to_json()?)?;
    }
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    log::info!("wrote {} clips to {}", n_train + n_val, root.display());
    Ok(manifest)
}

/// A clip as stored: raw bytes plus its detection record.
#[derive(Clone, Debug)]
pub struct ClipData {
    pub clip_id: String,
    pub label: usize,
    pub dims: [usize; 3],
    pub frames: Vec<u8>,
    pub record: DetectionRecord,
}

impl ClipData {
    pub fn from_synthetic(clip: &SyntheticClip) -> Self {
        Self {
            clip_id: clip.clip_id.clone(),
            label: clip.label,
            dims: [clip.spec.frames, clip.spec.size, clip.spec.size],
            frames: clip.frames.clone(),
            record: clip.record.clone(),
        }
    }

    pub fn video(&self) -> Result<VideoClip> {
        video_from_bytes(&self.clip_id, self.label, self.dims, &self.frames)
    }
}

pub fn load_clip(root: &Path, entry: &ManifestEntry) -> Result<ClipData> {
    let dir = clip_dir(root, &entry.clip_id);
    let (dims, frames) = read_frames(&dir.join("frames.bin"))?;
    let record = DetectionRecord::from_json(&fs::read_to_string(dir.join("detections.json"))?)?;
    if record.num_frames != dims[0] {
        return Err(IrnError::Dataset(format!(
            "{}: {} frames but {} detection frames",
            entry.clip_id, dims[0], record.num_frames
        )));
    }
    Ok(ClipData {
        clip_id: entry.clip_id.clone(),
        label: entry.label,
        dims,
        frames,
        record,
    })
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<ClipData>,
    pub val: Vec<ClipData>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| IrnError::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        catalog_for(&manifest)?;
        let load = |entries: &[ManifestEntry]| entries.iter().map(|e| load_clip(root, e)).collect::<Result<Vec<_>>>();
        Ok(Self {
            root: root.to_path_buf(),
            train: load(&manifest.train)?,
            val: load(&manifest.val)?,
            manifest,
        })
    }

    /// Loads `root` if it holds exactly the planned dataset, else builds it.
    pub fn ensure(
        root: &Path,
        catalog: &[MotionProgram],
        n_train: usize,
        n_val: usize,
        seed: u64,
        render: RenderSpec,
    ) -> Result<Self> {
        let plan = plan_dataset(catalog, n_train, n_val, seed, render)?;
        if let Ok(text) = fs::read_to_string(root.join("manifest.json")) {
            if serde_json::from_str::<Manifest>(&text).ok().as_ref() == Some(&plan) {
                if let Ok(ds) = Self::load(root) {
                    return Ok(ds);
                }
            }
        }
        build_dataset(root, catalog, n_train, n_val, seed, render)?;
        Self::load(root)
    }
}

// Certification.

/// Hand-coded classifier over filtered detections of all frames.
pub fn rule_classify(record: &DetectionRecord, threshold: f64) -> Result<ClassKind> {
    let idx: Vec<usize> = (0..record.num_frames).collect();
    let frames = record.sample(&idx, threshold)?;
    let centers = |role: Role| -> Vec<(f64, f64)> {
        frames.iter().filter_map(|f| f.get(role).map(|b| b.center())).collect()
    };
    let range = |v: &[(f64, f64)], axis: usize| -> f64 {
        let vals: Vec<f64> = v.iter().map(|p| if axis == 0 { p.0 } else { p.1 }).collect();
        vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min)
    };
    let (hl, hr, ol, or) = (
        centers(Role::HandLeft),
        centers(Role::HandRight),
        centers(Role::ObjectLeft),
        centers(Role::ObjectRight),
    );
    let px = 1.0 / 64.0;
    if ol.is_empty() && or.is_empty() {
        if !hl.is_empty() && !hr.is_empty() && range(&hr, 0) > 3.0 * px {
            return Ok(ClassKind::RubHands);
        }
        return Ok(ClassKind::PointStatic);
    }
    if or.is_empty() {
        return Ok(ClassKind::ShakeRight);
    }
    if ol.is_empty() {
        let gap = |f: &crate::detections::FrameDetections| -> Option<f64> {
            let a = f.get(Role::HandLeft)?.center();
            let b = f.get(Role::HandRight)?.center();
            Some(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
        };
        let gaps: Vec<f64> = frames.iter().filter_map(gap).collect();
        if gaps.len() >= 2 && gaps[0] - gaps[gaps.len() - 1] > 10.0 * px {
            return Ok(ClassKind::BothApproach);
        }
        return Ok(ClassKind::ShakeRight);
    }
    let (rx, ry) = (range(&or, 0), range(&or, 1));
    if rx > 8.0 * px && ry > 8.0 * px {
        return Ok(ClassKind::Stir);
    }
    if or[or.len() - 1].1 - or[0].1 < -15.0 * px {
        return Ok(ClassKind::HoldAndLift);
    }
    Ok(ClassKind::ShakeRight)
}

/// Plug-in mutual information (nats) between two discrete variables.
pub fn mutual_information(x: &[usize], y: &[usize]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let nx = x.iter().max().map_or(0, |m| m + 1);
    let ny = y.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0.0; nx * ny];
    let mut px = vec![0.0; nx];
    let mut py = vec![0.0; ny];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * ny + b] += 1.0;
        px[a] += 1.0;
        py[b] += 1.0;
    }
    let mut mi = 0.0;
    for a in 0..nx {
        for b in 0..ny {
            let j = joint[a * ny + b];
            if j > 0.0 {
                mi += j / n * (j * n / (px[a] * py[b])).ln();
            }
        }
    }
    mi
}

/// Octant of an RGB color (each channel above or below one half).
pub fn color_bin(c: [f64; 3]) -> usize {
    (c[0] > 0.5) as usize * 4 + (c[1] > 0.5) as usize * 2 + (c[2] > 0.5) as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Permutation test of independence between binned appearance and label,
/// using mutual information as the statistic. `p = (1 + #{MI_perm >= MI}) /
/// (1 + permutations)`.
pub fn permutation_test(bins: &[usize], labels: &[usize], permutations: usize, seed: u64) -> PermutationTest {
    let statistic = mutual_information(bins, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let mut exceed = 0;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if mutual_information(bins, &shuffled) >= statistic - 1e-12 {
            exceed += 1;
        }
    }
    PermutationTest {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    }
}
