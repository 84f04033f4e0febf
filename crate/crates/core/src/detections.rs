//! Per-frame hand/object detections, binary occupancy maps and role tracks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{IrnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActorKind {
    Hand,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// One of the four tracked entities. An object's side is the side of the
/// hand interacting with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "HL")]
    HandLeft,
    #[serde(rename = "HR")]
    HandRight,
    #[serde(rename = "OL")]
    ObjectLeft,
    #[serde(rename = "OR")]
    ObjectRight,
}

impl Role {
    /// Canonical order used for every per-role array in the crate.
    pub const ALL: [Role; 4] = [
        Role::HandLeft,
        Role::HandRight,
        Role::ObjectLeft,
        Role::ObjectRight,
    ];

    pub fn new(kind: ActorKind, side: Side) -> Role {
        match (kind, side) {
            (ActorKind::Hand, Side::Left) => Role::HandLeft,
            (ActorKind::Hand, Side::Right) => Role::HandRight,
            (ActorKind::Object, Side::Left) => Role::ObjectLeft,
            (ActorKind::Object, Side::Right) => Role::ObjectRight,
        }
    }

    pub fn kind(self) -> ActorKind {
        match self {
            Role::HandLeft | Role::HandRight => ActorKind::Hand,
            Role::ObjectLeft | Role::ObjectRight => ActorKind::Object,
        }
    }

    pub fn side(self) -> Side {
        match self {
            Role::HandLeft | Role::ObjectLeft => Side::Left,
            Role::HandRight | Role::ObjectRight => Side::Right,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Same kind, other side.
    pub fn mirrored(self) -> Role {
        Role::new(self.kind(), self.side().opposite())
    }

    pub fn code(self) -> &'static str {
        match self {
            Role::HandLeft => "HL",
            Role::HandRight => "HR",
            Role::ObjectLeft => "OL",
            Role::ObjectRight => "OR",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, confidence: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1
            && (0.0..=1.0).contains(&confidence);
        if !ok {
            return Err(IrnError::Detections(format!(
                "invalid box ({x0}, {y0}, {x1}, {y1}) conf {confidence}"
            )));
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            confidence,
        })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Grid cells `(row, col)` selected by cell-center containment on a
    /// `rows x cols` grid. When no center falls inside, the cell holding the
    /// box center is returned so a present box never maps to nothing.
    pub fn covered_cells(&self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for i in 0..rows {
            let cy = (i as f64 + 0.5) / rows as f64;
            if cy < self.y0 || cy > self.y1 {
                continue;
            }
            for j in 0..cols {
                let cx = (j as f64 + 0.5) / cols as f64;
                if cx >= self.x0 && cx <= self.x1 {
                    cells.push((i, j));
                }
            }
        }
        if cells.is_empty() {
            let (cx, cy) = self.center();
            let i = ((cy * rows as f64) as usize).min(rows - 1);
            let j = ((cx * cols as f64) as usize).min(cols - 1);
            cells.push((i, j));
        }
        cells
    }
}

/// At most one box per role for a single frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameDetections {
    pub frame_index: usize,
    entries: [Option<BoundingBox>; 4],
}

impl FrameDetections {
    pub fn empty(frame_index: usize) -> Self {
        Self {
            frame_index,
            entries: [None; 4],
        }
    }

    pub fn get(&self, role: Role) -> Option<&BoundingBox> {
        self.entries[role.index()].as_ref()
    }

    pub fn set(&mut self, role: Role, b: Option<BoundingBox>) {
        self.entries[role.index()] = b;
    }

    pub fn present_roles(&self) -> impl Iterator<Item = Role> + '_ {
        Role::ALL.into_iter().filter(|r| self.get(*r).is_some())
    }
}

fn prefer(candidate: &BoundingBox, current: &BoundingBox) -> bool {
    if candidate.confidence != current.confidence {
        return candidate.confidence > current.confidence;
    }
    if candidate.area() != current.area() {
        return candidate.area() > current.area();
    }
    (candidate.x0, candidate.y0) < (current.x0, current.y0)
}

/// Drops boxes below `threshold` and keeps the best survivor per role
/// (highest confidence, then larger area, then smaller `(x0, y0)`).
pub fn filter_detections(
    frame_index: usize,
    raw: &[(Role, BoundingBox)],
    threshold: f64,
) -> Result<FrameDetections> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(IrnError::Detections(format!("threshold {threshold} outside [0,1]")));
    }
    let mut out = FrameDetections::empty(frame_index);
    for (role, b) in raw {
        if b.confidence < threshold {
            continue;
        }
        let slot = &mut out.entries[role.index()];
        match slot {
            Some(cur) if !prefer(b, cur) => {}
            _ => *slot = Some(*b),
        }
    }
    Ok(out)
}

/// `grid x grid` occupancy map, row-major, values exactly 0.0 or 1.0.
pub fn rasterize_binary_map(b: Option<&BoundingBox>, grid: usize) -> Result<Vec<f64>> {
    if grid < 2 {
        return Err(IrnError::Shape(format!("grid size {grid} < 2")));
    }
    let mut map = vec![0.0; grid * grid];
    if let Some(b) = b {
        for (i, j) in b.covered_cells(grid, grid) {
            map[i * grid + j] = 1.0;
        }
    }
    Ok(map)
}

/// Boxes of one role across the `T` sampled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleTrack {
    pub role: Role,
    pub boxes: Vec<Option<BoundingBox>>,
}

impl RoleTrack {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn presence(&self) -> Vec<bool> {
        self.boxes.iter().map(Option::is_some).collect()
    }

    pub fn is_absent(&self) -> bool {
        self.boxes.iter().all(Option::is_none)
    }
}

/// One track per role, indexed by [`Role::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoleTracks {
    tracks: [RoleTrack; 4],
}

impl RoleTracks {
    pub fn get(&self, role: Role) -> &RoleTrack {
        &self.tracks[role.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RoleTrack> {
        self.tracks.iter()
    }

    pub fn frames(&self) -> usize {
        self.tracks[0].len()
    }

    /// Keeps only frame `t`, giving single-frame tracks.
    pub fn select_frame(&self, t: usize) -> RoleTracks {
        RoleTracks {
            tracks: self.tracks.clone().map(|tr| RoleTrack {
                role: tr.role,
                boxes: vec![tr.boxes[t]],
            }),
        }
    }

    /// Applies `f` to every present box; `None` marks it absent.
    pub fn map_boxes(&self, mut f: impl FnMut(Role, usize, &BoundingBox) -> Option<BoundingBox>) -> RoleTracks {
        RoleTracks {
            tracks: self.tracks.clone().map(|tr| RoleTrack {
                role: tr.role,
                boxes: tr
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(t, b)| b.as_ref().and_then(|b| f(tr.role, t, b)))
                    .collect(),
            }),
        }
    }

    /// Copies frame `t`'s boxes to every frame.
    pub fn duplicate_frame(&self, t: usize) -> RoleTracks {
        let n = self.frames();
        RoleTracks {
            tracks: self.tracks.clone().map(|tr| RoleTrack {
                role: tr.role,
                boxes: vec![tr.boxes[t]; n],
            }),
        }
    }
}

/// Slots per-frame detections into per-role tracks of length `t`.
pub fn build_role_tracks(frames: &[FrameDetections], t: usize) -> Result<RoleTracks> {
    if frames.len() != t {
        return Err(IrnError::Detections(format!(
            "expected {t} frames, got {}",
            frames.len()
        )));
    }
    if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
        return Err(IrnError::Detections("frame indices must be strictly increasing".into()));
    }
    let tracks = Role::ALL.map(|role| RoleTrack {
        role,
        boxes: frames.iter().map(|f| f.get(role).copied()).collect(),
    });
    Ok(RoleTracks { tracks })
}

/// Stacked `T x G x G` occupancy maps of one track.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMapSequence {
    pub frames: usize,
    pub grid: usize,
    pub data: Vec<f64>,
}

impl BinaryMapSequence {
    pub fn from_track(track: &RoleTrack, grid: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(track.len() * grid * grid);
        for b in &track.boxes {
            data.extend(rasterize_binary_map(b.as_ref(), grid)?);
        }
        Ok(Self {
            frames: track.len(),
            grid,
            data,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.grid * self.grid;
        &self.data[t * n..(t + 1) * n]
    }
}

// On-disk detection record.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub role: Role,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl RawDetection {
    pub fn from_box(role: Role, b: &BoundingBox) -> Self {
        Self {
            role,
            bbox: b.as_array(),
            confidence: b.confidence,
        }
    }

    pub fn to_box(&self) -> Result<BoundingBox> {
        let [x0, y0, x1, y1] = self.bbox;
        BoundingBox::new(x0, y0, x1, y1, self.confidence)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub detections: Vec<RawDetection>,
}

/// One clip's detections: `{clip_id, num_frames, frames: [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub clip_id: String,
    pub num_frames: usize,
    pub frames: Vec<FrameRecord>,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.num_frames {
            return Err(IrnError::Detections(format!(
                "{}: num_frames {} but {} frame records",
                self.clip_id,
                self.num_frames,
                self.frames.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.frame_index != i {
                return Err(IrnError::Detections(format!(
                    "{}: frame record {i} has index {}",
                    self.clip_id, f.frame_index
                )));
            }
            for d in &f.detections {
                d.to_box()?;
            }
        }
        Ok(())
    }

    /// Filtered detections for the given frame indices.
    pub fn sample(&self, indices: &[usize], threshold: f64) -> Result<Vec<FrameDetections>> {
        indices
            .iter()
            .map(|&i| {
                let rec = self.frames.get(i).ok_or_else(|| {
                    IrnError::Detections(format!("{}: no frame {i}", self.clip_id))
                })?;
                let raw = rec
                    .detections
                    .iter()
                    .map(|d| Ok((d.role, d.to_box()?)))
                    .collect::<Result<Vec<_>>>()?;
                filter_detections(i, &raw, threshold)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: DetectionRecord = serde_json::from_str(s)?;
        rec.validate()?;
        Ok(rec)
    }
}
