//! Scale/crop/resize augmentation applied jointly to frames and boxes.
//!
//! Both pipelines scale the frame isotropically, cut a window out of the
//! scaled frame and resize the window to a square of `target_size`. SCR
//! keeps the full height (an `H' x H'` window sliding horizontally), STD
//! cuts a window of the original size at an arbitrary `(x, y)` offset.
//! The frame is resampled once, straight from the source, with the same
//! affine map the boxes go through.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::VideoClip;
use crate::config::{AugmentMode, ExperimentConfig};
use crate::detections::{BoundingBox, RoleTracks};
use crate::error::{IrnError, Result};
use crate::tensor::Tensor;

/// A transformed box keeping less than this fraction of its area inside
/// the window is treated as cropped out.
pub const MIN_AREA_RETENTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    pub scale_range: (f64, f64),
    pub target_size: usize,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(mode: AugmentMode, scale_range: (f64, f64), target_size: usize, seed: u64) -> Result<Self> {
        let (lo, hi) = scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(IrnError::Config(format!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if target_size < 16 {
            return Err(IrnError::Config(format!("target size {target_size} below 16")));
        }
        Ok(Self {
            mode,
            scale_range,
            target_size,
            seed,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let [lo, hi] = cfg.augment.scale_range;
        Self::new(cfg.augment.mode, (lo, hi), cfg.data.size, seed)
    }

    /// Same spec with augmentation switched off (evaluation).
    pub fn eval(self) -> Self {
        Self {
            mode: AugmentMode::None,
            ..self
        }
    }
}

/// Window in normalized source coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropWindow {
    pub const FULL: CropWindow = CropWindow {
        x0: 0.0,
        y0: 0.0,
        width: 1.0,
        height: 1.0,
    };

    /// Window of an `h x w` frame scaled by `scale`, cropped to
    /// `crop_h x crop_w` scaled pixels at offset `(dx, dy)` (scaled pixels).
    pub fn from_pixels(h: usize, w: usize, scale: f64, dx: f64, dy: f64, crop_h: f64, crop_w: f64) -> Self {
        let (sh, sw) = (scale * h as f64, scale * w as f64);
        Self {
            x0: dx / sw,
            y0: dy / sh,
            width: crop_w / sw,
            height: crop_h / sh,
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    /// Maps a source box into window coordinates, clipped to `[0, 1]`.
    /// `None` when less than [`MIN_AREA_RETENTION`] of it survives.
    pub fn map_box(&self, b: &BoundingBox) -> Option<BoundingBox> {
        if self.is_full() {
            return Some(*b);
        }
        let fx = |x: f64| (x - self.x0) / self.width;
        let fy = |y: f64| (y - self.y0) / self.height;
        let (x0, x1, y0, y1) = (fx(b.x0), fx(b.x1), fy(b.y0), fy(b.y1));
        let area = (x1 - x0) * (y1 - y0);
        let (cx0, cx1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (cy0, cy1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let kept = (cx1 - cx0).max(0.0) * (cy1 - cy0).max(0.0);
        if area <= 0.0 || kept < MIN_AREA_RETENTION * area {
            return None;
        }
        BoundingBox::new(cx0, cy0, cx1, cy1, b.confidence).ok()
    }
}

/// SCR window: `H' x H'` crop of the `H' x W'` scaled frame at horizontal
/// offset `offset * (W' - H')`, `offset` in `[0, 1]`.
pub fn scr_window(h: usize, w: usize, scale: f64, offset: f64) -> CropWindow {
    let side = scale * h.min(w) as f64;
    let dx = offset * (scale * w as f64 - side).max(0.0);
    let dy = offset * (scale * h as f64 - side).max(0.0);
    CropWindow::from_pixels(h, w, scale, dx, dy, side, side)
}

/// STD window: crop of the original `h x w` size out of the scaled frame
/// at offset `(ox, oy)` fractions of the slack, then squared by the resize.
pub fn std_window(h: usize, w: usize, scale: f64, ox: f64, oy: f64) -> CropWindow {
    let (ch, cw) = (h as f64, w as f64);
    let dx = ox * (scale * w as f64 - cw).max(0.0);
    let dy = oy * (scale * h as f64 - ch).max(0.0);
    CropWindow::from_pixels(h, w, scale, dx, dy, ch.min(scale * ch), cw.min(scale * cw))
}

/// Resamples every frame through `window` to `target x target` and maps
/// the boxes the same way.
pub fn apply_window(
    clip: &VideoClip,
    tracks: &RoleTracks,
    window: CropWindow,
    target: usize,
) -> Result<(VideoClip, RoleTracks)> {
    let (h, w) = (clip.height(), clip.width());
    if window.is_full() && h == target && w == target {
        return Ok((clip.clone(), tracks.clone()));
    }
    let n = clip.num_frames();
    let mut data = Vec::with_capacity(n * target * target * 3);
    // Source sample coordinates are shared by all frames.
    let axis = |len: usize, start: f64, extent: f64| -> Vec<(usize, usize, f64)> {
        (0..target)
            .map(|o| {
                let u = start + (o as f64 + 0.5) / target as f64 * extent;
                let f = (u * len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = f.floor() as usize;
                (i0, (i0 + 1).min(len - 1), f - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, window.y0, window.height);
    let xs = axis(w, window.x0, window.width);
    for t in 0..n {
        let src = clip.frame(t);
        let p = |y: usize, x: usize, c: usize| src[(y * w + x) * 3 + c];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                for c in 0..3 {
                    let top = p(y0, x0, c) * (1.0 - tx) + p(y0, x1, c) * tx;
                    let bot = p(y1, x0, c) * (1.0 - tx) + p(y1, x1, c) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    let frames = Tensor::from_vec(&[n, target, target, 3], data)?;
    let out = VideoClip::new(clip.clip_id.clone(), clip.label, frames)?;
    Ok((out, tracks.map_boxes(|_, _, b| window.map_box(b))))
}

fn draw_scale(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

pub fn scr_augment(clip: &VideoClip, tracks: &RoleTracks, spec: &AugmentSpec) -> Result<(VideoClip, RoleTracks)> {
    if spec.mode != AugmentMode::Scr {
        return Err(IrnError::Config(format!("scr_augment called with mode {:?}", spec.mode)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = draw_scale(&mut rng, spec.scale_range);
    let offset: f64 = rng.gen();
    let window = scr_window(clip.height(), clip.width(), scale, offset);
    apply_window(clip, tracks, window, spec.target_size)
}

pub fn std_augment(clip: &VideoClip, tracks: &RoleTracks, spec: &AugmentSpec) -> Result<(VideoClip, RoleTracks)> {
    if spec.mode != AugmentMode::Std {
        return Err(IrnError::Config(format!("std_augment called with mode {:?}", spec.mode)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = draw_scale(&mut rng, spec.scale_range);
    let (ox, oy): (f64, f64) = (rng.gen(), rng.gen());
    let window = std_window(clip.height(), clip.width(), scale, ox, oy);
    apply_window(clip, tracks, window, spec.target_size)
}

/// Deterministic center processing: central square crop, resized.
pub fn center_process(clip: &VideoClip, tracks: &RoleTracks, target: usize) -> Result<(VideoClip, RoleTracks)> {
    let window = scr_window(clip.height(), clip.width(), 1.0, 0.5);
    apply_window(clip, tracks, window, target)
}

/// Dispatches on `spec.mode`; `None` means center processing.
pub fn augment(clip: &VideoClip, tracks: &RoleTracks, spec: &AugmentSpec) -> Result<(VideoClip, RoleTracks)> {
    match spec.mode {
        AugmentMode::Scr => scr_augment(clip, tracks, spec),
        AugmentMode::Std => std_augment(clip, tracks, spec),
        AugmentMode::None => center_process(clip, tracks, spec.target_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::{build_role_tracks, FrameDetections, Role};
    use crate::synthdata::{default_catalog, generate_clip, RenderSpec};
    use proptest::{prop_assert, proptest};

    fn gradient_clip(t: usize, h: usize, w: usize) -> VideoClip {
        let data = (0..t * h * w * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        VideoClip::new("g", 0, Tensor::from_vec(&[t, h, w, 3], data).unwrap()).unwrap()
    }

    fn tracks_with(boxes: &[(Role, BoundingBox)], t: usize) -> RoleTracks {
        let frames: Vec<FrameDetections> = (0..t)
            .map(|i| {
                let mut f = FrameDetections::empty(i);
                for (r, b) in boxes {
                    f.set(*r, Some(*b));
                }
                f
            })
            .collect();
        build_role_tracks(&frames, t).unwrap()
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, 0.9).unwrap()
    }

    #[test]
    fn unit_scale_full_window_is_identity() {
        let clip = gradient_clip(2, 24, 24);
        let tracks = tracks_with(&[(Role::HandRight, bx(0.1, 0.2, 0.4, 0.5))], 2);
        let spec = AugmentSpec::new(AugmentMode::Scr, (1.0, 1.0), 24, 5).unwrap();
        let (c, t) = scr_augment(&clip, &tracks, &spec).unwrap();
        assert_eq!(c, clip);
        assert_eq!(t, tracks);
        let spec = AugmentSpec::new(AugmentMode::Std, (1.0, 1.0), 24, 5).unwrap();
        let (c, t) = std_augment(&clip, &tracks, &spec).unwrap();
        assert_eq!(c, clip);
        assert_eq!(t, tracks);
    }

    #[test]
    fn scr_square_frame_keeps_everything() {
        // With H = W the H' x H' window is the whole scaled frame.
        let clip = gradient_clip(1, 32, 32);
        let tracks = tracks_with(&[(Role::HandLeft, bx(0.0, 0.0, 0.1, 0.1))], 1);
        for seed in 0..20 {
            let spec = AugmentSpec::new(AugmentMode::Scr, (1.0, 1.3), 32, seed).unwrap();
            let (_, t) = scr_augment(&clip, &tracks, &spec).unwrap();
            assert_eq!(t, tracks);
        }
    }

    #[test]
    fn known_offset_matches_affine_oracle() {
        // 30 x 50 frame, unit scale: the 30 x 30 window starts at dx pixels.
        let (h, w) = (30usize, 50usize);
        let dx = 12.0;
        let win = scr_window(h, w, 1.0, dx / (w - h) as f64);
        let b = bx(0.3, 0.2, 0.6, 0.7);
        let m = win.map_box(&b).unwrap();
        let oracle = |x: f64| ((x * w as f64 - dx) / h as f64).clamp(0.0, 1.0);
        assert_eq!(m.x0, oracle(b.x0));
        assert_eq!(m.x1, oracle(b.x1));
        assert_eq!(m.y0, b.y0);
        assert_eq!(m.y1, b.y1);
        assert_eq!(m.confidence, b.confidence);

        // Pixel content: output column o samples source column o + dx.
        let clip = gradient_clip(1, h, w);
        let tracks = tracks_with(&[], 1);
        let (c, _) = apply_window(&clip, &tracks, win, h).unwrap();
        for y in 0..h {
            for x in 0..h {
                for ch in 0..3 {
                    let got = c.frame(0)[(y * h + x) * 3 + ch];
                    let want = clip.frame(0)[(y * w + x + 12) * 3 + ch];
                    assert!((got - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn box_outside_window_is_dropped() {
        let (h, w) = (30usize, 50usize);
        let win = scr_window(h, w, 1.0, 1.0);
        // Window covers x in [20/50, 1]; the box ends at 0.3.
        assert_eq!(win.map_box(&bx(0.0, 0.1, 0.3, 0.4)), None);
        // Keeping 5% of the area is below the retention threshold.
        assert_eq!(win.map_box(&bx(0.0, 0.1, 0.41, 0.4)), None);
        // Keeping 50% survives, clipped at the window edge.
        let m = win.map_box(&bx(0.36, 0.1, 0.44, 0.4)).unwrap();
        assert_eq!(m.x0, 0.0);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let clip = gradient_clip(2, 32, 32);
        let tracks = tracks_with(&[(Role::ObjectRight, bx(0.5, 0.5, 0.9, 0.9))], 2);
        let spec = AugmentSpec::new(AugmentMode::Std, (1.0, 1.3), 32, 11).unwrap();
        let a = std_augment(&clip, &tracks, &spec).unwrap();
        let b = std_augment(&clip, &tracks, &spec).unwrap();
        assert_eq!(a, b);
        let other = AugmentSpec { seed: 12, ..spec };
        assert_ne!(a.0, std_augment(&clip, &tracks, &other).unwrap().0);
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let clip = gradient_clip(1, 16, 16);
        let tracks = tracks_with(&[], 1);
        let spec = AugmentSpec::new(AugmentMode::Std, (1.0, 1.3), 16, 0).unwrap();
        assert!(scr_augment(&clip, &tracks, &spec).is_err());
        assert!(AugmentSpec::new(AugmentMode::Std, (1.3, 1.0), 16, 0).is_err());
        assert!(AugmentSpec::new(AugmentMode::Std, (1.0, 1.3), 8, 0).is_err());
    }

    #[test]
    fn center_processing_crops_the_middle() {
        let clip = gradient_clip(1, 20, 40);
        let tracks = tracks_with(&[(Role::HandRight, bx(0.45, 0.1, 0.55, 0.3))], 1);
        let (c, t) = center_process(&clip, &tracks, 20).unwrap();
        assert_eq!(c.frames.shape(), &[1, 20, 20, 3]);
        let m = t.get(Role::HandRight).boxes[0].unwrap();
        assert!((m.x0 - 0.4).abs() < 1e-12 && (m.x1 - 0.6).abs() < 1e-12);
        // Square input of the right size passes through untouched.
        let sq = gradient_clip(1, 20, 20);
        assert_eq!(center_process(&sq, &tracks, 20).unwrap().0, sq);
    }

    #[test]
    fn std_loses_edge_entities_more_often_than_scr() {
        let size = 64;
        let clip = gradient_clip(1, size, size);
        let mut lost = [0usize; 2];
        for seed in 0..200u64 {
            // Entities hugging the four borders.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..0.04);
            let d = |rng: &mut ChaCha8Rng| rng.gen_range(0.08..0.14);
            let (a, b, c, k) = (e(&mut rng), d(&mut rng), e(&mut rng), d(&mut rng));
            let tracks = tracks_with(
                &[
                    (Role::HandLeft, bx(a, 0.4, a + b, 0.5)),
                    (Role::HandRight, bx(1.0 - c - k, 0.4, 1.0 - c, 0.5)),
                    (Role::ObjectLeft, bx(0.4, a, 0.5, a + b)),
                    (Role::ObjectRight, bx(0.4, 1.0 - c - k, 0.5, 1.0 - c)),
                ],
                1,
            );
            for (i, mode) in [AugmentMode::Std, AugmentMode::Scr].into_iter().enumerate() {
                let spec = AugmentSpec::new(mode, (1.0, 1.3), size, seed).unwrap();
                let (_, t) = augment(&clip, &tracks, &spec).unwrap();
                if t.iter().any(|tr| tr.boxes[0].is_none()) {
                    lost[i] += 1;
                }
            }
        }
        assert!(lost[0] > lost[1], "std lost {} clips, scr {}", lost[0], lost[1]);
    }

    /// IoU between a box and the set of pixels whose centers fall in it,
    /// against the pixels matching the entity's color.
    fn mask_iou(frame: &[f64], size: usize, color: [f64; 3], b: &BoundingBox) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..size {
            for x in 0..size {
                let p = &frame[(y * size + x) * 3..(y * size + x) * 3 + 3];
                let m = p.iter().zip(&color).all(|(a, c)| (a - c).abs() < 0.08);
                let (cx, cy) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let inb = b.contains_point(cx, cy);
                inter += (m && inb) as usize;
                union += (m || inb) as usize;
            }
        }
        inter as f64 / union.max(1) as f64
    }

    #[test]
    fn transformed_boxes_overlay_transformed_entities() {
        let catalog = default_catalog();
        let mut ious = Vec::new();
        for seed in 0..24u64 {
            let sc = generate_clip(&catalog, (seed % 6) as usize, 900 + seed, RenderSpec::default()).unwrap();
            let clip = sc.video().unwrap();
            let frames = sc.record.sample(&[0, 8], 0.5).unwrap();
            let tracks = build_role_tracks(&frames, 2).unwrap();
            let spec = AugmentSpec::new(AugmentMode::Std, (1.0, 1.3), 64, seed).unwrap();
            let (c, t) = std_augment(&clip, &tracks, &spec).unwrap();
            // The right hand is painted last, so nothing occludes it.
            let e = sc.entity(Role::HandRight).unwrap();
            for (i, &src_t) in [0usize, 8].iter().enumerate() {
                if let Some(b) = t.get(Role::HandRight).boxes[i] {
                    ious.push(mask_iou(c.frame(src_t), 64, e.color, &b));
                }
            }
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!(ious.len() >= 30);
        assert!(mean >= 0.7, "mean mask IoU {mean:.3} over {} boxes", ious.len());
    }

    proptest! {
        #[test]
        fn mapped_boxes_stay_valid(
            scale in 1.0f64..1.5, ox in 0.0f64..1.0, oy in 0.0f64..1.0,
            x0 in 0.0f64..0.9, y0 in 0.0f64..0.9, w in 0.01f64..0.5, h in 0.01f64..0.5,
        ) {
            let b = bx(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0));
            let win = std_window(64, 64, scale, ox, oy);
            prop_assert!(win.x0 >= 0.0 && win.x0 + win.width <= 1.0 + 1e-12);
            if let Some(m) = win.map_box(&b) {
                prop_assert!(m.x0 >= 0.0 && m.x1 <= 1.0 && m.x0 < m.x1);
                prop_assert!(m.y0 >= 0.0 && m.y1 <= 1.0 && m.y0 < m.y1);
            }
        }
    }
}
