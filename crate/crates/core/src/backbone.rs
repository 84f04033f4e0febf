//! Toy two-pathway 3D ConvNet backbone, RoI average pooling of detections
//! on its third-block volume, and the patch-MLP alternative.
//!
//! Layout (channels last, desk dims in brackets):
//!
//! ```text
//! slow: T frames  -> stem 1x4x4/4 -> res 3x3x3/(1,2,2) ----------+
//! fast: 2T frames -> stem 3x4x4/4 -> res 3x3x3/(1,2,2) -> lateral 3x1x1/(2,1,1)
//!                                                                 concat
//!   -> block3 res 3x3x3 -> volume [T, H/8, W/8, C]   (RoI pooling reads this)
//!   -> final res 3x3x3/(1,2,2) -> [T, H/16, W/16, M] -> mean -> F [M]
//! ```
//!
//! Spatial padding replicates edges so a constant clip yields a spatially
//! constant volume.

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::detections::BoundingBox;
use crate::error::{IrnError, Result};
use crate::nn::{Conv3d, FeedForward, Init};
use crate::tensor::{Conv3dSpec, GatherRow, Graph, PadMode, ParamStore, Tensor, Var};

/// Decoded clip: `frames` is `[T_in, H, W, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub label: usize,
    pub frames: Tensor,
}

impl VideoClip {
    pub fn new(clip_id: impl Into<String>, label: usize, frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(IrnError::Shape(format!("clip frames {s:?}, expected [T, H, W, 3]")));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            label,
            frames,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height() * self.width() * 3;
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Stacks the listed frames into `[1, len, H, W, 3]`.
    pub fn gather_frames(&self, indices: &[usize]) -> Result<Tensor> {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(indices.len() * h * w * 3);
        for &i in indices {
            if i >= self.num_frames() {
                return Err(IrnError::Shape(format!("frame {i} of {}", self.num_frames())));
            }
            data.extend_from_slice(self.frame(i));
        }
        Tensor::from_vec(&[1, indices.len(), h, w, 3], data)
    }
}

/// Slow-path frame indices: `T` frames at stride `T_in / T`.
pub fn slow_indices(frames_in: usize, frames: usize) -> Vec<usize> {
    let stride = frames_in / frames;
    (0..frames).map(|t| t * stride).collect()
}

/// Fast-path frame indices: `2T` frames at stride `T_in / 2T`.
pub fn fast_indices(frames_in: usize, frames: usize) -> Vec<usize> {
    let stride = frames_in / (2 * frames);
    (0..2 * frames).map(|t| t * stride).collect()
}

/// Third-block feature volume `[T, H', W', C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub values: Tensor,
}

impl FeatureVolume {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        let n = s.len();
        [s[n - 4], s[n - 3], s[n - 2]]
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn cell(&self, t: usize, i: usize, j: usize) -> &[f64] {
        let [_, h, w] = self.dims();
        self.values.row((t * h + i) * w + j)
    }
}

/// Globally pooled final-block feature `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionRepresentation {
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledDetectionFeature {
    pub vector: Vec<f64>,
    pub frame_index: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    main: Conv3d,
    shortcut: Conv3d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let main = Conv3dSpec::new(cin, cout, [3, 3, 3])
            .stride(stride)
            .padding([1, 1, 1])
            .pad_mode(PadMode::ReplicateSpatial);
        let short = Conv3dSpec::new(cin, cout, [1, 1, 1]).stride(stride);
        Self {
            main: Conv3d::new(store, &format!("{name}.main"), main, true, Init::Relu, rng),
            shortcut: Conv3d::new(store, &format!("{name}.shortcut"), short, true, Init::Linear, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let m = self.main.forward(g, x)?;
        let s = self.shortcut.forward(g, x)?;
        let y = g.add(m, s)?;
        Ok(g.relu(y))
    }
}

/// Outputs of [`Backbone::forward`] on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `[1, T, H', W', C]`.
    pub volume: Var,
    /// `[1, M]`.
    pub action: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    slow_stem: Conv3d,
    fast_stem: Conv3d,
    slow_block: ResBlock,
    fast_block: ResBlock,
    lateral: Conv3d,
    block3: ResBlock,
    final_main: Conv3d,
    final_expand: Conv3d,
    final_shortcut: Conv3d,
    frames_in: usize,
    frames: usize,
    size: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let b = &cfg.backbone;
        let rep = PadMode::ReplicateSpatial;
        let slow_stem = Conv3d::new(
            store,
            "backbone.slow_stem",
            Conv3dSpec::new(3, b.slow_stem, [1, 4, 4]).stride([1, 4, 4]),
            true,
            Init::Relu,
            rng,
        );
        let fast_stem = Conv3d::new(
            store,
            "backbone.fast_stem",
            Conv3dSpec::new(3, b.fast_stem, [3, 4, 4])
                .stride([1, 4, 4])
                .padding([1, 0, 0]),
            true,
            Init::Relu,
            rng,
        );
        let slow_block = ResBlock::new(store, "backbone.slow_block", b.slow_stem, b.slow_width, [1, 2, 2], rng);
        let fast_block = ResBlock::new(store, "backbone.fast_block", b.fast_stem, b.fast_width, [1, 2, 2], rng);
        let lateral = Conv3d::new(
            store,
            "backbone.lateral",
            Conv3dSpec::new(b.fast_width, b.lateral, [3, 1, 1])
                .stride([2, 1, 1])
                .padding([1, 0, 0]),
            true,
            Init::Relu,
            rng,
        );
        let block3 = ResBlock::new(store, "backbone.block3", b.slow_width + b.lateral, b.channels, [1, 1, 1], rng);
        let final_main = Conv3d::new(
            store,
            "backbone.final.main",
            Conv3dSpec::new(b.channels, b.channels, [3, 3, 3])
                .stride([1, 2, 2])
                .padding([1, 1, 1])
                .pad_mode(rep),
            true,
            Init::Relu,
            rng,
        );
        let final_expand = Conv3d::new(
            store,
            "backbone.final.expand",
            Conv3dSpec::new(b.channels, b.action_dim, [1, 1, 1]),
            true,
            Init::Relu,
            rng,
        );
        let final_shortcut = Conv3d::new(
            store,
            "backbone.final.shortcut",
            Conv3dSpec::new(b.channels, b.action_dim, [1, 1, 1]).stride([1, 2, 2]),
            true,
            Init::Linear,
            rng,
        );
        Self {
            slow_stem,
            fast_stem,
            slow_block,
            fast_block,
            lateral,
            block3,
            final_main,
            final_expand,
            final_shortcut,
            frames_in: cfg.data.frames_in,
            frames: cfg.data.frames,
            size: cfg.data.size,
        }
    }

    /// Spatial size of the pooled volume.
    pub fn volume_side(&self) -> usize {
        self.size / 8
    }

    pub fn forward(&self, g: &mut Graph<'_>, clip: &VideoClip) -> Result<BackboneOutput> {
        if clip.num_frames() != self.frames_in || clip.height() != self.size || clip.width() != self.size {
            return Err(IrnError::Shape(format!(
                "clip {} is {:?}, backbone expects [{}, {s}, {s}, 3]",
                clip.clip_id,
                clip.frames.shape(),
                self.frames_in,
                s = self.size
            )));
        }
        let slow_in = g.input(clip.gather_frames(&slow_indices(self.frames_in, self.frames))?);
        let fast_in = g.input(clip.gather_frames(&fast_indices(self.frames_in, self.frames))?);

        let slow = self.slow_stem.forward(g, slow_in)?;
        let slow = g.relu(slow);
        let slow = self.slow_block.forward(g, slow)?;

        let fast = self.fast_stem.forward(g, fast_in)?;
        let fast = g.relu(fast);
        let fast = self.fast_block.forward(g, fast)?;
        let lat = self.lateral.forward(g, fast)?;
        let lat = g.relu(lat);

        let dims = g.shape(slow).to_vec();
        if g.shape(lat)[..4] != dims[..4] {
            return Err(IrnError::Shape(format!(
                "lateral {:?} does not align with slow {:?}",
                g.shape(lat),
                dims
            )));
        }
        let positions: usize = dims[..4].iter().product();
        let s2 = g.reshape(slow, &[positions, dims[4]])?;
        let l2 = g.reshape(lat, &[positions, g.shape(lat)[4]])?;
        let fused = g.concat_cols(&[s2, l2])?;
        let width = g.shape(fused)[1];
        let fused = g.reshape(fused, &[dims[0], dims[1], dims[2], dims[3], width])?;

        let volume = self.block3.forward(g, fused)?;

        let m = self.final_main.forward(g, volume)?;
        let m = g.relu(m);
        let m = self.final_expand.forward(g, m)?;
        let s = self.final_shortcut.forward(g, volume)?;
        let f = g.add(m, s)?;
        let f = g.relu(f);
        let fshape = g.shape(f).to_vec();
        let p: usize = fshape[..4].iter().product();
        let f = g.reshape(f, &[p, fshape[4]])?;
        let action = g.mean_row_groups(f, p)?;
        Ok(BackboneOutput { volume, action })
    }

    /// Value-level forward returning the pooled volume and `F`.
    pub fn run(&self, store: &ParamStore, clip: &VideoClip) -> Result<(FeatureVolume, ActionRepresentation)> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, clip)?;
        let v = g.value(out.volume);
        let s = v.shape();
        let values = v.clone().reshaped(&s[1..])?;
        Ok((
            FeatureVolume { values },
            ActionRepresentation {
                vector: g.value(out.action).data().to_vec(),
            },
        ))
    }
}

/// Gather plan averaging the volume cells whose centers lie in `b` at frame
/// `t` (at least the cell holding the box center). An absent box yields an
/// empty row, i.e. a zero feature.
pub fn roi_gather_row(dims: [usize; 3], b: Option<&BoundingBox>, t: usize) -> GatherRow {
    let [_, h, w] = dims;
    let Some(b) = b else { return Vec::new() };
    let cells = b.covered_cells(h, w);
    let weight = 1.0 / cells.len() as f64;
    cells
        .into_iter()
        .map(|(i, j)| ((t * h + i) * w + j, weight))
        .collect()
}

/// RoI average pooling on a materialized volume.
pub fn roi_average_pool(volume: &FeatureVolume, b: Option<&BoundingBox>, t: usize) -> PooledDetectionFeature {
    let c = volume.channels();
    let mut vector = vec![0.0; c];
    for (row, wgt) in roi_gather_row(volume.dims(), b, t) {
        vector
            .iter_mut()
            .zip(volume.values.row(row))
            .for_each(|(o, v)| *o += wgt * v);
    }
    PooledDetectionFeature {
        vector,
        frame_index: t,
    }
}

/// Bilinear resize of a `[h, w, c]` image (half-pixel centers, edge clamp).
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w * c];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(oy * out_w + ox) * c + ch] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Crops frame `t` of the clip to the box (snapped to whole pixels) and
/// resizes it to `patch x patch`. `None` when the snapped crop is empty.
pub fn crop_patch(clip: &VideoClip, t: usize, b: &BoundingBox, patch: usize) -> Option<Vec<f64>> {
    let (h, w) = (clip.height(), clip.width());
    let px0 = (b.x0 * w as f64).round() as usize;
    let px1 = ((b.x1 * w as f64).round() as usize).min(w);
    let py0 = (b.y0 * h as f64).round() as usize;
    let py1 = ((b.y1 * h as f64).round() as usize).min(h);
    if px1 <= px0 || py1 <= py0 {
        return None;
    }
    let frame = clip.frame(t);
    let (ch, cw) = (py1 - py0, px1 - px0);
    let mut crop = Vec::with_capacity(ch * cw * 3);
    for y in py0..py1 {
        crop.extend_from_slice(&frame[(y * w + px0) * 3..(y * w + px1) * 3]);
    }
    Some(bilinear_resize(&crop, ch, cw, 3, patch, patch))
}

/// Parameter-shared two-layer perceptron over flattened detection patches.
#[derive(Clone, Debug)]
pub struct PatchMlp {
    mlp: FeedForward,
    pub patch: usize,
}

impl PatchMlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, patch: usize, out_dim: usize, rng: &mut R) -> Self {
        let input = patch * patch * 3;
        Self {
            mlp: FeedForward::new(store, "patch_mlp", input, 2 * out_dim, out_dim, true, rng),
            patch,
        }
    }

    /// Embeds one patch per row; rows whose patch is `None` come out zero.
    pub fn forward(&self, g: &mut Graph<'_>, patches: &[Option<Vec<f64>>]) -> Result<Var> {
        let width = self.patch * self.patch * 3;
        let mut data = Vec::with_capacity(patches.len() * width);
        for p in patches {
            match p {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(std::iter::repeat_n(0.0, width)),
            }
        }
        let x = g.input(Tensor::from_vec(&[patches.len(), width], data)?);
        let y = self.mlp.forward(g, x)?;
        let out_dim = g.shape(y)[1];
        let mask = patches
            .iter()
            .flat_map(|p| std::iter::repeat_n(if p.is_some() { 1.0 } else { 0.0 }, out_dim))
            .collect();
        g.mul_const(y, mask)
    }

    /// Value-level embedding of a single detection.
    pub fn embed(
        &self,
        store: &ParamStore,
        clip: &VideoClip,
        b: Option<&BoundingBox>,
        t: usize,
    ) -> Result<PooledDetectionFeature> {
        let patch = b.and_then(|b| crop_patch(clip, t, b, self.patch));
        let mut g = Graph::new(store);
        let y = self.forward(&mut g, &[patch])?;
        Ok(PooledDetectionFeature {
            vector: g.value(y).data().to_vec(),
            frame_index: t,
        })
    }
}
