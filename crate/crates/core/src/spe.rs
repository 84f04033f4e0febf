//! Spatial position encoder: a weight-shared 3D ConvNet that turns a track's
//! stacked binary occupancy maps into one `C`-dim encoding per frame, plus
//! the fusion of those encodings with pooled visual features.

use rand::Rng;

use crate::config::{FusionMode, SpeConfig};
use crate::detections::BinaryMapSequence;
use crate::error::{IrnError, Result};
use crate::nn::{Conv3d, Init, Linear};
use crate::tensor::{Conv3dSpec, Graph, ParamStore, Tensor, Var};

/// Per-frame encodings of one track, `T x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEncodingSequence {
    pub encodings: Tensor,
}

impl PositionEncodingSequence {
    pub fn frames(&self) -> usize {
        self.encodings.rows()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.encodings.row(t)
    }
}

/// Three stride-2 (spatial) conv stages with temporal kernel 3, then a
/// per-frame flatten and linear projection. Flattening (rather than
/// averaging) the final grid keeps absolute position recoverable.
#[derive(Clone, Debug)]
pub struct SpatialPositionEncoder {
    stages: [Conv3d; 3],
    project: Linear,
    grid: usize,
    out_dim: usize,
}

impl SpatialPositionEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &SpeConfig,
        grid: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if grid < 8 || !grid.is_multiple_of(8) {
            return Err(IrnError::Shape(format!("SPE grid {grid} must be a multiple of 8")));
        }
        let [c1, c2, c3] = cfg.channels;
        let mut cin = 1;
        let mut stage = |i: usize, cout: usize, rng: &mut R| {
            let spec = Conv3dSpec::new(cin, cout, [3, 3, 3])
                .stride([1, 2, 2])
                .padding([1, 1, 1]);
            cin = cout;
            Conv3d::new(store, &format!("{name}.conv{i}"), spec, cfg.bias, Init::Relu, rng)
        };
        let stages = [stage(1, c1, rng), stage(2, c2, rng), stage(3, c3, rng)];
        let cell = grid / 8;
        let project = Linear::new(
            store,
            &format!("{name}.project"),
            cell * cell * c3,
            out_dim,
            cfg.bias,
            Init::Linear,
            rng,
        );
        Ok(Self {
            stages,
            project,
            grid,
            out_dim,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Encodes a batch of equally long map sequences with shared weights.
    /// Output rows are `[seq * T + t]`, each of width `C`.
    pub fn forward(&self, g: &mut Graph<'_>, maps: &[&BinaryMapSequence]) -> Result<Var> {
        let Some(first) = maps.first() else {
            return Err(IrnError::Shape("SPE needs at least one sequence".into()));
        };
        let frames = first.frames;
        let mut data = Vec::with_capacity(maps.len() * frames * self.grid * self.grid);
        for m in maps {
            if m.grid != self.grid || m.frames != frames {
                return Err(IrnError::Shape(format!(
                    "SPE expects {frames} x {g} x {g} maps, got {} x {} x {}",
                    m.frames,
                    m.grid,
                    m.grid,
                    g = self.grid
                )));
            }
            data.extend_from_slice(&m.data);
        }
        let x = Tensor::from_vec(&[maps.len(), frames, self.grid, self.grid, 1], data)?;
        let mut h = g.input(x);
        for stage in &self.stages {
            h = stage.forward(g, h)?;
            h = g.relu(h);
        }
        let width = g.value(h).len() / (maps.len() * frames);
        let flat = g.reshape(h, &[maps.len() * frames, width])?;
        self.project.forward(g, flat)
    }

    /// Value-level encoding of a single sequence.
    pub fn encode(&self, store: &ParamStore, maps: &BinaryMapSequence) -> Result<PositionEncodingSequence> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &[maps])?;
        Ok(PositionEncodingSequence {
            encodings: g.value(out).clone(),
        })
    }
}

/// Combines pooled features `a` with encodings `p` (both `[rows, C]`).
/// `concat` requires the `2C -> C` projection.
pub fn fuse(
    g: &mut Graph<'_>,
    features: Var,
    encodings: Var,
    mode: FusionMode,
    concat_proj: Option<&Linear>,
) -> Result<Var> {
    if g.shape(features) != g.shape(encodings) {
        return Err(IrnError::Shape(format!(
            "fuse {:?} with {:?}",
            g.shape(features),
            g.shape(encodings)
        )));
    }
    match mode {
        FusionMode::None => Ok(features),
        FusionMode::Sum => g.add(features, encodings),
        FusionMode::Concat => {
            let proj = concat_proj
                .ok_or_else(|| IrnError::Config("concat fusion needs a projection".into()))?;
            let cat = g.concat_cols(&[features, encodings])?;
            proj.forward(g, cat)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::{build_role_tracks, BoundingBox, FrameDetections, Role};
    use crate::gradcheck::{check_param_gradients, loss_and_grads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(grid: usize, c: usize, bias: bool, seed: u64) -> (ParamStore, SpatialPositionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = SpeConfig {
            channels: [8, 16, 32],
            bias,
        };
        let spe = SpatialPositionEncoder::new(&mut store, "spe", &cfg, grid, c, &mut rng).unwrap();
        (store, spe)
    }

    fn tiled(b: Option<BoundingBox>, t: usize, grid: usize) -> BinaryMapSequence {
        let frames: Vec<_> = (0..t)
            .map(|i| {
                let mut f = FrameDetections::empty(i);
                f.set(Role::HandRight, b);
                f
            })
            .collect();
        let tracks = build_role_tracks(&frames, t).unwrap();
        BinaryMapSequence::from_track(tracks.get(Role::HandRight), grid).unwrap()
    }

    #[test]
    fn blank_maps_encode_to_zero_without_bias() {
        let (store, spe) = encoder(16, 8, false, 0);
        let enc = spe.encode(&store, &tiled(None, 4, 16)).unwrap();
        assert!(enc.encodings.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_t_by_c() {
        let (store, spe) = encoder(64, 64, true, 0);
        let b = BoundingBox::new(0.2, 0.2, 0.4, 0.5, 1.0).unwrap();
        let enc = spe.encode(&store, &tiled(Some(b), 8, 64)).unwrap();
        assert_eq!(enc.encodings.shape(), &[8, 64]);
        assert_eq!(enc.frames(), 8);
        assert!(spe.encode(&store, &tiled(Some(b), 8, 32)).is_err());
    }

    #[test]
    fn absolute_position_is_not_collapsed() {
        for seed in 0..3 {
            let (store, spe) = encoder(32, 16, true, seed);
            let tl = BoundingBox::new(0.05, 0.05, 0.3, 0.3, 1.0).unwrap();
            let br = BoundingBox::new(0.7, 0.7, 0.95, 0.95, 1.0).unwrap();
            let a = spe.encode(&store, &tiled(Some(tl), 4, 32)).unwrap();
            let b = spe.encode(&store, &tiled(Some(br), 4, 32)).unwrap();
            assert!(a.encodings.max_abs_diff(&b.encodings) > 1e-6);
        }
    }

    #[test]
    fn shared_weights_across_roles() {
        let (store, spe) = encoder(16, 8, true, 4);
        let b = BoundingBox::new(0.3, 0.1, 0.6, 0.4, 1.0).unwrap();
        let maps = tiled(Some(b), 3, 16);
        let mut g = Graph::new(&store);
        let out = spe.forward(&mut g, &[&maps, &maps]).unwrap();
        let v = g.value(out);
        for t in 0..3 {
            assert_eq!(v.row(t), v.row(3 + t));
        }
    }

    #[test]
    fn fuse_modes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let p = g.input(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap());
        let z = g.input(Tensor::zeros(&[1, 2]));
        let s = fuse(&mut g, a, p, FusionMode::Sum, None).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let n = fuse(&mut g, a, p, FusionMode::None, None).unwrap();
        assert_eq!(g.value(n).data(), &[1.0, 2.0]);
        let s0 = fuse(&mut g, a, z, FusionMode::Sum, None).unwrap();
        assert_eq!(g.value(s0).data(), g.value(a).data());
        assert!(fuse(&mut g, a, p, FusionMode::Concat, None).is_err());
    }

    #[test]
    fn fuse_concat_projects_back_to_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "fuse", 4, 2, true, Init::Linear, &mut rng);
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let p = g.input(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap());
        let y = fuse(&mut g, a, p, FusionMode::Concat, Some(&proj)).unwrap();
        let w = store.get(proj.weight).data();
        let x = [1.0, 2.0, 3.0, 4.0];
        for j in 0..2 {
            let expect: f64 = (0..4).map(|i| x[i] * w[i * 2 + j]).sum();
            assert!((g.value(y).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, spe) = encoder(8, 4, true, 9);
        // Non-zero biases so the bias path is exercised; none sits exactly at a
        // ReLU kink on the blank background.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).ends_with(".bias") {
                let n = store.get(id).len();
                for i in 0..n {
                    store.get_mut(id).data_mut()[i] = 0.07 * i as f64 - 0.187;
                }
            }
        }
        let b1 = BoundingBox::new(0.1, 0.2, 0.6, 0.7, 1.0).unwrap();
        let b2 = BoundingBox::new(0.4, 0.0, 0.9, 0.5, 1.0).unwrap();
        let frames: Vec<_> = [b1, b2]
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut f = FrameDetections::empty(i);
                f.set(Role::ObjectLeft, Some(*b));
                f
            })
            .collect();
        let tracks = build_role_tracks(&frames, 2).unwrap();
        let maps = BinaryMapSequence::from_track(tracks.get(Role::ObjectLeft), 8).unwrap();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let report = check_param_gradients(
            &mut store,
            |s| {
                loss_and_grads(s, |g| {
                    let out = spe.forward(g, &[&maps]).unwrap();
                    g.dot_const(out, weights.clone()).unwrap()
                })
            },
            1e-5,
        );
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
