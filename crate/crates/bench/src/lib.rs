//! Benchmark fixtures. Core types are re-exported for the bench targets.

pub use irn_core::*;

use irn_core::detections::{build_role_tracks, FrameDetections};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random clip and boxes matching `cfg`'s input dimensions.
pub fn random_input(cfg: &ExperimentConfig, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.data.size;
    let n = cfg.data.frames_in * s * s * 3;
    let frames = Tensor::from_vec(&[cfg.data.frames_in, s, s, 3], (0..n).map(|_| rng.gen()).collect())
        .expect("shape matches data");
    let dets: Vec<FrameDetections> = (0..cfg.data.frames)
        .map(|t| {
            let mut f = FrameDetections::empty(t);
            for role in Role::ALL {
                let (x0, y0) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
                let b = BoundingBox::new(x0, y0, x0 + rng.gen_range(0.1..0.4), y0 + rng.gen_range(0.1..0.4), 0.9)
                    .expect("box inside the frame");
                f.set(role, Some(b));
            }
            f
        })
        .collect();
    ModelInput {
        clip: VideoClip::new("bench", 0, frames).expect("clip shape"),
        tracks: build_role_tracks(&dets, cfg.data.frames).expect("track length"),
    }
}

/// Random tensor with entries in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape product")
}
