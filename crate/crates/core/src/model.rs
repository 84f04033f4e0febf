//! End-to-end network: backbone, per-detection features, position encoding,
//! interaction unit and classifier.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{crop_patch, roi_gather_row, slow_indices, Backbone, PatchMlp, VideoClip};
use crate::config::{ActionRep, DecoderKv, DetectionRep, ExperimentConfig, FusionMode, PairMask, TrajMode};
use crate::detections::{BinaryMapSequence, Role, RoleTracks};
use crate::error::{IrnError, Result};
use crate::interaction::{
    attention_scale, concat_fusion_head, AttnOptions, ClassifierHead, Decoder, EncoderBank, EncoderBankOutput,
};
use crate::nn::{Init, Linear};
use crate::spe::{fuse, SpatialPositionEncoder};
use crate::tensor::{Gradients, Graph, ParamStore, Var};

/// One clip with its role tracks over the `T` sampled frames.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub clip: VideoClip,
    pub tracks: RoleTracks,
}

/// Everything a forward pass exposes for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// `[1, M]` action representation `F`.
    pub action: Var,
    /// `[1, T, H', W', C]`.
    pub volume: Var,
    /// Fused, presence-masked trajectories `[4 T', C]`, rows `role * T' + t`.
    pub trajectories: Var,
    /// Pooled (or patch-embedded) features before fusion, same layout.
    pub features: Var,
    /// Position encodings, same layout, when the SPE is enabled.
    pub encodings: Option<Var>,
    pub presence: Vec<bool>,
    pub encoder: EncoderBankOutput,
    /// Decoder attention per layer, per head; empty when bypassed.
    pub decoder_attention: Vec<Vec<Var>>,
    /// Decoder output `I` when the decoder ran.
    pub decoded: Option<Var>,
}

/// Module structure; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct IrnNet {
    pub backbone: Backbone,
    pub spe: Option<SpatialPositionEncoder>,
    pub fuse_proj: Option<Linear>,
    pub patch_mlp: Option<PatchMlp>,
    pub bank: EncoderBank,
    pub decoder: Decoder,
    pub head: ClassifierHead,
    config: ExperimentConfig,
}

impl IrnNet {
    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Forward with the configured pair mask.
    pub fn forward(&self, g: &mut Graph<'_>, input: &ModelInput, rng: &mut dyn RngCore) -> Result<ForwardTrace> {
        self.forward_masked(g, input, self.config.ablation.pairs, rng)
    }

    /// Forward with an explicit pair mask (used for evaluation-time masking).
    pub fn forward_masked(
        &self,
        g: &mut Graph<'_>,
        input: &ModelInput,
        pairs: PairMask,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let frames = cfg.data.frames;
        if input.tracks.frames() != frames {
            return Err(IrnError::Detections(format!(
                "clip {} has {}-frame tracks, model expects {frames}",
                input.clip.clip_id,
                input.tracks.frames()
            )));
        }
        let bb = self.backbone.forward(g, &input.clip)?;

        let mid = frames / 2;
        let (tracks, src): (RoleTracks, Vec<usize>) = match cfg.ablation.traj_mode {
            TrajMode::Trajectory => (input.tracks.clone(), (0..frames).collect()),
            TrajMode::Duplicate => (input.tracks.duplicate_frame(mid), (0..frames).collect()),
            TrajMode::Middle => (input.tracks.select_frame(mid), vec![mid]),
        };
        let tlen = src.len();
        let c = cfg.backbone.channels;

        let mut presence = Vec::with_capacity(4 * tlen);
        for role in Role::ALL {
            presence.extend(tracks.get(role).presence());
        }

        let features = match cfg.ablation.detection_rep {
            DetectionRep::Roi => {
                let vshape = g.shape(bb.volume).to_vec();
                let dims = [vshape[1], vshape[2], vshape[3]];
                let flat = g.reshape(bb.volume, &[dims.iter().product(), vshape[4]])?;
                let mut plan = Vec::with_capacity(4 * tlen);
                for role in Role::ALL {
                    for (t, &s) in src.iter().enumerate() {
                        plan.push(roi_gather_row(dims, tracks.get(role).boxes[t].as_ref(), s));
                    }
                }
                g.gather_rows(flat, plan)?
            }
            DetectionRep::Mlp => {
                let mlp = self.patch_mlp.as_ref().expect("patch MLP built for mlp mode");
                let idx = slow_indices(cfg.data.frames_in, frames);
                let mut patches = Vec::with_capacity(4 * tlen);
                for role in Role::ALL {
                    for (t, &s) in src.iter().enumerate() {
                        patches.push(
                            tracks.get(role).boxes[t]
                                .as_ref()
                                .and_then(|b| crop_patch(&input.clip, idx[s], b, mlp.patch)),
                        );
                    }
                }
                mlp.forward(g, &patches)?
            }
        };

        let (fused, encodings) = match (&self.spe, cfg.ablation.spe_mode) {
            (Some(spe), mode) if mode != FusionMode::None => {
                let maps = Role::ALL
                    .iter()
                    .map(|&r| BinaryMapSequence::from_track(tracks.get(r), cfg.data.grid))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&BinaryMapSequence> = maps.iter().collect();
                let p = spe.forward(g, &refs)?;
                (fuse(g, features, p, mode, self.fuse_proj.as_ref())?, Some(p))
            }
            _ => (features, None),
        };
        let mask = presence
            .iter()
            .flat_map(|&p| std::iter::repeat_n(if p { 1.0 } else { 0.0 }, c))
            .collect();
        let trajectories = g.mul_const(fused, mask)?;
        let mut roles = [trajectories; 4];
        for (i, r) in roles.iter_mut().enumerate() {
            *r = g.slice_rows(trajectories, i * tlen, tlen)?;
        }

        let ic = &cfg.interaction;
        let m = cfg.backbone.action_dim;
        let enc_opts = AttnOptions {
            heads: ic.heads,
            scale: attention_scale(ic.attn_scale, c, ic.heads, tlen * c),
            dropout: ic.dropout,
        };
        let dec_opts = AttnOptions {
            heads: ic.heads,
            scale: attention_scale(ic.attn_scale, m, ic.heads, m),
            dropout: ic.dropout,
        };
        let use_decoder = cfg.ablation.use_decoder == ActionRep::Decoder;
        let want_tokens = use_decoder && ic.decoder_kv == DecoderKv::SixTokens;
        let encoder = self.bank.forward(g, &roles, pairs, want_tokens, enc_opts, rng)?;

        let mut decoder_attention = Vec::new();
        let mut decoded = None;
        let logits = match cfg.ablation.use_decoder {
            ActionRep::Decoder => match self.decoder.memory(&encoder) {
                Some(memory) => {
                    let traces = self.decoder.forward(g, bb.action, memory, dec_opts, rng)?;
                    let out = traces.last().expect("at least one layer").out;
                    decoder_attention = traces.into_iter().map(|t| t.weights).collect();
                    decoded = Some(out);
                    self.head.forward(g, out)?
                }
                // No interaction pairs: backbone plus classifier.
                None => self.head.forward(g, bb.action)?,
            },
            ActionRep::Concat => concat_fusion_head(g, &self.head, encoder.projected, bb.action)?,
            ActionRep::None => self.head.forward(g, encoder.projected)?,
        };
        Ok(ForwardTrace {
            logits,
            action: bb.action,
            volume: bb.volume,
            trajectories,
            features,
            encodings,
            presence,
            encoder,
            decoder_attention,
            decoded,
        })
    }
}

/// Network structure together with its parameters.
#[derive(Clone, Debug)]
pub struct IrnModel {
    pub store: ParamStore,
    pub net: IrnNet,
}

impl IrnModel {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let b = &config.backbone;
        let backbone = Backbone::new(&mut store, config, &mut rng);
        let spe = if config.ablation.spe_mode != FusionMode::None {
            Some(SpatialPositionEncoder::new(
                &mut store,
                "spe",
                &config.spe,
                config.data.grid,
                b.channels,
                &mut rng,
            )?)
        } else {
            None
        };
        let fuse_proj = (config.ablation.spe_mode == FusionMode::Concat)
            .then(|| Linear::new(&mut store, "fuse.project", 2 * b.channels, b.channels, true, Init::Linear, &mut rng));
        let patch_mlp = (config.ablation.detection_rep == DetectionRep::Mlp)
            .then(|| PatchMlp::new(&mut store, b.patch_size, b.channels, &mut rng));
        let bank = EncoderBank::new(
            &mut store,
            &config.interaction,
            config.trajectory_len(),
            b.channels,
            b.action_dim,
            &mut rng,
        );
        let decoder = Decoder::new(&mut store, &config.interaction, b.action_dim, &mut rng);
        let head = ClassifierHead::new(
            &mut store,
            config.ablation.use_decoder,
            b.action_dim,
            config.data.num_classes,
            &mut rng,
        );
        Ok(Self {
            store,
            net: IrnNet {
                backbone,
                spe,
                fuse_proj,
                patch_mlp,
                bank,
                decoder,
                head,
                config: config.clone(),
            },
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.net.config()
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        self.predict_masked(input, self.config().ablation.pairs)
    }

    pub fn predict_masked(&self, input: &ModelInput, pairs: PairMask) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        // Dropout is inactive in evaluation mode; the generator is unused.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.net.forward_masked(&mut g, input, pairs, &mut rng)?;
        Ok(g.value(trace.logits).data().to_vec())
    }

    /// Training-mode forward and backward for one sample; gradients are
    /// accumulated into `grads`. Returns the loss.
    pub fn accumulate_gradients(
        &self,
        input: &ModelInput,
        label: usize,
        rng: &mut dyn RngCore,
        grads: &mut Gradients,
    ) -> Result<f64> {
        Ok(self.train_sample(input, label, rng, grads)?.0)
    }

    /// Like [`IrnModel::accumulate_gradients`], also returning the logits.
    pub fn train_sample(
        &self,
        input: &ModelInput,
        label: usize,
        rng: &mut dyn RngCore,
        grads: &mut Gradients,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::training(&self.store);
        let trace = self.net.forward(&mut g, input, rng)?;
        let loss = g.cross_entropy(trace.logits, label)?;
        let value = g.value(loss).data()[0];
        let logits = g.value(trace.logits).data().to_vec();
        g.backward(loss, grads);
        Ok((value, logits))
    }
}
