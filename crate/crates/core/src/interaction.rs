//! Interaction unit: six pairwise (hand, counterpart) encoders, the
//! projection of their encodings to the action width, the
//! self-attention-free decoder queried by `F`, and the classifier heads.

use rand::{Rng, RngCore};

use crate::config::{ActionRep, AttnScale, DecoderKv, InteractionConfig, PairMask};
use crate::detections::Role;
use crate::error::{IrnError, Result};
use crate::nn::{init_weight, FeedForward, Init, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// The six (query hand, memory counterpart) pairs in concatenation order.
pub const PAIRS: [(Role, Role); 6] = [
    (Role::HandLeft, Role::ObjectLeft),
    (Role::HandLeft, Role::ObjectRight),
    (Role::HandLeft, Role::HandRight),
    (Role::HandRight, Role::ObjectRight),
    (Role::HandRight, Role::ObjectLeft),
    (Role::HandRight, Role::HandLeft),
];

/// Short name of pair `p`, e.g. `hl_ol`.
pub fn pair_name(p: usize) -> String {
    let (q, m) = PAIRS[p];
    format!("{}_{}", q.code(), m.code()).to_lowercase()
}

/// Scaled dot-product attention with `heads` column groups. `q` is
/// `[tq, d]`, `k` and `v` are `[tk, d]`. Returns the concatenated head
/// outputs `[tq, d]` and the per-head weight matrices `[tq, tk]`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: f64,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    if heads == 0 || !d.is_multiple_of(heads) || g.shape(k)[1] != d || g.shape(v)[1] != d || g.shape(k)[0] != g.shape(v)[0] {
        return Err(IrnError::Shape(format!(
            "attention q {:?} k {:?} v {:?} with {heads} heads",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits);
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Options shared by every attention block of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AttnOptions {
    pub heads: usize,
    pub scale: f64,
    pub dropout: f64,
}

/// One residual cross-attention block: `E' = Attn(XWq, MWk, MWv) + XWq`,
/// `E'' = dropout(FFN(E')) + E'`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub ffn: FeedForward,
}

/// Intermediate results of an [`AttentionLayer`].
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub q: Var,
    pub pre_ffn: Var,
    pub out: Var,
    pub weights: Vec<Var>,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        dim: usize,
        ffn_mult: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), query_dim, dim, bias, Init::Linear, rng),
            wk: Linear::new(store, &format!("{name}.wk"), memory_dim, dim, bias, Init::Linear, rng),
            wv: Linear::new(store, &format!("{name}.wv"), memory_dim, dim, bias, Init::Linear, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_mult * dim, dim, bias, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        memory: Var,
        opts: AttnOptions,
        rng: &mut dyn RngCore,
    ) -> Result<LayerTrace> {
        let q = self.wq.forward(g, query)?;
        let k = self.wk.forward(g, memory)?;
        let v = self.wv.forward(g, memory)?;
        let (a, weights) = multi_head_attention(g, q, k, v, opts.heads, opts.scale)?;
        let pre_ffn = g.add(a, q)?;
        let f = self.ffn.forward(g, pre_ffn)?;
        let f = g.dropout(f, opts.dropout, rng)?;
        let out = g.add(f, pre_ffn)?;
        Ok(LayerTrace {
            q,
            pre_ffn,
            out,
            weights,
        })
    }
}

/// Stack of attention layers. Layer 1 queries with the input; later layers
/// query with the previous output and re-project the same memory.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        ffn_mult: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| AttentionLayer::new(store, &format!("{name}.layer{l}"), dim, dim, dim, ffn_mult, bias, rng))
                .collect(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        memory: Var,
        opts: AttnOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<LayerTrace>> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        let mut x = query;
        for layer in &self.layers {
            let t = layer.forward(g, x, memory, opts, rng)?;
            x = t.out;
            traces.push(t);
        }
        Ok(traces)
    }
}

/// Per-pair encodings and the projected encoder output.
#[derive(Clone, Debug)]
pub struct EncoderBankOutput {
    /// Flattened `[1, N]` encodings; `None` for masked pairs (zero block).
    pub pairs: [Option<Var>; 6],
    /// Concatenated `[1, 6N]` encoding with zero blocks for masked pairs.
    pub concatenated: Var,
    /// `[1, M]` projection of the concatenation.
    pub projected: Var,
    /// `[k, M]` per-pair tokens for the enabled pairs, in pair order.
    pub tokens: Option<Var>,
    /// Attention weights per pair, per layer, per head.
    pub attention: Vec<(usize, Vec<Vec<Var>>)>,
}

/// Six independent pair encoders plus the `6N -> M` projection.
#[derive(Clone, Debug)]
pub struct EncoderBank {
    pub encoders: Vec<AttentionStack>,
    pub proj_weight: ParamId,
    pub proj_bias: Option<ParamId>,
    pub frames: usize,
    pub channels: usize,
    pub out_dim: usize,
}

impl EncoderBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &InteractionConfig,
        frames: usize,
        channels: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let encoders = (0..6)
            .map(|p| {
                AttentionStack::new(
                    store,
                    &format!("encoder.{}", pair_name(p)),
                    cfg.layers,
                    channels,
                    cfg.ffn_mult,
                    cfg.bias,
                    rng,
                )
            })
            .collect();
        let n = frames * channels;
        // Each pair's slice of the projection sees an N-wide input.
        let proj_weight = store.add("encoder.project.weight", init_weight(rng, &[6 * n, out_dim], n, Init::Linear));
        let proj_bias = cfg
            .bias
            .then(|| store.add("encoder.project.bias", Tensor::zeros(&[out_dim])));
        Self {
            encoders,
            proj_weight,
            proj_bias,
            frames,
            channels,
            out_dim,
        }
    }

    pub fn pair_dim(&self) -> usize {
        self.frames * self.channels
    }

    /// Encodes one pair: `query` and `memory` are `[T, C]`. Returns the
    /// per-layer traces; the last trace's `out` is `E''`.
    pub fn encode_pair(
        &self,
        g: &mut Graph<'_>,
        p: usize,
        query: Var,
        memory: Var,
        opts: AttnOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<LayerTrace>> {
        self.encoders[p].forward(g, query, memory, opts, rng)
    }

    /// `trajectories` holds the `[T, C]` trajectory of each role in
    /// [`Role::ALL`] order.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        trajectories: &[Var; 4],
        mask: PairMask,
        want_tokens: bool,
        opts: AttnOptions,
        rng: &mut dyn RngCore,
    ) -> Result<EncoderBankOutput> {
        let n = self.pair_dim();
        for &t in trajectories {
            if g.shape(t) != [self.frames, self.channels] {
                return Err(IrnError::Shape(format!(
                    "trajectory {:?}, expected [{}, {}]",
                    g.shape(t),
                    self.frames,
                    self.channels
                )));
            }
        }
        let enabled = mask.to_array();
        let mut pairs: [Option<Var>; 6] = [None; 6];
        let mut attention = Vec::new();
        for p in 0..6 {
            if !enabled[p] {
                continue;
            }
            let (qr, mr) = PAIRS[p];
            let traces = self.encode_pair(g, p, trajectories[qr.index()], trajectories[mr.index()], opts, rng)?;
            let last = traces.last().expect("at least one layer").out;
            pairs[p] = Some(g.reshape(last, &[1, n])?);
            attention.push((p, traces.into_iter().map(|t| t.weights).collect()));
        }
        let blocks: Vec<Var> = pairs
            .iter()
            .map(|e| e.unwrap_or_else(|| g.input(Tensor::zeros(&[1, n]))))
            .collect();
        let concatenated = g.concat_cols(&blocks)?;
        let w = g.param(self.proj_weight);
        let mut projected = g.matmul(concatenated, w)?;
        let bias = self.proj_bias.map(|b| g.param(b));
        if let Some(b) = bias {
            projected = g.add_bias(projected, b)?;
        }
        let tokens = if want_tokens {
            let mut rows = Vec::new();
            for (p, e) in pairs.iter().enumerate() {
                if let Some(e) = e {
                    let wp = g.slice_rows(w, p * n, n)?;
                    let mut t = g.matmul(*e, wp)?;
                    if let Some(b) = bias {
                        t = g.add_bias(t, b)?;
                    }
                    rows.push(t);
                }
            }
            match rows.len() {
                0 => None,
                1 => Some(rows[0]),
                _ => Some(g.concat_rows(&rows)?),
            }
        } else {
            None
        };
        Ok(EncoderBankOutput {
            pairs,
            concatenated,
            projected,
            tokens,
            attention,
        })
    }
}

/// Decoder stack: queries with `F`, attends over encoder memory tokens.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stack: AttentionStack,
    pub kv: DecoderKv,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &InteractionConfig, dim: usize, rng: &mut R) -> Self {
        Self {
            stack: AttentionStack::new(store, "decoder", cfg.layers, dim, cfg.ffn_mult, cfg.bias, rng),
            kv: cfg.decoder_kv,
        }
    }

    /// `action` is `[1, M]`; `memory` is `[k, M]`. Returns per-layer
    /// traces; the last `out` is `I`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        action: Var,
        memory: Var,
        opts: AttnOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<LayerTrace>> {
        self.stack.forward(g, action, memory, opts, rng)
    }

    /// Memory for this layout from the bank output, if any pair is enabled.
    pub fn memory(&self, enc: &EncoderBankOutput) -> Option<Var> {
        match self.kv {
            DecoderKv::Single => enc.pairs.iter().any(|p| p.is_some()).then_some(enc.projected),
            DecoderKv::SixTokens => enc.tokens,
        }
    }
}

/// Attention scale for blocks of width `dim` (`pair_dim` is `N` for the
/// encoders and `M` for the decoder).
pub fn attention_scale(mode: AttnScale, dim: usize, heads: usize, pair_dim: usize) -> f64 {
    match mode {
        AttnScale::PerHead => 1.0 / ((dim / heads) as f64).sqrt(),
        AttnScale::SqrtN => 1.0 / (pair_dim as f64).sqrt(),
    }
}

/// Final classifier; its input width depends on the action representation.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: Linear,
    pub mode: ActionRep,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        mode: ActionRep,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let in_dim = match mode {
            ActionRep::Concat => 2 * dim,
            ActionRep::None | ActionRep::Decoder => dim,
        };
        Self {
            fc: Linear::new(store, "head.fc", in_dim, classes, true, Init::Linear, rng),
            mode,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.fc.forward(g, x)
    }
}

/// Late fusion head: a linear classifier on `[E; F]`.
pub fn concat_fusion_head(g: &mut Graph<'_>, head: &ClassifierHead, enc: Var, action: Var) -> Result<Var> {
    let x = g.concat_cols(&[enc, action])?;
    head.forward(g, x)
}
