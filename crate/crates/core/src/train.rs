//! Training loop, evaluation metrics, checkpoints and the ablation suite.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentSpec};
use crate::backbone::slow_indices;
use crate::config::{ActionRep, DetectionRep, ExperimentConfig, FusionMode, OptimizerSpec, PairMask, TrajMode};
use crate::detections::build_role_tracks;
use crate::error::{IrnError, Result};
use crate::model::{IrnModel, ModelInput};
use crate::synthdata::{inject_noise, ClipData, Dataset, NoiseSpec};
use crate::tensor::{Gradients, ParamStore, Tensor};

/// SplitMix64 finalizer; combines seeds into well-spread sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Optimizer

/// One momentum-SGD update of a flat parameter slice:
/// `g = grad / batch + wd * w`, `v = momentum * v + g`, `w -= lr * v`.
pub fn sgd_update(w: &mut [f64], v: &mut [f64], grad: &[f64], batch: usize, lr: f64, momentum: f64, wd: f64) {
    let inv = 1.0 / batch as f64;
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
        let g = g * inv + wd * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Momentum buffers for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Gradients,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Sgd {
    pub fn new(store: &ParamStore, spec: &OptimizerSpec) -> Self {
        Self {
            velocity: Gradients::zeros_like(store),
            momentum: spec.momentum,
            weight_decay: spec.weight_decay,
            grad_clip: spec.grad_clip,
        }
    }

    /// Applies gradients summed over `batch` samples, rescaling them first
    /// if the batch-mean gradient norm exceeds `grad_clip`. Returns that
    /// norm (before clipping).
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, batch: usize, lr: f64) -> f64 {
        let ids: Vec<_> = store.ids().collect();
        let norm = ids
            .iter()
            .flat_map(|&id| grads.get(id).data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
            / batch as f64;
        if self.grad_clip > 0.0 && norm > self.grad_clip {
            grads.scale(self.grad_clip / norm);
        }
        for id in ids {
            sgd_update(
                store.get_mut(id).data_mut(),
                self.velocity.get_mut(id).data_mut(),
                grads.get(id).data(),
                batch,
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
        norm
    }
}

// ---------------------------------------------------------------------------
// Inputs

/// Samples the `T` trajectory frames of a stored clip, optionally corrupts
/// its detections, and runs the augmentation pipeline.
pub fn prepare_input(
    clip: &ClipData,
    cfg: &ExperimentConfig,
    aug: &AugmentSpec,
    noise: Option<(&NoiseSpec, u64)>,
) -> Result<ModelInput> {
    let d = &cfg.data;
    if clip.dims[0] != d.frames_in {
        return Err(IrnError::Dataset(format!(
            "{}: {} frames, config expects {}",
            clip.clip_id, clip.dims[0], d.frames_in
        )));
    }
    let noisy;
    let record = match noise {
        Some((spec, seed)) => {
            noisy = inject_noise(&clip.record, spec, seed)?;
            &noisy
        }
        None => &clip.record,
    };
    let idx = slow_indices(d.frames_in, d.frames);
    let frames = record.sample(&idx, d.confidence_threshold)?;
    let tracks = build_role_tracks(&frames, d.frames)?;
    let (video, tracks) = augment(&clip.video()?, &tracks, aug)?;
    Ok(ModelInput { clip: video, tracks })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub config_hash: String,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall time.
    pub fn same_metrics(&self, other: &MetricsRecord) -> bool {
        (self.epoch, &self.split, self.top1, self.top5, self.loss, &self.config_hash)
            == (other.epoch, &other.split, other.top1, other.top5, other.loss, &other.config_hash)
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Number of classes scoring strictly higher than `label`.
pub fn rank_of(logits: &[f64], label: usize) -> usize {
    let v = logits[label];
    logits.iter().filter(|&&x| x > v).count()
}

/// `-log softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Per-clip results of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<usize>,
    pub ranks: Vec<usize>,
    pub losses: Vec<f64>,
    pub num_classes: usize,
}

impl EvalReport {
    pub fn from_logits(all: &[Vec<f64>], labels: &[usize]) -> Self {
        Self {
            labels: labels.to_vec(),
            ranks: all.iter().zip(labels).map(|(l, &y)| rank_of(l, y)).collect(),
            losses: all.iter().zip(labels).map(|(l, &y)| cross_entropy(l, y)).collect(),
            num_classes: all.first().map_or(0, |l| l.len()),
        }
    }

    fn frac(&self, pick: impl Fn(usize) -> bool, k: usize) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&y, &r) in self.labels.iter().zip(&self.ranks) {
            if pick(y) {
                n += 1;
                hit += (r < k) as usize;
            }
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }

    pub fn top1(&self) -> f64 {
        self.frac(|_| true, 1)
    }

    pub fn top5(&self) -> f64 {
        self.frac(|_| true, 5)
    }

    pub fn loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    /// Top-1 restricted to clips whose label is in `classes`.
    pub fn top1_on(&self, classes: &[usize]) -> f64 {
        self.frac(|y| classes.contains(&y), 1)
    }

    pub fn per_class_top1(&self) -> Vec<f64> {
        (0..self.num_classes).map(|c| self.top1_on(&[c])).collect()
    }

    pub fn record(&self, epoch: usize, split: &str, config_hash: &str, wall_time: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            split: split.to_string(),
            top1: self.top1(),
            top5: self.top5(),
            loss: self.loss(),
            config_hash: config_hash.to_string(),
            wall_time,
        }
    }
}

/// Evaluation-time perturbations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Detection corruption; clip `i` uses seed `mix_seed(noise_seed, i)`.
    pub noise: Option<NoiseSpec>,
    pub noise_seed: u64,
    /// Overrides the configured pair mask.
    pub pairs: Option<PairMask>,
}

/// Deterministic evaluation: dropout off, center processing only.
pub fn evaluate(model: &IrnModel, clips: &[ClipData], opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = model.config();
    let aug = AugmentSpec::from_config(cfg, 0)?.eval();
    let pairs = opts.pairs.unwrap_or(cfg.ablation.pairs);
    let mut logits = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let noise = opts.noise.as_ref().map(|n| (n, mix_seed(opts.noise_seed, i as u64)));
        let input = prepare_input(clip, cfg, &aug, noise)?;
        logits.push(model.predict_masked(&input, pairs)?);
    }
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    Ok(EvalReport::from_logits(&logits, &labels))
}

// ---------------------------------------------------------------------------
// Training

/// Trains `model` in place for `model.config().optim.epochs` epochs.
///
/// Everything random (shuffling, augmentation, dropout) is derived from
/// `seed`. After each epoch the training and (if given) validation records
/// are passed to `on_epoch` and collected into the returned history.
pub fn train(
    model: &mut IrnModel,
    train_clips: &[ClipData],
    val_clips: &[ClipData],
    seed: u64,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    let cfg = model.config().clone();
    let hash = cfg.hash();
    let spec = &cfg.optim;
    if train_clips.is_empty() {
        return Err(IrnError::Dataset("empty training split".into()));
    }
    let start = Instant::now();
    let mut opt = Sgd::new(&model.store, spec);
    let mut grads = Gradients::zeros_like(&model.store);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..spec.epochs {
        let lr = spec.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 1000 + epoch as u64)));
        let (mut logits, mut labels) = (Vec::with_capacity(order.len()), Vec::with_capacity(order.len()));
        let mut max_norm: f64 = 0.0;
        for batch in order.chunks(spec.batch_size) {
            grads.clear();
            for &i in batch {
                let clip = &train_clips[i];
                let aug_seed = mix_seed(mix_seed(seed, 2 + epoch as u64), i as u64);
                let input = prepare_input(clip, &cfg, &AugmentSpec::from_config(&cfg, aug_seed)?, None)?;
                let (loss, l) = model.train_sample(&input, clip.label, &mut dropout_rng, &mut grads)?;
                if !loss.is_finite() {
                    return Err(IrnError::Divergence { epoch, step, loss });
                }
                logits.push(l);
                labels.push(clip.label);
            }
            let norm = opt.step(&mut model.store, &mut grads, batch.len(), lr);
            max_norm = max_norm.max(norm);
            step += 1;
        }
        let tr = EvalReport::from_logits(&logits, &labels).record(epoch, "train", &hash, start.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch} lr {lr:.2e}: train loss {:.4} top1 {:.3} max grad norm {max_norm:.3}",
            tr.loss,
            tr.top1
        );
        on_epoch(&tr);
        history.push(tr);
        if !val_clips.is_empty() {
            let va = evaluate(model, val_clips, &EvalOptions::default())?.record(
                epoch,
                "val",
                &hash,
                start.elapsed().as_secs_f64(),
            );
            log::info!("epoch {epoch}: val loss {:.4} top1 {:.3} top5 {:.3}", va.loss, va.top1, va.top5);
            on_epoch(&va);
            history.push(va);
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IRNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes version tag, config snapshot and every named parameter array
/// (declared shape, little-endian f64 values).
pub fn save_checkpoint(model: &IrnModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let config = serde_json::to_vec(&model.config().to_value())?;
    w.write_u64::<LittleEndian>(config.len() as u64)?;
    w.write_all(&config)?;
    w.write_u32::<LittleEndian>(model.store.len() as u32)?;
    for (_, name, t) in model.store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<IrnModel> {
    let bad = |m: String| IrnError::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 24 {
        return Err(bad(format!("config length {len}")));
    }
    let mut config = vec![0u8; len];
    r.read_exact(&mut config)?;
    let config = ExperimentConfig::from_value(serde_json::from_slice(&config)?)?;
    let mut model = IrnModel::new(&config)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != model.store.len() {
        return Err(bad(format!("{count} arrays, model has {}", model.store.len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n > 4096 {
            return Err(bad(format!("name length {n}")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name".into()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        if ndim > 8 {
            return Err(bad(format!("{name}: {ndim} dims")));
        }
        let shape = (0..ndim)
            .map(|_| Ok(r.read_u64::<LittleEndian>()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model.store.find(&name).ok_or_else(|| bad(format!("unknown array {name}")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(bad(format!(
                "{name}: shape {shape:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        let mut data = vec![0.0; shape.iter().product()];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        *model.store.get_mut(id) = Tensor::from_vec(&shape, data)?;
        seen[id.0] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(bad("missing arrays".into()));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Runs

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const FINAL_FILE: &str = "final.json";

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: IrnModel,
    pub history: Vec<MetricsRecord>,
    /// Validation record after the last epoch.
    pub final_val: MetricsRecord,
}

/// Directory of a run, keyed by the config hash.
pub fn run_dir(root: &Path, config: &ExperimentConfig) -> PathBuf {
    root.join("runs").join(&config.hash()[..16])
}

/// Trains `config` on `dataset`, writing config, per-epoch metrics, the
/// final checkpoint and the final validation record to `dir`. A finished
/// run already present in `dir` is loaded instead of retrained.
pub fn run_experiment(config: &ExperimentConfig, dataset: &Dataset, dir: &Path) -> Result<RunOutcome> {
    if let Some(done) = load_run(config, dir)? {
        return Ok(done);
    }
    check_dataset(config, dataset)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_json_pretty())?;
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let mut model = IrnModel::new(config)?;
    let mut io_err = None;
    let history = train(&mut model, &dataset.train, &dataset.val, config.seed, |r| {
        if let Err(e) = append_metrics(&metrics, r) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let final_val = history
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .cloned()
        .ok_or_else(|| IrnError::Dataset("no validation clips".into()))?;
    save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(FINAL_FILE), serde_json::to_string_pretty(&final_val)?)?;
    Ok(RunOutcome {
        model,
        history,
        final_val,
    })
}

/// Loads a finished run from `dir` if it was trained with `config`.
pub fn load_run(config: &ExperimentConfig, dir: &Path) -> Result<Option<RunOutcome>> {
    let final_path = dir.join(FINAL_FILE);
    if !final_path.exists() || !dir.join(CHECKPOINT_FILE).exists() {
        return Ok(None);
    }
    let final_val: MetricsRecord = serde_json::from_str(&fs::read_to_string(final_path)?)?;
    if final_val.config_hash != config.hash() {
        return Ok(None);
    }
    let model = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let history = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(Some(RunOutcome {
        model,
        history,
        final_val,
    }))
}

fn check_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if m.num_classes() != config.data.num_classes {
        return Err(IrnError::Config(format!(
            "dataset has {} classes, config expects {}",
            m.num_classes(),
            config.data.num_classes
        )));
    }
    if m.render.frames != config.data.frames_in || m.render.size != config.data.size {
        return Err(IrnError::Config(format!(
            "dataset renders {}x{}x{} clips, config expects {}x{}x{}",
            m.render.frames, m.render.size, m.render.size, config.data.frames_in, config.data.size, config.data.size
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablations

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub group: &'static str,
    /// 1-based position within the group.
    pub row: usize,
    pub description: String,
    pub config: ExperimentConfig,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("{}/{}", self.group, self.row)
    }
}

pub const ABLATION_GROUPS: [&str; 5] = [
    "interaction-components",
    "trajectory",
    "position-encoding",
    "action-rep",
    "detection-rep",
];

fn pair_description(p: PairMask) -> String {
    let names = ["hl_ol", "hl_or", "hl_hr", "hr_or", "hr_ol", "hr_hl"];
    let on: Vec<&str> = names.iter().zip(p.to_array()).filter(|(_, b)| *b).map(|(n, _)| *n).collect();
    if on.is_empty() {
        "no pairs".into()
    } else if on.len() == 6 {
        "all pairs".into()
    } else {
        format!("pairs {}", on.join(","))
    }
}

/// Every ablation row, derived from `base` (the full model).
pub fn ablation_registry(base: &ExperimentConfig) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    let mut push = |group: &'static str, description: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        let row = rows.iter().filter(|r: &&AblationRow| r.group == group).count() + 1;
        rows.push(AblationRow {
            group,
            row,
            description,
            config,
        });
    };

    // Pair flags in the order (HL,OL) (HL,OR) (HL,HR) (HR,OR) (HR,OL) (HR,HL).
    let x = false;
    let o = true;
    let components: [[bool; 6]; 10] = [
        [x, x, x, x, x, x],
        [x, x, x, o, o, o],
        [x, o, o, o, o, o],
        [o, x, o, o, o, o],
        [o, o, x, o, o, o],
        [o, o, o, x, x, x],
        [o, o, o, x, o, o],
        [o, o, o, o, x, o],
        [o, o, o, o, o, x],
        [o, o, o, o, o, o],
    ];
    for flags in components {
        let p = PairMask::from_array(flags);
        push("interaction-components", pair_description(p), &|c| c.ablation.pairs = p);
    }

    let hr_hl = PairMask::from_array([x, x, x, x, x, o]);
    let right = PairMask::from_array([x, x, x, o, o, o]);
    for (mode, name) in [
        (TrajMode::Middle, "middle"),
        (TrajMode::Duplicate, "duplicate"),
        (TrajMode::Trajectory, "trajectory"),
    ] {
        push("trajectory", format!("{name}, right hand with left hand"), &|c| {
            c.ablation.traj_mode = mode;
            c.ablation.pairs = hr_hl;
        });
    }
    push("trajectory", "trajectory, right hand with objects".into(), &|c| c.ablation.pairs = right);
    push("trajectory", "trajectory, both hands with objects".into(), &|_| {});

    for (mode, name) in [(FusionMode::None, "none"), (FusionMode::Concat, "concat"), (FusionMode::Sum, "sum")] {
        push("position-encoding", name.into(), &|c| c.ablation.spe_mode = mode);
    }
    for (mode, name) in [(ActionRep::None, "none"), (ActionRep::Concat, "concat"), (ActionRep::Decoder, "decoder")] {
        push("action-rep", name.into(), &|c| c.ablation.use_decoder = mode);
    }
    for (mode, name) in [(DetectionRep::Mlp, "mlp"), (DetectionRep::Roi, "roi")] {
        push("detection-rep", name.into(), &|c| c.ablation.detection_rep = mode);
    }
    rows
}

/// Outcome of one ablation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub group: String,
    pub row: usize,
    pub description: String,
    pub config_hash: String,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub loss: Option<f64>,
    pub error: Option<String>,
}

/// Runs every row through `runner`, once per distinct config hash, and
/// records failures per row without stopping the suite.
pub fn run_rows(
    rows: &[AblationRow],
    mut runner: impl FnMut(&AblationRow) -> Result<MetricsRecord>,
) -> Vec<AblationResult> {
    let mut done: BTreeMap<String, std::result::Result<MetricsRecord, String>> = BTreeMap::new();
    rows.iter()
        .map(|row| {
            let hash = row.config.hash();
            let outcome = done
                .entry(hash.clone())
                .or_insert_with(|| {
                    log::info!("ablation {}: {}", row.label(), row.description);
                    runner(row).map_err(|e| e.to_string())
                })
                .clone();
            let (m, error) = match outcome {
                Ok(m) => (Some(m), None),
                Err(e) => {
                    log::warn!("ablation {} failed: {e}", row.label());
                    (None, Some(e))
                }
            };
            AblationResult {
                label: row.label(),
                group: row.group.to_string(),
                row: row.row,
                description: row.description.clone(),
                config_hash: hash,
                top1: m.as_ref().map(|m| m.top1),
                top5: m.as_ref().map(|m| m.top5),
                loss: m.as_ref().map(|m| m.loss),
                error,
            }
        })
        .collect()
}

pub const ABLATION_FILE: &str = "ablation.jsonl";

/// Trains and evaluates every registered row with identical seeds; runs
/// live under `out/runs/`, the table is written to `out/ablation.jsonl`.
pub fn run_ablation_suite(base: &ExperimentConfig, dataset: &Dataset, out: &Path) -> Result<Vec<AblationResult>> {
    run_ablation_rows(&ablation_registry(base), dataset, out)
}

pub fn run_ablation_rows(rows: &[AblationRow], dataset: &Dataset, out: &Path) -> Result<Vec<AblationResult>> {
    fs::create_dir_all(out)?;
    let results = run_rows(rows, |row| {
        Ok(run_experiment(&row.config, dataset, &run_dir(out, &row.config))?.final_val)
    });
    let mut text = String::new();
    for r in &results {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(out.join(ABLATION_FILE), text)?;
    Ok(results)
}
