//! Optimization, evaluation, checkpoints, and the comparison studies.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_batch, DatasetManifest, SampleBatch, Split};
use crate::error::{Error, Result};
use crate::loss_metrics::{composite_loss, metrics, LabelMap, LossWeights, MetricReport};
use crate::model::{ModelConfig, SegModel, Variant};
use crate::numerics::{decode_tensor, encode_tensor, DType, Element, Graph, Tensor};
use crate::params::ParamStore;
use crate::self_prompt::PROMPT_SWEEP_COUNTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 8, learning_rate: 1e-3, seed: 7, loss: LossWeights::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        self.loss.validate()
    }
}

/// Execution settings that do not affect results at one thread.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { threads: 1 }
    }
}

impl RunOptions {
    /// Reads `HSP_THREADS`, defaulting to one thread.
    pub fn from_env() -> Result<Self> {
        match std::env::var("HSP_THREADS") {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(RunOptions { threads: n }),
                _ => Err(Error::config(format!("HSP_THREADS must be a positive integer, got {v:?}"))),
            },
            Err(_) => Ok(RunOptions::default()),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))
    }
}

/// Adam without weight decay. Moments are kept in `f64` over the flattened
/// trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, size: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; size], v: vec![0.0; size] }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present when the manifest has a validation split.
    pub val_dice: Option<f64>,
}

/// Holds one run's model and optimizer.
pub struct Trainer {
    pub model: SegModel<f32>,
    pub config: TrainConfig,
    pub adam: Adam,
    pub steps: usize,
    options: RunOptions,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: SegModel<f32>, config: &TrainConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.learning_rate, model.trainable_count());
        Ok(Trainer { model, config: config.clone(), adam, steps: 0, options, pool: options.pool()? })
    }

    /// Per-sample losses and the batch-mean gradient over the flattened
    /// trainable parameters. Samples are reduced in batch order.
    pub fn loss_and_grad(&self, images: &[Tensor<f32>], labels: &[LabelMap]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trainable = self.model.store.trainable_ids();
        let size = self.model.trainable_count();
        let per_sample = |i: usize| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let p = self.model.store.bind(&mut g);
            let x = g.constant(images[i].clone());
            let out = self.model.forward(&mut g, &p, x)?;
            let loss = composite_loss(&mut g, out.logits, &labels[i], &self.config.loss)?;
            let value = g.value(loss).item()?.as_f64();
            g.backward(loss)?;
            let mut flat = Vec::with_capacity(size);
            for &id in &trainable {
                let grad = g.take_grad(p.var(id)).expect("trainable leaf has a gradient");
                flat.extend(grad.data().iter().map(|&v| v as f64));
            }
            Ok((value, flat))
        };
        let results: Vec<Result<(f64, Vec<f64>)>> = if self.options.threads > 1 {
            self.pool.install(|| (0..images.len()).into_par_iter().map(per_sample).collect())
        } else {
            (0..images.len()).map(per_sample).collect()
        };
        let mut losses = Vec::with_capacity(images.len());
        let mut total = vec![0.0; size];
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        let n = images.len() as f64;
        total.iter_mut().for_each(|v| *v /= n);
        Ok((losses, total))
    }

    /// One optimizer step on a batch; returns per-sample losses.
    pub fn step(&mut self, images: &[Tensor<f32>], labels: &[LabelMap]) -> Result<Vec<f64>> {
        self.steps += 1;
        let step = self.steps;
        let (losses, grads) = self.loss_and_grad(images, labels).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        if let Some(&bad) = losses.iter().find(|l| !l.is_finite()) {
            return Err(Error::Divergence { step, loss: bad });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        let mut flat = self.model.store.flatten_trainable().into_data();
        if self.model.trainable_count() == 0 {
            flat.clear();
        }
        self.adam.update(&mut flat, &grads);
        self.model.store.load_flat_trainable(&flat)?;
        Ok(losses)
    }
}

/// A trained model plus everything needed to resume or reproduce it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SegModel<f32>,
    pub train: TrainConfig,
    pub adam: Adam,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains from scratch on the manifest's train split.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, manifest: &DatasetManifest, options: RunOptions) -> Result<Checkpoint> {
    train_with_progress(model_config, config, manifest, options, |_| {})
}

pub fn train_with_progress(
    model_config: &ModelConfig,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    options: RunOptions,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    check_compatible(model_config, manifest)?;
    let model = SegModel::<f32>::new(model_config, config.seed)?;
    let mut trainer = Trainer::new(model, config, options)?;
    let n = manifest.splits.train.len();
    if n == 0 {
        return Err(Error::dataset(&manifest.root, "train split is empty"));
    }
    let data: SampleBatch<f32> = load_batch(manifest, Split::Train, &(0..n).collect::<Vec<_>>())?;
    let images: Vec<Tensor<f32>> = (0..n).map(|i| data.image(i)).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut losses = vec![0.0; n];
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<Tensor<f32>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let labs: Vec<LabelMap> = chunk.iter().map(|&i| data.labels[i].clone()).collect();
            for (&i, l) in chunk.iter().zip(trainer.step(&imgs, &labs)?) {
                losses[i] = l;
            }
        }
        let val_dice = if manifest.splits.val.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, manifest, Split::Val, options)?.aggregate.dice)
        };
        let record = EpochRecord { epoch, train_loss: losses.iter().sum::<f64>() / n as f64, val_dice };
        progress(&record);
        history.push(record);
    }
    Ok(Checkpoint { model: trainer.model, train: config.clone(), adam: trainer.adam, epoch: config.epochs, history })
}

fn check_compatible(model: &ModelConfig, manifest: &DatasetManifest) -> Result<()> {
    if model.encoder.image_size != manifest.image_size || model.decoder.num_classes != manifest.num_classes {
        return Err(Error::config(format!(
            "model expects {}px images with {} classes; dataset {} has {}px and {} classes",
            model.encoder.image_size, model.decoder.num_classes, manifest.name, manifest.image_size, manifest.num_classes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub aggregate: MetricReport,
    pub per_image: Vec<ImageReport>,
}

/// Prompt-free inference on a split; metrics on argmax labels.
pub fn evaluate(model: &SegModel<f32>, manifest: &DatasetManifest, split: Split, options: RunOptions) -> Result<EvalReport> {
    check_compatible(model.config(), manifest)?;
    let n = manifest.split(split).len();
    if n == 0 {
        return Err(Error::dataset(&manifest.root, format!("{split:?} split is empty")));
    }
    let data: SampleBatch<f32> = load_batch(manifest, split, &(0..n).collect::<Vec<_>>())?;
    let k = manifest.num_classes;
    let one = |i: usize| -> Result<ImageReport> {
        let (logits, _) = model.predict(&data.image(i))?;
        let pred = LabelMap::argmax(&logits)?;
        Ok(ImageReport { id: data.ids[i].clone(), report: metrics(&pred, &data.labels[i], k)? })
    };
    let per_image: Vec<ImageReport> = if options.threads > 1 {
        options.pool()?.install(|| (0..n).into_par_iter().map(one).collect::<Result<_>>())?
    } else {
        (0..n).map(one).collect::<Result<_>>()?
    };
    let reports: Vec<MetricReport> = per_image.iter().map(|r| r.report.clone()).collect();
    Ok(EvalReport { split, aggregate: MetricReport::mean(&reports)?, per_image })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    dtype: DType,
    backbone_seed: u64,
    frozen_digest: u64,
    epoch: usize,
    adam_step: u64,
    history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Trainable tensors and optimizer moments only; the frozen backbone is
    /// regenerated from its seed on load and checked against a digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let mut tensors: Vec<(String, Vec<u8>)> = store
            .trainable_ids()
            .into_iter()
            .map(|id| (store.name(id).to_string(), encode_tensor(store.get(id))))
            .collect();
        for (name, moment) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            if !moment.is_empty() {
                let t = Tensor::new([moment.len()], moment.clone()).expect("moment shape");
                tensors.push((name.to_string(), encode_tensor(&t)));
            }
        }
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            train: self.train.clone(),
            dtype: DType::F32,
            backbone_seed: self.model.config().backbone_seed,
            frozen_digest: store.frozen_digest(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            history: self.history.clone(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, bytes) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let len = read_u64(&mut r)? as usize;
            tensors.insert(name, take(&mut r, len)?);
        }
        let len = read_u64(&mut r)? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(take(&mut r, len)?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        if meta.dtype != DType::F32 {
            return Err(Error::Format(format!("checkpoint dtype {:?} is not f32", meta.dtype)));
        }
        let mut model = SegModel::<f32>::new(&meta.model, meta.train.seed)?;
        if model.store.frozen_digest() != meta.frozen_digest {
            return Err(Error::Format("regenerated backbone does not match the checkpoint digest".into()));
        }
        load_trainable(&mut model.store, &tensors)?;
        let mut adam = Adam::new(meta.train.learning_rate, model.trainable_count());
        adam.step = meta.adam_step;
        for (name, slot) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
            if let Some(bytes) = tensors.get(name) {
                let t: Tensor<f64> = decode_tensor(bytes)?;
                if t.numel() != slot.len() {
                    return Err(Error::Format(format!("{name} has {} entries, expected {}", t.numel(), slot.len())));
                }
                *slot = t.into_data();
            }
        }
        Ok(Checkpoint { model, train: meta.train, adam, epoch: meta.epoch, history: meta.history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn load_trainable(store: &mut ParamStore<f32>, tensors: &std::collections::HashMap<String, &[u8]>) -> Result<()> {
    for id in store.trainable_ids() {
        let name = store.name(id).to_string();
        let bytes = tensors.get(&name).ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
        let t: Tensor<f32> = decode_tensor(bytes)?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format(format!("{name}: shape {:?} vs {:?}", t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// One JSON object per line.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dice: f64,
    pub iou: f64,
    pub hd: f64,
    /// Trainable parameter count.
    pub params: usize,
}

/// Trains every variant from the same seed on `train_set` and evaluates on
/// the test split of `eval_set`.
pub fn run_ablation(
    base: &ModelConfig,
    config: &TrainConfig,
    train_set: &DatasetManifest,
    eval_set: &DatasetManifest,
    options: RunOptions,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let cfg = ModelConfig { architecture: v.architecture(), ..base.clone() };
            let ckpt = train(&cfg, config, train_set, options)?;
            let report = evaluate(&ckpt.model, eval_set, Split::Test, options)?.aggregate;
            Ok(AblationRow {
                variant: v.name().to_string(),
                dice: report.dice,
                iou: report.iou,
                hd: report.hd,
                params: ckpt.model.trainable_count(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,dice,hd,params\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6},{}\n", r.variant, r.dice, r.hd, r.params);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub source_dice: f64,
    pub target_dice: f64,
}

/// One run per prompt count, each evaluated on both test splits.
pub fn run_prompt_sweep(
    base: &ModelConfig,
    config: &TrainConfig,
    source: &DatasetManifest,
    target: &DatasetManifest,
    counts: &[usize],
    options: RunOptions,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(Error::config("prompt sweep needs at least one count"));
    }
    counts
        .iter()
        .map(|&c| {
            let cfg = ModelConfig { prompt_count: Some(c), ..base.clone() };
            let ckpt = train(&cfg, config, source, options)?;
            Ok(SweepRow {
                count: c,
                source_dice: evaluate(&ckpt.model, source, Split::Test, options)?.aggregate.dice,
                target_dice: evaluate(&ckpt.model, target, Split::Test, options)?.aggregate.dice,
            })
        })
        .collect()
}

pub fn default_sweep_counts() -> Vec<usize> {
    PROMPT_SWEEP_COUNTS.to_vec()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("count,source_dice,target_dice\n");
    for r in rows {
        s += &format!("{},{:.6},{:.6}\n", r.count, r.source_dice, r.target_dice);
    }
    s
}

/// Grayscale line chart of Dice against prompt count (evenly spaced),
/// source in black and target in mid gray on white. Returns row-major
/// pixels of a `width x height` image.
pub fn render_sweep_plot(rows: &[SweepRow], width: usize, height: usize) -> Vec<u8> {
    let mut px = vec![255u8; width * height];
    let margin = 12;
    let (x0, x1, y0, y1) = (margin, width - margin, margin, height - margin);
    let mut set = |x: usize, y: usize, v: u8| {
        if x < width && y < height {
            px[y * width + x] = v;
        }
    };
    for x in x0..=x1 {
        set(x, y1, 0);
    }
    for y in y0..=y1 {
        set(x0, y, 0);
    }
    let to_px = |i: usize, dice: f64| {
        let fx = if rows.len() > 1 { i as f64 / (rows.len() - 1) as f64 } else { 0.5 };
        let x = x0 as f64 + fx * (x1 - x0) as f64;
        let y = y1 as f64 - dice.clamp(0.0, 1.0) * (y1 - y0) as f64;
        (x.round() as i64, y.round() as i64)
    };
    for (shade, pick) in [(128u8, 1usize), (0u8, 0usize)] {
        let pts: Vec<(i64, i64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| to_px(i, if pick == 0 { r.source_dice } else { r.target_dice }))
            .collect();
        for w in pts.windows(2) {
            line(w[0], w[1], |x, y| set(x as usize, y as usize, shade));
        }
        for &(cx, cy) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    set((cx + dx) as usize, (cy + dy) as usize, shade);
                }
            }
        }
    }
    px
}

/// Bresenham segment.
fn line((mut x, mut y): (i64, i64), (x2, y2): (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let (dx, dy) = ((x2 - x).abs(), -(y2 - y).abs());
    let (sx, sy) = (if x < x2 { 1 } else { -1 }, if y < y2 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        plot(x, y);
        if x == x2 && y == y2 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
