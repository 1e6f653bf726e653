//! Training loops and evaluation.
//!
//! Gradients for a minibatch are computed over fixed-size chunks of images,
//! possibly in parallel, and summed in chunk order. Chunk boundaries never
//! depend on the thread count, so results are identical for any pool size.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ImageGroup, Manifest, PretextSample, Split};
use crate::distortion::{distort, DistortionKind};
use crate::error::{Error, Result};
use crate::net::{
    backward, cross_entropy_scaled, forward, images_to_tensor, init_params, Checkpoint, HeadGrads,
    Heads, NetConfig, NetParams, Scalar, Sgd, TrainingState, PRETEXT_CLASSES,
};
use crate::numfmt::sig9;
use crate::pixel::ImageBuffer;
use crate::rng::{stable_hash, Stream};

/// Images per gradient work unit.
pub const IMAGES_PER_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretext,
    Multitask,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretext => "pretext",
            Mode::Multitask => "multitask",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretext" => Ok(Mode::Pretext),
            "multitask" => Ok(Mode::Multitask),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected pretext|multitask)"
            ))),
        }
    }
}

/// Learning rate as a function of the global step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 + cos(π · step / total)) / 2`.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule `{other}` (expected constant|cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Distorted samples per minibatch. Must be a multiple of 4: an image
    /// always brings all four of its copies, so a batch holds
    /// `batch_size / 4` images.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// Weight of the pretext loss in multitask mode.
    pub lambda: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.03,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            lambda: 0.5,
            seed: 0,
            mode: Mode::Pretext,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(PRETEXT_CLASSES) {
            return Err(Error::Config(format!(
                "batch size must be a positive multiple of 4, got {}",
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Sgd::<f32>::new(self.lr, self.momentum).map(|_| ())
    }

    pub fn images_per_batch(&self) -> usize {
        self.batch_size / PRETEXT_CLASSES
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub main_val_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_main_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_pretext_loss: Option<f64>,
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Validation loss and accuracy before the first update.
    pub initial_val_loss: f64,
    pub initial_val_acc: f64,
}

/// Pretext accuracy report for one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`, kinds in label-code order.
    pub confusion: [[u64; 4]; 4],
    /// `None` for kinds with no samples.
    pub per_kind_accuracy: [Option<f64>; 4],
}

/// Main-head accuracy over clean images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MainReport {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_group(samples: &[&PretextSample]) -> Result<()> {
    if samples.len() != PRETEXT_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "an image needs exactly 4 samples, got {}",
            samples.len()
        )));
    }
    for kind in DistortionKind::ALL {
        if !samples.iter().any(|s| s.label == kind) {
            return Err(Error::InvalidArgument(format!(
                "no `{kind}` sample for this image"
            )));
        }
    }
    Ok(())
}

fn render_copies(image: &ImageBuffer, samples: &[&PretextSample]) -> Result<Vec<ImageBuffer>> {
    samples
        .iter()
        .map(|s| distort(image, &s.params()))
        .collect()
}

/// Per-image loss: the mean cross-entropy of the four distorted copies, and
/// its exact gradient.
pub fn pretext_image_loss<T: Scalar>(
    params: &NetParams<T>,
    image: &ImageBuffer,
    samples: &[&PretextSample],
) -> Result<(f64, NetParams<T>)> {
    check_group(samples)?;
    let copies = render_copies(image, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    let (loss, grads) = labeled_gradients(
        params,
        &copies.iter().collect::<Vec<_>>(),
        &labels,
        Heads::PRETEXT,
        4,
    )?;
    Ok((loss / 4.0, grads))
}

/// Summed loss over `images` and the gradient of `sum / denom` for one head.
fn labeled_gradients<T: Scalar>(
    params: &NetParams<T>,
    images: &[&ImageBuffer],
    labels: &[usize],
    head: Heads,
    denom: usize,
) -> Result<(f64, NetParams<T>)> {
    let x = images_to_tensor::<T>(images)?;
    let out = forward(params, &x, head)?;
    let logits = if head.main {
        out.main_logits.as_ref()
    } else {
        out.pretext_logits.as_ref()
    }
    .expect("requested head evaluated");
    let (sum, d) = cross_entropy_scaled(logits, labels, denom)?;
    let grads = if head.main {
        backward(
            params,
            &out.cache,
            HeadGrads {
                pretext: None,
                main: Some(&d),
            },
        )?
    } else {
        backward(
            params,
            &out.cache,
            HeadGrads {
                pretext: Some(&d),
                main: None,
            },
        )?
    };
    Ok((sum, grads))
}

/// Sums chunk results in order.
fn reduce<T: Scalar>(parts: Vec<Result<(f64, NetParams<T>)>>) -> Result<(f64, NetParams<T>)> {
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one chunk")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        grads.add_scaled(&g, T::ONE);
    }
    Ok((loss, grads))
}

/// Mean per-image pretext loss over `groups` and its gradient.
pub fn pretext_gradients<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    groups: &[&ImageGroup<'_>],
    corpus: &Corpus,
) -> Result<(f64, NetParams<T>)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("empty pretext batch".into()));
    }
    let denom = PRETEXT_CLASSES * groups.len();
    let parts = groups
        .par_chunks(IMAGES_PER_CHUNK)
        .map(|chunk| {
            let mut copies = Vec::with_capacity(chunk.len() * 4);
            let mut labels = Vec::with_capacity(chunk.len() * 4);
            for g in chunk {
                let img = corpus.image(g.image_id)?;
                copies.extend(render_copies(&img, &g.samples)?);
                labels.extend(g.samples.iter().map(|s| s.label.index()));
            }
            labeled_gradients(
                params,
                &copies.iter().collect::<Vec<_>>(),
                &labels,
                Heads::PRETEXT,
                denom,
            )
        })
        .collect();
    let (sum, grads) = reduce(parts)?;
    Ok((sum / denom as f64, grads))
}

/// Mean main-head cross-entropy over clean labeled images and its gradient.
pub fn main_gradients<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    labeled: &[(&str, usize)],
    corpus: &Corpus,
) -> Result<(f64, NetParams<T>)> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("empty labeled batch".into()));
    }
    let denom = labeled.len();
    let parts = labeled
        .par_chunks(IMAGES_PER_CHUNK * PRETEXT_CLASSES)
        .map(|chunk| {
            let imgs = chunk
                .iter()
                .map(|(id, _)| corpus.image(id))
                .collect::<Result<Vec<Arc<ImageBuffer>>>>()?;
            let refs: Vec<&ImageBuffer> = imgs.iter().map(|a| a.as_ref()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(_, l)| l).collect();
            labeled_gradients(params, &refs, &labels, Heads::MAIN, denom)
        })
        .collect();
    let (sum, grads) = reduce(parts)?;
    Ok((sum / denom as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultitaskLoss {
    pub total: f64,
    pub main: f64,
    /// `None` when `lambda == 0` and the pretext branch was skipped.
    pub pretext: Option<f64>,
}

/// `main + lambda · pretext` and its gradient. With `lambda == 0` the
/// pretext branch is not evaluated at all.
pub fn multitask_gradients<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    labeled: &[(&str, usize)],
    groups: &[&ImageGroup<'_>],
    corpus: &Corpus,
    lambda: f64,
) -> Result<(MultitaskLoss, NetParams<T>)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (main, mut grads) = main_gradients(params, labeled, corpus)?;
    let mut loss = MultitaskLoss {
        total: main,
        main,
        pretext: None,
    };
    if lambda > 0.0 && !groups.is_empty() {
        let (pretext, g) = pretext_gradients(params, groups, corpus)?;
        grads.add_scaled(&g, T::from_f64(lambda));
        loss.pretext = Some(pretext);
        loss.total = main + lambda * pretext;
    }
    Ok((loss, grads))
}

/// Pretext head evaluation on one split of the manifest.
pub fn evaluate<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    manifest: &Manifest,
    split: Split,
    corpus: &Corpus,
) -> Result<EvalReport> {
    let groups = manifest.groups(split);
    if groups.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split `{}` is empty",
            split.name()
        )));
    }
    // Per chunk: summed loss and (label, prediction) pairs.
    type ChunkResult = Result<(f64, Vec<(usize, usize)>)>;
    let parts: Vec<ChunkResult> = groups
        .par_chunks(IMAGES_PER_CHUNK)
        .map(|chunk| {
            let mut copies = Vec::with_capacity(chunk.len() * 4);
            let mut labels = Vec::with_capacity(chunk.len() * 4);
            for g in chunk {
                let img = corpus.image(g.image_id)?;
                copies.extend(render_copies(&img, &g.samples)?);
                labels.extend(g.samples.iter().map(|s| s.label.index()));
            }
            let x = images_to_tensor::<T>(&copies.iter().collect::<Vec<_>>())?;
            let out = forward(params, &x, Heads::PRETEXT)?;
            let logits = out.pretext_logits.expect("pretext head evaluated");
            let (sum, _) = cross_entropy_scaled(&logits, &labels, 1)?;
            let pairs = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (l, argmax(logits.row(i))))
                .collect();
            Ok((sum, pairs))
        })
        .collect();
    let mut confusion = [[0u64; 4]; 4];
    let mut loss = 0.0;
    for part in parts {
        let (l, pairs) = part?;
        loss += l;
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
    }
    let samples = groups.len() * PRETEXT_CLASSES;
    let correct: u64 = (0..4).map(|k| confusion[k][k]).sum();
    let mut per_kind_accuracy = [None; 4];
    for (k, row) in confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n > 0 {
            per_kind_accuracy[k] = Some(row[k] as f64 / n as f64);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", split.name())));
    }
    Ok(EvalReport {
        split,
        samples,
        accuracy: correct as f64 / samples as f64,
        mean_loss: loss / samples as f64,
        confusion,
        per_kind_accuracy,
    })
}

/// Main-head accuracy on clean images.
pub fn evaluate_main<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    labeled: &[(&str, usize)],
    corpus: &Corpus,
) -> Result<MainReport> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "no labeled images to evaluate".into(),
        ));
    }
    let parts: Vec<Result<(f64, usize)>> = labeled
        .par_chunks(IMAGES_PER_CHUNK * PRETEXT_CLASSES)
        .map(|chunk| {
            let imgs = chunk
                .iter()
                .map(|(id, _)| corpus.image(id))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageBuffer> = imgs.iter().map(|a| a.as_ref()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(_, l)| l).collect();
            let out = forward(params, &images_to_tensor::<T>(&refs)?, Heads::MAIN)?;
            let logits = out.main_logits.expect("main head evaluated");
            let (sum, _) = cross_entropy_scaled(&logits, &labels, 1)?;
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(logits.row(i)) == l)
                .count();
            Ok((sum, correct))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for part in parts {
        let (l, c) = part?;
        loss += l;
        correct += c;
    }
    let n = labeled.len();
    Ok(MainReport {
        samples: n,
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
    })
}

/// Embedding-layer activations (before the heads) for each image.
pub fn embed_images<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    images: &[&ImageBuffer],
) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Result<Vec<Vec<f64>>>> = images
        .par_chunks(IMAGES_PER_CHUNK * PRETEXT_CLASSES)
        .map(|chunk| {
            let out = forward(params, &images_to_tensor::<T>(chunk)?, Heads::NONE)?;
            Ok((0..chunk.len())
                .map(|i| out.embedding.row(i).iter().map(|v| v.to_f64()).collect())
                .collect())
        })
        .collect();
    let mut rows = Vec::with_capacity(images.len());
    for part in parts {
        rows.extend(part?);
    }
    Ok(rows)
}

pub fn export_embeddings<T: Scalar + Send + Sync>(
    params: &NetParams<T>,
    image_ids: &[&str],
    corpus: &Corpus,
) -> Result<Vec<(String, Vec<f64>)>> {
    let imgs = image_ids
        .iter()
        .map(|id| corpus.image(id))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageBuffer> = imgs.iter().map(|a| a.as_ref()).collect();
    let rows = if refs.is_empty() {
        Vec::new()
    } else {
        embed_images(params, &refs)?
    };
    Ok(image_ids.iter().map(|s| s.to_string()).zip(rows).collect())
}

/// CSV with header `image_id,e0,...,e{E-1}` and 9-significant-digit reals.
pub fn embeddings_csv(rows: &[(String, Vec<f64>)], dim: usize) -> String {
    let mut out = String::from("image_id");
    for i in 0..dim {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for (id, v) in rows {
        out.push_str(id);
        for x in v {
            out.push(',');
            out.push_str(&sig9(*x));
        }
        out.push('\n');
    }
    out
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Train-split images whose main labels the multitask run may use.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    items: Vec<(String, usize)>,
}

impl LabeledSet {
    /// `(image_id, main_label)` pairs; labels must fit the main head.
    pub fn new(mut items: Vec<(String, usize)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("labeled set is empty".into()));
        }
        items.sort();
        items.dedup();
        Ok(Self { items })
    }

    /// Picks `round(fraction · n)` (at least one) train-split images, ranked
    /// by a hash of `(seed, image_id)`, and looks up their main labels.
    pub fn select(manifest: &Manifest, corpus: &Corpus, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction must be in (0, 1], got {fraction}"
            )));
        }
        let mut ids = manifest.image_ids(Split::Train);
        ids.sort_by_key(|id| {
            (
                stable_hash(&[b"labeled", &seed.to_le_bytes(), id.as_bytes()]),
                *id,
            )
        });
        let n = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len().max(1));
        let items = ids
            .into_iter()
            .take(n)
            .map(|id| Ok((id.to_owned(), corpus.main_label(id)? as usize)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = (&str, usize)> {
        self.items.iter().map(|(id, l)| (id.as_str(), *l))
    }
}

/// Main labels of every image in `split`, for validation of the main head.
pub fn split_main_labels<'a>(
    manifest: &'a Manifest,
    split: Split,
    corpus: &Corpus,
) -> Result<Vec<(&'a str, usize)>> {
    manifest
        .image_ids(split)
        .into_iter()
        .map(|id| Ok((id, corpus.main_label(id)? as usize)))
        .collect()
}

pub fn manifest_hash(manifest: &Manifest) -> String {
    format!("{:016x}", stable_hash(&[manifest.to_jsonl().as_bytes()]))
}

fn epoch_stream(tag: &[u8], seed: u64, epoch: usize) -> Stream {
    Stream::new(stable_hash(&[
        tag,
        &seed.to_le_bytes(),
        &(epoch as u64).to_le_bytes(),
    ]))
}

fn diverged(epoch: usize, batch: usize, loss: f64) -> Error {
    Error::Diverged { epoch, batch, loss }
}

#[allow(clippy::too_many_arguments)]
fn step(
    opt: &mut Sgd<f32>,
    lr: f64,
    params: &mut NetParams<f32>,
    grads: &NetParams<f32>,
    loss: f64,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(diverged(epoch, batch, loss));
    }
    opt.set_lr(lr)?;
    opt.step(params, grads).map_err(|e| match e {
        Error::NonFinite(_) => diverged(epoch, batch, loss),
        other => other,
    })?;
    if !params.all_finite() {
        return Err(diverged(epoch, batch, loss));
    }
    Ok(())
}

fn training_state(cfg: &TrainConfig, manifest: &Manifest, m: &EpochMetrics) -> TrainingState {
    TrainingState {
        mode: cfg.mode.name().to_owned(),
        epoch: m.epoch,
        seed: cfg.seed,
        manifest_hash: manifest_hash(manifest),
        val_loss: Some(m.val_loss),
        val_acc: Some(m.val_acc),
        main_val_acc: m.main_val_acc,
        lambda: m.lambda,
    }
}

/// Pretext-only training: seeded per-epoch shuffles of the train images,
/// SGD with momentum, best checkpoint by validation accuracy.
pub fn train_pretext(
    manifest: &Manifest,
    corpus: &Corpus,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::Pretext {
        return Err(Error::Config("train_pretext needs mode = pretext".into()));
    }
    let train = manifest.groups(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("manifest has no train images".into()));
    }
    let mut params = init_params::<f32>(net_cfg, cfg.seed)?;
    let initial = evaluate(&params, manifest, Split::Val, corpus)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut log: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(NetParams<f32>, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_batch = cfg.images_per_batch();
    let total_steps = cfg.epochs * train.len().div_ceil(per_batch);
    let mut global_step = 0;

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        epoch_stream(b"order", cfg.seed, epoch).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(per_batch).enumerate() {
            let batch: Vec<&ImageGroup<'_>> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = pretext_gradients(&params, &batch, corpus)?;
            let lr = cfg.schedule.at(cfg.lr, global_step, total_steps);
            step(&mut opt, lr, &mut params, &grads, loss, epoch, bi)?;
            global_step += 1;
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate(&params, manifest, Split::Val, corpus)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
            main_val_acc: None,
            lambda: None,
            train_main_loss: None,
            train_pretext_loss: None,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.4}",
            m.train_loss,
            m.val_loss,
            m.val_acc
        );
        if best
            .as_ref()
            .is_none_or(|&(_, e)| m.val_acc > log[e - 1].val_acc)
        {
            best = Some((params.clone(), epoch));
        }
        log.push(m);
    }
    let (best_params, best_epoch) = best.expect("at least one epoch");
    let state = training_state(cfg, manifest, &log[best_epoch - 1]);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(best_params, Some(state)),
        log,
        best_epoch,
        initial_val_loss: initial.mean_loss,
        initial_val_acc: initial.accuracy,
    })
}

/// Joint training of the main head on `labeled` (clean images) and the
/// pretext head on every train image of `unlabeled`, sharing the backbone.
///
/// Each step takes one minibatch of pretext images and
/// `min(batch_size / 4, |labeled|)` labeled images, cycling through a per-epoch
/// shuffle of the labeled set. The loss is `main + lambda · pretext`; the
/// best checkpoint is chosen by main-head validation accuracy.
pub fn train_multitask(
    labeled: &LabeledSet,
    unlabeled: &Manifest,
    corpus: &Corpus,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::Multitask {
        return Err(Error::Config(
            "train_multitask needs mode = multitask".into(),
        ));
    }
    let classes = net_cfg
        .main_classes
        .ok_or_else(|| Error::Config("multitask mode needs main_classes".into()))?;
    if let Some((id, l)) = labeled.items().find(|&(_, l)| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "image `{id}` has main label {l}, but the main head has {classes} classes"
        )));
    }
    let train = unlabeled.groups(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("manifest has no train images".into()));
    }
    let val_main = split_main_labels(unlabeled, Split::Val, corpus)?;
    let labeled_items: Vec<(&str, usize)> = labeled.items().collect();

    let mut params = init_params::<f32>(net_cfg, cfg.seed)?;
    let initial = evaluate(&params, unlabeled, Split::Val, corpus)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut log: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(NetParams<f32>, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_batch = cfg.images_per_batch();
    let total_steps = cfg.epochs * train.len().div_ceil(per_batch);
    let mut global_step = 0;
    let mut lab_order: Vec<usize> = (0..labeled_items.len()).collect();
    let per_step = per_batch.min(labeled_items.len());

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        epoch_stream(b"order", cfg.seed, epoch).shuffle(&mut order);
        lab_order.sort_unstable();
        epoch_stream(b"labeled-order", cfg.seed, epoch).shuffle(&mut lab_order);
        let mut cursor = 0;
        let (mut total, mut main, mut pretext) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (bi, idx) in order.chunks(per_batch).enumerate() {
            let groups: Vec<&ImageGroup<'_>> = idx.iter().map(|&i| &train[i]).collect();
            let lab: Vec<(&str, usize)> = (0..per_step)
                .map(|j| labeled_items[lab_order[(cursor + j) % lab_order.len()]])
                .collect();
            cursor = (cursor + per_step) % lab_order.len();
            let (loss, grads) = multitask_gradients(&params, &lab, &groups, corpus, cfg.lambda)?;
            let lr = cfg.schedule.at(cfg.lr, global_step, total_steps);
            step(&mut opt, lr, &mut params, &grads, loss.total, epoch, bi)?;
            global_step += 1;
            total += loss.total;
            main += loss.main;
            pretext += loss.pretext.unwrap_or(0.0);
            steps += 1;
        }
        let val = evaluate(&params, unlabeled, Split::Val, corpus)?;
        let main_val = evaluate_main(&params, &val_main, corpus)?;
        let n = steps as f64;
        let m = EpochMetrics {
            epoch,
            train_loss: total / n,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
            main_val_acc: Some(main_val.accuracy),
            lambda: Some(cfg.lambda),
            train_main_loss: Some(main / n),
            train_pretext_loss: (cfg.lambda > 0.0).then_some(pretext / n),
        };
        log::info!(
            "epoch {epoch}: total {:.4} main {:.4} main_val_acc {:.4}",
            m.train_loss,
            main / n,
            main_val.accuracy
        );
        let better = best
            .as_ref()
            .is_none_or(|&(_, e)| m.main_val_acc > log[e - 1].main_val_acc);
        if better {
            best = Some((params.clone(), epoch));
        }
        log.push(m);
    }
    let (best_params, best_epoch) = best.expect("at least one epoch");
    let state = training_state(cfg, unlabeled, &log[best_epoch - 1]);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(best_params, Some(state)),
        log,
        best_epoch,
        initial_val_loss: initial.mean_loss,
        initial_val_acc: initial.accuracy,
    })
}
