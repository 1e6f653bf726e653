//! Small convolutional classifier with hand-written backprop.
//!
//! Architecture: `n` blocks of 3×3 convolution (stride 1, zero padding 1),
//! ReLU and 2×2 max-pooling, then a dense ReLU embedding layer and one or two
//! linear heads: the 4-way distortion head and, in multitask mode, a main
//! classification head. Heads start at zero so the initial distribution is
//! exactly uniform. Inputs arrive in `[0, 1]`; the first block sees them
//! shifted by [`INPUT_CENTER`].

mod checkpoint;
pub mod gradcheck;
mod loss;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TrainingState};
pub use loss::{cross_entropy_scaled, softmax, softmax_cross_entropy};
pub use optim::Sgd;
pub use tensor::{Scalar, Tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixel::{ImageBuffer, MAX_INTENSITY};
use crate::rng::Stream;

pub const PRETEXT_CLASSES: usize = 4;

/// Subtracted from every input intensity before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Edge length of the square input.
    pub input_size: usize,
    /// Output channels of each conv/ReLU/pool block.
    pub conv_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub main_classes: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            conv_channels: vec![16, 32],
            embedding_dim: 32,
            main_classes: None,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config(
                "need at least one conv block, each with >= 1 channel".into(),
            ));
        }
        let pool = 1usize << self.conv_channels.len();
        if self.input_size < pool || !self.input_size.is_multiple_of(pool) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {pool} for {} pooling stages",
                self.input_size,
                self.conv_channels.len()
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if matches!(self.main_classes, Some(k) if k < 2) {
            return Err(Error::Config("main head needs >= 2 classes".into()));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let side = self.input_size >> self.conv_channels.len();
        self.conv_channels.last().copied().unwrap_or(0) * side * side
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c_out, c_in, 3, 3]));
            out.push((format!("conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        let e = self.embedding_dim;
        out.push(("embed.weight".into(), vec![e, self.flat_features()]));
        out.push(("embed.bias".into(), vec![e]));
        out.push(("pretext.weight".into(), vec![PRETEXT_CLASSES, e]));
        out.push(("pretext.bias".into(), vec![PRETEXT_CLASSES]));
        if let Some(k) = self.main_classes {
            out.push(("main.weight".into(), vec![k, e]));
            out.push(("main.bias".into(), vec![k]));
        }
        out
    }
}

/// Learned parameters. `revision` counts optimizer updates and is used to
/// catch caches that outlived the parameters they were computed with; it is
/// not part of equality or serialization.
#[derive(Debug, Clone)]
pub struct NetParams<T> {
    config: NetConfig,
    tensors: Vec<Tensor<T>>,
    init_seed: u64,
    revision: u64,
}

impl<T: Scalar> PartialEq for NetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.init_seed == other.init_seed
            && self.tensors == other.tensors
    }
}

/// He-uniform weights (`U(-√(6/fan_in), √(6/fan_in))`), zero biases, and
/// all-zero heads. Values are drawn in `f64` from `Stream::new(seed)` in
/// layout order and then cast.
pub fn init_params<T: Scalar>(cfg: &NetConfig, seed: u64) -> Result<NetParams<T>> {
    cfg.validate()?;
    let mut rng = Stream::new(seed);
    let tensors = cfg
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(shape.clone());
            let is_head = name.starts_with("pretext.") || name.starts_with("main.");
            if name.ends_with(".weight") && !is_head {
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = T::from_f64(rng.uniform_in(-limit, limit));
                }
            }
            t
        })
        .collect();
    Ok(NetParams {
        config: cfg.clone(),
        tensors,
        init_seed: seed,
        revision: 0,
    })
}

impl<T: Scalar> NetParams<T> {
    pub fn from_tensors(
        config: NetConfig,
        tensors: Vec<Tensor<T>>,
        init_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            tensors,
            init_seed,
            revision: 0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.config
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors.iter())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            init_seed: self.init_seed,
            revision: 0,
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            init_seed: self.init_seed,
            revision: self.revision,
        }
    }

    pub(crate) fn bump_revision(&mut self) {
        self.revision += 1;
    }

    fn conv_weight(&self, i: usize) -> &Tensor<T> {
        &self.tensors[2 * i]
    }

    fn conv_bias(&self, i: usize) -> &Tensor<T> {
        &self.tensors[2 * i + 1]
    }

    fn dense(&self, which: Dense) -> (&Tensor<T>, &Tensor<T>) {
        let i = self.dense_index(which);
        (&self.tensors[i], &self.tensors[i + 1])
    }

    fn dense_index(&self, which: Dense) -> usize {
        let base = 2 * self.config.conv_channels.len();
        match which {
            Dense::Embed => base,
            Dense::Pretext => base + 2,
            Dense::Main => base + 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dense {
    Embed,
    Pretext,
    Main,
}

/// Which heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub pretext: bool,
    pub main: bool,
}

impl Heads {
    pub const PRETEXT: Heads = Heads {
        pretext: true,
        main: false,
    };
    pub const MAIN: Heads = Heads {
        pretext: false,
        main: true,
    };
    pub const BOTH: Heads = Heads {
        pretext: true,
        main: true,
    };
    pub const NONE: Heads = Heads {
        pretext: false,
        main: false,
    };
}

/// Converts images to a `B × 3 × S × S` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let plane = w * h;
    let mut data = vec![T::ZERO; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if !img.same_shape(first) {
            return Err(Error::Dimension(format!(
                "batch mixes {w}x{h} and {}x{} images",
                img.width(),
                img.height()
            )));
        }
        let out = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = T::from_f64(px[c] / MAX_INTENSITY);
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Intermediate values kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    revision: u64,
    batch: usize,
    heads: Heads,
    /// Input of each conv block, `B × C × H × H`.
    block_inputs: Vec<Vec<T>>,
    /// Post-ReLU conv output of each block, `B × O × H × H`.
    block_acts: Vec<Vec<T>>,
    /// Flat index (within the `H × H` plane) of each pooled maximum.
    pool_argmax: Vec<Vec<u32>>,
    flat: Vec<T>,
    embedding: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub pretext_logits: Option<Tensor<T>>,
    pub main_logits: Option<Tensor<T>>,
    pub embedding: Tensor<T>,
    pub cache: ForwardCache<T>,
}

/// Upstream gradients of the loss with respect to each head's logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadGrads<'a, T> {
    pub pretext: Option<&'a Tensor<T>>,
    pub main: Option<&'a Tensor<T>>,
}

pub fn forward<T: Scalar>(
    params: &NetParams<T>,
    batch: &Tensor<T>,
    heads: Heads,
) -> Result<ForwardOutput<T>> {
    let cfg = &params.config;
    let s = cfg.input_size;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(Error::Dimension(format!(
            "expected batch of shape [B, 3, {s}, {s}], got {shape:?}"
        )));
    }
    if heads.main && cfg.main_classes.is_none() {
        return Err(Error::Config("network has no main head".into()));
    }
    let b = shape[0];

    let mut block_inputs = Vec::with_capacity(cfg.conv_channels.len());
    let mut block_acts = Vec::with_capacity(cfg.conv_channels.len());
    let mut pool_argmax = Vec::with_capacity(cfg.conv_channels.len());
    let center = T::from_f64(INPUT_CENTER);
    let mut x: Vec<T> = batch.data().iter().map(|&v| v - center).collect();
    let (mut c_in, mut side) = (3, s);
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        let act = conv_relu(
            &x,
            b,
            c_in,
            side,
            params.conv_weight(i),
            params.conv_bias(i),
            c_out,
        );
        let (pooled, argmax) = max_pool(&act, b * c_out, side);
        block_inputs.push(x);
        block_acts.push(act);
        pool_argmax.push(argmax);
        x = pooled;
        c_in = c_out;
        side /= 2;
    }
    let flat = x;
    let features = flat.len() / b.max(1);

    let e = cfg.embedding_dim;
    let (we, be) = params.dense(Dense::Embed);
    let mut embedding = vec![T::ZERO; b * e];
    dense_forward(&flat, b, features, we.data(), be.data(), e, &mut embedding);
    for v in &mut embedding {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }

    let head = |which: Dense, classes: usize| -> Result<Tensor<T>> {
        let (w, bias) = params.dense(which);
        let mut logits = vec![T::ZERO; b * classes];
        dense_forward(
            &embedding,
            b,
            e,
            w.data(),
            bias.data(),
            classes,
            &mut logits,
        );
        Tensor::new(vec![b, classes], logits)
    };
    let pretext_logits = heads
        .pretext
        .then(|| head(Dense::Pretext, PRETEXT_CLASSES))
        .transpose()?;
    let main_logits = match (heads.main, cfg.main_classes) {
        (true, Some(k)) => Some(head(Dense::Main, k)?),
        _ => None,
    };

    Ok(ForwardOutput {
        pretext_logits,
        main_logits,
        embedding: Tensor::new(vec![b, e], embedding.clone())?,
        cache: ForwardCache {
            revision: params.revision,
            batch: b,
            heads,
            block_inputs,
            block_acts,
            pool_argmax,
            flat,
            embedding,
        },
    })
}

/// Gradients of the loss with respect to every parameter. Heads not
/// evaluated in the forward pass, or without upstream gradient, get zeros.
pub fn backward<T: Scalar>(
    params: &NetParams<T>,
    cache: &ForwardCache<T>,
    dlogits: HeadGrads<'_, T>,
) -> Result<NetParams<T>> {
    if cache.revision != params.revision {
        return Err(Error::InvalidArgument(format!(
            "stale forward cache: computed at parameter revision {}, now {}",
            cache.revision, params.revision
        )));
    }
    let cfg = &params.config;
    if cache.block_acts.len() != cfg.conv_channels.len() {
        return Err(Error::Dimension(
            "forward cache does not match this network".into(),
        ));
    }
    let b = cache.batch;
    let e = cfg.embedding_dim;
    let mut grads = params.zeros_like();

    let mut d_emb = vec![T::ZERO; b * e];
    let heads = [
        (
            Dense::Pretext,
            dlogits.pretext,
            cache.heads.pretext,
            Some(PRETEXT_CLASSES),
        ),
        (
            Dense::Main,
            dlogits.main,
            cache.heads.main,
            cfg.main_classes,
        ),
    ];
    for (which, upstream, evaluated, classes) in heads {
        let Some(upstream) = upstream else { continue };
        let classes = classes.ok_or_else(|| Error::Config("network has no main head".into()))?;
        if !evaluated {
            return Err(Error::InvalidArgument(
                "gradient supplied for a head the forward pass did not evaluate".into(),
            ));
        }
        if upstream.shape() != [b, classes] {
            return Err(Error::Dimension(format!(
                "head gradient shape {:?}, expected [{b}, {classes}]",
                upstream.shape()
            )));
        }
        let (w, _) = params.dense(which);
        let gi = grads.dense_index(which);
        dense_backward(
            &cache.embedding,
            b,
            e,
            w.data(),
            classes,
            upstream.data(),
            &mut grads.tensors[gi..gi + 2],
            Some(&mut d_emb),
        );
    }
    for (d, &a) in d_emb.iter_mut().zip(&cache.embedding) {
        if !(a > T::ZERO) {
            *d = T::ZERO;
        }
    }

    let features = cache.flat.len() / b.max(1);
    let (we, _) = params.dense(Dense::Embed);
    let gi = grads.dense_index(Dense::Embed);
    let mut d_x = vec![T::ZERO; b * features];
    dense_backward(
        &cache.flat,
        b,
        features,
        we.data(),
        e,
        &d_emb,
        &mut grads.tensors[gi..gi + 2],
        Some(&mut d_x),
    );

    let mut side = cfg.input_size >> cfg.conv_channels.len();
    for i in (0..cfg.conv_channels.len()).rev() {
        let c_out = cfg.conv_channels[i];
        let c_in = if i == 0 { 3 } else { cfg.conv_channels[i - 1] };
        side *= 2;
        let act = &cache.block_acts[i];
        let mut d_act = unpool(&d_x, &cache.pool_argmax[i], b * c_out, side);
        for (d, &a) in d_act.iter_mut().zip(act) {
            if !(a > T::ZERO) {
                *d = T::ZERO;
            }
        }
        let (gw, gb) = grads.tensors[2 * i..2 * i + 2].split_at_mut(1);
        let need_input_grad = i > 0;
        d_x = conv_backward(
            &cache.block_inputs[i],
            b,
            c_in,
            side,
            params.conv_weight(i).data(),
            c_out,
            &d_act,
            gw[0].data_mut(),
            gb[0].data_mut(),
            need_input_grad,
        );
    }
    Ok(grads)
}

/// `out[b, o] = Σ_f x[b, f] · w[o, f] + bias[o]`.
fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    features: usize,
    w: &[T],
    bias: &[T],
    outputs: usize,
    out: &mut [T],
) {
    T::gemm(batch, features, outputs, x, false, w, true, out, false);
    for row in out.chunks_exact_mut(outputs) {
        for (v, &bb) in row.iter_mut().zip(bias) {
            *v += bb;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    features: usize,
    w: &[T],
    outputs: usize,
    d_out: &[T],
    grads: &mut [Tensor<T>],
    d_x: Option<&mut [T]>,
) {
    let (gw, gb) = grads.split_at_mut(1);
    // dW[o, f] += Σ_b d_out[b, o] · x[b, f]
    T::gemm(
        outputs,
        batch,
        features,
        d_out,
        true,
        x,
        false,
        gw[0].data_mut(),
        true,
    );
    let gb = gb[0].data_mut();
    for row in d_out.chunks_exact(outputs) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some(d_x) = d_x {
        // dX[b, f] += Σ_o d_out[b, o] · w[o, f]
        T::gemm(batch, outputs, features, d_out, false, w, false, d_x, true);
    }
}

/// Zero-padded 3×3 patches: `col[(c·9 + ky·3 + kx), y·side + x]`.
fn im2col<T: Scalar>(input: &[T], channels: usize, side: usize, col: &mut [T]) {
    let plane = side * side;
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * side..(y + 1) * side];
                    if sy < 0 || sy >= side as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &src[sy as usize * side..(sy as usize + 1) * side];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= side as isize {
                            T::ZERO
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(col: &[T], channels: usize, side: usize, out: &mut [T]) {
    let plane = side * side;
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * side..(sy as usize + 1) * side];
                    for x in 0..side {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            dst_row[sx as usize] += row[y * side + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv_relu<T: Scalar>(
    input: &[T],
    batch: usize,
    c_in: usize,
    side: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    c_out: usize,
) -> Vec<T> {
    let plane = side * side;
    let k = c_in * 9;
    let mut col = vec![T::ZERO; k * plane];
    let mut out = vec![T::ZERO; batch * c_out * plane];
    for b in 0..batch {
        im2col(
            &input[b * c_in * plane..(b + 1) * c_in * plane],
            c_in,
            side,
            &mut col,
        );
        let dst = &mut out[b * c_out * plane..(b + 1) * c_out * plane];
        T::gemm(
            c_out,
            k,
            plane,
            weight.data(),
            false,
            &col,
            false,
            dst,
            false,
        );
        for (o, chan) in dst.chunks_exact_mut(plane).enumerate() {
            let bo = bias.data()[o];
            for v in chan {
                let z = *v + bo;
                *v = if z > T::ZERO { z } else { T::ZERO };
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    c_in: usize,
    side: usize,
    weight: &[T],
    c_out: usize,
    d_pre: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let plane = side * side;
    let k = c_in * 9;
    let mut col = vec![T::ZERO; k * plane];
    let mut d_col = vec![T::ZERO; k * plane];
    let mut d_input = if need_input_grad {
        vec![T::ZERO; batch * c_in * plane]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let d = &d_pre[b * c_out * plane..(b + 1) * c_out * plane];
        for (o, chan) in d.chunks_exact(plane).enumerate() {
            let mut s = T::ZERO;
            for &v in chan {
                s += v;
            }
            gb[o] += s;
        }
        im2col(
            &input[b * c_in * plane..(b + 1) * c_in * plane],
            c_in,
            side,
            &mut col,
        );
        // dW[o, j] += Σ_p d[o, p] · col[j, p]
        T::gemm(c_out, plane, k, d, false, &col, true, gw, true);
        if need_input_grad {
            // dcol[j, p] = Σ_o W[o, j] · d[o, p]
            T::gemm(k, c_out, plane, weight, true, d, false, &mut d_col, false);
            col2im(
                &d_col,
                c_in,
                side,
                &mut d_input[b * c_in * plane..(b + 1) * c_in * plane],
            );
        }
    }
    d_input
}

/// 2×2, stride-2 max pooling over `planes` planes of `side × side`. Ties go
/// to the first element in row-major window order.
fn max_pool<T: Scalar>(input: &[T], planes: usize, side: usize) -> (Vec<T>, Vec<u32>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(planes * half * half);
    let mut argmax = Vec::with_capacity(planes * half * half);
    for p in 0..planes {
        let src = &input[p * side * side..(p + 1) * side * side];
        for y in 0..half {
            for x in 0..half {
                let mut best = (2 * y) * side + 2 * x;
                for idx in [best + 1, best + side, best + side + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

fn unpool<T: Scalar>(d_out: &[T], argmax: &[u32], planes: usize, side: usize) -> Vec<T> {
    let half = side / 2;
    let mut d_in = vec![T::ZERO; planes * side * side];
    for p in 0..planes {
        let dst = &mut d_in[p * side * side..(p + 1) * side * side];
        let window = p * half * half..(p + 1) * half * half;
        for (&g, &idx) in d_out[window.clone()].iter().zip(&argmax[window]) {
            dst[idx as usize] += g;
        }
    }
    d_in
}
