//! Central finite-difference verification of the hand-written backward
//! passes, in `f64`.
//!
//! Each check reduces a layer (or the whole network) to a scalar through a
//! fixed random projection, perturbs every input and parameter by `±h`, and
//! compares `(L(θ+h) − L(θ−h)) / 2h` with the analytic gradient. A value
//! passes when `|analytic − numeric| ≤ tol · max(|analytic|, |numeric|) + 1e-10`.

use super::loss::cross_entropy_scaled;
use super::tensor::{Scalar, Tensor};
use super::{
    backward, conv_backward, conv_relu, dense_backward, dense_forward, forward, init_params,
    max_pool, unpool, HeadGrads, Heads, NetConfig, NetParams,
};
use crate::error::Result;
use crate::rng::Stream;

/// Central-difference step. A step this large can straddle a ReLU or max-pool
/// kink at some random points; [`FINE_STEP`] avoids that at the cost of more
/// round-off.
pub const DEFAULT_STEP: f64 = 1e-4;
pub const FINE_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// `(parameter, index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            checked: 0,
            failures: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64, tol: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if diff > tol * scale + 1e-10 {
            self.failures += 1;
        }
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if scale > 1e-8 && rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some((what.to_owned(), index, analytic, numeric));
        }
    }
}

fn random_vec(rng: &mut Stream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-scale, scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `slot` (perturbed in place) against its analytic gradient.
fn check_slot(
    report: &mut GradCheckReport,
    what: &str,
    slot: &mut [f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) {
    for i in 0..slot.len() {
        let orig = slot[i];
        slot[i] = orig + h;
        let plus = loss(slot);
        slot[i] = orig - h;
        let minus = loss(slot);
        slot[i] = orig;
        report.record(what, i, analytic[i], (plus - minus) / (2.0 * h), tol);
    }
}

/// Conv3×3 + ReLU with respect to input, weights and bias.
pub fn check_conv_layer(seed: u64, h: f64, tol: f64) -> GradCheckReport {
    let mut rng = Stream::new(seed);
    let (batch, c_in, c_out, side) = (2, 3, 4, 6);
    let mut input = random_vec(&mut rng, batch * c_in * side * side, 1.0);
    let mut weight = random_vec(&mut rng, c_out * c_in * 9, 0.5);
    let mut bias = random_vec(&mut rng, c_out, 0.2);
    let proj = random_vec(&mut rng, batch * c_out * side * side, 1.0);

    let eval = |x: &[f64], w: &[f64], b: &[f64]| {
        let wt = Tensor::new(vec![c_out, c_in, 3, 3], w.to_vec()).unwrap();
        let bt = Tensor::new(vec![c_out], b.to_vec()).unwrap();
        conv_relu(x, batch, c_in, side, &wt, &bt, c_out)
    };
    let act = eval(&input, &weight, &bias);
    let d_pre: Vec<f64> = proj
        .iter()
        .zip(&act)
        .map(|(&p, &a)| if a > 0.0 { p } else { 0.0 })
        .collect();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; c_out];
    let gx = conv_backward(
        &input, batch, c_in, side, &weight, c_out, &d_pre, &mut gw, &mut gb, true,
    );

    let mut report = GradCheckReport::new("conv3x3+relu");
    let (w0, b0) = (weight.clone(), bias.clone());
    check_slot(&mut report, "input", &mut input, &gx, h, tol, |x| {
        dot(&proj, &eval(x, &w0, &b0))
    });
    let x0 = input.clone();
    check_slot(&mut report, "weight", &mut weight, &gw, h, tol, |w| {
        dot(&proj, &eval(&x0, w, &b0))
    });
    let w0 = weight.clone();
    check_slot(&mut report, "bias", &mut bias, &gb, h, tol, |b| {
        dot(&proj, &eval(&x0, &w0, b))
    });
    report
}

pub fn check_pool_layer(seed: u64, h: f64, tol: f64) -> GradCheckReport {
    let mut rng = Stream::new(seed);
    let (planes, side) = (3, 6);
    let mut input = random_vec(&mut rng, planes * side * side, 1.0);
    let proj = random_vec(&mut rng, planes * (side / 2) * (side / 2), 1.0);
    let (_, argmax) = max_pool(&input, planes, side);
    let gx = unpool(&proj, &argmax, planes, side);
    let mut report = GradCheckReport::new("maxpool2x2");
    check_slot(&mut report, "input", &mut input, &gx, h, tol, |x| {
        dot(&proj, &max_pool(x, planes, side).0)
    });
    report
}

pub fn check_dense_layer(seed: u64, h: f64, tol: f64) -> GradCheckReport {
    let mut rng = Stream::new(seed);
    let (batch, features, outputs) = (3, 7, 5);
    let mut x = random_vec(&mut rng, batch * features, 1.0);
    let mut w = random_vec(&mut rng, outputs * features, 0.5);
    let mut b = random_vec(&mut rng, outputs, 0.5);
    let proj = random_vec(&mut rng, batch * outputs, 1.0);
    let eval = |x: &[f64], w: &[f64], b: &[f64]| {
        let mut out = vec![0.0; batch * outputs];
        dense_forward(x, batch, features, w, b, outputs, &mut out);
        dot(&proj, &out)
    };
    let mut grads = [
        Tensor::<f64>::zeros(vec![outputs, features]),
        Tensor::zeros(vec![outputs]),
    ];
    let mut gx = vec![0.0; batch * features];
    dense_backward(
        &x,
        batch,
        features,
        &w,
        outputs,
        &proj,
        &mut grads,
        Some(&mut gx),
    );

    let mut report = GradCheckReport::new("dense");
    let (w0, b0) = (w.clone(), b.clone());
    check_slot(&mut report, "input", &mut x, &gx, h, tol, |x| {
        eval(x, &w0, &b0)
    });
    let x0 = x.clone();
    check_slot(
        &mut report,
        "weight",
        &mut w,
        grads[0].data(),
        h,
        tol,
        |w| eval(&x0, w, &b0),
    );
    let w0 = w.clone();
    check_slot(&mut report, "bias", &mut b, grads[1].data(), h, tol, |b| {
        eval(&x0, &w0, b)
    });
    report
}

pub fn check_softmax_cross_entropy(seed: u64, h: f64, tol: f64) -> GradCheckReport {
    let mut rng = Stream::new(seed);
    let (batch, classes) = (4, 4);
    let mut logits = random_vec(&mut rng, batch * classes, 3.0);
    let labels = [0, 3, 1, 2];
    let loss = |l: &[f64]| {
        let t = Tensor::new(vec![batch, classes], l.to_vec()).unwrap();
        cross_entropy_scaled(&t, &labels, batch).unwrap().0 / batch as f64
    };
    let t = Tensor::new(vec![batch, classes], logits.clone()).unwrap();
    let (_, grad) = cross_entropy_scaled(&t, &labels, batch).unwrap();
    let mut report = GradCheckReport::new("softmax-cross-entropy");
    check_slot(
        &mut report,
        "logits",
        &mut logits,
        grad.data(),
        h,
        tol,
        loss,
    );
    report
}

/// Randomises every tensor, heads included, so no gradient is trivially zero.
pub fn randomized_params(cfg: &NetConfig, seed: u64) -> Result<NetParams<f64>> {
    let mut params = init_params::<f64>(cfg, seed)?;
    let mut rng = Stream::new(seed ^ 0x5eed);
    let layout = cfg.layout();
    for ((name, shape), t) in layout.iter().zip(params.tensors_mut()) {
        let scale = if name.ends_with(".bias") {
            0.1
        } else {
            (3.0 / shape[1..].iter().product::<usize>() as f64).sqrt()
        };
        for v in t.data_mut() {
            *v = rng.uniform_in(-scale, scale);
        }
    }
    Ok(params)
}

/// Whole-network check: pretext cross-entropy plus (when configured) main
/// cross-entropy, with respect to every parameter.
pub fn check_network(
    cfg: &NetConfig,
    batch: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let params = randomized_params(cfg, seed)?;
    let mut rng = Stream::new(seed.wrapping_add(1));
    let s = cfg.input_size;
    let input = Tensor::new(
        vec![batch, 3, s, s],
        (0..batch * 3 * s * s).map(|_| rng.uniform()).collect(),
    )?;
    let pretext_labels: Vec<usize> = (0..batch).map(|i| i % 4).collect();
    let main_labels: Vec<usize> = cfg
        .main_classes
        .map(|k| (0..batch).map(|i| (i + 1) % k).collect())
        .unwrap_or_default();
    let heads = if cfg.main_classes.is_some() {
        Heads::BOTH
    } else {
        Heads::PRETEXT
    };

    let loss_and_grads = |p: &NetParams<f64>| -> Result<(f64, Option<NetParams<f64>>)> {
        let out = forward(p, &input, heads)?;
        let (lp, dp) =
            cross_entropy_scaled(out.pretext_logits.as_ref().unwrap(), &pretext_labels, batch)?;
        let (lm, dm) = match &out.main_logits {
            Some(l) => {
                let (a, b) = cross_entropy_scaled(l, &main_labels, batch)?;
                (a, Some(b))
            }
            None => (0.0, None),
        };
        let g = backward(
            p,
            &out.cache,
            HeadGrads {
                pretext: Some(&dp),
                main: dm.as_ref(),
            },
        )?;
        Ok(((lp + lm) / batch as f64, Some(g)))
    };
    let loss_only = |p: &NetParams<f64>| -> f64 {
        let out = forward(p, &input, heads).expect("shapes fixed");
        let lp = cross_entropy_scaled(out.pretext_logits.as_ref().unwrap(), &pretext_labels, batch)
            .unwrap()
            .0;
        let lm = out
            .main_logits
            .as_ref()
            .map(|l| cross_entropy_scaled(l, &main_labels, batch).unwrap().0)
            .unwrap_or(0.0);
        (lp + lm) / batch as f64
    };

    let (_, grads) = loss_and_grads(&params)?;
    let grads = grads.expect("gradients requested");
    let mut report = GradCheckReport::new(&format!(
        "network {:?} {}x{} batch {batch}",
        cfg.conv_channels, s, s
    ));
    let names: Vec<String> = cfg.layout().into_iter().map(|(n, _)| n).collect();
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for i in 0..probe.tensors()[ti].len() {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let plus = loss_only(&probe);
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let minus = loss_only(&probe);
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            let analytic = grads.tensors()[ti].data()[i].to_f64();
            report.record(name, i, analytic, (plus - minus) / (2.0 * h), tol);
        }
    }
    Ok(report)
}

/// All isolated layer checks followed by the composed-network check on a
/// two-block net with 16×16 inputs and batch 2.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let (h, tol) = (DEFAULT_STEP, DEFAULT_TOLERANCE);
    let cfg = NetConfig {
        input_size: 16,
        conv_channels: vec![4, 6],
        embedding_dim: 8,
        main_classes: Some(3),
    };
    Ok(vec![
        check_conv_layer(seed, h, tol),
        check_pool_layer(seed, h, tol),
        check_dense_layer(seed, h, tol),
        check_softmax_cross_entropy(seed, h, tol),
        check_network(&cfg, 2, seed, h, tol)?,
    ])
}
