//! Deterministic numerical kernel: parameter storage, the one-hidden-layer
//! conditional MLP denoiser with exact analytic backpropagation, Adam, and
//! finite-difference gradient checking.
//!
//! The denoiser maps a 2D point, a timestep and a class label to a predicted
//! 2D noise vector:
//!
//! ```text
//! u        = concat(x, time_emb[t], class_emb[c])
//! eps_hat  = w2 * relu(w1 * u + b1) + b2
//! ```
//!
//! Everything is f64. ReLU's subgradient at exactly 0 is 0.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Points live in R^2; the network predicts 2-component noise.
pub const DATA_DIM: usize = 2;

const GRAD_CHECK_H: f64 = 1e-5;
const MAX_PROBE_BATCH: usize = 8;

// ── architecture ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub hidden: usize,
    pub class_emb_dim: usize,
    pub time_emb_dim: usize,
    pub num_classes: usize,
    pub timesteps: usize,
}

impl Arch {
    /// Default toy architecture: 128 hidden units, 16-dim learned class and
    /// time embedding tables, 6 classes, 100 timesteps.
    pub fn toy() -> Self {
        Arch {
            hidden: 128,
            class_emb_dim: 16,
            time_emb_dim: 16,
            num_classes: 6,
            timesteps: 100,
        }
    }

    /// Width of the concatenated MLP input: 2 + class_emb_dim + time_emb_dim.
    pub fn input_dim(&self) -> usize {
        DATA_DIM + self.class_emb_dim + self.time_emb_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 {
            return Err(Error::Config("arch: hidden must be >= 1".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("arch: num_classes must be >= 1".into()));
        }
        if self.timesteps < 1 {
            return Err(Error::Config("arch: timesteps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input_dim()
            + self.hidden
            + DATA_DIM * self.hidden
            + DATA_DIM
            + self.num_classes * self.class_emb_dim
            + self.timesteps * self.time_emb_dim
    }
}

// ── dense storage ─────────────────────────────────────────────────────────────

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

// ── parameters and gradients ─────────────────────────────────────────────────

/// Tensor names in declared (and serialized) field order.
pub const TENSOR_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "class_emb", "time_emb"];

/// All learnable tensors of the conditional denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    /// First-layer weights, `[hidden x input_dim]`.
    pub w1: Matrix,
    /// First-layer bias, `[hidden]`.
    pub b1: Vec<f64>,
    /// Output weights, `[2 x hidden]`.
    pub w2: Matrix,
    /// Output bias, `[2]`.
    pub b2: Vec<f64>,
    /// Learned class-embedding table, `[num_classes x class_emb_dim]`.
    pub class_emb: Matrix,
    /// Learned time-embedding table, `[timesteps x time_emb_dim]`.
    pub time_emb: Matrix,
}

impl ModelParams {
    /// All-zero parameters (useful as a deterministic baseline).
    pub fn zeros(arch: Arch) -> Self {
        ModelParams {
            arch,
            w1: Matrix::zeros(arch.hidden, arch.input_dim()),
            b1: vec![0.0; arch.hidden],
            w2: Matrix::zeros(DATA_DIM, arch.hidden),
            b2: vec![0.0; DATA_DIM],
            class_emb: Matrix::zeros(arch.num_classes, arch.class_emb_dim),
            time_emb: Matrix::zeros(arch.timesteps, arch.time_emb_dim),
        }
    }

    /// Scaled-uniform weight init, zero biases, small-normal embeddings.
    ///
    /// Weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings from
    /// N(0, 0.02). Draw order (w1, w2, class_emb, time_emb, each row-major) is
    /// part of the determinism contract.
    pub fn init(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut p = ModelParams::zeros(arch);
        let lim1 = 1.0 / (arch.input_dim() as f64).sqrt();
        for w in p.w1.as_mut_slice() {
            *w = rng.uniform_range(-lim1, lim1);
        }
        let lim2 = 1.0 / (arch.hidden as f64).sqrt();
        for w in p.w2.as_mut_slice() {
            *w = rng.uniform_range(-lim2, lim2);
        }
        for e in p.class_emb.as_mut_slice() {
            *e = 0.02 * rng.normal();
        }
        for e in p.time_emb.as_mut_slice() {
            *e = 0.02 * rng.normal();
        }
        Ok(p)
    }

    /// Flat views of every tensor in declared field order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", self.w1.as_slice()),
            ("b1", &self.b1),
            ("w2", self.w2.as_slice()),
            ("b2", &self.b2),
            ("class_emb", self.class_emb.as_slice()),
            ("time_emb", self.time_emb.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("w1", self.w1.as_mut_slice()),
            ("b1", &mut self.b1),
            ("w2", self.w2.as_mut_slice()),
            ("b2", &mut self.b2),
            ("class_emb", self.class_emb.as_mut_slice()),
            ("time_emb", self.time_emb.as_mut_slice()),
        ]
    }

    pub fn congruent(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    /// Name of the first tensor containing a NaN/Inf, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| *name)
    }

    /// Order-sensitive 64-bit digest of all parameter values.
    pub fn checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (_, t) in self.tensors() {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// One gradient tensor per `ModelParams` field, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub arch: Arch,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub class_emb: Matrix,
    pub time_emb: Matrix,
}

impl Gradients {
    pub fn zeros(arch: Arch) -> Self {
        let p = ModelParams::zeros(arch);
        Gradients {
            arch,
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
            class_emb: p.class_emb,
            time_emb: p.time_emb,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", self.w1.as_slice()),
            ("b1", &self.b1),
            ("w2", self.w2.as_slice()),
            ("b2", &self.b2),
            ("class_emb", self.class_emb.as_slice()),
            ("time_emb", self.time_emb.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            ("w1", self.w1.as_mut_slice()),
            ("b1", &mut self.b1),
            ("w2", self.w2.as_mut_slice()),
            ("b2", &mut self.b2),
            ("class_emb", self.class_emb.as_mut_slice()),
            ("time_emb", self.time_emb.as_mut_slice()),
        ]
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= s;
            }
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| *name)
    }
}

// ── forward / backward ───────────────────────────────────────────────────────

/// Activations recorded by `forward` for the exact backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    pub t: usize,
    pub c: usize,
    input: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
}

fn check_forward_inputs(params: &ModelParams, t: usize, c: usize) -> Result<()> {
    let arch = &params.arch;
    if t >= arch.timesteps {
        return Err(Error::Input(format!(
            "timestep {t} out of range 0..{}",
            arch.timesteps
        )));
    }
    if c >= arch.num_classes {
        return Err(Error::Input(format!(
            "class {c} out of range 0..{}",
            arch.num_classes
        )));
    }
    Ok(())
}

/// Noise prediction plus the activation cache for `backward`.
pub fn forward(params: &ModelParams, x: [f64; 2], t: usize, c: usize) -> Result<([f64; 2], Cache)> {
    check_forward_inputs(params, t, c)?;
    let arch = &params.arch;

    let mut input = Vec::with_capacity(arch.input_dim());
    input.extend_from_slice(&x);
    input.extend_from_slice(params.time_emb.row(t));
    input.extend_from_slice(params.class_emb.row(c));

    let mut pre_hidden = vec![0.0; arch.hidden];
    for (j, pre) in pre_hidden.iter_mut().enumerate() {
        let row = params.w1.row(j);
        let mut acc = params.b1[j];
        for (w, u) in row.iter().zip(&input) {
            acc += w * u;
        }
        *pre = acc;
    }
    let hidden: Vec<f64> = pre_hidden.iter().map(|&z| z.max(0.0)).collect();

    let mut eps_hat = [0.0; 2];
    for (o, out) in eps_hat.iter_mut().enumerate() {
        let row = params.w2.row(o);
        let mut acc = params.b2[o];
        for (w, h) in row.iter().zip(&hidden) {
            acc += w * h;
        }
        *out = acc;
    }

    Ok((
        eps_hat,
        Cache {
            t,
            c,
            input,
            pre_hidden,
            hidden,
        },
    ))
}

/// Noise prediction without a cache (sampling and probe paths).
pub fn predict(params: &ModelParams, x: [f64; 2], t: usize, c: usize) -> Result<[f64; 2]> {
    check_forward_inputs(params, t, c)?;
    let arch = &params.arch;
    let te = params.time_emb.row(t);
    let ce = params.class_emb.row(c);

    let mut eps_hat = params.b2.clone();
    for j in 0..arch.hidden {
        let row = params.w1.row(j);
        let mut acc = params.b1[j] + row[0] * x[0] + row[1] * x[1];
        for (w, u) in row[2..2 + arch.time_emb_dim].iter().zip(te) {
            acc += w * u;
        }
        for (w, u) in row[2 + arch.time_emb_dim..].iter().zip(ce) {
            acc += w * u;
        }
        if acc > 0.0 {
            eps_hat[0] += params.w2[(0, j)] * acc;
            eps_hat[1] += params.w2[(1, j)] * acc;
        }
    }
    Ok([eps_hat[0], eps_hat[1]])
}

/// Gradient of `d_eps . eps_hat` w.r.t. every parameter tensor, accumulated
/// into `grads`. Only the embedding rows actually used receive contributions.
pub fn accumulate_backward(
    params: &ModelParams,
    cache: &Cache,
    d_eps: [f64; 2],
    grads: &mut Gradients,
) -> Result<()> {
    let arch = &params.arch;
    if cache.input.len() != arch.input_dim() || cache.pre_hidden.len() != arch.hidden {
        return Err(Error::Internal(format!(
            "cache shape ({} in, {} hidden) does not match arch ({} in, {} hidden)",
            cache.input.len(),
            cache.pre_hidden.len(),
            arch.input_dim(),
            arch.hidden
        )));
    }
    if grads.arch != *arch {
        return Err(Error::Internal("gradient arch mismatch".into()));
    }

    // Output layer.
    for (o, &d) in d_eps.iter().enumerate() {
        grads.b2[o] += d;
        let row = grads.w2.row_mut(o);
        for (g, h) in row.iter_mut().zip(&cache.hidden) {
            *g += d * h;
        }
    }

    // Through ReLU: subgradient at exactly 0 is 0.
    let mut d_pre = vec![0.0; arch.hidden];
    for (j, dp) in d_pre.iter_mut().enumerate() {
        if cache.pre_hidden[j] > 0.0 {
            *dp = d_eps[0] * params.w2[(0, j)] + d_eps[1] * params.w2[(1, j)];
        }
    }

    // First layer and input.
    let mut d_input = vec![0.0; arch.input_dim()];
    for (j, &dp) in d_pre.iter().enumerate() {
        if dp == 0.0 {
            continue;
        }
        grads.b1[j] += dp;
        let grow = grads.w1.row_mut(j);
        for (g, u) in grow.iter_mut().zip(&cache.input) {
            *g += dp * u;
        }
        let wrow = params.w1.row(j);
        for (di, w) in d_input.iter_mut().zip(wrow) {
            *di += dp * w;
        }
    }

    // Embedding rows used by this sample.
    let te = arch.time_emb_dim;
    for (g, di) in grads
        .time_emb
        .row_mut(cache.t)
        .iter_mut()
        .zip(&d_input[DATA_DIM..DATA_DIM + te])
    {
        *g += di;
    }
    for (g, di) in grads
        .class_emb
        .row_mut(cache.c)
        .iter_mut()
        .zip(&d_input[DATA_DIM + te..])
    {
        *g += di;
    }
    Ok(())
}

/// Gradient of `d_eps . eps_hat` w.r.t. every parameter tensor.
pub fn backward(params: &ModelParams, cache: &Cache, d_eps: [f64; 2]) -> Result<Gradients> {
    let mut grads = Gradients::zeros(params.arch);
    accumulate_backward(params, cache, d_eps, &mut grads)?;
    Ok(grads)
}

// ── Adam ─────────────────────────────────────────────────────────────────────

/// Adam hyperparameters (no weight decay).
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state: first/second moment per parameter tensor plus a step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    step: u64,
    hyper: AdamHyper,
}

impl Adam {
    pub fn new(arch: Arch) -> Self {
        Adam {
            m: Gradients::zeros(arch),
            v: Gradients::zeros(arch),
            step: 0,
            hyper: AdamHyper::default(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Rejects non-finite gradients
    /// before touching any state.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.arch != params.arch {
            return Err(Error::Internal("adam: gradient arch mismatch".into()));
        }
        if let Some(tensor) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient { tensor });
        }
        self.step += 1;
        let AdamHyper {
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let pt = params.tensors_mut();
        let mt = self.m.tensors_mut();
        let vt = self.v.tensors_mut();
        let gt = grads.tensors();
        for i in 0..pt.len() {
            let theta = &mut *pt[i].1;
            let m = &mut *mt[i].1;
            let v = &mut *vt[i].1;
            let g = gt[i].1;
            for k in 0..theta.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }

        if let Some(tensor) = params.first_non_finite() {
            return Err(Error::TrainingDiverged {
                step: self.step as usize,
                detail: format!("non-finite parameter in tensor '{tensor}'"),
            });
        }
        Ok(())
    }
}

// ── gradient checking ────────────────────────────────────────────────────────

/// A fixed (input, timestep, class, target-noise) tuple; the probe loss is the
/// mean over probes of the squared prediction error against `target_eps`.
#[derive(Debug, Clone, Copy)]
pub struct LossProbe {
    pub x: [f64; 2],
    pub t: usize,
    pub c: usize,
    pub target_eps: [f64; 2],
}

/// Mean squared prediction error over the probe batch. Deterministic in
/// `params`, so finite differences of it are well defined.
pub fn probe_loss(params: &ModelParams, probes: &[LossProbe]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Input("probe batch is empty".into()));
    }
    let mut total = 0.0;
    for p in probes {
        let eps_hat = predict(params, p.x, p.t, p.c)?;
        let dx = eps_hat[0] - p.target_eps[0];
        let dy = eps_hat[1] - p.target_eps[1];
        total += dx * dx + dy * dy;
    }
    Ok(total / probes.len() as f64)
}

/// Analytic gradient of `probe_loss`.
pub fn probe_loss_gradients(params: &ModelParams, probes: &[LossProbe]) -> Result<Gradients> {
    if probes.is_empty() {
        return Err(Error::Input("probe batch is empty".into()));
    }
    let mut grads = Gradients::zeros(params.arch);
    let inv_n = 1.0 / probes.len() as f64;
    for p in probes {
        let (eps_hat, cache) = forward(params, p.x, p.t, p.c)?;
        let d_eps = [
            2.0 * (eps_hat[0] - p.target_eps[0]) * inv_n,
            2.0 * (eps_hat[1] - p.target_eps[1]) * inv_n,
        ];
        accumulate_backward(params, &cache, d_eps, &mut grads)?;
    }
    Ok(grads)
}

fn tensor_slice_mut(params: &mut ModelParams, idx: usize) -> &mut [f64] {
    match idx {
        0 => params.w1.as_mut_slice(),
        1 => &mut params.b1,
        2 => params.w2.as_mut_slice(),
        3 => &mut params.b2,
        4 => params.class_emb.as_mut_slice(),
        5 => params.time_emb.as_mut_slice(),
        _ => unreachable!("tensor index out of range"),
    }
}

/// Central-difference gradient of `probe_loss`, perturbing one parameter at a
/// time by `h`.
pub fn numeric_probe_gradients(
    params: &ModelParams,
    probes: &[LossProbe],
    h: f64,
) -> Result<Gradients> {
    let mut work = params.clone();
    let mut grads = Gradients::zeros(params.arch);
    for ti in 0..TENSOR_NAMES.len() {
        let len = tensor_slice_mut(&mut work, ti).len();
        for k in 0..len {
            let orig = tensor_slice_mut(&mut work, ti)[k];
            tensor_slice_mut(&mut work, ti)[k] = orig + h;
            let plus = probe_loss(&work, probes)?;
            tensor_slice_mut(&mut work, ti)[k] = orig - h;
            let minus = probe_loss(&work, probes)?;
            tensor_slice_mut(&mut work, ti)[k] = orig;
            grads.tensors_mut()[ti].1[k] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Smallest |pre-activation| over the probe batch.
///
/// Central differences are only valid away from the ReLU kink: a probe whose
/// pre-activation sits within ~h of 0 can flip sign under perturbation and
/// corrupt the numeric gradient. Checks should redraw probes until this
/// margin is comfortably above h.
pub fn kink_margin(params: &ModelParams, probes: &[LossProbe]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for p in probes {
        let (_, cache) = forward(params, p.x, p.t, p.c)?;
        for &z in &cache.pre_hidden {
            margin = margin.min(z.abs());
        }
    }
    Ok(margin)
}

/// Max over all parameter entries of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn max_rel_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (av, nv) in a.iter().zip(n) {
            let rel = (av - nv).abs() / (nv.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Compare analytic backprop against central finite differences (h = 1e-5)
/// over a small probe batch; returns the max relative error.
pub fn grad_check(params: &ModelParams, probes: &[LossProbe]) -> Result<f64> {
    if probes.is_empty() || probes.len() > MAX_PROBE_BATCH {
        return Err(Error::Input(format!(
            "probe batch must have 1..={MAX_PROBE_BATCH} points, got {}",
            probes.len()
        )));
    }
    let analytic = probe_loss_gradients(params, probes)?;
    let numeric = numeric_probe_gradients(params, probes, GRAD_CHECK_H)?;
    Ok(max_rel_error(&analytic, &numeric))
}

/// Randomized gradient-check harness: `draws` independent (architecture,
/// parameters, probes) configurations. Returns the worst max relative error
/// over all draws.
///
/// Probes are redrawn while the finite-difference oracle is invalid for them:
/// either a pre-activation sits within reach of the ReLU kink, or some true
/// gradient entry falls inside (0, 1e-5), where the oracle's ~1e-10 absolute
/// noise floor overwhelms the relative comparison. Exact zeros are fine (both
/// sides are exactly zero on dead paths).
pub fn grad_check_harness(draws: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let mut rng = Rng::for_phase(seed, &format!("gradcheck/{i}"));
        let arch = Arch {
            hidden: 4 + rng.below(29),
            class_emb_dim: 2 + rng.below(11),
            time_emb_dim: 2 + rng.below(11),
            num_classes: 2 + rng.below(7),
            timesteps: 5 + rng.below(36),
        };
        let params = ModelParams::init(arch, &mut rng)?;
        let (analytic, numeric) = loop {
            let probes: Vec<LossProbe> = (0..4)
                .map(|_| LossProbe {
                    x: [2.0 * rng.normal(), 2.0 * rng.normal()],
                    t: rng.below(arch.timesteps),
                    c: rng.below(arch.num_classes),
                    target_eps: rng.normal2(),
                })
                .collect();
            if kink_margin(&params, &probes)? <= 1e-3 {
                continue;
            }
            let numeric = numeric_probe_gradients(&params, &probes, GRAD_CHECK_H)?;
            let dead_zone = numeric
                .tensors()
                .iter()
                .any(|(_, t)| t.iter().any(|v| *v != 0.0 && v.abs() < 1e-5));
            if dead_zone {
                continue;
            }
            break (probe_loss_gradients(&params, &probes)?, numeric);
        };
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch {
            hidden: 12,
            class_emb_dim: 5,
            time_emb_dim: 4,
            num_classes: 3,
            timesteps: 7,
        }
    }

    fn random_params(arch: Arch, seed: u64) -> ModelParams {
        let mut rng = Rng::for_phase(seed, "nn-test-init");
        ModelParams::init(arch, &mut rng).unwrap()
    }

    fn random_probes(arch: Arch, n: usize, seed: u64) -> Vec<LossProbe> {
        let mut rng = Rng::for_phase(seed, "nn-test-probes");
        (0..n)
            .map(|_| LossProbe {
                x: [rng.normal() * 2.0, rng.normal() * 2.0],
                t: rng.below(arch.timesteps),
                c: rng.below(arch.num_classes),
                target_eps: rng.normal2(),
            })
            .collect()
    }

    /// Straight-line re-implementation of the forward map, kept independent of
    /// the production code path on purpose.
    fn naive_forward(p: &ModelParams, x: [f64; 2], t: usize, c: usize) -> [f64; 2] {
        let mut u = vec![x[0], x[1]];
        u.extend_from_slice(p.time_emb.row(t));
        u.extend_from_slice(p.class_emb.row(c));
        let mut out = [p.b2[0], p.b2[1]];
        for j in 0..p.arch.hidden {
            let mut z = p.b1[j];
            for (i, &ui) in u.iter().enumerate() {
                z += p.w1[(j, i)] * ui;
            }
            let h = if z > 0.0 { z } else { 0.0 };
            out[0] += p.w2[(0, j)] * h;
            out[1] += p.w2[(1, j)] * h;
        }
        out
    }

    #[test]
    fn toy_arch_shapes() {
        let params = random_params(Arch::toy(), 1);
        assert_eq!(params.w1.rows(), 128);
        assert_eq!(params.w1.cols(), 34); // 2 + 16 + 16
        assert_eq!(params.arch.param_count(), 128 * 34 + 128 + 2 * 128 + 2 + 6 * 16 + 100 * 16);
    }

    #[test]
    fn init_is_deterministic() {
        let a = random_params(Arch::toy(), 1);
        let b = random_params(Arch::toy(), 1);
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = random_params(Arch::toy(), 2);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn zero_hidden_is_config_error() {
        let mut arch = small_arch();
        arch.hidden = 0;
        let mut rng = Rng::for_phase(1, "x");
        assert!(matches!(
            ModelParams::init(arch, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let params = ModelParams::zeros(small_arch());
        let (eps, _) = forward(&params, [3.0, -1.5], 2, 1).unwrap();
        assert_eq!(eps, [0.0, 0.0]);
    }

    #[test]
    fn bias_passthrough_when_w2_zero() {
        let mut params = random_params(small_arch(), 3);
        params.w2 = Matrix::zeros(DATA_DIM, params.arch.hidden);
        params.b2 = vec![1.0, 2.0];
        for (x, t, c) in [([0.0, 0.0], 0, 0), ([5.0, -9.0], 6, 2), ([0.3, 0.4], 3, 1)] {
            let (eps, _) = forward(&params, x, t, c).unwrap();
            assert_eq!(eps, [1.0, 2.0]);
        }
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let params = random_params(small_arch(), 4);
        let mut rng = Rng::for_phase(4, "nn-test-inputs");
        for _ in 0..50 {
            let x = [rng.normal() * 3.0, rng.normal() * 3.0];
            let t = rng.below(params.arch.timesteps);
            let c = rng.below(params.arch.num_classes);
            let (eps, _) = forward(&params, x, t, c).unwrap();
            let fast = predict(&params, x, t, c).unwrap();
            let expect = naive_forward(&params, x, t, c);
            for o in 0..2 {
                assert!((eps[o] - expect[o]).abs() < 1e-12);
                assert!((fast[o] - expect[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let params = random_params(small_arch(), 5);
        assert!(matches!(
            forward(&params, [0.0, 0.0], 7, 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward(&params, [0.0, 0.0], 0, 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn backward_zero_cotangent_gives_zero_grads() {
        let params = random_params(small_arch(), 6);
        let (_, cache) = forward(&params, [1.0, 2.0], 1, 1).unwrap();
        let grads = backward(&params, &cache, [0.0, 0.0]).unwrap();
        assert_eq!(grads, Gradients::zeros(params.arch));
    }

    #[test]
    fn output_bias_gradient_equals_cotangent() {
        let params = random_params(small_arch(), 7);
        let (_, cache) = forward(&params, [0.5, -0.25], 3, 2).unwrap();
        let grads = backward(&params, &cache, [0.7, -0.3]).unwrap();
        assert_eq!(grads.b2, vec![0.7, -0.3]);
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let params = random_params(small_arch(), 8);
        let (_, cache) = forward(&params, [1.1, -0.4], 5, 0).unwrap();
        let d1 = [0.3, -0.9];
        let d2 = [-1.2, 0.5];
        let (a, b) = (2.5, -0.75);
        let combined = backward(&params, &cache, [a * d1[0] + b * d2[0], a * d1[1] + b * d2[1]])
            .unwrap();
        let mut by_parts = backward(&params, &cache, d1).unwrap();
        by_parts.scale(a);
        by_parts.add_scaled(&backward(&params, &cache, d2).unwrap(), b);
        for ((_, x), (_, y)) in combined.tensors().into_iter().zip(by_parts.tensors()) {
            for (xv, yv) in x.iter().zip(y) {
                assert!((xv - yv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // Zero w1/b1 makes every pre-activation exactly 0; nonzero w2 would
        // carry gradient through if the convention were relu'(0) = 1.
        let mut params = ModelParams::zeros(small_arch());
        for w in params.w2.as_mut_slice() {
            *w = 1.0;
        }
        let (_, cache) = forward(&params, [1.0, 1.0], 0, 0).unwrap();
        let grads = backward(&params, &cache, [1.0, 1.0]).unwrap();
        assert!(grads.w1.as_slice().iter().all(|&g| g == 0.0));
        assert!(grads.b1.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_check_passes_on_random_draws() {
        for seed in 0..5 {
            let params = random_params(small_arch(), 100 + seed);
            let mut probe_seed = 200 + seed;
            let probes = loop {
                let probes = random_probes(params.arch, 4, probe_seed);
                if kink_margin(&params, &probes).unwrap() > 1e-3 {
                    break probes;
                }
                probe_seed += 1000;
            };
            let err = grad_check(&params, &probes).unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel error {err}");
        }
    }

    #[test]
    fn grad_check_detects_doubled_w2_gradient() {
        let params = random_params(small_arch(), 11);
        let probes = random_probes(params.arch, 4, 12);
        let mut analytic = probe_loss_gradients(&params, &probes).unwrap();
        for g in analytic.w2.as_mut_slice() {
            *g *= 2.0;
        }
        let numeric = numeric_probe_gradients(&params, &probes, GRAD_CHECK_H).unwrap();
        // Doubling makes |2g - g| / |g| = 1 on every w2 entry that matters.
        let mut w2_err: f64 = 0.0;
        for (a, n) in analytic.w2.as_slice().iter().zip(numeric.w2.as_slice()) {
            w2_err = w2_err.max((a - n).abs() / (n.abs() + 1e-8));
        }
        assert!((w2_err - 1.0).abs() < 1e-3, "w2 rel error {w2_err}");
    }

    #[test]
    fn grad_check_zero_network_zero_loss() {
        let params = ModelParams::zeros(small_arch());
        let probes = vec![LossProbe {
            x: [0.4, -0.2],
            t: 1,
            c: 0,
            target_eps: [0.0, 0.0],
        }];
        let err = grad_check(&params, &probes).unwrap();
        assert!(err <= 1e-12);
    }

    #[test]
    fn grad_check_rejects_oversized_batch() {
        let params = ModelParams::zeros(small_arch());
        let probes = random_probes(params.arch, 9, 1);
        assert!(matches!(grad_check(&params, &probes), Err(Error::Input(_))));
    }

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut params = random_params(small_arch(), 13);
        let before = params.clone();
        let mut adam = Adam::new(params.arch);
        let zero_grads = Gradients::zeros(params.arch);
        adam.step(&mut params, &zero_grads, 0.1).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        // With g = 1 on one entry, bias correction makes m_hat = v_hat = 1, so
        // the first update is lr / (1 + eps) ~ lr.
        let mut params = ModelParams::zeros(small_arch());
        let mut grads = Gradients::zeros(params.arch);
        grads.b2[0] = 1.0;
        let mut adam = Adam::new(params.arch);
        adam.step(&mut params, &grads, 0.1).unwrap();
        assert!((params.b2[0] + 0.1).abs() < 1e-8, "got {}", params.b2[0]);
        assert_eq!(params.b2[1], 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = random_params(small_arch(), 14);
        let mut grads = Gradients::zeros(params.arch);
        grads.w2[(0, 3)] = f64::NAN;
        let mut adam = Adam::new(params.arch);
        match adam.step(&mut params, &grads, 0.1) {
            Err(Error::NonFiniteGradient { tensor }) => assert_eq!(tensor, "w2"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn adam_trajectories_replay_bit_identically() {
        let arch = small_arch();
        let run = |seed: u64| {
            let mut params = random_params(arch, seed);
            let mut adam = Adam::new(arch);
            let probes = random_probes(arch, 4, seed ^ 0xabcd);
            for _ in 0..25 {
                let grads = probe_loss_gradients(&params, &probes).unwrap();
                adam.step(&mut params, &grads, 1e-2).unwrap();
            }
            params.checksum()
        };
        assert_eq!(run(21), run(21));
        assert_ne!(run(21), run(22));
    }
}
