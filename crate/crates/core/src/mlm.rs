//! A small masked language model trained with analytic gradients.
//!
//! Every masked position of an example shares one context vector: the mean
//! of `token embedding + segment embedding` over the unmasked, non-separator
//! positions. The output head reads the features `[c, c ⊙ c]`, so a single
//! linear softmax layer can still react to agreement between parts of the
//! context (the squared term carries pairwise products).
//!
//! Losses:
//! * [`masked_ce_loss`]: mean cross-entropy over masked positions.
//! * [`mixed_loss`]: `alpha * token_loss + (1 - alpha) * segment_loss`.
//! * verbalizer cross-entropy over the two-way `{no, yes}` renormalization,
//!   used for supervised fine-tuning (see [`crate::pet`]).

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dke::{is_separator, MaskKind, MaskedExample};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_segments: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_segments: 16,
            init_scale: 0.5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableMlm {
    vocab_size: usize,
    dim: usize,
    n_segments: usize,
    /// `vocab_size x dim`
    pub embeddings: Vec<f64>,
    /// `n_segments x dim`
    pub segments: Vec<f64>,
    /// `vocab_size x 2*dim`, row per output token.
    pub output: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TrainableMlm {
    pub fn new(vocab_size: usize, cfg: &ModelConfig) -> Result<Self> {
        if cfg.dim < 8 {
            return Err(Error::Config(format!("model dim {} < 8", cfg.dim)));
        }
        if cfg.n_segments < 2 {
            return Err(Error::Config("need at least two segment embeddings".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let e_scale = cfg.init_scale;
        let w_scale = cfg.init_scale / (2.0 * cfg.dim as f64).sqrt();
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        Ok(Self {
            vocab_size,
            dim: cfg.dim,
            n_segments: cfg.n_segments,
            embeddings: draw(vocab_size * cfg.dim, e_scale),
            segments: draw(cfg.n_segments * cfg.dim, e_scale * 0.1),
            output: draw(vocab_size * 2 * cfg.dim, w_scale),
            bias: vec![0.0; vocab_size],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn param_count(&self) -> usize {
        self.embeddings.len() + self.segments.len() + self.output.len() + self.bias.len()
    }

    fn segment_row(&self, segment: u32) -> usize {
        (segment as usize).min(self.n_segments - 1)
    }

    fn embedding(&self, token: TokenId) -> &[f64] {
        let t = token as usize;
        &self.embeddings[t * self.dim..(t + 1) * self.dim]
    }

    fn segment(&self, segment: u32) -> &[f64] {
        let s = self.segment_row(segment);
        &self.segments[s * self.dim..(s + 1) * self.dim]
    }

    fn output_row(&self, token: usize) -> &[f64] {
        let f = 2 * self.dim;
        &self.output[token * f..(token + 1) * f]
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.segments)
            .chain(&self.output)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }

    /// Flat view over all parameters: embeddings, segments, output, bias.
    pub fn param(&self, idx: usize) -> f64 {
        let (slice, i) = self.locate(idx);
        match slice {
            0 => self.embeddings[i],
            1 => self.segments[i],
            2 => self.output[i],
            _ => self.bias[i],
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (slice, i) = self.locate(idx);
        match slice {
            0 => self.embeddings[i] = value,
            1 => self.segments[i] = value,
            2 => self.output[i] = value,
            _ => self.bias[i] = value,
        }
    }

    fn locate(&self, mut idx: usize) -> (u8, usize) {
        for (slice, len) in [
            self.embeddings.len(),
            self.segments.len(),
            self.output.len(),
        ]
        .into_iter()
        .enumerate()
        {
            if idx < len {
                return (slice as u8, idx);
            }
            idx -= len;
        }
        assert!(idx < self.bias.len(), "parameter index out of range");
        (3, idx)
    }
}

/// Context of one example: the pooled vector and who contributed to it.
#[derive(Debug, Clone)]
pub struct Context {
    pub vector: Vec<f64>,
    pub members: Vec<(TokenId, u32)>,
}

impl Context {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn features(&self) -> Vec<f64> {
        let mut f = self.vector.clone();
        f.extend(self.vector.iter().map(|x| x * x));
        f
    }
}

pub fn context(model: &TrainableMlm, ex: &MaskedExample) -> Context {
    let mut masked = vec![false; ex.input_ids.len()];
    for &p in &ex.masked_positions {
        masked[p] = true;
    }
    let mut vector = vec![0.0; model.dim];
    let mut members = Vec::new();
    for (i, &tok) in ex.input_ids.iter().enumerate() {
        if masked[i] || is_separator(tok) {
            continue;
        }
        let seg = ex.segment_ids[i];
        for ((v, e), s) in vector
            .iter_mut()
            .zip(model.embedding(tok))
            .zip(model.segment(seg))
        {
            *v += e + s;
        }
        members.push((tok, seg));
    }
    if !members.is_empty() {
        let n = members.len() as f64;
        vector.iter_mut().for_each(|v| *v /= n);
    }
    Context { vector, members }
}

fn logit(model: &TrainableMlm, features: &[f64], token: usize) -> f64 {
    model.bias[token]
        + model
            .output_row(token)
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum::<f64>()
}

pub fn all_logits(model: &TrainableMlm, ctx: &Context) -> Vec<f64> {
    if ctx.is_empty() {
        return vec![0.0; model.vocab_size];
    }
    let features = ctx.features();
    (0..model.vocab_size)
        .map(|v| logit(model, &features, v))
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// One distribution per masked position, in `masked_positions` order.
    pub distributions: Vec<Vec<f64>>,
    pub empty_context: bool,
}

/// Distributions over the vocabulary at every masked position. An empty
/// context yields the uniform distribution and sets `empty_context`.
pub fn forward_logits(model: &TrainableMlm, ex: &MaskedExample) -> Forward {
    let ctx = context(model, ex);
    let dist = softmax(&all_logits(model, &ctx));
    Forward {
        distributions: vec![dist; ex.masked_positions.len()],
        empty_context: ctx.is_empty(),
    }
}

pub fn masked_ce_loss(model: &TrainableMlm, ex: &MaskedExample) -> f64 {
    let ctx = context(model, ex);
    let logp = log_softmax(&all_logits(model, &ctx));
    let n = ex.masked_positions.len() as f64;
    -ex.target_ids().map(|t| logp[t as usize]).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedLossConfig {
    pub alpha: f64,
}

impl Default for MixedLossConfig {
    fn default() -> Self {
        Self { alpha: 0.7 }
    }
}

impl MixedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

fn check_kinds(token: &MaskedExample, segment: &MaskedExample) -> Result<()> {
    if token.mask_kind != MaskKind::Token {
        return Err(Error::MaskKindMismatch {
            expected: "token",
            actual: token.mask_kind.as_str(),
        });
    }
    if segment.mask_kind != MaskKind::Segment {
        return Err(Error::MaskKindMismatch {
            expected: "segment",
            actual: segment.mask_kind.as_str(),
        });
    }
    Ok(())
}

pub fn mixed_loss(
    model: &TrainableMlm,
    token: &MaskedExample,
    segment: &MaskedExample,
    cfg: &MixedLossConfig,
) -> Result<f64> {
    check_kinds(token, segment)?;
    Ok(cfg.alpha * masked_ce_loss(model, token) + (1.0 - cfg.alpha) * masked_ce_loss(model, segment))
}

/// Two-way verbalizer head: (logit_no, logit_yes).
pub fn verbalizer_logits(
    model: &TrainableMlm,
    ex: &MaskedExample,
    no: TokenId,
    yes: TokenId,
) -> (f64, f64) {
    let ctx = context(model, ex);
    if ctx.is_empty() {
        return (0.0, 0.0);
    }
    let f = ctx.features();
    (logit(model, &f, no as usize), logit(model, &f, yes as usize))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of the `{no, yes}` renormalized distribution against `label`.
pub fn verbalizer_loss(
    model: &TrainableMlm,
    ex: &MaskedExample,
    no: TokenId,
    yes: TokenId,
    label: bool,
) -> f64 {
    let (z_no, z_yes) = verbalizer_logits(model, ex, no, yes);
    let margin = z_yes - z_no;
    // -log sigmoid(m) = softplus(-m)
    let signed = if label { -margin } else { margin };
    softplus(signed)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One term of a training objective.
#[derive(Debug, Clone, Copy)]
pub enum TrainUnit<'a> {
    Masked(&'a MaskedExample),
    Mixed {
        token: &'a MaskedExample,
        segment: &'a MaskedExample,
        alpha: f64,
    },
    Verbalizer {
        example: &'a MaskedExample,
        no: TokenId,
        yes: TokenId,
        label: bool,
    },
}

impl TrainUnit<'_> {
    pub fn loss(&self, model: &TrainableMlm) -> Result<f64> {
        match *self {
            TrainUnit::Masked(ex) => Ok(masked_ce_loss(model, ex)),
            TrainUnit::Mixed {
                token,
                segment,
                alpha,
            } => mixed_loss(model, token, segment, &MixedLossConfig { alpha }),
            TrainUnit::Verbalizer {
                example,
                no,
                yes,
                label,
            } => Ok(verbalizer_loss(model, example, no, yes, label)),
        }
    }
}

/// Gradient buffers shaped like the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embeddings: Vec<f64>,
    pub segments: Vec<f64>,
    pub output: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &TrainableMlm) -> Self {
        Self {
            embeddings: vec![0.0; model.embeddings.len()],
            segments: vec![0.0; model.segments.len()],
            output: vec![0.0; model.output.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn get(&self, model: &TrainableMlm, idx: usize) -> f64 {
        let (slice, i) = model.locate(idx);
        match slice {
            0 => self.embeddings[i],
            1 => self.segments[i],
            2 => self.output[i],
            _ => self.bias[i],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.segments)
            .chain(&self.output)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }
}

/// Backpropagates `dlogit` (for the listed output rows) through the head
/// and the pooled context.
fn backprop(
    model: &TrainableMlm,
    ctx: &Context,
    dlogits: &[(usize, f64)],
    grads: &mut Gradients,
) {
    if ctx.is_empty() {
        return;
    }
    let d = model.dim;
    let features = ctx.features();
    let mut dphi = vec![0.0; 2 * d];
    for &(v, dz) in dlogits {
        if dz == 0.0 {
            continue;
        }
        grads.bias[v] += dz;
        let row = model.output_row(v);
        let grow = &mut grads.output[v * 2 * d..(v + 1) * 2 * d];
        for j in 0..2 * d {
            grow[j] += dz * features[j];
            dphi[j] += dz * row[j];
        }
    }
    let n = ctx.members.len() as f64;
    let dc: Vec<f64> = (0..d)
        .map(|j| (dphi[j] + 2.0 * ctx.vector[j] * dphi[d + j]) / n)
        .collect();
    for &(tok, seg) in &ctx.members {
        let t = tok as usize;
        for (g, x) in grads.embeddings[t * d..(t + 1) * d].iter_mut().zip(&dc) {
            *g += x;
        }
        let s = model.segment_row(seg);
        for (g, x) in grads.segments[s * d..(s + 1) * d].iter_mut().zip(&dc) {
            *g += x;
        }
    }
}

fn accumulate_masked(model: &TrainableMlm, ex: &MaskedExample, weight: f64, grads: &mut Gradients) -> f64 {
    let ctx = context(model, ex);
    let logits = all_logits(model, &ctx);
    let logp = log_softmax(&logits);
    let n = ex.masked_positions.len() as f64;
    let mut dz: Vec<f64> = logp.iter().map(|lp| weight * lp.exp()).collect();
    let mut loss = 0.0;
    for t in ex.target_ids() {
        loss -= logp[t as usize];
        dz[t as usize] -= weight / n;
    }
    let dlogits: Vec<(usize, f64)> = dz.into_iter().enumerate().collect();
    backprop(model, &ctx, &dlogits, grads);
    loss / n
}

fn accumulate_verbalizer(
    model: &TrainableMlm,
    ex: &MaskedExample,
    no: TokenId,
    yes: TokenId,
    label: bool,
    weight: f64,
    grads: &mut Gradients,
) -> f64 {
    let ctx = context(model, ex);
    let (z_no, z_yes) = if ctx.is_empty() {
        (0.0, 0.0)
    } else {
        let f = ctx.features();
        (logit(model, &f, no as usize), logit(model, &f, yes as usize))
    };
    let p_yes = sigmoid(z_yes - z_no);
    let y = if label { 1.0 } else { 0.0 };
    let d = weight * (p_yes - y);
    backprop(model, &ctx, &[(yes as usize, d), (no as usize, -d)], grads);
    softplus(if label { z_no - z_yes } else { z_yes - z_no })
}

/// Adds `weight * d(loss)/d(theta)` of one unit into `grads`; returns the
/// unweighted unit loss.
pub fn accumulate_gradients(
    model: &TrainableMlm,
    unit: &TrainUnit<'_>,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    match *unit {
        TrainUnit::Masked(ex) => Ok(accumulate_masked(model, ex, weight, grads)),
        TrainUnit::Mixed {
            token,
            segment,
            alpha,
        } => {
            check_kinds(token, segment)?;
            let lt = accumulate_masked(model, token, weight * alpha, grads);
            let ls = accumulate_masked(model, segment, weight * (1.0 - alpha), grads);
            Ok(alpha * lt + (1.0 - alpha) * ls)
        }
        TrainUnit::Verbalizer {
            example,
            no,
            yes,
            label,
        } => Ok(accumulate_verbalizer(model, example, no, yes, label, weight, grads)),
    }
}

pub fn gradients(model: &TrainableMlm, unit: &TrainUnit<'_>) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let loss = accumulate_gradients(model, unit, 1.0, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.1 }
    }
}

/// One plain SGD step on the mean loss of `batch`. A non-finite gradient
/// leaves the model untouched.
pub fn sgd_step(model: &mut TrainableMlm, batch: &[TrainUnit<'_>], cfg: &SgdConfig) -> Result<f64> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be >= 0", cfg.lr)));
    }
    let (loss, grads) = batch_gradients(model, batch)?;
    apply(model, &grads, cfg.lr);
    Ok(loss)
}

/// Mean loss and gradient of a batch; errors when either is non-finite.
fn batch_gradients(model: &TrainableMlm, batch: &[TrainUnit<'_>]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut grads = Gradients::zeros_like(model);
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for unit in batch {
        loss += w * accumulate_gradients(model, unit, w, &mut grads)?;
    }
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok((loss, grads))
}

fn apply(model: &mut TrainableMlm, grads: &Gradients, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (p, g) in model
        .embeddings
        .iter_mut()
        .zip(&grads.embeddings)
        .chain(model.segments.iter_mut().zip(&grads.segments))
        .chain(model.output.iter_mut().zip(&grads.output))
        .chain(model.bias.iter_mut().zip(&grads.bias))
    {
        *p -= lr * g;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd(SgdConfig::default())
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.lr,
            OptimizerConfig::Adam(c) => c.lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd(_) => OptimizerConfig::Sgd(SgdConfig { lr }),
            OptimizerConfig::Adam(c) => OptimizerConfig::Adam(AdamConfig { lr, ..c }),
        }
    }
}

/// Stateful optimizer; SGD keeps no state, Adam keeps both moment estimates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    moments: Option<(Gradients, Gradients)>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            moments: None,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut TrainableMlm, batch: &[TrainUnit<'_>]) -> Result<f64> {
        let adam = match self.cfg {
            OptimizerConfig::Sgd(c) => return sgd_step(model, batch, &c),
            OptimizerConfig::Adam(c) => c,
        };
        if !(adam.lr >= 0.0 && adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", adam.lr)));
        }
        let (loss, grads) = batch_gradients(model, batch)?;
        let (m, v) = self
            .moments
            .get_or_insert_with(|| (Gradients::zeros_like(model), Gradients::zeros_like(model)));
        self.t += 1;
        let c1 = 1.0 - adam.beta1.powi(self.t);
        let c2 = 1.0 - adam.beta2.powi(self.t);
        let params = model
            .embeddings
            .iter_mut()
            .chain(model.segments.iter_mut())
            .chain(model.output.iter_mut())
            .chain(model.bias.iter_mut());
        let gs = grads.embeddings.iter().chain(&grads.segments).chain(&grads.output).chain(&grads.bias);
        let ms = m.embeddings.iter_mut().chain(m.segments.iter_mut()).chain(m.output.iter_mut()).chain(m.bias.iter_mut());
        let vs = v.embeddings.iter_mut().chain(v.segments.iter_mut()).chain(v.output.iter_mut()).chain(v.bias.iter_mut());
        for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            *p -= adam.lr * (*m / c1) / ((*v / c2).sqrt() + adam.eps);
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    pub samples: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient; 1.0 except in self-tests of the checker.
    pub analytic_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            samples: 50,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Indices of parameters the unit's loss can depend on.
pub fn active_parameters(model: &TrainableMlm, unit: &TrainUnit<'_>) -> Vec<usize> {
    let examples: Vec<&MaskedExample> = match *unit {
        TrainUnit::Masked(ex) => vec![ex],
        TrainUnit::Mixed { token, segment, .. } => vec![token, segment],
        TrainUnit::Verbalizer { example, .. } => vec![example],
    };
    let d = model.dim;
    let e_len = model.embeddings.len();
    let s_len = model.segments.len();
    let mut idx = std::collections::BTreeSet::new();
    for ex in examples {
        for (tok, seg) in context(model, ex).members {
            idx.extend((tok as usize * d)..(tok as usize + 1) * d);
            let s = model.segment_row(seg);
            idx.extend(e_len + s * d..e_len + (s + 1) * d);
        }
    }
    let head_start = e_len + s_len;
    match *unit {
        TrainUnit::Verbalizer { no, yes, .. } => {
            for v in [no as usize, yes as usize] {
                idx.extend(head_start + v * 2 * d..head_start + (v + 1) * 2 * d);
                idx.insert(head_start + model.output.len() + v);
            }
        }
        _ => idx.extend(head_start..model.param_count()),
    }
    idx.into_iter().collect()
}

/// Central finite differences on randomly chosen active parameters; returns
/// the largest relative error against the analytic gradient.
pub fn grad_check(model: &TrainableMlm, unit: &TrainUnit<'_>, check: &GradCheck) -> Result<f64> {
    let (_, grads) = gradients(model, unit)?;
    let active = active_parameters(model, unit);
    if active.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let picks = sample(&mut rng, active.len(), check.samples.min(active.len()));
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for pick in picks.iter() {
        let idx = active[pick];
        let original = probe.param(idx);
        probe.set_param(idx, original + check.epsilon);
        let plus = unit.loss(&probe)?;
        probe.set_param(idx, original - check.epsilon);
        let minus = unit.loss(&probe)?;
        probe.set_param(idx, original);
        let numeric = (plus - minus) / (2.0 * check.epsilon);
        let analytic = check.analytic_scale * grads.get(model, idx);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    vocab_hash: String,
    vocab: Vec<String>,
    dim: usize,
    n_segments: usize,
    embeddings: Vec<f64>,
    segments: Vec<f64>,
    output: Vec<f64>,
    bias: Vec<f64>,
}

/// A model together with the vocabulary it was trained against.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TrainableMlm,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT,
            vocab_hash: self.vocab.digest(),
            vocab: self.vocab.tokens().to_vec(),
            dim: self.model.dim,
            n_segments: self.model.n_segments,
            embeddings: self.model.embeddings.clone(),
            segments: self.model.segments.clone(),
            output: self.model.output.clone(),
            bias: self.model.bias.clone(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if file.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                file.format_version
            )));
        }
        let vocab = Vocab::from_tokens(file.vocab)?;
        if vocab.digest() != file.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let v = vocab.len();
        let d = file.dim;
        if file.embeddings.len() != v * d
            || file.segments.len() != file.n_segments * d
            || file.output.len() != v * 2 * d
            || file.bias.len() != v
        {
            return Err(Error::Checkpoint("parameter shapes do not match header".into()));
        }
        let model = TrainableMlm {
            vocab_size: v,
            dim: d,
            n_segments: file.n_segments,
            embeddings: file.embeddings,
            segments: file.segments,
            output: file.output,
            bias: file.bias,
        };
        if !model.all_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(Self { model, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
