// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training on the synthetic QA and captioning tasks.

mod backward;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::exec::Executor;
use crate::model::{embed, forward, forward_cached, HookSet, ModelConfig, SequenceInput, Weights};
use crate::numerics::{log_softmax, softmax, Matrix, Rng};
use crate::synth::{caption_prompt, gen_caption_target, GridImage, QASample, Vocab};

/// Gradients share the parameter container so shapes always line up.
pub type GradientSet = Weights;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the answer-token cross-entropy.
    pub qa_weight: f64,
    /// Weight of the caption language-model cross-entropy.
    pub caption_weight: f64,
    pub seed: u64,
    /// Validate every this many steps (and after the last one).
    pub eval_every: usize,
    /// Standard deviation of the normal initialisation.
    pub init_std: f64,
    /// Cap on validation samples per evaluation; `None` uses the whole split.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            steps: 1200,
            qa_weight: 1.0,
            caption_weight: 0.5,
            seed: 0,
            eval_every: 100,
            init_std: 0.1,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if self.qa_weight < 0.0 || self.caption_weight < 0.0 || self.qa_weight + self.caption_weight == 0.0 {
            return Err(invalid("qa_weight", "loss weights must be >= 0 and not both zero"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be positive"));
        }
        Ok(())
    }
}

/// One supervised sequence: predict `token` from the logits at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: SequenceInput,
    pub targets: Vec<(usize, usize)>,
    /// Multiplies the mean cross-entropy over `targets`.
    pub weight: f64,
}

/// Answer-token example for a QA sample.
pub fn qa_example(sample: &QASample, vocab: &Vocab, weight: f64) -> Example {
    let input = sample.to_input();
    let last = input.len() - 1;
    Example {
        input,
        targets: alloc::vec![(last, sample.answer_token(vocab))],
        weight,
    }
}

/// Teacher-forced caption example: image, prompt, then the canonical caption.
pub fn caption_example(image: &GridImage, vocab: &Vocab, weight: f64) -> Example {
    let prompt = caption_prompt(vocab);
    let caption = gen_caption_target(image, vocab);
    let mut text = prompt.clone();
    text.extend_from_slice(&caption[..caption.len() - 1]);
    let m = image.cells.rows();
    let first = m + prompt.len() - 1;
    let targets = caption.iter().enumerate().map(|(i, t)| (first + i, *t)).collect();
    Example {
        input: SequenceInput::unannotated(image.cells.clone(), text),
        targets,
        weight,
    }
}

fn example_loss(config: &ModelConfig, weights: &Weights, ex: &Example, sample: usize) -> Result<(f64, Matrix)> {
    if ex.targets.is_empty() {
        return Err(invalid("targets", format!("sample {sample} has no supervised positions")));
    }
    let seq = embed(config, weights, &ex.input)?;
    let out = forward(config, weights, &seq, &mut HookSet::new())?;
    let (loss, dlogits) = cross_entropy(&out.logits, ex, sample)?;
    Ok((loss, dlogits))
}

/// `weight * mean CE` and its gradient w.r.t. the logits.
fn cross_entropy(logits: &Matrix, ex: &Example, sample: usize) -> Result<(f64, Matrix)> {
    let scale = ex.weight / ex.targets.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    for &(pos, tok) in &ex.targets {
        if pos >= logits.rows() || tok >= logits.cols() {
            return Err(invalid("targets", format!("sample {sample}: target ({pos}, {tok}) out of range")));
        }
        let row = logits.row(pos);
        loss -= log_softmax(row)?[tok];
        let p = softmax(row)?;
        let d = dlogits.row_mut(pos);
        for (i, pi) in p.iter().enumerate() {
            d[i] += scale * (pi - if i == tok { 1.0 } else { 0.0 });
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite { sample, value: loss });
    }
    Ok((loss, dlogits))
}

/// Loss and analytic gradients of a single example.
pub fn example_loss_and_grads(config: &ModelConfig, weights: &Weights, ex: &Example, sample: usize) -> Result<(f64, GradientSet)> {
    let mut grads = Weights::zeros(config);
    let loss = accumulate_example(config, weights, ex, sample, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite { sample, value: f64::NAN });
    }
    Ok((loss, grads))
}

/// Adds the example's gradients into `grads` and returns its loss.
fn accumulate_example(config: &ModelConfig, weights: &Weights, ex: &Example, sample: usize, grads: &mut Weights) -> Result<f64> {
    if ex.weight == 0.0 {
        return Ok(0.0);
    }
    let seq = embed(config, weights, &ex.input)?;
    let (out, cache) = forward_cached(config, weights, &seq)?;
    let (loss, dlogits) = cross_entropy(&out.logits, ex, sample)?;
    backward::backward(config, weights, &seq, &out.trace, &cache, &dlogits, grads);
    Ok(loss)
}

/// Examples per gradient buffer. Fixed, so the summation order (and hence
/// the result) does not depend on the executor.
const GRAD_CHUNK: usize = 4;

/// Mean loss over the batch and its gradient. Fixed-size chunks of the batch
/// go through `exec`, each accumulating into one buffer; chunks are then
/// reduced in batch order.
pub fn loss_and_grads<E: Executor>(
    config: &ModelConfig,
    weights: &Weights,
    batch: &[Example],
    exec: &E,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(invalid("batch", "must be nonempty"));
    }
    let n_chunks = batch.len().div_ceil(GRAD_CHUNK);
    let parts = exec.map(n_chunks, |c| -> Result<(f64, GradientSet)> {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(batch.len());
        let mut grads = Weights::zeros(config);
        let mut loss = 0.0;
        for (i, ex) in batch[lo..hi].iter().enumerate() {
            loss += accumulate_example(config, weights, ex, lo + i, &mut grads)?;
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { sample: lo, value: f64::NAN });
        }
        Ok((loss, grads))
    });
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut iter = parts.into_iter();
    let (l0, mut grads) = iter.next().expect("nonempty batch")?;
    total += l0;
    for part in iter {
        let (loss, g) = part?;
        total += loss;
        for ((_, acc), (_, gi)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(gi)?;
        }
    }
    for (_, g) in grads.tensors_mut() {
        g.scale(inv);
    }
    Ok((total * inv, grads))
}

/// Mean loss only (forward passes).
pub fn batch_loss(config: &ModelConfig, weights: &Weights, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("batch", "must be nonempty"));
    }
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.weight != 0.0 {
            total += example_loss(config, weights, ex, i)?.0;
        }
    }
    Ok(total / batch.len() as f64)
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` per probe.
    pub probes: Vec<(alloc::string::String, usize, f64, f64)>,
}

/// Absolute floor of the relative-error denominator; see [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences
/// `(L(w + h) - L(w - h)) / 2h` on `n_probes` random scalar weights.
///
/// The relative error of a probe is `|g - f| / max(|g|, |f|, GRAD_CHECK_FLOOR)`.
/// `only` restricts probing to tensors whose name starts with one of the
/// given prefixes.
pub fn grad_check(
    config: &ModelConfig,
    weights: &Weights,
    example: &Example,
    n_probes: usize,
    h_step: f64,
    rng: &mut Rng,
    only: Option<&[&str]>,
) -> Result<GradCheck> {
    if n_probes == 0 {
        return Err(invalid("n_probes", "must be >= 1"));
    }
    if !(h_step > 0.0) {
        return Err(invalid("h_step", "must be positive"));
    }
    let (_, grads) = example_loss_and_grads(config, weights, example, 0)?;
    let names: Vec<(alloc::string::String, usize)> = weights
        .tensors()
        .into_iter()
        .filter(|(n, _)| only.is_none_or(|p| p.iter().any(|x| n.starts_with(x))))
        .map(|(n, m)| (n, m.data().len()))
        .collect();
    if names.is_empty() {
        return Err(invalid("only", "no tensor matches the probe filter"));
    }
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut probes = Vec::with_capacity(n_probes);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut w = weights.clone();
    for _ in 0..n_probes {
        let mut flat = rng.below(total);
        let mut t = 0;
        while flat >= names[t].1 {
            flat -= names[t].1;
            t += 1;
        }
        let name = &names[t].0;
        let analytic = lookup(&grads, name).data()[flat];
        let orig = lookup(&w, name).data()[flat];
        lookup_mut(&mut w, name).data_mut()[flat] = orig + h_step;
        let up = example_loss(config, &w, example, 0)?.0;
        lookup_mut(&mut w, name).data_mut()[flat] = orig - h_step;
        let down = example_loss(config, &w, example, 0)?.0;
        lookup_mut(&mut w, name).data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h_step);
        let abs = libm::fabs(analytic - numeric);
        let rel = abs / libm::fabs(analytic).max(libm::fabs(numeric)).max(GRAD_CHECK_FLOOR);
        max_rel = max_rel.max(rel);
        max_abs = max_abs.max(abs);
        probes.push((name.clone(), flat, analytic, numeric));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        probes,
    })
}

fn lookup<'a>(w: &'a Weights, name: &str) -> &'a Matrix {
    w.tensors().into_iter().find(|(n, _)| n == name).map(|(_, m)| m).expect("tensor name")
}

fn lookup_mut<'a>(w: &'a mut Weights, name: &str) -> &'a mut Matrix {
    w.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m).expect("tensor name")
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            step: 0,
            m: Weights::zeros(config),
            v: Weights::zeros(config),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(weights: &mut Weights, grads: &GradientSet, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    weights.check_shapes_against(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
    let (b1, b2) = (config.beta1, config.beta2);
    let ws = weights.tensors_mut();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, w), (_, g)), (_, m)), (_, v)) in ws.into_iter().zip(gs).zip(ms).zip(vs) {
        let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= config.lr * mhat / (libm::sqrt(vhat) + config.eps);
        }
    }
    Ok(())
}

impl Weights {
    fn check_shapes_against(&self, other: &Weights) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|((_, x), (_, y))| x.shape() != y.shape()) {
            return Err(invalid("grads", "gradient shapes do not mirror the weights"));
        }
        Ok(())
    }
}

/// Whether the model prefers `yes` over `no` at the answer position.
pub fn predict_yes(config: &ModelConfig, weights: &Weights, input: &SequenceInput, vocab: &Vocab) -> Result<bool> {
    let seq = embed(config, weights, input)?;
    let out = forward(config, weights, &seq, &mut HookSet::new())?;
    let last = out.last_logits();
    Ok(last[vocab.yes()] > last[vocab.no()])
}

/// Fraction of samples whose yes/no preference matches the label.
pub fn qa_accuracy<E: Executor>(config: &ModelConfig, weights: &Weights, samples: &[QASample], vocab: &Vocab, exec: &E) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("samples", "must be nonempty"));
    }
    let preds = exec.map(samples.len(), |i| predict_yes(config, weights, &samples[i].to_input(), vocab));
    let mut correct = 0usize;
    for (p, s) in preds.into_iter().zip(samples) {
        if p? == s.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss of the most recent batch.
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights at the evaluation point with the best validation accuracy
    /// (earliest on ties).
    pub best: Weights,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub last: Weights,
    pub log: Vec<LogEntry>,
}

/// Batch of step `step`: `batch_size` train indices, each contributing a QA
/// example and, when its weight is positive, a caption example.
pub fn make_batch(train: &[QASample], config: &TrainConfig, step: usize, vocab: &Vocab) -> Vec<Example> {
    let mut rng = Rng::new(config.seed).split(1).split(step as u64);
    let mut batch = Vec::with_capacity(2 * config.batch_size);
    for _ in 0..config.batch_size {
        let s = &train[rng.below(train.len())];
        if config.qa_weight > 0.0 {
            batch.push(qa_example(s, vocab, config.qa_weight));
        }
        if config.caption_weight > 0.0 {
            batch.push(caption_example(&s.image, vocab, config.caption_weight));
        }
    }
    batch
}

/// Adam training from a fresh initialisation. `on_log` sees every log line
/// as it is produced.
pub fn train<E: Executor>(
    model: &ModelConfig,
    config: &TrainConfig,
    train_set: &[QASample],
    val_set: &[QASample],
    vocab: &Vocab,
    exec: &E,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("dataset", "train and validation splits must be nonempty"));
    }
    let val = &val_set[..config.val_limit.unwrap_or(val_set.len()).min(val_set.len())];
    let mut weights = Weights::init(model, &mut Rng::new(config.seed).split(0), config.init_std);
    let mut state = AdamState::new(model);
    let mut log = Vec::new();

    let first = make_batch(train_set, config, 0, vocab);
    let entry = LogEntry {
        step: 0,
        loss: batch_loss(model, &weights, &first)?,
        val_acc: qa_accuracy(model, &weights, val, vocab, exec)?,
    };
    on_log(&entry);
    log.push(entry);
    let mut best = (weights.clone(), 0usize, entry.val_acc);

    for step in 1..=config.steps {
        let batch = make_batch(train_set, config, step, vocab);
        let (loss, grads) = loss_and_grads(model, &weights, &batch, exec)?;
        adam_step(&mut weights, &grads, &mut state, config)?;
        if step % config.eval_every == 0 || step == config.steps {
            let entry = LogEntry {
                step,
                loss,
                val_acc: qa_accuracy(model, &weights, val, vocab, exec)?,
            };
            on_log(&entry);
            log.push(entry);
            if entry.val_acc > best.2 {
                best = (weights.clone(), step, entry.val_acc);
            }
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_step: best.1,
        best_val_acc: best.2,
        last: weights,
        log,
    })
}
