// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode latency: time to first token and time per output token.

use std::time::Instant;

use serde::Serialize;

use crosstrace_core::eval::median;
use crosstrace_core::inject::{InjectionPlan, Injector};
use crosstrace_core::model::{argmax, forward, HookSet, ModelConfig, MultimodalSequence, Weights};
use crosstrace_core::Result;

/// Medians over repetitions, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Latency {
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub ttft_runs: Vec<f64>,
    pub tpot_runs: Vec<f64>,
}

/// Decodes `new_tokens` tokens, ignoring the stop token so every run does
/// the same work, and returns `(ttft_ms, tpot_ms)`. Generation is cut short
/// only when the positional table is full.
fn time_one(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    plan: Option<&InjectionPlan>,
    new_tokens: usize,
) -> Result<(f64, f64)> {
    let mut seq = seq.clone();
    let mut injector = plan.map(|p| Injector::new(config, p)).transpose()?;
    let start = Instant::now();
    let mut first = 0.0;
    let mut produced = 0usize;
    for step in 0..new_tokens {
        let out = match injector.as_mut() {
            Some(inj) => forward(config, weights, &seq, &mut HookSet::new().intervene(inj))?,
            None => forward(config, weights, &seq, &mut HookSet::new())?,
        };
        let next = argmax(out.last_logits());
        if step == 0 {
            first = start.elapsed().as_secs_f64() * 1e3;
        }
        produced += 1;
        if step + 1 == new_tokens || seq.len() == config.max_seq {
            break;
        }
        seq.push_text(config, weights, next)?;
    }
    let total = start.elapsed().as_secs_f64() * 1e3;
    let tpot = if produced > 1 {
        (total - first) / (produced - 1) as f64
    } else {
        0.0
    };
    Ok((first, tpot))
}

/// Times every variant in `plans` (`None` = no hooks) over `reps`
/// repetitions. Variants are interleaved inside each repetition so slow
/// drift affects all of them alike. Each repetition averages over `seqs`.
pub fn measure_interleaved(
    config: &ModelConfig,
    weights: &Weights,
    seqs: &[MultimodalSequence],
    plans: &[Option<&InjectionPlan>],
    reps: usize,
    new_tokens: usize,
) -> Result<Vec<Latency>> {
    let mut runs = vec![(Vec::with_capacity(reps), Vec::with_capacity(reps)); plans.len()];
    for _ in 0..reps {
        for (v, plan) in plans.iter().enumerate() {
            let (mut t1, mut t2) = (0.0, 0.0);
            for s in seqs {
                let (a, b) = time_one(config, weights, s, *plan, new_tokens)?;
                t1 += a;
                t2 += b;
            }
            let n = seqs.len().max(1) as f64;
            runs[v].0.push(t1 / n);
            runs[v].1.push(t2 / n);
        }
    }
    Ok(runs
        .into_iter()
        .map(|(ttft_runs, tpot_runs)| Latency {
            ttft_ms: median(&ttft_runs).unwrap_or(0.0),
            tpot_ms: median(&tpot_runs).unwrap_or(0.0),
            ttft_runs,
            tpot_runs,
        })
        .collect())
}
