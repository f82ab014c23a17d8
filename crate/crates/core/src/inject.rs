// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intermediate representation injection.
//!
//! Last-token outputs of high-RR source layers are recorded during the
//! forward pass and added, scaled by `lambda * RR_k`, to the last-token
//! output of later target layers:
//!
//! ```text
//! a~(l) = a(l) + lambda_a * sum_k g(k, l) * RR_k * a(k)
//! ```
//!
//! optionally rescaled back to `||a(l)||`. The MLP branch is identical with
//! its own weights and `lambda_m`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::model::{
    forward, greedy_decode, Component, Edit, ForwardOutput, HookPoint, HookSet, Intervener, ModelConfig,
    MultimodalSequence, Weights,
};
use crate::numerics::{l2_norm, Matrix};
use crate::trace::LastTokenRR;

/// Norms below this skip the rescale step.
pub const NORM_FLOOR: f64 = 1e-12;

/// Causal gate: 1 iff target `l` lies strictly after source `k`.
pub const fn gate(k: usize, l: usize) -> u8 {
    (l > k) as u8
}

/// How target layers are picked once sources are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetRule {
    /// Highest-RR layers among the non-source candidates.
    #[default]
    ByRank,
    /// The `k2` layers immediately after the deepest source.
    AfterDeepestSource,
}

/// Restricts both sources and targets to a slice of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerRange {
    #[default]
    All,
    First(usize),
    Last(usize),
}

impl LayerRange {
    pub fn layers(self, n_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerRange::All => Ok((0..n_layers).collect()),
            LayerRange::First(n) | LayerRange::Last(n) if n == 0 || n > n_layers => Err(invalid(
                "layer_range",
                format!("{n} layers requested from a {n_layers}-layer model"),
            )),
            LayerRange::First(n) => Ok((0..n).collect()),
            LayerRange::Last(n) => Ok((n_layers - n..n_layers).collect()),
        }
    }
}

/// Which residual components receive injections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Injected {
    /// Attention and MLP outputs, each with its own RR vector and lambda.
    #[default]
    Both,
    AttnOnly,
    MlpOnly,
    /// Hidden states, ranked by the hidden RR row and scaled by `lambda_a`.
    Hidden,
}

impl Injected {
    pub fn label(self) -> &'static str {
        match self {
            Injected::Both => "attn+mlp",
            Injected::AttnOnly => "attn",
            Injected::MlpOnly => "mlp",
            Injected::Hidden => "hidden",
        }
    }
}

/// Knobs for [`build_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    pub k1: usize,
    pub k2: usize,
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub use_rr_scaling: bool,
    pub use_normalization: bool,
    pub target_rule: TargetRule,
    pub layer_range: LayerRange,
    pub injected: Injected,
}

impl Default for PlanOptions {
    /// Layer counts scaled down for an 8-layer model.
    fn default() -> Self {
        Self {
            k1: 2,
            k2: 4,
            lambda_a: 0.26,
            lambda_m: 0.16,
            use_rr_scaling: true,
            use_normalization: true,
            target_rule: TargetRule::ByRank,
            layer_range: LayerRange::All,
            injected: Injected::Both,
        }
    }
}

impl PlanOptions {
    /// Settings reported for LLaVA-1.5-7B (32 layers).
    pub fn llava_7b() -> Self {
        Self {
            k1: 3,
            k2: 10,
            ..Self::default()
        }
    }
}

/// Sources, targets and weights for one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPlan {
    pub component: Component,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    /// Per-layer RR with negatives clamped to zero.
    pub rr: Vec<f64>,
    pub lambda: f64,
}

impl ComponentPlan {
    fn weight(&self, k: usize, scaled: bool) -> f64 {
        if scaled {
            self.rr[k]
        } else {
            1.0
        }
    }
}

/// An immutable injection schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    pub n_layers: usize,
    pub components: Vec<ComponentPlan>,
    pub use_rr_scaling: bool,
    pub use_normalization: bool,
    pub options: PlanOptions,
}

impl InjectionPlan {
    /// A plan that never edits anything.
    pub fn empty(n_layers: usize) -> Self {
        Self {
            n_layers,
            components: Vec::new(),
            use_rr_scaling: true,
            use_normalization: true,
            options: PlanOptions::default(),
        }
    }

    pub fn component(&self, c: Component) -> Option<&ComponentPlan> {
        self.components.iter().find(|p| p.component == c)
    }

    /// Smallest source layer over all components.
    pub fn min_source(&self) -> Option<usize> {
        self.components.iter().flat_map(|p| p.sources.iter().copied()).min()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers {
            return Err(invalid(
                "plan",
                format!("built for {} layers, model has {}", self.n_layers, config.n_layers),
            ));
        }
        for p in &self.components {
            if p.sources.iter().chain(&p.targets).any(|&l| l >= self.n_layers) || p.rr.len() != self.n_layers {
                return Err(invalid("plan", format!("{} layers out of range", p.component.label())));
            }
            if !(p.lambda >= 0.0 && p.lambda.is_finite()) {
                return Err(invalid("lambda", "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Top-`k1` sources by RR (ties to the lower layer), then `k2` targets
/// under `rule`, both drawn from `candidates`. Both lists come back sorted.
pub fn select_layers(
    rr: &[f64],
    k1: usize,
    k2: usize,
    rule: TargetRule,
    candidates: &[usize],
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k1 + k2 > candidates.len() {
        return Err(invalid(
            "k1 + k2",
            format!("{} exceeds the {} eligible layers", k1 + k2, candidates.len()),
        ));
    }
    if let Some(&l) = candidates.iter().find(|&&l| l >= rr.len()) {
        return Err(invalid("candidates", format!("layer {l} has no RR entry")));
    }
    if let Some(v) = rr.iter().find(|v| !v.is_finite()) {
        return Err(invalid("rr", format!("non-finite value {v}")));
    }
    let mut ranked = candidates.to_vec();
    // Stable sort keeps index order among equal RRs.
    ranked.sort_by(|&a, &b| rr[b].total_cmp(&rr[a]));
    let mut sources: Vec<usize> = ranked[..k1].to_vec();
    sources.sort_unstable();
    let mut targets: Vec<usize> = match rule {
        TargetRule::ByRank => ranked[k1..k1 + k2].to_vec(),
        TargetRule::AfterDeepestSource => {
            let deepest = sources.last().copied();
            let after: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&l| deepest.is_none_or(|d| l > d))
                .take(k2)
                .collect();
            if after.len() < k2 {
                return Err(Error::Infeasible(format!(
                    "only {} eligible layers follow the deepest source",
                    after.len()
                )));
            }
            after
        }
    };
    targets.sort_unstable();
    Ok((sources, targets))
}

/// Builds a plan from last-token RR vectors.
pub fn build_plan(rr: &LastTokenRR, n_layers: usize, opts: &PlanOptions) -> Result<InjectionPlan> {
    if !(opts.lambda_a >= 0.0 && opts.lambda_m >= 0.0 && opts.lambda_a.is_finite() && opts.lambda_m.is_finite()) {
        return Err(invalid("lambda", "must be finite and non-negative"));
    }
    let candidates = opts.layer_range.layers(n_layers)?;
    let one = |component: Component, row: &[f64], lambda: f64| -> Result<ComponentPlan> {
        if row.len() != n_layers {
            return Err(invalid(
                "rr",
                format!("{} vector has {} entries for {n_layers} layers", component.label(), row.len()),
            ));
        }
        let (sources, targets) = select_layers(row, opts.k1, opts.k2, opts.target_rule, &candidates)?;
        Ok(ComponentPlan {
            component,
            sources,
            targets,
            rr: row.iter().map(|v| v.max(0.0)).collect(),
            lambda,
        })
    };
    let components = match opts.injected {
        Injected::Both => vec![
            one(Component::Attn, &rr.attn, opts.lambda_a)?,
            one(Component::Ffn, &rr.ffn, opts.lambda_m)?,
        ],
        Injected::AttnOnly => vec![one(Component::Attn, &rr.attn, opts.lambda_a)?],
        Injected::MlpOnly => vec![one(Component::Ffn, &rr.ffn, opts.lambda_m)?],
        Injected::Hidden => {
            let row = rr.hidden.as_deref().ok_or_else(|| Error::Missing("hidden last-token RR row".into()))?;
            vec![one(Component::Hidden, row, opts.lambda_a)?]
        }
    };
    Ok(InjectionPlan {
        n_layers,
        components,
        use_rr_scaling: opts.use_rr_scaling,
        use_normalization: opts.use_normalization,
        options: opts.clone(),
    })
}

/// Norms around one applied injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionRecord {
    pub point: HookPoint,
    /// Sequence length of the pass (identifies the decode step).
    pub seq_len: usize,
    pub norm_before: f64,
    /// Norm of `a + lambda * sum` before any rescale.
    pub norm_injected: f64,
    pub norm_after: f64,
}

/// Intervener carrying out a plan. Source rows are re-recorded on every
/// forward pass, so one instance serves a whole greedy decode.
#[derive(Debug)]
pub struct Injector<'p> {
    plan: &'p InjectionPlan,
    recorded: BTreeMap<(Component, usize), Vec<f64>>,
    records: Vec<InjectionRecord>,
}

impl<'p> Injector<'p> {
    pub fn new(config: &ModelConfig, plan: &'p InjectionPlan) -> Result<Self> {
        plan.check(config)?;
        Ok(Self {
            plan,
            recorded: BTreeMap::new(),
            records: Vec::new(),
        })
    }

    pub fn records(&self) -> &[InjectionRecord] {
        &self.records
    }
}

impl Intervener for Injector<'_> {
    fn intervene(&mut self, point: HookPoint, act: &Matrix) -> Result<Vec<Edit>> {
        let (layer, component) = match point {
            HookPoint::Embed => {
                self.recorded.clear();
                return Ok(Vec::new());
            }
            HookPoint::Block { layer, component } => (layer, component),
        };
        let Some(p) = self.plan.component(component) else {
            return Ok(Vec::new());
        };
        let last = act.rows() - 1;
        let row = act.row(last);
        if p.sources.contains(&layer) {
            self.recorded.insert((component, layer), row.to_vec());
        }
        if !p.targets.contains(&layer) || p.lambda == 0.0 {
            return Ok(Vec::new());
        }
        let mut sum = vec![0.0; row.len()];
        let mut active = false;
        for &k in &p.sources {
            if gate(k, layer) == 0 {
                continue;
            }
            let src = self
                .recorded
                .get(&(component, k))
                .ok_or_else(|| Error::Missing(format!("source {component:?}@{k} not recorded")))?;
            let w = p.weight(k, self.plan.use_rr_scaling);
            for (s, v) in sum.iter_mut().zip(src) {
                *s += w * v;
            }
            active = true;
        }
        if !active {
            return Ok(Vec::new());
        }
        let mut new: Vec<f64> = row.iter().zip(&sum).map(|(a, s)| a + p.lambda * s).collect();
        let norm_before = l2_norm(row);
        let norm_injected = l2_norm(&new);
        if self.plan.use_normalization && norm_injected >= NORM_FLOOR {
            let scale = norm_before / norm_injected;
            new.iter_mut().for_each(|v| *v *= scale);
        }
        self.records.push(InjectionRecord {
            point,
            seq_len: act.rows(),
            norm_before,
            norm_injected,
            norm_after: l2_norm(&new),
        });
        Ok(vec![Edit::replace(vec![last], Matrix::row_vector(&new))])
    }
}

/// One forward pass with `plan` applied.
pub fn injected_forward(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    plan: &InjectionPlan,
) -> Result<ForwardOutput> {
    let mut inj = Injector::new(config, plan)?;
    let mut hooks = HookSet::new().intervene(&mut inj);
    forward(config, weights, seq, &mut hooks)
}

/// Greedy decoding with `plan` applied at every step.
pub fn injected_decode(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    plan: &InjectionPlan,
    max_new: usize,
    stop: usize,
) -> Result<Vec<usize>> {
    let mut inj = Injector::new(config, plan)?;
    let mut hooks = HookSet::new().intervene(&mut inj);
    greedy_decode(config, weights, seq, &mut hooks, max_new, stop)
}

#[cfg(test)]
mod tests;
