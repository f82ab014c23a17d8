// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration. Every section has defaults, unknown keys are
//! rejected, and all randomness derives from the root `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crosstrace_core::inject::{Injected, LayerRange, PlanOptions, TargetRule};
use crosstrace_core::model::ModelConfig;
use crosstrace_core::numerics::Rng;
use crosstrace_core::synth::{DatasetConfig, Vocab, CELL_FEATURES};
use crosstrace_core::train::TrainConfig;

use crate::error::{IoContext, WbError, WbResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory for every artifact; relative paths resolve against the
    /// config file's directory.
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub trace: TraceSection,
    pub inject: InjectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            trace: TraceSection::default(),
            inject: InjectSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
    pub tied_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq: m.max_seq,
            ln_eps: m.ln_eps,
            tied_head: m.tied_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub grid: [usize; 2],
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_object_cells: usize,
    pub positive_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            grid: [d.grid.0, d.grid.1],
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
            max_object_cells: d.max_object_cells,
            positive_rate: d.positive_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub qa_weight: f64,
    pub caption_weight: f64,
    pub eval_every: usize,
    pub init_std: f64,
    pub val_limit: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            steps: t.steps,
            qa_weight: t.qa_weight,
            caption_weight: t.caption_weight,
            eval_every: t.eval_every,
            init_std: t.init_std,
            val_limit: t.val_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    pub sigma: f64,
    pub eps_d: f64,
    /// Test-split samples fed to the sweep.
    pub n_samples: usize,
    /// Sweep only positive samples (negatives have no object-visual cells).
    pub positives_only: bool,
    pub target_drop: [f64; 2],
    pub calibration_samples: usize,
    pub max_iter: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            eps_d: crosstrace_core::trace::DEFAULT_EPS_D,
            n_samples: 200,
            positives_only: true,
            target_drop: [0.2, 0.5],
            calibration_samples: 200,
            max_iter: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectSection {
    pub k1: usize,
    pub k2: usize,
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub use_rr_scaling: bool,
    pub use_normalization: bool,
    /// `both`, `attn`, `mlp` or `hidden`.
    pub component: String,
    /// `all`, `firstN` or `lastN`.
    pub layer_range: String,
    /// `rank` or `after-deepest`.
    pub target_rule: String,
    /// Multipliers on (lambda_a, lambda_m) tried on the validation split;
    /// the best corrupted-image QA accuracy wins. Empty disables the search.
    pub lambda_search: Vec<f64>,
    /// Test-split QA samples scored.
    pub n_qa: usize,
    /// Validation-split QA samples used by the lambda search.
    pub n_search: usize,
    pub n_captions: usize,
    pub max_new: usize,
    pub latency_reps: usize,
    pub latency_samples: usize,
}

impl Default for InjectSection {
    fn default() -> Self {
        let p = PlanOptions::default();
        Self {
            k1: p.k1,
            k2: p.k2,
            lambda_a: p.lambda_a,
            lambda_m: p.lambda_m,
            use_rr_scaling: p.use_rr_scaling,
            use_normalization: p.use_normalization,
            component: "both".into(),
            layer_range: "all".into(),
            target_rule: "rank".into(),
            lambda_search: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            n_qa: 400,
            n_search: 200,
            n_captions: 200,
            max_new: 12,
            latency_reps: 10,
            latency_samples: 4,
        }
    }
}

/// Pipeline stages with independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 0,
    Train = 1,
    Trace = 2,
    Inject = 3,
}

pub fn parse_component(s: &str) -> WbResult<Injected> {
    match s {
        "both" => Ok(Injected::Both),
        "attn" | "mhsa" => Ok(Injected::AttnOnly),
        "mlp" | "ffn" => Ok(Injected::MlpOnly),
        "hidden" => Ok(Injected::Hidden),
        _ => Err(WbError::validation("inject.component", format!("unknown component {s:?}"))),
    }
}

pub fn parse_layer_range(s: &str) -> WbResult<LayerRange> {
    let bad = || WbError::validation("inject.layer_range", format!("expected all, firstN or lastN, got {s:?}"));
    if s == "all" {
        return Ok(LayerRange::All);
    }
    let (ctor, n): (fn(usize) -> LayerRange, &str) = if let Some(n) = s.strip_prefix("first") {
        (LayerRange::First, n)
    } else if let Some(n) = s.strip_prefix("last") {
        (LayerRange::Last, n)
    } else {
        return Err(bad());
    };
    n.parse().map(ctor).map_err(|_| bad())
}

pub fn parse_target_rule(s: &str) -> WbResult<TargetRule> {
    match s {
        "rank" => Ok(TargetRule::ByRank),
        "after-deepest" => Ok(TargetRule::AfterDeepestSource),
        _ => Err(WbError::validation("inject.target_rule", format!("expected rank or after-deepest, got {s:?}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> WbResult<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| WbError::validation(path.display().to_string(), e.to_string()))?;
        if cfg.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section; errors name the offending key.
    pub fn validate(&self) -> WbResult<()> {
        let core = |key: &str, r: crosstrace_core::Result<()>| {
            r.map_err(|e| WbError::validation(key, e.to_string()))
        };
        core("model", self.model_config().validate())?;
        core("data", self.dataset_config().validate())?;
        core("train", self.train_config().validate())?;
        let t = &self.trace;
        if !(t.sigma >= 0.0 && t.sigma.is_finite()) {
            return Err(WbError::validation("trace.sigma", "must be finite and non-negative"));
        }
        if !(t.eps_d >= 0.0 && t.eps_d.is_finite()) {
            return Err(WbError::validation("trace.eps_d", "must be finite and non-negative"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(t.target_drop[0] < t.target_drop[1]) {
            return Err(WbError::validation("trace.target_drop", "lower bound must be below upper bound"));
        }
        if t.n_samples == 0 || t.n_samples > self.data.n_test {
            return Err(WbError::validation("trace.n_samples", "must be in 1..=data.n_test"));
        }
        if t.calibration_samples == 0 || t.calibration_samples > self.data.n_val {
            return Err(WbError::validation("trace.calibration_samples", "must be in 1..=data.n_val"));
        }
        let i = &self.inject;
        let plan = self.plan_options()?;
        if plan.k1 + plan.k2 > self.model.n_layers {
            return Err(WbError::validation(
                "inject.k1",
                format!("k1 + k2 = {} exceeds n_layers = {}", plan.k1 + plan.k2, self.model.n_layers),
            ));
        }
        plan.layer_range
            .layers(self.model.n_layers)
            .map_err(|e| WbError::validation("inject.layer_range", e.to_string()))?;
        for (k, v) in [("inject.lambda_a", i.lambda_a), ("inject.lambda_m", i.lambda_m)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(WbError::validation(k, "must be finite and non-negative"));
            }
        }
        if i.lambda_search.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(WbError::validation("inject.lambda_search", "multipliers must be finite and non-negative"));
        }
        if i.n_qa == 0 || i.n_qa > self.data.n_test {
            return Err(WbError::validation("inject.n_qa", "must be in 1..=data.n_test"));
        }
        if i.n_search == 0 || i.n_search > self.data.n_val {
            return Err(WbError::validation("inject.n_search", "must be in 1..=data.n_val"));
        }
        if i.n_captions > self.data.n_test {
            return Err(WbError::validation("inject.n_captions", "must not exceed data.n_test"));
        }
        if i.max_new == 0 {
            return Err(WbError::validation("inject.max_new", "must be at least 1"));
        }
        if i.latency_reps < 3 {
            return Err(WbError::validation("inject.latency_reps", "must be at least 3"));
        }
        let longest = self.data.grid[0] * self.data.grid[1] + crosstrace_core::synth::question_tokens(&Vocab::standard(), 0).len();
        if longest > self.model.max_seq {
            return Err(WbError::validation(
                "model.max_seq",
                format!("QA sequences need {longest} positions"),
            ));
        }
        Ok(())
    }

    /// Seed for one stage, split from the root seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        Rng::new(self.seed).split(stage as u64).next_u64()
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: Vocab::standard().len(),
            patch_grid: (self.data.grid[0], self.data.grid[1]),
            cell_features: CELL_FEATURES,
            max_seq: m.max_seq,
            ln_eps: m.ln_eps,
            tied_head: m.tied_head,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.data;
        DatasetConfig {
            seed: self.stage_seed(Stage::Data),
            grid: (d.grid[0], d.grid[1]),
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
            max_object_cells: d.max_object_cells,
            positive_rate: d.positive_rate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            steps: t.steps,
            qa_weight: t.qa_weight,
            caption_weight: t.caption_weight,
            seed: self.stage_seed(Stage::Train),
            eval_every: t.eval_every,
            init_std: t.init_std,
            val_limit: t.val_limit,
        }
    }

    pub fn plan_options(&self) -> WbResult<PlanOptions> {
        let i = &self.inject;
        Ok(PlanOptions {
            k1: i.k1,
            k2: i.k2,
            lambda_a: i.lambda_a,
            lambda_m: i.lambda_m,
            use_rr_scaling: i.use_rr_scaling,
            use_normalization: i.use_normalization,
            target_rule: parse_target_rule(&i.target_rule)?,
            layer_range: parse_layer_range(&i.layer_range)?,
            injected: parse_component(&i.component)?,
        })
    }

    /// SHA-256 of the canonical TOML rendering. The output directory is
    /// left out so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}
