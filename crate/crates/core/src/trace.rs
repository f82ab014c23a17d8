// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-modal causal tracing.
//!
//! Each sample is run three times: on its clean image, on a Gaussian-noised
//! copy, and on the noised copy while selected activations are overwritten
//! with their clean values. The recovery rate
//!
//! ```text
//! RR = (P_patched - P_corrupted) / (P_clean - P_corrupted)
//! ```
//!
//! of the `yes` probability at the answer position measures how much of the
//! damage a restored component undoes. [`sweep`] restores one
//! (component, layer, token category) cell at a time over a dataset.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::exec::Executor;
use crate::model::{
    embed, forward, forward_resume, token_prob, ActivationTrace, Category, Component, Edit, HookPoint, HookSet,
    Intervener, ModelConfig, MultimodalSequence, Weights,
};
use crate::numerics::{gaussian, Rng};
use crate::synth::{GridImage, QASample, Vocab};

/// Default denominator guard for [`recovery_rate`].
pub const DEFAULT_EPS_D: f64 = 1e-3;

/// Adds i.i.d. `N(0, sigma^2)` noise to every cell feature and clips to
/// `[0, 1]`. Object metadata (the ground truth) is left untouched.
pub fn corrupt_image(image: &GridImage, sigma: f64, rng: &mut Rng) -> Result<GridImage> {
    let noise = gaussian(rng, 0.0, sigma, image.cells.data().len())?;
    let mut out = image.clone();
    for (v, n) in out.cells.data_mut().iter_mut().zip(noise) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `(P_patched - P_corrupted) / (P_clean - P_corrupted)`, or `None` when
/// `|P_clean - P_corrupted| < eps_d` or the difference is exactly zero. The
/// raw ratio is returned unclamped.
pub fn recovery_rate(p_clean: f64, p_corrupted: f64, p_patched: f64, eps_d: f64) -> Option<f64> {
    let d = p_clean - p_corrupted;
    if d == 0.0 || libm::fabs(d) < eps_d {
        None
    } else {
        Some((p_patched - p_corrupted) / d)
    }
}

/// One restored activation: `positions` of `point` take their clean values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchEntry {
    pub point: HookPoint,
    pub positions: Vec<usize>,
}

/// Set of activations to restore from a clean trace.
#[derive(Debug, Clone)]
pub struct PatchSpec<'a> {
    entries: Vec<PatchEntry>,
    source: &'a ActivationTrace,
}

impl<'a> PatchSpec<'a> {
    pub fn new(source: &'a ActivationTrace) -> Self {
        Self {
            entries: Vec::new(),
            source,
        }
    }

    /// Adds `positions` at `point`, merging with an existing entry for the
    /// same point. Rejects layers or positions outside the source trace.
    pub fn with(mut self, point: HookPoint, positions: &[usize]) -> Result<Self> {
        if let HookPoint::Block { layer, .. } = point {
            if layer >= self.source.n_layers() {
                return Err(invalid("layer", format!("{layer} outside 0..{}", self.source.n_layers())));
            }
        }
        if let Some(p) = positions.iter().find(|&&p| p >= self.source.seq_len()) {
            return Err(invalid("positions", format!("{p} outside sequence of {}", self.source.seq_len())));
        }
        let idx = match self.entries.iter().position(|e| e.point == point) {
            Some(i) => i,
            None => {
                self.entries.push(PatchEntry {
                    point,
                    positions: Vec::new(),
                });
                self.entries.len() - 1
            }
        };
        let e = &mut self.entries[idx];
        e.positions.extend_from_slice(positions);
        e.positions.sort_unstable();
        e.positions.dedup();
        Ok(self)
    }

    /// Restores every position of every listed point.
    pub fn everything(source: &'a ActivationTrace, points: &[HookPoint]) -> Result<Self> {
        let all: Vec<usize> = (0..source.seq_len()).collect();
        points.iter().try_fold(Self::new(source), |s, p| s.with(*p, &all))
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn source(&self) -> &ActivationTrace {
        self.source
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.positions.is_empty())
    }

    /// Earliest layer a patched run must recompute from.
    pub fn first_layer(&self) -> Option<usize> {
        self.entries
            .iter()
            .filter(|e| !e.positions.is_empty())
            .map(|e| match e.point {
                HookPoint::Embed => 0,
                HookPoint::Block { layer, .. } => layer,
            })
            .min()
    }

    fn touches_embed(&self) -> bool {
        self.entries.iter().any(|e| e.point == HookPoint::Embed && !e.positions.is_empty())
    }

    /// Intervener that performs the restoration.
    pub fn intervener(&self) -> PatchIntervener<'_> {
        PatchIntervener { spec: self }
    }
}

/// Overwrites patched rows with their clean-trace values.
#[derive(Debug)]
pub struct PatchIntervener<'s> {
    spec: &'s PatchSpec<'s>,
}

impl Intervener for PatchIntervener<'_> {
    fn intervene(&mut self, point: HookPoint, act: &crate::numerics::Matrix) -> Result<Vec<Edit>> {
        let mut edits = Vec::new();
        for e in self.spec.entries.iter().filter(|e| e.point == point && !e.positions.is_empty()) {
            let src = self
                .spec
                .source
                .get(point)
                .ok_or_else(|| Error::ForeignTrace(format!("source has no {point}")))?;
            if src.cols() != act.cols() {
                return Err(Error::ForeignTrace(format!("source width {} vs {}", src.cols(), act.cols())));
            }
            let mut rows = crate::numerics::Matrix::zeros(e.positions.len(), act.cols());
            for (i, &p) in e.positions.iter().enumerate() {
                rows.row_mut(i).copy_from_slice(src.row(p));
            }
            edits.push(Edit::replace(e.positions.clone(), rows));
        }
        Ok(edits)
    }
}

/// Probabilities of `yes` from the three runs and the resulting RR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletResult {
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub p_patched: f64,
    /// `P_clean - P_corrupted`.
    pub denominator: f64,
    /// `None` when the denominator is below the guard.
    pub rr: Option<f64>,
}

/// Clean-run trace of a sample (the source for its patches).
pub fn clean_trace(config: &ModelConfig, weights: &Weights, sample: &QASample) -> Result<ActivationTrace> {
    let seq = embed(config, weights, &sample.to_input())?;
    Ok(forward(config, weights, &seq, &mut HookSet::new())?.trace)
}

fn same_trace_input(a: &ActivationTrace, b: &ActivationTrace) -> bool {
    a.embed == b.embed && a.n_layers() == b.n_layers()
}

/// Clean, corrupted and patched runs of one sample with full forward passes.
///
/// `patch.source` must be this sample's clean trace. `rng` drives the
/// corruption noise.
#[allow(clippy::too_many_arguments)]
pub fn run_triplet(
    config: &ModelConfig,
    weights: &Weights,
    sample: &QASample,
    vocab: &Vocab,
    sigma: f64,
    eps_d: f64,
    patch: &PatchSpec<'_>,
    rng: &mut Rng,
) -> Result<TripletResult> {
    let yes = vocab.yes();
    let clean_seq = embed(config, weights, &sample.to_input())?;
    let clean = forward(config, weights, &clean_seq, &mut HookSet::new())?;
    if !same_trace_input(&clean.trace, patch.source) {
        return Err(Error::ForeignTrace("source trace was recorded on a different input".into()));
    }
    let corrupted_image = corrupt_image(&sample.image, sigma, rng)?;
    let corrupted_seq = embed(config, weights, &sample.input_with_image(&corrupted_image))?;
    let corrupted = forward(config, weights, &corrupted_seq, &mut HookSet::new())?;
    let mut interv = patch.intervener();
    let patched = forward(config, weights, &corrupted_seq, &mut HookSet::new().intervene(&mut interv))?;
    let p_clean = token_prob(clean.last_logits(), yes)?;
    let p_corrupted = token_prob(corrupted.last_logits(), yes)?;
    let p_patched = token_prob(patched.last_logits(), yes)?;
    Ok(TripletResult {
        p_clean,
        p_corrupted,
        p_patched,
        denominator: p_clean - p_corrupted,
        rr: recovery_rate(p_clean, p_corrupted, p_patched, eps_d),
    })
}

/// Patched forward starting from a corrupted run, recomputing only the
/// layers the patch can influence.
pub fn patched_forward(
    config: &ModelConfig,
    weights: &Weights,
    corrupted_seq: &MultimodalSequence,
    corrupted: &ActivationTrace,
    patch: &PatchSpec<'_>,
) -> Result<crate::model::ForwardOutput> {
    let mut interv = patch.intervener();
    let mut hooks = HookSet::new().intervene(&mut interv);
    match patch.first_layer() {
        None => forward_resume(config, weights, corrupted_seq, &mut hooks, corrupted, config.n_layers),
        Some(_) if patch.touches_embed() => forward(config, weights, corrupted_seq, &mut hooks),
        Some(l) => forward_resume(config, weights, corrupted_seq, &mut hooks, corrupted, l),
    }
}

/// Aggregated recovery rates of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RRCell {
    /// Mean over included samples; `None` if none were included.
    pub mean_rr: Option<f64>,
    /// Population standard deviation over included samples.
    pub std: f64,
    pub n_included: usize,
    /// Attempted but excluded by the denominator guard.
    pub n_excluded: usize,
    /// Not attempted because the category is empty for the sample.
    pub n_skipped: usize,
    /// Mean of RR clamped to `[0, 1]`.
    pub mean_rr_clamped: Option<f64>,
}

impl RRCell {
    pub fn from_rates(rates: &[Option<f64>], skipped: usize) -> Self {
        let inc: Vec<f64> = rates.iter().flatten().copied().collect();
        let n = inc.len();
        if n == 0 {
            return Self {
                n_excluded: rates.len(),
                n_skipped: skipped,
                ..Self::default()
            };
        }
        let mean = inc.iter().sum::<f64>() / n as f64;
        let var = inc.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        let clamped = inc.iter().map(|r| r.clamp(0.0, 1.0)).sum::<f64>() / n as f64;
        Self {
            mean_rr: Some(mean),
            std: libm::sqrt(var),
            n_included: n,
            n_excluded: rates.len() - n,
            n_skipped: skipped,
            mean_rr_clamped: Some(clamped),
        }
    }

    /// Cell had samples to patch but none survived the guard, or had none.
    pub fn is_flagged(&self) -> bool {
        self.n_included == 0
    }
}

/// Grid key: (component, layer, category).
pub type CellKey = (Component, usize, Category);

/// Recovery rates over component x layer x category.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RRGrid {
    pub n_layers: usize,
    pub cells: BTreeMap<CellKey, RRCell>,
}

impl RRGrid {
    pub fn get(&self, component: Component, layer: usize, category: Category) -> Option<&RRCell> {
        self.cells.get(&(component, layer, category))
    }
}

/// What to sweep and how to corrupt.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sigma: f64,
    pub eps_d: f64,
    pub components: Vec<Component>,
    pub layers: Vec<usize>,
    pub categories: Vec<Category>,
    /// Root of the per-sample corruption streams.
    pub seed: u64,
}

impl SweepConfig {
    /// Every component, layer and traced category.
    pub fn full(n_layers: usize, sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            eps_d: DEFAULT_EPS_D,
            components: Component::ALL.to_vec(),
            layers: (0..n_layers).collect(),
            categories: Category::TRACED.to_vec(),
            seed,
        }
    }

    /// Corruption stream of sample `index`.
    pub fn sample_rng(&self, index: usize) -> Rng {
        Rng::new(self.seed).split(index as u64)
    }

    fn keys(&self) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for &c in &self.components {
            for &l in &self.layers {
                for &cat in &self.categories {
                    keys.push((c, l, cat));
                }
            }
        }
        keys
    }
}

/// Per-sample outcome of every swept cell: `None` = skipped (empty category),
/// `Some(None)` = excluded by the guard, `Some(Some(rr))` = included.
pub type SampleCells = Vec<Option<Option<f64>>>;

fn sweep_sample(
    config: &ModelConfig,
    weights: &Weights,
    sample: &QASample,
    vocab: &Vocab,
    cfg: &SweepConfig,
    keys: &[CellKey],
    index: usize,
) -> Result<SampleCells> {
    let yes = vocab.yes();
    let clean_seq = embed(config, weights, &sample.to_input())?;
    let clean = forward(config, weights, &clean_seq, &mut HookSet::new())?;
    let mut rng = cfg.sample_rng(index);
    let corrupted_image = corrupt_image(&sample.image, cfg.sigma, &mut rng)?;
    let corrupted_seq = embed(config, weights, &sample.input_with_image(&corrupted_image))?;
    let corrupted = forward(config, weights, &corrupted_seq, &mut HookSet::new())?;
    let p_clean = token_prob(clean.last_logits(), yes)?;
    let p_corrupted = token_prob(corrupted.last_logits(), yes)?;
    let mut out = Vec::with_capacity(keys.len());
    for &(component, layer, category) in keys {
        let positions = clean_seq.positions_of(category);
        if positions.is_empty() {
            out.push(None);
            continue;
        }
        let patch = PatchSpec::new(&clean.trace).with(HookPoint::block(layer, component), &positions)?;
        let patched = patched_forward(config, weights, &corrupted_seq, &corrupted.trace, &patch)?;
        let p_patched = token_prob(patched.last_logits(), yes)?;
        out.push(Some(recovery_rate(p_clean, p_corrupted, p_patched, cfg.eps_d)));
    }
    Ok(out)
}

/// Per-sample cell outcomes, in sample order (the raw material of [`sweep`]).
pub fn sweep_samples<E: Executor>(
    config: &ModelConfig,
    weights: &Weights,
    samples: &[QASample],
    vocab: &Vocab,
    cfg: &SweepConfig,
    exec: &E,
) -> Result<Vec<SampleCells>> {
    if let Some(&l) = cfg.layers.iter().find(|&&l| l >= config.n_layers) {
        return Err(invalid("layers", format!("{l} outside 0..{}", config.n_layers)));
    }
    if cfg.categories.contains(&Category::Other) {
        return Err(invalid("categories", "`other` is not a traced category"));
    }
    let keys = cfg.keys();
    exec.map(samples.len(), |i| sweep_sample(config, weights, &samples[i], vocab, cfg, &keys, i))
        .into_iter()
        .collect()
}

/// Restores one (component, layer, category) cell at a time for every
/// sample and aggregates the recovery rates. One clean and one corrupted run
/// per sample are shared by all cells; sample `i` is corrupted with
/// `cfg.sample_rng(i)`.
pub fn sweep<E: Executor>(
    config: &ModelConfig,
    weights: &Weights,
    samples: &[QASample],
    vocab: &Vocab,
    cfg: &SweepConfig,
    exec: &E,
) -> Result<RRGrid> {
    let per_sample = sweep_samples(config, weights, samples, vocab, cfg, exec)?;
    Ok(aggregate(config.n_layers, &cfg.keys(), &per_sample))
}

fn aggregate(n_layers: usize, keys: &[CellKey], per_sample: &[SampleCells]) -> RRGrid {
    let mut cells = BTreeMap::new();
    for (k, key) in keys.iter().enumerate() {
        let mut rates = Vec::with_capacity(per_sample.len());
        let mut skipped = 0;
        for s in per_sample {
            match s[k] {
                None => skipped += 1,
                Some(r) => rates.push(r),
            }
        }
        cells.insert(*key, RRCell::from_rates(&rates, skipped));
    }
    RRGrid { n_layers, cells }
}

/// Last-token recovery-rate vectors, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LastTokenRR {
    pub attn: Vec<f64>,
    pub ffn: Vec<f64>,
    /// Hidden-state row, when the grid has it.
    pub hidden: Option<Vec<f64>>,
}

/// Extracts the `Last`-category rows for the attention and FFN components.
pub fn last_token_rr(grid: &RRGrid) -> Result<LastTokenRR> {
    let row = |c: Component| -> Result<Vec<f64>> {
        (0..grid.n_layers)
            .map(|l| {
                grid.get(c, l, Category::Last)
                    .and_then(|cell| cell.mean_rr)
                    .ok_or_else(|| Error::Missing(format!("{}@{l} last-token cell", c.label())))
            })
            .collect()
    };
    Ok(LastTokenRR {
        attn: row(Component::Attn)?,
        ffn: row(Component::Ffn)?,
        hidden: row(Component::Hidden).ok(),
    })
}

/// Head-averaged attention mass from the last position, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    /// Mass on object-visual tokens (2).
    pub to_object_visual: Vec<f64>,
    /// Mass on textual-object tokens (5).
    pub to_textual_object: Vec<f64>,
    pub n_samples: usize,
}

/// Mass of attention row `last` on `positions`, averaged over heads.
pub fn attention_mass(weights: &[crate::numerics::Matrix], positions: &[usize]) -> f64 {
    let mut total = 0.0;
    for p in weights {
        let last = p.row(p.rows() - 1);
        total += positions.iter().map(|&j| last[j]).sum::<f64>();
    }
    total / weights.len() as f64
}

/// Averages, over positive samples, the attention the last token pays to the
/// queried object's visual and textual tokens. Softmax rows already sum to
/// one, so the raw mass is reported.
pub fn attention_profile<E: Executor>(
    config: &ModelConfig,
    weights: &Weights,
    samples: &[QASample],
    exec: &E,
) -> Result<AttentionProfile> {
    let positives: Vec<&QASample> = samples.iter().filter(|s| s.answer).collect();
    if positives.is_empty() {
        return Err(invalid("samples", "attention profile needs positive samples"));
    }
    let per = exec.map(positives.len(), |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let s = positives[i];
        let seq = embed(config, weights, &s.to_input())?;
        let out = forward(config, weights, &seq, &mut HookSet::new())?;
        let obj = seq.positions_of(Category::ObjectVisual);
        let txt = seq.positions_of(Category::TextualObject);
        Ok(out
            .trace
            .layers
            .iter()
            .map(|l| (attention_mass(&l.attn_weights, &obj), attention_mass(&l.attn_weights, &txt)))
            .unzip())
    });
    let mut to_obj = vec![0.0; config.n_layers];
    let mut to_txt = vec![0.0; config.n_layers];
    for r in per {
        let (o, t) = r?;
        for l in 0..config.n_layers {
            to_obj[l] += o[l];
            to_txt[l] += t[l];
        }
    }
    let n = positives.len() as f64;
    to_obj.iter_mut().for_each(|v| *v /= n);
    to_txt.iter_mut().for_each(|v| *v /= n);
    Ok(AttentionProfile {
        to_object_visual: to_obj,
        to_textual_object: to_txt,
        n_samples: positives.len(),
    })
}

/// Mean `P_clean(yes) - P_corrupted(yes)` over positive samples, sample `i`
/// corrupted with `Rng::new(seed).split(i)`.
pub fn mean_yes_drop<E: Executor>(
    config: &ModelConfig,
    weights: &Weights,
    samples: &[QASample],
    vocab: &Vocab,
    sigma: f64,
    seed: u64,
    exec: &E,
) -> Result<f64> {
    let positives: Vec<&QASample> = samples.iter().filter(|s| s.answer).collect();
    if positives.is_empty() {
        return Err(invalid("samples", "need positive samples"));
    }
    let yes = vocab.yes();
    let drops = exec.map(positives.len(), |i| -> Result<f64> {
        let s = positives[i];
        let clean = embed(config, weights, &s.to_input())?;
        let pc = token_prob(forward(config, weights, &clean, &mut HookSet::new())?.last_logits(), yes)?;
        let mut rng = Rng::new(seed).split(i as u64);
        let img = corrupt_image(&s.image, sigma, &mut rng)?;
        let cor = embed(config, weights, &s.input_with_image(&img))?;
        let pr = token_prob(forward(config, weights, &cor, &mut HookSet::new())?.last_logits(), yes)?;
        Ok(pc - pr)
    });
    let mut total = 0.0;
    for d in drops {
        total += d?;
    }
    Ok(total / positives.len() as f64)
}

/// Outcome of [`calibrate_sigma`].
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub drop: f64,
    pub iterations: usize,
    /// Every `(sigma, drop)` evaluated, in order.
    pub history: Vec<(f64, f64)>,
}

/// Bisects sigma until the mean `yes` drop on positives lies in
/// `[target_lo, target_hi]`, within `max_iter` evaluations.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_sigma<E: Executor>(
    config: &ModelConfig,
    weights: &Weights,
    samples: &[QASample],
    vocab: &Vocab,
    target: (f64, f64),
    seed: u64,
    max_iter: usize,
    exec: &E,
) -> Result<Calibration> {
    let (lo_t, hi_t) = target;
    if !(lo_t < hi_t) {
        return Err(invalid("target", "lower bound must be below upper bound"));
    }
    let mut history = Vec::new();
    let eval = |s: f64, history: &mut Vec<(f64, f64)>| -> Result<f64> {
        let d = mean_yes_drop(config, weights, samples, vocab, s, seed, exec)?;
        history.push((s, d));
        Ok(d)
    };
    let (mut lo, mut hi) = (0.0f64, 0.25f64);
    let mut d_hi = eval(hi, &mut history)?;
    while d_hi < lo_t {
        if history.len() >= max_iter || hi >= 8.0 {
            return Err(Error::Infeasible(format!(
                "drop {d_hi:.3} at sigma {hi} still below {lo_t}"
            )));
        }
        lo = hi;
        hi *= 2.0;
        d_hi = eval(hi, &mut history)?;
    }
    if d_hi <= hi_t {
        return Ok(Calibration {
            sigma: hi,
            drop: d_hi,
            iterations: history.len(),
            history,
        });
    }
    while history.len() < max_iter {
        let mid = 0.5 * (lo + hi);
        let d = eval(mid, &mut history)?;
        if (lo_t..=hi_t).contains(&d) {
            return Ok(Calibration {
                sigma: mid,
                drop: d,
                iterations: history.len(),
                history,
            });
        }
        if d < lo_t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Infeasible(format!("no sigma within {max_iter} evaluations")))
}
