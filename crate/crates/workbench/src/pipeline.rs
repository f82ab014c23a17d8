// SPDX-License-Identifier: MIT OR Apache-2.0

//! The stages behind each subcommand. Every stage reads its inputs from and
//! writes its artifacts to `RunConfig::out_dir`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crosstrace_core::eval::{binary_metrics, chair, BinaryMetrics, BinaryOutcomes, CaptionJudgment, Chair};
use crosstrace_core::exec::Executor;
use crosstrace_core::inject::{build_plan, injected_decode, injected_forward, InjectionPlan, PlanOptions};
use crosstrace_core::model::{embed, forward, greedy_decode, Component, HookSet, ModelConfig, Weights};
use crosstrace_core::numerics::Rng;
use crosstrace_core::synth::{caption_input, gen_dataset, Dataset, GridImage, QASample, Vocab};
use crosstrace_core::trace::{
    attention_profile, calibrate_sigma, corrupt_image, last_token_rr, sweep, AttentionProfile, Calibration, RRGrid,
    SweepConfig,
};
use crosstrace_core::train::{train as run_training, LogEntry};

use crate::config::{RunConfig, Stage};
use crate::error::{IoContext, WbError, WbResult};
use crate::formats::{checkpoint, dataset, rr, svg, write_json, write_jsonl, write_text};
use crate::latency::{measure_interleaved, Latency};

/// Remark attached to every CHAIR figure we emit.
pub const CHAIR_NOTE: &str = "c_s is hallucinated objects over mentioned objects and c_i is flagged sentences over \
all sentences, following the formulas as printed; the wider CHAIR literature uses the opposite subscripts";

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            dir: cfg.out_dir.clone(),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ctw")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
    pub fn calibration(&self) -> PathBuf {
        self.dir.join("calibration.json")
    }
    pub fn rr_grid(&self) -> PathBuf {
        self.dir.join("rr_grid.csv")
    }
    pub fn rr_meta(&self) -> PathBuf {
        self.dir.join("rr_grid.meta.json")
    }
    pub fn heatmap(&self, c: Component) -> PathBuf {
        self.dir.join(format!("heatmap_{}.svg", c.label()))
    }
    pub fn attention_profile(&self) -> PathBuf {
        self.dir.join("attention_profile.csv")
    }
    pub fn plan(&self) -> PathBuf {
        self.dir.join("plan.json")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

fn ensure_dir(dir: &Path) -> WbResult<()> {
    std::fs::create_dir_all(dir).at(dir)
}

/// Generates and writes the dataset. Refuses to replace an existing file
/// unless `force` is set.
pub fn gen_data(cfg: &RunConfig, force: bool) -> WbResult<PathBuf> {
    let paths = Paths::new(cfg);
    let path = paths.dataset();
    if path.exists() && !force {
        return Err(WbError::validation(
            "out_dir",
            format!("{} already exists (pass --force to overwrite)", path.display()),
        ));
    }
    ensure_dir(&paths.dir)?;
    let dc = cfg.dataset_config();
    let ds = gen_dataset(&dc, &Vocab::standard())?;
    dataset::write(&path, &dc, &ds)?;
    Ok(path)
}

/// Reads the dataset and checks it was generated from this config.
pub fn load_dataset(cfg: &RunConfig) -> WbResult<Dataset> {
    let path = Paths::new(cfg).dataset();
    let (header, ds) = dataset::read(&path)?;
    if header.config() != cfg.dataset_config() {
        return Err(WbError::validation(
            "data",
            format!("{} was generated from a different data config or seed", path.display()),
        ));
    }
    Ok(ds)
}

/// Loads the checkpoint, insisting on the configured architecture.
pub fn load_model(cfg: &RunConfig) -> WbResult<(ModelConfig, Weights, String)> {
    let path = Paths::new(cfg).checkpoint();
    let (mc, w, _) = checkpoint::load(&path)?;
    if mc != cfg.model_config() {
        return Err(WbError::validation(
            "model",
            format!("{} holds a different architecture", path.display()),
        ));
    }
    let sha = checkpoint::file_sha256(&path)?;
    Ok((mc, w, sha))
}

#[derive(Debug, Clone, Serialize)]
struct LogLine {
    step: usize,
    loss: f64,
    val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub best_step: usize,
    pub best_val_acc: f64,
    pub checkpoint_sha256: String,
    pub elapsed_s: f64,
    pub log: Vec<LogEntry>,
}

/// Trains from the dataset and saves the best-validation weights.
pub fn train<E: Executor>(cfg: &RunConfig, exec: &E, mut on_log: impl FnMut(&LogEntry)) -> WbResult<TrainSummary> {
    let paths = Paths::new(cfg);
    let ds = load_dataset(cfg)?;
    let mc = cfg.model_config();
    let tc = cfg.train_config();
    let start = Instant::now();
    let out = run_training(&mc, &tc, &ds.train, &ds.val, &Vocab::standard(), exec, &mut on_log)?;
    let elapsed_s = start.elapsed().as_secs_f64();
    let lines: Vec<LogLine> = out
        .log
        .iter()
        .map(|e| LogLine {
            step: e.step,
            loss: e.loss,
            val_acc: e.val_acc,
        })
        .collect();
    write_jsonl(&paths.train_log(), &lines)?;
    let meta = json!({
        "best_step": out.best_step,
        "best_val_acc": out.best_val_acc,
        "config_hash": cfg.hash(),
        "train_seed": tc.seed,
    });
    let sha = checkpoint::save(&paths.checkpoint(), &mc, &out.best, meta)?;
    Ok(TrainSummary {
        best_step: out.best_step,
        best_val_acc: out.best_val_acc,
        checkpoint_sha256: sha,
        elapsed_s,
        log: out.log,
    })
}

fn calibration_seed(cfg: &RunConfig) -> u64 {
    Rng::new(cfg.stage_seed(Stage::Trace)).split(1).next_u64()
}

/// Bisects sigma on validation positives and writes `calibration.json`.
/// The caller decides whether to persist the sigma into the config file.
pub fn calibrate<E: Executor>(cfg: &RunConfig, exec: &E) -> WbResult<Calibration> {
    let paths = Paths::new(cfg);
    let ds = load_dataset(cfg)?;
    let (mc, w, sha) = load_model(cfg)?;
    let samples = &ds.val[..cfg.trace.calibration_samples];
    let t = &cfg.trace;
    let cal = calibrate_sigma(
        &mc,
        &w,
        samples,
        &Vocab::standard(),
        (t.target_drop[0], t.target_drop[1]),
        calibration_seed(cfg),
        t.max_iter,
        exec,
    )?;
    let history: Vec<_> = cal.history.iter().map(|(s, d)| json!({"sigma": s, "drop": d})).collect();
    write_json(
        &paths.calibration(),
        &json!({
            "sigma": cal.sigma,
            "drop": cal.drop,
            "iterations": cal.iterations,
            "target_drop": t.target_drop,
            "history": history,
            "checkpoint_sha256": sha,
        }),
    )?;
    Ok(cal)
}

/// Rewrites `trace.sigma` in the TOML file at `path`, keeping every other
/// key as written.
pub fn write_sigma(path: &Path, sigma: f64) -> WbResult<()> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| WbError::format(path, e))?;
    let trace = doc
        .entry("trace")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(trace) = trace else {
        return Err(WbError::validation("trace", "must be a table"));
    };
    trace.insert("sigma".into(), toml::Value::Float(sigma));
    write_text(path, &toml::to_string_pretty(&doc).expect("toml serializes"))
}

/// Test samples used by the sweep.
pub fn trace_samples(cfg: &RunConfig, ds: &Dataset) -> Vec<QASample> {
    ds.test[..cfg.trace.n_samples]
        .iter()
        .filter(|s| s.answer || !cfg.trace.positives_only)
        .cloned()
        .collect()
}

pub fn sweep_config(cfg: &RunConfig) -> SweepConfig {
    SweepConfig {
        eps_d: cfg.trace.eps_d,
        ..SweepConfig::full(cfg.model.n_layers, cfg.trace.sigma, cfg.stage_seed(Stage::Trace))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub grid: RRGrid,
    pub profile: AttentionProfile,
    pub n_samples: usize,
}

/// Runs the full sweep and writes the grid, its metadata, the heatmaps and
/// the attention profile.
pub fn trace<E: Executor>(cfg: &RunConfig, exec: &E) -> WbResult<TraceSummary> {
    let paths = Paths::new(cfg);
    let ds = load_dataset(cfg)?;
    let (mc, w, sha) = load_model(cfg)?;
    let samples = trace_samples(cfg, &ds);
    if samples.is_empty() {
        return Err(WbError::validation("trace.n_samples", "no samples left to trace"));
    }
    let sc = sweep_config(cfg);
    let grid = sweep(&mc, &w, &samples, &Vocab::standard(), &sc, exec)?;
    rr::write_grid(&paths.rr_grid(), &grid)?;
    write_json(
        &paths.rr_meta(),
        &json!({
            "seed": cfg.seed,
            "sweep_seed": sc.seed,
            "sigma": sc.sigma,
            "eps_d": sc.eps_d,
            "n_samples": samples.len(),
            "positives_only": cfg.trace.positives_only,
            "checkpoint_sha256": sha,
            "config_hash": cfg.hash(),
        }),
    )?;
    for c in Component::ALL {
        write_text(&paths.heatmap(c), &svg::heatmap(&grid, c))?;
    }
    let profile = attention_profile(&mc, &w, &samples, exec)?;
    write_text(&paths.attention_profile(), &rr::profile_to_csv(&profile))?;
    Ok(TraceSummary {
        grid,
        profile,
        n_samples: samples.len(),
    })
}

/// JSON view of a plan.
pub fn plan_json(plan: &InjectionPlan) -> serde_json::Value {
    let o = &plan.options;
    json!({
        "n_layers": plan.n_layers,
        "use_rr_scaling": plan.use_rr_scaling,
        "use_normalization": plan.use_normalization,
        "k1": o.k1,
        "k2": o.k2,
        "lambda_a": o.lambda_a,
        "lambda_m": o.lambda_m,
        "injected": o.injected.label(),
        "target_rule": format!("{:?}", o.target_rule),
        "layer_range": format!("{:?}", o.layer_range),
        "components": plan.components.iter().map(|c| json!({
            "component": c.component.label(),
            "sources": c.sources,
            "targets": c.targets,
            "rr": c.rr,
            "lambda": c.lambda,
        })).collect::<Vec<_>>(),
    })
}

/// Corruption stream roots inside the inject stage.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Search = 0,
    TestQa = 1,
    TestCaptions = 2,
}

fn stream(cfg: &RunConfig, s: Stream) -> Rng {
    Rng::new(cfg.stage_seed(Stage::Inject)).split(s as u64)
}

/// Images as scored: clean when `sigma == 0`, else corrupted per index.
fn images<'a>(samples: impl Iterator<Item = &'a GridImage>, sigma: f64, root: &Rng) -> WbResult<Vec<GridImage>> {
    samples
        .enumerate()
        .map(|(i, img)| {
            if sigma == 0.0 {
                Ok(img.clone())
            } else {
                Ok(corrupt_image(img, sigma, &mut root.split(i as u64))?)
            }
        })
        .collect()
}

/// Yes/no outcomes of `samples` shown `imgs`, with an optional plan.
pub fn qa_outcomes<E: Executor>(
    mc: &ModelConfig,
    w: &Weights,
    samples: &[QASample],
    imgs: &[GridImage],
    plan: Option<&InjectionPlan>,
    exec: &E,
) -> WbResult<BinaryOutcomes> {
    let vocab = Vocab::standard();
    let preds = exec.map(samples.len(), |i| -> crosstrace_core::Result<bool> {
        let seq = embed(mc, w, &samples[i].input_with_image(&imgs[i]))?;
        let out = match plan {
            Some(p) => injected_forward(mc, w, &seq, p)?,
            None => forward(mc, w, &seq, &mut HookSet::new())?,
        };
        let l = out.last_logits();
        Ok(l[vocab.yes()] > l[vocab.no()])
    });
    let mut o = BinaryOutcomes::default();
    for (p, s) in preds.into_iter().zip(samples) {
        o.record(p?, s.answer);
    }
    Ok(o)
}

/// Greedy captions for `imgs`.
pub fn captions<E: Executor>(
    mc: &ModelConfig,
    w: &Weights,
    imgs: &[GridImage],
    plan: Option<&InjectionPlan>,
    max_new: usize,
    exec: &E,
) -> WbResult<Vec<Vec<usize>>> {
    let vocab = Vocab::standard();
    exec.map(imgs.len(), |i| -> crosstrace_core::Result<Vec<usize>> {
        let seq = embed(mc, w, &caption_input(&imgs[i], &vocab))?;
        match plan {
            Some(p) => injected_decode(mc, w, &seq, p, max_new, vocab.stop()),
            None => greedy_decode(mc, w, &seq, &mut HookSet::new(), max_new, vocab.stop()),
        }
    })
    .into_iter()
    .map(|r| r.map_err(WbError::from))
    .collect()
}

fn classes(img: &GridImage) -> BTreeSet<usize> {
    img.objects.iter().map(|o| o.class).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Metrics {
    fn new(o: &BinaryOutcomes) -> WbResult<Self> {
        let BinaryMetrics {
            accuracy,
            precision,
            recall,
            f1,
        } = binary_metrics(o)?;
        Ok(Self {
            accuracy,
            precision,
            recall,
            f1,
            tp: o.tp,
            fp: o.fp,
            tn: o.tn,
            fn_: o.fn_,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChairReport {
    pub c_s: Option<f64>,
    pub c_i: Option<f64>,
    pub n_captions: usize,
    pub n_mentioned: usize,
    pub n_hallucinated: usize,
    pub n_sentences: usize,
    pub n_flagged_sentences: usize,
    /// Set when a ratio had an empty denominator and was left out.
    pub c_s_excluded: bool,
    pub c_i_excluded: bool,
}

impl From<Chair> for ChairReport {
    fn from(c: Chair) -> Self {
        Self {
            c_s: c.c_s,
            c_i: c.c_i,
            n_captions: c.n_captions,
            n_mentioned: c.n_mentioned,
            n_hallucinated: c.n_hallucinated,
            n_sentences: c.n_sentences,
            n_flagged_sentences: c.n_flagged_sentences,
            c_s_excluded: c.c_s.is_none(),
            c_i_excluded: c.c_i.is_none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pair<T> {
    pub clean: T,
    pub corrupted: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchPoint {
    pub multiplier: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub val_corrupted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub baseline: Latency,
    pub zero_lambda: Latency,
    pub injected: Latency,
    /// `zero_lambda.tpot_ms / baseline.tpot_ms`.
    pub zero_lambda_tpot_ratio: f64,
    pub injected_tpot_ratio: f64,
}

/// Everything `inject-eval` measures. Headline fields describe the injected
/// model on corrupted test images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub accuracy: f64,
    pub f1: f64,
    pub c_s: Option<f64>,
    pub c_i: Option<f64>,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub sigma: f64,
    pub chosen_multiplier: f64,
    pub lambda_search: Vec<SearchPoint>,
    pub qa_baseline: Pair<Metrics>,
    pub qa_injected: Pair<Metrics>,
    pub chair_baseline: Pair<ChairReport>,
    pub chair_injected: Pair<ChairReport>,
    pub latency: Option<LatencyReport>,
    pub plan: serde_json::Value,
    pub notes: Vec<String>,
}

fn scaled(opts: &PlanOptions, m: f64) -> PlanOptions {
    PlanOptions {
        lambda_a: opts.lambda_a * m,
        lambda_m: opts.lambda_m * m,
        ..opts.clone()
    }
}

/// Builds the plan from the traced grid, picks the lambda multiplier on
/// corrupted validation images, then scores QA, captions and latency on the
/// test split. Set `measure_latency` to false to skip the timing runs.
pub fn inject_eval<E: Executor>(cfg: &RunConfig, exec: &E, measure_latency: bool) -> WbResult<Report> {
    let paths = Paths::new(cfg);
    let ds = load_dataset(cfg)?;
    let (mc, w, sha) = load_model(cfg)?;
    let grid = rr::read_grid(&paths.rr_grid())?;
    if grid.n_layers != mc.n_layers {
        return Err(WbError::validation(
            "model.n_layers",
            format!("{} covers {} layers", paths.rr_grid().display(), grid.n_layers),
        ));
    }
    let ltr = last_token_rr(&grid)?;
    let opts = cfg.plan_options()?;
    let sigma = cfg.trace.sigma;
    let inj = &cfg.inject;

    let search = &ds.val[..inj.n_search];
    let search_imgs = images(search.iter().map(|s| &s.image), sigma, &stream(cfg, Stream::Search))?;
    let mut lambda_search = Vec::new();
    let mut chosen = 1.0;
    if !inj.lambda_search.is_empty() {
        let mut best = f64::NEG_INFINITY;
        for &m in &inj.lambda_search {
            let o = scaled(&opts, m);
            let plan = build_plan(&ltr, mc.n_layers, &o)?;
            let acc = binary_metrics(&qa_outcomes(&mc, &w, search, &search_imgs, Some(&plan), exec)?)?.accuracy;
            lambda_search.push(SearchPoint {
                multiplier: m,
                lambda_a: o.lambda_a,
                lambda_m: o.lambda_m,
                val_corrupted_accuracy: acc,
            });
            if acc > best {
                best = acc;
                chosen = m;
            }
        }
    }
    let plan = build_plan(&ltr, mc.n_layers, &scaled(&opts, chosen))?;
    write_json(&paths.plan(), &plan_json(&plan))?;

    let test = &ds.test[..inj.n_qa];
    let clean_imgs: Vec<GridImage> = test.iter().map(|s| s.image.clone()).collect();
    let cor_imgs = images(test.iter().map(|s| &s.image), sigma, &stream(cfg, Stream::TestQa))?;
    let qa = |p: Option<&InjectionPlan>| -> WbResult<Pair<Metrics>> {
        Ok(Pair {
            clean: Metrics::new(&qa_outcomes(&mc, &w, test, &clean_imgs, p, exec)?)?,
            corrupted: Metrics::new(&qa_outcomes(&mc, &w, test, &cor_imgs, p, exec)?)?,
        })
    };
    let qa_baseline = qa(None)?;
    let qa_injected = qa(Some(&plan))?;

    let cap_src: Vec<&GridImage> = ds.test[..inj.n_captions].iter().map(|s| &s.image).collect();
    let cap_clean: Vec<GridImage> = cap_src.iter().map(|i| (*i).clone()).collect();
    let cap_cor = images(cap_src.iter().copied(), sigma, &stream(cfg, Stream::TestCaptions))?;
    let vocab = Vocab::standard();
    let judge = |imgs: &[GridImage], p: Option<&InjectionPlan>| -> WbResult<ChairReport> {
        let caps = captions(&mc, &w, imgs, p, inj.max_new, exec)?;
        let js: Vec<CaptionJudgment> = caps
            .iter()
            .zip(&cap_src)
            .map(|(c, img)| CaptionJudgment::new(c, classes(img), &vocab))
            .collect();
        Ok(chair(&js).into())
    };
    let chair_baseline = Pair {
        clean: judge(&cap_clean, None)?,
        corrupted: judge(&cap_cor, None)?,
    };
    let chair_injected = Pair {
        clean: judge(&cap_clean, Some(&plan))?,
        corrupted: judge(&cap_cor, Some(&plan))?,
    };

    let latency = if measure_latency {
        Some(latency_report(cfg, &mc, &w, &ds, &plan)?)
    } else {
        None
    };
    let (ttft_ms, tpot_ms) = latency.as_ref().map_or((0.0, 0.0), |l| (l.injected.ttft_ms, l.injected.tpot_ms));
    Ok(Report {
        accuracy: qa_injected.corrupted.accuracy,
        f1: qa_injected.corrupted.f1,
        c_s: chair_injected.corrupted.c_s,
        c_i: chair_injected.corrupted.c_i,
        ttft_ms,
        tpot_ms,
        config_hash: cfg.hash(),
        checkpoint_sha256: sha,
        sigma,
        chosen_multiplier: chosen,
        lambda_search,
        qa_baseline,
        qa_injected,
        chair_baseline,
        chair_injected,
        latency,
        plan: plan_json(&plan),
        notes: vec![
            CHAIR_NOTE.to_string(),
            "headline accuracy, f1, c_s, c_i, ttft_ms and tpot_ms describe the injected model on corrupted test images"
                .to_string(),
            "latency fields are wall-clock measurements and vary between runs".to_string(),
        ],
    })
}

/// Writes `report.json`.
pub fn write_report(cfg: &RunConfig, report: &Report) -> WbResult<PathBuf> {
    let path = Paths::new(cfg).report();
    write_json(&path, report)?;
    Ok(path)
}

/// Decode timings for no hooks, a zero-lambda plan and `plan`, on clean
/// caption prompts. Runs on the calling thread only.
pub fn latency_report(
    cfg: &RunConfig,
    mc: &ModelConfig,
    w: &Weights,
    ds: &Dataset,
    plan: &InjectionPlan,
) -> WbResult<LatencyReport> {
    let vocab = Vocab::standard();
    let seqs = ds.test[..cfg.inject.latency_samples.min(ds.test.len())]
        .iter()
        .map(|s| embed(mc, w, &caption_input(&s.image, &vocab)))
        .collect::<crosstrace_core::Result<Vec<_>>>()?;
    let zero = InjectionPlan {
        components: plan
            .components
            .iter()
            .map(|c| crosstrace_core::inject::ComponentPlan {
                lambda: 0.0,
                ..c.clone()
            })
            .collect(),
        ..plan.clone()
    };
    let mut runs = measure_interleaved(
        mc,
        w,
        &seqs,
        &[None, Some(&zero), Some(plan)],
        cfg.inject.latency_reps,
        cfg.inject.max_new,
    )?;
    let injected = runs.pop().expect("three variants");
    let zero_lambda = runs.pop().expect("three variants");
    let baseline = runs.pop().expect("three variants");
    Ok(LatencyReport {
        zero_lambda_tpot_ratio: zero_lambda.tpot_ms / baseline.tpot_ms,
        injected_tpot_ratio: injected.tpot_ms / baseline.tpot_ms,
        baseline,
        zero_lambda,
        injected,
    })
}
