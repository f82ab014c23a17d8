// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a gating criterion fails. Criterion 10 is diagnostic and
//! never gates.
//!
//! The trained-model criteria share one run of the default configuration
//! (data, training, calibration, trace, injection evaluation) in a
//! temporary directory.

use std::collections::BTreeSet;
use std::time::Instant;

use crosstrace::config::RunConfig;
use crosstrace::exec::{resolve_workers, Threaded};
use crosstrace::formats::rr;
use crosstrace::pipeline::{self, Paths, Report};
use crosstrace_core::eval::{chair, CaptionJudgment};
use crosstrace_core::inject::{build_plan, ComponentPlan, InjectionPlan, Injector, PlanOptions};
use crosstrace_core::model::{
    embed, forward, greedy_decode, Component, Edit, HookPoint, HookSet, Intervener, ModelConfig, MultimodalSequence,
    Weights,
};
use crosstrace_core::numerics::{Matrix, Rng};
use crosstrace_core::synth::{caption_input, gen_sample, DatasetConfig, QASample, Split, Vocab};
use crosstrace_core::trace::{corrupt_image, last_token_rr, recovery_rate, PatchSpec, RRGrid, DEFAULT_EPS_D};
use crosstrace_core::train::{caption_example, grad_check, qa_example};

struct Line {
    id: u8,
    pass: bool,
    gating: bool,
    text: String,
}

fn line(id: u8, pass: bool, text: impl Into<String>) -> Line {
    Line {
        id,
        pass,
        gating: true,
        text: text.into(),
    }
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn same(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() && bits(a) == bits(b)
}

/// Independent softmax probability of `tok`.
fn prob(logits: &[f64], tok: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    (logits[tok] - m).exp() / z
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// 1. Residual identity on random forwards.

fn residual_identity() -> Line {
    let start = Instant::now();
    let mc = ModelConfig::default();
    let w = Weights::init(&mc, &mut Rng::new(101), 0.1);
    let dc = DatasetConfig {
        seed: 5,
        ..DatasetConfig::default()
    };
    let vocab = Vocab::standard();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let s = gen_sample(&dc, Split::Train, i, &vocab).unwrap();
        let input = if i % 2 == 0 { s.to_input() } else { caption_input(&s.image, &vocab) };
        let seq = embed(&mc, &w, &input).unwrap();
        let t = forward(&mc, &w, &seq, &mut HookSet::new()).unwrap().trace;
        let mut prev = &t.embed;
        for layer in &t.layers {
            for j in 0..prev.data().len() {
                let r = prev.data()[j] + layer.attn.data()[j] + layer.ffn.data()[j];
                worst = worst.max((layer.hidden.data()[j] - r).abs());
            }
            prev = &layer.hidden;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        1,
        worst <= 1e-9 && secs < 10.0,
        format!("residual identity: max |h - (h_prev + a + m)| = {worst:.3e} over 100 forwards x 8 layers ({secs:.2} s; need <= 1e-9, < 10 s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradient check.

fn gradient_check() -> Line {
    let start = Instant::now();
    let mc = ModelConfig::default();
    let w = Weights::init(&mc, &mut Rng::new(202), 0.1);
    let vocab = Vocab::standard();
    let s = gen_sample(&DatasetConfig::default(), Split::Train, 3, &vocab).unwrap();
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (k, ex) in [qa_example(&s, &vocab, 1.0), caption_example(&s.image, &vocab, 0.5)].iter().enumerate() {
        let g = grad_check(&mc, &w, ex, 64, 1e-5, &mut Rng::new(300 + k as u64), None).unwrap();
        worst = worst.max(g.max_rel_error);
        probes += g.probes.len();
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        2,
        worst < 1e-4 && probes >= 64 && secs < 60.0,
        format!("gradient check: max relative error {worst:.3e} over {probes} probes, h = 1e-5 ({secs:.1} s; need < 1e-4, < 60 s)"),
    )
}

// ---------------------------------------------------------------------------
// 4. Null patch and full restore.

fn null_and_full_restore(mc: &ModelConfig, w: &Weights, samples: &[QASample], sigma: f64) -> Line {
    let start = Instant::now();
    let vocab = Vocab::standard();
    let (mut null_ok, mut full_ok, mut rr_exact, mut rr_n) = (true, true, true, 0);
    for (i, s) in samples.iter().take(50).enumerate() {
        let clean_seq = embed(mc, w, &s.to_input()).unwrap();
        let clean = forward(mc, w, &clean_seq, &mut HookSet::new()).unwrap();
        let img = corrupt_image(&s.image, sigma, &mut Rng::new(404).split(i as u64)).unwrap();
        let cor_seq = embed(mc, w, &s.input_with_image(&img)).unwrap();
        let cor = forward(mc, w, &cor_seq, &mut HookSet::new()).unwrap();

        let empty = PatchSpec::new(&clean.trace);
        let mut iv = empty.intervener();
        let patched = forward(mc, w, &cor_seq, &mut HookSet::new().intervene(&mut iv)).unwrap();
        null_ok &= same(&patched.logits, &cor.logits);

        let all: Vec<usize> = (0..clean_seq.len()).collect();
        let full = PatchSpec::new(&clean.trace).with(HookPoint::Embed, &all).unwrap();
        let mut iv = full.intervener();
        let restored = forward(mc, w, &cor_seq, &mut HookSet::new().intervene(&mut iv)).unwrap();
        full_ok &= same(&restored.logits, &clean.logits);
        let yes = vocab.yes();
        let (pc, pr, pp) = (prob(clean.last_logits(), yes), prob(cor.last_logits(), yes), prob(restored.last_logits(), yes));
        if let Some(r) = recovery_rate(pc, pr, pp, DEFAULT_EPS_D) {
            rr_n += 1;
            rr_exact &= r == 1.0;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        4,
        null_ok && full_ok && rr_exact && rr_n > 0 && secs < 60.0,
        format!(
            "null patch bit-identical to corrupted: {null_ok}; full embed restore bit-identical to clean: {full_ok}; RR == 1.0 exactly on {rr_n}/50 guarded samples: {rr_exact} ({secs:.1} s)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. RR arithmetic.

fn rr_arithmetic() -> Line {
    let base = recovery_rate(0.8, 0.2, 0.5, DEFAULT_EPS_D).unwrap();
    let mut rng = Rng::new(505);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 10_000 {
        let (c, r) = (rng.uniform(), rng.uniform());
        if (c - r).abs() < DEFAULT_EPS_D {
            continue;
        }
        n += 1;
        worst = worst.max((recovery_rate(c, r, c, DEFAULT_EPS_D).unwrap() - 1.0).abs());
        worst = worst.max(recovery_rate(c, r, r, DEFAULT_EPS_D).unwrap().abs());
    }
    line(
        5,
        (base - 0.5).abs() <= 1e-12 && worst <= 1e-12,
        format!("RR(0.8, 0.2, 0.5) = {base}; max deviation of RR(c,r,c)=1 and RR(c,r,r)=0 over 10^4 pairs = {worst:.1e} (need <= 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 6. Sweep cells against a standalone triplet runner.

/// Overwrites rows at one site with values from a recorded clean trace.
struct Restore<'a> {
    point: HookPoint,
    positions: &'a [usize],
    clean: &'a Matrix,
}

impl Intervener for Restore<'_> {
    fn intervene(&mut self, point: HookPoint, _act: &Matrix) -> crosstrace_core::Result<Vec<Edit>> {
        if point != self.point {
            return Ok(Vec::new());
        }
        let rows: Vec<&[f64]> = self.positions.iter().map(|&p| self.clean.row(p)).collect();
        Ok(vec![Edit::replace(self.positions.to_vec(), Matrix::from_rows(&rows)?)])
    }
}

fn sweep_oracle(cfg: &RunConfig, mc: &ModelConfig, w: &Weights, samples: &[QASample], grid: &RRGrid) -> Line {
    let start = Instant::now();
    let sc = pipeline::sweep_config(cfg);
    let yes = Vocab::standard().yes();
    let candidates: Vec<_> = grid.cells.iter().filter(|(_, c)| c.mean_rr.is_some()).collect();
    let mut rng = Rng::new(606);
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    let mut picked = Vec::new();
    for _ in 0..5 {
        let (&(comp, layer, cat), cell) = candidates[rng.below(candidates.len())];
        picked.push(format!("{}@{}/{}", comp.label(), layer, cat.label()));
        let mut rates = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let clean_seq = embed(mc, w, &s.to_input()).unwrap();
            let positions = clean_seq.positions_of(cat);
            if positions.is_empty() {
                continue;
            }
            let clean = forward(mc, w, &clean_seq, &mut HookSet::new()).unwrap();
            let img = corrupt_image(&s.image, sc.sigma, &mut Rng::new(sc.seed).split(i as u64)).unwrap();
            let cor_seq = embed(mc, w, &s.input_with_image(&img)).unwrap();
            let cor = forward(mc, w, &cor_seq, &mut HookSet::new()).unwrap();
            let point = HookPoint::block(layer, comp);
            let mut iv = Restore {
                point,
                positions: &positions,
                clean: clean.trace.get(point).unwrap(),
            };
            let pat = forward(mc, w, &cor_seq, &mut HookSet::new().intervene(&mut iv)).unwrap();
            let (pc, pr, pp) = (prob(clean.last_logits(), yes), prob(cor.last_logits(), yes), prob(pat.last_logits(), yes));
            if (pc - pr).abs() >= sc.eps_d {
                rates.push((pp - pr) / (pc - pr));
            }
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        worst = worst.max((mean - cell.mean_rr.unwrap()).abs());
        counts_ok &= rates.len() == cell.n_included;
    }
    let secs = start.elapsed().as_secs_f64();
    line(
        6,
        worst <= 1e-12 && counts_ok && secs < 300.0,
        format!(
            "sweep oracle: cells [{}] max |mean_rr - standalone| = {worst:.1e}, inclusion counts agree: {counts_ok} ({secs:.1} s; need <= 1e-12, < 300 s)",
            picked.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7-9. Injection identities.

fn caption_seqs(mc: &ModelConfig, w: &Weights, samples: &[QASample], n: usize) -> Vec<MultimodalSequence> {
    let vocab = Vocab::standard();
    samples[..n].iter().map(|s| embed(mc, w, &caption_input(&s.image, &vocab)).unwrap()).collect()
}

fn zero_lambda_identity(mc: &ModelConfig, w: &Weights, seqs: &[MultimodalSequence], grid: &RRGrid) -> Line {
    let stop = Vocab::standard().stop();
    let opts = PlanOptions {
        lambda_a: 0.0,
        lambda_m: 0.0,
        ..PlanOptions::default()
    };
    let plan = build_plan(&last_token_rr(grid).unwrap(), mc.n_layers, &opts).unwrap();
    let mut ok = true;
    for seq in seqs {
        let base = greedy_decode(mc, w, seq, &mut HookSet::new(), 12, stop).unwrap();
        let mut inj = Injector::new(mc, &plan).unwrap();
        let out = greedy_decode(mc, w, seq, &mut HookSet::new().intervene(&mut inj), 12, stop).unwrap();
        ok &= out == base;
        // Compare the final step's logits bit for bit as well.
        let mut full = seq.clone();
        for &t in &base[..base.len() - 1] {
            full.push_text(mc, w, t).unwrap();
        }
        let a = forward(mc, w, &full, &mut HookSet::new()).unwrap();
        let mut inj = Injector::new(mc, &plan).unwrap();
        let b = forward(mc, w, &full, &mut HookSet::new().intervene(&mut inj)).unwrap();
        ok &= same(&a.logits, &b.logits) && a.trace == b.trace;
    }
    line(
        7,
        ok,
        format!("zero-lambda injected decode identical to baseline (tokens, logits and traces) on {} samples: {ok}", seqs.len()),
    )
}

fn norm_preservation(mc: &ModelConfig, w: &Weights, seqs: &[MultimodalSequence], grid: &RRGrid) -> Line {
    let stop = Vocab::standard().stop();
    let opts = PlanOptions {
        lambda_a: 1.0,
        lambda_m: 1.0,
        ..PlanOptions::default()
    };
    let plan = build_plan(&last_token_rr(grid).unwrap(), mc.n_layers, &opts).unwrap();
    let mut worst = 0.0f64;
    let mut n = 0;
    for seq in seqs {
        let mut inj = Injector::new(mc, &plan).unwrap();
        greedy_decode(mc, w, seq, &mut HookSet::new().intervene(&mut inj), 12, stop).unwrap();
        for r in inj.records() {
            n += 1;
            worst = worst.max((r.norm_after - r.norm_before).abs() / r.norm_before);
        }
    }
    line(
        8,
        n > 0 && worst <= 1e-9,
        format!("norm preservation: max relative norm change {worst:.1e} over {n} injections in a {}-sample decode (need <= 1e-9)", seqs.len()),
    )
}

fn gate_and_recompute(mc: &ModelConfig, w: &Weights, samples: &[QASample], grid: &RRGrid) -> Line {
    let ltr = last_token_rr(grid).unwrap();
    let plan = build_plan(&ltr, mc.n_layers, &PlanOptions {
        lambda_a: 1.0,
        lambda_m: 1.0,
        ..PlanOptions::default()
    })
    .unwrap();
    let k_star = plan.min_source().unwrap();
    let mut gate_ok = true;
    for s in samples.iter().take(20) {
        let seq = embed(mc, w, &s.to_input()).unwrap();
        let base = forward(mc, w, &seq, &mut HookSet::new()).unwrap().trace;
        let mut inj = Injector::new(mc, &plan).unwrap();
        let got = forward(mc, w, &seq, &mut HookSet::new().intervene(&mut inj)).unwrap().trace;
        gate_ok &= same(&base.embed, &got.embed);
        for l in 0..=k_star {
            let (a, b) = (&base.layers[l], &got.layers[l]);
            gate_ok &= same(&a.attn, &b.attn) && same(&a.ffn, &b.ffn) && same(&a.hidden, &b.hidden);
        }
    }

    // Single (source, target) plans recomputed by hand from baseline traces.
    let mut rng = Rng::new(909);
    let mut worst = 0.0f64;
    let mut pairs = Vec::new();
    for p in 0..10 {
        let comp = if p % 2 == 0 { Component::Attn } else { Component::Ffn };
        let k = rng.below(mc.n_layers - 1);
        let l = k + 1 + rng.below(mc.n_layers - k - 1);
        let rr_row = if comp == Component::Attn { &ltr.attn } else { &ltr.ffn };
        let lambda = 0.5 + rng.uniform();
        let normalize = p % 3 != 0;
        let plan = InjectionPlan {
            n_layers: mc.n_layers,
            components: vec![ComponentPlan {
                component: comp,
                sources: vec![k],
                targets: vec![l],
                rr: rr_row.iter().map(|r| r.max(0.0)).collect(),
                lambda,
            }],
            use_rr_scaling: true,
            use_normalization: normalize,
            options: PlanOptions::default(),
        };
        pairs.push(format!("{}:{k}->{l}", comp.label()));
        let s = &samples[rng.below(samples.len())];
        let seq = embed(mc, w, &s.to_input()).unwrap();
        let base = forward(mc, w, &seq, &mut HookSet::new()).unwrap().trace;
        let mut inj = Injector::new(mc, &plan).unwrap();
        let got = forward(mc, w, &seq, &mut HookSet::new().intervene(&mut inj)).unwrap().trace;
        let last = seq.len() - 1;
        let pick = |t: &crosstrace_core::model::ActivationTrace, layer: usize| -> Vec<f64> {
            t.get(HookPoint::block(layer, comp)).unwrap().row(last).to_vec()
        };
        let (a_l, a_k) = (pick(&base, l), pick(&base, k));
        let weight = rr_row[k].max(0.0);
        let mut expect: Vec<f64> = a_l.iter().zip(&a_k).map(|(x, y)| x + lambda * weight * y).collect();
        if normalize {
            let sc = norm(&a_l) / norm(&expect);
            expect.iter_mut().for_each(|v| *v *= sc);
        }
        let actual = pick(&got, l);
        for (x, y) in expect.iter().zip(&actual) {
            worst = worst.max((x - y).abs());
        }
        // Other rows at the target are untouched.
        let (bm, gm) = (base.get(HookPoint::block(l, comp)).unwrap(), got.get(HookPoint::block(l, comp)).unwrap());
        for r in 0..last {
            if bm.row(r) != gm.row(r) {
                worst = f64::INFINITY;
            }
        }
    }
    line(
        9,
        gate_ok && worst <= 1e-12,
        format!(
            "gate: layers <= k* = {k_star} bit-identical on 20 samples: {gate_ok}; manual recomputation max error {worst:.1e} on pairs [{}] (need <= 1e-12)",
            pairs.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Directional findings (diagnostic).

fn thirds(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    (0..n / 3, n / 3..2 * n / 3)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional(grid: &RRGrid, profile: &crosstrace_core::trace::AttentionProfile, report: &Report) -> Line {
    let ltr = last_token_rr(grid).unwrap();
    let (first, middle) = thirds(grid.n_layers);
    let (rr_first, rr_mid) = (mean(&ltr.attn[first.clone()]), mean(&ltr.attn[middle.clone()]));
    let a_ok = rr_mid > rr_first;
    let ov = &profile.to_object_visual;
    let (att_first, att_mid) = (mean(&ov[first.clone()]), mean(&ov[middle.clone()]));
    let b_ok = att_mid > att_first;
    let (acc_b, acc_i) = (report.qa_baseline.corrupted.accuracy, report.qa_injected.corrupted.accuracy);
    let (cs_b, cs_i) = (report.chair_baseline.corrupted.c_s, report.chair_injected.corrupted.c_s);
    let cs_ok = match (cs_b, cs_i) {
        (Some(b), Some(i)) => i <= b,
        _ => false,
    };
    let c_ok = acc_i >= acc_b && cs_ok;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    Line {
        id: 10,
        pass: a_ok && b_ok && c_ok,
        gating: false,
        text: format!(
            "(diagnostic) (a) last-token attn RR middle third {rr_mid:.4} vs first third {rr_first:.4}, effect {:+.4}: {a_ok}; \
(b) last-to-object-visual attention middle {att_mid:.4} vs first {att_first:.4}, effect {:+.4}: {b_ok}; \
(c) corrupted QA accuracy injected {acc_i:.4} vs baseline {acc_b:.4} (effect {:+.4}, multiplier {}), \
C_S injected {} vs baseline {}: {c_ok}",
            rr_mid - rr_first,
            att_mid - att_first,
            acc_i - acc_b,
            report.chosen_multiplier,
            fmt(cs_i),
            fmt(cs_b),
        ),
    }
}

// ---------------------------------------------------------------------------
// 11. CHAIR worked example.

fn chair_example() -> Line {
    let vocab = Vocab::standard();
    let caption = vocab.parse("a dog a cat . a car .").unwrap();
    let gt: BTreeSet<usize> = ["dog", "car"]
        .iter()
        .map(|w| vocab.object_class(vocab.id(w).unwrap()).unwrap())
        .collect();
    let c = chair(&[CaptionJudgment::new(&caption, gt, &vocab)]);
    let ok = c.c_s == Some(1.0 / 3.0) && c.c_i == Some(0.5);
    line(
        11,
        ok,
        format!("CHAIR: mentioned {{dog, cat, car}}, truth {{dog, car}}, 2 sentences -> C_S = {:?}, C_I = {:?} (need 1/3, 1/2)", c.c_s, c.c_i),
    )
}

// ---------------------------------------------------------------------------
// 12. Latency overhead.

fn latency(report: &Report, reps: usize) -> Line {
    let Some(l) = &report.latency else {
        return line(12, false, "latency: not measured");
    };
    let ratio = l.zero_lambda_tpot_ratio;
    let positive = l.baseline.ttft_ms > 0.0 && l.baseline.tpot_ms > 0.0;
    line(
        12,
        ratio <= 1.1 && reps >= 10 && positive,
        format!(
            "latency: zero-lambda TPOT {:.3} ms vs hook-free {:.3} ms, ratio {ratio:.3} (median of {reps} runs; need <= 1.1); TTFT {:.3} ms; injected TPOT ratio {:.3}",
            l.zero_lambda.tpot_ms, l.baseline.tpot_ms, l.baseline.ttft_ms, l.injected_tpot_ratio
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    // `cargo test -- --list` and filters from other targets should not
    // trigger the full run.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut lines = vec![residual_identity(), gradient_check(), rr_arithmetic(), chair_example()];

    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let exec = Threaded::new(resolve_workers(None));

    // 3. Training from scratch under the default config.
    let start = Instant::now();
    pipeline::gen_data(&cfg, false).expect("gen-data");
    let summary = pipeline::train(&cfg, &exec, |e| {
        eprintln!("  train step {:>5} loss {:.4} val_acc {:.4}", e.step, e.loss, e.val_acc);
    })
    .expect("train");
    let secs = start.elapsed().as_secs_f64();
    lines.push(line(
        3,
        summary.best_val_acc >= 0.95 && secs < 900.0,
        format!(
            "training: best validation accuracy {:.4} at step {} of {} in {secs:.0} s (need >= 0.95, < 900 s)",
            summary.best_val_acc, summary.best_step, cfg.train.steps
        ),
    ));

    let mut cfg = cfg;
    let cal = pipeline::calibrate(&cfg, &exec).expect("calibrate");
    eprintln!("  calibrated sigma {:.4} (mean yes drop {:.4}, {} evaluations)", cal.sigma, cal.drop, cal.iterations);
    cfg.trace.sigma = cal.sigma;

    let ds = pipeline::load_dataset(&cfg).expect("dataset");
    let (mc, w, _) = pipeline::load_model(&cfg).expect("checkpoint");
    let trace_samples = pipeline::trace_samples(&cfg, &ds);
    lines.push(null_and_full_restore(&mc, &w, &trace_samples, cal.sigma));

    let t = pipeline::trace(&cfg, &exec).expect("trace");
    let grid = rr::read_grid(&Paths::new(&cfg).rr_grid()).expect("rr grid");
    lines.push(sweep_oracle(&cfg, &mc, &w, &trace_samples, &grid));

    let seqs = caption_seqs(&mc, &w, &ds.test, 100);
    lines.push(zero_lambda_identity(&mc, &w, &seqs, &grid));
    lines.push(norm_preservation(&mc, &w, &seqs, &grid));
    lines.push(gate_and_recompute(&mc, &w, &trace_samples, &grid));

    let report = pipeline::inject_eval(&cfg, &exec, true).expect("inject-eval");
    lines.push(directional(&t.grid, &t.profile, &report));
    lines.push(latency(&report, cfg.inject.latency_reps));

    lines.sort_by_key(|l| l.id);
    let mut failed = 0;
    for l in &lines {
        println!("{} criterion {:>2}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.text);
        if !l.pass && l.gating {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
