// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::model::{embed, forward, layer_forward, ActivationTrace};
use crate::numerics::Rng;
use crate::synth::{gen_image, gen_qa, Vocab};

fn model() -> (ModelConfig, Weights) {
    let c = ModelConfig {
        n_layers: 6,
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        ..ModelConfig::default()
    };
    let w = Weights::init(&c, &mut Rng::new(4), 0.4);
    (c, w)
}

fn seq(c: &ModelConfig, w: &Weights, seed: u64) -> MultimodalSequence {
    let v = Vocab::standard();
    let img = gen_image(&mut Rng::new(seed), (6, 6), 2, 4).unwrap();
    let s = gen_qa(&mut Rng::new(seed), &img, 0.5, &v);
    embed(c, w, &s.to_input()).unwrap()
}

fn rr(attn: &[f64], ffn: &[f64]) -> LastTokenRR {
    LastTokenRR {
        attn: attn.to_vec(),
        ffn: ffn.to_vec(),
        hidden: None,
    }
}

fn manual_plan(n_layers: usize, component: Component, sources: &[usize], targets: &[usize], lambda: f64) -> InjectionPlan {
    InjectionPlan {
        n_layers,
        components: vec![ComponentPlan {
            component,
            sources: sources.to_vec(),
            targets: targets.to_vec(),
            rr: vec![1.0; n_layers],
            lambda,
        }],
        use_rr_scaling: false,
        use_normalization: false,
        options: PlanOptions::default(),
    }
}

#[test]
fn gate_is_strict_causal_order() {
    assert_eq!(gate(5, 10), 1);
    assert_eq!(gate(10, 5), 0);
    assert_eq!(gate(7, 7), 0);
}

#[test]
fn llava_7b_settings() {
    let p = PlanOptions::llava_7b();
    assert_eq!((p.k1, p.k2), (3, 10));
    assert_eq!((p.lambda_a, p.lambda_m), (0.26, 0.16));
    let desc: Vec<f64> = (0..32).map(|i| 1.0 - i as f64 / 64.0).collect();
    let plan = build_plan(&rr(&desc, &desc), 32, &p).unwrap();
    assert_eq!(plan.components[0].sources, [0, 1, 2]);
    assert_eq!(plan.components[0].targets, (3..13).collect::<Vec<_>>());
    assert!(build_plan(&rr(&desc[..8], &desc[..8]), 8, &p).is_err());
}

#[test]
fn ranking_examples() {
    let desc = [0.9, 0.8, 0.7, 0.6, 0.5];
    let (s, t) = select_layers(&desc, 1, 1, TargetRule::ByRank, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!((s, t), (vec![0], vec![1]));
    let flat = [0.3; 5];
    let (s, t) = select_layers(&flat, 2, 2, TargetRule::ByRank, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!((s, t), (vec![0, 1], vec![2, 3]));
    let mixed = [0.1, 0.7, 0.2, 0.9, 0.4, 0.05];
    let (s, t) = select_layers(&mixed, 2, 2, TargetRule::ByRank, &[0, 1, 2, 3, 4, 5]).unwrap();
    assert_eq!((s, t), (vec![1, 3], vec![2, 4]));
    let (s, t) = select_layers(&mixed, 2, 2, TargetRule::AfterDeepestSource, &[0, 1, 2, 3, 4, 5]).unwrap();
    assert_eq!((s, t), (vec![1, 3], vec![4, 5]));
    assert!(matches!(
        select_layers(&[0.0, 0.0, 0.0, 1.0], 1, 1, TargetRule::AfterDeepestSource, &[0, 1, 2, 3]),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn plan_validation() {
    let v = [0.5; 4];
    assert!(select_layers(&v, 3, 2, TargetRule::ByRank, &[0, 1, 2, 3]).is_err());
    assert!(select_layers(&[0.1, f64::NAN, 0.2], 1, 1, TargetRule::ByRank, &[0, 1, 2]).is_err());
    let o = PlanOptions {
        k1: 1,
        k2: 1,
        lambda_a: -0.1,
        ..PlanOptions::default()
    };
    assert!(build_plan(&rr(&v, &v), 4, &o).is_err());
    let o = PlanOptions { k1: 1, k2: 1, ..PlanOptions::default() };
    assert!(build_plan(&rr(&v[..3], &v), 4, &o).is_err());
    let hidden = PlanOptions {
        injected: Injected::Hidden,
        ..o.clone()
    };
    assert!(matches!(build_plan(&rr(&v, &v), 4, &hidden), Err(Error::Missing(_))));
    let (c, _) = model();
    let plan = build_plan(&rr(&v, &v), 4, &o).unwrap();
    assert!(Injector::new(&c, &plan).is_err());
}

#[test]
fn negative_rr_is_clamped_and_components_independent() {
    let attn = [-0.4, 0.9, 0.1, 0.3, -0.2, 0.0];
    let ffn = [0.8, 0.1, 0.0, 0.2, 0.5, 0.3];
    let o = PlanOptions { k1: 2, k2: 2, ..PlanOptions::default() };
    let plan = build_plan(&rr(&attn, &ffn), 6, &o).unwrap();
    let a = plan.component(Component::Attn).unwrap();
    let m = plan.component(Component::Ffn).unwrap();
    assert_eq!(a.rr, [0.0, 0.9, 0.1, 0.3, 0.0, 0.0]);
    assert_eq!((a.sources.as_slice(), a.targets.as_slice()), (&[1, 3][..], &[2, 5][..]));
    assert_eq!((m.sources.as_slice(), m.targets.as_slice()), (&[0, 4][..], &[3, 5][..]));
    assert_eq!(a.lambda, 0.26);
    assert_eq!(m.lambda, 0.16);
    assert_eq!(plan, build_plan(&rr(&attn, &ffn), 6, &o).unwrap());
}

#[test]
fn layer_range_restricts_candidates() {
    let v = [0.1, 0.2, 0.9, 0.8, 0.3, 0.4];
    let first = PlanOptions {
        k1: 1,
        k2: 2,
        layer_range: LayerRange::First(3),
        ..PlanOptions::default()
    };
    let p = build_plan(&rr(&v, &v), 6, &first).unwrap();
    assert_eq!(p.components[0].sources, [2]);
    assert_eq!(p.components[0].targets, [0, 1]);
    let last = PlanOptions {
        layer_range: LayerRange::Last(3),
        ..first.clone()
    };
    let p = build_plan(&rr(&v, &v), 6, &last).unwrap();
    assert_eq!(p.components[0].sources, [3]);
    assert_eq!(p.components[0].targets, [4, 5]);
    assert!(LayerRange::Last(7).layers(6).is_err());
    assert!(LayerRange::First(0).layers(6).is_err());
}

#[test]
fn zero_lambda_is_bit_identical() {
    let (c, w) = model();
    let s = seq(&c, &w, 1);
    let base = forward(&c, &w, &s, &mut HookSet::new()).unwrap();
    let v = [0.5, 0.9, 0.1, 0.7, 0.3, 0.2];
    let o = PlanOptions {
        lambda_a: 0.0,
        lambda_m: 0.0,
        ..PlanOptions::default()
    };
    let plan = build_plan(&rr(&v, &v), 6, &o).unwrap();
    assert_eq!(injected_forward(&c, &w, &s, &plan).unwrap(), base);
}

#[test]
fn single_pair_adds_source_row() {
    let (c, w) = model();
    let s = seq(&c, &w, 2);
    let base = forward(&c, &w, &s, &mut HookSet::new()).unwrap();
    for comp in [Component::Attn, Component::Ffn, Component::Hidden] {
        let plan = manual_plan(6, comp, &[1], &[4], 1.0);
        let out = injected_forward(&c, &w, &s, &plan).unwrap();
        let last = s.len() - 1;
        let got = out.trace.get(HookPoint::block(4, comp)).unwrap().row(last);
        let a_l = base.trace.get(HookPoint::block(4, comp)).unwrap().row(last);
        let a_k = base.trace.get(HookPoint::block(1, comp)).unwrap().row(last);
        for j in 0..c.d_model {
            assert_eq!(got[j], a_l[j] + a_k[j]);
        }
    }
}

#[test]
fn backward_pairs_contribute_nothing() {
    let (c, w) = model();
    let s = seq(&c, &w, 3);
    let base = forward(&c, &w, &s, &mut HookSet::new()).unwrap();
    let plan = manual_plan(6, Component::Attn, &[4], &[2, 4], 0.7);
    // Target 4 equals the source; target 2 precedes it.
    let plan = InjectionPlan {
        components: vec![ComponentPlan {
            targets: vec![2],
            ..plan.components[0].clone()
        }],
        ..plan
    };
    assert_eq!(injected_forward(&c, &w, &s, &plan).unwrap(), base);
}

fn check_manual(c: &ModelConfig, w: &Weights, s: &MultimodalSequence, plan: &InjectionPlan, trace: &ActivationTrace) {
    let last = s.len() - 1;
    for p in &plan.components {
        for &l in &p.targets {
            let pre = layer_forward(c, l, trace.hidden(l as isize - 1), w, &mut HookSet::new()).unwrap();
            // Later components inside the layer see the edited upstream value.
            let a = match p.component {
                Component::Attn => pre.attn.row(last).to_vec(),
                Component::Ffn | Component::Hidden => {
                    assert_eq!(plan.components.len(), 1);
                    match p.component {
                        Component::Ffn => pre.ffn.row(last).to_vec(),
                        _ => pre.hidden.row(last).to_vec(),
                    }
                }
            };
            let mut want = a.clone();
            for &k in &p.sources {
                let wk = if plan.use_rr_scaling { p.rr[k] } else { 1.0 };
                let g = gate(k, l) as f64;
                let src = trace.get(HookPoint::block(k, p.component)).unwrap().row(last);
                for j in 0..want.len() {
                    want[j] += p.lambda * g * wk * src[j];
                }
            }
            if plan.use_normalization {
                let r = l2_norm(&a) / l2_norm(&want);
                want.iter_mut().for_each(|v| *v *= r);
            }
            let got = trace.get(HookPoint::block(l, p.component)).unwrap().row(last);
            for j in 0..want.len() {
                assert!((got[j] - want[j]).abs() < 1e-12, "{:?}@{l}", p.component);
            }
        }
    }
}

#[test]
fn matches_manual_recomputation() {
    let (c, w) = model();
    let s = seq(&c, &w, 4);
    let attn = [0.2, 0.9, 0.1, 0.6, 0.3, 0.4];
    let ffn = [0.7, 0.2, 0.5, 0.1, 0.4, 0.3];
    for injected in [Injected::AttnOnly, Injected::MlpOnly, Injected::Hidden] {
        for (scale, norm) in [(true, true), (false, true), (true, false), (false, false)] {
            let o = PlanOptions {
                k1: 2,
                k2: 3,
                lambda_a: 0.5,
                lambda_m: 0.3,
                use_rr_scaling: scale,
                use_normalization: norm,
                injected,
                ..PlanOptions::default()
            };
            let r = LastTokenRR {
                hidden: Some(ffn.to_vec()),
                ..rr(&attn, &ffn)
            };
            let plan = build_plan(&r, 6, &o).unwrap();
            let out = injected_forward(&c, &w, &s, &plan).unwrap();
            check_manual(&c, &w, &s, &plan, &out.trace);
        }
    }
}

#[test]
fn normalization_preserves_norm_every_step() {
    let (c, w) = model();
    let s = seq(&c, &w, 5);
    let v = [0.2, 0.9, 0.1, 0.6, 0.3, 0.4];
    let o = PlanOptions {
        k1: 2,
        k2: 3,
        lambda_a: 2.0,
        lambda_m: 1.5,
        ..PlanOptions::default()
    };
    let plan = build_plan(&rr(&v, &[0.5, 0.1, 0.8, 0.2, 0.3, 0.9]), 6, &o).unwrap();
    let mut inj = Injector::new(&c, &plan).unwrap();
    let toks = greedy_decode(&c, &w, &s, &mut HookSet::new().intervene(&mut inj), 4, 0).unwrap();
    assert!(!inj.records().is_empty());
    let steps: alloc::collections::BTreeSet<usize> = inj.records().iter().map(|r| r.seq_len).collect();
    assert_eq!(steps.len(), toks.len());
    for r in inj.records() {
        assert!((r.norm_after - r.norm_before).abs() <= 1e-9 * r.norm_before.max(1.0));
        assert!(r.norm_injected != r.norm_before);
    }
}

#[test]
fn locality_and_causal_gating() {
    let (c, w) = model();
    let s = seq(&c, &w, 6);
    let base = forward(&c, &w, &s, &mut HookSet::new()).unwrap();
    let v = [0.1, 0.2, 0.9, 0.8, 0.3, 0.4];
    let o = PlanOptions { k1: 2, k2: 2, lambda_a: 1.0, lambda_m: 1.0, ..PlanOptions::default() };
    let plan = build_plan(&rr(&v, &v), 6, &o).unwrap();
    let out = injected_forward(&c, &w, &s, &plan).unwrap();
    assert_ne!(out.logits, base.logits);
    let min_src = plan.min_source().unwrap();
    assert_eq!(out.trace.embed, base.trace.embed);
    for l in 0..=min_src {
        assert_eq!(out.trace.layers[l], base.trace.layers[l]);
    }
    let last = s.len() - 1;
    for l in 0..c.n_layers {
        for comp in Component::ALL {
            let a = out.trace.get(HookPoint::block(l, comp)).unwrap();
            let b = base.trace.get(HookPoint::block(l, comp)).unwrap();
            for r in 0..last {
                assert_eq!(a.row(r), b.row(r));
            }
        }
    }
}

#[test]
fn empty_plan_decodes_like_baseline() {
    let (c, w) = model();
    let s = seq(&c, &w, 7);
    let base = greedy_decode(&c, &w, &s, &mut HookSet::new(), 5, 0).unwrap();
    let plan = InjectionPlan::empty(6);
    assert_eq!(injected_decode(&c, &w, &s, &plan, 5, 0).unwrap(), base);
    let zero = manual_plan(6, Component::Attn, &[], &[3, 4], 1.0);
    assert_eq!(injected_decode(&c, &w, &s, &zero, 5, 0).unwrap(), base);
}
