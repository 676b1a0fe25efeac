mod common;

use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddx::dataset::{build_vocabulary, normalize_ddx, split_train_test, CaseSet};
use ddx::eval::{evaluate, evaluate_model, truth_label, ExpertDiagnoser, TruthMode};
use ddx::expert::{expert_inference, score_disease, softmax_normalize};
use ddx::kb::{KbDocument, KnowledgeBase};
use ddx::model::{forward, init_parameters, Mode, Tensors};
use ddx::simulate::{simulate_case, simulate_dataset, ClinicalCase, CaseSource};
use ddx::synthetic::{separable_kb, SeparableKbSpec};
use ddx::trainer::{adam_step, kl_loss, train, AdamState, TrainConfig};
use ddx::{rng, Execution, SimConfig};

use common::*;

fn kb(json: serde_json::Value) -> KnowledgeBase {
    KnowledgeBase::from_document(serde_json::from_value(json).unwrap()).unwrap()
}

#[test]
fn smoothed_score_of_single_finding() {
    let kb = kb(serde_json::json!({
        "diseases": [{"id": "flu", "name": "Influenza"}],
        "findings": [{"id": "fever", "name": "Fever", "kind": "clinical"}],
        "frequencies": [{"disease": "flu", "finding": "fever", "freq": 0.8}]
    }));
    // ln(0.801), evaluated independently
    let expected = -0.221_894_331_913_777_8;
    assert_abs_diff_eq!(score_disease(&kb, "flu", &["fever"], &[]).unwrap(), expected, epsilon = 1e-15);
}

#[test]
fn softmax_of_appendix_scores() {
    let p = softmax_normalize(&[26.9, 23.4, 22.9]).unwrap();
    let z = 1.0 + (-3.5f64).exp() + (-4.0f64).exp();
    let oracle = [1.0 / z, (-3.5f64).exp() / z, (-4.0f64).exp() / z];
    for (a, b) in p.iter().zip(oracle) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    for (a, b) in p.iter().zip([0.9537, 0.0288, 0.0175]) {
        assert_abs_diff_eq!(*a, b, epsilon = 5e-5);
    }
}

#[test]
fn two_disease_inference() {
    // freqs chosen so the scores are ln(0.8187...) ≈ -0.2 and ln(0.2019...) ≈ -1.6
    let a = (-0.2f64).exp() - 1e-3;
    let b = (-1.6f64).exp() - 1e-3;
    let kb = kb(serde_json::json!({
        "diseases": [{"id": "a", "name": "A"}, {"id": "b", "name": "B"}],
        "findings": [{"id": "f", "name": "F", "kind": "clinical"}],
        "frequencies": [
            {"disease": "a", "finding": "f", "freq": a},
            {"disease": "b", "finding": "f", "freq": b}
        ]
    }));
    let ddx = expert_inference(&kb, &["f"], &[], 5).unwrap();
    assert_abs_diff_eq!(ddx.raw_scores[0], -0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(ddx.raw_scores[1], -1.6, epsilon = 1e-12);
    assert_abs_diff_eq!(ddx.entries[0].p, 0.802_183_888_558_581_8, epsilon = 1e-12);
    assert_abs_diff_eq!(ddx.entries[1].p, 0.197_816_111_441_418_2, epsilon = 1e-12);
}

#[test]
fn all_negative_evidence_matches_brute_force() {
    let doc: KbDocument = serde_json::from_value(serde_json::json!({
        "diseases": [{"id": "a", "name": "A"}, {"id": "b", "name": "B"}],
        "findings": [
            {"id": "c1", "name": "C1", "kind": "clinical"},
            {"id": "c2", "name": "C2", "kind": "clinical"}
        ],
        "frequencies": [
            {"disease": "a", "finding": "c1", "freq": 0.9},
            {"disease": "a", "finding": "c2", "freq": 0.4}
        ]
    }))
    .unwrap();
    let kb = KnowledgeBase::from_document(doc.clone()).unwrap();
    let ddx = expert_inference(&kb, &[] as &[&str], &["c1", "c2"], 2).unwrap();
    let oracle = brute_force_ddx(&doc, &[], &["c1", "c2"], 2);
    assert_eq!(ddx.entries[0].disease, "b");
    for (e, (d, p)) in ddx.entries.iter().zip(&oracle) {
        assert_eq!(&e.disease, d);
        assert_abs_diff_eq!(e.p, *p, epsilon = 1e-12);
    }
}

#[test]
fn exhaustive_expert_oracle_on_random_kbs() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let doc = random_kb_doc(&mut r, 4, 6, 2);
        let kb = KnowledgeBase::from_document(doc.clone()).unwrap();
        let ids: Vec<String> = doc.findings.iter().map(|f| f.id.clone()).collect();
        for (pos, neg) in all_assignments(&ids) {
            for k in [1, 2, 4] {
                let oracle = brute_force_ddx(&doc, &pos, &neg, k);
                match expert_inference(&kb, &pos, &neg, k) {
                    Ok(ddx) => {
                        let got: Vec<&str> = ddx.entries.iter().map(|e| e.disease.as_str()).collect();
                        let want: Vec<&str> = oracle.iter().map(|(d, _)| d.as_str()).collect();
                        assert_eq!(got, want, "pos {pos:?} neg {neg:?} k {k}");
                        for (e, (_, p)) in ddx.entries.iter().zip(&oracle) {
                            assert!((e.p - p).abs() <= 1e-12);
                        }
                    }
                    Err(_) => assert!(oracle.is_empty()),
                }
            }
        }
    }
}

#[test]
fn simulated_label_argmax() {
    let ddx = normalize_ddx(&[("pneumonia", 0.9537), ("influenza", 0.0288), ("sinusitis", 0.0175)]).unwrap();
    let case = ClinicalCase {
        id: "c".into(),
        pos: BTreeSet::new(),
        neg: BTreeSet::new(),
        ddx,
        source: CaseSource::ExpertSim,
        seed_disease: None,
    };
    assert_eq!(truth_label(&case).unwrap(), "pneumonia");
}

#[test]
#[allow(clippy::approx_constant)]
fn kl_hand_cases() {
    assert_abs_diff_eq!(kl_loss(&[1.0, 0.0], &[0.5f64.ln(), 0.5f64.ln()]), 0.693_147, epsilon = 1e-6);
    let v = kl_loss(&[0.5, 0.5], &[0.75f64.ln(), 0.25f64.ln()]);
    assert_abs_diff_eq!(v, 0.143_841, epsilon = 1e-6);
    assert_abs_diff_eq!(v, kl_oracle(&[0.5, 0.5], &[0.75f64.ln(), 0.25f64.ln()]), epsilon = 1e-15);
}

#[test]
fn finite_difference_single_case() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (p, batch) = random_small_model(&mut r);
        let (worst, _) = gradient_check(&p, &batch[..1], 1e-4);
        assert!(worst < 1e-4, "relative error {worst}");
    }
}

#[test]
fn adam_two_unit_steps() {
    let cases = ddx::dataset::read_cases(
        r#"{"id":"1","pos":["a"],"neg":[],"ddx":[{"disease":"x","p":1.0}],"source":"vignette"}"#,
    )
    .unwrap();
    let v = build_vocabulary(&[&cases], None, None).unwrap();
    let mut p = init_parameters(&v, 2, 0, None).unwrap();
    for i in 0..p.weights.len() {
        p.weights.set(i, 0.0);
    }
    let mut g = Tensors::zeros(p.dims);
    for i in 0..g.len() {
        g.set(i, 1.0);
    }
    let cfg = TrainConfig::default();
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &g, &mut s, &cfg);
    let first = p.weights.get(0);
    adam_step(&mut p, &g, &mut s, &cfg);
    let second = p.weights.get(0);
    // bias-corrected moments are exactly 1 after each unit step
    assert_abs_diff_eq!(first, -0.01 / (1.0 + 1e-8), epsilon = 1e-15);
    assert_abs_diff_eq!(second, -0.02 / (1.0 + 1e-8), epsilon = 1e-15);
    assert!(second < first);
}

#[test]
fn mask_bounds_impossible_disease() {
    let kb = separable_kb(&SeparableKbSpec { diseases: 10, sex_specific: 0.6, seed: 2, ..Default::default() });
    let cases = CaseSet::new(
        simulate_dataset(&kb, &SimConfig { cases_total: 100, min_cases_per_disease: 10, ..Default::default() })
            .unwrap(),
    )
    .unwrap();
    let v = build_vocabulary(&[&cases], Some(&kb), None).unwrap();
    let p = init_parameters(&v, 16, 1, Some(&kb)).unwrap();
    let male = v.finding_index("male").unwrap();
    let x = ddx::model::ModelInput { demo: vec![v.demographic_slot(male).unwrap()], ..Default::default() };
    let out = forward(&p, &x, Mode::Infer).unwrap();
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut masked = 0;
    for (j, d) in v.diseases().iter().enumerate() {
        if kb.frequency(d, "male").unwrap() == 0.0 {
            masked += 1;
            assert!((out[j] - max).exp() <= 1e-12);
        }
    }
    assert!(masked > 0);
}

#[test]
fn simulator_inclusion_rates() {
    let kb = kb(serde_json::json!({
        "diseases": [{"id": "d", "name": "D"}],
        "findings": [
            {"id": "a", "name": "A", "kind": "clinical"},
            {"id": "b", "name": "B", "kind": "clinical"},
            {"id": "c", "name": "C", "kind": "clinical"},
            {"id": "e", "name": "E", "kind": "clinical"},
            {"id": "g", "name": "G", "kind": "clinical"}
        ],
        "frequencies": [
            {"disease": "d", "finding": "a", "freq": 0.9},
            {"disease": "d", "finding": "b", "freq": 0.5},
            {"disease": "d", "finding": "c", "freq": 0.3},
            {"disease": "d", "finding": "e", "freq": 0.05},
            {"disease": "d", "finding": "g", "freq": 0.05}
        ]
    }));
    let cfg = SimConfig::default();
    let n = 10_000;
    let (mut pos_a, mut neg_e) = (0, 0);
    for i in 0..n {
        let c = simulate_case(&kb, "d", &mut rng::stream(5, i), &cfg).unwrap();
        pos_a += usize::from(c.pos.contains("a"));
        neg_e += usize::from(c.neg.contains("e"));
        assert!(!c.pos.contains("e"));
    }
    let rate_a = pos_a as f64 / n as f64;
    let rate_e = neg_e as f64 / n as f64;
    assert!((0.87..=0.93).contains(&rate_a), "{rate_a}");
    assert!((0.22..=0.28).contains(&rate_e), "{rate_e}");
}

#[test]
fn expert_engine_on_its_own_simulations() {
    let kb = separable_kb(&SeparableKbSpec::default());
    let cases = CaseSet::new(simulate_dataset(&kb, &SimConfig::default()).unwrap()).unwrap();
    let engine = ExpertDiagnoser { kb: &kb, k: 5 };
    let r = evaluate(&engine, "expert", &cases, &[3], TruthMode::SeedDisease, None, Execution::Sequential).unwrap();
    assert!(r.accuracy[&3] >= 0.95, "{:?}", r.accuracy);

    let with_seed = cases
        .cases
        .iter()
        .filter(|c| c.ddx.contains(c.seed_disease.as_deref().unwrap()))
        .count();
    assert!(with_seed as f64 >= 0.95 * cases.len() as f64);
}

#[test]
fn separable_toy_model_generalizes() {
    let kb = separable_kb(&SeparableKbSpec { seed: 5, ..Default::default() });
    let cases = CaseSet::new(
        simulate_dataset(&kb, &SimConfig { seed: 5, ..Default::default() }).unwrap(),
    )
    .unwrap();
    let (tr, te) = split_train_test(&cases, 0.7, 5).unwrap();
    let v = build_vocabulary(&[&tr], Some(&kb), None).unwrap();
    let p0 = init_parameters(&v, 32, 5, Some(&kb)).unwrap();
    let cfg = TrainConfig { batch_size: 64, epochs: 10, seed: 5, ..Default::default() };
    let (p, _) = train(p0, &tr, &cfg, None).unwrap();
    let r = evaluate_model(&p, &te, &[1], TruthMode::SeedDisease, None, Execution::Parallel).unwrap();
    assert!(r.accuracy[&1] >= 0.9, "{:?}", r.accuracy);
}

#[test]
fn random_kl_is_nonnegative_and_matches_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let n = r.gen_range(1..8);
        let p = random_distribution(&mut r, n);
        let q = random_distribution(&mut r, n);
        let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        let v = kl_loss(&p, &lq);
        let oracle = kl_oracle(&p, &lq);
        if oracle.is_finite() {
            assert!(v >= -1e-12);
            assert_abs_diff_eq!(v, oracle, epsilon = 1e-9);
        }
    }
}

/// Full-scale run: 65k simulated cases at the default model size. Slow; run with
/// `cargo test --release -- --ignored`.
#[test]
#[ignore]
fn full_scale_training_runs_to_completion() {
    let kb = separable_kb(&SeparableKbSpec::default());
    let cases = CaseSet::new(
        simulate_dataset(&kb, &SimConfig { cases_total: 65_000, seed: 1, ..Default::default() }).unwrap(),
    )
    .unwrap();
    let v = build_vocabulary(&[&cases], Some(&kb), None).unwrap();
    let p0 = init_parameters(&v, 1024, 1, Some(&kb)).unwrap();
    let cfg = TrainConfig { seed: 1, ..Default::default() };
    let (p, history) = train(p0, &cases, &cfg, None).unwrap();
    assert_eq!(history.epochs.len(), 15);
    assert!(p.weights.all_finite());
}
