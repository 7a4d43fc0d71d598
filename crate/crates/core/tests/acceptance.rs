//! The acceptance gate. One test per criterion, each finishing with a
//! single pass line; tolerances are pinned in the assertions.
//!
//!  1. retrieval equals a brute-force cosine oracle, exactly
//!  2. end-to-end loss gradients match finite differences
//!  3. prototype assignment and weighting identities
//!  4. the usage regularizer spreads batch-mean assignments
//!  5. retrieval lifts AUROC on a planted long-range signal
//!  6. chunking geometry invariants, all four strategies
//!  7. masking rate and corruption mix statistics
//!  8. ranking metrics equal brute-force oracles, exhaustively
//!  9. no retrieved chunk or query token leaks the label
//! 10. the full pipeline is bit-reproducible per seed

use std::time::{Duration, Instant};

use rand::Rng;

use ragline::chunker::{chunk_history, ChunkParams, ChunkStrategy};
use ragline::digest::{sha256_file, sha256_hex};
use ragline::encoder::masking::{plan_masking, MaskAction};
use ragline::encoder::{SequenceEncoderConfig, TokenInput};
use ragline::fusion::train::{batch_loss_and_grads, forward_example, score_examples, train, TrainConfig};
use ragline::index::build_index;
use ragline::metrics::{auprc, auroc, bootstrap_ci, metric_report, MetricKind};
use ragline::model::{toy_config, save_model, ModelState};
use ragline::pipeline::{prepare_examples, ChunkEvidence, PreparedExample};
use ragline::prototypes::{align, entropy, weigh, AssignKind, PrototypeBank};
use ragline::rng::{derive_seed, rng_from_seed};
use ragline::tasks::{generate, split_patients, SyntheticConfig, TaskName, TaskSpec};
use ragline::timeline::{
    build_timeline, split_query_history, vocab, CareStage, EventType, PatientTimeline, RawEvent,
    TimeDeltaScaler, Vocabulary,
};

fn pass(n: u32, what: &str, detail: String) {
    println!("criterion {n:2} ({what}): PASS [{detail}]");
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn cohort(patients: usize, seed: u64) -> ragline::tasks::SyntheticDataset {
    generate(&SyntheticConfig {
        patients,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn histories(data: &ragline::tasks::SyntheticDataset) -> Vec<(String, Vec<ragline::timeline::TimelineEvent>)> {
    data.patients
        .iter()
        .map(|p| (p.timeline.patient_id.clone(), p.timeline.events.clone()))
        .collect()
}

fn timelines(data: &ragline::tasks::SyntheticDataset) -> Vec<PatientTimeline> {
    data.patients.iter().map(|p| p.timeline.clone()).collect()
}

/// Raw event stream for the chunking sweep: static prefix, then visits
/// with random stages, inter-visit gaps, and event spacings.
fn random_raw_stream(rng: &mut impl Rng) -> Vec<RawEvent> {
    let mut events = Vec::new();
    for i in 0..rng.gen_range(0..3) {
        events.push(RawEvent {
            code: format!("STATIC//{i}"),
            value: None,
            time: None,
            stage: CareStage::Static,
            event_type: EventType::StaticDemo,
        });
    }
    let stages = [CareStage::Outp, CareStage::Ed, CareStage::Hosp, CareStage::Icu];
    let mut t = 1_000_000i64;
    for _ in 0..rng.gen_range(1..6) {
        t += rng.gen_range(60..600_000);
        let stage = stages[rng.gen_range(0..stages.len())];
        for _ in 0..rng.gen_range(1..12) {
            t += rng.gen_range(1..120);
            events.push(RawEvent {
                code: format!("EV//{}", rng.gen_range(0..10)),
                value: (t % 3 == 0).then(|| (t % 17) as f64),
                time: Some(t),
                stage,
                event_type: EventType::Lab,
            });
        }
    }
    events
}

// ---------------------------------------------------------------------------
// 1. Retrieval oracle equivalence

#[test]
fn c01_retrieval_matches_brute_force_oracle() {
    let t0 = Instant::now();
    let data = cohort(200, 41);
    let state = ModelState::init(toy_config(16, data.vocabulary.len(), 8, 8), 41).unwrap();
    let scaler = TimeDeltaScaler::new(525_600);
    let params = ChunkParams {
        size: 16,
        overlap: 4,
        window_minutes: 360,
    };
    let (index, stats) = build_index(
        &histories(&data),
        ChunkStrategy::Event,
        &params,
        &state.tables,
        &state.backbone,
        &scaler,
        "acceptance",
    )
    .unwrap();
    assert_eq!(stats.patients, 200);

    let d = state.config.d;
    let mut rng = rng_from_seed(4101);
    let mut compared = 0usize;
    for p in &data.patients {
        let pid = &p.timeline.patient_id;
        let n_events = p.timeline.events.len();
        for q in 0..5 {
            let mut query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
            query.iter_mut().for_each(|x| *x /= norm);
            // Alternate full visibility with a random cutoff.
            let cutoff = if q % 2 == 0 {
                n_events
            } else {
                rng.gen_range(0..=n_events)
            };
            let m = 24;

            let got = index.search(pid, &query, cutoff, m);

            // Brute force: rescore every stored vector from scratch with
            // the documented rule (descending score, then ascending
            // ordinal) and the same arithmetic.
            let mut all: Vec<(f64, &ragline::chunker::ChunkDescriptor)> = index
                .entries(pid)
                .iter()
                .filter(|e| e.descriptor.end <= cutoff)
                .map(|e| {
                    let v = e.vector();
                    let dot: f64 = v.iter().zip(&query).map(|(&x, &q)| x as f64 * q).sum();
                    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                    (dot * (1.0 / norm), &e.descriptor)
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.ordinal.cmp(&b.1.ordinal)));
            all.truncate(m);

            assert_eq!(got.len(), all.len(), "patient {pid} query {q}: hit count");
            for (hit, (oracle_score, oracle_desc)) in got.iter().zip(&all) {
                assert_eq!(hit.descriptor, *oracle_desc, "patient {pid} query {q}: order");
                assert_eq!(
                    hit.score.to_bits(),
                    oracle_score.to_bits(),
                    "patient {pid} query {q}: score bits"
                );
            }
            compared += got.len();
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    pass(1, "retrieval oracle equivalence", format!("200 patients x 5 queries, {compared} hits compared, {elapsed:.1?}"));
}

// ---------------------------------------------------------------------------
// 2. End-to-end gradient correctness

/// Random training instance at the mandated tiny shape: d=8, 4 prototypes,
/// up to 3 retrieved chunks.
fn tiny_instance(seed: u64) -> (ModelState, PreparedExample) {
    let mut rng = rng_from_seed(seed);
    let vocab_size = 24usize;
    let mut cfg = toy_config(8, vocab_size, 3, 4);
    // Alternate encoder kinds so both backward paths are swept.
    if seed % 2 == 0 {
        cfg.encoder = SequenceEncoderConfig::bag();
    }
    let state = ModelState::init(cfg, seed).unwrap();
    let query: Vec<TokenInput> = (0..rng.gen_range(3..7))
        .map(|i| TokenInput {
            concept_id: rng.gen_range(4..vocab_size as u32),
            numeric_value: (i % 2 == 0).then(|| rng.gen_range(-1.5..1.5)),
            delta_scaled: rng.gen_range(0.0..1.0),
            stage_idx: CareStage::Icu.index(),
            visit_order: rng.gen_range(1..4),
            type_idx: EventType::Lab.index(),
        })
        .collect();
    let n_chunks = if seed % 7 == 0 { 0 } else { rng.gen_range(1..4) };
    let chunks: Vec<ChunkEvidence> = (0..n_chunks)
        .map(|j| ChunkEvidence {
            vector: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            descriptor: ragline::chunker::ChunkDescriptor {
                patient_id: "t".into(),
                strategy: ChunkStrategy::Event,
                start: j * 4,
                end: j * 4 + 4,
                ordinal: j as u32,
            },
            score: 1.0 - j as f64 * 0.1,
            visit_order: 1,
            care_stage: CareStage::Hosp,
        })
        .collect();
    let example = PreparedExample {
        patient_id: "t".into(),
        label: (seed % 3 == 0) as u8,
        query,
        chunks,
    };
    (state, example)
}

#[test]
fn c02_loss_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let lambda_u = 0.005;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for instance in 0..100u64 {
        let (model, example) = tiny_instance(1000 + instance);
        let mut grads = model.zeros_like();
        let batch = [&example];
        batch_loss_and_grads(&model, &batch, lambda_u, &mut grads).unwrap();

        let mut probe = model.clone();
        let loss_at = |m: &ModelState| -> f64 {
            let mut scratch = m.zeros_like();
            batch_loss_and_grads(m, &[&example], lambda_u, &mut scratch)
                .unwrap()
                .loss
        };
        let names: Vec<String> = model.tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            if name.starts_with("mlm/") {
                continue; // not part of the supervised loss
            }
            let len = model
                .tensors()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data.len())
                .unwrap();
            // Probe a spread of coordinates in each tensor.
            let step = (len / 3).max(1);
            for idx in (0..len).step_by(step) {
                let theta = model
                    .tensors()
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.data[idx])
                    .unwrap();
                let h = 1e-5 * (1.0 + theta.abs());
                let set = |m: &mut ModelState, v: f64| {
                    for (n, t) in m.tensors_mut() {
                        if &n == name {
                            t.data[idx] = v;
                        }
                    }
                };
                set(&mut probe, theta + h);
                let up = loss_at(&probe);
                set(&mut probe, theta - h);
                let down = loss_at(&probe);
                set(&mut probe, theta);
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads
                    .tensors()
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.data[idx])
                    .unwrap();
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    rel <= 1e-5,
                    "instance {instance} {name}[{idx}]: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
                );
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    pass(2, "end-to-end gradient correctness", format!("100 instances, {checked} coordinates, worst rel {worst:.2e}, {elapsed:.1?}"));
}

// ---------------------------------------------------------------------------
// 3. Prototype math identities

#[test]
fn c03_prototype_identities() {
    // One-hot construction: widely separated prototypes and a far-out
    // input make the softmax exactly one-hot in floating point.
    let mut rng = rng_from_seed(3);
    let l = 4;
    let d = 4;
    let mut bank = PrototypeBank::with_defaults(l, d, &mut rng).unwrap();
    for (_, t) in bank.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = 0.0;
        }
        for i in 0..l {
            t.data[i * d + i] = 10.0;
        }
    }
    let mut x = vec![0.0; d];
    x[2] = 1000.0;
    let q = bank.assign(&x, AssignKind::Query);
    let h = bank.assign(&x, AssignKind::Query);
    assert_eq!(q.probs[2], 1.0, "construction failed to reach one-hot");
    let alpha = align(&q, &h);
    assert!(alpha.abs() <= 1e-12, "one-hot self-alignment {alpha}");

    // Uniform/uniform at two prototype counts: alpha = ln L exactly.
    for l in [4usize, 7] {
        let mut rng = rng_from_seed(l as u64);
        let bank = PrototypeBank::with_defaults(l, d, &mut rng).unwrap();
        let q = bank.assign(&[0.0; 4], AssignKind::Query);
        let h = bank.assign(&[0.0; 4], AssignKind::Query);
        let alpha = align(&q, &h);
        assert!(
            (alpha - (l as f64).ln()).abs() <= 1e-12,
            "uniform alignment L={l}: {alpha}"
        );
    }

    // Gibbs bound on 1000 random pairs: alpha >= H(pi_q), equality only
    // at matching distributions.
    let mut rng = rng_from_seed(31);
    let bank = PrototypeBank::with_defaults(12, 6, &mut rng).unwrap();
    let mut sum_checked = 0usize;
    for _ in 0..1000 {
        let xq: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xh: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = bank.assign(&xq, AssignKind::Query);
        let h = bank.assign(&xh, AssignKind::Query);
        let s: f64 = q.probs.iter().sum();
        assert!((s - 1.0).abs() <= 1e-9, "probs sum {s}");
        sum_checked += 1;

        let alpha = align(&q, &h);
        let hq = entropy(&q.probs);
        assert!(alpha >= hq - 1e-9, "Gibbs bound: {alpha} < {hq}");
        let l1: f64 = q.probs.iter().zip(&h.probs).map(|(a, b)| (a - b).abs()).sum();
        if l1 > 1e-3 {
            // Pinsker: KL >= l1^2/2 >= 5e-7, comfortably above tolerance.
            assert!(alpha - hq > 1e-9, "distinct pair at equality: l1 {l1}");
        }
        // Equality at identical distributions.
        let self_alpha = align(&q, &q);
        assert!((self_alpha - hq).abs() <= 1e-9);
    }

    // Selection weights: sum to one, anti-monotone in alpha.
    let mut rng = rng_from_seed(32);
    for _ in 0..200 {
        let n = rng.gen_range(2..9);
        let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let w = weigh(&alphas, 0.15);
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() <= 1e-9);
        let k = rng.gen_range(0..n);
        let mut bumped = alphas.clone();
        bumped[k] += rng.gen_range(0.05..1.0);
        let wb = weigh(&bumped, 0.15);
        assert!(wb[k] < w[k], "weight not anti-monotone in alpha");
    }

    pass(3, "prototype math identities", format!("one-hot, uniform x2, {sum_checked} Gibbs pairs, 200 weight draws"));
}

// ---------------------------------------------------------------------------
// 4. Regularization direction

struct UsageEnd {
    h_qbar: f64,
    max_qbar: f64,
}

fn train_and_measure_usage(lambda_u: f64, seed: u64) -> UsageEnd {
    let data = cohort(300, 1404);
    let tls = timelines(&data);
    let scaler = TimeDeltaScaler::new(525_600);
    let mut cfg = toy_config(16, data.vocabulary.len(), 4, 64);
    cfg.encoder = SequenceEncoderConfig::attention(1, 2);
    let state = ModelState::init(cfg, seed).unwrap();
    let retriever = state.snapshot_retriever();
    let params = ChunkParams {
        size: 32,
        overlap: 8,
        window_minutes: 360,
    };
    let (index, _) = build_index(
        &histories(&data),
        ChunkStrategy::Event,
        &params,
        &retriever.tables,
        &retriever.backbone,
        &scaler,
        "acceptance",
    )
    .unwrap();
    let ids: Vec<String> = tls.iter().map(|t| t.patient_id.clone()).collect();
    let splits = split_patients(&ids, (0.7, 0.15, 0.15), derive_seed(seed, 1)).unwrap();
    let task = TaskSpec::new(TaskName::Ihm48h);
    let (train_set, _) =
        prepare_examples(&tls, &splits.train, &task, 32, &scaler, &retriever, &index, 4).unwrap();
    let (val_set, _) =
        prepare_examples(&tls, &splits.val, &task, 32, &scaler, &retriever, &index, 4).unwrap();

    let outcome = train(
        state,
        &train_set,
        &val_set,
        &TrainConfig {
            max_epochs: 10,
            batch_size: 32,
            lr: 0.05,
            lambda_u,
            patience: 10,
            seed: derive_seed(seed, 2),
        },
    )
    .unwrap();
    assert!(!outcome.diverged);

    // Batch-mean query assignment over the whole training set under the
    // final model.
    let l = 64usize;
    let mut mean = vec![0.0f64; l];
    for ex in &train_set {
        let fwd = forward_example(&outcome.model, ex).unwrap();
        for (m, p) in mean.iter_mut().zip(&fwd.query_assignment.probs) {
            *m += p;
        }
    }
    let n = train_set.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    UsageEnd {
        h_qbar: entropy(&mean),
        max_qbar: mean.iter().cloned().fold(f64::MIN, f64::max),
    }
}

#[test]
fn c04_usage_regularizer_spreads_assignments() {
    let t0 = Instant::now();
    let unreg = train_and_measure_usage(0.0, 77);
    let reg = train_and_measure_usage(0.005, 77);
    assert!(
        reg.h_qbar > unreg.h_qbar,
        "H(qbar): regularized {} vs unregularized {}",
        reg.h_qbar,
        unreg.h_qbar
    );
    assert!(
        reg.max_qbar < unreg.max_qbar,
        "max(qbar): regularized {} vs unregularized {}",
        reg.max_qbar,
        unreg.max_qbar
    );
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    pass(4, "usage regularization direction", format!(
        "L=64: H {:.3} > {:.3}, max {:.4} < {:.4}, {elapsed:.1?}",
        reg.h_qbar, unreg.h_qbar, reg.max_qbar, unreg.max_qbar
    ));
}

// ---------------------------------------------------------------------------
// 5. Planted-signal benefit

fn train_and_eval_auroc(
    data: &ragline::tasks::SyntheticDataset,
    m_retrieved: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let tls = timelines(data);
    let scaler = TimeDeltaScaler::new(525_600);
    let mut cfg = toy_config(16, data.vocabulary.len(), m_retrieved.max(1), 16);
    cfg.m_retrieved = m_retrieved.max(1); // slot capacity; retrieval count below may be 0
    cfg.encoder = SequenceEncoderConfig::attention(1, 2);
    let state = ModelState::init(cfg, seed).unwrap();
    let retriever = state.snapshot_retriever();
    let params = ChunkParams {
        size: 32,
        overlap: 8,
        window_minutes: 360,
    };
    let (index, _) = build_index(
        &histories(data),
        ChunkStrategy::Event,
        &params,
        &retriever.tables,
        &retriever.backbone,
        &scaler,
        "acceptance",
    )
    .unwrap();
    let ids: Vec<String> = tls.iter().map(|t| t.patient_id.clone()).collect();
    let splits = split_patients(&ids, (0.7, 0.15, 0.15), derive_seed(seed, 1)).unwrap();
    let task = TaskSpec::new(TaskName::Ihm48h);
    let prep = |who: &[String]| {
        prepare_examples(&tls, who, &task, 48, &scaler, &retriever, &index, m_retrieved)
            .unwrap()
            .0
    };
    let train_set = prep(&splits.train);
    let val_set = prep(&splits.val);
    let test_set = prep(&splits.test);

    let outcome = train(
        state,
        &train_set,
        &val_set,
        &TrainConfig {
            max_epochs: 40,
            batch_size: 64,
            lr: 0.1,
            lambda_u: 0.005,
            patience: 40,
            seed: derive_seed(seed, 2),
        },
    )
    .unwrap();
    assert!(!outcome.diverged);

    let scores = score_examples(&outcome.model, &test_set).unwrap();
    let labels: Vec<u8> = test_set.iter().map(|e| e.label).collect();
    let point = auroc(&scores, &labels).unwrap();
    let (lo, hi) = bootstrap_ci(
        &scores,
        &labels,
        MetricKind::Auroc,
        1000,
        derive_seed(seed, 3),
    )
    .unwrap();
    (point, lo, hi)
}

#[test]
fn c05_retrieval_beats_query_only_on_planted_signal() {
    let t0 = Instant::now();
    let data = cohort(2000, 1405);
    let (full, full_lo, _full_hi) = train_and_eval_auroc(&data, 12, 55);
    let (ablated, _abl_lo, abl_hi) = train_and_eval_auroc(&data, 0, 55);
    assert!(
        full - ablated >= 0.10,
        "AUROC lift too small: full {full} vs query-only {ablated}"
    );
    assert!(
        full_lo > abl_hi,
        "bootstrap CIs overlap: full low {full_lo} vs ablated high {abl_hi}"
    );
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(900), "took {elapsed:?}");
    pass(5, "planted-signal retrieval benefit", format!(
        "full {full:.3} [{full_lo:.3},..] vs query-only {ablated:.3} [..,{abl_hi:.3}], {elapsed:.1?}"
    ));
}

// ---------------------------------------------------------------------------
// 6. Chunking invariants

#[test]
fn c06_chunking_invariants_hold_over_random_histories() {
    let mut rng = rng_from_seed(6);
    let params = ChunkParams {
        size: 12,
        overlap: 3,
        window_minutes: 360,
    };
    let strategies = [
        ChunkStrategy::Event,
        ChunkStrategy::Time,
        ChunkStrategy::Visit,
        ChunkStrategy::Stage,
    ];
    let mut histories_checked = 0usize;
    for _ in 0..500 {
        let raw = random_raw_stream(&mut rng);
        let mut vocab = Vocabulary::new();
        let tl = build_timeline("p", &raw, &mut vocab).unwrap();
        for strategy in strategies {
            let descs = chunk_history("p", &tl.events, strategy, &params).unwrap();

            // Coverage and contiguity.
            assert_eq!(descs.first().unwrap().start, 0, "{strategy:?}");
            assert_eq!(descs.last().unwrap().end, tl.events.len(), "{strategy:?}");
            for (i, d) in descs.iter().enumerate() {
                assert!(d.start < d.end, "{strategy:?}: empty chunk");
                assert!(d.end - d.start <= params.size, "{strategy:?}: chunk over capacity");
                assert_eq!(d.ordinal as usize, i, "{strategy:?}: ordinal sequence");
            }
            let mut covered = vec![false; tl.events.len()];
            for d in &descs {
                covered[d.start..d.end].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c), "{strategy:?}: coverage hole");

            for w in descs.windows(2) {
                assert!(w[1].start >= w[0].start, "{strategy:?}: unsorted");
                if strategy == ChunkStrategy::Event {
                    // Overlap is exactly O at every boundary.
                    assert_eq!(
                        w[0].end as i64 - w[1].start as i64,
                        params.overlap as i64,
                        "{strategy:?}: overlap"
                    );
                } else {
                    assert!(w[1].start <= w[0].end, "{strategy:?}: gap between chunks");
                }
            }

            // Digest-stable determinism.
            let digest_of = |ds: &[ragline::chunker::ChunkDescriptor]| {
                sha256_hex(format!("{ds:?}").as_bytes())
            };
            let again = chunk_history("p", &tl.events, strategy, &params).unwrap();
            assert_eq!(digest_of(&descs), digest_of(&again), "{strategy:?}: digest unstable");
        }
        histories_checked += 1;
    }
    pass(6, "chunking invariants", format!("{histories_checked} histories x 4 strategies, exact"));
}

// ---------------------------------------------------------------------------
// 7. Masking statistics

#[test]
fn c07_masking_rate_and_mix() {
    let vocab_size = 200u32;
    let mut rng = rng_from_seed(7);
    let mut eligible = 0usize;
    let mut masked = 0usize;
    let (mut to_mask, mut to_random, mut to_keep) = (0usize, 0usize, 0usize);
    let mut seq = 0u64;
    while eligible < 100_000 {
        let ids: Vec<u32> = (0..400).map(|_| rng.gen_range(4..vocab_size)).collect();
        eligible += ids.len();
        let plan = plan_masking(&ids, vocab_size, derive_seed(700, seq));
        masked += plan.targets.len();
        for t in &plan.targets {
            match t.action {
                MaskAction::Mask => to_mask += 1,
                MaskAction::Random(_) => to_random += 1,
                MaskAction::Keep => to_keep += 1,
            }
        }
        seq += 1;
    }
    let rate = masked as f64 / eligible as f64;
    assert!((rate - 0.15).abs() <= 0.005, "mask rate {rate}");
    let m = to_mask as f64 / masked as f64;
    let r = to_random as f64 / masked as f64;
    let k = to_keep as f64 / masked as f64;
    assert!((m - 0.80).abs() <= 0.015, "mask split {m}");
    assert!((r - 0.10).abs() <= 0.015, "random split {r}");
    assert!((k - 0.10).abs() <= 0.015, "keep split {k}");
    pass(7, "masking statistics", format!(
        "{eligible} positions: rate {rate:.4}, mix {m:.3}/{r:.3}/{k:.3}"
    ));
}

// ---------------------------------------------------------------------------
// 8. Metric correctness against brute-force oracles

fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (si, li) in scores.iter().zip(labels) {
        if *li != 1 {
            continue;
        }
        for (sj, lj) in scores.iter().zip(labels) {
            if *lj != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auprc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, &l)| **s >= t && l == 1)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(s, &l)| **s >= t && l == 0)
            .count() as f64;
        let recall = tp / p;
        area += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    area
}

fn check_instance(scores: &[f64], labels: &[u8]) {
    let a = auroc(scores, labels).unwrap();
    let ao = auroc_oracle(scores, labels);
    assert!(
        (a - ao).abs() <= 1e-12,
        "auroc {a} vs oracle {ao} on {scores:?} {labels:?}"
    );
    let p = auprc(scores, labels).unwrap();
    let po = auprc_oracle(scores, labels);
    assert!(
        (p - po).abs() <= 1e-12,
        "auprc {p} vs oracle {po} on {scores:?} {labels:?}"
    );
}

#[test]
fn c08_metrics_match_oracles_exhaustively() {
    let t0 = Instant::now();
    let mut instances = 0usize;

    // Ordered sweep: every score assignment from a three-letter alphabet
    // crossed with every two-class labeling, n <= 7.
    let letters = [0.2, 0.5, 0.8];
    for n in 2..=7usize {
        let mut scores = vec![0.0f64; n];
        for score_code in 0..3usize.pow(n as u32) {
            let mut c = score_code;
            for s in scores.iter_mut() {
                *s = letters[c % 3];
                c /= 3;
            }
            for label_code in 1..(1u32 << n) - 1 {
                let labels: Vec<u8> =
                    (0..n).map(|i| ((label_code >> i) & 1) as u8).collect();
                check_instance(&scores, &labels);
                instances += 1;
            }
        }
    }

    // Multiset sweep to n = 12: metrics see (score, label) pairs through a
    // sort, so score multisets crossed with every labeling cover the
    // remaining sizes; a four-letter alphabet keeps ties dense.
    let letters4 = [0.1, 0.35, 0.6, 0.85];
    for n in 8..=12usize {
        for k0 in 0..=n {
            for k1 in 0..=n - k0 {
                for k2 in 0..=n - k0 - k1 {
                    let k3 = n - k0 - k1 - k2;
                    let mut scores = Vec::with_capacity(n);
                    for (count, letter) in [k0, k1, k2, k3].iter().zip(letters4) {
                        scores.extend(std::iter::repeat(letter).take(*count));
                    }
                    for label_code in 1..(1u32 << n) - 1 {
                        let labels: Vec<u8> =
                            (0..n).map(|i| ((label_code >> i) & 1) as u8).collect();
                        check_instance(&scores, &labels);
                        instances += 1;
                    }
                }
            }
        }
    }

    let elapsed = t0.elapsed();
    pass(8, "metric oracle equivalence", format!("{instances} instances, tol 1e-12, {elapsed:.1?}"));
}

// ---------------------------------------------------------------------------
// 9. No-leakage audit

#[test]
fn c09_no_leakage_into_retrieval_or_query() {
    let data = cohort(400, 1409);
    let tls = timelines(&data);
    let scaler = TimeDeltaScaler::new(525_600);
    let state = ModelState::init(toy_config(16, data.vocabulary.len(), 8, 8), 9).unwrap();
    let retriever = state.snapshot_retriever();
    let params = ChunkParams {
        size: 32,
        overlap: 8,
        window_minutes: 360,
    };
    let (index, _) = build_index(
        &histories(&data),
        ChunkStrategy::Event,
        &params,
        &retriever.tables,
        &retriever.backbone,
        &scaler,
        "acceptance",
    )
    .unwrap();
    let ids: Vec<String> = tls.iter().map(|t| t.patient_id.clone()).collect();
    let splits = split_patients(&ids, (0.7, 0.15, 0.15), 9).unwrap();
    let task = TaskSpec::new(TaskName::Ihm48h);
    let query_len = 48;
    let (test_set, _) = prepare_examples(
        &tls, &splits.test, &task, query_len, &scaler, &retriever, &index, 8,
    )
    .unwrap();
    assert!(!test_set.is_empty());

    // Tokens that would hand the in-hospital-mortality label to the model
    // if they appeared inside the query window.
    let revealing = [
        vocab::MEDS_DEATH,
        vocab::DISCHARGE_FROM_ICU,
        vocab::DISCHARGE_FROM_HOSPITAL,
    ];

    let mut chunks_audited = 0usize;
    let mut tokens_audited = 0usize;
    for ex in &test_set {
        let tl = tls
            .iter()
            .find(|t| t.patient_id == ex.patient_id)
            .unwrap();
        // Recompute the query boundary independently of the pipeline.
        let split = split_query_history(tl, &task, query_len).unwrap();
        for c in &ex.chunks {
            assert!(
                c.descriptor.end <= split.query.start,
                "patient {}: retrieved chunk [{}, {}) reaches query start {}",
                ex.patient_id,
                c.descriptor.start,
                c.descriptor.end,
                split.query.start
            );
            chunks_audited += 1;
        }
        for e in &tl.events[split.query.clone()] {
            assert!(
                !revealing.contains(&e.concept_id),
                "patient {}: label-revealing token {} inside query window",
                ex.patient_id,
                e.concept_id
            );
            tokens_audited += 1;
        }
    }
    pass(9, "no-leakage audit", format!(
        "{} test patients, {chunks_audited} chunks, {tokens_audited} query tokens, zero leaks",
        test_set.len()
    ));
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn pipeline_fingerprint(seed: u64, dir: &std::path::Path) -> (String, String) {
    // gen-data
    let data = cohort(120, seed);
    let tls = timelines(&data);
    let scaler = TimeDeltaScaler::new(525_600);
    let mut cfg = toy_config(16, data.vocabulary.len(), 4, 8);
    cfg.encoder = SequenceEncoderConfig::attention(1, 2);
    let state = ModelState::init(cfg, derive_seed(seed, 1)).unwrap();
    let retriever = state.snapshot_retriever();
    // build-index
    let params = ChunkParams {
        size: 32,
        overlap: 8,
        window_minutes: 360,
    };
    let (index, _) = build_index(
        &histories(&data),
        ChunkStrategy::Event,
        &params,
        &retriever.tables,
        &retriever.backbone,
        &scaler,
        "acceptance",
    )
    .unwrap();
    // train
    let ids: Vec<String> = tls.iter().map(|t| t.patient_id.clone()).collect();
    let splits = split_patients(&ids, (0.7, 0.15, 0.15), derive_seed(seed, 2)).unwrap();
    let task = TaskSpec::new(TaskName::Ihm48h);
    let prep = |who: &[String]| {
        prepare_examples(&tls, who, &task, 32, &scaler, &retriever, &index, 4)
            .unwrap()
            .0
    };
    let train_set = prep(&splits.train);
    let val_set = prep(&splits.val);
    let test_set = prep(&splits.test);
    let outcome = train(
        state,
        &train_set,
        &val_set,
        &TrainConfig {
            max_epochs: 4,
            batch_size: 32,
            lr: 0.05,
            lambda_u: 0.005,
            patience: 4,
            seed: derive_seed(seed, 3),
        },
    )
    .unwrap();
    let ckpt = dir.join("trained.ckpt");
    save_model(&outcome.model, &ckpt).unwrap();
    // eval
    let scores = score_examples(&outcome.model, &test_set).unwrap();
    let labels: Vec<u8> = test_set.iter().map(|e| e.label).collect();
    let report = metric_report(&scores, &labels, 200, derive_seed(seed, 4)).unwrap();
    let metrics_json = serde_json::to_string(&report).unwrap();
    (metrics_json, sha256_file(&ckpt).unwrap())
}

#[test]
fn c10_pipeline_is_deterministic_per_seed() {
    let t0 = Instant::now();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (json_a, digest_a) = pipeline_fingerprint(1410, dir_a.path());
    let (json_b, digest_b) = pipeline_fingerprint(1410, dir_b.path());
    assert_eq!(json_a, json_b, "metric JSON differs between runs");
    assert_eq!(digest_a, digest_b, "checkpoint digest differs between runs");
    let elapsed = t0.elapsed();
    pass(10, "pipeline determinism", format!(
        "metrics {} bytes identical, checkpoint {digest_a}, {elapsed:.1?}",
        json_a.len()
    ));
}
