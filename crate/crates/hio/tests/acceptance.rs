//! End-to-end acceptance gate. Each criterion prints one PASS/FAIL line;
//! run with `cargo test --test acceptance -- --nocapture` to see them.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hio::dataset::{gen_synthetic, split_folds, SyntheticConfig};
use hio::features::{
    pool_temporal, ternary_label, tokenize, welch_t_test, FrameSequence, TernaryClass,
    TfidfVocabulary,
};
use hio::harness::{
    compare_variants, run_cv, Comparison, DatasetSource, ExperimentConfig, ModelVariant,
};
use hio::hierarchy::{
    compose, end_to_end_step, hio_step, AcceptableErrorRate, GateConfig, HierModel,
    IntermediateTask, TrainerState, TraitSet,
};
use hio::nn::{Activation, Mlp, TrainConfig};

/// Frozen regression values from the verified reference run
/// (default synthetic dataset, n = 1000, seed 42, 10 folds, full-batch SGD,
/// lr 1e-3 / pretrain lr 2e-3, 200 epochs each, epsilon 1.0, last-accepted
/// reference on validation data, 100 selected features).
const FROZEN_LATE_FUSION: f64 = 0.7240;
const FROZEN_STACKING: f64 = 0.7340;
const FROZEN_HIO: f64 = 0.7460;
const FROZEN_HIO_SEMI: f64 = 0.7520;
const REGRESSION_TOL: f64 = 0.01; // one percentage point

fn criterion(n: u32, desc: &str, f: impl FnOnce() + std::panic::UnwindSafe) {
    match std::panic::catch_unwind(f) {
        Ok(()) => println!("criterion {n} ({desc}): PASS"),
        Err(e) => {
            println!("criterion {n} ({desc}): FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

fn reference_config(variant: ModelVariant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        DatasetSource::Synthetic(SyntheticConfig::default()),
        variant,
    );
    cfg.pretrain.learning_rate = 2e-3;
    cfg
}

/// The expensive three-variant comparison, shared across criteria 4 and 6.
fn reference_comparison() -> &'static Comparison {
    static CMP: OnceLock<Comparison> = OnceLock::new();
    CMP.get_or_init(|| {
        compare_variants(&[
            reference_config(ModelVariant::LateFusionBaseline),
            reference_config(ModelVariant::Stacking),
            reference_config(ModelVariant::Hio),
        ])
        .expect("reference comparison runs")
    })
}

// ---------------------------------------------------------------------------
// shared small fixtures

fn small_trait_set(n: usize, dim: usize, seed: u64) -> TraitSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(0..3)).collect();
    TraitSet {
        xs,
        passion: labels(&mut rng),
        credibility: labels(&mut rng),
        persuasion: labels(&mut rng),
    }
}

fn small_model(dim: usize, seed: u64) -> HierModel {
    let passion = Mlp::init(&[dim, 4, 3], Activation::ReLU, Activation::Softmax, seed).unwrap();
    let credibility =
        Mlp::init(&[dim, 4, 3], Activation::ReLU, Activation::Softmax, seed + 1).unwrap();
    let intermediate =
        Mlp::init(&[dim, 4, 4, 3], Activation::ReLU, Activation::Softmax, seed + 2).unwrap();
    compose(passion, credibility, &intermediate, &[3 + 3 + 4, 5, 3], seed + 3).unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    criterion(1, "analytic gradients match finite differences", || {
        let sizes = [4usize, 5, 3];
        let mlp = Mlp::init(&sizes, Activation::ReLU, Activation::Softmax, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let analytic = mlp.backward(&xs, &labels).unwrap();

        let h = 1e-5;
        for _ in 0..20 {
            let layer = rng.gen_range(0..mlp.layers().len());
            let n_w = mlp.layers()[layer].weights.len();
            let n_b = mlp.layers()[layer].bias.len();
            let idx = rng.gen_range(0..n_w + n_b);
            let probe = |delta: f64| {
                let mut m = mlp.clone();
                if idx < n_w {
                    m.layers_mut()[layer].weights[idx] += delta;
                } else {
                    m.layers_mut()[layer].bias[idx - n_w] += delta;
                }
                m.loss_on(&xs, &labels).unwrap()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let exact = if idx < n_w {
                analytic.layers[layer].0[idx]
            } else {
                analytic.layers[layer].1[idx - n_w]
            };
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "layer {layer} param {idx}: analytic {exact} vs numeric {numeric} (rel {rel})"
            );
        }
    });
}

#[test]
fn criterion_2_revert_exactness() {
    criterion(2, "forced reject restores parameters bit-exactly", || {
        let data = small_trait_set(12, 4, 17);
        let mut model = small_model(4, 19);
        let p_before = model.passion_net.snapshot(0);
        let c_before = model.credibility_net.snapshot(0);
        let head_before = model.head.snapshot(0);

        // An epsilon this small rejects any realistic candidate loss.
        let gate = GateConfig {
            epsilon: AcceptableErrorRate::Finite(1e-12),
            ..GateConfig::default()
        };
        let train = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut state = TrainerState::new(1e-9, 1e-9);
        let decisions =
            hio_step(&mut model, &data.xs, &data.persuasion, &data, &gate, &train, &mut state)
                .unwrap();

        assert_eq!(decisions.len(), 2);
        assert!(decisions.iter().all(|d| !d.accepted));
        assert_eq!(model.passion_net.snapshot(0), p_before);
        assert_eq!(model.credibility_net.snapshot(0), c_before);
        // The non-gated head still took the end-to-end update.
        assert_ne!(model.head.snapshot(0), head_before);
    });
}

#[test]
fn criterion_3_infinite_epsilon_equivalence() {
    criterion(3, "epsilon=inf matches plain end-to-end bit-for-bit", || {
        let data = small_trait_set(20, 4, 23);
        let mut gated = small_model(4, 29);
        let mut plain = gated.clone();

        let gate = GateConfig {
            epsilon: AcceptableErrorRate::Infinite,
            ..GateConfig::default()
        };
        let train = TrainConfig {
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let mut state = TrainerState::new(f64::INFINITY, f64::INFINITY);
        for _ in 0..100 {
            hio_step(&mut gated, &data.xs, &data.persuasion, &data, &gate, &train, &mut state)
                .unwrap();
            end_to_end_step(&mut plain, &data.xs, &data.persuasion, 0.02, false).unwrap();
        }
        assert_eq!(gated.passion_net.snapshot(0), plain.passion_net.snapshot(0));
        assert_eq!(
            gated.credibility_net.snapshot(0),
            plain.credibility_net.snapshot(0)
        );
        assert_eq!(gated.trunk.snapshot(0), plain.trunk.snapshot(0));
        assert_eq!(gated.head.snapshot(0), plain.head.snapshot(0));
        assert!(state.decisions.iter().all(|d| d.accepted));
    });
}

#[test]
fn criterion_4_monotonic_references_and_active_gate() {
    criterion(4, "last-accepted references non-increasing, gate active", || {
        let cmp = reference_comparison();
        let hio_report = cmp
            .reports
            .iter()
            .find(|r| r.config.variant == ModelVariant::Hio)
            .unwrap();
        let mut total_reverts = 0u64;
        for fold_decisions in &hio_report.decisions {
            for task in [IntermediateTask::Passion, IntermediateTask::Credibility] {
                let refs: Vec<f64> = fold_decisions
                    .iter()
                    .filter(|d| d.network == task)
                    .map(|d| d.reference_loss)
                    .collect();
                assert!(!refs.is_empty());
                assert!(
                    refs.windows(2).all(|w| w[1] <= w[0]),
                    "reference loss increased for {task:?}"
                );
            }
            total_reverts += fold_decisions.iter().filter(|d| !d.accepted).count() as u64;
        }
        assert!(total_reverts >= 1, "gate never reverted; it is inactive");
    });
}

#[test]
fn criterion_5_gate_truth_table() {
    criterion(5, "accepted iff candidate <= epsilon * reference", || {
        // Randomized truth table, >= 10,000 cases.
        let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
            cases: 4000,
            ..ProptestConfig::default()
        });
        runner
            .run(
                &(1e-6f64..1e3, 0.0f64..3.0),
                |(reference, ratio)| {
                    let candidate = ratio * reference;
                    for (eps, eps_value) in [
                        (AcceptableErrorRate::Finite(1.0), 1.0),
                        (AcceptableErrorRate::Finite(1.1), 1.1),
                        (AcceptableErrorRate::Infinite, f64::INFINITY),
                    ] {
                        let expected = candidate <= eps_value * reference;
                        prop_assert_eq!(eps.accepts(candidate, reference), expected);
                    }
                    Ok(())
                },
            )
            .unwrap();

        // The same law must hold for decisions actually logged by training.
        let data = small_trait_set(16, 4, 31);
        let mut model = small_model(4, 37);
        let gate = GateConfig {
            epsilon: AcceptableErrorRate::Finite(1.0),
            ..GateConfig::default()
        };
        let train = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let p0 = model.passion_net.loss_on(&data.xs, &data.passion).unwrap();
        let c0 = model
            .credibility_net
            .loss_on(&data.xs, &data.credibility)
            .unwrap();
        let mut state = TrainerState::new(p0, c0);
        for _ in 0..50 {
            hio_step(&mut model, &data.xs, &data.persuasion, &data, &gate, &train, &mut state)
                .unwrap();
        }
        for d in &state.decisions {
            assert_eq!(d.accepted, d.candidate_loss <= 1.0 * d.reference_loss);
        }
    });
}

#[test]
fn criterion_6_hierarchical_benefit() {
    criterion(6, "hio >= stacking >= late fusion, frozen margins", || {
        let cmp = reference_comparison();
        let mean = |v: ModelVariant| {
            cmp.variants
                .iter()
                .find(|s| s.variant == v)
                .unwrap()
                .mean_accuracy
        };
        let late = mean(ModelVariant::LateFusionBaseline);
        let stacking = mean(ModelVariant::Stacking);
        let hio = mean(ModelVariant::Hio);
        assert!(hio >= stacking, "hio {hio} < stacking {stacking}");
        assert!(stacking >= late, "stacking {stacking} < late fusion {late}");
        assert!(
            (late - FROZEN_LATE_FUSION).abs() <= REGRESSION_TOL,
            "late fusion {late} drifted from frozen {FROZEN_LATE_FUSION}"
        );
        assert!(
            (stacking - FROZEN_STACKING).abs() <= REGRESSION_TOL,
            "stacking {stacking} drifted from frozen {FROZEN_STACKING}"
        );
        assert!(
            (hio - FROZEN_HIO).abs() <= REGRESSION_TOL,
            "hio {hio} drifted from frozen {FROZEN_HIO}"
        );
    });
}

#[test]
fn criterion_7_semisupervised_robustness() {
    criterion(7, "2-fold pretraining within 5pp of full pretraining", || {
        let mut cfg = reference_config(ModelVariant::Hio);
        cfg.n_pretrain_folds = Some(2);
        let report = run_cv(&cfg).unwrap();
        assert!(
            (report.mean_accuracy - FROZEN_HIO).abs() <= 0.05,
            "semi-supervised {} vs full {FROZEN_HIO}",
            report.mean_accuracy
        );
        assert!(
            (report.mean_accuracy - FROZEN_HIO_SEMI).abs() <= REGRESSION_TOL,
            "semi-supervised {} drifted from frozen {FROZEN_HIO_SEMI}",
            report.mean_accuracy
        );
    });
}

#[test]
fn criterion_8_pipeline_unit_conformance() {
    criterion(8, "pooling, tf-idf, t-test, label binning exact cases", || {
        // Ternary label boundaries on the 1-7 scale.
        assert_eq!(ternary_label(2.9).unwrap(), TernaryClass::Negative);
        assert_eq!(ternary_label(3.0).unwrap(), TernaryClass::Neutral);
        assert_eq!(ternary_label(5.0).unwrap(), TernaryClass::Neutral);
        assert_eq!(ternary_label(5.1).unwrap(), TernaryClass::Positive);

        // Constant sequence pools to (value, 0, value, value, 0) per dim.
        let seq = FrameSequence::new(vec![vec![2.5, -1.0]; 4]).unwrap();
        assert_eq!(
            pool_temporal(&seq),
            vec![2.5, 0.0, 2.5, 2.5, 0.0, -1.0, 0.0, -1.0, -1.0, 0.0]
        );

        // Toy corpus: tf * (ln(N/df) + 1) with lexicographic vocabulary.
        let corpus: Vec<Vec<String>> = vec![tokenize("a b"), tokenize("b c")];
        let vocab = TfidfVocabulary::fit(&corpus).unwrap();
        let v = vocab.transform(&tokenize("a b"));
        let w = (2.0f64).ln() + 1.0;
        assert!((v[0] - w).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert_eq!(v[2], 0.0);

        // 4-sample Welch oracle: {1,2} vs {3,4} gives t = -2*sqrt(2), df = 2,
        // and the df=2 closed form p = 1 - |t| / sqrt(2 + t^2).
        let (t, df, p) = welch_t_test(&[1.0, 2.0], &[3.0, 4.0]);
        assert!((t + 2.0 * 2.0f64.sqrt()).abs() < 1e-12);
        assert!((df - 2.0).abs() < 1e-12);
        let p_exact = 1.0 - t.abs() / (2.0 + t * t).sqrt();
        assert!((p - p_exact).abs() < 1e-9, "p {p} vs closed form {p_exact}");
    });
}

#[test]
fn criterion_9_determinism_and_speaker_disjointness() {
    criterion(9, "byte-identical reports, speaker-disjoint folds", || {
        let mut cfg = ExperimentConfig::new(
            DatasetSource::Synthetic(SyntheticConfig {
                n_samples: 120,
                n_speakers: 24,
                modality_widths: vec![6, 6, 6],
                ..SyntheticConfig::default()
            }),
            ModelVariant::Hio,
        );
        cfg.n_folds = 4;
        cfg.train.epochs = 10;
        cfg.pretrain.epochs = 10;
        let a = run_cv(&cfg).unwrap().canonical_json();
        let b = run_cv(&cfg).unwrap().canonical_json();
        assert_eq!(a.as_bytes(), b.as_bytes());

        let ds = gen_synthetic(&SyntheticConfig {
            n_samples: 200,
            n_speakers: 40,
            modality_widths: vec![4],
            ..SyntheticConfig::default()
        })
        .unwrap();
        for seed in 0..1000u64 {
            let plan = split_folds(&ds, 5, seed).unwrap();
            let mut speaker_fold = std::collections::BTreeMap::new();
            for s in ds.samples() {
                let fold = plan.fold_of(&s.sample_id).unwrap();
                let prior = speaker_fold.entry(s.speaker_id.clone()).or_insert(fold);
                assert_eq!(
                    *prior, fold,
                    "speaker {} split across folds (seed {seed})",
                    s.speaker_id
                );
            }
        }
    });
}
