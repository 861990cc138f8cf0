use metatpp_autograd::Rng;
use metatpp_core::eval::{
    binned_counts, bootstrap, evaluate, evaluate_stats, imputation_eval, naive_predictions,
    naive_report, naive_stats, total, EvalOptions, MetricReport, SeqStats,
};
use metatpp_core::synth::generate_poisson;
use metatpp_core::{Dataset, EventSequence, Model, ModelConfig, Variant};
use proptest::prelude::*;

#[test]
fn naive_worked_example() {
    let ds = Dataset::new(
        "w",
        1,
        vec![EventSequence::new("a", vec![0.0, 1.0, 3.0, 6.0])],
    );
    let st = total(&naive_stats(&ds));
    assert_eq!(st.n_rmse, 2);
    assert!((st.rmse().unwrap() - 1.625f64.sqrt()).abs() < 1e-12);
}

fn brute_median(gaps: &[f64]) -> f64 {
    let mut v = gaps.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn naive_matches_sorting_oracle() {
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let len = 2 + rng.below(40);
        let mut t = 0.0;
        let times: Vec<f64> = (0..len)
            .map(|_| {
                t += rng.exponential(0.7) + 1e-6;
                t
            })
            .collect();
        let s = EventSequence::new("r", times.clone());
        let got = naive_predictions(&s);
        assert_eq!(got.len(), len.saturating_sub(2));
        for (k, (pred, target)) in got.iter().enumerate() {
            let l = k + 1;
            let gaps: Vec<f64> = (1..=l).map(|i| times[i] - times[i - 1]).collect();
            assert!((pred - brute_median(&gaps)).abs() < 1e-12);
            assert!((target - (times[l + 1] - times[l])).abs() < 1e-12);
        }
    }
}

#[test]
fn naive_report_has_no_likelihood() {
    let ds = generate_poisson(20, 2.0, 10.0, 1, 3);
    let r = naive_report(&ds, 50, 2);
    assert!(r.nll_mean.is_none() && r.rmse_mean.is_some());
    assert_eq!(r.n_resamples, 50);
}

fn stats_from(values: &[(f64, usize)]) -> Vec<SeqStats> {
    values
        .iter()
        .map(|&(sq, n)| SeqStats {
            sq_err: sq,
            n_rmse: n,
            nll: sq * 0.5,
            n_nll: n,
            ..Default::default()
        })
        .collect()
}

#[test]
fn bootstrap_is_seeded_and_centered() {
    let mut rng = Rng::new(4);
    let vals: Vec<(f64, usize)> = (0..60)
        .map(|_| (rng.uniform_range(0.0, 5.0), 1 + rng.below(9)))
        .collect();
    let stats = stats_from(&vals);
    let a = bootstrap(&stats, 200, 9);
    assert_eq!(a, bootstrap(&stats, 200, 9));
    assert_ne!(a, bootstrap(&stats, 200, 10));
    let plain = total(&stats).mean_nll().unwrap();
    let nll = a.nll.unwrap();
    assert!(
        (nll.mean - plain).abs() < 2.0 * nll.std,
        "{} vs {plain}",
        nll.mean
    );
    assert!(nll.std > 0.0);
}

#[test]
fn single_sequence_bootstrap_is_its_metric() {
    let stats = stats_from(&[(3.0, 4)]);
    let b = bootstrap(&stats, 1, 0);
    assert_eq!(b.rmse.unwrap().mean, (3.0f64 / 4.0).sqrt());
    assert_eq!(b.rmse.unwrap().std, 0.0);
}

proptest! {
    #[test]
    fn binned_counts_conserve_events(
        target in proptest::collection::vec(0.0f64..50.0, 0..40),
        predicted in proptest::collection::vec(0.0f64..60.0, 0..40),
        width in 0.5f64..7.0,
    ) {
        let rows = binned_counts(&target, &predicted, width);
        prop_assert_eq!(rows.iter().map(|r| r.target_count).sum::<usize>(), target.len());
        prop_assert_eq!(rows.iter().map(|r| r.predicted_count).sum::<usize>(), predicted.len());
        for (i, r) in rows.iter().enumerate() {
            prop_assert!((r.bin_start - i as f64 * width).abs() < 1e-9);
        }
    }
}

fn tiny(variant: Variant) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        latent_hidden: 6,
        dec_hidden: 6,
        components: 2,
        ..ModelConfig::for_variant(variant, 1)
    };
    Model::new(cfg, 1).unwrap()
}

#[test]
fn evaluation_is_reproducible_and_chunk_invariant() {
    let ds = generate_poisson(6, 1.5, 8.0, 1, 5);
    let model = tiny(Variant::MetaVi);
    let opts = EvalOptions {
        samples: 12,
        chunk: 12,
        seed: 3,
    };
    let a = evaluate(&model, &ds, &opts, 30).unwrap();
    assert_eq!(a, evaluate(&model, &ds, &opts, 30).unwrap());
    let chunked = evaluate(
        &model,
        &ds,
        &EvalOptions {
            chunk: 5,
            ..opts.clone()
        },
        30,
    )
    .unwrap();
    assert!((a.nll.unwrap() - chunked.nll.unwrap()).abs() < 1e-10);
    assert!((a.rmse.unwrap() - chunked.rmse.unwrap()).abs() < 1e-10);
    assert_eq!(a.m, 12);
    assert_eq!(a.events, ds.num_events() - ds.len());
}

#[test]
fn deterministic_variants_ignore_sample_count() {
    let ds = generate_poisson(4, 1.5, 8.0, 1, 6);
    let model = tiny(Variant::CondMeta);
    let one = evaluate_stats(
        &model,
        &ds,
        &EvalOptions {
            samples: 1,
            chunk: 32,
            seed: 0,
        },
    )
    .unwrap();
    let many = evaluate_stats(
        &model,
        &ds,
        &EvalOptions {
            samples: 64,
            chunk: 32,
            seed: 5,
        },
    )
    .unwrap();
    assert_eq!(one, many);
}

#[test]
fn marked_data_reports_accuracy() {
    let ds = generate_poisson(5, 1.5, 8.0, 3, 2);
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        dec_hidden: 6,
        components: 2,
        ..ModelConfig::for_variant(Variant::ThpPlus, 3)
    };
    let model = Model::new(cfg, 0).unwrap();
    let r = evaluate(
        &model,
        &ds,
        &EvalOptions {
            samples: 1,
            ..Default::default()
        },
        20,
    )
    .unwrap();
    let acc = r.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn imputation_covers_dropped_events() {
    let ds = generate_poisson(5, 2.0, 10.0, 1, 7);
    let model = tiny(Variant::AttentiveVi);
    let opts = EvalOptions {
        samples: 4,
        chunk: 4,
        seed: 1,
    };
    let r = imputation_eval(&model, &ds, 0.3, &opts, 20).unwrap();
    assert!(r.rmse.unwrap() > 0.0);
    assert!(r.nll.is_none());
    assert_eq!(r, imputation_eval(&model, &ds, 0.3, &opts, 20).unwrap());
}

#[test]
fn report_json_field_names() {
    let r = MetricReport::from_stats("v", "d", &stats_from(&[(1.0, 2)]), 3, 4, 256);
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in [
        "variant",
        "dataset",
        "rmse_mean",
        "rmse_std",
        "nll_mean",
        "nll_std",
        "acc_mean",
        "acc_std",
        "n_resamples",
        "seed",
        "M",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
}
