use metatpp_core::checkpoint;
use metatpp_core::eval::{eval_nll, evaluate, EvalOptions};
use metatpp_core::synth::generate_poisson;
use metatpp_core::train::{grid_search, train, write_history, TrainConfig};
use metatpp_core::{Error, ModelConfig, Variant};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        latent_hidden: 6,
        dec_hidden: 8,
        components: 2,
        ..ModelConfig::for_variant(variant, 1)
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        train_samples: 2,
        val_samples: 2,
        max_epochs: 6,
        patience: 3,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_improves_and_restores_best() {
    let train_set = generate_poisson(16, 2.0, 10.0, 1, 1);
    let val_set = generate_poisson(6, 2.0, 10.0, 1, 2);
    for v in [Variant::ThpPlus, Variant::MetaVi, Variant::AttentiveMc] {
        let cfg = tiny(v);
        let start = metatpp_core::Model::new(cfg.clone(), 3).unwrap();
        let before = eval_nll(&start, &val_set, 2, 3).unwrap();
        let mut seen = 0;
        let out = train(&cfg, &quick(3), &train_set, &val_set, |_| seen += 1).unwrap();
        assert_eq!(seen, out.history.len());
        assert!(
            out.best_val_nll < before,
            "{v}: {} vs {before}",
            out.best_val_nll
        );
        let best = out
            .history
            .iter()
            .map(|r| r.val_nll)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, out.best_val_nll);
        let again = eval_nll(&out.model, &val_set, 2, 3).unwrap();
        assert!((again - out.best_val_nll).abs() < 1e-12);
    }
}

#[test]
fn training_is_reproducible() {
    let train_set = generate_poisson(8, 2.0, 6.0, 1, 1);
    let val_set = generate_poisson(3, 2.0, 6.0, 1, 2);
    let cfg = tiny(Variant::AttentiveVi);
    let a = train(&cfg, &quick(5), &train_set, &val_set, |_| {}).unwrap();
    let b = train(&cfg, &quick(5), &train_set, &val_set, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
}

#[test]
fn huge_learning_rate_reports_divergence_with_partial_weights() {
    let train_set = generate_poisson(8, 2.0, 6.0, 1, 1);
    let val_set = generate_poisson(3, 2.0, 6.0, 1, 2);
    let cfg = TrainConfig {
        lr: 1e12,
        max_epochs: 20,
        patience: 20,
        ..quick(0)
    };
    match train(&tiny(Variant::ThpPlus), &cfg, &train_set, &val_set, |_| {}) {
        Err(d) => {
            assert!(matches!(
                d.error,
                Error::Diverged { .. }
                    | Error::NonFinite { .. }
                    | Error::Tensor(_)
                    | Error::Optim(_)
            ));
            assert!(d
                .partial
                .model
                .params
                .values()
                .iter()
                .all(|a| a.iter().all(|v| v.is_finite())));
        }
        Ok(out) => assert!(out.best_val_nll.is_finite()),
    }
}

#[test]
fn rejects_empty_sets_and_bad_config() {
    let train_set = generate_poisson(4, 2.0, 6.0, 1, 1);
    let empty = train_set.subset("e", &[]);
    assert!(train(
        &tiny(Variant::ThpPlus),
        &quick(0),
        &train_set,
        &empty,
        |_| {}
    )
    .is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..quick(0)
    };
    assert!(train(
        &tiny(Variant::ThpPlus),
        &bad,
        &train_set,
        &train_set,
        |_| {}
    )
    .is_err());
}

#[test]
fn grid_search_picks_lowest_validation_nll() {
    let train_set = generate_poisson(8, 2.0, 6.0, 1, 1);
    let val_set = generate_poisson(3, 2.0, 6.0, 1, 2);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..quick(1)
    };
    let res = grid_search(
        &tiny(Variant::CondMeta),
        &cfg,
        &[1e-2, 1e-4],
        &[1e-4],
        &train_set,
        &val_set,
    )
    .unwrap();
    assert_eq!(res.rows.len(), 2);
    let best = res.rows[res.best].best_val_nll;
    assert!(res.rows.iter().all(|r| r.best_val_nll >= best));
    assert_eq!(res.outcome.best_val_nll, best);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_poisson(4, 2.0, 6.0, 1, 9);
    let model = metatpp_core::Model::new(tiny(Variant::AttentiveVi), 4).unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let opts = EvalOptions {
        samples: 4,
        chunk: 4,
        seed: 2,
    };
    assert_eq!(
        evaluate(&model, &data, &opts, 10).unwrap(),
        evaluate(&back, &data, &opts, 10).unwrap()
    );

    let text = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["tensors"][0]["shape"] = serde_json::json!([1, 1]);
    assert!(matches!(
        checkpoint::from_json(&v.to_string()),
        Err(Error::Checkpoint(_))
    ));
    assert!(checkpoint::from_json("{}").is_err());
    assert!(checkpoint::load(dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn history_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = generate_poisson(4, 2.0, 6.0, 1, 1);
    let out = train(
        &tiny(Variant::ThpPlus),
        &TrainConfig {
            max_epochs: 2,
            ..quick(0)
        },
        &train_set,
        &train_set,
        |_| {},
    )
    .unwrap();
    let path = dir.path().join("history.csv");
    write_history(&path, &out.history).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("epoch,train_loss,train_nll,train_kl,train_mark,val_nll\n"));
    assert_eq!(text.lines().count(), 1 + out.history.len());
}
