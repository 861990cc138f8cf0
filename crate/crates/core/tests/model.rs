use metatpp_autograd::ndarray::IxDyn;
use metatpp_autograd::{Array, Graph, ParamStore, Rng};
use metatpp_core::data::make_batch;
use metatpp_core::encoder::{AttentionImpl, Encoder, EncoderConfig};
use metatpp_core::heads::{kl_diag, reparameterize, Gaussian};
use metatpp_core::mixture::kl_diag_gaussian;
use metatpp_core::model::{LatentMode, Objective};
use metatpp_core::objective::{loss, LossOptions};
use metatpp_core::{EventSequence, Model, ModelConfig, Variant};
use proptest::prelude::*;

fn random_seq(rng: &mut Rng, len: usize, marks: usize) -> EventSequence {
    let mut t = 0.0;
    let times: Vec<f64> = (0..len)
        .map(|_| {
            t += rng.exponential(1.0) + 1e-3;
            t
        })
        .collect();
    let s = EventSequence::new("r", times);
    if marks > 1 {
        let m = (0..len).map(|_| rng.below(marks)).collect();
        s.with_marks(m)
    } else {
        s
    }
}

fn small(variant: Variant, marks: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        latent_hidden: 6,
        dec_hidden: 6,
        components: 3,
        window: Some(3),
        ..ModelConfig::for_variant(variant, marks)
    }
}

/// Runs one encoder layer over the window of each position on its own and
/// compares with the banded encoder on the full sequence.
#[test]
fn single_layer_encoder_is_local() {
    let mut rng = Rng::new(1);
    for k in [1usize, 2, 5] {
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            window: Some(k),
            ffn_dim: 12,
            num_marks: 3,
        };
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "e", cfg, &mut rng).unwrap();
        let seq = random_seq(&mut rng, 9, 3);
        let batch = make_batch(&[&seq], None).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = enc.embed(&mut g, &p, &batch).unwrap();
        let full = enc.encode(&mut g, &p, &batch).unwrap();
        for i in 0..seq.len() {
            let lo = (i + 1).saturating_sub(k);
            let n = i + 1 - lo;
            let xs = g.slice(x, 1, lo, n).unwrap();
            let part = enc
                .layers(&mut g, &p, xs, &[n], None, AttentionImpl::Dense)
                .unwrap();
            for c in 0..8 {
                let a = g.value(full)[[0, i, c]];
                let b = g.value(part)[[0, n - 1, c]];
                assert!((a - b).abs() < 1e-10, "k={k} i={i}");
            }
        }
    }
}

fn forward_values(model: &Model, seq: &EventSequence, seed: u64) -> Vec<Array> {
    let batch = make_batch(&[seq], None).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let mut rng = Rng::new(seed);
    let f = model
        .forward(&mut g, &p, &batch, LatentMode::Prior, 3, &mut rng)
        .unwrap();
    let mut out = vec![
        g.value(f.mixture.log_w).clone(),
        g.value(f.mixture.mu).clone(),
        g.value(f.mixture.sigma).clone(),
    ];
    if let Some(m) = f.mark_logp {
        out.push(g.value(m).clone());
    }
    out
}

#[test]
fn every_variant_is_causal() {
    let mut rng = Rng::new(2);
    for v in Variant::ALL {
        let model = Model::new(small(v, 3), 4).unwrap();
        let seq = random_seq(&mut rng, 10, 3);
        for j in [0usize, 4, 8] {
            let mut future = seq.clone();
            for t in future.times.iter_mut().skip(j + 1) {
                *t += 0.75;
            }
            future.marks.as_mut().unwrap()[j + 1] = (seq.mark(j + 1) + 1) % 3;
            let a = forward_values(&model, &seq, 7);
            let b = forward_values(&model, &future, 7);
            for (x, y) in a.iter().zip(&b) {
                let s = x.shape();
                for bi in 0..s[0] {
                    for si in 0..s[1] {
                        for li in 0..=j {
                            for c in 0..s[3] {
                                assert_eq!(
                                    x[[bi, si, li, c]],
                                    y[[bi, si, li, c]],
                                    "{v} j={j} pos={li}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn batching_does_not_change_predictions() {
    let mut rng = Rng::new(3);
    let model = Model::new(small(Variant::AttentiveVi, 1), 1).unwrap();
    let a = random_seq(&mut rng, 7, 1);
    let b = random_seq(&mut rng, 4, 1);
    let run = |seqs: &[&EventSequence]| {
        let batch = make_batch(seqs, None).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let mut r = Rng::new(0);
        let f = model
            .forward(&mut g, &p, &batch, LatentMode::Posterior, 1, &mut r)
            .unwrap();
        g.value(f.mixture.mu).clone()
    };
    // Noise for the first row is drawn first, so it is the same in both layouts.
    let alone = run(&[&b]);
    let both = run(&[&b, &a]);
    for i in 0..b.len() {
        for c in 0..3 {
            assert!((alone[[0, 0, i, c]] - both[[0, 0, i, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn reparameterized_samples_have_target_moments() {
    let n = 100_000;
    let mut g = Graph::new();
    let mu = g.constant(Array::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, -2.0]).unwrap());
    let sigma = g.constant(Array::from_shape_vec(IxDyn(&[1, 2]), vec![1.5, 0.2]).unwrap());
    let eps = g.constant(Rng::new(5).normal_array(&[n, 2]));
    let z = reparameterize(&mut g, Gaussian { mu, sigma }, eps).unwrap();
    let zv = g.value(z);
    for (d, (m, s)) in [(0.5, 1.5), (-2.0, 0.2)].iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| zv[[i, d]]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - m).abs() < 4.0 * s / (n as f64).sqrt());
        let var_se = s * s * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - s * s).abs() < 4.0 * var_se);
    }
}

proptest! {
    #[test]
    fn graph_kl_is_nonnegative_and_matches_closed_form(
        mp in proptest::collection::vec(-3.0f64..3.0, 4),
        mq in proptest::collection::vec(-3.0f64..3.0, 4),
        sp in proptest::collection::vec(0.05f64..4.0, 4),
        sq in proptest::collection::vec(0.05f64..4.0, 4),
    ) {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: &[f64]| g.constant(Array::from_shape_vec(IxDyn(&[4]), v.to_vec()).unwrap());
        let p = Gaussian { mu: mk(&mut g, &mp), sigma: mk(&mut g, &sp) };
        let q = Gaussian { mu: mk(&mut g, &mq), sigma: mk(&mut g, &sq) };
        let kl = kl_diag(&mut g, p, q).unwrap();
        let v = g.item(kl);
        prop_assert!(v >= -1e-12);
        prop_assert!((v - kl_diag_gaussian(&mp, &sp, &mq, &sq)).abs() < 1e-10);
        let same = kl_diag(&mut g, p, p).unwrap();
        prop_assert_eq!(g.item(same), 0.0);
    }
}

fn toy_batch(marks: usize) -> Vec<EventSequence> {
    let mut rng = Rng::new(9);
    (0..3).map(|i| random_seq(&mut rng, 4 + i, marks)).collect()
}

#[test]
fn loss_is_deterministic_under_seed() {
    let seqs = toy_batch(2);
    let refs: Vec<&EventSequence> = seqs.iter().collect();
    let batch = make_batch(&refs, None).unwrap();
    for v in Variant::ALL {
        let model = Model::new(small(v, 2), 3).unwrap();
        let run = || {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let mut rng = Rng::new(11);
            loss(
                &model,
                &mut g,
                &p,
                &batch,
                4,
                &mut rng,
                &LossOptions::default(),
            )
            .unwrap()
            .report
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.total.is_finite() && a.mark > 0.0);
        assert_eq!(a.events, batch.num_targets());
        if v.objective() == Objective::Variational {
            assert!(a.kl >= 0.0);
        } else {
            assert_eq!(a.kl, 0.0);
        }
    }
}

#[test]
fn monte_carlo_with_one_sample_is_the_reconstruction() {
    use metatpp_core::kernels::mixture_logpdf;
    use metatpp_core::model::targets;
    let seqs = toy_batch(1);
    let refs: Vec<&EventSequence> = seqs.iter().collect();
    let batch = make_batch(&refs, None).unwrap();
    let model = Model::new(small(Variant::MetaMc, 1), 2).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let l = loss(
        &model,
        &mut g,
        &p,
        &batch,
        1,
        &mut Rng::new(4),
        &LossOptions::default(),
    )
    .unwrap();

    let f = model
        .forward(&mut g, &p, &batch, LatentMode::Prior, 1, &mut Rng::new(4))
        .unwrap();
    let t = targets(&batch);
    let lp = mixture_logpdf(
        &mut g,
        f.mixture.log_w,
        f.mixture.mu,
        f.mixture.sigma,
        &t.log_dt,
    )
    .unwrap();
    let lpv = g.value(lp);
    let mut sum = 0.0;
    for (r, &len) in batch.lens.iter().enumerate() {
        for i in 0..len - 1 {
            sum += lpv[[r, 0, i]];
        }
    }
    let expect = -sum / t.count as f64;
    assert!((l.report.nll - expect).abs() < 1e-12);
}

#[test]
fn small_gradient_step_lowers_the_loss() {
    let seqs = toy_batch(1);
    let refs: Vec<&EventSequence> = seqs.iter().collect();
    let batch = make_batch(&refs, None).unwrap();
    for v in [Variant::ThpPlus, Variant::CondMeta, Variant::CondAttentive] {
        let mut model = Model::new(small(v, 1), 5).unwrap();
        let eval = |m: &Model| {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g, true);
            let l = loss(
                m,
                &mut g,
                &p,
                &batch,
                1,
                &mut Rng::new(0),
                &LossOptions::default(),
            )
            .unwrap();
            let gr = g.backward(l.var).unwrap();
            (l.report.total, m.params.gradients(&p, &gr))
        };
        let (before, grads) = eval(&model);
        let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
        for (id, gr) in ids.into_iter().zip(&grads) {
            let w = model.params.get_mut(id);
            *w = &*w - &(gr * 1e-3);
        }
        let (after, _) = eval(&model);
        assert!(after < before, "{v}: {after} >= {before}");
    }
}

#[test]
fn survival_term_lowers_the_likelihood() {
    let mut seqs = toy_batch(1);
    for s in &mut seqs {
        s.t_end = Some(s.times.last().unwrap() + 2.0);
    }
    let refs: Vec<&EventSequence> = seqs.iter().collect();
    let batch = make_batch(&refs, None).unwrap();
    let model = Model::new(small(Variant::ThpPlus, 1), 1).unwrap();
    let run = |survival: bool| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let opts = LossOptions {
            survival,
            objective: None,
        };
        loss(&model, &mut g, &p, &batch, 1, &mut Rng::new(0), &opts)
            .unwrap()
            .report
            .nll
    };
    assert!(run(true) > run(false));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::for_variant(Variant::MetaVi, 1);
    cfg.heads = 5;
    assert!(Model::new(cfg, 0).is_err());
    let mut cfg = ModelConfig::for_variant(Variant::MetaVi, 1);
    cfg.window = Some(0);
    assert!(Model::new(cfg, 0).is_err());
}
