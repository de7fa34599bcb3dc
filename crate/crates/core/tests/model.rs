use glrep::data::{simulate, window, window_sample, Dataset, SimSpec, WindowedSample};
use glrep::diff::{analytic_gradients, grad_check, ParamGrads};
use glrep::gp::PriorDim;
use glrep::model::{loss_terms, Batch, BatchNoise, Model, ModelConfig, LOG_RATIO_CLAMP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        delta: 5,
        hidden: 8,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn tiny_data(n: usize) -> Dataset {
    simulate(&SimSpec {
        n_samples: n,
        length: 20,
        seed: 5,
        ..SimSpec::default()
    })
    .unwrap()
}

fn batch_of(cfg: &ModelConfig, w: &[WindowedSample]) -> Batch {
    let refs: Vec<&WindowedSample> = w.iter().collect();
    Batch::new(cfg, &refs, None).unwrap()
}

#[test]
fn lambda_zero_total_is_elbo() {
    let cfg = ModelConfig { lambda: 0.0, ..tiny_config() };
    let w = window(&tiny_data(4), cfg.delta).unwrap();
    let batch = batch_of(&cfg, &w);
    let noise = BatchNoise::draw(&cfg, 4, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let v = Model::new(cfg).unwrap().loss(&batch, &noise).unwrap();
    assert_eq!(v.total, v.elbo);
    assert!(v.kl_local >= 0.0 && v.kl_global >= 0.0 && v.elbo >= v.nll);
}

#[test]
fn components_recompose_from_model_api() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let w = window(&tiny_data(4), cfg.delta).unwrap();
    let (b, t) = (w.len(), w[0].n_windows);
    let batch = batch_of(&cfg, &w);
    let noise = BatchNoise::draw(&cfg, b, t, &mut ChaCha8Rng::seed_from_u64(2));
    let v = model.loss(&batch, &noise).unwrap();

    let prior = PriorDim::new(cfg.kernels[0], t).unwrap();
    let (mut nll, mut kl_l, mut kl_g, mut reg) = (0.0, 0.0, 0.0, 0.0);
    for (i, x) in w.iter().enumerate() {
        let q = model.encode_local(x).unwrap().remove(0);
        let z_l = q.sample(&noise.local[0][i * t..(i + 1) * t]).unwrap();
        kl_l += q.kl_to_prior(&prior).unwrap();
        let qg = model.encode_global(x).unwrap();
        kl_g += qg.kl();
        let z_g = vec![qg.mean[0] + (0.5 * qg.log_var[0]).exp() * noise.global[i]];
        let xhat = model.decode(&z_g, &[z_l.clone()]).unwrap();
        let s = x.unwindow();
        for (step, (&obs, &val)) in s.mask[0].iter().zip(&s.values[0]).enumerate() {
            if obs {
                nll += 0.5 * (xhat[0][step] - val).powi(2) + 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
        }
        let z_star = vec![noise.prior[i]];
        let mut star = x.clone();
        let gen = model.decode(&z_star, &[z_l]).unwrap();
        for step in 0..star.len {
            let k = (step / cfg.delta) * cfg.delta + step % cfg.delta;
            star.values[k] = gen[0][step] * star.mask[k];
        }
        let qs = model.encode_global(&star).unwrap();
        reg += (qs.log_prob(&z_g) - qs.log_prob(&z_star))
            .clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
            .exp();
    }
    let n = b as f64;
    let (nll, kl_l, kl_g, reg) = (nll / n, kl_l / n, kl_g / n, reg / n);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
    assert!(close(v.nll, nll), "{} vs {nll}", v.nll);
    assert!(close(v.kl_local, kl_l), "{} vs {kl_l}", v.kl_local);
    assert!(close(v.kl_global, kl_g), "{} vs {kl_g}", v.kl_global);
    assert!(close(v.reg, reg), "{} vs {reg}", v.reg);
    assert!(close(v.elbo, nll + cfg.beta * (kl_l + kl_g)));
    assert!(close(v.total, v.elbo + cfg.lambda * reg));
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let w = window(&tiny_data(4), cfg.delta).unwrap();
    assert_eq!(w[0].n_windows, 4);
    let batch = batch_of(&cfg, &w);
    let noise = BatchNoise::draw(&cfg, 4, 4, &mut ChaCha8Rng::seed_from_u64(3));
    let pick = |which: usize| {
        let (cfg, batch, noise) = (&cfg, &batch, &noise);
        move |g: &glrep::diff::Graph, p: &glrep::diff::BoundParams| {
            let t = loss_terms(cfg, g, p, batch, noise)?;
            Ok([t.total, t.nll, t.kl_local, t.kl_global, t.reg][which].clone())
        }
    };
    for which in 0..5 {
        let r = grad_check(model.params(), 1e-5, pick(which)).unwrap();
        assert!(r.passes(1e-3), "term {which}: {r:?}");
    }
    // Every term actually reaches the parameters.
    for which in 1..5 {
        let grads = analytic_gradients(model.params(), &pick(which)).unwrap();
        assert!(grads.values().flatten().any(|&x| x != 0.0), "term {which} has no gradient");
    }
}

fn loss_and_grads(model: &Model, w: &[WindowedSample], noise: &BatchNoise) -> (f64, ParamGrads) {
    let cfg = model.config();
    let batch = batch_of(cfg, w);
    let loss = |g: &glrep::diff::Graph, p: &glrep::diff::BoundParams| Ok(loss_terms(cfg, g, p, &batch, noise)?.total);
    let grads = analytic_gradients(model.params(), &loss).unwrap();
    (model.loss(&batch, noise).unwrap().total, grads)
}

#[test]
fn masked_inputs_never_reach_the_loss() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let mut ds = tiny_data(4);
        for s in &mut ds.samples {
            for m in s.mask[0].iter_mut() {
                *m = rng.random_bool(0.7);
            }
            s.mask[0][case % 20] = true;
        }
        let w: Vec<_> = ds.samples.iter().map(|s| window_sample(s, cfg.delta).unwrap()).collect();
        let noise = BatchNoise::draw(&cfg, 4, 4, &mut rng);
        let (l0, g0) = loss_and_grads(&model, &w, &noise);

        for s in &mut ds.samples {
            for (v, &m) in s.values[0].iter_mut().zip(&s.mask[0]) {
                if !m {
                    *v = rng.random_range(-1e6..1e6);
                }
            }
        }
        let w: Vec<_> = ds.samples.iter().map(|s| window_sample(s, cfg.delta).unwrap()).collect();
        let (l1, g1) = loss_and_grads(&model, &w, &noise);
        assert_eq!(l0.to_bits(), l1.to_bits(), "case {case}");
        assert_eq!(g0, g1, "case {case}");
    }
}

#[test]
fn distant_window_swap_changes_local_means_only_nearby() {
    let cfg = ModelConfig { delta: 10, ..tiny_config() };
    let model = Model::new(cfg).unwrap();
    let x = window(&simulate(&SimSpec { n_samples: 4, ..SimSpec::default() }).unwrap(), 10)
        .unwrap()
        .remove(0);
    let mut swapped = x.clone();
    let k = x.window_size();
    let (a, b) = (1usize, 8usize);
    for i in 0..k {
        swapped.values.swap(a * k + i, b * k + i);
    }
    let before = &model.encode_local(&x).unwrap()[0].mean;
    let after = &model.encode_local(&swapped).unwrap()[0].mean;
    for t in 0..10usize {
        let near = t.abs_diff(a) <= 1 || t.abs_diff(b) <= 1;
        if near {
            assert_ne!(before[t], after[t], "window {t}");
        } else {
            assert_eq!(before[t], after[t], "window {t}");
        }
    }
}

#[test]
fn encoders_are_deterministic_and_shaped() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let x = window(&tiny_data(4), cfg.delta).unwrap().remove(0);
    let q = model.encode_local(&x).unwrap();
    assert_eq!((q.len(), q[0].len()), (cfg.d_l, 4));
    assert_eq!(q, model.encode_local(&x).unwrap());
    let g = model.encode_global(&x).unwrap();
    assert_eq!(g.dim(), cfg.d_g);
    let sub = x.windows(1, 2).unwrap();
    assert_eq!(model.encode_global(&sub).unwrap(), model.encode_global(&sub).unwrap());
    let out = model.decode(&g.mean, &[q[0].mean.clone()]).unwrap();
    assert_eq!((out.len(), out[0].len()), (1, 20));
    assert_eq!(out, model.reconstruct(&x).unwrap());
}

#[test]
fn fully_masked_sample_cannot_be_encoded_globally() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let mut x = window(&tiny_data(4), cfg.delta).unwrap().remove(0);
    x.mask.iter_mut().for_each(|m| *m = 0.0);
    assert!(model.encode_global(&x).is_err());
}

#[test]
fn decode_rejects_wrong_shapes() {
    let model = Model::new(tiny_config()).unwrap();
    assert!(model.decode(&[0.0, 0.0], &[vec![0.0; 4]]).is_err());
    assert!(model.decode(&[0.0], &[]).is_err());
    assert!(model.decode(&[0.0], &[vec![]]).is_err());
}

#[test]
fn counterfactual_keeps_source_shape() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let x = window(&tiny_data(4), cfg.delta).unwrap().remove(0);
    let cf = model.counterfactual(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(cf.source_id, x.id);
    assert_eq!((cf.series.len(), cf.series[0].len()), (1, 20));
    assert_eq!(cf.series, model.decode(&cf.z_global_prior, &cf.z_local).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::new(tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), model);
    std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig { epochs: 3, batch_size: 3, ..tiny_config() };
    let ds = tiny_data(8);
    let (m1, log1) = glrep::model::train(&ds, &cfg).unwrap();
    let (m2, log2) = glrep::model::train(&ds, &cfg).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(m1, m2);
    assert_eq!(log1.epochs.len(), 3);
    let other = glrep::model::train(&ds, &ModelConfig { seed: 12, ..cfg }).unwrap().1;
    assert_ne!(log1, other);
}

#[test]
fn training_rejects_feature_mismatch() {
    let cfg = ModelConfig { d: 2, ..tiny_config() };
    assert!(glrep::model::train(&tiny_data(4), &cfg).is_err());
}
