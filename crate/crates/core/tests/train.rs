use qsep::checkpoint;
use qsep::data::{default_classes, Sampler, StemPool};
use qsep::dsp::{MagSpec, SpecLayout};
use qsep::model::{LatentDist, LatentVec, Model, ModelConfig, ParamVars, Preset};
use qsep::tensor::{gradient_check_subset, AdamState, Graph, Tensor};
use qsep::train::{
    checkpoint_name, composite_loss, iteration_rng, loss_kl, loss_latent_regressor, loss_reconstruction, lr_schedule,
    reparameterize, reparameterize_var, smooth, standard_normal, train_loop, train_step, DecayMode, Hyper,
    TrainExample, TrainOptions, Trainer,
};
use qsep::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pool_for(cfg: &ModelConfig, seed: u64) -> StemPool {
    let n = cfg.segment_samples;
    StemPool::synthetic(&default_classes(4).unwrap(), 2, 4 * n, cfg.sample_rate, n, seed).unwrap()
}

fn batch(cfg: &ModelConfig, pool: &StemPool, seed: u64, n: usize) -> Vec<TrainExample> {
    let sampler = Sampler::new(pool, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| TrainExample::from_sample(&sampler.sample(&mut rng).unwrap()).unwrap()).collect()
}

fn mag(values: Vec<f64>, bins: usize, frames: usize) -> MagSpec {
    MagSpec {
        bins,
        frames,
        values,
        layout: SpecLayout::for_signal(64, 32, 4000).unwrap(),
    }
}

#[test]
fn reparameterize_noise_vanishes_with_tiny_variance() {
    let dist = LatentDist {
        mu: vec![1.0, -2.0, 0.5],
        logvar: vec![-10.0; 3],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mu = LatentVec(dist.mu.clone());
    for _ in 0..100 {
        let z = reparameterize(&dist, &mut rng);
        let err: f64 = z.0.iter().zip(&dist.mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 0.01 * mu.norm() + 1e-2);
    }
}

#[test]
fn reparameterize_monte_carlo_mean() {
    let dist = LatentDist {
        mu: vec![0.3, -1.2],
        logvar: vec![0.5, -0.7],
    };
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sums = [0.0; 2];
    for _ in 0..n {
        let z = reparameterize(&dist, &mut rng);
        sums[0] += z.0[0];
        sums[1] += z.0[1];
    }
    for d in 0..2 {
        let sigma = (0.5 * dist.logvar[d]).exp();
        let mean = sums[d] / n as f64;
        assert!((mean - dist.mu[d]).abs() < 3.0 * sigma / (n as f64).sqrt(), "dim {d}: {mean}");
    }
}

#[test]
fn reparameterize_gradients() {
    let mut g = Graph::new();
    let mu = g.param(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let lv = g.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
    let eps = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let z = reparameterize_var(&mut g, mu, lv, eps).unwrap();
    let s = g.sum_all(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(mu).unwrap().data(), &[1.0, 1.0, 1.0]);
    let expected: Vec<f64> = [(0.0f64, 0.5), (1.0, -1.0), (-1.0, 2.0)]
        .iter()
        .map(|(l, e)| 0.5 * (0.5 * l).exp() * e)
        .collect();
    for (a, b) in grads.get(lv).unwrap().data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn reconstruction_loss_examples() {
    let t = mag(vec![0.2, 0.4, 0.1, 0.9, 0.0, 0.3], 2, 3);
    assert_eq!(loss_reconstruction(&t, &t).unwrap(), 0.0);
    assert!((loss_reconstruction(&mag(vec![0.0; 6], 2, 3), &mag(vec![0.7; 6], 2, 3)).unwrap() - 0.7).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..200).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..200).map(|_| rng.random()).collect();
    let mut oracle = 0.0;
    for i in 0..200 {
        oracle += (a[i] - b[i]).abs();
    }
    oracle /= 200.0;
    let got = loss_reconstruction(&mag(a, 10, 20), &mag(b, 10, 20)).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!(loss_reconstruction(&t, &mag(vec![0.0; 6], 3, 2)).is_err());
}

#[test]
fn kl_loss_examples() {
    let d = |mu: Vec<f64>, logvar: Vec<f64>| LatentDist { mu, logvar };
    assert_eq!(loss_kl(&d(vec![0.0; 4], vec![0.0; 4])), 0.0);
    assert!((loss_kl(&d(vec![1.0, 0.0, 0.0], vec![0.0; 3])) - 0.5).abs() < 1e-15);
    let v = loss_kl(&d(vec![0.0], vec![4f64.ln()]));
    assert!((v - 0.5 * (4.0 - 1.0 - 4f64.ln())).abs() < 1e-15);
    assert!((v - 0.8069).abs() < 1e-4);
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let dist = LatentDist {
            mu: (0..4).map(|_| rng.random_range(-1.5..1.5)).collect(),
            logvar: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let eps = standard_normal(&mut rng, 4);
            // log q(z) − log p(z) for z = μ + σε
            let mut v = 0.0;
            for i in 0..4 {
                let z = dist.mu[i] + (0.5 * dist.logvar[i]).exp() * eps[i];
                v += -0.5 * dist.logvar[i] - 0.5 * eps[i] * eps[i] + 0.5 * z * z;
            }
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let kl = loss_kl(&dist);
        assert!((kl - mean).abs() < 3.0 * se, "{kl} vs {mean} ± {se}");
    }
}

#[test]
fn latent_regressor_loss_examples() {
    let z = LatentVec(vec![1.0; 5]);
    assert_eq!(loss_latent_regressor(&z, &z).unwrap(), 0.0);
    assert_eq!(loss_latent_regressor(&z, &LatentVec(vec![0.0; 5])).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a: Vec<f64> = standard_normal(&mut rng, 16);
    let b: Vec<f64> = standard_normal(&mut rng, 16);
    let oracle = (0..16).map(|i| (a[i] - b[i]).abs()).sum::<f64>() / 16.0;
    assert!((loss_latent_regressor(&LatentVec(a), &LatentVec(b)).unwrap() - oracle).abs() < 1e-12);
    assert!(matches!(
        loss_latent_regressor(&z, &LatentVec(vec![0.0; 4])),
        Err(Error::LatentDim { expected: 5, found: 4 })
    ));
}

#[test]
fn learning_rate_schedule() {
    let h = Hyper::paper();
    assert_eq!(lr_schedule(0, &h), 0.0002);
    assert_eq!(lr_schedule(199_999, &h), 0.0002);
    assert!((lr_schedule(200_000, &h) - 0.000195).abs() < 1e-15);
    assert!((lr_schedule(210_000, &h) - 0.00019).abs() < 1e-15);
    assert_eq!(lr_schedule(10_000_000, &h), 1e-7);
    let set = Hyper {
        decay_mode: DecayMode::SetTo,
        ..Hyper::paper()
    };
    assert_eq!(lr_schedule(250_000, &set), 5e-6);
    assert_eq!(lr_schedule(10, &set), 0.0002);
}

#[test]
fn hyper_text_round_trip() {
    let mut h = Hyper::desk();
    for line in Hyper::paper().to_kv().lines() {
        let (k, v) = line.split_once('=').unwrap();
        assert!(h.set(k, v).unwrap(), "{k}");
    }
    assert_eq!(h, Hyper::paper());
    assert!(!h.set("window", "128").unwrap());
    assert!(h.set("lambda_r", "abc").is_err());
    let bad = Hyper {
        lambda_kl: -1.0,
        ..Hyper::paper()
    };
    assert!(bad.validate().is_err());
    assert_eq!(Hyper::for_preset(Preset::Desk).lr0, 1e-3);
}

#[test]
fn step_report_is_weighted_sum_and_nonnegative() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 1);
    let mut model = Model::init(cfg.clone(), 1).unwrap();
    let mut state = AdamState::new(model.params.tensors());
    let h = Hyper::for_preset(Preset::Mini);
    let b = batch(&cfg, &pool, 2, h.batch);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..3 {
        let r = train_step(&mut model, &mut state, &b, &mut rng, &h).unwrap();
        assert_eq!(r.iteration, i);
        let sum = h.lambda_r * r.l_r + h.lambda_kl * r.l_kl + h.lambda_latent * r.l_latent;
        assert!((r.l_total - sum).abs() < 1e-10);
        assert!(r.l_r >= 0.0 && r.l_kl >= 0.0 && r.l_latent >= 0.0);
        assert!(r.grad_norm > 0.0);
        assert_eq!(r.log_line().split('\t').count(), 6);
    }
    assert!(train_step(&mut model, &mut state, &[], &mut rng, &h).is_err());
}

#[test]
fn total_loss_is_linear_in_each_lambda() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 2);
    let model = Model::init(cfg.clone(), 2).unwrap();
    let ex = &batch(&cfg, &pool, 5, 1)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = standard_normal(&mut rng, cfg.latent_dim);
    let zp = standard_normal(&mut rng, cfg.latent_dim);
    let run = |h: &Hyper| {
        let mut g = Graph::new();
        let p = model.params.record(&mut g, false);
        let m = g.constant(ex.mixture.clone());
        let t = g.constant(ex.target.clone());
        let e = g.constant(Tensor::vector(eps.clone()));
        let z = g.constant(Tensor::vector(zp.clone()));
        let l = composite_loss(&mut g, &p, &cfg, h, m, t, m, e, z).unwrap();
        [l.total, l.l_r, l.l_kl, l.l_latent].map(|v| g.value(v).item())
    };
    let base = Hyper::paper();
    let [t0, lr, lkl, llat] = run(&base);
    let doubled = [
        Hyper { lambda_r: 20.0, ..base.clone() },
        Hyper { lambda_kl: 0.02, ..base.clone() },
        Hyper { lambda_latent: 1.0, ..base.clone() },
    ];
    for (h, extra) in doubled.iter().zip([10.0 * lr, 0.01 * lkl, 0.5 * llat]) {
        let [t1, ..] = run(h);
        assert!((t1 - t0 - extra).abs() < 1e-12 * t0.max(1.0));
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 3);
    let mut model = Model::init(cfg.clone(), 3).unwrap();
    let before = model.params.clone();
    let mut state = AdamState::new(model.params.tensors());
    let h = Hyper {
        lr0: 0.0,
        ..Hyper::for_preset(Preset::Mini)
    };
    let b = batch(&cfg, &pool, 7, 5);
    train_step(&mut model, &mut state, &b, &mut ChaCha8Rng::seed_from_u64(1), &h).unwrap();
    assert_eq!(model.params, before);
    assert_eq!(state.t, 1);
}

#[test]
fn same_seed_gives_identical_reports() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 4);
    let sampler = Sampler::new(&pool, &cfg).unwrap();
    let run = || {
        let mut t = Trainer::new(cfg.clone(), Hyper::for_preset(Preset::Mini), 9).unwrap();
        let reports: Vec<_> = (0..4).map(|_| t.step(&sampler).unwrap()).collect();
        (reports, t.model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (c, pc) = single.install(run);
    assert_eq!(a, c);
    assert_eq!(pa, pc);
}

#[test]
fn identity_toy_problem_is_learned() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 5);
    let sampler = Sampler::new(&pool, &cfg).unwrap();
    let mut model = Model::init(cfg.clone(), 5).unwrap();
    let mut state = AdamState::new(model.params.tensors());
    let h = Hyper {
        lambda_kl: 0.0,
        lambda_latent: 0.0,
        lr0: 5e-3,
        ..Hyper::for_preset(Preset::Mini)
    };
    let mut losses = Vec::new();
    for it in 0..200 {
        let mut rng = iteration_rng(11, it);
        let b: Vec<TrainExample> = (0..h.batch)
            .map(|_| {
                let ex = TrainExample::from_sample(&sampler.sample(&mut rng).unwrap()).unwrap();
                TrainExample {
                    target: ex.mixture.clone(),
                    mixture: ex.mixture,
                }
            })
            .collect();
        losses.push(train_step(&mut model, &mut state, &b, &mut rng, &h).unwrap().l_r);
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    let s = smooth(&losses, 0.1);
    assert!(s[199] < s[20]);
}

fn gradient_check_model(cfg: &ModelConfig, seed: u64, per_tensor: Option<usize>) {
    let pool = pool_for(cfg, seed);
    let model = Model::init(cfg.clone(), seed).unwrap();
    let ex = batch(cfg, &pool, seed, 1).remove(0);
    let reg = batch(cfg, &pool, seed + 1, 1).remove(0).mixture;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::vector(standard_normal(&mut rng, cfg.latent_dim));
    let zp = Tensor::vector(standard_normal(&mut rng, cfg.latent_dim));
    let names = model.params.names().to_vec();
    let h = Hyper::paper();
    let subset: Vec<Option<Vec<usize>>> = model
        .params
        .tensors()
        .iter()
        .map(|t| {
            per_tensor.map(|k| {
                let mut idx: Vec<usize> = (0..k.min(t.len())).map(|_| rng.random_range(0..t.len())).collect();
                idx.sort_unstable();
                idx.dedup();
                idx
            })
        })
        .collect();
    let f = |g: &mut Graph, v: &[qsep::tensor::Var]| {
        let p = ParamVars::new(names.clone(), v.to_vec());
        let m = g.constant(ex.mixture.clone());
        let t = g.constant(ex.target.clone());
        let m2 = g.constant(reg.clone());
        let e = g.constant(eps.clone());
        let z = g.constant(zp.clone());
        Ok(composite_loss(g, &p, cfg, &h, m, t, m2, e, z).unwrap().total)
    };
    let rep = gradient_check_subset(f, model.params.tensors(), &subset, 1e-4).unwrap();
    assert!(rep.passed, "{rep:?} at {}", names[rep.worst.0]);
    assert!(rep.checked > 0);
}

#[test]
fn full_objective_gradient_check_on_every_mini_parameter() {
    gradient_check_model(&ModelConfig::mini(), 21, None);
}

#[test]
fn full_objective_gradient_check_on_desk_sample() {
    gradient_check_model(&ModelConfig::desk(), 22, Some(4));
}

#[test]
fn train_loop_logs_checkpoints_and_resumes_exactly() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 6);
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let opts = |out: &std::path::Path, iterations| TrainOptions {
        iterations,
        checkpoint_every: 3,
        seed: 13,
        out_dir: out.to_path_buf(),
    };
    let mut t = Trainer::new(cfg.clone(), Hyper::for_preset(Preset::Mini), 13).unwrap();
    let mut seen = 0;
    let reports = train_loop(&mut t, &pool, &opts(&full_dir, 7), |_| seen += 1).unwrap();
    assert_eq!((reports.len(), seen), (7, 7));
    let log = std::fs::read_to_string(full_dir.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(full_dir.join(checkpoint_name(3)).exists());
    assert!(full_dir.join(checkpoint_name(6)).exists());
    assert!(full_dir.join("final.qsep").exists());

    // Resume from the iteration-3 checkpoint in a copy of the run directory.
    let resumed_dir = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    std::fs::copy(full_dir.join("loss.tsv"), resumed_dir.join("loss.tsv")).unwrap();
    let ck = checkpoint::load(&full_dir.join(checkpoint_name(3))).unwrap();
    assert_eq!(ck.adam.t, 3);
    let mut r = Trainer::from_checkpoint(ck).unwrap();
    let rest = train_loop(&mut r, &pool, &opts(&resumed_dir, 7), |_| {}).unwrap();
    assert_eq!(rest, reports[3..]);
    assert_eq!(std::fs::read(resumed_dir.join("loss.tsv")).unwrap(), log.as_bytes());
    assert_eq!(
        std::fs::read(resumed_dir.join("final.qsep")).unwrap(),
        std::fs::read(full_dir.join("final.qsep")).unwrap()
    );
}

#[test]
fn trained_params_round_trip_through_checkpoint_exactly() {
    let cfg = ModelConfig::mini();
    let pool = pool_for(&cfg, 7);
    let sampler = Sampler::new(&pool, &cfg).unwrap();
    let mut t = Trainer::new(cfg, Hyper::for_preset(Preset::Mini), 1).unwrap();
    for _ in 0..2 {
        t.step(&sampler).unwrap();
    }
    let ck = t.checkpoint();
    assert_eq!(checkpoint::from_bytes(&checkpoint::to_bytes(&ck).unwrap()).unwrap(), ck);
}
