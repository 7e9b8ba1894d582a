use qsep::data::{default_classes, StemPool};
use qsep::dsp::Waveform;
use qsep::eval::{
    class_argmax_rates, delta_sdr, evaluate, median, sdr, summary_table, EvalLibrary, EvalMode, TestSet,
};
use qsep::latent::PoolEncodings;
use qsep::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wave(x: Vec<f64>) -> Waveform {
    Waveform::new(x, 1000)
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Removes the component of `n` along `s`.
fn orthogonalize(n: &[f64], s: &[f64]) -> Vec<f64> {
    let g = n.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / s.iter().map(|b| b * b).sum::<f64>();
    n.iter().zip(s).map(|(a, b)| a - g * b).collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn sdr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = noise(&mut rng, 1000);
    assert_eq!(sdr(&wave(s.clone()), &wave(s.clone())).unwrap(), 60.0);

    let n = orthogonalize(&noise(&mut rng, 1000), &s);
    let scale = (energy(&s) / 100.0 / energy(&n)).sqrt();
    let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + scale * b).collect();
    assert!((sdr(&wave(s.clone()), &wave(est)).unwrap() - 20.0).abs() < 0.01);

    let orth = orthogonalize(&noise(&mut rng, 1000), &s);
    assert_eq!(sdr(&wave(s.clone()), &wave(orth)).unwrap(), -40.0);

    assert!(sdr(&wave(vec![0.0; 10]), &wave(vec![1.0; 10])).is_err());
    assert!(sdr(&wave(vec![1.0; 10]), &wave(vec![1.0; 9])).is_err());
}

#[test]
fn sdr_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let s = noise(&mut rng, 500);
        let n = orthogonalize(&noise(&mut rng, 500), &s);
        let k = rng.random_range(0.05..0.5);
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + k * b).collect();
        let expected = 10.0 * (energy(&s) / (k * k * energy(&n))).log10();
        let got = sdr(&wave(s.clone()), &wave(est.clone())).unwrap();
        assert!((got - expected).abs() < 1e-6);
        let a = rng.random_range(0.01..50.0);
        let scaled: Vec<f64> = est.iter().map(|v| a * v).collect();
        assert!((sdr(&wave(s.clone()), &wave(scaled)).unwrap() - got).abs() < 1e-9);
    }
}

#[test]
fn delta_sdr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = wave(noise(&mut rng, 400));
    let noisy = wave(gt.samples.iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect());
    assert_eq!(delta_sdr(&gt, &noisy, &noisy).unwrap(), 0.0);
    assert!(delta_sdr(&gt, &gt, &noisy).unwrap() > 0.0);
    for _ in 0..100 {
        let a = wave(noise(&mut rng, 300));
        let b = wave(noise(&mut rng, 300));
        let c = wave(noise(&mut rng, 300));
        let oracle = sdr(&a, &b).unwrap() - sdr(&a, &c).unwrap();
        assert!((delta_sdr(&a, &b, &c).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn median_matches_sort_oracle() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[f64::NAN]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    assert_eq!(median(&[1.0, f64::NAN, 5.0, f64::INFINITY]), Some(3.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..40 {
        let x = noise(&mut rng, n);
        let mut s = x.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        assert_eq!(median(&x), Some(oracle));
    }
}

#[test]
fn eval_mode_names() {
    for m in [EvalMode::MeanVector, EvalMode::GroundTruthQuery, EvalMode::Retrieved, EvalMode::Iterative(3)] {
        assert_eq!(m.to_string().parse::<EvalMode>().unwrap(), m);
    }
    assert_eq!("iterative".parse::<EvalMode>().unwrap(), EvalMode::Iterative(2));
    assert!("iterative0".parse::<EvalMode>().is_err());
    assert!("best".parse::<EvalMode>().is_err());
}

#[test]
fn reports_have_one_entry_per_pair_and_are_deterministic() {
    let cfg = ModelConfig::mini();
    let n = cfg.segment_samples;
    let pool = StemPool::synthetic(&default_classes(4).unwrap(), 2, 4 * n, cfg.sample_rate, n, 2).unwrap();
    let model = Model::init(cfg, 2).unwrap();
    let enc = PoolEncodings::compute(&model, &pool).unwrap();
    let lib = EvalLibrary {
        class_means: enc.class_means().unwrap(),
        tracks: enc.track_means().unwrap(),
    };
    let test = TestSet::from_pool(&pool, 10, 7).unwrap();
    for item in &test.items {
        let mut sum = Waveform::silence(n, pool.sample_rate);
        for s in &item.sources {
            sum = sum.add(s);
        }
        assert_eq!(sum, item.mix);
    }
    let mut reports = Vec::new();
    for mode in [EvalMode::MeanVector, EvalMode::GroundTruthQuery, EvalMode::Retrieved, EvalMode::Iterative(2)] {
        let r = evaluate(&model, &test, &lib, mode, "init").unwrap();
        assert_eq!(r.entries.len(), 40);
        assert_eq!(r, evaluate(&model, &test, &lib, mode, "init").unwrap());
        assert_eq!(r.to_tsv().lines().count(), 42);
        assert!(r.medians().iter().all(|(_, m)| m.is_some()));
        reports.push(r);
    }
    let table = summary_table(&reports);
    assert!(table.contains("Ours (mean)") && table.contains("Ours (gt)"));
    assert_eq!(table.lines().count(), 2 + reports.len());

    let rates = class_argmax_rates(&model, &test, &lib).unwrap();
    assert_eq!(rates.len(), 4);
    assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)));

    let empty = TestSet {
        class_names: test.class_names.clone(),
        items: vec![],
    };
    assert!(evaluate(&model, &empty, &lib, EvalMode::MeanVector, "x").is_err());
    let partial = EvalLibrary {
        class_means: lib.class_means.filtered(|l| l != "bass"),
        tracks: lib.tracks.clone(),
    };
    assert!(evaluate(&model, &test, &partial, EvalMode::MeanVector, "x").is_err());
    assert!(TestSet::from_pool(&pool, 0, 1).is_err());
}
