use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scorelab::diffusion::{alpha, ei_backward_sample, forward_sample, NoiseSchedule};
use scorelab::gmm::{sample_gmm, GmmSpec};
use scorelab::rng::{normal_vec, Streams};
use scorelab::score::ZeroScore;

fn check_schedule(s: &NoiseSchedule) -> Result<(), TestCaseError> {
    for (t, a) in s.times().iter().zip(s.alphas()) {
        prop_assert!((a - alpha(*t)).abs() < 1e-12);
    }
    let h = s.min_step();
    for measure in [s.lambda_measure(), s.nu_measure()] {
        let total: f64 = measure.atoms().iter().map(|a| a.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(measure.atoms().iter().all(|a| a.0 >= h * (1.0 - 1e-12)));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_schedule_invariants(horizon in 0.1f64..10.0, n in 1usize..500) {
        check_schedule(&NoiseSchedule::uniform(horizon, n).unwrap())?;
    }

    #[test]
    fn cosine_schedule_invariants(n in 2usize..400, s in 1e-4f64..0.05, cap in 0.9f64..0.9999) {
        let sched = NoiseSchedule::cosine(n, s, cap).unwrap();
        check_schedule(&sched)?;
        let a = sched.alphas();
        for i in 1..a.len() {
            prop_assert!(a[i] < a[i - 1]);
            prop_assert!(1.0 - a[i] / a[i - 1] <= cap + 1e-9);
        }
    }
}

fn moments(points: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let m = points.nrows() as f64;
    let mean: Vec<f64> = points.columns().into_iter().map(|c| c.sum() / m).collect();
    let var = points
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m)
        .collect();
    (mean, var)
}

#[test]
fn forward_process_composes() {
    let spec = GmmSpec::with_uniform_means(vec![0.6, 0.4], 2, 0.05, 3).unwrap();
    let m = 40_000;
    let data = sample_gmm(&spec, m, &Streams::new(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t1, t) = (0.3, 0.9);
    let mut direct = Array2::zeros((m, 2));
    let mut staged = Array2::zeros((m, 2));
    for i in 0..m {
        let z = data.point(i).to_vec();
        let a = forward_sample(&z, t, &normal_vec(&mut rng, 2));
        let mid = forward_sample(&z, t1, &normal_vec(&mut rng, 2));
        let b = forward_sample(&mid, t - t1, &normal_vec(&mut rng, 2));
        direct.row_mut(i).assign(&ndarray::arr1(&a));
        staged.row_mut(i).assign(&ndarray::arr1(&b));
    }
    let (ma, va) = moments(&direct);
    let (mb, vb) = moments(&staged);
    let tol = 4.0 / (m as f64).sqrt();
    for j in 0..2 {
        assert!((ma[j] - mb[j]).abs() < tol, "{ma:?} {mb:?}");
        assert!((va[j] - vb[j]).abs() < tol, "{va:?} {vb:?}");
    }
}

#[test]
fn zero_score_sampler_keeps_standard_moments() {
    let m = 8192;
    let tol = 4.0 / (m as f64).sqrt();
    for schedule in [NoiseSchedule::uniform(3.0, 7).unwrap(), NoiseSchedule::cosine(40, 0.008, 0.999).unwrap()] {
        let out = ei_backward_sample(&ZeroScore { dim: 3 }, &schedule, m, &Streams::new(2)).unwrap();
        let (mean, var) = moments(&out);
        assert!(mean.iter().all(|v| v.abs() < tol), "{mean:?}");
        assert!(var.iter().all(|v| (v - 1.0).abs() < 2.0 * tol), "{var:?}");
    }
}

#[test]
fn sampling_is_seed_deterministic() {
    let spec = GmmSpec::nine_component(0);
    let a = sample_gmm(&spec, 100, &Streams::new(5)).unwrap();
    let b = sample_gmm(&spec, 100, &Streams::new(5)).unwrap();
    let c = sample_gmm(&spec, 100, &Streams::new(6)).unwrap();
    assert_eq!(a.points(), b.points());
    assert_ne!(a.points(), c.points());
}
