use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scorelab::model::{init_params_with_output_scale, load_checkpoint, save_checkpoint, MlpArch, ScoreNet};

fn random_net(d: usize, seed: u64) -> ScoreNet {
    let arch = MlpArch::new(d, 2.0);
    let params = init_params_with_output_scale(&arch, seed, 0.5).unwrap();
    ScoreNet::new(arch, params).unwrap()
}

struct Batch {
    times: Vec<f64>,
    xs: Array2<f64>,
    targets: Array2<f64>,
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Batch {
    Batch {
        times: (0..b).map(|_| rng.random_range(0.01..2.0)).collect(),
        xs: Array2::from_shape_fn((b, d), |_| rng.random_range(-2.0..2.0)),
        targets: Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0)),
    }
}

fn loss(net: &ScoreNet, batch: &Batch) -> f64 {
    net.backprop_eps_loss(&batch.times, batch.xs.view(), batch.targets.view(), None).unwrap().0
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for seed in 0..5 {
        let mut net = random_net(3, seed);
        let batch = random_batch(&mut rng, 16, 3);
        let (_, grad) = net.backprop_eps_loss(&batch.times, batch.xs.view(), batch.targets.view(), None).unwrap();
        let p = net.params().len();
        for _ in 0..50 {
            let i = rng.random_range(0..p);
            let h = 1e-5 * net.params().as_slice()[i].abs().max(1.0);
            let orig = net.params().as_slice()[i];
            net.params_mut()[i] = orig + h;
            let up = loss(&net, &batch);
            net.params_mut()[i] = orig - h;
            let dn = loss(&net, &batch);
            net.params_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let g = grad.as_slice()[i];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            assert!(rel < 1e-5, "net {seed}, coordinate {i}: {g} vs {fd}");
        }
    }
}

#[test]
fn zero_initialized_output_predicts_zero_noise() {
    let net = ScoreNet::init(MlpArch::new(4, 1.0), 0).unwrap();
    assert_eq!(net.params().len(), 11908);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&mut rng, 8, 4);
    let eps = net.eps_batch(&batch.times, batch.xs.view()).unwrap();
    assert!(eps.iter().all(|v| *v == 0.0));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let net = random_net(4, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&path, &net, 9, 1234).unwrap();
    let (back, header) = load_checkpoint(&path).unwrap();
    assert_eq!(header.step, 1234);
    assert_eq!(header.seed, 9);
    assert_eq!(back.params().as_slice(), net.params().as_slice());
    assert_eq!(back.arch(), net.arch());
    std::fs::write(&path, b"{\"arch\": 1}\n").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_invariant_under_batch_permutation(seed in 0u64..1000, b in 2usize..40, rot in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(2, seed);
        let batch = random_batch(&mut rng, b, 2);
        let perm: Vec<usize> = (0..b).map(|i| (i + rot) % b).collect();
        let permuted = Batch {
            times: perm.iter().map(|&i| batch.times[i]).collect(),
            xs: batch.xs.select(ndarray::Axis(0), &perm),
            targets: batch.targets.select(ndarray::Axis(0), &perm),
        };
        let (a, b) = (loss(&net, &batch), loss(&net, &permuted));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn outputs_are_finite_on_the_probe_grid(seed in 0u64..1000, radius in 0.0f64..1e3, log_t in -4.0f64..0.0) {
        let net = random_net(4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|v| *v *= radius / norm);
        let t = 10f64.powf(log_t) * 2.0;
        let eps = net.eps_forward(t, ndarray::ArrayView1::from(&x)).unwrap();
        prop_assert!(eps.iter().all(|v| v.is_finite()));
        let s = net.score(t, ndarray::ArrayView1::from(&x)).unwrap();
        prop_assert!(s.iter().all(|v| v.is_finite()));
    }
}
