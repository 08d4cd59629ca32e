use proptest::prelude::*;
use trh::attacks::{accuracy, eval_robust_accuracy, pgd, AttackConfig, Norm};
use trh::data::two_moons;
use trh::losses::cross_entropy;
use trh::numerics::dot;
use trh::{DenseLayer, Matrix, MlpNetwork, Rng};

fn linear_net(w: Vec<f64>, d: usize) -> MlpNetwork {
    MlpNetwork::new(vec![DenseLayer { weights: Matrix::from_vec(d, 2, w), bias: None }]).unwrap()
}

#[test]
fn pgd_stays_in_ball_over_many_trials() {
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for trial in 0..10_000 {
        let d = 1 + rng.below(5);
        let sizes = [d, 1 + rng.below(6), 2 + rng.below(3)];
        let net = MlpNetwork::init(&sizes, true, &mut rng).unwrap();
        let x: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
        let norm = if trial % 2 == 0 { Norm::Linf } else { Norm::L2 };
        let delta = 10f64.powf(rng.uniform_in(-4.0, 1.0));
        let mut cfg = AttackConfig::new(norm, delta, 1 + rng.below(5));
        cfg.step_size = delta * rng.uniform_in(0.1, 3.0);
        let y = rng.below(sizes[2]);
        let adv = pgd(&net, &x, y, &cfg, &mut rng);
        let dist = norm.distance(&adv, &x);
        assert!(dist <= delta, "trial {trial}: {dist} > {delta}");
        worst = worst.max(dist / delta);
    }
    assert!(worst > 0.9, "attacks never reached the boundary ({worst})");
}

// For a two-class linear model the CE loss depends only on the margin, so
// one full-radius step along the gradient sign (or direction) is optimal.
#[test]
fn linear_fgsm_attains_the_analytic_maximum() {
    let mut rng = Rng::new(5);
    for _ in 0..200 {
        let d = 1 + rng.below(6);
        let w: Vec<f64> = (0..2 * d).map(|_| rng.normal()).collect();
        let net = linear_net(w.clone(), d);
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let y = rng.below(2);
        let diff: Vec<f64> = (0..d).map(|i| w[i * 2 + y] - w[i * 2 + 1 - y]).collect();
        let margin = dot(&x, &diff);
        let delta = rng.uniform_in(0.01, 1.0);
        for norm in [Norm::Linf, Norm::L2] {
            let mut cfg = AttackConfig::new(norm, delta, 1);
            cfg.step_size = delta;
            cfg.random_start = false;
            let adv = pgd(&net, &x, y, &cfg, &mut rng);
            let shrink = match norm {
                Norm::Linf => diff.iter().map(|v| v.abs()).sum::<f64>(),
                Norm::L2 => dot(&diff, &diff).sqrt(),
            };
            let worst = -(margin - delta * shrink);
            let best_loss = if worst > 0.0 { worst + (-worst).exp().ln_1p() } else { worst.exp().ln_1p() };
            let got = cross_entropy(net.forward(&adv).unwrap().logits(), y);
            assert!((got - best_loss).abs() <= 1e-10 * best_loss.max(1.0), "{norm:?}: {got} vs {best_loss}");
        }
    }
}

#[test]
fn zero_radius_evaluation_is_clean_accuracy() {
    let ds = two_moons(200, 0.2, 4).unwrap();
    let mut rng = Rng::new(9);
    for _ in 0..5 {
        let net = MlpNetwork::init(&[2, 16, 2], true, &mut rng).unwrap();
        let cfg = AttackConfig { restarts: 3, ..AttackConfig::new(Norm::Linf, 0.0, 5) };
        let robust = eval_robust_accuracy(&net, &ds, &cfg, 1).unwrap();
        assert_eq!(robust.to_bits(), accuracy(&net, &ds.inputs, &ds.labels).to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn more_restarts_never_raise_robust_accuracy(seed in 0u64..1000, delta in 0.01f64..0.4) {
        let ds = two_moons(60, 0.15, seed).unwrap();
        let net = MlpNetwork::init(&[2, 12, 2], true, &mut Rng::new(seed)).unwrap();
        let mut prev = f64::INFINITY;
        for restarts in 1..=5 {
            let cfg = AttackConfig { restarts, ..AttackConfig::new(Norm::L2, delta, 3) };
            let acc = eval_robust_accuracy(&net, &ds, &cfg, seed).unwrap();
            prop_assert!(acc <= prev);
            prev = acc;
        }
        prop_assert!(prev <= accuracy(&net, &ds.inputs, &ds.labels));
    }
}
