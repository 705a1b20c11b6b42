use candle_core::{Device, Tensor};
use proptest::prelude::*;

use signfold_core::config::{LrSchedule, TrainConfig};
use signfold_nn::trainer::{simulate, StopReason};
use signfold_nn::{compound_scale, relu6, residual_forward};

proptest! {
    #[test]
    fn relu6_is_monotone_and_bounded(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(relu6(lo) <= relu6(hi));
        prop_assert!((0.0..=6.0).contains(&relu6(a)));
        if (0.0..=6.0).contains(&a) {
            prop_assert_eq!(relu6(a), a);
        }
    }

    #[test]
    fn residual_output_is_linear_in_the_branch(
        x in prop::collection::vec(-10.0f64..10.0, 12),
        r1 in prop::collection::vec(-10.0f64..10.0, 12),
        r2 in prop::collection::vec(-10.0f64..10.0, 12),
    ) {
        let t = |v: &[f64]| Tensor::from_slice(v, (3, 4), &Device::Cpu).unwrap();
        let (xt, a, b) = (t(&x), t(&r1), t(&r2));
        let sum = (&a + &b).unwrap();
        let both = residual_forward(&xt, |_| Ok(sum.clone())).unwrap();
        let one = residual_forward(&xt, |_| Ok(a.clone())).unwrap();
        let expect: Vec<f64> = (&one + &b).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let got: Vec<f64> = both.flatten_all().unwrap().to_vec1().unwrap();
        for (g, e) in got.iter().zip(&expect) {
            prop_assert!((g - e).abs() < 1e-9);
        }
        let zero = residual_forward(&xt, |x| x.zeros_like()).unwrap();
        prop_assert_eq!(zero.flatten_all().unwrap().to_vec1::<f64>().unwrap(), x);
    }

    #[test]
    fn compound_scaling_composes(
        alpha in 1.0f64..2.0, beta in 1.0f64..2.0, gamma in 1.0f64..2.0,
        p in 0.0f64..4.0, q in 0.0f64..4.0,
    ) {
        let (d1, w1, r1) = compound_scale(alpha, beta, gamma, p).unwrap();
        let (d2, w2, r2) = compound_scale(alpha, beta, gamma, q).unwrap();
        let (d, w, r) = compound_scale(alpha, beta, gamma, p + q).unwrap();
        for (combined, x, y) in [(d, d1, d2), (w, w1, w2), (r, r1, r2)] {
            prop_assert!((combined - x * y).abs() <= 1e-9 * combined);
        }
        prop_assert!(d >= 1.0 && w >= 1.0 && r >= 1.0);
    }

    #[test]
    fn schedule_and_stopping_traces(
        losses in prop::collection::vec(0.0f64..3.0, 1..40),
        patience in 1usize..6,
        plateau_patience in 1usize..5,
        epochs in 1usize..40,
        min_delta in prop::sample::select(vec![0.0, 1e-4, 1e-2]),
    ) {
        let hp = TrainConfig {
            epochs,
            patience,
            plateau_patience,
            min_delta,
            lr_schedule: LrSchedule::ReduceOnPlateau,
            ..TrainConfig::default()
        };
        let t = simulate(&hp, &losses);
        prop_assert!(t.epochs_run <= epochs.min(losses.len()));
        prop_assert!(t.lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(t.lrs.iter().all(|&lr| lr > 0.0 && lr <= hp.learning_rate));
        if t.reason == StopReason::EarlyStop {
            prop_assert!(t.epochs_run > patience);
        }
        let seen = &losses[..t.epochs_run];
        let best = seen[t.best_epoch - 1];
        prop_assert!(seen.iter().all(|&l| best <= l));
        prop_assert!(seen[..t.best_epoch - 1].iter().all(|&l| best < l));
    }
}
