use ddnet_core::channel::{generate_sample, qpsk_demodulate, qpsk_modulate};
use ddnet_core::federated::{average, sparsify_probabilities};
use ddnet_core::idetnet::{idetnet_forward, init_idetnet, lss, smooth};
use ddnet_core::numerics::{ParamSet, Rng, Tensor};
use ddnet_core::oampnet::mmse_denoiser;
use ddnet_core::{ExperimentConfig, IDetNetConfig};
use proptest::prelude::*;

fn vec_f64(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..len)
}

proptest! {
    #[test]
    fn lss_is_odd_bounded_and_monotone(s in vec_f64(32), beta in prop_oneof![-3.0f64..-0.01, 0.01f64..3.0]) {
        let out = lss(&s, beta).unwrap();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let out_neg = lss(&neg, beta).unwrap();
        for ((o, on), v) in out.iter().zip(&out_neg).zip(&s) {
            prop_assert!(o.abs() <= 1.0);
            prop_assert_eq!(*o, -*on);
            if v.abs() <= beta.abs() {
                prop_assert!((o - v / beta.abs()).abs() < 1e-12);
            }
        }
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let mono = lss(&sorted, beta).unwrap();
        prop_assert!(mono.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lss_rejects_vanishing_beta(s in vec_f64(8), beta in -1e-9f64..1e-9) {
        prop_assert!(lss(&s, beta).is_err());
    }

    #[test]
    fn smooth_interpolates(pair in (1usize..16).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n))), alpha in 0.0f64..=1.0) {
        let (a, b) = pair;
        let out = smooth(&a, &b, alpha);
        prop_assert_eq!(smooth(&a, &b, 0.0), a.clone());
        prop_assert_eq!(smooth(&a, &b, 1.0), b.clone());
        for ((o, x), y) in out.iter().zip(&a).zip(&b) {
            prop_assert!(*o >= x.min(*y) - 1e-12 && *o <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn sparsify_probabilities_meet_budget(g in prop::collection::vec(-10.0f64..10.0, 1..200), delta in 0.01f64..=1.0) {
        let p = sparsify_probabilities(&g, delta);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (pi, gi) in p.iter().zip(&g) {
            if *gi == 0.0 {
                prop_assert_eq!(*pi, 0.0);
            }
        }
        let nonzero = g.iter().filter(|v| **v != 0.0).count() as f64;
        let sum: f64 = p.iter().sum();
        let target = (delta * g.len() as f64).min(nonzero);
        // amplification stops within a relative tolerance of the budget
        prop_assert!(sum <= delta * g.len() as f64 + 1e-9);
        prop_assert!(sum >= target / (1.0 + 1e-2) - 1e-9, "sum {} target {}", sum, target);
        if delta == 1.0 {
            prop_assert!(p.iter().zip(&g).all(|(pi, gi)| *gi == 0.0 || *pi == 1.0));
        }
    }

    #[test]
    fn averaging_identical_params_is_identity(seed in any::<u64>(), copies in 1usize..6) {
        let cfg = IDetNetConfig { k_id: 2, h1: 6, h2: 3, n_t: 2, ..Default::default() };
        let p = init_idetnet(&cfg, &mut Rng::new(seed));
        let avg = average(&vec![p.clone(); copies]).unwrap();
        for (a, b) in avg.flatten().iter().zip(p.flatten()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn denoiser_is_odd_and_bounded(z in vec_f64(32), tau2 in 1e-6f64..10.0) {
        let out = mmse_denoiser(&z, tau2).unwrap();
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        for (o, on) in out.iter().zip(mmse_denoiser(&neg, tau2).unwrap()) {
            prop_assert!(o.abs() <= std::f64::consts::FRAC_1_SQRT_2);
            prop_assert_eq!(*o, -on);
        }
        prop_assert!(mmse_denoiser(&z, 0.0).is_err());
    }

    #[test]
    fn qpsk_round_trip(bits in prop::collection::vec(0u8..=1, 1..64)) {
        let x = qpsk_modulate(&bits);
        prop_assert!(x.iter().all(|v| (v.abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15));
        prop_assert_eq!(qpsk_demodulate(&x), bits);
    }

    #[test]
    fn config_json_round_trip(seed in any::<u64>(), k_id in 1usize..60, delta in 0.01f64..=1.0, xi in 0.0f64..=1.0) {
        let mut cfg = ExperimentConfig { seed, xi, ..Default::default() };
        cfg.model.k_id = k_id;
        cfg.fed.delta = delta;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idetnet_estimates_stay_in_unit_box(seed in any::<u64>(), alphas in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 3), snr in -5.0f64..20.0) {
        let cfg = IDetNetConfig { k_id: 3, h1: 8, h2: 4, n_t: 2, ..Default::default() };
        let mut rng = Rng::new(seed);
        let mut params = init_idetnet(&cfg, &mut rng);
        for (layer, (a1, a2)) in params.layers.iter_mut().zip(&alphas) {
            layer.alpha1 = Tensor::scalar(*a1);
            layer.alpha2 = Tensor::scalar(*a2);
        }
        let s = generate_sample(2, 4, 0.3, snr, &mut rng).unwrap();
        let est = idetnet_forward(&s.h, &s.y, &params, &cfg).unwrap();
        prop_assert_eq!(est.len(), 3);
        for x in est {
            prop_assert!(x.iter().all(|v| v.is_finite() && v.abs() <= 1.0 + 1e-12));
        }
    }
}
