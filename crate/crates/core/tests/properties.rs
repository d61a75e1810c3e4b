use proptest::prelude::*;

use selfconf_core::flow::{make_schedule, transition_logprob};
use selfconf_core::grpo::{clipped_surrogate, compute_advantages, kl_mean_gaussian, suffix_window};
use selfconf_core::model::{init_model, Arch};
use selfconf_core::reward::{sample_probes, score_group, step_score, ProbeConfig};
use selfconf_core::world::{condition_accuracy_of, make_world, sample_data, WorldSpec};
use selfconf_core::PromptContext;

fn tiny_arch() -> Arch {
    Arch { data_dim: 2, cond_dim: 3, time_freqs: 4, hidden: vec![8, 8] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probes_cancel_exactly(half in 1usize..12, d in 1usize..6, seed in any::<u64>()) {
        let set = sample_probes(2 * half, d, seed).unwrap();
        // summed pairwise the cancellation is exact in floating point
        for i in 0..d {
            let sum: f64 = (0..half).map(|m| set.probes[m][i] + set.probes[m + half][i]).sum();
            prop_assert_eq!(sum, 0.0);
        }
        for m in 0..half {
            let neg: Vec<f64> = set.probes[m].iter().map(|v| -v).collect();
            prop_assert_eq!(&set.probes[m + half], &neg);
        }
    }

    #[test]
    fn advantages_are_standardized(r in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let a = compute_advantages(&r).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let m = r.iter().sum::<f64>() / n;
        let sd = (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 1e-6 {
            let var = a.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn advantages_ignore_positive_affine_maps(
        r in prop::collection::vec(-10.0f64..10.0, 2..30),
        scale in 0.01f64..100.0,
        shift in -100.0f64..100.0,
    ) {
        let n = r.len() as f64;
        let m = r.iter().sum::<f64>() / n;
        let sd = (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        prop_assume!(sd > 1e-3);
        let a = compute_advantages(&r).unwrap();
        let mapped: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let b = compute_advantages(&mapped).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn schedules_run_from_one_to_zero(t in 1usize..300) {
        let s = make_schedule(t).unwrap();
        prop_assert_eq!(s.timesteps.len(), t + 1);
        prop_assert_eq!(s.timesteps[0], 1.0);
        prop_assert_eq!(s.timesteps[t], 0.0);
        prop_assert!(s.timesteps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn suffix_window_has_ceiling_length(t in 1usize..100, rho in 0.01f64..1.0) {
        let s = make_schedule(t).unwrap();
        let w = suffix_window(&s, rho).unwrap();
        prop_assert_eq!(w.len(), (rho * t as f64).ceil() as usize);
        prop_assert_eq!(*w.last().unwrap(), t - 1);
        prop_assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
    }

    #[test]
    fn clipped_surrogate_is_a_pessimistic_bound(r in 0.0f64..5.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
        let j = clipped_surrogate(r, a, eps);
        prop_assert!(j <= r * a + 1e-12);
        prop_assert_eq!(clipped_surrogate(1.0, a, eps), a);
        let lo = (1.0 - eps) * a;
        let hi = (1.0 + eps) * a;
        prop_assert!(j <= lo.max(hi) + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_scales_with_variance(
        mu in prop::collection::vec(-3.0f64..3.0, 1..5),
        shift in prop::collection::vec(-3.0f64..3.0, 5),
        sigma in 0.05f64..3.0,
    ) {
        let other: Vec<f64> = mu.iter().zip(&shift).map(|(m, s)| m + s).collect();
        let k = kl_mean_gaussian(&mu, &other, sigma).unwrap();
        prop_assert!(k >= 0.0);
        let k2 = kl_mean_gaussian(&mu, &other, 2.0 * sigma).unwrap();
        prop_assert!((k2 - k / 4.0).abs() <= 1e-12 * k.max(1.0));
    }

    #[test]
    fn logprob_peaks_at_the_mean(mean in prop::collection::vec(-3.0f64..3.0, 1..5), sigma in 0.1f64..2.0, off in 0.01f64..1.0) {
        let at = transition_logprob(&mean, sigma, &mean).unwrap();
        let moved: Vec<f64> = mean.iter().map(|m| m + off).collect();
        prop_assert!(transition_logprob(&mean, sigma, &moved).unwrap() < at);
        let wide = transition_logprob(&mean, 2.0 * sigma, &mean).unwrap();
        prop_assert!((at - wide - mean.len() as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_score_is_negative_log(mse in 0.0f64..1e3, delta in 1e-9f64..1.0) {
        prop_assert_eq!(step_score(mse, delta).unwrap(), -(mse + delta).ln());
    }

    #[test]
    fn accuracy_ignores_sample_order(seed in any::<u64>(), n in 2usize..60, rot in 0usize..60) {
        let w = make_world(&WorldSpec::Mixture { dim: 2, conditions: 4, components_per_condition: 1, radius: 3.0 * 2f64.sqrt(), scale: 0.3 }).unwrap();
        let own = w.prompt(1).unwrap();
        let other = w.prompt(2).unwrap();
        let mut xs: Vec<Vec<f64>> = sample_data(&w, &own, n, seed).unwrap().into_iter().map(|s| s.x).collect();
        xs.extend(sample_data(&w, &other, n / 2 + 1, seed ^ 1).unwrap().into_iter().map(|s| s.x));
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let a = condition_accuracy_of(&w, &own, &refs).unwrap();
        let mut rotated = refs.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        rotated.reverse();
        prop_assert_eq!(a, condition_accuracy_of(&w, &own, &rotated).unwrap());
    }

    #[test]
    fn zero_up_projections_leave_the_base_map(
        x in prop::collection::vec(-4.0f64..4.0, 2),
        t in 0.0f64..=1.0,
        seed in 0u64..1000,
        cond in 0usize..3,
    ) {
        let p = init_model(&tiny_arch(), 2, 4.0, seed).unwrap();
        let mut e = vec![0.0; 3];
        e[cond] = 1.0;
        let c = PromptContext { prompt_id: cond + 1, embedding: e, is_null: false };
        let off = p.forward(&x, t, &c).unwrap();
        let on = p.set_adapter_enabled(true).forward(&x, t, &c).unwrap();
        prop_assert_eq!(off, on);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Every member sees the same probes, so permuting the group permutes
    /// the per-member results and nothing else.
    #[test]
    fn scoring_commutes_with_group_permutation(seed in any::<u64>(), g in 2usize..10, shift in 1usize..10) {
        let p = init_model(&tiny_arch(), 2, 4.0, 3).unwrap();
        let c = PromptContext { prompt_id: 1, embedding: vec![1.0, 0.0, 0.0], is_null: false };
        let mut r = selfconf_core::rng::stream(seed, &[]);
        let z0: Vec<Vec<f64>> = (0..g).map(|_| selfconf_core::rng::normal_vec(&mut r, 2)).collect();
        let sched = make_schedule(10).unwrap();
        let cfg = ProbeConfig { normalize: true, ..ProbeConfig::default() };
        let a = score_group(&p, &z0, &c, &cfg, &sched, seed).unwrap();
        let k = shift % g;
        let mut permuted = z0.clone();
        permuted.rotate_left(k);
        let b = score_group(&p, &permuted, &c, &cfg, &sched, seed).unwrap();
        for i in 0..g {
            let orig = &a[(i + k) % g];
            prop_assert_eq!(&orig.steps.iter().map(|s| s.mse).collect::<Vec<_>>(), &b[i].steps.iter().map(|s| s.mse).collect::<Vec<_>>());
            prop_assert!((orig.aggregate - b[i].aggregate).abs() < 1e-9);
        }
    }
}
