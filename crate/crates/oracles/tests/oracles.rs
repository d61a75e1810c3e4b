use proptest::prelude::*;

use selfconf_core::flow::{make_schedule, ode_sample, rf_pretrain_loss, rf_pretrain_loss_on_tape, rollout, RfExample};
use selfconf_core::grpo::compute_advantages;
use selfconf_core::model::{init_model, Arch, Trainable};
use selfconf_core::rng;
use selfconf_core::trainer::{pretrain, PretrainConfig};
use selfconf_core::world::{make_world, sample_data, WorldSpec};
use selfconf_oracles::{
    analytic_velocity, brute_advantages, finite_diff_grad_check, marginal_match, optimal_probe_mse, posterior_noise_mean,
    rf_loss_floor, AnalyticVelocity, MarginalReference,
};

fn gauss(s: f64) -> selfconf_core::ToyWorld {
    make_world(&WorldSpec::IsotropicGaussian { dim: 2, scale: s, mean: None }).unwrap()
}

#[test]
fn advantages_agree_with_the_two_pass_oracle_on_1000_groups() {
    let mut r = rng::stream(17, &[]);
    for g in 0..1000 {
        let n = 2 + g % 31;
        let scale = 10f64.powi((g % 7) as i32 - 3);
        let rewards: Vec<f64> = rng::normal_vec(&mut r, n).into_iter().map(|v| v * scale).collect();
        let a = compute_advantages(&rewards).unwrap();
        let b = brute_advantages(&rewards).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12, "group {g}: {x} vs {y}");
        }
    }
    let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
    for (x, y) in a.iter().zip([-1.2247, 0.0, 1.2247]) {
        assert!((x - y).abs() < 5e-5);
    }
    assert_eq!(compute_advantages(&[4.0; 5]).unwrap(), vec![0.0; 5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn advantages_match_oracle(r in prop::collection::vec(-1e3f64..1e3, 2..64)) {
        let a = compute_advantages(&r).unwrap();
        let b = brute_advantages(&r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn dirac_velocity_is_twice_the_state() {
    let w = make_world(&WorldSpec::Dirac { point: vec![0.0, 0.0] }).unwrap();
    let c = w.prompt(0).unwrap();
    for x in [[0.3, -0.7], [2.0, 1.0], [-1.5, 0.25]] {
        let v = analytic_velocity(&w, &x, 0.5, &c).unwrap();
        assert!((v[0] - 2.0 * x[0]).abs() < 1e-15 && (v[1] - 2.0 * x[1]).abs() < 1e-15);
    }
}

#[test]
fn velocity_matches_regression_of_pair_differences() {
    // E[x1 - x0 | x_t] by binning x_t along the first axis for s = 1, t = 0.5
    let w = gauss(1.0);
    let c = w.prompt(0).unwrap();
    let n = 200_000;
    let x0 = sample_data(&w, &c, n, 1).unwrap();
    let mut r = rng::stream(2, &[]);
    let t = 0.5;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for s in &x0 {
        let x1 = rng::normal_vec(&mut r, 2);
        let xt = (1.0 - t) * s.x[0] + t * x1[0];
        sxx += xt * xt;
        sxy += xt * (x1[0] - s.x[0]);
    }
    let slope = sxy / sxx;
    let analytic = analytic_velocity(&w, &[1.0, 0.0], t, &c).unwrap()[0];
    assert!((slope - analytic).abs() < 0.01, "{slope} vs {analytic}");
}

#[test]
fn probe_floor_matches_posterior_simulation() {
    let w = gauss(1.0);
    let c = w.prompt(0).unwrap();
    let t = 0.5;
    let n = 100_000;
    let x0 = sample_data(&w, &c, n, 3).unwrap();
    let mut r = rng::stream(4, &[]);
    let mut mse = 0.0;
    for s in &x0 {
        let eps = rng::normal_vec(&mut r, 2);
        let xt: Vec<f64> = s.x.iter().zip(&eps).map(|(a, e)| (1.0 - t) * a + t * e).collect();
        let m = posterior_noise_mean(&w, &xt, t, &c).unwrap();
        mse += m.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    mse /= n as f64;
    let floor = optimal_probe_mse(&w, t).unwrap();
    assert!((floor - 1.0).abs() < 1e-15);
    assert!((mse - floor).abs() / floor < 0.03, "{mse}");
}

#[test]
fn ode_and_sde_marginals_match_closed_form() {
    let w = gauss(1.0);
    let field = AnalyticVelocity::new(&w).unwrap();
    let c = w.prompt(0).unwrap();
    let sched = make_schedule(400).unwrap();
    let n = 10_000;
    let check = [0usize, 100, 200, 300, 360, 400];
    let mut sde: Vec<Vec<Vec<f64>>> = vec![Vec::new(); check.len()];
    let mut ode_final = Vec::new();
    for i in 0..n {
        let mut r = rng::stream(8, &[i as u64]);
        let traj = rollout(&field, &c, &sched, 0.7, 1.0, None, &mut r).unwrap();
        for (k, &j) in check.iter().enumerate() {
            sde[k].push(traj.states[j].clone());
        }
        ode_final.push(ode_sample(&field, &traj.states[0], &c, &sched, 1.0).unwrap().x);
    }
    for (k, &j) in check.iter().enumerate() {
        let t = sched.timesteps[j];
        let var = (1.0 - t).powi(2) + t * t;
        let cov = [var, 0.0, 0.0, var];
        let rep = marginal_match(&sde[k], MarginalReference::Analytic { mean: &[0.0, 0.0], cov: &cov }, t, 0.03).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
    let rep = marginal_match(&ode_final, MarginalReference::Samples(&sde[check.len() - 1]), 0.0, 0.03).unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn zero_velocity_fails_the_marginal_check() {
    // without drift the injected noise accumulates and the terminal law is too wide
    let c = gauss(1.0).prompt(0).unwrap();
    let sched = make_schedule(50).unwrap();
    struct Zero;
    impl selfconf_core::VelocityField for Zero {
        fn data_dim(&self) -> usize {
            2
        }
        fn velocity(&self, _: &[f64], _: f64, _: &selfconf_core::PromptContext) -> selfconf_core::Result<Vec<f64>> {
            Ok(vec![0.0; 2])
        }
    }
    let xs: Vec<Vec<f64>> = (0..10_000)
        .map(|i| rollout(&Zero, &c, &sched, 0.7, 1.0, None, &mut rng::stream(9, &[i])).unwrap().terminal().to_vec())
        .collect();
    let rep = marginal_match(&xs, MarginalReference::Analytic { mean: &[0.0, 0.0], cov: &[1.0, 0.0, 0.0, 1.0] }, 0.0, 0.03).unwrap();
    assert!(!rep.pass, "{rep:?}");
}

#[test]
fn rf_loss_gradient_passes_the_finite_difference_check() {
    let arch = Arch { data_dim: 2, cond_dim: 2, time_freqs: 4, hidden: vec![12, 12] };
    let p = init_model(&arch, 2, 4.0, 3).unwrap();
    let w = make_world(&WorldSpec::Mixture { dim: 2, conditions: 2, components_per_condition: 1, radius: 3.0, scale: 0.3 }).unwrap();
    let mut r = rng::stream(1, &[]);
    let batch: Vec<RfExample> = (0..16)
        .map(|i| {
            let c = w.prompt(i % 2).unwrap();
            let x0 = sample_data(&w, &c, 1, i as u64).unwrap().remove(0).x;
            RfExample { x0, x1: rng::normal_vec(&mut r, 2), t: (i as f64 + 0.5) / 16.0, prompt: c }
        })
        .collect();
    let rep = finite_diff_grad_check(&p, Trainable::Base, |tape| rf_pretrain_loss_on_tape(tape, &batch), 1e-4, 7);
    assert!(rep.pass, "{rep:?}");
    let on = p.set_adapter_enabled(true);
    let rep = finite_diff_grad_check(&on, Trainable::Adapters, |tape| rf_pretrain_loss_on_tape(tape, &batch), 1e-4, 8);
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn pretrained_gaussian_model_nears_the_bayes_floor() {
    let w = gauss(1.0);
    let arch = Arch { data_dim: 2, cond_dim: 1, time_freqs: 6, hidden: vec![32, 32] };
    let p = pretrain(&w, &arch, &PretrainConfig { steps: 2000, batch_size: 128, ..Default::default() }).unwrap().params;
    let c = w.prompt(0).unwrap();
    let n = 40_000;
    let x0 = sample_data(&w, &c, n, 77).unwrap();
    let mut r = rng::stream(78, &[]);
    let batch: Vec<RfExample> = x0
        .into_iter()
        .enumerate()
        .map(|(i, s)| RfExample { x0: s.x, x1: rng::normal_vec(&mut r, 2), t: (i as f64 + 0.5) / n as f64, prompt: c.clone() })
        .collect();
    let model = rf_pretrain_loss(&p, &batch).unwrap();
    let oracle = rf_pretrain_loss(&AnalyticVelocity::new(&w).unwrap(), &batch).unwrap();
    let floor = rf_loss_floor(&w).unwrap();
    assert!((oracle - floor).abs() / floor < 0.03, "oracle residual {oracle} vs floor {floor}");
    assert!((model - oracle) / oracle <= 0.10, "model {model} vs oracle {oracle}");
}
