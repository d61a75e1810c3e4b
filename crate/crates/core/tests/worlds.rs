//! Statistical checks of the toy worlds against closed forms.

use selfconf_core::flow::{rf_pretrain_loss, RfExample};
use selfconf_core::rng;
use selfconf_core::world::{
    condition_accuracy, make_world, sample_data, true_log_density, WorldSpec,
};
use selfconf_core::{PromptContext, Result, VelocityField};

fn corners(scale: f64, per: usize) -> selfconf_core::ToyWorld {
    make_world(&WorldSpec::Mixture { dim: 2, conditions: 4, components_per_condition: per, radius: 3.0 * 2f64.sqrt(), scale })
        .unwrap()
}

#[test]
fn gaussian_sample_mean_is_within_clt_bound() {
    let w = make_world(&WorldSpec::IsotropicGaussian { dim: 2, scale: 1.0, mean: None }).unwrap();
    let n = 100_000;
    let xs = sample_data(&w, &w.prompt(0).unwrap(), n, 5).unwrap();
    // three standard errors
    let bound = 3.0 / (n as f64).sqrt();
    assert!(bound < 0.02);
    for i in 0..2 {
        let m = xs.iter().map(|s| s.x[i]).sum::<f64>() / n as f64;
        assert!(m.abs() < bound, "coordinate {i}: {m}");
    }
}

#[test]
fn component_occupancy_matches_weights() {
    let w = corners(0.3, 3);
    let prompt = w.prompt(2).unwrap();
    let comps = w.components_for(&prompt).unwrap();
    let n = 10_000;
    let xs = sample_data(&w, &prompt, n, 11).unwrap();
    let mut counts = vec![0usize; comps.len()];
    for s in &xs {
        let k = (0..comps.len())
            .min_by(|&a, &b| {
                let d = |k: usize| comps[k].mean.iter().zip(&s.x).map(|(m, x)| (m - x).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        counts[k] += 1;
    }
    for (k, c) in comps.iter().enumerate() {
        let frac = counts[k] as f64 / n as f64;
        assert!((frac - c.weight).abs() < 0.02, "component {k}: {frac} vs {}", c.weight);
    }
}

#[test]
fn log_density_at_an_isolated_mean() {
    let s = 0.05;
    let w = corners(s, 1);
    let prompt = w.prompt(0).unwrap();
    let comp = &w.components_for(&prompt).unwrap()[0];
    let got = true_log_density(&w, &prompt, &comp.mean).unwrap();
    let want = comp.weight.ln() - 2.0 * (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn accuracy_separates_conditions() {
    let w = corners(0.3, 3);
    for id in 0..4 {
        let p = w.prompt(id).unwrap();
        let own = sample_data(&w, &p, 2000, id as u64).unwrap();
        assert!(condition_accuracy(&w, &p, &own).unwrap() >= 0.99);
        let other = w.prompt((id + 1) % 4).unwrap();
        let foreign = sample_data(&w, &other, 2000, id as u64).unwrap();
        assert!(condition_accuracy(&w, &p, &foreign).unwrap() <= 0.01);
    }
}

struct Zero;

impl VelocityField for Zero {
    fn data_dim(&self) -> usize {
        2
    }
    fn velocity(&self, _: &[f64], _: f64, _: &PromptContext) -> Result<Vec<f64>> {
        Ok(vec![0.0, 0.0])
    }
}

#[test]
fn zero_velocity_loss_is_the_pair_second_moment() {
    let w = make_world(&WorldSpec::IsotropicGaussian { dim: 2, scale: 1.0, mean: None }).unwrap();
    let c = w.prompt(0).unwrap();
    let n = 100_000;
    let x0 = sample_data(&w, &c, n, 1).unwrap();
    let mut r = rng::stream(2, &[]);
    let batch: Vec<RfExample> = x0
        .into_iter()
        .map(|s| RfExample { x0: s.x, x1: rng::normal_vec(&mut r, 2), t: 0.5, prompt: c.clone() })
        .collect();
    let loss = rf_pretrain_loss(&Zero, &batch).unwrap();
    assert!((loss - 4.0).abs() / 4.0 < 0.02, "{loss}");
}
