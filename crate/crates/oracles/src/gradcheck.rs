//! Directional finite-difference check of reverse-mode gradients.

use selfconf_core::model::{ModelParams, Tape, Trainable};
use selfconf_core::rng;

use crate::OracleReport;

pub const DIRECTIONS: usize = 20;
/// Relative tolerance applied to central differences.
pub const CENTRAL_TOL: f64 = 1e-4;
/// One-sided differences are first order in `h`, so kinks get a looser bound.
pub const ONE_SIDED_TOL: f64 = 1e-2;
/// Directional derivatives smaller than this are treated as zero.
const ABS_FLOOR: f64 = 1e-9;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn shifted(params: &ModelParams, which: Trainable, base: &[f64], dir: &[f64], step: f64) -> ModelParams {
    let mut p = params.clone();
    let theta: Vec<f64> = base.iter().zip(dir).map(|(w, u)| w + step * u).collect();
    p.set_trainable(which, &theta).expect("same length");
    p
}

/// Compares `grad . u` against `(L(theta + h u) - L(theta - h u)) / 2h` over
/// 20 random unit directions `u` and reports the largest relative error.
///
/// A direction whose forward and backward one-sided differences disagree
/// by more than the central tolerance is treated as crossing a kink: it is
/// checked against whichever one-sided difference is closer, at the
/// one-sided tolerance, and counted in the details.
pub fn finite_diff_grad_check<L>(params: &ModelParams, which: Trainable, loss: L, h: f64, seed: u64) -> OracleReport
where
    L: Fn(&mut Tape<'_>) -> selfconf_core::Result<f64>,
{
    let name = "finite-difference gradient";
    let (l0, grad) = match params.loss_and_grad(which, &loss) {
        Ok(v) => v,
        Err(e) => return OracleReport::new(name, f64::INFINITY, CENTRAL_TOL, format!("loss failed: {e}")),
    };
    let value = |p: &ModelParams| p.loss_and_grad(which, &loss).map(|(v, _)| v);
    let base = params.trainable_vec(which);
    let mut r = rng::stream(seed, &[0x0fac]);
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for _ in 0..DIRECTIONS {
        let mut u = rng::normal_vec(&mut r, base.len());
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let ad: f64 = grad.iter().zip(&u).map(|(g, v)| g * v).sum();
        let (lp, lm) = match (
            value(&shifted(params, which, &base, &u, h)),
            value(&shifted(params, which, &base, &u, -h)),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return OracleReport::new(name, f64::INFINITY, CENTRAL_TOL, "perturbed loss failed"),
        };
        let central = (lp - lm) / (2.0 * h);
        let fwd = (lp - l0) / h;
        let bwd = (l0 - lm) / h;
        let err = if rel_err(fwd, bwd) > ONE_SIDED_TOL {
            kinks += 1;
            // map the one-sided error onto the central scale
            rel_err(ad, fwd).min(rel_err(ad, bwd)) * CENTRAL_TOL / ONE_SIDED_TOL
        } else {
            rel_err(ad, central)
        };
        worst = worst.max(err);
    }
    OracleReport::new(
        name,
        worst,
        CENTRAL_TOL,
        format!("{DIRECTIONS} directions, h = {h:e}, {kinks} at nondifferentiable points checked one-sided"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use selfconf_core::model::{init_model, Arch};
    use selfconf_core::world::PromptContext;

    fn net() -> ModelParams {
        let arch = Arch { data_dim: 2, cond_dim: 2, time_freqs: 4, hidden: vec![6, 6] };
        init_model(&arch, 2, 2.0, 9).unwrap()
    }

    fn ctx() -> PromptContext {
        PromptContext { prompt_id: 1, embedding: vec![0.0, 1.0], is_null: false }
    }

    #[test]
    fn half_square_norm_passes() {
        let rep = finite_diff_grad_check(
            &net(),
            Trainable::Base,
            |tape| {
                let (id, v) = tape.forward(&[0.4, -0.2], 0.35, &ctx())?;
                tape.seed(id, &v);
                Ok(0.5 * v.iter().map(|x| x * x).sum::<f64>())
            },
            1e-4,
            1,
        );
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn constant_loss_is_exact() {
        let rep = finite_diff_grad_check(&net(), Trainable::Base, |_| Ok(3.0), 1e-4, 1);
        assert_eq!(rep.statistic, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let rep = finite_diff_grad_check(
            &net(),
            Trainable::Base,
            |tape| {
                let (id, v) = tape.forward(&[0.4, -0.2], 0.35, &ctx())?;
                let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
                tape.seed(id, &doubled);
                Ok(0.5 * v.iter().map(|x| x * x).sum::<f64>())
            },
            1e-4,
            1,
        );
        assert!(!rep.pass);
    }

    #[test]
    fn kink_is_checked_one_sided() {
        // |v_0| has a kink where v_0 = 0; place the evaluation there
        let p = net();
        let v0 = p.forward(&[0.4, -0.2], 0.35, &ctx()).unwrap()[0];
        let mut shifted_p = p.clone();
        let last = shifted_p.layers.len() - 1;
        shifted_p.layers[last].bias[0] -= v0;
        let rep = finite_diff_grad_check(
            &shifted_p,
            Trainable::Base,
            |tape| {
                let (id, v) = tape.forward(&[0.4, -0.2], 0.35, &ctx())?;
                let s = if v[0] > 0.0 { 1.0 } else { -1.0 };
                tape.seed(id, &[s, 0.0]);
                Ok(v[0].abs())
            },
            1e-4,
            2,
        );
        assert!(rep.details.contains("20 at nondifferentiable"), "{rep:?}");
        assert!(rep.pass, "{rep:?}");
    }
}
