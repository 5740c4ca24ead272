//! ADAM updates and the milestone learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::TrainConfig;

/// ADAM hyperparameters (the cited method's defaults).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// Learning rate at `epoch`: lr_initial * decay^(milestones passed).
///
/// The product is evaluated in decimal arithmetic (shortest decimal
/// representations, exact integer mantissa math, one correctly-rounded
/// parse). Binary multiplication of 1e-3 by 0.2 three times lands one ulp
/// away from 8e-6; decimal evaluation reproduces the published rates
/// exactly.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config
        .lr_milestones
        .iter()
        .filter(|&&m| m <= epoch)
        .count();
    decimal_decay(config.lr_initial, config.lr_decay, passed)
        .unwrap_or_else(|| config.lr_initial * config.lr_decay.powi(passed as i32))
}

/// base * factor^k in exact decimal arithmetic; None when the mantissa
/// product cannot be held exactly (then the binary fallback applies).
fn decimal_decay(base: f64, factor: f64, k: usize) -> Option<f64> {
    if k == 0 {
        return Some(base);
    }
    let (mb, eb) = decimal_parts(base)?;
    let (mf, ef) = decimal_parts(factor)?;
    let mut mantissa = mb;
    let mut exponent = eb;
    for _ in 0..k {
        mantissa = mantissa.checked_mul(mf)?;
        exponent = exponent.checked_add(ef)?;
    }
    format!("{mantissa}e{exponent}").parse::<f64>().ok()
}

/// Shortest-round-trip decimal representation as (mantissa, power of ten).
fn decimal_parts(x: f64) -> Option<(i128, i32)> {
    if !x.is_finite() {
        return None;
    }
    let s = format!("{x:e}"); // e.g. "1e-3", "2e-1", "1.25e0"
    let (mant, exp) = s.split_once('e')?;
    let exp: i32 = exp.parse().ok()?;
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    let digits: i128 = format!("{int_part}{frac_part}").parse().ok()?;
    Some((digits, exp.checked_sub(frac_part.len() as i32)?))
}

/// One ADAM step over flat parameter/gradient vectors. Fails without
/// touching any state when a gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step length mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient element {i} is {g}; step aborted"
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one_minus_b1 = T::from_f64(1.0 - hyper.beta1);
    let one_minus_b2 = T::from_f64(1.0 - hyper.beta2);
    let c1 = T::from_f64(1.0 / (1.0 - hyper.beta1.powi(t)));
    let c2 = T::from_f64(1.0 / (1.0 - hyper.beta2.powi(t)));
    let eps = T::from_f64(hyper.eps);
    let lr_t = T::from_f64(lr);

    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + one_minus_b1 * g;
        *v = b2 * *v + one_minus_b2 * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn default_config() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_reproduces_published_decay_points() {
        let cfg = default_config();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(29, &cfg), 1e-3);
        assert_eq!(lr_at(30, &cfg), 2e-4);
        assert_eq!(lr_at(49, &cfg), 2e-4);
        assert_eq!(lr_at(50, &cfg), 4e-5);
        assert_eq!(lr_at(79, &cfg), 4e-5);
        assert_eq!(lr_at(80, &cfg), 8e-6);
        assert_eq!(lr_at(99, &cfg), 8e-6);
    }

    #[test]
    fn no_milestones_keeps_lr_constant() {
        let cfg = TrainConfig {
            lr_milestones: vec![],
            ..default_config()
        };
        for epoch in [0, 10, 99] {
            assert_eq!(lr_at(epoch, &cfg), cfg.lr_initial);
        }
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // f(x) = x^2 at x = 1: g = 2, and m_hat/sqrt(v_hat) = 1 up to eps.
        let mut p = vec![1.0f64];
        let mut state = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut state, 0.1, &AdamHyper::default()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6, "p = {}", p[0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![0.7f32, -0.3];
        let mut state = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut state, 0.1, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![0.7, -0.3]);
    }

    #[test]
    fn nan_gradient_aborts_without_state_change() {
        let mut p = vec![1.0f32];
        let mut state = AdamState::new(1);
        let before = state.clone();
        let err =
            adam_step(&mut p, &[f32::NAN], &mut state, 0.1, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(state, before);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut p: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut state = AdamState::new(16);
            for _ in 0..50 {
                let grads: Vec<f32> = p.iter().map(|&x| 2.0 * x).collect();
                adam_step(&mut p, &grads, &mut state, 0.1, &AdamHyper::default()).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn quadratic_converges_below_threshold_from_random_starts() {
        // 200 steps at lr 0.1 on f = ||theta||^2 from starts in [-1, 1].
        for seed in 0..8 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut state = AdamState::new(8);
            for _ in 0..200 {
                let grads: Vec<f64> = p.iter().map(|&x| 2.0 * x).collect();
                adam_step(&mut p, &grads, &mut state, 0.1, &AdamHyper::default()).unwrap();
            }
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm < 1e-3, "seed {seed}: |theta| = {norm}");
            for &v in &state.v {
                assert!(v >= 0.0);
            }
        }
    }
}
