//! Training objectives and evaluation metrics.
//!
//! Three trainable losses: MSE on the final stage, negative SSIM on the
//! final stage, and recursive negative SSIM weighted per stage. SSIM runs
//! an 11x11 Gaussian window (sigma 1.5) with C1 = (0.01)^2, C2 = (0.03)^2
//! on a [0,1] dynamic range. Filtering zero-pads to keep the map the same
//! size; each local statistic is renormalized by the window mass inside the
//! image, so constant images take their closed-form SSIM value everywhere
//! including the borders.
//!
//! The MSE loss averages over elements rather than summing, so its scale is
//! resolution-invariant and the published learning rate transfers across
//! patch sizes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{filter_same_forward, FilterKernel, Scalar, Tape, Tensor, Var};

/// SSIM window and stability constants (dynamic range L = 1).
#[derive(Debug, Clone)]
pub struct SsimSettings {
    pub window_size: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimSettings {
    fn default() -> Self {
        SsimSettings {
            window_size: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Normalized 2-D Gaussian window; weights sum to 1.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

impl SsimSettings {
    pub fn kernel<T: Scalar>(&self) -> Result<Arc<FilterKernel<T>>> {
        let weights = gaussian_window(self.window_size, self.sigma)
            .into_iter()
            .map(T::from_f64)
            .collect();
        Ok(Arc::new(FilterKernel::new(self.window_size, weights)?))
    }
}

/// Mean of squared differences over all elements; differentiable.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, prediction: Var, target: Var) -> Result<Var> {
    let d = tape.sub(prediction, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Mean local SSIM index between two same-shape tensors, as a scalar var.
/// Symmetric in its arguments and differentiable through both.
pub fn ssim_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    settings: &SsimSettings,
) -> Result<Var> {
    let shape_a = tape.value(a).shape();
    let shape_b = tape.value(b).shape();
    if shape_a != shape_b {
        return Err(Error::shape("ssim", shape_a, shape_b));
    }
    let kernel = settings.kernel::<T>()?;

    // Window mass inside the image, for border renormalization. Constant
    // with respect to the inputs, so no gradient flows through it.
    let mask = filter_same_forward(&Tensor::filled(shape_a, T::one()), &kernel);
    let mask = tape.constant(mask);

    let stat = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let f = tape.filter2d(x, &kernel)?;
        tape.div(f, mask)
    };

    let mu1 = stat(tape, a)?;
    let mu2 = stat(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e11 = stat(tape, aa)?;
    let e22 = stat(tape, bb)?;
    let e12 = stat(tape, ab)?;

    let mu1_sq = tape.mul(mu1, mu1)?;
    let mu2_sq = tape.mul(mu2, mu2)?;
    let mu1_mu2 = tape.mul(mu1, mu2)?;
    let sigma1 = tape.sub(e11, mu1_sq)?;
    let sigma2 = tape.sub(e22, mu2_sq)?;
    let sigma12 = tape.sub(e12, mu1_mu2)?;

    let c1 = T::from_f64(settings.c1);
    let c2 = T::from_f64(settings.c2);
    let two = T::from_f64(2.0);

    let l_num = tape.scale(mu1_mu2, two);
    let l_num = tape.add_scalar(l_num, c1);
    let s_num = tape.scale(sigma12, two);
    let s_num = tape.add_scalar(s_num, c2);
    let num = tape.mul(l_num, s_num)?;

    let l_den = tape.add(mu1_sq, mu2_sq)?;
    let l_den = tape.add_scalar(l_den, c1);
    let s_den = tape.add(sigma1, sigma2)?;
    let s_den = tape.add_scalar(s_den, c2);
    let den = tape.mul(l_den, s_den)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// Negative SSIM between the final estimate and ground truth.
pub fn neg_ssim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    prediction: Var,
    target: Var,
    settings: &SsimSettings,
) -> Result<Var> {
    let s = ssim_on_tape(tape, prediction, target, settings)?;
    Ok(tape.scale(s, -T::one()))
}

/// Recursive supervision: -sum_t lambda_t * ssim(x^t, gt) over all stage
/// estimates.
pub fn rec_neg_ssim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    estimates: &[Var],
    target: Var,
    lambdas: &[f64],
    settings: &SsimSettings,
) -> Result<Var> {
    if estimates.len() != lambdas.len() {
        return Err(Error::Contract(format!(
            "{} stage estimates but {} lambdas",
            estimates.len(),
            lambdas.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Contract("empty stage trace".into()));
    }
    let mut acc: Option<Var> = None;
    for (&est, &lambda) in estimates.iter().zip(lambdas) {
        let s = ssim_on_tape(tape, est, target, settings)?;
        let weighted = tape.scale(s, T::from_f64(lambda));
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted)?,
        });
    }
    Ok(tape.scale(acc.expect("at least one stage"), -T::one()))
}

/// Objective selection for training.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Mse,
    NegSsim,
    RecNegSsim { lambdas: Vec<f64> },
}

impl LossSpec {
    /// Published stage weights: 0.5 for every intermediate stage, 1.5 for
    /// the final one.
    pub fn published_lambdas(stages_t: usize) -> Vec<f64> {
        let mut v = vec![0.5; stages_t.saturating_sub(1)];
        v.push(1.5);
        v
    }

    pub fn validate(&self, stages_t: usize) -> Result<()> {
        if let LossSpec::RecNegSsim { lambdas } = self {
            if lambdas.len() != stages_t {
                return Err(Error::Config(format!(
                    "{} lambdas for {stages_t} stages",
                    lambdas.len()
                )));
            }
            if lambdas.iter().any(|&l| l <= 0.0) {
                return Err(Error::Config("all lambdas must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Mse => "mse",
            LossSpec::NegSsim => "neg_ssim",
            LossSpec::RecNegSsim { .. } => "rec_neg_ssim",
        }
    }

    /// Builds the loss over a forward trace. MSE and negative SSIM supervise
    /// only the final estimate; recursive SSIM supervises every stage.
    pub fn on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        estimates: &[Var],
        target: Var,
        settings: &SsimSettings,
    ) -> Result<Var> {
        let last = *estimates
            .last()
            .ok_or_else(|| Error::Contract("empty stage trace".into()))?;
        match self {
            LossSpec::Mse => mse_loss(tape, last, target),
            LossSpec::NegSsim => neg_ssim_loss(tape, last, target, settings),
            LossSpec::RecNegSsim { lambdas } => {
                rec_neg_ssim_loss(tape, estimates, target, lambdas, settings)
            }
        }
    }
}

// ── Evaluation metrics ───────────────────────────────────────────────

/// Mean squared error accumulated in f64.
pub fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB over all RGB elements in [0,1];
/// identical inputs report +infinity.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mse = mse_value(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// SSIM as a plain value (no gradients).
pub fn ssim_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, settings: &SsimSettings) -> Result<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let s = ssim_on_tape(&mut tape, av, bv, settings)?;
    Ok(tape.scalar_value(s).as_f64())
}
