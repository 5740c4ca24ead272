//! Shared oracles for the integration suites: central finite differences,
//! a naive convolution, and deterministic synthetic datasets.

#![allow(dead_code)]

use prenet_core::data::{generate_clean_image, synthesize_pair, ImagePair, RainParams};
use prenet_core::tensor::{Scalar, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative-error comparison with the 1e-4 gradient-check convention:
/// |a - b| / max(1, |a|).
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(1.0)
}

pub fn rand_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        shape,
        (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Checks every analytic input gradient of `build` against central finite
/// differences (step 1e-5, 64-bit) at relative tolerance `tol`. The
/// functional under test must be scalar-valued.
pub fn finite_diff_check<F>(name: &str, inputs: &[Tensor<f64>], build: F, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    assert_eq!(
        tape.value(out).numel(),
        1,
        "{name}: functional must be scalar"
    );
    tape.backward(out).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| panic!("{name}: missing gradient"))
                .clone()
        })
        .collect();

    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[i].data()[j];
            let err = rel_err(analytic, fd);
            assert!(
                err < tol,
                "{name}: input {i} element {j}: analytic {analytic} vs fd {fd} (rel {err:.3e})"
            );
        }
    }
}

/// Direct triple-loop 3x3 convolution (zero padding 1), independent of the
/// library's im2col route.
pub fn conv3x3_naive<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let Shape { n, c: ci, h, w } = input.shape();
    let co = weight.shape().n;
    let mut out = Tensor::zeros(Shape::new(n, co, h, w));
    for item in 0..n {
        for o in 0..co {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
                    for i in 0..ci {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = x + kx - 1;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += weight.at(o, i, ky as usize, kx as usize)
                                    * input.at(item, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    let idx = out.index(item, o, y as usize, x as usize);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Deterministic synthetic rain dataset: procedural clean images plus the
/// additive streak model.
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Vec<ImagePair<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let clean = generate_clean_image::<f32>(size, size, &mut rng);
            let params = RainParams {
                streak_count: 55,
                seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
                ..RainParams::default()
            };
            let (rainy, clean) = synthesize_pair(&clean, &params).unwrap();
            ImagePair {
                name: format!("synth_{i}.png"),
                rainy,
                clean,
            }
        })
        .collect()
}
