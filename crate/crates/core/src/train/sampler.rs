//! Aligned random patch sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Cuts `batch_size` aligned patches: the same spatial window from a rainy
/// image and its ground truth. Pairs smaller than the patch are skipped, or
/// rejected outright in strict mode. Draw order per sample is fixed
/// (pair index, then y offset, then x offset), so a seeded generator yields
/// identical crops across runs.
pub fn sample_patch_batch<T: Scalar>(
    pairs: &[ImagePair<T>],
    patch_size: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    strict: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if patch_size == 0 || batch_size == 0 {
        return Err(Error::Config("patch and batch sizes must be positive".into()));
    }
    let eligible: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let s = p.rainy.shape();
            s.h >= patch_size && s.w >= patch_size
        })
        .map(|(i, _)| i)
        .collect();
    if strict && eligible.len() != pairs.len() {
        let small: Vec<&str> = pairs
            .iter()
            .filter(|p| {
                let s = p.rainy.shape();
                s.h < patch_size || s.w < patch_size
            })
            .map(|p| p.name.as_str())
            .collect();
        return Err(Error::Validation(format!(
            "images smaller than patch size {patch_size}: {small:?}"
        )));
    }
    if eligible.is_empty() {
        return Err(Error::Validation(format!(
            "no image is at least {patch_size}x{patch_size}"
        )));
    }

    let out_shape = Shape::new(batch_size, 3, patch_size, patch_size);
    let mut rainy = Tensor::zeros(out_shape);
    let mut clean = Tensor::zeros(out_shape);
    for b in 0..batch_size {
        let pair = &pairs[eligible[rng.gen_range(0..eligible.len())]];
        let s = pair.rainy.shape();
        let y0 = rng.gen_range(0..=s.h - patch_size);
        let x0 = rng.gen_range(0..=s.w - patch_size);
        for c in 0..3 {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    let idx = rainy.index(b, c, y, x);
                    rainy.data_mut()[idx] = pair.rainy.at(0, c, y0 + y, x0 + x);
                    clean.data_mut()[idx] = pair.clean.at(0, c, y0 + y, x0 + x);
                }
            }
        }
    }
    Ok((rainy, clean))
}
