//! ADAM training of a progressive network under a selected objective.
//!
//! The loop follows the published protocol: random aligned patches, ADAM
//! with milestone learning-rate decay, one epoch = ceil(dataset/batch)
//! random batches. Metrics go to a tab-separated append-only log; the
//! checkpoint written at every epoch end carries optimizer state so
//! interrupted runs resume exactly.

mod adam;
mod sampler;

pub use adam::{adam_step, lr_at, AdamHyper, AdamState};
pub use sampler::sample_patch_batch;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::loss::{psnr, ssim_value, LossSpec, SsimSettings};
use crate::net::{
    self, forward, load_checkpoint_full, register_params, save_checkpoint_with_trainer,
    NetworkConfig, ParameterSet, TrainerState,
};
use crate::tensor::Tape;

/// Optimization hyperparameters. Defaults are the published protocol:
/// 100x100 patches, batch 18, 100 epochs, lr 1e-3 decayed by 0.2 at epochs
/// 30/50/80, ADAM (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Scheduled checkpoints every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Leading dataset pairs evaluated full-frame after each epoch
    /// (0 disables validation rows in the log).
    pub val_pairs: usize,
    /// Fail on images smaller than the patch instead of skipping them.
    pub strict_patches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 100,
            batch_size: 18,
            epochs: 100,
            lr_initial: 1e-3,
            lr_milestones: vec![30, 50, 80],
            lr_decay: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            val_pairs: 2,
            strict_patches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("patch and batch sizes must be positive".into()));
        }
        if self.lr_initial <= 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config("invalid ADAM hyperparameters".into()));
        }
        for pair in self.lr_milestones.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(
                    "lr milestones must be strictly increasing".into(),
                ));
            }
        }
        if self.epochs > 0 {
            if let Some(&last) = self.lr_milestones.last() {
                if last >= self.epochs {
                    return Err(Error::Config(format!(
                        "lr milestone {last} must be below epochs ({})",
                        self.epochs
                    )));
                }
            }
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Loss of the first and last optimization steps (None when no steps ran).
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Per-epoch batch stream seed; resuming at an epoch boundary reproduces
/// the uninterrupted run's batches exactly.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15)))
}

fn mean_metrics(
    params: &ParameterSet<f32>,
    config: &NetworkConfig,
    pairs: &[ImagePair<f32>],
    settings: &SsimSettings,
) -> Result<(f64, f64)> {
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for pair in pairs {
        let trace = forward(params, config, &pair.rainy, None)?;
        let derained = trace.final_estimate().clamped(0.0, 1.0);
        psnr_acc += psnr(&derained, &pair.clean)?;
        ssim_acc += ssim_value(&derained, &pair.clean, settings)?;
    }
    let n = pairs.len() as f64;
    Ok((psnr_acc / n, ssim_acc / n))
}

/// Trains a network and returns the final checkpoint path. With
/// `epochs = 0` only the initialization checkpoint is written and the
/// dataset may be empty. A non-finite loss aborts the run; the last
/// epoch-end checkpoint stays on disk.
pub fn train(
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    loss_spec: &LossSpec,
    dataset: &[ImagePair<f32>],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    net_config.validate()?;
    train_config.validate()?;
    loss_spec.validate(net_config.stages_t)?;

    let (mut params, mut state, start_epoch) = match resume {
        None => {
            let params = net::build::<f32>(net_config, train_config.seed)?;
            let n = params.total_parameters();
            (params, AdamState::<f32>::new(n), 0usize)
        }
        Some(path) => {
            let (params, loaded_cfg, trainer) = load_checkpoint_full(path)?;
            if loaded_cfg != *net_config {
                return Err(Error::Format(format!(
                    "checkpoint config {loaded_cfg:?} does not match requested {net_config:?}"
                )));
            }
            let trainer = trainer.ok_or_else(|| {
                Error::Format("checkpoint has no trainer section; cannot resume".into())
            })?;
            let state = AdamState {
                m: trainer.adam_m,
                v: trainer.adam_v,
                step: trainer.step,
            };
            (params, state, trainer.epoch as usize)
        }
    };

    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.tsv");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;

    let latest_path = out_dir.join("latest.prnc");
    let write_state =
        |params: &ParameterSet<f32>, state: &AdamState<f32>, epoch: usize, path: &Path| {
            let trainer = TrainerState {
                epoch: epoch as u32,
                step: state.step,
                adam_m: state.m.clone(),
                adam_v: state.v.clone(),
            };
            save_checkpoint_with_trainer(params, net_config, path, Some(&trainer))
        };
    // A last-good checkpoint exists from the start.
    write_state(&params, &state, start_epoch, &latest_path)?;

    if train_config.epochs == 0 || start_epoch >= train_config.epochs {
        let final_path = out_dir.join("final.prnc");
        write_state(&params, &state, start_epoch, &final_path)?;
        return Ok(TrainOutcome {
            final_checkpoint: final_path,
            log_path,
            first_loss: None,
            last_loss: None,
        });
    }

    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    let undersized = dataset
        .iter()
        .filter(|p| {
            let s = p.rainy.shape();
            s.h < train_config.patch_size || s.w < train_config.patch_size
        })
        .count();
    if undersized > 0 && !train_config.strict_patches {
        writeln!(
            log,
            "# warning: {undersized} image(s) smaller than patch size {} skipped",
            train_config.patch_size
        )?;
    }

    let settings = SsimSettings::default();
    let hyper = train_config.hyper();
    let iters_per_epoch = dataset.len().div_ceil(train_config.batch_size);
    let mut first_loss = None;
    let mut last_loss = None;
    let mut global_step = state.step;

    for epoch in start_epoch..train_config.epochs {
        let lr = lr_at(epoch, train_config);
        let mut rng = epoch_rng(train_config.seed, epoch);
        let mut epoch_loss = f64::NAN;
        for _ in 0..iters_per_epoch {
            let (rainy, clean) = sample_patch_batch(
                dataset,
                train_config.patch_size,
                train_config.batch_size,
                &mut rng,
                train_config.strict_patches,
            )?;
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &params, true);
            let yv = tape.leaf(rainy, false);
            let gv = tape.leaf(clean, false);
            let trace = net::forward_on_tape(&mut tape, &pv, net_config, yv, None)?;
            let loss_var = loss_spec.on_tape(&mut tape, &trace.estimates, gv, &settings)?;
            let loss = tape.scalar_value(loss_var) as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}; last-good checkpoint: {}",
                    latest_path.display()
                )));
            }
            tape.backward(loss_var)?;
            let grads = pv.collect_gradients(&tape);
            drop(tape);

            let mut flat = params.flatten();
            adam_step(&mut flat, &grads, &mut state, lr, &hyper)?;
            params.assign_from_flat(&flat)?;

            global_step += 1;
            first_loss.get_or_insert(loss);
            last_loss = Some(loss);
            epoch_loss = loss;
            writeln!(log, "{epoch}\t{global_step}\t{loss}\t{lr}")?;
        }

        if train_config.val_pairs > 0 {
            let n = train_config.val_pairs.min(dataset.len());
            let (val_psnr, val_ssim) =
                mean_metrics(&params, net_config, &dataset[..n], &settings)?;
            writeln!(
                log,
                "{epoch}\t{global_step}\t{epoch_loss}\t{lr}\t{val_psnr}\t{val_ssim}"
            )?;
        }

        write_state(&params, &state, epoch + 1, &latest_path)?;
        if train_config.checkpoint_every > 0 && (epoch + 1) % train_config.checkpoint_every == 0 {
            write_state(
                &params,
                &state,
                epoch + 1,
                &out_dir.join(format!("ckpt_epoch_{}.prnc", epoch + 1)),
            )?;
        }
    }

    let final_path = out_dir.join("final.prnc");
    write_state(&params, &state, train_config.epochs, &final_path)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        log_path,
        first_loss,
        last_loss,
    })
}
