//! Mini-batch training loop with KL annealing, curriculum index sampling,
//! teacher forcing, and per-epoch telemetry.
//!
//! One iteration: draw the batch, draw one index set (shared by every
//! fusion site in the batch), encode past and future, form the posterior,
//! reparameterize, decode with teacher forcing at the epoch's probability,
//! assemble the annealed loss, backprop, clip, and take an Adam step.
//! Epochs are derived from iterations as `floor(iter * batch / n_records)`.

use crate::data::DatasetRecord;
use crate::losses;
use crate::model::{reparameterize, DecodePlan, MixMatchModel, ModelConfig, ModelError};
use crate::numfmt::sig9;
use crate::optim::{adam_step, clip_gradients, AdamConfig, AdamState};
use crate::rng::{standard_normal_vec, substream, Stream};
use crate::sampling::{curriculum_indices, CurriculumSchedule, FusionMode, IndexSet};
use crate::skeleton::{align_root, forward_kinematics, Skeleton};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kinematics(#[from] crate::quaternion::KinematicsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Logistic KL-annealing weight `1 / (1 + exp(-k (it - it0)))`.
#[derive(Debug, Clone, Copy)]
pub struct AnnealSchedule {
    pub midpoint: f64,
    pub steepness: f64,
}

impl AnnealSchedule {
    /// Midpoint at 25% of the run, steepness `10 / total`.
    pub fn for_total_iterations(total: u64) -> Self {
        let total = total.max(1) as f64;
        AnnealSchedule { midpoint: total / 4.0, steepness: 10.0 / total }
    }

    pub fn lambda(&self, iteration: u64) -> f64 {
        1.0 / (1.0 + (-self.steepness * (iteration as f64 - self.midpoint)).exp())
    }
}

/// Linear teacher-forcing decay: probability 1 at epoch 0, exactly 0 from
/// `epochs_to_zero` on.
#[derive(Debug, Clone, Copy)]
pub struct TeacherForcingSchedule {
    pub epochs_to_zero: usize,
}

impl TeacherForcingSchedule {
    pub fn probability(&self, epoch: usize) -> f64 {
        if epoch >= self.epochs_to_zero {
            0.0
        } else {
            1.0 - epoch as f64 / self.epochs_to_zero as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub hidden_size: usize,
    pub alpha: f64,
    pub curriculum_step: usize,
    pub clip_max_norm: f64,
    pub teacher_epochs_to_zero: usize,
    pub seed: u64,
    pub fusion_mode: FusionMode,
    pub residual_velocity: bool,
    pub use_rot: bool,
    pub use_skl: bool,
    pub use_kl: bool,
    /// Latent draws per probe-diversity measurement.
    pub probe_k: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.001,
            batch_size: 64,
            iterations: 3000,
            hidden_size: 64,
            alpha: 0.5,
            curriculum_step: 10,
            clip_max_norm: 5.0,
            teacher_epochs_to_zero: 150,
            seed: 0,
            fusion_mode: FusionMode::Mm,
            residual_velocity: false,
            use_rot: true,
            use_skl: true,
            use_kl: true,
            probe_k: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.hidden_size == 0 {
            return Err(TrainError::BadConfig("batch and hidden sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::BadConfig(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.curriculum_step == 0 || self.teacher_epochs_to_zero == 0 {
            return Err(TrainError::BadConfig("schedule steps must be positive".into()));
        }
        if self.clip_max_norm <= 0.0 {
            return Err(TrainError::BadConfig("clip max-norm must be positive".into()));
        }
        if !self.use_rot && !self.use_skl {
            return Err(TrainError::BadConfig("at least one reconstruction term required".into()));
        }
        Ok(())
    }
}

/// One telemetry row per epoch. Loss columns are epoch means.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub iter: u64,
    pub loss_rot: f64,
    pub loss_skl: f64,
    pub loss_kl: f64,
    pub lambda: f64,
    pub p_tf: f64,
    pub probe_diversity: f64,
}

pub const TELEMETRY_HEADER: &str = "epoch,iter,loss_rot,loss_skl,loss_kl,lambda,p_tf,probe_diversity";

pub fn telemetry_to_csv(rows: &[TelemetryRow]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.iter,
            sig9(r.loss_rot),
            sig9(r.loss_skl),
            sig9(r.loss_kl),
            sig9(r.lambda),
            sig9(r.p_tf),
            sig9(r.probe_diversity)
        )
        .unwrap();
    }
    out
}

pub fn write_telemetry(rows: &[TelemetryRow], path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, telemetry_to_csv(rows))?;
    Ok(())
}

pub struct TrainInputs<'a> {
    pub skeleton: &'a Skeleton,
    /// Observed prefix length t; frames beyond it are the prediction target.
    pub observed_len: usize,
    pub records: &'a [DatasetRecord],
    /// Fixed observation for the per-epoch decoder-input diversity probe;
    /// defaults to the first record.
    pub probe: Option<&'a DatasetRecord>,
    /// Iterations after which to snapshot the model (for progress curves).
    pub snapshot_at: &'a [u64],
}

impl<'a> TrainInputs<'a> {
    pub fn new(
        skeleton: &'a Skeleton,
        observed_len: usize,
        records: &'a [DatasetRecord],
    ) -> Self {
        TrainInputs { skeleton, observed_len, records, probe: None, snapshot_at: &[] }
    }
}

pub struct TrainOutput {
    pub model: MixMatchModel,
    pub telemetry: Vec<TelemetryRow>,
    /// `(iterations_done, model)` pairs in `snapshot_at` order.
    pub snapshots: Vec<(u64, MixMatchModel)>,
}

/// Precomputed per-record targets.
struct PreparedRecord {
    /// `4J` floats per observed frame.
    observed: Vec<Vec<f64>>,
    /// `4J` floats per future frame.
    future: Vec<Vec<f64>>,
    /// `3(J-1)` aligned non-root joint positions per future frame.
    future_positions: Vec<Vec<f64>>,
}

fn prepare(
    skeleton: &Skeleton,
    observed_len: usize,
    record: &DatasetRecord,
) -> Result<PreparedRecord, TrainError> {
    let frames = &record.sequence.frames;
    if frames.len() <= observed_len {
        return Err(TrainError::BadConfig(format!(
            "record {} has {} frames, observed length is {}",
            record.id,
            frames.len(),
            observed_len
        )));
    }
    let observed = frames[..observed_len].iter().map(|p| p.flatten()).collect();
    let future: Vec<Vec<f64>> = frames[observed_len..].iter().map(|p| p.flatten()).collect();
    let mut future_positions = Vec::with_capacity(future.len());
    for pose in &frames[observed_len..] {
        let pos = forward_kinematics(skeleton, &align_root(pose))?;
        let mut flat = Vec::with_capacity(3 * (pos.len() - 1));
        for p in &pos[1..] {
            flat.extend_from_slice(p);
        }
        future_positions.push(flat);
    }
    Ok(PreparedRecord { observed, future, future_positions })
}

fn batch_tensor(prepared: &[PreparedRecord], idx: &[usize], frame: usize, observed: bool) -> Tensor {
    let cols = if observed {
        prepared[idx[0]].observed[frame].len()
    } else {
        prepared[idx[0]].future[frame].len()
    };
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        let row = if observed { &prepared[i].observed[frame] } else { &prepared[i].future[frame] };
        data.extend_from_slice(row);
    }
    Tensor::matrix(idx.len(), cols, data)
}

fn batch_positions(prepared: &[PreparedRecord], idx: &[usize], frame: usize) -> Tensor {
    let cols = prepared[idx[0]].future_positions[frame].len();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&prepared[i].future_positions[frame]);
    }
    Tensor::matrix(idx.len(), cols, data)
}

/// Run the training loop. Deterministic for a fixed config: every random
/// draw comes from a named substream of `config.seed`.
pub fn train(config: &TrainingConfig, inputs: &TrainInputs) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if inputs.records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let joints = inputs.skeleton.joint_count();
    let horizon = inputs.records[0].sequence.len() - inputs.observed_len;
    let model_config = ModelConfig {
        hidden_size: config.hidden_size,
        joints,
        alpha: config.alpha,
        fusion_mode: config.fusion_mode,
        residual_velocity: config.residual_velocity,
    };
    let mut model = MixMatchModel::init(model_config, config.seed)?;
    if config.iterations == 0 {
        return Ok(TrainOutput { model, telemetry: Vec::new(), snapshots: Vec::new() });
    }

    let prepared: Vec<PreparedRecord> = inputs
        .records
        .iter()
        .map(|r| prepare(inputs.skeleton, inputs.observed_len, r))
        .collect::<Result<_, _>>()?;
    let probe_record = inputs.probe.unwrap_or(&inputs.records[0]);
    let probe_observed = probe_record.sequence.frames[..inputs.observed_len].to_vec();

    let n = prepared.len();
    let batch = config.batch_size.min(n);
    let anneal = AnnealSchedule::for_total_iterations(config.iterations);
    let teacher = TeacherForcingSchedule { epochs_to_zero: config.teacher_epochs_to_zero };
    let curriculum = CurriculumSchedule::new(config.alpha, config.hidden_size, config.curriculum_step)
        .map_err(ModelError::Sampling)?;
    let has_posterior = config.fusion_mode != FusionMode::Rhp;
    let zd = model.config.z_dim();

    let mut params = model.param_tensors();
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig { lr: config.learning_rate, ..AdamConfig::default() };

    let mut telemetry = Vec::new();
    let mut snapshots = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(config.seed, Stream::Batch, 0));
    let mut cursor = 0usize;
    let mut epoch = 0usize;
    let mut epoch_sums = [0.0f64; 3];
    let mut epoch_iters = 0u64;
    let mut epoch_last_lambda = 0.0;

    for it in 0..config.iterations {
        let it_epoch = (it as usize * batch) / n;
        if it_epoch != epoch {
            telemetry.push(finish_epoch(
                &model,
                config,
                &probe_observed,
                epoch,
                it - 1,
                &epoch_sums,
                epoch_iters,
                epoch_last_lambda,
                teacher.probability(epoch),
            )?);
            epoch = it_epoch;
            epoch_sums = [0.0; 3];
            epoch_iters = 0;
            order.shuffle(&mut substream(config.seed, Stream::Batch, epoch as u64));
            cursor = 0;
        }

        // batch indices, wrapping within the shuffled order
        let idx: Vec<usize> = (0..batch).map(|i| order[(cursor + i) % n]).collect();
        cursor = (cursor + batch) % n;

        let set = curriculum_indices(
            &curriculum,
            epoch,
            &mut substream(config.seed, Stream::Curriculum, it),
        );
        let p_tf = teacher.probability(epoch);
        let mut teacher_rng = substream(config.seed, Stream::Teacher, it);
        let coins: Vec<bool> = (0..horizon).map(|_| teacher_rng.gen::<f64>() < p_tf).collect();
        let lambda = anneal.lambda(it);

        let (rot, skl, kl) = training_step(
            &model,
            config,
            inputs.skeleton,
            &prepared,
            &idx,
            &set,
            &coins,
            lambda,
            it,
            horizon,
            zd,
            has_posterior,
            &mut params,
            &mut adam,
            &adam_cfg,
        )
        .map_err(|e| match e {
            TrainError::Model(ModelError::Tape(crate::tape::TapeError::NonFinite { op })) => {
                TrainError::Diverged { iteration: it, detail: format!("non-finite value in {op}") }
            }
            other => other,
        })?;

        // write the step back into the model
        for (slot, value) in model.params_mut().into_iter().zip(&params) {
            *slot = value.clone();
        }

        epoch_sums[0] += rot;
        epoch_sums[1] += skl;
        epoch_sums[2] += kl;
        epoch_iters += 1;
        epoch_last_lambda = lambda;
        if inputs.snapshot_at.contains(&(it + 1)) {
            snapshots.push((it + 1, model.clone()));
        }
    }

    telemetry.push(finish_epoch(
        &model,
        config,
        &probe_observed,
        epoch,
        config.iterations - 1,
        &epoch_sums,
        epoch_iters,
        epoch_last_lambda,
        teacher.probability(epoch),
    )?);

    Ok(TrainOutput { model, telemetry, snapshots })
}

#[allow(clippy::too_many_arguments)]
fn training_step(
    model: &MixMatchModel,
    config: &TrainingConfig,
    skeleton: &Skeleton,
    prepared: &[PreparedRecord],
    idx: &[usize],
    set: &IndexSet,
    coins: &[bool],
    lambda: f64,
    it: u64,
    horizon: usize,
    zd: usize,
    has_posterior: bool,
    params: &mut [Tensor],
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
) -> Result<(f64, f64, f64), TrainError> {
    let rows = idx.len();
    let observed_len = prepared[idx[0]].observed.len();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let param_ids = tape.param_ids();

    let observed: Vec<Tensor> =
        (0..observed_len).map(|f| batch_tensor(prepared, idx, f, true)).collect();
    let future: Vec<Tensor> =
        (0..horizon).map(|f| batch_tensor(prepared, idx, f, false)).collect();
    let gt_positions: Vec<Tensor> =
        (0..horizon).map(|f| batch_positions(prepared, idx, f)).collect();

    let h_t = bound.encode_past(&mut tape, &observed)?;

    let mut reparam_rng = substream(config.seed, Stream::Reparam, it);
    let (z, lpp_z, kl_node) = if has_posterior {
        let h_fut = bound.encode_future(&mut tape, &future)?;
        let (mu, log_var) = bound.posterior(&mut tape, h_t, h_fut, set)?;
        let kl = losses::loss_kl_tape(&mut tape, mu, log_var).map_err(ModelError::Tape)?;
        if config.fusion_mode == FusionMode::Lpp {
            let zs: Result<Vec<_>, _> = (0..horizon)
                .map(|_| {
                    let eps =
                        Tensor::matrix(rows, zd, standard_normal_vec(&mut reparam_rng, rows * zd));
                    reparameterize(&mut tape, mu, log_var, &eps)
                })
                .collect();
            (None, Some(zs.map_err(ModelError::Tape)?), Some(kl))
        } else {
            let eps = Tensor::matrix(rows, zd, standard_normal_vec(&mut reparam_rng, rows * zd));
            let z = reparameterize(&mut tape, mu, log_var, &eps).map_err(ModelError::Tape)?;
            (Some(z), None, Some(kl))
        }
    } else {
        // additive fusion trains on raw noise and carries no prior term
        let eps = Tensor::matrix(rows, zd, standard_normal_vec(&mut reparam_rng, rows * zd));
        (Some(tape.constant(eps)), None, None)
    };

    let h_z = match z {
        Some(z) => bound.latent_hidden(&mut tape, h_t, z, set)?,
        None => h_t,
    };

    let last_observed = batch_tensor(prepared, idx, observed_len - 1, true);
    let plan = DecodePlan {
        horizon,
        last_observed,
        teacher_frames: Some(&future),
        teacher_coins: coins,
        lpp_step_z: lpp_z.as_deref(),
    };
    let outputs = bound.decode(&mut tape, h_z, &plan)?;

    let rot = losses::loss_rot_tape(&mut tape, &outputs, &future).map_err(ModelError::Tape)?;
    let skl = losses::loss_skl_tape(&mut tape, skeleton, &outputs, &gt_positions)
        .map_err(ModelError::Tape)?;
    let recon = match (config.use_rot, config.use_skl) {
        (true, true) => tape.add(rot, skl).map_err(ModelError::Tape)?,
        (true, false) => rot,
        (false, true) => skl,
        (false, false) => unreachable!("validated"),
    };
    let (total, kl_value) = match kl_node {
        Some(kl) if config.use_kl => (
            losses::total_loss_tape(&mut tape, recon, kl, lambda).map_err(ModelError::Tape)?,
            tape.value(kl).item(),
        ),
        Some(kl) => (recon, tape.value(kl).item()),
        None => (recon, 0.0),
    };

    let total_value = tape.value(total).item();
    if !total_value.is_finite() {
        return Err(TrainError::Diverged { iteration: it, detail: "non-finite loss".into() });
    }

    let grads_by_node = tape.backward(total).map_err(ModelError::Tape)?;
    let mut grads: Vec<Tensor> = param_ids
        .iter()
        .map(|id| grads_by_node.get_or_zeros(*id, tape.value(*id).shape()))
        .collect();
    clip_gradients(&mut grads, config.clip_max_norm);
    adam_step(params, &grads, adam, adam_cfg);

    Ok((tape.value(rot).item(), tape.value(skl).item(), kl_value))
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &MixMatchModel,
    config: &TrainingConfig,
    probe_observed: &[crate::skeleton::Pose],
    epoch: usize,
    iter: u64,
    sums: &[f64; 3],
    iters: u64,
    lambda: f64,
    p_tf: f64,
) -> Result<TelemetryRow, TrainError> {
    let denom = iters.max(1) as f64;
    let mut probe_rng = substream(config.seed, Stream::Probe, epoch as u64);
    let set = crate::sampling::sample_indices(config.hidden_size, config.alpha, &mut probe_rng)
        .map_err(ModelError::Sampling)?;
    let hz = model.probe_hidden(probe_observed, config.probe_k, &set, &mut probe_rng)?;
    let diversity = crate::metrics::mean_pairwise_distance(&hz);
    Ok(TelemetryRow {
        epoch,
        iter,
        loss_rot: sums[0] / denom,
        loss_skl: sums[1] / denom,
        loss_kl: sums[2] / denom,
        lambda,
        p_tf,
        probe_diversity: diversity,
    })
}
