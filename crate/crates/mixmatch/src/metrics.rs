//! Evaluation: pairwise diversity, classifier-based quality, best-of-K
//! Euler error, the alpha sweep, and mode coverage on the synthetic data.
//!
//! Quality deliberately never feeds back into training: the binary
//! classifier is trained after the fact on frozen pools and its accuracy is
//! mapped to `100 * (1 - accuracy)`, so indistinguishable samples score 50
//! and perfectly detectable ones score 0.

use crate::data::DatasetRecord;
use crate::gru::{GruCell, Linear};
use crate::model::{MixMatchModel, ModelError};
use crate::numfmt::sig9;
use crate::rng::{substream, Stream};
use crate::sampling::sample_indices;
use crate::skeleton::{forward_kinematics, MotionSequence, Skeleton};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::training::{train, TrainError, TrainInputs, TrainingConfig};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("diversity needs at least 2 motions, got {0}")]
    TooFewMotions(usize),
    #[error("motion shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("pool too small: {0}")]
    PoolTooSmall(String),
    #[error("accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("horizon {got} out of range for prediction length {len}")]
    HorizonOutOfRange { got: usize, len: usize },
    #[error("missing mode continuations: {0}")]
    MissingModes(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error(transparent)]
    Kinematics(#[from] crate::quaternion::KinematicsError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Representation in which motion diversity is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversitySpace {
    /// Flattened quaternion components, `T x 4J` per motion.
    Quaternions,
    /// Forward-kinematics joint positions, `T x 3J` per motion.
    Positions,
}

impl std::fmt::Display for DiversitySpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiversitySpace::Quaternions => "quaternions",
            DiversitySpace::Positions => "fk-positions",
        })
    }
}

/// Mean distance from each row to every other row:
/// `(1 / (K (K-1))) * sum_{i != j} ||r_i - r_j||`.
pub fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let k = rows.len();
    if k < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let d: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sum += d;
        }
    }
    2.0 * sum / (k * (k - 1)) as f64
}

/// Pairwise diversity of `K >= 2` equally shaped motions in the chosen space.
pub fn diversity(
    motions: &[MotionSequence],
    space: DiversitySpace,
    skeleton: &Skeleton,
) -> Result<f64, MetricsError> {
    if motions.len() < 2 {
        return Err(MetricsError::TooFewMotions(motions.len()));
    }
    let (t, j) = (motions[0].len(), motions[0].joint_count());
    for m in motions {
        if m.len() != t || m.joint_count() != j {
            return Err(MetricsError::ShapeMismatch(format!(
                "expected {t} frames x {j} joints, got {} x {}",
                m.len(),
                m.joint_count()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = match space {
        DiversitySpace::Quaternions => motions.iter().map(|m| m.flatten()).collect(),
        DiversitySpace::Positions => motions
            .iter()
            .map(|m| {
                let mut flat = Vec::with_capacity(t * 3 * j);
                for frame in &m.frames {
                    for p in forward_kinematics(skeleton, frame)? {
                        flat.extend_from_slice(&p);
                    }
                }
                Ok::<_, MetricsError>(flat)
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(mean_pairwise_distance(&rows))
}

/// Diversity of raw hidden vectors (decoder inputs).
pub fn diversity_hidden(rows: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if rows.len() < 2 {
        return Err(MetricsError::TooFewMotions(rows.len()));
    }
    Ok(mean_pairwise_distance(rows))
}

// ── Quality classifier ───────────────────────────────────────────────────

/// Recurrent binary discriminator: GRU over flattened poses, then three
/// affine layers with rectifiers and a terminal sigmoid.
#[derive(Debug, Clone)]
pub struct QualityClassifier {
    pub gru: GruCell,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierConfig {
    pub hidden_size: usize,
    pub mlp1: usize,
    pub mlp2: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Held-out fraction of the pool, split after a seeded shuffle.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        // shape ratios follow the full-scale 1024 -> 512 -> 128 -> 1 stack
        ClassifierConfig {
            hidden_size: 64,
            mlp1: 32,
            mlp2: 8,
            iterations: 1000,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl QualityClassifier {
    fn init(frame_dim: usize, cfg: &ClassifierConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        QualityClassifier {
            gru: GruCell::init(frame_dim, cfg.hidden_size, rng),
            l1: Linear::init(cfg.hidden_size, cfg.mlp1, rng),
            l2: Linear::init(cfg.mlp1, cfg.mlp2, rng),
            l3: Linear::init(cfg.mlp2, 1, rng),
        }
    }

    fn params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        self.gru.collect("gru", &mut named);
        self.l1.collect("l1", &mut named);
        self.l2.collect("l2", &mut named);
        self.l3.collect("l3", &mut named);
        named.into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn set_params(&mut self, values: &[Tensor]) {
        let mut muts: Vec<&mut Tensor> = Vec::new();
        self.gru.collect_mut(&mut muts);
        self.l1.collect_mut(&mut muts);
        self.l2.collect_mut(&mut muts);
        self.l3.collect_mut(&mut muts);
        for (slot, v) in muts.into_iter().zip(values) {
            *slot = v.clone();
        }
    }

    /// Logits for a batch of motions given as per-step `(B, 4J)` tensors.
    fn logits(&self, tape: &mut Tape, steps: &[Tensor]) -> Result<NodeId, MetricsError> {
        let bound_gru = self.gru.bind(tape);
        let (l1, l2, l3) = (self.l1.bind(tape), self.l2.bind(tape), self.l3.bind(tape));
        let rows = steps[0].rows();
        let mut h = bound_gru.zero_state(tape, rows);
        for s in steps {
            let x = tape.constant(s.clone());
            h = bound_gru.step(tape, x, h)?;
        }
        let a = l1.apply(tape, h)?;
        let a = tape.relu(a)?;
        let b = l2.apply(tape, a)?;
        let b = tape.relu(b)?;
        Ok(l3.apply(tape, b)?)
    }

    /// Probability that each motion is real.
    pub fn predict(&self, motions: &[MotionSequence]) -> Result<Vec<f64>, MetricsError> {
        let steps = motion_steps(motions)?;
        let mut tape = Tape::new();
        let logit = self.logits(&mut tape, &steps)?;
        let sig = tape.sigmoid(logit)?;
        Ok(tape.value(sig).data().to_vec())
    }
}

/// Per-step `(B, 4J)` tensors for a batch of equally shaped motions.
fn motion_steps(motions: &[MotionSequence]) -> Result<Vec<Tensor>, MetricsError> {
    if motions.is_empty() {
        return Err(MetricsError::PoolTooSmall("no motions".into()));
    }
    let (t, j) = (motions[0].len(), motions[0].joint_count());
    for m in motions {
        if m.len() != t || m.joint_count() != j {
            return Err(MetricsError::ShapeMismatch(format!(
                "expected {t} frames x {j} joints, got {} x {}",
                m.len(),
                m.joint_count()
            )));
        }
    }
    Ok((0..t)
        .map(|f| {
            let mut data = Vec::with_capacity(motions.len() * 4 * j);
            for m in motions {
                data.extend(m.frames[f].flatten());
            }
            Tensor::matrix(motions.len(), 4 * j, data)
        })
        .collect())
}

/// Train the discriminator on balanced real/generated pools (each pool is
/// truncated to the smaller size) with momentum SGD, and report held-out
/// accuracy. The generator is never touched.
pub fn train_quality_classifier(
    real: &[MotionSequence],
    generated: &[MotionSequence],
    cfg: &ClassifierConfig,
) -> Result<(QualityClassifier, f64), MetricsError> {
    let n = real.len().min(generated.len());
    if n == 0 {
        return Err(MetricsError::PoolTooSmall("both pools must be non-empty".into()));
    }
    let mut pool: Vec<(&MotionSequence, f64)> = Vec::with_capacity(2 * n);
    pool.extend(real[..n].iter().map(|m| (m, 1.0)));
    pool.extend(generated[..n].iter().map(|m| (m, 0.0)));

    let mut rng = substream(cfg.seed, Stream::Classifier, 0);
    pool.shuffle(&mut rng);
    let n_test = ((pool.len() as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test == pool.len() {
        return Err(MetricsError::PoolTooSmall(format!(
            "pool of {} cannot give a {} test fraction",
            pool.len(),
            cfg.test_fraction
        )));
    }
    let (test, training) = pool.split_at(n_test);

    let frame_dim = 4 * training[0].0.joint_count();
    let mut classifier = QualityClassifier::init(frame_dim, cfg, &mut rng);
    let mut params = classifier.params();
    let mut opt = crate::optim::SgdMomentum::new(&params, cfg.learning_rate, cfg.momentum);

    let mut order: Vec<usize> = (0..training.len()).collect();
    let batch = cfg.batch_size.min(training.len());
    let mut cursor = training.len(); // force an initial shuffle
    let mut epoch = 0u64;
    for _ in 0..cfg.iterations {
        if cursor + batch > training.len() {
            epoch += 1;
            order.shuffle(&mut substream(cfg.seed, Stream::Classifier, epoch));
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let motions: Vec<MotionSequence> =
            idx.iter().map(|&i| training[i].0.clone()).collect();
        let labels: Vec<f64> = idx.iter().map(|&i| training[i].1).collect();
        let steps = motion_steps(&motions)?;

        let mut tape = Tape::new();
        classifier.set_params(&params);
        let logit = classifier.logits(&mut tape, &steps)?;
        let param_ids = tape.param_ids();
        // binary cross-entropy: mean(softplus(l) - y * l)
        let y = tape.constant(Tensor::matrix(batch, 1, labels));
        let sp = tape.softplus(logit)?;
        let yl = tape.mul(logit, y)?;
        let diff = tape.sub(sp, yl)?;
        let loss = tape.mean(diff)?;
        let grads_by_node = tape.backward(loss)?;
        let grads: Vec<Tensor> = param_ids
            .iter()
            .map(|id| grads_by_node.get_or_zeros(*id, tape.value(*id).shape()))
            .collect();
        opt.step(&mut params, &grads);
    }
    classifier.set_params(&params);

    let test_motions: Vec<MotionSequence> = test.iter().map(|(m, _)| (*m).clone()).collect();
    let probs = classifier.predict(&test_motions)?;
    let correct = probs
        .iter()
        .zip(test.iter())
        .filter(|(p, (_, label))| (**p > 0.5) == (*label > 0.5))
        .count();
    Ok((classifier, correct as f64 / test.len() as f64))
}

/// `100 * (1 - accuracy)`: chance-level accuracy scores 50, perfect
/// detection scores 0.
pub fn quality_score(accuracy: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(MetricsError::BadAccuracy(accuracy));
    }
    Ok(100.0 * (1.0 - accuracy))
}

// ── Euler-angle error ────────────────────────────────────────────────────

/// Wrap to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// Euclidean norm over all joints' wrapped Euler-angle differences at one
/// frame of the prediction.
fn euler_frame_error(pred: &crate::skeleton::Pose, gt: &crate::skeleton::Pose) -> f64 {
    let mut sum = 0.0;
    for (qp, qg) in pred.rotations().iter().zip(gt.rotations()) {
        let (ep, eg) = (qp.to_euler(), qg.to_euler());
        for (a, b) in ep.iter().zip(&eg) {
            let d = wrap_angle(a - b);
            sum += d * d;
        }
    }
    sum.sqrt()
}

/// Per-horizon Euler error between a predicted and ground-truth future;
/// horizons are 0-based frame offsets into the prediction.
pub fn mae_euler(
    pred: &MotionSequence,
    gt: &MotionSequence,
    horizons: &[usize],
) -> Result<BTreeMap<usize, f64>, MetricsError> {
    if pred.len() != gt.len() || pred.joint_count() != gt.joint_count() {
        return Err(MetricsError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.len(),
            pred.joint_count(),
            gt.len(),
            gt.joint_count()
        )));
    }
    let mut out = BTreeMap::new();
    for &h in horizons {
        if h >= pred.len() {
            return Err(MetricsError::HorizonOutOfRange { got: h, len: pred.len() });
        }
        out.insert(h, euler_frame_error(&pred.frames[h], &gt.frames[h]));
    }
    Ok(out)
}

/// The best sample of a pool and its per-horizon curve. Selection is
/// per-sample: the winner minimizes the horizon-summed error, and the curve
/// reports that single winner, so it is realizable by one motion.
#[derive(Debug, Clone)]
pub struct BestOfK {
    pub per_horizon: BTreeMap<usize, f64>,
    /// Mean over horizons of the winner's error, the selection objective.
    pub mean_mae: f64,
    pub winner: usize,
}

/// Best-of-K over the first `k` samples of a pool.
pub fn best_of_k_pool(
    pool: &[MotionSequence],
    gt_future: &MotionSequence,
    k: usize,
    horizons: &[usize],
) -> Result<BestOfK, MetricsError> {
    if k == 0 || pool.len() < k {
        return Err(MetricsError::PoolTooSmall(format!(
            "need {k} samples, pool has {}",
            pool.len()
        )));
    }
    let mut best: Option<BestOfK> = None;
    for (i, sample) in pool[..k].iter().enumerate() {
        let curve = mae_euler(sample, gt_future, horizons)?;
        let mean = curve.values().sum::<f64>() / horizons.len() as f64;
        if best.as_ref().is_none_or(|b| mean < b.mean_mae) {
            best = Some(BestOfK { per_horizon: curve, mean_mae: mean, winner: i });
        }
    }
    Ok(best.expect("k >= 1"))
}

/// Sample pools for a set of observations: `k_max` futures per record, one
/// eval substream per observation index.
pub fn generate_pools(
    model: &MixMatchModel,
    records: &[DatasetRecord],
    observed_len: usize,
    k_max: usize,
    seed: u64,
) -> Result<Vec<Vec<MotionSequence>>, MetricsError> {
    let horizon = records[0].sequence.len() - observed_len;
    let mut pools = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mut rng = substream(seed, Stream::Eval, i as u64);
        let set = sample_indices(model.config.hidden_size, model.config.alpha, &mut rng)
            .map_err(ModelError::Sampling)?;
        let observed = &rec.sequence.frames[..observed_len];
        let (seqs, _) = model.generate_k(
            observed,
            k_max,
            horizon,
            &set,
            rec.sequence.frame_rate,
            &mut rng,
        )?;
        pools.push(seqs);
    }
    Ok(pools)
}

/// Mean per-horizon best-of-K curve over observations, for each `k` in
/// `ks`, reusing one `max(ks)` pool per observation so pools are nested.
pub fn best_of_k_curves(
    model: &MixMatchModel,
    records: &[DatasetRecord],
    observed_len: usize,
    ks: &[usize],
    horizons: &[usize],
    seed: u64,
) -> Result<BTreeMap<usize, (BTreeMap<usize, f64>, f64)>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::PoolTooSmall("no evaluation records".into()));
    }
    let k_max = *ks.iter().max().expect("non-empty ks");
    let pools = generate_pools(model, records, observed_len, k_max, seed)?;
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut curve: BTreeMap<usize, f64> = horizons.iter().map(|&h| (h, 0.0)).collect();
        let mut mean_obj = 0.0;
        for (pool, rec) in pools.iter().zip(records) {
            let gt = MotionSequence::new(
                rec.sequence.frames[observed_len..].to_vec(),
                rec.sequence.frame_rate,
            )
            .expect("future is non-empty");
            let best = best_of_k_pool(pool, &gt, k, horizons)?;
            for (h, v) in best.per_horizon {
                *curve.get_mut(&h).unwrap() += v;
            }
            mean_obj += best.mean_mae;
        }
        for v in curve.values_mut() {
            *v /= records.len() as f64;
        }
        out.insert(k, (curve, mean_obj / records.len() as f64));
    }
    Ok(out)
}

// ── Mode coverage ────────────────────────────────────────────────────────

/// Coverage of one observation: a sample hits mode `m` when its mean Euler
/// error against continuation `m` is both the minimum over modes and below
/// `threshold`; coverage is distinct hit modes over M.
pub fn mode_coverage_from_samples(
    samples: &[MotionSequence],
    continuations: &[MotionSequence],
    threshold: f64,
) -> Result<f64, MetricsError> {
    if continuations.is_empty() {
        return Err(MetricsError::MissingModes("no continuations supplied".into()));
    }
    let horizons: Vec<usize> = (0..continuations[0].len()).collect();
    let mut hit = vec![false; continuations.len()];
    for s in samples {
        let mut best = (f64::INFINITY, 0usize);
        for (m, cont) in continuations.iter().enumerate() {
            let curve = mae_euler(s, cont, &horizons)?;
            let mean = curve.values().sum::<f64>() / horizons.len() as f64;
            if mean < best.0 {
                best = (mean, m);
            }
        }
        if best.0 < threshold {
            hit[best.1] = true;
        }
    }
    Ok(hit.iter().filter(|h| **h).count() as f64 / continuations.len() as f64)
}

/// Mean coverage over observation ids, generating `k` samples per id.
pub fn mode_coverage(
    model: &MixMatchModel,
    records: &[DatasetRecord],
    observed_len: usize,
    k: usize,
    threshold: f64,
    seed: u64,
) -> Result<f64, MetricsError> {
    let mut by_id: BTreeMap<u64, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.id).or_default().push(r);
    }
    if by_id.is_empty() {
        return Err(MetricsError::MissingModes("no records".into()));
    }
    let horizon = records[0].sequence.len() - observed_len;
    let mut total = 0.0;
    for (i, (_, group)) in by_id.iter().enumerate() {
        let observed = &group[0].sequence.frames[..observed_len];
        let continuations: Vec<MotionSequence> = group
            .iter()
            .map(|r| {
                MotionSequence::new(
                    r.sequence.frames[observed_len..].to_vec(),
                    r.sequence.frame_rate,
                )
                .expect("future non-empty")
            })
            .collect();
        let mut rng = substream(seed, Stream::Eval, i as u64);
        let set = sample_indices(model.config.hidden_size, model.config.alpha, &mut rng)
            .map_err(ModelError::Sampling)?;
        let (samples, _) =
            model.generate_k(observed, k, horizon, &set, 12.5, &mut rng)?;
        total += mode_coverage_from_samples(&samples, &continuations, threshold)?;
    }
    Ok(total / by_id.len() as f64)
}

// ── Whole-model evaluation and sweeps ────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EvalProtocol {
    /// Samples per observation for the diversity measurement.
    pub diversity_k: usize,
    /// Observations used for diversity (first N of the eval set).
    pub diversity_obs: usize,
    /// Generated samples per observation for the classifier's fake pool.
    pub fakes_per_obs: usize,
    pub classifier: ClassifierConfig,
    pub space: DiversitySpace,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            diversity_k: 50,
            diversity_obs: 16,
            fakes_per_obs: 3,
            classifier: ClassifierConfig::default(),
            space: DiversitySpace::Positions,
            seed: 1,
        }
    }
}

/// Diversity and quality of a trained model on an evaluation record set.
pub fn evaluate_diversity_quality(
    model: &MixMatchModel,
    skeleton: &Skeleton,
    records: &[DatasetRecord],
    observed_len: usize,
    protocol: &EvalProtocol,
) -> Result<(f64, f64), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::PoolTooSmall("no evaluation records".into()));
    }
    let horizon = records[0].sequence.len() - observed_len;

    // diversity: mean over the first N observations of per-observation
    // pairwise distance among diversity_k samples
    let n_div = protocol.diversity_obs.min(records.len());
    let mut div_sum = 0.0;
    for (i, rec) in records[..n_div].iter().enumerate() {
        let mut rng = substream(protocol.seed, Stream::Eval, (1 << 32) | i as u64);
        let set = sample_indices(model.config.hidden_size, model.config.alpha, &mut rng)
            .map_err(ModelError::Sampling)?;
        let (seqs, _) = model.generate_k(
            &rec.sequence.frames[..observed_len],
            protocol.diversity_k,
            horizon,
            &set,
            rec.sequence.frame_rate,
            &mut rng,
        )?;
        div_sum += diversity(&seqs, protocol.space, skeleton)?;
    }
    let diversity_value = div_sum / n_div as f64;

    // quality: real futures vs freshly generated fakes
    let real: Vec<MotionSequence> = records
        .iter()
        .map(|r| {
            MotionSequence::new(
                r.sequence.frames[observed_len..].to_vec(),
                r.sequence.frame_rate,
            )
            .expect("future non-empty")
        })
        .collect();
    let fakes_pools =
        generate_pools_n(model, records, observed_len, protocol.fakes_per_obs, protocol.seed)?;
    let generated: Vec<MotionSequence> = fakes_pools.into_iter().flatten().collect();
    let (_, accuracy) = train_quality_classifier(&real, &generated, &protocol.classifier)?;
    Ok((diversity_value, quality_score(accuracy)?))
}

fn generate_pools_n(
    model: &MixMatchModel,
    records: &[DatasetRecord],
    observed_len: usize,
    per_obs: usize,
    seed: u64,
) -> Result<Vec<Vec<MotionSequence>>, MetricsError> {
    let horizon = records[0].sequence.len() - observed_len;
    let mut pools = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mut rng = substream(seed, Stream::Eval, (2 << 32) | i as u64);
        let set = sample_indices(model.config.hidden_size, model.config.alpha, &mut rng)
            .map_err(ModelError::Sampling)?;
        let (seqs, _) = model.generate_k(
            &rec.sequence.frames[..observed_len],
            per_obs,
            horizon,
            &set,
            rec.sequence.frame_rate,
            &mut rng,
        )?;
        pools.push(seqs);
    }
    Ok(pools)
}

/// One row of the alpha sweep.
#[derive(Debug, Clone, Copy)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub diversity: f64,
    pub quality: f64,
}

/// Train one model per alpha with a shared seed and budget and evaluate
/// both metrics on the held-out records.
pub fn alpha_sweep(
    base: &TrainingConfig,
    train_inputs: &TrainInputs,
    eval_records: &[DatasetRecord],
    alphas: &[f64],
    protocol: &EvalProtocol,
) -> Result<Vec<AlphaSweepRow>, MetricsError> {
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let config = TrainingConfig { alpha, ..*base };
        let out = train(&config, train_inputs).map_err(Box::new)?;
        let (d, q) = evaluate_diversity_quality(
            &out.model,
            train_inputs.skeleton,
            eval_records,
            train_inputs.observed_len,
            protocol,
        )?;
        rows.push(AlphaSweepRow { alpha, diversity: d, quality: q });
    }
    Ok(rows)
}

// ── Report serialization ─────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub diversity: Option<f64>,
    pub quality: Option<f64>,
    pub mae_by_horizon: BTreeMap<usize, f64>,
    pub k_sweep: BTreeMap<usize, f64>,
    pub alpha_sweep: Vec<AlphaSweepRow>,
    pub mode_coverage: Option<f64>,
    pub space: Option<DiversitySpace>,
}

impl MetricsReport {
    /// Write the CSV set and the conventions block into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<(), MetricsError> {
        if let (Some(d), Some(q)) = (self.diversity, self.quality) {
            let mut s = String::from("diversity,quality\n");
            writeln!(s, "{},{}", sig9(d), sig9(q)).unwrap();
            std::fs::write(dir.join("diversity_quality.csv"), s)?;
        }
        if !self.mae_by_horizon.is_empty() {
            let mut s = String::from("horizon_frame,mae\n");
            for (h, v) in &self.mae_by_horizon {
                writeln!(s, "{},{}", h, sig9(*v)).unwrap();
            }
            std::fs::write(dir.join("mae.csv"), s)?;
        }
        if !self.k_sweep.is_empty() {
            let mut s = String::from("k,mae\n");
            for (k, v) in &self.k_sweep {
                writeln!(s, "{},{}", k, sig9(*v)).unwrap();
            }
            std::fs::write(dir.join("k_sweep.csv"), s)?;
        }
        if !self.alpha_sweep.is_empty() {
            let mut s = String::from("alpha,diversity,quality\n");
            for row in &self.alpha_sweep {
                writeln!(s, "{},{},{}", sig9(row.alpha), sig9(row.diversity), sig9(row.quality))
                    .unwrap();
            }
            std::fs::write(dir.join("alpha_sweep.csv"), s)?;
        }
        if let Some(c) = self.mode_coverage {
            let mut s = String::from("mode_coverage\n");
            writeln!(s, "{}", sig9(c)).unwrap();
            std::fs::write(dir.join("coverage.csv"), s)?;
        }
        let mut conv = String::new();
        writeln!(conv, "euler_order = intrinsic Z-Y-X, reported as (yaw, pitch, roll)").unwrap();
        writeln!(conv, "angle_wrap = (-pi, pi]").unwrap();
        writeln!(
            conv,
            "diversity_space = {}",
            self.space.map(|s| s.to_string()).unwrap_or_else(|| "fk-positions".into())
        )
        .unwrap();
        writeln!(conv, "quality_mapping = 100 * (1 - classifier_accuracy)").unwrap();
        writeln!(conv, "best_of_k_selection = per-sample, horizon-summed Euler error").unwrap();
        std::fs::write(dir.join("conventions.txt"), conv)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use crate::quaternion::Quaternion;
    use crate::skeleton::Pose;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn constant_motion(joints: usize, frames: usize, angle: f64) -> MotionSequence {
        let pose = Pose::new(
            (0..joints)
                .map(|_| Quaternion::from_axis_angle([0.0, 0.0, 1.0], angle))
                .collect(),
        )
        .unwrap();
        MotionSequence::new(vec![pose; frames], 12.5).unwrap()
    }

    #[test]
    fn diversity_of_identical_motions_is_zero() {
        let sk = Skeleton::chain(3, [0.0, 1.0, 0.0]);
        let ms = vec![constant_motion(3, 4, 0.3); 5];
        for space in [DiversitySpace::Quaternions, DiversitySpace::Positions] {
            assert_eq!(diversity(&ms, space, &sk).unwrap(), 0.0);
        }
    }

    #[test]
    fn diversity_of_two_motions_is_their_distance() {
        let sk = Skeleton::chain(2, [0.0, 1.0, 0.0]);
        let a = constant_motion(2, 3, 0.0);
        let b = constant_motion(2, 3, 0.4);
        let d: f64 = a
            .flatten()
            .iter()
            .zip(b.flatten().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let got = diversity(&[a, b], DiversitySpace::Quaternions, &sk).unwrap();
        assert!((got - d).abs() < 1e-12);
    }

    #[test]
    fn diversity_scales_homogeneously_and_ignores_offsets() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let base = mean_pairwise_distance(&rows);
        let scaled: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        assert!((mean_pairwise_distance(&scaled) - 3.0 * base).abs() < 1e-12);
        let shifted: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().map(|x| x + 7.0).collect()).collect();
        assert!((mean_pairwise_distance(&shifted) - base).abs() < 1e-12);
        // permutation invariance
        let permuted = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
        assert!((mean_pairwise_distance(&permuted) - base).abs() < 1e-12);
    }

    #[test]
    fn diversity_rejects_single_motion() {
        let sk = Skeleton::chain(2, [0.0, 1.0, 0.0]);
        let ms = vec![constant_motion(2, 3, 0.1)];
        assert!(matches!(
            diversity(&ms, DiversitySpace::Quaternions, &sk),
            Err(MetricsError::TooFewMotions(1))
        ));
    }

    #[test]
    fn quality_score_anchors() {
        assert_eq!(quality_score(0.5).unwrap(), 50.0);
        assert!((quality_score(0.87).unwrap() - 13.0).abs() < 1e-9);
        assert_eq!(quality_score(1.0).unwrap(), 0.0);
        assert!(quality_score(1.2).is_err());
        // strictly decreasing
        assert!(quality_score(0.6).unwrap() < quality_score(0.4).unwrap());
    }

    #[test]
    fn wrap_angle_conventions() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(2.0 * PI)).abs() < 1e-12);
        assert!((wrap_angle(PI) - PI).abs() < 1e-12, "pi maps to pi, not -pi");
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn mae_euler_cases() {
        let gt = constant_motion(1, 3, 0.0);
        let pred = constant_motion(1, 3, FRAC_PI_2);
        let mae = mae_euler(&pred, &gt, &[0, 1, 2]).unwrap();
        for v in mae.values() {
            assert!((v - FRAC_PI_2).abs() < 1e-9, "single yaw offset: {v}");
        }
        let perfect = mae_euler(&gt, &gt, &[0, 2]).unwrap();
        assert!(perfect.values().all(|v| *v == 0.0));
        assert!(matches!(
            mae_euler(&pred, &gt, &[5]),
            Err(MetricsError::HorizonOutOfRange { .. })
        ));
    }

    #[test]
    fn best_of_k_picks_the_minimum_and_is_monotone() {
        let gt = constant_motion(1, 4, 0.0);
        let pool: Vec<MotionSequence> =
            [0.9, 0.5, 0.2, 0.7, 0.05].iter().map(|a| constant_motion(1, 4, *a)).collect();
        let horizons = [0, 1, 2, 3];
        let b1 = best_of_k_pool(&pool, &gt, 1, &horizons).unwrap();
        let b3 = best_of_k_pool(&pool, &gt, 3, &horizons).unwrap();
        let b5 = best_of_k_pool(&pool, &gt, 5, &horizons).unwrap();
        assert_eq!(b3.winner, 2);
        assert_eq!(b5.winner, 4);
        assert!(b1.mean_mae >= b3.mean_mae && b3.mean_mae >= b5.mean_mae);
    }

    #[test]
    fn mode_coverage_definitions() {
        let conts =
            vec![constant_motion(1, 3, 0.0), constant_motion(1, 3, 1.0), constant_motion(1, 3, 2.0)];
        // all samples equal to mode-1 continuation
        let samples = vec![conts[0].clone(); 4];
        let c = mode_coverage_from_samples(&samples, &conts, 0.3).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-12);
        // samples reproducing every continuation
        let all = conts.clone();
        assert_eq!(mode_coverage_from_samples(&all, &conts, 0.3).unwrap(), 1.0);
        // one sample hits at most one mode
        let one = vec![conts[2].clone()];
        assert!(mode_coverage_from_samples(&one, &conts, 0.3).unwrap() <= 1.0 / 3.0 + 1e-12);
        // a sample far from everything hits nothing
        let far = vec![constant_motion(1, 3, 3.0)];
        assert_eq!(mode_coverage_from_samples(&far, &conts, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn classifier_separates_real_from_zeros_but_not_copies() {
        let spec = SyntheticSpec::default_with(2, 4, 12, 41);
        let ds = generate_dataset(&spec, 30).unwrap();
        let futures: Vec<MotionSequence> = ds
            .records
            .iter()
            .map(|r| {
                MotionSequence::new(r.sequence.frames[4..].to_vec(), 12.5).unwrap()
            })
            .collect();
        let cfg = ClassifierConfig { seed: 5, ..ClassifierConfig::default() };

        // identical pools: accuracy within the binomial 99% interval of 0.5
        let (_, acc_same) = train_quality_classifier(&futures, &futures, &cfg).unwrap();
        let n_test = (futures.len() * 2) / 5; // 20% of 2n
        let half_width = 2.576 * (0.25 / n_test as f64).sqrt();
        assert!(
            (acc_same - 0.5).abs() <= half_width,
            "copies should be chance-level: {acc_same} vs +-{half_width}"
        );

        // constant-zero fakes: near-perfect detection
        let zeros: Vec<MotionSequence> = (0..futures.len())
            .map(|_| constant_motion(ds.joints, ds.total_len - 4, 0.0))
            .collect();
        let (_, acc_zeros) = train_quality_classifier(&futures, &zeros, &cfg).unwrap();
        assert!(acc_zeros > 0.9, "zero fakes should be separable: {acc_zeros}");
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricsReport {
            diversity: Some(1.5),
            quality: Some(42.0),
            mae_by_horizon: [(0, 0.1), (3, 0.4)].into_iter().collect(),
            k_sweep: [(1, 0.9), (10, 0.5)].into_iter().collect(),
            alpha_sweep: vec![AlphaSweepRow { alpha: 0.5, diversity: 1.0, quality: 40.0 }],
            mode_coverage: Some(0.8),
            space: Some(DiversitySpace::Positions),
        };
        report.write_all(dir.path()).unwrap();
        for f in ["diversity_quality.csv", "mae.csv", "k_sweep.csv", "alpha_sweep.csv", "conventions.txt"]
        {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let conv = std::fs::read_to_string(dir.path().join("conventions.txt")).unwrap();
        assert!(conv.contains("Z-Y-X"));
    }
}
