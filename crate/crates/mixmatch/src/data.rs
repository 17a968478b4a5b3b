//! Deterministic synthetic multimodal motion dataset.
//!
//! Every observation id carries one record per mode: all records of an id
//! share the observed prefix exactly (frames `1..=t`), then continue with
//! mode-specific future dynamics. Futures are genuinely multimodal by
//! construction so diversity and coverage metrics have a known target.
//!
//! Per joint `j`, the prefix angle about a per-joint axis follows
//! `a * A_j * sin(w_j k + phase_id + 0.9 j)`; mode `m` continues from the
//! boundary value with its own frequency multiplier, phase, gain, and a
//! small axis tilt. Seeded angular noise is added on top (prefix noise is
//! drawn per id so prefixes stay identical across modes), and quaternions
//! are renormalized.

use crate::quaternion::Quaternion;
use crate::rng::{substream, Stream};
use crate::skeleton::{MotionSequence, Pose, Skeleton};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("{path}:{line}: {detail}")]
    ParseError { path: String, line: usize, detail: String },
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kinematics(#[from] crate::quaternion::KinematicsError),
}

/// Future dynamics of one mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeParams {
    pub freq_mul: f64,
    pub phase: f64,
    pub gain: f64,
    /// Axis tilt toward the next basis axis; 0 keeps the prefix axis.
    pub tilt: f64,
}

const MODE_TABLE: [ModeParams; 8] = [
    ModeParams { freq_mul: 1.0, phase: 0.0, gain: 1.0, tilt: 0.0 },
    ModeParams { freq_mul: 1.8, phase: 1.4, gain: 0.9, tilt: 0.35 },
    ModeParams { freq_mul: 0.55, phase: 2.6, gain: 1.15, tilt: -0.35 },
    ModeParams { freq_mul: 2.3, phase: 0.7, gain: 0.8, tilt: 0.2 },
    ModeParams { freq_mul: 0.8, phase: 3.4, gain: 1.05, tilt: -0.2 },
    ModeParams { freq_mul: 1.4, phase: 1.9, gain: 0.95, tilt: 0.5 },
    ModeParams { freq_mul: 2.0, phase: 5.0, gain: 1.1, tilt: -0.5 },
    ModeParams { freq_mul: 0.35, phase: 4.2, gain: 0.85, tilt: 0.1 },
];

const AXES: [[f64; 3]; 3] = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub skeleton: Skeleton,
    /// Number of future modes M.
    pub modes: usize,
    /// Observed prefix length t.
    pub observed_len: usize,
    /// Total sequence length T.
    pub total_len: usize,
    /// Per-joint base amplitude (radians).
    pub amplitude: Vec<f64>,
    /// Per-joint base angular frequency (radians per frame).
    pub frequency: Vec<f64>,
    /// Std of the angular noise added to every generated angle.
    pub noise_std: f64,
    pub seed: u64,
    /// Metadata only; never serialized with the dataset.
    pub frame_rate: f64,
}

impl SyntheticSpec {
    /// Five-joint unit chain with gentle per-joint amplitude/frequency ramps.
    pub fn default_with(modes: usize, observed_len: usize, total_len: usize, seed: u64) -> Self {
        let joints = 5;
        SyntheticSpec {
            skeleton: Skeleton::chain(joints, [0.0, 1.0, 0.0]),
            modes,
            observed_len,
            total_len,
            amplitude: (0..joints).map(|j| 0.4 + 0.06 * j as f64).collect(),
            frequency: (0..joints).map(|j| 0.25 + 0.05 * j as f64).collect(),
            noise_std: 0.01,
            seed,
            frame_rate: 12.5,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let joints = self.skeleton.joint_count();
        if self.modes < 1 || self.modes > MODE_TABLE.len() {
            return Err(DataError::InvalidSpec(format!(
                "modes must be in 1..={}, got {}",
                MODE_TABLE.len(),
                self.modes
            )));
        }
        if self.observed_len < 1 || self.total_len <= self.observed_len {
            return Err(DataError::InvalidSpec(format!(
                "need T > t >= 1, got t={} T={}",
                self.observed_len, self.total_len
            )));
        }
        if self.amplitude.len() != joints || self.frequency.len() != joints {
            return Err(DataError::InvalidSpec(
                "amplitude/frequency must have one entry per joint".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(DataError::InvalidSpec("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One labeled sequence: `mode` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub mode: usize,
    pub sequence: MotionSequence,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub joints: usize,
    pub observed_len: usize,
    pub total_len: usize,
    pub modes: usize,
    /// Zero-noise mode-separability bound: min over ids and mode pairs of
    /// the max per-joint position distance at the final frame.
    pub separability: f64,
    pub records: Vec<DatasetRecord>,
}

struct IdDraws {
    phase: f64,
    amp_scale: f64,
    /// Per (frame, joint) prefix noise, shared by all modes of the id.
    prefix_noise: Vec<f64>,
}

fn id_draws(spec: &SyntheticSpec, id: u64) -> IdDraws {
    let m = spec.modes as u64;
    let mut rng = substream(spec.seed, Stream::Data, id * (m + 1));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp_scale = rng.gen_range(0.9..1.1);
    let n = spec.observed_len * spec.skeleton.joint_count();
    let prefix_noise =
        (0..n).map(|_| crate::rng::standard_normal(&mut rng) * spec.noise_std).collect();
    IdDraws { phase, amp_scale, prefix_noise }
}

/// Clean (pre-noise) angle of joint `j` at 0-based frame `k` for mode `mode`
/// (1-based); frames below `observed_len` ignore the mode.
fn clean_angle(spec: &SyntheticSpec, draws: &IdDraws, j: usize, k: usize, mode: usize) -> f64 {
    let a = draws.amp_scale * spec.amplitude[j];
    let w = spec.frequency[j];
    let base = |k: usize| (w * k as f64 + draws.phase + 0.9 * j as f64).sin();
    let t = spec.observed_len;
    if k < t {
        a * base(k)
    } else {
        let mp = MODE_TABLE[mode - 1];
        let cont = (w * mp.freq_mul * (k - t) as f64 + mp.phase).sin() - mp.phase.sin();
        a * (base(t) + mp.gain * cont)
    }
}

fn joint_axis(spec: &SyntheticSpec, j: usize, k: usize, mode: usize) -> [f64; 3] {
    let base = AXES[j % 3];
    if k < spec.observed_len {
        return base;
    }
    let mp = MODE_TABLE[mode - 1];
    if mp.tilt == 0.0 {
        return base;
    }
    let other = AXES[(j + 1) % 3];
    let v = [
        base[0] + mp.tilt * other[0],
        base[1] + mp.tilt * other[1],
        base[2] + mp.tilt * other[2],
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn build_record(spec: &SyntheticSpec, draws: &IdDraws, id: u64, mode: usize) -> DatasetRecord {
    let joints = spec.skeleton.joint_count();
    let m = spec.modes as u64;
    let mut future_rng = substream(spec.seed, Stream::Data, id * (m + 1) + mode as u64);
    let mut frames = Vec::with_capacity(spec.total_len);
    for k in 0..spec.total_len {
        let rotations = (0..joints)
            .map(|j| {
                let noise = if k < spec.observed_len {
                    draws.prefix_noise[k * joints + j]
                } else {
                    crate::rng::standard_normal(&mut future_rng) * spec.noise_std
                };
                let angle = clean_angle(spec, draws, j, k, mode) + noise;
                Quaternion::from_axis_angle(joint_axis(spec, j, k, mode), angle).normalize()
            })
            .collect();
        frames.push(Pose::new(rotations).expect("axis-angle construction is unit"));
    }
    DatasetRecord {
        id,
        mode,
        sequence: MotionSequence::new(frames, spec.frame_rate).expect("T >= 1"),
    }
}

/// Zero-noise separability: min over ids and mode pairs of the max
/// per-joint position distance at the final frame.
fn separability(spec: &SyntheticSpec, count: usize) -> f64 {
    if spec.modes < 2 {
        return 0.0;
    }
    let joints = spec.skeleton.joint_count();
    let k = spec.total_len - 1;
    let mut bound = f64::INFINITY;
    for id in 0..count as u64 {
        let draws = id_draws(spec, id);
        let final_positions: Vec<Vec<[f64; 3]>> = (1..=spec.modes)
            .map(|mode| {
                let rotations = (0..joints)
                    .map(|j| {
                        Quaternion::from_axis_angle(
                            joint_axis(spec, j, k, mode),
                            clean_angle(spec, &draws, j, k, mode),
                        )
                        .normalize()
                    })
                    .collect();
                let pose = Pose::new(rotations).expect("unit by construction");
                crate::skeleton::forward_kinematics(&spec.skeleton, &pose)
                    .expect("skeleton validated")
            })
            .collect();
        for a in 0..spec.modes {
            for b in a + 1..spec.modes {
                let max_joint = (0..joints)
                    .map(|j| {
                        let (p, q) = (final_positions[a][j], final_positions[b][j]);
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                            .sqrt()
                    })
                    .fold(0.0, f64::max);
                bound = bound.min(max_joint);
            }
        }
    }
    bound
}

/// Generate `count` observation ids, one record per mode each.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize) -> Result<Dataset, DataError> {
    spec.validate()?;
    if count < 1 {
        return Err(DataError::InvalidSpec("count must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(count * spec.modes);
    for id in 0..count as u64 {
        let draws = id_draws(spec, id);
        for mode in 1..=spec.modes {
            records.push(build_record(spec, &draws, id, mode));
        }
    }
    Ok(Dataset {
        joints: spec.skeleton.joint_count(),
        observed_len: spec.observed_len,
        total_len: spec.total_len,
        modes: spec.modes,
        separability: separability(spec, count),
        records,
    })
}

/// Text form: header `J t T M separability`, then per record a line
/// `id mode` followed by `T` lines of `4J` floats.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    writeln!(
        out,
        "{} {} {} {} {}",
        dataset.joints,
        dataset.observed_len,
        dataset.total_len,
        dataset.modes,
        crate::numfmt::full(dataset.separability)
    )
    .unwrap();
    for rec in &dataset.records {
        writeln!(out, "{} {}", rec.id, rec.mode).unwrap();
        for frame in &rec.sequence.frames {
            let flat = frame.flatten();
            let line: Vec<String> = flat.iter().map(|x| crate::numfmt::full(*x)).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let err = |line: usize, detail: String| DataError::ParseError {
        path: path_str.clone(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate().peekable();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(err(1, format!("header needs 5 fields, got {}", fields.len())));
    }
    let joints: usize = fields[0].parse().map_err(|_| err(1, "bad joint count".into()))?;
    let observed_len: usize = fields[1].parse().map_err(|_| err(1, "bad observed length".into()))?;
    let total_len: usize = fields[2].parse().map_err(|_| err(1, "bad total length".into()))?;
    let modes: usize = fields[3].parse().map_err(|_| err(1, "bad mode count".into()))?;
    let sep: f64 = fields[4].parse().map_err(|_| err(1, "bad separability".into()))?;

    let mut records = Vec::new();
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(ln + 1, format!("record header needs `id mode`, got {line:?}")));
        }
        let id: u64 = fields[0].parse().map_err(|_| err(ln + 1, "bad record id".into()))?;
        let mode: usize = fields[1].parse().map_err(|_| err(ln + 1, "bad mode label".into()))?;
        let mut frames = Vec::with_capacity(total_len);
        for f in 0..total_len {
            let (fln, fline) = lines
                .next()
                .ok_or_else(|| err(ln + 1 + f, format!("record {id} truncated at frame {f}")))?;
            let vals: Result<Vec<f64>, _> =
                fline.split_whitespace().map(|s| s.parse::<f64>()).collect();
            let vals = vals.map_err(|_| err(fln + 1, "bad float field".into()))?;
            if vals.len() != 4 * joints {
                return Err(err(
                    fln + 1,
                    format!("expected {} floats, got {}", 4 * joints, vals.len()),
                ));
            }
            let rotations: Vec<Quaternion> = vals
                .chunks_exact(4)
                .map(|q| Quaternion::new(q[0], q[1], q[2], q[3]))
                .collect();
            let pose = Pose::new(rotations)
                .map_err(|e| err(fln + 1, format!("non-unit quaternion: {e}")))?;
            frames.push(pose);
        }
        let sequence = MotionSequence::new(frames, 12.5).map_err(|e| err(ln + 1, e.to_string()))?;
        records.push(DatasetRecord { id, mode, sequence });
    }
    Ok(Dataset { joints, observed_len, total_len, modes, separability: sep, records })
}

/// Split by observation id so every mode of a prefix lands in one part.
pub fn split(
    records: &[DatasetRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>), DataError> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(DataError::BadRatios(ratios));
    }
    let mut ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = substream(seed, Stream::Split, 0);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let train_ids: std::collections::HashSet<u64> = ids[..n_train].iter().copied().collect();
    let val_ids: std::collections::HashSet<u64> =
        ids[n_train..n_train + n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for rec in records {
        if train_ids.contains(&rec.id) {
            train.push(rec.clone());
        } else if val_ids.contains(&rec.id) {
            val.push(rec.clone());
        } else {
            test.push(rec.clone());
        }
    }
    Ok((train, val, test))
}
