//! Flat `key = value` run configuration.
//!
//! One structure carries every tunable: dataset generation, training,
//! splits, and evaluation. Values load from a config file (`#` starts a
//! comment), then explicit command-line flags override. Every command
//! writes the fully resolved configuration next to its outputs;
//! re-running from that file reproduces the outputs byte for byte.

use crate::CliError;
use mixmatch::data::SyntheticSpec;
use mixmatch::metrics::{ClassifierConfig, DiversitySpace, EvalProtocol};
use mixmatch::numfmt::full;
use mixmatch::sampling::FusionMode;
use mixmatch::skeleton::Skeleton;
use mixmatch::training::TrainingConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data generation
    pub modes: usize,
    pub count: usize,
    pub joints: usize,
    pub observed_len: usize,
    pub total_len: usize,
    pub noise_std: f64,
    pub frame_rate: f64,
    // training
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub hidden_size: usize,
    pub alpha: f64,
    pub curriculum_step: usize,
    pub clip_max_norm: f64,
    pub teacher_epochs_to_zero: usize,
    pub mode: FusionMode,
    pub residual_velocity: bool,
    pub use_rot: bool,
    pub use_skl: bool,
    pub use_kl: bool,
    pub probe_k: usize,
    // splits
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    // evaluation
    pub k: usize,
    /// 1-based prediction-frame horizons.
    pub horizons: Vec<usize>,
    pub k_sweep: Vec<usize>,
    pub alphas: Vec<f64>,
    pub diversity_k: usize,
    pub diversity_obs: usize,
    pub fakes_per_obs: usize,
    pub classifier_iterations: u64,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub classifier_momentum: f64,
    pub coverage_k: usize,
    pub coverage_threshold: f64,
    pub eval_space: DiversitySpace,
    pub eval_points: usize,
    // global
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            modes: 3,
            count: 200,
            joints: 5,
            observed_len: 16,
            total_len: 40,
            noise_std: 0.01,
            frame_rate: 12.5,
            learning_rate: 0.001,
            batch_size: 64,
            iterations: 3000,
            hidden_size: 64,
            alpha: 0.5,
            curriculum_step: 10,
            clip_max_norm: 5.0,
            teacher_epochs_to_zero: 150,
            mode: FusionMode::Mm,
            residual_velocity: false,
            use_rot: true,
            use_skl: true,
            use_kl: true,
            probe_k: 10,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            k: 50,
            horizons: vec![1, 2, 4, 5, 7, 12],
            k_sweep: vec![1, 2, 5, 10, 20, 50],
            alphas: vec![0.1, 0.3, 0.5, 0.9],
            diversity_k: 50,
            diversity_obs: 16,
            fakes_per_obs: 3,
            classifier_iterations: 1000,
            classifier_batch: 32,
            classifier_lr: 0.01,
            classifier_momentum: 0.9,
            coverage_k: 10,
            coverage_threshold: 0.35,
            eval_space: DiversitySpace::Positions,
            eval_points: 4,
            seed: 0,
            jobs: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value {value:?} for key {key:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .map_err(|_| CliError::Usage(format!("bad list entry {v:?} for key {key:?}")))
        })
        .collect()
}

impl RunConfig {
    /// Apply a single assignment. Unknown keys are a usage error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "modes" => self.modes = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "joints" => self.joints = parse(key, value)?,
            "observed_len" => self.observed_len = parse(key, value)?,
            "total_len" => self.total_len = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "frame_rate" => self.frame_rate = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "curriculum_step" => self.curriculum_step = parse(key, value)?,
            "clip_max_norm" => self.clip_max_norm = parse(key, value)?,
            "teacher_epochs_to_zero" => self.teacher_epochs_to_zero = parse(key, value)?,
            "mode" => {
                self.mode = FusionMode::parse(value).ok_or_else(|| {
                    CliError::Usage(format!("mode must be one of mm|lhp|rhp|lpp, got {value:?}"))
                })?
            }
            "residual_velocity" => self.residual_velocity = parse(key, value)?,
            "use_rot" => self.use_rot = parse(key, value)?,
            "use_skl" => self.use_skl = parse(key, value)?,
            "use_kl" => self.use_kl = parse(key, value)?,
            "probe_k" => self.probe_k = parse(key, value)?,
            "train_ratio" => self.train_ratio = parse(key, value)?,
            "val_ratio" => self.val_ratio = parse(key, value)?,
            "test_ratio" => self.test_ratio = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "horizons" => self.horizons = parse_list(key, value)?,
            "k_sweep" => self.k_sweep = parse_list(key, value)?,
            "alphas" => self.alphas = parse_list(key, value)?,
            "diversity_k" => self.diversity_k = parse(key, value)?,
            "diversity_obs" => self.diversity_obs = parse(key, value)?,
            "fakes_per_obs" => self.fakes_per_obs = parse(key, value)?,
            "classifier_iterations" => self.classifier_iterations = parse(key, value)?,
            "classifier_batch" => self.classifier_batch = parse(key, value)?,
            "classifier_lr" => self.classifier_lr = parse(key, value)?,
            "classifier_momentum" => self.classifier_momentum = parse(key, value)?,
            "coverage_k" => self.coverage_k = parse(key, value)?,
            "coverage_threshold" => self.coverage_threshold = parse(key, value)?,
            "eval_space" => {
                self.eval_space = match value {
                    "positions" => DiversitySpace::Positions,
                    "quaternions" => DiversitySpace::Quaternions,
                    other => {
                        return Err(CliError::Usage(format!(
                            "eval_space must be positions|quaternions, got {other:?}"
                        )))
                    }
                }
            }
            "eval_points" => self.eval_points = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            unknown => return Err(CliError::Usage(format!("unknown config key {unknown:?}"))),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    i + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it back reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let list_f = |v: &[f64]| v.iter().map(|x| full(*x)).collect::<Vec<_>>().join(",");
        writeln!(s, "# data").unwrap();
        writeln!(s, "modes = {}", self.modes).unwrap();
        writeln!(s, "count = {}", self.count).unwrap();
        writeln!(s, "joints = {}", self.joints).unwrap();
        writeln!(s, "observed_len = {}", self.observed_len).unwrap();
        writeln!(s, "total_len = {}", self.total_len).unwrap();
        writeln!(s, "noise_std = {}", full(self.noise_std)).unwrap();
        writeln!(s, "frame_rate = {}", full(self.frame_rate)).unwrap();
        writeln!(s, "# training").unwrap();
        writeln!(s, "learning_rate = {}", full(self.learning_rate)).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "iterations = {}", self.iterations).unwrap();
        writeln!(s, "hidden_size = {}", self.hidden_size).unwrap();
        writeln!(s, "alpha = {}", full(self.alpha)).unwrap();
        writeln!(s, "curriculum_step = {}", self.curriculum_step).unwrap();
        writeln!(s, "clip_max_norm = {}", full(self.clip_max_norm)).unwrap();
        writeln!(s, "teacher_epochs_to_zero = {}", self.teacher_epochs_to_zero).unwrap();
        writeln!(s, "mode = {}", self.mode).unwrap();
        writeln!(s, "residual_velocity = {}", self.residual_velocity).unwrap();
        writeln!(s, "use_rot = {}", self.use_rot).unwrap();
        writeln!(s, "use_skl = {}", self.use_skl).unwrap();
        writeln!(s, "use_kl = {}", self.use_kl).unwrap();
        writeln!(s, "probe_k = {}", self.probe_k).unwrap();
        writeln!(s, "# splits").unwrap();
        writeln!(s, "train_ratio = {}", full(self.train_ratio)).unwrap();
        writeln!(s, "val_ratio = {}", full(self.val_ratio)).unwrap();
        writeln!(s, "test_ratio = {}", full(self.test_ratio)).unwrap();
        writeln!(s, "# evaluation").unwrap();
        writeln!(s, "k = {}", self.k).unwrap();
        writeln!(s, "horizons = {}", list_u(&self.horizons)).unwrap();
        writeln!(s, "k_sweep = {}", list_u(&self.k_sweep)).unwrap();
        writeln!(s, "alphas = {}", list_f(&self.alphas)).unwrap();
        writeln!(s, "diversity_k = {}", self.diversity_k).unwrap();
        writeln!(s, "diversity_obs = {}", self.diversity_obs).unwrap();
        writeln!(s, "fakes_per_obs = {}", self.fakes_per_obs).unwrap();
        writeln!(s, "classifier_iterations = {}", self.classifier_iterations).unwrap();
        writeln!(s, "classifier_batch = {}", self.classifier_batch).unwrap();
        writeln!(s, "classifier_lr = {}", full(self.classifier_lr)).unwrap();
        writeln!(s, "classifier_momentum = {}", full(self.classifier_momentum)).unwrap();
        writeln!(s, "coverage_k = {}", self.coverage_k).unwrap();
        writeln!(s, "coverage_threshold = {}", full(self.coverage_threshold)).unwrap();
        writeln!(
            s,
            "eval_space = {}",
            match self.eval_space {
                DiversitySpace::Positions => "positions",
                DiversitySpace::Quaternions => "quaternions",
            }
        )
        .unwrap();
        writeln!(s, "eval_points = {}", self.eval_points).unwrap();
        writeln!(s, "# global").unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "jobs = {}", self.jobs).unwrap();
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join("resolved.cfg"), self.to_text())?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec =
            SyntheticSpec::default_with(self.modes, self.observed_len, self.total_len, self.seed);
        spec.skeleton = Skeleton::chain(self.joints, [0.0, 1.0, 0.0]);
        spec.amplitude = (0..self.joints).map(|j| 0.4 + 0.06 * j as f64).collect();
        spec.frequency = (0..self.joints).map(|j| 0.25 + 0.05 * j as f64).collect();
        spec.noise_std = self.noise_std;
        spec.frame_rate = self.frame_rate;
        spec
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            iterations: self.iterations,
            hidden_size: self.hidden_size,
            alpha: self.alpha,
            curriculum_step: self.curriculum_step,
            clip_max_norm: self.clip_max_norm,
            teacher_epochs_to_zero: self.teacher_epochs_to_zero,
            seed: self.seed,
            fusion_mode: self.mode,
            residual_velocity: self.residual_velocity,
            use_rot: self.use_rot,
            use_skl: self.use_skl,
            use_kl: self.use_kl,
            probe_k: self.probe_k,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            diversity_k: self.diversity_k,
            diversity_obs: self.diversity_obs,
            fakes_per_obs: self.fakes_per_obs,
            classifier: ClassifierConfig {
                iterations: self.classifier_iterations,
                batch_size: self.classifier_batch,
                learning_rate: self.classifier_lr,
                momentum: self.classifier_momentum,
                seed: self.seed,
                ..ClassifierConfig::default()
            },
            space: self.eval_space,
            seed: self.seed,
        }
    }

    /// 0-based frame offsets for the configured 1-based horizons.
    pub fn horizon_offsets(&self) -> Result<Vec<usize>, CliError> {
        self.horizons
            .iter()
            .map(|&h| {
                if h == 0 {
                    Err(CliError::Usage("horizons are 1-based frame numbers".into()))
                } else {
                    Ok(h - 1)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut config = RunConfig { seed: 42, alpha: 0.3, ..RunConfig::default() };
        config.horizons = vec![1, 4, 9];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, config.to_text()).unwrap();
        let mut back = RunConfig::default();
        back.load_file(&path).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut config = RunConfig::default();
        let err = config.apply("not_a_key", "1").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# full comment\n\nseed = 7   # trailing\nalpha = 0.25\n").unwrap();
        let mut config = RunConfig::default();
        config.load_file(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.alpha, 0.25);
    }

    #[test]
    fn bad_value_is_usage_error() {
        let mut config = RunConfig::default();
        assert_eq!(config.apply("alpha", "lots").unwrap_err().exit_code(), 1);
        assert_eq!(config.apply("mode", "xyz").unwrap_err().exit_code(), 1);
    }
}
