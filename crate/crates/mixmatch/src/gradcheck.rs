//! Finite-difference verification of recorded gradients.
//!
//! The oracle side only ever evaluates forward passes: central differences
//! `(f(x+h) - f(x-h)) / 2h` with `h = 1e-5` on 64-bit floats. It shares no
//! code with [`Tape::backward`], so agreement between the two is meaningful.

use crate::rng::{substream, Stream};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Per-op tolerance on the max relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// End-to-end (full model) tolerance.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Relative error with near-zero pairs treated as agreeing.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

/// One differentiable scenario: leaves with fixed shapes and a graph builder
/// mapping them to a scalar loss.
struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Map raw uniform(-1,1) draws into the op's input domain.
    domain: fn(usize, f64) -> f64,
    build: fn(&mut Tape, &[NodeId]) -> Result<NodeId, TapeError>,
}

fn ident_domain(_leaf: usize, x: f64) -> f64 {
    x
}

/// Keep magnitudes above the finite-difference step so kinked or singular
/// ops (relu, log) are probed away from their bad points.
fn offset_domain(_leaf: usize, x: f64) -> f64 {
    x + 0.5 * x.signum() + if x == 0.0 { 0.5 } else { 0.0 }
}

fn positive_domain(_leaf: usize, x: f64) -> f64 {
    1.5 + x
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.add(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "add_scalar_broadcast",
            shapes: vec![vec![2, 3], vec![1]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.add(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "sub",
            shapes: vec![vec![5], vec![5]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.sub(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 4], vec![2, 4]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.mul(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "mul_scalar_broadcast",
            shapes: vec![vec![1], vec![3, 2]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.mul(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "scalar_mul",
            shapes: vec![vec![4]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.scalar_mul(l[0], -2.5)?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "add_row_vec",
            shapes: vec![vec![3, 4], vec![4]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.add_row_vec(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.matmul(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "matmul_vector_lhs",
            shapes: vec![vec![4], vec![4, 3]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.matmul(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "concat",
            shapes: vec![vec![2, 3], vec![2, 2]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.concat(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "gather_cols",
            shapes: vec![vec![2, 5]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.gather_cols(l[0], &[4, 0, 2, 0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "scatter_cols",
            shapes: vec![vec![2, 3]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.scatter_cols(l[0], &[5, 1, 3], 6)?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "tanh",
            shapes: vec![vec![6]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.tanh(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "sigmoid",
            shapes: vec![vec![6]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.sigmoid(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "relu",
            shapes: vec![vec![6]],
            domain: offset_domain,
            build: |t, l| {
                let y = t.relu(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "exp",
            shapes: vec![vec![5]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.exp(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "log",
            shapes: vec![vec![5]],
            domain: positive_domain,
            build: |t, l| {
                let y = t.log(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "softplus",
            shapes: vec![vec![6]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.softplus(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "sum",
            shapes: vec![vec![2, 3]],
            domain: ident_domain,
            build: |t, l| t.sum(l[0]),
        },
        OpCase {
            name: "mean",
            shapes: vec![vec![7]],
            domain: ident_domain,
            build: |t, l| t.mean(l[0]),
        },
        OpCase {
            name: "sq_norm",
            shapes: vec![vec![2, 3]],
            domain: ident_domain,
            build: |t, l| t.sq_norm(l[0]),
        },
        OpCase {
            name: "normalize_quat_blocks",
            shapes: vec![vec![2, 8]],
            domain: offset_domain,
            build: |t, l| {
                let y = t.normalize_quat_blocks(l[0])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "quat_mul_rows",
            shapes: vec![vec![3, 4], vec![3, 4]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.quat_mul_rows(l[0], l[1])?;
                weighted_loss(t, y)
            },
        },
        OpCase {
            name: "rotate_rows",
            shapes: vec![vec![3, 4]],
            domain: ident_domain,
            build: |t, l| {
                let y = t.rotate_rows(l[0], [0.3, -1.2, 0.7])?;
                weighted_loss(t, y)
            },
        },
    ]
}

/// Project a tensor to a scalar with fixed non-uniform weights so every
/// output coordinate receives a distinct upstream gradient.
fn weighted_loss(t: &mut Tape, y: NodeId) -> Result<NodeId, TapeError> {
    let n = t.value(y).numel();
    let shape = t.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.25 + (i as f64) * 0.37 - (n as f64) * 0.11).collect();
    let w = t.constant(Tensor::new(shape, w));
    let prod = t.mul(y, w)?;
    let lin = t.sum(prod)?;
    // add a quadratic term so second-order structure is exercised too
    let sq = t.sq_norm(y)?;
    t.add(lin, sq)
}

/// Run the per-op finite-difference suite. Each op is checked over
/// `rounds` random input draws; the report keeps the worst error seen.
pub fn check_ops(seed: u64, rounds: usize) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    for case in cases() {
        let mut worst: f64 = 0.0;
        for round in 0..rounds {
            let mut rng = substream(seed, Stream::Eval, round as u64);
            let inputs: Vec<Vec<f64>> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(li, shape)| {
                    let n: usize = shape.iter().product();
                    (0..n).map(|_| (case.domain)(li, rng.gen_range(-1.0..1.0))).collect()
                })
                .collect();

            // analytic gradients for every leaf
            let mut tape = Tape::new();
            let leaves: Vec<NodeId> = case
                .shapes
                .iter()
                .zip(&inputs)
                .map(|(s, d)| tape.param(Tensor::new(s.clone(), d.clone())))
                .collect();
            let loss = (case.build)(&mut tape, &leaves).expect("op case builds");
            let grads = tape.backward(loss).expect("backward succeeds");
            let analytic: Vec<f64> = leaves
                .iter()
                .zip(&case.shapes)
                .flat_map(|(id, s)| grads.get_or_zeros(*id, s).into_data())
                .collect();

            // numeric gradients over the concatenated input vector
            let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
            let eval = |x: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let mut offset = 0;
                let leaves: Vec<NodeId> = case
                    .shapes
                    .iter()
                    .map(|s| {
                        let n: usize = s.iter().product();
                        let chunk = x[offset..offset + n].to_vec();
                        offset += n;
                        tape.param(Tensor::new(s.clone(), chunk))
                    })
                    .collect();
                let loss = (case.build)(&mut tape, &leaves).expect("op case builds");
                tape.value(loss).item()
            };
            let numeric = central_diff(eval, &flat, FD_STEP);
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
        reports.push(GradCheckReport {
            name: case.name.to_string(),
            max_rel_err: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    reports
}

/// Frozen stochastic inputs for an end-to-end differentiation check: a
/// deterministic loss of the parameters alone.
#[derive(Clone)]
struct FrozenScenario {
    model: crate::model::MixMatchModel,
    skeleton: crate::skeleton::Skeleton,
    observed: Vec<Tensor>,
    future: Vec<Tensor>,
    gt_positions: Vec<Tensor>,
    last_observed: Tensor,
    set: crate::sampling::IndexSet,
    eps: Tensor,
    step_eps: Vec<Tensor>,
    coins: Vec<bool>,
    lambda: f64,
}

impl FrozenScenario {
    /// Tiny instance: L=8, J=2, 4 observed frames, horizon 6, batch 2.
    fn build(mode: crate::sampling::FusionMode, seed: u64) -> Self {
        use crate::model::{MixMatchModel, ModelConfig};
        use crate::skeleton::{Pose, Skeleton};

        let (l, joints, t, horizon, batch) = (8usize, 2usize, 4usize, 6usize, 2usize);
        let d = 4 * joints;
        let config = ModelConfig {
            hidden_size: l,
            joints,
            alpha: 0.5,
            fusion_mode: mode,
            residual_velocity: true,
        };
        let model = MixMatchModel::init(config, seed).expect("valid config");
        let skeleton = Skeleton::chain(joints, [0.0, 1.0, 0.0]);
        let zd = config.z_dim();

        let mut rng = substream(seed, Stream::Data, 1);
        let mut random_pose_batch = |rows: usize| -> (Tensor, Vec<Pose>) {
            let mut flat = Vec::with_capacity(rows * d);
            let mut poses = Vec::with_capacity(rows);
            for _ in 0..rows {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let pose = Pose::from_flat_unnormalized(&raw);
                flat.extend(pose.flatten());
                poses.push(pose);
            }
            (Tensor::matrix(rows, d, flat), poses)
        };

        let observed: Vec<Tensor> = (0..t).map(|_| random_pose_batch(batch).0).collect();
        let mut future = Vec::with_capacity(horizon);
        let mut gt_positions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let (tensor, poses) = random_pose_batch(batch);
            let refs: Vec<&Pose> = poses.iter().collect();
            gt_positions.push(
                crate::losses::aligned_gt_positions(&skeleton, &[refs]).expect("fk works")
                    .remove(0),
            );
            future.push(tensor);
        }
        let last_observed = observed.last().unwrap().clone();
        let set = crate::sampling::sample_indices(l, 0.5, &mut rng).expect("alpha in range");
        let eps = Tensor::matrix(batch, zd, (0..batch * zd).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let step_eps = (0..horizon)
            .map(|_| {
                Tensor::matrix(batch, zd, (0..batch * zd).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        // alternate teacher and autoregressive steps so both input paths carry gradient
        let coins: Vec<bool> = (0..horizon).map(|s| s % 2 == 0).collect();
        FrozenScenario {
            model,
            skeleton,
            observed,
            future,
            gt_positions,
            last_observed,
            set,
            eps,
            step_eps,
            coins,
            lambda: 0.7,
        }
    }

    /// Loss and parameter gradients at the model's current parameters.
    fn loss_and_grads(&self) -> (f64, Vec<f64>) {
        use crate::losses;
        use crate::model::{reparameterize, DecodePlan};
        use crate::sampling::FusionMode;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let param_ids = tape.param_ids();
        let h_t = bound.encode_past(&mut tape, &self.observed).expect("encode");
        let has_posterior = self.model.config.fusion_mode != FusionMode::Rhp;

        let (z, lpp_z, kl) = if has_posterior {
            let h_fut = bound.encode_future(&mut tape, &self.future).expect("encode");
            let (mu, lv) = bound.posterior(&mut tape, h_t, h_fut, &self.set).expect("posterior");
            let kl = losses::loss_kl_tape(&mut tape, mu, lv).expect("kl");
            if self.model.config.fusion_mode == FusionMode::Lpp {
                let zs: Vec<_> = self
                    .step_eps
                    .iter()
                    .map(|e| reparameterize(&mut tape, mu, lv, e).expect("reparam"))
                    .collect();
                (None, Some(zs), Some(kl))
            } else {
                let z = reparameterize(&mut tape, mu, lv, &self.eps).expect("reparam");
                (Some(z), None, Some(kl))
            }
        } else {
            (Some(tape.constant(self.eps.clone())), None, None)
        };

        let h_z = match z {
            Some(z) => bound.latent_hidden(&mut tape, h_t, z, &self.set).expect("latent"),
            None => h_t,
        };
        let plan = DecodePlan {
            horizon: self.future.len(),
            last_observed: self.last_observed.clone(),
            teacher_frames: Some(&self.future),
            teacher_coins: &self.coins,
            lpp_step_z: lpp_z.as_deref(),
        };
        let outputs = bound.decode(&mut tape, h_z, &plan).expect("decode");
        let rot = losses::loss_rot_tape(&mut tape, &outputs, &self.future).expect("rot");
        let skl = losses::loss_skl_tape(&mut tape, &self.skeleton, &outputs, &self.gt_positions)
            .expect("skl");
        let recon = tape.add(rot, skl).expect("add");
        let total = match kl {
            Some(kl) => losses::total_loss_tape(&mut tape, recon, kl, self.lambda).expect("total"),
            None => recon,
        };
        let grads = tape.backward(total).expect("backward");
        let flat: Vec<f64> = param_ids
            .iter()
            .flat_map(|id| grads.get_or_zeros(*id, tape.value(*id).shape()).into_data())
            .collect();
        (tape.value(total).item(), flat)
    }

    fn theta(&self) -> Vec<f64> {
        self.model.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    fn with_theta(&self, theta: &[f64]) -> FrozenScenario {
        let mut out = self.clone();
        let mut offset = 0;
        for slot in out.model.params_mut() {
            let n = slot.numel();
            slot.data_mut().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        out
    }
}

/// End-to-end check: the full training loss of a tiny model against central
/// finite differences over every parameter.
pub fn check_model_end_to_end(mode: crate::sampling::FusionMode, seed: u64) -> GradCheckReport {
    let scenario = FrozenScenario::build(mode, seed);
    let (_, analytic) = scenario.loss_and_grads();
    let theta = scenario.theta();
    let numeric = central_diff(
        |th| scenario.with_theta(th).loss_and_grads().0,
        &theta,
        FD_STEP,
    );
    GradCheckReport {
        name: format!("model-end-to-end-{mode}"),
        max_rel_err: max_rel_err(&analytic, &numeric),
        tolerance: MODEL_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for report in check_ops(20240117, 8) {
            assert!(
                report.pass(),
                "{}: max rel err {} over tolerance {}",
                report.name,
                report.max_rel_err,
                report.tolerance
            );
        }
    }

    #[test]
    fn full_model_matches_finite_differences_in_every_mode() {
        use crate::sampling::FusionMode;
        for mode in [FusionMode::Mm, FusionMode::Lhp, FusionMode::Rhp, FusionMode::Lpp] {
            let report = check_model_end_to_end(mode, 20240117);
            assert!(
                report.pass(),
                "{}: max rel err {} over tolerance {}",
                report.name,
                report.max_rel_err,
                report.tolerance
            );
        }
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        // 17 parameters: (3x2 + 2) + (2x3 + 3) = 8 + 9, minus the input.
        let w1_shape = vec![3usize, 2];
        let b1_shape = vec![2usize];
        let w2_shape = vec![2usize, 3];
        let b2_shape = vec![3usize];
        let x = Tensor::vector(vec![0.4, -0.8, 0.3]);
        let target = Tensor::vector(vec![0.2, -0.1, 0.5]);

        let mut rng = substream(99, Stream::Init, 0);
        let theta: Vec<f64> = (0..17).map(|_| rng.gen_range(-0.9..0.9)).collect();

        let build = |theta: &[f64]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut t = Tape::new();
            let w1 = t.param(Tensor::new(w1_shape.clone(), theta[0..6].to_vec()));
            let b1 = t.param(Tensor::new(b1_shape.clone(), theta[6..8].to_vec()));
            let w2 = t.param(Tensor::new(w2_shape.clone(), theta[8..14].to_vec()));
            let b2 = t.param(Tensor::new(b2_shape.clone(), theta[14..17].to_vec()));
            let xn = t.constant(x.clone());
            let tn = t.constant(target.clone());
            let h = t.matmul(xn, w1).unwrap();
            let h = t.add_row_vec(h, b1).unwrap();
            let h = t.tanh(h).unwrap();
            let o = t.matmul(h, w2).unwrap();
            let o = t.add_row_vec(o, b2).unwrap();
            let o = t.sigmoid(o).unwrap();
            let d = t.sub(o, tn).unwrap();
            let loss = t.sq_norm(d).unwrap();
            (t, vec![w1, b1, w2, b2], loss)
        };

        let (tape, params, loss) = build(&theta);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> =
            params.iter().flat_map(|p| grads.get(*p).unwrap().data().to_vec()).collect();
        let numeric = central_diff(
            |th| {
                let (t, _, l) = build(th);
                t.value(l).item()
            },
            &theta,
            FD_STEP,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < OP_TOLERANCE, "max rel err {err}");
    }
}
