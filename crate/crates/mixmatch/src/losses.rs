//! Loss terms: rotation-space error, skeletal (3D) error, and the KL prior.
//!
//! Each loss exists twice: a pure reference form over plain values (used by
//! evaluation and as the oracle in tests) and a tape form used in training.
//! All losses are positive quantities to be minimized. The skeletal loss
//! root-aligns both streams, so root rotations receive gradient only through
//! the rotation loss.

use crate::quaternion::KinematicsError;
use crate::skeleton::{align_root, forward_kinematics, Pose, Skeleton};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

// ── Pure reference forms ─────────────────────────────────────────────────

/// Mean squared quaternion-component error over `frames` x `joints` x 4:
/// `(1 / (F * 4J)) * sum ||pred - gt||^2` on flattened `(F, 4J)` data.
pub fn rotation_mse(pred: &[f64], gt: &[f64], frames: usize, joints: usize) -> f64 {
    assert_eq!(pred.len(), frames * 4 * joints, "pred length");
    assert_eq!(gt.len(), pred.len(), "gt length");
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    sum / (frames * 4 * joints) as f64
}

/// Mean squared 3D position error: `(1 / (F * 3J)) * sum ||p - q||^2` on
/// flattened `(F, 3J)` position data.
pub fn position_mse(pred: &[f64], gt: &[f64], frames: usize, joints: usize) -> f64 {
    assert_eq!(pred.len(), frames * 3 * joints, "pred length");
    assert_eq!(gt.len(), pred.len(), "gt length");
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    sum / (frames * 3 * joints) as f64
}

/// Root-align both pose streams, run forward kinematics, and compare in 3D.
pub fn skeletal_mse(
    skeleton: &Skeleton,
    pred: &[Pose],
    gt: &[Pose],
) -> Result<f64, KinematicsError> {
    assert_eq!(pred.len(), gt.len(), "frame counts differ");
    let joints = skeleton.joint_count();
    let frames = pred.len();
    let mut pred_flat = Vec::with_capacity(frames * 3 * joints);
    let mut gt_flat = Vec::with_capacity(frames * 3 * joints);
    for (p, g) in pred.iter().zip(gt) {
        for pos in forward_kinematics(skeleton, &align_root(p))? {
            pred_flat.extend_from_slice(&pos);
        }
        for pos in forward_kinematics(skeleton, &align_root(g))? {
            gt_flat.extend_from_slice(&pos);
        }
    }
    Ok(position_mse(&pred_flat, &gt_flat, frames, joints))
}

/// KL divergence of a diagonal Gaussian from the standard normal:
/// `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)`. Non-negative, zero iff
/// `mu = 0` and `sigma^2 = 1`.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    assert_eq!(mu.len(), log_var.len());
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

// ── Tape forms ───────────────────────────────────────────────────────────

/// Rotation loss over per-step prediction nodes `(B, 4J)` against constant
/// ground-truth tensors, batch-meaned.
pub fn loss_rot_tape(
    tape: &mut Tape,
    pred_frames: &[NodeId],
    gt_frames: &[Tensor],
) -> Result<NodeId, TapeError> {
    assert_eq!(pred_frames.len(), gt_frames.len(), "frame counts differ");
    let frames = pred_frames.len();
    let (rows, cols) = {
        let v = tape.value(pred_frames[0]);
        (v.rows(), v.cols())
    };
    let mut acc: Option<NodeId> = None;
    for (p, g) in pred_frames.iter().zip(gt_frames) {
        if g.shape() != tape.value(*p).shape() {
            return Err(TapeError::ShapeMismatch {
                op: "loss_rot",
                lhs: tape.value(*p).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let gt = tape.constant(g.clone());
        let diff = tape.sub(*p, gt)?;
        let sq = tape.sq_norm(diff)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let total = acc.expect("at least one frame");
    tape.scalar_mul(total, 1.0 / (rows * frames * cols) as f64)
}

/// Differentiable root-aligned forward kinematics for one frame of raw
/// predictions `(B, 4J)`. Per-joint quaternions are normalized on the tape,
/// the root's global rotation is pinned to the identity (alignment), and
/// positions come back as per-joint `(B, 3)` nodes with the root omitted
/// (it is constantly zero).
pub fn fk_positions_tape(
    tape: &mut Tape,
    skeleton: &Skeleton,
    raw_frame: NodeId,
) -> Result<Vec<NodeId>, TapeError> {
    let joints = skeleton.joint_count();
    let v = tape.value(raw_frame);
    if v.cols() != 4 * joints {
        return Err(TapeError::ShapeMismatch {
            op: "fk_positions",
            lhs: v.shape().to_vec(),
            rhs: vec![v.rows(), 4 * joints],
        });
    }
    let rows = v.rows();
    let normalized = tape.normalize_quat_blocks(raw_frame)?;
    let zero_rows = Tensor::matrix(rows, 3, vec![0.0; rows * 3]);

    // global[j]: None encodes "identity" for the aligned root.
    let mut global: Vec<Option<NodeId>> = vec![None; joints];
    let mut position: Vec<NodeId> = Vec::with_capacity(joints);
    let mut out = Vec::with_capacity(joints - 1);
    for j in 0..joints {
        match skeleton.parent(j) {
            None => {
                position.push(tape.constant(zero_rows.clone()));
            }
            Some(p) => {
                let local = tape.slice_cols(normalized, 4 * j, 4 * j + 4)?;
                let offset = skeleton.offset(j);
                let (rotated, new_global) = match global[p] {
                    None => {
                        // parent frame is the aligned identity
                        let off = Tensor::matrix(
                            rows,
                            3,
                            (0..rows).flat_map(|_| offset).collect(),
                        );
                        (tape.constant(off), local)
                    }
                    Some(gp) => {
                        (tape.rotate_rows(gp, offset)?, tape.quat_mul_rows(gp, local)?)
                    }
                };
                let pos = tape.add(position[p], rotated)?;
                position.push(pos);
                global[j] = Some(new_global);
                out.push(pos);
            }
        }
    }
    Ok(out)
}

/// Skeletal loss on the tape: per frame, differentiable aligned FK on the
/// predictions against precomputed aligned ground-truth positions
/// `(B, 3(J-1))` (non-root joints, in joint order), batch-meaned with the
/// `1/(F * 3J)` normalization counting all J joints as the pure form does.
pub fn loss_skl_tape(
    tape: &mut Tape,
    skeleton: &Skeleton,
    pred_frames: &[NodeId],
    gt_positions: &[Tensor],
) -> Result<NodeId, TapeError> {
    assert_eq!(pred_frames.len(), gt_positions.len(), "frame counts differ");
    let joints = skeleton.joint_count();
    let frames = pred_frames.len();
    let rows = tape.value(pred_frames[0]).rows();
    let mut acc: Option<NodeId> = None;
    for (p, gt) in pred_frames.iter().zip(gt_positions) {
        let positions = fk_positions_tape(tape, skeleton, *p)?;
        let gt_node = tape.constant(gt.clone());
        for (j, pos) in positions.iter().enumerate() {
            let gt_j = tape.slice_cols(gt_node, 3 * j, 3 * j + 3)?;
            let diff = tape.sub(*pos, gt_j)?;
            let sq = tape.sq_norm(diff)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, sq)?,
                None => sq,
            });
        }
    }
    let total = acc.expect("at least one joint pair");
    tape.scalar_mul(total, 1.0 / (rows * frames * 3 * joints) as f64)
}

/// Aligned ground-truth positions of the non-root joints as one `(B, 3(J-1))`
/// tensor per frame, computed with the pure kinematics path.
pub fn aligned_gt_positions(
    skeleton: &Skeleton,
    frames: &[Vec<&Pose>],
) -> Result<Vec<Tensor>, KinematicsError> {
    let joints = skeleton.joint_count();
    let mut out = Vec::with_capacity(frames.len());
    for batch in frames {
        let rows = batch.len();
        let mut data = Vec::with_capacity(rows * 3 * (joints - 1));
        for pose in batch {
            let pos = forward_kinematics(skeleton, &align_root(pose))?;
            for p in &pos[1..] {
                data.extend_from_slice(p);
            }
        }
        out.push(Tensor::matrix(rows, 3 * (joints - 1), data));
    }
    Ok(out)
}

/// KL loss on the tape from `(B, zd)` mean and log-variance, batch-meaned.
pub fn loss_kl_tape(tape: &mut Tape, mu: NodeId, log_var: NodeId) -> Result<NodeId, TapeError> {
    let shape = tape.value(mu).shape().to_vec();
    if shape != tape.value(log_var).shape() {
        return Err(TapeError::ShapeMismatch {
            op: "loss_kl",
            lhs: shape,
            rhs: tape.value(log_var).shape().to_vec(),
        });
    }
    let rows = tape.value(mu).rows();
    let zd = tape.value(mu).cols();
    if zd == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mu_sq = tape.sq_norm(mu)?;
    let var = tape.exp(log_var)?;
    let var_sum = tape.sum(var)?;
    let lv_sum = tape.sum(log_var)?;
    let t = tape.add(mu_sq, var_sum)?;
    let t = tape.sub(t, lv_sum)?;
    let c = tape.constant(Tensor::scalar((rows * zd) as f64));
    let t = tape.sub(t, c)?;
    tape.scalar_mul(t, 0.5 / rows as f64)
}

/// `recon + lambda * kl` where `recon` already contains rotation and
/// skeletal terms.
pub fn total_loss_tape(
    tape: &mut Tape,
    recon: NodeId,
    kl: NodeId,
    lambda: f64,
) -> Result<NodeId, TapeError> {
    let weighted = tape.scalar_mul(kl, lambda)?;
    tape.add(recon, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quaternion::Quaternion;
    use crate::rng::{substream, Stream};
    use rand::Rng;
    use std::f64::consts::E;

    #[test]
    fn rotation_mse_hand_case() {
        // one frame, one joint: pred (1,0,0,0) vs gt (0,1,0,0) -> 2/4 = 0.5
        let pred = [1.0, 0.0, 0.0, 0.0];
        let gt = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(rotation_mse(&pred, &gt, 1, 1), 0.5);
    }

    #[test]
    fn rotation_mse_perfect_and_joint_scaling() {
        let pred = [0.5, -0.5, 0.5, 0.5];
        assert_eq!(rotation_mse(&pred, &pred, 1, 1), 0.0);
        // doubling J with identical per-joint errors leaves the mean unchanged
        let p1 = [1.0, 0.0, 0.0, 0.0];
        let g1 = [0.0, 1.0, 0.0, 0.0];
        let p2 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let g2 = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(rotation_mse(&p1, &g1, 1, 1), rotation_mse(&p2, &g2, 1, 2));
    }

    #[test]
    fn position_mse_hand_case() {
        // single joint displaced by (1,0,0) in one frame -> 1/3
        let pred = [1.0, 0.0, 0.0];
        let gt = [0.0, 0.0, 0.0];
        assert!((position_mse(&pred, &gt, 1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn skeletal_mse_ignores_root_rotation() {
        let sk = Skeleton::chain(3, [0.0, 1.0, 0.0]);
        let gt = Pose::identity(3);
        let mut rots = vec![Quaternion::IDENTITY; 3];
        rots[0] = Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.9);
        let pred = Pose::new(rots).unwrap();
        let loss = skeletal_mse(&sk, &[pred], &[gt.clone()]).unwrap();
        assert!(loss.abs() < 1e-24, "alignment should remove root rotation, got {loss}");
        let same = skeletal_mse(&sk, &[gt.clone()], &[gt]).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn losses_are_symmetric() {
        let mut rng = substream(12, Stream::Eval, 0);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(rotation_mse(&a, &b, 1, 2), rotation_mse(&b, &a, 1, 2));
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(position_mse(&p, &q, 1, 2), position_mse(&q, &p, 1, 2));
    }

    #[test]
    fn kl_anchors() {
        assert_eq!(kl_divergence(&[0.0], &[0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        // sigma^2 = e: (e - 2) / 2
        assert!((kl_divergence(&[0.0], &[1.0]) - (E - 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative_with_unique_zero() {
        let mut rng = substream(13, Stream::Eval, 0);
        for _ in 0..500 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let kl = kl_divergence(&mu, &lv);
            assert!(kl >= 0.0);
            if kl < 1e-12 {
                assert!(mu.iter().all(|m| m.abs() < 1e-6));
                assert!(lv.iter().all(|l| l.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn tape_losses_match_pure_forms() {
        let mut rng = substream(14, Stream::Eval, 0);
        let sk = Skeleton::chain(3, [0.0, 1.0, 0.0]);
        let joints = 3;
        let frames = 2;
        let rows = 2;

        // random raw predictions and unit ground truth poses
        let raw: Vec<Vec<f64>> = (0..frames)
            .map(|_| (0..rows * 4 * joints).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gt_poses: Vec<Vec<Pose>> = (0..frames)
            .map(|_| {
                (0..rows)
                    .map(|_| {
                        let flat: Vec<f64> =
                            (0..4 * joints).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        Pose::from_flat_unnormalized(&flat)
                    })
                    .collect()
            })
            .collect();

        let mut tape = Tape::new();
        let pred_nodes: Vec<NodeId> = raw
            .iter()
            .map(|r| tape.constant(Tensor::matrix(rows, 4 * joints, r.clone())))
            .collect();

        // rotation loss parity
        let gt_rot: Vec<Tensor> = gt_poses
            .iter()
            .map(|batch| {
                Tensor::matrix(
                    rows,
                    4 * joints,
                    batch.iter().flat_map(|p| p.flatten()).collect(),
                )
            })
            .collect();
        let rot_node = loss_rot_tape(&mut tape, &pred_nodes, &gt_rot).unwrap();
        let mut pure_rot = 0.0;
        for (r, g) in raw.iter().zip(&gt_rot) {
            for b in 0..rows {
                pure_rot += rotation_mse(
                    &r[b * 4 * joints..(b + 1) * 4 * joints],
                    g.row(b),
                    1,
                    joints,
                );
            }
        }
        pure_rot /= (rows * frames) as f64;
        assert!((tape.value(rot_node).item() - pure_rot).abs() < 1e-12);

        // skeletal loss parity
        let frame_refs: Vec<Vec<&Pose>> =
            gt_poses.iter().map(|b| b.iter().collect()).collect();
        let gt_pos = aligned_gt_positions(&sk, &frame_refs).unwrap();
        let skl_node = loss_skl_tape(&mut tape, &sk, &pred_nodes, &gt_pos).unwrap();
        let mut pure_skl = 0.0;
        for (r, gb) in raw.iter().zip(&gt_poses) {
            for b in 0..rows {
                let pred_pose =
                    Pose::from_flat_unnormalized(&r[b * 4 * joints..(b + 1) * 4 * joints]);
                pure_skl +=
                    skeletal_mse(&sk, &[pred_pose], &[gb[b].clone()]).unwrap();
            }
        }
        pure_skl /= (rows * frames) as f64;
        assert!(
            (tape.value(skl_node).item() - pure_skl).abs() < 1e-12,
            "tape {} vs pure {}",
            tape.value(skl_node).item(),
            pure_skl
        );

        // kl parity
        let mu: Vec<f64> = (0..rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lv: Vec<f64> = (0..rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu_n = tape.constant(Tensor::matrix(rows, 3, mu.clone()));
        let lv_n = tape.constant(Tensor::matrix(rows, 3, lv.clone()));
        let kl_node = loss_kl_tape(&mut tape, mu_n, lv_n).unwrap();
        let pure_kl = kl_divergence(&mu, &lv) / rows as f64;
        assert!((tape.value(kl_node).item() - pure_kl).abs() < 1e-12);

        // lambda endpoints of the combined loss
        let recon = tape.add(rot_node, skl_node).unwrap();
        let at0 = total_loss_tape(&mut tape, recon, kl_node, 0.0).unwrap();
        let at1 = total_loss_tape(&mut tape, recon, kl_node, 1.0).unwrap();
        assert_eq!(tape.value(at0).item(), tape.value(recon).item());
        assert!(
            (tape.value(at1).item() - (tape.value(recon).item() + tape.value(kl_node).item()))
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn skeletal_tape_gradients_match_finite_differences() {
        use crate::gradcheck::{central_diff, max_rel_err, FD_STEP, OP_TOLERANCE};
        let sk = Skeleton::chain(3, [0.2, 0.8, -0.1]);
        let joints = 3;
        let rows = 2;
        let mut rng = substream(15, Stream::Eval, 0);
        let raw: Vec<f64> = (0..rows * 4 * joints).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gt: Vec<Pose> = (0..rows)
            .map(|_| {
                let flat: Vec<f64> = (0..4 * joints).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Pose::from_flat_unnormalized(&flat)
            })
            .collect();
        let gt_pos =
            aligned_gt_positions(&sk, &[gt.iter().collect::<Vec<_>>()]).unwrap();

        let eval = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let pred = tape.param(Tensor::matrix(rows, 4 * joints, x.to_vec()));
            let loss = loss_skl_tape(&mut tape, &sk, &[pred], &gt_pos).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let pred = tape.param(Tensor::matrix(rows, 4 * joints, raw.clone()));
        let loss = loss_skl_tape(&mut tape, &sk, &[pred], &gt_pos).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(pred).unwrap().data().to_vec();
        let numeric = central_diff(eval, &raw, FD_STEP);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < OP_TOLERANCE, "max rel err {err}");
        // root block must receive no skeletal gradient (alignment)
        for b in 0..rows {
            for c in 0..4 {
                assert_eq!(analytic[b * 4 * joints + c], 0.0);
            }
        }
    }
}
