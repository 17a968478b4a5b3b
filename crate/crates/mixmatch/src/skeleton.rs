//! Skeletons, poses, motion sequences, and forward kinematics.
//!
//! Poses are rotation-only: the root sits at the origin and global
//! translation is never modeled. Root alignment replaces the root rotation
//! with the identity so two motions can be compared in a root-relative
//! frame.

use crate::quaternion::{KinematicsError, Quaternion};
use std::fmt::Write as _;
use std::path::Path;

/// Joint tree with per-joint bone offsets in the parent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
}

impl Skeleton {
    /// Validates that joint 0 is the root and every parent precedes its child.
    pub fn new(parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]>) -> Result<Self, KinematicsError> {
        if parents.is_empty() || parents.len() != offsets.len() {
            return Err(KinematicsError::InvalidTree(format!(
                "{} parents vs {} offsets",
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0].is_some() {
            return Err(KinematicsError::InvalidTree("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(KinematicsError::InvalidTree(format!(
                        "joint {j} must have a parent with smaller index, got {p:?}"
                    )))
                }
            }
        }
        Ok(Skeleton { parents, offsets })
    }

    /// Single chain 0 -> 1 -> ... -> J-1 with constant offsets.
    pub fn chain(joints: usize, offset: [f64; 3]) -> Self {
        let parents = (0..joints).map(|j| if j == 0 { None } else { Some(j - 1) }).collect();
        Skeleton { parents, offsets: vec![offset; joints] }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.offsets[j]
    }

    /// Line-delimited text form: first line `J`, then `index parent offx offy offz`.
    pub fn write_file(&self, path: &Path) -> Result<(), KinematicsError> {
        let mut out = String::new();
        writeln!(out, "{}", self.joint_count()).unwrap();
        for j in 0..self.joint_count() {
            let parent = self.parents[j].map(|p| p as i64).unwrap_or(-1);
            let o = self.offsets[j];
            writeln!(out, "{} {} {} {} {}", j, parent, o[0], o[1], o[2]).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)?;
        let path_str = path.display().to_string();
        let err = |line: usize, detail: String| KinematicsError::ParseError {
            path: path_str.clone(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let joints: usize =
            first.trim().parse().map_err(|_| err(1, format!("bad joint count {first:?}")))?;
        let mut parents = vec![None; joints];
        let mut offsets = vec![[0.0; 3]; joints];
        for j in 0..joints {
            let (ln, line) =
                lines.next().ok_or_else(|| err(joints + 1, format!("missing joint {j}")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(ln + 1, format!("expected 5 fields, got {}", fields.len())));
            }
            let idx: usize =
                fields[0].parse().map_err(|_| err(ln + 1, format!("bad index {:?}", fields[0])))?;
            if idx != j {
                return Err(err(ln + 1, format!("expected joint {j}, got {idx}")));
            }
            let parent: i64 = fields[1]
                .parse()
                .map_err(|_| err(ln + 1, format!("bad parent {:?}", fields[1])))?;
            parents[j] = if parent < 0 { None } else { Some(parent as usize) };
            for (k, f) in fields[2..].iter().enumerate() {
                offsets[j][k] =
                    f.parse().map_err(|_| err(ln + 1, format!("bad offset {f:?}")))?;
            }
        }
        Skeleton::new(parents, offsets)
    }
}

/// Local joint rotations for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotations: Vec<Quaternion>,
}

pub const POSE_UNIT_TOLERANCE: f64 = 1e-9;

impl Pose {
    /// All rotations must already be unit within 1e-9.
    pub fn new(rotations: Vec<Quaternion>) -> Result<Self, KinematicsError> {
        for q in &rotations {
            let n = q.norm();
            if (n - 1.0).abs() > POSE_UNIT_TOLERANCE {
                return Err(KinematicsError::NonUnitQuaternion { norm: n });
            }
        }
        Ok(Pose { rotations })
    }

    /// Normalize raw quaternion components (e.g. network output) into a pose.
    pub fn from_unnormalized(rotations: &[Quaternion]) -> Self {
        Pose { rotations: rotations.iter().map(|q| q.normalize()).collect() }
    }

    pub fn identity(joints: usize) -> Self {
        Pose { rotations: vec![Quaternion::IDENTITY; joints] }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    pub fn rotation(&self, j: usize) -> &Quaternion {
        &self.rotations[j]
    }

    pub fn rotations(&self) -> &[Quaternion] {
        &self.rotations
    }

    /// Flatten to `4J` components `(w, x, y, z)` per joint.
    pub fn flatten(&self) -> Vec<f64> {
        self.rotations.iter().flat_map(|q| [q.w, q.x, q.y, q.z]).collect()
    }

    /// Rebuild from `4J` raw components, normalizing each joint.
    pub fn from_flat_unnormalized(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 4, 0, "flat pose length must be a multiple of 4");
        let rotations = flat
            .chunks_exact(4)
            .map(|q| Quaternion::new(q[0], q[1], q[2], q[3]).normalize())
            .collect();
        Pose { rotations }
    }
}

/// Replace the root rotation with the identity, leaving children untouched.
/// Both motions of a comparison go through this before skeletal error.
pub fn align_root(pose: &Pose) -> Pose {
    let mut rotations = pose.rotations().to_vec();
    if !rotations.is_empty() {
        rotations[0] = Quaternion::IDENTITY;
    }
    Pose { rotations }
}

/// Global joint positions. The root is pinned to the origin; each child sits
/// at its parent plus the parent-frame bone offset rotated by the parent's
/// global rotation.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    pose: &Pose,
) -> Result<Vec<[f64; 3]>, KinematicsError> {
    let joints = skeleton.joint_count();
    if pose.joint_count() != joints {
        return Err(KinematicsError::JointCountMismatch {
            got: pose.joint_count(),
            expected: joints,
        });
    }
    let mut global = Vec::with_capacity(joints);
    let mut positions = vec![[0.0; 3]; joints];
    for j in 0..joints {
        match skeleton.parent(j) {
            None => global.push(*pose.rotation(j)),
            Some(p) => {
                let parent_rot: &Quaternion = &global[p];
                let off = skeleton.offset(j);
                let rotated = parent_rot.rotate_vector_unchecked(off);
                positions[j] = [
                    positions[p][0] + rotated[0],
                    positions[p][1] + rotated[1],
                    positions[p][2] + rotated[2],
                ];
                global.push(parent_rot.multiply(pose.rotation(j)));
            }
        }
    }
    Ok(positions)
}

/// Time-ordered poses. `frame_rate` is carried as metadata only.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Vec<Pose>,
    pub frame_rate: f64,
}

impl MotionSequence {
    pub fn new(frames: Vec<Pose>, frame_rate: f64) -> Result<Self, KinematicsError> {
        if frames.is_empty() {
            return Err(KinematicsError::InvalidTree("sequence needs at least one frame".into()));
        }
        let joints = frames[0].joint_count();
        for f in &frames {
            if f.joint_count() != joints {
                return Err(KinematicsError::JointCountMismatch {
                    got: f.joint_count(),
                    expected: joints,
                });
            }
        }
        Ok(MotionSequence { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames[0].joint_count()
    }

    /// `(T, 4J)` row-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.flatten()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_pose(joints: usize, rng: &mut impl Rng) -> Pose {
        let rotations = (0..joints)
            .map(|_| {
                Quaternion::new(
                    rng.gen_range(-1.0..1.0f64).max(1e-3),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize()
            })
            .collect::<Vec<_>>();
        Pose::new(rotations).unwrap()
    }

    #[test]
    fn identity_chain_stacks_offsets() {
        let sk = Skeleton::chain(3, [0.0, 1.0, 0.0]);
        let p = Pose::identity(3);
        let pos = forward_kinematics(&sk, &p).unwrap();
        assert_eq!(pos, vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]);
    }

    #[test]
    fn rotated_root_swings_the_chain() {
        let sk = Skeleton::chain(3, [0.0, 1.0, 0.0]);
        let mut rots = vec![Quaternion::IDENTITY; 3];
        rots[0] = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let p = Pose::new(rots).unwrap();
        let pos = forward_kinematics(&sk, &p).unwrap();
        assert!(pos[1][0] + 1.0 < 1e-12 && pos[1][1].abs() < 1e-12);
        assert!(pos[2][0] + 2.0 < 1e-12 && pos[2][1].abs() < 1e-12);
    }

    #[test]
    fn bone_lengths_survive_random_poses() {
        let sk = Skeleton::chain(5, [0.3, 0.9, -0.2]);
        let bone: f64 = (0.3f64 * 0.3 + 0.9 * 0.9 + 0.2 * 0.2).sqrt();
        let mut rng = substream(8, Stream::Eval, 0);
        for _ in 0..1000 {
            let pose = random_pose(5, &mut rng);
            let pos = forward_kinematics(&sk, &pose).unwrap();
            assert_eq!(pos[0], [0.0, 0.0, 0.0]);
            for j in 1..5 {
                let p = pos[j - 1];
                let c = pos[j];
                let d = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2))
                    .sqrt();
                assert!((d - bone).abs() < 1e-9, "bone {j} length {d} vs {bone}");
            }
        }
    }

    #[test]
    fn fk_is_sign_agnostic() {
        let sk = Skeleton::chain(4, [0.0, 1.0, 0.0]);
        let mut rng = substream(9, Stream::Eval, 0);
        let pose = random_pose(4, &mut rng);
        let mut flipped = pose.rotations().to_vec();
        flipped[2] = Quaternion::new(-flipped[2].w, -flipped[2].x, -flipped[2].y, -flipped[2].z);
        let flipped = Pose::new(flipped).unwrap();
        let a = forward_kinematics(&sk, &pose).unwrap();
        let b = forward_kinematics(&sk, &flipped).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((pa[k] - pb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn align_root_is_idempotent_and_local() {
        let mut rng = substream(10, Stream::Eval, 0);
        let pose = random_pose(4, &mut rng);
        let aligned = align_root(&pose);
        assert_eq!(*aligned.rotation(0), Quaternion::IDENTITY);
        for j in 1..4 {
            assert_eq!(aligned.rotation(j), pose.rotation(j));
        }
        assert_eq!(align_root(&aligned), aligned);
    }

    #[test]
    fn tree_validation() {
        assert!(Skeleton::new(vec![Some(0)], vec![[0.0; 3]]).is_err());
        assert!(Skeleton::new(vec![None, Some(1)], vec![[0.0; 3]; 2]).is_err());
        assert!(Skeleton::new(vec![None, Some(0), Some(1)], vec![[0.0; 3]; 3]).is_ok());
    }

    #[test]
    fn skeleton_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("skeleton.txt");
        let sk = Skeleton::new(
            vec![None, Some(0), Some(1), Some(1)],
            vec![[0.0, 0.0, 0.0], [0.1, 1.0, -0.25], [1.0 / 3.0, 0.0, 0.0], [0.0, 0.7, 0.0]],
        )
        .unwrap();
        sk.write_file(&path).unwrap();
        let back = Skeleton::read_file(&path).unwrap();
        assert_eq!(sk, back);
    }

    #[test]
    fn skeleton_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "2\n0 -1 0 0 0\n1 zero 0 1 0\n").unwrap();
        let err = Skeleton::read_file(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    #[test]
    fn non_unit_pose_rejected() {
        let q = Quaternion::new(1.0, 1e-4, 0.0, 0.0);
        assert!(Pose::new(vec![q]).is_err());
    }
}
