//! Kinematic tree of the human body.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Joint coordinates for one frame; `D = 3` is camera-space meters
/// (x right, y down, z forward), `D = 2` is pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose<const D: usize> {
    pub joints: Vec<[f64; D]>,
}

pub type Pose3D = Pose<3>;
pub type Pose2D = Pose<2>;

impl<const D: usize> Pose<D> {
    pub fn new(joints: Vec<[f64; D]>) -> Self {
        Self { joints }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        let joints = values
            .chunks_exact(D)
            .map(|c| {
                let mut j = [0.0; D];
                j.copy_from_slice(c);
                j
            })
            .collect();
        Self { joints }
    }
}

/// Joint tree with rest-pose geometry.
///
/// Serialized as `{names, parent, flip_map, rest_bone_lengths,
/// rest_directions}`; `parent` uses `-1` for the root and bone lengths are
/// listed for non-root joints in increasing joint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonRepr", into = "SkeletonRepr")]
pub struct Skeleton {
    names: Vec<String>,
    parent: Vec<i64>,
    flip_map: Vec<usize>,
    rest_bone_lengths: Vec<f64>,
    rest_directions: Vec<[f64; 3]>,
    root: usize,
    order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonRepr {
    names: Vec<String>,
    parent: Vec<i64>,
    flip_map: Vec<usize>,
    rest_bone_lengths: Vec<f64>,
    #[serde(default)]
    rest_directions: Vec<[f64; 3]>,
}

impl TryFrom<SkeletonRepr> for Skeleton {
    type Error = Error;

    fn try_from(r: SkeletonRepr) -> Result<Self> {
        Skeleton::new(r.names, r.parent, r.flip_map, r.rest_bone_lengths, r.rest_directions)
    }
}

impl From<Skeleton> for SkeletonRepr {
    fn from(s: Skeleton) -> Self {
        SkeletonRepr {
            names: s.names,
            parent: s.parent,
            flip_map: s.flip_map,
            rest_bone_lengths: s.rest_bone_lengths,
            rest_directions: s.rest_directions,
        }
    }
}

/// Conventional 17-joint layout, pelvis first.
const DEFAULT_JOINTS: [(&str, i64, f64, [f64; 3]); 17] = [
    ("pelvis", -1, 0.0, [0.0, 0.0, 0.0]),
    ("r_hip", 0, 0.13, [-1.0, 0.0, 0.0]),
    ("r_knee", 1, 0.45, [0.0, 1.0, 0.0]),
    ("r_ankle", 2, 0.44, [0.0, 1.0, 0.0]),
    ("l_hip", 0, 0.13, [1.0, 0.0, 0.0]),
    ("l_knee", 4, 0.45, [0.0, 1.0, 0.0]),
    ("l_ankle", 5, 0.44, [0.0, 1.0, 0.0]),
    ("spine", 0, 0.23, [0.0, -1.0, 0.0]),
    ("thorax", 7, 0.25, [0.0, -1.0, 0.0]),
    ("neck", 8, 0.11, [0.0, -0.8, -0.6]),
    ("head", 9, 0.12, [0.0, -1.0, 0.0]),
    ("l_shoulder", 8, 0.16, [1.0, 0.1, 0.0]),
    ("l_elbow", 11, 0.28, [0.25, 1.0, 0.0]),
    ("l_wrist", 12, 0.25, [0.1, 1.0, 0.0]),
    ("r_shoulder", 8, 0.16, [-1.0, 0.1, 0.0]),
    ("r_elbow", 14, 0.28, [-0.25, 1.0, 0.0]),
    ("r_wrist", 15, 0.25, [-0.1, 1.0, 0.0]),
];

const DEFAULT_FLIP: [usize; 17] = [0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13];

/// The standard 17-joint skeleton (16 bones).
pub fn default_skeleton() -> Skeleton {
    let names = DEFAULT_JOINTS.iter().map(|j| j.0.to_string()).collect();
    let parent = DEFAULT_JOINTS.iter().map(|j| j.1).collect();
    let lengths = DEFAULT_JOINTS.iter().skip(1).map(|j| j.2).collect();
    let dirs = DEFAULT_JOINTS
        .iter()
        .map(|j| {
            let v = Vector3::from(j.3);
            let n = v.norm();
            if n > 0.0 {
                (v / n).into()
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Skeleton::new(names, parent, DEFAULT_FLIP.to_vec(), lengths, dirs).expect("default skeleton is valid")
}

impl Skeleton {
    /// Validates and builds a skeleton. `rest_directions` may be empty when
    /// forward kinematics is not needed.
    pub fn new(
        names: Vec<String>,
        parent: Vec<i64>,
        flip_map: Vec<usize>,
        rest_bone_lengths: Vec<f64>,
        rest_directions: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let m = parent.len();
        if m == 0 || names.len() != m || flip_map.len() != m {
            return Err(Error::Contract(format!(
                "skeleton arrays disagree: {} names, {} parents, {} flip entries",
                names.len(),
                m,
                flip_map.len()
            )));
        }
        let roots: Vec<usize> = (0..m).filter(|i| parent[*i] < 0).collect();
        if roots.len() != 1 || parent[roots[0]] != -1 {
            return Err(Error::Contract(format!("skeleton needs exactly one root, found {roots:?}")));
        }
        let root = roots[0];
        if let Some(i) = (0..m).find(|i| parent[*i] >= m as i64 || parent[*i] == *i as i64) {
            return Err(Error::Contract(format!("joint {i} has invalid parent {}", parent[i])));
        }
        // every joint must reach the root without revisiting a joint
        for start in 0..m {
            let mut cur = start;
            let mut steps = 0;
            while parent[cur] >= 0 {
                cur = parent[cur] as usize;
                steps += 1;
                if steps > m {
                    return Err(Error::Contract(format!("parent links from joint {start} form a cycle")));
                }
            }
        }
        for i in 0..m {
            if flip_map[i] >= m || flip_map[flip_map[i]] != i {
                return Err(Error::Contract(format!("flip_map is not an involution at joint {i}")));
            }
        }
        if flip_map[root] != root {
            return Err(Error::Contract("flip_map must map the root to itself".into()));
        }
        if rest_bone_lengths.len() != m - 1 {
            return Err(Error::Contract(format!(
                "expected {} rest bone lengths, got {}",
                m - 1,
                rest_bone_lengths.len()
            )));
        }
        if let Some(b) = rest_bone_lengths.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Contract(format!("rest bone length {b} must be positive")));
        }
        if !rest_directions.is_empty() && rest_directions.len() != m {
            return Err(Error::Contract(format!(
                "expected {m} rest directions, got {}",
                rest_directions.len()
            )));
        }
        // breadth-first order so parents precede children
        let mut order = vec![root];
        let mut k = 0;
        while k < order.len() {
            let p = order[k] as i64;
            order.extend((0..m).filter(|c| parent[*c] == p));
            k += 1;
        }
        Ok(Self {
            names,
            parent,
            flip_map,
            rest_bone_lengths,
            rest_directions,
            root,
            order,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn num_bones(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        usize::try_from(self.parent[joint]).ok()
    }

    pub fn parents(&self) -> &[i64] {
        &self.parent
    }

    pub fn flip_map(&self) -> &[usize] {
        &self.flip_map
    }

    pub fn rest_bone_lengths(&self) -> &[f64] {
        &self.rest_bone_lengths
    }

    /// `(child, parent)` for every bone, in increasing child order.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (0..self.num_joints())
            .filter_map(|i| self.parent(i).map(|p| (i, p)))
            .collect()
    }

    /// Tree neighbors of `joint` (its parent and its children).
    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.parent(joint).into_iter().collect();
        out.extend((0..self.num_joints()).filter(|c| self.parent(*c) == Some(joint)));
        out
    }

    /// Rest length of the bone ending at `joint`.
    fn rest_length(&self, joint: usize) -> f64 {
        let b = if joint > self.root { joint - 1 } else { joint };
        self.rest_bone_lengths[b]
    }

    /// Same topology with rescaled rest lengths.
    pub fn with_bone_lengths(&self, lengths: Vec<f64>) -> Result<Self> {
        Skeleton::new(
            self.names.clone(),
            self.parent.clone(),
            self.flip_map.clone(),
            lengths,
            self.rest_directions.clone(),
        )
    }

    /// Rest pose with the root at the origin.
    pub fn rest_pose(&self) -> Result<Pose3D> {
        let identity = vec![Matrix3::identity(); self.num_joints()];
        forward_kinematics(self, [0.0; 3], &identity)
    }

    fn check_pose<const D: usize>(&self, pose: &Pose<D>) -> Result<()> {
        if pose.num_joints() != self.num_joints() {
            return Err(Error::Contract(format!(
                "pose has {} joints, skeleton has {}",
                pose.num_joints(),
                self.num_joints()
            )));
        }
        Ok(())
    }
}

/// Length of every bone, ordered like [`Skeleton::bones`].
pub fn bone_lengths(pose: &Pose3D, skel: &Skeleton) -> Result<Vec<f64>> {
    skel.check_pose(pose)?;
    Ok(skel
        .bones()
        .into_iter()
        .map(|(c, p)| {
            let (a, b) = (pose.joints[c], pose.joints[p]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect())
}

/// Places each joint at its parent plus the rest bone rotated by the
/// composition of rotations from the root down to that joint.
pub fn forward_kinematics(skel: &Skeleton, root_position: [f64; 3], joint_rotations: &[Matrix3<f64>]) -> Result<Pose3D> {
    let m = skel.num_joints();
    if joint_rotations.len() != m {
        return Err(Error::Contract(format!(
            "expected {m} joint rotations, got {}",
            joint_rotations.len()
        )));
    }
    if skel.rest_directions.len() != m {
        return Err(Error::Contract("skeleton carries no rest directions".into()));
    }
    for (j, r) in joint_rotations.iter().enumerate() {
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        if !(err < 1e-9) {
            return Err(Error::Contract(format!(
                "rotation of joint {j} is not orthonormal (‖RᵀR − I‖ = {err:e})"
            )));
        }
    }
    let mut global = vec![Matrix3::identity(); m];
    let mut pos = vec![Vector3::zeros(); m];
    for &j in &skel.order {
        match skel.parent(j) {
            None => {
                global[j] = joint_rotations[j];
                pos[j] = Vector3::from(root_position);
            }
            Some(p) => {
                global[j] = global[p] * joint_rotations[j];
                let offset = Vector3::from(skel.rest_directions[j]) * skel.rest_length(j);
                pos[j] = pos[p] + global[j] * offset;
            }
        }
    }
    Ok(Pose::new(pos.into_iter().map(Into::into).collect()))
}

/// Mirrors x about `axis_center` and swaps left/right joints.
///
/// Applying it twice with `axis_center = 0` restores the pose bit-exactly.
pub fn flip_horizontal<const D: usize>(pose: &Pose<D>, skel: &Skeleton, axis_center: f64) -> Pose<D> {
    let joints = skel
        .flip_map()
        .iter()
        .map(|&src| {
            let mut j = pose.joints[src];
            j[0] = if axis_center == 0.0 { -j[0] } else { 2.0 * axis_center - j[0] };
            j
        })
        .collect();
    Pose::new(joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let angle = rng.gen_range(-3.0..3.0);
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    fn random_pose(rng: &mut ChaCha8Rng, m: usize) -> Pose3D {
        Pose::new(
            (0..m)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..5.0)])
                .collect(),
        )
    }

    #[test]
    fn default_skeleton_shape() {
        let s = default_skeleton();
        assert_eq!(s.num_joints(), 17);
        assert_eq!(s.bones().len(), 16);
        let twice: Vec<usize> = (0..17).map(|i| s.flip_map()[s.flip_map()[i]]).collect();
        assert_eq!(twice, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn two_joint_chain_length() {
        let s = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![-1, 0],
            vec![0, 1],
            vec![1.0],
            vec![[0.0; 3], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let pose = Pose::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(bone_lengths(&pose, &s).unwrap(), vec![1.0]);
    }

    #[test]
    fn scaling_doubles_lengths() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 17);
        let q = Pose::new(p.joints.iter().map(|j| [2.0 * j[0], 2.0 * j[1], 2.0 * j[2]]).collect());
        for (a, b) in bone_lengths(&p, &s).unwrap().iter().zip(bone_lengths(&q, &s).unwrap()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bone_lengths_match_per_edge_recomputation() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pose(&mut rng, 17);
        let lengths = bone_lengths(&p, &s).unwrap();
        let mut k = 0;
        for child in 0..17 {
            let parent = s.parents()[child];
            if parent < 0 {
                continue;
            }
            let (a, b) = (p.joints[child], p.joints[parent as usize]);
            let mut acc = 0.0;
            for d in 0..3 {
                acc += (a[d] - b[d]) * (a[d] - b[d]);
            }
            assert_eq!(lengths[k], acc.sqrt());
            k += 1;
        }
        assert_eq!(k, 16);
    }

    #[test]
    fn bone_lengths_rejects_wrong_joint_count() {
        let s = default_skeleton();
        let p = Pose::new(vec![[0.0; 3]; 5]);
        assert!(matches!(bone_lengths(&p, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_rotations_translate_rest_pose() {
        let s = default_skeleton();
        let rest = s.rest_pose().unwrap();
        let root = [0.3, -0.2, 4.0];
        let pose = forward_kinematics(&s, root, &vec![Matrix3::identity(); 17]).unwrap();
        for (a, b) in pose.joints.iter().zip(&rest.joints) {
            for d in 0..3 {
                assert!((a[d] - (b[d] + root[d])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn root_rotation_is_rigid_motion() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng);
        let mut rots = vec![Matrix3::identity(); 17];
        rots[0] = r;
        let root = [1.0, 0.5, 3.0];
        let pose = forward_kinematics(&s, root, &rots).unwrap();
        let rest = s.rest_pose().unwrap();
        for (a, b) in pose.joints.iter().zip(&rest.joints) {
            let expect = r * Vector3::from(*b) + Vector3::from(root);
            for d in 0..3 {
                assert!((a[d] - expect[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_rotations_preserve_bone_lengths() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let rots: Vec<_> = (0..17).map(|_| random_rotation(&mut rng)).collect();
            let pose = forward_kinematics(&s, [0.0, 0.0, 3.0], &rots).unwrap();
            for (a, b) in bone_lengths(&pose, &s).unwrap().iter().zip(s.rest_bone_lengths()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let s = default_skeleton();
        let mut rots = vec![Matrix3::identity(); 17];
        rots[5] *= 1.01;
        assert!(matches!(forward_kinematics(&s, [0.0; 3], &rots), Err(Error::Contract(_))));
    }

    #[test]
    fn tree_validation() {
        let names = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        // cycle 1 -> 2 -> 1
        assert!(Skeleton::new(names(3), vec![-1, 2, 1], vec![0, 1, 2], vec![1.0, 1.0], vec![]).is_err());
        // two roots
        assert!(Skeleton::new(names(3), vec![-1, -1, 0], vec![0, 1, 2], vec![1.0, 1.0], vec![]).is_err());
        // flip map not an involution
        assert!(Skeleton::new(names(3), vec![-1, 0, 0], vec![0, 2, 0], vec![1.0, 1.0], vec![]).is_err());
        // non-positive bone
        assert!(Skeleton::new(names(3), vec![-1, 0, 0], vec![0, 2, 1], vec![1.0, 0.0], vec![]).is_err());
        assert!(Skeleton::new(names(3), vec![-1, 0, 0], vec![0, 2, 1], vec![1.0, 1.0], vec![]).is_ok());
    }

    #[test]
    fn flip_twice_is_identity_bitwise() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng, 17);
        assert_eq!(flip_horizontal(&flip_horizontal(&p, &s, 0.0), &s, 0.0), p);
        let q = Pose::<2>::new(p.joints.iter().map(|j| [j[0], j[1]]).collect());
        assert_eq!(flip_horizontal(&flip_horizontal(&q, &s, 0.0), &s, 0.0), q);
    }

    #[test]
    fn symmetric_rest_pose_is_flip_invariant() {
        let s = default_skeleton();
        let rest = s.rest_pose().unwrap();
        let flipped = flip_horizontal(&rest, &s, 0.0);
        for (a, b) in flipped.joints.iter().zip(&rest.joints) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flip_preserves_bone_lengths() {
        let s = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_pose(&mut rng, 17);
        let f = flip_horizontal(&p, &s, p.joints[0][0]);
        let lp = bone_lengths(&p, &s).unwrap();
        let lf = bone_lengths(&f, &s).unwrap();
        let bones = s.bones();
        for (k, (child, _)) in bones.iter().enumerate() {
            let mirrored = bones.iter().position(|(c, _)| *c == s.flip_map()[*child]).unwrap();
            assert!((lf[k] - lp[mirrored]).abs() < 1e-12);
        }
    }

    #[test]
    fn skeleton_json_round_trip() {
        let s = default_skeleton();
        let json = serde_json::to_value(&s).unwrap();
        for key in ["names", "parent", "flip_map", "rest_bone_lengths"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back: Skeleton = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
        let bad = serde_json::json!({"names": ["a"], "parent": [0], "flip_map": [0], "rest_bone_lengths": []});
        assert!(serde_json::from_value::<Skeleton>(bad).is_err());
    }

    proptest! {
        #[test]
        fn flip_preserves_pairwise_mpjpe(seed in any::<u64>(), center in -2.0f64..2.0) {
            let s = default_skeleton();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng, 17);
            let b = random_pose(&mut rng, 17);
            let err = |x: &Pose3D, y: &Pose3D| -> f64 {
                x.joints.iter().zip(&y.joints).map(|(p, q)| {
                    ((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2)).sqrt()
                }).sum::<f64>() / x.joints.len() as f64
            };
            let fa = flip_horizontal(&a, &s, center);
            let fb = flip_horizontal(&b, &s, center);
            prop_assert!((err(&a, &b) - err(&fa, &fb)).abs() < 1e-12);
        }
    }
}
