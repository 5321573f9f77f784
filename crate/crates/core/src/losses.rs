//! Training objectives.
//!
//! All functions take tape variables whose last two axes are
//! `[joints, coords]`; any leading axes (batch, frames) are averaged over.

use serde::{Deserialize, Serialize};

use crate::camera::{project_with, CameraIntrinsics, CameraVars};
use crate::diff::{Tape, Tensor, TensorError, Var};
use crate::skeleton::Skeleton;
use crate::{Error, Result};

/// Predicted depths below this are floored before re-projection so the
/// projector never sees a non-positive depth during training.
pub const MIN_PROJECTION_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pose3d: f64,
    pub depth: f64,
    pub kinematic: f64,
    pub reproj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pose3d: 1.0,
            depth: 1.0,
            kinematic: 0.01,
            reproj: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.pose3d, self.depth, self.kinematic, self.reproj];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Component values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pose3d_mpjpe: f64,
    pub depth_wmpjpe: f64,
    pub kinematic: f64,
    pub reproj_mpjpe: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            pose3d_mpjpe: self.pose3d_mpjpe * s,
            depth_wmpjpe: self.depth_wmpjpe * s,
            kinematic: self.kinematic * s,
            reproj_mpjpe: self.reproj_mpjpe * s,
            total: self.total * s,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.pose3d_mpjpe += other.pose3d_mpjpe;
        self.depth_wmpjpe += other.depth_wmpjpe;
        self.kinematic += other.kinematic;
        self.reproj_mpjpe += other.reproj_mpjpe;
        self.total += other.total;
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::Shape {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean over all leading axes of the per-joint Euclidean distance.
pub fn mpjpe(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "mpjpe", pred, gt)?;
    let d = tape.shape(pred).last().copied().unwrap_or(0);
    if !(d == 2 || d == 3) || tape.shape(pred).len() < 2 {
        return Err(Error::Contract(format!(
            "mpjpe expects [..., joints, 2|3], got {:?}",
            tape.shape(pred)
        )));
    }
    let diff = tape.sub(pred, gt)?;
    let dist = tape.euclidean_norm_lastaxis(diff)?;
    Ok(tape.mean(dist))
}

/// Depth error weighted by inverse ground-truth depth:
/// `mean(|pred_z − gt_z| / gt_z)`.
pub fn weighted_mpjpe_depth(tape: &mut Tape, pred_z: Var, gt_z: Var) -> Result<Var> {
    same_shape(tape, "weighted_mpjpe_depth", pred_z, gt_z)?;
    if let Some(i) = tape.value(gt_z).data().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Domain(format!(
            "weighted_mpjpe_depth: ground-truth depth {} at element {i} is not positive",
            tape.value(gt_z).data()[i]
        )));
    }
    let diff = tape.sub(pred_z, gt_z)?;
    let abs = tape.abs(diff);
    let weighted = tape.div(abs, gt_z)?;
    Ok(tape.mean(weighted))
}

/// Directed `(joint, neighbor)` pairs over all tree neighbors; each bone
/// appears twice.
fn neighbor_pairs(skel: &Skeleton) -> (Vec<usize>, Vec<usize>) {
    let mut from = Vec::new();
    let mut to = Vec::new();
    for i in 0..skel.num_joints() {
        for j in skel.neighbors(i) {
            from.push(i);
            to.push(j);
        }
    }
    (from, to)
}

/// Bone-length consistency between a previous and a current pose:
/// `1/(2M) · Σ_i Σ_{j ∈ nbr(i)} | ‖prev_i − prev_j‖ − ‖curr_i − curr_j‖ |`,
/// averaged over any leading axes.
pub fn kinematic_constraint(tape: &mut Tape, prev: Var, curr: Var, skel: &Skeleton) -> Result<Var> {
    same_shape(tape, "kinematic_constraint", prev, curr)?;
    let shape = tape.shape(prev).to_vec();
    let m = skel.num_joints();
    if shape.len() < 2 || shape[shape.len() - 2] != m || shape[shape.len() - 1] != 3 {
        return Err(Error::Contract(format!(
            "kinematic_constraint expects [..., {m}, 3], got {shape:?}"
        )));
    }
    let joint_axis = shape.len() - 2;
    let (from, to) = neighbor_pairs(skel);
    let lengths = |tape: &mut Tape, pose: Var| -> Result<Var> {
        let a = tape.index_select(pose, joint_axis, &from)?;
        let b = tape.index_select(pose, joint_axis, &to)?;
        let d = tape.sub(a, b)?;
        Ok(tape.euclidean_norm_lastaxis(d)?)
    };
    let lp = lengths(tape, prev)?;
    let lc = lengths(tape, curr)?;
    let diff = tape.sub(lp, lc)?;
    let abs = tape.abs(diff);
    let per_pair = tape.sum_axis(abs, joint_axis, false)?;
    let scaled = tape.mul_scalar(per_pair, 1.0 / (2.0 * m as f64));
    Ok(tape.mean(scaled))
}

/// Kinematic term over consecutive frames of `pred: [..., frames, M, 3]`;
/// uses `frames − 1` pairs and is zero for a single frame.
pub fn kinematic_over_frames(tape: &mut Tape, pred: Var, skel: &Skeleton) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() < 3 {
        return Err(Error::Contract(format!(
            "kinematic_over_frames expects [..., frames, joints, 3], got {shape:?}"
        )));
    }
    let frame_axis = shape.len() - 3;
    let frames = shape[frame_axis];
    if frames < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let prev = tape.narrow(pred, frame_axis, 0, frames - 1)?;
    let curr = tape.narrow(pred, frame_axis, 1, frames - 1)?;
    kinematic_constraint(tape, prev, curr, skel)
}

/// Camera(s) used to re-project a prediction.
#[derive(Debug, Clone, Copy)]
pub enum Cameras<'a> {
    Shared(&'a CameraIntrinsics),
    /// One camera per index of the leading axis.
    PerSample(&'a [CameraIntrinsics]),
}

impl Cameras<'_> {
    fn vars(&self, tape: &mut Tape, rank: usize) -> Result<CameraVars> {
        Ok(match self {
            Cameras::Shared(c) => CameraVars::shared(tape, c),
            Cameras::PerSample(cs) => {
                if rank < 3 {
                    return Err(Error::Contract("per-sample cameras need a leading batch axis".into()));
                }
                CameraVars::per_sample(tape, cs, rank - 2)
            }
        })
    }
}

fn split_xyz(tape: &mut Tape, pose: Var) -> Result<(Var, Var)> {
    let axis = tape.shape(pose).len() - 1;
    if tape.shape(pose)[axis] != 3 {
        return Err(Error::Contract(format!(
            "expected [..., 3] coordinates, got {:?}",
            tape.shape(pose)
        )));
    }
    Ok((tape.narrow(pose, axis, 0, 2)?, tape.narrow(pose, axis, 2, 1)?))
}

fn reproject(tape: &mut Tape, xy: Var, z: Var, cams: Cameras<'_>, input2d: Var) -> Result<Var> {
    let vars = cams.vars(tape, tape.shape(xy).len())?;
    if let Cameras::PerSample(cs) = cams {
        if tape.shape(xy)[0] != cs.len() {
            return Err(Error::Contract(format!(
                "{} cameras for a batch of {}",
                cs.len(),
                tape.shape(xy)[0]
            )));
        }
    }
    let proj = project_with(tape, xy, z, &vars)?;
    mpjpe(tape, proj, input2d)
}

/// 2D MPJPE in pixels between the projection of `pred3d` and `input2d`.
pub fn reprojection_mpjpe(tape: &mut Tape, pred3d: Var, cams: Cameras<'_>, input2d: Var) -> Result<Var> {
    let (xy, z) = split_xyz(tape, pred3d)?;
    reproject(tape, xy, z, cams, input2d)
}

/// Weighted training objective and its components.
pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Combines the four objectives for `pred3d: [..., frames, M, 3]`.
///
/// The pose term compares the planar `(x, y)` split, the depth term the `z`
/// split, the kinematic term uses consecutive predicted frames, and the
/// re-projection term compares against `input2d` in pixels (depths floored
/// at [`MIN_PROJECTION_DEPTH`]).
pub fn total_loss(
    tape: &mut Tape,
    pred3d: Var,
    gt3d: &Tensor,
    cams: Cameras<'_>,
    input2d: &Tensor,
    skel: &Skeleton,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let gt = tape.constant(gt3d.clone());
    same_shape(tape, "total_loss", pred3d, gt)?;
    let input = tape.constant(input2d.clone());
    let (pxy, pz) = split_xyz(tape, pred3d)?;
    let (gxy, gz) = split_xyz(tape, gt)?;

    let pose = mpjpe(tape, pxy, gxy)?;
    let depth = weighted_mpjpe_depth(tape, pz, gz)?;
    let kin = kinematic_over_frames(tape, pred3d, skel)?;
    let floored = tape.clamp(pz, MIN_PROJECTION_DEPTH, f64::INFINITY);
    let reproj = reproject(tape, pxy, floored, cams, input)?;

    let terms = [
        (pose, weights.pose3d),
        (depth, weights.depth),
        (kin, weights.kinematic),
        (reproj, weights.reproj),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let t = tape.mul_scalar(v, w);
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    let total = total.expect("four terms");
    let val = |v: Var| tape.value(v).item().expect("scalar loss");
    let breakdown = LossBreakdown {
        pose3d_mpjpe: val(pose),
        depth_wmpjpe: val(depth),
        kinematic: val(kin),
        reproj_mpjpe: val(reproj),
        total: val(total),
    };
    Ok(TotalLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::sample_camera;
    use crate::gradcheck::{finite_difference, relative_error};
    use crate::skeleton::default_skeleton;
    use nalgebra::{Rotation3, Unit, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn chain() -> Skeleton {
        Skeleton::new(vec!["a".into(), "b".into()], vec![-1, 0], vec![0, 1], vec![1.0], vec![]).unwrap()
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 17, 3], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(a.clone()), tape.constant(a.clone()));
        let l = mpjpe(&mut tape, p, g).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        // offset of (3, 4, 0) mm on every joint
        let shifted: Vec<f64> = a
            .data()
            .chunks(3)
            .flat_map(|c| [c[0] + 0.003, c[1] + 0.004, c[2]])
            .collect();
        let g2 = tape.constant(Tensor::new(&[4, 17, 3], shifted).unwrap());
        let l = mpjpe(&mut tape, p, g2).unwrap();
        assert!((scalar(&tape, l) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn mpjpe_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 17, 3], &mut rng, -1.0, 1.0);
        let b = random(&[3, 17, 3], &mut rng, -1.0, 1.0);
        let mut expect = 0.0;
        for f in 0..3 {
            for j in 0..17 {
                let mut s = 0.0;
                for d in 0..3 {
                    let i = (f * 17 + j) * 3 + d;
                    s += (a.data()[i] - b.data()[i]).powi(2);
                }
                expect += s.sqrt();
            }
        }
        expect /= 51.0;
        let mut tape = Tape::new();
        let (p, g) = (tape.constant(a), tape.constant(b));
        let l = mpjpe(&mut tape, p, g).unwrap();
        assert!((scalar(&tape, l) - expect).abs() < 1e-14);
    }

    #[test]
    fn mpjpe_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[2, 17, 3]));
        let g = tape.constant(Tensor::zeros(&[2, 16, 3]));
        assert!(mpjpe(&mut tape, p, g).is_err());
    }

    #[test]
    fn depth_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 1], vec![2.2]).unwrap());
        let g = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        let l = weighted_mpjpe_depth(&mut tape, p, g).unwrap();
        assert!((scalar(&tape, l) - 0.1).abs() < 1e-12);
        let l0 = weighted_mpjpe_depth(&mut tape, g, g).unwrap();
        assert_eq!(scalar(&tape, l0), 0.0);

        // scale cancellation
        let p2 = tape.constant(Tensor::new(&[1, 1], vec![4.4]).unwrap());
        let g2 = tape.constant(Tensor::new(&[1, 1], vec![4.0]).unwrap());
        let l2 = weighted_mpjpe_depth(&mut tape, p2, g2).unwrap();
        assert!((scalar(&tape, l2) - scalar(&tape, l)).abs() < 1e-12);

        let bad = tape.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        assert!(matches!(weighted_mpjpe_depth(&mut tape, p, bad), Err(Error::Domain(_))));
    }

    fn kin_oracle(prev: &[[f64; 3]], curr: &[[f64; 3]], skel: &Skeleton) -> f64 {
        // brute force over all joint pairs, keeping tree neighbors
        let m = skel.num_joints();
        let dist = |p: &[[f64; 3]], i: usize, j: usize| {
            ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2) + (p[i][2] - p[j][2]).powi(2)).sqrt()
        };
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                let adjacent = skel.parent(i) == Some(j) || skel.parent(j) == Some(i);
                if adjacent {
                    s += (dist(prev, i, j) - dist(curr, i, j)).abs();
                }
            }
        }
        s / (2.0 * m as f64)
    }

    #[test]
    fn kinematic_examples() {
        let skel = chain();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 2.0, 0.0, 0.0, 3.1]).unwrap());
        let same = kinematic_constraint(&mut tape, a, a, &skel).unwrap();
        assert_eq!(scalar(&tape, same), 0.0);
        let l = kinematic_constraint(&mut tape, a, b, &skel).unwrap();
        let oracle = kin_oracle(&[[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]], &[[0.0, 0.0, 2.0], [0.0, 0.0, 3.1]], &skel);
        assert!((oracle - 0.05).abs() < 1e-12);
        assert!((scalar(&tape, l) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn kinematic_matches_oracle_on_default_skeleton() {
        let skel = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(&[17, 3], &mut rng, -1.0, 1.0);
            let b = random(&[17, 3], &mut rng, -1.0, 1.0);
            let pa: Vec<[f64; 3]> = a.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let pb: Vec<[f64; 3]> = b.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a), tape.constant(b));
            let l = kinematic_constraint(&mut tape, va, vb, &skel).unwrap();
            assert!((scalar(&tape, l) - kin_oracle(&pa, &pb, &skel)).abs() < 1e-13);
        }
    }

    #[test]
    fn kinematic_invariant_under_independent_rigid_motions() {
        let skel = default_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[17, 3], &mut rng, -1.0, 1.0);
        let b = random(&[17, 3], &mut rng, -1.0, 1.0);
        let moved = |t: &Tensor, rng: &mut ChaCha8Rng| {
            let axis = Unit::new_normalize(Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1));
            let r = Rotation3::from_axis_angle(&axis, rng.gen_range(-3.0..3.0));
            let shift = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let data: Vec<f64> = t
                .data()
                .chunks(3)
                .flat_map(|c| {
                    let v = r * Vector3::new(c[0], c[1], c[2]) + shift;
                    [v[0], v[1], v[2]]
                })
                .collect();
            Tensor::new(&[17, 3], data).unwrap()
        };
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let base = kinematic_constraint(&mut tape, va, vb, &skel).unwrap();
        let (ma, mb) = (moved(&a, &mut rng), moved(&b, &mut rng));
        let (va2, vb2) = (tape.constant(ma), tape.constant(mb));
        let after = kinematic_constraint(&mut tape, va2, vb2, &skel).unwrap();
        assert!((scalar(&tape, base) - scalar(&tape, after)).abs() < 1e-12);

        let rigid = moved(&a, &mut rng);
        let vr = tape.constant(rigid);
        let zero = kinematic_constraint(&mut tape, va, vr, &skel).unwrap();
        assert!(scalar(&tape, zero) < 1e-12);
    }

    #[test]
    fn kinematic_uses_t_minus_one_pairs() {
        let skel = chain();
        // frames: bone 1.0, 1.1, 1.1, 0.9
        let lengths = [1.0, 1.1, 1.1, 0.9];
        let data: Vec<f64> = lengths.iter().flat_map(|l| [0.0, 0.0, 2.0, 0.0, 0.0, 2.0 + l]).collect();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[4, 2, 3], data).unwrap());
        let l = kinematic_over_frames(&mut tape, p, &skel).unwrap();
        // per pair: 2·|Δ| / 4, averaged over 3 pairs
        let expect = (0.1 + 0.0 + 0.2) * 2.0 / 4.0 / 3.0;
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);
        let single = tape.constant(Tensor::zeros(&[1, 2, 3]));
        let l1 = kinematic_over_frames(&mut tape, single, &skel).unwrap();
        assert_eq!(scalar(&tape, l1), 0.0);
    }

    fn lift(cam: &CameraIntrinsics, pixel: [f64; 2], z: f64) -> [f64; 3] {
        // inverse pinhole for a zero-distortion camera
        [(pixel[0] - cam.c_e[0]) / cam.f_c[0] * z, (pixel[1] - cam.c_e[1]) / cam.f_c[1] * z, z]
    }

    #[test]
    fn reprojection_examples() {
        let cam = CameraIntrinsics::ideal();
        let input = [[420.0, 380.0], [610.0, 555.0]];
        let lifted: Vec<f64> = input
            .iter()
            .zip([3.0, 4.5])
            .flat_map(|(p, z)| lift(&cam, *p, z))
            .collect();
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::new(&[1, 2, 3], lifted.clone()).unwrap());
        let inp = tape.constant(Tensor::new(&[1, 2, 2], input.iter().flatten().copied().collect()).unwrap());
        let l = reprojection_mpjpe(&mut tape, pred, Cameras::Shared(&cam), inp).unwrap();
        assert!(scalar(&tape, l) < 1e-12);

        // uniform 5 px displacement: lift the displaced pixels
        let displaced: Vec<f64> = input
            .iter()
            .zip([3.0, 4.5])
            .flat_map(|(p, z)| lift(&cam, [p[0] + 3.0, p[1] + 4.0], z))
            .collect();
        let pred2 = tape.param(Tensor::new(&[1, 2, 3], displaced.clone()).unwrap());
        let l2 = reprojection_mpjpe(&mut tape, pred2, Cameras::Shared(&cam), inp).unwrap();
        assert!((scalar(&tape, l2) - 5.0).abs() < 1e-9);

        // depth perturbation on one joint changes the loss
        let f = |z0: f64| {
            let mut data = displaced.clone();
            data[2] = z0;
            let mut tape = Tape::new();
            let pred = tape.constant(Tensor::new(&[1, 2, 3], data).unwrap());
            let inp = tape.constant(Tensor::new(&[1, 2, 2], input.iter().flatten().copied().collect()).unwrap());
            let l = reprojection_mpjpe(&mut tape, pred, Cameras::Shared(&cam), inp).unwrap();
            scalar(&tape, l)
        };
        let probe = (f(3.0 + 1e-4) - f(3.0 - 1e-4)) / 2e-4;
        assert!(probe.abs() > 1.0, "finite-difference probe {probe}");
        tape.backward(l2).unwrap();
        let g = tape.grad(pred2).unwrap();
        assert!(g.data()[2] != 0.0 && g.data()[5] != 0.0);
    }

    #[test]
    fn total_loss_zero_at_ground_truth() {
        let skel = default_skeleton();
        let cam = sample_camera(4, "random").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gt = random(&[2, 17, 3], &mut rng, -0.5, 0.5);
        gt.data_mut().chunks_mut(3).for_each(|c| c[2] += 4.0);
        // same rigid pose in both frames so bone lengths agree
        let first: Vec<f64> = gt.data()[..51].to_vec();
        gt.data_mut()[51..].copy_from_slice(&first);
        let poses: Vec<_> = gt.data().chunks(51).map(crate::skeleton::Pose3D::from_flat).collect();
        let proj = crate::camera::project_sequence(&poses, &cam).unwrap();
        let input = Tensor::new(&[2, 17, 2], proj.iter().flat_map(|p| p.flat()).collect()).unwrap();
        let mut tape = Tape::new();
        let pred = tape.param(gt.clone());
        let out = total_loss(&mut tape, pred, &gt, Cameras::Shared(&cam), &input, &skel, &LossWeights::default()).unwrap();
        let b = out.breakdown;
        assert_eq!((b.pose3d_mpjpe, b.depth_wmpjpe, b.kinematic), (0.0, 0.0, 0.0));
        assert!(b.reproj_mpjpe < 1e-9);
    }

    #[test]
    fn total_loss_weights_select_components() {
        let skel = default_skeleton();
        let cams = [sample_camera(1, "random").unwrap(), sample_camera(2, "random").unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pred = random(&[2, 3, 17, 3], &mut rng, -0.5, 0.5);
        let mut gt = random(&[2, 3, 17, 3], &mut rng, -0.5, 0.5);
        pred.data_mut().chunks_mut(3).for_each(|c| c[2] += 4.0);
        gt.data_mut().chunks_mut(3).for_each(|c| c[2] += 4.0);
        let input = random(&[2, 3, 17, 2], &mut rng, 300.0, 700.0);

        let eval = |w: LossWeights| {
            let mut tape = Tape::new();
            let p = tape.param(pred.clone());
            total_loss(&mut tape, p, &gt, Cameras::PerSample(&cams), &input, &skel, &w)
                .unwrap()
                .breakdown
        };
        let only_pose = eval(LossWeights {
            pose3d: 1.0,
            depth: 0.0,
            kinematic: 0.0,
            reproj: 0.0,
        });
        assert_eq!(only_pose.total, only_pose.pose3d_mpjpe);

        // components recomputed independently
        let w = LossWeights {
            pose3d: 0.7,
            depth: 1.3,
            kinematic: 0.2,
            reproj: 0.004,
        };
        let b = eval(w);
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let g = tape.constant(gt.clone());
        let (pxy, pz) = (tape.narrow(p, 3, 0, 2).unwrap(), tape.narrow(p, 3, 2, 1).unwrap());
        let (gxy, gz) = (tape.narrow(g, 3, 0, 2).unwrap(), tape.narrow(g, 3, 2, 1).unwrap());
        let pose = mpjpe(&mut tape, pxy, gxy).unwrap();
        let depth = weighted_mpjpe_depth(&mut tape, pz, gz).unwrap();
        let kin = kinematic_over_frames(&mut tape, p, &skel).unwrap();
        let inp = tape.constant(input.clone());
        let re = reprojection_mpjpe(&mut tape, p, Cameras::PerSample(&cams), inp).unwrap();
        let sum = 0.7 * scalar(&tape, pose)
            + 1.3 * scalar(&tape, depth)
            + 0.2 * scalar(&tape, kin)
            + 0.004 * scalar(&tape, re);
        assert!((b.total - sum).abs() < 1e-12);
        assert_eq!(b.reproj_mpjpe, scalar(&tape, re));
        let recomposed = w.pose3d * b.pose3d_mpjpe + w.depth * b.depth_wmpjpe + w.kinematic * b.kinematic + w.reproj * b.reproj_mpjpe;
        assert!((b.total - recomposed).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            pose3d: 0.0,
            depth: 0.0,
            kinematic: 0.0,
            reproj: 0.0,
        };
        assert!(zero.validate().is_err());
        let neg = LossWeights {
            depth: -1.0,
            ..LossWeights::default()
        };
        assert!(neg.validate().is_err());
        let parsed: LossWeights = serde_json::from_str(r#"{"pose3d":1,"depth":0.5,"kinematic":0,"reproj":0}"#).unwrap();
        assert_eq!(parsed.depth, 0.5);
        assert!(serde_json::from_str::<LossWeights>(r#"{"bones":1}"#).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let skel = default_skeleton();
        let cam = sample_camera(9, "random").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let mut pred = random(&[2, 17, 3], &mut rng, -0.6, 0.6);
            pred.data_mut().chunks_mut(3).for_each(|c| c[2] += 3.5);
            let mut gt = random(&[2, 17, 3], &mut rng, -0.6, 0.6);
            gt.data_mut().chunks_mut(3).for_each(|c| c[2] += 3.5);
            let input = random(&[2, 17, 2], &mut rng, 350.0, 650.0);
            let f = |tape: &mut Tape, p: Var| {
                total_loss(tape, p, &gt, Cameras::Shared(&cam), &input, &skel, &LossWeights {
                    pose3d: 1.0,
                    depth: 1.0,
                    kinematic: 1.0,
                    reproj: 0.01,
                })
                .unwrap()
                .total
            };
            let mut tape = Tape::new();
            let p = tape.param(pred.clone());
            let out = f(&mut tape, p);
            tape.backward(out).unwrap();
            let analytic = tape.grad(p).unwrap();
            let numeric = finite_difference(
                &|x: &Tensor| {
                    let mut tape = Tape::new();
                    let p = tape.constant(x.clone());
                    let out = f(&mut tape, p);
                    Ok(tape.value(out).item()?)
                },
                &pred,
                1e-6,
            )
            .unwrap();
            let err = relative_error(analytic.data(), &numeric);
            assert!(err < 1e-6, "relative error {err:e}");
        }
    }

    proptest! {
        #[test]
        fn mpjpe_translation_covariant(seed in any::<u64>(), tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[2, 17, 3], &mut rng, -1.0, 1.0);
            let b = random(&[2, 17, 3], &mut rng, -1.0, 1.0);
            let shift = |t: &Tensor| Tensor::new(&[2, 17, 3], t.data().chunks(3).flat_map(|c| [c[0] + tx, c[1] + ty, c[2] + tz]).collect()).unwrap();
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let l1 = mpjpe(&mut tape, va, vb).unwrap();
            let (sa, sb) = (tape.constant(shift(&a)), tape.constant(shift(&b)));
            let l2 = mpjpe(&mut tape, sa, sb).unwrap();
            prop_assert!((scalar(&tape, l1) - scalar(&tape, l2)).abs() < 1e-12);
            prop_assert!(scalar(&tape, l1) >= 0.0);
        }
    }
}
