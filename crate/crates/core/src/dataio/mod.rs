//! Data plumbing: synthetic clips, the `SPG1` container and training windows.

mod container;
mod generate;
mod windows;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use container::{read_container, sha256_hex, write_container, Container, NamedTensor, MAGIC, SCHEMA_VERSION};
pub(crate) use container::write_atomic;
pub use generate::{
    generate_clip, generate_dataset, subject_skeleton, GeneratorConfig, ACTIONS, CONE_LIMIT, DEPTH_RANGE, MAX_ATTEMPTS,
};
pub use windows::{Batch, SampleRef, WindowConfig, WindowSet};

use crate::camera::{project_sequence, CameraIntrinsics};
use crate::diff::Tensor;
use crate::skeleton::{bone_lengths, Pose2D, Pose3D, Skeleton};
use crate::{Error, Result};

/// Every generated joint lies deeper than this.
pub const DEPTH_MIN: f64 = 0.5;

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    parts
        .iter()
        .fold(mix(base.wrapping_add(0x9e3779b97f4a7c15)), |acc, p| {
            mix(acc ^ p.wrapping_add(0x9e3779b97f4a7c15))
        })
}

/// One captured sequence in camera space.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub action_tag: String,
    pub fps: f64,
    pub subject_id: u32,
    pub camera: CameraIntrinsics,
    /// Meters, camera space.
    pub poses3d: Vec<Pose3D>,
    /// Pixels: `project_sequence(poses3d, camera)`.
    pub poses2d: Vec<Pose2D>,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.poses3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses3d.is_empty()
    }

    /// `[T, M, 3]` ground truth.
    pub fn poses3d_tensor(&self) -> Tensor {
        let m = self.poses3d.first().map_or(0, |p| p.num_joints());
        let data = self.poses3d.iter().flat_map(|p| p.flat()).collect();
        Tensor::new(&[self.len(), m, 3], data).expect("consistent clip")
    }

    /// `[T, M, 2]` network input in normalized image coordinates.
    pub fn normalized_input(&self) -> Tensor {
        let m = self.poses2d.first().map_or(0, |p| p.num_joints());
        let data = self
            .poses2d
            .iter()
            .flat_map(|p| p.joints.iter().flat_map(|j| self.camera.normalize(*j)))
            .collect();
        Tensor::new(&[self.poses2d.len(), m, 2], data).expect("consistent clip")
    }

    /// Checks the clip invariants: matching frame counts, finite values,
    /// depth above [`DEPTH_MIN`], 2D equal to the projection of 3D and
    /// constant bone lengths.
    pub fn validate(&self, skel: &Skeleton, tol: ValidationTolerance) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.poses3d.is_empty() || self.poses3d.len() != self.poses2d.len() {
            return bad(format!(
                "clip has {} 3D and {} 2D frames",
                self.poses3d.len(),
                self.poses2d.len()
            ));
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps {} is not positive", self.fps));
        }
        let m = skel.num_joints();
        for (t, (p3, p2)) in self.poses3d.iter().zip(&self.poses2d).enumerate() {
            if p3.num_joints() != m || p2.num_joints() != m {
                return bad(format!("frame {t} does not have {m} joints"));
            }
            if !(p3.is_finite() && p2.is_finite()) {
                return bad(format!("frame {t} has non-finite coordinates"));
            }
            if let Some(j) = p3.joints.iter().position(|j| !(j[2] > DEPTH_MIN)) {
                return bad(format!("frame {t} joint {j} has depth {} ≤ {DEPTH_MIN}", p3.joints[j][2]));
            }
        }
        let projected = project_sequence(&self.poses3d, &self.camera)?;
        for (t, (a, b)) in projected.iter().zip(&self.poses2d).enumerate() {
            for (j, (pa, pb)) in a.joints.iter().zip(&b.joints).enumerate() {
                let d = (pa[0] - pb[0]).abs().max((pa[1] - pb[1]).abs());
                if d > tol.reprojection_px {
                    return bad(format!(
                        "frame {t} joint {j}: stored 2D differs from the projection by {d:e} px"
                    ));
                }
            }
        }
        let first = bone_lengths(&self.poses3d[0], skel)?;
        for (t, p) in self.poses3d.iter().enumerate().skip(1) {
            for (b, (l, l0)) in bone_lengths(p, skel)?.iter().zip(&first).enumerate() {
                if (l - l0).abs() > tol.bone_length_m {
                    return bad(format!("frame {t} bone {b}: length drifts by {:e} m", (l - l0).abs()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationTolerance {
    pub reprojection_px: f64,
    pub bone_length_m: f64,
}

impl ValidationTolerance {
    /// Freshly generated (f64) data.
    pub const EXACT: Self = Self {
        reprojection_px: 1e-9,
        bone_length_m: 1e-9,
    };
    /// Data that went through the f32 container.
    pub const STORED: Self = Self {
        reprojection_px: 1e-3,
        bone_length_m: 1e-5,
    };
}

/// Clips plus the skeleton and subject split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub clips: Vec<MotionClip>,
    pub train_subjects: Vec<u32>,
    pub generator: Option<GeneratorConfig>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    kind: String,
    skeleton: Skeleton,
    train_subjects: Vec<u32>,
    generator: Option<GeneratorConfig>,
    seed: Option<u64>,
    clips: Vec<ClipMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    action_tag: String,
    fps: f64,
    subject_id: u32,
    frames: usize,
    camera: CameraIntrinsics,
    poses3d: String,
    poses2d: String,
}

impl Dataset {
    pub fn is_train(&self, clip: &MotionClip) -> bool {
        self.train_subjects.contains(&clip.subject_id)
    }

    pub fn train_clips(&self) -> Vec<MotionClip> {
        self.clips.iter().filter(|c| self.is_train(c)).cloned().collect()
    }

    pub fn test_clips(&self) -> Vec<MotionClip> {
        self.clips.iter().filter(|c| !self.is_train(c)).cloned().collect()
    }

    pub fn num_frames(&self) -> usize {
        self.clips.iter().map(MotionClip::len).sum()
    }

    pub fn validate(&self, tol: ValidationTolerance) -> Result<()> {
        for (i, c) in self.clips.iter().enumerate() {
            c.validate(&self.skeleton, tol)
                .map_err(|e| Error::Contract(format!("clip {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = Vec::with_capacity(2 * self.clips.len());
        let mut clips = Vec::with_capacity(self.clips.len());
        for (i, c) in self.clips.iter().enumerate() {
            let (n3, n2) = (format!("clip{i:04}.poses3d"), format!("clip{i:04}.poses2d"));
            let m = self.skeleton.num_joints();
            let flat2: Vec<f64> = c.poses2d.iter().flat_map(|p| p.flat()).collect();
            tensors.push(NamedTensor::new(&n3, c.poses3d_tensor()));
            tensors.push(NamedTensor::new(&n2, Tensor::new(&[c.poses2d.len(), m, 2], flat2)?));
            clips.push(ClipMeta {
                action_tag: c.action_tag.clone(),
                fps: c.fps,
                subject_id: c.subject_id,
                frames: c.len(),
                camera: c.camera,
                poses3d: n3,
                poses2d: n2,
            });
        }
        let meta = DatasetMeta {
            kind: "dataset".into(),
            skeleton: self.skeleton.clone(),
            train_subjects: self.train_subjects.clone(),
            generator: self.generator.clone(),
            seed: self.seed,
            clips,
        };
        Ok(Container {
            tensors,
            meta: serde_json::to_value(meta)?,
        })
    }

    /// Rebuilds and validates a dataset read from a container.
    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Contract(format!("container is not a dataset: {e}")))?;
        if meta.kind != "dataset" {
            return Err(Error::Contract(format!("container kind is {:?}, expected \"dataset\"", meta.kind)));
        }
        let m = meta.skeleton.num_joints();
        let mut clips = Vec::with_capacity(meta.clips.len());
        for cm in meta.clips {
            let p3 = c.require(&cm.poses3d)?;
            let p2 = c.require(&cm.poses2d)?;
            if p3.shape() != [cm.frames, m, 3] || p2.shape() != [cm.frames, m, 2] {
                return Err(Error::Contract(format!(
                    "clip tensors {:?}/{:?} have shapes {:?}/{:?}, expected {} frames of {m} joints",
                    cm.poses3d,
                    cm.poses2d,
                    p3.shape(),
                    p2.shape(),
                    cm.frames
                )));
            }
            clips.push(MotionClip {
                action_tag: cm.action_tag,
                fps: cm.fps,
                subject_id: cm.subject_id,
                camera: cm.camera,
                poses3d: p3.data().chunks_exact(3 * m).map(Pose3D::from_flat).collect(),
                poses2d: p2.data().chunks_exact(2 * m).map(Pose2D::from_flat).collect(),
            });
        }
        let d = Self {
            skeleton: meta.skeleton,
            clips,
            train_subjects: meta.train_subjects,
            generator: meta.generator,
            seed: meta.seed,
        };
        d.validate(ValidationTolerance::STORED)?;
        Ok(d)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }

    /// Hex SHA-256 of the encoded container; equals the hash of the file
    /// written by [`Dataset::write`].
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_container()?.encode()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let c = GeneratorConfig {
            subjects: 3,
            train_subjects: 2,
            frames: 20,
            ..Default::default()
        };
        generate_dataset(&c, 42).unwrap()
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(9, &[3]), derive_seed(9, &[3]));
    }

    #[test]
    fn split_by_subject() {
        let d = tiny();
        assert_eq!(d.train_subjects, vec![0, 1]);
        assert_eq!(d.train_clips().len(), 6);
        assert_eq!(d.test_clips().len(), 3);
        assert!(d.test_clips().iter().all(|c| c.subject_id == 2));
        assert_eq!(d.num_frames(), 9 * 20);
    }

    #[test]
    fn ground_truth_reprojects_exactly() {
        use crate::losses::{reprojection_mpjpe, Cameras};
        let d = tiny();
        for c in &d.clips {
            let mut tape = crate::diff::Tape::new();
            let p3 = tape.constant(c.poses3d_tensor());
            let flat2: Vec<f64> = c.poses2d.iter().flat_map(|p| p.flat()).collect();
            let p2 = tape.constant(Tensor::new(&[c.len(), 17, 2], flat2).unwrap());
            let l = reprojection_mpjpe(&mut tape, p3, Cameras::Shared(&c.camera), p2).unwrap();
            assert!(tape.value(l).item().unwrap() < 1e-6);
        }
    }

    #[test]
    fn container_round_trip_preserves_dataset_at_f32() {
        let d = tiny();
        let bytes = d.to_container().unwrap().encode().unwrap();
        let back = Dataset::from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.clips.len(), d.clips.len());
        assert_eq!(back.skeleton, d.skeleton);
        assert_eq!(back.generator, d.generator);
        assert_eq!(back.to_container().unwrap().encode().unwrap(), bytes);
        assert_eq!(back.hash().unwrap(), d.hash().unwrap());
        for (a, b) in back.clips.iter().zip(&d.clips) {
            assert_eq!(a.camera, b.camera);
            for (pa, pb) in a.poses3d.iter().zip(&b.poses3d) {
                for (ja, jb) in pa.joints.iter().zip(&pb.joints) {
                    for k in 0..3 {
                        assert_eq!(ja[k], jb[k] as f32 as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn from_container_rejects_inconsistent_clips() {
        let d = tiny();
        let mut c = d.to_container().unwrap();
        // move one 2D joint by 1 px
        c.tensors[1].tensor.data_mut()[0] += 1.0;
        let err = Dataset::from_container(&c).unwrap_err().to_string();
        assert!(err.contains("projection"), "{err}");
        let mut c = d.to_container().unwrap();
        c.meta["kind"] = serde_json::json!("checkpoint");
        assert!(Dataset::from_container(&c).is_err());
    }

    #[test]
    fn normalized_input_is_aspect_preserving() {
        let d = tiny();
        let c = &d.clips[0];
        let n = c.normalized_input();
        let p = c.poses2d[3].joints[5];
        let w = c.camera.width();
        let h = c.camera.height();
        let at = (3 * 17 + 5) * 2;
        assert_eq!(n.data()[at], 2.0 * (p[0] - w / 2.0) / w);
        assert_eq!(n.data()[at + 1], 2.0 * (p[1] - h / 2.0) / w);
    }
}
