//! Sliding training windows with replicate padding and flip augmentation.
//!
//! A sample is identified by `(clip, frame, flipped)`. Its network input
//! covers `window + outputs − 1` frames so that the encoder emits predictions
//! for the `outputs` consecutive frames ending at `frame`; the kinematic
//! term then sees real consecutive pairs. Frame indices outside the clip
//! are clamped to its ends.
//!
//! Flipping mirrors the scene about the camera's optical axis: normalized
//! inputs negate x, 3D targets negate x, left/right joints swap and the
//! camera is replaced by [`CameraIntrinsics::mirrored`]. The flipped target
//! therefore projects exactly onto the flipped 2D input.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MotionClip;
use crate::camera::CameraIntrinsics;
use crate::diff::Tensor;
use crate::skeleton::Skeleton;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Receptive field `J` (odd).
    pub window: usize,
    pub stride: usize,
    pub augment_flip: bool,
    /// Consecutive output frames per sample.
    pub outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub clip: usize,
    pub frame: usize,
    pub flipped: bool,
}

/// Dense tensors for a list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, window + outputs − 1, M, 2]`, normalized image coordinates.
    pub inputs: Tensor,
    /// `[B, outputs, M, 3]`, camera-space meters.
    pub targets: Tensor,
    /// `[B, outputs, M, 2]`, pixels of the output frames.
    pub input2d: Tensor,
    pub cameras: Vec<CameraIntrinsics>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

struct Prepared {
    frames: usize,
    camera: CameraIntrinsics,
    mirrored: CameraIntrinsics,
    norm: Vec<f64>,
    pixels: Vec<f64>,
    poses: Vec<f64>,
}

pub struct WindowSet {
    config: WindowConfig,
    joints: usize,
    flip_map: Vec<usize>,
    clips: Vec<Prepared>,
    samples: Vec<SampleRef>,
    skipped: usize,
}

impl WindowSet {
    pub fn new(clips: &[MotionClip], skel: &Skeleton, config: WindowConfig) -> Result<Self> {
        if config.window.is_multiple_of(2) || config.window == 0 {
            return Err(Error::Contract(format!("window length {} must be odd", config.window)));
        }
        if config.stride == 0 || config.outputs == 0 {
            return Err(Error::Contract("stride and outputs must be at least 1".into()));
        }
        let m = skel.num_joints();
        let mut prepared = Vec::with_capacity(clips.len());
        let mut samples = Vec::new();
        let mut skipped = 0;
        for clip in clips {
            if clip.is_empty() {
                skipped += 1;
                prepared.push(Prepared {
                    frames: 0,
                    camera: clip.camera,
                    mirrored: clip.camera.mirrored(),
                    norm: Vec::new(),
                    pixels: Vec::new(),
                    poses: Vec::new(),
                });
                continue;
            }
            if clip.poses3d.iter().any(|p| p.num_joints() != m) {
                return Err(Error::Contract(format!("clip joints do not match the {m}-joint skeleton")));
            }
            let c = prepared.len();
            for frame in (0..clip.len()).step_by(config.stride) {
                samples.push(SampleRef { clip: c, frame, flipped: false });
                if config.augment_flip {
                    samples.push(SampleRef { clip: c, frame, flipped: true });
                }
            }
            prepared.push(Prepared {
                frames: clip.len(),
                camera: clip.camera,
                mirrored: clip.camera.mirrored(),
                norm: clip.normalized_input().into_data(),
                pixels: clip.poses2d.iter().flat_map(|p| p.flat()).collect(),
                poses: clip.poses3d.iter().flat_map(|p| p.flat()).collect(),
            });
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} empty clip(s) while building windows");
        }
        Ok(Self {
            config,
            joints: m,
            flip_map: skel.flip_map().to_vec(),
            clips: prepared,
            samples,
            skipped,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn skipped_clips(&self) -> usize {
        self.skipped
    }

    pub fn samples(&self) -> &[SampleRef] {
        &self.samples
    }

    /// Sample indices in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Shuffled batches of at most `batch_size` samples.
    pub fn batches(&self, batch_size: usize, seed: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.shuffled(seed);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let m = self.joints;
        let (j, p) = (self.config.window, self.config.outputs);
        let len = j + p - 1;
        let half = (j - 1) / 2;
        let b = indices.len();
        let mut inputs = Vec::with_capacity(b * len * m * 2);
        let mut targets = Vec::with_capacity(b * p * m * 3);
        let mut pixels = Vec::with_capacity(b * p * m * 2);
        let mut cameras = Vec::with_capacity(b);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
            let clip = &self.clips[s.clip];
            let last = clip.frames as i64 - 1;
            let at = |offset: i64| (s.frame as i64 + offset).clamp(0, last) as usize;
            let first_out = 1 - p as i64;
            let width = clip.camera.width();
            for l in 0..len as i64 {
                let f = at(first_out - half as i64 + l);
                for joint in 0..m {
                    let src = if s.flipped { self.flip_map[joint] } else { joint };
                    let v = &clip.norm[(f * m + src) * 2..][..2];
                    inputs.push(if s.flipped { -v[0] } else { v[0] });
                    inputs.push(v[1]);
                }
            }
            for k in 0..p as i64 {
                let f = at(first_out + k);
                for joint in 0..m {
                    let src = if s.flipped { self.flip_map[joint] } else { joint };
                    let t = &clip.poses[(f * m + src) * 3..][..3];
                    targets.extend_from_slice(&[if s.flipped { -t[0] } else { t[0] }, t[1], t[2]]);
                    let px = &clip.pixels[(f * m + src) * 2..][..2];
                    pixels.extend_from_slice(&[if s.flipped { width - px[0] } else { px[0] }, px[1]]);
                }
            }
            cameras.push(if s.flipped { clip.mirrored } else { clip.camera });
        }
        Ok(Batch {
            inputs: Tensor::new(&[b, len, m, 2], inputs)?,
            targets: Tensor::new(&[b, p, m, 3], targets)?,
            input2d: Tensor::new(&[b, p, m, 2], pixels)?,
            cameras,
        })
    }
}
