//! Deterministic synthetic motion capture.
//!
//! Each clip animates a subject-specific skeleton by forward kinematics.
//! Every bone's rotation is a set of Euler angles, each a base offset plus a
//! bounded sum of three sinusoids (0.2–2 Hz). The root drifts smoothly and
//! the whole clip is rejected and resampled until every joint stays inside
//! the camera cone and depth band.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dataset, MotionClip};
use crate::camera::{project_sequence, sample_camera};
use crate::skeleton::{default_skeleton, forward_kinematics, Pose3D, Skeleton};
use crate::{Error, Result};

pub const ACTIONS: [&str; 4] = ["walk", "sit", "reach", "static"];
/// Limits on |x/z| and |y/z| for every generated joint.
pub const CONE_LIMIT: f64 = 0.85;
pub const DEPTH_RANGE: [f64; 2] = [2.0, 6.0];
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub subjects: u32,
    /// Subjects `0..train_subjects` form the training split.
    pub train_subjects: u32,
    pub actions: Vec<String>,
    /// Clips per (subject, action).
    pub sequences: u32,
    pub frames: usize,
    pub fps: f64,
    pub camera_preset: String,
    /// Relative per-bone length jitter between subjects.
    pub bone_jitter: f64,
    /// Uniform scale applied to every subject.
    pub body_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            subjects: 7,
            train_subjects: 5,
            actions: vec!["walk".into(), "sit".into(), "reach".into()],
            sequences: 1,
            frames: 250,
            fps: 50.0,
            camera_preset: "random".into(),
            bone_jitter: 0.1,
            body_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subjects < 2 || self.train_subjects == 0 || self.train_subjects >= self.subjects {
            return bad(format!(
                "need 1 ≤ train_subjects < subjects, got {} of {}",
                self.train_subjects, self.subjects
            ));
        }
        if self.sequences == 0 {
            return bad("sequences must be at least 1".into());
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.actions.is_empty() {
            return bad("actions must not be empty".into());
        }
        if let Some(a) = self.actions.iter().find(|a| !ACTIONS.contains(&a.as_str())) {
            return bad(format!("unknown action preset {a:?}; known: {ACTIONS:?}"));
        }
        if !(0.0..0.5).contains(&self.bone_jitter) {
            return bad(format!("bone_jitter {} outside [0, 0.5)", self.bone_jitter));
        }
        if !(self.body_scale.is_finite() && self.body_scale > 0.0) {
            return bad(format!("body_scale must be positive, got {}", self.body_scale));
        }
        sample_camera(0, &self.camera_preset)?;
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.subjects as usize * self.actions.len() * self.sequences as usize
    }

    /// `(subject, action, sequence)` of clip `index`.
    fn clip_key(&self, index: usize) -> (u32, &str, u32) {
        let per_subject = self.actions.len() * self.sequences as usize;
        let subject = (index / per_subject) as u32;
        let rest = index % per_subject;
        let action = &self.actions[rest / self.sequences as usize];
        (subject, action, (rest % self.sequences as usize) as u32)
    }
}

/// Per-bone motion: base Euler angles and oscillation amplitudes (radians).
#[derive(Clone, Copy)]
struct BoneMotion {
    base: [f64; 3],
    amp: [f64; 3],
}

struct Preset {
    bones: Vec<BoneMotion>,
    /// Root trajectory amplitude per axis, meters.
    drift: [f64; 3],
    /// Left and right limbs oscillate in antiphase.
    antiphase: bool,
}

fn preset(action: &str, skel: &Skeleton) -> Preset {
    let still = BoneMotion {
        base: [0.0; 3],
        amp: [0.0; 3],
    };
    let idle = BoneMotion {
        base: [0.0; 3],
        amp: [0.05, 0.05, 0.05],
    };
    let m = |base: [f64; 3], amp: [f64; 3]| BoneMotion { base, amp };
    let table: Vec<(&str, BoneMotion)> = match action {
        "walk" => vec![
            ("pelvis", m([0.0; 3], [0.05, 0.15, 0.03])),
            ("r_knee", m([-0.1, 0.0, 0.0], [0.5, 0.05, 0.05])),
            ("l_knee", m([-0.1, 0.0, 0.0], [0.5, 0.05, 0.05])),
            ("r_ankle", m([0.4, 0.0, 0.0], [0.4, 0.0, 0.0])),
            ("l_ankle", m([0.4, 0.0, 0.0], [0.4, 0.0, 0.0])),
            ("r_elbow", m([0.0, 0.0, -0.1], [0.35, 0.05, 0.05])),
            ("l_elbow", m([0.0, 0.0, 0.1], [0.35, 0.05, 0.05])),
            ("r_wrist", m([-0.3, 0.0, 0.0], [0.2, 0.0, 0.0])),
            ("l_wrist", m([-0.3, 0.0, 0.0], [0.2, 0.0, 0.0])),
        ],
        "sit" => vec![
            ("pelvis", m([0.0; 3], [0.03, 0.08, 0.02])),
            ("spine", m([-0.15, 0.0, 0.0], [0.08, 0.05, 0.03])),
            ("r_knee", m([-1.4, 0.0, -0.1], [0.03, 0.03, 0.03])),
            ("l_knee", m([-1.4, 0.0, 0.1], [0.03, 0.03, 0.03])),
            ("r_ankle", m([1.4, 0.0, 0.0], [0.03, 0.0, 0.0])),
            ("l_ankle", m([1.4, 0.0, 0.0], [0.03, 0.0, 0.0])),
            ("r_elbow", m([-0.3, 0.0, -0.1], [0.15, 0.05, 0.05])),
            ("l_elbow", m([-0.3, 0.0, 0.1], [0.15, 0.05, 0.05])),
            ("r_wrist", m([-0.8, 0.0, 0.0], [0.3, 0.0, 0.0])),
            ("l_wrist", m([-0.8, 0.0, 0.0], [0.3, 0.0, 0.0])),
        ],
        "reach" => vec![
            ("pelvis", m([0.0; 3], [0.03, 0.2, 0.02])),
            ("spine", m([0.0; 3], [0.15, 0.1, 0.05])),
            ("r_elbow", m([-0.8, 0.0, -0.3], [1.0, 0.3, 0.5])),
            ("l_elbow", m([-0.8, 0.0, 0.3], [1.0, 0.3, 0.5])),
            ("r_wrist", m([-0.5, 0.0, 0.0], [0.6, 0.1, 0.0])),
            ("l_wrist", m([-0.5, 0.0, 0.0], [0.6, 0.1, 0.0])),
        ],
        _ => vec![],
    };
    let fallback = if action == "static" { still } else { idle };
    let bones = skel
        .names()
        .iter()
        .map(|n| table.iter().find(|(k, _)| k == n).map_or(fallback, |(_, b)| *b))
        .collect();
    let drift = match action {
        "walk" => [0.5, 0.03, 0.5],
        "sit" => [0.02, 0.01, 0.02],
        "reach" => [0.08, 0.02, 0.08],
        _ => [0.0; 3],
    };
    Preset {
        bones,
        drift,
        antiphase: action == "walk",
    }
}

/// Three-term sinusoid with unit total weight: `Σ wᵢ sin(2π fᵢ t + φᵢ)`.
#[derive(Clone, Copy)]
struct Wave {
    freq: [f64; 3],
    phase: [f64; 3],
    weight: [f64; 3],
}

impl Wave {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut w = Self {
            freq: [0.0; 3],
            phase: [0.0; 3],
            weight: [0.0; 3],
        };
        for i in 0..3 {
            w.freq[i] = rng.gen_range(0.2..=2.0);
            w.phase[i] = rng.gen_range(0.0..std::f64::consts::TAU);
            w.weight[i] = rng.gen_range(0.2..1.0);
        }
        let total: f64 = w.weight.iter().sum();
        w.weight.iter_mut().for_each(|v| *v /= total);
        w
    }

    fn shifted(&self, phase: f64) -> Self {
        let mut w = *self;
        w.phase.iter_mut().for_each(|p| *p += phase);
        w
    }

    fn eval(&self, t: f64) -> f64 {
        (0..3)
            .map(|i| self.weight[i] * (std::f64::consts::TAU * self.freq[i] * t + self.phase[i]).sin())
            .sum()
    }
}

/// Subject skeleton: rest lengths scaled and jittered, left/right bones
/// sharing one draw so the subject stays symmetric.
pub fn subject_skeleton(base: &Skeleton, config: &GeneratorConfig, seed: u64, subject: u32) -> Result<Skeleton> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5b, subject as u64]));
    let m = base.num_joints();
    let draws: Vec<f64> = (0..m)
        .map(|_| 1.0 + rng.gen_range(-config.bone_jitter..=config.bone_jitter))
        .collect();
    let flip = base.flip_map();
    let lengths = base
        .bones()
        .iter()
        .zip(base.rest_bone_lengths())
        .map(|((child, _), len)| len * config.body_scale * draws[(*child).min(flip[*child])])
        .collect();
    base.with_bone_lengths(lengths)
}

fn animate(
    skel: &Skeleton,
    preset: &Preset,
    frames: usize,
    fps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pose3D>> {
    let m = skel.num_joints();
    let flip = skel.flip_map();
    let mut waves: Vec<[Wave; 3]> = Vec::with_capacity(m);
    let mut gains: Vec<[f64; 3]> = Vec::with_capacity(m);
    for j in 0..m {
        let own = [Wave::sample(rng), Wave::sample(rng), Wave::sample(rng)];
        let gain = [rng.gen_range(0.7..=1.0), rng.gen_range(0.7..=1.0), rng.gen_range(0.7..=1.0)];
        if preset.antiphase && flip[j] < j {
            let partner = waves[flip[j]];
            waves.push(partner.map(|w| w.shifted(std::f64::consts::PI)));
            gains.push(gains[flip[j]]);
        } else {
            waves.push(own);
            gains.push(gain);
        }
    }
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let z0 = rng.gen_range(3.0..=5.0);
    let start = [z0 * rng.gen_range(-0.15..=0.15), z0 * rng.gen_range(-0.1..=0.1), z0];
    let drift: [Wave; 3] = [Wave::sample(rng), Wave::sample(rng), Wave::sample(rng)];

    let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), heading);
    let mut poses = Vec::with_capacity(frames);
    let mut rotations = vec![Matrix3::identity(); m];
    for f in 0..frames {
        let t = f as f64 / fps;
        for j in 0..m {
            let b = &preset.bones[j];
            let a: [f64; 3] = std::array::from_fn(|k| {
                if b.amp[k] == 0.0 {
                    b.base[k]
                } else {
                    b.base[k] + b.amp[k] * gains[j][k] * waves[j][k].eval(t)
                }
            });
            let local = Rotation3::from_euler_angles(a[0], a[1], a[2]);
            rotations[j] = if skel.parent(j).is_none() {
                (yaw * local).into_inner()
            } else {
                local.into_inner()
            };
        }
        let root: [f64; 3] = std::array::from_fn(|k| {
            if preset.drift[k] == 0.0 {
                start[k]
            } else {
                start[k] + preset.drift[k] * drift[k].eval(t)
            }
        });
        poses.push(forward_kinematics(skel, root, &rotations)?);
    }
    Ok(poses)
}

fn fits_camera(poses: &[Pose3D]) -> bool {
    poses.iter().flat_map(|p| &p.joints).all(|j| {
        let z = j[2];
        (DEPTH_RANGE[0]..=DEPTH_RANGE[1]).contains(&z) && (j[0] / z).abs() <= CONE_LIMIT && (j[1] / z).abs() <= CONE_LIMIT
    })
}

/// Generates clip `index` of the dataset described by `config`.
pub fn generate_clip(config: &GeneratorConfig, seed: u64, index: usize, base: &Skeleton) -> Result<MotionClip> {
    let (subject, action, _) = config.clip_key(index);
    let skel = subject_skeleton(base, config, seed, subject)?;
    let preset = preset(action, &skel);
    let camera = sample_camera(seed ^ index as u64, &config.camera_preset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc1, index as u64]));
    for _ in 0..MAX_ATTEMPTS {
        let poses3d = animate(&skel, &preset, config.frames, config.fps, &mut rng)?;
        if fits_camera(&poses3d) {
            let poses2d = project_sequence(&poses3d, &camera)?;
            return Ok(MotionClip {
                action_tag: action.to_string(),
                fps: config.fps,
                subject_id: subject,
                camera,
                poses3d,
                poses2d,
            });
        }
    }
    Err(Error::Generation(format!(
        "clip {index} (subject {subject}, action {action:?}) did not fit the camera cone |x/z|,|y/z| ≤ {CONE_LIMIT} \
         with depth in {DEPTH_RANGE:?} m after {MAX_ATTEMPTS} attempts"
    )))
}

/// Generates all clips in parallel; the result does not depend on the
/// number of worker threads.
pub fn generate_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let base = default_skeleton();
    let clips = (0..config.num_clips())
        .into_par_iter()
        .map(|i| generate_clip(config, seed, i, &base))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        skeleton: base,
        clips,
        train_subjects: (0..config.train_subjects).collect(),
        generator: Some(config.clone()),
        seed: Some(seed),
    })
}
