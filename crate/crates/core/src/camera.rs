//! Pinhole camera with radial and tangential lens distortion.
//!
//! The projector maps camera-space joints to pixels:
//!
//! ```text
//! n      = clamp((x, y) / z, −1, 1)
//! r      = n_x² + n_y²
//! radial = 1 + k1·r + k2·r² + k3·r³
//! tan    = p1·n_x + p2·n_y
//! d      = n·(radial + tan) + (p1, p2)·r
//! pixel  = f ⊙ d + c
//! ```
//!
//! Every step is a tape primitive, so gradients flow back into both the
//! planar coordinates and the depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::skeleton::{Pose2D, Pose3D};
use crate::{Error, Result};

/// Intrinsic parameters. Field names match the camera JSON file format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub f_c: [f64; 2],
    /// Principal point in pixels.
    pub c_e: [f64; 2],
    /// Radial coefficients (k1, k2, k3).
    pub d_r: [f64; 3],
    /// Tangential coefficients (p1, p2).
    pub d_t: [f64; 2],
    /// Image (width, height) in pixels.
    pub image_size: [u32; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntrinsics {
    f_c: [f64; 2],
    c_e: [f64; 2],
    d_r: [f64; 3],
    d_t: [f64; 2],
    image_size: [u32; 2],
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics {
            f_c: r.f_c,
            c_e: r.c_e,
            d_r: r.d_r,
            d_t: r.d_t,
            image_size: r.image_size,
        }
        .validated()
    }
}

impl CameraIntrinsics {
    pub fn validated(self) -> Result<Self> {
        if !self.f_c.iter().all(|f| f.is_finite() && *f > 0.0) {
            return Err(Error::Config(format!("focal length must be positive, got {:?}", self.f_c)));
        }
        if self.image_size.contains(&0) {
            return Err(Error::Config(format!(
                "image size must be positive, got {:?}",
                self.image_size
            )));
        }
        let finite = self.c_e.iter().chain(&self.d_r).chain(&self.d_t).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("camera parameters must be finite".into()));
        }
        Ok(self)
    }

    /// Zero-distortion camera with f = (1000, 1000), c = (500, 500).
    pub fn ideal() -> Self {
        Self {
            f_c: [1000.0, 1000.0],
            c_e: [500.0, 500.0],
            d_r: [0.0; 3],
            d_t: [0.0; 2],
            image_size: [1000, 1000],
        }
    }

    pub fn width(&self) -> f64 {
        self.image_size[0] as f64
    }

    pub fn height(&self) -> f64 {
        self.image_size[1] as f64
    }

    /// Maps pixels to the aspect-preserving `[−1, 1]` frame used as network
    /// input: `x' = 2(x − w/2)/w`, `y' = 2(y − h/2)/w`.
    pub fn normalize(&self, pixel: [f64; 2]) -> [f64; 2] {
        let (w, h) = (self.width(), self.height());
        [2.0 * (pixel[0] - w / 2.0) / w, 2.0 * (pixel[1] - h / 2.0) / w]
    }

    /// Camera whose image is the left-right mirror of this one's: a point
    /// `(x, y, z)` projects through the mirror to `(w − u, v)` when `(−x, y, z)`
    /// projects here to `(u, v)`.
    pub fn mirrored(&self) -> Self {
        Self {
            c_e: [self.width() - self.c_e[0], self.c_e[1]],
            d_t: [-self.d_t[0], self.d_t[1]],
            ..*self
        }
    }
}

/// Deterministic intrinsics for a named preset.
///
/// `"ideal"` ignores the seed. `"random"` draws f ∈ [900, 1200] px, a
/// principal point within ±20 px of the image center, d_r ∈ [−0.3, 0.3]³ and
/// d_t ∈ [−0.01, 0.01]² on a 1000×1000 image.
pub fn sample_camera(rng_seed: u64, preset: &str) -> Result<CameraIntrinsics> {
    match preset {
        "ideal" => Ok(CameraIntrinsics::ideal()),
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let f = rng.gen_range(900.0..=1200.0);
            let c = [500.0 + rng.gen_range(-20.0..=20.0), 500.0 + rng.gen_range(-20.0..=20.0)];
            let d_r = [
                rng.gen_range(-0.3..=0.3),
                rng.gen_range(-0.3..=0.3),
                rng.gen_range(-0.3..=0.3),
            ];
            let d_t = [rng.gen_range(-0.01..=0.01), rng.gen_range(-0.01..=0.01)];
            Ok(CameraIntrinsics {
                f_c: [f, f],
                c_e: c,
                d_r,
                d_t,
                image_size: [1000, 1000],
            })
        }
        other => Err(Error::Config(format!(
            "unknown camera preset {other:?} (expected \"ideal\" or \"random\")"
        ))),
    }
}

/// Camera parameters recorded on a tape, shaped to broadcast against
/// `[..., M, 2]` joint tensors.
pub struct CameraVars {
    f_c: Var,
    c_e: Var,
    d_r: Var,
    d_t: Var,
}

impl CameraVars {
    /// One camera shared by every element.
    pub fn shared(tape: &mut Tape, cam: &CameraIntrinsics) -> Self {
        Self {
            f_c: tape.constant(Tensor::from_slice(&cam.f_c)),
            c_e: tape.constant(Tensor::from_slice(&cam.c_e)),
            d_r: tape.constant(Tensor::from_slice(&cam.d_r)),
            d_t: tape.constant(Tensor::from_slice(&cam.d_t)),
        }
    }

    /// One camera per leading index; `inner_rank` is the number of axes
    /// between the leading axis and the coordinate axis (e.g. 2 for
    /// `[batch, frames, joints, 2]`).
    pub fn per_sample(tape: &mut Tape, cams: &[CameraIntrinsics], inner_rank: usize) -> Self {
        let shape = |k: usize| {
            let mut s = vec![cams.len()];
            s.extend(std::iter::repeat_n(1, inner_rank));
            s.push(k);
            s
        };
        let mut make = |k: usize, get: &dyn Fn(&CameraIntrinsics) -> Vec<f64>| {
            let data: Vec<f64> = cams.iter().flat_map(get).collect();
            tape.constant(Tensor::new(&shape(k), data).expect("camera tensor shape"))
        };
        Self {
            f_c: make(2, &|c| c.f_c.to_vec()),
            c_e: make(2, &|c| c.c_e.to_vec()),
            d_r: make(3, &|c| c.d_r.to_vec()),
            d_t: make(2, &|c| c.d_t.to_vec()),
        }
    }
}

fn check_inputs(tape: &Tape, xy: Var, z: Var) -> Result<()> {
    let sxy = tape.shape(xy);
    let sz = tape.shape(z);
    let ok = sxy.len() >= 2
        && sxy[sxy.len() - 1] == 2
        && sz.len() == sxy.len()
        && sz[sz.len() - 1] == 1
        && sz[..sz.len() - 1] == sxy[..sxy.len() - 1];
    if !ok {
        return Err(crate::diff::TensorError::Shape {
            op: "project",
            left: sxy.to_vec(),
            right: sz.to_vec(),
        }
        .into());
    }
    if tape.value(xy).data().iter().any(|v| v.is_nan()) || tape.value(z).data().iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("project: NaN in input coordinates".into()));
    }
    let m = sz[sz.len() - 2].max(1);
    if let Some(i) = tape.value(z).data().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Domain(format!(
            "project: non-positive depth {} at joint {} (element {i})",
            tape.value(z).data()[i],
            i % m
        )));
    }
    Ok(())
}

/// Projects planar coordinates `xy: [..., M, 2]` at depths `z: [..., M, 1]`.
pub fn project(tape: &mut Tape, xy: Var, z: Var, cam: &CameraIntrinsics) -> Result<Var> {
    let vars = CameraVars::shared(tape, cam);
    project_with(tape, xy, z, &vars)
}

/// [`project`] with camera parameters already on the tape.
pub fn project_with(tape: &mut Tape, xy: Var, z: Var, cam: &CameraVars) -> Result<Var> {
    check_inputs(tape, xy, z)?;
    let axis = tape.shape(xy).len() - 1;
    let ratio = tape.div(xy, z)?;
    let n = tape.clamp(ratio, -1.0, 1.0);
    let n2 = tape.square(n);
    let r = tape.sum_axis(n2, axis, true)?;
    let r2 = tape.mul(r, r)?;
    let r3 = tape.mul(r2, r)?;
    let powers = tape.concat(&[r, r2, r3], axis)?;
    let weighted = tape.mul(powers, cam.d_r)?;
    let poly = tape.sum_axis(weighted, axis, true)?;
    let radial = tape.add_scalar(poly, 1.0);
    let tan_terms = tape.mul(n, cam.d_t)?;
    let tan = tape.sum_axis(tan_terms, axis, true)?;
    let factor = tape.add(radial, tan)?;
    let scaled = tape.mul(n, factor)?;
    let offset = tape.mul(cam.d_t, r)?;
    let distorted = tape.add(scaled, offset)?;
    let focal = tape.mul(distorted, cam.f_c)?;
    Ok(tape.add(focal, cam.c_e)?)
}

/// Projects every frame of a sequence.
pub fn project_sequence(poses: &[Pose3D], cam: &CameraIntrinsics) -> Result<Vec<Pose2D>> {
    if poses.is_empty() {
        return Ok(Vec::new());
    }
    let m = poses[0].num_joints();
    if poses.iter().any(|p| p.num_joints() != m) {
        return Err(Error::Contract("project_sequence: frames disagree on joint count".into()));
    }
    let t = poses.len();
    let xy: Vec<f64> = poses.iter().flat_map(|p| p.joints.iter().flat_map(|j| [j[0], j[1]])).collect();
    let z: Vec<f64> = poses.iter().flat_map(|p| p.joints.iter().map(|j| j[2])).collect();
    let mut tape = Tape::new();
    let xy = tape.constant(Tensor::new(&[t, m, 2], xy)?);
    let z = tape.constant(Tensor::new(&[t, m, 1], z)?);
    let out = project(&mut tape, xy, z, cam)?;
    Ok(tape
        .value(out)
        .data()
        .chunks_exact(m * 2)
        .map(Pose2D::from_flat)
        .collect())
}
