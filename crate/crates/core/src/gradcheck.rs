//! Finite-difference verification of analytic gradients.
//!
//! [`run_suite`] checks every differentiable building block used in
//! training at random interior points (away from clamp edges and the kinks
//! of `abs`), comparing reverse-mode gradients against central differences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{project, sample_camera};
use crate::dataio::derive_seed;
use crate::diff::{Tape, Tensor, Var};
use crate::encoder::{EncoderConfig, EncoderModel, ForwardOptions, ParamVars};
use crate::losses::{kinematic_constraint, mpjpe, reprojection_mpjpe, total_loss, weighted_mpjpe_depth, Cameras, LossWeights};
use crate::skeleton::{default_skeleton, Skeleton};
use crate::{Error, Result};

/// Central differences of a scalar function of one tensor. The step for
/// each coordinate is `step · max(1, |x|)` so large coordinates (pixels)
/// are not swamped by rounding.
pub fn finite_difference(f: &dyn Fn(&Tensor) -> Result<f64>, at: &Tensor, step: f64) -> Result<Vec<f64>> {
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for k in 0..at.len() {
        let orig = probe.data()[k];
        let h = step * orig.abs().max(1.0);
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest component deviation relative to the larger of the two
/// gradients' max-norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub const STEP: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const ENCODER_TOLERANCE: f64 = 1e-5;

/// Every check in the suite, in report order.
pub const CHECKS: [&str; 8] = [
    "project",
    "mpjpe",
    "weighted_mpjpe_depth",
    "kinematic_constraint",
    "reprojection_mpjpe",
    "total_loss",
    "encoder",
    "encoder_strided",
];

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub points: usize,
    pub seed: u64,
    /// Test hook: corrupt the analytic gradient of the named check.
    pub fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            points: 100,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_relative_error: f64,
    pub worst_point: usize,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.threshold
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22} {:>6} {:>12} {:>10}  result\n", "check", "points", "max rel err", "threshold");
        for r in &self.results {
            s.push_str(&format!(
                "{:<22} {:>6} {:>12.3e} {:>10.0e}  {}\n",
                r.name,
                r.points,
                r.max_relative_error,
                r.threshold,
                if r.passed() { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "{} ({:.1} s)\n",
            if self.passed() { "all checks passed" } else { "gradient check FAILED" },
            self.seconds
        ));
        s
    }
}

type Objective<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + 'a;

/// Worst per-input relative error of `objective` at `inputs`.
fn check_point(objective: &Objective<'_>, inputs: &[Tensor], fault: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = objective(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let mut analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        if fault && i == 0 {
            let scale = analytic.data().iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0);
            analytic.data_mut()[0] += 0.01 * scale;
        }
        let numeric = finite_difference(
            &|x: &Tensor| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == i { x.clone() } else { t.clone() }))
                    .collect();
                let out = objective(&mut tape, &vars)?;
                Ok(tape.value(out).item()?)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Camera-space poses `[.., M, 3]` whose normalized coordinates stay in
/// `[-0.8, 0.8]`, clear of the projector's clamp.
fn interior_pose(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product::<usize>() / 3;
    let data = (0..n)
        .flat_map(|_| {
            let z = rng.gen_range(2.0..6.0);
            [rng.gen_range(-0.8..0.8) * z, rng.gen_range(-0.8..0.8) * z, z]
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Scalarizes a non-scalar output with fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn bone_gaps_clear(prev: &Tensor, curr: &Tensor, skel: &Skeleton) -> bool {
    let len = |t: &Tensor, a: usize, b: usize| {
        let d = t.data();
        (0..3).map(|k| (d[a * 3 + k] - d[b * 3 + k]).powi(2)).sum::<f64>().sqrt()
    };
    skel.bones().iter().all(|&(c, p)| (len(prev, c, p) - len(curr, c, p)).abs() > 1e-3)
}

fn depth_gaps_clear(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() > 1e-3)
}

fn run_check(name: &str, point: usize, seed: u64, fault: bool, skel: &Skeleton) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = sample_camera(rng.gen(), "random")?;
    match name {
        "project" => {
            let pose = interior_pose(&[2, 17, 3], &mut rng);
            let xy = Tensor::new(&[2, 17, 2], pose.data().chunks(3).flat_map(|c| [c[0], c[1]]).collect())?;
            let z = Tensor::new(&[2, 17, 1], pose.data().chunks(3).map(|c| c[2]).collect())?;
            let w = uniform(&[2, 17, 2], &mut rng, -1.0, 1.0);
            check_point(
                &|tape, v| {
                    let out = project(tape, v[0], v[1], &cam)?;
                    weighted_sum(tape, out, &w)
                },
                &[xy, z],
                fault,
            )
        }
        "mpjpe" => {
            let a = uniform(&[2, 17, 3], &mut rng, -1.0, 1.0);
            let b = uniform(&[2, 17, 3], &mut rng, -1.0, 1.0);
            check_point(&|tape, v| mpjpe(tape, v[0], v[1]), &[a, b], fault)
        }
        "weighted_mpjpe_depth" => {
            let (a, b) = loop {
                let a = uniform(&[2, 17, 1], &mut rng, 2.0, 6.0);
                let b = uniform(&[2, 17, 1], &mut rng, 2.0, 6.0);
                if depth_gaps_clear(&a, &b) {
                    break (a, b);
                }
            };
            check_point(&|tape, v| weighted_mpjpe_depth(tape, v[0], v[1]), &[a, b], fault)
        }
        "kinematic_constraint" => {
            let (a, b) = loop {
                let a = uniform(&[17, 3], &mut rng, -1.0, 1.0);
                let b = uniform(&[17, 3], &mut rng, -1.0, 1.0);
                if bone_gaps_clear(&a, &b, skel) {
                    break (a, b);
                }
            };
            check_point(&|tape, v| kinematic_constraint(tape, v[0], v[1], skel), &[a, b], fault)
        }
        "reprojection_mpjpe" => {
            let pred = interior_pose(&[2, 17, 3], &mut rng);
            let input = uniform(&[2, 17, 2], &mut rng, 100.0, 900.0);
            check_point(
                &|tape, v| reprojection_mpjpe(tape, v[0], Cameras::Shared(&cam), v[1]),
                &[pred, input],
                fault,
            )
        }
        "total_loss" => {
            let cams = [cam, sample_camera(rng.gen(), "random")?];
            let (pred, gt) = loop {
                let pred = interior_pose(&[2, 2, 17, 3], &mut rng);
                let gt = interior_pose(&[2, 2, 17, 3], &mut rng);
                let frames: Vec<Tensor> = pred
                    .data()
                    .chunks(17 * 3)
                    .map(|c| Tensor::new(&[17, 3], c.to_vec()).expect("17 joints"))
                    .collect();
                let clear = frames.chunks(2).all(|f| bone_gaps_clear(&f[0], &f[1], skel));
                let z = |t: &Tensor| Tensor::from_slice(&t.data().chunks(3).map(|c| c[2]).collect::<Vec<_>>());
                if clear && depth_gaps_clear(&z(&pred), &z(&gt)) {
                    break (pred, gt);
                }
            };
            let input = uniform(&[2, 2, 17, 2], &mut rng, 100.0, 900.0);
            let weights = LossWeights {
                pose3d: 1.0,
                depth: 1.0,
                kinematic: 1.0,
                reproj: 0.01,
            };
            check_point(
                &|tape, v| Ok(total_loss(tape, v[0], &gt, Cameras::PerSample(&cams), &input, skel, &weights)?.total),
                &[pred],
                fault,
            )
        }
        "encoder" => check_encoder(&mut rng, point as u64, false, fault),
        "encoder_strided" => check_encoder(&mut rng, point as u64, true, fault),
        other => Err(Error::Contract(format!("unknown gradient check {other:?}"))),
    }
}

/// Tiny model (3 joints, 8 channels, 9-frame window) under batch
/// statistics without dropout, through the dilated or the strided (training)
/// path; every parameter tensor is checked.
fn check_encoder(rng: &mut ChaCha8Rng, model_seed: u64, strided: bool, fault: bool) -> Result<f64> {
    let config = EncoderConfig {
        num_joints: 3,
        window: 9,
        channels: 8,
        kernel: 3,
        dropout: 0.25,
    };
    let model = EncoderModel::build(config, model_seed)?;
    let x = uniform(&[4, 10, 3, 2], rng, -1.0, 1.0);
    let w = uniform(&[4, 2, 3, 3], rng, -1.0, 1.0);
    let params: Vec<Tensor> = model.parameters().iter().map(|p| p.tensor.clone()).collect();
    check_point(
        &|tape, v| {
            let mut m = model.clone();
            let vars = ParamVars(v.to_vec());
            let mut no_rng = ChaCha8Rng::seed_from_u64(0);
            let opts = ForwardOptions::BATCH_STATS_NO_DROPOUT;
            let out = if strided {
                m.forward_batch_strided(tape, &vars, &x, opts, &mut no_rng)?
            } else {
                m.forward_batch(tape, &vars, &x, opts, &mut no_rng)?
            };
            weighted_sum(tape, out, &w)
        },
        &params,
        fault,
    )
}

/// Runs every check at `options.points` random points.
pub fn run_suite(options: &GradcheckOptions) -> Result<GradcheckReport> {
    if options.points == 0 {
        return Err(Error::Config("gradcheck needs at least one point per check".into()));
    }
    if let Some(f) = &options.fault {
        if !CHECKS.contains(&f.as_str()) {
            return Err(Error::Config(format!("unknown check {f:?} for fault injection (valid: {})", CHECKS.join(", "))));
        }
    }
    let started = Instant::now();
    let skel = default_skeleton();
    let mut results = Vec::with_capacity(CHECKS.len());
    for (ci, name) in CHECKS.iter().enumerate() {
        let fault = options.fault.as_deref() == Some(*name);
        let errors: Vec<f64> = (0..options.points)
            .into_par_iter()
            .map(|p| run_check(name, p, derive_seed(options.seed, &[ci as u64, p as u64]), fault, &skel))
            .collect::<Result<_>>()?;
        let (worst_point, max_relative_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, e)| if e > best.1 || e.is_nan() { (i, e) } else { best });
        results.push(CheckResult {
            name: name.to_string(),
            points: options.points,
            max_relative_error,
            worst_point,
            threshold: if name.starts_with("encoder") { ENCODER_TOLERANCE } else { LOSS_TOLERANCE },
        });
    }
    Ok(GradcheckReport {
        results,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn finite_difference_of_cubic() {
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v * v * v).sum());
        let g = finite_difference(&f, &Tensor::from_slice(&[1.0, -2.0]), 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8 && (g[1] - 12.0).abs() < 1e-8);
    }

    #[test]
    fn small_suite_passes_and_lists_each_check_once() {
        let report = run_suite(&GradcheckOptions {
            points: 4,
            ..Default::default()
        })
        .unwrap();
        let names: Vec<&str> = report.results.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, CHECKS);
        assert!(report.passed(), "{}", report.to_table());
    }

    #[test]
    fn injected_fault_is_named() {
        for check in ["kinematic_constraint", "encoder"] {
            let report = run_suite(&GradcheckOptions {
                points: 2,
                seed: 1,
                fault: Some(check.into()),
            })
            .unwrap();
            assert_eq!(report.failures(), vec![check]);
            assert!(report.to_table().contains("FAIL"));
        }
        let bad = GradcheckOptions {
            fault: Some("nope".into()),
            ..Default::default()
        };
        assert!(matches!(run_suite(&bad), Err(Error::Config(_))));
    }
}
