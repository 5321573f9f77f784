//! Protocol 1 / Protocol 2 metrics, similarity alignment and reports.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, MotionClip};
use crate::diff::Tensor;
use crate::encoder::EncoderModel;
use crate::losses::LossWeights;
use crate::skeleton::{bone_lengths, Pose3D, Skeleton};
use crate::trainer::{train, TrainConfig, TrainIo};
use crate::{Error, Result};

/// Frames sampled by the bone-length report.
pub const BONE_REPORT_FRAMES: usize = 7;

fn joints_of(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [f, m, 3] => Ok((*f, *m)),
        s => Err(Error::Contract(format!("{what} must be [frames, joints, 3], got {s:?}"))),
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let dims = joints_of(pred, "prediction")?;
    if pred.shape() != gt.shape() {
        return Err(Error::Contract(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(dims)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-frame mean joint error in meters; with `root = Some(r)` both poses
/// are first translated so joint `r` sits at the origin.
pub fn per_frame_mpjpe(pred: &Tensor, gt: &Tensor, root: Option<usize>) -> Result<Vec<f64>> {
    let (frames, m) = check_pair(pred, gt)?;
    if let Some(r) = root.filter(|r| *r >= m) {
        return Err(Error::Contract(format!("root joint {r} out of range for {m} joints")));
    }
    Ok((0..frames)
        .map(|f| {
            let p = &pred.data()[f * m * 3..(f + 1) * m * 3];
            let g = &gt.data()[f * m * 3..(f + 1) * m * 3];
            let (po, go) = match root {
                Some(r) => (&p[r * 3..r * 3 + 3], &g[r * 3..r * 3 + 3]),
                None => (&[0.0; 3][..], &[0.0; 3][..]),
            };
            (0..m)
                .map(|j| {
                    let a: Vec<f64> = (0..3).map(|k| p[j * 3 + k] - po[k]).collect();
                    let b: Vec<f64> = (0..3).map(|k| g[j * 3 + k] - go[k]).collect();
                    dist(&a, &b)
                })
                .sum::<f64>()
                / m as f64
        })
        .collect())
}

/// Mean per-joint position error in millimeters.
pub fn protocol1_mpjpe(pred: &Tensor, gt: &Tensor, root: Option<usize>) -> Result<f64> {
    let per = per_frame_mpjpe(pred, gt, root)?;
    Ok(1000.0 * per.iter().sum::<f64>() / per.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        (self.scale * self.rotation * Vector3::from(p) + self.translation).into()
    }
}

/// Least-squares similarity transform taking `pred` onto `gt`, with the
/// rotation restricted to det = +1.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<(SimilarityTransform, Vec<[f64; 3]>)> {
    let n = pred.len();
    if n < 3 || gt.len() != n {
        return Err(Error::Alignment(format!(
            "need at least 3 matching points, got {} and {}",
            n,
            gt.len()
        )));
    }
    let mean = |v: &[[f64; 3]]| v.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n as f64;
    let (mp, mg) = (mean(pred), mean(gt));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (Vector3::from(*p) - mp, Vector3::from(*g) - mg);
        cov += g * p.transpose();
        var_p += p.norm_squared();
    }
    cov /= n as f64;
    var_p /= n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] || !(var_p > 0.0) {
        return Err(Error::Alignment(format!(
            "degenerate configuration: cross-covariance singular values {sv:?}"
        )));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    // singular values come unsorted from nalgebra; pair S with the smallest
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let smallest = (0..3)
        .min_by(|a, b| svd.singular_values[*a].total_cmp(&svd.singular_values[*b]))
        .expect("3 values");
    if s[(2, 2)] < 0.0 && smallest != 2 {
        s[(2, 2)] = 1.0;
        s[(smallest, smallest)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = (d * s).trace() / var_p;
    let translation = mg - scale * rotation * mp;
    let t = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    let aligned = pred.iter().map(|p| t.apply(*p)).collect();
    Ok((t, aligned))
}

fn frame_points(t: &Tensor, f: usize, m: usize) -> Vec<[f64; 3]> {
    t.data()[f * m * 3..(f + 1) * m * 3]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Per-frame error in meters after similarity alignment.
pub fn per_frame_pmpjpe(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    let (frames, m) = check_pair(pred, gt)?;
    (0..frames)
        .map(|f| {
            let g = frame_points(gt, f, m);
            let (_, aligned) = procrustes_align(&frame_points(pred, f, m), &g)?;
            Ok(aligned.iter().zip(&g).map(|(a, b)| dist(a, b)).sum::<f64>() / m as f64)
        })
        .collect()
}

/// Procrustes-aligned MPJPE in millimeters.
pub fn protocol2_pmpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let per = per_frame_pmpjpe(pred, gt)?;
    Ok(1000.0 * per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Per-bone lengths at evenly spaced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneLengthReport {
    pub frames: Vec<usize>,
    /// `"parent-child"` joint names.
    pub bones: Vec<String>,
    /// `lengths[bone][sample]`, meters.
    pub lengths: Vec<Vec<f64>>,
    /// Per bone: max − min over the samples.
    pub deviation: Vec<f64>,
    pub max_deviation: f64,
}

impl BoneLengthReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<24}", "bone (m)");
        for f in &self.frames {
            let _ = write!(out, "{:>9}", format!("f{f}"));
        }
        let _ = writeln!(out, "{:>10}", "max-min");
        for (b, name) in self.bones.iter().enumerate() {
            let _ = write!(out, "{name:<24}");
            for l in &self.lengths[b] {
                let _ = write!(out, "{l:>9.4}");
            }
            let _ = writeln!(out, "{:>10.4}", self.deviation[b]);
        }
        let _ = writeln!(out, "max deviation: {:.4} m", self.max_deviation);
        out
    }
}

/// `samples` evenly spaced indices in `0..frames`.
pub fn sample_frames(frames: usize, samples: usize) -> Vec<usize> {
    if samples == 1 || frames <= 1 {
        return vec![0; samples.min(1)];
    }
    (0..samples)
        .map(|i| ((i * (frames - 1)) as f64 / (samples - 1) as f64).round() as usize)
        .collect()
}

pub fn bone_length_report(seq: &[Pose3D], skel: &Skeleton, samples: usize) -> Result<BoneLengthReport> {
    if samples < 2 || seq.len() < samples {
        return Err(Error::Contract(format!(
            "bone report needs at least 2 sampled frames from a sequence at least that long (samples {samples}, frames {})",
            seq.len()
        )));
    }
    let frames = sample_frames(seq.len(), samples);
    let per_frame: Vec<Vec<f64>> = frames.iter().map(|f| bone_lengths(&seq[*f], skel)).collect::<Result<_>>()?;
    let bones: Vec<String> = skel
        .bones()
        .iter()
        .map(|(c, p)| format!("{}-{}", skel.names()[*p], skel.names()[*c]))
        .collect();
    let lengths: Vec<Vec<f64>> = (0..bones.len()).map(|b| per_frame.iter().map(|l| l[b]).collect()).collect();
    let deviation: Vec<f64> = lengths.iter().map(|row| spread(row)).collect();
    let max_deviation = deviation.iter().copied().fold(0.0, f64::max);
    Ok(BoneLengthReport {
        frames,
        bones,
        lengths,
        deviation,
        max_deviation,
    })
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Largest (max − min) bone length over every frame of a sequence.
pub fn max_bone_deviation(seq: &[Pose3D], skel: &Skeleton) -> Result<f64> {
    let all: Vec<Vec<f64>> = seq.iter().map(|p| bone_lengths(p, skel)).collect::<Result<_>>()?;
    Ok((0..skel.num_bones())
        .map(|b| spread(&all.iter().map(|l| l[b]).collect::<Vec<_>>()))
        .fold(0.0, f64::max))
}

/// Which protocols an evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocols {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    Both,
}

impl std::str::FromStr for Protocols {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("protocol must be 1, 2 or both, got {other:?}"))),
        }
    }
}

impl Protocols {
    fn p1(self) -> bool {
        self != Self::Two
    }

    fn p2(self) -> bool {
        self != Self::One
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: String,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpjpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pmpjpe_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocols: Protocols,
    pub root_relative: bool,
    pub split: String,
    pub rows: Vec<ActionRow>,
    pub average: ActionRow,
    pub bone_report: Option<BoneLengthReport>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Actions as rows, frame-weighted average last.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mode = if self.root_relative { "root-relative" } else { "absolute" };
        let _ = writeln!(out, "split: {}  protocol 1 mode: {mode}", self.split);
        let _ = write!(out, "{:<10}{:>8}", "action", "frames");
        if self.protocols.p1() {
            let _ = write!(out, "{:>14}", "P1 MPJPE mm");
        }
        if self.protocols.p2() {
            let _ = write!(out, "{:>14}", "P2 P-MPJPE mm");
        }
        out.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = write!(out, "{:<10}{:>8}", row.action, row.frames);
            if let Some(v) = row.mpjpe_mm {
                let _ = write!(out, "{v:>14.2}");
            }
            if let Some(v) = row.pmpjpe_mm {
                let _ = write!(out, "{v:>14.2}");
            }
            out.push('\n');
        }
        if let Some(b) = &self.bone_report {
            out.push('\n');
            out.push_str(&b.to_table());
        }
        out
    }
}

/// Predictions for a whole clip, `[T, M, 3]`.
pub fn predict_clip(model: &EncoderModel, clip: &MotionClip) -> Result<Tensor> {
    model.clone().forward_sequence(&clip.normalized_input())
}

struct ClipErrors {
    action: String,
    p1: Vec<f64>,
    p2: Vec<f64>,
    pred: Tensor,
}

/// Evaluates `model` on `clips`, in parallel across clips.
pub fn evaluate_clips(
    model: &EncoderModel,
    clips: &[MotionClip],
    skel: &Skeleton,
    protocols: Protocols,
    root_relative: bool,
) -> Result<EvalReport> {
    let root = root_relative.then(|| skel.root());
    let errors: Vec<ClipErrors> = clips
        .par_iter()
        .map(|c| {
            let pred = predict_clip(model, c)?;
            let gt = c.poses3d_tensor();
            Ok(ClipErrors {
                action: c.action_tag.clone(),
                p1: if protocols.p1() { per_frame_mpjpe(&pred, &gt, root)? } else { Vec::new() },
                p2: if protocols.p2() { per_frame_pmpjpe(&pred, &gt)? } else { Vec::new() },
                pred,
            })
        })
        .collect::<Result<_>>()?;
    let mut actions: Vec<String> = Vec::new();
    for e in &errors {
        if !actions.contains(&e.action) {
            actions.push(e.action.clone());
        }
    }
    let row = |name: &str, sel: &dyn Fn(&ClipErrors) -> bool| {
        let picked: Vec<&ClipErrors> = errors.iter().filter(|e| sel(e)).collect();
        let frames: usize = picked.iter().map(|e| e.pred.shape()[0]).sum();
        let mean = |f: &dyn Fn(&ClipErrors) -> &Vec<f64>| {
            1000.0 * picked.iter().flat_map(|e| f(e).iter()).sum::<f64>() / frames.max(1) as f64
        };
        ActionRow {
            action: name.to_string(),
            frames,
            mpjpe_mm: protocols.p1().then(|| mean(&|e| &e.p1)),
            pmpjpe_mm: protocols.p2().then(|| mean(&|e| &e.p2)),
        }
    };
    let rows: Vec<ActionRow> = actions.iter().map(|a| row(a, &|e| &e.action == a)).collect();
    let average = row("Avg", &|_| true);
    let bone_report = errors.first().and_then(|e| {
        let seq: Vec<Pose3D> = e.pred.data().chunks_exact(skel.num_joints() * 3).map(Pose3D::from_flat).collect();
        bone_length_report(&seq, skel, BONE_REPORT_FRAMES).ok()
    });
    Ok(EvalReport {
        protocols,
        root_relative,
        split: String::new(),
        rows,
        average,
        bone_report,
        config: serde_json::Value::Null,
    })
}

/// Mean max bone-length deviation of predictions over `clips`, meters.
pub fn mean_bone_deviation(model: &EncoderModel, clips: &[MotionClip], skel: &Skeleton) -> Result<f64> {
    let devs: Vec<f64> = clips
        .par_iter()
        .map(|c| {
            let pred = predict_clip(model, c)?;
            let seq: Vec<Pose3D> = pred.data().chunks_exact(skel.num_joints() * 3).map(Pose3D::from_flat).collect();
            max_bone_deviation(&seq, skel)
        })
        .collect::<Result<_>>()?;
    Ok(devs.iter().sum::<f64>() / devs.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mpjpe_mm: f64,
    pub pmpjpe_mm: f64,
    pub bone_deviation_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub window: usize,
    pub weights: LossWeights,
    pub mpjpe_mm: MeanStd,
    pub pmpjpe_mm: MeanStd,
    pub bone_deviation_m: MeanStd,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub loss_rows: Vec<AblationRow>,
    pub window_rows: Vec<AblationRow>,
    /// Per-bone length table of the full model (first seed, first test clip).
    pub full_model_bones: Option<BoneLengthReport>,
    pub base_config: TrainConfig,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12}{:>4}{:>22}{:>22}{:>24}",
            "variant", "J", "P1 mm (mean±std)", "P2 mm (mean±std)", "bone dev m (mean±std)"
        );
        for r in self.loss_rows.iter().chain(&self.window_rows) {
            let _ = writeln!(
                out,
                "{:<12}{:>4}{:>22}{:>22}{:>24}",
                r.name,
                r.window,
                format!("{:.2}±{:.2}", r.mpjpe_mm.mean, r.mpjpe_mm.std),
                format!("{:.2}±{:.2}", r.pmpjpe_mm.mean, r.pmpjpe_mm.std),
                format!("{:.4}±{:.4}", r.bone_deviation_m.mean, r.bone_deviation_m.std),
            );
        }
        if let Some(b) = &self.full_model_bones {
            out.push('\n');
            out.push_str(&b.to_table());
        }
        out
    }
}

pub const ABLATION_WINDOWS: [usize; 3] = [9, 27, 81];

struct Run {
    weights: LossWeights,
    window: usize,
    seed: u64,
}

/// Loss-variant and window-size ablations, each over `seeds`.
///
/// Variants: Baseline (pose term only), Baseline* (plus the kinematic
/// term at the base weight) and the full objective; then the full objective
/// at J ∈ {9, 27, 81}. Runs are independent and execute in parallel.
pub fn ablation_suite(data: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least 2 seeds, got {}", seeds.len())));
    }
    base.validate()?;
    if base.weights.kinematic <= 0.0 {
        return Err(Error::Config("ablation base config needs a positive kinematic weight".into()));
    }
    let full = base.weights;
    let baseline = LossWeights {
        pose3d: full.pose3d,
        depth: 0.0,
        kinematic: 0.0,
        reproj: 0.0,
    };
    let baseline_star = LossWeights {
        kinematic: full.kinematic,
        ..baseline
    };
    let variants: Vec<(String, LossWeights, usize)> = [
        ("Baseline".to_string(), baseline, base.encoder.window),
        ("Baseline*".to_string(), baseline_star, base.encoder.window),
        ("SPGNet".to_string(), full, base.encoder.window),
    ]
    .into_iter()
    .chain(ABLATION_WINDOWS.iter().map(|j| (format!("SPGNet J={j}"), full, *j)))
    .collect();

    let mut runs: Vec<Run> = Vec::new();
    let index = |w: LossWeights, window: usize, seed: u64, runs: &mut Vec<Run>| {
        runs.iter()
            .position(|r| r.weights == w && r.window == window && r.seed == seed)
            .unwrap_or_else(|| {
                runs.push(Run { weights: w, window, seed });
                runs.len() - 1
            })
    };
    let plan: Vec<Vec<usize>> = variants
        .iter()
        .map(|(_, w, j)| seeds.iter().map(|s| index(*w, *j, *s, &mut runs)).collect())
        .collect();

    let test = data.test_clips();
    let results: Vec<(SeedResult, Option<BoneLengthReport>)> = runs
        .par_iter()
        .map(|r| {
            let mut cfg = base.clone();
            cfg.weights = r.weights;
            cfg.encoder.window = r.window;
            cfg.seed = r.seed;
            let outcome = train(data, &cfg, &TrainIo::default(), None)?;
            let report = evaluate_clips(&outcome.model, &test, &data.skeleton, Protocols::Both, true)?;
            let dev = mean_bone_deviation(&outcome.model, &test, &data.skeleton)?;
            Ok((
                SeedResult {
                    seed: r.seed,
                    mpjpe_mm: report.average.mpjpe_mm.expect("protocol 1"),
                    pmpjpe_mm: report.average.pmpjpe_mm.expect("protocol 2"),
                    bone_deviation_m: dev,
                },
                report.bone_report,
            ))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<AblationRow> = variants
        .iter()
        .zip(&plan)
        .map(|((name, w, j), idx)| {
            let seeds: Vec<SeedResult> = idx.iter().map(|i| results[*i].0.clone()).collect();
            let col = |f: &dyn Fn(&SeedResult) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
            AblationRow {
                name: name.clone(),
                window: *j,
                weights: *w,
                mpjpe_mm: col(&|s| s.mpjpe_mm),
                pmpjpe_mm: col(&|s| s.pmpjpe_mm),
                bone_deviation_m: col(&|s| s.bone_deviation_m),
                seeds,
            }
        })
        .collect();
    let full_model_bones = results[plan[2][0]].1.clone();
    let (loss_rows, window_rows) = rows.split_at(3);
    Ok(AblationReport {
        loss_rows: loss_rows.to_vec(),
        window_rows: window_rows.to_vec(),
        full_model_bones,
        base_config: base.clone(),
    })
}
