//! Single-frame SVG overlay of the 2D input, the re-projected prediction
//! and the projected ground truth.

use std::fmt::Write as _;

use crate::camera::{project_sequence, CameraIntrinsics};
use crate::dataio::MotionClip;
use crate::encoder::EncoderModel;
use crate::evaluator::predict_clip;
use crate::losses::MIN_PROJECTION_DEPTH;
use crate::skeleton::{Pose2D, Pose3D, Skeleton};
use crate::{Error, Result};

/// The 2D skeletons drawn for one frame, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLayers {
    pub frame: usize,
    pub input: Pose2D,
    pub predicted: Option<Pose2D>,
    pub ground_truth: Pose2D,
}

/// Collects the layers for `frame`; the prediction layer needs a model.
pub fn frame_layers(clip: &MotionClip, frame: usize, model: Option<&EncoderModel>) -> Result<FrameLayers> {
    if frame >= clip.len() {
        return Err(Error::Config(format!(
            "frame {frame} out of range: clip has frames 0..={}",
            clip.len().saturating_sub(1)
        )));
    }
    let ground_truth = project_sequence(&clip.poses3d[frame..=frame], &clip.camera)?.remove(0);
    let predicted = match model {
        Some(m) => {
            let pred = predict_clip(m, clip)?;
            let joints = pred.shape()[1];
            let row = &pred.data()[frame * joints * 3..(frame + 1) * joints * 3];
            let floored: Vec<[f64; 3]> = row
                .chunks(3)
                .map(|c| [c[0], c[1], c[2].max(MIN_PROJECTION_DEPTH)])
                .collect();
            Some(project_sequence(&[Pose3D::new(floored)], &clip.camera)?.remove(0))
        }
        None => None,
    };
    Ok(FrameLayers {
        frame,
        input: clip.poses2d[frame].clone(),
        predicted,
        ground_truth,
    })
}

const STYLES: [(&str, &str, &str); 3] = [
    ("input", "#222222", "stroke-width=\"3\""),
    ("prediction", "#d62728", "stroke-width=\"2\" stroke-dasharray=\"8 4\""),
    ("ground-truth", "#1f77b4", "stroke-width=\"2\" stroke-dasharray=\"2 3\""),
];

/// Renders the layers as a standalone SVG sized to the camera image, with
/// `desc` (escaped) as the document description. Output bytes depend only
/// on the inputs.
pub fn render_svg(layers: &FrameLayers, skel: &Skeleton, camera: &CameraIntrinsics, desc: &str) -> String {
    let (w, h) = (camera.width(), camera.height());
    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    if !desc.is_empty() {
        let escaped = desc.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(s, "<desc>{escaped}</desc>");
    }
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>");
    let poses = [Some(&layers.input), layers.predicted.as_ref(), Some(&layers.ground_truth)];
    for ((name, color, extra), pose) in STYLES.iter().zip(poses) {
        let Some(pose) = pose else { continue };
        let _ = writeln!(
            s,
            "<g id=\"{name}\" stroke=\"{color}\" {extra} stroke-linecap=\"round\" fill=\"none\">"
        );
        for (child, parent) in skel.bones() {
            let (a, b) = (pose.joints[parent], pose.joints[child]);
            let _ = writeln!(
                s,
                "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\"/>",
                a[0], a[1], b[0], b[1]
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "<g font-family=\"sans-serif\" font-size=\"16\">");
    let _ = writeln!(s, "<text x=\"10\" y=\"22\" fill=\"#000000\">frame {}</text>", layers.frame);
    let mut y = 44;
    for ((name, color, _), pose) in STYLES.iter().zip(poses) {
        if pose.is_some() {
            let _ = writeln!(s, "<text x=\"10\" y=\"{y}\" fill=\"{color}\">{name}</text>");
            y += 22;
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}
