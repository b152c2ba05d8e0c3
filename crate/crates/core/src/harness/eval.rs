use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::metrics::{eval_with_reflection, mpjpe, normalized_error};
use crate::dataset::SequenceDataset;
use crate::error::{PrnError, Result};
use crate::geometry::{center, Shape3D};
use crate::network::{forward, Mode, NetworkConfig, NetworkParams};

/// Frames per eval-mode forward call.
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub mpjpe: f64,
    pub ne: f64,
    /// Whether the depth-reflected prediction scored the lower NE.
    pub reflection_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub ne: f64,
    pub frames: Vec<FrameEval>,
}

/// Eval-mode predictions for every frame of `ds`, in frame order.
pub fn reconstruct(params: &NetworkParams, cfg: &NetworkConfig, ds: &SequenceDataset) -> Result<Vec<Shape3D>> {
    let inputs: Vec<DVector<f64>> = ds.frames().iter().map(|f| f.input_vector()).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        out.extend(forward(params, cfg, chunk, Mode::Eval)?.0);
    }
    Ok(out)
}

/// Reflection-disambiguated MPJPE and NE per frame and on average.
///
/// Prediction and ground truth are both centered first: the depth offset of a
/// prediction is not observable from orthographic data.
pub fn evaluate(params: &NetworkParams, cfg: &NetworkConfig, ds: &SequenceDataset) -> Result<EvalReport> {
    let gts = ds
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.ground_truth()
                .map(|g| center(&g))
                .ok_or(PrnError::MissingGroundTruth { frame: i })
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = reconstruct(params, cfg, ds)?;
    let frames = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| {
            let p = center(p);
            let (ne, reflection_used) = eval_with_reflection(&p, g, normalized_error)?;
            let (mpjpe, _) = eval_with_reflection(&p, g, mpjpe)?;
            Ok(FrameEval {
                mpjpe,
                ne,
                reflection_used,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len().max(1) as f64;
    Ok(EvalReport {
        mpjpe: frames.iter().map(|f| f.mpjpe).sum::<f64>() / n,
        ne: frames.iter().map(|f| f.ne).sum::<f64>() / n,
        frames,
    })
}
