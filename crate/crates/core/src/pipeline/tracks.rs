use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::scenegen::{fit_twist, parse_tracks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    pub from: usize,
    pub to: usize,
    /// `[ωx, ωy, ωz, vx, vy, vz]`.
    pub twist: [f64; 6],
    pub ground_truth: Option<[f64; 6]>,
    /// Largest component difference to the ground truth.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTwistReport {
    pub pairs: Vec<PairFit>,
    /// Maximum over the pairs that carry a ground truth.
    pub max_error: Option<f64>,
}

/// Recovers the twist between every pair of consecutive frames of a tracks
/// file and compares it with the recorded ground truth.
pub fn fit_twist_cmd(text: &str) -> Result<FitTwistReport, PipelineError> {
    let tf = parse_tracks(text)?;
    let mut pairs = Vec::with_capacity(tf.timestamps.len() - 1);
    for f in 0..tf.timestamps.len() - 1 {
        let dt = tf.timestamps[f + 1] - tf.timestamps[f];
        let xi = fit_twist(&tf.positions[f], &tf.positions[f + 1], dt)?.to_array();
        let gt = tf.ground_truth[f].map(|g| g.to_array());
        let error = gt.map(|g| (0..6).map(|k| (xi[k] - g[k]).abs()).fold(0.0, f64::max));
        pairs.push(PairFit {
            from: f,
            to: f + 1,
            twist: xi,
            ground_truth: gt,
            error,
        });
    }
    let max_error = pairs.iter().filter_map(|p| p.error).reduce(f64::max);
    Ok(FitTwistReport { pairs, max_error })
}
