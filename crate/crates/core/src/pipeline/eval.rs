use serde::{Deserialize, Serialize};

use super::{Checkpoint, Dataset, PipelineError};
use crate::render::{psnr, render_image, ssim, Image, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Held-out views at the training timestamps.
    Interp,
    /// Held-out views at the frames after the training time range.
    Extrap,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Interp => "interp",
            Split::Extrap => "extrap",
        }
    }

    /// `(camera, frame)` pairs of the split.
    pub fn pairs(self, dataset: &Dataset) -> Vec<(usize, usize)> {
        let s = &dataset.manifest.splits;
        let frames = match self {
            Split::Interp => &s.train_frames,
            Split::Extrap => &s.extrapolation_frames,
        };
        s.held_out_cameras
            .iter()
            .flat_map(|&c| frames.iter().map(move |&f| (c, f)))
            .collect()
    }
}

impl std::str::FromStr for Split {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interp" | "interpolation" => Ok(Split::Interp),
            "extrap" | "extrapolation" => Ok(Split::Extrap),
            _ => Err(PipelineError::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub camera: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Scores already rendered images, given as `(camera, frame, render)`.
pub fn evaluate_images(
    dataset: &Dataset,
    split: Split,
    renders: &[(usize, usize, Image)],
) -> Result<EvalReport, PipelineError> {
    if renders.is_empty() {
        return Err(PipelineError::EmptySplit(split.name().into()));
    }
    let mut rows = Vec::with_capacity(renders.len());
    for (camera, frame, img) in renders {
        let gt = dataset.load_image(*camera, *frame)?;
        rows.push(EvalRow {
            camera: *camera,
            frame: *frame,
            psnr: psnr(img, &gt)?,
            ssim: ssim(img, &gt)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        split,
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}

/// Renders camera `view` at `frame` from a trained model.
pub fn render_view(
    ck: &Checkpoint,
    dataset: &Dataset,
    view: usize,
    frame: usize,
) -> Result<Image, PipelineError> {
    let cam = dataset.cameras.get(view).ok_or_else(|| {
        PipelineError::Config(format!(
            "no camera {view} (dataset has {})",
            dataset.cameras.len()
        ))
    })?;
    let time = *dataset.manifest.timestamps.get(frame).ok_or_else(|| {
        PipelineError::Config(format!(
            "no frame {frame} (dataset has {})",
            dataset.manifest.frame_count
        ))
    })?;
    let schedule = dataset.schedule(ck.config.reference_stride)?;
    let config = RenderConfig {
        samples: ck.config.eval_samples(),
        background: dataset.manifest.background,
        clip_to_aabb: true,
        chunk_rays: ck.config.chunk_rays,
    };
    let m = &ck.model;
    Ok(render_image(
        &m.store,
        &m.radiance,
        Some(&m.se3),
        Some(&schedule),
        cam,
        time,
        &config,
    )?)
}

/// Renders and scores every pair of the split.
pub fn evaluate(
    ck: &Checkpoint,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalReport, PipelineError> {
    let pairs = split.pairs(dataset);
    if pairs.is_empty() {
        return Err(PipelineError::EmptySplit(split.name().into()));
    }
    let renders = pairs
        .into_iter()
        .map(|(c, f)| Ok((c, f, render_view(ck, dataset, c, f)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    evaluate_images(dataset, split, &renders)
}
