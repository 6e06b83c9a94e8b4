use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{io_err, PipelineError};
use crate::render::{CameraModel, Image};
use crate::scenegen::{frame_file_name, Manifest, PosesFile};
use crate::se3field::ReferenceSchedule;

/// A rendered dataset: manifest, cameras and lazily loaded frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<CameraModel>,
    /// Training images, keyed by `(camera, frame)`.
    pub train_images: BTreeMap<(usize, usize), Image>,
}

fn invalid(m: impl Into<String>) -> PipelineError {
    PipelineError::DatasetInvalid(m.into())
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let read = |name: &str| -> Result<String, PipelineError> {
            let p = root.join(name);
            std::fs::read_to_string(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))
        };
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
            .map_err(|e| invalid(format!("manifest.json: {e}")))?;
        let poses: PosesFile = serde_json::from_str(&read("poses.json")?)
            .map_err(|e| invalid(format!("poses.json: {e}")))?;
        let cameras: Vec<CameraModel> = poses.cameras.iter().map(|p| p.to_camera()).collect();
        for (i, c) in cameras.iter().enumerate() {
            c.validate()
                .map_err(|e| invalid(format!("camera {i}: {e}")))?;
            if (c.width, c.height) != (manifest.width, manifest.height) {
                return Err(invalid(format!(
                    "camera {i} image size differs from the manifest"
                )));
            }
        }
        let s = &manifest.splits;
        if s.train_cameras.is_empty() || s.train_frames.is_empty() {
            return Err(invalid("no training views or frames"));
        }
        if manifest.timestamps.len() != manifest.frame_count {
            return Err(invalid("timestamp count differs from frame_count"));
        }
        let cams_ok = s
            .train_cameras
            .iter()
            .chain(&s.held_out_cameras)
            .all(|&c| c < cameras.len());
        let frames_ok = s
            .train_frames
            .iter()
            .chain(&s.extrapolation_frames)
            .all(|&f| f < manifest.frame_count);
        if !cams_ok || !frames_ok {
            return Err(invalid("split refers to a missing camera or frame"));
        }
        // Training frames must be the leading block, as the reference
        // schedule is built over them.
        if s.train_frames.iter().enumerate().any(|(i, &f)| i != f) {
            return Err(invalid("training frames must be 0..n"));
        }
        let mut ds = Self {
            root: root.to_path_buf(),
            manifest,
            cameras,
            train_images: BTreeMap::new(),
        };
        for &c in &ds.manifest.splits.train_cameras.clone() {
            for &f in &ds.manifest.splits.train_frames.clone() {
                let img = ds.load_image(c, f)?;
                ds.train_images.insert((c, f), img);
            }
        }
        Ok(ds)
    }

    pub fn load_image(&self, camera: usize, frame: usize) -> Result<Image, PipelineError> {
        let p = self
            .root
            .join("frames")
            .join(frame_file_name(camera, frame));
        if !p.exists() {
            return Err(invalid(format!("missing frame {}", p.display())));
        }
        let img = Image::load_png(&p).map_err(|e| io_err(&p, e))?;
        if (img.width, img.height) != (self.manifest.width, self.manifest.height) {
            return Err(invalid(format!("{} has the wrong size", p.display())));
        }
        Ok(img)
    }

    pub fn train_frame_count(&self) -> usize {
        self.manifest.splits.train_frames.len()
    }

    /// References every `stride`-th training frame.
    pub fn schedule(&self, stride: usize) -> Result<ReferenceSchedule, PipelineError> {
        let ts = self.manifest.timestamps[..self.train_frame_count()].to_vec();
        Ok(ReferenceSchedule::new(ts, stride)?)
    }
}
