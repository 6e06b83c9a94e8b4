use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, RngState};
use super::{io_err, Dataset, Model, PipelineError, TrainConfig};
use crate::ad::{adam_step, AdamState, Gradients, ParamGroup, Tape, Tensor};
use crate::physics_losses::{photometric_tape, RegularizerBatch, RegularizerTerms};
use crate::render::{psnr_from_mse, render_rays, sample_ray, RaySample};
use crate::se3field::ReferenceSchedule;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.lfck";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub frame: usize,
    pub reference: bool,
    pub rays: usize,
    pub photometric: f64,
    pub divergence: Option<f64>,
    pub momentum: Option<f64>,
    pub ortho: Option<f64>,
    pub trans: Option<f64>,
    pub total: f64,
    /// PSNR of the batch colours (meaningful for the MSE norm only).
    pub psnr: f64,
    pub elapsed_s: f64,
}

/// Sampled rays of one iteration with their target colours.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub frame: usize,
    pub time: f64,
    pub rays: Vec<RaySample>,
    pub targets: Vec<[f64; 3]>,
}

/// Loss values and gradients of one iteration, before the update.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub reference: bool,
    pub photometric: f64,
    pub regularizers: Option<[f64; 4]>,
    pub total: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_loss: Option<f64>,
}

/// Mutable training state: the model, optimiser and sampling RNG.
pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub schedule: ReferenceSchedule,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let dataset = Dataset::open(&config.dataset)?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&config, dataset.manifest.aabb, &mut init)?;
        let adam = AdamState::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self::assemble(config, dataset, model, adam, rng, 0)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, PipelineError> {
        let dataset = Dataset::open(&ck.config.dataset)?;
        if dataset.manifest.aabb != ck.aabb {
            return Err(PipelineError::DatasetInvalid(
                "scene box differs from the checkpoint".into(),
            ));
        }
        let rng = ck.rng.restore()?;
        Self::assemble(ck.config, dataset, ck.model, ck.adam, rng, ck.iteration)
    }

    fn assemble(
        config: TrainConfig,
        dataset: Dataset,
        model: Model,
        adam: AdamState,
        rng: ChaCha8Rng,
        iteration: usize,
    ) -> Result<Self, PipelineError> {
        let schedule = dataset.schedule(config.reference_stride)?;
        Ok(Self {
            config,
            dataset,
            schedule,
            model,
            adam,
            rng,
            iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            aabb: self.model.radiance.aabb,
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Draws a frame, then `rays_per_batch` random (camera, pixel) pairs from
    /// the training views of that frame. Rays that miss the scene box are
    /// dropped.
    pub fn sample_batch(&mut self) -> RayBatch {
        let ds = &self.dataset;
        let frame = self.rng.random_range(0..ds.train_frame_count());
        let time = ds.manifest.timestamps[frame];
        let cams = &ds.manifest.splits.train_cameras;
        let (w, h) = (ds.manifest.width, ds.manifest.height);
        let aabb = self.model.radiance.aabb;
        let mut rays = Vec::with_capacity(self.config.rays_per_batch);
        let mut targets = Vec::with_capacity(self.config.rays_per_batch);
        for _ in 0..self.config.rays_per_batch {
            let cam = cams[self.rng.random_range(0..cams.len())];
            let (row, col) = (self.rng.random_range(0..h), self.rng.random_range(0..w));
            let c = &ds.cameras[cam];
            let ray = c.ray(row, col).expect("pixel inside a validated camera");
            if let Some(s) = sample_ray(
                &ray,
                c.near,
                c.far,
                self.config.samples_per_ray,
                Some(&aabb),
                Some(&mut self.rng),
            ) {
                rays.push(s);
                targets.push(ds.train_images[&(cam, frame)].get(row, col));
            }
        }
        RayBatch {
            frame,
            time,
            rays,
            targets,
        }
    }

    /// Loss and gradients of one batch. Rays are split into fixed chunks,
    /// each on its own tape; the chunk gradients are summed in order so the
    /// result does not depend on the thread count.
    pub fn compute(
        &self,
        batch: &RayBatch,
        reg: Option<&RegularizerBatch>,
    ) -> Result<StepResult, PipelineError> {
        let model = &self.model;
        let reference = self.schedule.is_reference_frame(batch.frame);
        let warp = (!reference).then_some(&model.se3);
        let n = batch.rays.len();
        let bg = self.dataset.manifest.background;
        let norm = self.config.photometric;
        let idx: Vec<usize> = (0..n).collect();
        let parts: Vec<Result<(f64, Gradients), PipelineError>> = idx
            .chunks(self.config.chunk_rays)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|chunk| {
                let mut tape = Tape::new(&model.store);
                let rays: Vec<RaySample> = chunk.iter().map(|&i| batch.rays[i].clone()).collect();
                let target =
                    Tensor::from_rows(&chunk.iter().map(|&i| batch.targets[i]).collect::<Vec<_>>());
                let pred = render_rays(
                    &mut tape,
                    &model.radiance,
                    warp,
                    Some(&self.schedule),
                    &rays,
                    batch.time,
                    bg,
                )?;
                let loss = photometric_tape(&mut tape, pred, target, norm)?;
                let loss = tape.scale(loss, chunk.len() as f64 / n as f64);
                Ok((tape.value(loss).item(), tape.backward(loss)))
            })
            .collect();
        let mut grads = Gradients::default();
        let mut photometric = 0.0;
        for p in parts {
            let (l, g) = p?;
            photometric += l;
            grads.merge(&g);
        }
        let mut total = photometric;
        let mut regularizers = None;
        if let (false, Some(reg)) = (reference, reg) {
            let mut tape = Tape::new(&model.store);
            let accel = tape.param(model.se3.accel);
            let terms = RegularizerTerms::compute(
                &mut tape,
                &model.se3,
                reg,
                accel,
                self.config.divergence_target,
            )?;
            let weighted = terms.weighted(&mut tape, &self.config.loss_weights());
            let v = |x| tape.value(x).item();
            regularizers = Some([
                v(terms.divergence),
                v(terms.momentum),
                v(terms.ortho),
                v(terms.trans),
            ]);
            total += v(weighted);
            grads.merge(&tape.backward(weighted));
        }
        Ok(StepResult {
            reference,
            photometric,
            regularizers,
            total,
            grads,
        })
    }

    /// One iteration: sample, differentiate, update. Reference batches move
    /// only the radiance field; query batches move both networks.
    pub fn step(&mut self, started: Instant) -> Result<MetricsRecord, PipelineError> {
        let batch = self.sample_batch();
        let reg = if self.schedule.is_reference_frame(batch.frame) {
            None
        } else {
            Some(RegularizerBatch::sample(
                &self.model.radiance.aabb,
                self.config.reg_points,
                self.config.reg_times,
                &mut self.rng,
            )?)
        };
        let res = self.compute(&batch, reg.as_ref())?;
        let grads_finite = res.grads.iter().all(|(_, g)| g.all_finite());
        if !res.total.is_finite() || !grads_finite {
            let dump = self.dump_batch(&batch, &res)?;
            return Err(PipelineError::NonFiniteLoss {
                iteration: self.iteration,
                dump,
            });
        }
        self.model.store.zero_grads();
        self.model.store.accumulate(&res.grads);
        let mut groups = vec![(ParamGroup::Radiance, self.config.lr_radiance)];
        if !res.reference {
            groups.push((ParamGroup::Motion, self.config.lr_se3));
        }
        adam_step(
            &mut self.model.store,
            &mut self.adam,
            &self.config.adam,
            &groups,
        )?;
        let r = res.regularizers;
        let rec = MetricsRecord {
            iteration: self.iteration,
            frame: batch.frame,
            reference: res.reference,
            rays: batch.rays.len(),
            photometric: res.photometric,
            divergence: r.map(|r| r[0]),
            momentum: r.map(|r| r[1]),
            ortho: r.map(|r| r[2]),
            trans: r.map(|r| r[3]),
            total: res.total,
            psnr: psnr_from_mse(res.photometric),
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        Ok(rec)
    }

    fn dump_batch(&self, batch: &RayBatch, res: &StepResult) -> Result<String, PipelineError> {
        std::fs::create_dir_all(&self.config.out_dir)
            .map_err(|e| io_err(&self.config.out_dir, e))?;
        let path = self
            .config
            .out_dir
            .join(format!("nonfinite_{:06}.json", self.iteration));
        let bad: Vec<String> = res
            .grads
            .iter()
            .filter(|(_, g)| !g.all_finite())
            .map(|(id, _)| self.model.store.entry(id).name.clone())
            .collect();
        let rays: Vec<_> = batch
            .rays
            .iter()
            .zip(&batch.targets)
            .map(|(r, t)| serde_json::json!({"origin": r.origin.as_slice(), "direction": r.direction.as_slice(), "depths": r.depths, "target": t}))
            .collect();
        let doc = serde_json::json!({
            "iteration": self.iteration,
            "frame": batch.frame,
            "time": batch.time,
            "reference": res.reference,
            "photometric": format!("{}", res.photometric),
            "regularizers": res.regularizers.map(|r| r.map(|x| format!("{x}"))),
            "non_finite_gradients": bad,
            "rays": rays,
        });
        let text = serde_json::to_string_pretty(&doc).expect("dump serialises");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path.display().to_string())
    }

    /// Runs until `config.iterations`, appending to the metrics log and
    /// saving checkpoints into `out_dir`.
    pub fn run(&mut self, append: bool) -> Result<TrainOutcome, PipelineError> {
        let out = self.config.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let metrics_path = out.join(METRICS_FILE);
        let checkpoint_path = out.join(CHECKPOINT_FILE);
        let file = if append {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)
        } else {
            File::create(&metrics_path)
        }
        .map_err(|e| io_err(&metrics_path, e))?;
        let mut log = BufWriter::new(file);
        let started = Instant::now();
        let mut final_loss = None;
        while self.iteration < self.config.iterations {
            let rec = self.step(started)?;
            final_loss = Some(rec.total);
            serde_json::to_writer(&mut log, &rec).map_err(|e| io_err(&metrics_path, e))?;
            log.write_all(b"\n").map_err(|e| io_err(&metrics_path, e))?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration % every == 0 && self.iteration < self.config.iterations {
                log.flush().map_err(|e| io_err(&metrics_path, e))?;
                save_checkpoint(&self.checkpoint(), &checkpoint_path)?;
            }
        }
        log.flush().map_err(|e| io_err(&metrics_path, e))?;
        let checkpoint = self.checkpoint();
        save_checkpoint(&checkpoint, &checkpoint_path)?;
        Ok(TrainOutcome {
            checkpoint,
            checkpoint_path,
            metrics_path,
            final_loss,
        })
    }
}

/// Trains from scratch; zero iterations writes the initial parameters.
pub fn train(config: TrainConfig) -> Result<TrainOutcome, PipelineError> {
    Trainer::new(config)?.run(false)
}

/// Continues a checkpointed run up to `iterations` (default: the configured
/// total), appending to its metrics log.
pub fn train_from(
    ck: Checkpoint,
    iterations: Option<usize>,
) -> Result<TrainOutcome, PipelineError> {
    let mut t = Trainer::from_checkpoint(ck)?;
    if let Some(n) = iterations {
        t.config.iterations = n;
    }
    t.run(true)
}

/// Reads a metrics log.
pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRecord>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
