//! The self-supervised pretraining loop.
//!
//! Each step samples a batch of clips, builds their views, scores the global
//! views with the teacher, trains the student on the local views against the
//! sharpened teacher targets, and then (with distillation enabled) moves the
//! teacher and the output center.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, EncoderParams};
use crate::checkpoint::{self, CheckpointMeta, RngState, TrainState, FORMAT_VERSION};
use crate::dataset::{load_full_clip, Manifest};
use crate::distill::{self, DistillConfig, DistillState};
use crate::error::{ensure, Error, Result};
use crate::frames::FrameStack;
use crate::optim::AdamW;
use crate::provenance::config_hash;
use crate::schedule::ScheduleConfig;
use crate::views::{sample_views, AugmentPolicy, View, ViewConfig};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub views: ViewConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_true")]
    pub kd_enabled: bool,
    /// Checkpoint whose student tensors initialize matching parameters
    /// (e.g. spatial weights pretrained elsewhere).
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    8
}

fn default_log_every() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

impl PretrainConfig {
    /// Desk defaults around the given view geometry.
    pub fn new(views: ViewConfig, backbone: BackboneConfig) -> Self {
        Self {
            views,
            backbone,
            distill: DistillConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentPolicy::default(),
            batch_size: default_batch_size(),
            seed: 0,
            checkpoint_every: 0,
            log_every: 1,
            kd_enabled: true,
            init_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.views.validate(self.backbone.patch_size)?;
        self.distill.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        ensure!(self.batch_size >= 1, Validation, "batch_size must be >= 1");
        ensure!(self.log_every >= 1, Validation, "log_every must be >= 1");
        Ok(())
    }

    /// Schedule with `steps_per_epoch` resolved against a manifest size.
    pub fn resolved_schedule(&self, num_clips: usize) -> ScheduleConfig {
        let mut s = self.schedule.clone();
        if s.steps_per_epoch == 0 {
            s.steps_per_epoch = num_clips.div_ceil(self.batch_size).max(1);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub wd: f64,
    pub ema_momentum: f64,
    pub tcl: f64,
    pub scl: f64,
    pub total: f64,
    /// Mean entropy of the sharpened, centered teacher targets.
    pub teacher_entropy: f64,
    pub wall_time: f64,
}

/// Step-at-a-time driver over a manifest.
pub struct Trainer<'a> {
    manifest: &'a Manifest,
    cfg: PretrainConfig,
    views: ViewConfig,
    schedule: ScheduleConfig,
    config_hash: String,
    pub state: TrainState,
    clips: Vec<Option<FrameStack>>,
    cached_values: usize,
    started: Instant,
}

/// Decoded clips are cached up to this many `f64` values.
const CLIP_CACHE_LIMIT: usize = 200_000_000;

impl<'a> Trainer<'a> {
    pub fn new(manifest: &'a Manifest, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = EncoderParams::init(&cfg.backbone, cfg.seed)?;
        if let Some(path) = &cfg.init_from {
            let tensors = checkpoint::read_tensors(path)?;
            let student: std::collections::BTreeMap<_, _> = tensors
                .into_iter()
                .filter_map(|(k, v)| k.strip_prefix("student/").map(|n| (n.to_string(), v)))
                .collect();
            let names = params.import_tensors(&student)?;
            log::info!("imported {} tensors from {}", names.len(), path.display());
        }
        let state = TrainState {
            adam: AdamW::new(params.len()),
            distill: DistillState::new(params),
        };
        Self::with_state(manifest, cfg, state)
    }

    pub fn resume(manifest: &'a Manifest, cfg: PretrainConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let (state, meta) = checkpoint::load_checkpoint(path, Some(&cfg.backbone))?;
        let hash = config_hash(&cfg);
        if meta.config_hash != hash {
            log::warn!(
                "resuming with a config different from the checkpoint's ({})",
                meta.config_hash
            );
        }
        Self::with_state(manifest, cfg, state)
    }

    fn with_state(manifest: &'a Manifest, cfg: PretrainConfig, state: TrainState) -> Result<Self> {
        ensure!(
            !manifest.records.is_empty(),
            Validation,
            "manifest has no clips"
        );
        let views = cfg.views.clamped();
        let schedule = cfg.resolved_schedule(manifest.records.len());
        let batches = manifest.records.len().div_ceil(cfg.batch_size);
        ensure!(
            schedule.steps_per_epoch <= batches,
            Validation,
            "steps_per_epoch {} exceeds the {batches} batches in the manifest",
            schedule.steps_per_epoch
        );
        Ok(Self {
            manifest,
            views,
            schedule,
            config_hash: config_hash(&cfg),
            cfg,
            state,
            clips: vec![None; manifest.records.len()],
            cached_values: 0,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn step_index(&self) -> u64 {
        self.state.distill.step
    }

    pub fn is_done(&self) -> bool {
        self.step_index() >= self.total_steps()
    }

    /// Clip indices of the batch trained at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.schedule.steps_per_epoch as u64;
        let epoch = step / spe;
        let b = (step % spe) as usize;
        let mut order: Vec<usize> = (0..self.manifest.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch | 1 << 63);
        order.shuffle(&mut rng);
        let bs = self.cfg.batch_size;
        let start = (b * bs).min(order.len());
        let end = ((b + 1) * bs).min(order.len());
        order[start..end].to_vec()
    }

    fn clip(&mut self, i: usize) -> Result<FrameStack> {
        if let Some(c) = &self.clips[i] {
            return Ok(c.clone());
        }
        let clip = load_full_clip(&self.manifest.records[i])?;
        if self.cached_values + clip.data.len() <= CLIP_CACHE_LIMIT {
            self.cached_values += clip.data.len();
            self.clips[i] = Some(clip.clone());
        }
        Ok(clip)
    }

    pub fn meta(&self) -> CheckpointMeta {
        let step = self.step_index();
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            backbone: self.cfg.backbone.clone(),
            step,
            seed: self.cfg.seed,
            rng: RngState {
                seed: self.cfg.seed,
                stream: step,
            },
            adam_steps: self.state.adam.t,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.state, &self.meta(), path)
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let step = self.step_index();
        ensure!(
            step < self.total_steps(),
            Precondition,
            "training already finished ({} steps)",
            self.total_steps()
        );
        let lr = self.schedule.lr_at(step)?;
        let wd = self.schedule.wd_at(step)?;
        let ema = self.schedule.ema_momentum_at(step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);

        let batch = self.batch_indices(step);
        let dc = self.cfg.distill.clone();
        let center = dc.centering.then(|| self.state.distill.center.clone());
        let mut grads = self.state.distill.student.zeros_like();
        let mut teacher_logits = Vec::new();
        let (mut tcl_sum, mut scl_sum, mut entropy_sum, mut entropy_count) =
            (0.0, 0.0, 0.0, 0usize);
        let scale = 1.0 / batch.len() as f64;

        for &ci in &batch {
            let clip = self.clip(ci)?;
            let record = &self.manifest.records[ci];
            let views = sample_views(record, &clip, &self.views, &self.cfg.augment, &mut rng)?;
            let teacher = self.state.distill.teacher.params();
            let mut targets = Vec::with_capacity(views.globals.len());
            for g in &views.globals {
                let z = backbone::project(&backbone::encode(&g.frames, teacher)?, teacher);
                let t = distill::sharpen(&z, dc.teacher_temp, center.as_deref())?;
                entropy_sum += distill::entropy(&t);
                entropy_count += 1;
                targets.push(t);
                teacher_logits.push(z);
            }
            let student = &self.state.distill.student;
            let pairs = |v: &View| -> Vec<usize> {
                (0..views.globals.len())
                    .filter(|&g| views.globals[g].frames != v.frames)
                    .collect()
            };
            let temporal_pairs: usize = views.local_temporals.iter().map(|v| pairs(v).len()).sum();
            for v in &views.local_temporals {
                let valid = pairs(v);
                if valid.is_empty() {
                    continue;
                }
                let w = 1.0 / temporal_pairs as f64;
                tcl_sum += scale
                    * student_term(
                        student,
                        v,
                        &targets,
                        &valid,
                        w,
                        dc.student_temp,
                        scale,
                        &mut grads,
                    )?;
            }
            for v in &views.local_spatials {
                let valid = pairs(v);
                if valid.is_empty() {
                    continue;
                }
                let w = 1.0 / valid.len() as f64;
                scl_sum += scale
                    * student_term(
                        student,
                        v,
                        &targets,
                        &valid,
                        w,
                        dc.student_temp,
                        scale,
                        &mut grads,
                    )?;
            }
        }

        let total = distill::total_loss(tcl_sum, scl_sum);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                config_hash: self.config_hash.clone(),
                clip_ids: batch
                    .iter()
                    .map(|&i| self.manifest.records[i].clip_id.clone())
                    .collect(),
            });
        }
        let st = &mut self.state;
        st.adam.step(&mut st.distill.student, &grads, lr, wd);
        if self.cfg.kd_enabled {
            distill::ema_update(&mut st.distill.teacher, &st.distill.student, ema)?;
            if dc.centering {
                distill::update_center(
                    &mut st.distill.center,
                    &teacher_logits,
                    dc.center_momentum,
                )?;
            }
        }
        st.distill.step += 1;
        Ok(TrainLogRecord {
            step,
            epoch: step / self.schedule.steps_per_epoch as u64,
            lr,
            wd,
            ema_momentum: ema,
            tcl: tcl_sum,
            scl: scl_sum,
            total,
            teacher_entropy: entropy_sum / entropy_count.max(1) as f64,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }
}

/// Forward/backward of one student view against its valid teacher targets.
/// Returns the view's weighted loss and accumulates `scale`-weighted
/// gradients.
#[allow(clippy::too_many_arguments)]
fn student_term(
    student: &EncoderParams,
    view: &View,
    targets: &[Vec<f64>],
    valid: &[usize],
    weight: f64,
    tau: f64,
    scale: f64,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let fwd = backbone::forward_train(student, &view.frames)?;
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; fwd.logits.len()];
    for &g in valid {
        let (l, dz) = distill::cross_entropy_with_grad(&targets[g], &fwd.logits, tau)?;
        loss += weight * l;
        for (a, b) in d_logits.iter_mut().zip(&dz) {
            *a += weight * scale * b;
        }
    }
    backbone::backward(student, &fwd, &d_logits, grads);
    Ok(loss)
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub log: Vec<TrainLogRecord>,
    pub config_hash: String,
}

/// Runs the whole schedule. With `out_dir`, appends the JSON-lines log,
/// writes periodic checkpoints and `checkpoint.bin` at the end.
pub fn pretrain(
    manifest: &Manifest,
    cfg: PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let trainer = Trainer::new(manifest, cfg)?;
    run(trainer, out_dir)
}

/// Continues a run from a checkpoint.
pub fn resume_pretrain(
    manifest: &Manifest,
    cfg: PretrainConfig,
    checkpoint: &Path,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let trainer = Trainer::resume(manifest, cfg, checkpoint)?;
    run(trainer, out_dir)
}

fn run(mut trainer: Trainer<'_>, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let mut log = Vec::new();
    let log_every = trainer.config().log_every;
    let ck_every = trainer.config().checkpoint_every;
    while !trainer.is_done() {
        let rec = trainer.step()?;
        if rec.step % log_every == 0 || trainer.is_done() {
            log::info!(
                "step {}/{} total {:.4} (tcl {:.4}, scl {:.4}) teacher entropy {:.3} lr {:.2e}",
                rec.step + 1,
                trainer.total_steps(),
                rec.total,
                rec.tcl,
                rec.scl,
                rec.teacher_entropy,
                rec.lr
            );
            if let Some((path, w)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
        }
        log.push(rec);
        if let Some(dir) = out_dir {
            let step = trainer.step_index();
            if ck_every > 0 && step.is_multiple_of(ck_every) && !trainer.is_done() {
                trainer.save(&dir.join(format!("checkpoint_{step:06}.bin")))?;
            }
        }
    }
    if let Some((path, mut w)) = log_file {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        trainer.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(PretrainOutcome {
        config_hash: trainer.config_hash.clone(),
        state: trainer.state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::views::CropSource;

    fn tiny_setup() -> (tempfile::TempDir, Manifest, PretrainConfig) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_clips: 4,
            test_clips: 1,
            frames_per_clip: 8,
            frame_size: 16,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        let manifest = ds.train;
        let views = ViewConfig {
            global_frames: 4,
            local_frame_choices: vec![2, 4],
            global_size: (16, 16),
            local_size: (8, 8),
            num_global: 2,
            num_local_spatial: 3,
            crop_source: CropSource::Random,
            local_crop_scale: (0.2, 0.6),
        };
        let mut cfg = PretrainConfig::new(views, BackboneConfig::tiny());
        cfg.batch_size = 2;
        cfg.schedule.total_epochs = 5;
        cfg.schedule.warmup_epochs = 1;
        (dir, manifest, cfg)
    }

    #[test]
    fn smoke_two_steps() {
        let (_d, manifest, mut cfg) = tiny_setup();
        cfg.schedule.total_epochs = 1;
        let out = pretrain(&manifest, cfg, None).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out
            .log
            .iter()
            .all(|r| r.total.is_finite() && r.tcl >= 0.0 && r.scl >= 0.0));
        let ln_n = (16f64).ln();
        assert!(out
            .log
            .iter()
            .all(|r| r.teacher_entropy >= 0.0 && r.teacher_entropy <= ln_n + 1e-9));
    }

    #[test]
    fn disabled_distillation_freezes_teacher() {
        let (_d, manifest, mut cfg) = tiny_setup();
        cfg.kd_enabled = false;
        cfg.schedule.total_epochs = 2;
        let init = EncoderParams::init(&cfg.backbone, cfg.seed).unwrap();
        let out = pretrain(&manifest, cfg, None).unwrap();
        assert_eq!(*out.state.distill.teacher.params(), init);
        assert_ne!(*out.state.distill.student, init);
    }

    #[test]
    fn resume_replays_the_straight_run() {
        let (dir, manifest, cfg) = tiny_setup();
        let straight = pretrain(&manifest, cfg.clone(), None).unwrap();
        let mut t = Trainer::new(&manifest, cfg.clone()).unwrap();
        let mut first = Vec::new();
        for _ in 0..5 {
            first.push(t.step().unwrap());
        }
        let ck = dir.path().join("mid.bin");
        t.save(&ck).unwrap();
        drop(t);
        let rest = resume_pretrain(&manifest, cfg, &ck, None).unwrap();
        let resumed: Vec<f64> = first.iter().chain(&rest.log).map(|r| r.total).collect();
        let direct: Vec<f64> = straight.log.iter().map(|r| r.total).collect();
        assert_eq!(resumed.len(), direct.len());
        for (a, b) in resumed.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(rest.state, straight.state);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let (_d, manifest, cfg) = tiny_setup();
        let t = Trainer::new(&manifest, cfg).unwrap();
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..2)
                .flat_map(|b| t.batch_indices(epoch * 2 + b))
                .collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn output_dir_gets_log_and_checkpoint() {
        let (dir, manifest, mut cfg) = tiny_setup();
        cfg.schedule.total_epochs = 2;
        cfg.checkpoint_every = 2;
        let out_dir = dir.path().join("run");
        pretrain(&manifest, cfg.clone(), Some(&out_dir)).unwrap();
        let log = std::fs::read_to_string(out_dir.join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 4);
        let rec: TrainLogRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(rec.step, 0);
        assert!(out_dir.join("checkpoint_000002.bin").exists());
        let (state, meta) =
            checkpoint::load_checkpoint(&out_dir.join(FINAL_CHECKPOINT), Some(&cfg.backbone))
                .unwrap();
        assert_eq!(meta.step, 4);
        assert_eq!(state.distill.step, 4);
    }
}
