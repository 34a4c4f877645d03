// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_training, save_training, OptimState};
use super::model::{Detector, LossValues, ModelConfig};
use super::optim::{clip_grad_norm, AdamW, OneCycle};
use super::Config;
use crate::data_ingest::{augment, build_gt_database, crop_to_range, synth_scene, AugmentConfig, Box3D, GtDatabase, Scene, SynthConfig};
use crate::decoder_eval::{Detection, ScoreMode};
use crate::detect_head::{build_targets, TargetBundle};
use crate::error::{Error, Result};
use crate::nn::{apply_bn_updates, Fwd};
use crate::ops::BnMode;
use crate::params::ParamStore;
use crate::voxel_grid::{voxelize, SparseVolume, VoxelGridSpec};

pub const LOG_HEADER: &str = "step,lr,L_cls,L_box,L_iou,L_sem,L_total";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const CKPT_FILE: &str = "model.ckpt";

/// Training scenes with their object database for paste augmentation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub db: GtDatabase,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>, num_classes: usize) -> Self {
        let db = build_gt_database(&scenes, num_classes);
        Self { scenes, db }
    }
}

/// `n` synthetic scenes from one seed.
pub fn synth_scenes(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_scene(&mut rng, cfg, format!("{i:06}"))).collect()
}

/// Network input and targets of a batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: SparseVolume<f32>,
    pub targets: Vec<TargetBundle>,
    pub gts: Vec<Vec<Box3D>>,
}

/// Crop, voxelize and build targets for scenes in batch order.
pub fn make_batch(scenes: &[Scene], model: &Detector) -> Result<Batch> {
    let grid = &model.cfg.grid;
    let geom = model.cfg.geometry();
    let codec = model.codec();
    let mut vols = Vec::with_capacity(scenes.len());
    let mut targets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let s = crop_to_range(s.clone(), grid);
        vols.push(voxelize(&s.cloud, grid)?);
        targets.push(build_targets(&s.gt_boxes, model.cfg.num_classes, &geom, &codec));
        gts.push(s.gt_boxes);
    }
    Ok(Batch {
        input: SparseVolume::batch(&vols),
        targets,
        gts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!("{},{:e},{},{},{},{},{}", self.step, self.lr, l.cls, l.boxes, l.iou, l.sem, l.total)
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Detector,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub schedule: OneCycle,
    /// Steps completed.
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Detector::new(&mut store, &mut rng, ModelConfig::from_config(&cfg)?);
        let opt = AdamW::new(&store, cfg.beta2, cfg.weight_decay);
        let schedule = OneCycle {
            total_steps: cfg.steps,
            lr_max: cfg.lr_max,
            div_factor: cfg.div_factor,
            final_div: cfg.final_div,
            warmup_frac: cfg.warmup_frac,
            beta1_max: cfg.beta1_max,
            beta1_min: cfg.beta1_min,
        };
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            schedule,
            step: 0,
        })
    }

    pub fn grid(&self) -> &VoxelGridSpec {
        &self.model.cfg.grid
    }

    fn augment_config(&self) -> AugmentConfig {
        let c = &self.cfg;
        if !c.augment {
            return AugmentConfig::none();
        }
        AugmentConfig {
            gt_sampling: c.gt_sampling,
            max_paste: c.max_paste,
            flip_prob: c.flip_prob,
            scale_range: (c.scale_range[0], c.scale_range[1]),
            rot_range: (-c.rot_range, c.rot_range),
        }
    }

    /// Randomness of step `s` depends on the seed and `s` only, so a
    /// resumed run replays the same batches.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(step as u64 + 1);
        r
    }

    pub fn sample_batch(&self, data: &Dataset, step: usize) -> Result<Batch> {
        if data.scenes.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let mut rng = self.step_rng(step);
        let aug = self.augment_config();
        let scenes: Vec<Scene> = (0..self.cfg.batch_size)
            .map(|_| {
                let s = data.scenes[rng.random_range(0..data.scenes.len())].clone();
                augment(s, &data.db, &mut rng, &aug)
            })
            .collect();
        make_batch(&scenes, &self.model)
    }

    /// Forward and backward on a batch in training mode; gradients end up
    /// in the store and batch-norm statistics are folded in.
    pub fn compute_gradients(&mut self, batch: &Batch) -> Result<LossValues> {
        let mut f = Fwd::new(&self.store, BnMode::Train);
        let out = self.model.forward(&mut f, &batch.input, self.cfg.iou_detach);
        let samples = self.model.confidence_samples(&f.tape, &out, &batch.gts, self.cfg.conf_samples);
        let losses = self.model.losses(&mut f.tape, &out, &batch.targets, &samples, self.cfg.gamma);
        let values = losses.values(&f.tape);
        let h = &out.heads;
        let outputs_finite = [h.cls, h.offset, h.z, h.size, h.rot_bin, h.rot_res, h.iou, out.adfa.s_logits]
            .iter()
            .all(|&v| f.tape.value(v).all_finite());
        // the focal losses clamp probabilities, which can hide a NaN logit
        if !values.total.is_finite() || !outputs_finite {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grads = f.tape.backward(losses.total)?;
        let updates = std::mem::take(&mut f.bn_updates);
        drop(f);
        self.store.zero_grad();
        grads.accumulate_into(&mut self.store);
        apply_bn_updates(&mut self.store, &updates);
        Ok(values)
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let batch = self.sample_batch(data, self.step)?;
        let loss = self.compute_gradients(&batch)?;
        let grad_norm = clip_grad_norm(&mut self.store, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let h = self.schedule.at(self.step);
        self.opt.step(&mut self.store, h);
        let log = StepLog {
            step: self.step,
            lr: h.lr,
            loss,
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }

    pub fn optim_state(&self) -> OptimState {
        OptimState {
            step: self.step,
            m: self.opt.m.clone(),
            v: self.opt.v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_training(path, &self.store, &self.optim_state())
    }

    /// Restore parameters, and the optimizer state when the checkpoint
    /// carries one.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        if let Some(st) = load_training(path, &mut self.store)? {
            self.step = st.step;
            self.opt.m = st.m;
            self.opt.v = st.v;
            self.opt.steps = st.step;
            self.opt.beta1_prod = (0..st.step).map(|s| self.schedule.at(s).beta1).product();
        }
        Ok(())
    }

    /// Train until `cfg.steps`. With an output directory: writes the config
    /// snapshot, appends to the CSV log and saves checkpoints; a non-finite
    /// loss aborts and leaves the last good checkpoint in place.
    pub fn run(&mut self, data: &Dataset, out_dir: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log_file = match out_dir {
            Some(dir) => Some(self.open_outputs(dir)?),
            None => None,
        };
        let ckpt = out_dir.map(|d| d.join(CKPT_FILE));
        let mut logs = Vec::new();
        while self.step < self.cfg.steps {
            let l = self.train_step(data)?;
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", l.csv()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            if self.cfg.log_every > 0 && (l.step % self.cfg.log_every == 0 || self.step == self.cfg.steps) {
                log::info!(
                    "step {} lr {:.2e} total {:.4} cls {:.4} box {:.4} iou {:.4} sem {:.4}",
                    l.step,
                    l.lr,
                    l.loss.total,
                    l.loss.cls,
                    l.loss.boxes,
                    l.loss.iou,
                    l.loss.sem
                );
            }
            on_step(&l);
            logs.push(l);
            if let Some(p) = &ckpt {
                if self.cfg.ckpt_every > 0 && self.step % self.cfg.ckpt_every == 0 {
                    self.save(p)?;
                }
            }
        }
        if let Some(p) = &ckpt {
            self.save(p)?;
        }
        Ok(logs)
    }

    fn open_outputs(&self, dir: &Path) -> Result<(File, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = dir.join(LOG_FILE);
        let fresh = self.step == 0 || !log_path.exists();
        let mut f = if fresh {
            File::create(&log_path)
        } else {
            OpenOptions::new().append(true).open(&log_path)
        }
        .map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        }
        Ok((f, log_path))
    }

    /// Eval-mode detections for each scene.
    pub fn detect(&self, scenes: &[Scene], mode: ScoreMode) -> Result<Vec<Vec<Detection>>> {
        detect_scenes(&self.model, &self.store, scenes, self.cfg.top_k, self.cfg.mu_cls, mode)
    }
}

/// Run a trained model over scenes a few at a time.
pub fn detect_scenes(
    model: &Detector,
    store: &ParamStore<f32>,
    scenes: &[Scene],
    top_k: usize,
    mu_cls: f64,
    mode: ScoreMode,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(4) {
        let batch = make_batch(chunk, model)?;
        out.extend(model.predict(store, &batch.input, top_k, mu_cls, mode));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> Config {
        let mut c = Config::toy();
        c.backbone_channels = [4, 4, 8, 8];
        c.tower_channels = 8;
        c.c2 = 8;
        c.attention_channels = 4;
        c.head_channels = 8;
        c.steps = 4;
        c.log_every = 0;
        c
    }

    fn data() -> Dataset {
        Dataset::new(synth_scenes(4, &SynthConfig::toy(), 9).unwrap(), 1)
    }

    #[test]
    fn resume_is_deterministic() {
        let data = data();
        let mut a = Trainer::new(small_cfg()).unwrap();
        let la = a.run(&data, None, |_| {}).unwrap();
        assert_eq!(la.len(), 4);

        let dir = tempfile::tempdir().unwrap();
        let mut b = Trainer::new(small_cfg()).unwrap();
        b.cfg.steps = 2;
        b.run(&data, Some(dir.path()), |_| {}).unwrap();
        let mut c = Trainer::new(small_cfg()).unwrap();
        c.resume(&dir.path().join(CKPT_FILE)).unwrap();
        assert_eq!(c.step, 2);
        let lc = c.run(&data, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(lc, la[2..].to_vec());
        for ((_, p), (_, q)) in a.store.iter().zip(c.store.iter()) {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 5);
        let snap = Config::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(snap, small_cfg());
    }

    #[test]
    fn non_finite_loss_keeps_last_checkpoint() {
        let data = data();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.ckpt_every = 1;
        let mut t = Trainer::new(cfg).unwrap();
        t.cfg.steps = 1;
        t.run(&data, Some(dir.path()), |_| {}).unwrap();
        let saved = fs::read(dir.path().join(CKPT_FILE)).unwrap();
        t.cfg.steps = 3;
        let id = t.store.id("head.cls.out.b").unwrap();
        t.store.get_mut(id).value.data[0] = f32::NAN;
        let err = t.run(&data, Some(dir.path()), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1 } | Error::NonFiniteGradient { .. }), "{err}");
        assert_eq!(fs::read(dir.path().join(CKPT_FILE)).unwrap(), saved);
    }
}
