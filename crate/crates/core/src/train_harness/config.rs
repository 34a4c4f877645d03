// SPDX-License-Identifier: Apache-2.0

//! Flat `key = value` run configuration. Lists are comma separated, `#`
//! starts a comment, unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::voxel_grid::VoxelGridSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub backbone_channels: [usize; 4],
    pub n_res: usize,
    pub tower_channels: usize,
    pub n_lvl: usize,
    pub c2: usize,
    pub attention_channels: usize,
    pub head_channels: usize,
    pub classes: Vec<String>,
    pub rot_bins: usize,
    pub size_prior: [f64; 3],
    pub gamma: [f64; 5],
    pub conf_samples: usize,
    pub iou_detach: bool,
    pub top_k: usize,
    pub mu_cls: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub warmup_frac: f64,
    pub beta1_max: f64,
    pub beta1_min: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub augment: bool,
    pub gt_sampling: bool,
    pub max_paste: usize,
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    pub rot_range: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("range_min", "detection range lower corner x,y,z (m)"),
    ("range_max", "detection range upper corner x,y,z (m)"),
    ("voxel_size", "voxel edge lengths x,y,z (m)"),
    ("backbone_channels", "sparse backbone stage widths (4 values)"),
    ("n_res", "residual blocks per backbone stage"),
    ("tower_channels", "width of each tower level"),
    ("n_lvl", "plain 3x3 convolutions per tower level"),
    ("c2", "channels of the fused BEV map"),
    ("attention_channels", "hidden width of the attention branch"),
    ("head_channels", "hidden width of each head branch"),
    ("classes", "class names, in class-id order"),
    ("rot_bins", "heading bins"),
    ("size_prior", "initial size-branch bias l,w,h (m)"),
    ("gamma", "box loss weights: offset,z,size,rot,corner"),
    ("conf_samples", "peaks per scene supervising the IoU branch (M)"),
    ("iou_detach", "stop IoU-loss gradients at the head input"),
    ("top_k", "peaks kept at inference"),
    ("mu_cls", "classification score threshold at inference"),
    ("seed", "initialisation and data-order seed"),
    ("steps", "optimizer steps"),
    ("batch_size", "scenes per step"),
    ("lr_max", "peak learning rate"),
    ("div_factor", "initial lr = lr_max / div_factor"),
    ("final_div", "final lr = lr_max / final_div"),
    ("warmup_frac", "fraction of steps spent warming up"),
    ("beta1_max", "AdamW beta1 at the ends of the cycle"),
    ("beta1_min", "AdamW beta1 at peak learning rate"),
    ("beta2", "AdamW beta2"),
    ("weight_decay", "decoupled weight decay"),
    ("grad_clip", "global gradient-norm clip, 0 disables"),
    ("augment", "enable training augmentation"),
    ("gt_sampling", "paste database objects into training scenes"),
    ("max_paste", "objects pasted per scene"),
    ("flip_prob", "probability of mirroring y"),
    ("scale_range", "global scaling range min,max"),
    ("rot_range", "global rotation range +-rad"),
    ("log_every", "steps between log lines"),
    ("ckpt_every", "steps between checkpoints, 0 = end only"),
];

impl Default for Config {
    fn default() -> Self {
        Self {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            voxel_size: [0.05, 0.05, 0.1],
            backbone_channels: [16, 32, 64, 128],
            n_res: 1,
            tower_channels: 128,
            n_lvl: 2,
            c2: 256,
            attention_channels: 128,
            head_channels: 128,
            classes: vec!["Car".into(), "Pedestrian".into(), "Cyclist".into()],
            rot_bins: 12,
            size_prior: [3.9, 1.6, 1.56],
            gamma: [1.0; 5],
            conf_samples: 24,
            iou_detach: false,
            top_k: 50,
            mu_cls: 0.5,
            seed: 0,
            steps: 1000,
            batch_size: 2,
            lr_max: 0.01,
            div_factor: 10.0,
            final_div: 100.0,
            warmup_frac: 0.4,
            beta1_max: 0.95,
            beta1_min: 0.85,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 10.0,
            augment: true,
            gt_sampling: true,
            max_paste: 8,
            flip_prob: 0.5,
            scale_range: [0.95, 1.05],
            rot_range: std::f64::consts::FRAC_PI_4,
            log_every: 10,
            ckpt_every: 0,
        }
    }
}

fn parse_list<const N: usize, V: std::str::FromStr>(key: &str, v: &str) -> Result<[V; N]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::config(key, format!("expected {N} comma-separated values, got {}", parts.len())));
    }
    let vals: Vec<V> = parts
        .iter()
        .map(|p| p.parse::<V>().map_err(|_| Error::config(key, format!("bad value `{p}`"))))
        .collect::<Result<_>>()?;
    vals.try_into().map_err(|_| Error::config(key, "bad list"))
}

fn parse_one<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse::<V>().map_err(|_| Error::config(key, format!("bad value `{v}`")))
}

fn fmt_list<V: std::fmt::Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Desk-scale car-only configuration on a 64 x 64 x 16 grid.
    pub fn toy() -> Self {
        Self {
            range_min: [0.0, -8.0, -3.0],
            range_max: [16.0, 8.0, 1.0],
            voxel_size: [0.25, 0.25, 0.25],
            backbone_channels: [8, 16, 32, 32],
            tower_channels: 32,
            n_lvl: 2,
            c2: 64,
            attention_channels: 32,
            head_channels: 32,
            classes: vec!["Car".into()],
            size_prior: [4.0, 1.65, 1.5],
            gamma: [1.0, 1.0, 1.0, 1.0, 0.1],
            conf_samples: 16,
            top_k: 16,
            mu_cls: 0.3,
            steps: 2000,
            lr_max: 0.003,
            gt_sampling: false,
            rot_range: 0.0,
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.range_min, self.range_max, self.voxel_size)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "range_min" => self.range_min = parse_list(key, v)?,
            "range_max" => self.range_max = parse_list(key, v)?,
            "voxel_size" => self.voxel_size = parse_list(key, v)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, v)?,
            "n_res" => self.n_res = parse_one(key, v)?,
            "tower_channels" => self.tower_channels = parse_one(key, v)?,
            "n_lvl" => self.n_lvl = parse_one(key, v)?,
            "c2" => self.c2 = parse_one(key, v)?,
            "attention_channels" => self.attention_channels = parse_one(key, v)?,
            "head_channels" => self.head_channels = parse_one(key, v)?,
            "classes" => {
                self.classes = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if self.classes.is_empty() {
                    return Err(Error::config(key, "need at least one class"));
                }
            }
            "rot_bins" => {
                self.rot_bins = parse_one(key, v)?;
                if self.rot_bins < 2 {
                    return Err(Error::config(key, "need at least two bins"));
                }
            }
            "size_prior" => self.size_prior = parse_list(key, v)?,
            "gamma" => self.gamma = parse_list(key, v)?,
            "conf_samples" => self.conf_samples = parse_one(key, v)?,
            "iou_detach" => self.iou_detach = parse_one(key, v)?,
            "top_k" => self.top_k = parse_one(key, v)?,
            "mu_cls" => self.mu_cls = parse_one(key, v)?,
            "seed" => self.seed = parse_one(key, v)?,
            "steps" => self.steps = parse_one(key, v)?,
            "batch_size" => {
                self.batch_size = parse_one(key, v)?;
                if self.batch_size == 0 {
                    return Err(Error::config(key, "must be positive"));
                }
            }
            "lr_max" => self.lr_max = parse_one(key, v)?,
            "div_factor" => self.div_factor = parse_one(key, v)?,
            "final_div" => self.final_div = parse_one(key, v)?,
            "warmup_frac" => {
                self.warmup_frac = parse_one(key, v)?;
                if !(0.0..=1.0).contains(&self.warmup_frac) {
                    return Err(Error::config(key, "must lie in [0, 1]"));
                }
            }
            "beta1_max" => self.beta1_max = parse_one(key, v)?,
            "beta1_min" => self.beta1_min = parse_one(key, v)?,
            "beta2" => self.beta2 = parse_one(key, v)?,
            "weight_decay" => self.weight_decay = parse_one(key, v)?,
            "grad_clip" => self.grad_clip = parse_one(key, v)?,
            "augment" => self.augment = parse_one(key, v)?,
            "gt_sampling" => self.gt_sampling = parse_one(key, v)?,
            "max_paste" => self.max_paste = parse_one(key, v)?,
            "flip_prob" => self.flip_prob = parse_one(key, v)?,
            "scale_range" => self.scale_range = parse_list(key, v)?,
            "rot_range" => self.rot_range = parse_one(key, v)?,
            "log_every" => self.log_every = parse_one(key, v)?,
            "ckpt_every" => self.ckpt_every = parse_one(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parse a config; a leading `preset = toy` line starts from
    /// [`Config::toy`] instead of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rest = text;
        let mut cfg = Self::default();
        if let Some(first) = text.lines().find(|l| !l.split('#').next().unwrap_or("").trim().is_empty()) {
            if let Some((k, v)) = first.split('#').next().unwrap_or("").split_once('=') {
                if k.trim() == "preset" {
                    cfg = match v.trim() {
                        "toy" => Self::toy(),
                        "kitti" => Self::default(),
                        other => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
                    };
                    let at = text.find(first).unwrap_or(0) + first.len();
                    rest = &text[at..];
                }
            }
        }
        cfg.apply_text(rest)?;
        cfg.grid()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Full snapshot; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("range_min", fmt_list(&self.range_min));
        kv("range_max", fmt_list(&self.range_max));
        kv("voxel_size", fmt_list(&self.voxel_size));
        kv("backbone_channels", fmt_list(&self.backbone_channels));
        kv("n_res", self.n_res.to_string());
        kv("tower_channels", self.tower_channels.to_string());
        kv("n_lvl", self.n_lvl.to_string());
        kv("c2", self.c2.to_string());
        kv("attention_channels", self.attention_channels.to_string());
        kv("head_channels", self.head_channels.to_string());
        kv("classes", self.classes.join(","));
        kv("rot_bins", self.rot_bins.to_string());
        kv("size_prior", fmt_list(&self.size_prior));
        kv("gamma", fmt_list(&self.gamma));
        kv("conf_samples", self.conf_samples.to_string());
        kv("iou_detach", self.iou_detach.to_string());
        kv("top_k", self.top_k.to_string());
        kv("mu_cls", self.mu_cls.to_string());
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_max", self.lr_max.to_string());
        kv("div_factor", self.div_factor.to_string());
        kv("final_div", self.final_div.to_string());
        kv("warmup_frac", self.warmup_frac.to_string());
        kv("beta1_max", self.beta1_max.to_string());
        kv("beta1_min", self.beta1_min.to_string());
        kv("beta2", self.beta2.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("augment", self.augment.to_string());
        kv("gt_sampling", self.gt_sampling.to_string());
        kv("max_paste", self.max_paste.to_string());
        kv("flip_prob", self.flip_prob.to_string());
        kv("scale_range", fmt_list(&self.scale_range));
        kv("rot_range", self.rot_range.to_string());
        kv("log_every", self.log_every.to_string());
        kv("ckpt_every", self.ckpt_every.to_string());
        s
    }

    /// Whether two configs build the same network.
    pub fn same_architecture(&self, other: &Config) -> bool {
        self.range_min == other.range_min
            && self.range_max == other.range_max
            && self.voxel_size == other.voxel_size
            && self.backbone_channels == other.backbone_channels
            && self.n_res == other.n_res
            && self.tower_channels == other.tower_channels
            && self.n_lvl == other.n_lvl
            && self.c2 == other.c2
            && self.attention_channels == other.attention_channels
            && self.head_channels == other.head_channels
            && self.classes.len() == other.classes.len()
            && self.rot_bins == other.rot_bins
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_keys() {
        for cfg in [Config::default(), Config::toy()] {
            assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        }
        let listed: Vec<&str> = Config::default()
            .to_text()
            .lines()
            .map(|l| l.split('=').next().unwrap().trim().to_string())
            .map(|s| KEYS.iter().find(|(k, _)| *k == s).unwrap().0)
            .collect();
        assert_eq!(listed.len(), KEYS.len());
    }

    #[test]
    fn presets_overrides_and_errors() {
        let c = Config::parse("# toy run\npreset = toy\nsteps = 5 # short\n").unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.grid().unwrap().resolution, [64, 64, 16]);
        let e = Config::parse("lr = 0.1").unwrap_err();
        assert!(e.to_string().contains("lr"), "{e}");
        let e = Config::parse("gamma = 1,2").unwrap_err();
        assert!(e.to_string().contains("gamma"));
        assert!(Config::parse("voxel_size = 0,1,1").is_err());
        assert!(Config::parse("steps").is_err());
    }

    #[test]
    fn full_scale_defaults() {
        let c = Config::default();
        assert_eq!((c.lr_max, c.div_factor, c.weight_decay), (0.01, 10.0, 0.01));
        assert_eq!((c.beta1_max, c.beta1_min), (0.95, 0.85));
        assert_eq!((c.c2, c.mu_cls, c.conf_samples), (256, 0.5, 24));
        assert_eq!(c.grid().unwrap().resolution, [1408, 1600, 40]);
    }
}
