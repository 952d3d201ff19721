//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::backbone::{ModelConfig, PromptMode, VisionAttention};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

pub const SEED_ENV: &str = "PIXELSAIL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    Off,
    On,
    FromFile,
}

impl DistillMode {
    fn name(self) -> &'static str {
        match self {
            DistillMode::Off => "off",
            DistillMode::On => "on",
            DistillMode::FromFile => "from-file",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub distill: DistillMode,
    pub teacher_path: Option<PathBuf>,
    pub teacher_seed: u64,
    /// Square grid side of synthetic m2f-like targets, as a divisor of H.
    pub m2f_stride: usize,
    /// Square grid side of synthetic sam2-like targets, as a divisor of H.
    pub sam2_stride: usize,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            batch_size: 8,
            steps: 100,
            seed: 0,
            weights: LossWeights::default(),
            distill: DistillMode::On,
            teacher_path: None,
            teacher_seed: 0,
            m2f_stride: 4,
            sam2_stride: 16,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// The full task mixture.
    Mixed,
    /// Single-turn instance-template referring samples.
    Toy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synthetic_n: usize,
    pub synthetic_seed: u64,
    pub synthetic_kind: SyntheticKind,
    pub toy_distractors: usize,
    pub p_nonexistent: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic_n: 64,
            synthetic_seed: 1,
            synthetic_kind: SyntheticKind::Mixed,
            toy_distractors: 0,
            p_nonexistent: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tasks: Vec<Task>,
    pub force_seg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::RefSeg, Task::PanopticTemplate, Task::RegionCaption, Task::Mcq, Task::VtRes],
            force_seg: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.image_height" => m.image_height = parse(key, v)?,
            "model.image_width" => m.image_width = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.max_seq_len" => m.max_seq_len = parse(key, v)?,
            "model.num_prompts" => m.num_prompts = parse(key, v)?,
            "model.init_seed" => m.init_seed = parse(key, v)?,
            "model.teacher_m2f_channels" => m.teacher_m2f_channels = parse(key, v)?,
            "model.teacher_sam2_channels" => m.teacher_sam2_channels = parse(key, v)?,
            "model.vision_attention" => {
                m.vision_attention = match v {
                    "full" => VisionAttention::Full,
                    "causal" => VisionAttention::Causal,
                    _ => return Err(Error::config(format!("{key}: expected full or causal, got {v:?}"))),
                }
            }
            "model.prompt_mode" => {
                m.prompt_mode = match v {
                    "injection" => PromptMode::Injection,
                    "pooling" => PromptMode::Pooling,
                    _ => return Err(Error::config(format!("{key}: expected injection or pooling, got {v:?}"))),
                }
            }
            "train.lr" => t.lr = parse(key, v)?,
            "train.warmup_ratio" => t.warmup_ratio = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.alpha" => t.weights.alpha = parse(key, v)?,
            "train.lambda" => t.weights.lambda = parse(key, v)?,
            "train.beta" => t.weights.beta = parse(key, v)?,
            "train.distill" => {
                t.distill = match v {
                    "on" => DistillMode::On,
                    "off" => DistillMode::Off,
                    "from-file" => DistillMode::FromFile,
                    _ => return Err(Error::config(format!("{key}: expected on, off or from-file, got {v:?}"))),
                }
            }
            "train.teacher_path" => t.teacher_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.teacher_seed" => t.teacher_seed = parse(key, v)?,
            "train.m2f_stride" => t.m2f_stride = parse(key, v)?,
            "train.sam2_stride" => t.sam2_stride = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "data.path" => d.path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synthetic_n" => d.synthetic_n = parse(key, v)?,
            "data.synthetic_seed" => d.synthetic_seed = parse(key, v)?,
            "data.synthetic_kind" => {
                d.synthetic_kind = match v {
                    "mixed" => SyntheticKind::Mixed,
                    "toy" => SyntheticKind::Toy,
                    _ => return Err(Error::config(format!("{key}: expected mixed or toy, got {v:?}"))),
                }
            }
            "data.toy_distractors" => d.toy_distractors = parse(key, v)?,
            "data.p_nonexistent" => d.p_nonexistent = parse(key, v)?,
            "eval.tasks" => {
                self.eval.tasks = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Task::parse)
                    .collect::<Result<_>>()?
            }
            "eval.force_seg" => self.eval.force_seg = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("model.image_height", m.image_height.to_string()),
            ("model.image_width", m.image_width.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.num_prompts", m.num_prompts.to_string()),
            ("model.init_seed", m.init_seed.to_string()),
            ("model.teacher_m2f_channels", m.teacher_m2f_channels.to_string()),
            ("model.teacher_sam2_channels", m.teacher_sam2_channels.to_string()),
            (
                "model.vision_attention",
                match m.vision_attention {
                    VisionAttention::Full => "full",
                    VisionAttention::Causal => "causal",
                }
                .into(),
            ),
            (
                "model.prompt_mode",
                match m.prompt_mode {
                    PromptMode::Injection => "injection",
                    PromptMode::Pooling => "pooling",
                }
                .into(),
            ),
            ("train.lr", t.lr.to_string()),
            ("train.warmup_ratio", t.warmup_ratio.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.alpha", t.weights.alpha.to_string()),
            ("train.lambda", t.weights.lambda.to_string()),
            ("train.beta", t.weights.beta.to_string()),
            ("train.distill", t.distill.name().into()),
            ("train.teacher_path", path(&t.teacher_path)),
            ("train.teacher_seed", t.teacher_seed.to_string()),
            ("train.m2f_stride", t.m2f_stride.to_string()),
            ("train.sam2_stride", t.sam2_stride.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("data.path", path(&d.path)),
            ("data.synthetic_n", d.synthetic_n.to_string()),
            ("data.synthetic_seed", d.synthetic_seed.to_string()),
            (
                "data.synthetic_kind",
                match d.synthetic_kind {
                    SyntheticKind::Mixed => "mixed",
                    SyntheticKind::Toy => "toy",
                }
                .into(),
            ),
            ("data.toy_distractors", d.toy_distractors.to_string()),
            ("data.p_nonexistent", d.p_nonexistent.to_string()),
            ("eval.tasks", self.eval.tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")),
            ("eval.force_seg", self.eval.force_seg.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Defaults, then the file, then `overrides` (`key=value`), then the
    /// seed environment variable when present.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = env_seed {
            cfg.set("train.seed", s).map_err(|_| Error::config(format!("{SEED_ENV}={s:?} is not a seed")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) {
            return Err(Error::config(format!("train.warmup_ratio must lie in [0, 1), got {}", t.warmup_ratio)));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if t.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay must be >= 0"));
        }
        t.weights.validate()?;
        let (h, w) = (self.model.image_height, self.model.image_width);
        for (name, s) in [("train.m2f_stride", t.m2f_stride), ("train.sam2_stride", t.sam2_stride)] {
            if s == 0 || h % s != 0 || w % s != 0 {
                return Err(Error::config(format!("{name} = {s} must divide the image size {h}x{w}")));
            }
        }
        if t.distill == DistillMode::FromFile && t.teacher_path.is_none() {
            return Err(Error::config("train.distill = from-file needs train.teacher_path"));
        }
        if self.data.path.is_none() && self.data.synthetic_n == 0 {
            return Err(Error::config("data.synthetic_n must be at least 1 without data.path"));
        }
        if !(0.0..=1.0).contains(&self.data.p_nonexistent) {
            return Err(Error::config("data.p_nonexistent must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.002").unwrap();
        cfg.set("eval.tasks", "refseg, mcq").unwrap();
        cfg.set("data.path", "x/y.jsonl").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_and_errors() {
        let cfg = RunConfig::load(None, &["train.seed=3".into()], Some("9")).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert!(RunConfig::load(None, &["train.lr=0".into()], None).is_err());
        assert!(RunConfig::load(None, &["bogus.key=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["train.warmup_ratio=1".into()], None).is_err());
        assert!(RunConfig::from_text("train.lr 3").is_err());
    }
}
