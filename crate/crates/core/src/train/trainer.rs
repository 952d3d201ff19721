use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::archive::Archive;
use super::config::{DistillMode, RunConfig, SyntheticKind};
use crate::data::{generate_synthetic_dataset, load_jsonl, prepare_example, toy_referring_set, SampleRecord, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{Example, PixelSail};
use crate::numerics::{adamw_step, cosine_lr, AdamWConfig, AdamWState, Bound, ParamSet, Tape, Tensor};
use crate::objectives::{synthesize_teachers, TeacherFeatures, TeacherKind, TeacherSource};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "step,l_ntp,l_ce,l_dice,l_distill,lr";

/// Batch-mean loss components for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_ntp: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_distill: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_ntp, self.l_ce, self.l_dice, self.l_distill, self.lr
        )
    }
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        height: cfg.model.image_height,
        width: cfg.model.image_width,
        patch_size: cfg.model.patch_size,
        num_prompts: cfg.model.num_prompts,
        p_nonexistent: cfg.data.p_nonexistent,
        ..SynthConfig::default()
    }
}

/// Records named by the data section, plus the directory image paths are
/// relative to.
pub fn load_records(cfg: &RunConfig) -> Result<(Vec<SampleRecord>, Option<PathBuf>)> {
    if let Some(p) = &cfg.data.path {
        let recs = load_jsonl(p)?;
        if recs.is_empty() {
            return Err(Error::data(format!("{} holds no records", p.display())));
        }
        return Ok((recs, p.parent().map(Path::to_path_buf)));
    }
    let sc = synth_config(cfg);
    let recs = match cfg.data.synthetic_kind {
        SyntheticKind::Mixed => generate_synthetic_dataset(cfg.data.synthetic_n, &sc, cfg.data.synthetic_seed)?,
        SyntheticKind::Toy => {
            toy_referring_set(cfg.data.synthetic_n, &sc, cfg.data.synthetic_seed, cfg.data.toy_distractors)?
        }
    };
    Ok((recs, None))
}

/// Teacher archive keys are `"{id}/m2f"` and `"{id}/sam2"`.
pub fn teacher_from_archive(archive: &Archive, id: &str) -> Result<TeacherFeatures> {
    let get = |k: TeacherKind| {
        archive
            .tensors
            .get(&format!("{id}/{}", k.key()))
            .cloned()
            .ok_or_else(|| Error::data(format!("teacher archive has no {} features for {id}", k.key())))
    };
    let t = TeacherFeatures { m2f: get(TeacherKind::M2f)?, sam2: get(TeacherKind::Sam2)?, source: TeacherSource::File };
    t.validate()?;
    Ok(t)
}

/// Synthetic teacher features for every record, as an archive.
pub fn synthesize_teacher_archive(cfg: &RunConfig, records: &[SampleRecord], base: Option<&Path>) -> Result<Archive> {
    let mut a = Archive::default();
    for r in records {
        let img = r.load_image(base)?.to_tensor();
        let t = synth_teacher(cfg, &img)?;
        a.tensors.insert(format!("{}/m2f", r.id), t.m2f);
        a.tensors.insert(format!("{}/sam2", r.id), t.sam2);
    }
    Ok(a)
}

fn synth_teacher(cfg: &RunConfig, image: &Tensor) -> Result<TeacherFeatures> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let t = &cfg.train;
    let m = &cfg.model;
    synthesize_teachers(
        image,
        ((h / t.m2f_stride, w / t.m2f_stride), m.teacher_m2f_channels),
        ((h / t.sam2_stride, w / t.sam2_stride), m.teacher_sam2_channels),
        t.teacher_seed,
    )
}

/// Single-threaded training loop with resumable state.
pub struct Trainer {
    cfg: RunConfig,
    model: PixelSail,
    opt: AdamWState,
    examples: Vec<Example>,
    step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    lr_override: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, records: &[SampleRecord], base: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(Error::data("no training records"));
        }
        let teachers = match cfg.train.distill {
            DistillMode::FromFile => {
                let p = cfg.train.teacher_path.as_ref().expect("validated");
                Some(Archive::load(p)?)
            }
            _ => None,
        };
        let mut examples = Vec::with_capacity(records.len());
        for r in records {
            let teacher = match cfg.train.distill {
                DistillMode::Off => None,
                DistillMode::On => Some(synth_teacher(&cfg, &r.load_image(base)?.to_tensor())?),
                DistillMode::FromFile => Some(teacher_from_archive(teachers.as_ref().expect("loaded"), &r.id)?),
            };
            examples.push(prepare_example(r, &cfg.model, base, teacher)?);
        }
        let model = PixelSail::new(cfg.model.clone())?;
        let opt = AdamWState::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self { cfg, model, opt, examples, step: 0, rng, order, cursor: 0, lr_override: None })
    }

    pub fn model(&self) -> &PixelSail {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.train.batch_size);
        while batch.len() < self.cfg.train.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Loss components and mean gradients over a batch without updating.
    pub fn batch_gradients(&self, batch: &[usize]) -> Result<(StepLog, ParamSet)> {
        let mut acc = self.model.params().zeros_like();
        let (mut ntp, mut ce, mut dice, mut distill) = (0f64, 0f64, 0f64, 0f64);
        for &i in batch {
            let ex = &self.examples[i];
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, self.model.params());
            let parts = self.model.loss(&mut tape, &bound, ex, &self.cfg.train.weights)?;
            ntp += tape.value(parts.ntp).item() as f64;
            ce += tape.value(parts.ce).item() as f64;
            dice += tape.value(parts.dice).item() as f64;
            if let Some(d) = parts.distill {
                distill += tape.value(d).item() as f64;
            }
            let grads = tape.backward(parts.total)?;
            bound.accumulate(&grads, &mut acc);
        }
        let inv = 1.0 / batch.len() as f32;
        for (_, g) in acc.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let n = batch.len() as f64;
        let log = StepLog { step: self.step, l_ntp: ntp / n, l_ce: ce / n, l_dice: dice / n, l_distill: distill / n, lr: 0.0 };
        Ok((log, acc))
    }

    /// Replaces the scheduled rate with a constant, which may be zero.
    /// Not stored in checkpoints.
    pub fn override_learning_rate(&mut self, lr: Option<f64>) {
        self.lr_override = lr;
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if let Some(lr) = self.lr_override {
            return lr;
        }
        cosine_lr(step, self.cfg.train.steps, self.cfg.train.warmup_ratio, self.cfg.train.lr)
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let batch = self.next_batch();
        let (mut log, grads) = self.batch_gradients(&batch)?;
        log.lr = self.learning_rate(self.step);
        let oc = AdamWConfig { weight_decay: self.cfg.train.weight_decay, ..AdamWConfig::default() };
        adamw_step(self.model.params_mut(), &grads, &mut self.opt, &oc, log.lr)?;
        self.step += 1;
        Ok(log)
    }

    /// Runs until `cfg.train.steps` or `until`, whichever is first.
    pub fn run(&mut self, until: Option<usize>, mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>) -> Result<Vec<StepLog>> {
        let end = until.unwrap_or(self.cfg.train.steps).min(self.cfg.train.steps);
        let mut logs = Vec::new();
        while self.step < end {
            let log = self.train_step()?;
            on_step(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        a.meta.push(("version".into(), CHECKPOINT_VERSION.to_string()));
        a.meta.push(("step".into(), self.step.to_string()));
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        a.meta.push((
            "rng".into(),
            format!("chacha8 {seed} {} {}", self.rng.get_stream(), self.rng.get_word_pos()),
        ));
        a.meta.push(("cursor".into(), self.cursor.to_string()));
        a.meta.push((
            "order".into(),
            self.order.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        ));
        a.meta.push(("adam_t".into(), self.opt.t.to_string()));
        for (k, v) in self.cfg.entries() {
            a.meta.push(("config".into(), format!("{k}={v}")));
        }
        for (name, t) in self.model.params().iter() {
            a.tensors.insert(format!("param/{name}"), t.clone());
        }
        for (name, t) in self.opt.m.iter() {
            a.tensors.insert(format!("adam_m/{name}"), t.clone());
        }
        for (name, t) in self.opt.v.iter() {
            a.tensors.insert(format!("adam_v/{name}"), t.clone());
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Rebuilds a trainer from `records` and restores parameters, optimizer
    /// moments, sampler state and step count from a checkpoint.
    pub fn resume(cfg: RunConfig, records: &[SampleRecord], base: Option<&Path>, path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let mut t = Self::new(cfg, records, base)?;
        t.restore(&a)?;
        Ok(t)
    }

    fn restore(&mut self, a: &Archive) -> Result<()> {
        let ck = |m: String| Error::checkpoint(m);
        let version = a.meta_value("version").ok_or_else(|| ck("missing version".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(ck(format!("unsupported checkpoint version {version}")));
        }
        let num = |k: &str| -> Result<usize> {
            a.meta_value(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::checkpoint(format!("missing or bad @{k}")))
        };
        let params = load_params(a, &self.cfg)?;
        self.model = PixelSail::from_params(self.cfg.model.clone(), params)?;
        for (prefix, target) in [("adam_m/", &mut self.opt.m), ("adam_v/", &mut self.opt.v)] {
            for (name, slot) in target.iter_mut() {
                let key = format!("{prefix}{name}");
                let t = a.tensors.get(&key).ok_or_else(|| ck(format!("missing {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(ck(format!("{key} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        self.opt.t = num("adam_t")? as u64;
        self.step = num("step")?;
        self.cursor = num("cursor")?;
        let order: Vec<usize> = a
            .meta_value("order")
            .ok_or_else(|| ck("missing @order".into()))?
            .split(',')
            .map(|s| s.parse().map_err(|_| ck(format!("bad order entry {s:?}"))))
            .collect::<Result<_>>()?;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..self.examples.len()).collect::<Vec<_>>() || self.cursor > order.len() {
            return Err(ck("sampler state does not match the dataset".into()));
        }
        self.order = order;
        self.rng = parse_rng(a.meta_value("rng").ok_or_else(|| ck("missing @rng".into()))?)?;
        Ok(())
    }
}

fn parse_rng(s: &str) -> Result<ChaCha8Rng> {
    let bad = || Error::checkpoint(format!("bad rng state {s:?}"));
    let parts: Vec<&str> = s.split(' ').collect();
    if parts.len() != 4 || parts[0] != "chacha8" || parts[1].len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&parts[1][2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parts[2].parse().map_err(|_| bad())?);
    rng.set_word_pos(parts[3].parse().map_err(|_| bad())?);
    Ok(rng)
}

/// Model parameters stored under `param/` in a checkpoint, checked against
/// the configured shapes.
pub fn load_params(a: &Archive, cfg: &RunConfig) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for (name, t) in &a.tensors {
        if let Some(n) = name.strip_prefix("param/") {
            ps.insert(n, t.clone());
        }
    }
    crate::model::check_compatible(&crate::backbone::init_params(&cfg.model)?, &ps)?;
    Ok(ps)
}

/// Configuration snapshot stored in a checkpoint.
pub fn checkpoint_config(a: &Archive) -> Result<RunConfig> {
    let mut text = String::new();
    for (k, v) in &a.meta {
        if k == "config" {
            let _ = writeln!(text, "{}", v.replacen('=', " = ", 1));
        }
    }
    RunConfig::from_text(&text).map_err(|e| Error::checkpoint(format!("config snapshot: {e}")))
}

/// Loads a model from a checkpoint using `cfg` for shapes.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<PixelSail> {
    let a = Archive::load(path)?;
    PixelSail::from_params(cfg.model.clone(), load_params(&a, cfg)?)
}
