use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ciou, extract_choice, giou, mcq_accuracy, meteor_lite, perbench_overall};
use crate::data::{count_seg, Image, SampleRecord, Task};
use crate::error::{Error, Result};
use crate::grounding::VisualPrompt;
use crate::mask::BinaryMask;
use crate::model::PixelSail;

/// Text answer plus one mask per emitted `[SEG]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub text: String,
    pub masks: Vec<BinaryMask>,
}

/// Anything that can answer a question about an image.
pub trait GroundingModel {
    /// With `force_seg`, at least one mask must be returned.
    fn respond(&self, image: &Image, question: &str, prompts: &[VisualPrompt], force_seg: bool) -> Result<Response>;
}

/// Generation budget per answer.
pub const MAX_NEW_TOKENS: usize = 32;

impl GroundingModel for PixelSail {
    fn respond(&self, image: &Image, question: &str, prompts: &[VisualPrompt], force_seg: bool) -> Result<Response> {
        let (g, masks) = self.answer(&image.to_tensor(), question, prompts, MAX_NEW_TOKENS, force_seg)?;
        Ok(Response { text: g.text, masks })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub task: Task,
    pub turn: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub turns: usize,
    pub ciou: Option<f64>,
    pub giou: Option<f64>,
    pub meteor: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Scores in `[0, 1]` except `overall`, which is in `[0, 100]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meteor: f64,
    pub mcq_accuracy: f64,
    pub ciou: f64,
    pub giou: f64,
    pub overall: f64,
    pub per_task: BTreeMap<String, TaskScores>,
    pub samples: Vec<SampleScore>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>8}", "metric", "score");
        let _ = writeln!(s, "{:<20} {:>8.2}", "METEOR", self.meteor * 100.0);
        let _ = writeln!(s, "{:<20} {:>8.2}", "MCQ accuracy", self.mcq_accuracy * 100.0);
        let _ = writeln!(s, "{:<20} {:>8.2}", "cIoU", self.ciou * 100.0);
        let _ = writeln!(s, "{:<20} {:>8.2}", "gIoU", self.giou * 100.0);
        let _ = writeln!(s, "{:<20} {:>8.2}", "overall", self.overall);
        for (task, t) in &self.per_task {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", x * 100.0));
            let _ = writeln!(
                s,
                "{task:<20} turns={} ciou={} giou={} meteor={} acc={}",
                t.turns,
                f(t.ciou),
                f(t.giou),
                f(t.meteor),
                f(t.accuracy)
            );
        }
        if self.skipped > 0 {
            let _ = writeln!(s, "skipped {} records", self.skipped);
        }
        s
    }
}

#[derive(Default)]
struct Acc {
    preds: Vec<BinaryMask>,
    gts: Vec<BinaryMask>,
    meteor: Vec<f64>,
    responses: Vec<String>,
    keys: Vec<char>,
    turns: usize,
}

/// Runs every requested task over the records. Segmentation turns are
/// answered with `[SEG]` forced; missing masks count as empty and extra
/// masks are ignored. Records whose task is not requested are ignored;
/// records that cannot be scored are skipped with a warning.
pub fn run_benchmark(
    model: &dyn GroundingModel,
    records: &[SampleRecord],
    tasks: &[Task],
    base_dir: Option<&Path>,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let mut per: BTreeMap<Task, Acc> = BTreeMap::new();
    for rec in records {
        if !tasks.contains(&rec.task) {
            continue;
        }
        if let Err(e) = rec.validate(None) {
            report.skipped += 1;
            report.warnings.push(e.to_string());
            continue;
        }
        let image = match rec.load_image(base_dir) {
            Ok(i) => i,
            Err(e) => {
                report.skipped += 1;
                report.warnings.push(format!("record {}: {e}", rec.id));
                continue;
            }
        };
        if rec.task == Task::PlainVqa {
            report.skipped += 1;
            report.warnings.push(format!("record {}: task plain-vqa has no benchmark metric", rec.id));
            continue;
        }
        let acc = per.entry(rec.task).or_default();
        let mut mask_cursor = 0;
        for (t, turn) in rec.conversations.iter().enumerate() {
            let k = count_seg(&turn.a);
            let gts = &rec.gt_masks[mask_cursor..mask_cursor + k];
            mask_cursor += k;
            match rec.task {
                Task::RefSeg | Task::PanopticTemplate | Task::VtRes => {
                    if k == 0 {
                        continue;
                    }
                    let r = model.respond(&image, &turn.q, &rec.visual_prompts, true)?;
                    for (i, g) in gts.iter().enumerate() {
                        let p = r.masks.get(i).cloned().unwrap_or_else(|| BinaryMask::zeros(g.height(), g.width()));
                        let (inter, union) = p.overlap(g)?;
                        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                        report.samples.push(SampleScore {
                            id: rec.id.clone(),
                            task: rec.task,
                            turn: t,
                            metric: "iou".into(),
                            value: iou,
                        });
                        acc.preds.push(p);
                        acc.gts.push(g.clone());
                    }
                }
                Task::RegionCaption => {
                    let r = model.respond(&image, &turn.q, &rec.visual_prompts, false)?;
                    let score = meteor_lite(&r.text, &turn.a)?;
                    report.samples.push(SampleScore {
                        id: rec.id.clone(),
                        task: rec.task,
                        turn: t,
                        metric: "meteor".into(),
                        value: score,
                    });
                    acc.meteor.push(score);
                }
                Task::Mcq => {
                    let Some(key) = extract_choice(&turn.a) else {
                        report.warnings.push(format!("record {} turn {t}: reference has no choice letter", rec.id));
                        continue;
                    };
                    let r = model.respond(&image, &turn.q, &rec.visual_prompts, false)?;
                    let correct = extract_choice(&r.text) == Some(key);
                    report.samples.push(SampleScore {
                        id: rec.id.clone(),
                        task: rec.task,
                        turn: t,
                        metric: "correct".into(),
                        value: correct as u8 as f64,
                    });
                    acc.responses.push(r.text);
                    acc.keys.push(key);
                }
                Task::PlainVqa => unreachable!("filtered above"),
            }
            acc.turns += 1;
        }
    }

    let mut all_preds = Vec::new();
    let mut all_gts = Vec::new();
    let mut meteor_all = Vec::new();
    let (mut correct, mut total) = (0.0, 0usize);
    for (task, acc) in per {
        let mut scores = TaskScores { turns: acc.turns, ..Default::default() };
        if !acc.gts.is_empty() {
            scores.ciou = Some(ciou(&acc.preds, &acc.gts)?);
            scores.giou = Some(giou(&acc.preds, &acc.gts)?);
        }
        if !acc.meteor.is_empty() {
            scores.meteor = Some(acc.meteor.iter().sum::<f64>() / acc.meteor.len() as f64);
        }
        if !acc.keys.is_empty() {
            let a = mcq_accuracy(&acc.responses, &acc.keys)?;
            scores.accuracy = Some(a);
            correct += a * acc.keys.len() as f64;
            total += acc.keys.len();
        }
        all_preds.extend(acc.preds);
        all_gts.extend(acc.gts);
        meteor_all.extend(acc.meteor);
        report.per_task.insert(task.name().to_string(), scores);
    }
    if !all_gts.is_empty() {
        report.ciou = ciou(&all_preds, &all_gts)?;
        report.giou = giou(&all_preds, &all_gts)?;
    }
    if !meteor_all.is_empty() {
        report.meteor = meteor_all.iter().sum::<f64>() / meteor_all.len() as f64;
    }
    if total > 0 {
        report.mcq_accuracy = correct / total as f64;
    }
    report.overall = perbench_overall(
        report.meteor * 100.0,
        report.mcq_accuracy * 100.0,
        report.ciou * 100.0,
        report.giou * 100.0,
    )
    .map_err(|e| Error::data(format!("report out of range: {e}")))?;
    Ok(report)
}
