use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::templates::NONEXISTENT_ANSWER;
use crate::backbone::vocab::SEG_TEXT;
use crate::error::{Error, Result};
use crate::grounding::VisualPrompt;
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "refseg")]
    RefSeg,
    #[serde(rename = "panoptic-template")]
    PanopticTemplate,
    #[serde(rename = "region-caption")]
    RegionCaption,
    #[serde(rename = "mcq")]
    Mcq,
    #[serde(rename = "vt-res")]
    VtRes,
    #[serde(rename = "plain-vqa")]
    PlainVqa,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::RefSeg,
        Task::PanopticTemplate,
        Task::RegionCaption,
        Task::Mcq,
        Task::VtRes,
        Task::PlainVqa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::RefSeg => "refseg",
            Task::PanopticTemplate => "panoptic-template",
            Task::RegionCaption => "region-caption",
            Task::Mcq => "mcq",
            Task::VtRes => "vt-res",
            Task::PlainVqa => "plain-vqa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s}")))
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, Task::RefSeg | Task::PanopticTemplate | Task::VtRes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageSource {
    Path(String),
    Inline(Image),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub q: String,
    pub a: String,
}

impl Turn {
    pub fn new(q: impl Into<String>, a: impl Into<String>) -> Self {
        Self { q: q.into(), a: a.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image: ImageSource,
    pub conversations: Vec<Turn>,
    pub gt_masks: Vec<BinaryMask>,
    pub visual_prompts: Vec<VisualPrompt>,
    pub task: Task,
}

/// Number of literal `[SEG]` markers in a string.
pub fn count_seg(text: &str) -> usize {
    text.matches(SEG_TEXT).count()
}

/// Indices `i` of every well-formed `<VP_i>` in a string.
pub fn referenced_prompts(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find("<VP_") {
        let after = &rest[pos + 4..];
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() && after[digits.len()..].starts_with('>') {
            if let Ok(i) = digits.parse() {
                out.push(i);
            }
        }
        rest = &rest[pos + 4..];
    }
    out
}

impl SampleRecord {
    pub fn seg_count(&self) -> usize {
        self.conversations.iter().map(|t| count_seg(&t.a)).sum()
    }

    /// Loads the image, resolving relative paths against `base`.
    pub fn load_image(&self, base: Option<&Path>) -> Result<Image> {
        match &self.image {
            ImageSource::Inline(img) => Ok(img.clone()),
            ImageSource::Path(p) => {
                let path = Path::new(p);
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.to_path_buf(),
                };
                Image::read_ppm(&full)
            }
        }
    }

    /// Checks the schema invariants; `num_prompts` bounds prompt indices.
    pub fn validate(&self, num_prompts: Option<usize>) -> Result<()> {
        let fail = |msg: String| Err(Error::data(format!("record {:?}: {msg}", self.id)));
        if self.id.is_empty() {
            return Err(Error::data("record with empty id"));
        }
        if self.conversations.is_empty() {
            return fail("no conversation turns".into());
        }
        if let ImageSource::Path(p) = &self.image {
            if p.is_empty() {
                return fail("empty image path".into());
            }
        }
        let segs = self.seg_count();
        if segs != self.gt_masks.len() {
            return fail(format!("{segs} [SEG] markers in answers but {} ground-truth masks", self.gt_masks.len()));
        }
        let dims: BTreeSet<_> = self.gt_masks.iter().map(BinaryMask::dims).collect();
        if dims.len() > 1 {
            return fail(format!("ground-truth masks disagree in size: {dims:?}"));
        }
        if let (ImageSource::Inline(img), Some(&d)) = (&self.image, dims.iter().next()) {
            if d != (img.height(), img.width()) {
                return fail(format!("mask size {d:?} differs from image {}x{}", img.height(), img.width()));
            }
        }
        let mut seen = BTreeSet::new();
        let grids: BTreeSet<_> = self.visual_prompts.iter().map(|p| p.mask.dims()).collect();
        if grids.len() > 1 {
            return fail(format!("visual prompt grids disagree: {grids:?}"));
        }
        for p in &self.visual_prompts {
            if p.index == 0 || num_prompts.is_some_and(|n| p.index > n) {
                return fail(format!("visual prompt index {} out of range", p.index));
            }
            if !seen.insert(p.index) {
                return fail(format!("duplicate visual prompt index {}", p.index));
            }
            if let ImageSource::Inline(img) = &self.image {
                let (gh, gw) = p.mask.dims();
                if gh == 0 || gw == 0 || img.height() % gh != 0 || img.width() % gw != 0 {
                    return fail(format!("prompt grid {gh}x{gw} does not tile the image"));
                }
            }
        }
        for turn in &self.conversations {
            if count_seg(&turn.q) > 0 && self.task == Task::PlainVqa {
                continue;
            }
            let refs: Vec<usize> = referenced_prompts(&turn.q).into_iter().chain(referenced_prompts(&turn.a)).collect();
            for i in refs {
                if !seen.contains(&i) && turn.a != NONEXISTENT_ANSWER {
                    return fail(format!("<VP_{i}> is referenced but has no visual prompt"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&RecordJson::from(self))?)
    }

    pub fn from_json(line: &str) -> Result<Self> {
        let raw: RecordJson = serde_json::from_str(line)?;
        raw.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    id: String,
    image: ImageJson,
    conversations: Vec<Turn>,
    gt_masks: Vec<MaskJson>,
    visual_prompts: Vec<PromptJson>,
    task: Task,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageJson {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    inline: Option<InlineJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InlineJson {
    h: usize,
    w: usize,
    /// Base64 of the planar `3×H×W` bytes.
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskJson {
    h: usize,
    w: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rle: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bits: Option<Vec<Vec<u8>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptJson {
    index: usize,
    grid_h: usize,
    grid_w: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rle: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bits: Option<Vec<Vec<u8>>>,
}

fn mask_from_parts(h: usize, w: usize, rle: Option<Vec<u32>>, bits: Option<Vec<Vec<u8>>>) -> Result<BinaryMask> {
    match (rle, bits) {
        (Some(r), None) => BinaryMask::from_rle(h, w, &r),
        (None, Some(b)) => {
            let m = BinaryMask::from_rows(&b)?;
            if m.dims() != (h, w) && !(h * w == 0 && b.is_empty()) {
                return Err(Error::data(format!("bits are {:?}, header says {h}x{w}", m.dims())));
            }
            Ok(BinaryMask::new(h, w, m.bits().to_vec())?)
        }
        _ => Err(Error::data("mask needs exactly one of rle or bits")),
    }
}

impl From<&SampleRecord> for RecordJson {
    fn from(r: &SampleRecord) -> Self {
        let image = match &r.image {
            ImageSource::Path(p) => ImageJson { path: Some(p.clone()), inline: None },
            ImageSource::Inline(img) => ImageJson {
                path: None,
                inline: Some(InlineJson { h: img.height(), w: img.width(), data: STANDARD.encode(img.data()) }),
            },
        };
        Self {
            id: r.id.clone(),
            image,
            conversations: r.conversations.clone(),
            gt_masks: r
                .gt_masks
                .iter()
                .map(|m| MaskJson { h: m.height(), w: m.width(), rle: Some(m.to_rle()), bits: None })
                .collect(),
            visual_prompts: r
                .visual_prompts
                .iter()
                .map(|p| PromptJson {
                    index: p.index,
                    grid_h: p.mask.height(),
                    grid_w: p.mask.width(),
                    rle: Some(p.mask.to_rle()),
                    bits: None,
                })
                .collect(),
            task: r.task,
        }
    }
}

impl TryFrom<RecordJson> for SampleRecord {
    type Error = Error;

    fn try_from(j: RecordJson) -> Result<Self> {
        let image = match (j.image.path, j.image.inline) {
            (Some(p), None) => ImageSource::Path(p),
            (None, Some(i)) => {
                let bytes = STANDARD
                    .decode(i.data.as_bytes())
                    .map_err(|e| Error::data(format!("inline image is not valid base64: {e}")))?;
                ImageSource::Inline(Image::new(i.h, i.w, bytes)?)
            }
            _ => return Err(Error::data("image needs exactly one of path or inline")),
        };
        let gt_masks = j
            .gt_masks
            .into_iter()
            .map(|m| mask_from_parts(m.h, m.w, m.rle, m.bits))
            .collect::<Result<_>>()?;
        let visual_prompts = j
            .visual_prompts
            .into_iter()
            .map(|p| Ok(VisualPrompt::new(p.index, mask_from_parts(p.grid_h, p.grid_w, p.rle, p.bits)?)))
            .collect::<Result<_>>()?;
        Ok(Self { id: j.id, image, conversations: j.conversations, gt_masks, visual_prompts, task: j.task })
    }
}

/// Parses a JSON list of visual prompts in the record schema
/// (`index`, `grid_h`, `grid_w`, `rle` or `bits`).
pub fn prompts_from_json(text: &str) -> Result<Vec<VisualPrompt>> {
    let raw: Vec<PromptJson> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|p| Ok(VisualPrompt::new(p.index, mask_from_parts(p.grid_h, p.grid_w, p.rle, p.bits)?)))
        .collect()
}

pub fn prompts_to_json(prompts: &[VisualPrompt]) -> Result<String> {
    let raw: Vec<PromptJson> = prompts
        .iter()
        .map(|p| PromptJson {
            index: p.index,
            grid_h: p.mask.height(),
            grid_w: p.mask.width(),
            rle: None,
            bits: Some(p.mask.to_rows()),
        })
        .collect();
    Ok(serde_json::to_string(&raw)?)
}

pub fn save_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", r.to_json()?)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads records; blank lines are skipped and errors carry the 1-based line.
pub fn load_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = SampleRecord::from_json(&line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
