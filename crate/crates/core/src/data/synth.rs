//! Procedural scenes: coloured squares, disks and bars on noise.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::record::{ImageSource, SampleRecord, Task, Turn};
use super::templates::{
    build_instance_template, build_semantic_template, caption_question, instance_question, mcq_answer,
    mcq_question, referring_question, Instance, NONEXISTENT_ANSWER, REFERRING_ANSWER,
};
use crate::backbone::vocab::SEG_TEXT;
use crate::error::{Error, Result};
use crate::grounding::VisualPrompt;
use crate::mask::BinaryMask;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [50, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("purple", [140, 60, 180]),
    ("orange", [240, 140, 30]),
    ("white", [240, 240, 240]),
    ("cyan", [40, 200, 210]),
];

const BACKGROUND_MAX: u8 = 60;
const MAX_TURNS: usize = 5;
const MAX_PROMPTS_PER_IMAGE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Disk,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Bar];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Bar => "bar",
        }
    }
}

/// Pixel geometry; coordinates are in pixel-corner units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    /// Covers pixels whose centres lie within `r` of `(cx, cy)`.
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Geometry {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Geometry::Rect { x0, y0, w, h } => (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y),
            Geometry::Disk { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| self.contains(y, x))
    }

    /// Bounding box `(x0, y0, x1, y1)`, exclusive at the far edge.
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geometry::Rect { x0, y0, w, h } => (x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64),
            Geometry::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: usize,
    pub geometry: Geometry,
    pub mask: BinaryMask,
}

impl SceneObject {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn center(&self) -> (f64, f64) {
        self.mask.center().expect("objects are never empty")
    }

    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
}

fn random_geometry(rng: &mut impl Rng, kind: ShapeKind, h: usize, w: usize) -> Geometry {
    let lim = h.min(w);
    match kind {
        ShapeKind::Square => {
            let s = rng.random_range(lim / 6..=lim * 9 / 32).max(2);
            Geometry::Rect { x0: rng.random_range(0..=w - s), y0: rng.random_range(0..=h - s), w: s, h: s }
        }
        ShapeKind::Disk => {
            let r = rng.random_range(lim / 12..=lim / 7).max(2);
            let cx = rng.random_range(r..=w - r) as f64;
            let cy = rng.random_range(r..=h - r) as f64;
            Geometry::Disk { cx, cy, r: r as f64 }
        }
        ShapeKind::Bar => {
            let long = rng.random_range(lim / 4..=lim * 3 / 8).max(4);
            let short = rng.random_range(lim / 11..=lim / 7).max(2);
            let (bw, bh) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
            Geometry::Rect { x0: rng.random_range(0..=w - bw), y0: rng.random_range(0..=h - bh), w: bw, h: bh }
        }
    }
}

fn separated(a: &Geometry, b: &Geometry) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    let gap = 1.0;
    ax1 + gap <= bx0 || bx1 + gap <= ax0 || ay1 + gap <= by0 || by1 + gap <= ay0
}

/// Noise background with `count` non-touching objects. `distinct` forces
/// every (colour, shape) pair in the scene to be unique.
pub fn render_scene(rng: &mut impl Rng, height: usize, width: usize, count: usize, distinct: bool) -> Result<Scene> {
    if height < 16 || width < 16 {
        return Err(Error::config(format!("scene {height}x{width} is too small to place objects")));
    }
    let mut image = Image::filled(height, width, [0, 0, 0]);
    for y in 0..height {
        for x in 0..width {
            let px = [
                rng.random_range(0..=BACKGROUND_MAX),
                rng.random_range(0..=BACKGROUND_MAX),
                rng.random_range(0..=BACKGROUND_MAX),
            ];
            image.set(y, x, px);
        }
    }
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let color = rng.random_range(0..COLORS.len());
        if distinct && objects.iter().any(|o| o.kind == kind && o.color == color) {
            continue;
        }
        let geometry = random_geometry(rng, kind, height, width);
        if objects.iter().all(|o| separated(&o.geometry, &geometry)) {
            let mask = geometry.rasterize(height, width);
            objects.push(SceneObject { kind, color, geometry, mask });
        }
    }
    if objects.is_empty() {
        return Err(Error::data("could not place any object"));
    }
    for o in &objects {
        for y in 0..height {
            for x in 0..width {
                if o.mask.get(y, x) {
                    image.set(y, x, COLORS[o.color].1);
                }
            }
        }
    }
    Ok(Scene { image, objects })
}

/// Patch-level prompt mask: a patch is on when at least half its pixels
/// are; an otherwise empty result keeps the single best-covered patch.
pub fn patch_mask(mask: &BinaryMask, patch: usize) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("mask {h}x{w} does not tile into {patch}-pixel patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut cover = vec![0usize; gh * gw];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                cover[(y / patch) * gw + x / patch] += 1;
            }
        }
    }
    let half = patch * patch;
    let mut out = BinaryMask::from_fn(gh, gw, |y, x| 2 * cover[y * gw + x] >= half);
    if out.is_empty() {
        let best = (0..cover.len()).fold(0, |b, i| if cover[i] > cover[b] { i } else { b });
        if cover[best] > 0 {
            out.set(best / gw, best % gw, true);
        }
    }
    Ok(out)
}

/// A phrase naming exactly one object in a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Expression {
    pub text: String,
    pub object: usize,
}

/// Every unambiguous phrase the grammar yields for the scene.
pub fn referring_expressions(scene: &Scene) -> Vec<Expression> {
    let objs = &scene.objects;
    let mut out = Vec::new();
    for (i, o) in objs.iter().enumerate() {
        let same_kind: Vec<usize> = (0..objs.len()).filter(|&j| objs[j].kind == o.kind).collect();
        let unique_pair = objs.iter().filter(|p| p.kind == o.kind && p.color == o.color).count() == 1;
        if unique_pair {
            out.push(Expression { text: format!("the {} {}", o.color_name(), o.kind.name()), object: i });
        }
        if objs.iter().filter(|p| p.color == o.color).count() == 1 && objs.len() > 1 {
            out.push(Expression { text: format!("the {} object", o.color_name()), object: i });
        }
        if same_kind.len() >= 2 {
            let c = o.center();
            let extremes: [(&str, fn((f64, f64), (f64, f64)) -> bool); 4] = [
                ("leftmost", |a, b| a.0 < b.0),
                ("rightmost", |a, b| a.0 > b.0),
                ("topmost", |a, b| a.1 < b.1),
                ("bottommost", |a, b| a.1 > b.1),
            ];
            for (word, better) in extremes {
                if same_kind.iter().all(|&j| j == i || better(c, objs[j].center())) {
                    out.push(Expression { text: format!("the {word} {}", o.kind.name()), object: i });
                }
            }
            let a = o.area();
            if same_kind.iter().all(|&j| j == i || objs[j].area() < a) {
                out.push(Expression { text: format!("the largest {}", o.kind.name()), object: i });
            }
            if same_kind.iter().all(|&j| j == i || objs[j].area() > a) {
                out.push(Expression { text: format!("the smallest {}", o.kind.name()), object: i });
            }
        }
    }
    out
}

/// Up to five expressions in random order.
pub fn sample_referring<R: Rng>(pool: &[Expression], rng: &mut R) -> Vec<Expression> {
    let k = pool.len().min(MAX_TURNS);
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect()
}

/// Prompts attached to a random subset of regions.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptDraw {
    /// Sorted by prompt index.
    pub prompts: Vec<VisualPrompt>,
    /// Region index behind each prompt, aligned with `prompts`.
    pub regions: Vec<usize>,
    /// An unattached index to ask about, if one was drawn.
    pub nonexistent: Option<usize>,
}

/// Attaches 1–5 prompts (capped by region and index counts) with distinct
/// random indices, and with probability `p_nonexistent` picks an unused
/// index to ask about.
pub fn sample_visual_prompts<R: Rng>(
    regions: &[BinaryMask],
    patch: usize,
    num_prompts: usize,
    p_nonexistent: f64,
    rng: &mut R,
) -> Result<PromptDraw> {
    if regions.is_empty() {
        return Err(Error::data("visual prompts need at least one region"));
    }
    if num_prompts == 0 {
        return Err(Error::config("no visual prompt tokens are reserved"));
    }
    let cap = regions.len().min(MAX_PROMPTS_PER_IMAGE).min(num_prompts);
    let k = rng.random_range(1..=cap);
    let chosen = sample(rng, regions.len(), k).into_vec();
    let mut indices: Vec<usize> = sample(rng, num_prompts, k).into_iter().map(|i| i + 1).collect();
    let mut pairs: Vec<(usize, usize)> = indices.iter().copied().zip(chosen).collect();
    pairs.sort_unstable();
    let mut prompts = Vec::with_capacity(k);
    let mut region_ids = Vec::with_capacity(k);
    for (index, region) in pairs {
        prompts.push(VisualPrompt::new(index, patch_mask(&regions[region], patch)?));
        region_ids.push(region);
    }
    indices.sort_unstable();
    let unused: Vec<usize> = (1..=num_prompts).filter(|i| indices.binary_search(i).is_err()).collect();
    let nonexistent = if !unused.is_empty() && rng.random_bool(p_nonexistent.clamp(0.0, 1.0)) {
        Some(unused[rng.random_range(0..unused.len())])
    } else {
        None
    };
    Ok(PromptDraw { prompts, regions: region_ids, nonexistent })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub num_prompts: usize,
    pub p_nonexistent: f64,
    pub max_objects: usize,
    /// Task rotation for even-numbered records.
    pub tasks: Vec<Task>,
    /// Interleave a plain-vqa record after every other record.
    pub mix_plain_vqa: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch_size: 8,
            num_prompts: 8,
            p_nonexistent: 0.2,
            max_objects: 4,
            tasks: vec![Task::RefSeg, Task::PanopticTemplate, Task::RegionCaption, Task::Mcq, Task::VtRes],
            mix_plain_vqa: true,
        }
    }
}

fn size_word(area: usize, total: usize) -> &'static str {
    let frac = area as f64 / total as f64;
    if frac < 0.03 {
        "small"
    } else if frac < 0.06 {
        "medium"
    } else {
        "large"
    }
}

fn place_words(center: (f64, f64), h: usize, w: usize) -> String {
    let third = |v: f64, n: usize| ((3.0 * v / n as f64) as usize).min(2);
    let vert = ["top", "middle", "bottom"][third(center.1, h)];
    let horiz = ["left", "center", "right"][third(center.0, w)];
    match (vert, horiz) {
        ("middle", "center") => "the center".to_string(),
        ("middle", hz) => format!("the {hz} side"),
        (v, "center") => format!("the {v}"),
        (v, hz) => format!("the {v} {hz} corner"),
    }
}

/// One-sentence description of an object.
pub fn caption(o: &SceneObject, h: usize, w: usize) -> String {
    format!(
        "A {} {} {} in {} of the image.",
        size_word(o.area(), h * w),
        o.color_name(),
        o.kind.name(),
        place_words(o.center(), h, w)
    )
}

fn number_word(n: usize) -> String {
    ["zero", "one", "two", "three", "four", "five", "six"]
        .get(n)
        .map_or_else(|| n.to_string(), |s| s.to_string())
}

fn record(id: String, scene: &Scene, task: Task, turns: Vec<Turn>, masks: Vec<BinaryMask>, prompts: Vec<VisualPrompt>) -> SampleRecord {
    SampleRecord {
        id,
        image: ImageSource::Inline(scene.image.clone()),
        conversations: turns,
        gt_masks: masks,
        visual_prompts: prompts,
        task,
    }
}

fn object_count(rng: &mut impl Rng, lo: usize, cfg: &SynthConfig) -> usize {
    rng.random_range(lo..=cfg.max_objects.max(lo))
}

fn gen_refseg(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    let n = object_count(rng, 2, cfg);
    let scene = render_scene(rng, cfg.height, cfg.width, n, false)?;
    let pool = referring_expressions(&scene);
    if pool.is_empty() {
        let o = &scene.objects[0];
        let q = instance_question(&format!("{} {}", o.color_name(), o.kind.name()));
        let a = format!("{} {}-1 {SEG_TEXT}", o.color_name(), o.kind.name());
        return Ok(record(id, &scene, Task::RefSeg, vec![Turn::new(q, a)], vec![o.mask.clone()], vec![]));
    }
    let picks = sample_referring(&pool, rng);
    let turns = picks.iter().map(|e| Turn::new(referring_question(&e.text), REFERRING_ANSWER)).collect();
    let masks = picks.iter().map(|e| scene.objects[e.object].mask.clone()).collect();
    Ok(record(id, &scene, Task::RefSeg, turns, masks, vec![]))
}

fn gen_panoptic(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    let n = object_count(rng, 2, cfg);
    let scene = render_scene(rng, cfg.height, cfg.width, n, false)?;
    let mut kinds: Vec<ShapeKind> = ShapeKind::ALL
        .into_iter()
        .filter(|k| scene.objects.iter().any(|o| o.kind == *k))
        .collect();
    kinds.shuffle(rng);
    kinds.truncate(MAX_TURNS);
    let instance_mode = rng.random_bool(0.5);
    let mut turns = Vec::new();
    let mut masks = Vec::new();
    for k in kinds {
        let inst = scene
            .objects
            .iter()
            .filter(|o| o.kind == k)
            .map(|o| Instance { mask: o.mask.clone(), center: o.center() })
            .collect::<Vec<_>>();
        if instance_mode {
            let (q, a, m) = build_instance_template(k.name(), &inst)?;
            turns.push(Turn::new(q, a));
            masks.extend(m);
        } else {
            let (q, a, m) = build_semantic_template(k.name(), &inst)?;
            turns.push(Turn::new(q, a));
            masks.push(m);
        }
    }
    Ok(record(id, &scene, Task::PanopticTemplate, turns, masks, vec![]))
}

fn gen_caption(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    let n = object_count(rng, 1, cfg);
    let scene = render_scene(rng, cfg.height, cfg.width, n, false)?;
    let regions: Vec<BinaryMask> = scene.objects.iter().map(|o| o.mask.clone()).collect();
    let draw = sample_visual_prompts(&regions, cfg.patch_size, cfg.num_prompts, cfg.p_nonexistent, rng)?;
    let mut turns: Vec<Turn> = draw
        .prompts
        .iter()
        .zip(&draw.regions)
        .map(|(p, &r)| Turn::new(caption_question(p.index), caption(&scene.objects[r], cfg.height, cfg.width)))
        .collect();
    if let Some(j) = draw.nonexistent {
        let at = rng.random_range(0..=turns.len());
        turns.insert(at, Turn::new(caption_question(j), NONEXISTENT_ANSWER));
    }
    turns.truncate(MAX_TURNS);
    Ok(record(id, &scene, Task::RegionCaption, turns, vec![], draw.prompts))
}

fn gen_mcq(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    let n = object_count(rng, 1, cfg);
    let scene = render_scene(rng, cfg.height, cfg.width, n, false)?;
    let regions: Vec<BinaryMask> = scene.objects.iter().map(|o| o.mask.clone()).collect();
    let draw = sample_visual_prompts(&regions, cfg.patch_size, cfg.num_prompts, 0.0, rng)?;
    let mut turns = Vec::new();
    for (p, &r) in draw.prompts.iter().zip(&draw.regions) {
        let correct = scene.objects[r].color;
        let mut others: Vec<usize> = (0..COLORS.len()).filter(|&c| c != correct).collect();
        others.shuffle(rng);
        let mut opts = vec![correct, others[0], others[1], others[2]];
        opts.shuffle(rng);
        let key = opts.iter().position(|&c| c == correct).expect("correct option present");
        let names: [String; 4] = std::array::from_fn(|i| COLORS[opts[i]].0.to_string());
        turns.push(Turn::new(mcq_question(p.index, &names), mcq_answer((b'A' + key as u8) as char)));
    }
    Ok(record(id, &scene, Task::Mcq, turns, vec![], draw.prompts))
}

fn gen_vtres(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    let n = object_count(rng, 2, cfg);
    let scene = render_scene(rng, cfg.height, cfg.width, n, true)?;
    let objs = &scene.objects;
    let mut pairs = Vec::new();
    for (t, ot) in objs.iter().enumerate() {
        for (a, oa) in objs.iter().enumerate() {
            if t == a {
                continue;
            }
            let (ct, ca) = (ot.center(), oa.center());
            let margin = cfg.patch_size as f64;
            for (rel, holds) in [
                ("to the left of", ct.0 + margin < ca.0),
                ("to the right of", ct.0 > ca.0 + margin),
                ("above", ct.1 + margin < ca.1),
                ("below", ct.1 > ca.1 + margin),
            ] {
                if holds {
                    pairs.push((t, a, rel));
                }
            }
        }
    }
    let index = rng.random_range(1..=cfg.num_prompts);
    let (turn, target, anchor) = if pairs.is_empty() {
        let a = rng.random_range(0..objs.len());
        (Turn::new(format!("Please segment <VP_{index}>."), REFERRING_ANSWER), a, a)
    } else {
        let (t, a, rel) = pairs[rng.random_range(0..pairs.len())];
        let q = format!(
            "Please segment the {} {} {rel} <VP_{index}>.",
            objs[t].color_name(),
            objs[t].kind.name()
        );
        (Turn::new(q, REFERRING_ANSWER), t, a)
    };
    let prompt = VisualPrompt::new(index, patch_mask(&objs[anchor].mask, cfg.patch_size)?);
    Ok(record(id, &scene, Task::VtRes, vec![turn], vec![objs[target].mask.clone()], vec![prompt]))
}

fn gen_plain(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    let n = object_count(rng, 1, cfg);
    let scene = render_scene(rng, cfg.height, cfg.width, n, false)?;
    let count = scene.objects.len();
    let mut turns = vec![if count == 1 {
        Turn::new("How many objects are there?", "There is one object.")
    } else {
        Turn::new("How many objects are there?", format!("There are {} objects.", number_word(count)))
    }];
    let o = &scene.objects[rng.random_range(0..count)];
    if scene.objects.iter().filter(|p| p.kind == o.kind).count() == 1 {
        turns.push(Turn::new(format!("What color is the {}?", o.kind.name()), format!("It is {}.", o.color_name())));
    }
    turns.shuffle(rng);
    Ok(record(id, &scene, Task::PlainVqa, turns, vec![], vec![]))
}

/// One record of the given task from its own random stream.
pub fn generate_record(task: Task, id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    match task {
        Task::RefSeg => gen_refseg(id, cfg, rng),
        Task::PanopticTemplate => gen_panoptic(id, cfg, rng),
        Task::RegionCaption => gen_caption(id, cfg, rng),
        Task::Mcq => gen_mcq(id, cfg, rng),
        Task::VtRes => gen_vtres(id, cfg, rng),
        Task::PlainVqa => gen_plain(id, cfg, rng),
    }
}

/// Task of record `i`: odd slots are plain-vqa when mixing is on, the
/// rest rotate through `cfg.tasks`.
pub fn task_for_index(i: usize, cfg: &SynthConfig) -> Task {
    if cfg.tasks.is_empty() {
        return Task::PlainVqa;
    }
    if cfg.mix_plain_vqa {
        if i % 2 == 1 {
            Task::PlainVqa
        } else {
            cfg.tasks[(i / 2) % cfg.tasks.len()]
        }
    } else {
        cfg.tasks[i % cfg.tasks.len()]
    }
}

fn record_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// `n` records; record `i` depends only on `(cfg, seed, i)`.
pub fn generate_synthetic_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::config("synthetic dataset size must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let mut rng = record_rng(seed, i);
            generate_record(task_for_index(i, cfg), format!("syn-{seed}-{i:05}"), cfg, &mut rng)
        })
        .collect()
}

/// Single-turn instance-template referring records whose class phrase is
/// a colour and a shape unique in the image.
pub fn toy_referring_set(n: usize, cfg: &SynthConfig, seed: u64, max_distractors: usize) -> Result<Vec<SampleRecord>> {
    (0..n)
        .map(|i| {
            let mut rng = record_rng(seed ^ 0x746f79, i);
            let count = 1 + rng.random_range(0..=max_distractors);
            let scene = render_scene(&mut rng, cfg.height, cfg.width, count, true)?;
            let o = &scene.objects[0];
            let class = format!("{} {}", o.color_name(), o.kind.name());
            let (q, a, masks) = build_instance_template(&class, &[Instance { mask: o.mask.clone(), center: o.center() }])?;
            Ok(record(format!("toy-{seed}-{i:02}"), &scene, Task::RefSeg, vec![Turn::new(q, a)], masks, vec![]))
        })
        .collect()
}
