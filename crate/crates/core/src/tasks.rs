//! Instruction-templated samples and task-mixed batches.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Patch;
use crate::tokenization::{preprocess_image, BoundingBox, ImageRaster, UnifiedVocab, CENTER_SIDE, EOS, MASK};

pub const MIM_INSTRUCTION: &str = "What is the image in the middle part?";
pub const DETECTION_INSTRUCTION: &str = "What are the objects in the image?";
pub const CAPTION_INSTRUCTION: &str = "What does the image describe?";
const MLM_PREFIX: &str = "What is the complete text of \u{201c}";
const MLM_SUFFIX: &str = "\u{201d} ?";

pub fn mlm_instruction(text: &str) -> String {
    format!("{MLM_PREFIX}{text}{MLM_SUFFIX}")
}

pub fn summarization_instruction(text: &str) -> String {
    format!("What is the summary of text \u{2018}{text}\u{2019}?")
}

pub fn nli_instruction(text1: &str, text2: &str) -> String {
    format!("Can text1 \u{2018}{text1}\u{2019} imply text2 \u{2018}{text2}\u{2019}?")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mim,
    Mlm,
    Detection,
    Caption,
    Vqa,
    Classification,
    Summarization,
    Nli,
}

/// Mixing category, in the order the ratio quadruple lists them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Multimodal,
    TextOnly,
    VisionOnly,
    Detection,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Multimodal, Category::TextOnly, Category::VisionOnly, Category::Detection];

    fn slot(self) -> usize {
        self as usize
    }
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Mim,
        TaskKind::Mlm,
        TaskKind::Detection,
        TaskKind::Caption,
        TaskKind::Vqa,
        TaskKind::Classification,
        TaskKind::Summarization,
        TaskKind::Nli,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mim => "mim",
            TaskKind::Mlm => "mlm",
            TaskKind::Detection => "detection",
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
            TaskKind::Classification => "classification",
            TaskKind::Summarization => "summarization",
            TaskKind::Nli => "nli",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn category(self) -> Category {
        match self {
            TaskKind::Caption | TaskKind::Vqa | TaskKind::Classification => Category::Multimodal,
            TaskKind::Mlm | TaskKind::Summarization | TaskKind::Nli => Category::TextOnly,
            TaskKind::Mim => Category::VisionOnly,
            TaskKind::Detection => Category::Detection,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kind: TaskKind,
    /// Where the sample came from; round-robin balancing groups by this tag.
    pub source: String,
    pub instruction: String,
    pub source_text_ids: Vec<u32>,
    pub source_patches: Vec<Patch>,
    pub target_ids: Vec<u32>,
}

/// How images become encoder patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    /// Side the 256x256 canvas is resized to before patching.
    pub encoder_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Patch side used to quantize the 128x128 center into visual codes.
    pub code_patch: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self { encoder_side: 256, patch_size: 8, channels: 3, code_patch: 8 }
    }
}

impl ImageSpec {
    pub fn grid(&self) -> usize {
        self.encoder_side / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_size > 0
            && self.encoder_side.is_multiple_of(self.patch_size)
            && self.encoder_side > 0
            && self.code_patch > 0
            && CENTER_SIDE.is_multiple_of(self.code_patch)
            && (self.channels == 1 || self.channels == 3);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("unusable image spec {self:?}")))
        }
    }
}

fn to_channels(img: &ImageRaster, channels: usize) -> Result<ImageRaster> {
    if img.channels() == channels {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let mut px = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            if channels == 3 {
                let v = img.get(y, x, 0);
                px.extend_from_slice(&[v, v, v]);
            } else {
                let s: u32 = (0..img.channels()).map(|c| img.get(y, x, c) as u32).sum();
                px.push(((s as f64) / img.channels() as f64).round() as u8);
            }
        }
    }
    ImageRaster::new(h, w, channels, px)
}

/// Canvas patches in raster order, none masked.
pub fn image_patches(image: &ImageRaster, spec: &ImageSpec) -> Result<Vec<Patch>> {
    spec.validate()?;
    let (canvas, _) = preprocess_image(image, None)?;
    let canvas = to_channels(&canvas, spec.channels)?.resize_bilinear(spec.encoder_side, spec.encoder_side)?;
    let grid = spec.grid();
    Ok(canvas
        .patches(spec.patch_size)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| Patch {
            pixels: p.pixels().iter().map(|&v| v as f64 / 255.0).collect(),
            row: i / grid,
            col: i % grid,
            masked: false,
        })
        .collect())
}

fn with_eos(mut ids: Vec<u32>) -> Vec<u32> {
    ids.push(EOS);
    ids
}

fn sample(kind: TaskKind, instruction: String, text_ids: Vec<u32>, patches: Vec<Patch>, target: Vec<u32>) -> Sample {
    Sample {
        kind,
        source: kind.name().to_string(),
        instruction,
        source_text_ids: text_ids,
        source_patches: patches,
        target_ids: with_eos(target),
    }
}

/// Replaces exactly `round(mask_rate * n)` independent token positions with the
/// mask token; the target is the uncorrupted text.
pub fn make_mlm_sample(text: &str, vocab: &UnifiedVocab, mask_rate: f64, rng: &mut impl Rng) -> Result<Sample> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::InvalidArgument(format!("mask rate {mask_rate} outside [0, 1]")));
    }
    let ids = vocab.encode_text(text);
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty text".into()));
    }
    let n = ids.len();
    let k = (mask_rate * n as f64).round() as usize;
    let mut masked = ids.clone();
    for i in index::sample(rng, n, k) {
        masked[i] = MASK;
    }
    let mut source = vocab.encode_text(MLM_PREFIX);
    source.extend_from_slice(&masked);
    source.extend(vocab.encode_text(MLM_SUFFIX));
    let instruction = mlm_instruction(&vocab.decode_text(&masked)?);
    Ok(sample(TaskKind::Mlm, instruction, source, Vec::new(), ids))
}

/// Grid cells of the central block: the middle half of the grid on each axis.
pub fn central_block(grid: usize) -> std::ops::Range<usize> {
    let lo = grid / 4;
    lo..grid - lo
}

/// Masks the central block of the canvas patch grid; the target is the
/// surrogate code sequence of the 128x128 center.
pub fn make_mim_sample(image: &ImageRaster, vocab: &UnifiedVocab, spec: &ImageSpec) -> Result<Sample> {
    let mut patches = image_patches(image, spec)?;
    let block = central_block(spec.grid());
    for p in &mut patches {
        if block.contains(&p.row) && block.contains(&p.col) {
            p.masked = true;
            p.pixels.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (_, center) = preprocess_image(image, None)?;
    let codes = vocab.quantize_image_patches(&center, spec.code_patch)?;
    let text = vocab.encode_text(MIM_INSTRUCTION);
    Ok(sample(TaskKind::Mim, MIM_INSTRUCTION.to_string(), text, patches, codes))
}

/// Target: for each object in order, four location ids then the label text.
pub fn make_detection_sample(
    image: &ImageRaster,
    objects: &[(BoundingBox, String)],
    vocab: &UnifiedVocab,
    spec: &ImageSpec,
) -> Result<Sample> {
    let mut target = Vec::new();
    for (b, label) in objects {
        target.extend(vocab.quantize_bbox(b)?);
        target.extend(vocab.encode_text(label));
    }
    let patches = image_patches(image, spec)?;
    let text = vocab.encode_text(DETECTION_INSTRUCTION);
    Ok(sample(TaskKind::Detection, DETECTION_INSTRUCTION.to_string(), text, patches, target))
}

/// Fields a prompted task may draw on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskRecord {
    pub image: Option<ImageRaster>,
    pub text: Option<String>,
    pub question: Option<String>,
    pub answer: Option<String>,
    pub label: Option<String>,
    pub summary: Option<String>,
    pub premise: Option<String>,
    pub hypothesis: Option<String>,
    pub nli_label: Option<String>,
}

fn field<'a, T>(v: &'a Option<T>, name: &'static str) -> Result<&'a T> {
    v.as_ref().ok_or(Error::MissingField(name))
}

/// Caption, classification, VQA, summarization and NLI samples.
pub fn make_prompted_sample(
    kind: TaskKind,
    record: &TaskRecord,
    vocab: &UnifiedVocab,
    spec: &ImageSpec,
) -> Result<Sample> {
    let (instruction, patches, target) = match kind {
        TaskKind::Caption => {
            let img = field(&record.image, "image")?;
            (CAPTION_INSTRUCTION.to_string(), image_patches(img, spec)?, field(&record.text, "text")?)
        }
        TaskKind::Classification => {
            let img = field(&record.image, "image")?;
            (CAPTION_INSTRUCTION.to_string(), image_patches(img, spec)?, field(&record.label, "label")?)
        }
        TaskKind::Vqa => {
            let img = field(&record.image, "image")?;
            let q = field(&record.question, "question")?;
            (q.clone(), image_patches(img, spec)?, field(&record.answer, "answer")?)
        }
        TaskKind::Summarization => {
            let text = field(&record.text, "text")?;
            (summarization_instruction(text), Vec::new(), field(&record.summary, "summary")?)
        }
        TaskKind::Nli => {
            let t1 = field(&record.premise, "premise")?;
            let t2 = field(&record.hypothesis, "hypothesis")?;
            (nli_instruction(t1, t2), Vec::new(), field(&record.nli_label, "nli_label")?)
        }
        other => {
            return Err(Error::InvalidArgument(format!("{} is not a prompted task", other.name())));
        }
    };
    let text = vocab.encode_text(&instruction);
    Ok(sample(kind, instruction, text, patches, vocab.encode_text(target)))
}

/// Keeps a uniform random subset of `keep` patches in their original order.
pub fn subsample_patches(patches: Vec<Patch>, keep: usize, rng: &mut impl Rng) -> Result<Vec<Patch>> {
    if keep == 0 {
        return Err(Error::InvalidArgument("keep must be at least 1".into()));
    }
    if patches.len() <= keep {
        return Ok(patches);
    }
    let mut chosen = index::sample(rng, patches.len(), keep).into_vec();
    chosen.sort_unstable();
    let mut chosen = chosen.into_iter().peekable();
    Ok(patches
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            if chosen.peek() == Some(&i) {
                chosen.next();
                Some(p)
            } else {
                None
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMixConfig {
    /// Multimodal, text-only, vision-only, detection.
    pub ratio: [usize; 4],
    /// Draw multimodal sources round-robin instead of in stream order.
    pub balance: bool,
}

impl Default for TaskMixConfig {
    fn default() -> Self {
        Self { ratio: [8, 2, 1, 1], balance: true }
    }
}

impl TaskMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratio.iter().all(|&r| r == 0) {
            return Err(Error::Config("mix ratio is all zero".into()));
        }
        Ok(())
    }

    /// Exact per-category counts for one batch.
    pub fn counts(&self, batch_size: usize) -> Result<[usize; 4]> {
        self.validate()?;
        let sum: usize = self.ratio.iter().sum();
        if batch_size == 0 || !batch_size.is_multiple_of(sum) {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} is not a positive multiple of the ratio sum {sum}"
            )));
        }
        Ok(self.ratio.map(|r| batch_size / sum * r))
    }
}

/// Endless cyclic queue of samples, optionally stratified by source tag.
#[derive(Debug, Clone, Default)]
pub struct SampleStream {
    groups: Vec<(Vec<Sample>, usize)>,
    tags: HashMap<String, usize>,
    order: Vec<(usize, usize)>,
    cursor: usize,
    turn: usize,
}

impl SampleStream {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut s = Self::default();
        for x in samples {
            s.push(x);
        }
        s
    }

    pub fn push(&mut self, sample: Sample) {
        let next = self.groups.len();
        let g = *self.tags.entry(sample.source.clone()).or_insert(next);
        if g == next {
            self.groups.push((Vec::new(), 0));
        }
        self.order.push((g, self.groups[g].0.len()));
        self.groups[g].0.push(sample);
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Next sample in push order, wrapping around.
    pub fn next_in_order(&mut self) -> Option<Sample> {
        let &(g, i) = self.order.get(self.cursor % self.order.len().max(1))?;
        self.cursor = (self.cursor + 1) % self.order.len();
        Some(self.groups[g].0[i].clone())
    }

    /// Next sample from the next source tag in rotation.
    pub fn next_balanced(&mut self) -> Option<Sample> {
        if self.groups.is_empty() {
            return None;
        }
        let g = self.turn % self.groups.len();
        self.turn = (self.turn + 1) % self.groups.len();
        let (items, cur) = &mut self.groups[g];
        let s = items[*cur].clone();
        *cur = (*cur + 1) % items.len();
        Some(s)
    }
}

/// One stream per mixing category.
#[derive(Debug, Clone, Default)]
pub struct TaskStreams {
    pub streams: [SampleStream; 4],
}

impl TaskStreams {
    pub fn from_samples(samples: impl IntoIterator<Item = Sample>) -> Self {
        let mut out = Self::default();
        for s in samples {
            out.streams[s.kind.category().slot()].push(s);
        }
        out
    }

    pub fn stream(&self, c: Category) -> &SampleStream {
        &self.streams[c.slot()]
    }
}

/// Draws exactly `batch_size * r_k / sum(r)` samples from each category.
pub fn mix_batch(streams: &mut TaskStreams, mix: &TaskMixConfig, batch_size: usize) -> Result<Vec<Sample>> {
    let counts = mix.counts(batch_size)?;
    let names = ["multimodal", "text-only", "vision-only", "detection"];
    let mut batch = Vec::with_capacity(batch_size);
    for (slot, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let stream = &mut streams.streams[slot];
        if stream.is_empty() {
            return Err(Error::InvalidArgument(format!("{} stream is empty", names[slot])));
        }
        let balanced = mix.balance && slot == Category::Multimodal.slot();
        for _ in 0..n {
            let s = if balanced { stream.next_balanced() } else { stream.next_in_order() };
            batch.push(s.expect("non-empty stream"));
        }
    }
    Ok(batch)
}
