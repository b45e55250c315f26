//! Colored geometric shapes on black backgrounds, with every text field
//! derived from what was drawn.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniseq_core::tasks::{
    mlm_instruction, nli_instruction, summarization_instruction, TaskKind, CAPTION_INSTRUCTION,
    DETECTION_INSTRUCTION, MIM_INSTRUCTION,
};
use uniseq_core::tokenization::{ImageRaster, UnifiedVocab};

use crate::corpus::{image_to_base64, CorpusRecord, ObjectAnnotation};
use crate::error::CliResult;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [(&str, [u8; 3]); 3] = [("red", [220, 40, 40]), ("green", [40, 200, 60]), ("blue", [50, 80, 230])];
pub const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub kind: usize,
    pub color: usize,
    /// Top-left corner and side of the shape's bounding square, in pixels.
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    pub large: bool,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        SHAPES[self.kind]
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn size_name(&self) -> &'static str {
        if self.large {
            "large"
        } else {
            "small"
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.color_name(), self.name())
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (x0, y0, s) = (self.x0 as f64, self.y0 as f64, self.side as f64);
        if px < x0 || py < y0 || px >= x0 + s || py >= y0 + s {
            return false;
        }
        let cx = x0 + s / 2.0;
        match self.kind {
            0 => (px - cx).powi(2) + (py - (y0 + s / 2.0)).powi(2) <= (s / 2.0).powi(2),
            1 => true,
            _ => (px - cx).abs() <= (py - y0) / 2.0,
        }
    }

    /// Normalized `[x1, y1, x2, y2]` of the bounding square.
    pub fn bbox(&self, image_side: usize) -> [f64; 4] {
        let n = image_side as f64;
        [
            self.x0 as f64 / n,
            self.y0 as f64 / n,
            (self.x0 + self.side) as f64 / n,
            (self.y0 + self.side) as f64 / n,
        ]
    }
}

pub fn render(shapes: &[Shape], image_side: usize) -> ImageRaster {
    let mut img = ImageRaster::filled(image_side, image_side, 3, 0).expect("positive side");
    for s in shapes {
        let rgb = COLORS[s.color].1;
        for y in s.y0..(s.y0 + s.side).min(image_side) {
            for x in s.x0..(s.x0 + s.side).min(image_side) {
                if s.covers(x, y) {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(y, x, c, v);
                    }
                }
            }
        }
    }
    img
}

/// Near the middle of `lo..=hi`, within a sixteenth of the span.
fn jittered(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    let (mid, reach) = ((lo + hi) / 2, (hi - lo) / 16);
    rng.gen_range(mid - reach..=mid + reach)
}

/// Random shape whose bounding square lies inside `[lo, hi)` horizontally.
fn random_shape(rng: &mut impl Rng, image_side: usize, lo: usize, hi: usize) -> Shape {
    let large = rng.gen_bool(0.5);
    let max_side = (hi - lo).min(image_side);
    // The two size bands keep the filled area of every size/shape pair disjoint.
    let frac = |f: f64| (f * image_side as f64).round() as usize;
    let side = if large { rng.gen_range(frac(0.46)..=frac(0.52)) } else { rng.gen_range(frac(0.29)..=frac(0.32)) }
        .min(max_side);
    Shape {
        kind: rng.gen_range(0..SHAPES.len()),
        color: rng.gen_range(0..COLORS.len()),
        x0: jittered(rng, lo, hi - side),
        y0: jittered(rng, 0, image_side - side),
        side,
        large,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub records: usize,
    pub seed: u64,
    pub image_side: usize,
    /// Restrict to these tasks, cycled in order; all tasks when empty.
    pub tasks: Vec<TaskKind>,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { records: 100, seed: 0, image_side: 64, tasks: Vec::new() }
    }
}

/// Twelve-record cycle following the default 8:2:1:1 category mix.
fn default_kind(i: usize) -> TaskKind {
    use TaskKind::*;
    const MULTIMODAL: [TaskKind; 8] =
        [Classification, Caption, Classification, Vqa, Classification, Caption, Classification, Classification];
    const TEXT: [TaskKind; 3] = [Mlm, Summarization, Nli];
    let (cycle, slot) = (i / 12, i % 12);
    match slot {
        0..=7 => MULTIMODAL[slot],
        8 | 9 => TEXT[(cycle * 2 + slot - 8) % 3],
        10 => Mim,
        _ => Detection,
    }
}

pub fn generate(opts: &SyntheticOptions) -> CliResult<Vec<CorpusRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let side = opts.image_side;
    let mut out = Vec::with_capacity(opts.records);
    for i in 0..opts.records {
        let kind = if opts.tasks.is_empty() { default_kind(i) } else { opts.tasks[i % opts.tasks.len()] };
        let s = random_shape(&mut rng, side, 0, side);
        let (size, color, shape) = (s.size_name(), s.color_name(), s.name());
        let mut r = CorpusRecord { task: kind.name().to_string(), ..Default::default() };
        match kind {
            TaskKind::Caption => {
                r.image = Some(image_to_base64(&render(&[s], side))?);
                r.text = Some(format!("a {size} {color} {shape}"));
            }
            TaskKind::Classification => {
                r.image = Some(image_to_base64(&render(&[s], side))?);
                r.label = Some(s.label());
            }
            TaskKind::Vqa => {
                r.image = Some(image_to_base64(&render(&[s], side))?);
                let (q, a) = match rng.gen_range(0..3) {
                    0 => ("what color is the shape?".to_string(), color.to_string()),
                    1 => ("what shape is shown?".to_string(), shape.to_string()),
                    _ => {
                        let asked = *SHAPES.choose(&mut rng).expect("nonempty");
                        (format!("is there a {asked}?"), if asked == shape { "yes" } else { "no" }.to_string())
                    }
                };
                r.question = Some(q);
                r.answer = Some(a);
            }
            TaskKind::Mlm => {
                r.text = Some(format!("the {size} {color} {shape} sits on a black background"));
            }
            TaskKind::Summarization => {
                r.text = Some(format!(
                    "the picture contains one {shape}. its color is {color}. it looks {size}. the background is black."
                ));
                r.summary = Some(format!("{size} {color} {shape}"));
            }
            TaskKind::Nli => {
                r.premise = Some(format!("the image shows a {size} {color} {shape}"));
                let which = rng.gen_range(0..3);
                let hypothesis = match which {
                    0 => format!("the shape is {color}"),
                    1 => {
                        let other = COLORS[(s.color + rng.gen_range(1..COLORS.len())) % COLORS.len()].0;
                        format!("the shape is {other}")
                    }
                    _ => "the shape is near the top".to_string(),
                };
                r.hypothesis = Some(hypothesis);
                r.nli_label = Some(NLI_LABELS[which].to_string());
            }
            TaskKind::Mim => {
                r.image = Some(image_to_base64(&render(&[s], side))?);
            }
            TaskKind::Detection => {
                let mut shapes = vec![random_shape(&mut rng, side, 0, side / 2)];
                if rng.gen_bool(0.5) {
                    shapes.push(random_shape(&mut rng, side, side / 2, side));
                }
                r.image = Some(image_to_base64(&render(&shapes, side))?);
                r.objects = Some(
                    shapes.iter().map(|s| ObjectAnnotation { bbox: s.bbox(side), label: s.label() }).collect(),
                );
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Strings the tokenizer is trained on: every instruction and target the
/// records produce.
pub fn vocab_corpus(records: &[CorpusRecord]) -> Vec<String> {
    let mut out = vec![CAPTION_INSTRUCTION.to_string(), MIM_INSTRUCTION.to_string(), DETECTION_INSTRUCTION.to_string()];
    for r in records {
        let fields = [&r.text, &r.question, &r.answer, &r.label, &r.summary, &r.premise, &r.hypothesis, &r.nli_label];
        out.extend(fields.into_iter().flatten().cloned());
        if let Some(objs) = &r.objects {
            out.extend(objs.iter().map(|o| o.label.clone()));
        }
        match r.task.as_str() {
            "mlm" => out.push(mlm_instruction(r.text.as_deref().unwrap_or_default())),
            "summarization" => out.push(summarization_instruction(r.text.as_deref().unwrap_or_default())),
            "nli" => out.push(nli_instruction(
                r.premise.as_deref().unwrap_or_default(),
                r.hypothesis.as_deref().unwrap_or_default(),
            )),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSizes {
    pub text: usize,
    pub location_bins: usize,
    pub visual: usize,
}

impl Default for VocabSizes {
    fn default() -> Self {
        Self { text: 512, location_bins: 64, visual: 16 }
    }
}

pub fn train_vocab(records: &[CorpusRecord], sizes: VocabSizes) -> CliResult<UnifiedVocab> {
    Ok(UnifiedVocab::train(&vocab_corpus(records), sizes.text, sizes.location_bins, sizes.visual)?)
}
