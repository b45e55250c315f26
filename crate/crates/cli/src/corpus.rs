//! JSONL corpora with base64 PNG images.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use uniseq_core::tasks::{
    make_detection_sample, make_mim_sample, make_mlm_sample, make_prompted_sample, ImageSpec, Sample, TaskKind,
    TaskRecord,
};
use uniseq_core::tokenization::{BoundingBox, ImageRaster, UnifiedVocab};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAnnotation {
    /// `[x1, y1, x2, y2]` normalized to the image size.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Base64-encoded PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<ObjectAnnotation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli_label: Option<String>,
}

pub fn valid_task_names() -> String {
    TaskKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
}

pub fn parse_task(name: &str) -> CliResult<TaskKind> {
    TaskKind::parse(name).ok_or_else(|| CliError::usage(format!("unknown task {name:?}; valid tasks: {}", valid_task_names())))
}

pub fn encode_png(img: &ImageRaster) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| CliError::data(e.to_string()))?;
        w.write_image_data(img.pixels()).map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes any 8-bit-expandable PNG to RGB or grayscale, dropping alpha.
pub fn decode_png(bytes: &[u8]) -> CliResult<ImageRaster> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| CliError::data(format!("bad png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::data(format!("bad png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => (1, 1),
        _ => (3, 3),
    };
    let mut px = Vec::with_capacity(w * h * channels);
    for chunk in buf[..w * h * src_channels].chunks(src_channels) {
        px.extend_from_slice(&chunk[..keep]);
    }
    Ok(ImageRaster::new(h, w, channels, px)?)
}

pub fn image_to_base64(img: &ImageRaster) -> CliResult<String> {
    Ok(STANDARD.encode(encode_png(img)?))
}

pub fn image_from_base64(s: &str) -> CliResult<ImageRaster> {
    let bytes = STANDARD.decode(s).map_err(|e| CliError::data(format!("bad base64 image: {e}")))?;
    decode_png(&bytes)
}

impl CorpusRecord {
    pub fn kind(&self) -> CliResult<TaskKind> {
        TaskKind::parse(&self.task)
            .ok_or_else(|| CliError::data(format!("unknown task {:?}; valid tasks: {}", self.task, valid_task_names())))
    }

    pub fn decoded_image(&self) -> CliResult<Option<ImageRaster>> {
        self.image.as_deref().map(image_from_base64).transpose()
    }

    pub fn boxes(&self) -> CliResult<Vec<(BoundingBox, String)>> {
        let objs = self.objects.as_ref().ok_or_else(|| CliError::data("missing field objects"))?;
        objs.iter()
            .map(|o| {
                let [x1, y1, x2, y2] = o.bbox;
                Ok((BoundingBox::new(x1, y1, x2, y2)?, o.label.clone()))
            })
            .collect()
    }

    fn required(&self, kind: TaskKind) -> Vec<(&'static str, bool)> {
        match kind {
            TaskKind::Caption => vec![("image", self.image.is_some()), ("text", self.text.is_some())],
            TaskKind::Vqa => vec![
                ("image", self.image.is_some()),
                ("question", self.question.is_some()),
                ("answer", self.answer.is_some()),
            ],
            TaskKind::Classification => vec![("image", self.image.is_some()), ("label", self.label.is_some())],
            TaskKind::Mlm => vec![("text", self.text.is_some())],
            TaskKind::Summarization => vec![("text", self.text.is_some()), ("summary", self.summary.is_some())],
            TaskKind::Nli => vec![
                ("premise", self.premise.is_some()),
                ("hypothesis", self.hypothesis.is_some()),
                ("nli_label", self.nli_label.is_some()),
            ],
            TaskKind::Mim => vec![("image", self.image.is_some())],
            TaskKind::Detection => vec![
                ("image", self.image.is_some()),
                ("objects", self.objects.as_ref().is_some_and(|o| !o.is_empty())),
            ],
        }
    }

    /// Checks the task name, required fields, image payload and boxes.
    pub fn validate(&self) -> CliResult<()> {
        let kind = self.kind()?;
        if let Some((name, _)) = self.required(kind).into_iter().find(|(_, present)| !present) {
            return Err(CliError::data(format!("missing field {name} for task {}", kind.name())));
        }
        self.decoded_image()?;
        if self.objects.is_some() {
            self.boxes()?;
        }
        Ok(())
    }

    /// The reference output text for prompted tasks.
    pub fn reference(&self) -> CliResult<String> {
        let kind = self.kind()?;
        let v = match kind {
            TaskKind::Caption => self.text.clone(),
            TaskKind::Vqa => self.answer.clone(),
            TaskKind::Classification => self.label.clone(),
            TaskKind::Summarization => self.summary.clone(),
            TaskKind::Nli => self.nli_label.clone(),
            TaskKind::Mlm => self.text.clone(),
            TaskKind::Mim | TaskKind::Detection => None,
        };
        v.ok_or_else(|| CliError::usage(format!("task {} has no text reference", kind.name())))
    }

    fn task_record(&self) -> CliResult<TaskRecord> {
        Ok(TaskRecord {
            image: self.decoded_image()?,
            text: self.text.clone(),
            question: self.question.clone(),
            answer: self.answer.clone(),
            label: self.label.clone(),
            summary: self.summary.clone(),
            premise: self.premise.clone(),
            hypothesis: self.hypothesis.clone(),
            nli_label: self.nli_label.clone(),
        })
    }

    /// Training sample with instruction-templated source and target.
    pub fn to_sample(&self, vocab: &UnifiedVocab, spec: &ImageSpec, mask_rate: f64, rng: &mut impl Rng) -> CliResult<Sample> {
        let kind = self.kind()?;
        let sample = match kind {
            TaskKind::Mlm => {
                make_mlm_sample(self.text.as_deref().ok_or_else(|| CliError::data("missing field text"))?, vocab, mask_rate, rng)?
            }
            TaskKind::Mim => {
                let img = self.decoded_image()?.ok_or_else(|| CliError::data("missing field image"))?;
                make_mim_sample(&img, vocab, spec)?
            }
            TaskKind::Detection => {
                let img = self.decoded_image()?.ok_or_else(|| CliError::data("missing field image"))?;
                make_detection_sample(&img, &self.boxes()?, vocab, spec)?
            }
            _ => make_prompted_sample(kind, &self.task_record()?, vocab, spec)?,
        };
        Ok(sample)
    }

    /// Source side only; target fields may be absent.
    pub fn to_source(&self, vocab: &UnifiedVocab, spec: &ImageSpec, mask_rate: f64, rng: &mut impl Rng) -> CliResult<Sample> {
        let mut r = self.clone();
        match r.kind()? {
            TaskKind::Caption => {
                r.text.get_or_insert_with(String::new);
            }
            TaskKind::Vqa => {
                r.answer.get_or_insert_with(String::new);
            }
            TaskKind::Classification => {
                r.label.get_or_insert_with(String::new);
            }
            TaskKind::Summarization => {
                r.summary.get_or_insert_with(String::new);
            }
            TaskKind::Nli => {
                r.nli_label.get_or_insert_with(String::new);
            }
            TaskKind::Detection => {
                if r.objects.as_ref().is_none_or(|o| o.is_empty()) {
                    r.objects = Some(vec![ObjectAnnotation { bbox: [0.0, 0.0, 1.0, 1.0], label: String::new() }]);
                }
            }
            TaskKind::Mlm | TaskKind::Mim => {}
        }
        r.to_sample(vocab, spec, mask_rate, rng)
    }
}

pub fn parse_corpus(text: &str) -> CliResult<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(line).map_err(|e| CliError::data(format!("record {i}: {e}")))?;
        rec.validate().map_err(|e| e.context(format!("record {i}")))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads and validates every record; errors name the zero-based record index.
pub fn load_corpus(path: &Path) -> CliResult<Vec<CorpusRecord>> {
    let f = fs::File::open(path).map_err(|e| CliError::data(format!("cannot read corpus {}: {e}", path.display())))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_corpus(&text)
}

pub fn to_jsonl(records: &[CorpusRecord]) -> CliResult<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}
