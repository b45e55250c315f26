//! The unified token space: BPE text ids, location ids for box
//! coordinates and visual code ids, laid out in three contiguous ranges.

mod bpe;
mod image;
mod location;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub use bpe::{train_bpe, ALPHABET_SIZE};
pub use image::{
    preprocess_image, ImageRaster, MeanIntensityCodebook, VisualCodebook, CANVAS_SIDE,
    CENTER_SIDE,
};
pub use location::{bin_coordinate, coordinate_bin, BoundingBox};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const SPECIAL_COUNT: usize = 4;
pub(crate) const BYTE_OFFSET: u32 = SPECIAL_COUNT as u32;

/// Rendering of the mask token inside instruction strings.
pub const MASK_TEXT: &str = "<mask>";

const VOCAB_MAGIC: &str = "uniseq-vocab/1";

/// Which of the three id ranges a token falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Location,
    Visual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedVocab {
    text_size: usize,
    location_bins: usize,
    visual_size: usize,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
}

impl UnifiedVocab {
    pub fn new(
        text_size: usize,
        location_bins: usize,
        visual_size: usize,
        merges: Vec<(u32, u32)>,
    ) -> Result<Self> {
        if text_size < ALPHABET_SIZE + merges.len() {
            return Err(Error::Config(format!(
                "text range of {text_size} cannot hold {ALPHABET_SIZE} base tokens and {} merges",
                merges.len()
            )));
        }
        if location_bins == 0 {
            return Err(Error::Config("location range must be nonempty".into()));
        }
        let mut token_bytes: Vec<Vec<u8>> = vec![Vec::new(); SPECIAL_COUNT];
        token_bytes.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let existing = (ALPHABET_SIZE + rank) as u32;
            if l < BYTE_OFFSET || r < BYTE_OFFSET || l >= existing || r >= existing {
                return Err(Error::VocabFormat(format!(
                    "merge {rank} ({l},{r}) references a token that does not exist yet"
                )));
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
            ranks.insert((l, r), rank as u32);
        }
        Ok(Self { text_size, location_bins, visual_size, merges, ranks, token_bytes })
    }

    /// 50265 text + 1000 location + 8192 visual ids.
    pub fn full_preset() -> Self {
        Self::new(50265, 1000, 8192, Vec::new()).expect("preset sizes are valid")
    }

    /// Trains merges on `corpus` to fill the text range.
    pub fn train(
        corpus: &[String],
        text_size: usize,
        location_bins: usize,
        visual_size: usize,
    ) -> Result<Self> {
        let merges = train_bpe(corpus, text_size)?;
        Self::new(text_size, location_bins, visual_size, merges)
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn location_bins(&self) -> usize {
        self.location_bins
    }

    pub fn visual_size(&self) -> usize {
        self.visual_size
    }

    pub fn total(&self) -> usize {
        self.text_size + self.location_bins + self.visual_size
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn location_offset(&self) -> u32 {
        self.text_size as u32
    }

    pub fn visual_offset(&self) -> u32 {
        (self.text_size + self.location_bins) as u32
    }

    pub fn kind_of(&self, id: u32) -> Option<TokenKind> {
        let id = id as usize;
        if id < self.text_size {
            Some(TokenKind::Text)
        } else if id < self.text_size + self.location_bins {
            Some(TokenKind::Location)
        } else if id < self.total() {
            Some(TokenKind::Visual)
        } else {
            None
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        bpe::chunks(text)
            .into_iter()
            .flat_map(|c| bpe::encode_chunk(c, &self.ranks))
            .collect()
    }

    /// Pad/bos/eos render as nothing and the mask token as `<mask>`.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.text_size {
                return Err(Error::NonTextToken(id));
            }
            match id {
                PAD | BOS | EOS => {}
                MASK => bytes.extend_from_slice(MASK_TEXT.as_bytes()),
                _ => match self.token_bytes.get(id as usize) {
                    Some(b) => bytes.extend_from_slice(b),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "text id {id} is not assigned to any merge"
                        )))
                    }
                },
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Quantizes `x1, y1, x2, y2` into four location ids.
    pub fn quantize_bbox(&self, b: &BoundingBox) -> Result<[u32; 4]> {
        b.validate()?;
        let off = self.location_offset();
        let c = b.coords();
        Ok(std::array::from_fn(|i| off + coordinate_bin(c[i], self.location_bins) as u32))
    }

    pub fn dequantize_bbox(&self, ids: &[u32]) -> Result<BoundingBox> {
        if ids.len() != 4 {
            return Err(Error::InvalidArgument(format!("expected 4 location ids, got {}", ids.len())));
        }
        let mut c = [0.0; 4];
        for (slot, &id) in c.iter_mut().zip(ids) {
            if self.kind_of(id) != Some(TokenKind::Location) {
                return Err(Error::NonLocationToken(id));
            }
            *slot = bin_coordinate((id - self.location_offset()) as usize, self.location_bins);
        }
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }

    /// Visual ids for every patch of `region` in raster order, using the
    /// mean-intensity surrogate codebook.
    pub fn quantize_image_patches(&self, region: &ImageRaster, patch_size: usize) -> Result<Vec<u32>> {
        self.quantize_image_patches_with(region, patch_size, &MeanIntensityCodebook::new(self.visual_size))
    }

    pub fn quantize_image_patches_with(
        &self,
        region: &ImageRaster,
        patch_size: usize,
        codebook: &dyn VisualCodebook,
    ) -> Result<Vec<u32>> {
        if codebook.size() != self.visual_size {
            return Err(Error::Config(format!(
                "codebook size {} does not match the visual range {}",
                codebook.size(),
                self.visual_size
            )));
        }
        let off = self.visual_offset();
        Ok(region
            .patches(patch_size)?
            .iter()
            .map(|p| off + codebook.code(p) as u32)
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{VOCAB_MAGIC} {} {} {}\n",
            self.text_size, self.location_bins, self.visual_size
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::VocabFormat("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != VOCAB_MAGIC {
            return Err(Error::VocabFormat(format!("bad header line `{header}`")));
        }
        let size = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::VocabFormat(format!("bad range size `{s}`")))
        };
        let (text_size, location_bins, visual_size) = (size(fields[1])?, size(fields[2])?, size(fields[3])?);
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                _ => return Err(Error::VocabFormat(format!("bad merge on line {}: `{line}`", n + 2))),
            }
        }
        Self::new(text_size, location_bins, visual_size, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
