//! Parameter layout and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::Mat;

use super::config::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LnIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    /// Positional query/key projections; absent for cross-attention.
    pub pos_q: Option<usize>,
    pub pos_k: Option<usize>,
    /// `1 x heads` per-head output scale.
    pub head_scale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIds {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub mid_ln: LnIds,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub attn_ln: LnIds,
    pub attn: AttnIds,
    pub attn_post_ln: LnIds,
    pub ffn_ln: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_ln: LnIds,
    pub self_attn: AttnIds,
    pub self_post_ln: LnIds,
    pub cross_ln: LnIds,
    pub cross_attn: AttnIds,
    pub cross_post_ln: LnIds,
    pub ffn_ln: LnIds,
    pub ffn: FfnIds,
}

/// Index of every named tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Token embeddings, tied to the output projection.
    pub embed: usize,
    pub text_pos: usize,
    pub patch_pos: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    /// `text_rel_buckets x heads`, shared by every text/decoder self-attention.
    pub rel_text: usize,
    /// `patch_rel_buckets^2 x heads`, shared by every encoder layer.
    pub rel_patch: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub enc_final_ln: LnIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub dec_final_ln: LnIds,
}

#[derive(Default)]
struct Registry {
    specs: Vec<(String, usize, usize, Init)>,
}

impl Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push((name, rows, cols, init));
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, width: usize) -> LnIds {
        LnIds {
            gain: self.add(format!("{prefix}.gain"), 1, width, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, width, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, c: &ModelConfig, positional: bool) -> AttnIds {
        let d = c.hidden;
        let mut proj = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), d, d, Init::Normal),
                self.add(format!("{prefix}.{n}.bias"), 1, d, Init::Zeros),
            )
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("out");
        let (pos_q, pos_k) = if positional {
            (
                Some(self.add(format!("{prefix}.pos_q.weight"), d, d, Init::Normal)),
                Some(self.add(format!("{prefix}.pos_k.weight"), d, d, Init::Normal)),
            )
        } else {
            (None, None)
        };
        let head_scale = self.add(format!("{prefix}.head_scale"), 1, c.heads, Init::Ones);
        AttnIds { wq, bq, wk, bk, wv, bv, wo, bo, pos_q, pos_k, head_scale }
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> FfnIds {
        FfnIds {
            fc1_w: self.add(format!("{prefix}.fc1.weight"), c.hidden, c.intermediate, Init::Normal),
            fc1_b: self.add(format!("{prefix}.fc1.bias"), 1, c.intermediate, Init::Zeros),
            mid_ln: self.ln(&format!("{prefix}.mid_ln"), c.intermediate),
            fc2_w: self.add(format!("{prefix}.fc2.weight"), c.intermediate, c.hidden, Init::Normal),
            fc2_b: self.add(format!("{prefix}.fc2.bias"), 1, c.hidden, Init::Zeros),
        }
    }
}

impl Layout {
    fn build(c: &ModelConfig) -> (Self, Vec<(String, usize, usize, Init)>) {
        let mut r = Registry::default();
        let d = c.hidden;
        let embed = r.add("embed.tokens".into(), c.vocab_total, d, Init::Normal);
        let text_pos = r.add("embed.text_positions".into(), c.max_text_positions, d, Init::Normal);
        let patch_pos =
            r.add("embed.patch_positions".into(), c.max_patch_grid * c.max_patch_grid, d, Init::Normal);
        let patch_w = r.add("embed.patch.weight".into(), c.patch_pixels(), d, Init::Normal);
        let patch_b = r.add("embed.patch.bias".into(), 1, d, Init::Zeros);
        let rel_text = r.add("rel_bias.text".into(), c.text_rel_buckets, c.heads, Init::Normal);
        let rel_patch =
            r.add("rel_bias.patch".into(), c.patch_rel_buckets * c.patch_rel_buckets, c.heads, Init::Normal);
        let encoder = (0..c.enc_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayerIds {
                    attn_ln: r.ln(&format!("{p}.attn_ln"), d),
                    attn: r.attn(&format!("{p}.attn"), c, true),
                    attn_post_ln: r.ln(&format!("{p}.attn_post_ln"), d),
                    ffn_ln: r.ln(&format!("{p}.ffn_ln"), d),
                    ffn: r.ffn(&format!("{p}.ffn"), c),
                }
            })
            .collect();
        let enc_final_ln = r.ln("encoder.final_ln", d);
        let decoder = (0..c.dec_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayerIds {
                    self_ln: r.ln(&format!("{p}.self_ln"), d),
                    self_attn: r.attn(&format!("{p}.self_attn"), c, true),
                    self_post_ln: r.ln(&format!("{p}.self_post_ln"), d),
                    cross_ln: r.ln(&format!("{p}.cross_ln"), d),
                    cross_attn: r.attn(&format!("{p}.cross_attn"), c, false),
                    cross_post_ln: r.ln(&format!("{p}.cross_post_ln"), d),
                    ffn_ln: r.ln(&format!("{p}.ffn_ln"), d),
                    ffn: r.ffn(&format!("{p}.ffn"), c),
                }
            })
            .collect();
        let dec_final_ln = r.ln("decoder.final_ln", d);
        let layout = Layout {
            embed,
            text_pos,
            patch_pos,
            patch_w,
            patch_b,
            rel_text,
            rel_patch,
            encoder,
            enc_final_ln,
            decoder,
            dec_final_ln,
        };
        (layout, r.specs)
    }

    /// Every head-scale tensor, encoder first.
    pub fn head_scales(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.encoder.iter().map(|l| l.attn.head_scale).collect();
        for l in &self.decoder {
            out.push(l.self_attn.head_scale);
            out.push(l.cross_attn.head_scale);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl ModelParams {
    /// Normal(0, 0.02^2) weights from a seeded generator; head scales and
    /// layer-norm gains start at one, biases at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, rows, cols, init) in specs {
            let m = match init {
                Init::Normal => Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()),
                Init::Zeros => Mat::zeros(rows, cols),
                Init::Ones => Mat::filled(rows, cols, 1.0),
            };
            names.push(name);
            tensors.push(m);
        }
        Ok(Self { config: config.clone(), layout, names, tensors })
    }

    /// Names and shapes the layout expects, in storage order.
    pub fn expected_shapes(config: &ModelConfig) -> Result<(Layout, Vec<(String, usize, usize)>)> {
        config.validate()?;
        let (layout, specs) = Layout::build(config);
        Ok((layout, specs.into_iter().map(|(n, r, c, _)| (n, r, c)).collect()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect()
    }
}
