//! Encoder-decoder transformer (plus a prefix-attention decoder-only
//! variant), trained from random initialization.
//!
//! Pre-norm residual blocks, learned absolute position embeddings, GELU
//! MLPs, untied input embedding and output projection. Forward and backward
//! passes are hand-written and generic over the scalar type.

pub mod attention;
pub mod kernels;
mod net;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textenc::{TokenId, TokenSequence, PAD};

pub use net::{DecoderSession, Net};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    /// Desk-scale default; the full-size reference is 2E2D, 16×64 heads,
    /// 512 embedding, 2048 MLP, 2048 input tokens.
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            head_dim: 16,
            embed_dim: 64,
            mlp_dim: 256,
            max_encoder_len: 256,
            max_decoder_len: 8,
            vocab_size: 312,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("embed_dim", self.embed_dim),
            ("mlp_dim", self.mlp_dim),
            ("max_decoder_len", self.max_decoder_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size <= PAD as usize {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the byte and special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn is_decoder_only(&self) -> bool {
        self.encoder_layers == 0
    }

    /// Short layer-split label such as `2E2D`.
    pub fn label(&self) -> String {
        format!("{}E{}D", self.encoder_layers, self.decoder_layers)
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct LnSlots {
    pub gain: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSlots {
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpSlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

/// One residual layer: self-attention, optional cross-attention (decoder
/// layers of the encoder-decoder), MLP.
#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    pub ln_self: LnSlots,
    pub self_attn: AttnSlots,
    pub cross: Option<(LnSlots, AttnSlots)>,
    pub ln_mlp: LnSlots,
    pub mlp: MlpSlots,
}

/// Where every named tensor lives in the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub tok_emb: Slot,
    pub enc_pos: Option<Slot>,
    pub enc_layers: Vec<LayerSlots>,
    pub enc_ln: Option<LnSlots>,
    pub dec_pos: Slot,
    pub dec_layers: Vec<LayerSlots>,
    pub dec_ln: LnSlots,
    pub out_w: Slot,
    pub out_b: Slot,
    pub total: usize,
}

struct Alloc {
    specs: Vec<ParamSpec>,
    next: usize,
}

impl Alloc {
    fn take(&mut self, name: String, shape: &[usize]) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { offset: self.next, len };
        self.next += len;
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), slot });
        slot
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnSlots {
        LnSlots {
            gain: self.take(format!("{prefix}.gain"), &[d]),
            bias: self.take(format!("{prefix}.bias"), &[d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, w: usize) -> AttnSlots {
        AttnSlots {
            wq: self.take(format!("{prefix}.wq"), &[d, w]),
            wk: self.take(format!("{prefix}.wk"), &[d, w]),
            wv: self.take(format!("{prefix}.wv"), &[d, w]),
            wo: self.take(format!("{prefix}.wo"), &[w, d]),
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, m: usize) -> MlpSlots {
        MlpSlots {
            w1: self.take(format!("{prefix}.w1"), &[d, m]),
            b1: self.take(format!("{prefix}.b1"), &[m]),
            w2: self.take(format!("{prefix}.w2"), &[m, d]),
            b2: self.take(format!("{prefix}.b2"), &[d]),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ArchConfig) -> Self {
        let d = cfg.embed_dim;
        let w = cfg.heads * cfg.head_dim;
        let m = cfg.mlp_dim;
        let mut a = Alloc { specs: Vec::new(), next: 0 };
        let tok_emb = a.take("tok_emb".into(), &[cfg.vocab_size, d]);
        let (enc_pos, enc_layers, enc_ln, dec_pos_rows) = if cfg.is_decoder_only() {
            (None, Vec::new(), None, cfg.max_encoder_len + cfg.max_decoder_len)
        } else {
            let pos = a.take("enc.pos".into(), &[cfg.max_encoder_len, d]);
            let layers = (0..cfg.encoder_layers)
                .map(|i| LayerSlots {
                    ln_self: a.ln(&format!("enc.{i}.ln_self"), d),
                    self_attn: a.attn(&format!("enc.{i}.self"), d, w),
                    cross: None,
                    ln_mlp: a.ln(&format!("enc.{i}.ln_mlp"), d),
                    mlp: a.mlp(&format!("enc.{i}.mlp"), d, m),
                })
                .collect();
            let ln = a.ln("enc.ln", d);
            (Some(pos), layers, Some(ln), cfg.max_decoder_len)
        };
        let dec_pos = a.take("dec.pos".into(), &[dec_pos_rows, d]);
        let cross = !cfg.is_decoder_only();
        let dec_layers = (0..cfg.decoder_layers)
            .map(|i| LayerSlots {
                ln_self: a.ln(&format!("dec.{i}.ln_self"), d),
                self_attn: a.attn(&format!("dec.{i}.self"), d, w),
                cross: cross.then(|| {
                    (a.ln(&format!("dec.{i}.ln_cross"), d), a.attn(&format!("dec.{i}.cross"), d, w))
                }),
                ln_mlp: a.ln(&format!("dec.{i}.ln_mlp"), d),
                mlp: a.mlp(&format!("dec.{i}.mlp"), d, m),
            })
            .collect();
        let dec_ln = a.ln("dec.ln", d);
        let out_w = a.take("out.w".into(), &[d, cfg.vocab_size]);
        let out_b = a.take("out.b".into(), &[cfg.vocab_size]);
        Layout {
            total: a.next,
            specs: a.specs,
            tok_emb,
            enc_pos,
            enc_layers,
            enc_ln,
            dec_pos,
            dec_layers,
            dec_ln,
            out_w,
            out_b,
        }
    }
}

/// Flat parameter buffer plus the layout describing it.
#[derive(Clone)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub layout: Layout,
    pub data: Vec<f32>,
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("arch", &self.arch)
            .field("parameter_count", &self.data.len())
            .finish()
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ModelParams {
    pub fn from_data(arch: ArchConfig, data: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if layout.total != data.len() {
            return Err(Error::Config(format!(
                "parameter buffer has {} values, architecture needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { arch, layout, data })
    }

    pub fn parameter_count(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.specs.iter().find(|s| s.name == name).map(|s| &self.data[s.slot.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn net(&self) -> Net<'_, f32> {
        Net::new(&self.arch, &self.layout, &self.data)
    }
}

/// Scaled-normal initialization, deterministic in `cfg.seed`.
pub fn init_model(cfg: &ArchConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = vec![0.0f32; layout.total];
    for spec in &layout.specs {
        let out = &mut data[spec.slot.range()];
        let leaf = spec.name.rsplit('.').next().unwrap_or("");
        match leaf {
            "gain" => out.fill(1.0),
            "bias" | "b1" | "b2" | "b" => out.fill(0.0),
            "tok_emb" | "pos" => {
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (z * 0.1) as f32;
                }
            }
            _ => {
                let fan_in = spec.shape[0] as f64;
                let std = 1.0 / fan_in.sqrt();
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = (z * std) as f32;
                }
            }
        }
    }
    Ok(ModelParams { arch: cfg.clone(), layout, data })
}

/// One training/evaluation batch. Decoder inputs within a batch share a
/// length; `mask` selects the target positions that enter the loss.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub enc: Vec<Vec<TokenId>>,
    pub dec_in: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.enc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enc.is_empty()
    }

    pub fn push(&mut self, enc: Vec<TokenId>, dec_in: Vec<TokenId>, targets: Vec<TokenId>) {
        self.mask.push(vec![true; targets.len()]);
        self.enc.push(enc);
        self.dec_in.push(dec_in);
        self.targets.push(targets);
    }
}

/// Logits `[dec_len × vocab_size]` for a single example.
pub fn forward(params: &ModelParams, enc_ids: &TokenSequence, dec_ids: &TokenSequence) -> Result<Vec<f32>> {
    let net = params.net();
    let out = net.forward(std::slice::from_ref(&enc_ids.ids), std::slice::from_ref(&dec_ids.ids))?;
    Ok(out.logits)
}

/// Mean cross-entropy over masked rows of `logits` (`[n × vocab]`).
pub fn loss(logits: &[f32], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<f32> {
    net::masked_cross_entropy(logits, vocab, targets, mask).map(|(l, _)| l)
}

/// Gradients of the masked mean cross-entropy of `batch`, aligned with
/// `params.data`, plus the loss itself.
pub fn backward(params: &ModelParams, batch: &Batch) -> Result<(f32, Vec<f32>)> {
    params.net().loss_and_grad(batch)
}
