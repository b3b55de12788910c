//! Speech Representation Extractor: a 7-layer strided conv encoder (20 ms hop,
//! 25 ms receptive field) producing frame encodings Z, a bidirectional
//! transformer producing contextual representations C, and a Gumbel-softmax
//! product quantizer producing the targets Q for the contrastive objective.

mod mask;
mod objective;

pub use mask::{sample_mask, MaskSpec};
pub use objective::{
    contrastive_loss, diversity_loss, perplexity_per_codebook, pretrain_step_loss, PretrainStats,
};

use crate::error::{Error, Result};
use crate::optim::Param;
use crate::rng::SplitRng;
use crate::tensor::{compose, Graph, Tensor};

/// Encoder geometry, fixed: 20 ms hop (320 samples), 25 ms receptive field.
pub const CONV_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];
pub const CONV_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
/// Samples per output frame step.
pub const HOP_SAMPLES: usize = 320;
/// Receptive field of one frame in samples.
pub const RECEPTIVE_FIELD: usize = 400;

/// Output frame count of the conv stack, or an error for too-short input
/// (less than one receptive field).
pub fn frame_count(samples: usize) -> Result<usize> {
    if samples < RECEPTIVE_FIELD {
        return Err(Error::dim(format!(
            "input of {samples} samples is shorter than one receptive field ({RECEPTIVE_FIELD})"
        )));
    }
    let mut l = samples;
    for (s, k) in CONV_STRIDES.iter().zip(&CONV_KERNELS) {
        if l < *k {
            return Err(Error::dim(format!(
                "input of {samples} samples too short for the encoder stack"
            )));
        }
        l = (l - k) / s + 1;
    }
    Ok(l)
}

#[derive(Debug, Clone)]
pub struct SREConfig {
    pub conv_channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Codebook groups G.
    pub codebooks: usize,
    /// Entries per codebook V.
    pub codebook_entries: usize,
    /// Quantized target dimension; must equal d_model (C and Q are compared
    /// by cosine) and divide evenly among the codebooks.
    pub code_dim: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    /// Distractors per masked position K.
    pub distractors: usize,
    /// Contrastive temperature kappa.
    pub contrastive_temp: f64,
    pub gumbel_start: f64,
    pub gumbel_min: f64,
    pub gumbel_decay: f64,
    /// Diversity loss weight alpha.
    pub diversity_weight: f64,
    /// L2 weight-decay coefficient on weight matrices / conv kernels.
    pub weight_decay: f64,
}

impl Default for SREConfig {
    fn default() -> Self {
        SREConfig {
            conv_channels: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            codebooks: 2,
            codebook_entries: 64,
            code_dim: 64,
            mask_prob: 0.065,
            mask_span: 4,
            distractors: 32,
            contrastive_temp: 0.1,
            gumbel_start: 2.0,
            gumbel_min: 0.5,
            gumbel_decay: 0.9995,
            diversity_weight: 0.1,
            weight_decay: 1e-4,
        }
    }
}

impl SREConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_channels", self.conv_channels),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("codebooks", self.codebooks),
            ("codebook_entries", self.codebook_entries),
            ("code_dim", self.code_dim),
            ("mask_span", self.mask_span),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("sre.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::param(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.code_dim != self.d_model {
            return Err(Error::param(
                "code_dim must equal d_model (C and Q are compared by cosine)",
            ));
        }
        if self.code_dim % self.codebooks != 0 {
            return Err(Error::param(format!(
                "code_dim {} not divisible into {} codebooks",
                self.code_dim, self.codebooks
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::param("mask_prob must lie in [0, 1]"));
        }
        for (name, v) in [
            ("contrastive_temp", self.contrastive_temp),
            ("gumbel_start", self.gumbel_start),
            ("gumbel_min", self.gumbel_min),
            ("gumbel_decay", self.gumbel_decay),
        ] {
            if v <= 0.0 {
                return Err(Error::param(format!("sre.{name} must be > 0")));
            }
        }
        if self.diversity_weight < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::param("loss weights must be >= 0"));
        }
        Ok(())
    }

    /// Gumbel temperature at a pretraining step.
    pub fn gumbel_temperature(&self, step: u64) -> f64 {
        (self.gumbel_start * self.gumbel_decay.powi(step as i32)).max(self.gumbel_min)
    }
}

struct ConvBlock {
    w: Param,    // [C_out, C_in, K]
    b: Param,    // [C_out]
    ln_g: Param, // [C_out]
    ln_b: Param, // [C_out]
}

struct TransformerLayer {
    ln1_g: Param,
    ln1_b: Param,
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    ln2_g: Param,
    ln2_b: Param,
    ff1_w: Param,
    ff1_b: Param,
    ff2_w: Param,
    ff2_b: Param,
}

struct Quantizer {
    logit_w: Vec<Param>,  // per codebook: [C, V]
    logit_b: Vec<Param>,  // per codebook: [V]
    codebook: Vec<Param>, // per codebook: [V, code_dim / G]
    out_w: Param,         // [code_dim, code_dim]
    out_b: Param,         // [code_dim]
}

/// Quantizer output: frames Q plus the per-frame code selections.
pub struct Quantized {
    /// [B, T, code_dim]
    pub frames: Tensor,
    /// Applied selections, [B*T, G, V]; one-hot rows under hard selection.
    pub code_probs: Tensor,
    /// Noise-free softmax of the codebook logits, [B*T, G, V]; feeds the
    /// diversity loss.
    pub soft_probs: Tensor,
}

pub struct SREModel {
    pub cfg: SREConfig,
    conv: Vec<ConvBlock>,
    proj_w: Param,
    proj_b: Param,
    mask_emb: Param,
    layers: Vec<TransformerLayer>,
    final_ln_g: Param,
    final_ln_b: Param,
    quant: Quantizer,
}

impl SREModel {
    pub fn new(cfg: SREConfig, rng: &SplitRng) -> Result<SREModel> {
        cfg.validate()?;
        let c = cfg.conv_channels;
        let d = cfg.d_model;
        let mut init = rng.split("sre_init");

        let mut conv = Vec::with_capacity(7);
        let mut c_in = 1usize;
        for (i, k) in CONV_KERNELS.iter().enumerate() {
            let scale = (2.0 / (c_in * k) as f64).sqrt();
            conv.push(ConvBlock {
                w: Param::normal(format!("sre.conv{i}.w"), &[c, c_in, *k], scale, &mut init),
                b: Param::zeros(format!("sre.conv{i}.b"), &[c]),
                ln_g: Param::full(format!("sre.conv{i}.ln_g"), &[c], 1.0),
                ln_b: Param::zeros(format!("sre.conv{i}.ln_b"), &[c]),
            });
            c_in = c;
        }

        let lin = |name: String, fan_in: usize, fan_out: usize, init: &mut SplitRng| {
            Param::normal(name, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), init)
        };

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("sre.layer{l}.{s}");
            layers.push(TransformerLayer {
                ln1_g: Param::full(p("ln1_g"), &[d], 1.0),
                ln1_b: Param::zeros(p("ln1_b"), &[d]),
                wq: lin(p("wq"), d, d, &mut init),
                bq: Param::zeros(p("bq"), &[d]),
                wk: lin(p("wk"), d, d, &mut init),
                bk: Param::zeros(p("bk"), &[d]),
                wv: lin(p("wv"), d, d, &mut init),
                bv: Param::zeros(p("bv"), &[d]),
                wo: lin(p("wo"), d, d, &mut init),
                bo: Param::zeros(p("bo"), &[d]),
                ln2_g: Param::full(p("ln2_g"), &[d], 1.0),
                ln2_b: Param::zeros(p("ln2_b"), &[d]),
                ff1_w: lin(p("ff1_w"), d, cfg.ffn_dim, &mut init),
                ff1_b: Param::zeros(p("ff1_b"), &[cfg.ffn_dim]),
                ff2_w: lin(p("ff2_w"), cfg.ffn_dim, d, &mut init),
                ff2_b: Param::zeros(p("ff2_b"), &[d]),
            });
        }

        let entry_dim = cfg.code_dim / cfg.codebooks;
        let v = cfg.codebook_entries;
        let mut logit_w = Vec::new();
        let mut logit_b = Vec::new();
        let mut codebook = Vec::new();
        for gi in 0..cfg.codebooks {
            logit_w.push(lin(format!("sre.quant{gi}.logit_w"), c, v, &mut init));
            logit_b.push(Param::zeros(format!("sre.quant{gi}.logit_b"), &[v]));
            codebook.push(Param::normal(
                format!("sre.quant{gi}.codebook"),
                &[v, entry_dim],
                (1.0 / entry_dim as f64).sqrt(),
                &mut init,
            ));
        }
        let quant = Quantizer {
            logit_w,
            logit_b,
            codebook,
            out_w: lin("sre.quant.out_w".into(), cfg.code_dim, cfg.code_dim, &mut init),
            out_b: Param::zeros("sre.quant.out_b", &[cfg.code_dim]),
        };

        Ok(SREModel {
            proj_w: lin("sre.proj_w".into(), c, d, &mut init),
            proj_b: Param::zeros("sre.proj_b", &[d]),
            mask_emb: Param::normal("sre.mask_emb", &[d], 0.1, &mut init),
            final_ln_g: Param::full("sre.final_ln_g", &[d], 1.0),
            final_ln_b: Param::zeros("sre.final_ln_b", &[d]),
            conv,
            layers,
            quant,
            cfg,
        })
    }

    /// Every trainable parameter, in a fixed order (checkpoint order).
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.conv {
            out.extend([&b.w, &b.b, &b.ln_g, &b.ln_b]);
        }
        out.extend([&self.proj_w, &self.proj_b, &self.mask_emb]);
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.ff1_w, &l.ff1_b, &l.ff2_w, &l.ff2_b,
            ]);
        }
        out.extend([&self.final_ln_g, &self.final_ln_b]);
        for gi in 0..self.quant.logit_w.len() {
            out.extend([
                &self.quant.logit_w[gi],
                &self.quant.logit_b[gi],
                &self.quant.codebook[gi],
            ]);
        }
        out.extend([&self.quant.out_w, &self.quant.out_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.conv {
            out.extend([&mut b.w, &mut b.b, &mut b.ln_g, &mut b.ln_b]);
        }
        out.extend([&mut self.proj_w, &mut self.proj_b, &mut self.mask_emb]);
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g, &mut l.ln1_b, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2_g, &mut l.ln2_b,
                &mut l.ff1_w, &mut l.ff1_b, &mut l.ff2_w, &mut l.ff2_b,
            ]);
        }
        out.extend([&mut self.final_ln_g, &mut self.final_ln_b]);
        for q in self.quant.logit_w.iter_mut() {
            out.push(q);
        }
        for q in self.quant.logit_b.iter_mut() {
            out.push(q);
        }
        for q in self.quant.codebook.iter_mut() {
            out.push(q);
        }
        out.extend([&mut self.quant.out_w, &mut self.quant.out_b]);
        out
    }

    /// Parameters exercised by the fine-tuning forward path (no masking, no
    /// quantizer): conv blocks, input projection, transformer, final norm.
    pub fn finetune_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.conv {
            out.extend([&mut b.w, &mut b.b, &mut b.ln_g, &mut b.ln_b]);
        }
        out.extend([&mut self.proj_w, &mut self.proj_b]);
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g, &mut l.ln1_b, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2_g, &mut l.ln2_b,
                &mut l.ff1_w, &mut l.ff1_b, &mut l.ff2_w, &mut l.ff2_b,
            ]);
        }
        out.extend([&mut self.final_ln_g, &mut self.final_ln_b]);
        out
    }

    /// Weight matrices and conv kernels only; the L2 regularization set.
    pub fn weight_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.conv.iter().map(|b| &b.w).collect();
        out.push(&self.proj_w);
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.ff1_w, &l.ff2_w]);
        }
        for w in &self.quant.logit_w {
            out.push(w);
        }
        out.push(&self.quant.out_w);
        out
    }

    /// Concatenated little-endian bytes of all parameters; freeze checks and
    /// determinism checks compare these.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend(p.raw_bytes());
        }
        out
    }

    /// Conv encoder: waveforms [B, L] -> frame encodings Z [B, T, C].
    pub fn encode_frames(&self, g: &mut Graph, wave: &Tensor) -> Result<Tensor> {
        if wave.shape().len() != 2 {
            return Err(Error::dim("encode_frames expects [B, L] waveforms"));
        }
        let (bsz, l) = (wave.shape()[0], wave.shape()[1]);
        frame_count(l)?; // validates length
        let mut x = g.reshape(wave, &[bsz, 1, l])?;
        let n = self.conv.len();
        for (i, block) in self.conv.iter().enumerate() {
            let y = g.conv1d(&x, &block.w.value, &block.b.value, CONV_STRIDES[i], 0)?;
            let y = g.swap_last2(&y)?; // [B, T_i, C]
            let y = g.layer_norm(&y, &block.ln_g.value, &block.ln_b.value, 1e-5)?;
            // ReLU here: these maps are large and scalar tanh/GELU would
            // dominate the step time; GELU stays in the transformer FFN.
            let y = g.relu(&y)?;
            x = if i + 1 == n { y } else { g.swap_last2(&y)? };
        }
        Ok(x)
    }

    /// Transformer: Z [B, T, C] -> contextual representations C [B, T, d].
    /// Masked positions (flat [B*T] flags) are replaced by the learned mask
    /// embedding after the input projection, before positional encodings.
    pub fn contextualize(
        &self,
        g: &mut Graph,
        z: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        self.contextualize_opts(g, z, mask, true)
    }

    /// `use_positional = false` exposes the permutation-equivariant core for
    /// testing.
    pub fn contextualize_opts(
        &self,
        g: &mut Graph,
        z: &Tensor,
        mask: Option<&[bool]>,
        use_positional: bool,
    ) -> Result<Tensor> {
        if z.shape().len() != 3 {
            return Err(Error::dim("contextualize expects [B, T, C]"));
        }
        let (bsz, t) = (z.shape()[0], z.shape()[1]);
        let mut x = compose::linear_nd(g, z, &self.proj_w.value, &self.proj_b.value)?;
        if let Some(flags) = mask {
            if flags.len() != bsz * t {
                return Err(Error::dim(format!(
                    "mask of {} flags for {} frames",
                    flags.len(),
                    bsz * t
                )));
            }
            x = g.mask_rows(&x, &self.mask_emb.value, flags)?;
        }
        if use_positional {
            x = compose::add_positional(g, &x)?;
        }
        for l in &self.layers {
            let h = g.layer_norm(&x, &l.ln1_g.value, &l.ln1_b.value, 1e-5)?;
            let q = compose::linear_nd(g, &h, &l.wq.value, &l.bq.value)?;
            let k = compose::linear_nd(g, &h, &l.wk.value, &l.bk.value)?;
            let v = compose::linear_nd(g, &h, &l.wv.value, &l.bv.value)?;
            let att = compose::scaled_dot_attention(g, &q, &k, &v, self.cfg.n_heads)?;
            let att = compose::linear_nd(g, &att, &l.wo.value, &l.bo.value)?;
            x = g.add(&x, &att)?;
            let h2 = g.layer_norm(&x, &l.ln2_g.value, &l.ln2_b.value, 1e-5)?;
            let f = compose::linear_nd(g, &h2, &l.ff1_w.value, &l.ff1_b.value)?;
            let f = g.gelu(&f)?;
            let f = compose::linear_nd(g, &f, &l.ff2_w.value, &l.ff2_b.value)?;
            x = g.add(&x, &f)?;
        }
        g.layer_norm(&x, &self.final_ln_g.value, &self.final_ln_b.value, 1e-5)
    }

    /// Product quantizer: Z [B, T, C] -> Q [B, T, code_dim]. Per frame and per
    /// codebook a Gumbel-softmax picks one of V entries (hard one-hot forward
    /// with straight-through gradients when `hard`); the selected entries are
    /// concatenated and linearly projected.
    pub fn quantize(
        &self,
        g: &mut Graph,
        z: &Tensor,
        temperature: f64,
        hard: bool,
        rng: &mut SplitRng,
    ) -> Result<Quantized> {
        if z.shape().len() != 3 {
            return Err(Error::dim("quantize expects [B, T, C]"));
        }
        let (bsz, t, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let rows = bsz * t;
        let v = self.cfg.codebook_entries;
        let flat = g.reshape(z, &[rows, c])?;
        let mut picked = Vec::new();
        let mut sel_3d = Vec::new();
        let mut soft_3d = Vec::new();
        for gi in 0..self.cfg.codebooks {
            let logits = compose::linear(
                g,
                &flat,
                &self.quant.logit_w[gi].value,
                &self.quant.logit_b[gi].value,
            )?;
            let soft = g.softmax(&logits, 1)?;
            let sel = g.gumbel_softmax(&logits, temperature, hard, rng)?;
            picked.push(g.matmul(&sel, &self.quant.codebook[gi].value)?);
            sel_3d.push(g.reshape(&sel, &[rows, 1, v])?);
            soft_3d.push(g.reshape(&soft, &[rows, 1, v])?);
        }
        let cat_refs: Vec<&Tensor> = picked.iter().collect();
        let cat = g.concat(&cat_refs, 1)?;
        let q2 = compose::linear(g, &cat, &self.quant.out_w.value, &self.quant.out_b.value)?;
        let frames = g.reshape(&q2, &[bsz, t, self.cfg.code_dim])?;
        let sel_refs: Vec<&Tensor> = sel_3d.iter().collect();
        let soft_refs: Vec<&Tensor> = soft_3d.iter().collect();
        Ok(Quantized {
            frames,
            code_probs: g.concat(&sel_refs, 1)?,
            soft_probs: g.concat(&soft_refs, 1)?,
        })
    }
}
