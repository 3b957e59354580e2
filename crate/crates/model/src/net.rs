//! The contextual caption generator: prefix-conditioned decoder-only and
//! encoder-decoder configurations built from dynamic-convolution or
//! self-attention blocks, with the token embedding tied to the output
//! projection.
//!
//! Context (image vector, description tokens, section tokens) is embedded as
//! a position-free memory; the caption stream carries sinusoidal positions.
//! In the encoder-decoder configuration the corrupted caption is appended to
//! the encoder input (with positions of its own) and the decoder emits the
//! sentinel-delimited target.

use mnemcap_core::mask::MaskedInstance;
use mnemcap_core::rng::SplitMix64;
use mnemcap_core::tokenize::{BOS, EOS};
use mnemcap_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::layers::*;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DecoderPrefix,
    EncoderDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    DynamicConv,
    SelfAttn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub block: BlockKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel == 0 {
            return Err(Error::InvalidArgument("conv_kernel must be >= 1".into()));
        }
        if self.n_layers == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument("degenerate model config".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn ff_hidden(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamParams<S> {
    Conv(DynConvParams<S>),
    Attn(MhaParams<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockParams<S> {
    pub ln1: LayerNormParams<S>,
    pub stream: StreamParams<S>,
    pub ln2: LayerNormParams<S>,
    pub cross: MhaParams<S>,
    pub ln3: LayerNormParams<S>,
    pub ff: FfParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams<S> {
    pub ln1: LayerNormParams<S>,
    pub attn: MhaParams<S>,
    pub ln2: LayerNormParams<S>,
    pub ff: FfParams<S>,
}

/// All trainable tensors. The embedding doubles as the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub embedding: Mat<S>,
    pub img_w: Mat<S>,
    pub img_b: Mat<S>,
    pub img_ln: LayerNormParams<S>,
    pub encoder: Vec<EncoderBlockParams<S>>,
    pub enc_ln: Option<LayerNormParams<S>>,
    pub decoder: Vec<DecoderBlockParams<S>>,
    pub final_ln: LayerNormParams<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Visit every tensor with a stable name, in a fixed order shared by the
    /// optimizer, the gradient checker, and the checkpoint format. The
    /// references outlive the call, so collecting them is fine.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&str, &'a Mat<S>)) {
        let lin = |f: &mut dyn FnMut(&str, &'a Mat<S>), p: String, l: &'a LinearParams<S>| {
            f(&format!("{p}.w"), &l.w);
            f(&format!("{p}.b"), &l.b);
        };
        let ln = |f: &mut dyn FnMut(&str, &'a Mat<S>), p: String, l: &'a LayerNormParams<S>| {
            f(&format!("{p}.gain"), &l.gain);
            f(&format!("{p}.bias"), &l.bias);
        };
        let mha = |f: &mut dyn FnMut(&str, &'a Mat<S>), p: String, m: &'a MhaParams<S>| {
            lin(f, format!("{p}.wq"), &m.wq);
            lin(f, format!("{p}.wk"), &m.wk);
            lin(f, format!("{p}.wv"), &m.wv);
            lin(f, format!("{p}.wo"), &m.wo);
        };
        f("embedding", &self.embedding);
        f("img.w", &self.img_w);
        f("img.b", &self.img_b);
        ln(&mut f, "img.ln".into(), &self.img_ln);
        for (i, block) in self.encoder.iter().enumerate() {
            ln(&mut f, format!("enc.{i}.ln1"), &block.ln1);
            mha(&mut f, format!("enc.{i}.attn"), &block.attn);
            ln(&mut f, format!("enc.{i}.ln2"), &block.ln2);
            lin(&mut f, format!("enc.{i}.ff.w1"), &block.ff.w1);
            lin(&mut f, format!("enc.{i}.ff.w2"), &block.ff.w2);
        }
        if let Some(enc_ln) = &self.enc_ln {
            ln(&mut f, "enc.final_ln".into(), enc_ln);
        }
        for (i, block) in self.decoder.iter().enumerate() {
            ln(&mut f, format!("dec.{i}.ln1"), &block.ln1);
            match &block.stream {
                StreamParams::Conv(conv) => {
                    lin(&mut f, format!("dec.{i}.conv.kern"), &conv.kern);
                    lin(&mut f, format!("dec.{i}.conv.wo"), &conv.wo);
                }
                StreamParams::Attn(attn) => mha(&mut f, format!("dec.{i}.self"), attn),
            }
            ln(&mut f, format!("dec.{i}.ln2"), &block.ln2);
            mha(&mut f, format!("dec.{i}.cross"), &block.cross);
            ln(&mut f, format!("dec.{i}.ln3"), &block.ln3);
            lin(&mut f, format!("dec.{i}.ff.w1"), &block.ff.w1);
            lin(&mut f, format!("dec.{i}.ff.w2"), &block.ff.w2);
        }
        ln(&mut f, "final_ln".into(), &self.final_ln);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Mat<S>)) {
        let lin = |f: &mut dyn FnMut(&str, &mut Mat<S>), p: String, l: &mut LinearParams<S>| {
            f(&format!("{p}.w"), &mut l.w);
            f(&format!("{p}.b"), &mut l.b);
        };
        let ln = |f: &mut dyn FnMut(&str, &mut Mat<S>), p: String, l: &mut LayerNormParams<S>| {
            f(&format!("{p}.gain"), &mut l.gain);
            f(&format!("{p}.bias"), &mut l.bias);
        };
        let mha = |f: &mut dyn FnMut(&str, &mut Mat<S>), p: String, m: &mut MhaParams<S>| {
            lin(f, format!("{p}.wq"), &mut m.wq);
            lin(f, format!("{p}.wk"), &mut m.wk);
            lin(f, format!("{p}.wv"), &mut m.wv);
            lin(f, format!("{p}.wo"), &mut m.wo);
        };
        f("embedding", &mut self.embedding);
        f("img.w", &mut self.img_w);
        f("img.b", &mut self.img_b);
        ln(&mut f, "img.ln".into(), &mut self.img_ln);
        for (i, block) in self.encoder.iter_mut().enumerate() {
            ln(&mut f, format!("enc.{i}.ln1"), &mut block.ln1);
            mha(&mut f, format!("enc.{i}.attn"), &mut block.attn);
            ln(&mut f, format!("enc.{i}.ln2"), &mut block.ln2);
            lin(&mut f, format!("enc.{i}.ff.w1"), &mut block.ff.w1);
            lin(&mut f, format!("enc.{i}.ff.w2"), &mut block.ff.w2);
        }
        if let Some(enc_ln) = &mut self.enc_ln {
            ln(&mut f, "enc.final_ln".into(), enc_ln);
        }
        for (i, block) in self.decoder.iter_mut().enumerate() {
            ln(&mut f, format!("dec.{i}.ln1"), &mut block.ln1);
            match &mut block.stream {
                StreamParams::Conv(conv) => {
                    lin(&mut f, format!("dec.{i}.conv.kern"), &mut conv.kern);
                    lin(&mut f, format!("dec.{i}.conv.wo"), &mut conv.wo);
                }
                StreamParams::Attn(attn) => mha(&mut f, format!("dec.{i}.self"), attn),
            }
            ln(&mut f, format!("dec.{i}.ln2"), &mut block.ln2);
            mha(&mut f, format!("dec.{i}.cross"), &mut block.cross);
            ln(&mut f, format!("dec.{i}.ln3"), &mut block.ln3);
            lin(&mut f, format!("dec.{i}.ff.w1"), &mut block.ff.w1);
            lin(&mut f, format!("dec.{i}.ff.w2"), &mut block.ff.w2);
        }
        ln(&mut f, "final_ln".into(), &mut self.final_ln);
    }

    pub fn zeros_like(&self) -> Self {
        let mut copy = self.clone();
        copy.for_each_tensor_mut(|_, t| t.fill_zero());
        copy
    }

    pub fn scale(&mut self, factor: f64) {
        let s = S::from_f64(factor);
        self.for_each_tensor_mut(|_, t| t.data.iter_mut().for_each(|v| *v *= s));
    }

    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        let mat = |m: &Mat<S>| Mat::<T> {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        };
        let ln = |l: &LayerNormParams<S>| LayerNormParams { gain: mat(&l.gain), bias: mat(&l.bias) };
        let lin = |l: &LinearParams<S>| LinearParams { w: mat(&l.w), b: mat(&l.b) };
        let mha = |m: &MhaParams<S>| MhaParams {
            wq: lin(&m.wq),
            wk: lin(&m.wk),
            wv: lin(&m.wv),
            wo: lin(&m.wo),
        };
        ModelParams {
            embedding: mat(&self.embedding),
            img_w: mat(&self.img_w),
            img_b: mat(&self.img_b),
            img_ln: ln(&self.img_ln),
            encoder: self
                .encoder
                .iter()
                .map(|b| EncoderBlockParams {
                    ln1: ln(&b.ln1),
                    attn: mha(&b.attn),
                    ln2: ln(&b.ln2),
                    ff: FfParams { w1: lin(&b.ff.w1), w2: lin(&b.ff.w2) },
                })
                .collect(),
            enc_ln: self.enc_ln.as_ref().map(ln),
            decoder: self
                .decoder
                .iter()
                .map(|b| DecoderBlockParams {
                    ln1: ln(&b.ln1),
                    stream: match &b.stream {
                        StreamParams::Conv(c) => StreamParams::Conv(DynConvParams {
                            kern: lin(&c.kern),
                            wo: lin(&c.wo),
                        }),
                        StreamParams::Attn(a) => StreamParams::Attn(mha(a)),
                    },
                    ln2: ln(&b.ln2),
                    cross: mha(&b.cross),
                    ln3: ln(&b.ln3),
                    ff: FfParams { w1: lin(&b.ff.w1), w2: lin(&b.ff.w2) },
                })
                .collect(),
            final_ln: ln(&self.final_ln),
        }
    }

    pub fn n_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }
}

/// Raw per-sample context.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContextInput<'a> {
    pub image: Option<&'a [f32]>,
    pub description_ids: &'a [u32],
    pub section_ids: &'a [u32],
}

impl ContextInput<'_> {
    fn is_empty(&self) -> bool {
        self.image.is_none() && self.description_ids.is_empty() && self.section_ids.is_empty()
    }
}

pub struct Model<S> {
    pub config: ModelConfig,
    pos: Mat<S>,
}

pub(crate) struct CtxCache<S> {
    img_ln: Option<LayerNormCache<S>>,
    token_ids: Vec<u32>,
    token_row_offset: usize,
}

struct DecBlockCache<S> {
    ln1_out: Mat<S>,
    ln1: LayerNormCache<S>,
    stream: StreamCache<S>,
    drop1: Option<Vec<S>>,
    ln2_out: Mat<S>,
    ln2: LayerNormCache<S>,
    cross: MhaCache<S>,
    drop2: Option<Vec<S>>,
    ln3_out: Mat<S>,
    ln3: LayerNormCache<S>,
    ff: FfCache<S>,
    drop3: Option<Vec<S>>,
}

enum StreamCache<S> {
    Conv(DynConvCache<S>),
    Attn(MhaCache<S>),
}

pub(crate) struct DecoderForwardCache<S> {
    input_ids: Vec<u32>,
    blocks: Vec<DecBlockCache<S>>,
    final_ln: LayerNormCache<S>,
    pub(crate) hidden: Mat<S>,
}

struct EncBlockCache<S> {
    ln1_out: Mat<S>,
    ln1: LayerNormCache<S>,
    attn: MhaCache<S>,
    drop1: Option<Vec<S>>,
    ln2_out: Mat<S>,
    ln2: LayerNormCache<S>,
    ff: FfCache<S>,
    drop2: Option<Vec<S>>,
}

pub(crate) struct EncoderForwardCache<S> {
    ctx: CtxCache<S>,
    appended_ids: Vec<u32>,
    blocks: Vec<EncBlockCache<S>>,
    enc_ln: LayerNormCache<S>,
}

fn dropout_forward<S: Scalar>(
    x: &mut Mat<S>,
    rate: f64,
    rng: Option<&mut SplitMix64>,
) -> Option<Vec<S>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = x
        .data
        .iter_mut()
        .map(|v| {
            if rng.next_f64() < rate {
                *v = S::ZERO;
                S::ZERO
            } else {
                *v *= keep;
                keep
            }
        })
        .collect();
    Some(mask)
}

fn dropout_backward<S: Scalar>(dx: &mut Mat<S>, mask: &Option<Vec<S>>) {
    if let Some(mask) = mask {
        for (d, &m) in dx.data.iter_mut().zip(mask) {
            *d *= m;
        }
    }
}

fn scatter_rows<S: Scalar>(ids: &[u32], src: &Mat<S>, embedding_grad: &mut Mat<S>) {
    for (r, &id) in ids.iter().enumerate() {
        let dst = embedding_grad.row_mut(id as usize);
        for (g, &v) in dst.iter_mut().zip(src.row(r)) {
            *g += v;
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let pos = sinusoid_table(config.max_len, config.d_model);
        Ok(Model { config, pos })
    }

    pub(crate) fn positions(&self) -> &Mat<S> {
        &self.pos
    }

    /// Seeded Gaussian init (std 0.02) for weights and the embedding; biases
    /// zero; layer norms identity. The draw order is fixed.
    pub fn init_params(&self, seed: u64) -> ModelParams<S> {
        let c = self.config.clone();
        let rng = std::cell::RefCell::new(SplitMix64::new(seed));
        let normal_mat = |rows: usize, cols: usize| {
            let mut m = Mat::zeros(rows, cols);
            let mut r = rng.borrow_mut();
            m.data.iter_mut().for_each(|v| *v = S::from_f64(r.normal() * 0.02));
            m
        };
        let lin =
            |out_dim: usize, in_dim: usize| LinearParams { w: normal_mat(out_dim, in_dim), b: Mat::zeros(1, out_dim) };
        let mha = |d: usize| MhaParams { wq: lin(d, d), wk: lin(d, d), wv: lin(d, d), wo: lin(d, d) };
        let d = c.d_model;
        let embedding = normal_mat(c.vocab_size, d);
        let img_w = normal_mat(d, c.d_img);
        let encoder = if c.arch == Arch::EncoderDecoder {
            (0..c.n_layers)
                .map(|_| EncoderBlockParams {
                    ln1: LayerNormParams::identity(d),
                    attn: mha(d),
                    ln2: LayerNormParams::identity(d),
                    ff: FfParams { w1: lin(c.ff_hidden(), d), w2: lin(d, c.ff_hidden()) },
                })
                .collect()
        } else {
            Vec::new()
        };
        let decoder = (0..c.n_layers)
            .map(|_| DecoderBlockParams {
                ln1: LayerNormParams::identity(d),
                stream: match c.block {
                    BlockKind::DynamicConv => StreamParams::Conv(DynConvParams {
                        kern: lin(c.n_heads * c.conv_kernel, d),
                        wo: lin(d, d),
                    }),
                    BlockKind::SelfAttn => StreamParams::Attn(mha(d)),
                },
                ln2: LayerNormParams::identity(d),
                cross: mha(d),
                ln3: LayerNormParams::identity(d),
                ff: FfParams { w1: lin(c.ff_hidden(), d), w2: lin(d, c.ff_hidden()) },
            })
            .collect();
        ModelParams {
            embedding,
            img_w,
            img_b: Mat::zeros(1, d),
            img_ln: LayerNormParams::identity(d),
            encoder,
            enc_ln: (c.arch == Arch::EncoderDecoder).then(|| LayerNormParams::identity(d)),
            decoder,
            final_ln: LayerNormParams::identity(d),
        }
    }

    fn gather_tokens(&self, params: &ModelParams<S>, ids: &[u32]) -> Result<Mat<S>> {
        let d = self.config.d_model;
        let mut out = Mat::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocab of {}",
                    self.config.vocab_size
                )));
            }
            out.row_mut(r).copy_from_slice(params.embedding.row(id as usize));
        }
        Ok(out)
    }

    /// Image vector through linear + layer norm, description and section
    /// through the shared embedding; concatenated with no positional
    /// encoding.
    pub(crate) fn embed_context(
        &self,
        params: &ModelParams<S>,
        ctx: &ContextInput<'_>,
    ) -> Result<(Mat<S>, CtxCache<S>)> {
        if ctx.is_empty() {
            return Err(Error::InvalidArgument(
                "context must have an image, a description, or a section".into(),
            ));
        }
        let d = self.config.d_model;
        let img_rows = usize::from(ctx.image.is_some());
        let mut token_ids =
            Vec::with_capacity(ctx.description_ids.len() + ctx.section_ids.len());
        token_ids.extend_from_slice(ctx.description_ids);
        token_ids.extend_from_slice(ctx.section_ids);
        let mut memory = Mat::zeros(img_rows + token_ids.len(), d);
        let mut img_ln = None;
        if let Some(image) = ctx.image {
            if image.len() != self.config.d_img {
                return Err(Error::InvalidArgument(format!(
                    "image vector has dim {}, model expects {}",
                    image.len(),
                    self.config.d_img
                )));
            }
            let mut pre = Mat::zeros(1, d);
            for row in 0..d {
                let mut acc = S::ZERO;
                for (c, &v) in image.iter().enumerate() {
                    acc += params.img_w.at(row, c) * S::from_f64(v as f64);
                }
                pre.data[row] = acc + params.img_b.at(0, row);
            }
            let (normed, cache) = layer_norm_forward(&params.img_ln, &pre);
            memory.row_mut(0).copy_from_slice(normed.row(0));
            img_ln = Some(cache);
        }
        let tokens = self.gather_tokens(params, &token_ids)?;
        for r in 0..tokens.rows {
            memory.row_mut(img_rows + r).copy_from_slice(tokens.row(r));
        }
        Ok((memory, CtxCache { img_ln, token_ids, token_row_offset: img_rows }))
    }

    fn embed_context_backward(
        &self,
        params: &ModelParams<S>,
        ctx: &ContextInput<'_>,
        cache: &CtxCache<S>,
        dmemory: &Mat<S>,
        grads: &mut ModelParams<S>,
    ) {
        let d = self.config.d_model;
        if let Some(ln_cache) = &cache.img_ln {
            let dnormed = Mat { rows: 1, cols: d, data: dmemory.row(0).to_vec() };
            let dpre = layer_norm_backward(&params.img_ln, ln_cache, &dnormed, &mut grads.img_ln);
            let image = ctx.image.expect("image path cached");
            for row in 0..d {
                let g = dpre.data[row];
                grads.img_b.data[row] += g;
                let grad_row = grads.img_w.row_mut(row);
                for (c, &v) in image.iter().enumerate() {
                    grad_row[c] += g * S::from_f64(v as f64);
                }
            }
        }
        let token_grad = Mat {
            rows: cache.token_ids.len(),
            cols: d,
            data: dmemory.data[cache.token_row_offset * d..].to_vec(),
        };
        scatter_rows(&cache.token_ids, &token_grad, &mut grads.embedding);
    }

    /// Caption-side embedding: token rows plus sinusoidal positions.
    fn embed_stream(&self, params: &ModelParams<S>, ids: &[u32]) -> Result<Mat<S>> {
        if ids.len() > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let mut x = self.gather_tokens(params, ids)?;
        for r in 0..x.rows {
            for (v, &p) in x.row_mut(r).iter_mut().zip(self.pos.row(r)) {
                *v += p;
            }
        }
        Ok(x)
    }

    pub(crate) fn decoder_forward(
        &self,
        params: &ModelParams<S>,
        memory: &Mat<S>,
        input_ids: &[u32],
        mut drop_rng: Option<&mut SplitMix64>,
    ) -> Result<DecoderForwardCache<S>> {
        let c = &self.config;
        let mut x = self.embed_stream(params, input_ids)?;
        let mut blocks = Vec::with_capacity(params.decoder.len());
        for block in &params.decoder {
            let (ln1_out, ln1) = layer_norm_forward(&block.ln1, &x);
            let (mut stream_out, stream) = match &block.stream {
                StreamParams::Conv(conv) => {
                    let (y, cache) = dyn_conv_forward(conv, &ln1_out, c.n_heads, c.conv_kernel);
                    (y, StreamCache::Conv(cache))
                }
                StreamParams::Attn(attn) => {
                    let (y, cache) = mha_forward(attn, &ln1_out, &ln1_out, c.n_heads, true, 0);
                    (y, StreamCache::Attn(cache))
                }
            };
            let drop1 = dropout_forward(&mut stream_out, c.dropout, drop_rng.as_deref_mut());
            x.add_assign(&stream_out);

            let (ln2_out, ln2) = layer_norm_forward(&block.ln2, &x);
            let (mut cross_out, cross) =
                mha_forward(&block.cross, &ln2_out, memory, c.n_heads, false, 0);
            let drop2 = dropout_forward(&mut cross_out, c.dropout, drop_rng.as_deref_mut());
            x.add_assign(&cross_out);

            let (ln3_out, ln3) = layer_norm_forward(&block.ln3, &x);
            let (mut ff_out, ff) = ff_forward(&block.ff, &ln3_out);
            let drop3 = dropout_forward(&mut ff_out, c.dropout, drop_rng.as_deref_mut());
            x.add_assign(&ff_out);

            blocks.push(DecBlockCache {
                ln1_out,
                ln1,
                stream,
                drop1,
                ln2_out,
                ln2,
                cross,
                drop2,
                ln3_out,
                ln3,
                ff,
                drop3,
            });
        }
        let (hidden, final_ln) = layer_norm_forward(&params.final_ln, &x);
        Ok(DecoderForwardCache { input_ids: input_ids.to_vec(), blocks, final_ln, hidden })
    }

    /// Backward through the decoder stack; returns the memory gradient.
    pub(crate) fn decoder_backward(
        &self,
        params: &ModelParams<S>,
        memory: &Mat<S>,
        cache: &DecoderForwardCache<S>,
        dhidden: &Mat<S>,
        grads: &mut ModelParams<S>,
    ) -> Mat<S> {
        let c = &self.config;
        let mut dx =
            layer_norm_backward(&params.final_ln, &cache.final_ln, dhidden, &mut grads.final_ln);
        let mut dmemory = Mat::zeros(memory.rows, memory.cols);
        for i in (0..params.decoder.len()).rev() {
            let block = &params.decoder[i];
            let bc = &cache.blocks[i];
            let gb = &mut grads.decoder[i];

            // x_out = x2 + drop(ff(ln3(x2)))
            let mut dff = dx.clone();
            dropout_backward(&mut dff, &bc.drop3);
            let dln3_out = ff_backward(&block.ff, &bc.ln3_out, &bc.ff, &dff, &mut gb.ff);
            let dres = layer_norm_backward(&block.ln3, &bc.ln3, &dln3_out, &mut gb.ln3);
            dx.add_assign(&dres);

            // x2 = x1 + drop(cross(ln2(x1), memory))
            let mut dcross = dx.clone();
            dropout_backward(&mut dcross, &bc.drop2);
            let (dln2_out, dmem_part) = mha_backward(
                &block.cross,
                &bc.ln2_out,
                memory,
                &bc.cross,
                c.n_heads,
                &dcross,
                &mut gb.cross,
            );
            dmemory.add_assign(&dmem_part);
            let dres = layer_norm_backward(&block.ln2, &bc.ln2, &dln2_out, &mut gb.ln2);
            dx.add_assign(&dres);

            // x1 = x0 + drop(stream(ln1(x0)))
            let mut dstream = dx.clone();
            dropout_backward(&mut dstream, &bc.drop1);
            let dln1_out = match (&block.stream, &bc.stream, &mut gb.stream) {
                (StreamParams::Conv(conv), StreamCache::Conv(cc), StreamParams::Conv(gc)) => {
                    dyn_conv_backward(conv, &bc.ln1_out, cc, c.n_heads, c.conv_kernel, &dstream, gc)
                }
                (StreamParams::Attn(attn), StreamCache::Attn(ac), StreamParams::Attn(ga)) => {
                    let (dq, dkv) =
                        mha_backward(attn, &bc.ln1_out, &bc.ln1_out, ac, c.n_heads, &dstream, ga);
                    let mut d = dq;
                    d.add_assign(&dkv);
                    d
                }
                _ => unreachable!("stream cache kind matches stream params"),
            };
            let dres = layer_norm_backward(&block.ln1, &bc.ln1, &dln1_out, &mut gb.ln1);
            dx.add_assign(&dres);
        }
        scatter_rows(&cache.input_ids, &dx, &mut grads.embedding);
        dmemory
    }

    /// Encoder stack over [context ⊕ appended caption tokens]; the appended
    /// segment carries its own sinusoidal positions.
    pub(crate) fn encoder_forward(
        &self,
        params: &ModelParams<S>,
        ctx: &ContextInput<'_>,
        appended_ids: &[u32],
        mut drop_rng: Option<&mut SplitMix64>,
    ) -> Result<(Mat<S>, EncoderForwardCache<S>)> {
        let c = &self.config;
        let (ctx_rows, ctx_cache) = self.embed_context(params, ctx)?;
        let appended = self.embed_stream(params, appended_ids)?;
        let mut x = Mat::zeros(ctx_rows.rows + appended.rows, c.d_model);
        for r in 0..ctx_rows.rows {
            x.row_mut(r).copy_from_slice(ctx_rows.row(r));
        }
        for r in 0..appended.rows {
            x.row_mut(ctx_rows.rows + r).copy_from_slice(appended.row(r));
        }
        let mut blocks = Vec::with_capacity(params.encoder.len());
        for block in &params.encoder {
            let (ln1_out, ln1) = layer_norm_forward(&block.ln1, &x);
            let (mut attn_out, attn) =
                mha_forward(&block.attn, &ln1_out, &ln1_out, c.n_heads, false, 0);
            let drop1 = dropout_forward(&mut attn_out, c.dropout, drop_rng.as_deref_mut());
            x.add_assign(&attn_out);

            let (ln2_out, ln2) = layer_norm_forward(&block.ln2, &x);
            let (mut ff_out, ff) = ff_forward(&block.ff, &ln2_out);
            let drop2 = dropout_forward(&mut ff_out, c.dropout, drop_rng.as_deref_mut());
            x.add_assign(&ff_out);

            blocks.push(EncBlockCache { ln1_out, ln1, attn, drop1, ln2_out, ln2, ff, drop2 });
        }
        let enc_ln_params = params
            .enc_ln
            .as_ref()
            .expect("encoder_decoder params carry a final encoder norm");
        let (memory, enc_ln) = layer_norm_forward(enc_ln_params, &x);
        Ok((
            memory,
            EncoderForwardCache { ctx: ctx_cache, appended_ids: appended_ids.to_vec(), blocks, enc_ln },
        ))
    }

    pub(crate) fn encoder_backward(
        &self,
        params: &ModelParams<S>,
        ctx: &ContextInput<'_>,
        cache: &EncoderForwardCache<S>,
        dmemory: &Mat<S>,
        grads: &mut ModelParams<S>,
    ) {
        let c = &self.config;
        let enc_ln_params = params.enc_ln.as_ref().expect("encoder params");
        let enc_ln_grads = grads.enc_ln.as_mut().expect("encoder grads");
        let mut dx = layer_norm_backward(enc_ln_params, &cache.enc_ln, dmemory, enc_ln_grads);
        for i in (0..params.encoder.len()).rev() {
            let block = &params.encoder[i];
            let bc = &cache.blocks[i];
            let gb = &mut grads.encoder[i];

            let mut dff = dx.clone();
            dropout_backward(&mut dff, &bc.drop2);
            let dln2_out = ff_backward(&block.ff, &bc.ln2_out, &bc.ff, &dff, &mut gb.ff);
            let dres = layer_norm_backward(&block.ln2, &bc.ln2, &dln2_out, &mut gb.ln2);
            dx.add_assign(&dres);

            let mut dattn = dx.clone();
            dropout_backward(&mut dattn, &bc.drop1);
            let (dq, dkv) =
                mha_backward(&block.attn, &bc.ln1_out, &bc.ln1_out, &bc.attn, c.n_heads, &dattn, &mut gb.attn);
            let mut dln1_out = dq;
            dln1_out.add_assign(&dkv);
            let dres = layer_norm_backward(&block.ln1, &bc.ln1, &dln1_out, &mut gb.ln1);
            dx.add_assign(&dres);
        }
        // split input gradient: context rows, then appended caption rows
        let ctx_rows = dx.rows - cache.appended_ids.len();
        let d = c.d_model;
        let dctx = Mat { rows: ctx_rows, cols: d, data: dx.data[..ctx_rows * d].to_vec() };
        self.embed_context_backward(params, ctx, &cache.ctx, &dctx, grads);
        let dappended = Mat {
            rows: cache.appended_ids.len(),
            cols: d,
            data: dx.data[ctx_rows * d..].to_vec(),
        };
        scatter_rows(&cache.appended_ids, &dappended, &mut grads.embedding);
    }

    /// Mean token cross-entropy and its gradient at the logits.
    /// dlogits[t] = (softmax(logits[t]) − onehot(target[t])) / L.
    fn cross_entropy(
        &self,
        params: &ModelParams<S>,
        hidden: &Mat<S>,
        targets: &[u32],
    ) -> Result<(f64, Mat<S>)> {
        debug_assert_eq!(hidden.rows, targets.len());
        let inv_l = S::from_f64(1.0 / targets.len() as f64);
        let mut logits = hidden.matmul_nt(&params.embedding);
        let mut loss = 0.0f64;
        for (t, &target) in targets.iter().enumerate() {
            if target as usize >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "target id {target} outside vocab of {}",
                    self.config.vocab_size
                )));
            }
            let row = logits.row_mut(t);
            let mut max = row[0];
            for &v in row.iter() {
                max = max.maximum(v);
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            // row now holds softmax numerators; loss uses the true logit
            let p_target = row[target as usize] / sum;
            loss -= p_target.to_f64().max(f64::MIN_POSITIVE).ln();
            for v in row.iter_mut() {
                *v = *v / sum * inv_l;
            }
            row[target as usize] -= inv_l;
        }
        Ok((loss / targets.len() as f64, logits))
    }

    /// Teacher-forced sequences for one masked instance, per the matching
    /// architecture. Decoder-prefix conditions on the corrupted caption and
    /// reconstructs the original at every position; encoder-decoder appends
    /// the corrupted caption to the encoder input and decodes the
    /// (sentinel-delimited) target.
    fn arrange(&self, masked: &MaskedInstance) -> Result<(Vec<u32>, Vec<u32>)> {
        match self.config.arch {
            Arch::DecoderPrefix => {
                if masked.strategy == "mnem-sentinel" {
                    return Err(Error::InvalidArgument(
                        "mnem-sentinel masking requires the encoder_decoder architecture".into(),
                    ));
                }
                if masked.input_ids.len() != masked.target_ids.len() {
                    return Err(Error::InvalidArgument(
                        "decoder-prefix training needs length-preserving corruption".into(),
                    ));
                }
                let mut input = Vec::with_capacity(masked.input_ids.len() + 1);
                input.push(BOS);
                input.extend_from_slice(&masked.input_ids);
                let mut targets = masked.target_ids.clone();
                targets.push(EOS);
                Ok((input, targets))
            }
            Arch::EncoderDecoder => {
                if masked.strategy == "mnem-decoder" {
                    return Err(Error::InvalidArgument(
                        "mnem-decoder masking requires the decoder_prefix architecture".into(),
                    ));
                }
                let mut input = Vec::with_capacity(masked.target_ids.len() + 1);
                input.push(BOS);
                input.extend_from_slice(&masked.target_ids);
                let mut targets = masked.target_ids.clone();
                targets.push(EOS);
                Ok((input, targets))
            }
        }
    }

    /// The corrupted caption goes to the encoder alongside the context; a
    /// clean captioning pass must not, or the decoder could copy the answer.
    fn encoder_appendix<'m>(&self, masked: &'m MaskedInstance) -> &'m [u32] {
        if masked.strategy == "caption" {
            &[]
        } else {
            &masked.input_ids
        }
    }

    /// Training loss for one sample (forward only).
    pub fn loss_masked(
        &self,
        params: &ModelParams<S>,
        masked: &MaskedInstance,
        ctx: &ContextInput<'_>,
    ) -> Result<f64> {
        let (dec_input, targets) = self.arrange(masked)?;
        let memory = match self.config.arch {
            Arch::DecoderPrefix => self.embed_context(params, ctx)?.0,
            Arch::EncoderDecoder => {
                self.encoder_forward(params, ctx, self.encoder_appendix(masked), None)?.0
            }
        };
        let cache = self.decoder_forward(params, &memory, &dec_input, None)?;
        let (loss, _) = self.cross_entropy(params, &cache.hidden, &targets)?;
        Ok(loss)
    }

    /// Training loss with gradient accumulation into `grads`.
    pub fn loss_masked_backward(
        &self,
        params: &ModelParams<S>,
        masked: &MaskedInstance,
        ctx: &ContextInput<'_>,
        grads: &mut ModelParams<S>,
        mut drop_rng: Option<&mut SplitMix64>,
    ) -> Result<f64> {
        let (dec_input, targets) = self.arrange(masked)?;
        let (memory, mem_cache) = match self.config.arch {
            Arch::DecoderPrefix => {
                let (m, c) = self.embed_context(params, ctx)?;
                (m, MemCache::Ctx(c))
            }
            Arch::EncoderDecoder => {
                let (m, c) = self.encoder_forward(
                    params,
                    ctx,
                    self.encoder_appendix(masked),
                    drop_rng.as_deref_mut(),
                )?;
                (m, MemCache::Enc(c))
            }
        };
        let cache = self.decoder_forward(params, &memory, &dec_input, drop_rng.as_deref_mut())?;
        let (loss, dlogits) = self.cross_entropy(params, &cache.hidden, &targets)?;
        // logits = hidden @ E^T: both sides of the tie get gradient
        let dhidden = dlogits.matmul_nn(&params.embedding);
        dlogits.accumulate_tn(&cache.hidden, &mut grads.embedding);
        let dmemory = self.decoder_backward(params, &memory, &cache, &dhidden, grads);
        match &mem_cache {
            MemCache::Ctx(ctx_cache) => {
                self.embed_context_backward(params, ctx, ctx_cache, &dmemory, grads)
            }
            MemCache::Enc(enc_cache) => {
                self.encoder_backward(params, ctx, enc_cache, &dmemory, grads)
            }
        }
        Ok(loss)
    }

    /// Next-token logits for a caption prefix given the context: shape
    /// (prefix_len × vocab). The prefix must start with BOS.
    pub fn forward_logits(
        &self,
        params: &ModelParams<S>,
        ctx: &ContextInput<'_>,
        prefix_ids: &[u32],
    ) -> Result<Mat<S>> {
        let memory = match self.config.arch {
            Arch::DecoderPrefix => self.embed_context(params, ctx)?.0,
            Arch::EncoderDecoder => self.encoder_forward(params, ctx, &[], None)?.0,
        };
        let cache = self.decoder_forward(params, &memory, prefix_ids, None)?;
        Ok(cache.hidden.matmul_nt(&params.embedding))
    }

    /// The context memory for repeated decoding against one sample.
    pub fn memory_for(&self, params: &ModelParams<S>, ctx: &ContextInput<'_>) -> Result<Mat<S>> {
        match self.config.arch {
            Arch::DecoderPrefix => Ok(self.embed_context(params, ctx)?.0),
            Arch::EncoderDecoder => Ok(self.encoder_forward(params, ctx, &[], None)?.0),
        }
    }
}

enum MemCache<S> {
    Ctx(CtxCache<S>),
    Enc(EncoderForwardCache<S>),
}

/// An uncorrupted caption as a MaskedInstance, for plain captioning loss.
pub fn clean_instance(caption_ids: &[u32], seed: u64) -> MaskedInstance {
    MaskedInstance {
        input_ids: caption_ids.to_vec(),
        target_ids: caption_ids.to_vec(),
        masked_spans: Vec::new(),
        strategy: "caption".into(),
        seed,
    }
}
