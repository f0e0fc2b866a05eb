//! Hierarchical mask decoding.
//!
//! Spatial maps are carried as raster-order token matrices `(h * w, d_D)`,
//! which is the `(d_D, h, w)` map transposed. The chain runs from the
//! deepest tap to the shallowest:
//!
//! ```text
//! out_N = Dec_N(neck_N(e_N), A_N)
//! out_i = Dec_i(out_{i+1} + neck_i(e_i) [+ out_N], A_i)
//! ```
//!
//! with the bracketed term present when skip connections are enabled.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Var};
use crate::params::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::self_prompt::{prompt_attention_rows, AttentionRecord, PromptKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Decoder width `d_D`.
    pub width: usize,
    pub heads: usize,
    /// Output mask channels, background included.
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { width: 48, heads: 4, num_classes: 2 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "decoder: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("decoder: num_classes must count background plus at least one class"));
        }
        Ok(())
    }
}

/// Per-position `d_I -> d_D` projection followed by layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct Neck {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl Neck {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, enc_width: usize, width: usize) -> Self {
        Neck {
            proj: Linear::new(store, rng, &format!("{name}.proj"), enc_width, width, true, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), width, true),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, embedding: Var) -> Result<Var> {
        let expected = g.value(p.var(self.proj.weight)).shape()[1];
        let s = g.shape(embedding);
        if s.len() != 2 || s[1] != expected {
            return Err(Error::config(format!("neck expects width {expected}, got {s:?}")));
        }
        let h = self.proj.forward(g, p, embedding)?;
        self.norm.forward(g, p, h)
    }
}

/// Multi-head attention with separate q/k/v/out projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        // A key bias shifts every logit of a query equally, so softmax
        // ignores it; the key projection has none.
        let mut lin = |s: &str, bias| Linear::new(store, rng, &format!("{name}.{s}"), width, width, bias, true);
        Attention { q: lin("q", true), k: lin("k", false), v: lin("v", true), out: lin("out", true) }
    }

    /// Returns the projected output and the raw attention node.
    fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, queries: Var, context: Var, heads: usize) -> Result<(Var, Var)> {
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let attn = g.attention(q, k, v, heads, 1)?;
        Ok((self.out.forward(g, p, attn)?, attn))
    }

    fn linears(&self) -> [Linear; 4] {
        [self.q, self.k, self.v, self.out]
    }
}

/// One round of two-way attention between prompt tokens and the spatial map.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub token_to_image: Attention,
    pub norm1: LayerNorm,
    pub token_self: Attention,
    pub norm2: LayerNorm,
    pub image_to_token: Attention,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        DecoderBlock {
            token_to_image: Attention::new(store, rng, &format!("{name}.token_to_image"), width),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width, true),
            token_self: Attention::new(store, rng, &format!("{name}.token_self"), width),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width, true),
            image_to_token: Attention::new(store, rng, &format!("{name}.image_to_token"), width),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width, true),
        }
    }

    /// Updates the spatial map `x` under prompt `tokens`. Also returns the
    /// `(c, h * w)` token-to-image attention weights.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var, tokens: Var, heads: usize) -> Result<(Var, crate::numerics::Tensor<f64>)> {
        let (xs, ts) = (g.shape(x).to_vec(), g.shape(tokens).to_vec());
        if xs.len() != 2 || ts.len() != 2 || xs[1] != ts[1] {
            return Err(Error::shape("decoder_block", format!("map {xs:?} vs tokens {ts:?}")));
        }
        let (upd, attn) = self.token_to_image.forward(g, p, tokens, x, heads)?;
        let record = prompt_attention_rows(g, attn, 0, ts[0], xs[0], None)?;
        let t = g.add(tokens, upd)?;
        let t = self.norm1.forward(g, p, t)?;
        let (upd, _) = self.token_self.forward(g, p, t, t, heads)?;
        let t = g.add(t, upd)?;
        let t = self.norm2.forward(g, p, t)?;
        let (upd, _) = self.image_to_token.forward(g, p, x, t, heads)?;
        let x = g.add(x, upd)?;
        Ok((self.norm3.forward(g, p, x)?, record))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for a in [self.token_to_image, self.token_self, self.image_to_token] {
            for l in a.linears() {
                ids.push(l.weight);
                ids.extend(l.bias);
            }
        }
        for n in [self.norm1, self.norm2, self.norm3] {
            ids.extend([n.gamma, n.beta]);
        }
        ids
    }
}

/// Bilinear upsampling back to pixel resolution then a per-pixel linear map
/// to class logits.
#[derive(Clone, Copy, Debug)]
pub struct MaskHead {
    pub proj: Linear,
}

/// Decoder outputs, `outputs[0]` being `output_1`.
pub struct DecoderState {
    pub outputs: Vec<Var>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    necks: Vec<Neck>,
    blocks: Vec<DecoderBlock>,
    head: MaskHead,
    /// 1-based encoder tap served by each level.
    taps: Vec<usize>,
    skip: bool,
    grid: usize,
    patch: usize,
}

impl Decoder {
    /// `taps` lists the encoder tap (1-based) decoded at each level, shallow
    /// to deep; the last must be the deepest tap.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        config: &DecoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        enc_width: usize,
        taps: Vec<usize>,
        skip: bool,
        grid: usize,
        patch: usize,
    ) -> Result<Self> {
        config.validate()?;
        if taps.is_empty() {
            return Err(Error::config("decoder chain needs at least one level"));
        }
        if !patch.is_power_of_two() {
            return Err(Error::config(format!("patch size {patch} must be a power of two")));
        }
        let mut necks = Vec::with_capacity(taps.len());
        let mut blocks = Vec::with_capacity(taps.len());
        for i in 0..taps.len() {
            necks.push(Neck::new(store, rng, &format!("decoder.neck.{i}"), enc_width, config.width));
            blocks.push(DecoderBlock::new(store, rng, &format!("decoder.block.{i}"), config.width));
        }
        let head = MaskHead {
            proj: Linear::new(store, rng, "decoder.head", config.width, config.num_classes, true, true),
        };
        Ok(Decoder { config: config.clone(), necks, blocks, head, taps, skip, grid, patch })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn necks(&self) -> &[Neck] {
        &self.necks
    }

    pub fn blocks(&self) -> &[DecoderBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &MaskHead {
        &self.head
    }

    pub fn neck_project<T: Element>(&self, g: &mut Graph<T>, p: &Bound, level: usize, embedding: Var) -> Result<Var> {
        self.necks
            .get(level)
            .ok_or_else(|| Error::Usage(format!("neck {level} out of range")))?
            .forward(g, p, embedding)
    }

    /// Runs the chain with the real decoder blocks.
    pub fn fuse_chain<T: Element>(&self, g: &mut Graph<T>, p: &Bound, embeddings: &[Var], prompts: &[Var]) -> Result<DecoderState> {
        let heads = self.config.heads;
        let taps = self.taps.clone();
        let mut attention = Vec::new();
        let outputs = self.fuse_chain_with(g, p, embeddings, |g, level, x| {
            let (y, weights) = self.blocks[level].forward(g, p, x, prompts[level], heads)?;
            attention.push(AttentionRecord { layer: taps[level], kind: PromptKind::A, weights });
            Ok(y)
        }, prompts.len())?;
        attention.sort_by_key(|r| r.layer);
        Ok(DecoderState { outputs, attention })
    }

    /// The chain with a caller-supplied block. `block(g, level, input)`
    /// plays `Decoder_level`. Returns `[output_1, ..., output_N]`.
    pub fn fuse_chain_with<T: Element, F>(&self, g: &mut Graph<T>, p: &Bound, embeddings: &[Var], mut block: F, prompt_count: usize) -> Result<Vec<Var>>
    where
        F: FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
    {
        let levels = self.levels();
        if embeddings.len() != levels || prompt_count != levels {
            return Err(Error::config(format!(
                "chain of {levels} levels got {} embeddings and {prompt_count} prompt sets",
                embeddings.len()
            )));
        }
        let mut outputs = vec![None; levels];
        let deepest = levels - 1;
        let start = self.neck_project(g, p, deepest, embeddings[deepest])?;
        let out_n = block(g, deepest, start)?;
        outputs[deepest] = Some(out_n);
        let mut prev = out_n;
        for i in (0..deepest).rev() {
            let neck = self.neck_project(g, p, i, embeddings[i])?;
            let mut input = g.add(prev, neck)?;
            if self.skip {
                input = g.add(input, out_n)?;
            }
            prev = block(g, i, input)?;
            outputs[i] = Some(prev);
        }
        Ok(outputs.into_iter().map(|o| o.expect("every level visited")).collect())
    }

    /// Class logits `(num_classes, H, W)` from `output_1`.
    pub fn predict_masks<T: Element>(&self, g: &mut Graph<T>, p: &Bound, state: &DecoderState) -> Result<Var> {
        let first = *state.outputs.first().ok_or_else(|| Error::Usage("empty decoder state".into()))?;
        self.mask_logits(g, p, first)
    }

    pub fn mask_logits<T: Element>(&self, g: &mut Graph<T>, p: &Bound, output_1: Var) -> Result<Var> {
        let d = self.config.width;
        let t = g.transpose(output_1)?;
        let mut map = g.reshape(t, &[d, self.grid, self.grid])?;
        let mut side = self.grid;
        for _ in 0..self.patch.trailing_zeros() {
            map = g.upsample2x(map)?;
            side *= 2;
        }
        let flat = g.reshape(map, &[d, side * side])?;
        let pixels = g.transpose(flat)?;
        let logits = self.head.proj.forward(g, p, pixels)?;
        let per_class = g.transpose(logits)?;
        g.reshape(per_class, &[self.config.num_classes, side, side])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (neck, block) in self.necks.iter().zip(&self.blocks) {
            ids.push(neck.proj.weight);
            ids.extend(neck.proj.bias);
            ids.extend([neck.norm.gamma, neck.norm.beta]);
            ids.extend(block.param_ids());
        }
        ids.push(self.head.proj.weight);
        ids.extend(self.head.proj.bias);
        ids
    }
}
