//! ViT-style image encoder: patch stem, interleaved windowed and global
//! attention blocks, LoRA on the query/value projections, and Q-prompt
//! injection at global blocks.
//!
//! Every base weight (patch projection, positional embedding, attention and
//! MLP weights, layer-norm affines) is registered frozen. Only the LoRA
//! factors are trainable.
//!
//! Tokens travel through the blocks in window-major order so a windowed
//! block is a block-diagonal attention over contiguous rows. Embedding taps
//! and attention records are converted back to raster order.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::params::{init, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::self_prompt::{prompt_attention_rows, AttentionRecord, PromptKind};

/// Rank used for full-scale runs.
pub const FULL_SCALE_LORA_RANK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Token width `d_I`.
    pub width: usize,
    pub depth: usize,
    /// Block indices (0-based) that use global attention; the last must be
    /// `depth - 1`.
    pub global_layers: Vec<usize>,
    pub heads: usize,
    /// Window side in tokens for local attention.
    pub window_size: usize,
    pub lora_rank: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 1,
            width: 96,
            depth: 8,
            global_layers: vec![2, 5, 7],
            heads: 4,
            window_size: 4,
            lora_rank: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// ViT-B-sized dimensions. Configuration only; far too large for a CPU run.
    pub fn full_scale() -> Self {
        EncoderConfig {
            image_size: 1024,
            patch_size: 16,
            in_channels: 3,
            width: 768,
            depth: 12,
            global_layers: vec![2, 5, 8, 11],
            heads: 12,
            window_size: 8,
            lora_rank: FULL_SCALE_LORA_RANK,
            mlp_ratio: 4,
        }
    }

    /// Token grid side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Number of global-attention taps, `N`.
    pub fn taps(&self) -> usize {
        self.global_layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(format!("encoder: {m}")));
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return fail(format!("patch_size {} must be a power of two", self.patch_size));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.window_size == 0 || !self.grid().is_multiple_of(self.window_size) {
            return fail(format!("token grid {} not divisible by window_size {}", self.grid(), self.window_size));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return fail(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.depth == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return fail("depth, width and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.global_layers.is_empty() {
            return fail("at least one global layer is required".into());
        }
        if self.global_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("global_layers {:?} must be strictly increasing", self.global_layers));
        }
        if *self.global_layers.last().expect("nonempty") != self.depth - 1 {
            return fail(format!("last global layer must be depth-1 = {}", self.depth - 1));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.width {
            return fail(format!("lora_rank {} must be in 1..{}", self.lora_rank, self.width));
        }
        Ok(())
    }
}

/// Frozen weight `W (d x k)` plus trainable low-rank factors `B (d x r)`,
/// `A (r x k)`.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub base: ParamId,
    pub bias: Option<ParamId>,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl LoraAdapter {
    /// Registers a frozen `(output x input)` projection and its adapter.
    /// `A ~ N(0, 0.02)`, `B = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        frozen_rng: &mut ChaCha8Rng,
        lora_rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
        rank: usize,
    ) -> Result<Self> {
        if rank == 0 || rank >= input.min(output) {
            return Err(Error::config(format!(
                "{name}: LoRA rank {rank} must be in 1..{}",
                input.min(output)
            )));
        }
        let base = Linear::new(store, frozen_rng, name, input, output, true, false);
        let a = store.add(format!("{name}.lora_a"), init::normal(lora_rng, &[rank, input], 0.02), true);
        let b = store.add(format!("{name}.lora_b"), init::zeros(&[output, rank]), true);
        Ok(LoraAdapter { base: base.weight, bias: base.bias, a, b, rank })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = lora_forward(g, x, p.var(self.base), p.var(self.a), p.var(self.b))?;
        match self.bias {
            Some(bias) => g.add(y, p.var(bias)),
            None => Ok(y),
        }
    }

    /// `W + BA`.
    pub fn merged_weight<T: Element>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let delta = store.get(self.b).matmul(store.get(self.a))?;
        let w = store.get(self.base);
        let data = w.data().iter().zip(delta.data()).map(|(&x, &d)| x + d).collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}

/// `x W^T + (x A^T) B^T`, never materializing `W + BA`.
pub fn lora_forward<T: Element>(g: &mut Graph<T>, x: Var, w: Var, a: Var, b: Var) -> Result<Var> {
    let (d, k) = (g.shape(w)[0], g.shape(w)[1]);
    let r = g.shape(a)[0];
    if r >= d.min(k) {
        return Err(Error::config(format!("LoRA rank {r} must be below min({d}, {k})")));
    }
    let base = g.matmul_nt(x, w)?;
    let low = g.matmul_nt(x, a)?;
    let delta = g.matmul_nt(low, b)?;
    g.add(base, delta)
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    global: bool,
    norm1: LayerNorm,
    q: LoraAdapter,
    k: Linear,
    v: LoraAdapter,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var, heads: usize, blocks: usize, lora: bool) -> Result<(Var, Var)> {
        let h = self.norm1.forward(g, p, x)?;
        let project = |g: &mut Graph<T>, a: &LoraAdapter| {
            if lora {
                a.forward(g, p, h)
            } else {
                Linear { weight: a.base, bias: a.bias }.forward(g, p, h)
            }
        };
        let q = project(g, &self.q)?;
        let k = self.k.forward(g, p, h)?;
        let v = project(g, &self.v)?;
        let attn = g.attention(q, k, v, heads, blocks)?;
        let o = self.proj.forward(g, p, attn)?;
        let x = g.add(x, o)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        Ok((g.add(x, h)?, attn))
    }
}

/// Per-tap embeddings in raster token order, `(h * w, d_I)` each.
pub struct EncoderOutput {
    pub embeddings: Vec<Var>,
    /// One record per tap that received Q-prompts.
    pub prompt_attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<EncoderBlock>,
    to_window: Vec<usize>,
    to_raster: Vec<usize>,
}

impl Encoder {
    pub fn new<T: Element>(
        config: &EncoderConfig,
        store: &mut ParamStore<T>,
        frozen_rng: &mut ChaCha8Rng,
        lora_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let patch_dim = config.in_channels * config.patch_size * config.patch_size;
        let patch_embed = Linear::new(store, frozen_rng, "encoder.patch_embed", patch_dim, d, true, false);
        let pos_embed = store.add("encoder.pos_embed", init::normal(frozen_rng, &[config.num_tokens(), d], 0.02), false);
        let hidden = d * config.mlp_ratio;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = format!("encoder.blocks.{i}");
            blocks.push(EncoderBlock {
                global: config.global_layers.contains(&i),
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, false),
                q: LoraAdapter::new(store, frozen_rng, lora_rng, &format!("{name}.attn.q"), d, d, config.lora_rank)?,
                k: Linear::new(store, frozen_rng, &format!("{name}.attn.k"), d, d, true, false),
                v: LoraAdapter::new(store, frozen_rng, lora_rng, &format!("{name}.attn.v"), d, d, config.lora_rank)?,
                proj: Linear::new(store, frozen_rng, &format!("{name}.attn.proj"), d, d, true, false),
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, false),
                fc1: Linear::new(store, frozen_rng, &format!("{name}.mlp.fc1"), d, hidden, true, false),
                fc2: Linear::new(store, frozen_rng, &format!("{name}.mlp.fc2"), hidden, d, true, false),
            });
        }
        let to_window = window_order(config.grid(), config.window_size);
        let mut to_raster = vec![0; to_window.len()];
        for (w, &r) in to_window.iter().enumerate() {
            to_raster[r] = w;
        }
        Ok(Encoder { config: config.clone(), patch_embed, pos_embed, blocks, to_window, to_raster })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Linear patch projection plus positional embedding, raster order.
    pub fn patchify<T: Element>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let c = &self.config;
        let expected = [c.in_channels, c.image_size, c.image_size];
        if g.shape(image) != expected {
            return Err(Error::config(format!(
                "image shape {:?} does not match encoder config {expected:?}",
                g.shape(image)
            )));
        }
        let patches = g.patch_unfold(image, c.patch_size)?;
        let tokens = self.patch_embed.forward(g, p, patches)?;
        g.add(tokens, p.var(self.pos_embed))
    }

    /// Runs all blocks. `prompts[j]` (one slot per tap) holds `Q_j` as a
    /// `(c, d_I)` variable, or `None` to run tap `j` without prompts.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, image: Var, prompts: &[Option<Var>]) -> Result<EncoderOutput> {
        self.run(g, p, image, prompts, true)
    }

    /// The frozen backbone alone: no adapters, no prompts.
    pub fn forward_backbone<T: Element>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let slots = vec![None; self.config.taps()];
        Ok(self.run(g, p, image, &slots, false)?.embeddings)
    }

    fn run<T: Element>(&self, g: &mut Graph<T>, p: &Bound, image: Var, prompts: &[Option<Var>], lora: bool) -> Result<EncoderOutput> {
        let c = &self.config;
        if prompts.len() != c.taps() {
            return Err(Error::config(format!("{} prompt slots for {} global layers", prompts.len(), c.taps())));
        }
        for q in prompts.iter().flatten() {
            let s = g.shape(*q);
            if s.len() != 2 || s[1] != c.width {
                return Err(Error::config(format!("prompt shape {s:?} does not have width d_I = {}", c.width)));
            }
        }
        let n = c.num_tokens();
        let windows = (c.grid() / c.window_size).pow(2);
        let permuted = windows > 1;

        let tokens = self.patchify(g, p, image)?;
        let mut x = if permuted { g.gather_rows(tokens, &self.to_window)? } else { tokens };
        let mut embeddings = Vec::with_capacity(c.taps());
        let mut prompt_attention = Vec::new();
        let mut tap = 0;
        for block in &self.blocks {
            if !block.global {
                x = block.forward(g, p, x, c.heads, windows, lora)?.0;
                continue;
            }
            match prompts[tap] {
                Some(q) => {
                    let count = g.shape(q)[0];
                    let joined = g.concat(&[x, q])?;
                    let (out, attn) = block.forward(g, p, joined, c.heads, 1, lora)?;
                    let key_order = if permuted { Some(self.to_window.as_slice()) } else { None };
                    let weights = prompt_attention_rows(g, attn, n, count, n, key_order)?;
                    prompt_attention.push(AttentionRecord { layer: tap + 1, kind: PromptKind::Q, weights });
                    x = g.slice_rows(out, 0, n)?;
                }
                None => {
                    x = block.forward(g, p, x, c.heads, 1, lora)?.0;
                }
            }
            embeddings.push(if permuted { g.gather_rows(x, &self.to_raster)? } else { x });
            tap += 1;
        }
        Ok(EncoderOutput { embeddings, prompt_attention })
    }

    /// LoRA adapters in block order (query then value).
    pub fn adapters(&self) -> Vec<LoraAdapter> {
        self.blocks.iter().flat_map(|b| [b.q, b.v]).collect()
    }
}

/// Raster index of each token in window-major order.
fn window_order(grid: usize, window: usize) -> Vec<usize> {
    let per_side = grid / window;
    let mut order = Vec::with_capacity(grid * grid);
    for wy in 0..per_side {
        for wx in 0..per_side {
            for ry in 0..window {
                for rx in 0..window {
                    order.push((wy * window + ry) * grid + wx * window + rx);
                }
            }
        }
    }
    order
}

/// Reshapes a raster-order `(h * w, d)` token value into a `(d, h, w)` map.
pub fn embedding_grid<T: Element>(tokens: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
    let t = tokens.transpose()?;
    t.reshape([t.shape()[0], grid, grid])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            width: 16,
            depth: 3,
            global_layers: vec![1, 2],
            heads: 2,
            window_size: 2,
            lora_rank: 2,
            ..EncoderConfig::default()
        }
    }

    fn build(config: &EncoderConfig) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut frozen = ChaCha8Rng::seed_from_u64(11);
        let mut lora = ChaCha8Rng::seed_from_u64(12);
        let enc = Encoder::new(config, &mut store, &mut frozen, &mut lora).unwrap();
        (store, enc)
    }

    #[test]
    fn default_and_full_scale_validate() {
        EncoderConfig::default().validate().unwrap();
        EncoderConfig::full_scale().validate().unwrap();
        assert_eq!(EncoderConfig::full_scale().lora_rank, 32);
    }

    #[test]
    fn validation_failures() {
        let bad = |f: fn(&mut EncoderConfig)| {
            let mut c = EncoderConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        };
        bad(|c| c.image_size = 60);
        bad(|c| c.window_size = 3);
        bad(|c| c.global_layers = vec![2, 5]);
        bad(|c| c.global_layers = vec![5, 2, 7]);
        bad(|c| c.lora_rank = 96);
        bad(|c| c.lora_rank = 0);
        bad(|c| c.heads = 5);
    }

    #[test]
    fn patch_counts() {
        for (size, tokens) in [(64, 64), (32, 16)] {
            let config = EncoderConfig { image_size: size, global_layers: vec![1], depth: 2, window_size: 1, ..EncoderConfig::default() };
            let (store, enc) = build(&config);
            let mut g = Graph::new();
            let p = store.bind_constant(&mut g);
            let img = g.constant(Tensor::zeros([1, size, size]));
            let t = enc.patchify(&mut g, &p, img).unwrap();
            assert_eq!(g.shape(t), &[tokens, config.width]);
        }
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let (store, enc) = build(&small_config());
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let img = g.constant(Tensor::zeros([1, 16, 16]));
        assert!(matches!(enc.patchify(&mut g, &p, img), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_gives_positional_embedding() {
        let (mut store, enc) = build(&small_config());
        store.get_mut(enc.patch_embed.bias.unwrap()).data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let img = g.constant(Tensor::zeros([1, 32, 32]));
        let t = enc.patchify(&mut g, &p, img).unwrap();
        assert!(g.value(t).bit_eq(store.get(enc.pos_embed)));
    }

    #[test]
    fn window_order_is_a_permutation() {
        let mut order = window_order(8, 4);
        assert_eq!(&order[..5], &[0, 1, 2, 3, 8]);
        order.sort_unstable();
        assert_eq!(order, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn lora_rank_too_large_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert!(LoraAdapter::new(&mut store, &mut r1, &mut r2, "x", 6, 4, 4).is_err());
        assert!(LoraAdapter::new(&mut store, &mut r1, &mut r2, "x", 6, 4, 3).is_ok());
    }

    #[test]
    fn one_embedding_per_tap_with_equal_shapes() {
        let config = small_config();
        let (store, enc) = build(&config);
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let img = g.constant(Tensor::full([1, 32, 32], 0.3));
        let q = g.constant(Tensor::full([1, 16], 0.1));
        let out = enc.forward(&mut g, &p, img, &[Some(q), None]).unwrap();
        assert_eq!(out.embeddings.len(), 2);
        for e in &out.embeddings {
            assert_eq!(g.shape(*e), &[16, 16]);
        }
        assert_eq!(out.prompt_attention.len(), 1);
        let w = &out.prompt_attention[0].weights;
        assert_eq!(w.shape(), &[1, 16]);
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prompt_width_mismatch_is_config_error() {
        let (store, enc) = build(&small_config());
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let img = g.constant(Tensor::zeros([1, 32, 32]));
        let q = g.constant(Tensor::zeros([2, 8]));
        assert!(matches!(enc.forward(&mut g, &p, img, &[Some(q), None]), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_grid_layout() {
        let tokens = Tensor::<f64>::from_f64([4, 2], &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]).unwrap();
        let grid = embedding_grid(&tokens, 2).unwrap();
        assert_eq!(grid.shape(), &[2, 2, 2]);
        assert_eq!(grid.data(), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]);
    }
}
