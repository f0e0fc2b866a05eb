//! Q&A prompt pairs.
//!
//! Each layer `j` owns `c` trainable Q-prompts of width `d_I`, a bias-free
//! bottleneck `f_j: d_I -> d_D` shared by those prompts, and `c` independent
//! two-layer perceptrons. The A-prompt row `i` is `mlp_i(f_j(q_i))`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::pgm;
use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, Element, Graph, Tensor, Var};
use crate::params::{init, Bound, Linear, ParamId, ParamStore};

/// Prompt counts swept when studying sensitivity to `c`.
pub const PROMPT_SWEEP_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    Q,
    A,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Q => "Q",
            PromptKind::A => "A",
        }
    }
}

/// Prompt-to-space attention for one layer: `(c, h * w)` head-averaged
/// weights over spatial tokens in raster order, each row summing to one.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// 1-based tap index.
    pub layer: usize,
    pub kind: PromptKind,
    pub weights: Tensor<f64>,
}

/// Extracts rows `query_start..query_start + query_count` of a global
/// attention node, restricted to the first `key_count` keys and
/// renormalized. `key_order[k]` gives the raster position of key `k`.
pub(crate) fn prompt_attention_rows<T: Element>(
    g: &Graph<T>,
    attn: Var,
    query_start: usize,
    query_count: usize,
    key_count: usize,
    key_order: Option<&[usize]>,
) -> Result<Tensor<f64>> {
    let probs = g
        .attention_probs(attn)
        .ok_or_else(|| Error::Usage("not an attention node".into()))?;
    if probs.blocks != 1 || query_start + query_count > probs.queries_per_block || key_count > probs.keys_per_block {
        return Err(Error::Usage("attention record outside the attention matrix".into()));
    }
    let mut out = vec![0.0; query_count * key_count];
    for r in 0..query_count {
        let row = &mut out[r * key_count..(r + 1) * key_count];
        for h in 0..probs.heads {
            for k in 0..key_count {
                let dst = key_order.map_or(k, |o| o[k]);
                row[dst] += probs.get(0, h, query_start + r, k).as_f64();
            }
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new([query_count, key_count], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Prompts per layer, `c`.
    pub count: usize,
    /// `d_I`.
    pub enc_width: usize,
    /// `d_D`.
    pub dec_width: usize,
    /// Number of prompt layers.
    pub layers: usize,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("prompt count must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("prompt bank needs at least one layer"));
        }
        if self.dec_width == 0 || self.dec_width >= self.enc_width {
            return Err(Error::config(format!(
                "bottleneck requires 0 < d_D < d_I, got d_D = {}, d_I = {}",
                self.dec_width, self.enc_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct PromptLayer {
    /// `(c, d_I)`.
    pub q: ParamId,
    /// `(d_D, d_I)`, applied as `x f^T`.
    pub f: ParamId,
    pub mlps: Vec<PromptMlp>,
}

#[derive(Clone, Debug)]
pub struct PromptBank {
    config: PromptConfig,
    layers: Vec<PromptLayer>,
}

impl PromptBank {
    pub fn new<T: Element>(store: &mut ParamStore<T>, config: &PromptConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, di, dd) = (config.count, config.enc_width, config.dec_width);
        let layers = (0..config.layers)
            .map(|j| {
                let q = store.add(format!("prompt.{j}.q"), init::normal(rng, &[c, di], 0.02), true);
                let f = store.add(format!("prompt.{j}.f"), init::fan_in_uniform(rng, &[dd, di], di), true);
                let mlps = (0..c)
                    .map(|i| PromptMlp {
                        fc1: Linear::new(store, rng, &format!("prompt.{j}.mlp.{i}.fc1"), dd, dd, true, true),
                        fc2: Linear::new(store, rng, &format!("prompt.{j}.mlp.{i}.fc2"), dd, dd, true, true),
                    })
                    .collect();
                PromptLayer { q, f, mlps }
            })
            .collect();
        Ok(PromptBank { config: config.clone(), layers })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn layers(&self) -> &[PromptLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn layer(&self, j: usize) -> Result<&PromptLayer> {
        self.layers
            .get(j)
            .ok_or_else(|| Error::Usage(format!("prompt layer {j} out of range 0..{}", self.layers.len())))
    }

    /// `Q_j` on the tape (0-based `j`).
    pub fn q<T: Element>(&self, p: &Bound, j: usize) -> Result<Var> {
        Ok(p.var(self.layer(j)?.q))
    }

    /// `A_j = MLP_j(f_j(Q_j))`, shape `(c, d_D)`. Row `i` only sees row `i`
    /// of `Q_j`.
    pub fn compute_a<T: Element>(&self, g: &mut Graph<T>, p: &Bound, j: usize) -> Result<Var> {
        let layer = self.layer(j)?;
        let reduced = g.matmul_nt(p.var(layer.q), p.var(layer.f))?;
        let rows = layer
            .mlps
            .iter()
            .enumerate()
            .map(|(i, mlp)| {
                let r = g.slice_rows(reduced, i, 1)?;
                let h = mlp.fc1.forward(g, p, r)?;
                let h = g.gelu(h)?;
                mlp.fc2.forward(g, p, h)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat(&rows)
    }

    /// All parameters owned by the bank.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(l.q);
            ids.push(l.f);
            for m in &l.mlps {
                ids.extend([m.fc1.weight, m.fc2.weight]);
                ids.extend(m.fc1.bias);
                ids.extend(m.fc2.bias);
            }
        }
        ids
    }
}

/// Builds a standalone bank in its own store. Same seed, same bits.
pub fn init_prompts<T: Element>(config: &PromptConfig, seed: u64) -> Result<(ParamStore<T>, PromptBank)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = PromptBank::new(&mut store, config, &mut rng)?;
    Ok((store, bank))
}

/// An 8-bit grayscale attention heat image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    /// 1-based prompt index.
    pub prompt: usize,
    pub kind: PromptKind,
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn file_name(&self) -> String {
        format!("layer{}_prompt{}_{}.pgm", self.layer, self.prompt, self.kind.as_str())
    }
}

/// Upsamples every prompt's attention row to `image_size x image_size` and
/// min-max normalizes it to 0..=255. Constant maps come out all zero.
pub fn export_heatmaps(records: &[AttentionRecord], image_size: usize) -> Result<Vec<Heatmap>> {
    if records.is_empty() {
        return Err(Error::Usage("no attention records to export".into()));
    }
    let mut q_layers: Vec<usize> = records.iter().filter(|r| r.kind == PromptKind::Q).map(|r| r.layer).collect();
    let mut a_layers: Vec<usize> = records.iter().filter(|r| r.kind == PromptKind::A).map(|r| r.layer).collect();
    q_layers.sort_unstable();
    a_layers.sort_unstable();
    if q_layers != a_layers {
        return Err(Error::Usage(format!(
            "Q records for layers {q_layers:?} but A records for layers {a_layers:?}"
        )));
    }
    let mut out = Vec::new();
    let mut sorted: Vec<&AttentionRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.layer, r.kind == PromptKind::A));
    for rec in sorted {
        let (count, tokens) = (rec.weights.shape()[0], rec.weights.shape()[1]);
        let grid = (tokens as f64).sqrt().round() as usize;
        if grid * grid != tokens {
            return Err(Error::shape("export_heatmaps", format!("{tokens} tokens is not a square grid")));
        }
        for i in 0..count {
            let row = &rec.weights.data()[i * tokens..(i + 1) * tokens];
            let up = resize_bilinear(row, grid, grid, image_size, image_size);
            out.push(Heatmap {
                layer: rec.layer,
                prompt: i + 1,
                kind: rec.kind,
                size: image_size,
                pixels: normalize_to_u8(&up),
            });
        }
    }
    Ok(out)
}

/// Tolerance under which a map counts as constant.
const CONSTANT_RANGE: f64 = 1e-12;

fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= CONSTANT_RANGE {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn write_heatmaps(dir: &Path, maps: &[Heatmap]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.iter()
        .map(|m| {
            let path = dir.join(m.file_name());
            pgm::write_gray(&path, m.size, m.size, &m.pixels)?;
            Ok(path)
        })
        .collect()
}
