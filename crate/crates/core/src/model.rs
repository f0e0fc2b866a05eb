//! The assembled segmentation model and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::self_prompt::{AttentionRecord, PromptBank, PromptConfig};

/// Which of the three components are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Q&A prompt pairs; otherwise the decoder gets learned constant tokens.
    pub qa_pairs: bool,
    /// One decoder block per tap; otherwise a single block at the last tap.
    pub hierarchical: bool,
    /// Adds the deepest decoder output to every shallower level.
    pub skip: bool,
}

impl Architecture {
    pub const FULL: Architecture = Architecture { qa_pairs: true, hierarchical: true, skip: true };

    pub fn validate(&self) -> Result<()> {
        if self.skip && !self.hierarchical {
            return Err(Error::config("skip connections require hierarchical decoding"));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::FULL
    }
}

/// The six ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    FtSam,
    Ablation1,
    Ablation2,
    Ablation3,
    Ablation4,
    Ablation5,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FtSam,
        Variant::Ablation1,
        Variant::Ablation2,
        Variant::Ablation3,
        Variant::Ablation4,
        Variant::Ablation5,
    ];

    pub fn architecture(self) -> Architecture {
        let (qa_pairs, hierarchical, skip) = match self {
            Variant::FtSam => (false, false, false),
            Variant::Ablation1 => (true, false, false),
            Variant::Ablation2 => (true, true, false),
            Variant::Ablation3 => (true, true, true),
            Variant::Ablation4 => (false, true, false),
            Variant::Ablation5 => (false, true, true),
        };
        Architecture { qa_pairs, hierarchical, skip }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FtSam => "Ft-SAM",
            Variant::Ablation1 => "Ablation_1",
            Variant::Ablation2 => "Ablation_2",
            Variant::Ablation3 => "Ablation_3",
            Variant::Ablation4 => "Ablation_4",
            Variant::Ablation5 => "Ablation_5",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Prompts per layer `c`; `None` means one per output class.
    pub prompt_count: Option<usize>,
    pub architecture: Architecture,
    /// Seed of the frozen backbone weights.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            prompt_count: None,
            architecture: Architecture::FULL,
            backbone_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest working size, used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 32,
                patch_size: 8,
                in_channels: 1,
                width: 32,
                depth: 4,
                global_layers: vec![1, 3],
                heads: 2,
                window_size: 2,
                lora_rank: 2,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig { width: 16, heads: 2, num_classes: 2 },
            prompt_count: Some(2),
            architecture: Architecture::FULL,
            backbone_seed: 0,
        }
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count.unwrap_or(self.decoder.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.architecture.validate()?;
        if self.prompt_count == Some(0) {
            return Err(Error::config("prompt count must be at least 1"));
        }
        if self.architecture.qa_pairs && self.decoder.width >= self.encoder.width {
            return Err(Error::config(format!(
                "bottleneck requires decoder width {} below encoder width {}",
                self.decoder.width, self.encoder.width
            )));
        }
        Ok(())
    }

    /// 1-based taps served by decoder levels, shallow to deep.
    pub fn decoder_taps(&self) -> Vec<usize> {
        let n = self.encoder.taps();
        if self.architecture.hierarchical {
            (1..=n).collect()
        } else {
            vec![n]
        }
    }
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    /// `(num_classes, H, W)`.
    pub logits: Var,
    /// Q records from the encoder then A records from the decoder, present
    /// only when Q&A pairs are enabled.
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    encoder: Encoder,
    bank: Option<PromptBank>,
    /// Learned decoder tokens per level when Q&A pairs are off.
    constant_tokens: Vec<ParamId>,
    decoder: Decoder,
}

impl<T: Element> SegModel<T> {
    /// Frozen weights come from `config.backbone_seed`, trainable ones from
    /// `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.encoder, &mut store, &mut frozen_rng, &mut rng)?;
        let taps = config.decoder_taps();
        let c = config.prompt_count();
        let (bank, constant_tokens) = if config.architecture.qa_pairs {
            let pc = PromptConfig {
                count: c,
                enc_width: config.encoder.width,
                dec_width: config.decoder.width,
                layers: taps.len(),
            };
            (Some(PromptBank::new(&mut store, &pc, &mut rng)?), Vec::new())
        } else {
            let tokens = (0..taps.len())
                .map(|l| store.add(format!("tokens.{l}"), init::normal(&mut rng, &[c, config.decoder.width], 0.02), true))
                .collect();
            (None, tokens)
        };
        let e = &config.encoder;
        let decoder = Decoder::new(
            &config.decoder,
            &mut store,
            &mut rng,
            e.width,
            taps,
            config.architecture.skip,
            e.grid(),
            e.patch_size,
        )?;
        Ok(SegModel { config: config.clone(), store, encoder, bank, constant_tokens, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn bank(&self) -> Option<&PromptBank> {
        self.bank.as_ref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Logits for one `(C, H, W)` image; no user prompts of any kind.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<ForwardOutput> {
        let taps = self.decoder.taps().to_vec();
        let mut slots = vec![None; self.config.encoder.taps()];
        if let Some(bank) = &self.bank {
            for (level, &tap) in taps.iter().enumerate() {
                slots[tap - 1] = Some(bank.q::<T>(p, level)?);
            }
        }
        let enc = self.encoder.forward(g, p, image, &slots)?;
        let embeddings: Vec<Var> = taps.iter().map(|&t| enc.embeddings[t - 1]).collect();
        let tokens = match &self.bank {
            Some(bank) => (0..taps.len()).map(|l| bank.compute_a(g, p, l)).collect::<Result<Vec<_>>>()?,
            None => self.constant_tokens.iter().map(|&id| p.var(id)).collect(),
        };
        let state = self.decoder.fuse_chain(g, p, &embeddings, &tokens)?;
        let logits = self.decoder.predict_masks(g, p, &state)?;
        let mut attention = enc.prompt_attention;
        if self.bank.is_some() {
            attention.extend(state.attention);
        }
        Ok(ForwardOutput { logits, attention })
    }

    /// Inference without gradients.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<AttentionRecord>)> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok((g.value(out.logits).clone(), out.attention))
    }

    /// Same model in another precision.
    pub fn cast<U: Element>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            bank: self.bank.clone(),
            constant_tokens: self.constant_tokens.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::self_prompt::PromptKind;

    fn small(arch: Architecture) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 32,
                patch_size: 8,
                width: 32,
                depth: 4,
                global_layers: vec![1, 3],
                heads: 2,
                window_size: 2,
                lora_rank: 2,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { width: 16, heads: 2, num_classes: 2 },
            architecture: arch,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_architectures() {
        assert_eq!(Variant::Ablation3.architecture(), Architecture::FULL);
        assert_eq!(Variant::ALL.len(), 6);
        assert_eq!("Ft-SAM".parse::<Variant>().unwrap(), Variant::FtSam);
        let bad = Architecture { qa_pairs: true, hierarchical: false, skip: true };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_records() {
        let m = SegModel::<f64>::new(&small(Architecture::FULL), 1).unwrap();
        let (logits, att) = m.predict(&Tensor::full([1, 32, 32], 0.5)).unwrap();
        assert_eq!(logits.shape(), &[2, 32, 32]);
        assert_eq!(att.len(), 4);
        assert_eq!(att.iter().filter(|r| r.kind == PromptKind::A).count(), 2);
        for r in &att {
            assert_eq!(r.weights.shape(), &[2, 16]);
        }
    }

    #[test]
    fn prompt_count_defaults_to_classes() {
        let mut cfg = small(Architecture::FULL);
        assert_eq!(cfg.prompt_count(), 2);
        cfg.prompt_count = Some(5);
        let m = SegModel::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(m.store.get(m.bank().unwrap().layers()[0].q).shape(), &[5, 32]);
    }

    #[test]
    fn parameter_order_across_variants() {
        let count = |v: Variant| SegModel::<f32>::new(&small(v.architecture()), 0).unwrap().trainable_count();
        let [_, a1, a2, a3, a4, a5] = Variant::ALL.map(count);
        assert!(a1 < a4);
        assert_eq!(a4, a5);
        assert!(a5 < a2);
        assert_eq!(a2, a3);
    }

    #[test]
    fn single_level_variant_records_last_tap() {
        let m = SegModel::<f64>::new(&small(Variant::Ablation1.architecture()), 0).unwrap();
        let (_, att) = m.predict(&Tensor::full([1, 32, 32], 0.5)).unwrap();
        assert_eq!(att.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![2, 2]);
        let m = SegModel::<f64>::new(&small(Variant::FtSam.architecture()), 0).unwrap();
        assert!(m.predict(&Tensor::full([1, 32, 32], 0.5)).unwrap().1.is_empty());
    }
}
