use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    /// Decoder-only, trained with causal LM.
    DecLLM,
    /// Balanced encoder-decoder, trained with prefix LM.
    RedLLM,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::DecLLM => "dec",
            Arch::RedLLM => "red",
        }
    }
}

/// Layer counts: a single decoder stack, or `[encoder, decoder]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Layers {
    Decoder(usize),
    EncoderDecoder([usize; 2]),
}

pub const DEFAULT_ROTARY_BASE: f64 = 10_000.0;
pub const DEFAULT_BOT_ID: u32 = crate::data::special::BOT;

fn default_rotary_base() -> f64 {
    DEFAULT_ROTARY_BASE
}

fn default_bot_id() -> u32 {
    DEFAULT_BOT_ID
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d: usize,
    pub d_ffn: usize,
    pub h: usize,
    pub d_h: usize,
    pub layers: Layers,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub size_tag: String,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f64,
    /// First decoder input of the encoder-decoder model.
    #[serde(default = "default_bot_id")]
    pub bot_id: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_ffn == 0 || self.h == 0 || self.d_h == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_h.is_multiple_of(2) {
            return bad(format!("d_h = {} must be even for rotary pairs", self.d_h));
        }
        if self.rotary_base <= 1.0 {
            return bad(format!("rotary base {} must exceed 1", self.rotary_base));
        }
        match (self.arch, self.layers) {
            (Arch::DecLLM, Layers::Decoder(l)) if l > 0 => {}
            (Arch::RedLLM, Layers::EncoderDecoder([e, d])) if e > 0 && d > 0 => {
                if e != d {
                    return bad(format!("encoder-decoder must be balanced, got {e}/{d}"));
                }
                if self.bot_id as usize >= self.vocab_size {
                    return bad(format!("bot_id {} outside vocabulary {}", self.bot_id, self.vocab_size));
                }
            }
            (arch, layers) => return bad(format!("{arch:?} cannot use layers {layers:?}")),
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        match self.layers {
            Layers::Decoder(_) => 0,
            Layers::EncoderDecoder([e, _]) => e,
        }
    }

    pub fn decoder_layers(&self) -> usize {
        match self.layers {
            Layers::Decoder(l) => l,
            Layers::EncoderDecoder([_, d]) => d,
        }
    }

    /// Total attention width `h * d_h`.
    pub fn attn_width(&self) -> usize {
        self.h * self.d_h
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named configuration: `dec-150M` … `red-8B` for the full-size models,
    /// `dec-desk` / `red-desk` for laptop-sized models.
    pub fn preset(name: &str) -> Result<Self> {
        let (arch_tag, size) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
        let arch = match arch_tag {
            "dec" => Arch::DecLLM,
            "red" => Arch::RedLLM,
            _ => return Err(Error::Config(format!("unknown preset {name}"))),
        };
        // (d, d_ffn, h, d_h, L_dec, L_red per side, vocab, max_seq)
        let row = match size {
            "150M" => (1024, 4096, 8, 128, 8, 3, 32768, 2048),
            "1B" => (2048, 8192, 16, 128, 16, 7, 32768, 2048),
            "2B" => (2560, 10240, 20, 128, 20, 9, 32768, 2048),
            "4B" => (3072, 12288, 24, 128, 24, 10, 32768, 2048),
            "8B" => (4096, 16384, 32, 128, 32, 14, 32768, 2048),
            "desk" => (64, 256, 4, 16, 2, 2, 512, 256),
            "tiny" => (8, 32, 2, 4, 2, 2, 300, 64),
            _ => return Err(Error::Config(format!("unknown preset {name}"))),
        };
        let (d, d_ffn, h, d_h, l_dec, l_red, vocab_size, max_seq) = row;
        let layers = match arch {
            Arch::DecLLM => Layers::Decoder(l_dec),
            Arch::RedLLM => Layers::EncoderDecoder([l_red, l_red]),
        };
        Ok(Self {
            arch,
            d,
            d_ffn,
            h,
            d_h,
            layers,
            vocab_size,
            max_seq,
            size_tag: size.to_string(),
            rotary_base: DEFAULT_ROTARY_BASE,
            bot_id: DEFAULT_BOT_ID,
        })
    }

    pub const PRESETS: [&'static str; 14] = [
        "dec-150M", "dec-1B", "dec-2B", "dec-4B", "dec-8B", "dec-desk", "dec-tiny", "red-150M", "red-1B",
        "red-2B", "red-4B", "red-8B", "red-desk", "red-tiny",
    ];
}
