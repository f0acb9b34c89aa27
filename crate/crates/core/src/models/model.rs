use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{self, AttentionParams, RotaryConfig, SwiGluParams};
use crate::models::{Arch, AttentionMask, MaskKind, ModelConfig};
use crate::numerics::{Ops, ParamId, Params, SeedStreams, Tensor};

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    attn: AttentionParams,
    cross: Option<(ParamId, AttentionParams)>,
    ffn_norm: ParamId,
    ffn: SwiGluParams,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    encoder: Vec<Block>,
    encoder_norm: Option<ParamId>,
    decoder: Vec<Block>,
    final_norm: ParamId,
}

fn build_layout(
    cfg: &ModelConfig,
    mut alloc: impl FnMut(String, Vec<usize>, Init) -> Result<ParamId>,
) -> Result<Layout> {
    let (d, w, f) = (cfg.d, cfg.attn_width(), cfg.d_ffn);
    let output_norm = cfg.arch == Arch::RedLLM;
    let embed = alloc("embed".into(), vec![cfg.vocab_size, d], Init::Normal(1.0))?;

    let attention = |prefix: &str, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>| {
        let proj_std = 1.0 / (d as f64).sqrt();
        Ok::<_, Error>(AttentionParams {
            wq: alloc(format!("{prefix}.wq"), vec![d, w], Init::Normal(proj_std))?,
            wk: alloc(format!("{prefix}.wk"), vec![d, w], Init::Normal(proj_std))?,
            wv: alloc(format!("{prefix}.wv"), vec![d, w], Init::Normal(proj_std))?,
            wo: alloc(format!("{prefix}.wo"), vec![w, d], Init::Normal(1.0 / (w as f64).sqrt()))?,
            heads: cfg.h,
            head_dim: cfg.d_h,
            output_norm,
        })
    };

    let stack = |side: &str, n: usize, with_cross: bool, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>| {
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let p = format!("{side}.{i}");
            let attn_norm = alloc(format!("{p}.attn_norm"), vec![d], Init::Ones)?;
            let attn = attention(&format!("{p}.attn"), alloc)?;
            let cross = if with_cross {
                let norm = alloc(format!("{p}.cross_norm"), vec![d], Init::Ones)?;
                Some((norm, attention(&format!("{p}.cross"), alloc)?))
            } else {
                None
            };
            let ffn_norm = alloc(format!("{p}.ffn_norm"), vec![d], Init::Ones)?;
            let ffn = SwiGluParams {
                w_in: alloc(format!("{p}.ffn.w_in"), vec![d, f], Init::Normal(1.0 / (d as f64).sqrt()))?,
                w_gate: alloc(format!("{p}.ffn.w_gate"), vec![d, f], Init::Normal(1.0 / (d as f64).sqrt()))?,
                w_out: alloc(format!("{p}.ffn.w_out"), vec![f, d], Init::Normal(1.0 / (f as f64).sqrt()))?,
            };
            blocks.push(Block { attn_norm, attn, cross, ffn_norm, ffn });
        }
        Ok::<_, Error>(blocks)
    };

    let (encoder, encoder_norm) = if cfg.arch == Arch::RedLLM {
        let blocks = stack("enc", cfg.encoder_layers(), false, &mut alloc)?;
        (blocks, Some(alloc("enc.final_norm".into(), vec![d], Init::Ones)?))
    } else {
        (Vec::new(), None)
    };
    let decoder = stack("dec", cfg.decoder_layers(), cfg.arch == Arch::RedLLM, &mut alloc)?;
    // A zero final gain makes the untrained output distribution exactly uniform.
    let final_norm = alloc("final_norm".into(), vec![d], Init::Zeros)?;
    Ok(Layout { embed, encoder, encoder_norm, decoder, final_norm })
}

/// Instantiated DecLLM or RedLLM.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
    layout: Layout,
}

impl Model {
    /// Fresh model with deterministic initialisation from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeedStreams::new(seed).stream("init", 0);
        let mut params = Params::new();
        let layout = build_layout(&cfg, |name, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            Ok(params.add(name, Tensor::new(shape, data)?))
        })?;
        Ok(Self { cfg, params, layout })
    }

    /// Wraps an existing parameter set (e.g. a loaded checkpoint); names and
    /// shapes must match what `new` would create.
    pub fn from_params(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let mut expected = 0;
        let layout = build_layout(&cfg, |name, shape, _| {
            expected += 1;
            let id = params.id(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        })?;
        if expected != params.len() {
            return Err(Error::Config(format!("{} parameters, expected {expected}", params.len())));
        }
        Ok(Self { cfg, params, layout })
    }

    /// Same architecture over a different parameter set with identical layout.
    pub fn with_params(&self, params: Params) -> Result<Self> {
        Self::from_params(self.cfg.clone(), params)
    }

    pub fn final_norm(&self) -> ParamId {
        self.layout.final_norm
    }

    pub fn embedding(&self) -> ParamId {
        self.layout.embed
    }

    fn rotary(&self) -> RotaryConfig {
        RotaryConfig { base: self.cfg.rotary_base, head_dim: self.cfg.d_h }
    }
}

/// Inverted dropout on sublayer outputs.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Keep float32 copies of head-averaged attention weights.
    pub capture_attention: bool,
    pub dropout: Option<Dropout<'a>>,
    /// Allow sequences longer than `max_seq`.
    pub extrapolate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl AttentionKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AttentionKind::EncoderSelf => "encoder_self",
            AttentionKind::DecoderSelf => "decoder_self",
            AttentionKind::Cross => "cross",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CapturedAttention {
    pub kind: AttentionKind,
    pub layer: usize,
    pub t_q: usize,
    pub t_k: usize,
    /// Row-major `[t_q x t_k]`, averaged over heads.
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Positions {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

pub struct ForwardOutput<V> {
    /// `[T_out x V]`.
    pub logits: V,
    pub attention: Vec<CapturedAttention>,
    pub positions: Positions,
    pub max_abs_logit: f64,
}

struct Ctx<'o, 'a> {
    opts: &'o mut ForwardOptions<'a>,
    captures: Vec<CapturedAttention>,
    max_abs_logit: f64,
}

impl Ctx<'_, '_> {
    fn dropout<O: Ops>(&mut self, ops: &mut O, x: O::V) -> Result<O::V> {
        match self.opts.dropout.as_mut() {
            Some(d) if d.rate > 0.0 => {
                let keep = 1.0 - d.rate;
                let n = ops.value(&x).numel();
                let mask = (0..n).map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                ops.dropout(&x, mask)
            }
            _ => Ok(x),
        }
    }

    fn record(&mut self, kind: AttentionKind, layer: usize, t_q: usize, t_k: usize, out: &mut layers::AttentionOutput<impl Clone>) {
        self.max_abs_logit = self.max_abs_logit.max(out.max_abs_logit);
        if let Some(weights) = out.weights.take() {
            self.captures.push(CapturedAttention { kind, layer, t_q, t_k, weights });
        }
    }
}

struct Cross<'v, V> {
    states: &'v V,
    positions: &'v [usize],
}

#[allow(clippy::too_many_arguments)]
fn block<O: Ops>(
    ops: &mut O,
    model: &Model,
    b: &Block,
    x: O::V,
    positions: &[usize],
    mask: &AttentionMask,
    cross: Option<&Cross<'_, O::V>>,
    kind: AttentionKind,
    layer: usize,
    ctx: &mut Ctx,
) -> Result<O::V> {
    let params = &model.params;
    let rotary = model.rotary();
    let capture = ctx.opts.capture_attention;
    let t = positions.len();
    let visible = mask.matrix();

    let g = ops.param(params, b.attn_norm);
    let h = layers::rmsnorm(ops, &x, Some(&g))?;
    let mut a = layers::attention(ops, params, &b.attn, &rotary, &h, &h, positions, positions, visible.as_deref(), capture)?;
    ctx.record(kind, layer, t, t, &mut a);
    let a = ctx.dropout(ops, a.out)?;
    let mut x = ops.add(&x, &a)?;

    if let (Some((norm, p)), Some(c)) = (&b.cross, cross) {
        let g = ops.param(params, *norm);
        let h = layers::rmsnorm(ops, &x, Some(&g))?;
        let mut a = layers::attention(ops, params, p, &rotary, &h, c.states, positions, c.positions, None, capture)?;
        ctx.record(AttentionKind::Cross, layer, t, c.positions.len(), &mut a);
        let a = ctx.dropout(ops, a.out)?;
        x = ops.add(&x, &a)?;
    }

    let g = ops.param(params, b.ffn_norm);
    let h = layers::rmsnorm(ops, &x, Some(&g))?;
    let f = layers::swiglu_ffn(ops, params, &b.ffn, &h)?;
    let f = ctx.dropout(ops, f)?;
    ops.add(&x, &f)
}

fn check_tokens(model: &Model, tokens: &[u32], what: &str) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input(format!("empty {what} sequence")));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= model.cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: model.cfg.vocab_size });
    }
    Ok(())
}

fn check_length(model: &Model, len: usize, opts: &ForwardOptions) -> Result<()> {
    if len > model.cfg.max_seq && !opts.extrapolate {
        return Err(Error::Input(format!(
            "sequence length {len} exceeds max_seq {} (enable extrapolation to allow)",
            model.cfg.max_seq
        )));
    }
    Ok(())
}

fn unembed<O: Ops>(ops: &mut O, model: &Model, x: &O::V) -> Result<O::V> {
    let g = ops.param(&model.params, model.layout.final_norm);
    let h = layers::rmsnorm(ops, x, Some(&g))?;
    layers::tied_unembed(ops, &model.params, model.layout.embed, &h)
}

/// Decoder-only forward. Logits row `t` predicts `tokens[t + 1]`.
pub fn forward_decllm<O: Ops>(
    ops: &mut O,
    model: &Model,
    tokens: &[u32],
    mask: MaskKind,
    opts: &mut ForwardOptions,
) -> Result<ForwardOutput<O::V>> {
    if model.cfg.arch != Arch::DecLLM {
        return Err(Error::Config("forward_decllm needs a DecLLM config".into()));
    }
    check_tokens(model, tokens, "input")?;
    check_length(model, tokens.len(), opts)?;
    let t = tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let mask = AttentionMask::new(mask, t, t);
    let mut ctx = Ctx { opts, captures: Vec::new(), max_abs_logit: 0.0 };
    let mut x = layers::tied_embed(ops, &model.params, model.layout.embed, tokens)?;
    for (i, b) in model.layout.decoder.iter().enumerate() {
        x = block(ops, model, b, x, &positions, &mask, None, AttentionKind::DecoderSelf, i, &mut ctx)?;
    }
    let logits = unembed(ops, model, &x)?;
    Ok(ForwardOutput {
        logits,
        attention: ctx.captures,
        positions: Positions { encoder: Vec::new(), decoder: positions },
        max_abs_logit: ctx.max_abs_logit,
    })
}

/// Encoder states (post final norm) of a RedLLM over positions `0..k`.
pub struct Encoded<V> {
    pub states: V,
    pub positions: Vec<usize>,
    pub attention: Vec<CapturedAttention>,
    pub max_abs_logit: f64,
}

pub fn encode<O: Ops>(
    ops: &mut O,
    model: &Model,
    input: &[u32],
    opts: &mut ForwardOptions,
) -> Result<Encoded<O::V>> {
    if model.cfg.arch != Arch::RedLLM {
        return Err(Error::Config("encode needs a RedLLM config".into()));
    }
    if input.is_empty() {
        return Err(Error::Input("prefix length k must be at least 1".into()));
    }
    check_tokens(model, input, "input")?;
    let k = input.len();
    let positions: Vec<usize> = (0..k).collect();
    let mask = AttentionMask::new(MaskKind::Full, k, k);
    let mut ctx = Ctx { opts, captures: Vec::new(), max_abs_logit: 0.0 };
    let mut x = layers::tied_embed(ops, &model.params, model.layout.embed, input)?;
    for (i, b) in model.layout.encoder.iter().enumerate() {
        x = block(ops, model, b, x, &positions, &mask, None, AttentionKind::EncoderSelf, i, &mut ctx)?;
    }
    let norm = model.layout.encoder_norm.expect("RedLLM layout has an encoder norm");
    let g = ops.param(&model.params, norm);
    let states = layers::rmsnorm(ops, &x, Some(&g))?;
    Ok(Encoded { states, positions, attention: ctx.captures, max_abs_logit: ctx.max_abs_logit })
}

/// Runs the RedLLM decoder on explicit decoder inputs (first one is normally
/// the begin-of-target id). Positions continue from the encoder's last.
pub fn decode<O: Ops>(
    ops: &mut O,
    model: &Model,
    enc: &Encoded<O::V>,
    decoder_inputs: &[u32],
    opts: &mut ForwardOptions,
) -> Result<ForwardOutput<O::V>> {
    check_tokens(model, decoder_inputs, "decoder")?;
    let k = enc.positions.len();
    let n = decoder_inputs.len();
    check_length(model, k + n, opts)?;
    let positions: Vec<usize> = (k..k + n).collect();
    let mask = AttentionMask::new(MaskKind::Causal, n, n);
    let cross = Cross { states: &enc.states, positions: &enc.positions };
    let mut ctx = Ctx { opts, captures: Vec::new(), max_abs_logit: enc.max_abs_logit };
    let mut x = layers::tied_embed(ops, &model.params, model.layout.embed, decoder_inputs)?;
    for (i, b) in model.layout.decoder.iter().enumerate() {
        x = block(ops, model, b, x, &positions, &mask, Some(&cross), AttentionKind::DecoderSelf, i, &mut ctx)?;
    }
    let logits = unembed(ops, model, &x)?;
    let mut attention = enc.attention.clone();
    attention.extend(ctx.captures);
    Ok(ForwardOutput {
        logits,
        attention,
        positions: Positions { encoder: enc.positions.clone(), decoder: positions },
        max_abs_logit: ctx.max_abs_logit,
    })
}

/// Prefix-LM forward. Logits row `t` predicts `target[t]`; the decoder sees
/// `[bot] + target[..n-1]`.
pub fn forward_redllm<O: Ops>(
    ops: &mut O,
    model: &Model,
    input: &[u32],
    target: &[u32],
    opts: &mut ForwardOptions,
) -> Result<ForwardOutput<O::V>> {
    check_tokens(model, target, "target")?;
    let enc = encode(ops, model, input, opts)?;
    let mut dec_in = Vec::with_capacity(target.len());
    dec_in.push(model.cfg.bot_id);
    dec_in.extend_from_slice(&target[..target.len() - 1]);
    decode(ops, model, &enc, &dec_in, opts)
}
