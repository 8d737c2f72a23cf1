//! Causal decoder-only transformer with the four style-injection variants.
//!
//! Layer order is pre-norm: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`, with
//! a final layer norm producing the feature sequence that the tied output
//! embedding turns into logits. Position-table row 0 is reserved for the
//! prepended style slot of variant B; tokens always use rows `1..=L`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Where the style code enters the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Plain language model, no style input.
    #[default]
    #[serde(rename = "none")]
    None,
    /// Style code added to every input embedding.
    A,
    /// Style code prepended as an extra input position.
    B,
    /// Style-derived query in every self-attention layer.
    C,
    /// Style-modulated scale and bias in every layer norm.
    D,
}

impl Variant {
    pub const STYLED: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn code(self) -> u32 {
        match self {
            Variant::None => 0,
            Variant::A => 1,
            Variant::B => 2,
            Variant::C => 3,
            Variant::D => 4,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => Variant::None,
            1 => Variant::A,
            2 => Variant::B,
            3 => Variant::C,
            4 => Variant::D,
            c => bail!(Config, "unknown variant code {c}"),
        })
    }

    /// Extra leading positions the variant adds to the decoder input.
    pub fn prefix_len(self) -> usize {
        usize::from(self == Variant::B)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "NONE" => Variant::None,
            "A" | "a" => Variant::A,
            "B" | "b" => Variant::B,
            "C" | "c" => Variant::C,
            "D" | "d" => Variant::D,
            other => bail!(Config, "unknown variant {other:?} (expected A, B, C, D or none)"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub variant: Variant,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized defaults over the byte vocabulary.
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers: 4,
            max_len: 64,
            vocab: crate::corpus::VOCAB_SIZE,
            variant: Variant::None,
            ln_eps: 1e-5,
        }
    }

    /// The full-size model: 768 wide, 16 heads, 16 layers, 512 positions,
    /// 50257-entry vocabulary.
    pub fn full_scale() -> Self {
        Self {
            hidden: 768,
            heads: 16,
            layers: 16,
            max_len: 512,
            vocab: 50257,
            variant: Variant::None,
            ln_eps: 1e-5,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            bail!(Config, "hidden {} must be a positive multiple of heads {}", self.hidden, self.heads);
        }
        if self.layers == 0 {
            bail!(Config, "need at least one layer");
        }
        if self.max_len < 2 {
            bail!(Config, "max_len must be at least 2");
        }
        if self.vocab < crate::corpus::NUM_SPECIALS {
            bail!(Config, "vocab {} smaller than the special-token set", self.vocab);
        }
        if !(self.ln_eps > 0.0) {
            bail!(Config, "ln_eps must be positive");
        }
        Ok(())
    }

    /// Architecture-defining dims (everything except the variant).
    pub fn same_core(&self, other: &ModelConfig) -> bool {
        self.hidden == other.hidden
            && self.heads == other.heads
            && self.layers == other.layers
            && self.max_len == other.max_len
            && self.vocab == other.vocab
    }
}

const INIT_STD: f32 = 0.02;

pub(crate) fn normal<R: Rng>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], std, rng)
}

fn zeros(cols: usize) -> Tensor {
    Tensor::zeros(&[1, cols])
}

fn ones(cols: usize) -> Tensor {
    Tensor::full(&[1, cols], 1.0)
}

/// Affine map `x·W + b` stored as `[in×out]` and `[1×out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal(fan_in, fan_out, std, rng));
        let b = store.add(format!("{name}.b"), zeros(fan_out));
        Self { w, b }
    }

    /// Map with fixed initial values (used for identity-initialised style
    /// modulation).
    pub fn build_const(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: f32) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::full(&[1, fan_out], bias));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: Bound, x: Var) -> Result<Var> {
        let w = p.var(tape, self.w);
        let b = p.var(tape, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Style-conditioned scale and bias for variant D.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma: Linear,
    pub beta: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: usize,
    pub bias: usize,
    pub modulation: Option<Modulation>,
}

impl NormParams {
    fn build(store: &mut ParamStore, name: &str, width: usize, modulated: bool) -> Self {
        let gain = store.add(format!("{name}.g"), ones(width));
        let bias = store.add(format!("{name}.b"), zeros(width));
        let modulation = modulated.then(|| Modulation {
            gamma: Linear::build_const(store, &format!("{name}.gamma_net"), width, width, 1.0),
            beta: Linear::build_const(store, &format!("{name}.beta_net"), width, width, 0.0),
        });
        Self { gain, bias, modulation }
    }

    fn apply(&self, tape: &mut Tape, p: Bound, x: Var, z: Option<Var>, eps: f32) -> Result<Var> {
        let gain = p.var(tape, self.gain);
        let bias = p.var(tape, self.bias);
        match (self.modulation, z) {
            (Some(m), Some(z)) => {
                let gz = m.gamma.apply(tape, p, z)?;
                let gamma = tape.mul(gain, gz)?;
                let bz = m.beta.apply(tape, p, z)?;
                let beta = tape.add(bias, bz)?;
                adaptive_layer_norm(tape, x, gamma, beta, eps)
            }
            (Some(_), None) => bail!(Contract, "variant D layer norm needs a style code"),
            (None, _) => adaptive_layer_norm(tape, x, gain, bias, eps),
        }
    }
}

/// `γ ⊙ (h − μ)/√(σ² + ε) + β` with per-row statistics over the channels
/// and `γ`, `β` given as `[1×B]` rows.
pub fn adaptive_layer_norm(tape: &mut Tape, h: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
    let normed = tape.layer_norm(h, eps);
    let scaled = tape.mul_row(normed, gamma)?;
    tape.add_row(scaled, beta)
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1: NormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: NormParams,
    pub fc: Linear,
    pub proj: Linear,
    /// Variant C: style code → attention query.
    pub style_query: Option<Linear>,
}

/// Parameter layout of one transformer stack inside a store.
#[derive(Clone, Debug)]
pub struct TransformerNet {
    pub config: ModelConfig,
    pub token_table: Option<usize>,
    pub position_table: usize,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
}

impl TransformerNet {
    /// Add a stack's parameters to `store` under `prefix`. With
    /// `with_tokens = false` the stack consumes pre-embedded inputs.
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: &ModelConfig,
        with_tokens: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let b = config.hidden;
        let token_table = with_tokens
            .then(|| store.add(format!("{prefix}tok_emb"), normal(config.vocab, b, INIT_STD, rng)));
        let position_table =
            store.add(format!("{prefix}pos_emb"), normal(config.max_len + 1, b, INIT_STD, rng));
        let resid_std = INIT_STD / (2.0 * config.layers as f32).sqrt();
        let modulated = config.variant == Variant::D;
        let layers = (0..config.layers)
            .map(|m| {
                let n = format!("{prefix}layer{m}");
                LayerParams {
                    ln1: NormParams::build(store, &format!("{n}.ln1"), b, modulated),
                    query: Linear::build(store, &format!("{n}.attn.q"), b, b, INIT_STD, rng),
                    key: Linear::build(store, &format!("{n}.attn.k"), b, b, INIT_STD, rng),
                    value: Linear::build(store, &format!("{n}.attn.v"), b, b, INIT_STD, rng),
                    out: Linear::build(store, &format!("{n}.attn.o"), b, b, resid_std, rng),
                    ln2: NormParams::build(store, &format!("{n}.ln2"), b, modulated),
                    fc: Linear::build(store, &format!("{n}.mlp.fc"), b, 4 * b, INIT_STD, rng),
                    proj: Linear::build(store, &format!("{n}.mlp.proj"), 4 * b, b, resid_std, rng),
                    style_query: (config.variant == Variant::C).then(|| {
                        Linear::build(store, &format!("{n}.attn.style_q"), b, b, INIT_STD, rng)
                    }),
                }
            })
            .collect();
        let final_norm = NormParams::build(store, &format!("{prefix}ln_f"), b, false);
        Ok(Self { config: config.clone(), token_table, position_table, layers, final_norm })
    }

    /// Embed `tokens` into the decoder input: token + position rows, with the
    /// variant-A bias or the variant-B style slot applied.
    pub fn embed(&self, tape: &mut Tape, p: Bound, tokens: &[u32], z: Option<Var>) -> Result<Var> {
        let Some(table) = self.token_table else {
            bail!(Contract, "stack was built without a token table");
        };
        if tokens.is_empty() {
            bail!(Contract, "empty token sequence");
        }
        if tokens.len() > self.config.max_len {
            bail!(Contract, "sequence of {} exceeds max length {}", tokens.len(), self.config.max_len);
        }
        let table = p.var(tape, table);
        let tok = tape.gather(table, tokens)?;
        self.add_positions(tape, p, tok, z)
    }

    /// Add position rows (and variant A/B style input) to pre-embedded rows.
    pub fn add_positions(&self, tape: &mut Tape, p: Bound, x: Var, z: Option<Var>) -> Result<Var> {
        let len = tape.shape(x).0;
        if len > self.config.max_len {
            bail!(Contract, "sequence of {len} exceeds max length {}", self.config.max_len);
        }
        let pos_table = p.var(tape, self.position_table);
        let ids: Vec<u32> = (1..=len as u32).collect();
        let pos = tape.gather(pos_table, &ids)?;
        let x = tape.add(x, pos)?;
        match self.config.variant {
            Variant::None => Ok(x),
            Variant::A => tape.add_row(x, require_z(z)?),
            Variant::B => {
                let slot_pos = tape.gather(pos_table, &[0])?;
                let slot = tape.add(require_z(z)?, slot_pos)?;
                tape.concat_rows(&[slot, x])
            }
            Variant::C | Variant::D => {
                require_z(z)?;
                Ok(x)
            }
        }
    }

    /// Run the stack over already-embedded input rows.
    pub fn run(
        &self,
        tape: &mut Tape,
        p: Bound,
        mut x: Var,
        z: Option<Var>,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let eps = self.config.ln_eps;
        for layer in &self.layers {
            let u = layer.ln1.apply(tape, p, x, z, eps)?;
            let style_q = match (&layer.style_query, self.config.variant) {
                (Some(q), Variant::C) => Some(q.apply(tape, p, require_z(z)?)?),
                _ => None,
            };
            let a = causal_attention(tape, p, layer, &self.config, u, style_q, attention.as_deref_mut())?;
            x = tape.add(x, a)?;
            let u = layer.ln2.apply(tape, p, x, z, eps)?;
            let hidden = layer.fc.apply(tape, p, u)?;
            let hidden = tape.gelu(hidden);
            let m = layer.proj.apply(tape, p, hidden)?;
            x = tape.add(x, m)?;
        }
        self.final_norm.apply(tape, p, x, None, eps)
    }

    /// Token ids → final feature rows `[L'×B]` (`L' = L + 1` for variant B).
    pub fn features(&self, tape: &mut Tape, p: Bound, tokens: &[u32], z: Option<Var>) -> Result<Var> {
        let x = self.embed(tape, p, tokens, z)?;
        self.run(tape, p, x, z, None)
    }

    /// Tied output embedding: `features · token_tableᵀ`.
    pub fn logits(&self, tape: &mut Tape, p: Bound, features: Var) -> Result<Var> {
        let Some(table) = self.token_table else {
            bail!(Contract, "stack was built without a token table");
        };
        let table = p.var(tape, table);
        tape.matmul_t(features, table)
    }
}

fn require_z(z: Option<Var>) -> Result<Var> {
    z.ok_or_else(|| Error::Contract("this variant needs a style code".into()))
}

/// Multi-head causal self-attention over `h: [L×B]`. When `style_query` is
/// given (variant C, a `[1×B]` row) it replaces the content queries at every
/// position. Per-head attention matrices are appended to `trace` if present.
pub fn causal_attention(
    tape: &mut Tape,
    p: Bound,
    layer: &LayerParams,
    config: &ModelConfig,
    h: Var,
    style_query: Option<Var>,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (len, width) = tape.shape(h);
    if width != config.hidden {
        bail!(Shape, "attention input width {width} != hidden {}", config.hidden);
    }
    let q = match style_query {
        Some(sq) => tape.repeat_rows(sq, len)?,
        None => layer.query.apply(tape, p, h)?,
    };
    let k = layer.key.apply(tape, p, h)?;
    let v = layer.value.apply(tape, p, h)?;
    let d = config.head_dim();
    let scale = 1.0 / (d as f32).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for head in 0..config.heads {
        let qh = tape.slice_cols(q, head * d, d)?;
        let kh = tape.slice_cols(k, head * d, d)?;
        let vh = tape.slice_cols(v, head * d, d)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.causal_softmax(scores)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(weights);
        }
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    layer.out.apply(tape, p, merged)
}

/// Position-wise three-layer MLP over encoder features followed by a mean
/// over positions, producing one style code.
#[derive(Clone, Debug)]
pub struct StyleHead {
    pub layers: [Linear; 3],
}

impl StyleHead {
    pub fn build<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        let std = 1.0 / (width as f32).sqrt();
        let mk = |store: &mut ParamStore, i: usize, rng: &mut R| {
            Linear::build(store, &format!("{prefix}style_head.{i}"), width, width, std, rng)
        };
        let l0 = mk(store, 0, rng);
        let l1 = mk(store, 1, rng);
        let l2 = mk(store, 2, rng);
        Self { layers: [l0, l1, l2] }
    }

    /// `[L×B]` per-token features → `[1×B]` style code.
    pub fn apply(&self, tape: &mut Tape, p: Bound, feats: Var) -> Result<Var> {
        let mut x = feats;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.apply(tape, p, x)?;
            if i < 2 {
                x = tape.gelu(x);
            }
        }
        Ok(tape.mean_rows(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig { hidden: 16, heads: 2, layers: 2, max_len: 12, vocab: 260, variant, ln_eps: 1e-5 }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        let mut c = tiny(Variant::None);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(Variant::None);
        c.max_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny(Variant::None);
        c.vocab = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in [Variant::None, Variant::A, Variant::B, Variant::C, Variant::D] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()).unwrap(), v);
        }
        assert!("E".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_specific_params_exist_only_when_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in [Variant::None, Variant::A, Variant::B, Variant::C, Variant::D] {
            let mut store = ParamStore::new();
            TransformerNet::build(&mut store, "", &tiny(v), true, &mut rng).unwrap();
            let has_gamma = store.iter().any(|(n, _)| n.contains("gamma_net"));
            let has_sq = store.iter().any(|(n, _)| n.contains("style_q"));
            assert_eq!(has_gamma, v == Variant::D);
            assert_eq!(has_sq, v == Variant::C);
        }
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = TransformerNet::build(&mut store, "", &tiny(Variant::None), true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let toks = vec![1u32; 13];
        assert!(matches!(
            net.features(&mut tape, Bound::frozen(&store), &toks, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn styled_variants_need_a_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Variant::STYLED {
            let mut store = ParamStore::new();
            let net = TransformerNet::build(&mut store, "", &tiny(v), true, &mut rng).unwrap();
            let mut tape = Tape::new();
            assert!(net.features(&mut tape, Bound::frozen(&store), &[1, 2, 3], None).is_err());
        }
    }
}
