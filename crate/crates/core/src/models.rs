//! The named networks: the frozen language model `H`, the generator bundle
//! `F = (F_s, F_g, F_o)`, the style comparator `C` and the feature-sequence
//! discriminator `D`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Mode, ParamStore, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{softmax_row_into, Tensor};
use crate::transformer::{Linear, ModelConfig, StyleHead, TransformerNet, Variant};

fn bind(store: &ParamStore, mode: Mode) -> Bound<'_> {
    Bound { store, mode }
}

/// Left-to-right language model over the token vocabulary.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub store: ParamStore,
    pub net: TransformerNet,
}

impl LanguageModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let config = config.clone().with_variant(Variant::None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = TransformerNet::build(&mut store, "", &config, true, &mut rng)?;
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// `(features [L×B], logits [L×V])`.
    pub fn forward(&self, tape: &mut Tape, mode: Mode, tokens: &[u32]) -> Result<(Var, Var)> {
        let p = bind(&self.store, mode);
        let feats = self.net.features(tape, p, tokens, None)?;
        let logits = self.net.logits(tape, p, feats)?;
        Ok((feats, logits))
    }

    /// Frozen final-layer features on `tape`.
    pub fn features(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Var> {
        self.net.features(tape, Bound::frozen(&self.store), tokens, None)
    }

    /// Final-layer feature rows, off-tape.
    pub fn feature_rows(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.features(&mut tape, tokens)?;
        Ok(tape.value(f).clone())
    }

    /// Mean over positions of the final-layer features.
    pub fn pooled_features(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(mean_rows(&self.feature_rows(tokens)?))
    }

    /// Per-position next-token distributions `[L×V]`.
    pub fn next_token_probs(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, Mode::Frozen, tokens)?;
        let logits = tape.value(logits);
        let (rows, cols) = logits.dims2()?;
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            softmax_row_into(logits.row_slice(r), &mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of `tokens[1..]` given their prefixes.
    pub fn mean_nll(&self, tokens: &[u32]) -> Result<f64> {
        self.continuation_nll(tokens, 1)
    }

    /// Mean negative log-likelihood of `tokens[start..]`, each conditioned
    /// on everything before it.
    pub fn continuation_nll(&self, tokens: &[u32], start: usize) -> Result<f64> {
        if tokens.len() < 2 {
            bail!(Contract, "need at least two tokens to score, got {}", tokens.len());
        }
        if start == 0 || start >= tokens.len() {
            bail!(Contract, "scored span must start in 1..{}, got {start}", tokens.len());
        }
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, Mode::Frozen, &tokens[..tokens.len() - 1])?;
        let n = tokens.len() - start;
        let head = tape.slice_rows(logits, start - 1, n)?;
        let ce = tape.cross_entropy(head, &tokens[start..])?;
        Ok(tape.scalar(ce) as f64)
    }
}

pub(crate) fn mean_rows(t: &Tensor) -> Vec<f32> {
    let (rows, cols) = t.dims2().expect("feature rows are matrices");
    let mut acc = vec![0.0f64; cols];
    for r in 0..rows {
        for (a, &v) in acc.iter_mut().zip(t.row_slice(r)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / rows as f64) as f32).collect()
}

/// Decoding rule for free-running generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f32 },
}

impl Sampling {
    fn validate(self) -> Result<()> {
        if let Sampling::TopK { k, temperature } = self {
            if k == 0 {
                bail!(Config, "top-k needs k >= 1");
            }
            if !(temperature > 0.0) || !temperature.is_finite() {
                bail!(Config, "temperature must be positive and finite");
            }
        }
        Ok(())
    }

    /// Pick one id from a logit row.
    pub fn pick<R: Rng>(self, logits: &[f32], rng: &mut R) -> u32 {
        match self {
            Sampling::Greedy => argmax(logits),
            Sampling::TopK { k: 1, .. } => argmax(logits),
            Sampling::TopK { k, temperature } => {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                // Stable sort: ties keep the lower id first.
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
                order.truncate(k.min(logits.len()));
                let scaled: Vec<f32> = order.iter().map(|&i| logits[i] / temperature).collect();
                let mut probs = vec![0.0; scaled.len()];
                softmax_row_into(&scaled, &mut probs);
                let u: f32 = rng.gen();
                let mut acc = 0.0;
                for (&i, &p) in order.iter().zip(&probs) {
                    acc += p;
                    if u < acc {
                        return i as u32;
                    }
                }
                *order.last().unwrap() as u32
            }
        }
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Outputs of one teacher-forced decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    /// `[(L−1)×V]`: row `t` predicts token `t + 1`.
    pub logits: Var,
    /// `[L×B]`, token-aligned (the variant-B slot is dropped).
    pub features: Var,
    pub z: Var,
}

/// Style encoder `F_s` (a transformer stack plus style head) and decoder
/// `F_g` whose tied token table is the output embedding `F_o`.
#[derive(Clone, Debug)]
pub struct GeneratorBundle {
    pub store: ParamStore,
    pub encoder: TransformerNet,
    pub head: StyleHead,
    pub decoder: TransformerNet,
}

pub const ENCODER_PREFIX: &str = "fs.";
pub const DECODER_PREFIX: &str = "fg.";

impl GeneratorBundle {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.variant == Variant::None {
            bail!(Config, "the generator needs a style variant (A, B, C or D)");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_cfg = config.clone().with_variant(Variant::None);
        let encoder = TransformerNet::build(&mut store, ENCODER_PREFIX, &enc_cfg, true, &mut rng)?;
        let head = StyleHead::build(&mut store, ENCODER_PREFIX, config.hidden, &mut rng);
        let decoder = TransformerNet::build(&mut store, DECODER_PREFIX, config, true, &mut rng)?;
        Ok(Self { store, encoder, head, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.decoder.config
    }

    pub fn variant(&self) -> Variant {
        self.decoder.config.variant
    }

    /// `z = F_s(reference)`, a `[1×B]` row.
    pub fn style_code(&self, tape: &mut Tape, mode: Mode, reference: &[u32]) -> Result<Var> {
        if reference.is_empty() {
            bail!(Contract, "empty style reference");
        }
        let p = bind(&self.store, mode);
        let feats = self.encoder.features(tape, p, reference, None)?;
        self.head.apply(tape, p, feats)
    }

    /// Off-tape style code.
    pub fn style_code_value(&self, reference: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.style_code(&mut tape, Mode::Frozen, reference)?;
        Ok(tape.value(z).clone())
    }

    /// Token-aligned `(features [L×B], logits [L×V])` of the decoder.
    pub fn decode(&self, tape: &mut Tape, mode: Mode, tokens: &[u32], z: Var) -> Result<(Var, Var)> {
        let p = bind(&self.store, mode);
        let mut feats = self.decoder.features(tape, p, tokens, Some(z))?;
        let prefix = self.variant().prefix_len();
        if prefix > 0 {
            feats = tape.slice_rows(feats, prefix, tokens.len())?;
        }
        let logits = self.decoder.logits(tape, p, feats)?;
        Ok((feats, logits))
    }

    /// Decoder features including any prepended slot (`L' = L + 1` for
    /// variant B).
    pub fn raw_features(&self, tape: &mut Tape, mode: Mode, tokens: &[u32], z: Var) -> Result<Var> {
        self.decoder.features(tape, bind(&self.store, mode), tokens, Some(z))
    }

    /// One decoder pass over `sequence` with the style of `reference`.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        mode: Mode,
        sequence: &[u32],
        reference: &[u32],
    ) -> Result<TeacherForced> {
        if sequence.len() < 2 {
            bail!(Contract, "teacher forcing needs at least two tokens");
        }
        let z = self.style_code(tape, mode, reference)?;
        let (features, logits) = self.decode(tape, mode, sequence, z)?;
        let logits = tape.slice_rows(logits, 0, sequence.len() - 1)?;
        Ok(TeacherForced { logits, features, z })
    }

    /// Autoregressive continuation of `context` in the style of
    /// `reference`. Runs off-tape; use [`GeneratorBundle::continuation_features`]
    /// to obtain differentiable features for the result.
    pub fn generate(
        &self,
        context: &[u32],
        reference: &[u32],
        n_gen: usize,
        sampling: Sampling,
        seed: u64,
    ) -> Result<Vec<u32>> {
        let z = self.style_code_value(reference)?;
        self.generate_with_code(context, &z, n_gen, sampling, seed)
    }

    pub fn generate_with_code(
        &self,
        context: &[u32],
        z: &Tensor,
        n_gen: usize,
        sampling: Sampling,
        seed: u64,
    ) -> Result<Vec<u32>> {
        sampling.validate()?;
        if context.is_empty() {
            bail!(Contract, "empty generation context");
        }
        if n_gen == 0 {
            bail!(Contract, "n_gen must be at least 1");
        }
        if context.len() + n_gen > self.config().max_len {
            bail!(
                Contract,
                "context {} + n_gen {} exceeds max length {}",
                context.len(),
                n_gen,
                self.config().max_len
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = context.to_vec();
        for _ in 0..n_gen {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone())?;
            let (_, logits) = self.decode(&mut tape, Mode::Frozen, &seq, zv)?;
            let logits = tape.value(logits);
            let last = logits.row_slice(seq.len() - 1);
            seq.push(sampling.pick(last, &mut rng));
        }
        Ok(seq[context.len()..].to_vec())
    }

    /// Decoder features at the generated positions of `context ⊕ generated`
    /// with the token ids held fixed; differentiable in `z` and the decoder.
    pub fn continuation_features(
        &self,
        tape: &mut Tape,
        mode: Mode,
        context: &[u32],
        generated: &[u32],
        z: Var,
    ) -> Result<Var> {
        if generated.is_empty() {
            bail!(Contract, "empty continuation");
        }
        let mut seq = context.to_vec();
        seq.extend_from_slice(generated);
        let (feats, _) = self.decode(tape, mode, &seq, z)?;
        tape.slice_rows(feats, context.len(), generated.len())
    }

    /// Copy every architecture-shared tensor of `lm` into both the encoder
    /// and the decoder. Variant-specific parameters and the style head keep
    /// their fresh initialisation.
    pub fn init_from_lm(&mut self, lm: &LanguageModel) -> Result<()> {
        if !lm.config().same_core(self.config()) {
            bail!(Contract, "language model and generator configs differ in core dimensions");
        }
        for id in 0..lm.store.len() {
            let name = lm.store.name(id);
            let value = lm.store.get(id).clone();
            for prefix in [ENCODER_PREFIX, DECODER_PREFIX] {
                let full = format!("{prefix}{name}");
                let Some(target) = self.store.find(&full) else {
                    bail!(Contract, "generator has no parameter {full}");
                };
                self.store.set(target, value.clone())?;
            }
        }
        Ok(())
    }
}

/// Binary same-style scorer over two feature sequences: mean-pool each,
/// concatenate, `2B → B → 1` MLP, sigmoid.
#[derive(Clone, Debug)]
pub struct Comparator {
    pub store: ParamStore,
    pub hidden: Linear,
    pub out: Linear,
    pub width: usize,
}

impl Comparator {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden =
            Linear::build(&mut store, "cmp.hidden", 2 * width, width, 1.0 / (2.0 * width as f32).sqrt(), &mut rng);
        let out = Linear::build(&mut store, "cmp.out", width, 1, 1.0 / (width as f32).sqrt(), &mut rng);
        Self { store, hidden, out, width }
    }

    /// Probability `[1×1]` that the two sequences share a style.
    pub fn score(&self, tape: &mut Tape, mode: Mode, a: Var, b: Var) -> Result<Var> {
        for v in [a, b] {
            let (rows, cols) = tape.shape(v);
            if rows == 0 || cols != self.width {
                bail!(Contract, "comparator expects [L×{}] features, got [{rows}×{cols}]", self.width);
            }
        }
        let p = bind(&self.store, mode);
        let pa = tape.mean_rows(a);
        let pb = tape.mean_rows(b);
        let x = tape.concat_cols(&[pa, pb])?;
        let h = self.hidden.apply(tape, p, x)?;
        let h = tape.gelu(h);
        let logit = self.out.apply(tape, p, h)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Small causal transformer over feature sequences with a mean-pooled
/// sigmoid head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    pub net: TransformerNet,
    pub out: Linear,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, layers: usize, seed: u64) -> Result<Self> {
        let mut cfg = config.clone().with_variant(Variant::None);
        cfg.layers = layers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = TransformerNet::build(&mut store, "disc.", &cfg, false, &mut rng)?;
        let out = Linear::build(&mut store, "disc.out", cfg.hidden, 1, 1.0 / (cfg.hidden as f32).sqrt(), &mut rng);
        Ok(Self { store, net, out })
    }

    /// Probability `[1×1]` that `features` came from real text.
    pub fn score(&self, tape: &mut Tape, mode: Mode, features: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(features);
        if rows == 0 || cols != self.net.config.hidden {
            bail!(Contract, "discriminator expects [L×{}] features, got [{rows}×{cols}]", self.net.config.hidden);
        }
        let p = bind(&self.store, mode);
        let x = self.net.add_positions(tape, p, features, None)?;
        let h = self.net.run(tape, p, x, None, None)?;
        let pooled = tape.mean_rows(h);
        let logit = self.out.apply(tape, p, pooled)?;
        Ok(tape.sigmoid(logit))
    }
}
