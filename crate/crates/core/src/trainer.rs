//! The three training phases — language-model pretraining, comparator
//! pretraining, two-stream generator training — and FED-based
//! hyperparameter selection.
//!
//! Every run is a pure function of `(config, seed, corpus)`: all randomness
//! comes from seeded ChaCha streams, one per purpose, so that switching a
//! loss term off does not shift the samples drawn by the others.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::corpus::{sample_paragraph, Corpus, Splits, StreamSampler};
use crate::error::{bail, Error, Result};
use crate::models::{Comparator, Discriminator, GeneratorBundle, LanguageModel, Sampling};
use crate::objectives::{
    comparator_pretrain_loss, cross_style_rollout, fed, loss_gan_discriminator, total_loss, LossBreakdown,
    LossWeights,
};
use crate::optim::{clip_global_norm, Adam, AdamConfig, Schedule};
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PretrainLm,
    PretrainComparator,
    TrainGenerator,
}

/// Run configuration; every key has a default so a TOML file only needs the
/// keys it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub seed: u64,
    pub model: ModelConfig,
    /// Loss weights; defaults depend on the variant when absent.
    pub weights: Option<LossWeights>,
    pub optimizer: AdamConfig,
    pub discriminator_optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Fraction of steps that also draw a cross-style batch.
    pub mix_ratio: f64,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    pub disc_layers: usize,
    /// Paragraph window in tokens.
    pub window: usize,
    pub n_ctx: usize,
    pub n_gen: usize,
    pub clip_norm: f32,
    pub eval_interval: u64,
    /// Held-out items for validation FED / accuracy.
    pub eval_items: usize,
    /// Evaluations without improvement before comparator early stopping.
    pub patience: usize,
    pub lm_checkpoint: Option<PathBuf>,
    pub comparator_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::TrainGenerator,
            seed: 42,
            model: ModelConfig::desk().with_variant(Variant::D),
            weights: None,
            optimizer: AdamConfig::default(),
            discriminator_optimizer: AdamConfig { schedule: Schedule::Constant, ..AdamConfig::default() },
            batch_size: 8,
            steps: 5000,
            mix_ratio: 1.0,
            disc_steps: 1,
            disc_layers: 1,
            window: 64,
            n_ctx: 8,
            n_gen: 32,
            clip_norm: 1.0,
            eval_interval: 250,
            eval_items: 64,
            patience: 5,
            lm_checkpoint: None,
            comparator_checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Language-model pretraining defaults (lr 1.5e-4, cosine, wd 0.01).
    pub fn pretrain_lm() -> Self {
        Self {
            phase: Phase::PretrainLm,
            model: ModelConfig::desk(),
            optimizer: AdamConfig { lr: 1.5e-4, ..AdamConfig::default() },
            steps: 2000,
            ..Self::default()
        }
    }

    pub fn pretrain_comparator() -> Self {
        Self {
            phase: Phase::PretrainComparator,
            model: ModelConfig::desk(),
            optimizer: AdamConfig { lr: 1e-3, schedule: Schedule::Constant, ..AdamConfig::default() },
            batch_size: 32,
            steps: 3000,
            eval_interval: 50,
            eval_items: 200,
            ..Self::default()
        }
    }

    /// Full-scale recipe: batch 512, 320K iterations, full-size model.
    pub fn full_scale(phase: Phase) -> Self {
        let lr = if phase == Phase::PretrainLm { 1.5e-4 } else { 2.5e-4 };
        Self {
            phase,
            model: ModelConfig::full_scale(),
            optimizer: AdamConfig { lr, ..AdamConfig::default() },
            batch_size: 512,
            steps: 320_000,
            window: 512,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without validating, for callers that fix up fields (such as
    /// the phase) before checking the result.
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| LossWeights::for_variant(self.model.variant))
    }

    /// Apply the `STYF_SEED` override when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var("STYF_SEED") {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("STYF_SEED={v:?} is not an integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights().validate()?;
        if self.steps == 0 {
            bail!(Config, "steps must be positive");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.mix_ratio > 0.0 && self.mix_ratio <= 1.0) {
            bail!(Config, "mix_ratio must lie in (0, 1], got {}", self.mix_ratio);
        }
        if self.window < 2 || self.window > self.model.max_len {
            bail!(Config, "window {} must lie in 2..={}", self.window, self.model.max_len);
        }
        if self.n_ctx == 0 || self.n_gen == 0 || self.n_ctx + self.n_gen > self.model.max_len {
            bail!(Config, "need n_ctx, n_gen >= 1 and n_ctx + n_gen <= {}", self.model.max_len);
        }
        if self.eval_interval == 0 || self.disc_layers == 0 {
            bail!(Config, "eval_interval and disc_layers must be positive");
        }
        if self.phase == Phase::TrainGenerator && self.model.variant == Variant::None {
            bail!(Config, "generator training needs a variant (A, B, C or D)");
        }
        Ok(())
    }
}

/// One JSONL line of a training log. Step numbers strictly increase within a
/// phase; evaluation records repeat the step they follow.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// Validation FED monitoring during generator training (an extension
    /// beyond its use for hyperparameter selection).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(last) = self.records.iter().rev().find(|x| x.phase == r.phase && x.loss.is_some()) {
            if r.loss.is_some() && r.step <= last.step {
                bail!(Contract, "log steps must increase ({} after {})", r.step, last.step);
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialise"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            log.push(serde_json::from_str(line)?)?;
        }
        Ok(log)
    }

    /// Per-step training losses (step records only).
    pub fn losses(&self) -> Vec<f32> {
        self.records.iter().filter_map(|r| r.loss).collect()
    }

    /// Per-step reconstruction (`L_LM`) losses of generator training.
    pub fn reconstruction_losses(&self) -> Vec<f32> {
        self.records.iter().filter_map(|r| r.breakdown.map(|b| b.lm)).collect()
    }
}

/// Independent per-purpose seed, so enabling one data stream never shifts
/// the random draws of another.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose tag, folded into the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

fn check_loss(phase: &str, step: u64, v: f32) -> Result<()> {
    if !v.is_finite() {
        bail!(Divergence, "{phase}: loss became {v} at step {step}");
    }
    Ok(())
}

/// Fixed validation paragraphs for reproducible evaluation.
fn fixed_paragraphs(corpus: &Corpus, n: usize, window: usize, seed: u64) -> Vec<Vec<u32>> {
    if corpus.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let d = rng.gen_range(0..corpus.len());
            sample_paragraph(corpus.tokens(d), window, &mut rng)
        })
        .collect()
}

/// Mean next-token NLL over paragraphs.
pub fn mean_nll(lm: &LanguageModel, paragraphs: &[Vec<u32>]) -> Result<f64> {
    let scored: Vec<&Vec<u32>> = paragraphs.iter().filter(|p| p.len() >= 2).collect();
    if scored.is_empty() {
        bail!(Config, "no paragraphs long enough to score");
    }
    let mut total = 0.0;
    for p in &scored {
        total += lm.mean_nll(p)?;
    }
    Ok(total / scored.len() as f64)
}

/// Left-to-right LM training on random paragraph windows of the train split.
pub fn pretrain_lm(splits: &Splits, cfg: &TrainConfig) -> Result<(LanguageModel, TrainLog)> {
    cfg.validate()?;
    if splits.train.is_empty() {
        bail!(Config, "empty training split");
    }
    let mut lm = LanguageModel::new(&cfg.model, derive_seed(cfg.seed, "lm-init"))?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &lm.store, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "lm-data"));
    let val = fixed_paragraphs(&splits.validation, cfg.eval_items, cfg.window, derive_seed(cfg.seed, "lm-val"));
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let d = rng.gen_range(0..splits.train.len());
            let p = sample_paragraph(splits.train.tokens(d), cfg.window, &mut rng);
            if p.len() < 2 {
                continue;
            }
            let (_, logits) = lm.forward(&mut tape, Mode::Trainable, &p[..p.len() - 1])?;
            losses.push(tape.cross_entropy(logits, &p[1..])?);
        }
        if losses.is_empty() {
            bail!(Config, "training documents are shorter than two tokens");
        }
        let loss = mean_of(&mut tape, &losses)?;
        let value = tape.scalar(loss);
        check_loss("pretrain-lm", step, value)?;
        let mut grads = tape.backward(loss)?.for_store(&lm.store);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = opt.current_lr();
        opt.step(&mut lm.store, &grads)?;
        log.push(LogRecord {
            phase: "pretrain-lm".into(),
            step,
            loss: Some(value),
            lr: Some(lr),
            grad_norm: Some(norm),
            ..Default::default()
        })?;
        if (step % cfg.eval_interval == 0 || step == cfg.steps) && !val.is_empty() {
            log.push(LogRecord {
                phase: "pretrain-lm".into(),
                step,
                val_nll: Some(mean_nll(&lm, &val)?),
                ..Default::default()
            })?;
        }
    }
    Ok((lm, log))
}

fn mean_of(tape: &mut Tape, vars: &[crate::autodiff::Var]) -> Result<crate::autodiff::Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f32))
}

/// Frozen-LM feature sequences for comparator pairs, grouped by style.
struct FeaturePool {
    /// `[style][item]` → `(pooled-length-1 sequence, document)`
    items: Vec<Vec<(Tensor, usize)>>,
}

impl FeaturePool {
    /// Windows alternate between `long` (reference-sized) and `short`
    /// (continuation-sized) lengths. Only the pooled mean is kept: the
    /// comparator mean-pools its inputs first, so a one-row sequence holding
    /// the mean scores identically to the full sequence.
    fn build(lm: &LanguageModel, corpus: &Corpus, per_doc: usize, long: usize, short: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = vec![Vec::new(); corpus.num_styles()];
        for (d, doc) in corpus.docs().iter().enumerate() {
            for k in 0..per_doc {
                let len = if k % 2 == 0 { long } else { short };
                let p = sample_paragraph(corpus.tokens(d), len, &mut rng);
                let pooled = lm.pooled_features(&p)?;
                items[doc.style].push((Tensor::row(pooled), d));
            }
        }
        Ok(Self { items })
    }

    fn usable(&self) -> Vec<usize> {
        (0..self.items.len()).filter(|&s| !self.items[s].is_empty()).collect()
    }

    /// Balanced pair: `same` picks two items of one style from different
    /// documents when possible.
    fn pair<R: Rng>(&self, same: bool, rng: &mut R) -> Result<(&Tensor, &Tensor)> {
        let styles = self.usable();
        if styles.len() < 2 {
            bail!(Config, "comparator pairs need at least two styles");
        }
        if same {
            let s = *styles.choose(rng).unwrap();
            let a = self.items[s].choose(rng).unwrap();
            let mut b = self.items[s].choose(rng).unwrap();
            for _ in 0..8 {
                if b.1 != a.1 {
                    break;
                }
                b = self.items[s].choose(rng).unwrap();
            }
            Ok((&a.0, &b.0))
        } else {
            let two: Vec<usize> = styles.choose_multiple(rng, 2).copied().collect();
            Ok((&self.items[two[0]].choose(rng).unwrap().0, &self.items[two[1]].choose(rng).unwrap().0))
        }
    }
}

fn pair_set(pool: &FeaturePool, n: usize, seed: u64, shuffle_labels: bool) -> Result<Vec<(Tensor, Tensor, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let same = i % 2 == 0;
        let (a, b) = pool.pair(same, &mut rng)?;
        let label = if shuffle_labels { rng.gen::<bool>() } else { same };
        out.push((a.clone(), b.clone(), label));
    }
    Ok(out)
}

/// Fraction of pairs classified correctly at threshold 0.5.
pub fn comparator_accuracy(c: &Comparator, pairs: &[(Tensor, Tensor, bool)]) -> Result<f64> {
    let mut hits = 0usize;
    for (a, b, label) in pairs {
        let mut tape = Tape::new();
        let va = tape.constant(a.clone())?;
        let vb = tape.constant(b.clone())?;
        let s = c.score(&mut tape, Mode::Frozen, va, vb)?;
        hits += usize::from((tape.scalar(s) > 0.5) == *label);
    }
    Ok(hits as f64 / pairs.len().max(1) as f64)
}

/// Result of comparator pretraining.
#[derive(Clone, Debug)]
pub struct ComparatorRun {
    pub comparator: Comparator,
    pub log: TrainLog,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Step at which training stopped (early or at `steps`).
    pub stopped_at: u64,
    pub early_stopped: bool,
}

/// Balanced same/different-style BCE training on frozen-LM features with
/// early stopping once validation accuracy stops improving.
pub fn pretrain_comparator(splits: &Splits, lm: &LanguageModel, cfg: &TrainConfig) -> Result<ComparatorRun> {
    pretrain_comparator_impl(splits, lm, cfg, false)
}

/// Control run with randomly assigned training and validation labels; its
/// held-out accuracy on true labels should stay at chance.
pub fn pretrain_comparator_shuffled(splits: &Splits, lm: &LanguageModel, cfg: &TrainConfig) -> Result<ComparatorRun> {
    pretrain_comparator_impl(splits, lm, cfg, true)
}

const CHANCE_WARMUP_EVALS: usize = 10;

fn pretrain_comparator_impl(
    splits: &Splits,
    lm: &LanguageModel,
    cfg: &TrainConfig,
    shuffle_labels: bool,
) -> Result<ComparatorRun> {
    cfg.validate()?;
    let hidden = lm.config().hidden;
    let pool = |c: &Corpus, tag: &str| {
        FeaturePool::build(lm, c, 4, cfg.window, cfg.n_gen, derive_seed(cfg.seed, tag))
    };
    let train = pool(&splits.train, "cmp-train-pool")?;
    let val_pool = pool(&splits.validation, "cmp-val-pool")?;
    let test_pool = pool(&splits.test, "cmp-test-pool")?;
    let val = pair_set(&val_pool, cfg.eval_items, derive_seed(cfg.seed, "cmp-val"), shuffle_labels)?;
    // Held-out accuracy is always measured against the true labels, so the
    // shuffled control reports how much style signal survived training.
    let test = pair_set(&test_pool, cfg.eval_items, derive_seed(cfg.seed, "cmp-test"), false)?;
    let mut comparator = Comparator::new(hidden, derive_seed(cfg.seed, "cmp-init"));
    let mut opt = Adam::new(cfg.optimizer.clone(), &comparator.store, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "cmp-data"));
    let mut log = TrainLog::default();
    let mut best = (f64::NEG_INFINITY, comparator.store.clone());
    let mut since_best = 0usize;
    let mut evals = 0usize;
    let mut stopped_at = cfg.steps;
    let mut early = false;
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let same = i % 2 == 0;
            let (a, b) = train.pair(same, &mut rng)?;
            let label = if shuffle_labels { rng.gen::<bool>() } else { same };
            let va = tape.constant(a.clone())?;
            let vb = tape.constant(b.clone())?;
            let s = comparator.score(&mut tape, Mode::Trainable, va, vb)?;
            losses.push(comparator_pretrain_loss(&mut tape, s, label));
        }
        let loss = mean_of(&mut tape, &losses)?;
        let value = tape.scalar(loss);
        check_loss("pretrain-comparator", step, value)?;
        let mut grads = tape.backward(loss)?.for_store(&comparator.store);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = opt.current_lr();
        opt.step(&mut comparator.store, &grads)?;
        log.push(LogRecord {
            phase: "pretrain-comparator".into(),
            step,
            loss: Some(value),
            lr: Some(lr),
            grad_norm: Some(norm),
            ..Default::default()
        })?;
        if step % cfg.eval_interval == 0 {
            evals += 1;
            let acc = comparator_accuracy(&comparator, &val)?;
            log.push(LogRecord {
                phase: "pretrain-comparator".into(),
                step,
                val_accuracy: Some(acc),
                ..Default::default()
            })?;
            if acc > best.0 {
                best = (acc, comparator.store.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            if !shuffle_labels && evals >= CHANCE_WARMUP_EVALS && best.0 < 0.6 {
                bail!(
                    Divergence,
                    "comparator validation accuracy stuck at chance ({:.3}) after {evals} evaluations",
                    best.0
                );
            }
            if since_best >= cfg.patience {
                stopped_at = step;
                early = true;
                log.push(LogRecord {
                    phase: "pretrain-comparator".into(),
                    step,
                    note: Some(format!("early stop: no validation gain in {} evaluations", cfg.patience)),
                    ..Default::default()
                })?;
                break;
            }
        }
    }
    if best.0.is_finite() {
        comparator.store = best.1;
    }
    let best_val_accuracy = best.0.max(comparator_accuracy(&comparator, &val)?);
    let test_accuracy = comparator_accuracy(&comparator, &test)?;
    Ok(ComparatorRun { comparator, log, best_val_accuracy, test_accuracy, stopped_at, early_stopped: early })
}

/// Result of generator training.
#[derive(Clone, Debug)]
pub struct GeneratorRun {
    pub bundle: GeneratorBundle,
    pub discriminator: Discriminator,
    pub log: TrainLog,
}

/// Validation FED between frozen-LM pooled features of generated
/// continuations and of real paragraphs of the reference style.
pub fn validation_fed(
    bundle: &GeneratorBundle,
    lm: &LanguageModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    items: usize,
    seed: u64,
) -> Result<f64> {
    let items = items.max(lm.config().hidden + 1);
    let mut sampler = StreamSampler::new(seed, cfg.window, cfg.n_ctx);
    let mut generated = Vec::with_capacity(items);
    let mut real = Vec::with_capacity(items);
    for _ in 0..items {
        let b = sampler.cross_style(corpus)?;
        let g = bundle.generate(&b.context, &b.reference, cfg.n_gen, Sampling::Greedy, 0)?;
        generated.push(lm.pooled_features(&g)?);
        let docs = corpus.docs_of_style(b.style_reference);
        let d = docs[sampler.rng().gen_range(0..docs.len())];
        let p = sample_paragraph(corpus.tokens(d), cfg.n_gen, sampler.rng());
        real.push(lm.pooled_features(&p)?);
    }
    fed(&generated, &real)
}

/// Two-stream generator training. Each step draws a reconstruction batch
/// and (per the mix ratio) a cross-style batch, updates `D` on detached
/// continuation features, then updates `F` on the weighted objective with
/// the freshly updated `D` held fixed.
pub fn train_generator(
    splits: &Splits,
    lm: &LanguageModel,
    comparator: &Comparator,
    cfg: &TrainConfig,
) -> Result<GeneratorRun> {
    cfg.validate()?;
    let weights = cfg.loss_weights();
    let mut bundle = GeneratorBundle::new(&cfg.model, derive_seed(cfg.seed, "gen-init"))?;
    bundle.init_from_lm(lm)?;
    let mut disc = Discriminator::new(&cfg.model, cfg.disc_layers, derive_seed(cfg.seed, "disc-init"))?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &bundle.store, cfg.steps);
    let mut disc_opt = Adam::new(cfg.discriminator_optimizer.clone(), &disc.store, cfg.steps * cfg.disc_steps as u64);
    let mut rs = StreamSampler::new(derive_seed(cfg.seed, "rs"), cfg.window, cfg.n_ctx);
    let mut cs = StreamSampler::new(derive_seed(cfg.seed, "cs"), cfg.window, cfg.n_ctx);
    let mut mix_acc = 0.0f64;
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let rs_batches =
            (0..cfg.batch_size).map(|_| rs.reconstruction(&splits.train)).collect::<Result<Vec<_>>>()?;
        mix_acc += cfg.mix_ratio;
        let with_cs = weights.uses_cross_style() && mix_acc >= 1.0;
        if with_cs {
            mix_acc -= 1.0;
        }
        let mut rollouts = Vec::new();
        if with_cs {
            for _ in 0..cfg.batch_size {
                let b = cs.cross_style(&splits.train)?;
                rollouts.push(cross_style_rollout(&mut tape, &bundle, Mode::Trainable, lm, &b, cfg.n_gen)?);
            }
        }
        let mut d_loss_value = 0.0f32;
        if with_cs && weights.gan > 0.0 {
            for _ in 0..cfg.disc_steps {
                let mut dtape = Tape::new();
                let mut losses = Vec::with_capacity(rollouts.len());
                for r in &rollouts {
                    let real = dtape.constant(tape.value(r.real).clone())?;
                    let fake = dtape.constant(tape.value(r.fake).clone())?;
                    losses.push(loss_gan_discriminator(&mut dtape, &disc, real, fake)?);
                }
                let loss = mean_of(&mut dtape, &losses)?;
                d_loss_value = dtape.scalar(loss);
                check_loss("train-generator/discriminator", step, d_loss_value)?;
                let mut grads = dtape.backward(loss)?.for_store(&disc.store);
                clip_global_norm(&mut grads, cfg.clip_norm);
                disc_opt.step(&mut disc.store, &grads)?;
            }
        }
        let mut totals = Vec::with_capacity(cfg.batch_size);
        let mut sum = LossBreakdown::default();
        for (i, b) in rs_batches.iter().enumerate() {
            let rollout = rollouts.get(i);
            let w = if rollout.is_some() { weights } else { LossWeights { style: 0.0, gan: 0.0, ..weights } };
            let (t, br) = total_loss(&mut tape, &bundle, Mode::Trainable, lm, comparator, &disc, &w, b, rollout)?;
            totals.push(t);
            sum.lm += br.lm;
            sum.dist += br.dist;
            sum.style += br.style;
            sum.gan_generator += br.gan_generator;
            sum.comparator_score += br.comparator_score;
        }
        let loss = mean_of(&mut tape, &totals)?;
        let n = cfg.batch_size as f32;
        let mut breakdown = LossBreakdown {
            lm: sum.lm / n,
            dist: sum.dist / n,
            style: sum.style / n,
            gan_generator: sum.gan_generator / n,
            gan_discriminator: d_loss_value,
            total: tape.scalar(loss),
            comparator_score: sum.comparator_score / n,
        };
        if !with_cs {
            breakdown.comparator_score = 0.0;
        }
        check_loss("train-generator", step, breakdown.total)?;
        let mut grads = tape.backward(loss)?.for_store(&bundle.store);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = opt.current_lr();
        opt.step(&mut bundle.store, &grads)?;
        let note = (with_cs && weights.style > 0.0 && breakdown.comparator_score <= crate::objectives::PROB_FLOOR)
            .then(|| "comparator score saturated at the probability floor".to_string());
        log.push(LogRecord {
            phase: "train-generator".into(),
            step,
            loss: Some(breakdown.total),
            breakdown: Some(breakdown),
            lr: Some(lr),
            grad_norm: Some(norm),
            note,
            ..Default::default()
        })?;
        if step % cfg.eval_interval == 0 && cfg.eval_items > 0 && !splits.validation.is_empty() {
            let v = validation_fed(&bundle, lm, &splits.validation, cfg, cfg.eval_items, derive_seed(cfg.seed, "val-fed"))?;
            log.push(LogRecord {
                phase: "train-generator".into(),
                step,
                val_fed: Some(v),
                note: Some("validation FED (monitoring extension)".into()),
                ..Default::default()
            })?;
        }
    }
    Ok(GeneratorRun { bundle, discriminator: disc, log })
}

/// The searched loss-weight grid.
pub fn default_candidates() -> Vec<LossWeights> {
    vec![
        LossWeights { dist: 1.0, style: 0.1, gan: 0.1 },
        LossWeights { dist: 0.1, style: 0.1, gan: 0.1 },
        LossWeights { dist: 1.0, style: 0.01, gan: 0.01 },
    ]
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub best: usize,
    pub weights: LossWeights,
    pub scores: Vec<f64>,
}

/// Train each candidate briefly on the pilot splits and keep the one with
/// the lowest hold-out FED; ties go to the earlier candidate.
pub fn select_hyperparams(
    candidates: &[LossWeights],
    splits: &Splits,
    lm: &LanguageModel,
    comparator: &Comparator,
    cfg: &TrainConfig,
) -> Result<Selection> {
    match candidates.len() {
        0 => bail!(Config, "no hyperparameter candidates"),
        1 => return Ok(Selection { best: 0, weights: candidates[0], scores: vec![f64::NAN] }),
        _ => {}
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for w in candidates {
        let run_cfg = TrainConfig { weights: Some(*w), eval_interval: u64::MAX, ..cfg.clone() };
        let run = train_generator(splits, lm, comparator, &run_cfg)?;
        scores.push(validation_fed(
            &run.bundle,
            lm,
            &splits.validation,
            cfg,
            cfg.eval_items,
            derive_seed(cfg.seed, "select-fed"),
        )?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(Selection { best, weights: candidates[best], scores })
}
