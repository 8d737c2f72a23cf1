//! Automatic evaluation: fluency, style success rate, style diversity and
//! content novelty, the corpus-derived bounds for the two distances, and an
//! exact assignment solver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_context, sample_paragraph, sample_window, Corpus};
use crate::error::{bail, Result};
use crate::models::{mean_rows, GeneratorBundle, LanguageModel, Sampling};
use crate::tensor::Tensor;

/// Dense nonnegative cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            bail!(Contract, "empty cost matrix");
        }
        if data.len() != rows * cols {
            bail!(Shape, "{rows}×{cols} cost matrix needs {} entries, got {}", rows * cols, data.len());
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(Contract, "cost entries must be finite and nonnegative");
        }
        Ok(Self { rows, cols, data })
    }

    /// Pairwise Euclidean distances between the rows of `a` and `b`.
    pub fn pairwise_l2(a: &Tensor, b: &Tensor) -> Result<Self> {
        let (ra, ca) = a.dims2()?;
        let (rb, cb) = b.dims2()?;
        if ca != cb {
            bail!(Shape, "feature widths differ: {ca} vs {cb}");
        }
        let mut data = Vec::with_capacity(ra * rb);
        for i in 0..ra {
            for j in 0..rb {
                data.push(l2(a.row_slice(i), b.row_slice(j)));
            }
        }
        Self::new(ra, rb, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Optimal one-to-one matching of the smaller side.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Minimum-cost assignment via shortest augmenting paths with potentials,
/// `O(n²·m)` for `n ≤ m`.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let transpose = cost.rows > cost.cols;
    let (n, m) = if transpose { (cost.cols, cost.rows) } else { (cost.rows, cost.cols) };
    let c = |i: usize, j: usize| if transpose { cost.at(j, i) } else { cost.at(i, j) };
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| if transpose { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, col)| cost.at(r, col)).sum();
    Assignment { pairs, total }
}

/// `ln V − mean NLL`: zero for a uniform predictor, `ln V` for a perfect one.
pub fn fluency_score(lm: &LanguageModel, tokens: &[u32]) -> Result<f64> {
    Ok(fluency_upper_bound(lm.config().vocab) - lm.mean_nll(tokens)?)
}

/// Fluency of a continuation scored in the context it was generated from.
pub fn conditional_fluency(lm: &LanguageModel, context: &[u32], generated: &[u32]) -> Result<f64> {
    let mut seq = context.to_vec();
    seq.extend_from_slice(generated);
    Ok(fluency_upper_bound(lm.config().vocab) - lm.continuation_nll(&seq, context.len().max(1))?)
}

pub fn fluency_upper_bound(vocab: usize) -> f64 {
    (vocab as f64).ln()
}

/// L2 distance between mean-pooled final-layer features.
pub fn style_diversity(lm: &LanguageModel, a: &[u32], b: &[u32]) -> Result<f64> {
    Ok(l2(&lm.pooled_features(a)?, &lm.pooled_features(b)?))
}

/// Matching distance between per-token features, normalised by the number
/// of matched pairs.
pub fn content_novelty(lm: &LanguageModel, generated: &[u32], reference: &[u32]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        bail!(Contract, "novelty needs two nonempty texts");
    }
    matching_distance(&lm.feature_rows(generated)?, &lm.feature_rows(reference)?)
}

pub fn matching_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let cost = CostMatrix::pairwise_l2(a, b)?;
    let matched = cost.rows.min(cost.cols);
    Ok(hungarian(&cost).total / matched as f64)
}

/// Per-style binary logistic probes over standardised pooled `H` features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleClassifiers {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// One `(weights, bias)` per style label.
    pub heads: Vec<(Vec<f64>, f64)>,
}

const PROBE_STEPS: usize = 400;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

impl StyleClassifiers {
    /// Fit one probe per style on `(pooled features, label)` examples.
    pub fn fit(examples: &[(Vec<f32>, usize)], num_styles: usize) -> Result<Self> {
        if examples.is_empty() {
            bail!(Config, "no classifier training examples");
        }
        let dim = examples[0].0.len();
        let n = examples.len() as f64;
        let mut mean = vec![0.0; dim];
        for (x, _) in examples {
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += v as f64 / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for (x, _) in examples {
            for ((s, &v), m) in scale.iter_mut().zip(x).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = scale.into_iter().map(|s| 1.0 / s.sqrt().max(1e-6)).collect();
        let xs: Vec<Vec<f64>> = examples
            .iter()
            .map(|(x, _)| x.iter().zip(&mean).zip(&scale).map(|((&v, m), s)| (v as f64 - m) * s).collect())
            .collect();
        let mut heads = Vec::with_capacity(num_styles);
        for style in 0..num_styles {
            if !examples.iter().any(|(_, l)| *l == style) {
                bail!(Config, "no classifier examples for style {style}");
            }
            let mut w = vec![0.0f64; dim];
            let mut b = 0.0f64;
            for _ in 0..PROBE_STEPS {
                let mut gw = vec![0.0f64; dim];
                let mut gb = 0.0;
                for (x, (_, label)) in xs.iter().zip(examples) {
                    let y = f64::from(u8::from(*label == style));
                    let p = sigmoid(dot(&w, x) + b);
                    let e = (p - y) / n;
                    gb += e;
                    for (g, &xi) in gw.iter_mut().zip(x) {
                        *g += e * xi;
                    }
                }
                for (wi, g) in w.iter_mut().zip(&gw) {
                    *wi -= PROBE_LR * (g + PROBE_L2 * *wi);
                }
                b -= PROBE_LR * gb;
            }
            heads.push((w, b));
        }
        Ok(Self { mean, scale, heads })
    }

    pub fn num_styles(&self) -> usize {
        self.heads.len()
    }

    /// Probability that pooled features `x` belong to `style`.
    pub fn prob(&self, style: usize, x: &[f32]) -> Result<f64> {
        let Some((w, b)) = self.heads.get(style) else {
            bail!(Config, "no classifier for style {style}");
        };
        let z: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(w)
            .map(|(((&v, m), s), wi)| (v as f64 - m) * s * wi)
            .sum();
        Ok(sigmoid(z + b))
    }

    pub fn predicts(&self, style: usize, x: &[f32]) -> Result<bool> {
        Ok(self.prob(style, x)? > 0.5)
    }

    /// Per-style binary accuracy on labelled examples.
    pub fn accuracy(&self, examples: &[(Vec<f32>, usize)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_styles());
        for style in 0..self.num_styles() {
            let mut hits = 0usize;
            for (x, l) in examples {
                if self.predicts(style, x)? == (*l == style) {
                    hits += 1;
                }
            }
            out.push(hits as f64 / examples.len().max(1) as f64);
        }
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Labelled pooled-feature examples: `per_doc` random windows of `window`
/// tokens from every document.
pub fn probe_examples(
    lm: &LanguageModel,
    corpus: &Corpus,
    window: usize,
    per_doc: usize,
    seed: u64,
) -> Result<Vec<(Vec<f32>, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.len() * per_doc);
    for (i, doc) in corpus.docs().iter().enumerate() {
        for _ in 0..per_doc {
            let p = sample_paragraph(corpus.tokens(i), window, &mut rng);
            out.push((lm.pooled_features(&p)?, doc.style));
        }
    }
    Ok(out)
}

/// Fraction of generations whose target-style probe fires.
pub fn style_score(classifiers: &StyleClassifiers, items: &[(Vec<f32>, usize)]) -> Result<f64> {
    if items.is_empty() {
        bail!(Contract, "no generations to score");
    }
    let mut hits = 0usize;
    for (x, target) in items {
        if *target >= classifiers.num_styles() {
            bail!(Config, "no classifier for target style {target}");
        }
        hits += usize::from(classifiers.predicts(*target, x)?);
    }
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Distance {
    Pooled,
    Matching,
}

/// Lengths of the two texts compared by a distance: the generated side and
/// the side it is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairShape {
    pub left: usize,
    pub right: usize,
}

/// Two windows from the same document, disjoint when the document is long
/// enough.
fn within_doc_pair<R: Rng>(doc: &[u32], shape: PairShape, rng: &mut R) -> (Vec<u32>, Vec<u32>) {
    let need = shape.left + shape.right;
    if doc.len() >= need {
        let gap_space = doc.len() - need;
        let a = rng.gen_range(0..=gap_space);
        let b = rng.gen_range(a..=gap_space);
        let first = doc[a..a + shape.left].to_vec();
        let second = doc[b + shape.left..b + shape.left + shape.right].to_vec();
        if rng.gen::<bool>() {
            (first, second)
        } else {
            let second_first = doc[a..a + shape.right].to_vec();
            let first_second = doc[b + shape.right..b + shape.right + shape.left].to_vec();
            (first_second, second_first)
        }
    } else {
        let (s1, l1) = sample_window(doc.len(), shape.left, rng);
        let (s2, l2) = sample_window(doc.len(), shape.right, rng);
        (doc[s1..s1 + l1].to_vec(), doc[s2..s2 + l2].to_vec())
    }
}

struct Featurized {
    pooled: Vec<f32>,
    rows: Tensor,
}

fn featurize(lm: &LanguageModel, tokens: &[u32]) -> Result<Featurized> {
    let rows = lm.feature_rows(tokens)?;
    Ok(Featurized { pooled: mean_rows(&rows), rows })
}

fn distance(kind: Distance, a: &Featurized, b: &Featurized) -> Result<f64> {
    match kind {
        Distance::Pooled => Ok(l2(&a.pooled, &b.pooled)),
        Distance::Matching => matching_distance(&a.rows, &b.rows),
    }
}

fn bounds(
    kind: Distance,
    corpus: &Corpus,
    lm: &LanguageModel,
    n_per_style: usize,
    shape: PairShape,
    seed: u64,
) -> Result<Bounds> {
    let styles = corpus.num_styles();
    if styles < 2 {
        bail!(Config, "bounds need at least two styles");
    }
    if n_per_style < 2 {
        bail!(Config, "bounds need at least two samples per style");
    }
    for s in 0..styles {
        if corpus.docs_of_style(s).is_empty() {
            bail!(Config, "style {} has no documents", corpus.style_names()[s]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |style: usize, len: usize, rng: &mut ChaCha8Rng| -> Result<Featurized> {
        let doc = *corpus.docs_of_style(style).choose(rng).unwrap();
        featurize(lm, &sample_paragraph(corpus.tokens(doc), len, rng))
    };
    let mut left = Vec::with_capacity(styles);
    let mut right = Vec::with_capacity(styles);
    for s in 0..styles {
        left.push((0..n_per_style).map(|_| sample(s, shape.left, &mut rng)).collect::<Result<Vec<_>>>()?);
        right.push((0..n_per_style).map(|_| sample(s, shape.right, &mut rng)).collect::<Result<Vec<_>>>()?);
    }
    let mut upper = f64::NEG_INFINITY;
    for s in 0..styles {
        for t in 0..styles {
            let mut total = 0.0;
            let mut count = 0usize;
            match kind {
                Distance::Pooled => {
                    for (i, a) in left[s].iter().enumerate() {
                        for (j, b) in right[t].iter().enumerate() {
                            if s == t && i == j {
                                continue;
                            }
                            total += distance(kind, a, b)?;
                            count += 1;
                        }
                    }
                }
                Distance::Matching => {
                    for i in 0..n_per_style {
                        let j = (i + usize::from(s == t)) % n_per_style;
                        total += distance(kind, &left[s][i], &right[t][j])?;
                        count += 1;
                    }
                }
            }
            upper = upper.max(total / count as f64);
        }
    }
    let mut lower = 0.0;
    for s in 0..styles {
        let docs = corpus.docs_of_style(s);
        let mut total = 0.0;
        let n = n_per_style.min(docs.len()).max(1);
        for k in 0..n {
            let doc = docs[k % docs.len()];
            let (a, b) = within_doc_pair(corpus.tokens(doc), shape, &mut rng);
            total += distance(kind, &featurize(lm, &a)?, &featurize(lm, &b)?)?;
        }
        lower += total / n as f64 / styles as f64;
    }
    Ok(Bounds { lower, upper })
}

/// Style-diversity bounds: the largest style×style mean pooled distance, and
/// the style-averaged mean distance between two windows of one document.
pub fn diversity_bounds(
    corpus: &Corpus,
    lm: &LanguageModel,
    n_per_style: usize,
    window: usize,
    seed: u64,
) -> Result<Bounds> {
    bounds(Distance::Pooled, corpus, lm, n_per_style, PairShape { left: window, right: window }, seed)
}

/// Content-novelty bounds with the matching distance between a
/// `shape.left`-token window and a `shape.right`-token reference window.
pub fn novelty_bounds(
    corpus: &Corpus,
    lm: &LanguageModel,
    n_per_style: usize,
    shape: PairShape,
    seed: u64,
) -> Result<Bounds> {
    bounds(Distance::Matching, corpus, lm, n_per_style, shape, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRange {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleBreakdown {
    pub style_score: f64,
    pub fluency: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fluency: f64,
    pub style_score: f64,
    pub diversity: ScoredRange,
    pub novelty: ScoredRange,
    pub per_style: BTreeMap<String, StyleBreakdown>,
    pub n: usize,
}

impl MetricsReport {
    /// Check the documented JSON layout and value ranges.
    pub fn validate_json(value: &serde_json::Value) -> Result<()> {
        let obj = value.as_object().ok_or_else(|| crate::Error::Contract("report is not an object".into()))?;
        let keys = ["fluency", "style_score", "diversity", "novelty", "per_style", "n"];
        for k in keys {
            if !obj.contains_key(k) {
                bail!(Contract, "report is missing {k:?}");
            }
        }
        if obj.len() != keys.len() {
            bail!(Contract, "report has unexpected keys");
        }
        let report: MetricsReport = serde_json::from_value(value.clone())?;
        if !(0.0..=1.0).contains(&report.style_score) {
            bail!(Contract, "style score outside [0, 1]");
        }
        for r in [report.diversity, report.novelty] {
            if r.value < 0.0 || r.lower >= r.upper {
                bail!(Contract, "distance range {r:?} is inconsistent");
            }
        }
        for b in report.per_style.values() {
            if !(0.0..=1.0).contains(&b.style_score) {
                bail!(Contract, "per-style score outside [0, 1]");
            }
        }
        Ok(())
    }

    /// `label,fluency,style_score` rows: one overall row, then one per style.
    pub fn scatter_csv(&self, label: &str) -> String {
        let mut out = String::from("label,fluency,style_score\n");
        out.push_str(&format!("{label},{:.6},{:.6}\n", self.fluency, self.style_score));
        for (name, b) in &self.per_style {
            out.push_str(&format!("{label}/{name},{:.6},{:.6}\n", b.fluency, b.style_score));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_ctx: usize,
    pub n_gen: usize,
    pub reference_len: usize,
    pub top_k: usize,
    pub temperature: f32,
    pub n_bound_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 150,
            n_ctx: 8,
            n_gen: 24,
            reference_len: 64,
            top_k: 8,
            temperature: 1.0,
            n_bound_samples: 60,
            seed: 7,
        }
    }
}

/// One evaluated generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub target_style: usize,
    pub context: Vec<u32>,
    pub generated: Vec<u32>,
    pub twin: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub samples: Vec<GeneratedSample>,
}

/// Generate `n_samples` continuations and score them. Target styles cycle
/// through all labels; each context comes from a random test document of
/// any style; each item is generated twice from two different references of
/// the target style to measure diversity.
pub fn evaluate(
    bundle: &GeneratorBundle,
    lm: &LanguageModel,
    classifiers: &StyleClassifiers,
    test: &Corpus,
    cfg: &EvalConfig,
    diversity: Bounds,
    novelty: Bounds,
) -> Result<Evaluation> {
    if test.is_empty() {
        bail!(Config, "empty evaluation split");
    }
    let styles = test.num_styles();
    for s in 0..styles {
        if test.docs_of_style(s).len() < 2 {
            bail!(Config, "evaluation split needs two documents of style {}", test.style_names()[s]);
        }
    }
    let sampling = Sampling::TopK { k: cfg.top_k, temperature: cfg.temperature };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut scored = Vec::with_capacity(cfg.n_samples);
    let (mut flu_sum, mut div_sum, mut nov_sum) = (0.0, 0.0, 0.0);
    let mut per: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); styles];
    for i in 0..cfg.n_samples {
        let target = i % styles;
        let ctx_doc = rng.gen_range(0..test.len());
        let ctx_para = sample_paragraph(test.tokens(ctx_doc), cfg.reference_len, &mut rng);
        let context = extract_context(&ctx_para, cfg.n_ctx)?;
        let refs: Vec<usize> = test.docs_of_style(target).choose_multiple(&mut rng, 2).copied().collect();
        let ref_a = sample_paragraph(test.tokens(refs[0]), cfg.reference_len, &mut rng);
        let ref_b = sample_paragraph(test.tokens(refs[1]), cfg.reference_len, &mut rng);
        let seed_a: u64 = rng.gen();
        let seed_b: u64 = rng.gen();
        let generated = bundle.generate(&context, &ref_a, cfg.n_gen, sampling, seed_a)?;
        let twin = bundle.generate(&context, &ref_b, cfg.n_gen, sampling, seed_b)?;

        let fluency = conditional_fluency(lm, &context, &generated)?;
        let feats = featurize(lm, &generated)?;
        let twin_feats = featurize(lm, &twin)?;
        let ref_feats = featurize(lm, &ref_a)?;
        div_sum += l2(&feats.pooled, &twin_feats.pooled);
        nov_sum += matching_distance(&feats.rows, &ref_feats.rows)?;
        flu_sum += fluency;
        let hit = classifiers.predicts(target, &feats.pooled)?;
        per[target].0 += f64::from(u8::from(hit));
        per[target].1 += fluency;
        per[target].2 += 1;
        scored.push((feats.pooled, target));
        samples.push(GeneratedSample { target_style: target, context, generated, twin });
    }
    let n = cfg.n_samples.max(1) as f64;
    let per_style = test
        .style_names()
        .iter()
        .zip(&per)
        .map(|(name, &(hits, flu, count))| {
            let c = count.max(1) as f64;
            (name.clone(), StyleBreakdown { style_score: hits / c, fluency: flu / c, n: count })
        })
        .collect();
    let report = MetricsReport {
        fluency: flu_sum / n,
        style_score: style_score(classifiers, &scored)?,
        diversity: ScoredRange { value: div_sum / n, lower: diversity.lower, upper: diversity.upper },
        novelty: ScoredRange { value: nov_sum / n, lower: novelty.lower, upper: novelty.upper },
        per_style,
        n: cfg.n_samples,
    };
    Ok(Evaluation { report, samples })
}
