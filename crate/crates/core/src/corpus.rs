//! Styled documents, byte-level tokenization, paragraph sampling, the
//! reconstruction / cross-style training streams and a synthetic multi-style
//! corpus generator.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const UNK: u32 = 259;
pub const NUM_SPECIALS: usize = 4;
pub const VOCAB_SIZE: usize = 256 + NUM_SPECIALS;

/// Byte `b` becomes id `b`.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`]; special ids are dropped and invalid UTF-8 is
/// replaced.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub style: usize,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
struct JsonDoc<'a> {
    id: &'a str,
    style: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct OwnedJsonDoc {
    id: String,
    style: String,
    text: String,
}

/// Immutable document collection with cached token ids.
#[derive(Clone, Debug)]
pub struct Corpus {
    style_names: Vec<String>,
    docs: Vec<Document>,
    tokens: Vec<Vec<u32>>,
    by_style: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(style_names: Vec<String>, docs: Vec<Document>) -> Result<Self> {
        let mut by_style = vec![Vec::new(); style_names.len()];
        for (i, d) in docs.iter().enumerate() {
            if d.style >= style_names.len() {
                bail!(Config, "document {} has style {} but only {} styles", d.id, d.style, style_names.len());
            }
            if d.text.is_empty() {
                bail!(Config, "document {} has empty text", d.id);
            }
            by_style[d.style].push(i);
        }
        let tokens = docs.iter().map(|d| tokenize(&d.text)).collect();
        Ok(Self { style_names, docs, tokens, by_style })
    }

    pub fn style_names(&self) -> &[String] {
        &self.style_names
    }

    pub fn num_styles(&self) -> usize {
        self.style_names.len()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn tokens(&self, doc: usize) -> &[u32] {
        &self.tokens[doc]
    }

    pub fn docs_of_style(&self, style: usize) -> &[usize] {
        &self.by_style[style]
    }

    /// Parse JSONL; style names become labels in order of first appearance.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut docs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: OwnedJsonDoc = serde_json::from_str(line)
                .map_err(|e| crate::error::Error::Config(format!("corpus line {}: {e}", n + 1)))?;
            let style = *lookup.entry(d.style.clone()).or_insert_with(|| {
                names.push(d.style.clone());
                names.len() - 1
            });
            docs.push(Document { id: d.id, style, text: d.text });
        }
        Self::new(names, docs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        for line in std::io::BufReader::new(std::fs::File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let j = JsonDoc { id: &d.id, style: &self.style_names[d.style], text: &d.text };
            out.push_str(&serde_json::to_string(&j).expect("documents serialise"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.style_names.clone(), idx.iter().map(|&i| self.docs[i].clone()).collect())
    }

    /// Per-style 80/10/10 train/validation/test split by document, with a
    /// seeded shuffle inside each style.
    pub fn split(&self, seed: u64) -> Result<Splits> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for style in 0..self.num_styles() {
            let mut ids = self.by_style[style].clone();
            ids.shuffle(&mut rng);
            let n = ids.len();
            let n_val = (n as f64 * 0.1).round() as usize;
            let n_test = (n as f64 * 0.1).round() as usize;
            test.extend_from_slice(&ids[..n_test]);
            val.extend_from_slice(&ids[n_test..n_test + n_val]);
            train.extend_from_slice(&ids[n_test + n_val..]);
        }
        for v in [&mut train, &mut val, &mut test] {
            v.sort_unstable();
        }
        Ok(Splits { train: self.subset(&train)?, validation: self.subset(&val)?, test: self.subset(&test)? })
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

/// Contiguous window of at most `max_tokens` with a uniformly chosen start
/// among the offsets that keep it inside the document.
pub fn sample_paragraph<R: Rng>(doc: &[u32], max_tokens: usize, rng: &mut R) -> Vec<u32> {
    let (start, len) = sample_window(doc.len(), max_tokens, rng);
    doc[start..start + len].to_vec()
}

pub(crate) fn sample_window<R: Rng>(doc_len: usize, max_tokens: usize, rng: &mut R) -> (usize, usize) {
    let len = max_tokens.min(doc_len);
    let start = rng.gen_range(0..=doc_len - len);
    (start, len)
}

/// The extraction function: the first `n_ctx` tokens of a paragraph.
pub fn extract_context(paragraph: &[u32], n_ctx: usize) -> Result<Vec<u32>> {
    if paragraph.is_empty() {
        bail!(Contract, "cannot extract a context from an empty paragraph");
    }
    if n_ctx == 0 {
        bail!(Contract, "context length must be at least 1");
    }
    Ok(paragraph[..n_ctx.min(paragraph.len())].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamKind {
    Reconstruction,
    CrossStyle,
}

/// One training item from either stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub kind: StreamKind,
    pub context: Vec<u32>,
    pub reference: Vec<u32>,
    /// The full paragraph the context was cut from; present for the
    /// reconstruction stream only.
    pub target: Option<Vec<u32>>,
    pub style_context: usize,
    pub style_reference: usize,
}

/// Seeded sampler over a corpus for both streams.
#[derive(Clone, Debug)]
pub struct StreamSampler {
    rng: ChaCha8Rng,
    pub window: usize,
    pub n_ctx: usize,
}

impl StreamSampler {
    pub fn new(seed: u64, window: usize, n_ctx: usize) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), window, n_ctx }
    }

    fn paragraph(&mut self, corpus: &Corpus, doc: usize) -> Vec<u32> {
        sample_paragraph(corpus.tokens(doc), self.window, &mut self.rng)
    }

    /// Same-style pair `(p_i, p_j)` from two different documents.
    pub fn reconstruction(&mut self, corpus: &Corpus) -> Result<StreamBatch> {
        let eligible: Vec<usize> =
            (0..corpus.num_styles()).filter(|&s| corpus.docs_of_style(s).len() >= 2).collect();
        if eligible.is_empty() {
            bail!(Config, "reconstruction stream needs a style with at least two documents");
        }
        let style = *eligible.choose(&mut self.rng).unwrap();
        let pair: Vec<usize> =
            corpus.docs_of_style(style).choose_multiple(&mut self.rng, 2).copied().collect();
        let target = self.paragraph(corpus, pair[0]);
        let reference = self.paragraph(corpus, pair[1]);
        let context = extract_context(&target, self.n_ctx)?;
        Ok(StreamBatch {
            kind: StreamKind::Reconstruction,
            context,
            reference,
            target: Some(target),
            style_context: style,
            style_reference: style,
        })
    }

    /// Cross-style pair `(p_i, p_k)` with different style labels.
    pub fn cross_style(&mut self, corpus: &Corpus) -> Result<StreamBatch> {
        let present: Vec<usize> =
            (0..corpus.num_styles()).filter(|&s| !corpus.docs_of_style(s).is_empty()).collect();
        if present.len() < 2 {
            bail!(Config, "cross-style stream needs at least two styles with documents");
        }
        let pair: Vec<usize> = present.choose_multiple(&mut self.rng, 2).copied().collect();
        let (si, sk) = (pair[0], pair[1]);
        let di = *corpus.docs_of_style(si).choose(&mut self.rng).unwrap();
        let dk = *corpus.docs_of_style(sk).choose(&mut self.rng).unwrap();
        let p_i = self.paragraph(corpus, di);
        let reference = self.paragraph(corpus, dk);
        let context = extract_context(&p_i, self.n_ctx)?;
        Ok(StreamBatch {
            kind: StreamKind::CrossStyle,
            context,
            reference,
            target: None,
            style_context: si,
            style_reference: sk,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Generator description for one synthetic style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub alphabet: String,
    pub weights: Vec<f32>,
    pub min_len: usize,
    pub max_len: usize,
    pub line_len: usize,
    /// Probability that a line repeats the previous one.
    #[serde(default)]
    pub repeat_prob: f32,
}

const LEXICON_SIZE: usize = 8;
const WORD_LEN: (usize, usize) = (2, 6);

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.alphabet.chars().collect();
        if chars.is_empty() {
            bail!(Config, "style {}: empty alphabet", self.name);
        }
        if chars.len() != self.weights.len() {
            bail!(Config, "style {}: {} symbols but {} weights", self.name, chars.len(), self.weights.len());
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            bail!(Config, "style {}: weights must be finite and nonnegative", self.name);
        }
        if self.weights.iter().sum::<f32>() <= 0.0 {
            bail!(Config, "style {}: zero-weight alphabet", self.name);
        }
        if chars.iter().any(|c| c.is_whitespace()) {
            bail!(Config, "style {}: whitespace is structural, not an alphabet symbol", self.name);
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            bail!(Config, "style {}: need 0 < min_len <= max_len", self.name);
        }
        if self.line_len == 0 {
            bail!(Config, "style {}: line_len must be positive", self.name);
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            bail!(Config, "style {}: repeat_prob outside [0, 1]", self.name);
        }
        Ok(())
    }

    fn normalized(&self) -> HashMap<char, f64> {
        let total: f64 = self.weights.iter().map(|&w| w as f64).sum();
        let mut m = HashMap::new();
        for (c, &w) in self.alphabet.chars().zip(&self.weights) {
            *m.entry(c).or_insert(0.0) += w as f64 / total;
        }
        m
    }

    /// Shared probability mass between two alphabets.
    pub fn overlap(&self, other: &StyleSpec) -> f64 {
        let a = self.normalized();
        let b = other.normalized();
        a.iter().filter_map(|(c, pa)| b.get(c).map(|pb| pa.min(*pb))).sum()
    }

    fn sample_char<R: Rng>(&self, chars: &[char], cumulative: &[f64], rng: &mut R) -> char {
        let total = *cumulative.last().unwrap();
        let u = rng.gen::<f64>() * total;
        let i = cumulative.partition_point(|&c| c <= u).min(chars.len() - 1);
        chars[i]
    }

    /// One document: a private lexicon of short words arranged into lines.
    fn document<R: Rng>(&self, rng: &mut R) -> String {
        let chars: Vec<char> = self.alphabet.chars().collect();
        let mut cumulative = Vec::with_capacity(chars.len());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w as f64;
            cumulative.push(acc);
        }
        let lexicon: Vec<String> = (0..LEXICON_SIZE)
            .map(|_| {
                let n = rng.gen_range(WORD_LEN.0..=WORD_LEN.1);
                (0..n).map(|_| self.sample_char(&chars, &cumulative, rng)).collect()
            })
            .collect();
        let target = rng.gen_range(self.min_len..=self.max_len);
        let mut text = String::new();
        let mut prev: Option<String> = None;
        while text.len() < target {
            let line = match &prev {
                Some(p) if rng.gen::<f32>() < self.repeat_prob => p.clone(),
                _ => {
                    let mut line = String::new();
                    while line.len() < self.line_len {
                        if !line.is_empty() {
                            line.push(' ');
                        }
                        line.push_str(lexicon.choose(rng).unwrap());
                    }
                    line
                }
            };
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str(&line);
            prev = Some(line);
        }
        text
    }

    pub fn load_all(path: &Path) -> Result<Vec<StyleSpec>> {
        let specs: Vec<StyleSpec> = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| crate::error::Error::Config(format!("style spec file: {e}")))?;
        Ok(specs)
    }
}

const ENGLISH_FREQ: [f32; 26] = [
    8.2, 1.5, 2.8, 4.3, 12.7, 2.2, 2.0, 6.1, 7.0, 0.15, 0.77, 4.0, 2.4, 6.7, 7.5, 1.9, 0.095,
    6.0, 6.3, 9.1, 2.8, 0.98, 2.4, 0.15, 2.0, 0.074,
];

/// The three shipped styles: capitalised prose, numeric report lines and
/// short repetitive lowercase lyric lines.
pub fn default_specs() -> Vec<StyleSpec> {
    vec![
        StyleSpec {
            name: "caps-prose".into(),
            alphabet: ('A'..='Z').collect(),
            weights: ENGLISH_FREQ.to_vec(),
            min_len: 240,
            max_len: 480,
            line_len: 56,
            repeat_prob: 0.0,
        },
        StyleSpec {
            name: "digits-report".into(),
            alphabet: "0123456789".into(),
            weights: vec![1.0; 10],
            min_len: 200,
            max_len: 400,
            line_len: 24,
            repeat_prob: 0.0,
        },
        StyleSpec {
            name: "lowercase-lyrics".into(),
            alphabet: ('a'..='z').collect(),
            weights: ENGLISH_FREQ.to_vec(),
            min_len: 200,
            max_len: 400,
            line_len: 16,
            repeat_prob: 0.4,
        },
    ]
}

/// Deterministic synthetic corpus, `docs_per_style` documents per spec,
/// interleaved by style.
pub fn synth_corpus(specs: &[StyleSpec], docs_per_style: usize, seed: u64) -> Result<Corpus> {
    if specs.len() < 2 {
        bail!(Config, "need at least two style specs, got {}", specs.len());
    }
    if docs_per_style == 0 {
        bail!(Config, "docs_per_style must be positive");
    }
    for s in specs {
        s.validate()?;
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.name == b.name {
                bail!(Config, "duplicate style name {}", a.name);
            }
            let o = a.overlap(b);
            if o > 0.5 {
                bail!(Config, "styles {} and {} overlap by {:.0}% of alphabet weight", a.name, b.name, o * 100.0);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(specs.len() * docs_per_style);
    for n in 0..docs_per_style {
        for (style, spec) in specs.iter().enumerate() {
            docs.push(Document {
                id: format!("{}-{n:04}", spec.name),
                style,
                text: spec.document(&mut rng),
            });
        }
    }
    Corpus::new(specs.iter().map(|s| s.name.clone()).collect(), docs)
}
