//! End-to-end desk pipeline: synthetic corpus → LM → comparator → style
//! probes and metric bounds → generator training → evaluation.

use serde::{Deserialize, Serialize};

use crate::corpus::{default_specs, synth_corpus, Corpus, Splits, StyleSpec};
use crate::error::Result;
use crate::metrics::{
    diversity_bounds, evaluate, novelty_bounds, probe_examples, Bounds, EvalConfig, Evaluation, PairShape,
    StyleClassifiers,
};
use crate::models::{GeneratorBundle, LanguageModel};
use crate::optim::{AdamConfig, Schedule};
use crate::trainer::{pretrain_comparator, pretrain_lm, train_generator, ComparatorRun, GeneratorRun, TrainConfig, TrainLog};
use crate::transformer::{ModelConfig, Variant};

/// Every knob of one desk run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskPlan {
    pub specs: Vec<StyleSpec>,
    pub docs_per_style: usize,
    pub corpus_seed: u64,
    pub split_seed: u64,
    pub lm: TrainConfig,
    pub comparator: TrainConfig,
    pub generator: TrainConfig,
    pub eval: EvalConfig,
    /// Probe training windows drawn per training document.
    pub probe_windows_per_doc: usize,
}

impl DeskPlan {
    /// Compact configuration sized so the whole pipeline, including its
    /// ablation reruns, fits a single-CPU budget.
    pub fn compact() -> Self {
        let model = ModelConfig { hidden: 32, heads: 4, layers: 2, max_len: 64, ..ModelConfig::desk() };
        let n_gen = 16;
        let lm = TrainConfig { model: model.clone(), n_gen, ..TrainConfig::pretrain_lm() };
        let comparator = TrainConfig { model: model.clone(), n_gen, ..TrainConfig::pretrain_comparator() };
        let generator = TrainConfig {
            model: model.with_variant(Variant::D),
            steps: 1000,
            batch_size: 4,
            n_ctx: 8,
            n_gen,
            window: 64,
            eval_interval: 250,
            optimizer: AdamConfig { schedule: Schedule::Cosine, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let eval = EvalConfig { n_gen, n_ctx: 8, reference_len: 64, ..EvalConfig::default() };
        Self {
            specs: default_specs(),
            docs_per_style: 200,
            corpus_seed: 42,
            split_seed: 42,
            lm,
            comparator,
            generator,
            eval,
            probe_windows_per_doc: 2,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lm.seed = seed;
        self.comparator.seed = seed;
        self.generator.seed = seed;
        self.eval.seed = seed;
        self
    }
}

/// Everything the generator phase and evaluation depend on.
#[derive(Clone, Debug)]
pub struct Foundation {
    pub corpus: Corpus,
    pub splits: Splits,
    pub lm: LanguageModel,
    pub lm_log: TrainLog,
    pub comparator: ComparatorRun,
    pub classifiers: StyleClassifiers,
    /// Held-out per-style binary accuracy of the probes.
    pub classifier_accuracy: Vec<f64>,
    pub diversity: Bounds,
    pub novelty: Bounds,
}

pub fn build_corpus(plan: &DeskPlan) -> Result<(Corpus, Splits)> {
    let corpus = synth_corpus(&plan.specs, plan.docs_per_style, plan.corpus_seed)?;
    let splits = corpus.split(plan.split_seed)?;
    Ok((corpus, splits))
}

/// Probes, their held-out accuracy and both metric bounds for a trained LM.
pub fn fit_evaluators(
    plan: &DeskPlan,
    splits: &Splits,
    lm: &LanguageModel,
) -> Result<(StyleClassifiers, Vec<f64>, Bounds, Bounds)> {
    let e = &plan.eval;
    let train = probe_examples(lm, &splits.train, e.n_gen, plan.probe_windows_per_doc, e.seed ^ 0x9e37)?;
    let held = probe_examples(lm, &splits.test, e.n_gen, plan.probe_windows_per_doc, e.seed ^ 0x7f4a)?;
    let classifiers = StyleClassifiers::fit(&train, splits.train.num_styles())?;
    let accuracy = classifiers.accuracy(&held)?;
    let diversity = diversity_bounds(&splits.test, lm, e.n_bound_samples, e.n_gen, e.seed ^ 0x51)?;
    let novelty = novelty_bounds(
        &splits.test,
        lm,
        e.n_bound_samples,
        PairShape { left: e.n_gen, right: e.reference_len },
        e.seed ^ 0x52,
    )?;
    Ok((classifiers, accuracy, diversity, novelty))
}

pub fn build_foundation(plan: &DeskPlan) -> Result<Foundation> {
    let (corpus, splits) = build_corpus(plan)?;
    let (lm, lm_log) = pretrain_lm(&splits, &plan.lm)?;
    let comparator = pretrain_comparator(&splits, &lm, &plan.comparator)?;
    let (classifiers, classifier_accuracy, diversity, novelty) = fit_evaluators(plan, &splits, &lm)?;
    Ok(Foundation { corpus, splits, lm, lm_log, comparator, classifiers, classifier_accuracy, diversity, novelty })
}

impl Foundation {
    pub fn train(&self, cfg: &TrainConfig) -> Result<GeneratorRun> {
        train_generator(&self.splits, &self.lm, &self.comparator.comparator, cfg)
    }

    pub fn evaluate(&self, bundle: &GeneratorBundle, cfg: &EvalConfig) -> Result<Evaluation> {
        evaluate(bundle, &self.lm, &self.classifiers, &self.splits.test, cfg, self.diversity, self.novelty)
    }
}
