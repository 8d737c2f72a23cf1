//! Training objective terms, the discriminator and comparator losses, and
//! the Fréchet embedding distance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::corpus::{StreamBatch, StreamKind};
use crate::error::{bail, Result};
use crate::models::{Comparator, Discriminator, GeneratorBundle, LanguageModel, Sampling};
use crate::transformer::Variant;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dist: f32,
    pub style: f32,
    pub gan: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dist: 1.0, style: 0.01, gan: 0.01 }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { dist: 0.0, style: 0.0, gan: 0.0 };

    /// Defaults for a variant; B uses a stronger adversarial weight.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::B => Self { dist: 1.0, style: 0.01, gan: 0.1 },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dist", self.dist), ("style", self.style), ("gan", self.gan)] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!(Config, "loss weight {name} must be finite and nonnegative, got {v}");
            }
        }
        Ok(())
    }

    /// Whether the cross-style stream contributes at all.
    pub fn uses_cross_style(&self) -> bool {
        self.style > 0.0 || self.gan > 0.0
    }
}

/// Logged values of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f32,
    pub dist: f32,
    pub style: f32,
    pub gan_generator: f32,
    pub gan_discriminator: f32,
    pub total: f32,
    /// Comparator probability on the cross-style continuation.
    pub comparator_score: f32,
}

impl LossBreakdown {
    /// `lm + λ_DIST·dist + λ_STYLE·style + λ_GAN·gan_generator`, summed in
    /// f32 in the same order as the tape so the identity holds exactly.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        let total = self.lm + self.dist * w.dist + self.style * w.style + self.gan_generator * w.gan;
        total as f64
    }
}

fn require(batch: &StreamBatch, kind: StreamKind) -> Result<()> {
    if batch.kind != kind {
        bail!(Contract, "expected a {kind:?} batch, got {:?}", batch.kind);
    }
    Ok(())
}

fn rs_target(batch: &StreamBatch) -> Result<&[u32]> {
    require(batch, StreamKind::Reconstruction)?;
    match &batch.target {
        Some(t) if t.len() >= 2 => Ok(t),
        _ => bail!(Contract, "reconstruction batch needs a target of at least two tokens"),
    }
}

/// `(L_LM, L_DIST)` from one shared teacher-forced pass. `lm` may be `None`
/// to skip distillation.
pub fn reconstruction_terms(
    tape: &mut Tape,
    bundle: &GeneratorBundle,
    mode: Mode,
    teacher: Option<&LanguageModel>,
    batch: &StreamBatch,
) -> Result<(Var, Option<Var>)> {
    let target = rs_target(batch)?;
    let tf = bundle.teacher_forced(tape, mode, target, &batch.reference)?;
    let lm_loss = tape.cross_entropy(tf.logits, &target[1..])?;
    let dist = match teacher {
        Some(h) => {
            let probs = h.next_token_probs(&target[..target.len() - 1])?;
            Some(tape.soft_cross_entropy(&probs, tf.logits)?)
        }
        None => None,
    };
    Ok((lm_loss, dist))
}

/// Mean next-token NLL of the reconstruction target given the reference.
pub fn loss_lm(tape: &mut Tape, bundle: &GeneratorBundle, mode: Mode, batch: &StreamBatch) -> Result<Var> {
    Ok(reconstruction_terms(tape, bundle, mode, None, batch)?.0)
}

/// Soft cross-entropy from the frozen LM's next-token distributions to the
/// generator's.
pub fn loss_dist(
    tape: &mut Tape,
    bundle: &GeneratorBundle,
    mode: Mode,
    teacher: &LanguageModel,
    batch: &StreamBatch,
) -> Result<Var> {
    Ok(reconstruction_terms(tape, bundle, mode, Some(teacher), batch)?.1.expect("teacher given"))
}

/// A free-running cross-style continuation and its differentiable decoder
/// features.
#[derive(Clone, Debug)]
pub struct CrossStyleRollout {
    pub generated: Vec<u32>,
    pub z: Var,
    /// `F_f` features at the generated positions, `[n_gen×B]`.
    pub fake: Var,
    /// `H_f(p_k)`, the frozen LM's features of the style reference.
    pub real: Var,
}

/// Greedy continuation of `ψ(p_i)` in the style of `p_k`, then one taped
/// pass over context ⊕ continuation with the generated ids held fixed.
pub fn cross_style_rollout(
    tape: &mut Tape,
    bundle: &GeneratorBundle,
    mode: Mode,
    teacher: &LanguageModel,
    batch: &StreamBatch,
    n_gen: usize,
) -> Result<CrossStyleRollout> {
    require(batch, StreamKind::CrossStyle)?;
    let z = bundle.style_code(tape, mode, &batch.reference)?;
    let z_value = tape.value(z).clone();
    let generated = bundle.generate_with_code(&batch.context, &z_value, n_gen, Sampling::Greedy, 0)?;
    let fake = bundle.continuation_features(tape, mode, &batch.context, &generated, z)?;
    let real = teacher.features(tape, &batch.reference)?;
    Ok(CrossStyleRollout { generated, z, fake, real })
}

/// `−log C(H_f(p_k), F_f(ψ(p_i), p_k))` with the comparator frozen.
pub fn loss_style(tape: &mut Tape, comparator: &Comparator, real: Var, fake: Var) -> Result<(Var, f32)> {
    let score = comparator.score(tape, Mode::Frozen, real, fake)?;
    let s = tape.scalar(score);
    let log = tape.log_clamped(score, PROB_FLOOR);
    Ok((tape.scale(log, -1.0), s))
}

/// `−log D(real) − log(1 − D(fake))`; `fake` is detached so no gradient
/// reaches the generator.
pub fn loss_gan_discriminator(tape: &mut Tape, disc: &Discriminator, real: Var, fake: Var) -> Result<Var> {
    let real = tape.detach(real);
    let fake = tape.detach(fake);
    let d_real = disc.score(tape, Mode::Trainable, real)?;
    let d_fake = disc.score(tape, Mode::Trainable, fake)?;
    let log_real = tape.log_clamped(d_real, PROB_FLOOR);
    let not_fake = tape.affine(d_fake, -1.0, 1.0);
    let log_fake = tape.log_clamped(not_fake, PROB_FLOOR);
    let sum = tape.add(log_real, log_fake)?;
    Ok(tape.scale(sum, -1.0))
}

/// Non-saturating generator term `−log D(fake)` with `D` frozen.
pub fn loss_gan_generator(tape: &mut Tape, disc: &Discriminator, fake: Var) -> Result<Var> {
    let d_fake = disc.score(tape, Mode::Frozen, fake)?;
    let log = tape.log_clamped(d_fake, PROB_FLOOR);
    Ok(tape.scale(log, -1.0))
}

/// Weighted objective over one reconstruction and (optionally) one
/// cross-style rollout. Returns the differentiable total and the breakdown
/// (its `gan_discriminator` field is left for the caller).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    bundle: &GeneratorBundle,
    mode: Mode,
    teacher: &LanguageModel,
    comparator: &Comparator,
    disc: &Discriminator,
    weights: &LossWeights,
    rs: &StreamBatch,
    rollout: Option<&CrossStyleRollout>,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut out = LossBreakdown::default();
    let teacher_opt = (weights.dist > 0.0).then_some(teacher);
    let (lm, dist) = reconstruction_terms(tape, bundle, mode, teacher_opt, rs)?;
    out.lm = tape.scalar(lm);
    let mut total = lm;
    if let Some(d) = dist {
        out.dist = tape.scalar(d);
        let w = tape.scale(d, weights.dist);
        total = tape.add(total, w)?;
    }
    if weights.uses_cross_style() {
        let Some(r) = rollout else {
            bail!(Contract, "nonzero style/GAN weights need a cross-style rollout");
        };
        if weights.style > 0.0 {
            let (style, score) = loss_style(tape, comparator, r.real, r.fake)?;
            out.style = tape.scalar(style);
            out.comparator_score = score;
            let w = tape.scale(style, weights.style);
            total = tape.add(total, w)?;
        }
        if weights.gan > 0.0 {
            let g = loss_gan_generator(tape, disc, r.fake)?;
            out.gan_generator = tape.scalar(g);
            let w = tape.scale(g, weights.gan);
            total = tape.add(total, w)?;
        }
    }
    out.total = tape.scalar(total);
    Ok((total, out))
}

/// Binary cross-entropy of a comparator probability against the same-style
/// label.
pub fn comparator_pretrain_loss(tape: &mut Tape, score: Var, same_style: bool) -> Var {
    let p = if same_style { score } else { tape.affine(score, -1.0, 1.0) };
    let log = tape.log_clamped(p, PROB_FLOOR);
    tape.scale(log, -1.0)
}

/// Fréchet distance between Gaussian fits (sample mean, unbiased
/// covariance) of two sets of equal-width vectors.
pub fn fed(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    let dim = match a.first() {
        Some(v) => v.len(),
        None => bail!(Contract, "empty feature set"),
    };
    if dim == 0 {
        bail!(Contract, "zero-width features");
    }
    for set in [a, b] {
        if set.len() < dim + 1 {
            bail!(Contract, "need at least {} vectors of width {dim}, got {}", dim + 1, set.len());
        }
        if set.iter().any(|v| v.len() != dim) {
            bail!(Contract, "feature width mismatch");
        }
    }
    let (mu_a, cov_a) = gaussian_fit(a, dim);
    let (mu_b, cov_b) = gaussian_fit(b, dim);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let root_a = psd_sqrt(&cov_a);
    let mid = &root_a * &cov_b * &root_a;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

fn gaussian_fit(set: &[Vec<f32>], dim: usize) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let x = DMatrix::from_fn(n, dim, |r, c| set[r][c] as f64);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, dim, |r, c| x[(r, c)] - mu[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}
