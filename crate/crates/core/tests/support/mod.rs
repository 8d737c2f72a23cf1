//! Shared harnesses for the gradient, causality and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styf::autodiff::{Mode, Tape, Var};
use styf::models::{GeneratorBundle, LanguageModel};
use styf::tensor::Tensor;
use styf::transformer::{adaptive_layer_norm, ModelConfig, Variant};
use styf::Result;

pub const INSTANCES: usize = 100;
pub const STEP: f32 = 1e-2;
/// Finer step for the whole-network probe, where curvature dominates.
pub const NET_STEP: f32 = 3e-3;
pub const TOLERANCE: f64 = 1e-3;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;
pub type Inputs = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct OpCase {
    pub name: &'static str,
    pub build: Box<Build>,
    pub inputs: Box<Inputs>,
}

fn case(
    name: &'static str,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
) -> OpCase {
    OpCase { name, build: Box::new(build), inputs: Box::new(inputs) }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5))
}

fn randn(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    Tensor::randn(&[m, n], 1.0, rng)
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = dims(rng);
    vec![randn(rng, m, n)]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = dims(rng);
    vec![randn(rng, m, n), randn(rng, m, n)]
}

fn with_row(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = dims(rng);
    vec![randn(rng, m, n), randn(rng, 1, n)]
}

/// Rows at least three wide: two channels normalise to a constant ±1
/// pattern whose gradient is pure round-off.
fn norm_rows(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(3..=6))
}

/// Every differentiable tape op with a generator of random inputs.
pub fn catalogue() -> Vec<OpCase> {
    let teacher = Tensor::from_rows(2, 3, vec![0.2, 0.5, 0.3, 0.0, 0.1, 0.9]).unwrap();
    vec![
        case("matmul", |t, v| t.matmul(v[0], v[1]), |rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..=4);
            vec![randn(rng, m, k), randn(rng, k, n)]
        }),
        case("matmul_t", |t, v| t.matmul_t(v[0], v[1]), |rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..=4);
            vec![randn(rng, m, k), randn(rng, n, k)]
        }),
        case("transpose", |t, v| Ok(t.transpose(v[0])), one),
        case("add", |t, v| t.add(v[0], v[1]), pair),
        case("sub", |t, v| t.sub(v[0], v[1]), pair),
        case("mul", |t, v| t.mul(v[0], v[1]), pair),
        case("add_row", |t, v| t.add_row(v[0], v[1]), with_row),
        case("mul_row", |t, v| t.mul_row(v[0], v[1]), with_row),
        case("affine", |t, v| Ok(t.affine(v[0], -1.7, 0.3)), one),
        case("scale", |t, v| Ok(t.scale(v[0], 0.35)), one),
        case("gelu", |t, v| Ok(t.gelu(v[0])), one),
        case("sigmoid", |t, v| Ok(t.sigmoid(v[0])), one),
        case("log_clamped", |t, v| Ok(t.log_clamped(v[0], 1e-7)), |rng| {
            // Bounded away from the floor so a ±step never crosses it.
            let (m, n) = dims(rng);
            vec![Tensor::uniform(&[m, n], 0.5, 2.0, rng)]
        }),
        case("softmax", |t, v| Ok(t.softmax(v[0])), one),
        case("causal_softmax", |t, v| t.causal_softmax(v[0]), |rng| {
            let n = rng.gen_range(1..=5);
            vec![randn(rng, n, n)]
        }),
        case("layer_norm", |t, v| Ok(t.layer_norm(v[0], 1e-5)), |rng| {
            let (m, n) = norm_rows(rng);
            vec![randn(rng, m, n)]
        }),
        case("adaptive_layer_norm", |t, v| adaptive_layer_norm(t, v[0], v[1], v[2], 1e-5), |rng| {
            let (m, n) = norm_rows(rng);
            vec![randn(rng, m, n), randn(rng, 1, n), randn(rng, 1, n)]
        }),
        case("gather", |t, v| t.gather(v[0], &[2, 0, 2, 1]), |rng| {
            let n = rng.gen_range(1..=4);
            vec![randn(rng, 3, n)]
        }),
        case("slice_cols", |t, v| t.slice_cols(v[0], 1, 2), |rng| {
            let m = rng.gen_range(1..=4);
            let n = rng.gen_range(3..=5);
            vec![randn(rng, m, n)]
        }),
        case("slice_rows", |t, v| t.slice_rows(v[0], 1, 2), |rng| {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(3..=5);
            vec![randn(rng, m, n)]
        }),
        case("concat_cols", |t, v| t.concat_cols(&[v[0], v[1], v[0]]), |rng| {
            let m = rng.gen_range(1..=4);
            let (a, b) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            vec![randn(rng, m, a), randn(rng, m, b)]
        }),
        case("concat_rows", |t, v| t.concat_rows(&[v[0], v[1]]), |rng| {
            let n = rng.gen_range(1..=4);
            let (a, b) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            vec![randn(rng, a, n), randn(rng, b, n)]
        }),
        case("repeat_rows", |t, v| t.repeat_rows(v[0], 3), |rng| {
            let n = rng.gen_range(1..=5);
            vec![randn(rng, 1, n)]
        }),
        case("mean_rows", |t, v| Ok(t.mean_rows(v[0])), one),
        case("sum", |t, v| Ok(t.sum(v[0])), one),
        case("mean", |t, v| Ok(t.mean(v[0])), one),
        case("cross_entropy", |t, v| t.cross_entropy(v[0], &[0, 3, 1]), |rng| vec![randn(rng, 3, 4)]),
        case("soft_cross_entropy", move |t, v| t.soft_cross_entropy(&teacher, v[0]), |rng| vec![randn(rng, 2, 3)]),
    ]
}

fn probe(tape: &Tape, out: Var, r: &Tensor) -> f64 {
    tape.value(out).data().iter().zip(r.data()).map(|(&o, &w)| o as f64 * w as f64).sum()
}

fn evaluate(build: &Build, inputs: &[Tensor], r: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    probe(&tape, out, r)
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-6)
}

/// Worst norm-wise relative error over the inputs of one instance. The
/// scalar probe is `Σ out ⊙ R` for a random `R`, accumulated in f64.
fn check_instance(build: &Build, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let (m, n) = tape.shape(out);
    let r = Tensor::randn(&[m, n], 1.0, rng);
    let weights = tape.constant(r.clone()).unwrap();
    let weighted = tape.mul(out, weights).unwrap();
    let loss = tape.sum(weighted);
    let analytic = tape.backward_vars(loss, &vars).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            *slot = (evaluate(build, &plus, &r) - evaluate(build, &minus, &r)) / (2.0 * STEP as f64);
        }
        let a: Vec<f64> = analytic[i].data().iter().map(|&x| x as f64).collect();
        worst = worst.max(relative_error(&a, &numeric));
    }
    worst
}

/// Worst relative error of one op over `instances` random inputs.
pub fn worst_error(case: &OpCase, instances: usize) -> f64 {
    let seed = case.name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let inputs = (case.inputs)(&mut rng);
            check_instance(&*case.build, &inputs, &mut rng)
        })
        .fold(0.0, f64::max)
}

fn generator_loss(bundle: &GeneratorBundle, sequence: &[u32], reference: &[u32]) -> (f64, Vec<f32>) {
    let mut tape = Tape::new();
    let tf = bundle.teacher_forced(&mut tape, Mode::Trainable, sequence, reference).unwrap();
    let loss = tape.cross_entropy(tf.logits, &sequence[1..]).unwrap();
    let value = tape.scalar(loss) as f64;
    let grads = tape.backward(loss).unwrap();
    (value, grads.for_store(&bundle.store).into_iter().flat_map(|g| g.into_data()).collect())
}

/// Whole-network check through encoder, style head and decoder: relative
/// error over `coords` random parameter coordinates.
pub fn generator_stack_error(variant: Variant, coords: usize) -> f64 {
    let cfg = ModelConfig { hidden: 8, heads: 2, layers: 1, max_len: 12, vocab: 11, ..ModelConfig::desk() };
    let mut rng = ChaCha8Rng::seed_from_u64(5 + variant.code() as u64);
    let mut bundle = GeneratorBundle::new(&cfg.with_variant(variant), 9).unwrap();
    // Move the modulation weights off their identity initialisation.
    for id in 0..bundle.store.len() {
        for x in bundle.store.get_mut(id).data_mut() {
            *x += 0.1 * rng.gen_range(-1.0f32..1.0);
        }
    }
    let sequence: Vec<u32> = (0..8).map(|_| rng.gen_range(0..11)).collect();
    let reference: Vec<u32> = (0..6).map(|_| rng.gen_range(0..11)).collect();
    let (_, flat) = generator_loss(&bundle, &sequence, &reference);
    let mut offsets = Vec::with_capacity(bundle.store.len());
    let mut acc = 0;
    for id in 0..bundle.store.len() {
        offsets.push(acc);
        acc += bundle.store.get(id).numel();
    }
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..coords {
        let id = rng.gen_range(0..bundle.store.len());
        let j = rng.gen_range(0..bundle.store.get(id).numel());
        let original = bundle.store.get(id).data()[j];
        bundle.store.get_mut(id).data_mut()[j] = original + NET_STEP;
        let plus = generator_loss(&bundle, &sequence, &reference).0;
        bundle.store.get_mut(id).data_mut()[j] = original - NET_STEP;
        let minus = generator_loss(&bundle, &sequence, &reference).0;
        bundle.store.get_mut(id).data_mut()[j] = original;
        numeric.push((plus - minus) / (2.0 * NET_STEP as f64));
        analytic.push(flat[offsets[id] + j] as f64);
    }
    relative_error(&analytic, &numeric)
}

pub fn causal_config(variant: Variant) -> ModelConfig {
    ModelConfig { hidden: 16, heads: 4, layers: 2, max_len: 24, vocab: 40, ..ModelConfig::desk() }.with_variant(variant)
}

/// Random tokens, a cut point `k` and a copy differing somewhere after `k`.
fn perturbed_pair(rng: &mut ChaCha8Rng, vocab: u32, max_len: usize) -> (Vec<u32>, Vec<u32>, usize) {
    let len = rng.gen_range(2..=max_len);
    let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let k = rng.gen_range(0..len - 1);
    let mut changed = tokens.clone();
    for t in changed.iter_mut().skip(k + 1) {
        if rng.gen_bool(0.7) {
            *t = (*t + rng.gen_range(1..vocab)) % vocab;
        }
    }
    let forced = rng.gen_range(k + 1..len);
    changed[forced] = (tokens[forced] + 1) % vocab;
    (tokens, changed, k)
}

fn prefix_identical(a: &Tensor, b: &Tensor, k: usize) -> bool {
    (0..=k).all(|r| a.row_slice(r).iter().zip(b.row_slice(r)).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Number of trials in which a logit row at a position ≤ k changed after
/// perturbing tokens beyond k. `Variant::None` checks the language model.
pub fn causality_violations(variant: Variant, trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = causal_config(variant);
    if variant == Variant::None {
        let lm = LanguageModel::new(&cfg, 1).unwrap();
        let run = |t: &[u32]| {
            let mut tape = Tape::new();
            let (_, logits) = lm.forward(&mut tape, Mode::Frozen, t).unwrap();
            tape.value(logits).clone()
        };
        return (0..trials)
            .filter(|_| {
                let (a, b, k) = perturbed_pair(&mut rng, cfg.vocab as u32, cfg.max_len);
                !prefix_identical(&run(&a), &run(&b), k)
            })
            .count();
    }
    let mut bundle = GeneratorBundle::new(&cfg, 3).unwrap();
    // Break the identity initialisation of the style pathways so that z
    // genuinely reaches every position.
    for id in 0..bundle.store.len() {
        for x in bundle.store.get_mut(id).data_mut() {
            *x += 0.05 * rng.gen_range(-1.0f32..1.0);
        }
    }
    let reference: Vec<u32> = (0..10).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect();
    let z = bundle.style_code_value(&reference).unwrap();
    let run = |t: &[u32]| {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone()).unwrap();
        let (_, logits) = bundle.decode(&mut tape, Mode::Frozen, t, zv).unwrap();
        tape.value(logits).clone()
    };
    let max_len = cfg.max_len - variant.prefix_len();
    (0..trials)
        .filter(|_| {
            let (a, b, k) = perturbed_pair(&mut rng, cfg.vocab as u32, max_len);
            !prefix_identical(&run(&a), &run(&b), k)
        })
        .count()
}
