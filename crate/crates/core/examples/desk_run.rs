//! Runs the compact desk pipeline once and prints every headline number.
//!
//! `cargo run --release -p styf --example desk_run -- [variant] [steps] [style-weight]`

use std::time::Instant;

use styf::objectives::LossWeights;
use styf::pipeline::{build_foundation, DeskPlan};
use styf::transformer::Variant;

fn main() -> styf::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("D").parse()?;
    let mut plan = DeskPlan::compact();
    if let Some(steps) = args.next() {
        plan.generator.steps = steps.parse().expect("steps");
    }
    plan.generator.model.variant = variant;
    if let Some(style) = args.next() {
        let mut w = LossWeights::for_variant(variant);
        w.style = style.parse().expect("style weight");
        plan.generator.weights = Some(w);
    }
    let t = Instant::now();
    let f = build_foundation(&plan)?;
    println!("foundation: {:.1}s", t.elapsed().as_secs_f64());
    println!("comparator test accuracy {:.3}", f.comparator.test_accuracy);
    println!("probe accuracy {:?}", f.classifier_accuracy);
    println!("diversity bounds {:?}", f.diversity);
    println!("novelty bounds {:?}", f.novelty);
    let t = Instant::now();
    let run = f.train(&plan.generator)?;
    println!("generator ({} steps): {:.1}s", plan.generator.steps, t.elapsed().as_secs_f64());
    for r in run.log.records.iter().filter(|r| r.val_fed.is_some()) {
        println!("  step {} val FED {:.4}", r.step, r.val_fed.unwrap());
    }
    let lm = run.log.reconstruction_losses();
    for chunk in lm.chunks(100) {
        print!("{:.3} ", chunk.iter().sum::<f32>() / chunk.len() as f32);
    }
    println!();
    let t = Instant::now();
    let eval = f.evaluate(&run.bundle, &plan.eval)?;
    println!("evaluation: {:.1}s", t.elapsed().as_secs_f64());
    println!("{}", serde_json::to_string_pretty(&eval.report).unwrap());
    for s in eval.samples.iter().take(6) {
        println!(
            "[{}] {:?} => {:?}",
            f.corpus.style_names()[s.target_style],
            styf::corpus::detokenize(&s.context),
            styf::corpus::detokenize(&s.generated)
        );
    }
    Ok(())
}
