//! Samples from a lognormal marked point process and checks its
//! log-likelihood gradient against central differences.
//!
//! ```bash
//! cargo run --release --example point_process
//! ```

use ctes_retrieval::mtpp::{ModelConfig, MtppModel, Variant};
use ctes_retrieval::seed::rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut r = rng(1);
    let model = MtppModel::new(ModelConfig::new(Variant::SelfAttention, 8, 4), &mut r);
    println!("parameters: {}", model.num_params());

    let seq = model.sample_sequence("sampled", 12, &mut r)?;
    for e in &seq.events {
        println!("  t = {:8.4}  mark {}", e.time, e.mark);
    }
    let ll = model.log_likelihood(&seq, None)?;
    println!("log-likelihood: {ll:.6}");

    let grad = model.grad_log_likelihood(&seq, None)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..grad.len()).step_by(7) {
        let mut plus = model.clone();
        plus.theta_mut()[i] += h;
        let mut minus = model.clone();
        minus.theta_mut()[i] -= h;
        let fd = (plus.log_likelihood(&seq, None)? - minus.log_likelihood(&seq, None)?) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs());
    }
    println!("max gradient deviation from finite differences: {worst:.2e}");

    // The cross variant scores one sequence conditioned on another.
    let cross = MtppModel::new(ModelConfig::new(Variant::CrossAttention, 8, 4), &mut r);
    let other = model.sample_sequence("other", 8, &mut r)?;
    println!("cross log-likelihood given another sequence: {:.6}", cross.log_likelihood(&seq, Some(&other))?);
    Ok(())
}
