//! Scores candidates against a query with the Fisher kernel plus the
//! model-independent time and mark similarity.
//!
//! ```bash
//! cargo run --release --example relevance_scoring
//! ```

use ctes_retrieval::relevance::{mark_distance, time_distance, RelevanceModel};
use ctes_retrieval::seed::rng;
use ctes_retrieval::unwarp::{Unwarp, UnwarpConfig};
use ctes_retrieval::{EventSequence, ModelConfig, MtppModel, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = MtppModel::new(ModelConfig::new(Variant::SelfAttention, 8, 3), &mut rng(5));
    let scorer = RelevanceModel::new(model, Unwarp::identity(UnwarpConfig::default()));

    let query = EventSequence::from_parts("q", &[0.2, 0.5, 0.9, 1.4], &[0, 1, 1, 2], 1.6);
    let candidates = [
        EventSequence::from_parts("same", &[0.2, 0.5, 0.9, 1.4], &[0, 1, 1, 2], 1.6),
        EventSequence::from_parts("shifted", &[0.3, 0.6, 1.0, 1.5], &[0, 1, 1, 2], 1.7),
        EventSequence::from_parts("remarked", &[0.2, 0.5, 0.9, 1.4], &[2, 2, 0, 0], 1.6),
        EventSequence::from_parts("short", &[0.7], &[1], 1.0),
    ];
    println!("{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}", "candidate", "kappa", "sim", "score", "d_time", "d_mark");
    for c in &candidates {
        let s = scorer.relevance_score(&query, c)?;
        let horizon = query.horizon.max(c.horizon);
        let dt = time_distance(&query.times(), &c.times(), horizon)?;
        let dm = mark_distance(&query.marks(), &c.marks());
        println!("{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.1}", c.id, s.kappa, s.sim, s.total, dt, dm);
    }
    Ok(())
}
