//! Learns binary codes for Fisher vectors, buckets them into hash tables and
//! looks up candidates for a query.
//!
//! ```bash
//! cargo run --release --example hashed_index
//! ```

use ctes_retrieval::datagen::{generate, GenConfig};
use ctes_retrieval::hashing::{train_hash_net, HashConfig, HashIndex};
use ctes_retrieval::relevance::RelevanceModel;
use ctes_retrieval::retrieval::corpus_vectors;
use ctes_retrieval::seed::rng;
use ctes_retrieval::unwarp::{Unwarp, UnwarpConfig};
use ctes_retrieval::{ModelConfig, MtppModel, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate(&GenConfig {
        bases: 20,
        seed: 4,
        ..GenConfig::default()
    })?;
    let model = MtppModel::new(ModelConfig::new(Variant::SelfAttention, 8, 5), &mut rng(4));
    let scorer = RelevanceModel::new(model, Unwarp::identity(UnwarpConfig::default()));
    let (vectors, _) = corpus_vectors(&scorer, &bench.corpus)?;
    let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.data.clone()).collect();

    let (net, report) = train_hash_net(&data, &HashConfig { seed: 4, ..HashConfig::new(8) })?;
    let first = report.losses.first().unwrap();
    let best = report.losses[report.best_epoch];
    println!("hash loss {:.4} -> {:.4} (best epoch {})", first.total, best.total, report.best_epoch);

    let codes: Vec<_> = vectors.iter().map(|v| (v.id.clone(), net.code(&v.data))).collect();
    for b in 0..8 {
        let ones = codes.iter().filter(|(_, c)| c.0[b] > 0).count();
        print!("{:.2} ", ones as f64 / codes.len() as f64);
    }
    println!("<- fraction of +1 per bit");

    let index = HashIndex::build(&codes, 10, 4, 4)?;
    for (t, table) in index.tables.iter().enumerate().take(3) {
        println!("table {t}: bits {:?}, {} non-empty buckets", table.positions, table.buckets.len());
    }
    let query = bench.queries.iter().next().unwrap();
    let q = scorer.prepare_query(query)?.vector.unwrap();
    let candidates = index.candidates(&net.code(&q.data));
    let relevant = bench.judgments.positives(&query.id);
    let hits = relevant.iter().filter(|id| candidates.contains(**id)).count();
    println!(
        "query {}: {} of {} sequences examined, {hits}/{} relevant among them",
        query.id,
        candidates.len(),
        bench.corpus.len(),
        relevant.len()
    );
    Ok(())
}
