use rand::Rng as _;

use ctes_retrieval::datagen::{generate, GenConfig};
use ctes_retrieval::hashing::{train_hash_net, HashConfig};
use ctes_retrieval::relevance::RelevanceModel;
use ctes_retrieval::retrieval::corpus_vectors;
use ctes_retrieval::seed::{rng, Rng};
use ctes_retrieval::unwarp::{Unwarp, UnwarpConfig};
use ctes_retrieval::{ModelConfig, MtppModel, Variant};

#[test]
fn relevant_pairs_collide_more_than_random_pairs() {
    let bench = generate(&GenConfig {
        bases: 20,
        seed: 12,
        ..GenConfig::default()
    })
    .unwrap();
    let model = MtppModel::new(ModelConfig::new(Variant::SelfAttention, 8, 5), &mut rng(12));
    let scorer = RelevanceModel::new(model, Unwarp::identity(UnwarpConfig::default()));
    let (vectors, _) = corpus_vectors(&scorer, &bench.corpus).unwrap();
    let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.data.clone()).collect();
    let (net, _) = train_hash_net(&data, &HashConfig { seed: 12, ..HashConfig::new(16) }).unwrap();

    let mut relevant = Vec::new();
    let mut random = Vec::new();
    let mut r = rng(13);
    let ids = bench.corpus.ids();
    for q in bench.queries.iter() {
        let qv = scorer.prepare_query(q).unwrap().vector.unwrap();
        let qc = net.code(&qv.data);
        let code_of = |id: &str| net.code(&scorer.corpus_vector(bench.corpus.get(id).unwrap()).unwrap().data);
        for id in bench.judgments.positives(&q.id) {
            relevant.push(qc.hamming(&code_of(id)) as f64);
        }
        for _ in 0..30 {
            let id = &ids[r.random_range(0..ids.len())];
            random.push(qc.hamming(&code_of(id)) as f64);
        }
    }

    // One-sided bootstrap on the difference of means.
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let resample = |v: &[f64], r: &mut Rng| {
        (0..v.len()).map(|_| v[r.random_range(0..v.len())]).collect::<Vec<_>>()
    };
    let mut diffs: Vec<f64> = (0..1000)
        .map(|_| mean(&resample(&relevant, &mut r)) - mean(&resample(&random, &mut r)))
        .collect();
    diffs.sort_by(f64::total_cmp);
    let upper = diffs[949];
    assert!(
        upper < 0.0,
        "relevant {:.3} vs random {:.3}, 95% upper bound {upper:.3}",
        mean(&relevant),
        mean(&random)
    );
}
