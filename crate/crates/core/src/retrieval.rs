//! Top-K retrieval (hashed or exhaustive) and ranking metrics.
//!
//! Rankings sort by score, highest first, breaking ties by ascending corpus
//! id. Gains are binary and unjudged ids count as non-relevant.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Corpus, EventSequence, RelevanceJudgments};
use crate::hashing::{train_hash_net, HashCode, HashConfig, HashError, HashIndex, Hasher, RandomHyperplanes};
use crate::mtpp::Variant;
use crate::relevance::{FisherVector, RelevanceError, RelevanceModel};
use crate::seed::{derive, rng};

pub const DEFAULT_EVAL_NEGATIVES: usize = 100;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("hash candidates need a self-attention model, got {0}")]
    NotSelf(&'static str),
    #[error("corpus has no usable sequences")]
    EmptyCorpus,
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Hashed,
    ExhaustiveFallback,
    Exhaustive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Hashed => "hashed",
            Mode::ExhaustiveFallback => "exhaustive-fallback",
            Mode::Exhaustive => "exhaustive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    pub results: Vec<(String, f64)>,
    /// Corpus sequences the query was compared with.
    pub examined: usize,
    pub mode: Mode,
}

/// Sorts by descending score, ties by ascending id, and keeps `k`.
pub fn rank(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Average precision over a ranking, normalized by `total_relevant`.
pub fn average_precision(ranking: &[&str], relevant: &HashSet<&str>, total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

/// Binary-gain NDCG@k.
pub fn ndcg_at(ranking: &[&str], relevant: &HashSet<&str>, total_relevant: usize, k: usize) -> f64 {
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(i, _)| disc(i))
        .sum();
    let ideal: f64 = (0..total_relevant.min(k)).map(disc).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Reciprocal rank of the first relevant id; 0 when none is retrieved.
pub fn reciprocal_rank(ranking: &[&str], relevant: &HashSet<&str>) -> f64 {
    ranking
        .iter()
        .position(|id| relevant.contains(id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Per-query metric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub ap: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
    pub rr: f64,
}

pub fn query_metrics(ranking: &[&str], relevant: &HashSet<&str>) -> QueryMetrics {
    let n = relevant.len();
    QueryMetrics {
        ap: average_precision(ranking, relevant, n),
        ndcg10: ndcg_at(ranking, relevant, n, 10),
        ndcg20: ndcg_at(ranking, relevant, n, 20),
        rr: reciprocal_rank(ranking, relevant),
    }
}

/// Fisher vectors keyed by corpus id.
pub type VectorCache = HashMap<String, FisherVector>;

/// Scores `candidates` against a query. Self-variant vectors are read from
/// `cache` when present.
pub fn score_candidates(
    scorer: &RelevanceModel,
    query: &EventSequence,
    candidates: &[&EventSequence],
    cache: Option<&VectorCache>,
) -> Result<Vec<(String, f64)>, RelevanceError> {
    let pq = scorer.prepare_query(query)?;
    let use_cache = scorer.variant() == Variant::SelfAttention;
    candidates
        .par_iter()
        .map(|c| {
            let cached = if use_cache { cache.and_then(|m| m.get(&c.id)) } else { None };
            Ok((c.id.clone(), scorer.score_prepared(&pq, c, cached)?.total))
        })
        .collect()
}

/// Scores every corpus sequence.
pub fn exhaustive_topk(
    query: &EventSequence,
    k: usize,
    corpus: &Corpus,
    scorer: &RelevanceModel,
    cache: Option<&VectorCache>,
) -> Result<RankedResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let all: Vec<&EventSequence> = corpus.iter().collect();
    let scored = score_candidates(scorer, query, &all, cache)?;
    Ok(RankedResult {
        query_id: query.id.clone(),
        results: rank(scored, k),
        examined: corpus.len(),
        mode: Mode::Exhaustive,
    })
}

/// Which codes the index is built from.
#[derive(Debug, Clone, PartialEq)]
pub enum HashKind {
    Trained(HashConfig),
    Random { bits: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub tables: usize,
    pub bits_per_table: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            tables: crate::hashing::DEFAULT_TABLES,
            bits_per_table: crate::hashing::DEFAULT_BITS_PER_TABLE,
            seed: 0,
        }
    }
}

/// Corpus Fisher vectors under a self-attention model, their codes and the
/// bucket index.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub scorer: RelevanceModel,
    pub vectors: VectorCache,
    pub hasher: Hasher,
    pub codes: BTreeMap<String, HashCode>,
    pub index: HashIndex,
    /// Corpus ids left out because their gradient vanished.
    pub excluded: Vec<String>,
}

/// Self-variant Fisher vectors for a corpus, in corpus order, plus the ids
/// whose gradient vanished.
pub fn corpus_vectors(scorer: &RelevanceModel, corpus: &Corpus) -> Result<(Vec<FisherVector>, Vec<String>), RetrievalError> {
    if scorer.variant() != Variant::SelfAttention {
        return Err(RetrievalError::NotSelf(scorer.variant().name()));
    }
    let mut kept = Vec::with_capacity(corpus.len());
    let mut excluded = Vec::new();
    for (c, r) in corpus.iter().zip(scorer.corpus_vectors(corpus.sequences())) {
        match r {
            Ok(v) => kept.push(v),
            Err(RelevanceError::VanishingGradient { id, .. }) => {
                warn!("excluding {id}: vanishing gradient");
                excluded.push(c.id.clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((kept, excluded))
}

impl Pipeline {
    pub fn build(corpus: &Corpus, scorer: RelevanceModel, kind: &HashKind, index: &IndexConfig) -> Result<Self, RetrievalError> {
        let (vectors, excluded) = corpus_vectors(&scorer, corpus)?;
        Self::from_vectors(scorer, vectors, excluded, kind, index)
    }

    pub fn from_vectors(
        scorer: RelevanceModel,
        vectors: Vec<FisherVector>,
        excluded: Vec<String>,
        kind: &HashKind,
        index: &IndexConfig,
    ) -> Result<Self, RetrievalError> {
        if vectors.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let hasher = match kind {
            HashKind::Trained(cfg) => {
                let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.data.clone()).collect();
                Hasher::Trained(train_hash_net(&data, cfg)?.0)
            }
            HashKind::Random { bits, seed } => Hasher::Random(RandomHyperplanes::new(vectors[0].data.len(), *bits, *seed)),
        };
        Self::with_hasher(scorer, vectors, excluded, hasher, index)
    }

    pub fn with_hasher(
        scorer: RelevanceModel,
        vectors: Vec<FisherVector>,
        excluded: Vec<String>,
        hasher: Hasher,
        index: &IndexConfig,
    ) -> Result<Self, RetrievalError> {
        let refs: Vec<&[f64]> = vectors.iter().map(|v| v.data.as_slice()).collect();
        let codes: Vec<(String, HashCode)> = vectors.iter().map(|v| v.id.clone()).zip(hasher.codes(&refs)).collect();
        let idx = HashIndex::build(&codes, index.tables, index.bits_per_table, index.seed)?;
        Ok(Self {
            scorer,
            vectors: vectors.into_iter().map(|v| (v.id.clone(), v)).collect(),
            hasher,
            codes: codes.into_iter().collect(),
            index: idx,
            excluded,
        })
    }

    /// Same vectors and hasher, different table layout.
    pub fn reindex(&self, index: &IndexConfig) -> Result<Self, RetrievalError> {
        let codes: Vec<(String, HashCode)> = self.codes.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        Ok(Self {
            index: HashIndex::build(&codes, index.tables, index.bits_per_table, index.seed)?,
            ..self.clone()
        })
    }

    pub fn query_code(&self, query: &EventSequence) -> Result<HashCode, RetrievalError> {
        let pq = self.scorer.prepare_query(query)?;
        let v = pq.vector.expect("self scorer yields a query vector");
        Ok(self.hasher.code(&v.data))
    }

    /// Candidate ids for a query, or `None` when every bucket is empty.
    pub fn candidates(&self, query: &EventSequence) -> Result<Option<BTreeSet<String>>, RetrievalError> {
        let c = self.index.candidates(&self.query_code(query)?);
        Ok((!c.is_empty()).then_some(c))
    }

    /// Hashes the query, rescoring its candidates with `rescorer` (or the
    /// pipeline's own scorer). Falls back to a full scan when no bucket
    /// matches.
    pub fn query_topk(
        &self,
        query: &EventSequence,
        k: usize,
        corpus: &Corpus,
        rescorer: Option<&RelevanceModel>,
    ) -> Result<RankedResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let scorer = rescorer.unwrap_or(&self.scorer);
        match self.candidates(query)? {
            Some(ids) => {
                let cands: Vec<&EventSequence> = ids.iter().filter_map(|id| corpus.get(id)).collect();
                let scored = score_candidates(scorer, query, &cands, Some(&self.vectors))?;
                Ok(RankedResult {
                    query_id: query.id.clone(),
                    results: rank(scored, k),
                    examined: cands.len(),
                    mode: Mode::Hashed,
                })
            }
            None => {
                let mut r = exhaustive_topk(query, k, corpus, scorer, Some(&self.vectors))?;
                r.mode = Mode::ExhaustiveFallback;
                Ok(r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Sampled non-relevant sequences per query added to its positives.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: DEFAULT_EVAL_NEGATIVES,
            seed: 0,
        }
    }
}

/// Judged positives plus up to `negatives` sampled non-relevant ids. The
/// sample depends only on the seed and the query id.
pub fn evaluation_pool(judgments: &RelevanceJudgments, query: &str, corpus: &Corpus, cfg: &EvalConfig) -> Vec<String> {
    let mut pool: Vec<String> = judgments
        .positives(query)
        .into_iter()
        .filter(|id| corpus.contains(id))
        .map(String::from)
        .collect();
    let relevant: HashSet<&str> = judgments.positives(query).into_iter().collect();
    let negs: Vec<&str> = corpus.iter().map(|c| c.id.as_str()).filter(|id| !relevant.contains(id)).collect();
    let mut r = rng(derive(cfg.seed, query));
    let take = cfg.negatives.min(negs.len());
    let mut picked: Vec<usize> = sample(&mut r, negs.len(), take).into_vec();
    picked.sort_unstable();
    pool.extend(picked.into_iter().map(|i| negs[i].to_string()));
    pool
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    pub map: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
    pub mrr: f64,
    pub reduction: f64,
    pub comparisons: usize,
    pub corpus_size: usize,
    pub queries: usize,
    /// Queries without positives, left out of the averages.
    pub skipped: Vec<String>,
    pub fallbacks: usize,
    pub per_query: Vec<(String, QueryMetrics)>,
    pub rankings: Vec<RankedResult>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode.name());
        for (k, v) in [
            ("map", self.map),
            ("ndcg@10", self.ndcg10),
            ("ndcg@20", self.ndcg20),
            ("mrr", self.mrr),
            ("reduction_factor", self.reduction),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "comparisons={}", self.comparisons);
        let _ = writeln!(s, "corpus_size={}", self.corpus_size);
        let _ = writeln!(s, "queries={}", self.queries);
        let _ = writeln!(s, "skipped_queries={}", self.skipped.len());
        let _ = writeln!(s, "fallbacks={}", self.fallbacks);
        for (q, m) in &self.per_query {
            let _ = writeln!(s, "ap.{q}={}", m.ap);
        }
        s
    }
}

/// Writes `qid \t rank \t cid \t score \t mode` lines.
pub fn write_results(mut w: impl Write, results: &[RankedResult]) -> std::io::Result<()> {
    for r in results {
        for (i, (id, score)) in r.results.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", r.query_id, i + 1, id, score, r.mode.name())?;
        }
    }
    Ok(())
}

pub fn save_results(path: impl AsRef<Path>, results: &[RankedResult]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_results(&mut f, results)?;
    f.flush()
}

/// Ranks each query's evaluation pool and averages the metrics.
///
/// With a pipeline, only pool members among the hashed candidates are
/// ranked and the comparison count is the candidate count; without one the
/// whole pool is ranked and every corpus sequence counts as compared.
pub fn evaluate(
    queries: &[&EventSequence],
    corpus: &Corpus,
    judgments: &RelevanceJudgments,
    scorer: &RelevanceModel,
    pipeline: Option<&Pipeline>,
    cfg: &EvalConfig,
) -> Result<EvalReport, RetrievalError> {
    let cache = pipeline.map(|p| &p.vectors);
    let mut own_cache = None;
    if cache.is_none() && scorer.variant() == Variant::SelfAttention && !scorer.sim_only {
        let ids: BTreeSet<String> = queries
            .iter()
            .flat_map(|q| evaluation_pool(judgments, &q.id, corpus, cfg))
            .collect();
        let seqs: Vec<&EventSequence> = ids.iter().filter_map(|id| corpus.get(id)).collect();
        let vecs = scorer.corpus_vectors(seqs);
        let mut m = VectorCache::with_capacity(ids.len());
        for v in vecs {
            let v = v?;
            m.insert(v.id.clone(), v);
        }
        own_cache = Some(m);
    }
    let cache = cache.or(own_cache.as_ref());
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    let mut rankings = Vec::new();
    let mut comparisons = 0usize;
    let mut fallbacks = 0usize;
    let mut sums = [0.0; 4];
    for q in queries {
        let relevant: HashSet<&str> = judgments.positives(&q.id).into_iter().collect();
        if relevant.is_empty() {
            skipped.push(q.id.clone());
            continue;
        }
        let pool = evaluation_pool(judgments, &q.id, corpus, cfg);
        let (members, examined, mode) = match pipeline {
            None => (pool, corpus.len(), Mode::Exhaustive),
            Some(p) => match p.candidates(q)? {
                Some(c) => {
                    let n = c.len();
                    (pool.into_iter().filter(|id| c.contains(id)).collect(), n, Mode::Hashed)
                }
                None => {
                    fallbacks += 1;
                    (pool, corpus.len(), Mode::ExhaustiveFallback)
                }
            },
        };
        comparisons += examined;
        let seqs: Vec<&EventSequence> = members.iter().filter_map(|id| corpus.get(id)).collect();
        let scored = score_candidates(scorer, q, &seqs, cache)?;
        let ranked = rank(scored, usize::MAX);
        let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        let m = query_metrics(&ids, &relevant);
        for (s, v) in sums.iter_mut().zip([m.ap, m.ndcg10, m.ndcg20, m.rr]) {
            *s += v;
        }
        per_query.push((q.id.clone(), m));
        rankings.push(RankedResult {
            query_id: q.id.clone(),
            results: ranked,
            examined,
            mode,
        });
    }
    let n = per_query.len().max(1) as f64;
    let total = (corpus.len() * per_query.len()).max(1) as f64;
    Ok(EvalReport {
        mode: if pipeline.is_some() { Mode::Hashed } else { Mode::Exhaustive },
        map: sums[0] / n,
        ndcg10: sums[1] / n,
        ndcg20: sums[2] / n,
        mrr: sums[3] / n,
        reduction: 1.0 - comparisons as f64 / total,
        comparisons,
        corpus_size: corpus.len(),
        queries: queries.len(),
        skipped,
        fallbacks,
        per_query,
        rankings,
    })
}
