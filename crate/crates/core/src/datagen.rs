//! Seeded synthetic benchmark.
//!
//! Each base sequence is a lognormal renewal process with its own gap
//! parameters and a first-order Markov chain over marks. A base yields a
//! collection of contiguous windows, each re-based so that the event before
//! the window sits at time 0. The first window of a collection becomes the
//! query (optionally warped); the rest go to the corpus and are the query's
//! positives. Windows from other collections are its negatives.

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Corpus, DataError, EventSequence, Label, RelevanceJudgments};
use crate::seed::{component_rng, derive, rng};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Time transform applied to queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpFamily {
    Identity,
    /// `t -> a t` with `a ~ Unif[lo, hi]`.
    Affine { lo: f64, hi: f64 },
    /// `t -> t^2 / T` on `[0, T]`, `T` the query horizon.
    Quadratic,
}

/// Whether one warp draw is shared by all queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpScope {
    Global,
    PerQuery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub bases: usize,
    pub base_len: (usize, usize),
    pub marks: usize,
    /// Windows per base, inclusive range (one of them is the query).
    pub subsequences: (usize, usize),
    pub sub_len: (usize, usize),
    /// Range of the per-base log-gap location.
    pub gap_mu: (f64, f64),
    /// Range of the per-base log-gap scale.
    pub gap_sigma: (f64, f64),
    /// Dirichlet concentration of each transition-matrix row.
    pub mark_concentration: f64,
    pub warp: WarpFamily,
    pub warp_scope: WarpScope,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            bases: 80,
            base_len: (160, 240),
            marks: 5,
            subsequences: (20, 30),
            sub_len: (15, 40),
            gap_mu: (0.02f64.ln(), 0.1f64.ln()),
            gap_sigma: (0.3, 0.8),
            mark_concentration: 0.5,
            warp: WarpFamily::Affine { lo: 0.5, hi: 2.0 },
            warp_scope: WarpScope::Global,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.bases == 0 {
            return bad("at least one base sequence");
        }
        if self.marks < 2 {
            return bad("mark count must be at least 2");
        }
        for (name, (lo, hi)) in [
            ("base_len", self.base_len),
            ("subsequences", self.subsequences),
            ("sub_len", self.sub_len),
        ] {
            if lo == 0 || lo > hi {
                return Err(GenError::Config(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.subsequences.0 < 2 {
            return bad("each collection needs a query and at least one positive");
        }
        if self.sub_len.1 > self.base_len.0 {
            return bad("windows must fit inside the shortest base");
        }
        if !(self.gap_mu.0 <= self.gap_mu.1) || !(0.0 < self.gap_sigma.0 && self.gap_sigma.0 <= self.gap_sigma.1) {
            return bad("gap parameter ranges are invalid");
        }
        if !(self.mark_concentration > 0.0) {
            return bad("mark concentration must be positive");
        }
        if let WarpFamily::Affine { lo, hi } = self.warp {
            if !(0.0 < lo && lo <= hi) {
                return bad("affine warp range must be positive and ordered");
            }
        }
        Ok(())
    }
}

/// A base sequence with the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSequence {
    pub seq: EventSequence,
    pub gap_mu: f64,
    pub gap_sigma: f64,
    pub transitions: Vec<Vec<f64>>,
}

/// Queries, corpus and complete judgments.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub queries: Corpus,
    pub corpus: Corpus,
    pub judgments: RelevanceJudgments,
    /// Affine factor applied to each query (1 for non-affine families).
    pub warp_factors: Vec<(String, f64)>,
}

impl Benchmark {
    /// Mean of `|C_q+| / |C|` over queries.
    pub fn relevance_ratio(&self) -> f64 {
        let n = self.corpus.len() as f64;
        let qs: Vec<&str> = self.judgments.queries().collect();
        qs.iter().map(|q| self.judgments.positives(q).len() as f64 / n).sum::<f64>() / qs.len().max(1) as f64
    }
}

fn uniform_usize(r: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    r.random_range(lo..=hi)
}

fn uniform_f64(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..hi)
    }
}

fn sample_categorical(r: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

fn base_id(b: usize) -> String {
    format!("base{b:04}")
}

/// Draws the base sequences. Base `b` uses its own derived stream, so the
/// result does not depend on thread scheduling.
pub fn generate_base(config: &GenConfig) -> Result<Vec<BaseSequence>, GenError> {
    config.validate()?;
    let root = derive(config.seed, "datagen.base");
    Ok((0..config.bases)
        .into_par_iter()
        .map(|b| {
            let mut r = rng(derive(root, &b.to_string()));
            let gap_mu = uniform_f64(&mut r, config.gap_mu);
            let gap_sigma = uniform_f64(&mut r, config.gap_sigma);
            let gamma = Gamma::new(config.mark_concentration, 1.0).expect("valid concentration");
            let transitions: Vec<Vec<f64>> = (0..config.marks)
                .map(|_| {
                    let row: Vec<f64> = (0..config.marks).map(|_| gamma.sample(&mut r).max(1e-300)).collect();
                    let z: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / z).collect()
                })
                .collect();
            let n = uniform_usize(&mut r, config.base_len);
            let gaps = LogNormal::new(gap_mu, gap_sigma).expect("valid lognormal");
            let mut times = Vec::with_capacity(n);
            let mut marks = Vec::with_capacity(n);
            let mut t = 0.0;
            let mut mark = r.random_range(0..config.marks);
            for i in 0..n {
                let g: f64 = gaps.sample(&mut r);
                t += g.max(1e-9);
                if i > 0 {
                    mark = sample_categorical(&mut r, &transitions[mark]);
                }
                times.push(t);
                marks.push(mark);
            }
            BaseSequence {
                seq: EventSequence::from_parts(base_id(b), &times, &marks, t),
                gap_mu,
                gap_sigma,
                transitions,
            }
        })
        .collect())
}

/// Applies a warp to every time and the horizon.
pub fn apply_warp(seq: &EventSequence, family: WarpFamily, factor: f64) -> EventSequence {
    let horizon = seq.horizon;
    let f = |t: f64| match family {
        WarpFamily::Identity => t,
        WarpFamily::Affine { .. } => factor * t,
        WarpFamily::Quadratic => {
            if horizon > 0.0 {
                t * t / horizon
            } else {
                t
            }
        }
    };
    let times: Vec<f64> = seq.times().into_iter().map(f).collect();
    EventSequence::from_parts(seq.id.clone(), &times, &seq.marks(), f(horizon))
}

fn window(base: &EventSequence, start: usize, len: usize, id: String) -> EventSequence {
    let t = base.times();
    let origin = if start == 0 { 0.0 } else { t[start - 1] };
    let times: Vec<f64> = t[start..start + len].iter().map(|x| x - origin).collect();
    let horizon = t.get(start + len).map_or(times[len - 1], |x| x - origin);
    EventSequence::from_parts(id, &times, &base.marks()[start..start + len], horizon)
}

/// Cuts windows from the bases and assembles queries, corpus and judgments.
pub fn make_benchmark(bases: &[BaseSequence], config: &GenConfig) -> Result<Benchmark, GenError> {
    config.validate()?;
    let mut r = component_rng(config.seed, "datagen.windows");
    let draw_factor = |r: &mut crate::seed::Rng| match config.warp {
        WarpFamily::Affine { lo, hi } => uniform_f64(r, (lo, hi)),
        _ => 1.0,
    };
    let global_factor = draw_factor(&mut component_rng(config.seed, "datagen.warp"));
    let mut queries = Corpus::new(config.marks);
    let mut corpus = Corpus::new(config.marks);
    let mut members: Vec<(String, Vec<String>)> = Vec::with_capacity(bases.len());
    let mut warp_factors = Vec::with_capacity(bases.len());
    for (b, base) in bases.iter().enumerate() {
        let k = uniform_usize(&mut r, config.subsequences);
        let mut ids = Vec::with_capacity(k - 1);
        let qid = format!("q{b:04}");
        for j in 0..k {
            let len = uniform_usize(&mut r, config.sub_len).min(base.seq.len());
            let start = r.random_range(0..=base.seq.len() - len);
            if j == 0 {
                let factor = match config.warp_scope {
                    WarpScope::Global => global_factor,
                    WarpScope::PerQuery => draw_factor(&mut r),
                };
                let w = window(&base.seq, start, len, qid.clone());
                queries.insert(apply_warp(&w, config.warp, factor))?;
                warp_factors.push((qid.clone(), factor));
            } else {
                let id = format!("c{b:04}-{j:02}");
                corpus.insert(window(&base.seq, start, len, id.clone()))?;
                ids.push(id);
            }
        }
        members.push((qid, ids));
    }
    let mut judgments = RelevanceJudgments::new();
    for (b, (qid, _)) in members.iter().enumerate() {
        for (b2, (_, ids)) in members.iter().enumerate() {
            let label = if b == b2 { Label::Relevant } else { Label::NonRelevant };
            for id in ids {
                judgments.insert(qid, id, label)?;
            }
        }
    }
    Ok(Benchmark {
        queries,
        corpus,
        judgments,
        warp_factors,
    })
}

/// `generate_base` followed by `make_benchmark`.
pub fn generate(config: &GenConfig) -> Result<Benchmark, GenError> {
    make_benchmark(&generate_base(config)?, config)
}
