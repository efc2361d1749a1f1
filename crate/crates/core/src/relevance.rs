//! Relevance score `s(q, c) = kappa(q, c) + gamma * sim_U(q, c)`.
//!
//! `kappa` is the cosine between Fisher vectors: log-likelihood gradients
//! preconditioned by an information estimate and scaled to unit norm.
//! `sim_U = -(delta_t + delta_x)` compares the unwarped query with the
//! candidate event by event.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::EventSequence;
use crate::mtpp::{Conditioning, MtppError, MtppModel, Variant};
use crate::unwarp::Unwarp;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_DAMPING: f64 = 1e-6;
/// Gradients with a smaller norm are rejected as degenerate.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error(transparent)]
    Model(#[from] MtppError),
    #[error("vanishing gradient for {id} (norm {norm:e})")]
    VanishingGradient { id: String, norm: f64 },
    #[error("event time {time} exceeds the comparison horizon {horizon}")]
    AfterHorizon { time: f64, horizon: f64 },
    #[error("empty sequence {0}")]
    Empty(String),
    #[error("information diagonal has length {got}, expected {expected}")]
    DiagonalLength { got: usize, expected: usize },
}

/// Positional mark mismatches plus the length difference.
pub fn mark_distance(q: &[usize], c: &[usize]) -> f64 {
    let mismatches = q.iter().zip(c).filter(|(a, b)| a != b).count();
    (mismatches + q.len().abs_diff(c.len())) as f64
}

/// Matched absolute time differences plus, for the longer sequence's
/// unmatched tail, the distance of each event to `horizon`.
pub fn time_distance(q: &[f64], c: &[f64], horizon: f64) -> Result<f64, RelevanceError> {
    Ok(time_distance_grad(q, c, horizon)?.0)
}

/// `time_distance` with its partial derivatives with respect to the query
/// times and the horizon. At `q_i == c_i` the derivative is taken as 0.
pub fn time_distance_grad(q: &[f64], c: &[f64], horizon: f64) -> Result<(f64, Vec<f64>, f64), RelevanceError> {
    if let Some(&time) = q.iter().chain(c).find(|&&t| t > horizon) {
        return Err(RelevanceError::AfterHorizon { time, horizon });
    }
    let n = q.len().min(c.len());
    let mut dq = vec![0.0; q.len()];
    let mut total = 0.0;
    for i in 0..n {
        let d = q[i] - c[i];
        total += d.abs();
        dq[i] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    for (i, &t) in q.iter().enumerate().skip(n) {
        total += horizon - t;
        dq[i] = -1.0;
    }
    for &t in c.iter().skip(n) {
        total += horizon - t;
    }
    let dh = (q.len().max(c.len()) - n) as f64;
    Ok((total, dq, dh))
}

/// `-(delta_t + delta_x)` between an unwarped query and a candidate. The
/// horizon is the larger of the two horizons.
pub fn sim_score(q_unwarped: &EventSequence, c: &EventSequence) -> Result<f64, RelevanceError> {
    let horizon = q_unwarped.horizon.max(c.horizon);
    let dt = time_distance(&q_unwarped.times(), &c.times(), horizon)?;
    Ok(-(dt + mark_distance(&q_unwarped.marks(), &c.marks())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    Identity,
    EmpiricalDiagonal,
}

/// How gradients are preconditioned before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherConfig {
    pub mode: FisherMode,
    pub damping: f64,
    /// Diagonal information estimate (empirical mode only).
    pub diagonal: Option<Vec<f64>>,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl FisherConfig {
    pub fn identity() -> Self {
        Self {
            mode: FisherMode::Identity,
            damping: DEFAULT_DAMPING,
            diagonal: None,
        }
    }

    /// Diagonal estimated as the mean of squared per-sequence gradients.
    pub fn empirical<'a>(grads: impl IntoIterator<Item = &'a [f64]>, damping: f64) -> Self {
        let mut diag: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for g in grads {
            if diag.is_empty() {
                diag = vec![0.0; g.len()];
            }
            for (d, v) in diag.iter_mut().zip(g) {
                *d += v * v;
            }
            n += 1;
        }
        for d in &mut diag {
            *d /= n.max(1) as f64;
        }
        Self::with_diagonal(diag, damping)
    }

    pub fn with_diagonal(diagonal: Vec<f64>, damping: f64) -> Self {
        Self {
            mode: FisherMode::EmpiricalDiagonal,
            damping,
            diagonal: Some(diagonal),
        }
    }

    /// Per-coordinate factor `1/sqrt(I_ii + damping)`, or `None` under
    /// identity mode.
    pub fn scaling(&self, len: usize) -> Result<Option<Vec<f64>>, RelevanceError> {
        match (self.mode, &self.diagonal) {
            (FisherMode::Identity, _) | (FisherMode::EmpiricalDiagonal, None) => Ok(None),
            (FisherMode::EmpiricalDiagonal, Some(d)) => {
                if d.len() != len {
                    return Err(RelevanceError::DiagonalLength {
                        got: d.len(),
                        expected: len,
                    });
                }
                Ok(Some(d.iter().map(|v| 1.0 / (v + self.damping).sqrt()).collect()))
            }
        }
    }
}

/// Unit-norm embedding of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub id: String,
    pub variant: Variant,
    pub data: Vec<f64>,
}

impl FisherVector {
    /// Preconditions and normalizes a raw gradient.
    pub fn from_gradient(
        id: impl Into<String>,
        variant: Variant,
        mut g: Vec<f64>,
        config: &FisherConfig,
    ) -> Result<Self, RelevanceError> {
        if let Some(s) = config.scaling(g.len())? {
            for (v, k) in g.iter_mut().zip(&s) {
                *v *= k;
            }
        }
        let norm = l2(&g);
        let id = id.into();
        if !(norm > MIN_GRAD_NORM) {
            return Err(RelevanceError::VanishingGradient { id, norm });
        }
        for v in &mut g {
            *v /= norm;
        }
        Ok(Self { id, variant, data: g })
    }

    pub fn dot(&self, other: &FisherVector) -> f64 {
        dot(&self.data, &other.data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Components of one relevance score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub kappa: f64,
    pub sim: f64,
    pub total: f64,
}

/// A query after unwarping, with its Fisher vector when that does not
/// depend on the candidate.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub original: EventSequence,
    pub unwarped: EventSequence,
    pub tie_adjusted: bool,
    pub vector: Option<FisherVector>,
}

/// Scores query/candidate pairs with a trained model and unwarp.
#[derive(Debug, Clone)]
pub struct RelevanceModel {
    pub model: MtppModel,
    pub unwarp: Unwarp,
    pub fisher: FisherConfig,
    pub gamma: f64,
    /// Drop `kappa` (score is `gamma * sim` only).
    pub sim_only: bool,
}

impl RelevanceModel {
    pub fn new(model: MtppModel, unwarp: Unwarp) -> Self {
        Self {
            model,
            unwarp,
            fisher: FisherConfig::identity(),
            gamma: DEFAULT_GAMMA,
            sim_only: false,
        }
    }

    pub fn variant(&self) -> Variant {
        self.model.variant()
    }

    fn vector(
        &self,
        id: &str,
        times: &[f64],
        marks: &[usize],
        cond: Conditioning<'_>,
    ) -> Result<FisherVector, RelevanceError> {
        let g = self.model.ll_and_grad(None, times, marks, cond)?.theta;
        FisherVector::from_gradient(id, self.variant(), g, &self.fisher)
    }

    /// Fisher vector of a corpus sequence under a self-attention model.
    pub fn corpus_vector(&self, c: &EventSequence) -> Result<FisherVector, RelevanceError> {
        if c.is_empty() {
            return Err(RelevanceError::Empty(c.id.clone()));
        }
        self.vector(&c.id, &c.times(), &c.marks(), Conditioning::None)
    }

    /// Corpus vectors in parallel, in corpus order.
    pub fn corpus_vectors<'a>(
        &self,
        seqs: impl IntoParallelIterator<Item = &'a EventSequence>,
    ) -> Vec<Result<FisherVector, RelevanceError>> {
        seqs.into_par_iter().map(|c| self.corpus_vector(c)).collect()
    }

    /// Unwarps the query; for the self variant also computes its vector.
    pub fn prepare_query(&self, q: &EventSequence) -> Result<PreparedQuery, RelevanceError> {
        if q.is_empty() {
            return Err(RelevanceError::Empty(q.id.clone()));
        }
        let (unwarped, tie_adjusted) = self.unwarp.unwarp_sequence(q);
        let times = unwarped.times();
        let marks = unwarped.marks();
        let vector = if self.sim_only {
            None
        } else {
            let cond = match self.variant() {
                Variant::SelfAttention => Conditioning::None,
                Variant::CrossAttention => Conditioning::Itself,
            };
            Some(self.vector(&q.id, &times, &marks, cond)?)
        };
        Ok(PreparedQuery {
            original: q.clone(),
            unwarped,
            tie_adjusted,
            vector,
        })
    }

    /// `kappa` between a prepared query and a candidate. `cached` is the
    /// candidate's self-variant vector if already known.
    pub fn kappa(
        &self,
        pq: &PreparedQuery,
        c: &EventSequence,
        cached: Option<&FisherVector>,
    ) -> Result<f64, RelevanceError> {
        let qv = pq
            .vector
            .as_ref()
            .expect("prepared query carries a vector unless sim_only");
        let cv = match (self.variant(), cached) {
            (Variant::SelfAttention, Some(v)) => return Ok(qv.dot(v)),
            (Variant::SelfAttention, None) => self.corpus_vector(c)?,
            (Variant::CrossAttention, _) => {
                let qt = pq.unwarped.times();
                let qm = pq.unwarped.marks();
                if c.is_empty() {
                    return Err(RelevanceError::Empty(c.id.clone()));
                }
                self.vector(&c.id, &c.times(), &c.marks(), Conditioning::On(&qt, &qm))?
            }
        };
        Ok(qv.dot(&cv))
    }

    pub fn score_prepared(
        &self,
        pq: &PreparedQuery,
        c: &EventSequence,
        cached: Option<&FisherVector>,
    ) -> Result<Score, RelevanceError> {
        let sim = sim_score(&pq.unwarped, c)?;
        let kappa = if self.sim_only {
            0.0
        } else {
            self.kappa(pq, c, cached)?
        };
        Ok(Score {
            kappa,
            sim,
            total: kappa + self.gamma * sim,
        })
    }

    pub fn relevance_score(&self, q: &EventSequence, c: &EventSequence) -> Result<Score, RelevanceError> {
        self.score_prepared(&self.prepare_query(q)?, c, None)
    }

    pub fn fisher_kernel(&self, q: &EventSequence, c: &EventSequence) -> Result<f64, RelevanceError> {
        self.kappa(&self.prepare_query(q)?, c, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtpp::ModelConfig;
    use crate::seed::rng;
    use crate::unwarp::UnwarpConfig;
    use rand::Rng;

    fn seq(id: &str, times: &[f64], marks: &[usize], horizon: f64) -> EventSequence {
        EventSequence::from_parts(id, times, marks, horizon)
    }

    fn scorer(variant: Variant, seed: u64) -> RelevanceModel {
        let mut r = rng(seed);
        let mut m = MtppModel::new(ModelConfig::new(variant, 4, 3), &mut r);
        for v in m.theta_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        let cfg = UnwarpConfig {
            hidden: (4, 4),
            ..UnwarpConfig::default()
        };
        RelevanceModel::new(m, Unwarp::identity(cfg))
    }

    #[test]
    fn mark_distance_cases() {
        assert_eq!(mark_distance(&[0, 1, 2], &[0, 1, 2]), 0.0);
        assert_eq!(mark_distance(&[0, 1], &[0, 2, 1]), 2.0);
        assert_eq!(mark_distance(&[0, 0, 0], &[1, 1, 1]), 3.0);
        assert_eq!(mark_distance(&[0, 2, 1], &[0, 1]), mark_distance(&[0, 1], &[0, 2, 1]));
    }

    #[test]
    fn time_distance_cases() {
        assert_eq!(time_distance(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 0.0);
        assert_eq!(time_distance(&[1.0, 2.0], &[1.0, 3.0, 4.0], 5.0).unwrap(), 2.0);
        assert_eq!(time_distance(&[1.0], &[1.0], 10.0).unwrap(), 0.0);
        assert!(matches!(
            time_distance(&[1.0, 6.0], &[1.0], 5.0),
            Err(RelevanceError::AfterHorizon { .. })
        ));
    }

    #[test]
    fn time_distance_partials() {
        let (v, dq, dh) = time_distance_grad(&[1.5, 2.0, 3.0], &[1.0, 2.5], 4.0).unwrap();
        assert_eq!(v, 0.5 + 0.5 + 1.0);
        assert_eq!(dq, vec![1.0, -1.0, -1.0]);
        assert_eq!(dh, 1.0);
    }

    #[test]
    fn sim_cases() {
        let q = seq("q", &[1.0, 2.0], &[0, 1], 5.0);
        let c = seq("c", &[1.0, 3.0, 4.0], &[0, 2, 1], 5.0);
        assert_eq!(sim_score(&q, &q).unwrap(), 0.0);
        assert_eq!(sim_score(&q, &c).unwrap(), -4.0);
    }

    #[test]
    fn fisher_normalization() {
        let v = FisherVector::from_gradient("a", Variant::SelfAttention, vec![3.0, 4.0], &FisherConfig::identity())
            .unwrap();
        assert_eq!(v.data, vec![0.6, 0.8]);
        let ones = FisherConfig::with_diagonal(vec![1.0, 1.0], 0.0);
        let w = FisherVector::from_gradient("a", Variant::SelfAttention, vec![3.0, 4.0], &ones).unwrap();
        assert!((w.data[0] - 0.6).abs() < 1e-15 && (w.data[1] - 0.8).abs() < 1e-15);
        let diag = FisherConfig::with_diagonal(vec![4.0, 1.0], 0.0);
        let u = FisherVector::from_gradient("a", Variant::SelfAttention, vec![2.0, 2.0], &diag).unwrap();
        let s5 = 5f64.sqrt();
        assert!((u.data[0] - 1.0 / s5).abs() < 1e-15);
        assert!((u.data[1] - 2.0 / s5).abs() < 1e-15);
        assert!(matches!(
            FisherVector::from_gradient("z", Variant::SelfAttention, vec![0.0; 3], &FisherConfig::identity()),
            Err(RelevanceError::VanishingGradient { .. })
        ));
    }

    #[test]
    fn empirical_diagonal_is_mean_square() {
        let g1 = [1.0, 2.0];
        let g2 = [3.0, 0.0];
        let cfg = FisherConfig::empirical([&g1[..], &g2[..]], 1e-6);
        assert_eq!(cfg.diagonal.unwrap(), vec![5.0, 2.0]);
    }

    #[test]
    fn self_similarity_is_one() {
        for variant in [Variant::SelfAttention, Variant::CrossAttention] {
            let s = scorer(variant, 5);
            let h = seq("h", &[0.3, 0.8, 1.9], &[0, 2, 1], 2.0);
            let sc = s.relevance_score(&h, &h).unwrap();
            assert!((sc.kappa - 1.0).abs() < 1e-9, "{variant:?}: {}", sc.kappa);
            assert_eq!(sc.sim, 0.0);
            assert!((sc.total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_zero_is_kappa() {
        let mut s = scorer(Variant::SelfAttention, 6);
        s.gamma = 0.0;
        let q = seq("q", &[0.3, 0.8], &[0, 2], 1.0);
        let c = seq("c", &[0.1, 0.5, 0.9], &[1, 2, 1], 1.0);
        let sc = s.relevance_score(&q, &c).unwrap();
        assert_eq!(sc.total, sc.kappa);
        assert!(sc.kappa.abs() <= 1.0);
    }

    #[test]
    fn cached_and_fresh_vectors_agree() {
        let s = scorer(Variant::SelfAttention, 7);
        let q = seq("q", &[0.3, 0.8], &[0, 2], 1.0);
        let c = seq("c", &[0.1, 0.5, 0.9], &[1, 2, 1], 1.0);
        let pq = s.prepare_query(&q).unwrap();
        let cv = s.corpus_vector(&c).unwrap();
        let a = s.score_prepared(&pq, &c, Some(&cv)).unwrap();
        let b = s.score_prepared(&pq, &c, None).unwrap();
        assert_eq!(a, b);
    }
}
