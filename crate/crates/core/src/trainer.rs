//! Pairwise margin ranking training of the point-process parameters `theta`
//! and the unwarp parameters `phi`.
//!
//! The score depends on `theta` through normalized log-likelihood gradients,
//! so the loss gradient needs second derivatives of the log-likelihood.
//! Those enter only as Hessian-vector products `H r`, which are taken as a
//! central difference of the analytic gradient along `r`:
//! `|r| (g(theta + h r^) - g(theta - h r^)) / 2h`. The same difference of
//! the time gradient gives the mixed `theta`/time term that carries the
//! loss back through the unwarped query times into `phi`.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio;
use crate::data::{Corpus, EventSequence, RelevanceJudgments};
use crate::mtpp::{Conditioning, ModelConfig, MtppError, MtppModel, Variant};
use crate::relevance::{dot, l2, mark_distance, time_distance_grad, FisherConfig, FisherMode, RelevanceError, RelevanceModel, MIN_GRAD_NORM};
use crate::retrieval::{evaluate, EvalConfig, RetrievalError};
use crate::seed::{component_rng, derive, rng};
use crate::unwarp::{Unwarp, UnwarpConfig};

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_L2: f64 = 0.001;
pub const DEFAULT_NEGATIVES: usize = 100;
pub const DEFAULT_MAX_PAIRS: usize = 1000;
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] MtppError),
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("non-finite gradient in parameter block {block} (index {index})")]
    NonFiniteGradient { block: String, index: usize },
    #[error("training diverged at epoch {epoch}: loss {loss:e} (hinge {hinge:e}, penalty {penalty:e}, l2 {l2:e})")]
    Diverged {
        epoch: usize,
        loss: f64,
        hinge: f64,
        penalty: f64,
        l2: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training query has a positive")]
    NoUsableQueries,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    Format(String),
}

/// `[s_neg - s_pos + delta]_+`.
pub fn hinge_term(s_pos: f64, s_neg: f64, delta: f64) -> f64 {
    (s_neg - s_pos + delta).max(0.0)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A non-finite gradient leaves everything untouched and
    /// returns its index.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), usize> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(i);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Which parts of the score are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Score is `gamma * sim_U` only; just `phi` is trained.
    SimOnly,
    /// `U` stays the identity; just `theta` is trained.
    NoUnwarp,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SimOnly => "sim-only",
            Ablation::NoUnwarp => "no-unwarp",
        }
    }

    fn trains_theta(self) -> bool {
        self != Ablation::SimOnly
    }

    fn trains_phi(self) -> bool {
        self != Ablation::NoUnwarp
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "sim-only" => Ok(Ablation::SimOnly),
            "no-unwarp" => Ok(Ablation::NoUnwarp),
            _ => Err(format!("unknown ablation {s:?} (full, sim-only, no-unwarp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    /// Pairs kept per query; larger products are subsampled.
    pub max_pairs: usize,
    /// Weight of the unwarp unbiasedness penalty.
    pub reg_weight: f64,
    pub l2: f64,
    pub epochs: usize,
    /// Step of the central differences for Hessian-vector products.
    pub fd_step: f64,
    pub ablation: Ablation,
    /// Negatives per validation query when tracking validation MAP.
    pub eval_negatives: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            gamma: crate::relevance::DEFAULT_GAMMA,
            lr: 0.01,
            batch_size: 16,
            negatives: DEFAULT_NEGATIVES,
            max_pairs: DEFAULT_MAX_PAIRS,
            reg_weight: 1.0,
            l2: DEFAULT_L2,
            epochs: 20,
            fd_step: 1e-5,
            ablation: Ablation::Full,
            eval_negatives: crate::retrieval::DEFAULT_EVAL_NEGATIVES,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0");
        }
        if !(self.lr > 0.0 && self.fd_step > 0.0 && self.gamma >= 0.0) {
            return bad("lr and fd_step must be > 0, gamma >= 0");
        }
        if !(self.reg_weight >= 0.0 && self.l2 >= 0.0) {
            return bad("regularizer weights must be >= 0");
        }
        if self.batch_size == 0 || self.negatives == 0 || self.max_pairs == 0 {
            return bad("batch_size, negatives and max_pairs must be >= 1");
        }
        Ok(())
    }
}

/// Everything needed to score: model, unwarp and score settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MtppModel,
    pub unwarp: Unwarp,
    pub fisher: FisherConfig,
    pub gamma: f64,
    pub sim_only: bool,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTESMTPP";

impl Checkpoint {
    /// Fresh parameters for an ablation. `NoUnwarp` starts (and stays) at
    /// the identity warp.
    pub fn init(model: ModelConfig, unwarp: UnwarpConfig, ablation: Ablation, seed: u64) -> Self {
        let mtpp = MtppModel::new(model, &mut component_rng(seed, "init"));
        let unwarp = match ablation {
            Ablation::NoUnwarp => Unwarp::identity(unwarp),
            _ => Unwarp::new(unwarp, &mut component_rng(seed, "init-unwarp")),
        };
        Self {
            model: mtpp,
            unwarp,
            fisher: FisherConfig::identity(),
            gamma: crate::relevance::DEFAULT_GAMMA,
            sim_only: ablation == Ablation::SimOnly,
        }
    }

    pub fn scorer(&self) -> RelevanceModel {
        RelevanceModel {
            model: self.model.clone(),
            unwarp: self.unwarp.clone(),
            fisher: self.fisher.clone(),
            gamma: self.gamma,
            sim_only: self.sim_only,
        }
    }

    /// `[theta, phi]`.
    fn params(&self) -> Vec<f64> {
        let mut p = self.model.theta().to_vec();
        p.extend_from_slice(self.unwarp.phi());
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let n = self.model.num_params();
        self.model.theta_mut().copy_from_slice(&p[..n]);
        self.unwarp.phi_mut().copy_from_slice(&p[n..]);
    }

    fn block_name(&self, i: usize) -> String {
        let n = self.model.num_params();
        if i < n {
            self.model.block_of(i).to_string()
        } else {
            format!("unwarp[{}]", i - n)
        }
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        binio::write_magic(w, CHECKPOINT_MAGIC, 1)?;
        let c = self.model.config();
        binio::write_u8(w, c.variant.tag())?;
        for v in [c.dim, c.mark_count, c.max_len, c.blocks] {
            binio::write_u64(w, v as u64)?;
        }
        binio::write_f64s(w, self.model.theta())?;
        let u = self.unwarp.config();
        binio::write_u64(w, u.hidden.0 as u64)?;
        binio::write_u64(w, u.hidden.1 as u64)?;
        binio::write_f64(w, u.sigma_eta)?;
        binio::write_f64(w, u.reg_sigma)?;
        binio::write_f64s(w, self.unwarp.phi())?;
        binio::write_u8(w, (self.fisher.mode == FisherMode::EmpiricalDiagonal) as u8)?;
        binio::write_f64(w, self.fisher.damping)?;
        binio::write_f64s(w, self.fisher.diagonal.as_deref().unwrap_or(&[]))?;
        binio::write_f64(w, self.gamma)?;
        binio::write_u8(w, self.sim_only as u8)
    }

    pub fn load(r: &mut impl Read) -> Result<Self, TrainError> {
        binio::read_magic(r, CHECKPOINT_MAGIC)?;
        let variant = Variant::from_tag(binio::read_u8(r)?).ok_or_else(|| TrainError::Format("unknown variant tag".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = binio::read_u64(r)? as usize;
        }
        let cfg = ModelConfig {
            variant,
            dim: dims[0],
            mark_count: dims[1],
            max_len: dims[2],
            blocks: dims[3],
        };
        let model = MtppModel::from_theta(cfg, binio::read_f64s(r)?)?;
        let hidden = (binio::read_u64(r)? as usize, binio::read_u64(r)? as usize);
        let ucfg = UnwarpConfig {
            hidden,
            sigma_eta: binio::read_f64(r)?,
            reg_sigma: binio::read_f64(r)?,
        };
        let unwarp = Unwarp::from_phi(ucfg, binio::read_f64s(r)?).ok_or_else(|| TrainError::Format("unwarp parameter count".into()))?;
        let empirical = binio::read_u8(r)? == 1;
        let damping = binio::read_f64(r)?;
        let diag = binio::read_f64s(r)?;
        let fisher = if empirical {
            FisherConfig::with_diagonal(diag, damping)
        } else {
            FisherConfig { damping, ..FisherConfig::identity() }
        };
        let gamma = binio::read_f64(r)?;
        let sim_only = binio::read_u8(r)? == 1;
        Ok(Self {
            model,
            unwarp,
            fisher,
            gamma,
            sim_only,
        })
    }

    pub fn save_to(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)?;
        f.flush()
    }

    pub fn load_from(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::load(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// One query with its sampled candidates and the pairs compared.
#[derive(Debug, Clone)]
pub struct QueryTask<'a> {
    pub query: &'a EventSequence,
    pub candidates: Vec<&'a EventSequence>,
    /// `(positive, negative)` indices into `candidates`.
    pub pairs: Vec<(usize, usize)>,
    /// Train-mode unwarp offset.
    pub eta: f64,
}

/// Draws `negatives` non-positive corpus sequences without replacement and
/// pairs them with the query's positives, keeping at most `max_pairs`.
pub fn sample_task<'a>(
    query: &'a EventSequence,
    corpus: &'a Corpus,
    judgments: &RelevanceJudgments,
    negatives: usize,
    max_pairs: usize,
    rng: &mut impl rand::Rng,
) -> Option<QueryTask<'a>> {
    let positive_ids: HashSet<&str> = judgments.positives(&query.id).into_iter().collect();
    let positives: Vec<&EventSequence> = corpus.iter().filter(|c| positive_ids.contains(c.id.as_str())).collect();
    let pool: Vec<&EventSequence> = corpus.iter().filter(|c| !positive_ids.contains(c.id.as_str())).collect();
    if positives.is_empty() || pool.is_empty() {
        return None;
    }
    let mut picked = sample(rng, pool.len(), negatives.min(pool.len())).into_vec();
    picked.sort_unstable();
    let np = positives.len();
    let nn = picked.len();
    let mut candidates = positives;
    candidates.extend(picked.into_iter().map(|i| pool[i]));
    let total = np * nn;
    let mut flat: Vec<usize> = if total > max_pairs {
        sample(rng, total, max_pairs).into_vec()
    } else {
        (0..total).collect()
    };
    flat.sort_unstable();
    let pairs = flat.into_iter().map(|k| (k / nn, np + k % nn)).collect();
    Some(QueryTask {
        query,
        candidates,
        pairs,
        eta: 0.0,
    })
}

/// Objective value of a batch and its gradient with respect to
/// `[theta, phi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// Sum of hinge terms divided by the number of tasks.
    pub hinge: f64,
    pub penalty: f64,
    pub l2: f64,
    pub total: f64,
    pub active_pairs: usize,
    /// Empty unless gradients were requested.
    pub grad: Vec<f64>,
}

/// A log-likelihood gradient that enters a score through its unit vector.
struct Unit {
    times: Vec<f64>,
    marks: Vec<usize>,
    kind: UnitKind,
    norm: f64,
    v: Vec<f64>,
    upstream: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum UnitKind {
    Corpus,
    Query(usize),
    Conditioned(usize),
}

struct TaskState {
    times_h: Vec<f64>,
    tau: Vec<f64>,
    horizon: f64,
    marks: Vec<usize>,
    query_unit: Option<usize>,
    cand_units: Vec<Option<usize>>,
}

fn conditioning<'a>(variant: Variant, kind: UnitKind, states: &'a [TaskState]) -> Conditioning<'a> {
    match (variant, kind) {
        (Variant::SelfAttention, _) => Conditioning::None,
        (Variant::CrossAttention, UnitKind::Query(_)) => Conditioning::Itself,
        (Variant::CrossAttention, UnitKind::Conditioned(t)) => {
            let s = &states[t];
            Conditioning::On(&s.tau, &s.marks)
        }
        (Variant::CrossAttention, UnitKind::Corpus) => unreachable!("cross candidates are conditioned"),
    }
}

/// Hinge loss over the tasks plus regularizers, with the gradient when
/// `with_grad`. `horizon` bounds the unwarp penalty integral.
pub fn batch_objective(
    ckpt: &Checkpoint,
    tasks: &[QueryTask<'_>],
    cfg: &TrainConfig,
    horizon: f64,
    with_grad: bool,
) -> Result<Objective, TrainError> {
    let model = &ckpt.model;
    let variant = model.variant();
    let use_kappa = !ckpt.sim_only;
    let theta_on = cfg.ablation.trains_theta() && use_kappa;
    let phi_on = cfg.ablation.trains_phi();
    let n_theta = model.num_params();
    let scale = 1.0 / tasks.len().max(1) as f64;

    let mut states: Vec<TaskState> = tasks
        .par_iter()
        .map(|t| {
            let mut times_h = t.query.times();
            times_h.push(t.query.horizon);
            let uw = ckpt.unwarp.apply(&times_h, t.eta);
            let n = t.query.len();
            TaskState {
                times_h,
                tau: uw.times[..n].to_vec(),
                horizon: uw.times[n],
                marks: t.query.marks(),
                query_unit: None,
                cand_units: vec![None; t.candidates.len()],
            }
        })
        .collect();
    let horizons: Vec<f64> = states.iter().map(|s| s.horizon).collect();

    let mut units: Vec<Unit> = Vec::new();
    if use_kappa {
        let mut corpus_units: BTreeMap<&str, usize> = BTreeMap::new();
        for (ti, t) in tasks.iter().enumerate() {
            units.push(Unit::new(states[ti].tau.clone(), states[ti].marks.clone(), UnitKind::Query(ti)));
            states[ti].query_unit = Some(units.len() - 1);
            for (ci, c) in t.candidates.iter().enumerate() {
                let idx = match variant {
                    Variant::SelfAttention => *corpus_units.entry(c.id.as_str()).or_insert_with(|| {
                        units.push(Unit::new(c.times(), c.marks(), UnitKind::Corpus));
                        units.len() - 1
                    }),
                    Variant::CrossAttention => {
                        units.push(Unit::new(c.times(), c.marks(), UnitKind::Conditioned(ti)));
                        units.len() - 1
                    }
                };
                states[ti].cand_units[ci] = Some(idx);
            }
        }
        let grads: Vec<Result<Vec<f64>, MtppError>> = units
            .par_iter()
            .map(|u| {
                let cond = conditioning(variant, u.kind, &states);
                model.ll_and_grad(None, &u.times, &u.marks, cond).map(|g| g.theta)
            })
            .collect();
        for (u, g) in units.iter_mut().zip(grads) {
            u.set_gradient(g?, &ckpt.fisher)?;
        }
    }

    let mut hinge = 0.0;
    let mut active = 0usize;
    let mut dtau: Vec<Vec<f64>> = states.iter().map(|s| vec![0.0; s.times_h.len()]).collect();
    for (ti, t) in tasks.iter().enumerate() {
        let s = &states[ti];
        let mut scores = Vec::with_capacity(t.candidates.len());
        let mut sims = Vec::with_capacity(t.candidates.len());
        for (ci, c) in t.candidates.iter().enumerate() {
            let horizon = horizons[ti].max(c.horizon);
            let (dt, dq, dh) = time_distance_grad(&s.tau, &c.times(), horizon)?;
            let sim = -dt - mark_distance(&s.marks, &c.marks());
            let kappa = match (s.query_unit, s.cand_units[ci]) {
                (Some(q), Some(k)) if units[q].valid() && units[k].valid() => dot(&units[q].v, &units[k].v),
                _ => 0.0,
            };
            scores.push(kappa + cfg.gamma * sim);
            sims.push((dq, dh, horizons[ti] >= c.horizon));
        }
        let mut a = vec![0.0; t.candidates.len()];
        for &(p, n) in &t.pairs {
            let m = scores[n] - scores[p] + cfg.margin;
            // At exactly zero margin the zero-side subgradient applies.
            if m > 0.0 {
                hinge += m * scale;
                active += 1;
                a[n] += scale;
                a[p] -= scale;
            }
        }
        if !with_grad {
            continue;
        }
        let n = s.tau.len();
        for (ci, &ac) in a.iter().enumerate() {
            if ac == 0.0 {
                continue;
            }
            let (dq, dh, query_horizon) = &sims[ci];
            for i in 0..n {
                dtau[ti][i] -= ac * cfg.gamma * dq[i];
            }
            if *query_horizon {
                dtau[ti][n] -= ac * cfg.gamma * dh;
            }
            if let (Some(q), Some(k)) = (s.query_unit, s.cand_units[ci]) {
                if units[q].valid() && units[k].valid() {
                    let (vq, vk) = (units[q].v.clone(), units[k].v.clone());
                    axpy(&mut units[k].upstream, ac, &vq);
                    axpy(&mut units[q].upstream, ac, &vk);
                }
            }
        }
    }

    let params = ckpt.params();
    let mut penalty = 0.0;
    let mut l2_term = 0.0;
    let mut grad = if with_grad { vec![0.0; params.len()] } else { Vec::new() };
    if phi_on && cfg.reg_weight > 0.0 {
        let (p, g) = ckpt.unwarp.penalty_and_grad(horizon);
        penalty = cfg.reg_weight * p;
        if with_grad {
            axpy(&mut grad[n_theta..], cfg.reg_weight, &g);
        }
    }
    let l2_range = match (theta_on, phi_on) {
        (true, true) => 0..params.len(),
        (true, false) => 0..n_theta,
        (false, true) => n_theta..params.len(),
        (false, false) => 0..0,
    };
    for i in l2_range {
        l2_term += cfg.l2 * params[i] * params[i];
        if with_grad {
            grad[i] += 2.0 * cfg.l2 * params[i];
        }
    }

    if with_grad && use_kappa {
        let h = cfg.fd_step;
        let needs_times = |u: &Unit| phi_on && u.kind != UnitKind::Corpus;
        let jobs: Vec<Result<Option<(Vec<f64>, Vec<f64>)>, MtppError>> = units
            .par_iter()
            .map(|u| {
                if !u.valid() || !(theta_on || needs_times(u)) {
                    return Ok(None);
                }
                let mut r = u.upstream.clone();
                let c = dot(&u.v, &r);
                for (ri, vi) in r.iter_mut().zip(&u.v) {
                    *ri = (*ri - c * vi) / u.norm;
                }
                let rn = l2(&r);
                if rn == 0.0 {
                    return Ok(None);
                }
                let cond = conditioning(variant, u.kind, &states);
                let shifted = |sign: f64| {
                    let th: Vec<f64> = model.theta().iter().zip(&r).map(|(t, ri)| t + sign * h * ri / rn).collect();
                    model.ll_and_grad(Some(&th), &u.times, &u.marks, cond)
                };
                let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
                let f = rn / (2.0 * h);
                let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| f * (x - y)).collect::<Vec<f64>>();
                let times = match u.kind {
                    UnitKind::Query(_) => diff(&plus.times, &minus.times),
                    UnitKind::Conditioned(_) => diff(&plus.cond_times, &minus.cond_times),
                    UnitKind::Corpus => Vec::new(),
                };
                Ok(Some((diff(&plus.theta, &minus.theta), times)))
            })
            .collect();
        for (u, job) in units.iter().zip(jobs) {
            let Some((dtheta, dtimes)) = job? else { continue };
            if theta_on {
                axpy(&mut grad[..n_theta], 1.0, &dtheta);
            }
            if phi_on {
                match u.kind {
                    UnitKind::Query(t) | UnitKind::Conditioned(t) => axpy(&mut dtau[t][..dtimes.len()], 1.0, &dtimes),
                    UnitKind::Corpus => {}
                }
            }
        }
    }

    if with_grad && phi_on {
        let vjps: Vec<Vec<f64>> = states
            .par_iter()
            .zip(&dtau)
            .map(|(s, d)| ckpt.unwarp.vjp(&s.times_h, d))
            .collect();
        for g in vjps {
            axpy(&mut grad[n_theta..], 1.0, &g);
        }
    }

    Ok(Objective {
        hinge,
        penalty,
        l2: l2_term,
        total: hinge + penalty + l2_term,
        active_pairs: active,
        grad,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl Unit {
    fn new(times: Vec<f64>, marks: Vec<usize>, kind: UnitKind) -> Self {
        Self {
            times,
            marks,
            kind,
            norm: 0.0,
            v: Vec::new(),
            upstream: Vec::new(),
        }
    }

    fn set_gradient(&mut self, g: Vec<f64>, fisher: &FisherConfig) -> Result<(), RelevanceError> {
        if let Some(s) = fisher.scaling(g.len())? {
            if s.iter().any(|&k| k != 1.0) {
                warn!("training ignores the information preconditioner");
            }
        }
        let norm = l2(&g);
        self.upstream = vec![0.0; g.len()];
        if norm > MIN_GRAD_NORM {
            self.v = g.iter().map(|x| x / norm).collect();
            self.norm = norm;
        }
        Ok(())
    }

    fn valid(&self) -> bool {
        self.norm > 0.0
    }
}

/// Training and validation queries over one corpus.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [&'a EventSequence],
    pub valid: &'a [&'a EventSequence],
    pub corpus: &'a Corpus,
    pub judgments: &'a RelevanceJudgments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Entry 0 is the initial parameters; entry `e` averages the batch
    /// objectives seen during epoch `e`.
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub skipped_queries: Vec<String>,
    pub steps: u64,
}

impl TrainReport {
    /// `epoch loss val_map` lines.
    pub fn curve_text(&self) -> String {
        self.curve
            .iter()
            .map(|r| match r.val_map {
                Some(m) => format!("{} {} {}\n", r.epoch, r.loss, m),
                None => format!("{} {} nan\n", r.epoch, r.loss),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation MAP (the last ones when there is
    /// no validation set).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub report: TrainReport,
}

fn tasks_for_epoch<'a>(
    queries: &[&'a EventSequence],
    data: &TrainData<'a>,
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    epoch: usize,
) -> Vec<QueryTask<'a>> {
    let mut r = rng(derive(cfg.seed, &format!("negatives-{epoch}")));
    let mut order: Vec<&EventSequence> = queries.to_vec();
    order.shuffle(&mut r);
    order
        .into_iter()
        .filter_map(|q| {
            let mut t = sample_task(q, data.corpus, data.judgments, cfg.negatives, cfg.max_pairs, &mut r)?;
            if cfg.ablation.trains_phi() {
                t.eta = ckpt.unwarp.draw_eta(&mut r);
            }
            Some(t)
        })
        .collect()
}

fn validation_map(ckpt: &Checkpoint, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<Option<f64>, TrainError> {
    if data.valid.is_empty() {
        return Ok(None);
    }
    let eval = EvalConfig {
        negatives: cfg.eval_negatives,
        seed: derive(cfg.seed, "validation"),
    };
    let r = evaluate(data.valid, data.corpus, data.judgments, &ckpt.scorer(), None, &eval)?;
    Ok(Some(r.map))
}

/// Trains from `init`, keeping the best-validation parameters.
pub fn train(init: Checkpoint, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut ckpt = init;
    ckpt.gamma = cfg.gamma;
    ckpt.sim_only = cfg.ablation == Ablation::SimOnly;
    let usable: Vec<&EventSequence> = data
        .train
        .iter()
        .copied()
        .filter(|q| !data.judgments.positives(&q.id).is_empty())
        .collect();
    let skipped: Vec<String> = data
        .train
        .iter()
        .filter(|q| data.judgments.positives(&q.id).is_empty())
        .map(|q| q.id.clone())
        .collect();
    for id in &skipped {
        warn!("skipping training query {id}: no positives");
    }
    if cfg.epochs > 0 && usable.is_empty() {
        return Err(TrainError::NoUsableQueries);
    }
    let horizon = data.corpus.max_horizon();
    let mut adam = Adam::new(ckpt.params().len());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);

    let init_loss = if usable.is_empty() {
        0.0
    } else {
        batch_objective(&ckpt, &tasks_for_epoch(&usable, data, &ckpt, cfg, 0), cfg, horizon, false)?.total
    };
    let val = if cfg.epochs > 0 { validation_map(&ckpt, data, cfg)? } else { None };
    curve.push(EpochRecord {
        epoch: 0,
        loss: init_loss,
        val_map: val,
    });
    let mut best = ckpt.clone();
    let mut best_map = val.unwrap_or(f64::NEG_INFINITY);
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let tasks = tasks_for_epoch(&usable, data, &ckpt, cfg, epoch);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in tasks.chunks(cfg.batch_size) {
            let obj = batch_objective(&ckpt, batch, cfg, horizon, true)?;
            if !obj.total.is_finite() || obj.total > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged {
                    epoch,
                    loss: obj.total,
                    hinge: obj.hinge,
                    penalty: obj.penalty,
                    l2: obj.l2,
                });
            }
            sum += obj.total;
            batches += 1;
            let mut p = ckpt.params();
            adam.step(&mut p, &obj.grad, cfg.lr).map_err(|index| TrainError::NonFiniteGradient {
                block: ckpt.block_name(index),
                index,
            })?;
            ckpt.set_params(&p);
        }
        let loss = sum / batches.max(1) as f64;
        let val = validation_map(&ckpt, data, cfg)?;
        info!(
            "epoch {epoch}: loss {loss:.6}{}",
            val.map(|m| format!(", val MAP {m:.4}")).unwrap_or_default()
        );
        curve.push(EpochRecord {
            epoch,
            loss,
            val_map: val,
        });
        match val {
            Some(m) if m > best_map => {
                best_map = m;
                best = ckpt.clone();
                best_epoch = epoch;
            }
            None => {
                best = ckpt.clone();
                best_epoch = epoch;
            }
            _ => {}
        }
    }
    Ok(TrainOutcome {
        best,
        last: ckpt,
        report: TrainReport {
            curve,
            best_epoch,
            skipped_queries: skipped,
            steps: adam.steps(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge_term(1.0, 0.2, 0.5), 0.0);
        assert_eq!(hinge_term(0.3, 0.3, 0.5), 0.5);
        assert!((hinge_term(0.1, 0.4, 0.5) - 0.8).abs() < 1e-12);
        assert_eq!(hinge_term(1.0, 0.5, 0.5), 0.0);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut adam = Adam::new(1);
        let mut p = [0.0];
        adam.step(&mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_and_symmetry() {
        let mut adam = Adam::new(3);
        let mut p = [0.5, 1.0, -1.0];
        adam.step(&mut p, &[0.0, 0.3, -0.3], 0.01).unwrap();
        adam.step(&mut p, &[0.0, 0.3, -0.3], 0.01).unwrap();
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], -p[2]);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut adam = Adam::new(2);
        let mut p = [1.0, 2.0];
        assert_eq!(adam.step(&mut p, &[0.1, f64::NAN], 0.1), Err(1));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }

    fn toy() -> (Corpus, Corpus, RelevanceJudgments) {
        let mut corpus = Corpus::new(2);
        let mut queries = Corpus::new(2);
        let mut j = RelevanceJudgments::new();
        queries.insert(EventSequence::from_parts("q", &[0.1, 0.3], &[0, 1], 0.5)).unwrap();
        for (i, t) in [0.12, 0.2, 0.3, 0.05].iter().enumerate() {
            let id = format!("c{i}");
            corpus.insert(EventSequence::from_parts(&id, &[*t, t + 0.2], &[i % 2, 1], 0.6)).unwrap();
            let label = if i == 0 { Label::Relevant } else { Label::NonRelevant };
            j.insert("q", &id, label).unwrap();
        }
        (queries, corpus, j)
    }

    #[test]
    fn negatives_exclude_positives_and_pairs_cap() {
        let (queries, corpus, j) = toy();
        let q = queries.get("q").unwrap();
        let mut r = rng(5);
        for _ in 0..20 {
            let t = sample_task(q, &corpus, &j, 2, 100, &mut r).unwrap();
            assert_eq!(t.candidates[0].id, "c0");
            assert!(t.candidates[1..].iter().all(|c| c.id != "c0"));
            assert_eq!(t.pairs, vec![(0, 1), (0, 2)]);
        }
        let t = sample_task(q, &corpus, &j, 3, 2, &mut r).unwrap();
        assert_eq!(t.pairs.len(), 2);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (queries, corpus, j) = toy();
        let init = Checkpoint::init(ModelConfig::new(Variant::SelfAttention, 4, 2), UnwarpConfig { hidden: (4, 4), ..Default::default() }, Ablation::Full, 1);
        let qs: Vec<&EventSequence> = queries.iter().collect();
        let data = TrainData {
            train: &qs,
            valid: &[],
            corpus: &corpus,
            judgments: &j,
        };
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(init.clone(), &data, &cfg).unwrap();
        assert_eq!(out.best, init);
        assert_eq!(out.report.curve.len(), 1);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let init = Checkpoint::init(ModelConfig::new(Variant::CrossAttention, 4, 3), UnwarpConfig { hidden: (3, 5), ..Default::default() }, Ablation::Full, 9);
        let mut buf = Vec::new();
        init.save(&mut buf).unwrap();
        assert_eq!(Checkpoint::load(&mut buf.as_slice()).unwrap(), init);
        buf[0] = b'X';
        assert!(Checkpoint::load(&mut buf.as_slice()).is_err());
    }
}
