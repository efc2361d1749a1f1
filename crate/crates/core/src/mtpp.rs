//! Intensity-free marked temporal point process with an attention encoder.
//!
//! Each event contributes `log rho(gap) + log m(mark)`: a lognormal density
//! for the gap to the previous event (the first gap is measured from 0) and a
//! softmax over marks. Both heads read the encoder state summarizing the
//! events strictly before the one being scored; the empty history uses a
//! learned start row.
//!
//! Two encoders share one parameter layout:
//!
//! - [`Variant::SelfAttention`]: causal attention over the sequence itself.
//! - [`Variant::CrossAttention`]: every event of the scored sequence attends
//!   to all events of a conditioning (query) sequence.
//!
//! Matrices act on row vectors, so an input embedding row `y` is mapped to
//! `y * W`.
//!
//! # Canonical parameter order
//!
//! | block            | shape        |
//! |------------------|--------------|
//! | `mark_embedding` | C x D        |
//! | `time_weight`    | 1 x D        |
//! | `gap_weight`     | 1 x D        |
//! | `input_bias`     | 1 x D        |
//! | `positional`     | N_max x D    |
//! | `start_state`    | 1 x D        |
//! | per block b: `attn_s.b`, `attn_k.b`, `attn_v.b` | D x D each |
//! | `ff_in_scale`, `ff_in_bias`, `ff_out_scale`, `ff_out_bias` | 1 x D each |
//! | `time_head`      | D x 2        |
//! | `time_bias`      | 1 x 2        |
//! | `mark_head`      | D x C        |
//! | `mark_bias`      | 1 x C        |
//!
//! Each block is stored row-major and the blocks are concatenated in this
//! order to form the flat vector `theta`.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Value};
use crate::data::EventSequence;

pub const DEFAULT_MAX_LEN: usize = 128;
const INIT_STD: f64 = 0.02;
/// Smallest gap fed to the lognormal density.
pub const MIN_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    SelfAttention,
    CrossAttention,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::SelfAttention => 0,
            Variant::CrossAttention => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::SelfAttention),
            1 => Some(Variant::CrossAttention),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SelfAttention => "self",
            Variant::CrossAttention => "cross",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "self" => Ok(Variant::SelfAttention),
            "cross" => Ok(Variant::CrossAttention),
            other => Err(format!("unknown variant {other:?} (expected self or cross)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum MtppError {
    #[error("sequence of length {len} exceeds the positional table ({max})")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    Empty,
    #[error("empty conditioning sequence")]
    EmptyConditioning,
    #[error("{variant} model called {what} conditioning")]
    VariantMismatch { variant: &'static str, what: &'static str },
    #[error("mark {mark} out of range for {mark_count} marks")]
    MarkOutOfRange { mark: usize, mark_count: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("invalid density argument: gap {gap}, sigma {sigma}")]
    Domain { gap: f64, sigma: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    pub mark_count: usize,
    pub max_len: usize,
    pub blocks: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, dim: usize, mark_count: usize) -> Self {
        Self {
            variant,
            dim,
            mark_count,
            max_len: DEFAULT_MAX_LEN,
            blocks: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Weight,
    Bias,
    Positional,
}

/// Position of one named block inside `theta`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    kind: Kind,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn layout(cfg: &ModelConfig) -> Vec<BlockSpec> {
    let (c, d) = (cfg.mark_count, cfg.dim);
    let mut specs: Vec<(String, usize, usize, Kind)> = vec![
        ("mark_embedding".into(), c, d, Kind::Weight),
        ("time_weight".into(), 1, d, Kind::Weight),
        ("gap_weight".into(), 1, d, Kind::Weight),
        ("input_bias".into(), 1, d, Kind::Bias),
        ("positional".into(), cfg.max_len, d, Kind::Positional),
        ("start_state".into(), 1, d, Kind::Weight),
    ];
    for b in 0..cfg.blocks {
        for m in ["attn_s", "attn_k", "attn_v"] {
            specs.push((format!("{m}.{b}"), d, d, Kind::Weight));
        }
    }
    specs.extend([
        ("ff_in_scale".into(), 1, d, Kind::Weight),
        ("ff_in_bias".into(), 1, d, Kind::Bias),
        ("ff_out_scale".into(), 1, d, Kind::Weight),
        ("ff_out_bias".into(), 1, d, Kind::Bias),
        ("time_head".into(), d, 2, Kind::Weight),
        ("time_bias".into(), 1, 2, Kind::Bias),
        ("mark_head".into(), d, c, Kind::Weight),
        ("mark_bias".into(), 1, c, Kind::Bias),
    ]);
    let mut offset = 0;
    specs
        .into_iter()
        .map(|(name, rows, cols, kind)| {
            let spec = BlockSpec {
                name,
                rows,
                cols,
                offset,
                kind,
            };
            offset += rows * cols;
            spec
        })
        .collect()
}

/// Model parameters plus the layout that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct MtppModel {
    config: ModelConfig,
    layout: Vec<BlockSpec>,
    theta: Vec<f64>,
}

/// How the scored sequence is conditioned.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Self-attention model.
    None,
    /// Cross-attention model attending to another (unwarped) sequence.
    On(&'a [f64], &'a [usize]),
    /// Cross-attention model attending to the scored sequence itself.
    Itself,
}

/// Log-likelihood with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LlGrad {
    pub ll: f64,
    /// Gradient with respect to `theta`, canonical order.
    pub theta: Vec<f64>,
    /// Gradient with respect to the scored sequence's event times.
    pub times: Vec<f64>,
    /// Gradient with respect to the conditioning times (empty unless
    /// `Conditioning::On`).
    pub cond_times: Vec<f64>,
}

/// Parameter leaves of one tape.
pub struct Leaves<'t> {
    blocks: Vec<Value<'t>>,
}

impl<'t> Leaves<'t> {
    fn get(&self, model: &MtppModel, name: &str) -> Value<'t> {
        let idx = model
            .layout
            .iter()
            .position(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block {name}"));
        self.blocks[idx]
    }
}

impl MtppModel {
    /// Parameters drawn with weights ~ N(0, 0.02), biases 0.
    pub fn new(config: ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let mut model = Self::zeros(config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for spec in &model.layout {
            if spec.kind != Kind::Bias {
                for v in &mut model.theta[spec.range()] {
                    *v = normal.sample(rng);
                }
            }
        }
        model
    }

    pub fn zeros(config: ModelConfig) -> Self {
        assert!(config.dim > 0 && config.mark_count > 0 && config.max_len > 0);
        assert!(config.blocks > 0, "at least one attention block");
        let layout = layout(&config);
        let n = layout.last().map_or(0, |b| b.offset + b.len());
        Self {
            config,
            layout,
            theta: vec![0.0; n],
        }
    }

    pub fn from_theta(config: ModelConfig, theta: Vec<f64>) -> Result<Self, MtppError> {
        let mut model = Self::zeros(config);
        if theta.len() != model.theta.len() {
            return Err(MtppError::ParamLength {
                got: theta.len(),
                expected: model.theta.len(),
            });
        }
        model.theta = theta;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn layout(&self) -> &[BlockSpec] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<(), MtppError> {
        if theta.len() != self.theta.len() {
            return Err(MtppError::ParamLength {
                got: theta.len(),
                expected: self.theta.len(),
            });
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn block_spec(&self, name: &str) -> Option<&BlockSpec> {
        self.layout.iter().find(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let spec = self.block_spec(name).expect("unknown block");
        &self.theta[spec.range()]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.block_spec(name).expect("unknown block").range();
        &mut self.theta[range]
    }

    /// Name of the block holding flat index `i`.
    pub fn block_of(&self, i: usize) -> &str {
        self.layout
            .iter()
            .find(|b| b.range().contains(&i))
            .map_or("?", |b| b.name.as_str())
    }

    /// Records the parameters on `tape`; `theta` overrides the stored vector.
    pub fn leaves<'t>(&self, tape: &'t Tape, theta: Option<&[f64]>) -> Leaves<'t> {
        let theta = theta.unwrap_or(&self.theta);
        let blocks = self
            .layout
            .iter()
            .map(|b| tape.param(Tensor::new(b.rows, b.cols, theta[b.range()].to_vec())))
            .collect();
        Leaves { blocks }
    }

    /// Flattens leaf gradients into canonical order.
    pub fn flatten_grads(&self, leaves: &Leaves<'_>, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.theta.len());
        for v in &leaves.blocks {
            out.extend_from_slice(grads.wrt(*v).data());
        }
        out
    }

    fn check_seq(&self, times: &[f64], marks: &[usize]) -> Result<(), MtppError> {
        if times.is_empty() {
            return Err(MtppError::Empty);
        }
        if times.len() > self.config.max_len {
            return Err(MtppError::TooLong {
                len: times.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&mark) = marks.iter().find(|&&m| m >= self.config.mark_count) {
            return Err(MtppError::MarkOutOfRange {
                mark,
                mark_count: self.config.mark_count,
            });
        }
        Ok(())
    }

    /// Input-layer embeddings, one row per event (n x D).
    pub fn embed<'t>(
        &self,
        p: &Leaves<'t>,
        times: Value<'t>,
        marks: &[usize],
    ) -> Result<Value<'t>, MtppError> {
        let tape = times.tape();
        let n = marks.len();
        if n > self.config.max_len {
            return Err(MtppError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let c = self.config.mark_count;
        let mut onehot = Tensor::zeros(n, c);
        for (i, &m) in marks.iter().enumerate() {
            if m >= c {
                return Err(MtppError::MarkOutOfRange { mark: m, mark_count: c });
            }
            onehot.set(i, m, 1.0);
        }
        let gaps = gaps_of(times);
        let y = tape.constant(onehot).matmul(p.get(self, "mark_embedding"))
            + times.matmul(p.get(self, "time_weight"))
            + gaps.matmul(p.get(self, "gap_weight"))
            + p.get(self, "input_bias")
            + p.get(self, "positional").slice_rows(0, n);
        Ok(y)
    }

    fn attend<'t>(&self, p: &Leaves<'t>, block: usize, x: Value<'t>, kv: Option<Value<'t>>) -> Value<'t> {
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let s = x.matmul(p.get(self, &format!("attn_s.{block}")));
        let src = kv.unwrap_or(x);
        let k = src.matmul(p.get(self, &format!("attn_k.{block}")));
        let v = src.matmul(p.get(self, &format!("attn_v.{block}")));
        let logits = s.matmul(k.t()) * scale;
        logits.softmax_rows(kv.is_none()).matmul(v)
    }

    /// Encoder outputs `h_bar_r` for r = 1..n (n x D). `cond` carries the
    /// query embeddings for the cross variant.
    pub fn encode<'t>(&self, p: &Leaves<'t>, y: Value<'t>, cond: Option<Value<'t>>) -> Value<'t> {
        let mut h = y;
        for b in 0..self.config.blocks {
            h = self.attend(p, b, h, cond);
        }
        let f = (h * p.get(self, "ff_in_scale") + p.get(self, "ff_in_bias")).relu()
            * p.get(self, "ff_out_scale")
            + p.get(self, "ff_out_bias");
        f.cumsum_rows()
    }

    /// States used to predict each event: the start row followed by
    /// `h_bar_1..h_bar_{n-1}` (n x D).
    fn prediction_states<'t>(&self, p: &Leaves<'t>, hbar: Value<'t>) -> Value<'t> {
        let n = hbar.shape().0;
        let start = p.get(self, "start_state");
        if n == 1 {
            start
        } else {
            start.concat_rows(hbar.slice_rows(0, n - 1))
        }
    }

    /// Per-event log-likelihood terms, as a column of length n.
    pub fn event_terms<'t>(
        &self,
        p: &Leaves<'t>,
        times: Value<'t>,
        marks: &[usize],
        cond: Option<(Value<'t>, &[usize])>,
    ) -> Result<Value<'t>, MtppError> {
        match (self.config.variant, cond.is_some()) {
            (Variant::SelfAttention, true) => {
                return Err(MtppError::VariantMismatch {
                    variant: "self",
                    what: "with",
                })
            }
            (Variant::CrossAttention, false) => {
                return Err(MtppError::VariantMismatch {
                    variant: "cross",
                    what: "without",
                })
            }
            _ => {}
        }
        if marks.is_empty() {
            return Err(MtppError::Empty);
        }
        let y = self.embed(p, times, marks)?;
        let cond_y = match cond {
            Some((ct, cm)) => {
                if cm.is_empty() {
                    return Err(MtppError::EmptyConditioning);
                }
                Some(self.embed(p, ct, cm)?)
            }
            None => None,
        };
        let hbar = self.encode(p, y, cond_y);
        let states = self.prediction_states(p, hbar);
        let head = states.matmul(p.get(self, "time_head")) + p.get(self, "time_bias");
        let mu = head.column(0);
        let raw_sigma = head.column(1);
        let log_gap = gaps_of(times).clamp_min(MIN_GAP).ln();
        let z = (log_gap - mu) / raw_sigma.exp();
        let log_rho = -(log_gap + raw_sigma + z.square() * 0.5) - 0.5 * (2.0 * PI).ln();
        let mark_logits = states.matmul(p.get(self, "mark_head")) + p.get(self, "mark_bias");
        let log_m = mark_logits.log_softmax_rows().pick(marks);
        Ok(log_rho + log_m)
    }

    /// Sequence log-likelihood recorded on the leaves' tape.
    pub fn log_likelihood_on<'t>(
        &self,
        p: &Leaves<'t>,
        times: Value<'t>,
        marks: &[usize],
        cond: Option<(Value<'t>, &[usize])>,
    ) -> Result<Value<'t>, MtppError> {
        Ok(self.event_terms(p, times, marks, cond)?.sum())
    }

    /// Log-likelihood of `seq`; `cond` must be given iff the model is cross.
    pub fn log_likelihood(&self, seq: &EventSequence, cond: Option<&EventSequence>) -> Result<f64, MtppError> {
        let times = seq.times();
        let marks = seq.marks();
        let (ct, cm);
        let conditioning = match cond {
            Some(q) => {
                ct = q.times();
                cm = q.marks();
                Conditioning::On(&ct, &cm)
            }
            None => Conditioning::None,
        };
        self.log_likelihood_raw(None, &times, &marks, conditioning)
    }

    /// Log-likelihood from raw times/marks.
    pub fn log_likelihood_raw(
        &self,
        theta: Option<&[f64]>,
        times: &[f64],
        marks: &[usize],
        cond: Conditioning<'_>,
    ) -> Result<f64, MtppError> {
        self.check_seq(times, marks)?;
        let tape = Tape::new();
        let p = self.leaves(&tape, theta);
        let t = tape.constant(Tensor::column(times.to_vec()));
        let ll = match cond {
            Conditioning::None => self.log_likelihood_on(&p, t, marks, None)?,
            Conditioning::Itself => self.log_likelihood_on(&p, t, marks, Some((t, marks)))?,
            Conditioning::On(ct, cm) => {
                let c = tape.constant(Tensor::column(ct.to_vec()));
                self.log_likelihood_on(&p, t, marks, Some((c, cm)))?
            }
        };
        tape.check()?;
        Ok(ll.item())
    }

    /// Raw gradient of the log-likelihood with respect to `theta`.
    pub fn grad_log_likelihood(
        &self,
        seq: &EventSequence,
        cond: Option<&EventSequence>,
    ) -> Result<Vec<f64>, MtppError> {
        let times = seq.times();
        let marks = seq.marks();
        let (ct, cm);
        let conditioning = match cond {
            Some(q) => {
                ct = q.times();
                cm = q.marks();
                Conditioning::On(&ct, &cm)
            }
            None => Conditioning::None,
        };
        Ok(self.ll_and_grad(None, &times, &marks, conditioning)?.theta)
    }

    /// Log-likelihood and its gradients with respect to `theta` and to every
    /// event time involved. `theta` overrides the stored parameters.
    pub fn ll_and_grad(
        &self,
        theta: Option<&[f64]>,
        times: &[f64],
        marks: &[usize],
        cond: Conditioning<'_>,
    ) -> Result<LlGrad, MtppError> {
        self.check_seq(times, marks)?;
        let tape = Tape::new();
        let p = self.leaves(&tape, theta);
        let t = tape.param(Tensor::column(times.to_vec()));
        let mut c = None;
        let ll = match cond {
            Conditioning::None => self.log_likelihood_on(&p, t, marks, None)?,
            Conditioning::Itself => self.log_likelihood_on(&p, t, marks, Some((t, marks)))?,
            Conditioning::On(ct, cm) => {
                self.check_seq(ct, cm)
                    .map_err(|e| if matches!(e, MtppError::Empty) { MtppError::EmptyConditioning } else { e })?;
                let cv = tape.param(Tensor::column(ct.to_vec()));
                c = Some(cv);
                self.log_likelihood_on(&p, t, marks, Some((cv, cm)))?
            }
        };
        let grads = tape.backward(ll)?;
        Ok(LlGrad {
            ll: ll.item(),
            theta: self.flatten_grads(&p, &grads),
            times: grads.wrt(t).into_data(),
            cond_times: c.map(|c| grads.wrt(c).into_data()).unwrap_or_default(),
        })
    }

    /// Encoder states for a self-attention model: row 0 is the start state,
    /// row r is `h_bar_r`.
    pub fn states(&self, times: &[f64], marks: &[usize], cond: Conditioning<'_>) -> Result<Tensor, MtppError> {
        let tape = Tape::new();
        let p = self.leaves(&tape, None);
        let start = p.get(self, "start_state");
        if times.is_empty() {
            return Ok(start.to_tensor());
        }
        self.check_seq(times, marks)?;
        let t = tape.constant(Tensor::column(times.to_vec()));
        let y = self.embed(&p, t, marks)?;
        let cond_y = match cond {
            Conditioning::None => None,
            Conditioning::Itself => Some(y),
            Conditioning::On(ct, cm) => {
                let c = tape.constant(Tensor::column(ct.to_vec()));
                Some(self.embed(&p, c, cm)?)
            }
        };
        let hbar = self.encode(&p, y, cond_y);
        let out = start.concat_rows(hbar);
        tape.check()?;
        Ok(out.to_tensor())
    }

    /// Lognormal parameters `(mu, sigma)` and mark logits read from a state.
    pub fn heads(&self, state: &[f64]) -> (f64, f64, Vec<f64>) {
        let d = self.config.dim;
        let c = self.config.mark_count;
        let th = self.block("time_head");
        let tb = self.block("time_bias");
        let mh = self.block("mark_head");
        let mb = self.block("mark_bias");
        let mut mu = tb[0];
        let mut raw = tb[1];
        for k in 0..d {
            mu += state[k] * th[k * 2];
            raw += state[k] * th[k * 2 + 1];
        }
        let logits = (0..c)
            .map(|j| mb[j] + (0..d).map(|k| state[k] * mh[k * c + j]).sum::<f64>())
            .collect();
        (mu, raw.exp(), logits)
    }

    /// Draws the next `(gap, mark)` given an encoder state.
    pub fn sample_next_event(&self, state: &[f64], rng: &mut impl rand::Rng) -> (f64, usize) {
        let (mu, sigma, logits) = self.heads(state);
        sample_from_heads(mu, sigma, &logits, rng)
    }

    /// Samples `n` events autoregressively from a self-attention model.
    pub fn sample_sequence(&self, id: &str, n: usize, rng: &mut impl rand::Rng) -> Result<EventSequence, MtppError> {
        if self.config.variant != Variant::SelfAttention {
            return Err(MtppError::VariantMismatch {
                variant: "cross",
                what: "without",
            });
        }
        if n > self.config.max_len {
            return Err(MtppError::TooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        let mut times = Vec::with_capacity(n);
        let mut marks = Vec::with_capacity(n);
        let mut t = 0.0;
        for _ in 0..n {
            let states = self.states(&times, &marks, Conditioning::None)?;
            let last = states.row_slice(states.rows() - 1).to_vec();
            let (gap, mark) = self.sample_next_event(&last, rng);
            t += gap.max(MIN_GAP);
            times.push(t);
            marks.push(mark);
        }
        Ok(EventSequence::from_parts(id, &times, &marks, t))
    }
}

fn gaps_of(times: Value<'_>) -> Value<'_> {
    let tape = times.tape();
    let n = times.shape().0;
    let zero = tape.scalar_const(0.0);
    let prev = if n == 1 {
        zero
    } else {
        zero.concat_rows(times.slice_rows(0, n - 1))
    };
    times - prev
}

/// Log of the lognormal density at `gap`.
pub fn time_log_density(gap: f64, mu: f64, sigma: f64) -> Result<f64, MtppError> {
    if !(gap > 0.0 && sigma > 0.0) {
        return Err(MtppError::Domain { gap, sigma });
    }
    let z = (gap.ln() - mu) / sigma;
    Ok(-0.5 * (2.0 * PI).ln() - gap.ln() - sigma.ln() - 0.5 * z * z)
}

/// Log-softmax of a logit vector.
pub fn mark_log_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `exp(mu + sigma * N(0,1))` and a categorical draw from `logits`.
pub fn sample_from_heads(mu: f64, sigma: f64, logits: &[f64], rng: &mut impl rand::Rng) -> (f64, usize) {
    let z: f64 = StandardNormal.sample(rng);
    let gap = (mu + sigma * z).exp();
    let probs: Vec<f64> = mark_log_probs(logits).into_iter().map(f64::exp).collect();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut mark = probs.len() - 1;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            mark = j;
            break;
        }
    }
    (gap, mark)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use rand::Rng as _;

    fn small(variant: Variant, seed: u64) -> MtppModel {
        let cfg = ModelConfig {
            variant,
            dim: 4,
            mark_count: 3,
            max_len: 8,
            blocks: 1,
        };
        let mut r = rng(seed);
        let mut m = MtppModel::new(cfg, &mut r);
        // larger weights so every path carries signal
        for v in m.theta_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn layout_is_contiguous() {
        let m = small(Variant::SelfAttention, 1);
        let mut next = 0;
        for b in m.layout() {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, m.num_params());
        // 3x4 + 3*4 + 8x4 + 4 + 3*16 + 4*4 + 4x2 + 2 + 4x3 + 3
        assert_eq!(m.num_params(), 12 + 12 + 32 + 4 + 48 + 16 + 8 + 2 + 12 + 3);
    }

    #[test]
    fn density_reference_value() {
        let v = time_log_density(1.0, 0.0, 1.0).unwrap();
        assert!((v - (-0.918_938_533_204_672_8)).abs() < 1e-12);
        assert!(time_log_density(0.0, 0.0, 1.0).is_err());
        assert!(time_log_density(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        // substitute gap = e^s so the integrand is smooth on the real line
        let (mu, sigma) = (0.3, 0.7);
        let (lo, hi, n) = (-12.0, 12.0, 24_000);
        let h: f64 = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|k| {
                let s = lo + k as f64 * h;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * (time_log_density(s.exp(), mu, sigma).unwrap() + s).exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn mark_softmax_cases() {
        let lp = mark_log_probs(&[0.0; 4]);
        assert!(lp.iter().all(|v| (v - 0.25f64.ln()).abs() < 1e-15));
        let lp = mark_log_probs(&[50.0, 0.0, 0.0]);
        assert!(lp[0].exp() > 1.0 - 1e-15);
        let lp = mark_log_probs(&[0.1, -0.3, 0.7]);
        let z = 0.1f64.exp() + (-0.3f64).exp() + 0.7f64.exp();
        for (v, l) in lp.iter().zip([0.1f64, -0.3, 0.7]) {
            assert!((v.exp() - l.exp() / z).abs() < 1e-15);
        }
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_embeds_to_zero() {
        let m = MtppModel::zeros(ModelConfig::new(Variant::SelfAttention, 3, 2));
        let tape = Tape::new();
        let p = m.leaves(&tape, None);
        let t = tape.constant(Tensor::column(vec![0.5, 1.0]));
        let y = m.embed(&p, t, &[0, 1]).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_only_embedding() {
        let mut m = MtppModel::zeros(ModelConfig::new(Variant::SelfAttention, 3, 2));
        m.block_mut("input_bias").copy_from_slice(&[1.0, 0.0, 0.0]);
        let tape = Tape::new();
        let p = m.leaves(&tape, None);
        let t = tape.constant(Tensor::column(vec![0.7]));
        assert_eq!(m.embed(&p, t, &[1]).unwrap().to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_event_embedding_by_hand() {
        let mut m = MtppModel::zeros(ModelConfig::new(Variant::SelfAttention, 2, 2));
        m.block_mut("mark_embedding").copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        m.block_mut("time_weight").copy_from_slice(&[0.5, -0.5]);
        m.block_mut("gap_weight").copy_from_slice(&[1.0, 2.0]);
        m.block_mut("input_bias").copy_from_slice(&[0.01, 0.02]);
        m.block_mut("positional")[..4].copy_from_slice(&[0.0, 0.1, 0.2, 0.0]);
        let tape = Tape::new();
        let p = m.leaves(&tape, None);
        let t = tape.constant(Tensor::column(vec![1.0, 1.5]));
        let y = m.embed(&p, t, &[1, 0]).unwrap().to_vec();
        // event 1: mark 1 row (0.3,0.4) + 1.0*(0.5,-0.5) + gap 1.0*(1,2) + bias + p1
        let e1 = [0.3 + 0.5 + 1.0 + 0.01, 0.4 - 0.5 + 2.0 + 0.02 + 0.1];
        // event 2: mark 0 row (0.1,0.2) + 1.5*(0.5,-0.5) + gap 0.5*(1,2) + bias + p2
        let e2 = [0.1 + 0.75 + 0.5 + 0.01 + 0.2, 0.2 - 0.75 + 1.0 + 0.02];
        for (a, b) in y.iter().zip(e1.iter().chain(&e2)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn too_long_is_rejected() {
        let m = small(Variant::SelfAttention, 2);
        let times: Vec<f64> = (1..=9).map(f64::from).collect();
        let marks = vec![0; 9];
        assert!(matches!(
            m.log_likelihood_raw(None, &times, &marks, Conditioning::None),
            Err(MtppError::TooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let m = small(Variant::SelfAttention, 2);
        assert!(matches!(
            m.log_likelihood_raw(None, &[1.0], &[0], Conditioning::Itself),
            Err(MtppError::VariantMismatch { .. })
        ));
        let m = small(Variant::CrossAttention, 2);
        assert!(matches!(
            m.log_likelihood_raw(None, &[1.0], &[0], Conditioning::None),
            Err(MtppError::VariantMismatch { .. })
        ));
        assert!(matches!(
            m.ll_and_grad(None, &[1.0], &[0], Conditioning::On(&[], &[])),
            Err(MtppError::EmptyConditioning)
        ));
    }

    #[test]
    fn one_event_is_sum_of_heads() {
        let m = small(Variant::SelfAttention, 3);
        let start = m.block("start_state").to_vec();
        let (mu, sigma, logits) = m.heads(&start);
        let expect = time_log_density(0.8, mu, sigma).unwrap() + mark_log_probs(&logits)[2];
        let ll = m.log_likelihood_raw(None, &[0.8], &[2], Conditioning::None).unwrap();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_mark_shift_has_zero_gradient() {
        let m = small(Variant::SelfAttention, 4);
        let g = m
            .ll_and_grad(None, &[0.2, 0.9, 1.1], &[0, 2, 1], Conditioning::None)
            .unwrap()
            .theta;
        let spec = m.block_spec("mark_bias").unwrap();
        let s: f64 = g[spec.range()].iter().sum();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn unused_positional_rows_get_no_gradient() {
        let m = small(Variant::SelfAttention, 5);
        let g = m
            .ll_and_grad(None, &[0.2, 0.9], &[0, 2], Conditioning::None)
            .unwrap()
            .theta;
        let spec = m.block_spec("positional").unwrap();
        let d = m.config().dim;
        assert!(g[spec.offset + 2 * d..spec.offset + spec.len()].iter().all(|&v| v == 0.0));
        assert!(g[spec.offset..spec.offset + 2 * d].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sampling_is_seeded() {
        let m = small(Variant::SelfAttention, 6);
        let a = m.sample_sequence("a", 5, &mut rng(9)).unwrap();
        let b = m.sample_sequence("a", 5, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.validate(3).is_ok());
    }

    #[test]
    fn degenerate_lognormal_sample() {
        let (gap, _) = sample_from_heads(0.4, 1e-9, &[0.0, 0.0], &mut rng(1));
        assert!((gap - 0.4f64.exp()).abs() < 1e-6);
    }
}
