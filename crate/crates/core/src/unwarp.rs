//! Monotone time transform `U(t) = integral_0^t u(s) ds + eta`.
//!
//! `u` is a small network `1 -> H1 -> H2 -> 1` with tanh hidden layers and a
//! final ReLU, so `u >= 0` and `U` is non-decreasing. The output bias starts
//! at 1, which makes a fresh transform the identity up to the small weight
//! noise.
//!
//! The integral uses the composite trapezoid rule on [`QUAD_INTERVALS`]
//! equal intervals over `[0, t_max]`, shared by all times of one call, with
//! a partial trapezoid (linear interpolation of `u`) to reach each time.
//! The rule is exact whenever `u` is linear.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Value};
use crate::data::EventSequence;

pub const QUAD_INTERVALS: usize = 64;
/// Separation applied when two unwarped times collide.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnwarpConfig {
    pub hidden: (usize, usize),
    /// Standard deviation of the train-time offset `eta`.
    pub sigma_eta: f64,
    /// `sigma` in the unbiasedness penalty `(1/sigma^2) int (u - 1)^2`.
    pub reg_sigma: f64,
}

impl Default for UnwarpConfig {
    fn default() -> Self {
        Self {
            hidden: (128, 128),
            sigma_eta: 0.01,
            reg_sigma: 1.0,
        }
    }
}

/// Rate function used instead of the network, for analytic checks.
pub type RateHook = fn(f64) -> f64;

#[derive(Debug, Clone)]
pub struct Unwarp {
    config: UnwarpConfig,
    phi: Vec<f64>,
    hook: Option<RateHook>,
}

impl PartialEq for Unwarp {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.phi == other.phi && self.hook.is_none() && other.hook.is_none()
    }
}

/// Unwarped times plus whether tie separation kicked in.
#[derive(Debug, Clone, PartialEq)]
pub struct Unwarped {
    pub times: Vec<f64>,
    pub tie_adjusted: bool,
}

pub struct UnwarpLeaves<'t> {
    w1: Value<'t>,
    b1: Value<'t>,
    w2: Value<'t>,
    b2: Value<'t>,
    w3: Value<'t>,
    b3: Value<'t>,
}

impl Unwarp {
    /// Layer shapes in canonical order: `w1` 1xH1, `b1` 1xH1, `w2` H1xH2,
    /// `b2` 1xH2, `w3` H2x1, `b3` 1x1.
    fn shapes(config: &UnwarpConfig) -> [(usize, usize); 6] {
        let (h1, h2) = config.hidden;
        [(1, h1), (1, h1), (h1, h2), (1, h2), (h2, 1), (1, 1)]
    }

    pub fn param_count(config: &UnwarpConfig) -> usize {
        Self::shapes(config).iter().map(|(r, c)| r * c).sum()
    }

    /// Weights ~ N(0, 0.02), hidden biases 0, output bias 1.
    pub fn new(config: UnwarpConfig, rng: &mut impl rand::Rng) -> Self {
        let mut u = Self::identity(config);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let shapes = Self::shapes(&config);
        let mut off = 0;
        for (k, (r, c)) in shapes.iter().enumerate() {
            let n = r * c;
            if k % 2 == 0 {
                for v in &mut u.phi[off..off + n] {
                    *v = normal.sample(rng);
                }
            }
            off += n;
        }
        u
    }

    /// `u == 1` exactly: zero weights, output bias 1.
    pub fn identity(config: UnwarpConfig) -> Self {
        let mut phi = vec![0.0; Self::param_count(&config)];
        *phi.last_mut().expect("non-empty") = 1.0;
        Self {
            config,
            phi,
            hook: None,
        }
    }

    /// Constant pre-rectifier output `c`, so `u == max(c, 0)`.
    pub fn constant_rate(config: UnwarpConfig, c: f64) -> Self {
        let mut u = Self::identity(config);
        *u.phi.last_mut().expect("non-empty") = c;
        u
    }

    /// Replaces the network by a fixed rate function. Hooked transforms
    /// have no trainable parameters.
    pub fn with_hook(config: UnwarpConfig, hook: RateHook) -> Self {
        let mut u = Self::identity(config);
        u.hook = Some(hook);
        u
    }

    pub fn from_phi(config: UnwarpConfig, phi: Vec<f64>) -> Option<Self> {
        (phi.len() == Self::param_count(&config)).then_some(Self {
            config,
            phi,
            hook: None,
        })
    }

    pub fn config(&self) -> &UnwarpConfig {
        &self.config
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    pub fn is_hooked(&self) -> bool {
        self.hook.is_some()
    }

    pub fn leaves<'t>(&self, tape: &'t Tape, phi: Option<&[f64]>) -> UnwarpLeaves<'t> {
        let phi = phi.unwrap_or(&self.phi);
        let mut off = 0;
        let mut take = |(r, c): (usize, usize)| {
            let v = tape.param(Tensor::new(r, c, phi[off..off + r * c].to_vec()));
            off += r * c;
            v
        };
        let s = Self::shapes(&self.config);
        UnwarpLeaves {
            w1: take(s[0]),
            b1: take(s[1]),
            w2: take(s[2]),
            b2: take(s[3]),
            w3: take(s[4]),
            b3: take(s[5]),
        }
    }

    fn flatten(&self, p: &UnwarpLeaves<'_>, g: &crate::autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phi.len());
        for v in [p.w1, p.b1, p.w2, p.b2, p.w3, p.b3] {
            out.extend_from_slice(g.wrt(v).data());
        }
        out
    }

    /// `u` at each entry of a column of times.
    pub fn rate_on<'t>(&self, p: &UnwarpLeaves<'t>, t: Value<'t>) -> Value<'t> {
        if let Some(hook) = self.hook {
            let vals = t.to_vec().into_iter().map(|x| hook(x).max(0.0)).collect();
            return t.tape().constant(Tensor::column(vals));
        }
        let h1 = (t.matmul(p.w1) + p.b1).tanh();
        let h2 = (h1.matmul(p.w2) + p.b2).tanh();
        (h2.matmul(p.w3) + p.b3).relu()
    }

    /// Plain evaluation of `u(t)`.
    pub fn rate(&self, t: f64) -> f64 {
        let tape = Tape::new();
        let p = self.leaves(&tape, None);
        self.rate_on(&p, tape.constant(Tensor::scalar(t))).item()
    }

    /// `U(t_i)` for every time (no `eta`) on a tape. Times must be >= 0.
    pub fn integrate_on<'t>(&self, p: &UnwarpLeaves<'t>, tape: &'t Tape, times: &[f64]) -> Value<'t> {
        let (nodes, weights) = quadrature(times, QUAD_INTERVALS);
        let u = self.rate_on(p, tape.constant(Tensor::column(nodes)));
        tape.constant(weights).matmul(u)
    }

    /// Unwarps `times` with offset `eta`, separating ties.
    pub fn apply(&self, times: &[f64], eta: f64) -> Unwarped {
        if times.is_empty() {
            return Unwarped {
                times: Vec::new(),
                tie_adjusted: false,
            };
        }
        let tape = Tape::new();
        let p = self.leaves(&tape, None);
        let raw: Vec<f64> = self
            .integrate_on(&p, &tape, times)
            .to_vec()
            .into_iter()
            .map(|u| u + eta)
            .collect();
        let (times, tie_adjusted) = separate_ties(times, raw);
        Unwarped { times, tie_adjusted }
    }

    /// `U(t)` in eval mode.
    pub fn unwarp_time(&self, t: f64) -> f64 {
        self.apply(&[t], 0.0).times[0]
    }

    /// `U(t)` in train mode with a fresh `eta`.
    pub fn unwarp_time_train(&self, t: f64, rng: &mut impl rand::Rng) -> f64 {
        let eta = self.draw_eta(rng);
        self.apply(&[t], eta).times[0]
    }

    pub fn draw_eta(&self, rng: &mut impl rand::Rng) -> f64 {
        if self.config.sigma_eta == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.config.sigma_eta)
            .expect("valid sigma_eta")
            .sample(rng)
    }

    /// Unwarped copy of `seq` (eval mode); the horizon is unwarped too.
    pub fn unwarp_sequence(&self, seq: &EventSequence) -> (EventSequence, bool) {
        let mut times = seq.times();
        times.push(seq.horizon);
        let out = self.apply(&times, 0.0);
        let horizon = out.times[times.len() - 1];
        let n = seq.len();
        let seq = EventSequence::from_parts(seq.id.clone(), &out.times[..n], &seq.marks(), horizon);
        (seq, out.tie_adjusted)
    }

    /// Gradient of `upstream . U(times)` with respect to `phi`.
    pub fn vjp(&self, times: &[f64], upstream: &[f64]) -> Vec<f64> {
        assert_eq!(times.len(), upstream.len());
        if self.hook.is_some() || times.is_empty() {
            return vec![0.0; self.phi.len()];
        }
        let tape = Tape::new();
        let p = self.leaves(&tape, None);
        let u = self.integrate_on(&p, &tape, times);
        let out = tape.constant(Tensor::column(upstream.to_vec())).dot(u);
        let g = tape.backward(out).expect("unwarp tape is well formed");
        self.flatten(&p, &g)
    }

    /// `(1/sigma^2) int_0^T (u - 1)^2 dt` on a tape.
    pub fn penalty_on<'t>(&self, p: &UnwarpLeaves<'t>, tape: &'t Tape, horizon: f64) -> Value<'t> {
        let n = QUAD_INTERVALS;
        let h = horizon / n as f64;
        let nodes: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
        let w: Vec<f64> = (0..=n)
            .map(|k| if k == 0 || k == n { h / 2.0 } else { h })
            .collect();
        let dev = (self.rate_on(p, tape.constant(Tensor::column(nodes))) - 1.0).square();
        let s2 = self.config.reg_sigma * self.config.reg_sigma;
        tape.constant(Tensor::column(w)).dot(dev) * (1.0 / s2)
    }

    pub fn penalty(&self, horizon: f64) -> f64 {
        self.penalty_and_grad(horizon).0
    }

    pub fn penalty_and_grad(&self, horizon: f64) -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let p = self.leaves(&tape, None);
        let v = self.penalty_on(&p, &tape, horizon);
        if self.hook.is_some() {
            return (v.item(), vec![0.0; self.phi.len()]);
        }
        let g = tape.backward(v).expect("penalty tape is well formed");
        (v.item(), self.flatten(&p, &g))
    }
}

/// Grid nodes over `[0, max(times)]` and the matrix `W` with
/// `U(times) = W * u(nodes)` under the trapezoid rule.
pub fn quadrature(times: &[f64], intervals: usize) -> (Vec<f64>, Tensor) {
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let h = if t_max > 0.0 { t_max / intervals as f64 } else { 1.0 };
    let nodes: Vec<f64> = (0..=intervals).map(|k| k as f64 * h).collect();
    let mut w = Tensor::zeros(times.len(), intervals + 1);
    for (i, &t) in times.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        let m = ((t / h).floor() as usize).min(intervals - 1);
        // full intervals [0, m*h]
        for k in 0..m {
            let row = w.data_mut();
            row[i * (intervals + 1) + k] += h / 2.0;
            row[i * (intervals + 1) + k + 1] += h / 2.0;
        }
        // partial interval [m*h, t] with u linearly interpolated
        let d = t - m as f64 * h;
        let frac = d / h;
        let row = w.data_mut();
        row[i * (intervals + 1) + m] += d / 2.0 * (2.0 - frac);
        row[i * (intervals + 1) + m + 1] += d / 2.0 * frac;
    }
    (nodes, w)
}

fn separate_ties(input: &[f64], mut out: Vec<f64>) -> (Vec<f64>, bool) {
    let mut adjusted = false;
    for i in 1..out.len() {
        if input[i] > input[i - 1] && out[i] <= out[i - 1] {
            out[i] = out[i - 1] + TIE_EPSILON;
            adjusted = true;
        }
    }
    (out, adjusted)
}
