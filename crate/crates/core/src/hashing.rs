//! Binary codes over Fisher vectors and a multi-table bucket index.
//!
//! The trainable hasher is a one-hidden-layer network
//! `logits = tanh((v - mean) W1 + b1) W2 + b2`; codes are the signs of the
//! logits with 0 mapped to +1. Its loss keeps codes balanced, saturated and
//! decorrelated; see [`hash_loss_terms`].
//!
//! The index holds `M` tables. Table `m` reads `L` distinct code positions
//! in ascending order and packs them into a bucket id, most significant bit
//! first, with -1 as 0 and +1 as 1.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Value};
use crate::binio;
use crate::seed::component_rng;

pub const DEFAULT_TABLES: usize = 10;
pub const DEFAULT_BITS_PER_TABLE: usize = 12;
pub const DEFAULT_ETAS: [f64; 3] = [0.4, 0.3, 0.3];
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum HashError {
    #[error("L = {l} exceeds code length R = {r}")]
    TooManyBits { l: usize, r: usize },
    #[error("no vectors to train on")]
    EmptyInput,
    #[error("vector of length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("hash training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid hash file: {0}")]
    Format(String),
}

/// A code with entries in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode(pub Vec<i8>);

impl HashCode {
    /// Sign with ties at 0 mapped to +1.
    pub fn from_logits(logits: &[f64]) -> Self {
        HashCode(logits.iter().map(|&l| if l < 0.0 { -1 } else { 1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn hamming(&self, other: &HashCode) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashConfig {
    /// Code length R.
    pub bits: usize,
    /// Hidden width; defaults to R.
    pub hidden: usize,
    /// Loss weights, normalized to sum to 1 before use.
    pub etas: [f64; 3],
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl HashConfig {
    pub fn new(bits: usize) -> Self {
        Self {
            bits,
            hidden: bits,
            etas: DEFAULT_ETAS,
            epochs: 200,
            lr: 0.01,
            seed: 0,
        }
    }

    pub fn normalized_etas(&self) -> [f64; 3] {
        let s: f64 = self.etas.iter().sum();
        self.etas.map(|e| e / s)
    }
}

/// Parameters of the trainable hasher.
#[derive(Debug, Clone, PartialEq)]
pub struct HashNet {
    pub input_dim: usize,
    pub hidden: usize,
    pub bits: usize,
    pub etas: [f64; 3],
    /// Subtracted from every input.
    pub center: Vec<f64>,
    /// Multiplies centered inputs so their components have unit mean square.
    pub scale: f64,
    /// `W1 (P x H)`, `b1 (1 x H)`, `W2 (H x R)`, `b2 (1 x R)` concatenated.
    pub psi: Vec<f64>,
}

/// The three loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashLoss {
    pub balance: f64,
    pub quantization: f64,
    pub decorrelation: f64,
    pub total: f64,
}

/// Loss terms over a matrix of smooth codes `z = tanh(logits)` (N x R),
/// with normalized weights:
///
/// - balance: `eta1 / N * sum_n |sum_r z_nr|`
/// - quantization: `eta2 / N * sum_n sum_r ||z_nr| - 1|`
/// - decorrelation: `2 eta3 / C(R,2) * |sum_n sum_{i<j} z_ni z_nj|`
pub fn hash_loss_terms<'t>(z: Value<'t>, etas: [f64; 3]) -> [Value<'t>; 3] {
    let (n, r) = z.shape();
    let n = n as f64;
    let pairs = (r * (r.saturating_sub(1)) / 2).max(1) as f64;
    let row = z.row_sums();
    let balance = row.abs().sum() * (etas[0] / n);
    let quant = (z.abs() - 1.0).abs().sum() * (etas[1] / n);
    // sum_{i<j} z_i z_j = ((sum z)^2 - sum z^2) / 2
    let cross = (row.square().sum() - z.square().sum()) * 0.5;
    let decor = cross.abs() * (2.0 * etas[2] / pairs);
    [balance, quant, decor]
}

fn xavier(rng: &mut impl rand::Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl HashNet {
    /// Weights ~ N(0, 1/fan_in), biases 0. Inputs are centered on the mean
    /// of `vectors` and rescaled to unit mean-square components.
    pub fn init(vectors: &[Vec<f64>], config: &HashConfig) -> Result<Self, HashError> {
        let first = vectors.first().ok_or(HashError::EmptyInput)?;
        let p = first.len();
        let mut center = vec![0.0; p];
        for v in vectors {
            if v.len() != p {
                return Err(HashError::Dimension { got: v.len(), expected: p });
            }
            for (c, x) in center.iter_mut().zip(v) {
                *c += x;
            }
        }
        for c in &mut center {
            *c /= vectors.len() as f64;
        }
        let spread = vectors
            .iter()
            .map(|v| v.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>())
            .sum::<f64>()
            / (vectors.len() * p) as f64;
        let scale = if spread > 0.0 { 1.0 / spread.sqrt() } else { 1.0 };
        let (h, r) = (config.hidden, config.bits);
        let mut rng = component_rng(config.seed, "hashing.init");
        let mut psi = xavier(&mut rng, p * h, p);
        psi.extend(std::iter::repeat_n(0.0, h));
        psi.extend(xavier(&mut rng, h * r, h));
        psi.extend(std::iter::repeat_n(0.0, r));
        Ok(Self {
            input_dim: p,
            hidden: h,
            bits: r,
            etas: config.normalized_etas(),
            center,
            scale,
            psi,
        })
    }

    fn split(&self) -> [(usize, usize, usize); 4] {
        let (p, h, r) = (self.input_dim, self.hidden, self.bits);
        let o1 = p * h;
        let o2 = o1 + h;
        let o3 = o2 + h * r;
        [(0, p, h), (o1, 1, h), (o2, h, r), (o3, 1, r)]
    }

    fn leaves<'t>(&self, tape: &'t Tape) -> [Value<'t>; 4] {
        self.split()
            .map(|(o, rows, cols)| tape.param(Tensor::new(rows, cols, self.psi[o..o + rows * cols].to_vec())))
    }

    fn centered(&self, vectors: &[&[f64]]) -> Tensor {
        let p = self.input_dim;
        let mut data = Vec::with_capacity(vectors.len() * p);
        for v in vectors {
            data.extend(v.iter().zip(&self.center).map(|(x, c)| (x - c) * self.scale));
        }
        Tensor::new(vectors.len(), p, data)
    }

    fn logits_on<'t>(&self, tape: &'t Tape, w: &[Value<'t>; 4], x: Tensor) -> Value<'t> {
        let h = (tape.constant(x).matmul(w[0]) + w[1]).tanh();
        h.matmul(w[2]) + w[3]
    }

    /// Logits of one vector.
    pub fn logits(&self, v: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let w = self.leaves(&tape);
        self.logits_on(&tape, &w, self.centered(&[v])).to_vec()
    }

    pub fn code(&self, v: &[f64]) -> HashCode {
        HashCode::from_logits(&self.logits(v))
    }

    /// Codes for many vectors in one pass.
    pub fn codes(&self, vectors: &[&[f64]]) -> Vec<HashCode> {
        if vectors.is_empty() {
            return Vec::new();
        }
        let tape = Tape::new();
        let w = self.leaves(&tape);
        let l = self.logits_on(&tape, &w, self.centered(vectors)).to_tensor();
        (0..l.rows()).map(|i| HashCode::from_logits(l.row_slice(i))).collect()
    }

    pub fn loss(&self, vectors: &[&[f64]]) -> HashLoss {
        self.loss_and_grad(vectors).0
    }

    fn loss_and_grad(&self, vectors: &[&[f64]]) -> (HashLoss, Vec<f64>) {
        let tape = Tape::new();
        let w = self.leaves(&tape);
        let z = self.logits_on(&tape, &w, self.centered(vectors)).tanh();
        let [b, q, d] = hash_loss_terms(z, self.etas);
        let total = b + q + d;
        let report = HashLoss {
            balance: b.item(),
            quantization: q.item(),
            decorrelation: d.item(),
            total: total.item(),
        };
        let g = tape.backward(total).expect("hash tape is well formed");
        let grad = w.iter().flat_map(|v| g.wrt(*v).into_data()).collect();
        (report, grad)
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        binio::write_magic(w, b"CTESHNET", 2)?;
        for v in [self.input_dim, self.hidden, self.bits] {
            binio::write_u64(w, v as u64)?;
        }
        for e in self.etas {
            binio::write_f64(w, e)?;
        }
        binio::write_f64s(w, &self.center)?;
        binio::write_f64(w, self.scale)?;
        binio::write_f64s(w, &self.psi)
    }

    pub fn load(r: &mut impl Read) -> Result<Self, HashError> {
        let version = binio::read_magic(r, b"CTESHNET")?;
        if version != 2 {
            return Err(HashError::Format(format!("unsupported hash net version {version}")));
        }
        let input_dim = binio::read_u64(r)? as usize;
        let hidden = binio::read_u64(r)? as usize;
        let bits = binio::read_u64(r)? as usize;
        let mut etas = [0.0; 3];
        for e in &mut etas {
            *e = binio::read_f64(r)?;
        }
        let center = binio::read_f64s(r)?;
        let scale = binio::read_f64(r)?;
        let psi = binio::read_f64s(r)?;
        let net = Self {
            input_dim,
            hidden,
            bits,
            etas,
            center,
            scale,
            psi,
        };
        let expected = input_dim * hidden + hidden + hidden * bits + bits;
        if net.center.len() != input_dim || net.psi.len() != expected {
            return Err(HashError::Format("hash net dimensions disagree".into()));
        }
        Ok(net)
    }
}

/// Per-epoch losses of a hash-net run.
#[derive(Debug, Clone, PartialEq)]
pub struct HashTrainReport {
    pub losses: Vec<HashLoss>,
    pub best_epoch: usize,
}

/// Full-batch Adam on the hash loss; returns the lowest-loss parameters.
pub fn train_hash_net(vectors: &[Vec<f64>], config: &HashConfig) -> Result<(HashNet, HashTrainReport), HashError> {
    let mut net = HashNet::init(vectors, config)?;
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let mut adam = crate::trainer::Adam::new(net.psi.len());
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (loss, grad) = net.loss_and_grad(&refs);
        if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
            return Err(HashError::Diverged {
                epoch,
                loss: loss.total,
            });
        }
        losses.push(loss);
        if loss.total < best_loss {
            best_loss = loss.total;
            best = net.clone();
            best_epoch = epoch;
        }
        if epoch < config.epochs {
            if adam.step(&mut net.psi, &grad, config.lr).is_err() {
                return Err(HashError::Diverged { epoch, loss: f64::NAN });
            }
        }
    }
    Ok((best, HashTrainReport { losses, best_epoch }))
}

/// Random-hyperplane codes: bit r is the sign of `u_r . v`, `u_r ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomHyperplanes {
    pub dim: usize,
    pub bits: usize,
    pub seed: u64,
    planes: Vec<f64>,
}

impl RandomHyperplanes {
    pub fn new(dim: usize, bits: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "hashing.hyperplanes");
        let planes = (0..dim * bits).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            dim,
            bits,
            seed,
            planes,
        }
    }

    pub fn code(&self, v: &[f64]) -> HashCode {
        let logits: Vec<f64> = (0..self.bits)
            .map(|r| crate::relevance::dot(&self.planes[r * self.dim..(r + 1) * self.dim], v))
            .collect();
        HashCode::from_logits(&logits)
    }
}

/// Either hasher, used to code queries against a built index.
#[derive(Debug, Clone, PartialEq)]
pub enum Hasher {
    Trained(HashNet),
    Random(RandomHyperplanes),
}

impl Hasher {
    pub fn code(&self, v: &[f64]) -> HashCode {
        match self {
            Hasher::Trained(n) => n.code(v),
            Hasher::Random(h) => h.code(v),
        }
    }

    pub fn codes(&self, vectors: &[&[f64]]) -> Vec<HashCode> {
        match self {
            Hasher::Trained(n) => n.codes(vectors),
            Hasher::Random(h) => vectors.iter().map(|v| h.code(v)).collect(),
        }
    }

    pub fn bits(&self) -> usize {
        match self {
            Hasher::Trained(n) => n.bits,
            Hasher::Random(h) => h.bits,
        }
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        match self {
            Hasher::Trained(n) => {
                binio::write_u8(w, 0)?;
                n.save(w)
            }
            Hasher::Random(h) => {
                binio::write_u8(w, 1)?;
                for v in [h.dim as u64, h.bits as u64, h.seed] {
                    binio::write_u64(w, v)?;
                }
                Ok(())
            }
        }
    }

    pub fn load(r: &mut impl Read) -> Result<Self, HashError> {
        match binio::read_u8(r)? {
            0 => Ok(Hasher::Trained(HashNet::load(r)?)),
            1 => {
                let dim = binio::read_u64(r)? as usize;
                let bits = binio::read_u64(r)? as usize;
                let seed = binio::read_u64(r)?;
                Ok(Hasher::Random(RandomHyperplanes::new(dim, bits, seed)))
            }
            t => Err(HashError::Format(format!("unknown hasher tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashTable {
    /// Code positions read by this table, ascending.
    pub positions: Vec<usize>,
    pub buckets: BTreeMap<u64, Vec<String>>,
}

impl HashTable {
    pub fn bucket_of(&self, code: &HashCode) -> u64 {
        self.positions
            .iter()
            .fold(0u64, |acc, &p| (acc << 1) | u64::from(code.0[p] > 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashIndex {
    pub bits: usize,
    pub bits_per_table: usize,
    pub seed: u64,
    pub tables: Vec<HashTable>,
    pub size: usize,
}

impl HashIndex {
    /// Places every id in one bucket per table. Ids keep input order inside
    /// a bucket.
    pub fn build(codes: &[(String, HashCode)], tables: usize, bits_per_table: usize, seed: u64) -> Result<Self, HashError> {
        let r = codes.first().map_or(bits_per_table, |(_, c)| c.len());
        if bits_per_table > r {
            return Err(HashError::TooManyBits { l: bits_per_table, r });
        }
        if bits_per_table > 63 {
            return Err(HashError::TooManyBits { l: bits_per_table, r: 63 });
        }
        let mut rng = component_rng(seed, "hashing.tables");
        let mut out = Vec::with_capacity(tables);
        for _ in 0..tables {
            let mut positions = sample(&mut rng, r, bits_per_table).into_vec();
            positions.sort_unstable();
            let mut table = HashTable {
                positions,
                buckets: BTreeMap::new(),
            };
            for (id, code) in codes {
                if code.len() != r {
                    return Err(HashError::Dimension {
                        got: code.len(),
                        expected: r,
                    });
                }
                table.buckets.entry(table.bucket_of(code)).or_default().push(id.clone());
            }
            out.push(table);
        }
        Ok(Self {
            bits: r,
            bits_per_table,
            seed,
            tables: out,
            size: codes.len(),
        })
    }

    /// Union of the query's bucket across tables, deduplicated and sorted.
    pub fn candidates(&self, code: &HashCode) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for t in &self.tables {
            if let Some(ids) = t.buckets.get(&t.bucket_of(code)) {
                out.extend(ids.iter().cloned());
            }
        }
        out
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        binio::write_magic(w, b"CTESHIDX", 1)?;
        for v in [self.bits, self.tables.len(), self.bits_per_table, self.size] {
            binio::write_u64(w, v as u64)?;
        }
        binio::write_u64(w, self.seed)?;
        for t in &self.tables {
            let pos: Vec<u32> = t.positions.iter().map(|&p| p as u32).collect();
            binio::write_u32s(w, &pos)?;
            binio::write_u64(w, t.buckets.len() as u64)?;
            for (b, ids) in &t.buckets {
                binio::write_u64(w, *b)?;
                binio::write_u64(w, ids.len() as u64)?;
                for id in ids {
                    binio::write_str(w, id)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self, HashError> {
        binio::read_magic(r, b"CTESHIDX")?;
        let bits = binio::read_u64(r)? as usize;
        let m = binio::read_u64(r)? as usize;
        let bits_per_table = binio::read_u64(r)? as usize;
        let size = binio::read_u64(r)? as usize;
        let seed = binio::read_u64(r)?;
        let mut tables = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let positions: Vec<usize> = binio::read_u32s(r)?.into_iter().map(|p| p as usize).collect();
            if positions.len() != bits_per_table || positions.iter().any(|&p| p >= bits) {
                return Err(HashError::Format("bit positions out of range".into()));
            }
            let nb = binio::read_u64(r)?;
            let mut buckets = BTreeMap::new();
            for _ in 0..nb {
                let b = binio::read_u64(r)?;
                let n = binio::read_u64(r)?;
                let ids = (0..n).map(|_| binio::read_str(r)).collect::<Result<Vec<_>, _>>()?;
                buckets.insert(b, ids);
            }
            tables.push(HashTable { positions, buckets });
        }
        Ok(Self {
            bits,
            bits_per_table,
            seed,
            tables,
            size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = crate::relevance::l2(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn cloud(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| unit((0..p).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn sign_tie_rule() {
        assert_eq!(HashCode::from_logits(&[0.3, -2.0, 1e-9]).0, vec![1, -1, 1]);
        assert_eq!(HashCode::from_logits(&[0.0, -0.0]).0, vec![1, 1]);
        assert_eq!(HashCode::from_logits(&[1.0, 2.0]).0, vec![1, 1]);
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let vs = cloud(3, 5, 1);
        let mut net = HashNet::init(&vs, &HashConfig::new(2)).unwrap();
        let [_, _, (o2, h, r), (o3, _, _)] = net.split();
        net.psi.iter_mut().for_each(|v| *v = 0.0);
        net.psi[o3] = 0.7;
        net.psi[o3 + 1] = -0.2;
        assert_eq!((h, r), (2, 2));
        assert!(o2 < o3);
        assert_eq!(net.logits(&vs[0]), vec![0.7, -0.2]);
        assert_eq!(net.code(&vs[1]).0, vec![1, -1]);
    }

    #[test]
    fn loss_terms_on_constructed_codes() {
        let tape = Tape::new();
        let etas = [0.4, 0.3, 0.3];
        // balanced and saturated: half +1, half -1 per row
        let z = tape.constant(Tensor::new(2, 4, vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0]));
        let [b, q, _] = hash_loss_terms(z, etas);
        assert!(b.item().abs() < 1e-12);
        assert!(q.item().abs() < 1e-12);
        let sat = tape.constant(Tensor::new(1, 3, vec![50f64.tanh(), (-50f64).tanh(), 50f64.tanh()]));
        assert!(hash_loss_terms(sat, etas)[1].item() < 1e-12);
        let pair = tape.constant(Tensor::new(1, 2, vec![1.0, -1.0]));
        assert!((hash_loss_terms(pair, etas)[2].item() - 2.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn decorrelation_matches_pair_enumeration() {
        let mut r = rng(3);
        let vals: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(3, 5, vals.clone()));
        let got = hash_loss_terms(z, [0.0, 0.0, 1.0])[2].item();
        let mut s = 0.0;
        for n in 0..3 {
            for i in 0..5 {
                for j in i + 1..5 {
                    s += vals[n * 5 + i] * vals[n * 5 + j];
                }
            }
        }
        assert!((got - 2.0 * s.abs() / 10.0).abs() < 1e-12);
    }

    #[test]
    fn training_lowers_loss() {
        let vs = cloud(200, 12, 4);
        let cfg = HashConfig {
            epochs: 150,
            ..HashConfig::new(8)
        };
        let (net, report) = train_hash_net(&vs, &cfg).unwrap();
        assert!(report.losses[report.best_epoch].total <= report.losses[0].total);
        let first = report.losses[0];
        let best = report.losses[report.best_epoch];
        assert!(best.total < first.total, "{first:?} {best:?}");
        let (again, _) = train_hash_net(&vs, &cfg).unwrap();
        assert_eq!(net, again);
        let (zero, _) = train_hash_net(&vs, &HashConfig { epochs: 0, ..cfg.clone() }).unwrap();
        assert_eq!(zero, HashNet::init(&vs, &cfg).unwrap());
    }

    #[test]
    fn hyperplane_antisymmetry() {
        let h = RandomHyperplanes::new(6, 32, 9);
        let v = cloud(1, 6, 5).remove(0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let (a, b) = (h.code(&v), h.code(&neg));
        assert_eq!(a.hamming(&b), 32);
        assert_eq!(h.code(&v), a);
    }

    #[test]
    fn hyperplane_collisions_follow_angle_law() {
        let h = RandomHyperplanes::new(2, 10_000, 2);
        let a = h.code(&[1.0, 0.0]);
        let b = h.code(&[0.0, 1.0]);
        let agree = 1.0 - a.hamming(&b) as f64 / 10_000.0;
        // 1 - angle/pi = 0.5, binomial std = 0.005
        assert!((agree - 0.5).abs() < 0.02, "{agree}");
    }

    #[test]
    fn bucket_encoding_by_hand() {
        let table = HashTable {
            positions: vec![0, 2],
            buckets: BTreeMap::new(),
        };
        assert_eq!(table.bucket_of(&HashCode(vec![1, -1, 1, -1])), 3);
        assert_eq!(table.bucket_of(&HashCode(vec![1, -1, -1, -1])), 2);
        assert_eq!(table.bucket_of(&HashCode(vec![-1, 1, 1, 1])), 1);
    }

    #[test]
    fn index_partitions_and_lookup() {
        let mut r = rng(8);
        let codes: Vec<(String, HashCode)> = (0..100)
            .map(|i| {
                let c = (0..16).map(|_| if r.random_bool(0.5) { 1 } else { -1 }).collect();
                (format!("c{i:03}"), HashCode(c))
            })
            .collect();
        let idx = HashIndex::build(&codes, 10, 4, 7).unwrap();
        for t in &idx.tables {
            assert_eq!(t.buckets.values().map(Vec::len).sum::<usize>(), 100);
            assert_eq!(t.positions.len(), 4);
            assert!(t.positions.windows(2).all(|w| w[0] < w[1]));
        }
        for (id, code) in &codes {
            assert!(idx.candidates(code).contains(id));
        }
        assert!(matches!(
            HashIndex::build(&codes, 2, 17, 7),
            Err(HashError::TooManyBits { .. })
        ));
        let mut buf = Vec::new();
        idx.save(&mut buf).unwrap();
        assert_eq!(HashIndex::load(&mut buf.as_slice()).unwrap(), idx);
    }

    #[test]
    fn identical_codes_share_buckets() {
        let c = HashCode(vec![1, -1, 1, 1, -1, -1]);
        let codes = vec![("a".to_string(), c.clone()), ("b".to_string(), c.clone())];
        let idx = HashIndex::build(&codes, 5, 3, 1).unwrap();
        for t in &idx.tables {
            assert_eq!(t.buckets.len(), 1);
        }
        assert_eq!(idx.candidates(&c).len(), 2);
    }

    #[test]
    fn union_over_tables() {
        let mut t1 = HashTable {
            positions: vec![0],
            buckets: BTreeMap::new(),
        };
        let mut t2 = t1.clone();
        t1.buckets.insert(1, vec!["x".into()]);
        t2.buckets.insert(1, vec!["y".into()]);
        let idx = HashIndex {
            bits: 1,
            bits_per_table: 1,
            seed: 0,
            tables: vec![t1, t2],
            size: 2,
        };
        let got: Vec<String> = idx.candidates(&HashCode(vec![1])).into_iter().collect();
        assert_eq!(got, vec!["x", "y"]);
        assert!(idx.candidates(&HashCode(vec![-1])).is_empty());
    }

    #[test]
    fn hasher_roundtrip() {
        let vs = cloud(10, 4, 2);
        let net = HashNet::init(&vs, &HashConfig::new(3)).unwrap();
        for h in [Hasher::Trained(net), Hasher::Random(RandomHyperplanes::new(4, 3, 5))] {
            let mut buf = Vec::new();
            h.save(&mut buf).unwrap();
            assert_eq!(Hasher::load(&mut buf.as_slice()).unwrap(), h);
        }
    }
}
