//! GrAP gating, scored top-1 routing with capacity enforcement, and the hash
//! and switch baseline routers.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterConfig {
    pub n_experts: usize,
    pub dim: usize,
    /// Std of the additive Gaussian gating noise; 0 disables it.
    pub noise_std: f64,
    pub capacity_factor: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl RouterConfig {
    pub fn new(n_experts: usize, dim: usize) -> Result<Self> {
        let cfg = Self {
            n_experts,
            dim,
            noise_std: 0.0,
            capacity_factor: 1.0,
            tie_break: TieBreak::LowestIndex,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "n_experts ({}) and dim ({}) must be positive",
                self.n_experts, self.dim
            )));
        }
        if self.dim % self.n_experts != 0 {
            return Err(Error::Config(format!(
                "dim {} is not a multiple of n_experts {}",
                self.dim, self.n_experts
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.capacity_factor > 0.0) || !self.capacity_factor.is_finite() {
            return Err(Error::Config(format!(
                "capacity_factor must be > 0, got {}",
                self.capacity_factor
            )));
        }
        Ok(())
    }
}

/// Fixed n×d gating weights. Rows are the per-expert directions ω_i.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingMatrix {
    pub weights: Array2<f64>,
}

impl GatingMatrix {
    pub fn n_experts(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.weights.row(i)
    }
}

/// Grouped-average-pooling weights: row i averages coordinate block i.
pub fn build_grap_weights(cfg: &RouterConfig) -> Result<GatingMatrix> {
    cfg.validate()?;
    let (n, d) = (cfg.n_experts, cfg.dim);
    let block = d / n;
    let value = n as f64 / d as f64;
    let mut weights = Array2::zeros((n, d));
    for i in 0..n {
        for j in i * block..(i + 1) * block {
            weights[[i, j]] = value;
        }
    }
    Ok(GatingMatrix { weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Array2<f64>,
    pub token_ids: Vec<u64>,
    pub labels: Option<Vec<usize>>,
    /// Set when every row is known to have unit Euclidean norm.
    pub unit_norm: bool,
}

impl TokenBatch {
    pub fn new(tokens: Array2<f64>) -> Self {
        let token_ids = (0..tokens.nrows() as u64).collect();
        Self { tokens, token_ids, labels: None, unit_norm: false }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Checks the unit-norm flag against the data (tolerance 1e-9).
    pub fn check_unit_norm(&self) -> bool {
        self.tokens
            .axis_iter(Axis(0))
            .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome {
    pub expert_of_token: Vec<usize>,
    pub gate_value: Vec<f64>,
    pub dropped: Vec<bool>,
    /// Fraction of tokens assigned to each expert, counted before drops.
    pub f: Vec<f64>,
    /// Mean routing probability per expert.
    pub p: Vec<f64>,
}

impl RoutingOutcome {
    pub fn n_experts(&self) -> usize {
        self.f.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.expert_of_token.len()
    }

    /// Tokens assigned to each expert, ignoring drops.
    pub fn assigned_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for &e in &self.expert_of_token {
            counts[e] += 1;
        }
        counts
    }

    /// Tokens each expert actually executes.
    pub fn served_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for (&e, &d) in self.expert_of_token.iter().zip(&self.dropped) {
            if !d {
                counts[e] += 1;
            }
        }
        counts
    }
}

/// Derives the noise sample for one (token, expert) pair so that results do
/// not depend on evaluation order.
pub fn pair_noise(seed: u64, token: usize, expert: usize) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(token as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(expert as u64).to_le_bytes());
    key[24..].copy_from_slice(b"gatenois");
    let mut rng = ChaCha8Rng::from_seed(key);
    StandardNormal.sample(&mut rng)
}

/// ReLU(ω_i · x_m + ε_{m,i}) for every token and expert.
pub fn gate_scores(
    x: &TokenBatch,
    w: &GatingMatrix,
    noise_std: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    if x.dim() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), got: x.dim() });
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut scores = x.tokens.dot(&w.weights.t());
    if noise_std > 0.0 {
        for ((m, i), s) in scores.indexed_iter_mut() {
            *s += noise_std * pair_noise(seed, m, i);
        }
    }
    scores.mapv_inplace(|v| v.max(0.0));
    Ok(scores)
}

pub fn softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 routing over a T×n score matrix (no capacity applied).
pub fn route_top1(scores: ArrayView2<'_, f64>) -> Result<RoutingOutcome> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("routing scores".into()));
    }
    let (t, n) = scores.dim();
    if n == 0 {
        return Err(Error::Config("score matrix has no expert columns".into()));
    }
    let mut expert_of_token = Vec::with_capacity(t);
    let mut gate_value = Vec::with_capacity(t);
    let mut p = vec![0.0; n];
    for row in scores.axis_iter(Axis(0)) {
        let probs = softmax(row);
        let e = argmax(&probs);
        expert_of_token.push(e);
        gate_value.push(probs[e]);
        for (acc, q) in p.iter_mut().zip(&probs) {
            *acc += q;
        }
    }
    let f = fractions(&expert_of_token, n);
    if t > 0 {
        p.iter_mut().for_each(|v| *v /= t as f64);
    }
    Ok(RoutingOutcome { expert_of_token, gate_value, dropped: vec![false; t], f, p })
}

fn fractions(expert_of_token: &[usize], n: usize) -> Vec<f64> {
    let mut f = vec![0.0; n];
    for &e in expert_of_token {
        f[e] += 1.0;
    }
    let t = expert_of_token.len();
    if t > 0 {
        f.iter_mut().for_each(|v| *v /= t as f64);
    }
    f
}

/// Marks tokens beyond the first `cap` per expert (in batch order) as dropped.
/// `f` and `p` are left untouched.
pub fn apply_capacity(outcome: &RoutingOutcome, cap: usize) -> Result<RoutingOutcome> {
    if cap < 1 {
        return Err(Error::Config("expert capacity must be at least 1".into()));
    }
    let mut out = outcome.clone();
    let mut used = vec![0usize; outcome.n_experts()];
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        if outcome.dropped[m] {
            continue;
        }
        if used[e] < cap {
            used[e] += 1;
        } else {
            out.dropped[m] = true;
        }
    }
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64 over the little-endian bytes of the id.
pub fn fnv1a64(id: u64) -> u64 {
    id.to_le_bytes().iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn hash_route(token_ids: &[u64], n: usize) -> Result<RoutingOutcome> {
    if n == 0 {
        return Err(Error::Config("hash routing needs at least one expert".into()));
    }
    let expert_of_token: Vec<usize> =
        token_ids.iter().map(|&id| (fnv1a64(id) % n as u64) as usize).collect();
    let t = token_ids.len();
    let f = fractions(&expert_of_token, n);
    Ok(RoutingOutcome {
        gate_value: vec![1.0; t],
        dropped: vec![false; t],
        p: f.clone(),
        f,
        expert_of_token,
    })
}

/// Switch-style routing: softmax over raw ω_i·x_m of a dense learnable matrix.
pub fn switch_route(x: &TokenBatch, learnable: ArrayView2<'_, f64>) -> Result<RoutingOutcome> {
    if learnable.ncols() != x.dim() {
        return Err(Error::DimensionMismatch { expected: learnable.ncols(), got: x.dim() });
    }
    if learnable.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("switch gating matrix".into()));
    }
    let scores = x.tokens.dot(&learnable.t());
    route_top1(scores.view())
}
