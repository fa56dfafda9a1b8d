//! Load-balance, locality and cross-entropy losses with analytic gradients
//! and a central-difference checker.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::softmax;
use crate::topology::ExpertPlacement;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub mu: f64,
    pub epsilon_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.01, mu: 0.01, epsilon_smooth: 1e-3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Config("alpha and mu must be non-negative".into()));
        }
        if !(self.epsilon_smooth > 0.0 && self.epsilon_smooth < 1.0) {
            return Err(Error::Config(format!(
                "epsilon_smooth must lie in (0, 1), got {}",
                self.epsilon_smooth
            )));
        }
        Ok(())
    }
}

/// A probability vector over experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDistribution {
    pub probs: Vec<f64>,
}

impl ExpertDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty distribution".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Domain("distribution has negative or NaN entries".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("distribution sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_simplex(v: &[f64], name: &str, tol: f64) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Domain(format!("{name} has negative or NaN entries")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::Domain(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// α·n·Σ f_i·P_i
pub fn aux_loss(f: &[f64], p: &[f64], alpha: f64) -> Result<f64> {
    if f.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: f.len(), got: p.len() });
    }
    check_simplex(f, "f", 1e-6)?;
    check_simplex(p, "P", 1e-6)?;
    let n = f.len() as f64;
    Ok(alpha * n * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

/// ∂L_aux/∂P_i = α·n·f_i; f is held constant.
pub fn aux_loss_grad_p(f: &[f64], alpha: f64) -> Vec<f64> {
    let n = f.len() as f64;
    f.iter().map(|&fi| alpha * n * fi).collect()
}

/// Target distribution concentrated on the experts resident on `source_node`.
///
/// Local experts share `1 - eps`, remote experts share `eps`. Without any local
/// expert (or without any remote one) the target is uniform.
pub fn make_local_target(
    placement: &ExpertPlacement,
    source_node: usize,
    epsilon_smooth: f64,
) -> Result<ExpertDistribution> {
    let n = placement.n_experts();
    if n == 0 {
        return Err(Error::Config("placement has no experts".into()));
    }
    let local = (0..n).filter(|&e| placement.node_of(e) == source_node).count();
    if local == 0 || local == n {
        return Ok(ExpertDistribution::uniform(n));
    }
    let remote = n - local;
    let probs = (0..n)
        .map(|e| {
            if placement.node_of(e) == source_node {
                (1.0 - epsilon_smooth) / local as f64
            } else {
                epsilon_smooth / remote as f64
            }
        })
        .collect();
    Ok(ExpertDistribution { probs })
}

/// µ·KL(D_c ‖ D_l), with 0·ln(0/x) = 0.
pub fn locality_loss(
    current: &ExpertDistribution,
    local: &ExpertDistribution,
    mu: f64,
) -> Result<f64> {
    if current.len() != local.len() {
        return Err(Error::DimensionMismatch { expected: local.len(), got: current.len() });
    }
    let mut kl = 0.0;
    for (&c, &l) in current.probs.iter().zip(&local.probs) {
        if c == 0.0 {
            continue;
        }
        if l == 0.0 {
            return Err(Error::Domain(
                "target distribution is zero where the current distribution has mass".into(),
            ));
        }
        kl += c * (c / l).ln();
    }
    Ok(mu * kl.max(0.0))
}

/// ∂L_loc/∂D_c[i] = µ·(ln(D_c[i]/D_l[i]) + 1). Entries with D_c[i] = 0 use
/// the one-sided limit of the log term clamped at `ln(tiny)`.
pub fn locality_loss_grad(current: &[f64], local: &[f64], mu: f64) -> Vec<f64> {
    current
        .iter()
        .zip(local)
        .map(|(&c, &l)| mu * ((c.max(f64::MIN_POSITIVE) / l).ln() + 1.0))
        .collect()
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

fn log_softmax_at(row: ndarray::ArrayView1<'_, f64>, k: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[k] - lse
}

fn check_targets(logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<()> {
    if logits.nrows() != targets.len() {
        return Err(Error::DimensionMismatch { expected: logits.nrows(), got: targets.len() });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::Domain(format!(
            "target {bad} out of range for {} classes",
            logits.ncols()
        )));
    }
    Ok(())
}

/// Summed (not averaged) negative log-softmax at the target class.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets)?;
    Ok(logits
        .axis_iter(Axis(0))
        .zip(targets)
        .map(|(row, &t)| -log_softmax_at(row, t))
        .sum())
}

/// softmax(logits) − onehot(target), row by row.
pub fn cross_entropy_grad(logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<Array2<f64>> {
    check_targets(logits, targets)?;
    let mut grad = Array2::zeros(logits.dim());
    for (m, (row, &t)) in logits.axis_iter(Axis(0)).zip(targets).enumerate() {
        let probs = softmax(row);
        for (j, p) in probs.into_iter().enumerate() {
            grad[[m, j]] = p - if j == t { 1.0 } else { 0.0 };
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub l_aux: f64,
    pub l_loc: f64,
    pub l_cross: f64,
    pub total: f64,
}

pub fn task_loss(l_aux: f64, l_loc: f64, l_cross: f64) -> Result<TaskLoss> {
    for (name, v) in [("l_aux", l_aux), ("l_loc", l_loc), ("l_cross", l_cross)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(TaskLoss { l_aux, l_loc, l_cross, total: l_aux + l_loc + l_cross })
}

/// Absolute floor on the denominator of the relative error, so gradients
/// that vanish analytically are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub n_params: usize,
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `loss_fn` at `params`.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(loss_fn: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + step;
            let up = loss_fn(&probe);
            probe[k] = orig - step;
            let down = loss_fn(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares an analytic gradient against central differences (step 1e-5).
pub fn grad_check<F: Fn(&[f64]) -> f64>(
    name: &str,
    loss_fn: F,
    analytic: &[f64],
    params: &[f64],
    rel_tol: f64,
) -> GradCheckReport {
    let numeric = numeric_gradient(loss_fn, params, FD_STEP);
    let max_rel_err =
        analytic.iter().zip(&numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max);
    GradCheckReport {
        name: name.to_string(),
        n_params: params.len(),
        max_rel_err,
        rel_tol,
        passed: max_rel_err <= rel_tol && analytic.len() == numeric.len(),
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Gradient checks for the three losses at `points` random parameter
/// vectors each: aux w.r.t. P, locality w.r.t. the pre-softmax logits of D_c,
/// cross-entropy w.r.t. logits. `perturb` adds a bias to every analytic
/// gradient and exists to exercise the failure path.
pub fn grad_check_suite(seed: u64, points: usize, rel_tol: f64, perturb: f64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let mut worst = [0.0f64; 3];
    let mut sizes = [0usize; 3];
    for _ in 0..points {
        // aux
        let f = random_simplex(&mut rng, n);
        let p = random_simplex(&mut rng, n);
        let alpha = 0.01 + rng.random::<f64>();
        let analytic: Vec<f64> = aux_loss_grad_p(&f, alpha).iter().map(|g| g + perturb).collect();
        let r = grad_check(
            "aux",
            |q| alpha * n as f64 * f.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(),
            &analytic,
            &p,
            rel_tol,
        );
        worst[0] = worst[0].max(r.max_rel_err);
        sizes[0] += r.n_params;

        // locality through softmax logits
        let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let target = random_simplex(&mut rng, n);
        let mu = 0.01 + rng.random::<f64>();
        let dc = softmax(ndarray::ArrayView1::from(&logits));
        let g_dc = locality_loss_grad(&dc, &target, mu);
        let analytic: Vec<f64> =
            softmax_backward(&dc, &g_dc).iter().map(|g| g + perturb).collect();
        let r = grad_check(
            "locality",
            |z| {
                let dc = softmax(ndarray::ArrayView1::from(z));
                mu * dc.iter().zip(&target).map(|(c, l)| c * (c / l).ln()).sum::<f64>()
            },
            &analytic,
            &logits,
            rel_tol,
        );
        worst[1] = worst[1].max(r.max_rel_err);
        sizes[1] += r.n_params;

        // cross-entropy
        let (t, classes) = (4, 5);
        let logits: Vec<f64> = (0..t * classes).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..classes)).collect();
        let view = ArrayView2::from_shape((t, classes), &logits).expect("shape");
        let analytic: Vec<f64> = cross_entropy_grad(view, &targets)
            .expect("valid targets")
            .iter()
            .map(|g| g + perturb)
            .collect();
        let r = grad_check(
            "cross_entropy",
            |z| {
                let v = ArrayView2::from_shape((t, classes), z).expect("shape");
                cross_entropy(v, &targets).expect("valid targets")
            },
            &analytic,
            &logits,
            rel_tol,
        );
        worst[2] = worst[2].max(r.max_rel_err);
        sizes[2] += r.n_params;
    }
    ["aux", "locality", "cross_entropy"]
        .iter()
        .zip(worst.iter().zip(sizes))
        .map(|(name, (&max_rel_err, n_params))| GradCheckReport {
            name: name.to_string(),
            n_params,
            max_rel_err,
            rel_tol,
            passed: max_rel_err <= rel_tol,
        })
        .collect()
}
