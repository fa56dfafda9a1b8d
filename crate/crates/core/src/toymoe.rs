//! A small trainable MoE layer over synthetic clustered tokens.
//!
//! Each expert is a GeLU FFN. The layer output for a served token is
//! `gate · W_out · GeLU(W_in · x)`; dropped tokens pass through unchanged. A
//! linear head classifies the output into cluster labels, which supplies the
//! cross-entropy term of the task loss.
//!
//! Three routers are supported. `Hash` is fixed. `Switch` trains a dense
//! gating matrix. `Loc` keeps the GrAP gating fixed and trains a d×d
//! projection applied to tokens before gating, which is where the auxiliary
//! and locality losses act.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::capacity::empirical_capacity;
use crate::commsim::locality_fraction;
use crate::error::{Error, Result};
use crate::losses::{
    aux_loss, cross_entropy, cross_entropy_grad, grad_check, locality_loss, locality_loss_grad,
    make_local_target, softmax_backward, task_loss, ExpertDistribution, GradCheckReport, LossConfig,
    TaskLoss,
};
use crate::router::{
    apply_capacity, argmax, build_grap_weights, hash_route, softmax, GatingMatrix, RouterConfig,
    RoutingOutcome, TokenBatch,
};
use crate::special::std_normal_cdf;
use crate::topology::{ClusterTopology, ExpertPlacement};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// x·Φ(x) with the exact normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Hash,
    Switch,
    Loc,
}

impl RouterKind {
    pub const ALL: [RouterKind; 3] = [RouterKind::Hash, RouterKind::Switch, RouterKind::Loc];

    pub fn as_str(&self) -> &'static str {
        match self {
            RouterKind::Hash => "hash",
            RouterKind::Switch => "switch",
            RouterKind::Loc => "loc",
        }
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(RouterKind::Hash),
            "switch" => Ok(RouterKind::Switch),
            "loc" => Ok(RouterKind::Loc),
            other => Err(Error::Config(format!("unknown router {other:?} (hash, switch, loc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// h×d
    pub w_in: Array2<f64>,
    /// d×h
    pub w_out: Array2<f64>,
}

impl ExpertParams {
    pub fn random<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let in_std = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let out_std = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("positive std");
        Self {
            w_in: Array2::from_shape_simple_fn((hidden, dim), || in_std.sample(rng)),
            w_out: Array2::from_shape_simple_fn((dim, hidden), || out_std.sample(rng)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.nrows()
    }

    /// W_out·GeLU(W_in·x)
    pub fn ffn(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.w_out.dot(&self.w_in.dot(&x).mapv(gelu))
    }

    /// Multiply-adds of one forward pass, counted as 2 FLOPs each, plus the
    /// activation and the gate scaling.
    pub fn flops_per_token(&self) -> u64 {
        let (d, h) = (self.dim() as u64, self.hidden() as u64);
        2 * h * d + h + 2 * d * h + d
    }
}

/// Routing state of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    Hash { n_experts: usize },
    /// n×d learnable gating, no ReLU.
    Switch { weights: Array2<f64> },
    /// Fixed GrAP gating over `projection · x`.
    Loc { grap: GatingMatrix, projection: Array2<f64> },
}

impl Router {
    pub fn n_experts(&self) -> usize {
        match self {
            Router::Hash { n_experts } => *n_experts,
            Router::Switch { weights } => weights.nrows(),
            Router::Loc { grap, .. } => grap.n_experts(),
        }
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            Router::Hash { .. } => RouterKind::Hash,
            Router::Switch { .. } => RouterKind::Switch,
            Router::Loc { .. } => RouterKind::Loc,
        }
    }
}

/// Per-token routing probabilities plus the intermediates needed for backprop.
struct Gating {
    probs: Array2<f64>,
    /// Pre-ReLU GrAP scores (Loc only).
    pre_relu: Option<Array2<f64>>,
}

fn gating(router: &Router, batch: &TokenBatch) -> Result<(RoutingOutcome, Gating)> {
    let x = &batch.tokens;
    let check_dim = |d: usize| {
        if d != x.ncols() {
            Err(Error::DimensionMismatch { expected: d, got: x.ncols() })
        } else {
            Ok(())
        }
    };
    let (scores, pre_relu) = match router {
        Router::Hash { n_experts } => {
            let outcome = hash_route(&batch.token_ids, *n_experts)?;
            let mut probs = Array2::zeros((batch.len(), *n_experts));
            for (m, &e) in outcome.expert_of_token.iter().enumerate() {
                probs[[m, e]] = 1.0;
            }
            return Ok((outcome, Gating { probs, pre_relu: None }));
        }
        Router::Switch { weights } => {
            check_dim(weights.ncols())?;
            (x.dot(&weights.t()), None)
        }
        Router::Loc { grap, projection } => {
            check_dim(projection.ncols())?;
            let z = x.dot(&projection.t());
            let a = z.dot(&grap.weights.t());
            (a.mapv(|v| v.max(0.0)), Some(a))
        }
    };
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("routing scores".into()));
    }
    let (t, n) = scores.dim();
    let mut probs = Array2::zeros((t, n));
    let mut expert_of_token = Vec::with_capacity(t);
    let mut gate_value = Vec::with_capacity(t);
    for (m, row) in scores.axis_iter(Axis(0)).enumerate() {
        let p = softmax(row);
        let e = argmax(&p);
        expert_of_token.push(e);
        gate_value.push(p[e]);
        probs.row_mut(m).assign(&ArrayView1::from(&p));
    }
    let mut f = vec![0.0; n];
    for &e in &expert_of_token {
        f[e] += 1.0 / t as f64;
    }
    let p = probs.mean_axis(Axis(0)).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let outcome = RoutingOutcome { expert_of_token, gate_value, dropped: vec![false; t], f, p };
    Ok((outcome, Gating { probs, pre_relu }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub outputs: Array2<f64>,
    pub outcome: RoutingOutcome,
    /// Expert FLOPs spent per served token.
    pub flops_per_served_token: Vec<u64>,
}

/// Forward pass of the MoE layer with top-1 routing and capacity `cap`.
pub fn moe_forward(
    batch: &TokenBatch,
    router: &Router,
    experts: &[ExpertParams],
    cap: usize,
) -> Result<MoeOutput> {
    if experts.len() != router.n_experts() {
        return Err(Error::DimensionMismatch { expected: router.n_experts(), got: experts.len() });
    }
    if let Some(e) = experts.iter().find(|e| e.dim() != batch.dim() || e.w_out.nrows() != batch.dim()) {
        return Err(Error::DimensionMismatch { expected: batch.dim(), got: e.dim() });
    }
    let (outcome, _) = gating(router, batch)?;
    let outcome = apply_capacity(&outcome, cap)?;
    let mut outputs = batch.tokens.clone();
    let mut flops = Vec::new();
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        if outcome.dropped[m] {
            continue;
        }
        let y = experts[e].ffn(batch.tokens.row(m)) * outcome.gate_value[m];
        outputs.row_mut(m).assign(&y);
        flops.push(experts[e].flops_per_token());
    }
    Ok(MoeOutput { outputs, outcome, flops_per_served_token: flops })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_clusters: usize,
    pub dim: usize,
    pub tokens_per_cluster: usize,
    /// Inverse per-coordinate noise variance.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self { n_clusters: 4, dim: 64, tokens_per_cluster: 1000, concentration: 10.0, seed: 7 }
    }
}

/// Unit-norm tokens scattered around uniformly drawn cluster centers.
/// Token m belongs to cluster `m % n_clusters`.
pub fn make_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<TokenBatch> {
    if cfg.n_clusters == 0 || cfg.dim < 2 || cfg.tokens_per_cluster == 0 {
        return Err(Error::Config("corpus needs clusters, dim >= 2 and tokens".into()));
    }
    if !(cfg.concentration > 0.0) {
        return Err(Error::Config(format!("concentration must be > 0, got {}", cfg.concentration)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let centers: Vec<Array1<f64>> = (0..cfg.n_clusters)
        .map(|_| {
            let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.dot(&v).sqrt();
            v / norm
        })
        .collect();
    let std = (1.0 / cfg.concentration).sqrt();
    let total = cfg.n_clusters * cfg.tokens_per_cluster;
    let mut tokens = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    for m in 0..total {
        let c = m % cfg.n_clusters;
        let mut row = centers[c].clone();
        if std.is_finite() && std > 0.0 {
            row.iter_mut().for_each(|v| *v += std * rng.sample::<f64, _>(StandardNormal));
        }
        let norm = row.dot(&row).sqrt();
        tokens.row_mut(m).assign(&(row / norm));
        labels.push(c);
    }
    let mut batch = TokenBatch::new(tokens);
    batch.labels = Some(labels);
    batch.unit_norm = true;
    Ok(batch)
}

/// Source device of each token: clusters are sharded by node
/// (`label % n_nodes`) and spread over that node's devices.
pub fn cluster_source_devices(labels: &[usize], n_clusters: usize, topo: &ClusterTopology) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            let node = c % topo.n_nodes;
            let slot = (m / n_clusters.max(1)) % topo.devices_per_node;
            node * topo.devices_per_node + slot
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub router: RouterKind,
    pub n_experts: usize,
    /// FFN width; 0 means 4·dim.
    pub hidden: usize,
    pub epochs: usize,
    /// Tokens per step; 0 means the whole corpus (full-batch descent).
    pub batch_size: usize,
    pub lr: f64,
    pub losses: LossConfig,
    pub capacity_factor: f64,
    pub switch_init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            router: RouterKind::Loc,
            n_experts: 16,
            hidden: 0,
            epochs: 50,
            batch_size: 0,
            lr: 1e-3,
            losses: LossConfig::default(),
            capacity_factor: 2.0,
            switch_init_std: 0.1,
            seed: 7,
        }
    }
}

/// All trainable state of the toy layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub router: Router,
    pub experts: Vec<ExpertParams>,
    /// classes×d classification head
    pub head: Array2<f64>,
}

impl ToyModel {
    pub fn new(cfg: &TrainConfig, dim: usize, n_classes: usize) -> Result<Self> {
        let hidden = if cfg.hidden == 0 { 4 * dim } else { cfg.hidden };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let experts = (0..cfg.n_experts).map(|_| ExpertParams::random(dim, hidden, &mut rng)).collect();
        let head_std = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let head = Array2::from_shape_simple_fn((n_classes, dim), || head_std.sample(&mut rng));
        let router = match cfg.router {
            RouterKind::Hash => Router::Hash { n_experts: cfg.n_experts },
            RouterKind::Switch => {
                let std = Normal::new(0.0, cfg.switch_init_std.max(0.0))
                    .map_err(|e| Error::Config(e.to_string()))?;
                Router::Switch {
                    weights: Array2::from_shape_simple_fn((cfg.n_experts, dim), || std.sample(&mut rng)),
                }
            }
            RouterKind::Loc => Router::Loc {
                grap: build_grap_weights(&RouterConfig::new(cfg.n_experts, dim)?)?,
                projection: Array2::eye(dim),
            },
        };
        Ok(Self { router, experts, head })
    }

    fn dim(&self) -> usize {
        self.head.ncols()
    }

    /// Number of trainable scalars.
    pub fn n_params(&self) -> usize {
        self.param_groups().iter().map(|g| g.len()).sum()
    }

    fn param_groups(&self) -> Vec<&Array2<f64>> {
        let mut groups = vec![&self.head];
        match &self.router {
            Router::Switch { weights } => groups.push(weights),
            Router::Loc { projection, .. } => groups.push(projection),
            Router::Hash { .. } => {}
        }
        for e in &self.experts {
            groups.push(&e.w_in);
            groups.push(&e.w_out);
        }
        groups
    }

    fn param_groups_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut groups = vec![&mut self.head];
        match &mut self.router {
            Router::Switch { weights } => groups.push(weights),
            Router::Loc { projection, .. } => groups.push(projection),
            Router::Hash { .. } => {}
        }
        for e in &mut self.experts {
            groups.push(&mut e.w_in);
            groups.push(&mut e.w_out);
        }
        groups
    }
}

/// Gradients laid out like [`ToyModel::param_groups`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub groups: Vec<Array2<f64>>,
}

/// Everything a training step needs beyond the model and the batch.
pub struct StepContext<'a> {
    pub losses: &'a LossConfig,
    pub capacity: usize,
    pub placement: &'a ExpertPlacement,
    pub topology: &'a ClusterTopology,
    /// Source device per token of the batch.
    pub source_device: &'a [usize],
    /// Local target per source node.
    pub local_targets: &'a [ExpertDistribution],
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub outcome: RoutingOutcome,
    pub loss: TaskLoss,
    pub locality_fraction: f64,
}

/// Locality loss with one current distribution per source node, weighted by
/// the node's token share. Returns the loss and ∂L/∂probs.
fn locality_term(
    probs: ArrayView2<'_, f64>,
    ctx: &StepContext<'_>,
) -> Result<(f64, Array2<f64>)> {
    let (t, n) = probs.dim();
    let mut grad = Array2::zeros((t, n));
    if ctx.losses.mu == 0.0 || t == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (node, target) in ctx.local_targets.iter().enumerate() {
        let members: Vec<usize> =
            (0..t).filter(|&m| ctx.topology.node_of(ctx.source_device[m]) == node).collect();
        if members.is_empty() {
            continue;
        }
        let mut dc = vec![0.0; n];
        for &m in &members {
            for (acc, &p) in dc.iter_mut().zip(probs.row(m)) {
                *acc += p / members.len() as f64;
            }
        }
        let weight = members.len() as f64 / t as f64;
        let current = ExpertDistribution { probs: dc.clone() };
        loss += weight * locality_loss(&current, target, ctx.losses.mu)?;
        // weight / |members| = 1 / t
        let g = locality_loss_grad(&dc, &target.probs, ctx.losses.mu);
        for &m in &members {
            for (i, gi) in g.iter().enumerate() {
                grad[[m, i]] += gi / t as f64;
            }
        }
    }
    Ok((loss, grad))
}

/// Forward and backward pass over one batch.
pub fn forward_backward(
    model: &ToyModel,
    batch: &TokenBatch,
    ctx: &StepContext<'_>,
    want_grad: bool,
) -> Result<(StepResult, Option<Gradients>)> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("training batch has no labels".into()))?;
    let (t, d) = batch.tokens.dim();
    let n = model.router.n_experts();
    let (raw, gate) = gating(&model.router, batch)?;
    let outcome = apply_capacity(&raw, ctx.capacity)?;

    // expert FFNs, grouped by expert
    let mut y = batch.tokens.clone();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        if !outcome.dropped[m] {
            members[e].push(m);
        }
    }
    struct ExpertCache {
        x: Array2<f64>,
        pre: Array2<f64>,
        act: Array2<f64>,
        out: Array2<f64>,
    }
    let mut caches: Vec<Option<ExpertCache>> = Vec::with_capacity(n);
    for (e, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            caches.push(None);
            continue;
        }
        let x = batch.tokens.select(Axis(0), idx);
        let pre = x.dot(&model.experts[e].w_in.t());
        let act = pre.mapv(gelu);
        let out = act.dot(&model.experts[e].w_out.t());
        for (k, &m) in idx.iter().enumerate() {
            y.row_mut(m).assign(&(&out.row(k) * outcome.gate_value[m]));
        }
        caches.push(Some(ExpertCache { x, pre, act, out }));
    }

    let logits = y.dot(&model.head.t());
    let l_cross = cross_entropy(logits.view(), labels)?;
    let l_aux = aux_loss(&outcome.f, &outcome.p, ctx.losses.alpha)?;
    let (l_loc, loc_grad) = locality_term(gate.probs.view(), ctx)?;
    let loss = task_loss(l_aux, l_loc, l_cross)?;
    let loc_frac = locality_fraction(&outcome, ctx.placement, ctx.topology, ctx.source_device)?;
    let result = StepResult { outcome, loss, locality_fraction: loc_frac };
    if !want_grad {
        return Ok((result, None));
    }
    let outcome = &result.outcome;

    let dlogits = cross_entropy_grad(logits.view(), labels)?;
    let d_head = dlogits.t().dot(&y);
    let dy = dlogits.dot(&model.head);

    let mut d_probs = loc_grad;
    let aux_coef: Vec<f64> =
        outcome.f.iter().map(|&fi| ctx.losses.alpha * n as f64 * fi / t as f64).collect();
    for mut row in d_probs.axis_iter_mut(Axis(0)) {
        for (g, c) in row.iter_mut().zip(&aux_coef) {
            *g += c;
        }
    }

    let mut expert_grads = Vec::with_capacity(2 * n);
    for (e, cache) in caches.iter().enumerate() {
        let params = &model.experts[e];
        let Some(c) = cache else {
            expert_grads.push(Array2::zeros(params.w_in.dim()));
            expert_grads.push(Array2::zeros(params.w_out.dim()));
            continue;
        };
        let idx = &members[e];
        let mut d_out = Array2::zeros(c.out.dim());
        for (k, &m) in idx.iter().enumerate() {
            let dy_m = dy.row(m);
            d_probs[[m, e]] += dy_m.dot(&c.out.row(k));
            d_out.row_mut(k).assign(&(&dy_m * outcome.gate_value[m]));
        }
        let d_w_out = d_out.t().dot(&c.act);
        let mut d_pre = d_out.dot(&params.w_out);
        d_pre.zip_mut_with(&c.pre, |g, &u| *g *= gelu_grad(u));
        let d_w_in = d_pre.t().dot(&c.x);
        expert_grads.push(d_w_in);
        expert_grads.push(d_w_out);
    }

    let mut groups = vec![d_head];
    match &model.router {
        Router::Hash { .. } => {}
        Router::Switch { .. } | Router::Loc { .. } => {
            let mut d_scores = Array2::zeros((t, n));
            for m in 0..t {
                let probs = gate.probs.row(m).to_vec();
                let dp = d_probs.row(m).to_vec();
                let ds = softmax_backward(&probs, &dp);
                d_scores.row_mut(m).assign(&ArrayView1::from(&ds));
            }
            match &model.router {
                Router::Switch { .. } => groups.push(d_scores.t().dot(&batch.tokens)),
                Router::Loc { grap, .. } => {
                    let pre = gate.pre_relu.as_ref().expect("loc gating keeps pre-activations");
                    d_scores.zip_mut_with(pre, |g, &a| {
                        if a <= 0.0 {
                            *g = 0.0
                        }
                    });
                    let dz = d_scores.dot(&grap.weights);
                    groups.push(dz.t().dot(&batch.tokens));
                }
                Router::Hash { .. } => unreachable!(),
            }
        }
    }
    groups.extend(expert_grads);
    debug_assert_eq!(d, model.dim());
    Ok((result, Some(Gradients { groups })))
}

fn apply_update(model: &mut ToyModel, grads: &Gradients, lr: f64) {
    for (p, g) in model.param_groups_mut().into_iter().zip(&grads.groups) {
        p.scaled_add(-lr, g);
    }
}

/// Checks the analytic gradient of the full task loss against central
/// differences on `samples` parameter coordinates drawn from the groups
/// that the probe batch actually touches.
pub fn check_training_gradients(
    model: &ToyModel,
    probe: &TokenBatch,
    ctx: &StepContext<'_>,
    samples: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<GradCheckReport> {
    let (res, grads) = forward_backward(model, probe, ctx, true)?;
    let grads = grads.expect("requested gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let served: Vec<usize> = res
        .outcome
        .expert_of_token
        .iter()
        .zip(&res.outcome.dropped)
        .filter(|(_, &d)| !d)
        .map(|(&e, _)| e)
        .collect();
    let router_groups = match model.router {
        Router::Hash { .. } => 1,
        _ => 2,
    };
    let mut candidate_groups: Vec<usize> = (0..router_groups).collect();
    for &e in &served {
        candidate_groups.push(router_groups + 2 * e);
        candidate_groups.push(router_groups + 2 * e + 1);
    }
    candidate_groups.sort_unstable();
    candidate_groups.dedup();
    let mut coords: Vec<(usize, (usize, usize))> = (0..samples)
        .map(|_| {
            let g = *candidate_groups.choose(&mut rng).expect("head group always present");
            let (r, c) = grads.groups[g].dim();
            (g, (rng.random_range(0..r), rng.random_range(0..c)))
        })
        .collect();
    coords.sort_unstable();
    coords.dedup();
    let analytic: Vec<f64> = coords.iter().map(|&(g, ix)| grads.groups[g][ix]).collect();
    let start: Vec<f64> = {
        let groups = model.param_groups();
        coords.iter().map(|&(g, ix)| groups[g][ix]).collect()
    };
    let loss_at = |values: &[f64]| -> f64 {
        let mut probe_model = model.clone();
        {
            let mut groups = probe_model.param_groups_mut();
            for (&(g, ix), &v) in coords.iter().zip(values) {
                groups[g][ix] = v;
            }
        }
        forward_backward(&probe_model, probe, ctx, false)
            .map(|(r, _)| r.loss.total)
            .unwrap_or(f64::NAN)
    };
    Ok(grad_check("training", loss_at, &analytic, &start, rel_tol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub router: RouterKind,
    /// Tokens assigned per expert (before capacity drops).
    pub counts: Vec<usize>,
    pub dropped: usize,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub loss: TaskLoss,
    pub l_cross_mean: f64,
    pub locality_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub records: Vec<TrainRecord>,
    pub model: ToyModel,
    /// Routing of the whole corpus under the final parameters.
    pub final_outcome: RoutingOutcome,
    pub grad_check: GradCheckReport,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Corpus plus cluster layout for a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub corpus: TokenBatch,
    pub n_classes: usize,
    pub topology: ClusterTopology,
    pub placement: ExpertPlacement,
    pub source_device: Vec<usize>,
}

impl TrainSetup {
    pub fn new(corpus_cfg: &SyntheticCorpusConfig, topology: ClusterTopology, n_experts: usize) -> Result<Self> {
        topology.validate()?;
        let corpus = make_synthetic_corpus(corpus_cfg)?;
        let labels = corpus.labels.as_ref().expect("synthetic corpus is labeled");
        let source_device = cluster_source_devices(labels, corpus_cfg.n_clusters, &topology);
        let placement = ExpertPlacement::blocked(n_experts, &topology);
        Ok(Self { corpus, n_classes: corpus_cfg.n_clusters, topology, placement, source_device })
    }

    fn slice(&self, range: std::ops::Range<usize>) -> (TokenBatch, Vec<usize>) {
        let c = &self.corpus;
        let batch = TokenBatch {
            tokens: c.tokens.slice(s![range.clone(), ..]).to_owned(),
            token_ids: c.token_ids[range.clone()].to_vec(),
            labels: c.labels.as_ref().map(|l| l[range.clone()].to_vec()),
            unit_norm: c.unit_norm,
        };
        (batch, self.source_device[range].to_vec())
    }
}

pub fn train(setup: &TrainSetup, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.losses.validate()?;
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    setup.placement.validate(&setup.topology)?;
    if setup.placement.n_experts() != cfg.n_experts {
        return Err(Error::Config(format!(
            "placement covers {} experts, config has {}",
            setup.placement.n_experts(),
            cfg.n_experts
        )));
    }
    let mut model = ToyModel::new(cfg, setup.corpus.dim(), setup.n_classes)?;
    let local_targets = (0..setup.topology.n_nodes)
        .map(|node| make_local_target(&setup.placement, node, cfg.losses.epsilon_smooth))
        .collect::<Result<Vec<_>>>()?;
    let total = setup.corpus.len();
    let batch_size = if cfg.batch_size == 0 { total } else { cfg.batch_size.min(total) };
    let steps = total.div_ceil(batch_size);
    let capacity = empirical_capacity(batch_size, cfg.capacity_factor, 1, cfg.n_experts)?;

    let (probe, probe_src) = setup.slice(0..total.min(4));
    let probe_cap = empirical_capacity(probe.len(), cfg.capacity_factor, 1, cfg.n_experts)?;
    let probe_ctx = StepContext {
        losses: &cfg.losses,
        capacity: probe_cap,
        placement: &setup.placement,
        topology: &setup.topology,
        source_device: &probe_src,
        local_targets: &local_targets,
    };
    let grad_report = check_training_gradients(&model, &probe, &probe_ctx, 64, cfg.seed, 1e-4)?;

    let mut records = Vec::with_capacity(cfg.epochs * steps);
    let mut aborted = None;
    'outer: for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let range = step * batch_size..((step + 1) * batch_size).min(total);
            let (batch, src) = setup.slice(range);
            let ctx = StepContext {
                losses: &cfg.losses,
                capacity,
                placement: &setup.placement,
                topology: &setup.topology,
                source_device: &src,
                local_targets: &local_targets,
            };
            let (res, grads) = match forward_backward(&model, &batch, &ctx, true) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => {
                    aborted = Some(format!("epoch {epoch} step {step}: non-finite {msg}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            records.push(TrainRecord {
                epoch,
                step,
                router: cfg.router,
                counts: res.outcome.assigned_counts(),
                dropped: res.outcome.dropped.iter().filter(|&&d| d).count(),
                f: res.outcome.f.clone(),
                p: res.outcome.p.clone(),
                loss: res.loss,
                l_cross_mean: res.loss.l_cross / batch.len() as f64,
                locality_fraction: res.locality_fraction,
            });
            apply_update(&mut model, grads.as_ref().expect("requested gradients"), cfg.lr);
        }
    }

    let (final_raw, _) = gating(&model.router, &setup.corpus)?;
    let final_outcome = apply_capacity(
        &final_raw,
        empirical_capacity(total, cfg.capacity_factor, 1, cfg.n_experts)?,
    )?;
    Ok(TrainRun { config: cfg.clone(), records, model, final_outcome, grad_check: grad_report, aborted })
}

/// Shannon entropy (nats) of the normalized counts.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum()
}

pub fn never_used_fraction(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&c| c == 0).count() as f64 / counts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub router: RouterKind,
    pub counts: Vec<usize>,
    pub entropy: f64,
    pub never_used: f64,
    pub locality_fraction: f64,
    pub l_task: f64,
}

/// Cumulative per-expert counts and summary metrics for every epoch.
pub fn epoch_summaries(records: &[TrainRecord]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    let mut local_weight = Vec::new();
    for r in records {
        let served: usize = r.counts.iter().sum::<usize>() - r.dropped;
        if out.last().map(|s| s.epoch) != Some(r.epoch) {
            out.push(EpochSummary {
                epoch: r.epoch,
                router: r.router,
                counts: vec![0; r.counts.len()],
                entropy: 0.0,
                never_used: 0.0,
                locality_fraction: 0.0,
                l_task: 0.0,
            });
            local_weight.push((0.0, 0usize));
        }
        let s = out.last_mut().expect("just pushed");
        for (acc, c) in s.counts.iter_mut().zip(&r.counts) {
            *acc += c;
        }
        s.l_task += r.loss.total;
        let w = local_weight.last_mut().expect("just pushed");
        w.0 += r.locality_fraction * served as f64;
        w.1 += served;
    }
    for (s, (num, den)) in out.iter_mut().zip(local_weight) {
        s.entropy = entropy(&s.counts);
        s.never_used = never_used_fraction(&s.counts);
        s.locality_fraction = if den == 0 { 1.0 } else { num / den as f64 };
    }
    out
}

/// One CSV row per training step.
pub fn assignment_report<W: std::io::Write>(records: &[TrainRecord], out: W) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::Config("no training records to report".into()));
    };
    let n = first.counts.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "step", "router"].iter().map(|s| s.to_string()).collect();
    header.extend((0..n).map(|i| format!("count_{i}")));
    header.extend(
        [
            "dropped",
            "entropy",
            "never_used",
            "locality_fraction",
            "l_aux",
            "l_loc",
            "l_cross",
            "l_cross_mean",
            "l_task",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.step.to_string(), r.router.to_string()];
        row.extend(r.counts.iter().map(|c| c.to_string()));
        row.extend([
            r.dropped.to_string(),
            entropy(&r.counts).to_string(),
            never_used_fraction(&r.counts).to_string(),
            r.locality_fraction.to_string(),
            r.loss.l_aux.to_string(),
            r.loss.l_loc.to_string(),
            r.loss.l_cross.to_string(),
            r.l_cross_mean.to_string(),
            r.loss.total.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
