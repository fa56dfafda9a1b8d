//! Expert-capacity theory: the cap probability p_δ, the capacity lower bound
//! and its erfc / exponential forms, the empirical capacity formula, and the
//! Monte Carlo and quadrature checks that back them up.
//!
//! p_δ counts both symmetric caps around a gating direction, i.e. the
//! probability that |cos(x, u)| ≥ δ for x uniform on S^{d-1}.

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;
use crate::router::{build_grap_weights, gate_scores, route_top1, GatingMatrix, RouterConfig, RoutingOutcome, TokenBatch};
use crate::special::{erfc, reg_incomplete_beta_complement};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityTheoryInput {
    pub delta: f64,
    pub dim: usize,
    pub n_experts: usize,
}

impl CapacityTheoryInput {
    pub fn new(delta: f64, dim: usize, n_experts: usize) -> Result<Self> {
        let inp = Self { delta, dim, n_experts };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Domain(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if self.dim < 2 {
            return Err(Error::Domain(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.n_experts < 1 {
            return Err(Error::Domain("n_experts must be >= 1".into()));
        }
        Ok(())
    }

    /// δ²d / (2 − δ²), the argument squared inside the erfc form.
    fn erfc_arg_sq(&self) -> f64 {
        let d2 = self.delta * self.delta;
        d2 * self.dim as f64 / (2.0 - d2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityTheoryResult {
    pub p_delta: f64,
    /// 1 / (n·p_δ); `inf` when p_δ underflows to zero.
    pub ec_min: f64,
    /// 1 / (n·erfc(√(δ²d/(2−δ²))))
    pub erfc_bound: f64,
    /// (1/n)·exp(δ²d/(2−δ²))
    pub exp_bound: f64,
    /// n·p_δ > 1: the probability reading of the bound is vacuous.
    pub degenerate: bool,
    /// p_δ = 0.
    pub infinite: bool,
    /// erfc_bound > exp_bound.
    pub erfc_exceeds_exp: bool,
}

/// 1 − I_{δ²}(1/2, (d−1)/2), evaluated as I_{1−δ²}((d−1)/2, 1/2) so the tail
/// keeps full relative precision.
pub fn p_delta(inp: &CapacityTheoryInput) -> Result<f64> {
    inp.validate()?;
    let x = inp.delta * inp.delta;
    reg_incomplete_beta_complement(x, 0.5, (inp.dim as f64 - 1.0) / 2.0)
}

pub fn ec_min(inp: &CapacityTheoryInput) -> Result<CapacityTheoryResult> {
    let p = p_delta(inp)?;
    let n = inp.n_experts as f64;
    let y2 = inp.erfc_arg_sq();
    let erfc_bound = 1.0 / (n * erfc(y2.sqrt()));
    let exp_bound = y2.exp() / n;
    Ok(CapacityTheoryResult {
        p_delta: p,
        ec_min: if p > 0.0 { 1.0 / (n * p) } else { f64::INFINITY },
        erfc_bound,
        exp_bound,
        degenerate: n * p > 1.0,
        infinite: p == 0.0,
        erfc_exceeds_exp: erfc_bound > exp_bound,
    })
}

/// b_s·c_f / (ep·n) before rounding up.
pub fn capacity_pre_ceiling(b_s: usize, c_f: f64, ep: usize, n: usize) -> Result<f64> {
    if ep == 0 || n == 0 {
        return Err(Error::Config("expert parallelism and expert count must be positive".into()));
    }
    if b_s == 0 || !(c_f > 0.0) || !c_f.is_finite() {
        return Err(Error::Config(format!(
            "batch size and capacity factor must be positive, got {b_s} and {c_f}"
        )));
    }
    Ok(b_s as f64 * c_f / (ep * n) as f64)
}

/// ⌈b_s·c_f / (ep·n)⌉
pub fn empirical_capacity(b_s: usize, c_f: f64, ep: usize, n: usize) -> Result<usize> {
    Ok(capacity_pre_ceiling(b_s, c_f, ep, n)?.ceil() as usize)
}

/// Evenly spaced grid from a `start:end:count` string.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid must look like start:end:count, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let end: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count == 0 {
        return Err(bad());
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    let step = (end - start) / (count - 1) as f64;
    Ok((0..count).map(|k| if k + 1 == count { end } else { start + step * k as f64 }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub delta: f64,
    pub p_delta: f64,
    pub ec_min: f64,
}

pub fn capacity_curve(dim: usize, n: usize, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if grid.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
        return Err(Error::Domain("capacity grid values must lie in (0, 1)".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("capacity grid must be non-decreasing".into()));
    }
    grid.iter()
        .map(|&delta| {
            let r = ec_min(&CapacityTheoryInput::new(delta, dim, n)?)?;
            Ok(CurvePoint { delta, p_delta: r.p_delta, ec_min: r.ec_min })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereSampleConfig {
    pub dim: usize,
    pub n_samples: usize,
    pub seed: u64,
}

const ROW_CHUNK: usize = 4096;
const MC_CHUNK: usize = 1 << 16;

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Normalized Gaussian rows. Rows are generated in fixed-size chunks with one
/// RNG stream per chunk, so the batch does not depend on thread count.
pub fn sample_unit_sphere(cfg: &SphereSampleConfig) -> Result<TokenBatch> {
    if cfg.dim < 2 {
        return Err(Error::Domain(format!("sphere sampling needs dim >= 2, got {}", cfg.dim)));
    }
    if cfg.n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let d = cfg.dim;
    let mut tokens = Array2::<f64>::zeros((cfg.n_samples, d));
    tokens
        .axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(chunk, mut block)| {
            let mut rng = chunk_rng(cfg.seed, chunk);
            for mut row in block.axis_iter_mut(Axis(0)) {
                loop {
                    row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                    let norm = row.dot(&row).sqrt();
                    if norm > 0.0 {
                        row.mapv_inplace(|v| v / norm);
                        break;
                    }
                }
            }
        });
    let mut batch = TokenBatch::new(tokens);
    batch.unit_norm = true;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_err: f64,
    pub hits: u64,
    pub n_samples: usize,
}

impl McEstimate {
    fn from_hits(hits: u64, n: usize) -> Self {
        let est = hits as f64 / n as f64;
        Self { estimate: est, std_err: (est * (1.0 - est) / n as f64).sqrt(), hits, n_samples: n }
    }

    /// |estimate − truth| in units of the binomial standard error under the
    /// true probability.
    pub fn z_score(&self, truth: f64) -> f64 {
        let sigma = (truth * (1.0 - truth) / self.n_samples as f64).sqrt();
        if sigma == 0.0 {
            return if self.estimate == truth { 0.0 } else { f64::INFINITY };
        }
        (self.estimate - truth).abs() / sigma
    }
}

fn check_mc(delta: f64, dim: usize, n_samples: usize) -> Result<()> {
    CapacityTheoryInput::new(delta, dim, 1)?;
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    Ok(())
}

/// Fraction of uniform unit vectors with |⟨x, u⟩| ≥ δ for a fixed unit axis u.
///
/// Takes u = e_0. A uniform x is g/‖g‖ for Gaussian g, and ‖g‖² splits into
/// g_0² plus an independent χ²(d−1) draw, so each sample costs two variates
/// regardless of d.
pub fn mc_p_delta(delta: f64, dim: usize, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_mc(delta, dim, n_samples)?;
    let rest = ChiSquared::new((dim - 1) as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let d2 = delta * delta;
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut h = 0u64;
            for _ in 0..len {
                let g0: f64 = StandardNormal.sample(&mut rng);
                let r2 = rest.sample(&mut rng);
                let a = g0 * g0;
                // |cos| >= δ  <=>  g0² >= δ²(g0² + r²)
                if a >= d2 * (a + r2) {
                    h += 1;
                }
            }
            h
        })
        .sum();
    Ok(McEstimate::from_hits(hits, n_samples))
}

/// Same estimate as [`mc_p_delta`] from full d-dimensional sphere samples.
pub fn mc_p_delta_full(delta: f64, dim: usize, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_mc(delta, dim, n_samples)?;
    let batch = sample_unit_sphere(&SphereSampleConfig { dim, n_samples, seed })?;
    let hits = batch.tokens.column(0).iter().filter(|v| v.abs() >= delta).count() as u64;
    Ok(McEstimate::from_hits(hits, n_samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

/// Compares the two-cap area fraction, integrated directly over the polar
/// angle, with 1 − I_{δ²}(1/2, (d−1)/2).
pub fn cap_area_identity_check(delta: f64, dim: usize) -> Result<CapIdentity> {
    if !(3..=64).contains(&dim) {
        return Err(Error::Domain(format!("cap identity check supports 3 <= dim <= 64, got {dim}")));
    }
    let inp = CapacityTheoryInput::new(delta, dim, 1)?;
    let power = (dim - 2) as i32;
    let density = |theta: f64| theta.sin().powi(power);
    let phi = delta.acos();
    let tol = 1e-12;
    let half = quadrature::integrate(density, 0.0, std::f64::consts::FRAC_PI_2, tol);
    let cap = quadrature::integrate(density, 0.0, phi, tol);
    // two caps over the whole sphere = cap / half-sphere
    let lhs = cap / half;
    let rhs = p_delta(&inp)?;
    Ok(CapIdentity { lhs, rhs, abs_err: (lhs - rhs).abs() })
}

/// Assignment fractions of GrAP top-1 routing over uniform sphere tokens,
/// with the binomial σ of each fraction under f_i = 1/n.
pub fn grap_assignment_mc(dim: usize, n: usize, n_tokens: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    let w = build_grap_weights(&RouterConfig::new(n, dim)?)?;
    let batch = sample_unit_sphere(&SphereSampleConfig { dim, n_samples: n_tokens, seed })?;
    let scores = gate_scores(&batch, &w, 0.0, seed)?;
    let out = route_top1(scores.view())?;
    let q = 1.0 / n as f64;
    Ok((out.f, (q * (1.0 - q) / n_tokens as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainPoint {
    pub dim: usize,
    pub delta: f64,
    pub n_experts: usize,
    pub exact: f64,
    pub erfc_form: f64,
    pub exp_form: f64,
    pub exact_ge_erfc: bool,
    pub erfc_gt_exp: bool,
}

/// Evaluates the bound chain on d ∈ {256,…,4096}, δ = k/√d for k ≥ 1, n ∈ {8, 16}.
pub fn theorem_chain_grid() -> Result<Vec<ChainPoint>> {
    let mut pts = Vec::new();
    for &dim in &[256usize, 512, 1024, 2048, 4096] {
        for &k in &[1.0, 1.25, 1.5, 2.0, 2.5, 3.0] {
            for &n in &[8usize, 16] {
                let delta = k / (dim as f64).sqrt();
                let r = ec_min(&CapacityTheoryInput::new(delta, dim, n)?)?;
                pts.push(ChainPoint {
                    dim,
                    delta,
                    n_experts: n,
                    exact: r.ec_min,
                    erfc_form: r.erfc_bound,
                    exp_form: r.exp_bound,
                    exact_ge_erfc: r.ec_min >= r.erfc_bound,
                    erfc_gt_exp: r.erfc_exceeds_exp,
                });
            }
        }
    }
    Ok(pts)
}

pub const HIST_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub sum: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        Self { counts: vec![0; HIST_BINS], sum: 0.0 }
    }
}

impl Histogram {
    pub fn add(&mut self, cos: f64) {
        let c = cos.clamp(-1.0, 1.0);
        let bin = (((c + 1.0) / 2.0 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        self.counts[bin] += 1;
        self.sum += c;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.sum / t as f64)
    }

    pub fn bin_edges(bin: usize) -> (f64, f64) {
        let w = 2.0 / HIST_BINS as f64;
        (-1.0 + w * bin as f64, -1.0 + w * (bin + 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineHistograms {
    /// pairs[i][j]: token-token cosines between tokens of expert i and
    /// expert j (i ≤ j; the lower triangle mirrors it).
    pub pairs: Vec<Vec<Histogram>>,
    /// Token to the gating row of its own expert.
    pub routed: Histogram,
    /// Token to the gating rows of every other expert.
    pub non_routed: Histogram,
}

impl CosineHistograms {
    fn mean_over(&self, diagonal: bool) -> Option<f64> {
        let (mut sum, mut count) = (0.0, 0u64);
        for (i, row) in self.pairs.iter().enumerate() {
            for (j, h) in row.iter().enumerate() {
                if j < i || (i == j) != diagonal {
                    continue;
                }
                sum += h.sum;
                count += h.total();
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    pub fn mean_diagonal(&self) -> Option<f64> {
        self.mean_over(true)
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        self.mean_over(false)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "expert_i", "expert_j", "bin_lo", "bin_hi", "count"])?;
        let mut emit = |kind: &str, i: String, j: String, h: &Histogram| -> Result<()> {
            for (b, &c) in h.counts.iter().enumerate() {
                let (lo, hi) = Histogram::bin_edges(b);
                w.write_record([kind, &i, &j, &lo.to_string(), &hi.to_string(), &c.to_string()])?;
            }
            Ok(())
        };
        for (i, row) in self.pairs.iter().enumerate() {
            for (j, h) in row.iter().enumerate().skip(i) {
                emit("token_pair", i.to_string(), j.to_string(), h)?;
            }
        }
        emit("routed_weight", String::new(), String::new(), &self.routed)?;
        emit("non_routed_weight", String::new(), String::new(), &self.non_routed)?;
        w.flush()?;
        Ok(())
    }
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let den = (a.dot(&a) * b.dot(&b)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        a.dot(&b) / den
    }
}

/// Cosine-similarity histograms (64 bins over [−1, 1]). At most
/// `max_per_expert` tokens of each expert enter the pairwise histograms.
pub fn cosine_histograms(
    tokens: &TokenBatch,
    outcome: &RoutingOutcome,
    w: &GatingMatrix,
    max_per_expert: usize,
) -> Result<CosineHistograms> {
    if tokens.len() != outcome.n_tokens() {
        return Err(Error::DimensionMismatch { expected: outcome.n_tokens(), got: tokens.len() });
    }
    if tokens.dim() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), got: tokens.dim() });
    }
    let n = w.n_experts();
    if outcome.n_experts() != n {
        return Err(Error::DimensionMismatch { expected: n, got: outcome.n_experts() });
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        if buckets[e].len() < max_per_expert {
            buckets[e].push(m);
        }
    }
    let rows: Vec<Histogram> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let mut h = Histogram::default();
            if j < i {
                return h;
            }
            for (ai, &a) in buckets[i].iter().enumerate() {
                let others = if i == j { &buckets[j][ai + 1..] } else { &buckets[j][..] };
                for &b in others {
                    h.add(cosine(tokens.tokens.row(a), tokens.tokens.row(b)));
                }
            }
            h
        })
        .collect();
    let mut pairs: Vec<Vec<Histogram>> = rows.chunks(n).map(|c| c.to_vec()).collect();
    for i in 0..n {
        for j in 0..i {
            pairs[i][j] = pairs[j][i].clone();
        }
    }
    let mut routed = Histogram::default();
    let mut non_routed = Histogram::default();
    for (m, &e) in outcome.expert_of_token.iter().enumerate() {
        for i in 0..n {
            let c = cosine(tokens.tokens.row(m), w.row(i));
            if i == e {
                routed.add(c);
            } else {
                non_routed.add(c);
            }
        }
    }
    Ok(CosineHistograms { pairs, routed, non_routed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_delta_boundaries() {
        assert_eq!(p_delta(&CapacityTheoryInput::new(0.0, 64, 4).unwrap()).unwrap(), 1.0);
        assert_eq!(p_delta(&CapacityTheoryInput::new(1.0, 64, 4).unwrap()).unwrap(), 0.0);
        assert!(CapacityTheoryInput::new(1.5, 64, 4).is_err());
        assert!(CapacityTheoryInput::new(0.5, 1, 4).is_err());
    }

    #[test]
    fn p_delta_d3_closed_form() {
        // On S^2 the height is uniform, so P(|z| >= δ) = 1 − δ.
        for &d in &[0.1, 0.5, 0.77] {
            let p = p_delta(&CapacityTheoryInput::new(d, 3, 1).unwrap()).unwrap();
            assert!((p - (1.0 - d)).abs() < 1e-14);
        }
    }

    #[test]
    fn ec_min_at_zero_delta() {
        let r = ec_min(&CapacityTheoryInput::new(0.0, 512, 16).unwrap()).unwrap();
        assert_eq!(r.ec_min, 1.0 / 16.0);
        assert!(r.degenerate);
        assert!(!r.infinite);
    }

    #[test]
    fn ec_min_infinite_flag() {
        let r = ec_min(&CapacityTheoryInput::new(1.0, 512, 16).unwrap()).unwrap();
        assert!(r.infinite);
        assert!(r.ec_min.is_infinite());
    }

    #[test]
    fn empirical_capacity_cases() {
        assert_eq!(empirical_capacity(32, 1.0, 16, 16).unwrap(), 1);
        assert_eq!(empirical_capacity(256, 1.25, 16, 16).unwrap(), 2);
        assert!(empirical_capacity(32, 1.0, 0, 16).is_err());
        assert!(empirical_capacity(32, 1.0, 16, 0).is_err());
        assert!(empirical_capacity(32, 0.0, 16, 16).is_err());
        let base = capacity_pre_ceiling(100, 1.0, 2, 8).unwrap();
        let scaled = capacity_pre_ceiling(100, 2.5, 2, 8).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.01:0.5:50").unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 0.01);
        assert_eq!(g[49], 0.5);
        assert!(parse_grid("0.1:0.2").is_err());
        assert!(parse_grid("a:b:3").is_err());
        assert!(parse_grid("0.1:0.2:0").is_err());
    }

    #[test]
    fn curve_is_monotone_and_has_limit() {
        let grid = parse_grid("0.001:0.3:40").unwrap();
        let curve = capacity_curve(512, 16, &grid).unwrap();
        assert!(curve.windows(2).all(|w| w[0].ec_min <= w[1].ec_min));
        let tiny = capacity_curve(512, 16, &[1e-9]).unwrap();
        assert!((tiny[0].ec_min - 1.0 / 16.0).abs() < 1e-6);
        assert!(capacity_curve(512, 16, &[0.3, 0.2]).is_err());
        assert!(capacity_curve(512, 16, &[0.0]).is_err());
    }

    #[test]
    fn sphere_samples_are_unit_and_deterministic() {
        let cfg = SphereSampleConfig { dim: 5, n_samples: 5000, seed: 4 };
        let a = sample_unit_sphere(&cfg).unwrap();
        assert!(a.unit_norm && a.check_unit_norm());
        assert_eq!(a, sample_unit_sphere(&cfg).unwrap());
        assert!(sample_unit_sphere(&SphereSampleConfig { dim: 1, n_samples: 3, seed: 0 }).is_err());
    }

    #[test]
    fn mc_zero_delta_is_exact() {
        assert_eq!(mc_p_delta(0.0, 64, 1000, 1).unwrap().estimate, 1.0);
        assert_eq!(mc_p_delta_full(0.0, 64, 1000, 1).unwrap().estimate, 1.0);
    }

    #[test]
    fn cap_identity_endpoints() {
        let a = cap_area_identity_check(0.0, 7).unwrap();
        assert!((a.lhs - 1.0).abs() < 1e-9 && a.rhs == 1.0);
        let b = cap_area_identity_check(1.0, 7).unwrap();
        assert!(b.lhs.abs() < 1e-12 && b.rhs == 0.0);
        let c = cap_area_identity_check(0.5, 3).unwrap();
        assert!((c.lhs - 0.5).abs() < 1e-9 && (c.rhs - 0.5).abs() < 1e-14);
        assert!(cap_area_identity_check(0.5, 2).is_err());
        assert!(cap_area_identity_check(0.5, 65).is_err());
    }

    #[test]
    fn histogram_binning() {
        let mut h = Histogram::default();
        h.add(1.0);
        h.add(-1.0);
        h.add(0.0);
        assert_eq!(h.counts[HIST_BINS - 1], 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[HIST_BINS / 2], 1);
        assert_eq!(h.mean(), Some(0.0));
        assert_eq!(Histogram::default().mean(), None);
    }

    #[test]
    fn histograms_for_tokens_on_gating_rows() {
        let cfg = RouterConfig::new(4, 8).unwrap();
        let w = build_grap_weights(&cfg).unwrap();
        // two copies of each gating row
        let mut tokens = Array2::zeros((8, 8));
        for m in 0..8 {
            tokens.row_mut(m).assign(&w.row(m % 4));
        }
        let batch = TokenBatch::new(tokens);
        let out = route_top1(gate_scores(&batch, &w, 0.0, 0).unwrap().view()).unwrap();
        let h = cosine_histograms(&batch, &out, &w, 100).unwrap();
        for i in 0..4 {
            assert_eq!(h.pairs[i][i].total(), 1);
            assert_eq!(h.pairs[i][i].counts[HIST_BINS - 1], 1);
        }
        assert_eq!(h.routed.counts[HIST_BINS - 1], 8);
        assert_eq!(h.mean_diagonal(), Some(1.0));
        assert_eq!(h.mean_off_diagonal(), Some(0.0));
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let lines = String::from_utf8(buf).unwrap().lines().count();
        assert_eq!(lines, 1 + (10 + 2) * HIST_BINS);
    }

    #[test]
    fn histograms_empty_bucket() {
        let cfg = RouterConfig::new(2, 4).unwrap();
        let w = build_grap_weights(&cfg).unwrap();
        let batch = TokenBatch::new(ndarray::array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let out = route_top1(gate_scores(&batch, &w, 0.0, 0).unwrap().view()).unwrap();
        let h = cosine_histograms(&batch, &out, &w, 10).unwrap();
        assert_eq!(h.pairs[1][1].total(), 0);
        assert_eq!(h.pairs[0][1].total(), 0);
    }
}
