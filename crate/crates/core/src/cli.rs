//! Command-line front end.
//!
//! Every subcommand resolves its parameters from flags, then an optional JSON
//! config file, then built-in defaults. The primary artifact goes to `--out`
//! (stdout when absent) and, for file output, a `<out>.meta.json` sidecar
//! records the tool version, seed and fully resolved config.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::capacity::{
    cap_area_identity_check, capacity_curve, cosine_histograms, ec_min, empirical_capacity,
    grap_assignment_mc, mc_p_delta, p_delta, parse_grid, sample_unit_sphere, theorem_chain_grid,
    CapacityTheoryInput, SphereSampleConfig,
};
use crate::commsim::{alltoall_cost, compare_strategies, groupwise_alltoall_cost, read_volume_csv, CostModel};
use crate::error::Error;
use crate::losses::{aux_loss, grad_check_suite, locality_loss, ExpertDistribution, LossConfig};
use crate::router::{
    apply_capacity, build_grap_weights, gate_scores, hash_route, route_top1, GatingMatrix, RouterConfig,
    RoutingOutcome, TokenBatch,
};
use crate::special::{erf, reg_incomplete_beta};
use crate::topology::{ClusterTopology, Defaults, ExpertPlacement};
use crate::toymoe::{
    assignment_report, cluster_source_devices, entropy, epoch_summaries, make_synthetic_corpus,
    never_used_fraction, train, RouterKind, SyntheticCorpusConfig, TrainConfig, TrainRun, TrainSetup,
};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "locmoe", version, about = "Locality-aware MoE routing: capacity theory, toy training and communication modeling")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output file; stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// JSON file with parameter values; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Capacity lower bound for a single query or a δ curve.
    Capacity(CapacityArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Route tokens and report assignment fractions.
    RouteSim(RouteSimArgs),
    /// Train the toy MoE layer and log per-step assignments.
    TrainToy(TrainToyArgs),
    /// Model dispatch communication for a volume matrix or a set of trained routers.
    CommSim(CommSimArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Capacity(_) => "capacity",
            Command::Verify(_) => "verify",
            Command::RouteSim(_) => "route-sim",
            Command::TrainToy(_) => "train-toy",
            Command::CommSim(_) => "comm-sim",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct CapacityArgs {
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    /// start:end:count
    #[arg(long)]
    pub grid: Option<String>,
    /// Also estimate p_δ by Monte Carlo with this many samples.
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    CapIdentity,
    PDelta,
    PDeltaMc,
    Lemma2,
    TheoremChain,
    Losses,
}

impl Suite {
    fn as_str(self) -> &'static str {
        match self {
            Suite::CapIdentity => "cap-identity",
            Suite::PDelta => "p-delta",
            Suite::PDeltaMc => "p-delta-mc",
            Suite::Lemma2 => "lemma2",
            Suite::TheoremChain => "theorem-chain",
            Suite::Losses => "losses",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub only: Option<Suite>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Bias added to analytic loss gradients (negative-path test hook).
    #[arg(long, hide = true)]
    pub perturb: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimRouter {
    Grap,
    Hash,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    Sphere,
    Clusters,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct RouteSimArgs {
    #[arg(long, value_enum)]
    pub router: Option<SimRouter>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long, value_enum)]
    pub corpus: Option<CorpusKind>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Std of the per-(token, expert) score noise.
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Apply the expert capacity for this factor; no dropping when omitted.
    #[arg(long)]
    pub capacity_factor: Option<f64>,
    /// Also write cosine histograms to this CSV file.
    #[arg(long)]
    pub histograms: Option<PathBuf>,
    /// Tokens per expert kept for the pairwise histograms.
    #[arg(long)]
    pub hist_max: Option<usize>,
}

fn parse_router_kind(s: &str) -> std::result::Result<RouterKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Corpus and training parameters shared by `train-toy` and `comm-sim`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ToyArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Smoothing mass of the local target on remote experts.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub tokens_per_cluster: Option<usize>,
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Tokens per step; 0 trains on the full corpus each step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub capacity_factor: Option<f64>,
    /// Expert FFN width; 0 means 4·dim.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct TrainToyArgs {
    #[arg(long, value_parser = parse_router_kind)]
    pub router: Option<RouterKind>,
    #[command(flatten)]
    #[serde(flatten)]
    pub toy: ToyArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct CommSimArgs {
    /// Topology JSON; the bundled defaults when omitted.
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Placement JSON; experts blocked over devices when omitted.
    #[arg(long)]
    pub placement: Option<PathBuf>,
    /// Headerless D×D byte matrix CSV, or `from-run` to train hash, switch and loc routers.
    #[arg(long)]
    pub volumes: Option<String>,
    #[arg(long)]
    pub tp_group: Option<usize>,
    #[arg(long)]
    pub token_bytes: Option<f64>,
    #[arg(long)]
    pub overlap_ratio: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub toy: ToyArgs,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Domain(_) | Error::DimensionMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<i32> {
    let file = match &cli.global.config {
        Some(path) => Some(load_config(path)?),
        None => None,
    };
    let file_seed = match &file {
        Some(v) => v.get("seed").map(|s| {
            s.as_u64().ok_or_else(|| usage(format!("config seed must be a non-negative integer, got {s}")))
        }),
        None => None,
    }
    .transpose()?;
    let seed = cli.global.seed.or(file_seed).unwrap_or(DEFAULT_SEED);
    let params = file.map(|mut v| {
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seed");
        }
        v
    });
    let sink = Sink { out: cli.global.out.clone(), force: cli.global.force };
    let name = cli.command.name();
    match cli.command {
        Command::Capacity(a) => cmd_capacity(merge(a, params)?, seed, &sink, name),
        Command::Verify(a) => cmd_verify(merge(a, params)?, seed, &sink, name),
        Command::RouteSim(a) => cmd_route_sim(merge(a, params)?, seed, &sink, name),
        Command::TrainToy(a) => cmd_train_toy(merge(a, params)?, seed, &sink, name),
        Command::CommSim(a) => cmd_comm_sim(merge(a, params)?, seed, &sink, name),
    }
}

fn load_config(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(usage(format!("config {} must hold a JSON object", path.display())));
    }
    Ok(v)
}

/// Overlays flag values on the config file values. Unknown config keys are
/// usage errors.
fn merge<A>(flags: A, file: Option<Value>) -> CliResult<A>
where
    A: Serialize + for<'de> Deserialize<'de> + Default,
{
    let Some(file) = file else { return Ok(flags) };
    let known = serde_json::to_value(A::default()).map_err(|e| CliError::Failure(e.to_string()))?;
    let known = known.as_object().cloned().unwrap_or_default();
    let mut merged = file.as_object().cloned().unwrap_or_default();
    if let Some(k) = merged.keys().find(|k| !known.contains_key(*k)) {
        return Err(usage(format!("unknown config key {k:?}")));
    }
    let flag_values = serde_json::to_value(flags).map_err(|e| CliError::Failure(e.to_string()))?;
    for (k, v) in flag_values.as_object().cloned().unwrap_or_default() {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("bad config value: {e}")))
}

struct Sink {
    out: Option<PathBuf>,
    force: bool,
}

impl Sink {
    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    fn check_writable(&self, path: &Path) -> CliResult<()> {
        if path.exists() && !self.force {
            return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
        }
        Ok(())
    }

    /// Checks every path up front so a refused overwrite leaves nothing half-written.
    fn preflight(&self, extra: &[&Path]) -> CliResult<()> {
        if let Some(out) = &self.out {
            self.check_writable(out)?;
            self.check_writable(&Self::sidecar(out))?;
        }
        extra.iter().try_for_each(|p| self.check_writable(p))
    }

    fn emit(&self, body: &[u8], meta: &Value) -> CliResult<()> {
        match &self.out {
            Some(path) => {
                write_file(path, body)?;
                let mut text = serde_json::to_string_pretty(meta).map_err(|e| CliError::Failure(e.to_string()))?;
                text.push('\n');
                write_file(&Self::sidecar(path), text.as_bytes())
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(body).and_then(|_| stdout.flush()).map_err(|e| CliError::Failure(e.to_string()))
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn meta(command: &str, seed: u64, config: impl Serialize, results: Value) -> CliResult<Value> {
    Ok(json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config).map_err(|e| CliError::Failure(e.to_string()))?,
        "results": results,
    }))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Failure(e.to_string()))
}

fn csv_bytes<F>(write: F) -> CliResult<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> crate::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn cmd_capacity(a: CapacityArgs, seed: u64, sink: &Sink, name: &str) -> CliResult<i32> {
    let dim = a.dim.ok_or_else(|| usage("capacity needs --dim"))?;
    let n = a.experts.unwrap_or(16);
    sink.preflight(&[])?;
    match (&a.grid, a.delta) {
        (Some(_), Some(_)) => Err(usage("pass either --delta or --grid, not both")),
        (None, None) => Err(usage("capacity needs --delta or --grid")),
        (None, Some(delta)) => {
            let inp = CapacityTheoryInput::new(delta, dim, n)?;
            let r = ec_min(&inp)?;
            let mut result = json!({
                "delta": delta,
                "dim": dim,
                "n_experts": n,
                "p_delta": r.p_delta,
                "ec_min": r.ec_min,
                "erfc_bound": r.erfc_bound,
                "exp_bound": r.exp_bound,
                "degenerate": r.degenerate,
                "infinite": r.infinite,
                "chain": {
                    "exact_ge_erfc": r.ec_min >= r.erfc_bound,
                    "erfc_gt_exp": r.erfc_exceeds_exp,
                },
            });
            if let Some(samples) = a.mc_samples {
                let mc = mc_p_delta(delta, dim, samples, seed)?;
                result["mc"] = json!({
                    "estimate": mc.estimate,
                    "std_err": mc.std_err,
                    "n_samples": mc.n_samples,
                    "z": mc.z_score(r.p_delta),
                });
            }
            let mut body = serde_json::to_string_pretty(&result).map_err(|e| CliError::Failure(e.to_string()))?;
            body.push('\n');
            let resolved = json!({ "delta": delta, "dim": dim, "experts": n, "mc_samples": a.mc_samples });
            sink.emit(body.as_bytes(), &meta(name, seed, resolved, result)?)?;
            Ok(0)
        }
        (Some(spec), None) => {
            let grid = parse_grid(spec)?;
            let curve = capacity_curve(dim, n, &grid)?;
            let body = csv_bytes(|buf| {
                let mut w = csv::Writer::from_writer(buf);
                let mut header = vec!["delta", "p_delta", "ec_min", "erfc_bound", "exp_bound", "degenerate"];
                if a.mc_samples.is_some() {
                    header.extend(["mc_estimate", "mc_std_err"]);
                }
                w.write_record(&header)?;
                for (i, pt) in curve.iter().enumerate() {
                    let r = ec_min(&CapacityTheoryInput::new(pt.delta, dim, n)?)?;
                    let mut row = vec![
                        pt.delta.to_string(),
                        pt.p_delta.to_string(),
                        pt.ec_min.to_string(),
                        r.erfc_bound.to_string(),
                        r.exp_bound.to_string(),
                        r.degenerate.to_string(),
                    ];
                    if let Some(samples) = a.mc_samples {
                        let mc = mc_p_delta(pt.delta, dim, samples, seed.wrapping_add(i as u64))?;
                        row.extend([mc.estimate.to_string(), mc.std_err.to_string()]);
                    }
                    w.write_record(&row)?;
                }
                w.flush()?;
                Ok(())
            })?;
            let resolved = json!({ "grid": spec, "dim": dim, "experts": n, "mc_samples": a.mc_samples });
            sink.emit(&body, &meta(name, seed, resolved, json!({ "rows": curve.len() }))?)?;
            Ok(0)
        }
    }
}

/// One line of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

fn check(suite: Suite, name: impl Into<String>, value: f64, bound: impl Into<String>, passed: bool) -> Check {
    Check { suite: suite.as_str(), name: name.into(), value, bound: bound.into(), passed }
}

/// Options for [`run_suite`].
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mc_samples: usize,
    pub perturb: f64,
}

/// (d, δ) cases of the Monte Carlo agreement check.
pub fn mc_grid() -> Vec<(usize, f64)> {
    vec![
        (8, 0.5),
        (16, 0.3),
        (64, 0.2),
        (128, 0.1),
        (256, 1.0 / 16.0),
        (512, 0.05),
        (1024, 1.0 / 1022.5f64.sqrt()),
        (2048, 0.03),
        (4096, 1.0 / 4094.5f64.sqrt()),
        (4096, 0.03),
    ]
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> crate::Result<Vec<Check>> {
    let mut out = Vec::new();
    match suite {
        Suite::CapIdentity => {
            let mut worst: f64 = 0.0;
            for dim in 3..=20 {
                for k in 1..=9 {
                    let r = cap_area_identity_check(k as f64 / 10.0, dim)?;
                    worst = worst.max(r.abs_err);
                }
            }
            out.push(check(suite, "max |lhs - rhs| over d 3..20, delta 0.1..0.9", worst, "<= 1e-6", worst <= 1e-6));
        }
        Suite::PDelta => {
            for dim in [1024usize, 4096] {
                let delta = 1.0 / (dim as f64 - 1.5).sqrt();
                let p = p_delta(&CapacityTheoryInput::new(delta, dim, 1)?)?;
                out.push(check(suite, format!("p_delta(1/sqrt(d-3/2)), d={dim}"), p, "in [0.28, 0.34]", (0.28..=0.34).contains(&p)));
            }
            let x = 1.0 / 4094.5;
            let i = reg_incomplete_beta(x, 0.5, 4095.0 / 2.0)?;
            let target = erf(std::f64::consts::FRAC_1_SQRT_2);
            out.push(check(suite, "I_{1/(d-3/2)}(1/2,(d-1)/2) - erf(1/sqrt2), d=4096", i - target, "abs <= 1e-3", (i - target).abs() <= 1e-3));
        }
        Suite::PDeltaMc => {
            for (case, (dim, delta)) in mc_grid().into_iter().enumerate() {
                let exact = p_delta(&CapacityTheoryInput::new(delta, dim, 1)?)?;
                let mc = mc_p_delta(delta, dim, opts.mc_samples, opts.seed.wrapping_add(case as u64))?;
                let z = mc.z_score(exact);
                out.push(check(suite, format!("z(mc, analytic), d={dim}, delta={delta:.6}"), z, "<= 3", z <= 3.0));
            }
        }
        Suite::Lemma2 => {
            for (dim, n) in [(64usize, 8usize), (128, 16)] {
                let (f, sigma) = grap_assignment_mc(dim, n, 100_000, opts.seed)?;
                let q = 1.0 / n as f64;
                let worst = f.iter().map(|fi| (fi - q).abs() / sigma).fold(0.0, f64::max);
                out.push(check(suite, format!("max |f_i - 1/n| / sigma, d={dim}, n={n}"), worst, "<= 3", worst <= 3.0));
            }
        }
        Suite::TheoremChain => {
            let pts = theorem_chain_grid()?;
            let bad_exact = pts.iter().filter(|p| !p.exact_ge_erfc).count();
            let bad_exp = pts.iter().filter(|p| !p.erfc_gt_exp).count();
            let worst = pts.iter().map(|p| p.exact - p.erfc_form).fold(f64::INFINITY, f64::min);
            out.push(check(
                suite,
                format!("exact ec_min >= erfc form ({bad_exact}/{} points violate; min gap)", pts.len()),
                worst,
                ">= 0 at every point",
                bad_exact == 0,
            ));
            let gap = pts.iter().map(|p| p.erfc_form - p.exp_form).fold(f64::INFINITY, f64::min);
            out.push(check(
                suite,
                format!("erfc form > exp form ({bad_exp}/{} points violate; min gap)", pts.len()),
                gap,
                "> 0 at every point",
                bad_exp == 0,
            ));
        }
        Suite::Losses => {
            let alpha = 0.01;
            let u = vec![1.0 / 16.0; 16];
            let a = aux_loss(&u, &u, alpha)?;
            out.push(check(suite, "aux_loss(uniform, uniform) - alpha", a - alpha, "abs <= 1e-12", (a - alpha).abs() <= 1e-12));
            let d = ExpertDistribution::new(vec![0.1, 0.2, 0.3, 0.4])?;
            let l = locality_loss(&d, &d, 0.01)?;
            out.push(check(suite, "locality_loss(D, D)", l, "abs <= 1e-12", l.abs() <= 1e-12));
            for r in grad_check_suite(opts.seed, 100, 1e-4, opts.perturb) {
                out.push(check(suite, format!("{} gradient max rel err", r.name), r.max_rel_err, "<= 1e-4", r.passed));
            }
        }
    }
    Ok(out)
}

fn cmd_verify(a: VerifyArgs, seed: u64, sink: &Sink, name: &str) -> CliResult<i32> {
    let opts = VerifyOptions {
        seed,
        mc_samples: a.mc_samples.unwrap_or(1_000_000),
        perturb: a.perturb.unwrap_or(0.0),
    };
    if opts.mc_samples == 0 {
        return Err(usage("--mc-samples must be positive"));
    }
    sink.preflight(&[])?;
    let suites: Vec<Suite> = match a.only {
        Some(s) => vec![s],
        None => Suite::value_variants().to_vec(),
    };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(run_suite(s, &opts)?);
    }
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        // the table goes to stderr when stdout carries the CSV
        let line = format!("{status}  {:<14} {:<width$}  {:>12.6e}  {}", c.suite, c.name, c.value, c.bound);
        if sink.out.is_some() {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    let body = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        for c in &checks {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    })?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    let resolved = json!({ "only": a.only, "mc_samples": opts.mc_samples, "perturb": opts.perturb });
    sink.emit(&body, &meta(name, seed, resolved, json!({ "checks": checks.len(), "failed": failed }))?)?;
    Ok(if failed == 0 { 0 } else { 1 })
}

#[derive(Debug, Clone, Serialize)]
struct RouteSimConfig {
    router: SimRouter,
    dim: usize,
    experts: usize,
    tokens: usize,
    corpus: CorpusKind,
    clusters: usize,
    concentration: f64,
    noise_std: f64,
    capacity_factor: Option<f64>,
    histograms: Option<PathBuf>,
    hist_max: usize,
}

fn cmd_route_sim(a: RouteSimArgs, seed: u64, sink: &Sink, name: &str) -> CliResult<i32> {
    let cfg = RouteSimConfig {
        router: a.router.unwrap_or(SimRouter::Grap),
        dim: a.dim.unwrap_or(64),
        experts: a.experts.unwrap_or(8),
        tokens: a.tokens.unwrap_or(100_000),
        corpus: a.corpus.unwrap_or(CorpusKind::Sphere),
        clusters: a.clusters.unwrap_or(4),
        concentration: a.concentration.unwrap_or(10.0),
        noise_std: a.noise_std.unwrap_or(0.0),
        capacity_factor: a.capacity_factor,
        histograms: a.histograms.clone(),
        hist_max: a.hist_max.unwrap_or(256),
    };
    if cfg.tokens == 0 {
        return Err(usage("--tokens must be positive"));
    }
    let extra: Vec<&Path> = cfg.histograms.iter().map(|p| p.as_path()).collect();
    sink.preflight(&extra)?;
    let batch = match cfg.corpus {
        CorpusKind::Sphere => sample_unit_sphere(&SphereSampleConfig { dim: cfg.dim, n_samples: cfg.tokens, seed })?,
        CorpusKind::Clusters => {
            if cfg.clusters == 0 {
                return Err(usage("--clusters must be positive"));
            }
            make_synthetic_corpus(&SyntheticCorpusConfig {
                n_clusters: cfg.clusters,
                dim: cfg.dim,
                tokens_per_cluster: cfg.tokens.div_ceil(cfg.clusters),
                concentration: cfg.concentration,
                seed,
            })?
        }
    };
    let (outcome, gating) = route_batch(&batch, &cfg, seed)?;
    let outcome = match cfg.capacity_factor {
        Some(cf) => apply_capacity(&outcome, empirical_capacity(batch.len(), cf, 1, cfg.experts)?)?,
        None => outcome,
    };
    let counts = outcome.assigned_counts();
    let served = outcome.served_counts();
    let q = 1.0 / cfg.experts as f64;
    let sigma = (q * (1.0 - q) / batch.len() as f64).sqrt();
    let body = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["expert", "count", "served", "f", "p", "z"])?;
        for i in 0..cfg.experts {
            w.write_record(&[
                i.to_string(),
                counts[i].to_string(),
                served[i].to_string(),
                outcome.f[i].to_string(),
                outcome.p[i].to_string(),
                ((outcome.f[i] - q) / sigma).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let max_z = outcome.f.iter().map(|f| (f - q).abs() / sigma).fold(0.0, f64::max);
    let mut results = json!({
        "tokens": batch.len(),
        "entropy": entropy(&counts),
        "never_used": never_used_fraction(&counts),
        "sigma": sigma,
        "max_abs_z": max_z,
        "dropped": outcome.dropped.iter().filter(|&&d| d).count(),
    });
    if let Some(path) = &cfg.histograms {
        let h = cosine_histograms(&batch, &outcome, &gating, cfg.hist_max)?;
        results["mean_diagonal_cosine"] = to_json(&h.mean_diagonal())?;
        results["mean_off_diagonal_cosine"] = to_json(&h.mean_off_diagonal())?;
        let bytes = csv_bytes(|buf| h.write_csv(buf))?;
        write_file(path, &bytes)?;
    }
    sink.emit(&body, &meta(name, seed, &cfg, results)?)?;
    Ok(0)
}

/// Routes with the chosen router and returns the gating matrix used for the
/// token-to-weight histograms (GrAP for hash routing, which has none).
fn route_batch(batch: &TokenBatch, cfg: &RouteSimConfig, seed: u64) -> CliResult<(RoutingOutcome, GatingMatrix)> {
    let router_cfg = RouterConfig { noise_std: cfg.noise_std, ..RouterConfig::new(cfg.experts, cfg.dim)? };
    router_cfg.validate()?;
    let grap = build_grap_weights(&router_cfg)?;
    Ok(match cfg.router {
        SimRouter::Grap => {
            let scores = gate_scores(batch, &grap, cfg.noise_std, seed)?;
            (route_top1(scores.view())?, grap)
        }
        SimRouter::Hash => (hash_route(&batch.token_ids, cfg.experts)?, grap),
        SimRouter::Switch => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5357_4954_4348);
            let std = Normal::new(0.0, 1.0).expect("unit normal");
            let weights = Array2::from_shape_simple_fn((cfg.experts, cfg.dim), || std.sample(&mut rng));
            let w = GatingMatrix { weights };
            let outcome = crate::router::switch_route(batch, w.weights.view())?;
            (outcome, w)
        }
    })
}

/// Fully resolved toy parameters.
#[derive(Debug, Clone, Serialize)]
struct ToyConfig {
    corpus: SyntheticCorpusConfig,
    topology: ClusterTopology,
    train: TrainConfig,
}

fn resolve_toy(a: &ToyArgs, seed: u64, topology: Option<ClusterTopology>) -> CliResult<ToyConfig> {
    let defaults = TrainConfig::default();
    let mut topology = topology.unwrap_or_default();
    if let Some(nodes) = a.nodes {
        topology.n_nodes = nodes;
    }
    topology.validate()?;
    let corpus = SyntheticCorpusConfig {
        n_clusters: a.clusters.unwrap_or(4),
        dim: a.dim.unwrap_or(64),
        tokens_per_cluster: a.tokens_per_cluster.unwrap_or(1000),
        concentration: a.concentration.unwrap_or(10.0),
        seed,
    };
    let losses = LossConfig {
        alpha: a.alpha.unwrap_or(defaults.losses.alpha),
        mu: a.mu.unwrap_or(defaults.losses.mu),
        epsilon_smooth: a.epsilon.unwrap_or(defaults.losses.epsilon_smooth),
    };
    losses.validate()?;
    let train = TrainConfig {
        router: defaults.router,
        n_experts: a.experts.unwrap_or(defaults.n_experts),
        hidden: a.hidden.unwrap_or(defaults.hidden),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        losses,
        capacity_factor: a.capacity_factor.unwrap_or(defaults.capacity_factor),
        switch_init_std: defaults.switch_init_std,
        seed,
    };
    if train.n_experts == 0 {
        return Err(usage("--experts must be positive"));
    }
    Ok(ToyConfig { corpus, topology, train })
}

fn run_summary(run: &TrainRun) -> CliResult<Value> {
    let summaries = epoch_summaries(&run.records);
    let last = summaries.last();
    let final_counts = run.final_outcome.assigned_counts();
    Ok(json!({
        "router": run.config.router,
        "grad_check": to_json(&run.grad_check)?,
        "aborted": run.aborted,
        "steps": run.records.len(),
        "final_epoch": last.map(|s| s.epoch),
        "final_epoch_counts": last.map(|s| s.counts.clone()),
        "final_epoch_entropy": last.map(|s| s.entropy),
        "final_epoch_never_used": last.map(|s| s.never_used),
        "final_epoch_locality_fraction": last.map(|s| s.locality_fraction),
        "final_routing_entropy": entropy(&final_counts),
        "epochs": to_json(&summaries)?,
    }))
}

fn cmd_train_toy(a: TrainToyArgs, seed: u64, sink: &Sink, name: &str) -> CliResult<i32> {
    let mut cfg = resolve_toy(&a.toy, seed, None)?;
    cfg.train.router = a.router.unwrap_or(cfg.train.router);
    sink.preflight(&[])?;
    let setup = TrainSetup::new(&cfg.corpus, cfg.topology.clone(), cfg.train.n_experts)?;
    let run = train(&setup, &cfg.train)?;
    if run.records.is_empty() {
        return Err(CliError::Failure(run.aborted.clone().unwrap_or_else(|| "no training steps ran".into())));
    }
    let body = csv_bytes(|buf| assignment_report(&run.records, buf))?;
    sink.emit(&body, &meta(name, seed, &cfg, run_summary(&run)?)?)?;
    if let Some(msg) = &run.aborted {
        eprintln!("training aborted: {msg}");
        return Ok(1);
    }
    if !run.grad_check.passed {
        eprintln!("gradient check failed: max rel err {:e}", run.grad_check.max_rel_err);
        return Ok(1);
    }
    Ok(0)
}

#[derive(Debug, Clone, Serialize)]
struct CommConfig {
    topology: ClusterTopology,
    placement: Option<PathBuf>,
    volumes: String,
    tp_group: usize,
    token_bytes: f64,
    overlap_ratio: f64,
    device_flops: f64,
    toy: Option<ToyConfig>,
}

#[derive(Debug, Serialize)]
struct CommRow {
    router: String,
    entropy: f64,
    never_used: f64,
    locality_fraction: f64,
    plain_seconds: f64,
    groupwise_seconds: f64,
    compute_seconds: f64,
    visible_comm_seconds: f64,
    comm_share: f64,
}

fn cmd_comm_sim(a: CommSimArgs, seed: u64, sink: &Sink, name: &str) -> CliResult<i32> {
    let defaults = Defaults::load();
    let topology = match &a.topology {
        Some(p) => ClusterTopology::from_json_file(p)?,
        None => defaults.topology.clone(),
    };
    let volumes = a.volumes.clone().unwrap_or_else(|| "from-run".into());
    let mut cfg = CommConfig {
        tp_group: a.tp_group.unwrap_or(topology.devices_per_node),
        topology,
        placement: a.placement.clone(),
        volumes,
        token_bytes: a.token_bytes.unwrap_or(defaults.token_bytes as f64),
        overlap_ratio: a.overlap_ratio.unwrap_or(defaults.overlap_ratio),
        device_flops: defaults.device_flops,
        toy: None,
    };
    if !(cfg.token_bytes > 0.0) || !(0.0..=1.0).contains(&cfg.overlap_ratio) {
        return Err(usage("--token-bytes must be > 0 and --overlap-ratio in [0, 1]"));
    }
    sink.preflight(&[])?;
    if cfg.volumes != "from-run" {
        let file = fs::File::open(&cfg.volumes)
            .map_err(|e| usage(format!("cannot open volumes {}: {e}", cfg.volumes)))?;
        let v = read_volume_csv(file)?;
        let plain = alltoall_cost(v.view(), &cfg.topology)?;
        let (grouped, plan) = groupwise_alltoall_cost(v.view(), &cfg.topology, cfg.tp_group)?;
        let body = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record([
                "tp_group",
                "input_bytes",
                "plain_seconds",
                "groupwise_seconds",
                "deferred_bytes",
                "replication_bytes",
                "phases",
            ])?;
            w.write_record(&[
                cfg.tp_group.to_string(),
                plan.input_bytes.to_string(),
                plain.to_string(),
                grouped.to_string(),
                plan.deferred_bytes.to_string(),
                plan.replication_bytes.to_string(),
                plan.phases.len().to_string(),
            ])?;
            w.flush()?;
            Ok(())
        })?;
        sink.emit(&body, &meta(name, seed, &cfg, to_json(&plan)?)?)?;
        return Ok(0);
    }

    let toy = resolve_toy(&a.toy, seed, Some(cfg.topology.clone()))?;
    cfg.topology = toy.topology.clone();
    let mut setup = TrainSetup::new(&toy.corpus, toy.topology.clone(), toy.train.n_experts)?;
    if let Some(p) = &cfg.placement {
        setup.placement = ExpertPlacement::from_json_file(p)?;
        setup.placement.validate(&setup.topology)?;
    }
    let mut runs = Vec::new();
    let mut rows_extra = Vec::new();
    let mut summaries = serde_json::Map::new();
    for kind in RouterKind::ALL {
        let mut train_cfg = toy.train.clone();
        train_cfg.router = kind;
        if kind == RouterKind::Switch {
            train_cfg.losses.mu = 0.0;
        }
        let run = train(&setup, &train_cfg)?;
        if let Some(msg) = &run.aborted {
            return Err(CliError::Failure(format!("{kind} training aborted: {msg}")));
        }
        let counts = run.final_outcome.assigned_counts();
        rows_extra.push((entropy(&counts), never_used_fraction(&counts)));
        summaries.insert(kind.to_string(), run_summary(&run)?);
        runs.push((kind.to_string(), run.final_outcome));
    }
    let labels = setup.corpus.labels.as_ref().expect("synthetic corpus is labeled");
    let source = cluster_source_devices(labels, toy.corpus.n_clusters, &setup.topology);
    let hidden = if toy.train.hidden == 0 { 4 * toy.corpus.dim } else { toy.train.hidden } as f64;
    let d = toy.corpus.dim as f64;
    let model = CostModel {
        token_bytes: cfg.token_bytes,
        tp_group_size: cfg.tp_group,
        overlap_ratio: cfg.overlap_ratio,
        device_flops: cfg.device_flops,
        flops_per_token: 4.0 * hidden * d + hidden + d,
    };
    let rows = compare_strategies(&runs, &setup.placement, &setup.topology, &source, &model)?;
    let body = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        for (r, (h, unused)) in rows.iter().zip(&rows_extra) {
            w.serialize(CommRow {
                router: r.router.clone(),
                entropy: *h,
                never_used: *unused,
                locality_fraction: r.locality_fraction,
                plain_seconds: r.plain_seconds,
                groupwise_seconds: r.groupwise_seconds,
                compute_seconds: r.compute_seconds,
                visible_comm_seconds: r.visible_comm_seconds,
                comm_share: r.comm_share,
            })?;
        }
        w.flush()?;
        Ok(())
    })?;
    cfg.toy = Some(toy);
    let results = json!({ "cost_model": to_json(&model)?, "runs": Value::Object(summaries) });
    sink.emit(&body, &meta(name, seed, &cfg, results)?)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_prefers_flags() {
        let flags = CapacityArgs { dim: Some(64), ..Default::default() };
        let file = json!({ "dim": 128, "experts": 4 });
        let m = merge(flags, Some(file)).unwrap();
        assert_eq!((m.dim, m.experts), (Some(64), Some(4)));
    }

    #[test]
    fn merge_rejects_unknown_keys() {
        let err = merge(CapacityArgs::default(), Some(json!({ "dims": 3 }))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn merge_flattened_toy_args() {
        let flags = TrainToyArgs { toy: ToyArgs { epochs: Some(3), ..Default::default() }, ..Default::default() };
        let m = merge(flags, Some(json!({ "router": "hash", "epochs": 9, "tokens-per-cluster": 10 }))).unwrap();
        assert_eq!(m.router, Some(RouterKind::Hash));
        assert_eq!(m.toy.epochs, Some(3));
        assert_eq!(m.toy.tokens_per_cluster, Some(10));
    }

    #[test]
    fn sidecar_path() {
        assert_eq!(Sink::sidecar(Path::new("a/b.csv")), PathBuf::from("a/b.csv.meta.json"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
