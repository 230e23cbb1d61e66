//! `edgemoe` command line: generate routing traces, plan expert bitwidths,
//! train the activation predictor, evaluate cache policies, and run the
//! latency simulator. Every output is JSON (traces are JSON Lines).
//!
//! Exit codes: 0 success, 2 usage or config error, 3 infeasible domain error
//! (budget too small, generation constraints unsatisfiable).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use edgemoe::buffer::{run_policy_eval, DistanceMode, Policy};
use edgemoe::planner::{
    plan_storage_bytes, profile_importance, select_bitwidths, uniform_sweep, PlanFile, PROBE_HIGH,
    PROBE_LOW,
};
use edgemoe::predictor::{build_profile, load_profile, save_profile};
use edgemoe::sim::{
    compare_engines, simulate_logged, write_event_log_csv, CompareReport, CostModel,
    EdgeMoeEngine, EngineKind, ExpertBits, SimReport,
};
use edgemoe::toy::{build_probes, build_toy_model, emit_trace};
use edgemoe::tracegen::{generate_markov_trace, generate_powerlaw_trace, TOKENS_PER_SAMPLE};
use edgemoe::{expert_size_bytes, Bitwidth, MoEConfig, QuantPlan, TokenTrace};

/// Probe count used by `plan`; probes are drawn deterministically from the
/// config seed so identical configs always plan identically.
const PROBE_COUNT: usize = 512;

// ============================================================================
// Argument grammar
// ============================================================================

#[derive(Parser)]
#[command(name = "edgemoe", version, about = "Expert offloading toolkit for MoE inference")]
struct Cli {
    /// Omit timestamps so identical flags produce byte-identical outputs.
    #[arg(long, global = true)]
    no_timestamp: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic or model-driven routing trace.
    GenTrace(GenTraceArgs),
    /// Assign per-expert bitwidths under a tolerable accuracy loss.
    Plan(PlanArgs),
    /// Count expert activations in a trace into a predictor profile.
    BuildPredictor(BuildPredictorArgs),
    /// Replay a trace through one eviction policy and report the hit ratio.
    EvalCache(EvalCacheArgs),
    /// Time one inference engine on a trace with a cost preset.
    Simulate(SimulateArgs),
    /// Time several engines on identical inputs and report speedups.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TraceMode {
    /// Power-law path catalog with balanced per-expert marginals.
    Powerlaw,
    /// Layer-to-layer Markov chain; also writes the ground-truth table.
    Markov,
    /// Autoregressive decoding through the deterministic toy model.
    Toy,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Edgemoe,
    Lru,
    Lfu,
    Fifo,
    Random,
}

impl PolicyArg {
    fn to_policy(self) -> Policy {
        match self {
            PolicyArg::Edgemoe => Policy::EdgeMoe,
            PolicyArg::Lru => Policy::Lru,
            PolicyArg::Lfu => Policy::Lfu,
            PolicyArg::Fifo => Policy::Fifo,
            PolicyArg::Random => Policy::Random,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistanceArg {
    /// Cyclic distance as printed in the eviction formula, (S - i + I) % S.
    Printed,
    /// Layers until the expert's layer runs again, (S + i - I) % S.
    Forward,
}

impl DistanceArg {
    fn to_mode(self) -> DistanceMode {
        match self {
            DistanceArg::Printed => DistanceMode::Printed,
            DistanceArg::Forward => DistanceMode::Forward,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DistanceArg::Printed => "printed",
            DistanceArg::Forward => "forward",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    IoFree,
    IoExp,
    IoQexp,
    Edgemoe,
}

#[derive(clap::Args)]
struct GenTraceArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: TraceMode,
    /// Number of decode tokens to emit.
    #[arg(long, default_value_t = 100_000)]
    tokens: usize,
    /// Path-frequency skew exponent (powerlaw mode only).
    #[arg(long, default_value_t = 1.6)]
    zipf_s: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PlanArgs {
    #[arg(long)]
    config: PathBuf,
    /// Tolerable accuracy loss P, in [0, 1).
    #[arg(long)]
    loss: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-expert importance heatmap.
    #[arg(long)]
    heatmap_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BuildPredictorArgs {
    #[arg(long)]
    trace: PathBuf,
    /// History window: how many previous MoE layers key each lookup.
    #[arg(long, default_value_t = 2)]
    history: usize,
    /// Laplace smoothing constant.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalCacheArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    /// Buffer capacity in FP32 expert slots.
    #[arg(long)]
    slots: usize,
    #[arg(long, value_enum, default_value = "printed")]
    distance: DistanceArg,
    /// Tie-break seed for the random policy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EngineOpts {
    /// Bitwidth plan file; required for edgemoe, optional for io-exp.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Predictor profile file; required for edgemoe.
    #[arg(long)]
    predictor: Option<PathBuf>,
    /// Cost preset: tx2-ssd-like or rpi-sdcard-like.
    #[arg(long, default_value = "tx2-ssd-like")]
    cost: String,
    /// Memory budget in MB (1 MB = 1e6 bytes).
    #[arg(long, conflicts_with = "slots")]
    budget_mb: Option<f64>,
    /// Budget as non-expert bytes plus N FP32 expert slots (default 10).
    #[arg(long)]
    slots: Option<usize>,
    /// Experts preloaded per prediction.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(usize))]
    preload_m: usize,
    #[arg(long, value_enum, default_value = "edgemoe")]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "printed")]
    distance: DistanceArg,
    #[arg(long, default_value_t = 0)]
    buffer_seed: u64,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    engine: EngineArg,
    #[command(flatten)]
    opts: EngineOpts,
    #[arg(long)]
    out: PathBuf,
    /// Write the full event timeline as CSV.
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// "all" or a comma-separated subset of io-free,io-exp,io-qexp,edgemoe.
    #[arg(long, default_value = "all")]
    engines: String,
    #[command(flatten)]
    opts: EngineOpts,
    #[arg(long)]
    out: PathBuf,
}

// ============================================================================
// Entry point and dispatch
// ============================================================================

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stamp = timestamp(cli.no_timestamp);
    let result = match cli.cmd {
        Cmd::GenTrace(args) => cmd_gen_trace(args),
        Cmd::Plan(args) => cmd_plan(args, stamp),
        Cmd::BuildPredictor(args) => cmd_build_predictor(args),
        Cmd::EvalCache(args) => cmd_eval_cache(args, stamp),
        Cmd::Simulate(args) => cmd_simulate(args, stamp),
        Cmd::Compare(args) => cmd_compare(args, stamp),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let domain = err
                .downcast_ref::<edgemoe::Error>()
                .map(edgemoe::Error::is_domain)
                .unwrap_or(false);
            ExitCode::from(if domain { 3 } else { 2 })
        }
    }
}

fn timestamp(no_timestamp: bool) -> Option<String> {
    if no_timestamp {
        None
    } else {
        Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
    }
}

// ============================================================================
// Subcommands
// ============================================================================

fn cmd_gen_trace(args: GenTraceArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let trace = match args.mode {
        TraceMode::Powerlaw => generate_powerlaw_trace(&cfg, args.tokens, args.zipf_s, args.seed)?,
        TraceMode::Markov => {
            let (trace, truth) = generate_markov_trace(&cfg, args.tokens, args.seed)?;
            let truth_path = args.out.with_extension("truth.json");
            truth.save(&truth_path)?;
            println!("wrote markov ground truth to {}", truth_path.display());
            trace
        }
        TraceMode::Toy => {
            let model = build_toy_model(&cfg)?;
            let samples = args.tokens.div_ceil(TOKENS_PER_SAMPLE).max(1);
            let mut trace = emit_trace(&model, samples, TOKENS_PER_SAMPLE, args.seed)?;
            trim_to_tokens(&mut trace, args.tokens);
            trace
        }
    };
    trace.write(&args.out)?;
    println!(
        "wrote {} tokens in {} samples to {}",
        trace.decode_token_count(),
        trace.samples.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_plan(args: PlanArgs, stamp: Option<String>) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&args.loss) {
        bail!("--loss must lie in [0, 1), got {}", args.loss);
    }
    let cfg = load_config(&args.config)?;
    let model = build_toy_model(&cfg)?;
    let probes = build_probes(&model, PROBE_COUNT, cfg.seed.wrapping_add(1))?;
    let heatmap = profile_importance(&model, &probes, PROBE_LOW, PROBE_HIGH)?;
    let sweep = uniform_sweep(&model, &probes, &[])?;
    let (plan, measured) = select_bitwidths(&model, &probes, &heatmap, &sweep, args.loss)?;

    let fp32_bytes = plan_storage_bytes(&QuantPlan::all_fp32(&cfg), &cfg);
    let mut file = PlanFile::new(&cfg, plan, args.loss, measured);
    file.generated_at = stamp;
    file.save(&args.out)?;
    if let Some(heatmap_out) = &args.heatmap_out {
        write_json(heatmap_out, &heatmap)?;
    }
    println!(
        "plan: bounds ({}, {}), {} of {} experts at the lower bound, non-expert {}, \
         measured loss {:.4} (target {}), {} bytes vs {} fp32",
        file.plan.bounds.0,
        file.plan.bounds.1,
        file.plan.low_bit_count,
        file.plan.expert_bits.len(),
        file.plan.non_expert_bitwidth,
        file.measured_loss,
        file.p_loss,
        file.total_bytes,
        fp32_bytes,
    );
    Ok(())
}

fn cmd_build_predictor(args: BuildPredictorArgs) -> anyhow::Result<()> {
    let trace = TokenTrace::read(&args.trace)?;
    let profile = build_profile(std::slice::from_ref(&trace), args.history, args.alpha)?;
    save_profile(&profile, &args.out)?;
    println!(
        "profile: {} conditional keys from {} tokens, h={}, alpha={} -> {}",
        profile.iter_entries().count(),
        trace.decode_token_count(),
        args.history,
        args.alpha,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalCacheDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    policy: String,
    slots: usize,
    distance: &'static str,
    seed: u64,
    decode_tokens: usize,
    hit_ratio: f64,
}

fn cmd_eval_cache(args: EvalCacheArgs, stamp: Option<String>) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let trace = TokenTrace::read(&args.trace)?;
    let hit_ratio = run_policy_eval(
        &trace,
        &cfg,
        args.policy.to_policy(),
        args.slots,
        args.distance.to_mode(),
        args.seed,
    )?;
    let doc = EvalCacheDoc {
        generated_at: stamp,
        policy: format!("{:?}", args.policy.to_policy()).to_lowercase(),
        slots: args.slots,
        distance: args.distance.name(),
        seed: args.seed,
        decode_tokens: trace.decode_token_count(),
        hit_ratio,
    };
    write_json(&args.out, &doc)?;
    println!("{} @ {} slots: hit ratio {:.4}", doc.policy, doc.slots, doc.hit_ratio);
    Ok(())
}

#[derive(Serialize)]
struct SimulateDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    cost_preset: String,
    budget_bytes: u64,
    report: SimReport,
}

fn cmd_simulate(args: SimulateArgs, stamp: Option<String>) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let trace = TokenTrace::read(&args.trace)?;
    let cost = CostModel::preset(&args.opts.cost, &cfg)?;
    let budget = resolve_budget(&args.opts, &cfg, &cost)?;
    let engine = build_engine(args.engine, &cfg, &args.opts)?;

    let mut events = Vec::new();
    let log = args.event_log.as_ref().map(|_| &mut events);
    let report = simulate_logged(&trace, &cfg, &engine, &cost, budget, log)?;
    if let Some(path) = &args.event_log {
        write_event_log_csv(&events, path)?;
        println!("wrote {} events to {}", events.len(), path.display());
    }

    print_report_line(&report);
    let doc = SimulateDoc {
        generated_at: stamp,
        cost_preset: args.opts.cost.clone(),
        budget_bytes: budget,
        report,
    };
    write_json(&args.out, &doc)
}

#[derive(Serialize)]
struct CompareDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    cost_preset: String,
    budget_bytes: u64,
    #[serde(flatten)]
    compare: CompareReport,
}

fn cmd_compare(args: CompareArgs, stamp: Option<String>) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let trace = TokenTrace::read(&args.trace)?;
    let cost = CostModel::preset(&args.opts.cost, &cfg)?;
    let budget = resolve_budget(&args.opts, &cfg, &cost)?;

    let kinds = parse_engines(&args.engines)?;
    let mut engines = Vec::with_capacity(kinds.len());
    for kind in kinds {
        engines.push(build_engine(kind, &cfg, &args.opts)?);
    }

    let compare = compare_engines(&trace, &cfg, &engines, &cost, budget)?;
    println!("{:<10} {:>12} {:>7} {:>7} {:>12} {:>14}", "engine", "tpot", "hit", "pred", "io-stall", "peak-bytes");
    for r in &compare.reports {
        print_report_line(r);
    }
    for (name, base) in [("io_exp", &compare.speedup_vs_io_exp), ("io_free", &compare.speedup_vs_io_free)] {
        if base.is_empty() {
            continue;
        }
        let cells: Vec<String> =
            base.iter().map(|(engine, s)| format!("{engine} {s:.2}x")).collect();
        println!("speedup vs {name}: {}", cells.join(", "));
    }
    let doc = CompareDoc {
        generated_at: stamp,
        cost_preset: args.opts.cost.clone(),
        budget_bytes: budget,
        compare,
    };
    write_json(&args.out, &doc)
}

// ============================================================================
// Shared helpers
// ============================================================================

fn load_config(path: &Path) -> anyhow::Result<MoEConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: MoEConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let problems = cfg.validate();
    if !problems.is_empty() {
        bail!("invalid config {}: {}", path.display(), problems.join("; "));
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Drops trailing tokens (and then empty samples) until the trace holds
/// exactly `tokens` decode tokens.
fn trim_to_tokens(trace: &mut TokenTrace, tokens: usize) {
    let mut excess = trace.decode_token_count().saturating_sub(tokens);
    while excess > 0 {
        let last = trace.samples.last_mut().expect("excess implies a sample");
        let drop = excess.min(last.decode_tokens.len());
        let keep = last.decode_tokens.len() - drop;
        last.decode_tokens.truncate(keep);
        if last.decode_tokens.is_empty() {
            trace.samples.pop();
        }
        excess -= drop;
    }
}

fn resolve_budget(opts: &EngineOpts, cfg: &MoEConfig, cost: &CostModel) -> anyhow::Result<u64> {
    if let Some(mb) = opts.budget_mb {
        if !mb.is_finite() || mb < 0.0 {
            bail!("--budget-mb must be a non-negative number, got {mb}");
        }
        return Ok((mb * 1e6).round() as u64);
    }
    let slots = opts.slots.unwrap_or(10) as u64;
    Ok(cost.non_expert_resident_bytes + slots * expert_size_bytes(cfg, Bitwidth::Fp32))
}

fn build_engine(kind: EngineArg, cfg: &MoEConfig, opts: &EngineOpts) -> anyhow::Result<EngineKind> {
    let load_plan = |path: &Path| -> anyhow::Result<QuantPlan> {
        let file = PlanFile::load(path)?;
        file.verify_config(cfg)?;
        Ok(file.plan)
    };
    match kind {
        EngineArg::IoFree => Ok(EngineKind::IoFree),
        EngineArg::IoQexp => Ok(EngineKind::IoQexp),
        EngineArg::IoExp => {
            let bits = match &opts.plan {
                Some(path) => ExpertBits::Plan(load_plan(path)?),
                None => ExpertBits::Uniform(Bitwidth::Fp32),
            };
            Ok(EngineKind::IoExp(bits))
        }
        EngineArg::Edgemoe => {
            let plan_path =
                opts.plan.as_ref().ok_or_else(|| anyhow!("--engine edgemoe requires --plan"))?;
            let profile_path = opts
                .predictor
                .as_ref()
                .ok_or_else(|| anyhow!("--engine edgemoe requires --predictor"))?;
            if !(1..=3).contains(&opts.preload_m) {
                bail!("--preload-m must be 1, 2, or 3, got {}", opts.preload_m);
            }
            let plan = load_plan(plan_path)?;
            let profile = load_profile(profile_path)?;
            profile.verify_config(cfg)?;
            let mut engine = EdgeMoeEngine::new(plan, profile);
            engine.preload_m = opts.preload_m;
            engine.policy = opts.policy.to_policy();
            engine.distance = opts.distance.to_mode();
            engine.buffer_seed = opts.buffer_seed;
            Ok(EngineKind::EdgeMoe(Box::new(engine)))
        }
    }
}

fn parse_engines(spec: &str) -> anyhow::Result<Vec<EngineArg>> {
    if spec.trim() == "all" {
        return Ok(vec![EngineArg::IoFree, EngineArg::IoExp, EngineArg::IoQexp, EngineArg::Edgemoe]);
    }
    spec.split(',')
        .map(str::trim)
        .filter(|tok| !tok.is_empty())
        .map(|tok| {
            EngineArg::from_str(tok, true)
                .map_err(|_| anyhow!("unknown engine {tok:?} (use all, io-free, io-exp, io-qexp, edgemoe)"))
        })
        .collect()
}

fn print_report_line(r: &SimReport) {
    let pred = match r.prediction_accuracy {
        Some(a) => format!("{a:.3}"),
        None => "-".to_string(),
    };
    println!(
        "{:<10} {:>9.2} us {:>7.3} {:>7} {:>9.1} us {:>14}",
        r.engine,
        r.tpot_seconds * 1e6,
        r.hit_ratio,
        pred,
        r.io_stall_seconds * 1e6,
        r.peak_resident_bytes,
    );
}
