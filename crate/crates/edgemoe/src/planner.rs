//! Offline bitwidth planning: importance profiling, uniform sweeps, bound
//! bracketing, and bisection on the number of low-bitwidth experts under a
//! tolerable accuracy-loss budget.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{expert_size_bytes, non_expert_size_bytes, Bitwidth, MoEConfig};
use crate::toy::{evaluate_agreement_with, DequantCache, ProbeSet, QuantPlan, ToyMoEModel};

/// Default probe bitwidths for importance profiling.
pub const PROBE_LOW: Bitwidth = Bitwidth::Int2;
pub const PROBE_HIGH: Bitwidth = Bitwidth::Int4;

/// Rungs evaluated by default in a uniform sweep. Fp16 is deliberately not a
/// bracketing bound: if no integer rung meets the budget the planner jumps
/// straight to (int8, fp32).
pub const SWEEP_BITWIDTHS: [Bitwidth; 4] =
    [Bitwidth::Int2, Bitwidth::Int4, Bitwidth::Int8, Bitwidth::Fp32];

const NON_EXPERT_CANDIDATES: [Bitwidth; 4] =
    [Bitwidth::Int4, Bitwidth::Int8, Bitwidth::Fp16, Bitwidth::Fp32];

// ============================================================================
// Importance heatmap
// ============================================================================

/// Accuracy loss per expert when that expert alone runs at `probe_low` while
/// everything else runs at `probe_high`. Indexed by flat expert order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceHeatmap {
    pub config_digest: String,
    pub probe_low: Bitwidth,
    pub probe_high: Bitwidth,
    /// Raw losses; small negatives from argmax noise are kept here and
    /// clamped to zero only for ranking.
    pub losses: Vec<f64>,
}

impl ImportanceHeatmap {
    /// Flat expert indices ordered least-important first: ascending clamped
    /// loss, ties by flat index (which is (stage, layer, expert) order).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.losses.len()).collect();
        idx.sort_by(|&a, &b| {
            let la = self.losses[a].max(0.0);
            let lb = self.losses[b].max(0.0);
            la.partial_cmp(&lb).unwrap().then(a.cmp(&b))
        });
        idx
    }
}

/// Quantizes each expert alone to `low` (rest at `high`) and records the
/// accuracy drop against the uniform-`high` baseline.
pub fn profile_importance(
    model: &ToyMoEModel,
    probes: &ProbeSet,
    low: Bitwidth,
    high: Bitwidth,
) -> Result<ImportanceHeatmap> {
    let cfg = &model.cfg;
    let mut cache = DequantCache::new();
    let baseline_plan = QuantPlan::uniform(cfg, high);
    let baseline = evaluate_agreement_with(model, &baseline_plan, probes, &mut cache)?;

    let mut losses = Vec::with_capacity(cfg.total_experts());
    for flat in 0..cfg.total_experts() {
        let mut plan = QuantPlan::uniform(cfg, high);
        plan.expert_bits[flat] = low;
        plan.bounds = (low, high);
        plan.low_bit_count = 1;
        let acc = evaluate_agreement_with(model, &plan, probes, &mut cache)?;
        losses.push(baseline - acc);
    }
    Ok(ImportanceHeatmap { config_digest: cfg.digest(), probe_low: low, probe_high: high, losses })
}

// ============================================================================
// Uniform sweep
// ============================================================================

/// Accuracy loss of all-uniform plans per bitwidth. Always contains the four
/// default rungs; extra bitwidths may be requested on top.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub losses: BTreeMap<Bitwidth, f64>,
}

impl SweepResult {
    pub fn loss(&self, b: Bitwidth) -> f64 {
        self.losses[&b]
    }

    /// Rungs coarsest-first.
    pub fn rungs(&self) -> Vec<Bitwidth> {
        self.losses.keys().copied().collect()
    }
}

pub fn uniform_sweep(
    model: &ToyMoEModel,
    probes: &ProbeSet,
    bitwidths: &[Bitwidth],
) -> Result<SweepResult> {
    let mut cache = DequantCache::new();
    let mut losses = BTreeMap::new();
    for &b in SWEEP_BITWIDTHS.iter().chain(bitwidths) {
        if losses.contains_key(&b) {
            continue;
        }
        let acc = evaluate_agreement_with(model, &QuantPlan::uniform(&model.cfg, b), probes, &mut cache)?;
        losses.insert(b, 1.0 - acc);
    }
    Ok(SweepResult { losses })
}

// ============================================================================
// Plan selection
// ============================================================================

/// The plan for a given low-bit expert count `k`: the `k` least-important
/// experts (per `ranking`) at `bounds.0`, the rest at `bounds.1`.
pub fn plan_for_k(
    cfg: &MoEConfig,
    ranking: &[usize],
    k: usize,
    bounds: (Bitwidth, Bitwidth),
    non_expert: Bitwidth,
) -> QuantPlan {
    let mut bits = vec![bounds.1; cfg.total_experts()];
    for &flat in ranking.iter().take(k) {
        bits[flat] = bounds.0;
    }
    QuantPlan { expert_bits: bits, non_expert_bitwidth: non_expert, low_bit_count: k, bounds }
}

/// Measured losses of `plan_for_k` for every k in `0..=total`; the brute-force
/// oracle the tests hold bisection against.
pub fn scan_k_losses(
    model: &ToyMoEModel,
    probes: &ProbeSet,
    ranking: &[usize],
    bounds: (Bitwidth, Bitwidth),
    non_expert: Bitwidth,
) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let mut cache = DequantCache::new();
    let mut out = Vec::with_capacity(cfg.total_experts() + 1);
    for k in 0..=cfg.total_experts() {
        let plan = plan_for_k(cfg, ranking, k, bounds, non_expert);
        out.push(1.0 - evaluate_agreement_with(model, &plan, probes, &mut cache)?);
    }
    Ok(out)
}

/// Picks bounds, a non-expert bitwidth, and the low-bit expert count for a
/// tolerable accuracy loss `p`. Returns the plan and its measured loss.
///
/// Bound bracketing walks the sweep's rungs coarsest-first and takes the first
/// rung whose uniform loss is within `p` as the upper bound, with the rung
/// below as the lower. If even the coarsest rung fits, everything goes to
/// that rung. The non-expert bitwidth is then the smallest candidate whose
/// uniform-upper plan still meets `p`, and bisection finds the largest
/// low-bit count whose measured loss stays within `p` (largest certified k
/// when loss is not monotone in k).
pub fn select_bitwidths(
    model: &ToyMoEModel,
    probes: &ProbeSet,
    heatmap: &ImportanceHeatmap,
    sweep: &SweepResult,
    p: f64,
) -> Result<(QuantPlan, f64)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("tolerable loss {p} outside [0, 1)")));
    }
    let cfg = &model.cfg;
    if heatmap.losses.len() != cfg.total_experts() {
        return Err(Error::InvalidArgument(format!(
            "heatmap covers {} experts, config has {}",
            heatmap.losses.len(),
            cfg.total_experts()
        )));
    }
    if heatmap.config_digest != cfg.digest() {
        return Err(Error::DigestMismatch {
            expected: cfg.digest(),
            found: heatmap.config_digest.clone(),
            what: "heatmap",
        });
    }

    let rungs = sweep.rungs();
    let first_fit = rungs
        .iter()
        .position(|&b| sweep.loss(b) <= p)
        .expect("sweep contains fp32, whose loss is exactly zero");
    let bounds = if first_fit == 0 {
        (rungs[0], rungs[0])
    } else {
        (rungs[first_fit - 1], rungs[first_fit])
    };

    let mut cache = DequantCache::new();
    let ranking = heatmap.ranking();
    let total = cfg.total_experts();

    let measure = |plan: &QuantPlan, cache: &mut DequantCache| -> Result<f64> {
        Ok(1.0 - evaluate_agreement_with(model, plan, probes, cache)?)
    };

    // Non-expert bitwidth first: smallest candidate that keeps the uniform
    // upper-bound plan within budget. Fp32 always qualifies because bounds.1
    // was bracketed with fp32 non-expert weights.
    let mut non_expert = Bitwidth::Fp32;
    for cand in NON_EXPERT_CANDIDATES {
        let plan = plan_for_k(cfg, &ranking, 0, bounds, cand);
        if measure(&plan, &mut cache)? <= p {
            non_expert = cand;
            break;
        }
    }

    if bounds.0 == bounds.1 {
        let plan = plan_for_k(cfg, &ranking, total, bounds, non_expert);
        let loss = measure(&plan, &mut cache)?;
        return Ok((plan, loss));
    }

    // Bisection invariant: loss(lo) <= p. lo = 0 holds by the non-expert
    // selection above; if even k = total fits we are done.
    let loss_total = measure(&plan_for_k(cfg, &ranking, total, bounds, non_expert), &mut cache)?;
    if loss_total <= p {
        let plan = plan_for_k(cfg, &ranking, total, bounds, non_expert);
        return Ok((plan, loss_total));
    }

    let mut lo = 0usize;
    let mut hi = total;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let loss = measure(&plan_for_k(cfg, &ranking, mid, bounds, non_expert), &mut cache)?;
        if loss <= p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let plan = plan_for_k(cfg, &ranking, lo, bounds, non_expert);
    let loss = measure(&plan, &mut cache)?;
    Ok((plan, loss))
}

// ============================================================================
// Storage accounting
// ============================================================================

/// Total stored bytes of the planned model: every expert at its planned
/// bitwidth plus the non-expert weights. No other terms.
pub fn plan_storage_bytes(plan: &QuantPlan, cfg: &MoEConfig) -> u64 {
    let experts: u64 = plan.expert_bits.iter().map(|&b| expert_size_bytes(cfg, b)).sum();
    experts + non_expert_size_bytes(cfg, plan.non_expert_bitwidth)
}

// ============================================================================
// Plan file
// ============================================================================

pub const PLAN_FILE_VERSION: u32 = 1;

/// On-disk plan artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanFile {
    pub version: u32,
    pub config_digest: String,
    pub p_loss: f64,
    pub measured_loss: f64,
    pub total_bytes: u64,
    pub plan: QuantPlan,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generated_at: Option<String>,
}

impl PlanFile {
    pub fn new(cfg: &MoEConfig, plan: QuantPlan, p_loss: f64, measured_loss: f64) -> PlanFile {
        let total_bytes = plan_storage_bytes(&plan, cfg);
        PlanFile {
            version: PLAN_FILE_VERSION,
            config_digest: cfg.digest(),
            p_loss,
            measured_loss,
            total_bytes,
            plan,
            generated_at: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<PlanFile> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: display.clone(), source: e })?;
        let file: PlanFile = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: display, line: None, msg: e.to_string() })?;
        if file.version != PLAN_FILE_VERSION {
            return Err(Error::VersionMismatch {
                expected: PLAN_FILE_VERSION,
                found: file.version,
                what: "plan file",
            });
        }
        Ok(file)
    }

    pub fn verify_config(&self, cfg: &MoEConfig) -> Result<()> {
        let expected = cfg.digest();
        if self.config_digest != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: self.config_digest.clone(),
                what: "plan file",
            });
        }
        self.plan.validate(cfg)
    }
}

// ============================================================================
// Tests
// ============================================================================
