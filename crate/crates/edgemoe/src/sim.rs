//! Discrete-event simulation of the decode pipeline: one compute resource,
//! one I/O resource, expert demand loads and predictive preloads, against a
//! byte budget. Produces TPOT and memory metrics per engine.
//!
//! Scheduling rules:
//! * Compute runs each layer as `attn` (router included) followed by one
//!   `expert_compute` per activated expert, in routing order; an expert's
//!   compute waits until its weights are available.
//! * A load occupies the I/O resource for
//!   `(io_request_latency + bytes/io_bandwidth) * (1 + dequant_factor)`;
//!   dequantization rides the loader, not the compute resource.
//! * I/O is non-preemptive. Demand loads for a layer are issued the moment
//!   its router resolves (end of that layer's attn), ahead of any preloads
//!   issued at the same instant.
//! * Preloads target only the next layer of the same token and are admitted
//!   only when they would finish before the next layer's expert phase starts
//!   and when the buffer would still keep `routing_k` max-size experts worth
//!   of reclaimable space. Rejected preloads cost nothing. This is what makes
//!   preloading never slower than pure demand loading.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::{BufferState, DistanceMode, Policy};
use crate::error::{Error, Result};
use crate::predictor::{preload_candidates, ActivationProfile, HistoryKey};
use crate::topology::{
    expert_size_bytes, ActivationStep, Bitwidth, ExpertRef, MoEConfig, Stage, TokenTrace,
};
use crate::toy::QuantPlan;

// ============================================================================
// Cost model
// ============================================================================

/// Latency parameters of the simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// bytes per second
    pub io_bandwidth: f64,
    /// seconds per I/O request
    pub io_request_latency: f64,
    /// seconds of non-expert compute per layer (attention, norms, router)
    pub attn_compute: f64,
    /// seconds of compute per activated expert
    pub expert_compute: f64,
    /// dequantization cost as a fraction of pure load time
    pub dequant_factor: f64,
    /// permanently resident non-expert weight bytes
    pub non_expert_resident_bytes: u64,
}

impl CostModel {
    /// Desk-scale stand-in for a Jetson-class board with an SSD: loading one
    /// fp32 expert costs about 3.2x a layer's compute.
    pub fn tx2_ssd_like(cfg: &MoEConfig) -> CostModel {
        CostModel {
            io_bandwidth: 550e6,
            io_request_latency: 2e-6,
            attn_compute: 10e-6,
            expert_compute: 5e-6,
            dequant_factor: 0.027,
            non_expert_resident_bytes: crate::topology::non_expert_size_bytes(cfg, Bitwidth::Fp32),
        }
    }

    /// Slow-storage preset: SD-card bandwidth, slower cores.
    pub fn rpi_sdcard_like(cfg: &MoEConfig) -> CostModel {
        CostModel {
            io_bandwidth: 90e6,
            io_request_latency: 10e-6,
            attn_compute: 60e-6,
            expert_compute: 30e-6,
            dequant_factor: 0.027,
            non_expert_resident_bytes: crate::topology::non_expert_size_bytes(cfg, Bitwidth::Fp32),
        }
    }

    pub fn preset(name: &str, cfg: &MoEConfig) -> Result<CostModel> {
        match name {
            "tx2-ssd-like" => Ok(CostModel::tx2_ssd_like(cfg)),
            "rpi-sdcard-like" => Ok(CostModel::rpi_sdcard_like(cfg)),
            other => Err(Error::InvalidArgument(format!(
                "unknown cost preset {other:?} (expected tx2-ssd-like|rpi-sdcard-like)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.io_bandwidth <= 0.0
            || self.io_request_latency < 0.0
            || self.attn_compute < 0.0
            || self.expert_compute < 0.0
            || self.dequant_factor < 0.0;
        if bad {
            return Err(Error::InvalidArgument(
                "cost model fields must be non-negative with positive bandwidth".to_string(),
            ));
        }
        Ok(())
    }

    /// Full I/O occupancy of one expert load, dequantization included.
    pub fn load_seconds(&self, bytes: u64) -> f64 {
        (self.io_request_latency + bytes as f64 / self.io_bandwidth) * (1.0 + self.dequant_factor)
    }
}

// ============================================================================
// Engines
// ============================================================================

/// Where each expert's stored size comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertBits {
    Uniform(Bitwidth),
    Plan(QuantPlan),
}

impl ExpertBits {
    fn size_of(&self, cfg: &MoEConfig, e: ExpertRef) -> u64 {
        match self {
            ExpertBits::Uniform(b) => expert_size_bytes(cfg, *b),
            ExpertBits::Plan(p) => expert_size_bytes(cfg, p.bits_for(cfg, e)),
        }
    }

    fn max_size(&self, cfg: &MoEConfig) -> u64 {
        match self {
            ExpertBits::Uniform(b) => expert_size_bytes(cfg, *b),
            ExpertBits::Plan(p) => {
                p.expert_bits.iter().map(|&b| expert_size_bytes(cfg, b)).max().unwrap_or(0)
            }
        }
    }
}

/// What drives preload decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorMode {
    /// Query the trained activation profile.
    Profile,
    /// Oracle that always names the next layer's true experts.
    AlwaysRight,
    /// Adversary that always names experts the next layer will not use.
    /// Also runs the buffer cold: the profile-driven warm start is a
    /// prediction too, and this mode exists to bound the worst case.
    AlwaysWrong,
}

#[derive(Debug, Clone)]
pub struct EdgeMoeEngine {
    pub plan: QuantPlan,
    pub profile: ActivationProfile,
    pub preload_m: usize,
    pub policy: Policy,
    pub distance: DistanceMode,
    pub buffer_seed: u64,
    pub predictor: PredictorMode,
}

impl EdgeMoeEngine {
    pub fn new(plan: QuantPlan, profile: ActivationProfile) -> EdgeMoeEngine {
        EdgeMoeEngine {
            plan,
            profile,
            preload_m: 1,
            policy: Policy::EdgeMoe,
            distance: DistanceMode::Printed,
            buffer_seed: 0,
            predictor: PredictorMode::Profile,
        }
    }
}

#[derive(Debug, Clone)]
pub enum EngineKind {
    /// Whole model resident; the zero-I/O lower bound.
    IoFree,
    /// Demand-load every activated expert, single-expert scratch, no reuse.
    IoExp(ExpertBits),
    /// Demand loading of uniformly int4-quantized experts.
    IoQexp,
    /// Buffer + predictive preloading.
    EdgeMoe(Box<EdgeMoeEngine>),
}

impl EngineKind {
    pub fn label(&self) -> &'static str {
        match self {
            EngineKind::IoFree => "io_free",
            EngineKind::IoExp(_) => "io_exp",
            EngineKind::IoQexp => "io_qexp",
            EngineKind::EdgeMoe(_) => "edgemoe",
        }
    }
}

// ============================================================================
// Reports and event log
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub engine: String,
    /// total decode time / decoded tokens
    pub tpot_seconds: f64,
    pub per_sample_seconds: Vec<f64>,
    pub hit_ratio: f64,
    /// Fraction of conditional predictions whose candidates covered the next
    /// layer's true experts; absent for engines that never predict.
    pub prediction_accuracy: Option<f64>,
    /// compute idle time spent waiting for expert weights
    pub io_stall_seconds: f64,
    pub peak_resident_bytes: u64,
    pub tokens: u64,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub resource: &'static str,
    pub event: String,
    pub expert: String,
}

pub fn write_event_log_csv(events: &[EventRecord], path: &Path) -> Result<()> {
    let mut text = String::from("time,resource,event,expert\n");
    for e in events {
        text.push_str(&format!("{:.9},{},{},{}\n", e.time, e.resource, e.event, e.expert));
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

// ============================================================================
// Clock
// ============================================================================

struct Clock<'l> {
    t_compute: f64,
    t_io: f64,
    io_stall: f64,
    attn: f64,
    ec: f64,
    log: Option<&'l mut Vec<EventRecord>>,
}

impl<'l> Clock<'l> {
    fn new(cost: &CostModel, log: Option<&'l mut Vec<EventRecord>>) -> Clock<'l> {
        Clock { t_compute: 0.0, t_io: 0.0, io_stall: 0.0, attn: cost.attn_compute, ec: cost.expert_compute, log }
    }

    fn push(&mut self, time: f64, resource: &'static str, event: String, expert: String) {
        if let Some(log) = self.log.as_deref_mut() {
            log.push(EventRecord { time, resource, event, expert });
        }
    }

    /// Runs one layer's non-expert compute; returns its end time (the moment
    /// the router output is known).
    fn run_attn(&mut self, who: String) -> f64 {
        let start = self.t_compute;
        let end = start + self.attn;
        self.push(start, "compute", "attn_start".into(), who.clone());
        self.push(end, "compute", "attn_end".into(), who);
        self.t_compute = end;
        end
    }

    /// Occupies I/O for `dur` seconds starting no earlier than `now`;
    /// returns the completion time.
    fn run_io(&mut self, now: f64, dur: f64, kind: &str, expert: String) -> f64 {
        let start = self.t_io.max(now);
        let end = start + dur;
        self.push(start, "io", format!("{kind}_start"), expert.clone());
        self.push(end, "io", format!("{kind}_end"), expert);
        self.t_io = end;
        end
    }

    /// Runs one expert's compute once its weights are available at `avail`;
    /// waiting counts as I/O stall.
    fn run_expert(&mut self, avail: f64, expert: String) -> f64 {
        let start = self.t_compute.max(avail);
        self.io_stall += start - self.t_compute;
        let end = start + self.ec;
        self.push(start, "compute", "expert_compute_start".into(), expert.clone());
        self.push(end, "compute", "expert_compute_end".into(), expert);
        self.t_compute = end;
        end
    }
}

fn expert_name(e: ExpertRef) -> String {
    e.to_string()
}

fn step_refs(stage: Stage, layer: usize, step: &ActivationStep) -> Vec<ExpertRef> {
    step.experts
        .iter()
        .map(|&j| match stage {
            Stage::Encoder => ExpertRef::encoder(layer, j),
            Stage::Decoder => ExpertRef::decoder(layer, j),
        })
        .collect()
}

// ============================================================================
// simulate
// ============================================================================

/// Replays a trace through one engine and cost model under `budget_bytes` of
/// memory. io_free ignores the budget; every other engine must fit its
/// resident non-expert weights plus enough expert scratch.
pub fn simulate(
    trace: &TokenTrace,
    cfg: &MoEConfig,
    engine: &EngineKind,
    cost: &CostModel,
    budget_bytes: u64,
) -> Result<SimReport> {
    simulate_logged(trace, cfg, engine, cost, budget_bytes, None)
}

pub fn simulate_logged(
    trace: &TokenTrace,
    cfg: &MoEConfig,
    engine: &EngineKind,
    cost: &CostModel,
    budget_bytes: u64,
    log: Option<&mut Vec<EventRecord>>,
) -> Result<SimReport> {
    trace.verify_config(cfg)?;
    cost.validate()?;
    if trace.decode_token_count() == 0 {
        return Err(Error::InvalidArgument("trace has no decode tokens to time".to_string()));
    }
    match engine {
        EngineKind::IoFree => run_io_free(trace, cfg, cost, log),
        EngineKind::IoExp(bits) => run_io_exp(trace, cfg, cost, budget_bytes, bits, "io_exp", log),
        EngineKind::IoQexp => run_io_exp(
            trace,
            cfg,
            cost,
            budget_bytes,
            &ExpertBits::Uniform(Bitwidth::Int4),
            "io_qexp",
            log,
        ),
        EngineKind::EdgeMoe(em) => run_edgemoe(trace, cfg, cost, budget_bytes, em, log),
    }
}

fn run_io_free(
    trace: &TokenTrace,
    cfg: &MoEConfig,
    cost: &CostModel,
    log: Option<&mut Vec<EventRecord>>,
) -> Result<SimReport> {
    let mut clock = Clock::new(cost, log);
    let mut per_sample = Vec::with_capacity(trace.samples.len());
    let mut decode_time = 0.0;
    let mut tokens = 0u64;
    let mut activations = 0u64;

    for sample in &trace.samples {
        let sample_start = clock.t_compute;
        for (l, step) in sample.encoder_steps.iter().enumerate() {
            clock.run_attn(format!("encoder/L{l}"));
            for e in step_refs(Stage::Encoder, l, step) {
                let now = clock.t_compute;
                clock.run_expert(now, expert_name(e));
                activations += 1;
            }
        }
        let decode_start = clock.t_compute;
        for token in &sample.decode_tokens {
            for (l, step) in token.iter().enumerate() {
                clock.run_attn(format!("decoder/L{l}"));
                for e in step_refs(Stage::Decoder, l, step) {
                    let now = clock.t_compute;
                    clock.run_expert(now, expert_name(e));
                    activations += 1;
                }
            }
            tokens += 1;
        }
        decode_time += clock.t_compute - decode_start;
        per_sample.push(clock.t_compute - sample_start);
    }

    let full_model = cost.non_expert_resident_bytes
        + cfg.total_experts() as u64 * expert_size_bytes(cfg, Bitwidth::Fp32);
    let _ = activations;
    Ok(SimReport {
        engine: "io_free".to_string(),
        tpot_seconds: decode_time / tokens as f64,
        per_sample_seconds: per_sample,
        hit_ratio: 1.0,
        prediction_accuracy: None,
        io_stall_seconds: clock.io_stall,
        peak_resident_bytes: full_model,
        tokens,
        samples: trace.samples.len() as u64,
    })
}

fn run_io_exp(
    trace: &TokenTrace,
    cfg: &MoEConfig,
    cost: &CostModel,
    budget_bytes: u64,
    bits: &ExpertBits,
    label: &str,
    log: Option<&mut Vec<EventRecord>>,
) -> Result<SimReport> {
    if let ExpertBits::Plan(p) = bits {
        p.validate(cfg)?;
    }
    let required = cost.non_expert_resident_bytes + bits.max_size(cfg);
    if budget_bytes < required {
        return Err(Error::BudgetInfeasible { budget_bytes, required_bytes: required });
    }

    let mut clock = Clock::new(cost, log);
    let mut per_sample = Vec::with_capacity(trace.samples.len());
    let mut decode_time = 0.0;
    let mut tokens = 0u64;
    let mut misses = 0u64;
    let mut peak_scratch = 0u64;

    let mut run_layer = |clock: &mut Clock, stage: Stage, l: usize, step: &ActivationStep| {
        clock.run_attn(format!("{stage}/L{l}"));
        // Single-expert scratch: the next load starts only after the previous
        // expert's compute releases the slot.
        for e in step_refs(stage, l, step) {
            let size = bits.size_of(cfg, e);
            peak_scratch = peak_scratch.max(size);
            let issue = clock.t_compute;
            let done = clock.run_io(issue, cost.load_seconds(size), "load", expert_name(e));
            clock.run_expert(done, expert_name(e));
            misses += 1;
        }
    };

    for sample in &trace.samples {
        let sample_start = clock.t_compute;
        for (l, step) in sample.encoder_steps.iter().enumerate() {
            run_layer(&mut clock, Stage::Encoder, l, step);
        }
        let decode_start = clock.t_compute;
        for token in &sample.decode_tokens {
            for (l, step) in token.iter().enumerate() {
                run_layer(&mut clock, Stage::Decoder, l, step);
            }
            tokens += 1;
        }
        decode_time += clock.t_compute - decode_start;
        per_sample.push(clock.t_compute - sample_start);
    }

    let _ = misses;
    Ok(SimReport {
        engine: label.to_string(),
        tpot_seconds: decode_time / tokens as f64,
        per_sample_seconds: per_sample,
        hit_ratio: 0.0,
        prediction_accuracy: None,
        io_stall_seconds: clock.io_stall,
        peak_resident_bytes: cost.non_expert_resident_bytes + peak_scratch,
        tokens,
        samples: trace.samples.len() as u64,
    })
}

struct Pending {
    expert: ExpertRef,
    completion: f64,
    size: u64,
}

fn run_edgemoe(
    trace: &TokenTrace,
    cfg: &MoEConfig,
    cost: &CostModel,
    budget_bytes: u64,
    em: &EdgeMoeEngine,
    log: Option<&mut Vec<EventRecord>>,
) -> Result<SimReport> {
    em.plan.validate(cfg)?;
    em.profile.verify_config(cfg)?;
    if em.preload_m == 0 || em.preload_m > cfg.experts_per_layer {
        return Err(Error::InvalidArgument(format!(
            "preload_m {} outside 1..={}",
            em.preload_m, cfg.experts_per_layer
        )));
    }
    let bits = ExpertBits::Plan(em.plan.clone());
    let max_size = bits.max_size(cfg);
    let required = cost.non_expert_resident_bytes + cfg.routing_k as u64 * max_size;
    if budget_bytes < required {
        return Err(Error::BudgetInfeasible { budget_bytes, required_bytes: required });
    }
    let capacity = budget_bytes - cost.non_expert_resident_bytes;

    let mut buf = BufferState::new(cfg, capacity, em.policy, em.distance, em.buffer_seed);
    if em.predictor != PredictorMode::AlwaysWrong {
        buf.seed_frequencies(&em.profile);
        buf.init_fill(cfg, |e| bits.size_of(cfg, e), Some(&em.profile))?;
    }

    let mut clock = Clock::new(cost, log);
    let mut pending: Vec<Pending> = Vec::new();
    let mut per_sample = Vec::with_capacity(trace.samples.len());
    let mut decode_time = 0.0;
    let mut tokens = 0u64;
    let mut pred_events = 0u64;
    let mut pred_correct = 0u64;

    // Moves completed transfers into the buffer. Insertion happens at flush
    // time, which is always at or after the transfer's completion.
    fn flush(buf: &mut BufferState, pending: &mut Vec<Pending>, now: f64, clock: &mut Clock) -> Result<()> {
        let mut i = 0;
        while i < pending.len() {
            if pending[i].completion <= now {
                let p = pending.remove(i);
                for victim in buf.insert(p.expert, p.size)? {
                    clock.push(now, "buffer", "evict".into(), expert_name(victim));
                }
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    for sample in &trace.samples {
        let sample_start = clock.t_compute;

        // Encoder phase: demand loading only, same buffer, no prediction.
        for (l, step) in sample.encoder_steps.iter().enumerate() {
            let now = clock.run_attn(format!("encoder/L{l}"));
            flush(&mut buf, &mut pending, now, &mut clock)?;
            let refs = step_refs(Stage::Encoder, l, step);
            for &e in &refs {
                buf.pin(e);
            }
            let mut avails = Vec::with_capacity(refs.len());
            for &e in &refs {
                let hit = buf.access(e);
                let avail = if hit {
                    now
                } else if let Some(p) = pending.iter().find(|p| p.expert == e) {
                    p.completion
                } else {
                    let size = bits.size_of(cfg, e);
                    let done = clock.run_io(now, cost.load_seconds(size), "load", expert_name(e));
                    pending.push(Pending { expert: e, completion: done, size });
                    done
                };
                avails.push(avail);
            }
            for (&e, &avail) in refs.iter().zip(&avails) {
                flush(&mut buf, &mut pending, clock.t_compute.max(avail), &mut clock)?;
                clock.run_expert(avail, expert_name(e));
            }
            for &e in &refs {
                buf.unpin(e);
            }
        }

        let decode_start = clock.t_compute;
        for token in &sample.decode_tokens {
            // Experts preloads pinned for an upcoming layer, unpinned when
            // that layer finishes.
            let mut preload_pins: BTreeMap<usize, Vec<ExpertRef>> = BTreeMap::new();
            for (l, step) in token.iter().enumerate() {
                buf.set_current_layer(l);
                let now = clock.run_attn(format!("decoder/L{l}"));
                flush(&mut buf, &mut pending, now, &mut clock)?;

                // Demand loads for this layer, issued at router resolution.
                let refs = step_refs(Stage::Decoder, l, step);
                for &e in &refs {
                    buf.pin(e);
                }
                let mut avails = Vec::with_capacity(refs.len());
                for &e in &refs {
                    let hit = buf.access(e);
                    let avail = if hit {
                        now
                    } else if let Some(p) = pending.iter().find(|p| p.expert == e) {
                        p.completion
                    } else {
                        let size = bits.size_of(cfg, e);
                        let done =
                            clock.run_io(now, cost.load_seconds(size), "load", expert_name(e));
                        pending.push(Pending { expert: e, completion: done, size });
                        done
                    };
                    avails.push(avail);
                }

                // The expert phase schedule is now fully determined, so the
                // start of the next layer's expert phase is exact.
                let mut t = clock.t_compute;
                for &avail in &avails {
                    t = t.max(avail) + cost.expert_compute;
                }
                let next_phase_start = t + cost.attn_compute;

                // Preload decision for layer l+1.
                if l + 1 < token.len() {
                    let candidates: Vec<ExpertRef> = match em.predictor {
                        PredictorMode::Profile => {
                            let key =
                                HistoryKey::for_layer(&token[..l + 1], l + 1, em.profile.history);
                            let conditional = em.profile.key_count(&key).is_some();
                            let cands = preload_candidates(&em.profile, &key, em.preload_m)?;
                            if conditional {
                                pred_events += 1;
                                let next: Vec<usize> = token[l + 1].sorted_set();
                                let covered = next
                                    .iter()
                                    .all(|&j| cands.iter().any(|c| c.expert == j));
                                if covered {
                                    pred_correct += 1;
                                }
                            }
                            cands
                        }
                        PredictorMode::AlwaysRight => {
                            pred_events += 1;
                            pred_correct += 1;
                            step_refs(Stage::Decoder, l + 1, &token[l + 1])
                                .into_iter()
                                .take(em.preload_m)
                                .collect()
                        }
                        PredictorMode::AlwaysWrong => {
                            pred_events += 1;
                            let used: Vec<usize> = token[l + 1].sorted_set();
                            (0..cfg.experts_per_layer)
                                .filter(|j| !used.contains(j))
                                .take(em.preload_m)
                                .map(|j| ExpertRef::decoder(l + 1, j))
                                .collect()
                        }
                    };

                    let reserve_floor = cfg.routing_k as u64 * max_size;
                    for cand in candidates {
                        if buf.is_resident(cand) || pending.iter().any(|p| p.expert == cand) {
                            continue;
                        }
                        let pending_bytes: u64 = pending.iter().map(|p| p.size).sum();
                        let size = bits.size_of(cfg, cand);
                        let start = clock.t_io.max(now);
                        let done = start + cost.load_seconds(size);
                        let room_after = buf
                            .reclaimable_bytes()
                            .checked_sub(pending_bytes + size)
                            .unwrap_or(0);
                        if done <= next_phase_start && room_after >= reserve_floor {
                            let done =
                                clock.run_io(now, cost.load_seconds(size), "preload", expert_name(cand));
                            buf.pin(cand);
                            preload_pins.entry(l + 1).or_default().push(cand);
                            pending.push(Pending { expert: cand, completion: done, size });
                        }
                    }
                }

                // Expert phase.
                for (&e, &avail) in refs.iter().zip(&avails) {
                    flush(&mut buf, &mut pending, clock.t_compute.max(avail), &mut clock)?;
                    clock.run_expert(avail, expert_name(e));
                }
                for &e in &refs {
                    buf.unpin(e);
                }
                if let Some(pins) = preload_pins.remove(&l) {
                    for e in pins {
                        buf.unpin(e);
                    }
                }
            }
            // Preloads targeting the token's last layer were unpinned above;
            // none target beyond it.
            tokens += 1;
        }
        decode_time += clock.t_compute - decode_start;
        per_sample.push(clock.t_compute - sample_start);
    }

    Ok(SimReport {
        engine: "edgemoe".to_string(),
        tpot_seconds: decode_time / tokens as f64,
        per_sample_seconds: per_sample,
        hit_ratio: buf.hit_ratio(),
        prediction_accuracy: if pred_events > 0 {
            Some(pred_correct as f64 / pred_events as f64)
        } else {
            None
        },
        io_stall_seconds: clock.io_stall,
        peak_resident_bytes: cost.non_expert_resident_bytes + buf.peak_used_bytes(),
        tokens,
        samples: trace.samples.len() as u64,
    })
}

// ============================================================================
// compare
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub reports: Vec<SimReport>,
    /// TPOT(io_exp) / TPOT(engine), present when io_exp was compared
    pub speedup_vs_io_exp: BTreeMap<String, f64>,
    /// TPOT(io_free) / TPOT(engine), present when io_free was compared
    pub speedup_vs_io_free: BTreeMap<String, f64>,
}

/// Runs every engine on identical inputs and derives speedup ratios.
pub fn compare_engines(
    trace: &TokenTrace,
    cfg: &MoEConfig,
    engines: &[EngineKind],
    cost: &CostModel,
    budget_bytes: u64,
) -> Result<CompareReport> {
    let mut reports = Vec::with_capacity(engines.len());
    for e in engines {
        reports.push(simulate(trace, cfg, e, cost, budget_bytes)?);
    }
    let tpot_of = |name: &str| -> Option<f64> {
        reports.iter().find(|r| r.engine == name).map(|r| r.tpot_seconds)
    };
    let mut speedup_vs_io_exp = BTreeMap::new();
    let mut speedup_vs_io_free = BTreeMap::new();
    if let Some(base) = tpot_of("io_exp") {
        for r in &reports {
            speedup_vs_io_exp.insert(r.engine.clone(), base / r.tpot_seconds);
        }
    }
    if let Some(base) = tpot_of("io_free") {
        for r in &reports {
            speedup_vs_io_free.insert(r.engine.clone(), base / r.tpot_seconds);
        }
    }
    Ok(CompareReport { reports, speedup_vs_io_exp, speedup_vs_io_free })
}

// ============================================================================
// Tests
// ============================================================================
