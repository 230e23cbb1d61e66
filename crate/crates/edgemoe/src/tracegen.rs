//! Synthetic activation traces with controllable structure.
//!
//! The power-law generator draws whole-token expert paths from a fixed
//! catalog: a small head of balanced, heavily reused paths plus a wide tail
//! of rare ones. Head paths are built by rotation so that every expert gets
//! an identical share of each layer's activations no matter how skewed the
//! path weights are; path-level concentration and expert-level balance are
//! therefore independent knobs.
//!
//! The Markov generator samples layer-to-layer expert transitions from
//! per-layer Dirichlet tables, balanced so each layer's expert marginals
//! stay uniform, and returns those tables so a learned predictor can be
//! scored against ground truth.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{ActivationStep, MoEConfig, TokenTrace, TraceSample};

/// Decode tokens per trace sample; the last sample takes the remainder.
pub const TOKENS_PER_SAMPLE: usize = 32;

const HEAD_GROUPS: usize = 2;
const TAIL_PATHS_PER_EXPERT: usize = 48;
const TAIL_MASS: f64 = 0.006;
const MARKOV_CONCENTRATION: f64 = 0.3;
/// Uniform mass mixed into every Markov row before balancing. Strict
/// positivity makes the Sinkhorn iteration converge and keeps every
/// transition observable in finite traces.
const MARKOV_UNIFORM_FLOOR: f64 = 0.1;
const SINKHORN_ITERS: usize = 200;

// ============================================================================
// Stats
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStats {
    pub tokens: u64,
    pub distinct_paths: usize,
    /// `[layer][expert]` share of that decoder layer's activations
    pub per_layer_marginals: Vec<Vec<f64>>,
    /// cumulative token share of distinct paths, most frequent first
    pub path_cdf: Vec<f64>,
}

/// Aggregates decoder-path statistics of a trace.
pub fn trace_stats(trace: &TokenTrace, cfg: &MoEConfig) -> Result<TraceStats> {
    trace.verify_config(cfg)?;
    let layers = cfg.decoder_moe_layers;
    let mut counts = vec![vec![0u64; cfg.experts_per_layer]; layers];
    let mut paths: HashMap<Vec<Vec<usize>>, u64> = HashMap::new();
    let mut tokens = 0u64;

    for sample in &trace.samples {
        for token in &sample.decode_tokens {
            tokens += 1;
            let key: Vec<Vec<usize>> = token.iter().map(|s| s.sorted_set()).collect();
            *paths.entry(key).or_insert(0) += 1;
            for (l, step) in token.iter().enumerate() {
                for &e in &step.experts {
                    counts[l][e] += 1;
                }
            }
        }
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("trace has no decode tokens".to_string()));
    }

    let per_activation = (tokens * cfg.routing_k as u64) as f64;
    let per_layer_marginals = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / per_activation).collect())
        .collect();

    let mut freqs: Vec<u64> = paths.values().copied().collect();
    freqs.sort_unstable_by(|a, b| b.cmp(a));
    let mut cum = 0u64;
    let path_cdf = freqs
        .iter()
        .map(|&f| {
            cum += f;
            cum as f64 / tokens as f64
        })
        .collect();

    Ok(TraceStats { tokens, distinct_paths: paths.len(), per_layer_marginals, path_cdf })
}

// ============================================================================
// Shared sampling helpers
// ============================================================================

fn sample_weighted(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("non-empty weights");
    let x = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

/// Deterministically balanced encoder step: rotating assignment keeps every
/// expert's share identical across samples.
fn encoder_steps_for(cfg: &MoEConfig, sample_idx: usize) -> Vec<ActivationStep> {
    (0..cfg.encoder_moe_layers)
        .map(|l| {
            let experts: Vec<usize> = (0..cfg.routing_k)
                .map(|j| (sample_idx + l + j) % cfg.experts_per_layer)
                .collect();
            ActivationStep::new(experts)
        })
        .collect()
}

fn chunk_into_samples(
    cfg: &MoEConfig,
    trace: &mut TokenTrace,
    token_paths: Vec<Vec<ActivationStep>>,
) -> Result<()> {
    for (i, chunk) in token_paths.chunks(TOKENS_PER_SAMPLE).enumerate() {
        trace.push_sample(TraceSample {
            encoder_steps: encoder_steps_for(cfg, i),
            decode_tokens: chunk.to_vec(),
        })?;
    }
    Ok(())
}

// ============================================================================
// Power-law paths
// ============================================================================

/// Draws `tokens` decode-token paths from a heavy-tailed path catalog.
///
/// The head holds `HEAD_GROUPS` rotation groups of `E` paths each; group g
/// uses stride g+1, so within every group each expert appears in exactly
/// `routing_k` paths per layer. Group weights follow `(g+1)^-zipf_s` and
/// share `1 - TAIL_MASS` of the probability; `zipf_s = 0` makes all head
/// paths equally likely. The tail splits `TAIL_MASS` uniformly across
/// `48 * E` random paths.
pub fn generate_powerlaw_trace(
    cfg: &MoEConfig,
    tokens: usize,
    zipf_s: f64,
    seed: u64,
) -> Result<TokenTrace> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("tokens must be positive".to_string()));
    }
    if !zipf_s.is_finite() || zipf_s < 0.0 {
        return Err(Error::InvalidArgument(format!("zipf_s must be finite and >= 0, got {zipf_s}")));
    }

    let e = cfg.experts_per_layer;
    let k = cfg.routing_k;
    let layers = cfg.decoder_moe_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut catalog: Vec<(Vec<ActivationStep>, f64)> = Vec::new();

    let group_raw: Vec<f64> = (0..HEAD_GROUPS).map(|g| ((g + 1) as f64).powf(-zipf_s)).collect();
    let group_total: f64 = group_raw.iter().sum();
    for (g, raw) in group_raw.iter().enumerate() {
        let stride = g + 1;
        let per_path = (1.0 - TAIL_MASS) * raw / group_total / e as f64;
        for r in 0..e {
            let path: Vec<ActivationStep> = (0..layers)
                .map(|l| {
                    let experts: Vec<usize> =
                        (0..k).map(|j| (r + stride * l + j) % e).collect();
                    ActivationStep::new(experts)
                })
                .collect();
            catalog.push((path, per_path));
        }
    }

    let tail_count = TAIL_PATHS_PER_EXPERT * e;
    let tail_weight = TAIL_MASS / tail_count as f64;
    for _ in 0..tail_count {
        let path: Vec<ActivationStep> = (0..layers)
            .map(|_| {
                let picked = rand::seq::index::sample(&mut rng, e, k).into_vec();
                ActivationStep::new(picked)
            })
            .collect();
        catalog.push((path, tail_weight));
    }

    let mut cumulative = Vec::with_capacity(catalog.len());
    let mut acc = 0.0;
    for (_, w) in &catalog {
        acc += w;
        cumulative.push(acc);
    }

    let token_paths: Vec<Vec<ActivationStep>> = (0..tokens)
        .map(|_| catalog[sample_weighted(&mut rng, &cumulative)].0.clone())
        .collect();

    let mut trace = TokenTrace::new(cfg);
    chunk_into_samples(cfg, &mut trace, token_paths)?;
    Ok(trace)
}

// ============================================================================
// Markov paths
// ============================================================================

/// Ground-truth distributions behind a Markov trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovTruth {
    /// layer-0 expert distribution
    pub initial: Vec<f64>,
    /// `transitions[l-1][prev][next]` = P(layer l uses next | layer l-1 used prev)
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl MarkovTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse { path: path.display().to_string(), line: None, msg: e.to_string() })?;
        std::fs::write(path, text)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<MarkovTruth> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), line: None, msg: e.to_string() })
    }
}

fn dirichlet_row(rng: &mut ChaCha8Rng, e: usize) -> Vec<f64> {
    let gamma = Gamma::new(MARKOV_CONCENTRATION, 1.0).expect("valid gamma shape");
    loop {
        let raw: Vec<f64> = (0..e).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 1e-12 {
            return raw
                .into_iter()
                .map(|x| (1.0 - MARKOV_UNIFORM_FLOOR) * x / sum + MARKOV_UNIFORM_FLOOR / e as f64)
                .collect();
        }
    }
}

/// Rescales a strictly positive table until rows and columns both sum to 1.
/// Rows stay skewed, but a uniform input marginal maps to a uniform output
/// marginal, so every expert is conditioned on equally often at every layer.
fn sinkhorn_balance(table: &mut [Vec<f64>]) {
    let e = table.len();
    for _ in 0..SINKHORN_ITERS {
        for j in 0..e {
            let col: f64 = table.iter().map(|row| row[j]).sum();
            for row in table.iter_mut() {
                row[j] /= col;
            }
        }
        for row in table.iter_mut() {
            let sum: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }
}

/// Generates tokens whose layer-l expert depends only on the layer-(l-1)
/// expert, via per-layer Dirichlet-sampled transition tables balanced to
/// doubly stochastic. Restricted to `routing_k = 1`: transition truth is a
/// distribution over single experts.
pub fn generate_markov_trace(
    cfg: &MoEConfig,
    tokens: usize,
    seed: u64,
) -> Result<(TokenTrace, MarkovTruth)> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("tokens must be positive".to_string()));
    }
    if cfg.routing_k != 1 {
        return Err(Error::InfeasibleGeneration(format!(
            "markov generation requires routing_k = 1, config has {}",
            cfg.routing_k
        )));
    }

    let e = cfg.experts_per_layer;
    let layers = cfg.decoder_moe_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let initial = vec![1.0 / e as f64; e];
    let transitions: Vec<Vec<Vec<f64>>> = (1..layers)
        .map(|_| {
            let mut table: Vec<Vec<f64>> = (0..e).map(|_| dirichlet_row(&mut rng, e)).collect();
            sinkhorn_balance(&mut table);
            table
        })
        .collect();

    let cum = |probs: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    };
    let initial_cum = cum(&initial);
    let transition_cums: Vec<Vec<Vec<f64>>> = transitions
        .iter()
        .map(|table| table.iter().map(|row| cum(row)).collect())
        .collect();

    let token_paths: Vec<Vec<ActivationStep>> = (0..tokens)
        .map(|_| {
            let mut path = Vec::with_capacity(layers);
            let mut prev = sample_weighted(&mut rng, &initial_cum);
            path.push(ActivationStep::new(vec![prev]));
            for table in &transition_cums {
                prev = sample_weighted(&mut rng, &table[prev]);
                path.push(ActivationStep::new(vec![prev]));
            }
            path
        })
        .collect();

    let mut trace = TokenTrace::new(cfg);
    chunk_into_samples(cfg, &mut trace, token_paths)?;
    Ok((trace, MarkovTruth { initial, transitions }))
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MoEConfig {
        MoEConfig::toy_default(7)
    }

    #[test]
    fn powerlaw_is_deterministic_per_seed() {
        let cfg = cfg();
        let a = generate_powerlaw_trace(&cfg, 500, 1.2, 3).unwrap();
        let b = generate_powerlaw_trace(&cfg, 500, 1.2, 3).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_powerlaw_trace(&cfg, 500, 1.2, 4).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn default_powerlaw_concentrates_paths_and_balances_experts() {
        let cfg = cfg();
        let trace = generate_powerlaw_trace(&cfg, 20_000, 1.2, 0).unwrap();
        let stats = trace_stats(&trace, &cfg).unwrap();
        assert_eq!(stats.tokens, 20_000);

        let top = (stats.distinct_paths as f64 * 0.2).ceil() as usize;
        assert!(
            stats.path_cdf[top - 1] >= 0.99,
            "top 20% ({} of {}) carry only {}",
            top,
            stats.distinct_paths,
            stats.path_cdf[top - 1]
        );

        let uniform = 1.0 / cfg.experts_per_layer as f64;
        for (l, row) in stats.per_layer_marginals.iter().enumerate() {
            for (e, &m) in row.iter().enumerate() {
                assert!(
                    (m - uniform).abs() <= 0.25 * uniform,
                    "layer {l} expert {e} marginal {m} vs uniform {uniform}"
                );
            }
        }
    }

    #[test]
    fn zipf_zero_flattens_head_paths() {
        let cfg = cfg();
        let trace = generate_powerlaw_trace(&cfg, 20_000, 0.0, 1).unwrap();
        let stats = trace_stats(&trace, &cfg).unwrap();
        // 16 head paths at ~1243 tokens each; tail paths are ~1-token noise.
        let head = HEAD_GROUPS * cfg.experts_per_layer;
        let mut shares: Vec<f64> = Vec::with_capacity(head);
        let mut prev = 0.0;
        for &c in stats.path_cdf.iter().take(head) {
            shares.push(c - prev);
            prev = c;
        }
        let max = shares.iter().cloned().fold(f64::MIN, f64::max);
        let min = shares.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.3, "head shares spread too wide: {min}..{max}");
        assert!(prev > 0.99);
    }

    #[test]
    fn zipf_skews_head_path_mass() {
        let cfg = cfg();
        let flat = generate_powerlaw_trace(&cfg, 20_000, 0.0, 2).unwrap();
        let skew = generate_powerlaw_trace(&cfg, 20_000, 2.0, 2).unwrap();
        let top_flat = trace_stats(&flat, &cfg).unwrap().path_cdf[7];
        let top_skew = trace_stats(&skew, &cfg).unwrap().path_cdf[7];
        assert!(
            top_skew > top_flat + 0.1,
            "zipf_s=2 top-8 mass {top_skew} should exceed flat {top_flat}"
        );
    }

    #[test]
    fn powerlaw_supports_top2_routing() {
        let mut cfg = cfg();
        cfg.routing_k = 2;
        let trace = generate_powerlaw_trace(&cfg, 8_000, 1.2, 5).unwrap();
        let stats = trace_stats(&trace, &cfg).unwrap();
        for row in &stats.per_layer_marginals {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let uniform = 1.0 / cfg.experts_per_layer as f64;
            for &m in row {
                assert!((m - uniform).abs() <= 0.25 * uniform);
            }
        }
        for sample in &trace.samples {
            for token in &sample.decode_tokens {
                for step in token {
                    assert_eq!(step.experts.len(), 2);
                }
            }
        }
    }

    #[test]
    fn trace_shape_and_encoder_steps_are_complete() {
        let cfg = cfg();
        let trace = generate_powerlaw_trace(&cfg, 70, 1.2, 0).unwrap();
        assert_eq!(trace.samples.len(), 3);
        assert_eq!(trace.samples[0].decode_tokens.len(), TOKENS_PER_SAMPLE);
        assert_eq!(trace.samples[2].decode_tokens.len(), 70 - 2 * TOKENS_PER_SAMPLE);
        for sample in &trace.samples {
            assert_eq!(sample.encoder_steps.len(), cfg.encoder_moe_layers);
            for token in &sample.decode_tokens {
                assert_eq!(token.len(), cfg.decoder_moe_layers);
            }
        }
        let stats = trace_stats(&trace, &cfg).unwrap();
        assert_eq!(*stats.path_cdf.last().unwrap(), 1.0);
    }

    #[test]
    fn powerlaw_rejects_bad_arguments() {
        let cfg = cfg();
        assert!(matches!(
            generate_powerlaw_trace(&cfg, 0, 1.2, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_powerlaw_trace(&cfg, 10, -0.5, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_powerlaw_trace(&cfg, 10, f64::NAN, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn markov_truth_rows_are_distributions() {
        let cfg = cfg();
        let (_, truth) = generate_markov_trace(&cfg, 100, 11).unwrap();
        assert_eq!(truth.initial.len(), cfg.experts_per_layer);
        assert!((truth.initial.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(truth.transitions.len(), cfg.decoder_moe_layers - 1);
        for table in &truth.transitions {
            assert_eq!(table.len(), cfg.experts_per_layer);
            for row in table {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn markov_trace_follows_its_truth_tables() {
        let cfg = cfg();
        let (trace, truth) = generate_markov_trace(&cfg, 20_000, 13).unwrap();
        // Empirical transition rows with enough observations should approach
        // the sampled tables.
        let e = cfg.experts_per_layer;
        let mut counts = vec![vec![vec![0u64; e]; e]; cfg.decoder_moe_layers - 1];
        for sample in &trace.samples {
            for token in &sample.decode_tokens {
                for l in 1..token.len() {
                    let prev = token[l - 1].experts[0];
                    let next = token[l].experts[0];
                    counts[l - 1][prev][next] += 1;
                }
            }
        }
        let mut checked = 0;
        for (l, table) in counts.iter().enumerate() {
            for (prev, row) in table.iter().enumerate() {
                let n: u64 = row.iter().sum();
                if n < 300 {
                    continue;
                }
                let l1: f64 = row
                    .iter()
                    .zip(&truth.transitions[l][prev])
                    .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
                    .sum();
                assert!(l1 <= 0.1, "layer {} prev {} l1 {} over {} obs", l + 1, prev, l1, n);
                checked += 1;
            }
        }
        assert!(checked >= 10, "only {checked} rows had enough observations");
    }

    #[test]
    fn markov_is_deterministic_and_k1_only() {
        let cfg = cfg();
        let (a, ta) = generate_markov_trace(&cfg, 200, 5).unwrap();
        let (b, tb) = generate_markov_trace(&cfg, 200, 5).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(ta.initial, tb.initial);

        let mut k2 = cfg.clone();
        k2.routing_k = 2;
        assert!(matches!(
            generate_markov_trace(&k2, 10, 0),
            Err(Error::InfeasibleGeneration(_))
        ));
    }

    #[test]
    fn markov_truth_round_trips_through_json() {
        let cfg = cfg();
        let (_, truth) = generate_markov_trace(&cfg, 50, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        truth.save(&path).unwrap();
        let back = MarkovTruth::load(&path).unwrap();
        assert_eq!(truth.initial, back.initial);
        assert_eq!(truth.transitions, back.transitions);
    }
}
