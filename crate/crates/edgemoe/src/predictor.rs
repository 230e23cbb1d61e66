//! Statistical activation prediction: a conditional table over the experts a
//! token activated at the previous decoder MoE layers, used online to decide
//! which experts to preload for the next layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{ActivationStep, ExpertRef, MoEConfig, TokenTrace};

pub const DEFAULT_HISTORY: usize = 2;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const PROFILE_VERSION: u32 = 1;

/// Minimum observations a key needs before its conditional distribution is
/// trusted over the layer marginal.
const MIN_COUNT: u64 = 1;

// ============================================================================
// Keys
// ============================================================================

/// What a prediction is conditioned on: the decoder MoE layer being predicted
/// and the activated-expert sets of up to `h` immediately preceding layers of
/// the same token, oldest first. Expert sets are stored sorted, so top-2
/// routing order does not fragment the key space.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryKey {
    pub layer: usize,
    pub steps: Vec<Vec<usize>>,
}

impl HistoryKey {
    /// Key for predicting `layer` given the token's steps so far
    /// (`steps_so_far[i]` is the step taken at decoder layer `i`). The first
    /// layer of a token has no history and yields an empty key, which always
    /// falls back to the marginal.
    pub fn for_layer(steps_so_far: &[ActivationStep], layer: usize, h: usize) -> HistoryKey {
        let take = layer.min(h).min(steps_so_far.len());
        let steps = steps_so_far[layer - take..layer].iter().map(|s| s.sorted_set()).collect();
        HistoryKey { layer, steps }
    }
}

// ============================================================================
// Profile
// ============================================================================

/// The trained table: per-key next-expert counts over decoder layers, plus
/// per-layer marginal counts. Encoder activations contribute only to the
/// encoder marginals (the buffer's frequency seed); the conditional model is
/// decoder-only because only decoding repeats per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub config_digest: String,
    pub history: usize,
    pub alpha: f64,
    pub experts_per_layer: usize,
    entries: BTreeMap<HistoryKey, Vec<u64>>,
    /// counts[layer][expert] over decoder MoE layers
    pub decoder_marginals: Vec<Vec<u64>>,
    /// counts[layer][expert] over encoder MoE layers
    pub encoder_marginals: Vec<Vec<u64>>,
}

fn smoothed(counts: &[u64], alpha: f64) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let denom = total as f64 + alpha * counts.len() as f64;
    counts.iter().map(|&c| (c as f64 + alpha) / denom).collect()
}

impl ActivationProfile {
    pub fn verify_config(&self, cfg: &MoEConfig) -> Result<()> {
        let expected = cfg.digest();
        if self.config_digest != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: self.config_digest.clone(),
                what: "activation profile",
            });
        }
        Ok(())
    }

    pub fn key_count(&self, key: &HistoryKey) -> Option<u64> {
        self.entries.get(key).map(|c| c.iter().sum())
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (&HistoryKey, &Vec<u64>)> {
        self.entries.iter()
    }

    /// Smoothed conditional distribution for a stored key.
    pub fn conditional(&self, key: &HistoryKey) -> Option<Vec<f64>> {
        self.entries.get(key).map(|c| smoothed(c, self.alpha))
    }

    /// Smoothed marginal distribution of one decoder layer.
    pub fn decoder_marginal(&self, layer: usize) -> Vec<f64> {
        smoothed(&self.decoder_marginals[layer], self.alpha)
    }
}

/// Counts layer-to-layer transitions over every decode token of `traces`.
///
/// All traces must carry the same config digest. `h` is the history window
/// (1..=3); `alpha` the Laplace smoothing added at query time. Counting is
/// insensitive to trace order.
pub fn build_profile(traces: &[TokenTrace], h: usize, alpha: f64) -> Result<ActivationProfile> {
    if !(1..=3).contains(&h) {
        return Err(Error::InvalidArgument(format!("history window {h} outside 1..=3")));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be >= 0")));
    }
    let first = traces.first().ok_or_else(|| {
        Error::InvalidArgument("cannot build a profile from zero traces".to_string())
    })?;
    for t in traces {
        if t.header.config_digest != first.header.config_digest {
            return Err(Error::DigestMismatch {
                expected: first.header.config_digest.clone(),
                found: t.header.config_digest.clone(),
                what: "trace set",
            });
        }
    }
    if traces.iter().all(|t| t.decode_token_count() == 0) {
        return Err(Error::InvalidArgument("traces contain no decode tokens".to_string()));
    }

    let e = first.header.experts_per_layer;
    let mut entries: BTreeMap<HistoryKey, Vec<u64>> = BTreeMap::new();
    let mut decoder_marginals = vec![vec![0u64; e]; first.header.decoder_moe_layers];
    let mut encoder_marginals = vec![vec![0u64; e]; first.header.encoder_moe_layers];

    for trace in traces {
        for sample in &trace.samples {
            for (layer, step) in sample.encoder_steps.iter().enumerate() {
                for &j in &step.experts {
                    encoder_marginals[layer][j] += 1;
                }
            }
            for token in &sample.decode_tokens {
                for (layer, step) in token.iter().enumerate() {
                    for &j in &step.experts {
                        decoder_marginals[layer][j] += 1;
                    }
                    if layer == 0 {
                        continue;
                    }
                    let key = HistoryKey::for_layer(token, layer, h);
                    let counts = entries.entry(key).or_insert_with(|| vec![0u64; e]);
                    for &j in &step.experts {
                        counts[j] += 1;
                    }
                }
            }
        }
    }

    Ok(ActivationProfile {
        config_digest: first.header.config_digest.clone(),
        history: h,
        alpha,
        experts_per_layer: e,
        entries,
        decoder_marginals,
        encoder_marginals,
    })
}

// ============================================================================
// Querying
// ============================================================================

/// Ranked `(expert, probability)` list for the experts of `history.layer`,
/// highest probability first, ties by expert index. Uses the key's smoothed
/// conditional when the key has been observed, the layer marginal otherwise.
/// The returned probabilities always sum to 1.
pub fn predict(profile: &ActivationProfile, history: &HistoryKey) -> Vec<(usize, f64)> {
    let probs = match profile.key_count(history) {
        Some(total) if total >= MIN_COUNT => profile.conditional(history).unwrap(),
        _ => profile.decoder_marginal(history.layer),
    };
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

/// Top-`m` prediction as decoder expert references.
pub fn preload_candidates(
    profile: &ActivationProfile,
    history: &HistoryKey,
    m: usize,
) -> Result<Vec<ExpertRef>> {
    if m == 0 || m > profile.experts_per_layer {
        return Err(Error::InvalidArgument(format!(
            "preload count {m} outside 1..={}",
            profile.experts_per_layer
        )));
    }
    Ok(predict(profile, history)
        .into_iter()
        .take(m)
        .map(|(j, _)| ExpertRef::decoder(history.layer, j))
        .collect())
}

// ============================================================================
// Merge
// ============================================================================

/// Adds the counts of two profiles built with identical settings; used to
/// extend a profile with freshly collected traces.
pub fn merge_profiles(a: &ActivationProfile, b: &ActivationProfile) -> Result<ActivationProfile> {
    if a.config_digest != b.config_digest {
        return Err(Error::DigestMismatch {
            expected: a.config_digest.clone(),
            found: b.config_digest.clone(),
            what: "profile merge",
        });
    }
    if a.history != b.history || a.alpha != b.alpha {
        return Err(Error::InvalidArgument(format!(
            "profile settings differ: h {} vs {}, alpha {} vs {}",
            a.history, b.history, a.alpha, b.alpha
        )));
    }
    let mut merged = a.clone();
    for (key, counts) in &b.entries {
        let slot = merged.entries.entry(key.clone()).or_insert_with(|| vec![0u64; b.experts_per_layer]);
        for (s, c) in slot.iter_mut().zip(counts) {
            *s += c;
        }
    }
    let add = |dst: &mut Vec<Vec<u64>>, src: &Vec<Vec<u64>>| {
        for (d, s) in dst.iter_mut().zip(src) {
            for (x, y) in d.iter_mut().zip(s) {
                *x += y;
            }
        }
    };
    add(&mut merged.decoder_marginals, &b.decoder_marginals);
    add(&mut merged.encoder_marginals, &b.encoder_marginals);
    Ok(merged)
}

// ============================================================================
// Persistence
// ============================================================================

#[derive(Serialize, Deserialize)]
struct DiskEntry {
    layer: usize,
    steps: Vec<Vec<usize>>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ProfileDisk {
    version: u32,
    config_digest: String,
    history: usize,
    alpha: f64,
    experts_per_layer: usize,
    entries: Vec<DiskEntry>,
    decoder_marginals: Vec<Vec<u64>>,
    encoder_marginals: Vec<Vec<u64>>,
}

/// Writes the profile as JSON. Entries are emitted in key order, so equal
/// profiles produce byte-identical files.
pub fn save_profile(profile: &ActivationProfile, path: &Path) -> Result<()> {
    let disk = ProfileDisk {
        version: PROFILE_VERSION,
        config_digest: profile.config_digest.clone(),
        history: profile.history,
        alpha: profile.alpha,
        experts_per_layer: profile.experts_per_layer,
        entries: profile
            .entries
            .iter()
            .map(|(k, v)| DiskEntry { layer: k.layer, steps: k.steps.clone(), counts: v.clone() })
            .collect(),
        decoder_marginals: profile.decoder_marginals.clone(),
        encoder_marginals: profile.encoder_marginals.clone(),
    };
    let text = serde_json::to_string_pretty(&disk).expect("profile serializes");
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

pub fn load_profile(path: &Path) -> Result<ActivationProfile> {
    let display = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io { path: display.clone(), source: e })?;
    let disk: ProfileDisk = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: display.clone(), line: None, msg: e.to_string() })?;
    if disk.version != PROFILE_VERSION {
        return Err(Error::VersionMismatch {
            expected: PROFILE_VERSION,
            found: disk.version,
            what: "activation profile",
        });
    }
    let mut entries = BTreeMap::new();
    for d in disk.entries {
        if d.counts.len() != disk.experts_per_layer {
            return Err(Error::Parse {
                path: display,
                line: None,
                msg: format!(
                    "entry has {} counts, profile says {} experts per layer",
                    d.counts.len(),
                    disk.experts_per_layer
                ),
            });
        }
        entries.insert(HistoryKey { layer: d.layer, steps: d.steps }, d.counts);
    }
    Ok(ActivationProfile {
        config_digest: disk.config_digest,
        history: disk.history,
        alpha: disk.alpha,
        experts_per_layer: disk.experts_per_layer,
        entries,
        decoder_marginals: disk.decoder_marginals,
        encoder_marginals: disk.encoder_marginals,
    })
}

// ============================================================================
// Tests
// ============================================================================
