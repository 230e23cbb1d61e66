//! Model shape, expert addressing, bitwidths, and the routing-trace format.
//!
//! Everything downstream (quantizer, planner, buffer, simulator) is addressed
//! in terms of the types here: a [`MoEConfig`] describing an encoder-decoder
//! MoE transformer, [`ExpertRef`] naming one expert FFN, and [`TokenTrace`]
//! holding which experts each token activated per MoE layer.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

// ============================================================================
// Stage / ExpertRef
// ============================================================================

/// Which half of an encoder-decoder stack a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Encoder => write!(f, "encoder"),
            Stage::Decoder => write!(f, "decoder"),
        }
    }
}

/// Identity of one expert: stage, MoE-layer index within that stage (0-based),
/// and expert index within the layer.
///
/// The derived ordering (stage, layer, expert) is the tie-break order used by
/// eviction and ranking code everywhere in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertRef {
    pub stage: Stage,
    pub moe_layer: usize,
    pub expert: usize,
}

impl ExpertRef {
    pub fn encoder(moe_layer: usize, expert: usize) -> Self {
        ExpertRef { stage: Stage::Encoder, moe_layer, expert }
    }

    pub fn decoder(moe_layer: usize, expert: usize) -> Self {
        ExpertRef { stage: Stage::Decoder, moe_layer, expert }
    }
}

impl fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/L{}/E{}", self.stage, self.moe_layer, self.expert)
    }
}

// ============================================================================
// Bitwidth
// ============================================================================

/// Storage precision for a weight tensor. The variants are declared in ladder
/// order, so the derived `Ord` ranks them from coarsest to finest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bitwidth {
    Int2,
    Int4,
    Int8,
    Fp16,
    Fp32,
}

/// All bitwidths, coarsest first.
pub const BITWIDTH_LADDER: [Bitwidth; 5] =
    [Bitwidth::Int2, Bitwidth::Int4, Bitwidth::Int8, Bitwidth::Fp16, Bitwidth::Fp32];

impl Bitwidth {
    pub fn bits(self) -> u64 {
        match self {
            Bitwidth::Int2 => 2,
            Bitwidth::Int4 => 4,
            Bitwidth::Int8 => 8,
            Bitwidth::Fp16 => 16,
            Bitwidth::Fp32 => 32,
        }
    }

    /// True for the symmetric integer codings that go through the quantizer.
    pub fn is_integer(self) -> bool {
        matches!(self, Bitwidth::Int2 | Bitwidth::Int4 | Bitwidth::Int8)
    }

    /// Largest code magnitude for an integer bitwidth: `2^(b-1) - 1`.
    /// Int2 therefore codes onto {-1, 0, 1}.
    pub fn code_max(self) -> Option<i32> {
        if self.is_integer() {
            Some((1 << (self.bits() - 1)) - 1)
        } else {
            None
        }
    }

    pub fn parse(s: &str) -> Result<Bitwidth> {
        match s.to_ascii_lowercase().as_str() {
            "int2" => Ok(Bitwidth::Int2),
            "int4" => Ok(Bitwidth::Int4),
            "int8" => Ok(Bitwidth::Int8),
            "fp16" => Ok(Bitwidth::Fp16),
            "fp32" => Ok(Bitwidth::Fp32),
            other => Err(Error::InvalidArgument(format!(
                "unknown bitwidth {other:?} (expected int2|int4|int8|fp16|fp32)"
            ))),
        }
    }
}

impl fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bitwidth::Int2 => write!(f, "int2"),
            Bitwidth::Int4 => write!(f, "int4"),
            Bitwidth::Int8 => write!(f, "int8"),
            Bitwidth::Fp16 => write!(f, "fp16"),
            Bitwidth::Fp32 => write!(f, "fp32"),
        }
    }
}

// ============================================================================
// MoEConfig
// ============================================================================

/// Shape of the MoE transformer under study.
///
/// `encoder_moe_layers` of the `encoder_layers` encoder layers carry an expert
/// block, likewise for the decoder. Every expert FFN maps `model_dim` ->
/// `ffn_hidden_dim` -> `model_dim`. `seed` drives all weight generation for
/// the toy model built from this config, so it is part of the identity hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub encoder_layers: usize,
    pub encoder_moe_layers: usize,
    pub decoder_layers: usize,
    pub decoder_moe_layers: usize,
    pub experts_per_layer: usize,
    pub routing_k: usize,
    pub model_dim: usize,
    pub ffn_hidden_dim: usize,
    pub seed: u64,
}

impl MoEConfig {
    /// Small encoder-decoder shape used throughout the tests: 6 of 12 layers
    /// on each side carry 8 experts with top-1 routing.
    pub fn toy_default(seed: u64) -> MoEConfig {
        MoEConfig {
            encoder_layers: 12,
            encoder_moe_layers: 6,
            decoder_layers: 12,
            decoder_moe_layers: 6,
            experts_per_layer: 8,
            routing_k: 1,
            model_dim: 32,
            ffn_hidden_dim: 64,
            seed,
        }
    }

    /// Returns a list of invariant violations, empty when the config is sound.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.encoder_moe_layers > self.encoder_layers {
            v.push(format!(
                "encoder_moe_layers ({}) exceeds encoder_layers ({})",
                self.encoder_moe_layers, self.encoder_layers
            ));
        }
        if self.decoder_moe_layers > self.decoder_layers {
            v.push(format!(
                "decoder_moe_layers ({}) exceeds decoder_layers ({})",
                self.decoder_moe_layers, self.decoder_layers
            ));
        }
        if self.decoder_moe_layers == 0 {
            v.push("decoder_moe_layers must be >= 1".to_string());
        }
        if self.experts_per_layer < 2 {
            v.push(format!("experts_per_layer ({}) must be >= 2", self.experts_per_layer));
        }
        if self.routing_k < 1 || self.routing_k > self.experts_per_layer {
            v.push(format!(
                "routing_k ({}) must be in 1..={}",
                self.routing_k, self.experts_per_layer
            ));
        }
        if self.model_dim == 0 || self.ffn_hidden_dim == 0 {
            v.push("model_dim and ffn_hidden_dim must be nonzero".to_string());
        }
        v
    }

    pub fn validated(self) -> Result<MoEConfig> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn from_file(path: &Path) -> Result<MoEConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        let cfg: MoEConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: None,
            msg: e.to_string(),
        })?;
        cfg.validated()
    }

    /// Hash of all config fields; artifacts carry it so that a trace, plan, or
    /// predictor profile built for one model cannot silently be used with
    /// another.
    pub fn digest(&self) -> String {
        let canonical = format!(
            "enc={} encmoe={} dec={} decmoe={} experts={} k={} d={} h={} seed={}",
            self.encoder_layers,
            self.encoder_moe_layers,
            self.decoder_layers,
            self.decoder_moe_layers,
            self.experts_per_layer,
            self.routing_k,
            self.model_dim,
            self.ffn_hidden_dim,
            self.seed
        );
        let hash = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(32);
        for byte in hash.iter().take(16) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn moe_layer_count(&self) -> usize {
        self.encoder_moe_layers + self.decoder_moe_layers
    }

    pub fn total_experts(&self) -> usize {
        self.moe_layer_count() * self.experts_per_layer
    }

    /// Flat MoE-layer index: encoder MoE layers first, then decoder.
    pub fn flat_layer(&self, stage: Stage, moe_layer: usize) -> usize {
        match stage {
            Stage::Encoder => {
                debug_assert!(moe_layer < self.encoder_moe_layers);
                moe_layer
            }
            Stage::Decoder => {
                debug_assert!(moe_layer < self.decoder_moe_layers);
                self.encoder_moe_layers + moe_layer
            }
        }
    }

    pub fn stage_of_flat_layer(&self, flat: usize) -> (Stage, usize) {
        if flat < self.encoder_moe_layers {
            (Stage::Encoder, flat)
        } else {
            (Stage::Decoder, flat - self.encoder_moe_layers)
        }
    }

    /// Flat expert index in (stage, layer, expert) order. This is the storage
    /// order of every per-expert array in the crate.
    pub fn expert_flat_index(&self, e: ExpertRef) -> usize {
        self.flat_layer(e.stage, e.moe_layer) * self.experts_per_layer + e.expert
    }

    pub fn expert_at(&self, flat: usize) -> ExpertRef {
        let (stage, moe_layer) = self.stage_of_flat_layer(flat / self.experts_per_layer);
        ExpertRef { stage, moe_layer, expert: flat % self.experts_per_layer }
    }

    /// All experts in flat order.
    pub fn experts(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        (0..self.total_experts()).map(|i| self.expert_at(i))
    }
}

// ============================================================================
// Byte accounting
// ============================================================================

fn matrix_size_bytes(rows: u64, cols: u64, bitwidth: Bitwidth) -> u64 {
    // Codes are packed contiguously across channel boundaries; each output
    // channel (row) additionally stores one fp16 scale.
    let weight_bits = rows * cols * bitwidth.bits();
    weight_bits.div_ceil(8) + 2 * rows
}

/// Stored size of one expert at the given bitwidth: two weight matrices
/// (`ffn_hidden_dim x model_dim` and `model_dim x ffn_hidden_dim`), each with
/// a per-output-channel fp16 scale. The scale channel is accounted uniformly
/// at every bitwidth so that sizes stay comparable across a mixed plan.
pub fn expert_size_bytes(cfg: &MoEConfig, bitwidth: Bitwidth) -> u64 {
    let d = cfg.model_dim as u64;
    let h = cfg.ffn_hidden_dim as u64;
    matrix_size_bytes(h, d, bitwidth) + matrix_size_bytes(d, h, bitwidth)
}

/// Stored size of the non-expert ("hot") weights at the given bitwidth.
///
/// Attention and other dense blocks are modeled as four `d x d` matrices per
/// transformer layer plus one `experts_per_layer x d` router per MoE layer;
/// the classification head of the toy model is excluded because its width is
/// not part of the config.
pub fn non_expert_size_bytes(cfg: &MoEConfig, bitwidth: Bitwidth) -> u64 {
    let d = cfg.model_dim as u64;
    let e = cfg.experts_per_layer as u64;
    let layers = (cfg.encoder_layers + cfg.decoder_layers) as u64;
    let moe_layers = cfg.moe_layer_count() as u64;
    let weights = layers * 4 * d * d + moe_layers * e * d;
    let channels = layers * 4 * d + moe_layers * e;
    (weights * bitwidth.bits()).div_ceil(8) + 2 * channels
}

// ============================================================================
// Activation traces
// ============================================================================

/// Experts activated at one MoE layer for one token, in routing order
/// (highest router logit first). Consumers that need set semantics call
/// [`ActivationStep::sorted_set`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivationStep {
    pub experts: Vec<usize>,
}

impl ActivationStep {
    pub fn new(experts: Vec<usize>) -> Self {
        ActivationStep { experts }
    }

    pub fn sorted_set(&self) -> Vec<usize> {
        let mut s = self.experts.clone();
        s.sort_unstable();
        s
    }

    fn check(&self, experts_per_layer: usize, routing_k: usize) -> std::result::Result<(), String> {
        if self.experts.len() != routing_k {
            return Err(format!(
                "step has {} experts, routing_k is {}",
                self.experts.len(),
                routing_k
            ));
        }
        let distinct: BTreeSet<usize> = self.experts.iter().copied().collect();
        if distinct.len() != self.experts.len() {
            return Err("step lists the same expert twice".to_string());
        }
        if let Some(&bad) = self.experts.iter().find(|&&e| e >= experts_per_layer) {
            return Err(format!("expert index {bad} out of range 0..{experts_per_layer}"));
        }
        Ok(())
    }
}

/// One traced request: the encoder activations (once per sample) and the
/// decoder activations for each generated token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSample {
    /// One step per encoder MoE layer.
    pub encoder_steps: Vec<ActivationStep>,
    /// Per decoded token, one step per decoder MoE layer.
    pub decode_tokens: Vec<Vec<ActivationStep>>,
}

/// First line of a trace file; binds the trace to the config that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config_digest: String,
    pub routing_k: usize,
    pub encoder_moe_layers: usize,
    pub decoder_moe_layers: usize,
    pub experts_per_layer: usize,
}

/// A routing trace: JSON Lines on disk, header first, one sample per line.
/// Layer indices are 0-based throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTrace {
    pub header: TraceHeader,
    pub samples: Vec<TraceSample>,
}

impl TokenTrace {
    pub fn new(cfg: &MoEConfig) -> TokenTrace {
        TokenTrace {
            header: TraceHeader {
                config_digest: cfg.digest(),
                routing_k: cfg.routing_k,
                encoder_moe_layers: cfg.encoder_moe_layers,
                decoder_moe_layers: cfg.decoder_moe_layers,
                experts_per_layer: cfg.experts_per_layer,
            },
            samples: Vec::new(),
        }
    }

    pub fn decode_token_count(&self) -> usize {
        self.samples.iter().map(|s| s.decode_tokens.len()).sum()
    }

    /// Errors unless the trace was produced for exactly this config.
    pub fn verify_config(&self, cfg: &MoEConfig) -> Result<()> {
        let expected = cfg.digest();
        if self.header.config_digest != expected {
            return Err(Error::DigestMismatch {
                expected,
                found: self.header.config_digest.clone(),
                what: "trace",
            });
        }
        Ok(())
    }

    fn check_sample(&self, sample: &TraceSample) -> std::result::Result<(), String> {
        if sample.encoder_steps.len() != self.header.encoder_moe_layers {
            return Err(format!(
                "sample has {} encoder steps, config has {} encoder MoE layers",
                sample.encoder_steps.len(),
                self.header.encoder_moe_layers
            ));
        }
        for step in &sample.encoder_steps {
            step.check(self.header.experts_per_layer, self.header.routing_k)?;
        }
        for token in &sample.decode_tokens {
            if token.len() != self.header.decoder_moe_layers {
                return Err(format!(
                    "token has {} decoder steps, config has {} decoder MoE layers",
                    token.len(),
                    self.header.decoder_moe_layers
                ));
            }
            for step in token {
                step.check(self.header.experts_per_layer, self.header.routing_k)?;
            }
        }
        Ok(())
    }

    pub fn push_sample(&mut self, sample: TraceSample) -> Result<()> {
        self.check_sample(&sample)
            .map_err(|msg| Error::InvalidArgument(format!("bad trace sample: {msg}")))?;
        self.samples.push(sample);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(w, "{header}").map_err(io_err)?;
        for sample in &self.samples {
            let line = serde_json::to_string(sample).expect("sample serializes");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<TokenTrace> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io { path: display.clone(), source: e })?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let header: TraceHeader = match lines.next() {
            Some((_, Ok(line))) => serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: display.clone(),
                line: Some(1),
                msg: format!("bad trace header: {e}"),
            })?,
            Some((_, Err(e))) => return Err(Error::Io { path: display, source: e }),
            None => {
                return Err(Error::Parse {
                    path: display,
                    line: Some(1),
                    msg: "empty trace file".to_string(),
                })
            }
        };

        let mut trace = TokenTrace { header, samples: Vec::new() };
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Io { path: display.clone(), source: e })?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: TraceSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: display.clone(),
                line: Some(lineno),
                msg: e.to_string(),
            })?;
            trace.check_sample(&sample).map_err(|msg| Error::Parse {
                path: display.clone(),
                line: Some(lineno),
                msg,
            })?;
            trace.samples.push(sample);
        }
        Ok(trace)
    }
}

// ============================================================================
// Tests
// ============================================================================
