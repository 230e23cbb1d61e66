//! A deterministic, randomly-initialized toy MoE network.
//!
//! The network is the measurement instrument for the offline planner: it
//! supplies an accuracy signal (head-argmax agreement against the fp32
//! reference) and organic, router-correlated activation traces. Weights are a
//! pure function of the config's seed; the model is never serialized.
//!
//! Only MoE layers carry simulated weights. The non-MoE transformer layers
//! exist solely in the byte accounting ([`crate::topology::non_expert_size_bytes`]);
//! the forward pass here runs router -> expert FFN -> residual -> RMS norm per
//! MoE layer, encoder stack first, then decoder, then a classification head.

use std::collections::HashMap;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{add_assign, argmax, relu, rms_normalize, top_k, Matrix};
use crate::quant::QuantizedMatrix;
use crate::topology::{ActivationStep, Bitwidth, ExpertRef, MoEConfig, TokenTrace, TraceSample};

/// Output classes of the toy head.
pub const TOY_CLASSES: usize = 16;

/// Mixing weight for the fresh noise injected between decoded tokens; the
/// remainder of each token's input carries over from the previous token's
/// hidden state, which is what makes consecutive tokens statistically
/// dependent the way real decoding is.
const TOKEN_NOISE: f32 = 0.35;

// ============================================================================
// Model
// ============================================================================

/// The two FFN matrices of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    /// `ffn_hidden_dim x model_dim`
    pub w1: Matrix,
    /// `model_dim x ffn_hidden_dim`
    pub w2: Matrix,
}

/// Router matrices (one per MoE layer, `experts_per_layer x model_dim`) and
/// the classification head (`TOY_CLASSES x model_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct NonExpertWeights {
    pub routers: Vec<Matrix>,
    pub head: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyMoEModel {
    pub cfg: MoEConfig,
    pub non_expert: Arc<NonExpertWeights>,
    /// Flat expert order (encoder layers first, see `MoEConfig::expert_flat_index`).
    pub experts: Vec<Arc<ExpertWeights>>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data)
}

/// Builds the model from the config seed. The draw order below is part of the
/// model's identity: routers for every MoE layer, then experts in flat order
/// (w1 before w2), then the head.
///
/// Expert `j`'s weights are scaled by `0.5 + j/E`, so experts within a layer
/// differ deliberately in magnitude and therefore in quantization sensitivity.
pub fn build_toy_model(cfg: &MoEConfig) -> Result<ToyMoEModel> {
    let cfg = cfg.clone().validated()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.model_dim;
    let h = cfg.ffn_hidden_dim;
    let e = cfg.experts_per_layer;

    let routers: Vec<Matrix> =
        (0..cfg.moe_layer_count()).map(|_| random_matrix(&mut rng, e, d, 1.0)).collect();

    let mut experts = Vec::with_capacity(cfg.total_experts());
    for _layer in 0..cfg.moe_layer_count() {
        for j in 0..e {
            let scale = 0.5 + j as f32 / e as f32;
            let w1 = random_matrix(&mut rng, h, d, scale);
            let w2 = random_matrix(&mut rng, d, h, scale);
            experts.push(Arc::new(ExpertWeights { w1, w2 }));
        }
    }

    let head = random_matrix(&mut rng, TOY_CLASSES, d, 1.0);

    Ok(ToyMoEModel { cfg, non_expert: Arc::new(NonExpertWeights { routers, head }), experts })
}

// ============================================================================
// Quantization plans
// ============================================================================

/// Per-expert bitwidth assignment plus the bitwidth of everything that is not
/// an expert (routers, head; attention in the byte accounting).
///
/// `expert_bits` is indexed by flat expert order. `bounds` records the two
/// ladder rungs the plan draws from and `low_bit_count` how many experts sit
/// at `bounds.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub expert_bits: Vec<Bitwidth>,
    pub non_expert_bitwidth: Bitwidth,
    pub low_bit_count: usize,
    pub bounds: (Bitwidth, Bitwidth),
}

impl QuantPlan {
    pub fn uniform(cfg: &MoEConfig, bits: Bitwidth) -> QuantPlan {
        QuantPlan {
            expert_bits: vec![bits; cfg.total_experts()],
            non_expert_bitwidth: Bitwidth::Fp32,
            low_bit_count: cfg.total_experts(),
            bounds: (bits, bits),
        }
    }

    pub fn all_fp32(cfg: &MoEConfig) -> QuantPlan {
        QuantPlan::uniform(cfg, Bitwidth::Fp32)
    }

    pub fn bits_at(&self, flat: usize) -> Bitwidth {
        self.expert_bits[flat]
    }

    pub fn bits_for(&self, cfg: &MoEConfig, e: ExpertRef) -> Bitwidth {
        self.expert_bits[cfg.expert_flat_index(e)]
    }

    pub fn validate(&self, cfg: &MoEConfig) -> Result<()> {
        if self.expert_bits.len() != cfg.total_experts() {
            return Err(Error::InvalidArgument(format!(
                "plan covers {} experts, config has {}",
                self.expert_bits.len(),
                cfg.total_experts()
            )));
        }
        let at_low = self.expert_bits.iter().filter(|&&b| b == self.bounds.0).count();
        if self.bounds.0 != self.bounds.1 && at_low != self.low_bit_count {
            return Err(Error::InvalidArgument(format!(
                "plan claims {} low-bit experts but {} are at {}",
                self.low_bit_count, at_low, self.bounds.0
            )));
        }
        Ok(())
    }
}

// ============================================================================
// Dequantization cache
// ============================================================================

/// Memoizes quantize->dequantize round trips so that repeated evaluations
/// (heatmap profiling, bisection) pay the quantization cost once per
/// (expert, bitwidth). Fp32 entries alias the model's own weights.
#[derive(Default)]
pub struct DequantCache {
    experts: HashMap<(usize, Bitwidth), Arc<ExpertWeights>>,
    non_expert: HashMap<Bitwidth, Arc<NonExpertWeights>>,
}

impl DequantCache {
    pub fn new() -> DequantCache {
        DequantCache::default()
    }

    pub fn expert(
        &mut self,
        model: &ToyMoEModel,
        flat: usize,
        bits: Bitwidth,
    ) -> Result<Arc<ExpertWeights>> {
        if bits == Bitwidth::Fp32 {
            return Ok(Arc::clone(&model.experts[flat]));
        }
        if let Some(w) = self.experts.get(&(flat, bits)) {
            return Ok(Arc::clone(w));
        }
        let src = &model.experts[flat];
        let w1 = QuantizedMatrix::quantize(&src.w1, bits)?.dequantize();
        let w2 = QuantizedMatrix::quantize(&src.w2, bits)?.dequantize();
        let entry = Arc::new(ExpertWeights { w1, w2 });
        self.experts.insert((flat, bits), Arc::clone(&entry));
        Ok(entry)
    }

    pub fn non_expert(
        &mut self,
        model: &ToyMoEModel,
        bits: Bitwidth,
    ) -> Result<Arc<NonExpertWeights>> {
        if bits == Bitwidth::Fp32 {
            return Ok(Arc::clone(&model.non_expert));
        }
        if let Some(w) = self.non_expert.get(&bits) {
            return Ok(Arc::clone(w));
        }
        let routers = model
            .non_expert
            .routers
            .iter()
            .map(|r| Ok(QuantizedMatrix::quantize(r, bits)?.dequantize()))
            .collect::<Result<Vec<_>>>()?;
        let head = QuantizedMatrix::quantize(&model.non_expert.head, bits)?.dequantize();
        let entry = Arc::new(NonExpertWeights { routers, head });
        self.non_expert.insert(bits, Arc::clone(&entry));
        Ok(entry)
    }
}

// ============================================================================
// Forward pass
// ============================================================================

/// Router decision at one layer: the activated experts in descending router
/// score order, plus each expert's mixing weight (1.0 for top-1, softmax over
/// the selected scores for top-2).
fn route(router: &Matrix, k: usize, x: &[f32]) -> (ActivationStep, Vec<(usize, f32)>) {
    let logits = router.matvec(x);
    let order = top_k(&logits, k);
    let mix = if k == 1 {
        vec![(order[0], 1.0)]
    } else {
        let max = logits[order[0]];
        let exps: Vec<f32> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
        let total: f32 = exps.iter().sum();
        order.iter().zip(&exps).map(|(&i, &e)| (i, e / total)).collect()
    };
    (ActivationStep::new(order), mix)
}

fn expert_apply(w: &ExpertWeights, x: &[f32]) -> Vec<f32> {
    let mut hidden = w.w1.matvec(x);
    relu(&mut hidden);
    w.w2.matvec(&hidden)
}

fn moe_layer<F>(router: &Matrix, k: usize, state: &mut Vec<f32>, mut expert_of: F) -> Result<ActivationStep>
where
    F: FnMut(usize) -> Result<Arc<ExpertWeights>>,
{
    let (step, mix) = route(router, k, state);
    let mut out = vec![0.0f32; state.len()];
    for (j, weight) in mix {
        let w = expert_of(j)?;
        let y = expert_apply(&w, state);
        for (o, v) in out.iter_mut().zip(&y) {
            *o += weight * v;
        }
    }
    add_assign(state, &out);
    rms_normalize(state);
    Ok(step)
}

/// Runs the full stack (encoder MoE layers, decoder MoE layers, head) on one
/// input vector. Returns the head logits and the activation path, one step
/// per MoE layer in flat layer order.
///
/// With a plan, expert weights and the non-expert weights (routers, head) are
/// used after a quantize->dequantize round trip at their planned bitwidths;
/// an all-fp32 plan reproduces the planless output exactly.
pub fn forward(
    model: &ToyMoEModel,
    plan: Option<&QuantPlan>,
    x: &[f32],
) -> Result<(Vec<f32>, Vec<ActivationStep>)> {
    let mut cache = DequantCache::new();
    forward_with_cache(model, plan, &mut cache, x)
}

/// [`forward`] with an external cache; use this when evaluating many inputs
/// or many plans against one model.
pub fn forward_with_cache(
    model: &ToyMoEModel,
    plan: Option<&QuantPlan>,
    cache: &mut DequantCache,
    x: &[f32],
) -> Result<(Vec<f32>, Vec<ActivationStep>)> {
    let cfg = &model.cfg;
    if x.len() != cfg.model_dim {
        return Err(Error::InvalidArgument(format!(
            "input has {} dims, model expects {}",
            x.len(),
            cfg.model_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input".to_string()));
    }
    if let Some(p) = plan {
        p.validate(cfg)?;
    }

    let ne = match plan {
        Some(p) => cache.non_expert(model, p.non_expert_bitwidth)?,
        None => Arc::clone(&model.non_expert),
    };

    let e = cfg.experts_per_layer;
    let mut state = x.to_vec();
    let mut path = Vec::with_capacity(cfg.moe_layer_count());
    for layer in 0..cfg.moe_layer_count() {
        let step = moe_layer(&ne.routers[layer], cfg.routing_k, &mut state, |j| {
            let flat = layer * e + j;
            match plan {
                Some(p) => cache.expert(model, flat, p.bits_at(flat)),
                None => Ok(Arc::clone(&model.experts[flat])),
            }
        })?;
        path.push(step);
    }
    Ok((ne.head.matvec(&state), path))
}

// ============================================================================
// Probes and agreement
// ============================================================================

/// Fixed evaluation inputs with the fp32 model's head argmax as reference.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub inputs: Vec<Vec<f32>>,
    pub reference_labels: Vec<usize>,
    pub config_digest: String,
}

/// Draws `n` RMS-normalized random probe inputs and labels them with the
/// unquantized model.
pub fn build_probes(model: &ToyMoEModel, n: usize, seed: u64) -> Result<ProbeSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("probe count must be >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.cfg.model_dim;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        rms_normalize(&mut x);
        let (logits, _) = forward(model, None, &x)?;
        labels.push(argmax(&logits));
        inputs.push(x);
    }
    Ok(ProbeSet { inputs, reference_labels: labels, config_digest: model.cfg.digest() })
}

/// Fraction of probes whose quantized forward pass lands on the same head
/// class as the fp32 reference. Accuracy loss is `1 - agreement`.
pub fn evaluate_agreement(
    model: &ToyMoEModel,
    plan: &QuantPlan,
    probes: &ProbeSet,
) -> Result<f64> {
    let mut cache = DequantCache::new();
    evaluate_agreement_with(model, plan, probes, &mut cache)
}

/// [`evaluate_agreement`] against a shared cache; the planner calls this in a
/// loop over hundreds of plans.
pub fn evaluate_agreement_with(
    model: &ToyMoEModel,
    plan: &QuantPlan,
    probes: &ProbeSet,
    cache: &mut DequantCache,
) -> Result<f64> {
    let expected = model.cfg.digest();
    if probes.config_digest != expected {
        return Err(Error::DigestMismatch {
            expected,
            found: probes.config_digest.clone(),
            what: "probes",
        });
    }
    let mut agree = 0usize;
    for (x, &label) in probes.inputs.iter().zip(&probes.reference_labels) {
        let (logits, _) = forward_with_cache(model, Some(plan), cache, x)?;
        if argmax(&logits) == label {
            agree += 1;
        }
    }
    Ok(agree as f64 / probes.inputs.len() as f64)
}

// ============================================================================
// Organic trace emission
// ============================================================================

/// Runs the fp32 model on seeded random inputs and records every routing
/// decision as a trace.
///
/// Each sample runs the encoder once; decoding then chains autoregressively:
/// token `t+1`'s input is the RMS-normalized mix of token `t`'s final hidden
/// state with a little fresh noise, so consecutive tokens follow correlated
/// activation paths rather than i.i.d. ones.
pub fn emit_trace(
    model: &ToyMoEModel,
    n_samples: usize,
    tokens_per_sample: usize,
    seed: u64,
) -> Result<TokenTrace> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = TokenTrace::new(cfg);
    let d = cfg.model_dim;
    let e = cfg.experts_per_layer;
    let ne = &model.non_expert;

    let fresh = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let mut x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        rms_normalize(&mut x);
        x
    };

    for _ in 0..n_samples {
        let mut state = fresh(&mut rng);
        let mut encoder_steps = Vec::with_capacity(cfg.encoder_moe_layers);
        for layer in 0..cfg.encoder_moe_layers {
            let step = moe_layer(&ne.routers[layer], cfg.routing_k, &mut state, |j| {
                Ok(Arc::clone(&model.experts[layer * e + j]))
            })?;
            encoder_steps.push(step);
        }

        let mut decode_tokens = Vec::with_capacity(tokens_per_sample);
        let mut carry = state;
        for _ in 0..tokens_per_sample {
            let noise = fresh(&mut rng);
            let mut tok_state: Vec<f32> =
                carry.iter().zip(&noise).map(|(c, z)| c + TOKEN_NOISE * z).collect();
            rms_normalize(&mut tok_state);

            let mut steps = Vec::with_capacity(cfg.decoder_moe_layers);
            for dl in 0..cfg.decoder_moe_layers {
                let layer = cfg.encoder_moe_layers + dl;
                let step = moe_layer(&ne.routers[layer], cfg.routing_k, &mut tok_state, |j| {
                    Ok(Arc::clone(&model.experts[layer * e + j]))
                })?;
                steps.push(step);
            }
            decode_tokens.push(steps);
            carry = tok_state;
        }

        trace.push_sample(TraceSample { encoder_steps, decode_tokens })?;
    }
    Ok(trace)
}

// ============================================================================
// Tests
// ============================================================================
