//! Channel-wise symmetric weight quantization.
//!
//! Integer bitwidths code each output channel (matrix row) as
//! `w ~= code * scale` with `scale = max|w| / code_max` stored in fp16.
//! There is no zero point; the code range is symmetric, so int2 uses only
//! {-1, 0, 1}. fp16 rounds weights to half precision, fp32 stores them as-is.

use half::f16;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::topology::Bitwidth;

// ============================================================================
// Channel quantization
// ============================================================================

/// One quantized output channel: integer codes plus the fp16-rounded scale.
/// An all-zero channel keeps `scale == 0.0` and all-zero codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChannel {
    pub codes: Vec<i8>,
    pub scale: f32,
    pub bitwidth: Bitwidth,
}

impl QuantizedChannel {
    pub fn dequantize(&self) -> Vec<f32> {
        self.codes.iter().map(|&c| c as f32 * self.scale).collect()
    }
}

/// Quantizes one channel at an integer bitwidth.
///
/// The scale is rounded to fp16 *before* the codes are computed, so the codes
/// compensate for the scale's storage error. Rounding is half-away-from-zero.
pub fn quantize_channel(weights: &[f32], bitwidth: Bitwidth) -> Result<QuantizedChannel> {
    let code_max = bitwidth.code_max().ok_or(Error::NotQuantizable(bitwidth))? as f32;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFiniteWeight);
    }
    let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Ok(QuantizedChannel { codes: vec![0; weights.len()], scale: 0.0, bitwidth });
    }
    let scale = f16::from_f32(max_abs / code_max).to_f32();
    let codes = weights
        .iter()
        .map(|&w| {
            let q = (w / scale).round();
            debug_assert!(
                q.abs() <= code_max,
                "code {q} exceeds +-{code_max} for weight {w} at scale {scale}"
            );
            q.clamp(-code_max, code_max) as i8
        })
        .collect();
    Ok(QuantizedChannel { codes, scale, bitwidth })
}

// ============================================================================
// Matrix quantization
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Int(Vec<QuantizedChannel>),
    F16(Vec<f16>),
    F32(Vec<f32>),
}

/// A weight matrix stored at some bitwidth. Rows are the output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bitwidth: Bitwidth,
    repr: Repr,
}

impl QuantizedMatrix {
    pub fn quantize(m: &Matrix, bitwidth: Bitwidth) -> Result<QuantizedMatrix> {
        let repr = match bitwidth {
            Bitwidth::Int2 | Bitwidth::Int4 | Bitwidth::Int8 => {
                let mut channels = Vec::with_capacity(m.rows);
                for r in 0..m.rows {
                    channels.push(quantize_channel(m.row(r), bitwidth)?);
                }
                Repr::Int(channels)
            }
            Bitwidth::Fp16 => {
                if m.data.iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFiniteWeight);
                }
                Repr::F16(m.data.iter().map(|&w| f16::from_f32(w)).collect())
            }
            Bitwidth::Fp32 => {
                if m.data.iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFiniteWeight);
                }
                Repr::F32(m.data.clone())
            }
        };
        Ok(QuantizedMatrix { rows: m.rows, cols: m.cols, bitwidth, repr })
    }

    pub fn dequantize(&self) -> Matrix {
        let data = match &self.repr {
            Repr::Int(channels) => {
                let mut data = Vec::with_capacity(self.rows * self.cols);
                for ch in channels {
                    data.extend(ch.dequantize());
                }
                data
            }
            Repr::F16(h) => h.iter().map(|v| v.to_f32()).collect(),
            Repr::F32(d) => d.clone(),
        };
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn channel(&self, r: usize) -> Option<&QuantizedChannel> {
        match &self.repr {
            Repr::Int(channels) => Some(&channels[r]),
            _ => None,
        }
    }

    /// Stored size: codes packed contiguously at `bits` per weight, plus one
    /// fp16 scale per row. Matches the planner's byte accounting exactly.
    pub fn size_bytes(&self) -> u64 {
        let weight_bits = (self.rows * self.cols) as u64 * self.bitwidth.bits();
        weight_bits.div_ceil(8) + 2 * self.rows as u64
    }
}

// ============================================================================
// Expert quantization
// ============================================================================

/// Both FFN matrices of one expert at a single bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedExpert {
    /// `ffn_hidden_dim x model_dim`
    pub w1: QuantizedMatrix,
    /// `model_dim x ffn_hidden_dim`
    pub w2: QuantizedMatrix,
}

impl QuantizedExpert {
    pub fn quantize(w1: &Matrix, w2: &Matrix, bitwidth: Bitwidth) -> Result<QuantizedExpert> {
        Ok(QuantizedExpert {
            w1: QuantizedMatrix::quantize(w1, bitwidth)?,
            w2: QuantizedMatrix::quantize(w2, bitwidth)?,
        })
    }

    pub fn bitwidth(&self) -> Bitwidth {
        self.w1.bitwidth
    }

    pub fn size_bytes(&self) -> u64 {
        self.w1.size_bytes() + self.w2.size_bytes()
    }
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{expert_size_bytes, MoEConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn int4_channel_matches_hand_computation() {
        // max|w| = 1.0, scale = fp16(1/7) = 0.142822265625 exactly; codes are
        // round(w/scale): 3.5009 -> 4, -7.0017 -> -7, 1.7504 -> 2.
        let ch = quantize_channel(&[0.5, -1.0, 0.25], Bitwidth::Int4).unwrap();
        assert_eq!(ch.scale, 0.142822265625);
        assert_eq!(ch.codes, vec![4, -7, 2]);
        let deq = ch.dequantize();
        assert_eq!(deq, vec![0.5712890625, -0.999755859375, 0.28564453125]);
        for (w, d) in [0.5f32, -1.0, 0.25].iter().zip(&deq) {
            assert!((w - d).abs() <= ch.scale * 0.5);
        }
    }

    #[test]
    fn identity_rows_quantize_to_their_own_values() {
        let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let q = QuantizedMatrix::quantize(&m, Bitwidth::Int2).unwrap();
        for r in 0..2 {
            let ch = q.channel(r).unwrap();
            assert_eq!(ch.scale, 1.0);
        }
        assert_eq!(q.dequantize(), m);
    }

    #[test]
    fn int2_codes_stay_in_ternary_range() {
        let ch = quantize_channel(&[0.7, -0.7, 0.2, 0.0], Bitwidth::Int2).unwrap();
        assert!(ch.codes.iter().all(|c| (-1..=1).contains(c)));
        assert_eq!(ch.codes, vec![1, -1, 0, 0]);
    }

    #[test]
    fn all_zero_channel_uses_zero_scale_sentinel() {
        let ch = quantize_channel(&[0.0; 5], Bitwidth::Int8).unwrap();
        assert_eq!(ch.scale, 0.0);
        assert_eq!(ch.dequantize(), vec![0.0; 5]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // scale is exactly 0.5 (fp16-representable): max|w| = 63.5 at int8.
        let mut w = vec![0.25, -0.25, 0.75, -0.75];
        w.push(63.5);
        let ch = quantize_channel(&w, Bitwidth::Int8).unwrap();
        assert_eq!(ch.scale, 0.5);
        assert_eq!(&ch.codes[..4], &[1, -1, 2, -2]);
    }

    #[test]
    fn quantization_error_is_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in [Bitwidth::Int2, Bitwidth::Int4, Bitwidth::Int8] {
            for _ in 0..200 {
                let w: Vec<f32> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
                let ch = quantize_channel(&w, bits).unwrap();
                let deq = ch.dequantize();
                for (orig, back) in w.iter().zip(&deq) {
                    assert!(
                        (orig - back).abs() <= ch.scale * 0.5 + 1e-7,
                        "{bits}: |{orig} - {back}| > scale/2 = {}",
                        ch.scale * 0.5
                    );
                }
            }
        }
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        assert!(matches!(
            quantize_channel(&[1.0, f32::NAN], Bitwidth::Int4),
            Err(Error::NonFiniteWeight)
        ));
        let m = Matrix::new(1, 2, vec![f32::INFINITY, 0.0]);
        assert!(QuantizedMatrix::quantize(&m, Bitwidth::Fp16).is_err());
    }

    #[test]
    fn fp16_rounds_and_fp32_is_identity() {
        let m = Matrix::new(1, 3, vec![0.1, -1.0, 1.0 / 3.0]);
        let q16 = QuantizedMatrix::quantize(&m, Bitwidth::Fp16).unwrap();
        let d16 = q16.dequantize();
        assert_ne!(d16.data[0], 0.1f32);
        assert!((d16.data[0] - 0.1).abs() < 1e-4);
        assert_eq!(d16.data[1], -1.0);

        let q32 = QuantizedMatrix::quantize(&m, Bitwidth::Fp32).unwrap();
        assert_eq!(q32.dequantize(), m);
    }

    #[test]
    fn expert_size_agrees_with_analytic_formula() {
        let cfg = MoEConfig::toy_default(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w1 = Matrix::new(
            cfg.ffn_hidden_dim,
            cfg.model_dim,
            (0..cfg.ffn_hidden_dim * cfg.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let w2 = Matrix::new(
            cfg.model_dim,
            cfg.ffn_hidden_dim,
            (0..cfg.model_dim * cfg.ffn_hidden_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        for bits in crate::topology::BITWIDTH_LADDER {
            let q = QuantizedExpert::quantize(&w1, &w2, bits).unwrap();
            assert_eq!(q.size_bytes(), expert_size_bytes(&cfg, bits), "at {bits}");
        }
        let q = QuantizedExpert::quantize(&w1, &w2, Bitwidth::Int4).unwrap();
        assert_eq!(q.size_bytes(), 2240);
    }

    #[test]
    fn finer_bitwidths_never_increase_channel_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut prev_worse = 0usize;
        for _ in 0..100 {
            let w: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut last_err = f32::INFINITY;
            for bits in [Bitwidth::Int2, Bitwidth::Int4, Bitwidth::Int8] {
                let ch = quantize_channel(&w, bits).unwrap();
                let err: f32 = ch
                    .dequantize()
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>();
                if err > last_err {
                    prev_worse += 1;
                }
                last_err = err;
            }
        }
        assert_eq!(prev_worse, 0, "coarser precision should never beat finer on MSE");
    }
}
