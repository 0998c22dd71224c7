//! Per-token loss weights for packed items.
//!
//! Response tokens (and only those) carry loss. Single-instruction items
//! use raw weights — 1.0 per response token, with the trainer applying the
//! usual `1/Σ|y|` batch normalizer. Multi-instruction items equalize
//! instruction influence instead: with `M` instructions in the item, every
//! response token of instruction `i` weighs `1/(M·|y_i|)`, so each response
//! sums to `1/M` and the whole item sums to 1 regardless of how packing
//! mixed short and long replies. The same weighting serves three schemes
//! that differ only in the mask they ride with: `packed` (no mask),
//! `masking_out` (isolated mask) and `moi` (chunk mask).
//!
//! Weights are computed and checked in f64; the container quantizes them to
//! f32 at write time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::PackedSequence;

/// Which weighting/masking pairing produced an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One instruction per item, raw 1.0 weights, trainer-side normalizer.
    SequenceRaw,
    /// Merged items, equalized weights, full causal visibility.
    Packed,
    /// Equalized weights with per-instruction isolation.
    MaskingOut,
    /// Equalized weights with per-chunk visibility.
    Moi,
}

impl Scheme {
    /// Stable one-byte code used in the container's scheme array.
    pub fn code(self) -> u8 {
        match self {
            Scheme::SequenceRaw => 0,
            Scheme::Packed => 1,
            Scheme::MaskingOut => 2,
            Scheme::Moi => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Scheme::SequenceRaw),
            1 => Ok(Scheme::Packed),
            2 => Ok(Scheme::MaskingOut),
            3 => Ok(Scheme::Moi),
            other => Err(Error::Config {
                msg: format!("unknown scheme code {other}"),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::SequenceRaw => "sequence_raw",
            Scheme::Packed => "packed",
            Scheme::MaskingOut => "masking_out",
            Scheme::Moi => "moi",
        }
    }

    /// Whether every item's weights sum to 1 under this scheme.
    pub fn is_normalized(self) -> bool {
        self != Scheme::SequenceRaw
    }
}

/// Loss weights for one packed item, f64 until serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// One weight per token slot, `total_len` long; zero outside response
    /// spans and on padding.
    pub weights: Vec<f64>,
    pub scheme: Scheme,
    /// `|y_i|`: response token count per instruction, in item order.
    pub response_token_counts: Vec<u32>,
}

impl LossWeights {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn counts_of(pack: &PackedSequence) -> Vec<u32> {
    pack.instructions()
        .map(|(_, inst)| inst.response_token_count as u32)
        .collect()
}

fn spread(pack: &PackedSequence, per_instruction: &[f64]) -> Vec<f64> {
    let mut weights = vec![0.0; pack.total_len];
    for (idx, w) in per_instruction.iter().enumerate() {
        for (s, e) in pack.response_spans_of(idx) {
            weights[s..e].iter_mut().for_each(|slot| *slot = *w);
        }
    }
    weights
}

/// Raw weights for a single-instruction item: 1.0 on response tokens.
pub fn weights_sequence(pack: &PackedSequence) -> Result<LossWeights> {
    if pack.instruction_count() != 1 {
        return Err(Error::ChunkArity {
            got: pack.instruction_count(),
            expected: 1,
        });
    }
    let counts = counts_of(pack);
    if counts[0] == 0 {
        return Err(Error::ZeroResponseTokens {
            id: pack.instructions().next().unwrap().1.source_id.clone(),
        });
    }
    Ok(LossWeights {
        weights: spread(pack, &[1.0]),
        scheme: Scheme::SequenceRaw,
        response_token_counts: counts,
    })
}

/// Equalized weights `1/(M·|y_i|)` for a merged item. `scheme` selects the
/// label — [`Scheme::Packed`] or [`Scheme::MaskingOut`] — since the numbers
/// are identical and only the accompanying mask differs.
pub fn weights_packed(pack: &PackedSequence, scheme: Scheme) -> Result<LossWeights> {
    assert!(
        matches!(scheme, Scheme::Packed | Scheme::MaskingOut),
        "weights_packed labels packed/masking_out items, not {scheme:?}"
    );
    equalized(pack, scheme)
}

/// Equalized weights for a chunk-masked item; checks that every chunk holds
/// exactly `n_mix` instructions first.
pub fn weights_moi(pack: &PackedSequence, n_mix: usize) -> Result<LossWeights> {
    for chunk in &pack.chunks {
        if chunk.instructions.len() != n_mix {
            return Err(Error::ChunkArity {
                got: chunk.instructions.len(),
                expected: n_mix,
            });
        }
    }
    equalized(pack, Scheme::Moi)
}

fn equalized(pack: &PackedSequence, scheme: Scheme) -> Result<LossWeights> {
    let counts = counts_of(pack);
    let m = counts.len();
    if m == 0 {
        return Err(Error::EmptyCorpus);
    }
    let per_instruction: Vec<f64> = pack
        .instructions()
        .map(|(_, inst)| {
            if inst.response_token_count == 0 {
                return Err(Error::ZeroResponseTokens {
                    id: inst.source_id.clone(),
                });
            }
            Ok(1.0 / (m as f64 * inst.response_token_count as f64))
        })
        .collect::<Result<_>>()?;
    let weights = LossWeights {
        weights: spread(pack, &per_instruction),
        scheme,
        response_token_counts: counts,
    };
    let sum = weights.sum();
    assert!(
        (sum - 1.0).abs() < 1e-9,
        "equalized weights must sum to 1, got {sum}"
    );
    Ok(weights)
}
