//! Attention masks and position ids for packed items.
//!
//! A mask is stored compactly as segment offsets: token `i` may attend to
//! token `j` iff `j <= i` and both fall in the same segment. The three
//! regimes only differ in where segments start — `none` makes the whole
//! item one segment (plain causal attention), `isolated` starts a segment
//! at every instruction, and `chunk` at every chunk, so instructions inside
//! a chunk see each other but chunks never interact. Padding belongs to no
//! segment: it attends to nothing and nothing attends to it. Position ids
//! restart from 0 at every segment boundary and are 0 on padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::PackedSequence;

/// Attention regime of a packed item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRegime {
    /// One segment spanning the whole item: every earlier token is visible.
    None,
    /// One segment per instruction: strict cross-instruction blindness.
    Isolated,
    /// One segment per chunk: visibility within a mixed chunk, none across.
    Chunk,
}

impl MaskRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskRegime::None => "none",
            MaskRegime::Isolated => "isolated",
            MaskRegime::Chunk => "chunk",
        }
    }
}

impl std::str::FromStr for MaskRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskRegime::None),
            "isolated" => Ok(MaskRegime::Isolated),
            "chunk" => Ok(MaskRegime::Chunk),
            other => Err(Error::Config {
                msg: format!("unknown mask regime {other:?} (expected none, isolated or chunk)"),
            }),
        }
    }
}

/// Compact attention mask: ascending segment offsets from 0 to `real_len`.
/// Offsets `[0, 3, 5]` with `real_len` 5 describe segments `[0,3)` and
/// `[3,5)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub regime: MaskRegime,
    pub segment_offsets: Vec<usize>,
    pub real_len: usize,
}

impl MaskSpec {
    /// Validate and build a mask. Offsets must start at 0, end at
    /// `real_len`, and be strictly ascending.
    pub fn new(regime: MaskRegime, segment_offsets: Vec<usize>, real_len: usize) -> Result<Self> {
        let valid = segment_offsets.first() == Some(&0)
            && segment_offsets.last() == Some(&real_len)
            && segment_offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(Error::Config {
                msg: format!(
                    "segment offsets {segment_offsets:?} do not tile [0, {real_len}) ascending"
                ),
            });
        }
        Ok(MaskSpec {
            regime,
            segment_offsets,
            real_len,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segment_offsets.len() - 1
    }

    /// Half-open token range of segment `s`.
    pub fn segment_bounds(&self, s: usize) -> (usize, usize) {
        (self.segment_offsets[s], self.segment_offsets[s + 1])
    }

    /// Index of the segment containing real token `pos`.
    pub fn segment_of(&self, pos: usize) -> usize {
        debug_assert!(pos < self.real_len);
        // partition_point returns the first offset > pos; the segment is
        // the one starting at the previous offset.
        self.segment_offsets.partition_point(|&o| o <= pos) - 1
    }

    /// May query token `q` attend to key token `k`? False whenever either
    /// index is padding (at or past `real_len`).
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        q < self.real_len && k < self.real_len && k <= q && self.segment_of(q) == self.segment_of(k)
    }
}

/// Build the mask for a packed item under a regime.
pub fn make_mask(pack: &PackedSequence, regime: MaskRegime) -> MaskSpec {
    let real_len = pack.real_len();
    let segment_offsets = match regime {
        MaskRegime::None => vec![0, real_len],
        MaskRegime::Isolated => pack
            .instruction_boundaries
            .iter()
            .map(|&(s, _)| s)
            .chain([real_len])
            .collect(),
        MaskRegime::Chunk => pack
            .chunk_boundaries
            .iter()
            .map(|&(s, _)| s)
            .chain([real_len])
            .collect(),
    };
    MaskSpec {
        regime,
        segment_offsets,
        real_len,
    }
}

/// Position ids for a masked item, padded out to `total_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIds {
    pub ids: Vec<u32>,
}

/// Positions restart at 0 on every segment; padding gets position 0.
pub fn make_position_ids(mask: &MaskSpec, total_len: usize) -> PositionIds {
    assert!(
        total_len >= mask.real_len,
        "total_len {total_len} shorter than real_len {}",
        mask.real_len
    );
    let mut ids = vec![0u32; total_len];
    for s in 0..mask.segment_count() {
        let (start, end) = mask.segment_bounds(s);
        for (rel, id) in ids[start..end].iter_mut().enumerate() {
            *id = rel as u32;
        }
    }
    PositionIds { ids }
}

/// Guard for [`densify_mask`]: larger masks stay compact.
pub const DENSIFY_GUARD: usize = 4096;

/// Expand a mask to an explicit `real_len × real_len` boolean matrix
/// (`out[q][k]` = may `q` attend to `k`). Meant for tests and inspection;
/// refuses masks past [`DENSIFY_GUARD`] tokens.
pub fn densify_mask(mask: &MaskSpec) -> Result<Vec<Vec<bool>>> {
    if mask.real_len > DENSIFY_GUARD {
        return Err(Error::DensifyTooLarge {
            real_len: mask.real_len,
            guard: DENSIFY_GUARD,
        });
    }
    Ok((0..mask.real_len)
        .map(|q| (0..mask.real_len).map(|k| mask.allowed(q, k)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(offsets: &[usize]) -> MaskSpec {
        MaskSpec::new(MaskRegime::Chunk, offsets.to_vec(), *offsets.last().unwrap()).unwrap()
    }

    #[test]
    fn position_ids_restart_at_every_segment() {
        let ids = make_position_ids(&spec(&[0, 3, 5]), 6);
        assert_eq!(ids.ids, vec![0, 1, 2, 0, 1, 0]);
    }

    #[test]
    fn single_segment_counts_straight_through_with_padded_zeros() {
        let ids = make_position_ids(&spec(&[0, 4]), 4);
        assert_eq!(ids.ids, vec![0, 1, 2, 3]);
        let padded = make_position_ids(&spec(&[0, 4]), 7);
        assert_eq!(padded.ids, vec![0, 1, 2, 3, 0, 0, 0]);
    }

    #[test]
    fn equal_segments_alternate() {
        let ids = make_position_ids(&spec(&[0, 2, 4]), 4);
        assert_eq!(ids.ids, vec![0, 1, 0, 1]);
    }

    #[test]
    fn position_id_equals_offset_from_segment_start() {
        let mask = spec(&[0, 5, 11, 17]);
        let ids = make_position_ids(&mask, 20);
        for pos in 0..mask.real_len {
            let (start, _) = mask.segment_bounds(mask.segment_of(pos));
            assert_eq!(ids.ids[pos] as usize, pos - start);
        }
    }

    #[test]
    fn isolated_two_instruction_mask_allows_exactly_the_block_triangles() {
        // Instructions [0,3) and [3,5): 3·4/2 + 2·3/2 = 9 allowed pairs.
        let mask = spec(&[0, 3, 5]);
        let mut allowed = Vec::new();
        for q in 0..5 {
            for k in 0..5 {
                if mask.allowed(q, k) {
                    allowed.push((q, k));
                }
            }
        }
        assert_eq!(
            allowed,
            vec![
                (0, 0),
                (1, 0),
                (1, 1),
                (2, 0),
                (2, 1),
                (2, 2),
                (3, 3),
                (4, 3),
                (4, 4)
            ]
        );
    }

    #[test]
    fn single_segment_mask_is_plain_lower_triangle() {
        let mask = spec(&[0, 4]);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(mask.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn chunk_segments_block_cross_chunk_attention() {
        // Chunks [0,4) and [4,8): token 6 sees 4..=6, nothing below 4.
        let mask = spec(&[0, 4, 8]);
        for k in 0..8 {
            assert_eq!(mask.allowed(6, k), (4..=6).contains(&k), "k={k}");
        }
    }

    #[test]
    fn padding_neither_attends_nor_is_attended() {
        let mask = spec(&[0, 4]);
        for t in 0..4 {
            assert!(!mask.allowed(t, 5), "real token attends padding");
            assert!(!mask.allowed(5, t), "padding attends real token");
        }
        assert!(!mask.allowed(5, 5));
    }

    #[test]
    fn densify_matches_the_documented_tiny_cases() {
        assert_eq!(
            densify_mask(&spec(&[0, 2])).unwrap(),
            vec![vec![true, false], vec![true, true]]
        );
        assert_eq!(
            densify_mask(&spec(&[0, 1, 2])).unwrap(),
            vec![vec![true, false], vec![false, true]]
        );
    }

    #[test]
    fn densify_refuses_oversized_masks() {
        let offsets: Vec<usize> = vec![0, DENSIFY_GUARD + 1];
        let mask = MaskSpec::new(MaskRegime::None, offsets, DENSIFY_GUARD + 1).unwrap();
        assert!(matches!(
            densify_mask(&mask).unwrap_err(),
            Error::DensifyTooLarge { .. }
        ));
    }

    #[test]
    fn mask_spec_validation_rejects_bad_offsets() {
        assert!(MaskSpec::new(MaskRegime::None, vec![0, 3, 2, 5], 5).is_err());
        assert!(MaskSpec::new(MaskRegime::None, vec![1, 5], 5).is_err());
        assert!(MaskSpec::new(MaskRegime::None, vec![0, 4], 5).is_err());
        assert!(MaskSpec::new(MaskRegime::None, vec![0, 3, 3, 5], 5).is_err());
    }

    proptest::proptest! {
        /// Instruction boundaries refine chunk boundaries, so the allowed
        /// sets nest: isolated ⊆ chunk ⊆ none, with position ids always
        /// equal to the offset from the segment start.
        #[test]
        fn regimes_nest_and_position_ids_agree(
            chunk_shapes in proptest::collection::vec(
                proptest::collection::vec(1usize..6, 1..4),
                1..4,
            )
        ) {
            // Build the three regimes' offset lists from random
            // instruction lengths grouped into random chunks.
            let mut inst_offsets = vec![0];
            let mut chunk_offsets = vec![0];
            for shape in &chunk_shapes {
                for len in shape {
                    inst_offsets.push(inst_offsets.last().unwrap() + len);
                }
                chunk_offsets.push(*inst_offsets.last().unwrap());
            }
            let real_len = *inst_offsets.last().unwrap();
            let none = MaskSpec::new(MaskRegime::None, vec![0, real_len], real_len).unwrap();
            let chunk = MaskSpec::new(MaskRegime::Chunk, chunk_offsets, real_len).unwrap();
            let isolated = MaskSpec::new(MaskRegime::Isolated, inst_offsets, real_len).unwrap();
            for q in 0..real_len {
                for k in 0..real_len {
                    if isolated.allowed(q, k) {
                        proptest::prop_assert!(chunk.allowed(q, k));
                    }
                    if chunk.allowed(q, k) {
                        proptest::prop_assert!(none.allowed(q, k));
                    }
                }
            }
            for mask in [&none, &chunk, &isolated] {
                let ids = make_position_ids(mask, real_len + 3);
                for pos in 0..real_len {
                    let (start, _) = mask.segment_bounds(mask.segment_of(pos));
                    proptest::prop_assert_eq!(ids.ids[pos] as usize, pos - start);
                }
                proptest::prop_assert!(ids.ids[real_len..].iter().all(|&i| i == 0));
            }
        }
    }
}
