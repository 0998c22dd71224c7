//! Packing: turn a plan plus tokenized instructions into fixed-length
//! batch items.
//!
//! The unit of packing is the chunk — one instruction for `sequence` plans,
//! a task-balanced group of `n_mix` for `balanced`/`moi` plans, and for
//! `packed` plans whatever run of consecutive instructions fills one item.
//! Chunks are never split: packing is greedy in plan order, appending chunks
//! to the current item while they fit and opening a new item otherwise.
//! Every item is padded to exactly `max_len` tokens.

use std::collections::HashMap;

use crate::chatml::TokenizedInstruction;
use crate::error::{Error, Result};
use crate::sampling::{SamplePlan, Strategy};

/// A group of instructions that always shares a batch item (and, under the
/// chunk masking regime, an attention group).
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub instructions: Vec<TokenizedInstruction>,
}

impl Chunk {
    pub fn token_length(&self) -> usize {
        self.instructions.iter().map(TokenizedInstruction::len).sum()
    }

    fn instruction_ids(&self) -> Vec<String> {
        self.instructions
            .iter()
            .map(|i| i.source_id.clone())
            .collect()
    }
}

/// One fixed-length batch item: consecutive chunks plus padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub chunks: Vec<Chunk>,
    /// Half-open token range of every instruction, in order. The ranges
    /// tile `[0, real_len)` exactly.
    pub instruction_boundaries: Vec<(usize, usize)>,
    /// Half-open token range of every chunk; a coarsening of the
    /// instruction boundaries.
    pub chunk_boundaries: Vec<(usize, usize)>,
    pub pad_len: usize,
    /// Always the configured `max_len`.
    pub total_len: usize,
}

impl PackedSequence {
    fn from_chunks(chunks: Vec<Chunk>, max_len: usize) -> Self {
        let mut instruction_boundaries = Vec::new();
        let mut chunk_boundaries = Vec::new();
        let mut at = 0;
        for chunk in &chunks {
            let chunk_start = at;
            for inst in &chunk.instructions {
                instruction_boundaries.push((at, at + inst.len()));
                at += inst.len();
            }
            chunk_boundaries.push((chunk_start, at));
        }
        debug_assert!(at <= max_len);
        PackedSequence {
            chunks,
            instruction_boundaries,
            chunk_boundaries,
            pad_len: max_len - at,
            total_len: max_len,
        }
    }

    /// Token count before padding.
    pub fn real_len(&self) -> usize {
        self.total_len - self.pad_len
    }

    pub fn instruction_count(&self) -> usize {
        self.instruction_boundaries.len()
    }

    /// Instructions in order, each with its token offset inside the item.
    pub fn instructions(&self) -> impl Iterator<Item = (usize, &TokenizedInstruction)> {
        self.chunks
            .iter()
            .flat_map(|c| c.instructions.iter())
            .zip(self.instruction_boundaries.iter())
            .map(|(inst, &(start, _))| (start, inst))
    }

    /// The flat token stream, padded to `total_len` with `pad_id`.
    pub fn tokens(&self, pad_id: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.total_len);
        for chunk in &self.chunks {
            for inst in &chunk.instructions {
                out.extend_from_slice(&inst.tokens);
            }
        }
        out.resize(self.total_len, pad_id);
        out
    }

    /// Response spans of instruction `idx`, shifted to item coordinates.
    pub fn response_spans_of(&self, idx: usize) -> Vec<(usize, usize)> {
        let (start, _) = self.instruction_boundaries[idx];
        let inst = self
            .chunks
            .iter()
            .flat_map(|c| c.instructions.iter())
            .nth(idx)
            .expect("idx bounded by instruction_count");
        inst.response_spans
            .iter()
            .map(|&(s, e)| (start + s, start + e))
            .collect()
    }
}

/// A chunk withheld from the output because it could not fit an empty item.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DroppedChunk {
    pub instruction_ids: Vec<String>,
    pub token_length: usize,
}

/// What to do with a chunk longer than `max_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    /// Fail the whole run. The default: silently losing data is worse.
    #[default]
    Abort,
    /// Skip the chunk and report it.
    Drop,
}

/// Packing result: the items plus any chunks dropped under
/// [`OverflowPolicy::Drop`].
#[derive(Debug, Clone, PartialEq)]
pub struct PackOutput {
    pub packs: Vec<PackedSequence>,
    pub dropped: Vec<DroppedChunk>,
}

/// Pack a plan greedily in plan order.
///
/// `tokenized` maps instruction id to its tokenized form; plans with
/// replacement reference the same id several times and reuse the entry.
pub fn build_packs(
    plan: &SamplePlan,
    tokenized: &HashMap<String, TokenizedInstruction>,
    max_len: usize,
    policy: OverflowPolicy,
) -> Result<PackOutput> {
    if max_len == 0 {
        return Err(Error::Config {
            msg: "max_len must be positive".into(),
        });
    }
    let chunks = form_chunks(plan, tokenized)?;
    let mut packs = Vec::new();
    let mut dropped = Vec::new();
    let mut current: Vec<Chunk> = Vec::new();
    let mut current_len = 0;
    for chunk in chunks {
        let len = chunk.token_length();
        if len > max_len {
            match policy {
                OverflowPolicy::Abort => {
                    return Err(Error::ChunkOverflow {
                        ids: chunk.instruction_ids().join(", "),
                        token_length: len,
                        max_len,
                    });
                }
                OverflowPolicy::Drop => {
                    dropped.push(DroppedChunk {
                        instruction_ids: chunk.instruction_ids(),
                        token_length: len,
                    });
                    continue;
                }
            }
        }
        let one_chunk_per_pack = plan.kind == Strategy::Sequence;
        if !current.is_empty() && (one_chunk_per_pack || current_len + len > max_len) {
            packs.push(PackedSequence::from_chunks(
                std::mem::take(&mut current),
                max_len,
            ));
            current_len = 0;
        }
        current_len += len;
        current.push(chunk);
    }
    if !current.is_empty() {
        packs.push(PackedSequence::from_chunks(current, max_len));
    }
    if plan.kind == Strategy::Packed {
        // For packed plans the pack itself is the chunk: everything that
        // landed together forms one group.
        packs.iter_mut().for_each(merge_pack_into_one_chunk);
    }
    Ok(PackOutput { packs, dropped })
}

/// Group the plan's entries into packing units per strategy.
fn form_chunks(
    plan: &SamplePlan,
    tokenized: &HashMap<String, TokenizedInstruction>,
) -> Result<Vec<Chunk>> {
    let lookup = |id: &str| -> Result<TokenizedInstruction> {
        tokenized.get(id).cloned().ok_or_else(|| Error::Config {
            msg: format!("plan references id {id:?} with no tokenized instruction"),
        })
    };
    match plan.kind {
        Strategy::Sequence | Strategy::Packed => plan
            .order
            .iter()
            .map(|e| {
                Ok(Chunk {
                    instructions: vec![lookup(&e.id)?],
                })
            })
            .collect(),
        Strategy::Balanced | Strategy::Moi => {
            let n_mix = plan.n_mix();
            if n_mix == 0 || !plan.order.len().is_multiple_of(n_mix) {
                return Err(Error::Config {
                    msg: format!(
                        "chunked plan of {} entries does not divide into chunks of {n_mix}",
                        plan.order.len()
                    ),
                });
            }
            plan.order
                .chunks(n_mix)
                .map(|group| {
                    let instructions: Vec<TokenizedInstruction> = group
                        .iter()
                        .map(|e| lookup(&e.id))
                        .collect::<Result<_>>()?;
                    let tasks: Vec<&str> =
                        instructions.iter().map(|i| i.task.as_str()).collect();
                    if tasks != plan.chunk_template.iter().map(String::as_str).collect::<Vec<_>>()
                    {
                        return Err(Error::Config {
                            msg: format!(
                                "chunk task order {tasks:?} does not match template {:?}",
                                plan.chunk_template
                            ),
                        });
                    }
                    Ok(Chunk { instructions })
                })
                .collect()
        }
    }
}

/// Fraction of emitted tokens that is padding: `Σ pad_len / Σ total_len`.
pub fn packing_efficiency(packs: &[PackedSequence]) -> f64 {
    assert!(!packs.is_empty(), "packing_efficiency needs at least one pack");
    let pad: usize = packs.iter().map(|p| p.pad_len).sum();
    let total: usize = packs.iter().map(|p| p.total_len).sum();
    pad as f64 / total as f64
}

/// Regroup an item's instructions into a single chunk so that chunk
/// boundaries mean the same thing across strategies.
fn merge_pack_into_one_chunk(pack: &mut PackedSequence) {
    let instructions: Vec<TokenizedInstruction> = pack
        .chunks
        .drain(..)
        .flat_map(|c| c.instructions)
        .collect();
    pack.chunks = vec![Chunk { instructions }];
    pack.chunk_boundaries = vec![(0, pack.real_len())];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::PlanEntry;

    /// A synthetic tokenized instruction of an exact token length; the
    /// last `response` tokens (ending with a marker stand-in) carry loss.
    fn synth(id: &str, task: &str, len: usize, response: usize) -> TokenizedInstruction {
        assert!(response >= 2 && len > response);
        TokenizedInstruction {
            source_id: id.into(),
            task: task.into(),
            tokens: (0..len as u32).collect(),
            response_spans: vec![(len - response, len - 1), (len - 1, len)],
            response_token_count: response,
        }
    }

    fn plan_of(kind: Strategy, template: &[&str], ids: &[&str]) -> SamplePlan {
        SamplePlan {
            kind,
            seed: 0,
            chunk_template: template.iter().map(|s| s.to_string()).collect(),
            order: ids
                .iter()
                .map(|id| PlanEntry {
                    id: id.to_string(),
                    resampled: false,
                })
                .collect(),
        }
    }

    fn tokenized_map(insts: &[TokenizedInstruction]) -> HashMap<String, TokenizedInstruction> {
        insts
            .iter()
            .map(|i| (i.source_id.clone(), i.clone()))
            .collect()
    }

    #[test]
    fn sequence_pads_each_instruction_to_max_len() {
        let insts = [synth("a", "chat", 10, 4)];
        let plan = plan_of(Strategy::Sequence, &[], &["a"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 16, OverflowPolicy::Abort).unwrap();
        assert_eq!(out.packs.len(), 1);
        let pack = &out.packs[0];
        assert_eq!((pack.real_len(), pack.pad_len, pack.total_len), (10, 6, 16));
        assert!((packing_efficiency(&out.packs) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn sequence_never_merges_even_when_instructions_would_fit() {
        let insts = [synth("a", "chat", 10, 4), synth("b", "chat", 10, 4)];
        let plan = plan_of(Strategy::Sequence, &[], &["a", "b"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Abort).unwrap();
        assert_eq!(out.packs.len(), 2);
    }

    #[test]
    fn chunks_that_overflow_together_split_into_two_packs() {
        // Chunks of 30 and 40 tokens with max_len 64: 70 > 64, so two packs.
        let insts = [
            synth("a1", "alpha", 14, 4),
            synth("b1", "beta", 16, 4),
            synth("a2", "alpha", 19, 4),
            synth("b2", "beta", 21, 4),
        ];
        let plan = plan_of(Strategy::Moi, &["alpha", "beta"], &["a1", "b1", "a2", "b2"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Abort).unwrap();
        assert_eq!(out.packs.len(), 2);
        assert_eq!(out.packs[0].real_len(), 30);
        assert_eq!(out.packs[0].pad_len, 34);
        assert_eq!(out.packs[1].real_len(), 40);
        assert_eq!(out.packs[1].pad_len, 24);
    }

    #[test]
    fn chunks_that_fit_together_share_a_pack() {
        // Two 30-token chunks in one 64-token pack: 4 pad tokens.
        let insts = [
            synth("a1", "alpha", 14, 4),
            synth("b1", "beta", 16, 4),
            synth("a2", "alpha", 13, 4),
            synth("b2", "beta", 17, 4),
        ];
        let plan = plan_of(Strategy::Moi, &["alpha", "beta"], &["a1", "b1", "a2", "b2"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Abort).unwrap();
        assert_eq!(out.packs.len(), 1);
        let pack = &out.packs[0];
        assert_eq!(pack.real_len(), 60);
        assert_eq!(pack.chunk_boundaries, vec![(0, 30), (30, 60)]);
        assert_eq!(
            pack.instruction_boundaries,
            vec![(0, 14), (14, 30), (30, 43), (43, 60)]
        );
        assert!((packing_efficiency(&out.packs) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn oversized_chunk_aborts_by_default_naming_its_instructions() {
        let insts = [synth("big", "chat", 100, 4)];
        let plan = plan_of(Strategy::Packed, &[], &["big"]);
        let err =
            build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Abort).unwrap_err();
        match err {
            Error::ChunkOverflow {
                ids,
                token_length,
                max_len,
            } => {
                assert!(ids.contains("big"));
                assert_eq!((token_length, max_len), (100, 64));
            }
            other => panic!("expected ChunkOverflow, got {other}"),
        }
    }

    #[test]
    fn drop_policy_records_the_dropped_chunk_and_continues() {
        let insts = [synth("big", "chat", 100, 4), synth("ok", "chat", 10, 4)];
        let plan = plan_of(Strategy::Packed, &[], &["big", "ok"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Drop).unwrap();
        assert_eq!(out.packs.len(), 1);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].instruction_ids, vec!["big".to_string()]);
        assert_eq!(out.dropped[0].token_length, 100);
    }

    #[test]
    fn packed_strategy_fills_greedily_in_plan_order_without_reordering() {
        // 40 + 30 + 30 with max_len 64: the 30 after the 40 does NOT fit, so
        // it starts pack 2 and the next 30 joins it there.
        let insts = [
            synth("a", "chat", 40, 4),
            synth("b", "chat", 30, 4),
            synth("c", "chat", 30, 4),
        ];
        let plan = plan_of(Strategy::Packed, &[], &["a", "b", "c"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Abort).unwrap();
        assert_eq!(out.packs.len(), 2);
        assert_eq!(out.packs[0].real_len(), 40);
        assert_eq!(out.packs[1].real_len(), 60);
        let ids: Vec<&str> = out.packs[1]
            .instructions()
            .map(|(_, i)| i.source_id.as_str())
            .collect();
        assert_eq!(ids, ["b", "c"]);
        // A packed item is one chunk, whatever landed in it.
        for pack in &out.packs {
            assert_eq!(pack.chunks.len(), 1);
            assert_eq!(pack.chunk_boundaries, vec![(0, pack.real_len())]);
        }
    }

    #[test]
    fn concatenated_pack_tokens_reproduce_plan_order() {
        let insts = [
            synth("a", "chat", 21, 4),
            synth("b", "chat", 17, 4),
            synth("c", "chat", 33, 4),
            synth("d", "chat", 8, 3),
        ];
        let plan = plan_of(Strategy::Packed, &[], &["c", "a", "d", "b"]);
        let map = tokenized_map(&insts);
        let out = build_packs(&plan, &map, 48, OverflowPolicy::Abort).unwrap();
        let mut emitted = Vec::new();
        for pack in &out.packs {
            let toks = pack.tokens(999);
            emitted.extend_from_slice(&toks[..pack.real_len()]);
            // The padded tail is all pad.
            assert!(toks[pack.real_len()..].iter().all(|&t| t == 999));
            assert_eq!(toks.len(), pack.total_len);
        }
        let mut expected = Vec::new();
        for id in ["c", "a", "d", "b"] {
            expected.extend_from_slice(&map[id].tokens);
        }
        assert_eq!(emitted, expected);
    }

    #[test]
    fn boundaries_tile_the_real_length_and_chunks_stay_whole() {
        let insts = [
            synth("a1", "alpha", 20, 5),
            synth("b1", "beta", 25, 5),
            synth("a2", "alpha", 22, 5),
            synth("b2", "beta", 18, 5),
            synth("a3", "alpha", 30, 5),
            synth("b3", "beta", 31, 5),
        ];
        let plan = plan_of(
            Strategy::Balanced,
            &["alpha", "beta"],
            &["a1", "b1", "a2", "b2", "a3", "b3"],
        );
        let out = build_packs(&plan, &tokenized_map(&insts), 90, OverflowPolicy::Abort).unwrap();
        for pack in &out.packs {
            let mut at = 0;
            for &(s, e) in &pack.instruction_boundaries {
                assert_eq!(s, at);
                assert!(e > s);
                at = e;
            }
            assert_eq!(at, pack.real_len());
            // Chunk boundaries coarsen instruction boundaries and every
            // chunk is complete (n_mix instructions each).
            for (chunk, &(s, e)) in pack.chunks.iter().zip(&pack.chunk_boundaries) {
                assert_eq!(chunk.instructions.len(), 2);
                assert_eq!(e - s, chunk.token_length());
            }
        }
    }

    #[test]
    fn chunk_task_order_must_match_the_template() {
        let insts = [synth("a1", "alpha", 10, 4), synth("b1", "beta", 10, 4)];
        let plan = plan_of(Strategy::Moi, &["alpha", "beta"], &["b1", "a1"]);
        let err =
            build_packs(&plan, &tokenized_map(&insts), 64, OverflowPolicy::Abort).unwrap_err();
        assert!(err.to_string().contains("template"), "{err}");
    }

    #[test]
    fn response_spans_shift_with_their_instruction() {
        let insts = [synth("a", "chat", 10, 4), synth("b", "chat", 12, 5)];
        let plan = plan_of(Strategy::Packed, &[], &["a", "b"]);
        let out = build_packs(&plan, &tokenized_map(&insts), 32, OverflowPolicy::Abort).unwrap();
        let pack = &out.packs[0];
        // Instruction "b" starts at 10; its local spans (7,11),(11,12)
        // become (17,21),(21,22).
        assert_eq!(pack.response_spans_of(1), vec![(17, 21), (21, 22)]);
    }
}
