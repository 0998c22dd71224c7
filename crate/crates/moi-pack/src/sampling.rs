//! Sample planning: which instructions go out, in what order, and how they
//! group into mixed chunks.
//!
//! Four strategies cover the spectrum from plain per-conversation batches to
//! balanced task mixing:
//!
//! * `sequence` — one shuffled epoch, one instruction per batch item;
//! * `packed` — the same shuffled epoch, greedily packed;
//! * `balanced` — chunks of one instruction per task, tasks in a fixed
//!   template order, smaller tasks resampled with replacement until the
//!   largest task is consumed once;
//! * `moi` — the same ordering as `balanced`; downstream stages treat each
//!   chunk as one attention group.
//!
//! Plans are deterministic: ids are sorted before the seeded shuffle, so the
//! on-disk record order never matters, and a plan is a pure function of the
//! id/task multiset, the prompt map, `n_mix`, and the seed.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Instruction, PromptMap};
use crate::error::{Error, Result};

/// How a corpus is ordered and grouped before packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sequence,
    Packed,
    Balanced,
    Moi,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sequence => "sequence",
            Strategy::Packed => "packed",
            Strategy::Balanced => "balanced",
            Strategy::Moi => "moi",
        }
    }

    /// True for the strategies that group instructions into fixed-width
    /// task-balanced chunks.
    pub fn is_chunked(self) -> bool {
        matches!(self, Strategy::Balanced | Strategy::Moi)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(Strategy::Sequence),
            "packed" => Ok(Strategy::Packed),
            "balanced" => Ok(Strategy::Balanced),
            "moi" => Ok(Strategy::Moi),
            other => Err(Error::Config {
                msg: format!(
                    "unknown strategy {other:?} (expected sequence, packed, balanced or moi)"
                ),
            }),
        }
    }
}

/// What to do when a task runs out before the largest task is consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplacementPolicy {
    /// Reshuffle the exhausted task and keep drawing (sampling with
    /// replacement across epochs). The default.
    #[default]
    Reshuffle,
    /// Refuse: error out naming the undersized task. Useful when a run must
    /// see every instruction exactly once.
    Forbid,
}

/// One position in a plan: an instruction id, flagged when it is a repeat
/// drawn after its task was reshuffled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub resampled: bool,
}

/// A fully-determined emission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub kind: Strategy,
    pub seed: u64,
    /// Task order inside every chunk; empty for sequence/packed plans.
    pub chunk_template: Vec<String>,
    pub order: Vec<PlanEntry>,
}

impl SamplePlan {
    /// Chunk width; 0 for plans without chunk structure.
    pub fn n_mix(&self) -> usize {
        self.chunk_template.len()
    }

    /// Number of chunks in a chunked plan.
    pub fn chunk_count(&self) -> usize {
        if self.chunk_template.is_empty() {
            0
        } else {
            self.order.len() / self.chunk_template.len()
        }
    }

    /// How many entries are repeat draws caused by resampling.
    pub fn replacement_count(&self) -> usize {
        self.order.iter().filter(|e| e.resampled).count()
    }

    /// Canonical JSON form, stable across runs for identical plans.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plans serialize cleanly")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize cleanly")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config {
            msg: format!("invalid plan JSON: {e}"),
        })
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex. Two runs agree
    /// on this digest exactly when they agree on the whole plan.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn check_unique_ids(corpus: &[Instruction]) -> Result<()> {
    let mut seen = HashSet::new();
    for inst in corpus {
        if !seen.insert(inst.id.as_str()) {
            return Err(Error::DuplicateId {
                id: inst.id.clone(),
            });
        }
    }
    Ok(())
}

/// Sorted ids, the canonical order fed to every shuffle.
fn sorted_ids<'a>(corpus: impl Iterator<Item = &'a Instruction>) -> Vec<String> {
    let mut ids: Vec<String> = corpus.map(|i| i.id.clone()).collect();
    ids.sort_unstable();
    ids
}

/// One shuffled epoch over the whole corpus, one instruction per plan slot.
pub fn plan_sequence(corpus: &[Instruction], seed: u64) -> Result<SamplePlan> {
    shuffled_epoch(corpus, seed, Strategy::Sequence)
}

/// The same shuffled epoch as [`plan_sequence`]; packing later merges
/// neighbours into shared batch items.
pub fn plan_packed(corpus: &[Instruction], seed: u64) -> Result<SamplePlan> {
    shuffled_epoch(corpus, seed, Strategy::Packed)
}

fn shuffled_epoch(corpus: &[Instruction], seed: u64, kind: Strategy) -> Result<SamplePlan> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_unique_ids(corpus)?;
    let mut ids = sorted_ids(corpus.iter());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(SamplePlan {
        kind,
        seed,
        chunk_template: Vec::new(),
        order: ids
            .into_iter()
            .map(|id| PlanEntry {
                id,
                resampled: false,
            })
            .collect(),
    })
}

/// Per-task id stream: one shuffled epoch at a time, reshuffling on
/// exhaustion when the policy allows it.
struct TaskStream {
    task: String,
    ids: Vec<String>,
    rng: ChaCha20Rng,
    pos: usize,
    epoch: usize,
}

impl TaskStream {
    fn new(task: String, mut ids: Vec<String>, sub_seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(sub_seed);
        ids.shuffle(&mut rng);
        TaskStream {
            task,
            ids,
            rng,
            pos: 0,
            epoch: 1,
        }
    }

    fn next(&mut self, policy: ReplacementPolicy, need: usize) -> Result<PlanEntry> {
        if self.pos == self.ids.len() {
            if policy == ReplacementPolicy::Forbid {
                return Err(Error::ReplacementForbidden {
                    task: self.task.clone(),
                    have: self.ids.len(),
                    need,
                });
            }
            self.ids.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let id = self.ids[self.pos].clone();
        self.pos += 1;
        Ok(PlanEntry {
            id,
            resampled: self.epoch > 1,
        })
    }
}

/// Plan one balanced epoch: `max task size` chunks, each holding exactly one
/// instruction per task in template order (default task first, the rest in
/// prompt-map declaration order). Every id of the largest task appears
/// exactly once; smaller tasks are reshuffled and resampled with
/// replacement, and every repeat draw is flagged.
pub fn plan_balanced(
    corpus: &[Instruction],
    prompts: &PromptMap,
    n_mix: usize,
    seed: u64,
    policy: ReplacementPolicy,
) -> Result<SamplePlan> {
    plan_chunked(corpus, prompts, n_mix, seed, policy, Strategy::Balanced)
}

/// Identical ordering to [`plan_balanced`]; the `moi` kind tells downstream
/// stages to treat each chunk as one attention group.
pub fn plan_moi(
    corpus: &[Instruction],
    prompts: &PromptMap,
    n_mix: usize,
    seed: u64,
) -> Result<SamplePlan> {
    plan_chunked(
        corpus,
        prompts,
        n_mix,
        seed,
        ReplacementPolicy::Reshuffle,
        Strategy::Moi,
    )
}

fn plan_chunked(
    corpus: &[Instruction],
    prompts: &PromptMap,
    n_mix: usize,
    seed: u64,
    policy: ReplacementPolicy,
    kind: Strategy,
) -> Result<SamplePlan> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_unique_ids(corpus)?;
    let task_count = prompts.task_count();
    if n_mix != task_count {
        return Err(Error::NMixMismatch { n_mix, task_count });
    }
    if task_count < 2 {
        return Err(Error::Config {
            msg: format!(
                "{} planning mixes tasks and needs at least 2 of them, got {task_count}",
                kind.as_str()
            ),
        });
    }
    for inst in corpus {
        if !prompts.contains(&inst.task) {
            return Err(Error::UnknownTask {
                id: inst.id.clone(),
                task: inst.task.clone(),
                known: prompts.tasks().collect::<Vec<_>>().join(", "),
            });
        }
    }
    let template = prompts.chunk_template();
    // One sub-seed per template slot, drawn from a master stream so that
    // each task shuffles independently of the others' sizes.
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut streams: Vec<TaskStream> = Vec::with_capacity(template.len());
    for task in &template {
        let sub_seed = master.next_u64();
        let ids = sorted_ids(corpus.iter().filter(|i| &i.task == task));
        if ids.is_empty() {
            return Err(Error::EmptyTask { task: task.clone() });
        }
        streams.push(TaskStream::new(task.clone(), ids, sub_seed));
    }
    let num_chunks = streams.iter().map(|s| s.ids.len()).max().unwrap();
    let mut order = Vec::with_capacity(num_chunks * template.len());
    for _ in 0..num_chunks {
        for stream in &mut streams {
            order.push(stream.next(policy, num_chunks)?);
        }
    }
    Ok(SamplePlan {
        kind,
        seed,
        chunk_template: template,
        order,
    })
}
