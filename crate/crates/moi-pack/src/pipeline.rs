//! End-to-end drivers: pack a corpus to a container, verify a container,
//! inspect its contents, and summarize a corpus.
//!
//! `run_pack` is the production path: load → plan → tokenize → pack → mask
//! → weight → write, with tokenization and per-item array building
//! parallelized across packs. `run_verify` is its adversary: it re-derives
//! everything a container claims (checksums, position ids, weight sums and
//! values) and then *executes* sampled items under the reference attention
//! model to confirm that masked segments are computationally independent.
//! A verification failure is a finding, not an error: the report lists
//! every check with a pass/fail and a detail line, and the CLI turns an
//! unclean report into exit code 2.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::attest::{ToyConfig, ToyModel};
use crate::chatml::{tokenize_instruction, TokenizedInstruction};
use crate::config::ResolvedConfig;
use crate::container::{read_batch, write_batch, BatchArrays, BatchMeta, LoadedBatch, FORMAT_VERSION};
use crate::corpus::{corpus_stats, load_corpus, CorpusStats};
use crate::error::{Error, Result};
use crate::masking::{densify_mask, make_mask, make_position_ids, MaskRegime, MaskSpec};
use crate::packing::{build_packs, packing_efficiency, PackedSequence};
use crate::sampling::{plan_balanced, plan_moi, plan_packed, plan_sequence, ReplacementPolicy, SamplePlan, Strategy};
use crate::weights::{weights_moi, weights_packed, weights_sequence, LossWeights, Scheme};

/// How many items the oracle-backed verification checks execute.
const VERIFY_ORACLE_SAMPLE: usize = 4;
/// Post-quantization tolerance on per-item weight sums: the weights are
/// exact to ~1e-15 in f64 but stored as f32, so roundoff up to ~1e-6 is
/// legitimate.
const SUM_TOLERANCE: f64 = 1e-5;
/// Relative tolerance on individual stored weights against their re-derived
/// values, again dominated by f32 quantization.
const VALUE_TOLERANCE: f64 = 1e-5;
/// Numerical-independence threshold: masked segments must match their solo
/// runs to f64 roundoff, orders of magnitude below any real leak.
const INDEPENDENCE_TOLERANCE: f64 = 1e-12;

/// Summary of one completed pack run.
#[derive(Debug, Clone)]
pub struct PackReport {
    pub items: usize,
    pub max_len: usize,
    pub scheme: Scheme,
    /// Fraction of all written token slots that are padding.
    pub padding_fraction: f64,
    /// Instructions per task actually packed, in prompt-map order,
    /// counting repeats.
    pub per_task_counts: Vec<(String, usize)>,
    pub replacement_count: usize,
    pub dropped_chunks: usize,
    pub plan_digest: String,
}

impl fmt::Display for PackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "packed {} items × {} tokens ({} scheme, {:.2}% padding)",
            self.items,
            self.max_len,
            self.scheme.as_str(),
            self.padding_fraction * 100.0
        )?;
        let tasks: Vec<String> = self
            .per_task_counts
            .iter()
            .map(|(task, n)| format!("{task} {n}"))
            .collect();
        writeln!(f, "instructions per task: {}", tasks.join(", "))?;
        if self.replacement_count > 0 {
            writeln!(f, "resampled {} instructions to fill undersized tasks", self.replacement_count)?;
        }
        if self.dropped_chunks > 0 {
            writeln!(f, "dropped {} oversized chunks", self.dropped_chunks)?;
        }
        write!(f, "plan digest: {}", self.plan_digest)
    }
}

fn make_plan(config: &ResolvedConfig, corpus: &[crate::corpus::Instruction]) -> Result<SamplePlan> {
    match config.strategy {
        Strategy::Sequence => plan_sequence(corpus, config.seed),
        Strategy::Packed => plan_packed(corpus, config.seed),
        Strategy::Balanced => plan_balanced(
            corpus,
            &config.prompts,
            config.n_mix,
            config.seed,
            ReplacementPolicy::Reshuffle,
        ),
        Strategy::Moi => plan_moi(corpus, &config.prompts, config.n_mix, config.seed),
    }
}

/// One container row, computed per pack.
struct ItemRow {
    tokens: Vec<u32>,
    position_ids: Vec<u32>,
    loss_weights: Vec<f32>,
    segment_offsets: Vec<u32>,
    instruction_offsets: Vec<u32>,
    response_counts: Vec<u32>,
}

fn build_item_row(pack: &PackedSequence, config: &ResolvedConfig, pad_id: u32) -> Result<ItemRow> {
    let mask = make_mask(pack, config.mask_regime);
    let position_ids = make_position_ids(&mask, pack.total_len).ids;
    let scheme = config.scheme();
    let weights: LossWeights = match scheme {
        Scheme::SequenceRaw => weights_sequence(pack)?,
        Scheme::Packed | Scheme::MaskingOut => weights_packed(pack, scheme)?,
        Scheme::Moi => weights_moi(pack, config.n_mix)?,
    };
    let mut instruction_offsets: Vec<u32> =
        pack.instruction_boundaries.iter().map(|&(start, _)| start as u32).collect();
    instruction_offsets.push(pack.real_len() as u32);
    Ok(ItemRow {
        tokens: pack.tokens(pad_id),
        position_ids,
        loss_weights: weights.weights.iter().map(|&w| w as f32).collect(),
        segment_offsets: mask.segment_offsets.iter().map(|&o| o as u32).collect(),
        instruction_offsets,
        response_counts: weights.response_token_counts,
    })
}

/// Pack `corpus_path` under `config` and write the container to `out_path`.
pub fn run_pack(config: &ResolvedConfig, corpus_path: &Path, out_path: &Path) -> Result<PackReport> {
    let tokenizer = config.build_tokenizer()?;
    let corpus = load_corpus(corpus_path, &config.prompts)?;
    let plan = make_plan(config, &corpus)?;

    let tokenized: HashMap<String, TokenizedInstruction> = corpus
        .par_iter()
        .map(|inst| Ok((inst.id.clone(), tokenize_instruction(inst, tokenizer.as_ref())?)))
        .collect::<Result<_>>()?;

    let output = build_packs(&plan, &tokenized, config.max_len, config.overflow_policy)?;
    let pad_id = tokenizer.pad_id();
    let rows: Vec<ItemRow> = output
        .packs
        .par_iter()
        .map(|pack| build_item_row(pack, config, pad_id))
        .collect::<Result<_>>()?;

    let scheme = config.scheme();
    let mut arrays = BatchArrays::new(config.max_len);
    for row in &rows {
        arrays.push_item(
            &row.tokens,
            &row.position_ids,
            &row.loss_weights,
            &row.segment_offsets,
            &row.instruction_offsets,
            &row.response_counts,
            scheme,
        );
    }

    let meta = BatchMeta {
        format_version: FORMAT_VERSION,
        config: config.echo(),
        plan_digest: plan.digest(),
        item_count: arrays.item_count() as u64,
        max_len: config.max_len as u64,
        replacement_count: plan.replacement_count() as u64,
        dropped_chunks: output.dropped.clone(),
        plan,
    };
    write_batch(out_path, &meta, &arrays)?;

    let task_of: HashMap<&str, &str> = corpus
        .iter()
        .map(|inst| (inst.id.as_str(), inst.task.as_str()))
        .collect();
    let mut per_task_counts: Vec<(String, usize)> = config
        .prompts
        .tasks()
        .map(|task| (task.to_string(), 0))
        .collect();
    let dropped_ids: std::collections::HashSet<&str> = meta
        .dropped_chunks
        .iter()
        .flat_map(|d| d.instruction_ids.iter().map(String::as_str))
        .collect();
    let mut drop_budget: HashMap<&str, usize> = HashMap::new();
    for d in &meta.dropped_chunks {
        for id in &d.instruction_ids {
            *drop_budget.entry(id.as_str()).or_insert(0) += 1;
        }
    }
    for entry in &meta.plan.order {
        // Don't count plan entries that were dropped on overflow.
        if dropped_ids.contains(entry.id.as_str()) {
            if let Some(budget) = drop_budget.get_mut(entry.id.as_str()) {
                if *budget > 0 {
                    *budget -= 1;
                    continue;
                }
            }
        }
        let task = task_of[entry.id.as_str()];
        if let Some(slot) = per_task_counts.iter_mut().find(|(t, _)| t == task) {
            slot.1 += 1;
        }
    }

    Ok(PackReport {
        items: arrays.item_count(),
        max_len: config.max_len,
        scheme,
        padding_fraction: packing_efficiency(&output.packs),
        per_task_counts,
        replacement_count: meta.replacement_count as usize,
        dropped_chunks: meta.dropped_chunks.len(),
        plan_digest: meta.plan_digest.clone(),
    })
}

/// One verification check's outcome.
#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Everything `verify` established about a container.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub path: String,
    pub items: usize,
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verifying {} ({} items)", self.path, self.items)?;
        for check in &self.checks {
            let tag = if check.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{tag}  {}: {}", check.name, check.detail)?;
        }
        write!(
            f,
            "{}",
            if self.passed() { "all checks passed" } else { "VERIFICATION FAILED" }
        )
    }
}

fn mask_of_item(loaded: &LoadedBatch, regime: MaskRegime, i: usize) -> Result<MaskSpec> {
    let offsets: Vec<usize> = loaded
        .arrays
        .item_segment_offsets(i)
        .iter()
        .map(|&o| o as usize)
        .collect();
    let real_len = *offsets.last().unwrap();
    MaskSpec::new(regime, offsets, real_len)
}

/// Deterministically choose up to `k` distinct item indices.
fn sample_items(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if n <= k {
        return (0..n).collect();
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// Re-derive and re-execute a container's claims. Structural errors
/// (unreadable or malformed files) are returned as `Err`; every semantic
/// finding lands in the report.
pub fn run_verify(path: &Path, seed: u64) -> Result<VerifyReport> {
    let loaded = read_batch(path)?;
    let n = loaded.meta.item_count as usize;
    let max_len = loaded.meta.max_len as usize;
    let mut checks = Vec::new();

    // Checksums first, but keep going on mismatch: a corrupted array should
    // also show up in the semantic checks below.
    let mismatches = loaded.digest_mismatches();
    checks.push(VerifyCheck {
        name: "digests",
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("all {} arrays match their checksums", loaded.directory().len())
        } else {
            let names: Vec<&str> = mismatches.iter().map(|m| m.array.as_str()).collect();
            format!("checksum mismatch in {}", names.join(", "))
        },
    });

    let mut bad_codes = Vec::new();
    for i in 0..n {
        if loaded.arrays.scheme_of(i).is_err() {
            bad_codes.push(i);
        }
    }
    checks.push(VerifyCheck {
        name: "scheme-codes",
        passed: bad_codes.is_empty(),
        detail: if bad_codes.is_empty() {
            "every item carries a known weighting-scheme code".into()
        } else {
            format!("unknown scheme codes on items {bad_codes:?}")
        },
    });
    if !bad_codes.is_empty() {
        // Everything below keys off the scheme; report what we have.
        return Ok(VerifyReport { path: path.display().to_string(), items: n, checks });
    }

    let regime = loaded.meta.config["mask_regime"]
        .as_str()
        .and_then(|s| s.parse::<MaskRegime>().ok())
        .unwrap_or(MaskRegime::None);

    // Position ids must equal the values derived from the segmentation.
    let mut pos_bad = None;
    for i in 0..n {
        let mask = mask_of_item(&loaded, regime, i)?;
        let expected = make_position_ids(&mask, max_len).ids;
        if expected != loaded.arrays.item_position_ids(i) {
            pos_bad = Some(i);
            break;
        }
    }
    checks.push(VerifyCheck {
        name: "position-ids",
        passed: pos_bad.is_none(),
        detail: match pos_bad {
            None => format!("{n} items reset positions at every segment start"),
            Some(i) => format!("item {i} disagrees with its segmentation"),
        },
    });

    // Weight sums: normalized schemes total 1 per item, raw sequence
    // weights total the response-token count exactly.
    let mut worst_sum_dev = 0.0f64;
    let mut sum_bad = None;
    let mut value_bad: Option<(usize, String)> = None;
    let mut worst_value_dev = 0.0f64;
    for i in 0..n {
        let scheme = loaded.arrays.scheme_of(i).unwrap();
        let weights = loaded.arrays.item_loss_weights(i);
        let counts = loaded.arrays.item_response_counts(i);
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        let dev = if scheme.is_normalized() {
            (total - 1.0).abs()
        } else {
            let expected: u32 = counts.iter().sum();
            (total - expected as f64).abs()
        };
        if dev > worst_sum_dev {
            worst_sum_dev = dev;
        }
        if dev > SUM_TOLERANCE && sum_bad.is_none() {
            sum_bad = Some(i);
        }

        // Individual values: inside instruction j, nonzero weights must
        // number |y_j| and each equal the scheme's per-token weight.
        let offsets = loaded.arrays.item_instruction_offsets(i);
        let m = offsets.len() - 1;
        for j in 0..m {
            let span = &weights[offsets[j] as usize..offsets[j + 1] as usize];
            let y = counts[j] as f64;
            let expected = match scheme {
                Scheme::SequenceRaw => 1.0,
                _ => 1.0 / (m as f64 * y),
            };
            let mut nonzero = 0usize;
            for &w in span {
                if w != 0.0 {
                    nonzero += 1;
                    let rel = ((w as f64) - expected).abs() / expected.max(f64::MIN_POSITIVE);
                    if rel > worst_value_dev {
                        worst_value_dev = rel;
                    }
                    if rel > VALUE_TOLERANCE && value_bad.is_none() {
                        value_bad = Some((i, format!("instruction {j} carries weight {w} where {expected} was derived")));
                    }
                }
            }
            if nonzero != counts[j] as usize && value_bad.is_none() {
                value_bad = Some((
                    i,
                    format!("instruction {j} has {nonzero} weighted tokens but claims {}", counts[j]),
                ));
            }
        }
    }
    checks.push(VerifyCheck {
        name: "sum-weights",
        passed: sum_bad.is_none(),
        detail: match sum_bad {
            None => format!("per-item totals match their scheme (worst deviation {worst_sum_dev:.2e})"),
            Some(i) => format!("item {i} deviates by {worst_sum_dev:.2e}"),
        },
    });
    checks.push(VerifyCheck {
        name: "weight-values",
        passed: value_bad.is_none(),
        detail: match &value_bad {
            None => format!("every weighted token matches its re-derived value (worst rel dev {worst_value_dev:.2e})"),
            Some((i, msg)) => format!("item {i}: {msg}"),
        },
    });

    // Oracle checks on a deterministic sample of items.
    let sampled = sample_items(n, VERIFY_ORACLE_SAMPLE, seed);
    let vocab = loaded.arrays.tokens.iter().copied().max().unwrap_or(0) as usize + 1;
    let model = ToyModel::new(ToyConfig::small(vocab.max(4), max_len.max(1)), seed);
    let mut worst_leak = 0.0f64;
    for &i in &sampled {
        let mask = mask_of_item(&loaded, regime, i)?;
        let leak = model.segment_independence(loaded.arrays.item_tokens(i), &mask)?;
        if leak > worst_leak {
            worst_leak = leak;
        }
    }
    checks.push(VerifyCheck {
        name: "segment-independence",
        passed: worst_leak < INDEPENDENCE_TOLERANCE,
        detail: format!(
            "{} sampled items, max cross-segment influence {worst_leak:.2e} (bound {INDEPENDENCE_TOLERANCE:.0e})",
            sampled.len()
        ),
    });

    // Under per-instruction isolation with uniform arity and uniform
    // response lengths, a pack's weighted loss must reduce to the plain
    // average of its instructions' solo losses. Only checkable when the
    // container actually has that shape.
    let all_masking_out = (0..n).all(|i| loaded.arrays.scheme_of(i).unwrap() == Scheme::MaskingOut);
    let segments_are_instructions = (0..n).all(|i| {
        loaded.arrays.item_segment_offsets(i) == loaded.arrays.item_instruction_offsets(i)
    });
    let arities: std::collections::HashSet<usize> =
        (0..n).map(|i| loaded.arrays.item_instruction_offsets(i).len() - 1).collect();
    let counts: std::collections::HashSet<u32> = (0..n)
        .flat_map(|i| loaded.arrays.item_response_counts(i).to_vec())
        .collect();
    if !(all_masking_out && segments_are_instructions && arities.len() == 1 && counts.len() == 1) {
        let mut why = Vec::new();
        if !all_masking_out {
            why.push("scheme is not masking_out");
        }
        if !segments_are_instructions {
            why.push("segments differ from instructions");
        }
        if arities.len() != 1 {
            why.push("instruction counts vary");
        }
        if counts.len() != 1 {
            why.push("response lengths vary");
        }
        checks.push(VerifyCheck {
            name: "uniform-reduction",
            passed: true,
            detail: format!("not applicable: {}", why.join(", ")),
        });
    } else {
        let mut worst = 0.0f64;
        let mut oracle_err = None;
        for &i in &sampled {
            match reduction_deviation(&model, &loaded, regime, i) {
                Ok(dev) => worst = worst.max(dev),
                Err(e) => {
                    oracle_err = Some(format!("item {i} is not executable: {e}"));
                    break;
                }
            }
        }
        checks.push(match oracle_err {
            Some(detail) => VerifyCheck { name: "uniform-reduction", passed: false, detail },
            None => VerifyCheck {
                name: "uniform-reduction",
                passed: worst < 1e-9,
                detail: format!(
                    "{} sampled packs: weighted pack loss equals the mean of solo losses (worst rel dev {worst:.2e})",
                    sampled.len()
                ),
            },
        });
    }

    Ok(VerifyReport {
        path: path.display().to_string(),
        items: n,
        checks,
    })
}

/// Relative gap between one pack's weighted loss and the sum of its
/// instructions' solo losses under the same stored weights.
fn reduction_deviation(
    model: &ToyModel,
    loaded: &LoadedBatch,
    regime: MaskRegime,
    i: usize,
) -> Result<f64> {
    let mask = mask_of_item(loaded, regime, i)?;
    let tokens = loaded.arrays.item_tokens(i);
    let position_ids = loaded.arrays.item_position_ids(i);
    let weights: Vec<f64> = loaded.arrays.item_loss_weights(i).iter().map(|&w| w as f64).collect();
    let whole = model.eval_loss(tokens, position_ids, &mask, &weights)?;
    let mut parts = 0.0;
    let offsets = loaded.arrays.item_instruction_offsets(i);
    for j in 0..offsets.len() - 1 {
        let (start, end) = (offsets[j] as usize, offsets[j + 1] as usize);
        let solo_len = end - start;
        let solo_mask = MaskSpec::new(MaskRegime::None, vec![0, solo_len], solo_len)?;
        let solo_ids: Vec<u32> = (0..solo_len as u32).collect();
        parts += model.eval_loss(&tokens[start..end], &solo_ids, &solo_mask, &weights[start..end])?;
    }
    Ok((whole - parts).abs() / whole.abs().max(1.0))
}

/// Reconstruct which plan entries landed in which item. Only possible when
/// the chunk structure is knowable; dropped chunks are skipped in order.
fn item_instruction_ids(meta: &BatchMeta, arrays: &BatchArrays) -> Option<Vec<Vec<(String, bool)>>> {
    let chunk_size = match meta.plan.kind {
        Strategy::Sequence | Strategy::Packed => 1,
        Strategy::Balanced | Strategy::Moi => meta.plan.n_mix(),
    };
    if chunk_size == 0 || !meta.plan.order.len().is_multiple_of(chunk_size) {
        return None;
    }
    let chunks: Vec<&[crate::sampling::PlanEntry]> =
        meta.plan.order.chunks(chunk_size).collect();
    let mut kept = Vec::new();
    let mut drop_iter = meta.dropped_chunks.iter().peekable();
    for chunk in chunks {
        let ids: Vec<&str> = chunk.iter().map(|e| e.id.as_str()).collect();
        if let Some(dropped) = drop_iter.peek() {
            if dropped.instruction_ids.iter().map(String::as_str).collect::<Vec<_>>() == ids {
                drop_iter.next();
                continue;
            }
        }
        kept.extend(chunk.iter().map(|e| (e.id.clone(), e.resampled)));
    }
    if drop_iter.next().is_some() {
        return None;
    }
    let mut out = Vec::with_capacity(arrays.item_count());
    let mut cursor = 0usize;
    for i in 0..arrays.item_count() {
        let count = arrays.item_instruction_offsets(i).len() - 1;
        if cursor + count > kept.len() {
            return None;
        }
        out.push(kept[cursor..cursor + count].to_vec());
        cursor += count;
    }
    if cursor != kept.len() {
        return None;
    }
    Some(out)
}

/// Render a container overview, one item, or the embedded plan as text.
pub fn run_inspect(path: &Path, item: Option<usize>, show_plan: bool) -> Result<String> {
    let loaded = read_batch(path)?;
    if show_plan {
        return Ok(format!("{}\n", loaded.meta.plan.to_json_pretty()));
    }
    let n = loaded.meta.item_count as usize;
    let Some(k) = item else {
        return Ok(overview(&loaded));
    };
    if k >= n {
        return Err(Error::ItemOutOfRange { index: k, len: n });
    }

    let arrays = &loaded.arrays;
    let real_len = arrays.real_len(k);
    let max_len = loaded.meta.max_len as usize;
    let scheme = arrays.scheme_of(k)?;
    let ids = item_instruction_ids(&loaded.meta, arrays);
    let mut out = String::new();
    use std::fmt::Write as _;
    writeln!(out, "item {k} of {n}").unwrap();
    writeln!(out, "scheme: {}", scheme.as_str()).unwrap();
    writeln!(out, "real length: {real_len} of {max_len} tokens ({} padding)", max_len - real_len).unwrap();
    writeln!(out, "segment offsets: {:?}", arrays.item_segment_offsets(k)).unwrap();

    let offsets = arrays.item_instruction_offsets(k);
    let counts = arrays.item_response_counts(k);
    let weights = arrays.item_loss_weights(k);
    writeln!(out, "instructions: {}", offsets.len() - 1).unwrap();
    for j in 0..offsets.len() - 1 {
        let (start, end) = (offsets[j] as usize, offsets[j + 1] as usize);
        let span = &weights[start..end];
        let mass: f64 = span.iter().map(|&w| w as f64).sum();
        let value = span.iter().find(|&&w| w != 0.0).copied().unwrap_or(0.0);
        let id = match &ids {
            Some(map) => {
                let (id, resampled) = &map[k][j];
                if *resampled { format!("{id} (resampled)") } else { id.clone() }
            }
            None => "(id unavailable)".to_string(),
        };
        writeln!(
            out,
            "  [{j}] tokens [{start}, {end})  responses {}  weight {value:.6} (mass {mass:.6})  {id}",
            counts[j]
        )
        .unwrap();
    }

    if real_len <= 64 {
        let regime = loaded.meta.config["mask_regime"]
            .as_str()
            .and_then(|s| s.parse::<MaskRegime>().ok())
            .unwrap_or(MaskRegime::None);
        let mask = mask_of_item(&loaded, regime, k)?;
        let dense = densify_mask(&mask)?;
        writeln!(out, "attention (rows attend to columns marked #):").unwrap();
        for row in dense.iter().take(real_len) {
            let line: String = row
                .iter()
                .take(real_len)
                .map(|&a| if a { '#' } else { '.' })
                .collect();
            writeln!(out, "  {line}").unwrap();
        }
    }

    match tokenizer_from_echo(&loaded.meta.config) {
        Ok(tokenizer) => {
            writeln!(out, "text:").unwrap();
            for j in 0..offsets.len() - 1 {
                let (start, end) = (offsets[j] as usize, offsets[j + 1] as usize);
                let text = tokenizer.decode(&arrays.item_tokens(k)[start..end])?;
                writeln!(out, "--- instruction {j} ---").unwrap();
                for line in text.lines() {
                    writeln!(out, "    {line}").unwrap();
                }
            }
        }
        Err(e) => {
            writeln!(out, "text: unavailable ({e})").unwrap();
        }
    }
    Ok(out)
}

fn overview(loaded: &LoadedBatch) -> String {
    use std::fmt::Write as _;
    let n = loaded.meta.item_count as usize;
    let max_len = loaded.meta.max_len as usize;
    let mut pad_slots = 0usize;
    for i in 0..n {
        pad_slots += max_len - loaded.arrays.real_len(i);
    }
    let mut out = String::new();
    writeln!(out, "items: {n} × {max_len} tokens").unwrap();
    writeln!(
        out,
        "strategy: {}  mask regime: {}  seed: {}",
        loaded.meta.config["strategy"].as_str().unwrap_or("?"),
        loaded.meta.config["mask_regime"].as_str().unwrap_or("?"),
        loaded.meta.config["seed"]
    )
    .unwrap();
    if n > 0 {
        writeln!(out, "padding: {:.2}%", 100.0 * pad_slots as f64 / (n * max_len) as f64).unwrap();
    }
    writeln!(out, "replacements: {}", loaded.meta.replacement_count).unwrap();
    writeln!(out, "dropped chunks: {}", loaded.meta.dropped_chunks.len()).unwrap();
    writeln!(out, "plan digest: {}", loaded.meta.plan_digest).unwrap();
    out
}

fn tokenizer_from_echo(echo: &serde_json::Value) -> Result<Box<dyn crate::tokenizer::Tokenizer>> {
    match echo["tokenizer"]["mode"].as_str() {
        Some("builtin_bytes") => Ok(Box::new(crate::tokenizer::ByteTokenizer)),
        Some("vocab") => {
            let path = echo["tokenizer"]["vocab_path"].as_str().ok_or_else(|| Error::Config {
                msg: "config echo names a vocab tokenizer without a path".into(),
            })?;
            Ok(Box::new(crate::tokenizer::VocabTokenizer::from_file(Path::new(path))?))
        }
        _ => Err(Error::Config {
            msg: "config echo does not name a tokenizer".into(),
        }),
    }
}

/// Per-task corpus summary, validated against the configured prompt map.
pub fn run_stats(corpus_path: &Path, config: Option<&ResolvedConfig>) -> Result<CorpusStats> {
    let builtin;
    let prompts = match config {
        Some(cfg) => &cfg.prompts,
        None => {
            builtin = crate::corpus::PromptMap::builtin();
            &builtin
        }
    };
    let corpus = load_corpus(corpus_path, prompts)?;
    corpus_stats(&corpus, prompts)
}
