//! Run configuration.
//!
//! A run is described by a small TOML file:
//!
//! ```toml
//! [pipeline]
//! strategy = "moi"            # sequence | packed | balanced | moi
//! max_len = 512               # default 8192
//! n_mix = 4                   # default: number of declared tasks
//! seed = 7                    # default 0
//! mask_regime = "chunk"       # default depends on the strategy
//! overflow_policy = "abort"   # abort | drop
//!
//! [tokenizer]                 # optional; defaults to the byte tokenizer
//! mode = "vocab"              # builtin_bytes | vocab
//! vocab_path = "vocab.json"   # required for mode = "vocab"
//!
//! [prompt_map]                # optional; defaults to the built-in tasks
//! default_task = "chat"
//! [[prompt_map.tasks]]
//! task = "chat"
//! prompt = "You are a helpful assistant."
//! ```
//!
//! Unknown keys anywhere are rejected, so a typo cannot silently fall back
//! to a default. Every default is applied here, in one place, and the
//! fully resolved configuration is echoed into the output container so a
//! batch file is self-describing.
//!
//! The mask regime defaults to `none` for sequence, packed, and balanced
//! runs, and to `chunk` for moi runs; overriding it is how the masking
//! ablations are produced. The `packed` strategy merges each pack into a
//! single chunk, so `packed` + `chunk` masking would silently equal no
//! masking at all — that combination is rejected instead.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::corpus::PromptMap;
use crate::error::{Error, Result};
use crate::masking::MaskRegime;
use crate::packing::OverflowPolicy;
use crate::sampling::Strategy;
use crate::tokenizer::{ByteTokenizer, Tokenizer, VocabTokenizer};
use crate::weights::Scheme;

pub const DEFAULT_MAX_LEN: usize = 8192;

/// Which tokenizer a run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerChoice {
    BuiltinBytes,
    Vocab { path: PathBuf },
}

/// A configuration with every default applied and every combination checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub strategy: Strategy,
    pub max_len: usize,
    pub n_mix: usize,
    pub seed: u64,
    pub mask_regime: MaskRegime,
    pub overflow_policy: OverflowPolicy,
    pub tokenizer: TokenizerChoice,
    pub prompts: PromptMap,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    pipeline: RawPipeline,
    tokenizer: Option<RawTokenizer>,
    prompt_map: Option<RawPromptMap>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    strategy: String,
    max_len: Option<usize>,
    n_mix: Option<usize>,
    seed: Option<u64>,
    mask_regime: Option<String>,
    overflow_policy: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTokenizer {
    mode: String,
    vocab_path: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPromptMap {
    default_task: String,
    tasks: Vec<RawTask>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    task: String,
    prompt: String,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config { msg: msg.into() }
}

/// The mask regime a strategy uses when none is named.
pub fn default_regime(strategy: Strategy) -> MaskRegime {
    match strategy {
        Strategy::Moi => MaskRegime::Chunk,
        Strategy::Sequence | Strategy::Packed | Strategy::Balanced => MaskRegime::None,
    }
}

impl ResolvedConfig {
    /// The loss-weighting scheme this configuration trains under.
    ///
    /// Sequence runs keep raw per-token weights (a trainer normalizes by
    /// the batch's total response length); everything else carries
    /// equalized weights and is distinguished by its mask regime.
    pub fn scheme(&self) -> Scheme {
        match (self.strategy, self.mask_regime) {
            (Strategy::Sequence, _) => Scheme::SequenceRaw,
            (_, MaskRegime::None) => Scheme::Packed,
            (_, MaskRegime::Isolated) => Scheme::MaskingOut,
            (_, MaskRegime::Chunk) => Scheme::Moi,
        }
    }

    /// Instantiate the configured tokenizer.
    pub fn build_tokenizer(&self) -> Result<Box<dyn Tokenizer>> {
        match &self.tokenizer {
            TokenizerChoice::BuiltinBytes => Ok(Box::new(ByteTokenizer)),
            TokenizerChoice::Vocab { path } => Ok(Box::new(VocabTokenizer::from_file(path)?)),
        }
    }

    /// JSON echo of the full resolved configuration, embedded in output
    /// containers.
    pub fn echo(&self) -> serde_json::Value {
        let tokenizer = match &self.tokenizer {
            TokenizerChoice::BuiltinBytes => serde_json::json!({"mode": "builtin_bytes"}),
            TokenizerChoice::Vocab { path } => {
                serde_json::json!({"mode": "vocab", "vocab_path": path.display().to_string()})
            }
        };
        let tasks: Vec<serde_json::Value> = self
            .prompts
            .tasks()
            .map(|task| {
                serde_json::json!({"task": task, "prompt": self.prompts.prompt_for(task).unwrap()})
            })
            .collect();
        serde_json::json!({
            "strategy": self.strategy.as_str(),
            "max_len": self.max_len,
            "n_mix": self.n_mix,
            "seed": self.seed,
            "mask_regime": self.mask_regime.as_str(),
            "overflow_policy": match self.overflow_policy {
                OverflowPolicy::Abort => "abort",
                OverflowPolicy::Drop => "drop",
            },
            "scheme": self.scheme().as_str(),
            "tokenizer": tokenizer,
            "prompt_map": {
                "default_task": self.prompts.default_task(),
                "tasks": tasks,
            },
        })
    }
}

/// Parse and resolve a configuration. `base_dir` anchors relative
/// `vocab_path` values (callers pass the config file's directory).
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ResolvedConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;

    let strategy = Strategy::from_str(&raw.pipeline.strategy)?;
    let max_len = raw.pipeline.max_len.unwrap_or(DEFAULT_MAX_LEN);
    if max_len == 0 {
        return Err(config_err("max_len must be at least 1"));
    }
    let seed = raw.pipeline.seed.unwrap_or(0);

    let mask_regime = match &raw.pipeline.mask_regime {
        Some(s) => MaskRegime::from_str(s)?,
        None => default_regime(strategy),
    };
    if strategy == Strategy::Packed && mask_regime == MaskRegime::Chunk {
        return Err(config_err(
            "strategy \"packed\" merges each pack into one chunk, so mask_regime \"chunk\" \
             would be a no-op; use \"none\", \"isolated\", or a chunked strategy",
        ));
    }

    let overflow_policy = match raw.pipeline.overflow_policy.as_deref() {
        None | Some("abort") => OverflowPolicy::Abort,
        Some("drop") => OverflowPolicy::Drop,
        Some(other) => {
            return Err(config_err(format!(
                "unknown overflow_policy {other:?} (expected \"abort\" or \"drop\")"
            )))
        }
    };

    let prompts = match raw.prompt_map {
        None => PromptMap::builtin(),
        Some(pm) => {
            let pairs: Vec<(String, String)> =
                pm.tasks.into_iter().map(|t| (t.task, t.prompt)).collect();
            PromptMap::new(pairs, &pm.default_task)?
        }
    };

    let n_mix = raw.pipeline.n_mix.unwrap_or_else(|| prompts.task_count());

    let tokenizer = match raw.tokenizer {
        None => TokenizerChoice::BuiltinBytes,
        Some(t) => match t.mode.as_str() {
            "builtin_bytes" => {
                if t.vocab_path.is_some() {
                    return Err(config_err(
                        "vocab_path is set but mode is \"builtin_bytes\"; remove one",
                    ));
                }
                TokenizerChoice::BuiltinBytes
            }
            "vocab" => {
                let rel = t.vocab_path.ok_or_else(|| {
                    config_err("tokenizer mode \"vocab\" needs a vocab_path")
                })?;
                let rel = PathBuf::from(rel);
                let path = if rel.is_absolute() { rel } else { base_dir.join(rel) };
                TokenizerChoice::Vocab { path }
            }
            other => {
                return Err(config_err(format!(
                    "unknown tokenizer mode {other:?} (expected \"builtin_bytes\" or \"vocab\")"
                )))
            }
        },
    };

    Ok(ResolvedConfig {
        strategy,
        max_len,
        n_mix,
        seed,
        mask_regime,
        overflow_policy,
        tokenizer,
        prompts,
    })
}

/// Load a configuration file, anchoring relative paths at its directory.
pub fn load_config(path: &Path) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parse_config(&text, base)
}
