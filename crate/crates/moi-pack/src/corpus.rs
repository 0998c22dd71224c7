//! Instruction corpus: record types, the task→system-prompt map, and the
//! JSONL loader.
//!
//! A corpus file is UTF-8 text with one JSON object per line:
//! `{"id": "...", "task": "...", "turns": [{"role": "...", "text": "..."}]}`.
//! Loading validates every record against the prompt map and guarantees that
//! each returned instruction carries exactly one system turn at position 0 —
//! injected from the map when the record has none, kept verbatim when the
//! record supplies its own.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speaker of a single conversation turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    /// Lowercase name as it appears in chat markup.
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One turn of a conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text: text.into(),
        }
    }
}

/// A single training conversation tagged with its task domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub task: String,
    pub turns: Vec<Turn>,
}

impl Instruction {
    /// Check the structural rules every loaded instruction must satisfy:
    /// a known task, at most one system turn and only at position 0, a user
    /// turn opening the dialogue, strict role alternation (no two consecutive
    /// turns share a role), at least one assistant reply, and non-empty text
    /// on every user and assistant turn.
    pub fn validate(&self, prompts: &PromptMap) -> Result<()> {
        if !prompts.contains(&self.task) {
            return Err(Error::UnknownTask {
                id: self.id.clone(),
                task: self.task.clone(),
                known: prompts.tasks().collect::<Vec<_>>().join(", "),
            });
        }
        let invalid = |msg: &str| Error::InvalidInstruction {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if self.turns.is_empty() {
            return Err(invalid("conversation has no turns"));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.role == Role::System && i != 0 {
                return Err(invalid("system turn only allowed at position 0"));
            }
            if turn.role != Role::System && turn.text.is_empty() {
                return Err(invalid("user and assistant turns must have non-empty text"));
            }
            if i > 0 && turn.role == self.turns[i - 1].role {
                return Err(invalid("two consecutive turns share a role"));
            }
        }
        let dialogue = if self.turns[0].role == Role::System {
            &self.turns[1..]
        } else {
            &self.turns[..]
        };
        match dialogue.first() {
            Some(t) if t.role == Role::User => {}
            Some(_) => return Err(invalid("no leading user turn")),
            None => return Err(invalid("conversation has no user turn")),
        }
        if !dialogue.iter().any(|t| t.role == Role::Assistant) {
            return Err(invalid("conversation has no assistant turn"));
        }
        Ok(())
    }
}

/// Ordered task→system-prompt table. Declaration order is meaningful: it
/// fixes the task order inside every mixed chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMap {
    entries: IndexMap<String, String>,
    default_task: String,
}

impl PromptMap {
    /// Build a map from `(task, prompt)` pairs in declaration order.
    pub fn new<I, S>(pairs: I, default_task: &str) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut entries = IndexMap::new();
        for (task, prompt) in pairs {
            let (task, prompt) = (task.into(), prompt.into());
            if task.is_empty() {
                return Err(Error::Config {
                    msg: "prompt map task names must be non-empty".into(),
                });
            }
            if prompt.is_empty() {
                return Err(Error::Config {
                    msg: format!("prompt for task {task:?} must be non-empty"),
                });
            }
            if entries.insert(task.clone(), prompt).is_some() {
                return Err(Error::Config {
                    msg: format!("task {task:?} declared twice in prompt map"),
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Config {
                msg: "prompt map declares no tasks".into(),
            });
        }
        if !entries.contains_key(default_task) {
            return Err(Error::Config {
                msg: format!("default task {default_task:?} is not declared in the prompt map"),
            });
        }
        Ok(PromptMap {
            entries,
            default_task: default_task.to_string(),
        })
    }

    /// The built-in four-domain map used when a config file does not declare
    /// its own: general chat, code, math, and tool-using agent dialogues.
    pub fn builtin() -> Self {
        PromptMap::new(
            [
                ("chat", "You are a helpful assistant."),
                ("code", "You are a programmer."),
                ("math", "You are a mathematics expert."),
                ("agent", "You are an Agent with a lot of tools."),
            ],
            "chat",
        )
        .expect("builtin prompt map is valid")
    }

    pub fn contains(&self, task: &str) -> bool {
        self.entries.contains_key(task)
    }

    pub fn prompt_for(&self, task: &str) -> Option<&str> {
        self.entries.get(task).map(String::as_str)
    }

    pub fn default_task(&self) -> &str {
        &self.default_task
    }

    /// Task names in declaration order.
    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn task_count(&self) -> usize {
        self.entries.len()
    }

    /// Task order used inside every mixed chunk: the default task first,
    /// then the remaining tasks in declaration order.
    pub fn chunk_template(&self) -> Vec<String> {
        let mut template = vec![self.default_task.clone()];
        template.extend(
            self.tasks()
                .filter(|t| *t != self.default_task)
                .map(String::from),
        );
        template
    }
}

/// Parse corpus text (one JSON record per line) against a prompt map.
///
/// Pure function of the text and the map: the same bytes always yield the
/// same instructions. Records without a system turn get one injected from
/// the map; records with one keep it verbatim. Whitespace-only lines are
/// skipped; anything else that fails to parse is reported with its 1-based
/// line number.
pub fn parse_corpus(text: &str, prompts: &PromptMap) -> Result<Vec<Instruction>> {
    let mut seen_ids = HashSet::new();
    let mut corpus = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut inst: Instruction =
            serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        if !seen_ids.insert(inst.id.clone()) {
            return Err(Error::DuplicateId { id: inst.id });
        }
        if !prompts.contains(&inst.task) {
            return Err(Error::UnknownTask {
                id: inst.id.clone(),
                task: inst.task.clone(),
                known: prompts.tasks().collect::<Vec<_>>().join(", "),
            });
        }
        if inst.turns.first().map(|t| t.role) != Some(Role::System) {
            let prompt = prompts
                .prompt_for(&inst.task)
                .expect("task presence checked above");
            inst.turns.insert(0, Turn::new(Role::System, prompt));
        }
        inst.validate(prompts)?;
        corpus.push(inst);
    }
    Ok(corpus)
}

/// Load a corpus from a JSONL file. See [`parse_corpus`] for the rules.
pub fn load_corpus(path: &Path, prompts: &PromptMap) -> Result<Vec<Instruction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, prompts)
}

/// Serialize instructions back to JSONL. Reloading the result against the
/// same prompt map reproduces the input list exactly.
pub fn corpus_to_jsonl(corpus: &[Instruction]) -> String {
    let mut out = String::new();
    for inst in corpus {
        out.push_str(&serde_json::to_string(inst).expect("instructions serialize cleanly"));
        out.push('\n');
    }
    out
}

/// Per-task summary of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStats {
    pub task: String,
    pub instruction_count: usize,
    pub min_turns: usize,
    pub mean_turns: f64,
    pub max_turns: usize,
    /// True when the task is declared in the prompt map but has no
    /// instructions — balanced and mixed planning will refuse such a corpus.
    pub empty: bool,
}

/// Summary over every task the prompt map declares, in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub per_task: Vec<TaskStats>,
    pub total_instructions: usize,
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<12} {:>6} {:>9} {:>10} {:>9}",
            "task", "count", "min_turns", "mean_turns", "max_turns"
        )?;
        for t in &self.per_task {
            if t.empty {
                writeln!(f, "{:<12} {:>6} {:>31}", t.task, 0, "(empty task)")?;
            } else {
                writeln!(
                    f,
                    "{:<12} {:>6} {:>9} {:>10.2} {:>9}",
                    t.task, t.instruction_count, t.min_turns, t.mean_turns, t.max_turns
                )?;
            }
        }
        write!(f, "total: {} instructions", self.total_instructions)
    }
}

/// Summarize a loaded corpus per task. Every task the prompt map declares
/// appears in the output, with zero-count tasks flagged as empty.
pub fn corpus_stats(corpus: &[Instruction], prompts: &PromptMap) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seen_ids = HashSet::new();
    for inst in corpus {
        if !seen_ids.insert(inst.id.as_str()) {
            return Err(Error::DuplicateId {
                id: inst.id.clone(),
            });
        }
        if !prompts.contains(&inst.task) {
            return Err(Error::UnknownTask {
                id: inst.id.clone(),
                task: inst.task.clone(),
                known: prompts.tasks().collect::<Vec<_>>().join(", "),
            });
        }
    }
    let per_task = prompts
        .tasks()
        .map(|task| {
            let turn_counts: Vec<usize> = corpus
                .iter()
                .filter(|i| i.task == task)
                .map(|i| i.turns.len())
                .collect();
            if turn_counts.is_empty() {
                TaskStats {
                    task: task.to_string(),
                    instruction_count: 0,
                    min_turns: 0,
                    mean_turns: 0.0,
                    max_turns: 0,
                    empty: true,
                }
            } else {
                let total: usize = turn_counts.iter().sum();
                TaskStats {
                    task: task.to_string(),
                    instruction_count: turn_counts.len(),
                    min_turns: *turn_counts.iter().min().unwrap(),
                    mean_turns: total as f64 / turn_counts.len() as f64,
                    max_turns: *turn_counts.iter().max().unwrap(),
                    empty: false,
                }
            }
        })
        .collect();
    Ok(CorpusStats {
        per_task,
        total_instructions: corpus.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, task: &str, turns: &str) -> String {
        format!(r#"{{"id": "{id}", "task": "{task}", "turns": [{turns}]}}"#)
    }

    const USER_ASSISTANT: &str = r#"{"role": "user", "text": "hi"}, {"role": "assistant", "text": "hello"}"#;

    #[test]
    fn injects_default_system_prompt_for_chat() {
        let corpus =
            parse_corpus(&record("a", "chat", USER_ASSISTANT), &PromptMap::builtin()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(
            corpus[0].turns[0],
            Turn::new(Role::System, "You are a helpful assistant.")
        );
        assert_eq!(corpus[0].turns.len(), 3);
    }

    #[test]
    fn injects_task_specific_prompt_for_code() {
        let corpus =
            parse_corpus(&record("a", "code", USER_ASSISTANT), &PromptMap::builtin()).unwrap();
        assert_eq!(
            corpus[0].turns[0],
            Turn::new(Role::System, "You are a programmer.")
        );
    }

    #[test]
    fn keeps_explicit_system_turn_verbatim() {
        let turns = r#"{"role": "system", "text": "Custom prompt."}, "#.to_string() + USER_ASSISTANT;
        let corpus = parse_corpus(&record("a", "chat", &turns), &PromptMap::builtin()).unwrap();
        assert_eq!(corpus[0].turns[0], Turn::new(Role::System, "Custom prompt."));
        assert_eq!(corpus[0].turns.len(), 3);
    }

    #[test]
    fn rejects_leading_assistant_turn() {
        let turns = r#"{"role": "assistant", "text": "hi"}"#;
        let err = parse_corpus(&record("a", "chat", turns), &PromptMap::builtin()).unwrap_err();
        assert!(matches!(err, Error::InvalidInstruction { .. }), "{err}");
        assert!(err.to_string().contains("no leading user turn"));
    }

    #[test]
    fn rejects_consecutive_same_role_turns() {
        let turns = r#"{"role": "user", "text": "a"}, {"role": "user", "text": "b"}, {"role": "assistant", "text": "c"}"#;
        let err = parse_corpus(&record("a", "chat", turns), &PromptMap::builtin()).unwrap_err();
        assert!(err.to_string().contains("share a role"), "{err}");
    }

    #[test]
    fn rejects_system_turn_after_start() {
        let turns = r#"{"role": "user", "text": "a"}, {"role": "system", "text": "late"}"#;
        let err = parse_corpus(&record("a", "chat", turns), &PromptMap::builtin()).unwrap_err();
        assert!(err.to_string().contains("position 0"), "{err}");
    }

    #[test]
    fn rejects_unknown_task_by_name() {
        let err =
            parse_corpus(&record("a", "poetry", USER_ASSISTANT), &PromptMap::builtin()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("poetry"), "{msg}");
        assert!(matches!(err, Error::UnknownTask { .. }));
    }

    #[test]
    fn reports_malformed_line_number() {
        let text = format!("{}\nnot json at all\n", record("a", "chat", USER_ASSISTANT));
        let err = parse_corpus(&text, &PromptMap::builtin()).unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = format!(
            "{}\n{}\n",
            record("dup", "chat", USER_ASSISTANT),
            record("dup", "code", USER_ASSISTANT)
        );
        let err = parse_corpus(&text, &PromptMap::builtin()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { ref id } if id == "dup"), "{err}");
    }

    #[test]
    fn rejects_empty_assistant_text() {
        let turns = r#"{"role": "user", "text": "a"}, {"role": "assistant", "text": ""}"#;
        let err = parse_corpus(&record("a", "chat", turns), &PromptMap::builtin()).unwrap_err();
        assert!(err.to_string().contains("non-empty"), "{err}");
    }

    #[test]
    fn rejects_conversation_without_assistant_reply() {
        let turns = r#"{"role": "user", "text": "a"}"#;
        let err = parse_corpus(&record("a", "chat", turns), &PromptMap::builtin()).unwrap_err();
        assert!(err.to_string().contains("no assistant turn"), "{err}");
    }

    #[test]
    fn loads_from_file_and_round_trips() {
        use std::io::Write;
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "{}", record("a", "chat", USER_ASSISTANT)).unwrap();
        writeln!(file, "{}", record("b", "math", USER_ASSISTANT)).unwrap();
        let prompts = PromptMap::builtin();
        let corpus = load_corpus(file.path(), &prompts).unwrap();
        assert_eq!(corpus.len(), 2);
        let reparsed = parse_corpus(&corpus_to_jsonl(&corpus), &prompts).unwrap();
        assert_eq!(reparsed, corpus);
    }

    #[test]
    fn stats_cover_declared_tasks_and_flag_empty_ones() {
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(&record(&format!("c{i}"), "chat", USER_ASSISTANT));
            text.push('\n');
        }
        let prompts = PromptMap::builtin();
        let corpus = parse_corpus(&text, &prompts).unwrap();
        let stats = corpus_stats(&corpus, &prompts).unwrap();
        assert_eq!(stats.total_instructions, 10);
        let chat = &stats.per_task[0];
        assert_eq!((chat.task.as_str(), chat.instruction_count), ("chat", 10));
        assert_eq!((chat.min_turns, chat.max_turns), (3, 3));
        assert!((chat.mean_turns - 3.0).abs() < 1e-12);
        let code = stats.per_task.iter().find(|t| t.task == "code").unwrap();
        assert!(code.empty);
        assert_eq!(code.instruction_count, 0);
    }

    #[test]
    fn stats_reject_duplicate_ids_and_empty_corpus() {
        let prompts = PromptMap::builtin();
        let corpus = parse_corpus(&record("x", "chat", USER_ASSISTANT), &prompts).unwrap();
        let tripled = vec![corpus[0].clone(), corpus[0].clone(), corpus[0].clone()];
        assert!(matches!(
            corpus_stats(&tripled, &prompts).unwrap_err(),
            Error::DuplicateId { .. }
        ));
        assert!(matches!(
            corpus_stats(&[], &prompts).unwrap_err(),
            Error::EmptyCorpus
        ));
    }

    #[test]
    fn chunk_template_puts_default_task_first() {
        let map = PromptMap::new(
            [("code", "B."), ("chat", "A."), ("math", "C.")],
            "math",
        )
        .unwrap();
        assert_eq!(map.chunk_template(), vec!["math", "code", "chat"]);
        assert_eq!(PromptMap::builtin().chunk_template(), vec!["chat", "code", "math", "agent"]);
    }

    #[test]
    fn prompt_map_rejects_bad_declarations() {
        assert!(PromptMap::new([("chat", "")], "chat").is_err());
        assert!(PromptMap::new([("chat", "A.")], "code").is_err());
        assert!(PromptMap::new([("chat", "A."), ("chat", "B.")], "chat").is_err());
        let empty: [(&str, &str); 0] = [];
        assert!(PromptMap::new(empty, "chat").is_err());
    }
}
