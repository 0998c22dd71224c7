//! Chat-markup rendering and per-instruction tokenization.
//!
//! Every turn renders as `<|im_start|>ROLE\nTEXT\n<|im_end|>\n`, with no
//! separators beyond those newlines. Tokenization mirrors the rendering —
//! turn markers become special ids, everything between them goes through the
//! tokenizer — and records which token ranges carry loss: each assistant
//! payload and each assistant turn's closing `<|im_end|>` marker. The
//! scaffold (`<|im_start|>assistant\n`, the payload-terminating newline, and
//! all system/user tokens) stays loss-free.

use crate::corpus::{Instruction, Role};
use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, IM_END_TEXT, IM_START_TEXT};

/// Render an instruction to chat markup, one block per turn.
pub fn render_chatml(inst: &Instruction) -> String {
    let mut out = String::new();
    for turn in &inst.turns {
        out.push_str(IM_START_TEXT);
        out.push_str(turn.role.as_str());
        out.push('\n');
        out.push_str(&turn.text);
        out.push('\n');
        out.push_str(IM_END_TEXT);
        out.push('\n');
    }
    out
}

/// One instruction as token ids plus the loss-bearing ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInstruction {
    pub source_id: String,
    pub task: String,
    pub tokens: Vec<u32>,
    /// Half-open `[start, end)` token ranges that carry loss: each assistant
    /// payload, and separately each assistant turn's closing marker (the
    /// scaffold newline between them carries none, so the two ranges stay
    /// disjoint).
    pub response_spans: Vec<(usize, usize)>,
    /// Total loss-bearing tokens: the sum of all span lengths.
    pub response_token_count: usize,
}

impl TokenizedInstruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when token `idx` falls inside a response span.
    pub fn is_response_token(&self, idx: usize) -> bool {
        self.response_spans
            .iter()
            .any(|&(s, e)| idx >= s && idx < e)
    }
}

/// Tokenize one instruction's chat markup.
///
/// Markup pieces are encoded independently (role, newline, payload, ...) so
/// that response boundaries always fall on token boundaries, and their
/// concatenation is the token stream. With the byte tokenizer this equals
/// encoding the rendered string wholesale, markers aside. An assistant turn
/// whose payload encodes to zero tokens is an error: such a turn would have
/// nothing to learn from.
pub fn tokenize_instruction(
    inst: &Instruction,
    tokenizer: &dyn Tokenizer,
) -> Result<TokenizedInstruction> {
    let mut tokens = Vec::new();
    let mut response_spans = Vec::new();
    let newline = tokenizer.encode("\n")?;
    for turn in &inst.turns {
        tokens.push(tokenizer.im_start_id());
        tokens.extend(tokenizer.encode(turn.role.as_str())?);
        tokens.extend(&newline);
        let payload_start = tokens.len();
        tokens.extend(tokenizer.encode(&turn.text)?);
        let payload_end = tokens.len();
        tokens.extend(&newline);
        let marker_at = tokens.len();
        tokens.push(tokenizer.im_end_id());
        tokens.push(
            *newline
                .first()
                .expect("newline must encode to at least one token"),
        );
        if turn.role == Role::Assistant {
            if payload_end == payload_start {
                return Err(Error::ZeroResponseTokens {
                    id: inst.id.clone(),
                });
            }
            response_spans.push((payload_start, payload_end));
            response_spans.push((marker_at, marker_at + 1));
        }
    }
    if response_spans.is_empty() {
        return Err(Error::ZeroResponseTokens {
            id: inst.id.clone(),
        });
    }
    let response_token_count = response_spans.iter().map(|(s, e)| e - s).sum();
    Ok(TokenizedInstruction {
        source_id: inst.id.clone(),
        task: inst.task.clone(),
        tokens,
        response_spans,
        response_token_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PromptMap, Turn};
    use crate::tokenizer::ByteTokenizer;

    fn inst(turns: Vec<Turn>) -> Instruction {
        Instruction {
            id: "t".into(),
            task: "chat".into(),
            turns,
        }
    }

    fn golden_instruction() -> Instruction {
        let prompts = PromptMap::builtin();
        let record = serde_json::json!({
            "id": "golden",
            "task": "chat",
            "turns": [
                {"role": "user", "text": "How are you?"},
                {"role": "assistant", "text": "As I am a large language model, I do not \
have personal emotions. However, I am functioning properly and ready to assist you with \
any information or tasks you need help with. How may I be of service today?"},
            ],
        });
        crate::corpus::parse_corpus(&record.to_string(), &prompts)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn renders_golden_transcript_byte_for_byte() {
        let expected = include_str!("../fixtures/chatml_golden.txt");
        assert_eq!(render_chatml(&golden_instruction()), expected);
    }

    #[test]
    fn two_round_conversation_renders_four_blocks_in_order() {
        let rendered = render_chatml(&inst(vec![
            Turn::new(Role::User, "q1"),
            Turn::new(Role::Assistant, "a1"),
            Turn::new(Role::User, "q2"),
            Turn::new(Role::Assistant, "a2"),
        ]));
        assert_eq!(rendered.matches(IM_START_TEXT).count(), 4);
        assert_eq!(rendered.matches(IM_END_TEXT).count(), 4);
        let roles: Vec<&str> = rendered
            .split(IM_START_TEXT)
            .skip(1)
            .map(|block| block.split('\n').next().unwrap())
            .collect();
        assert_eq!(roles, ["user", "assistant", "user", "assistant"]);
    }

    #[test]
    fn assistant_ok_yields_three_response_tokens() {
        let tok = tokenize_instruction(
            &inst(vec![
                Turn::new(Role::User, "hi"),
                Turn::new(Role::Assistant, "ok"),
            ]),
            &ByteTokenizer,
        )
        .unwrap();
        // Payload "ok" is two byte tokens, plus the closing marker.
        assert_eq!(tok.response_token_count, 3);
        assert_eq!(tok.response_spans.len(), 2);
        let (ps, pe) = tok.response_spans[0];
        assert_eq!(&tok.tokens[ps..pe], &[111, 107]);
        let (ms, me) = tok.response_spans[1];
        assert_eq!((me - ms, tok.tokens[ms]), (1, ByteTokenizer::IM_END));
        // The scaffold newline between payload and marker carries no loss.
        assert_eq!(ms, pe + 1);
    }

    #[test]
    fn multiple_assistant_turns_accumulate_counts() {
        let tok = tokenize_instruction(
            &inst(vec![
                Turn::new(Role::User, "q"),
                Turn::new(Role::Assistant, "ab"),
                Turn::new(Role::User, "r"),
                Turn::new(Role::Assistant, "wxyz"),
            ]),
            &ByteTokenizer,
        )
        .unwrap();
        assert_eq!(tok.response_token_count, (2 + 1) + (4 + 1));
    }

    #[test]
    fn empty_assistant_payload_is_an_error() {
        let err = tokenize_instruction(
            &inst(vec![
                Turn::new(Role::User, "q"),
                Turn::new(Role::Assistant, ""),
            ]),
            &ByteTokenizer,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ZeroResponseTokens { .. }), "{err}");
    }

    #[test]
    fn conversation_without_assistant_turns_is_an_error() {
        let err = tokenize_instruction(
            &inst(vec![Turn::new(Role::User, "q")]),
            &ByteTokenizer,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ZeroResponseTokens { .. }), "{err}");
    }

    #[test]
    fn byte_tokens_round_trip_to_the_rendered_string() {
        let inst = golden_instruction();
        let tok = tokenize_instruction(&inst, &ByteTokenizer).unwrap();
        assert_eq!(
            ByteTokenizer.decode(&tok.tokens).unwrap(),
            render_chatml(&inst)
        );
    }

    #[test]
    fn spans_are_disjoint_ascending_and_sum_to_the_count() {
        let tok = tokenize_instruction(&golden_instruction(), &ByteTokenizer).unwrap();
        for pair in tok.response_spans.windows(2) {
            assert!(pair[0].1 <= pair[1].0, "spans overlap or regress: {pair:?}");
        }
        for &(s, e) in &tok.response_spans {
            assert!(s < e && e <= tok.tokens.len());
        }
        let total: usize = tok.response_spans.iter().map(|(s, e)| e - s).sum();
        assert_eq!(total, tok.response_token_count);
        // Payload of the golden reply is 204 bytes, plus one marker token.
        assert_eq!(tok.response_token_count, 204 + 1);
    }

    #[test]
    fn system_and_user_tokens_never_carry_loss() {
        let inst = golden_instruction();
        let tok = tokenize_instruction(&inst, &ByteTokenizer).unwrap();
        // With the byte tokenizer a turn occupies
        // 1 + len(role) + 1 + len(text) + 1 + 1 + 1 tokens; the assistant
        // block starts after the system and user turns, and no response
        // span may begin before it.
        let assistant_block_at: usize = inst.turns[..2]
            .iter()
            .map(|t| t.role.as_str().len() + t.text.len() + 5)
            .sum();
        for &(s, _) in &tok.response_spans {
            assert!(s >= assistant_block_at, "span {s} starts inside the prompt");
        }
        // And every token outside the spans is scaffold or prompt: its id
        // is never counted.
        let in_spans: usize = (0..tok.tokens.len())
            .filter(|&i| tok.is_response_token(i))
            .count();
        assert_eq!(in_spans, tok.response_token_count);
    }
}
