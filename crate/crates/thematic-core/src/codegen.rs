//! Initial code generation per chunk and sequential grouping of codes.
//!
//! Codes are the atomic analytic unit: a concise name, a meaningful
//! description, and representative verbatim quotes. Every quote is checked
//! against its source chunk; codes whose quotes cannot be found are kept but
//! flagged unverified rather than silently dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_whitespace, word_count, Chunk};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{PromptError, Prompts, Strategy};

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("no JSON array found in model reply")]
    NoJsonArray,
    #[error("malformed object in JSON array: {0}")]
    MalformedObject(String),
    #[error("single code `{name}` serializes to {words} words, over the {budget}-word group budget")]
    CodeExceedsBudget {
        name: String,
        words: usize,
        budget: usize,
    },
    #[error("grouping requires a non-empty code list")]
    NoCodes,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Where a code came from: `(transcript_id, chunk_index)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSource {
    pub transcript_id: String,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub id: String,
    pub name: String,
    pub description: String,
    pub quotes: Vec<String>,
    pub source: CodeSource,
    /// True when every quote substring-matches the source chunk after
    /// whitespace normalization.
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGroup {
    pub group_index: usize,
    pub codes: Vec<Code>,
}

/// A code as parsed from a model reply, before sourcing and verification.
#[derive(Debug, Clone, Deserialize)]
pub struct RawCode {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub quotes: Vec<String>,
}

/// Extract the first JSON array from a model reply.
///
/// Fenced blocks are scanned first (the instructed format); a bare array is
/// accepted as a fallback with a warning. Prose before and after is ignored.
/// When several fenced arrays are present the first is used and a warning is
/// recorded.
pub fn extract_json_array<T: serde::de::DeserializeOwned>(
    raw: &str,
) -> Result<(Vec<T>, Vec<String>), CodegenError> {
    let mut warnings = Vec::new();
    let mut found: Option<Vec<T>> = None;
    let mut array_blocks = 0usize;

    for block in fenced_blocks(raw) {
        match serde_json::from_str::<serde_json::Value>(block.trim()) {
            Ok(serde_json::Value::Array(_)) => {
                array_blocks += 1;
                if found.is_none() {
                    let parsed: Vec<T> = serde_json::from_str(block.trim())
                        .map_err(|e| CodegenError::MalformedObject(e.to_string()))?;
                    found = Some(parsed);
                }
            }
            _ => continue,
        }
    }
    if array_blocks > 1 {
        warnings.push(format!(
            "reply contained {array_blocks} fenced JSON arrays; using the first"
        ));
    }
    if let Some(items) = found {
        return Ok((items, warnings));
    }

    // Fallback: a bare array outside any fence.
    if let Some(slice) = scan_bare_array(raw) {
        let parsed: Vec<T> = serde_json::from_str(slice)
            .map_err(|e| CodegenError::MalformedObject(e.to_string()))?;
        warnings.push("reply contained an unfenced JSON array".to_string());
        return Ok((parsed, warnings));
    }

    Err(CodegenError::NoJsonArray)
}

/// Contents of every ``` fenced block, language tags stripped.
fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after_open = &rest[open + 3..];
        let body_start = after_open.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after_open[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    blocks
}

/// First balanced `[...]` slice that parses as a JSON array.
fn scan_bare_array(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    for (start, _) in raw.match_indices('[').take(20) {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (offset, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_string = false;
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        let slice = &raw[start..=start + offset];
                        if serde_json::from_str::<serde_json::Value>(slice)
                            .map(|v| v.is_array())
                            .unwrap_or(false)
                        {
                            return Some(slice);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Parse a model reply into unsourced codes.
pub fn parse_codes(raw: &str) -> Result<(Vec<RawCode>, Vec<String>), CodegenError> {
    extract_json_array(raw)
}

/// One follow-up request asking the model to reformat its previous answer.
pub(crate) fn repair_request(original: &ChatRequest, previous_reply: &str) -> ChatRequest {
    ChatRequest {
        user_prompt: format!(
            "Reformat your previous answer as a single fenced JSON array only, keeping the \
             required fields and changing nothing else.\n\nPrevious answer:\n{previous_reply}"
        ),
        ..original.clone()
    }
}

/// Stage 1(b): generate, parse, source and verify the codes for one chunk.
///
/// Parse failures get one repair round; replies whose codes lack quotes get
/// the same single repair round before the codes are flagged unverified.
/// An empty code list is a warning, not an error.
pub fn generate_codes(
    chunk: &Chunk,
    prompts: &Prompts,
    strat: &Strategy,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest,
) -> Result<(Vec<Code>, Vec<String>), CodegenError> {
    let prompt = prompts.coding(chunk, strat)?;
    let req = request(&prompt.system, &prompt.user);
    let reply = gateway.complete(&req)?;

    let mut warnings = Vec::new();
    let (mut raw_codes, mut parse_warnings) = match parse_codes(&reply.text) {
        Ok(out) => out,
        Err(first_err) => {
            warnings.push(format!(
                "chunk {}/{}: reply did not parse ({first_err}); requesting reformat",
                chunk.transcript_id, chunk.chunk_index
            ));
            let repaired = gateway.complete(&repair_request(&req, &reply.text))?;
            parse_codes(&repaired.text)?
        }
    };
    warnings.append(&mut parse_warnings);

    if raw_codes.iter().any(|c| c.quotes.is_empty()) && !raw_codes.is_empty() {
        warnings.push(format!(
            "chunk {}/{}: codes missing quotes; requesting reformat",
            chunk.transcript_id, chunk.chunk_index
        ));
        let repaired = gateway.complete(&repair_request(&req, &reply.text))?;
        if let Ok((again, mut more)) = parse_codes(&repaired.text) {
            if again.iter().all(|c| !c.quotes.is_empty()) {
                raw_codes = again;
            }
            warnings.append(&mut more);
        }
    }

    if raw_codes.is_empty() {
        warnings.push(format!(
            "chunk {}/{}: model produced no codes",
            chunk.transcript_id, chunk.chunk_index
        ));
    }

    let normalized_chunk = normalize_whitespace(&chunk.dialogue_text());
    let codes: Vec<Code> = raw_codes
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            let verified = !raw.quotes.is_empty()
                && raw
                    .quotes
                    .iter()
                    .all(|q| normalized_chunk.contains(&normalize_whitespace(q)));
            Code {
                id: format!("code:{}:{:03}:{:02}", chunk.transcript_id, chunk.chunk_index, i),
                name: raw.name,
                description: raw.description,
                quotes: raw.quotes,
                source: CodeSource {
                    transcript_id: chunk.transcript_id.clone(),
                    chunk_index: chunk.chunk_index,
                },
                verified,
            }
        })
        .collect();

    for code in codes.iter().filter(|c| !c.verified) {
        warnings.push(format!(
            "code {} ({}) has quotes that do not match the source chunk; flagged unverified",
            code.id, code.name
        ));
    }

    let density = if codes.is_empty() {
        0.0
    } else {
        chunk.word_count as f64 / codes.len() as f64
    };
    log::debug!(
        "chunk {}/{}: {} codes, {:.0} words per code",
        chunk.transcript_id,
        chunk.chunk_index,
        codes.len(),
        density
    );

    Ok((codes, warnings))
}

/// Serialized form used for grouping budgets: everything the code carries.
pub fn serialized_code_words(code: &Code) -> usize {
    word_count(&code.name) + word_count(&code.description)
        + code.quotes.iter().map(|q| word_count(q)).sum::<usize>()
}

/// Render codes as the payload entries the theming prompts embed.
pub fn codes_payload(codes: &[Code], include_quotes: bool) -> String {
    codes
        .iter()
        .map(|c| {
            let mut entry = format!("- name: {}\n  description: {}", c.name, c.description);
            if include_quotes && !c.quotes.is_empty() {
                entry.push_str(&format!("\n  quotes: {}", c.quotes.join(" | ")));
            }
            entry
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Stage 1(c): divide the ordered code list into N contiguous groups.
///
/// N = ceil(total serialized words / budget); groups are balanced by code
/// count to within one and never reorder codes.
pub fn group_codes(codes: &[Code], budget_words: usize) -> Result<Vec<CodeGroup>, CodegenError> {
    if codes.is_empty() {
        return Err(CodegenError::NoCodes);
    }
    let mut total = 0usize;
    for code in codes {
        let words = serialized_code_words(code);
        if words > budget_words {
            return Err(CodegenError::CodeExceedsBudget {
                name: code.name.clone(),
                words,
                budget: budget_words,
            });
        }
        total += words;
    }
    let group_count = total.div_ceil(budget_words).max(1);
    let base = codes.len() / group_count;
    let remainder = codes.len() % group_count;

    let mut groups = Vec::with_capacity(group_count);
    let mut cursor = 0usize;
    for group_index in 0..group_count {
        let size = base + usize::from(group_index < remainder);
        groups.push(CodeGroup {
            group_index,
            codes: codes[cursor..cursor + size].to_vec(),
        });
        cursor += size;
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::gateway::mock::MockProvider;
    use crate::gateway::{Provider, ProviderChat, Usage};
    use crate::prompts::{StudyContext, TemplateStore};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn code(name: &str, words_in_description: usize) -> Code {
        Code {
            id: format!("code:t:000:{name}"),
            name: name.to_string(),
            description: (0..words_in_description)
                .map(|i| format!("d{i}"))
                .collect::<Vec<_>>()
                .join(" "),
            quotes: vec!["q".to_string()],
            source: CodeSource {
                transcript_id: "t".to_string(),
                chunk_index: 0,
            },
            verified: true,
        }
    }

    #[test]
    fn parses_fenced_array_with_surrounding_prose() {
        let raw = "Sure, here you go.\n```json\n[
            {\"name\": \"a\", \"description\": \"da\", \"quotes\": [\"qa\"]},
            {\"name\": \"b\", \"description\": \"db\", \"quotes\": [\"qb\"]},
            {\"name\": \"c\", \"description\": \"dc\", \"quotes\": [\"qc\"]}
        ]\n```\nHope that helps!";
        let (codes, warnings) = parse_codes(raw).unwrap();
        assert_eq!(codes.len(), 3);
        assert!(warnings.is_empty());
        assert_eq!(codes[1].name, "b");
    }

    #[test]
    fn first_of_two_fenced_arrays_wins_with_warning() {
        let raw = "```json\n[{\"name\": \"first\", \"description\": \"d\"}]\n```\n\
                   and another:\n```json\n[{\"name\": \"second\", \"description\": \"d\"}]\n```";
        let (codes, warnings) = parse_codes(raw).unwrap();
        assert_eq!(codes.len(), 1);
        assert_eq!(codes[0].name, "first");
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("using the first"));
    }

    #[test]
    fn bare_array_is_accepted_with_warning() {
        let raw = "[{\"name\": \"a\", \"description\": \"d\", \"quotes\": [\"q\"]}]";
        let (codes, warnings) = parse_codes(raw).unwrap();
        assert_eq!(codes.len(), 1);
        assert!(warnings[0].contains("unfenced"));
    }

    #[test]
    fn missing_required_field_is_reported() {
        let raw = "```json\n[{\"name\": \"a\"}]\n```";
        match parse_codes(raw) {
            Err(CodegenError::MalformedObject(msg)) => assert!(msg.contains("description")),
            other => panic!("expected malformed object, got {other:?}"),
        }
    }

    #[test]
    fn reply_without_array_is_an_error() {
        assert!(matches!(
            parse_codes("I could not find any codes."),
            Err(CodegenError::NoJsonArray)
        ));
    }

    fn mock_setup() -> (Prompts, Gateway) {
        let prompts = Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let gateway = Gateway::new(Box::new(MockProvider::new()), None);
        (prompts, gateway)
    }

    fn two_paragraph_chunk() -> Chunk {
        Chunk {
            transcript_id: "t1".to_string(),
            chunk_index: 0,
            turns: vec![
                Turn {
                    speaker: "P1".to_string(),
                    text: "The appointments kept piling up. Between appointments we barely had time to breathe at home.".to_string(),
                    index: 0,
                },
                Turn {
                    speaker: "P2".to_string(),
                    text: "School was another worry. We had to tell the school about every restriction.".to_string(),
                    index: 1,
                },
            ],
            word_count: 29,
            continuation: false,
            oversize: false,
        }
    }

    fn req(system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            model_id: "m".to_string(),
            temperature: 0.0,
            system_prompt: system.to_string(),
            user_prompt: user.to_string(),
            max_output_tokens: None,
        }
    }

    #[test]
    fn mock_two_paragraph_chunk_yields_two_verified_codes() {
        let (prompts, gateway) = mock_setup();
        let (codes, warnings) = generate_codes(
            &two_paragraph_chunk(),
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        )
        .unwrap();
        assert_eq!(codes.len(), 2);
        assert!(warnings.is_empty());
        // Hand-applied mock rule: top non-stopword per paragraph.
        assert_eq!(codes[0].name, "appointments");
        assert_eq!(codes[1].name, "school");
        assert!(codes.iter().all(|c| c.verified));
        assert_eq!(codes[0].source.chunk_index, 0);
        assert_eq!(codes[0].id, "code:t1:000:00");
    }

    /// Scripted provider replaying canned replies in order.
    struct ScriptedProvider {
        replies: Mutex<Vec<&'static str>>,
        calls: AtomicUsize,
    }

    impl ScriptedProvider {
        fn new(replies: Vec<&'static str>) -> Self {
            Self {
                replies: Mutex::new(replies),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl Provider for ScriptedProvider {
        fn name(&self) -> &'static str {
            "scripted"
        }
        fn is_network(&self) -> bool {
            false
        }
        fn chat(&self, _req: &ChatRequest) -> Result<ProviderChat, GatewayError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let mut replies = self.replies.lock().unwrap();
            let text = if replies.is_empty() {
                ""
            } else {
                replies.remove(0)
            };
            Ok(ProviderChat {
                text: text.to_string(),
                usage: Usage::default(),
            })
        }
        fn embed(&self, _m: &str, _t: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
            Err(GatewayError::Provider("no embeddings".to_string()))
        }
    }

    #[test]
    fn unparseable_reply_gets_one_repair_round() {
        let provider = ScriptedProvider::new(vec![
            "no json here at all",
            "```json\n[{\"name\": \"a\", \"description\": \"d\", \"quotes\": [\"Between appointments we barely had time to breathe at home.\"]}]\n```",
        ]);
        let gateway = Gateway::new(Box::new(provider), None);
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let (codes, warnings) = generate_codes(
            &two_paragraph_chunk(),
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        )
        .unwrap();
        assert_eq!(codes.len(), 1);
        assert!(codes[0].verified);
        assert!(warnings.iter().any(|w| w.contains("requesting reformat")));
        assert_eq!(gateway.stats().provider_calls, 2);
    }

    #[test]
    fn persistent_parse_failure_is_an_error() {
        let provider = ScriptedProvider::new(vec!["nope", "still nope"]);
        let gateway = Gateway::new(Box::new(provider), None);
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let out = generate_codes(
            &two_paragraph_chunk(),
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        );
        assert!(matches!(out, Err(CodegenError::NoJsonArray)));
    }

    #[test]
    fn codes_without_quotes_are_flagged_unverified_after_repair() {
        let reply = "```json\n[{\"name\": \"a\", \"description\": \"d\", \"quotes\": []}]\n```";
        let provider = ScriptedProvider::new(vec![reply, reply]);
        let gateway = Gateway::new(Box::new(provider), None);
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let (codes, warnings) = generate_codes(
            &two_paragraph_chunk(),
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        )
        .unwrap();
        assert_eq!(codes.len(), 1);
        assert!(!codes[0].verified);
        assert!(warnings.iter().any(|w| w.contains("unverified")));
        assert_eq!(gateway.stats().provider_calls, 2);
    }

    #[test]
    fn fabricated_quote_is_unverified_whitespace_variant_is_verified() {
        let reply = "```json\n[
            {\"name\": \"ok\", \"description\": \"d\", \"quotes\": [\"School  was another\\nworry.\"]},
            {\"name\": \"bad\", \"description\": \"d\", \"quotes\": [\"We never said this.\"]}
        ]\n```";
        let provider = ScriptedProvider::new(vec![reply]);
        let gateway = Gateway::new(Box::new(provider), None);
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let (codes, _) = generate_codes(
            &two_paragraph_chunk(),
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        )
        .unwrap();
        assert!(codes[0].verified, "whitespace differences must not fail verification");
        assert!(!codes[1].verified);
    }

    #[test]
    fn empty_code_list_is_a_warning_not_an_error() {
        let provider = ScriptedProvider::new(vec!["```json\n[]\n```"]);
        let gateway = Gateway::new(Box::new(provider), None);
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let (codes, warnings) = generate_codes(
            &two_paragraph_chunk(),
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        )
        .unwrap();
        assert!(codes.is_empty());
        assert!(warnings.iter().any(|w| w.contains("no codes")));
    }

    #[test]
    fn ten_codes_in_three_groups_balance_as_4_3_3() {
        let codes: Vec<Code> = (0..10).map(|i| code(&format!("c{i}"), 19)).collect();
        // 21 words per code (name + 19 + quote), 210 total, budget 70 → N = 3.
        let groups = group_codes(&codes, 70).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|g| g.codes.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn total_within_budget_is_one_group() {
        let codes: Vec<Code> = (0..7).map(|i| code(&format!("c{i}"), 5)).collect();
        let groups = group_codes(&codes, 10_000).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].codes, codes);
    }

    #[test]
    fn oversize_single_code_is_an_error() {
        let codes = vec![code("huge", 500)];
        assert!(matches!(
            group_codes(&codes, 100),
            Err(CodegenError::CodeExceedsBudget { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn groups_flatten_back_to_input(
            sizes in proptest::collection::vec(1usize..60, 1..40),
            budget in 100usize..2000,
        ) {
            let codes: Vec<Code> = sizes
                .iter()
                .enumerate()
                .map(|(i, &w)| code(&format!("c{i}"), w))
                .collect();
            match group_codes(&codes, budget) {
                Ok(groups) => {
                    let flat: Vec<Code> = groups.iter().flat_map(|g| g.codes.clone()).collect();
                    proptest::prop_assert_eq!(&flat, &codes);
                    let counts: Vec<usize> = groups.iter().map(|g| g.codes.len()).collect();
                    let max = counts.iter().max().unwrap();
                    let min = counts.iter().min().unwrap();
                    proptest::prop_assert!(max - min <= 1, "unbalanced groups: {:?}", counts);
                    for (i, g) in groups.iter().enumerate() {
                        proptest::prop_assert_eq!(g.group_index, i);
                    }
                    // Idempotence: regrouping the flattened output changes nothing.
                    let again = group_codes(&flat, budget).unwrap();
                    proptest::prop_assert_eq!(again, groups);
                }
                Err(CodegenError::CodeExceedsBudget { words, budget: b, .. }) => {
                    proptest::prop_assert!(words > b);
                }
                Err(other) => return Err(proptest::test_runner::TestCaseError::fail(other.to_string())),
            }
        }
    }
}
