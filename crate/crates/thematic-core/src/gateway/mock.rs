//! Deterministic offline provider.
//!
//! The mock is a pure function of the request text. It recognizes the
//! payload section markers the bundled prompt templates emit and applies
//! fixed rules:
//!
//! - coding: one code per paragraph of the chunk, named by the paragraph's
//!   most frequent non-stopword; description = first sentence; quote =
//!   longest sentence.
//! - theming: one theme per three payload entries (ceiling); title =
//!   concatenated top words of the member entries.
//! - critique/refine: fixed feedback per theme; refinement appends a fixed
//!   clause to each description.
//! - judge: token-overlap ratio of the two descriptions.
//! - embeddings: L2-normalized bag-of-words hashed into 256 dimensions.

use super::{ChatRequest, GatewayError, Provider, ProviderChat, Usage};
use crate::corpus::{split_sentences, word_count};

pub const MOCK_EMBED_DIM: usize = 256;

/// Section markers shared between the prompt templates and the mock parser.
pub mod markers {
    pub const CHUNK: &str = "=== TRANSCRIPT CHUNK ===";
    pub const TRANSCRIPT: &str = "=== TRANSCRIPT ===";
    pub const CODES: &str = "=== CODES ===";
    pub const PRELIM_THEMES: &str = "=== PRELIMINARY THEMES ===";
    pub const THEMES_FOR_REVIEW: &str = "=== THEMES FOR REVIEW ===";
    pub const THEMES_TO_REFINE: &str = "=== THEMES TO REFINE ===";
    pub const CRITIQUE: &str = "=== CRITIQUE ===";
    pub const DESCRIPTION_A: &str = "=== DESCRIPTION A ===";
    pub const DESCRIPTION_B: &str = "=== DESCRIPTION B ===";
    pub const END: &str = "=== END ===";
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "an", "and", "any", "are", "as", "at", "be", "because", "been",
    "but", "by", "can", "could", "did", "do", "for", "from", "had", "has", "have", "he", "her",
    "his", "how", "i", "if", "in", "is", "it", "its", "just", "me", "my", "no", "not", "of", "on",
    "or", "our", "she", "so", "that", "the", "their", "them", "then", "there", "they", "this",
    "to", "up", "us", "very", "was", "we", "were", "what", "when", "which", "who", "will", "with",
    "would", "you", "your",
];

#[derive(Debug, Default)]
pub struct MockProvider {
    context_limit_words: Option<usize>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulate a provider context window: requests whose combined prompt
    /// word count exceeds `limit` fail with a context-overflow error.
    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit_words = Some(limit);
        self
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn is_network(&self) -> bool {
        false
    }

    fn chat(&self, req: &ChatRequest) -> Result<ProviderChat, GatewayError> {
        let input_words = word_count(&req.system_prompt) + word_count(&req.user_prompt);
        if let Some(limit) = self.context_limit_words {
            if input_words > limit {
                return Err(GatewayError::ContextOverflow(format!(
                    "{input_words} words exceed the {limit}-word limit"
                )));
            }
        }

        let user = &req.user_prompt;
        let text = if user.contains(markers::DESCRIPTION_A) {
            judge_reply(user)
        } else if user.contains(markers::THEMES_TO_REFINE) {
            refine_reply(user)
        } else if user.contains(markers::THEMES_FOR_REVIEW) {
            critique_reply(user)
        } else if user.contains(markers::PRELIM_THEMES) {
            final_theming_reply(user)
        } else if user.contains(markers::CODES) {
            prelim_theming_reply(user)
        } else if user.contains(markers::CHUNK) {
            coding_reply(user, markers::CHUNK)
        } else if user.contains(markers::TRANSCRIPT) {
            coding_reply(user, markers::TRANSCRIPT)
        } else {
            return Err(GatewayError::Provider(
                "mock provider cannot interpret this prompt (no payload marker found)".to_string(),
            ));
        };

        Ok(ProviderChat {
            usage: Usage {
                input_tokens: input_words as u64,
                output_tokens: word_count(&text) as u64,
            },
            text,
        })
    }

    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        Ok(texts.iter().map(|t| bag_of_words_embedding(t)).collect())
    }
}

/// Hash each token into one of 256 buckets, count, and L2-normalize.
/// Identical texts embed identically; token-disjoint texts land in
/// disjoint buckets (absent hash collisions) and score zero cosine.
pub fn bag_of_words_embedding(text: &str) -> Vec<f32> {
    let mut v = vec![0.0f32; MOCK_EMBED_DIM];
    for token in tokens(text) {
        let idx = (fnv1a64(token.as_bytes()) % MOCK_EMBED_DIM as u64) as usize;
        v[idx] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// FNV-1a, fixed here so embeddings are stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercased word tokens with punctuation trimmed from the edges.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Most frequent non-stopword; ties break toward the earliest occurrence.
/// Falls back to the first token when everything is a stopword.
pub fn top_word(text: &str) -> String {
    let toks = tokens(text);
    let mut best: Option<(&str, usize)> = None;
    for (i, tok) in toks.iter().enumerate() {
        if is_stopword(tok) {
            continue;
        }
        let count = toks.iter().filter(|t| *t == tok).count();
        match best {
            Some((_, best_count)) if count <= best_count => {}
            _ => {
                // Only the first occurrence of a token can set the entry,
                // so ties resolve to the earliest position.
                if toks[..i].iter().all(|t| t != tok) {
                    best = Some((tok, count));
                }
            }
        }
    }
    best.map(|(t, _)| t.to_string())
        .or_else(|| toks.first().cloned())
        .unwrap_or_else(|| "untitled".to_string())
}

/// Text of one payload section: the lines after `marker` up to the next
/// `=== ... ===` heading.
fn section(text: &str, marker: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    let mut inside = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed == marker {
            inside = true;
            continue;
        }
        if inside && trimmed.starts_with("=== ") && trimmed.ends_with(" ===") {
            break;
        }
        if inside {
            out.push(line);
        }
    }
    out.join("\n").trim().to_string()
}

struct Entry {
    label: String,
    description: String,
    codes: Vec<String>,
}

/// Parse `- name:`/`- title:` entries with `description:` and `codes:` fields.
fn parse_entries(payload: &str) -> Vec<Entry> {
    let mut entries: Vec<Entry> = Vec::new();
    for line in payload.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed
            .strip_prefix("- name:")
            .or_else(|| trimmed.strip_prefix("- title:"))
        {
            entries.push(Entry {
                label: rest.trim().to_string(),
                description: String::new(),
                codes: Vec::new(),
            });
        } else if let Some(rest) = trimmed.strip_prefix("description:") {
            if let Some(entry) = entries.last_mut() {
                entry.description = rest.trim().to_string();
            }
        } else if let Some(rest) = trimmed.strip_prefix("codes:") {
            if let Some(entry) = entries.last_mut() {
                entry.codes = rest
                    .split(';')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect();
            }
        }
    }
    entries
}

fn fenced_json(value: &serde_json::Value, preamble: &str, coda: &str) -> String {
    format!(
        "{preamble}\n\n```json\n{}\n```\n\n{coda}\n",
        serde_json::to_string_pretty(value).expect("mock payloads serialize")
    )
}

fn coding_reply(user: &str, marker: &str) -> String {
    let chunk = section(user, marker);
    let mut codes = Vec::new();
    for paragraph in chunk.split("\n\n").filter(|p| !p.trim().is_empty()) {
        let body = strip_speaker_prefix(paragraph.trim());
        let sentences = split_sentences(body);
        let description = sentences.first().copied().unwrap_or(body).to_string();
        let quote = sentences
            .iter()
            .max_by_key(|s| s.len())
            .copied()
            .unwrap_or(body)
            .to_string();
        codes.push(serde_json::json!({
            "name": top_word(body),
            "description": description,
            "quotes": [quote],
        }));
    }
    fenced_json(
        &serde_json::Value::Array(codes),
        "Here are the initial codes for this chunk.",
        "These codes stay close to the participants' own words.",
    )
}

fn strip_speaker_prefix(paragraph: &str) -> &str {
    match paragraph.find(": ") {
        Some(pos) if pos < 30 => &paragraph[pos + 2..],
        _ => paragraph,
    }
}

fn themes_from_entries(entries: &[Entry], description_of: impl Fn(&[&Entry]) -> String) -> Vec<serde_json::Value> {
    entries
        .chunks(3)
        .map(|group| {
            let members: Vec<&Entry> = group.iter().collect();
            let title = members
                .iter()
                .map(|e| top_word(&format!("{} {}", e.label, e.description)))
                .collect::<Vec<_>>()
                .join(" ");
            let mut codes: Vec<String> = Vec::new();
            for member in &members {
                if member.codes.is_empty() {
                    codes.push(member.label.clone());
                } else {
                    for code in &member.codes {
                        if !codes.contains(code) {
                            codes.push(code.clone());
                        }
                    }
                }
            }
            serde_json::json!({
                "title": title,
                "description": description_of(&members),
                "codes": codes,
            })
        })
        .collect()
}

fn prelim_theming_reply(user: &str) -> String {
    let entries = parse_entries(&section(user, markers::CODES));
    let themes = themes_from_entries(&entries, |members| {
        let names: Vec<&str> = members.iter().map(|e| e.label.as_str()).collect();
        format!(
            "Drawing together {}, this theme reflects what parents reported across the grouped codes.",
            names.join(", ")
        )
    });
    fenced_json(
        &serde_json::Value::Array(themes),
        "Here are the preliminary themes for this group of codes.",
        "Each theme lists the codes it draws on.",
    )
}

fn final_theming_reply(user: &str) -> String {
    let entries = parse_entries(&section(user, markers::PRELIM_THEMES));
    let themes = themes_from_entries(&entries, |members| {
        let titles: Vec<&str> = members.iter().map(|e| e.label.as_str()).collect();
        format!(
            "Synthesizes the preliminary themes {} into one overarching account of the participants' experiences.",
            titles.join(", ")
        )
    });
    fenced_json(
        &serde_json::Value::Array(themes),
        "Here are the final themes across all groups.",
        "These reflect the most prominent insights in the data.",
    )
}

fn critique_reply(user: &str) -> String {
    let entries = parse_entries(&section(user, markers::THEMES_FOR_REVIEW));
    let mut lines = vec!["Feedback on the current themes:".to_string()];
    for entry in &entries {
        lines.push(format!(
            "- The theme \"{}\" should state more specifically which experiences it covers, and the description should be checked for comprehensiveness.",
            entry.label
        ));
    }
    lines.join("\n")
}

fn refine_reply(user: &str) -> String {
    let entries = parse_entries(&section(user, markers::THEMES_TO_REFINE));
    let themes: Vec<serde_json::Value> = entries
        .iter()
        .map(|entry| {
            serde_json::json!({
                "title": entry.label,
                "description": format!(
                    "{} Refined to name the specific outcomes participants described.",
                    entry.description
                ),
                "codes": entry.codes,
            })
        })
        .collect();
    fenced_json(
        &serde_json::Value::Array(themes),
        "Here are the refined themes incorporating the critique.",
        "Descriptions were tightened per the feedback.",
    )
}

fn judge_reply(user: &str) -> String {
    let a = section(user, markers::DESCRIPTION_A);
    let b = section(user, markers::DESCRIPTION_B);
    format!("{:.4}", token_overlap_ratio(&a, &b))
}

/// |tokens(a) ∩ tokens(b)| / |tokens(a) ∪ tokens(b)| over lowercase token sets.
pub fn token_overlap_ratio(a: &str, b: &str) -> f64 {
    let set_a: std::collections::BTreeSet<String> = tokens(a).into_iter().collect();
    let set_b: std::collections::BTreeSet<String> = tokens(b).into_iter().collect();
    let union = set_a.union(&set_b).count();
    if union == 0 {
        return 0.0;
    }
    let inter = set_a.intersection(&set_b).count();
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::cosine_similarity;

    fn chat(user: &str) -> ProviderChat {
        MockProvider::new()
            .chat(&ChatRequest {
                model_id: "m".to_string(),
                temperature: 0.0,
                system_prompt: "s".to_string(),
                user_prompt: user.to_string(),
                max_output_tokens: None,
            })
            .unwrap()
    }

    #[test]
    fn coding_emits_one_code_per_paragraph() {
        // Oracle, by hand: paragraph 1 top word "appointments" (twice),
        // first sentence is the description, the longer second sentence is
        // the quote. Paragraph 2 top word "school" (twice).
        let user = format!(
            "instructions...\n{}\nP1: The appointments kept piling up. Between appointments we barely had time to breathe at home.\n\nP2: School was another worry. We had to tell the school about every restriction.\n{}",
            markers::CHUNK,
            markers::END
        );
        let reply = chat(&user).text;
        let start = reply.find("```json").unwrap() + 7;
        let end = reply[start..].find("```").unwrap() + start;
        let parsed: Vec<serde_json::Value> = serde_json::from_str(reply[start..end].trim()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0]["name"], "appointments");
        assert_eq!(parsed[0]["description"], "The appointments kept piling up.");
        assert_eq!(
            parsed[0]["quotes"][0],
            "Between appointments we barely had time to breathe at home."
        );
        assert_eq!(parsed[1]["name"], "school");
    }

    #[test]
    fn theming_groups_entries_in_threes() {
        let payload = (1..=5)
            .map(|i| format!("- name: code{i}\n  description: families mention topic{i} often"))
            .collect::<Vec<_>>()
            .join("\n");
        let user = format!("task...\n{}\n{}\n{}", markers::CODES, payload, markers::END);
        let reply = chat(&user).text;
        let start = reply.find("```json").unwrap() + 7;
        let end = reply[start..].find("```").unwrap() + start;
        let parsed: Vec<serde_json::Value> = serde_json::from_str(reply[start..end].trim()).unwrap();
        assert_eq!(parsed.len(), 2, "ceil(5/3) themes");
        assert_eq!(parsed[0]["title"], "code1 code2 code3");
        assert_eq!(
            parsed[0]["codes"],
            serde_json::json!(["code1", "code2", "code3"])
        );
        assert_eq!(parsed[1]["codes"], serde_json::json!(["code4", "code5"]));
    }

    #[test]
    fn judge_rule_is_token_overlap() {
        let user = format!(
            "compare...\n{}\nthe long wait for answers\n{}\nthe long wait for results",
            markers::DESCRIPTION_A,
            markers::DESCRIPTION_B
        );
        // Sets: {the, long, wait, for, answers} vs {the, long, wait, for, results}:
        // intersection 4, union 6.
        assert_eq!(chat(&user).text, format!("{:.4}", 4.0 / 6.0));
    }

    #[test]
    fn identical_texts_embed_identically() {
        let a = bag_of_words_embedding("waiting for the next echo");
        let b = bag_of_words_embedding("waiting for the next echo");
        assert_eq!(a, b);
        assert!((cosine_similarity(&a, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_vocabulary_embeds_orthogonally() {
        // Oracle: recompute the bucket of every token with an independent
        // FNV-1a implementation and confirm the two bucket sets are disjoint.
        let left = "alpha bravo charlie";
        let right = "delta echo foxtrot";
        let bucket = |w: &str| {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in w.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
            h % 256
        };
        let lb: Vec<u64> = left.split_whitespace().map(bucket).collect();
        let rb: Vec<u64> = right.split_whitespace().map(bucket).collect();
        assert!(lb.iter().all(|b| !rb.contains(b)), "fixture tokens collide");
        let a = bag_of_words_embedding(left);
        let b = bag_of_words_embedding(right);
        assert_eq!(cosine_similarity(&a, &b), 0.0);
    }

    #[test]
    fn context_limit_reports_overflow() {
        let provider = MockProvider::new().with_context_limit(5);
        let err = provider
            .chat(&ChatRequest {
                model_id: "m".to_string(),
                temperature: 1.0,
                system_prompt: "one two three".to_string(),
                user_prompt: "four five six seven".to_string(),
                max_output_tokens: None,
            })
            .unwrap_err();
        assert!(matches!(err, GatewayError::ContextOverflow(_)));
    }

    #[test]
    fn top_word_skips_stopwords_and_breaks_ties_early() {
        assert_eq!(top_word("the the the heart heart of it"), "heart");
        assert_eq!(top_word("waiting rooms waiting rooms"), "waiting");
        assert_eq!(top_word("the of and"), "the");
    }

    #[test]
    fn stopword_table_is_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }
}
