//! Transcript loading and conversation-preserving chunking.
//!
//! Transcripts are ordered sequences of speaker turns. The chunker packs
//! whole turns greedily into word-bounded chunks so that no conversational
//! exchange is cut mid-turn; the only exception is a single turn that is
//! itself larger than the word budget, which is split at sentence
//! boundaries into continuation chunks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default chunk budget in words.
pub const DEFAULT_MAX_WORDS: usize = 1_500;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("empty transcript: {path}")]
    EmptyTranscript { path: String },
}

/// One speaker utterance. `index` is the ordinal within the transcript,
/// contiguous from 0. Text is whitespace-normalized at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    pub index: usize,
}

/// An ordered sequence of turns with a precomputed word total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub turns: Vec<Turn>,
    pub word_total: usize,
}

/// A contiguous, word-bounded slice of a transcript.
///
/// `continuation` marks chunks produced by splitting a single oversize turn;
/// `oversize` marks the rare fragment that still exceeds the budget because
/// it is one indivisible sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub transcript_id: String,
    pub chunk_index: usize,
    pub turns: Vec<Turn>,
    pub word_count: usize,
    #[serde(default)]
    pub continuation: bool,
    #[serde(default)]
    pub oversize: bool,
}

impl Transcript {
    /// Render the whole transcript as dialogue text, one `SPEAKER: text`
    /// paragraph per turn.
    pub fn dialogue_text(&self) -> String {
        dialogue(&self.turns)
    }
}

impl Chunk {
    /// Render the chunk as dialogue text, one `SPEAKER: text` paragraph per turn.
    pub fn dialogue_text(&self) -> String {
        dialogue(&self.turns)
    }
}

fn dialogue(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker, t.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Number of maximal non-whitespace token runs in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Collapse all whitespace runs to single spaces and trim the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Deserialize)]
struct TurnRecord {
    speaker: String,
    text: String,
}

/// Load one transcript file.
///
/// Accepts JSON Lines (one `{"speaker": ..., "text": ...}` object per line)
/// or a plain-text fallback where lines of the form `SPEAKER: text` open a
/// turn and bare lines continue the previous turn. Turn order is file order.
pub fn load_transcript(path: &Path) -> Result<Transcript, CorpusError> {
    let display = path.display().to_string();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());

    let turns = if looks_like_jsonl(&raw) {
        parse_jsonl(&raw, &display)?
    } else {
        parse_plain(&raw, &display)?
    };

    if turns.is_empty() {
        return Err(CorpusError::EmptyTranscript { path: display });
    }

    let word_total = turns.iter().map(|t| word_count(&t.text)).sum();
    Ok(Transcript {
        id,
        turns,
        word_total,
    })
}

/// Load every transcript file in a directory, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<Transcript>, CorpusError> {
    let display = dir.display().to_string();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("jsonl") | Some("json") | Some("txt")
                )
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| load_transcript(p)).collect()
}

fn looks_like_jsonl(raw: &str) -> bool {
    raw.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .is_some_and(|l| l.starts_with('{'))
}

fn parse_jsonl(raw: &str, path: &str) -> Result<Vec<Turn>, CorpusError> {
    let mut turns = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let record: TurnRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                path: path.to_string(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        push_turn(&mut turns, record.speaker, record.text, lineno + 1, path)?;
    }
    Ok(turns)
}

fn parse_plain(raw: &str, path: &str) -> Result<Vec<Turn>, CorpusError> {
    let mut turns: Vec<Turn> = Vec::new();
    let mut pending: Option<(String, String, usize)> = None;
    for (lineno, line) in raw.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some((speaker, text)) = trimmed.split_once(':') {
            let speaker = speaker.trim();
            if !speaker.is_empty() {
                if let Some((s, t, l)) = pending.take() {
                    push_turn(&mut turns, s, t, l, path)?;
                }
                pending = Some((speaker.to_string(), text.trim().to_string(), lineno + 1));
                continue;
            }
        }
        // Continuation of the previous turn.
        match pending.as_mut() {
            Some((_, text, _)) => {
                text.push(' ');
                text.push_str(trimmed);
            }
            None => {
                return Err(CorpusError::MalformedRecord {
                    path: path.to_string(),
                    line: lineno + 1,
                    reason: "expected a `SPEAKER: text` line".to_string(),
                })
            }
        }
    }
    if let Some((s, t, l)) = pending.take() {
        push_turn(&mut turns, s, t, l, path)?;
    }
    Ok(turns)
}

fn push_turn(
    turns: &mut Vec<Turn>,
    speaker: String,
    text: String,
    line: usize,
    path: &str,
) -> Result<(), CorpusError> {
    let text = normalize_whitespace(&text);
    if text.is_empty() {
        return Err(CorpusError::MalformedRecord {
            path: path.to_string(),
            line,
            reason: "turn text is empty".to_string(),
        });
    }
    let index = turns.len();
    turns.push(Turn {
        speaker: normalize_whitespace(&speaker),
        text,
        index,
    });
    Ok(())
}

/// Split a transcript into chunks of at most `max_words`, keeping turns whole.
///
/// Packing is greedy and sequential: a chunk closes when adding the next turn
/// would exceed the budget. A single turn larger than the budget is split at
/// sentence boundaries into continuation chunks; a lone sentence that still
/// exceeds the budget becomes its own chunk flagged `oversize`.
pub fn chunk_transcript(transcript: &Transcript, max_words: usize) -> Vec<Chunk> {
    assert!(max_words >= 1, "max_words must be at least 1");
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut current: Vec<Turn> = Vec::new();
    let mut current_words = 0usize;

    let flush = |current: &mut Vec<Turn>, current_words: &mut usize, chunks: &mut Vec<Chunk>| {
        if current.is_empty() {
            return;
        }
        chunks.push(Chunk {
            transcript_id: transcript.id.clone(),
            chunk_index: chunks.len(),
            turns: std::mem::take(current),
            word_count: *current_words,
            continuation: false,
            oversize: false,
        });
        *current_words = 0;
    };

    for turn in &transcript.turns {
        let words = word_count(&turn.text);
        if words > max_words {
            flush(&mut current, &mut current_words, &mut chunks);
            for fragment in split_oversize_turn(turn, max_words) {
                let frag_words = word_count(&fragment.text);
                chunks.push(Chunk {
                    transcript_id: transcript.id.clone(),
                    chunk_index: chunks.len(),
                    word_count: frag_words,
                    turns: vec![fragment],
                    continuation: true,
                    oversize: frag_words > max_words,
                });
            }
            continue;
        }
        if current_words + words > max_words && !current.is_empty() {
            flush(&mut current, &mut current_words, &mut chunks);
        }
        current.push(turn.clone());
        current_words += words;
    }
    flush(&mut current, &mut current_words, &mut chunks);
    chunks
}

/// Split an oversize turn at sentence boundaries into fragments of at most
/// `max_words` each, preserving the turn's speaker and index.
fn split_oversize_turn(turn: &Turn, max_words: usize) -> Vec<Turn> {
    let sentences = split_sentences(&turn.text);
    let mut fragments: Vec<Turn> = Vec::new();
    let mut buf = String::new();
    let mut buf_words = 0usize;

    let flush = |buf: &mut String, buf_words: &mut usize, fragments: &mut Vec<Turn>| {
        if buf.is_empty() {
            return;
        }
        fragments.push(Turn {
            speaker: turn.speaker.clone(),
            text: std::mem::take(buf),
            index: turn.index,
        });
        *buf_words = 0;
    };

    for sentence in sentences {
        let words = word_count(sentence);
        if buf_words + words > max_words && !buf.is_empty() {
            flush(&mut buf, &mut buf_words, &mut fragments);
        }
        if !buf.is_empty() {
            buf.push(' ');
        }
        buf.push_str(sentence);
        buf_words += words;
    }
    flush(&mut buf, &mut buf_words, &mut fragments);
    fragments
}

/// Split normalized text into sentences. A boundary is `.`, `?`, or `!`
/// followed by whitespace; the terminator stays with its sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut sentences = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if (b == b'.' || b == b'?' || b == b'!')
            && bytes.get(i + 1).is_some_and(|n| n.is_ascii_whitespace())
        {
            let sentence = text[start..=i].trim();
            if !sentence.is_empty() {
                sentences.push(sentence);
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail);
    }
    sentences
}

/// Flatten chunks back into a turn sequence, merging fragments of a split
/// turn (same index, adjacent) back into one turn.
pub fn reassemble(chunks: &[Chunk]) -> Vec<Turn> {
    let mut turns: Vec<Turn> = Vec::new();
    for chunk in chunks {
        for turn in &chunk.turns {
            match turns.last_mut() {
                Some(last) if last.index == turn.index && last.speaker == turn.speaker => {
                    last.text.push(' ');
                    last.text.push_str(&turn.text);
                }
                _ => turns.push(turn.clone()),
            }
        }
    }
    turns
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn transcript_from_counts(counts: &[usize]) -> Transcript {
        let turns: Vec<Turn> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| Turn {
                speaker: format!("S{}", i % 3),
                text: (0..n).map(|j| format!("w{j}")).collect::<Vec<_>>().join(" "),
                index: i,
            })
            .collect();
        let word_total = counts.iter().sum();
        Transcript {
            id: "t".to_string(),
            turns,
            word_total,
        }
    }

    #[test]
    fn word_count_empty_is_zero() {
        assert_eq!(word_count(""), 0);
    }

    #[test]
    fn word_count_three_tokens() {
        assert_eq!(word_count("my child's heart"), 3);
    }

    #[test]
    fn word_count_matches_generator_over_mixed_whitespace() {
        // Oracle: the generator knows how many tokens it emitted.
        let separators = [" ", "\t", "\n", "  ", " \n\t "];
        let mut text = String::new();
        for i in 0..10_000 {
            if i > 0 {
                text.push_str(separators[i % separators.len()]);
            }
            text.push_str(&format!("tok{i}"));
        }
        assert_eq!(word_count(&text), 10_000);
    }

    #[test]
    fn load_jsonl_counts_turns_and_words() {
        let mut f = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        writeln!(f, r#"{{"speaker": "FAC", "text": "How are you feeling today overall?"}}"#)
            .unwrap();
        writeln!(f, r#"{{"speaker": "P1", "text": "Honestly it has been a hard year for us."}}"#)
            .unwrap();
        writeln!(f, r#"{{"speaker": "P2", "text": "Same here."}}"#).unwrap();
        let t = load_transcript(f.path()).unwrap();
        assert_eq!(t.turns.len(), 3);
        assert_eq!(t.word_total, 6 + 9 + 2);
        assert_eq!(t.turns[2].index, 2);
    }

    #[test]
    fn load_empty_file_is_an_error() {
        let f = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        let err = load_transcript(f.path()).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyTranscript { .. }));
    }

    #[test]
    fn load_malformed_jsonl_reports_line_number() {
        let mut f = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        writeln!(f, r#"{{"speaker": "P1", "text": "fine"}}"#).unwrap();
        writeln!(f, r#"{{"speaker": "P2"}}"#).unwrap();
        let err = load_transcript(f.path()).unwrap_err();
        match err {
            CorpusError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_plain_text_fallback() {
        let mut f = tempfile::NamedTempFile::with_suffix(".txt").unwrap();
        writeln!(f, "FAC: What brought you in?").unwrap();
        writeln!(f, "P1: We got the diagnosis last spring").unwrap();
        writeln!(f, "and it changed everything.").unwrap();
        let t = load_transcript(f.path()).unwrap();
        assert_eq!(t.turns.len(), 2);
        assert_eq!(
            t.turns[1].text,
            "We got the diagnosis last spring and it changed everything."
        );
    }

    #[test]
    fn load_word_total_matches_independent_recount() {
        // Oracle: a separate whitespace-token pass over the raw record texts.
        let texts = [
            "It was  a total \t shock to all of us.",
            "We kept asking questions nobody could answer yet.",
            "The follow-up visits   helped a lot.",
        ];
        let mut f = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        for text in &texts {
            writeln!(f, r#"{{"speaker": "P1", "text": {}}}"#, serde_json::to_string(text).unwrap())
                .unwrap();
        }
        let t = load_transcript(f.path()).unwrap();
        let oracle: usize = texts
            .iter()
            .map(|s| s.split_whitespace().count())
            .sum();
        assert_eq!(t.word_total, oracle);
    }

    #[test]
    fn chunk_fits_single_chunk() {
        let t = transcript_from_counts(&[500, 400, 500]);
        let chunks = chunk_transcript(&t, 1500);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].word_count, 1400);
    }

    #[test]
    fn chunk_greedy_boundary() {
        let t = transcript_from_counts(&[900, 700, 800]);
        let chunks = chunk_transcript(&t, 1500);
        let sizes: Vec<usize> = chunks.iter().map(|c| c.turns.len()).collect();
        assert_eq!(sizes, vec![1, 2]);
        assert_eq!(chunks[0].word_count, 900);
        assert_eq!(chunks[1].word_count, 1500);
    }

    #[test]
    fn chunk_indices_are_contiguous() {
        let t = transcript_from_counts(&[300; 20]);
        let chunks = chunk_transcript(&t, 1000);
        for (i, c) in chunks.iter().enumerate() {
            assert_eq!(c.chunk_index, i);
        }
    }

    #[test]
    fn oversize_turn_splits_at_sentence_boundaries() {
        let sentence = "this sentence has exactly seven words in.";
        let text = [sentence; 10].join(" "); // 70 words
        let t = Transcript {
            id: "t".into(),
            turns: vec![Turn {
                speaker: "P1".into(),
                text: text.clone(),
                index: 0,
            }],
            word_total: 70,
        };
        let chunks = chunk_transcript(&t, 30);
        assert!(chunks.len() > 1);
        for c in &chunks {
            assert!(c.continuation);
            assert!(!c.oversize);
            assert!(c.word_count <= 30);
        }
        let reassembled = reassemble(&chunks);
        assert_eq!(reassembled.len(), 1);
        assert_eq!(reassembled[0].text, text);
    }

    #[test]
    fn indivisible_sentence_is_flagged_oversize() {
        let text = (0..50).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let t = Transcript {
            id: "t".into(),
            turns: vec![Turn {
                speaker: "P1".into(),
                text: text.clone(),
                index: 0,
            }],
            word_total: 50,
        };
        let chunks = chunk_transcript(&t, 30);
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].oversize);
        assert!(chunks[0].continuation);
        assert_eq!(chunks[0].word_count, 50);
    }

    #[test]
    fn chunk_count_monotone_in_budget() {
        let t = transcript_from_counts(&[120, 340, 90, 410, 55, 260, 199, 301, 77, 133]);
        let mut last = usize::MAX;
        for budget in [200, 400, 600, 800, 1200, 2000, 5000] {
            let n = chunk_transcript(&t, budget).len();
            assert!(n <= last, "chunk count grew from {last} to {n} at budget {budget}");
            last = n;
        }
    }

    #[test]
    fn sentence_split_keeps_terminators() {
        let parts = split_sentences("Is it serious? We hope not. Time will tell!");
        assert_eq!(parts, vec!["Is it serious?", "We hope not.", "Time will tell!"]);
    }

    proptest::proptest! {
        #[test]
        fn chunking_is_a_lossless_partition(
            counts in proptest::collection::vec(1usize..400, 1..50),
            max_words in 1usize..2000,
        ) {
            let t = transcript_from_counts(&counts);
            let chunks = chunk_transcript(&t, max_words);
            proptest::prop_assert_eq!(reassemble(&chunks), t.turns);
            for c in &chunks {
                if !c.oversize {
                    proptest::prop_assert!(c.word_count <= max_words);
                }
            }
        }

        #[test]
        fn chunking_is_deterministic(
            counts in proptest::collection::vec(1usize..200, 1..30),
            max_words in 1usize..1000,
        ) {
            let t = transcript_from_counts(&counts);
            proptest::prop_assert_eq!(
                chunk_transcript(&t, max_words),
                chunk_transcript(&t, max_words)
            );
        }
    }
}
