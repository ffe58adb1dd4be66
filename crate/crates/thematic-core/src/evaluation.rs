//! Quantitative comparison of generated themes against a human ground truth.
//!
//! For a human theme set H (n themes) and a machine theme set L (m themes),
//! a scorer produces an n×m similarity matrix over theme *descriptions*.
//! Binarizing at a threshold θ (score ≥ θ counts as similar) yields:
//!
//! - Jaccard similarity: |{(i,j) : s(h_i, l_j) ≥ θ}| / (n × m)
//! - Hit rate: |{i : ∃ j, s(h_i, l_j) ≥ θ}| / n
//!
//! Embedding scorers use pairwise cosine similarity; the judge scorer asks a
//! model for a 0–1 conceptual-overlap score with a specificity penalty. Rows
//! are always human themes and columns always machine themes; judge scores
//! need not be symmetric.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine_similarity, ChatRequest, Gateway, GatewayError};
use crate::prompts::{PromptError, Prompts};
use crate::theming::Theme;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read ground truth {path}: {reason}")]
    GroundTruth { path: String, reason: String },
    #[error("comparison requires non-empty theme sets")]
    EmptySet,
    #[error("judge reply had no numeric score: {reply:?}")]
    UnparseableScore { reply: String },
    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),
    #[error("sweep grid must be non-empty and sorted ascending")]
    BadGrid,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv at {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// The human research team's final theme set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub themes: Vec<GroundTruthTheme>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthTheme {
    pub title: String,
    pub description: String,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path).map_err(|e| EvalError::GroundTruth {
            path: display.clone(),
            reason: e.to_string(),
        })?;
        let themes: Vec<GroundTruthTheme> =
            serde_json::from_str(&raw).map_err(|e| EvalError::GroundTruth {
                path: display.clone(),
                reason: e.to_string(),
            })?;
        let gt = Self { themes };
        gt.validate().map_err(|reason| EvalError::GroundTruth {
            path: display,
            reason,
        })?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.themes.is_empty() {
            return Err("ground truth must contain at least one theme".to_string());
        }
        let mut titles = BTreeSet::new();
        for theme in &self.themes {
            if !titles.insert(theme.title.as_str()) {
                return Err(format!("duplicate ground-truth title `{}`", theme.title));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Embedding,
    Judge,
}

/// A configured similarity scorer. The bundled presets carry the thresholds
/// the pipeline defaults to; any other embedding endpoint can be named
/// directly and given a threshold in configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scorer {
    pub id: String,
    pub kind: ScorerKind,
    pub default_threshold: f64,
}

/// Preset scorers and their default binarization thresholds.
pub const SCORER_PRESETS: &[(&str, ScorerKind, f64)] = &[
    ("sentence-t5-xxl", ScorerKind::Embedding, 0.82),
    ("all-mpnet-base-v2", ScorerKind::Embedding, 0.62),
    ("all-MiniLM-L6-v2", ScorerKind::Embedding, 0.56),
    ("judge", ScorerKind::Judge, 0.5),
];

impl Scorer {
    /// Resolve a scorer name: presets first, otherwise an embedding scorer
    /// with a 0.5 default threshold (override it in configuration).
    pub fn resolve(name: &str) -> Self {
        for (id, kind, threshold) in SCORER_PRESETS {
            if *id == name {
                return Self {
                    id: (*id).to_string(),
                    kind: *kind,
                    default_threshold: *threshold,
                };
            }
        }
        Self {
            id: name.to_string(),
            kind: ScorerKind::Embedding,
            default_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub human_labels: Vec<String>,
    pub llm_labels: Vec<String>,
    /// `scores[i][j]` compares human theme i against machine theme j.
    pub scores: Vec<Vec<f64>>,
    pub scorer_id: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMatrix {
    pub mask: Vec<Vec<bool>>,
}

impl BinaryMatrix {
    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn cols(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerMetrics {
    pub scorer_id: String,
    pub threshold: f64,
    pub jaccard: f64,
    pub hit_rate: f64,
}

/// Metrics bundle for one evaluated run, one row per scorer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub method: String,
    pub human_theme_count: usize,
    pub llm_theme_count: usize,
    pub scorers: Vec<ScorerMetrics>,
}

/// Pairwise similarity of human vs. machine theme descriptions under the
/// given scorer. Descriptions, not titles, are compared.
pub fn similarity_matrix(
    human: &GroundTruth,
    llm: &[Theme],
    scorer: &Scorer,
    prompts: &Prompts,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest + Sync,
) -> Result<(SimilarityMatrix, Vec<String>), EvalError> {
    if human.themes.is_empty() || llm.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let human_labels: Vec<String> = human.themes.iter().map(|t| t.title.clone()).collect();
    let llm_labels: Vec<String> = llm.iter().map(|t| t.title.clone()).collect();

    let (scores, warnings) = match scorer.kind {
        ScorerKind::Embedding => {
            let human_texts: Vec<String> =
                human.themes.iter().map(|t| t.description.clone()).collect();
            let llm_texts: Vec<String> = llm.iter().map(|t| t.description.clone()).collect();
            let human_vecs = gateway.embed(&human_texts, &scorer.id)?;
            let llm_vecs = gateway.embed(&llm_texts, &scorer.id)?;
            let scores = human_vecs
                .iter()
                .map(|h| {
                    llm_vecs
                        .iter()
                        .map(|l| cosine_similarity(&h.values, &l.values))
                        .collect()
                })
                .collect();
            (scores, Vec::new())
        }
        ScorerKind::Judge => {
            let pairs: Vec<(usize, usize)> = (0..human.themes.len())
                .flat_map(|i| (0..llm.len()).map(move |j| (i, j)))
                .collect();
            let cells = gateway.map_bounded(&pairs, |_, &(i, j)| {
                judge_pair(
                    &human.themes[i].description,
                    &llm[j].description,
                    prompts,
                    gateway,
                    &request,
                )
                .map_err(|e| match e {
                    EvalError::Gateway(g) => g,
                    other => GatewayError::Provider(other.to_string()),
                })
            })?;
            let mut warnings = Vec::new();
            let mut scores = vec![vec![0.0; llm.len()]; human.themes.len()];
            for (&(i, j), (score, mut cell_warnings)) in pairs.iter().zip(cells) {
                scores[i][j] = score;
                warnings.append(&mut cell_warnings);
            }
            (scores, warnings)
        }
    };

    Ok((
        SimilarityMatrix {
            human_labels,
            llm_labels,
            scores,
            scorer_id: scorer.id.clone(),
            threshold: scorer.default_threshold,
        },
        warnings,
    ))
}

/// Ask the judge model for a 0–1 similarity score for one description pair.
/// Out-of-range scores are clamped with a warning; an unparseable reply gets
/// one repair request before failing.
pub fn judge_pair(
    human_desc: &str,
    llm_desc: &str,
    prompts: &Prompts,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest,
) -> Result<(f64, Vec<String>), EvalError> {
    let (system, user) = prompts.judge(human_desc, llm_desc)?;
    let req = request(&system, &user);
    let reply = gateway.complete(&req)?;

    let mut warnings = Vec::new();
    let parsed = match parse_score(&reply.text) {
        Some(score) => score,
        None => {
            warnings.push(format!(
                "judge reply had no numeric score ({:?}); requesting reformat",
                snippet(&reply.text)
            ));
            let repaired = gateway.complete(&crate::codegen::repair_request(&req, &reply.text))?;
            parse_score(&repaired.text).ok_or(EvalError::UnparseableScore {
                reply: snippet(&repaired.text),
            })?
        }
    };

    let score = if (0.0..=1.0).contains(&parsed) {
        parsed
    } else {
        let clamped = parsed.clamp(0.0, 1.0);
        warnings.push(format!(
            "judge score {parsed} outside [0, 1]; clamped to {clamped}"
        ));
        clamped
    };
    Ok((score, warnings))
}

/// First whitespace token that parses as a number, punctuation trimmed.
fn parse_score(reply: &str) -> Option<f64> {
    reply
        .split_whitespace()
        .filter_map(|tok| {
            tok.trim_matches(|c: char| !c.is_ascii_digit() && c != '.' && c != '-')
                .parse::<f64>()
                .ok()
        })
        .next()
}

fn snippet(text: &str) -> String {
    text.chars().take(80).collect()
}

/// Threshold the matrix: `mask[i][j] ⇔ scores[i][j] ≥ θ`. The boundary is
/// inclusive.
pub fn binarize(sim: &SimilarityMatrix, threshold: f64) -> BinaryMatrix {
    BinaryMatrix {
        mask: sim
            .scores
            .iter()
            .map(|row| row.iter().map(|&s| s >= threshold).collect())
            .collect(),
    }
}

/// Fraction of all human–machine pairs classified similar.
pub fn jaccard(bin: &BinaryMatrix) -> f64 {
    let cells = bin.rows() * bin.cols();
    if cells == 0 {
        return 0.0;
    }
    let similar = bin
        .mask
        .iter()
        .map(|row| row.iter().filter(|&&v| v).count())
        .sum::<usize>();
    similar as f64 / cells as f64
}

/// Fraction of human themes with at least one similar machine theme.
pub fn hit_rate(bin: &BinaryMatrix) -> f64 {
    if bin.rows() == 0 {
        return 0.0;
    }
    let hits = bin.mask.iter().filter(|row| row.iter().any(|&v| v)).count();
    hits as f64 / bin.rows() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub jaccard: f64,
    pub hit_rate: f64,
}

/// Metrics at every threshold of an ascending grid. Both metrics are
/// non-increasing in θ.
pub fn sensitivity_sweep(
    sim: &SimilarityMatrix,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, EvalError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::BadGrid);
    }
    Ok(grid
        .iter()
        .map(|&threshold| {
            let bin = binarize(sim, threshold);
            SweepPoint {
                threshold,
                jaccard: jaccard(&bin),
                hit_rate: hit_rate(&bin),
            }
        })
        .collect())
}

/// Write the score matrix (and optionally its binary mask) as CSV heatmap
/// feedstock: human titles as row headers, machine titles as column headers,
/// scores to six decimal places, mask cells as 0/1.
pub fn export_heatmap(
    sim: &SimilarityMatrix,
    bin: Option<&BinaryMatrix>,
    scores_path: &Path,
    mask_path: &Path,
) -> Result<(), EvalError> {
    write_matrix_csv(scores_path, sim, |i, j| format!("{:.6}", sim.scores[i][j]))?;
    if let Some(bin) = bin {
        write_matrix_csv(mask_path, sim, |i, j| {
            if bin.mask[i][j] { "1" } else { "0" }.to_string()
        })?;
    }
    Ok(())
}

fn write_matrix_csv(
    path: &Path,
    sim: &SimilarityMatrix,
    cell: impl Fn(usize, usize) -> String,
) -> Result<(), EvalError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let wrap = |source: csv::Error| EvalError::Csv {
        path: path.display().to_string(),
        source,
    };

    let mut header = vec!["human_theme".to_string()];
    header.extend(sim.llm_labels.iter().cloned());
    writer.write_record(&header).map_err(wrap)?;
    for (i, label) in sim.human_labels.iter().enumerate() {
        let mut record = vec![label.clone()];
        record.extend((0..sim.llm_labels.len()).map(|j| cell(i, j)));
        writer.write_record(&record).map_err(wrap)?;
    }
    writer.flush().map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Write a sweep as CSV: `threshold,jaccard,hit_rate`.
pub fn export_sweep(points: &[SweepPoint], path: &Path) -> Result<(), EvalError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|source| EvalError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let wrap = |source: csv::Error| EvalError::Csv {
        path: path.display().to_string(),
        source,
    };
    writer
        .write_record(["threshold", "jaccard", "hit_rate"])
        .map_err(wrap)?;
    for p in points {
        writer
            .write_record([
                format!("{:.6}", p.threshold),
                format!("{:.6}", p.jaccard),
                format!("{:.6}", p.hit_rate),
            ])
            .map_err(wrap)?;
    }
    writer.flush().map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}
