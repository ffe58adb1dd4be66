//! Theme generation: preliminary themes per code group, an optional
//! Reflexion critique/refine round, and final synthesis across groups.
//!
//! Themes reference codes by id. Models name codes in their replies; names
//! are reconciled back to known codes by exact match first, then
//! case-insensitively, and unmatched references are dropped with a warning —
//! a dropped link is recoverable, an invented code is not.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{extract_json_array, repair_request, Code, CodegenError, CodeGroup};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{PromptError, Prompts, Strategy, ThemeStage};

#[derive(Debug, Error)]
pub enum ThemingError {
    #[error("theme generation needs a non-empty input")]
    EmptyInput,
    #[error("model produced an empty theme list")]
    EmptyThemes,
    #[error(transparent)]
    Parse(#[from] CodegenError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeStageTag {
    Preliminary,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub id: String,
    pub title: String,
    pub description: String,
    /// Ids of associated codes; one code may appear under several themes.
    pub code_refs: Vec<String>,
    pub stage: ThemeStageTag,
    pub group_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub stage: ThemeStageTag,
    pub group_index: Option<usize>,
    pub text: String,
    pub target_theme_ids: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct RawTheme {
    pub(crate) title: String,
    pub(crate) description: String,
    #[serde(default)]
    pub(crate) codes: Vec<String>,
}

/// Render themes as the payload entries critique/refine/final prompts embed.
/// Code references are rendered as names so the model reasons in its own
/// vocabulary; they are reconciled back to ids on the way in.
pub fn themes_payload(themes: &[Theme], known_codes: &[Code]) -> String {
    themes
        .iter()
        .map(|t| {
            let names: Vec<&str> = t
                .code_refs
                .iter()
                .filter_map(|id| known_codes.iter().find(|c| &c.id == id))
                .map(|c| c.name.as_str())
                .collect();
            format!(
                "- title: {}\n  description: {}\n  codes: {}",
                t.title,
                t.description,
                names.join("; ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn resolve_code_refs(names: &[String], known: &[Code]) -> (Vec<String>, Vec<String>) {
    let mut ids = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        let exact: Vec<&Code> = known.iter().filter(|c| &c.name == name).collect();
        let matches = if exact.is_empty() {
            known
                .iter()
                .filter(|c| c.name.eq_ignore_ascii_case(name))
                .collect()
        } else {
            exact
        };
        if matches.is_empty() {
            warnings.push(format!("dropping unknown code reference `{name}`"));
            continue;
        }
        for code in matches {
            if !ids.contains(&code.id) {
                ids.push(code.id.clone());
            }
        }
    }
    (ids, warnings)
}

pub(crate) fn complete_and_parse(
    gateway: &Gateway,
    req: &ChatRequest,
) -> Result<(Vec<RawTheme>, Vec<String>), ThemingError> {
    let reply = gateway.complete(req)?;
    match extract_json_array::<RawTheme>(&reply.text) {
        Ok(out) => Ok(out),
        Err(first_err) => {
            let mut warnings = vec![format!(
                "theme reply did not parse ({first_err}); requesting reformat"
            )];
            let repaired = gateway.complete(&repair_request(req, &reply.text))?;
            let (themes, mut more) = extract_json_array::<RawTheme>(&repaired.text)?;
            warnings.append(&mut more);
            Ok((themes, warnings))
        }
    }
}

pub(crate) fn build_themes(
    raw: Vec<RawTheme>,
    known_codes: &[Code],
    stage: ThemeStageTag,
    group_index: Option<usize>,
    warnings: &mut Vec<String>,
) -> Result<Vec<Theme>, ThemingError> {
    if raw.is_empty() {
        return Err(ThemingError::EmptyThemes);
    }
    let prefix = match (stage, group_index) {
        (ThemeStageTag::Preliminary, Some(g)) => format!("theme:prelim:{g:02}"),
        (ThemeStageTag::Preliminary, None) => "theme:prelim".to_string(),
        (ThemeStageTag::Final, _) => "theme:final".to_string(),
    };
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let (code_refs, mut ref_warnings) = resolve_code_refs(&t.codes, known_codes);
            warnings.append(&mut ref_warnings);
            Theme {
                id: format!("{prefix}:{i:02}"),
                title: t.title,
                description: t.description,
                code_refs,
                stage,
                group_index,
            }
        })
        .collect())
}

/// Stage 2(a): synthesize preliminary themes for one code group.
pub fn generate_preliminary_themes(
    group: &CodeGroup,
    prompts: &Prompts,
    strat: &Strategy,
    include_quotes: bool,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest,
) -> Result<(Vec<Theme>, Vec<String>), ThemingError> {
    if group.codes.is_empty() {
        return Err(ThemingError::EmptyInput);
    }
    let payload = crate::codegen::codes_payload(&group.codes, include_quotes);
    let prompt = prompts.theme(&payload, strat, ThemeStage::Preliminary)?;
    let req = request(&prompt.system, &prompt.user);
    let (raw, mut warnings) = complete_and_parse(gateway, &req)?;
    let themes = build_themes(
        raw,
        &group.codes,
        ThemeStageTag::Preliminary,
        Some(group.group_index),
        &mut warnings,
    )?;
    Ok((themes, warnings))
}

/// One Reflexion round: critique the themes, then regenerate them using the
/// critique. The refined themes replace the originals; the critique records
/// which theme ids it targeted.
pub fn reflexion_refine(
    themes: &[Theme],
    known_codes: &[Code],
    prompts: &Prompts,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest,
) -> Result<(Critique, Vec<Theme>, Vec<String>), ThemingError> {
    let Some(first) = themes.first() else {
        return Err(ThemingError::EmptyInput);
    };
    let stage = first.stage;
    let group_index = first.group_index;

    let payload = themes_payload(themes, known_codes);
    let (critique_prompt, refine_template) = prompts.reflexion(&payload)?;
    let critique_reply = gateway.complete(&request(&critique_prompt.system, &critique_prompt.user))?;

    let refine_prompt = refine_template.instantiate(&critique_reply.text);
    let req = request(&refine_prompt.system, &refine_prompt.user);
    let (raw, mut warnings) = complete_and_parse(gateway, &req)?;
    let refined = build_themes(raw, known_codes, stage, group_index, &mut warnings)?;

    let critique = Critique {
        stage,
        group_index,
        text: critique_reply.text,
        target_theme_ids: themes.iter().map(|t| t.id.clone()).collect(),
    };
    Ok((critique, refined, warnings))
}

/// Stage 2(b): review all preliminary theme sets and synthesize the final
/// overarching themes. Runs even for a single preliminary set — there is no
/// pass-through shortcut.
pub fn synthesize_final_themes(
    prelim: &[Vec<Theme>],
    known_codes: &[Code],
    prompts: &Prompts,
    strat: &Strategy,
    gateway: &Gateway,
    request: impl Fn(&str, &str) -> ChatRequest,
) -> Result<(Vec<Theme>, Vec<String>), ThemingError> {
    let all: Vec<Theme> = prelim.iter().flatten().cloned().collect();
    if all.is_empty() {
        return Err(ThemingError::EmptyInput);
    }
    let payload = themes_payload(&all, known_codes);
    let prompt = prompts.theme(&payload, strat, ThemeStage::Final)?;
    let req = request(&prompt.system, &prompt.user);
    let (raw, mut warnings) = complete_and_parse(gateway, &req)?;
    let themes = build_themes(raw, known_codes, ThemeStageTag::Final, None, &mut warnings)?;
    Ok((themes, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::CodeSource;
    use crate::gateway::mock::MockProvider;
    use crate::prompts::{StudyContext, TemplateStore};

    fn code(i: usize) -> Code {
        Code {
            id: format!("code:t1:000:{i:02}"),
            name: format!("code{i}"),
            description: format!("families mention topic{i} often"),
            quotes: vec![format!("quote {i}")],
            source: CodeSource {
                transcript_id: "t1".to_string(),
                chunk_index: 0,
            },
            verified: true,
        }
    }

    fn group(n: usize) -> CodeGroup {
        CodeGroup {
            group_index: 0,
            codes: (1..=n).map(code).collect(),
        }
    }

    fn setup() -> (Prompts, Gateway) {
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let gateway = Gateway::new(Box::new(MockProvider::new()), None);
        (prompts, gateway)
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
    fn five_code_group_yields_two_preliminary_themes() {
        let (prompts, gateway) = setup();
        let (themes, warnings) = generate_preliminary_themes(
            &group(5),
            &prompts,
            &Strategy::zero_shot(),
            false,
            &gateway,
            req,
        )
        .unwrap();
        assert_eq!(themes.len(), 2, "ceil(5/3) themes per mock rule");
        assert!(warnings.is_empty());
        assert_eq!(themes[0].stage, ThemeStageTag::Preliminary);
        assert_eq!(themes[0].group_index, Some(0));
        assert_eq!(themes[0].id, "theme:prelim:00:00");
        assert_eq!(
            themes[0].code_refs,
            vec!["code:t1:000:01", "code:t1:000:02", "code:t1:000:03"]
        );
        assert_eq!(themes[1].code_refs.len(), 2);
    }

    #[test]
    fn unknown_code_reference_is_dropped_with_warning() {
        let themes = vec![RawTheme {
            title: "t".to_string(),
            description: "d".to_string(),
            codes: vec!["code1".to_string(), "never-generated".to_string()],
        }];
        let mut warnings = Vec::new();
        let built = build_themes(
            themes,
            &group(2).codes,
            ThemeStageTag::Preliminary,
            Some(0),
            &mut warnings,
        )
        .unwrap();
        assert_eq!(built[0].code_refs, vec!["code:t1:000:01"]);
        assert!(warnings[0].contains("never-generated"));
    }

    #[test]
    fn case_insensitive_reference_resolves() {
        let themes = vec![RawTheme {
            title: "t".to_string(),
            description: "d".to_string(),
            codes: vec!["CODE1".to_string()],
        }];
        let mut warnings = Vec::new();
        let built = build_themes(
            themes,
            &group(1).codes,
            ThemeStageTag::Preliminary,
            Some(0),
            &mut warnings,
        )
        .unwrap();
        assert_eq!(built[0].code_refs, vec!["code:t1:000:01"]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn a_code_may_belong_to_multiple_themes() {
        let raw = vec![
            RawTheme {
                title: "a".to_string(),
                description: "d".to_string(),
                codes: vec!["code1".to_string()],
            },
            RawTheme {
                title: "b".to_string(),
                description: "d".to_string(),
                codes: vec!["code1".to_string(), "code2".to_string()],
            },
        ];
        let mut warnings = Vec::new();
        let built = build_themes(
            raw,
            &group(2).codes,
            ThemeStageTag::Preliminary,
            Some(0),
            &mut warnings,
        )
        .unwrap();
        assert!(built[0].code_refs.contains(&"code:t1:000:01".to_string()));
        assert!(built[1].code_refs.contains(&"code:t1:000:01".to_string()));
    }

    #[test]
    fn reflexion_produces_critique_and_refined_set() {
        let (prompts, gateway) = setup();
        let g = group(5);
        let (themes, _) = generate_preliminary_themes(
            &g,
            &prompts,
            &Strategy::zero_shot(),
            false,
            &gateway,
            req,
        )
        .unwrap();
        let (critique, refined, warnings) =
            reflexion_refine(&themes, &g.codes, &prompts, &gateway, req).unwrap();
        assert!(warnings.is_empty());
        // Mock critique mentions every theme title.
        for theme in &themes {
            assert!(critique.text.contains(&theme.title));
        }
        assert_eq!(critique.target_theme_ids, vec!["theme:prelim:00:00", "theme:prelim:00:01"]);
        assert_eq!(critique.stage, ThemeStageTag::Preliminary);
        assert_eq!(refined.len(), themes.len());
        for (orig, refined) in themes.iter().zip(&refined) {
            assert_eq!(refined.title, orig.title);
            assert!(refined.description.starts_with(&orig.description));
            assert!(refined.description.contains("Refined"));
            assert_eq!(refined.code_refs, orig.code_refs);
        }
    }

    #[test]
    fn reflexion_on_empty_set_is_an_error() {
        let (prompts, gateway) = setup();
        assert!(matches!(
            reflexion_refine(&[], &group(1).codes, &prompts, &gateway, req),
            Err(ThemingError::EmptyInput)
        ));
    }

    #[test]
    fn reflexion_replays_byte_identical_from_warm_cache() {
        let dir = tempfile::tempdir().unwrap();
        let prompts =
            Prompts::new(TemplateStore::embedded_only(), StudyContext::default()).unwrap();
        let g = group(4);
        let run = || {
            let gateway = Gateway::new(
                Box::new(MockProvider::new()),
                Some(dir.path().to_path_buf()),
            );
            let (themes, _) = generate_preliminary_themes(
                &g,
                &prompts,
                &Strategy::zero_shot(),
                false,
                &gateway,
                req,
            )
            .unwrap();
            let (critique, refined, _) =
                reflexion_refine(&themes, &g.codes, &prompts, &gateway, req).unwrap();
            (critique, refined, gateway.stats().provider_calls)
        };
        let (c1, r1, calls1) = run();
        let (c2, r2, calls2) = run();
        assert_eq!(serde_json::to_string(&c1).unwrap(), serde_json::to_string(&c2).unwrap());
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert!(calls1 > 0);
        assert_eq!(calls2, 0, "warm cache must satisfy every request");
    }

    #[test]
    fn final_synthesis_runs_for_a_single_preliminary_set() {
        let (prompts, gateway) = setup();
        let g = group(3);
        let (themes, _) = generate_preliminary_themes(
            &g,
            &prompts,
            &Strategy::zero_shot(),
            false,
            &gateway,
            req,
        )
        .unwrap();
        let before = gateway.stats().provider_calls;
        let (finals, _) = synthesize_final_themes(
            &[themes],
            &g.codes,
            &prompts,
            &Strategy::zero_shot(),
            &gateway,
            req,
        )
        .unwrap();
        assert!(gateway.stats().provider_calls > before, "synthesis must call the model");
        assert_eq!(finals[0].stage, ThemeStageTag::Final);
        assert_eq!(finals[0].id, "theme:final:00");
        assert_eq!(finals[0].group_index, None);
    }

    #[test]
    fn final_synthesis_merges_two_sets_deterministically() {
        let (prompts, gateway) = setup();
        let g1 = CodeGroup {
            group_index: 0,
            codes: (1..=6).map(code).collect(),
        };
        let strat = Strategy::zero_shot();
        let (t1, _) =
            generate_preliminary_themes(&g1, &prompts, &strat, false, &gateway, req).unwrap();
        assert_eq!(t1.len(), 2);
        let sets: Vec<Vec<Theme>> = vec![t1.clone(), t1];
        let all_codes = g1.codes;
        let (finals, _) =
            synthesize_final_themes(&sets, &all_codes, &prompts, &strat, &gateway, req).unwrap();
        // 4 preliminary themes in → ceil(4/3) = 2 final themes per mock rule.
        assert_eq!(finals.len(), 2);
        let (again, _) =
            synthesize_final_themes(&sets, &all_codes, &prompts, &strat, &gateway, req).unwrap();
        assert_eq!(finals, again);
    }

    #[test]
    fn empty_preliminary_input_is_an_error() {
        let (prompts, gateway) = setup();
        assert!(matches!(
            synthesize_final_themes(
                &[Vec::new()],
                &group(1).codes,
                &prompts,
                &Strategy::zero_shot(),
                &gateway,
                req
            ),
            Err(ThemingError::EmptyInput)
        ));
    }
}
