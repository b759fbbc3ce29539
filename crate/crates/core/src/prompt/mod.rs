//! Prompt construction from retrieved paths, template selection by
//! perplexity, and parsing of diagnosis outputs.
//!
//! Templates use `{{note}}`, `{{paths}}` and `{{shots}}` placeholders plus
//! `{{#paths}}...{{/paths}}` (rendered when paths exist) and
//! `{{^paths}}...{{/paths}}` (rendered when none exist) sections.

mod client;
mod perplexity;

pub use client::{complete_all, AuditRecord, HttpLlmClient, LlmClient, LlmConfig};
pub use perplexity::{rank_templates_by_perplexity, LmScorer, TemplateScore, TrigramScorer};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{ConceptId, KnowledgeGraph};
use crate::ranker::RetrievalRecord;

pub const ZERO_SHOT_TEMPLATE: &str = include_str!("../../data/templates/zero_shot.txt");
pub const REASONING_MARKER: &str = "<Reasoning>";
pub const PATH_ARROW: &str = " → ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: unclosed tag starting at byte {offset}")]
    UnclosedTag { template: String, offset: usize },
    #[error("template {template}: section {name} is not closed")]
    UnclosedSection { template: String, name: String },
    #[error("template {template}: unexpected closing tag {name}")]
    UnexpectedClose { template: String, name: String },
    #[error("path has {nodes} nodes but {relations} relations")]
    MalformedPath { nodes: usize, relations: usize },
    #[error("unknown concept {0} in path")]
    UnknownConcept(String),
    #[error("no templates found in {0}")]
    NoTemplates(String),
    #[error("perplexity ranking needs at least one sample prompt")]
    NoSamples,
    #[error("language model has no training text")]
    EmptyLmCorpus,
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request failed: {0}")]
    Network(String),
    #[error("response has no completion text: {0}")]
    Response(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Human-readable path: `names.len() == relations.len() + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathText {
    pub names: Vec<String>,
    pub relations: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStyle {
    /// `A → rel → B → rel → C`.
    #[default]
    Structural,
    /// `A rel B; B rel C`.
    Clauses,
}

impl PathText {
    pub fn new(names: Vec<String>, relations: Vec<String>) -> Result<Self, PromptError> {
        if names.len() != relations.len() + 1 {
            return Err(PromptError::MalformedPath {
                nodes: names.len(),
                relations: relations.len(),
            });
        }
        Ok(Self { names, relations })
    }

    /// Resolves CUIs to preferred names.
    pub fn from_cuis(
        graph: &KnowledgeGraph,
        nodes: &[ConceptId],
        relations: &[String],
    ) -> Result<Self, PromptError> {
        let names = nodes
            .iter()
            .map(|c| {
                graph
                    .concept(c)
                    .map(|c| c.preferred_name.clone())
                    .map_err(|_| PromptError::UnknownConcept(c.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(names, relations.to_vec())
    }

    pub fn render(&self, style: PathStyle) -> String {
        match style {
            PathStyle::Structural => {
                let mut out = self.names[0].clone();
                for (r, n) in self.relations.iter().zip(&self.names[1..]) {
                    out.push_str(PATH_ARROW);
                    out.push_str(r);
                    out.push_str(PATH_ARROW);
                    out.push_str(n);
                }
                out
            }
            PathStyle::Clauses => self
                .relations
                .iter()
                .enumerate()
                .map(|(i, r)| format!("{} {} {}", self.names[i], r, self.names[i + 1]))
                .collect::<Vec<_>>()
                .join("; "),
        }
    }
}

pub fn serialize_paths(paths: &[PathText], style: PathStyle) -> String {
    paths
        .iter()
        .map(|p| p.render(style))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Last-hop paths ending in a selected node, by score descending, at most
/// `max_paths`, without duplicate renderings.
pub fn prompt_paths(
    graph: &KnowledgeGraph,
    record: &RetrievalRecord,
    max_paths: usize,
) -> Result<Vec<PathText>, PromptError> {
    let Some(last) = record.hops.last() else {
        return Ok(Vec::new());
    };
    let mut ranked: Vec<_> = last
        .paths
        .iter()
        .filter(|p| p.nodes.last().is_some_and(|e| last.selected.contains(e)))
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.nodes.cmp(&b.nodes))
    });
    let mut out: Vec<PathText> = Vec::new();
    for p in ranked {
        let text = PathText::from_cuis(graph, &p.nodes, &p.relations)?;
        if !out.contains(&text) {
            out.push(text);
        }
        if out.len() == max_paths {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub note: String,
    pub diagnoses: Vec<String>,
}

pub fn format_shots(shots: &[FewShot]) -> String {
    shots
        .iter()
        .map(|s| {
            format!(
                "Input note:\n{}\nDiagnoses:\n{}\n\n",
                s.note,
                s.diagnoses.join("; ")
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Var(Var),
    Section { inverted: bool, body: Vec<Piece> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Var {
    Note,
    Paths,
    Shots,
}

/// Parsed prompt template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pieces: Vec<Piece>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptInput {
    pub note: String,
    pub paths: Vec<PathText>,
    pub shots: Vec<FewShot>,
}

impl Template {
    pub fn parse(id: &str, text: &str) -> Result<Self, PromptError> {
        let mut stack: Vec<(bool, Vec<Piece>)> = vec![(false, Vec::new())];
        let mut rest = text;
        let mut offset = 0;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                stack
                    .last_mut()
                    .expect("root")
                    .1
                    .push(Piece::Text(rest[..start].to_string()));
            }
            let end = rest[start..].find("}}").ok_or(PromptError::UnclosedTag {
                template: id.to_string(),
                offset: offset + start,
            })?;
            let tag = rest[start + 2..start + end].trim();
            match tag.chars().next() {
                Some(c @ ('#' | '^')) => {
                    let name = &tag[1..];
                    if name != "paths" {
                        return Err(unknown(id, tag));
                    }
                    stack.push((c == '^', Vec::new()));
                }
                Some('/') => {
                    if &tag[1..] != "paths" || stack.len() < 2 {
                        return Err(PromptError::UnexpectedClose {
                            template: id.to_string(),
                            name: tag[1..].to_string(),
                        });
                    }
                    let (inverted, body) = stack.pop().expect("section");
                    stack
                        .last_mut()
                        .expect("root")
                        .1
                        .push(Piece::Section { inverted, body });
                }
                _ => {
                    let var = match tag {
                        "note" => Var::Note,
                        "paths" => Var::Paths,
                        "shots" => Var::Shots,
                        other => return Err(unknown(id, other)),
                    };
                    stack.last_mut().expect("root").1.push(Piece::Var(var));
                }
            }
            let consumed = start + end + 2;
            offset += consumed;
            rest = &rest[consumed..];
        }
        if !rest.is_empty() {
            stack
                .last_mut()
                .expect("root")
                .1
                .push(Piece::Text(rest.to_string()));
        }
        if stack.len() > 1 {
            return Err(PromptError::UnclosedSection {
                template: id.to_string(),
                name: "paths".into(),
            });
        }
        Ok(Self {
            id: id.to_string(),
            pieces: stack.pop().expect("root").1,
        })
    }

    pub fn zero_shot() -> Self {
        Self::parse("zero_shot", ZERO_SHOT_TEMPLATE).expect("bundled template parses")
    }

    pub fn render(&self, input: &PromptInput, style: PathStyle) -> String {
        let mut out = String::new();
        render_pieces(&self.pieces, input, style, &mut out);
        out
    }
}

fn unknown(id: &str, name: &str) -> PromptError {
    PromptError::UnknownPlaceholder {
        template: id.to_string(),
        name: name.to_string(),
    }
}

fn render_pieces(pieces: &[Piece], input: &PromptInput, style: PathStyle, out: &mut String) {
    for p in pieces {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Var(Var::Note) => out.push_str(&input.note),
            Piece::Var(Var::Paths) => out.push_str(&serialize_paths(&input.paths, style)),
            Piece::Var(Var::Shots) => out.push_str(&format_shots(&input.shots)),
            Piece::Section { inverted, body } => {
                if input.paths.is_empty() == *inverted {
                    render_pieces(body, input, style, out);
                }
            }
        }
    }
}

/// Loads every `*.txt` file in `dir` as a template named by its file stem,
/// sorted by name.
pub fn load_templates(dir: &Path) -> Result<Vec<Template>, PromptError> {
    let io = |source| PromptError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut files: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), path.clone());
            }
        }
    }
    if files.is_empty() {
        return Err(PromptError::NoTemplates(dir.display().to_string()));
    }
    files
        .into_iter()
        .map(|(id, path)| {
            let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Template::parse(&id, &text)
        })
        .collect()
}

/// Diagnoses and free-text reasoning of a model answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub diagnoses: Vec<String>,
    pub reasoning: Option<String>,
}

/// Splits at the first `<Reasoning>` marker; the part before it is split on
/// `;`, trimmed, and empty entries are dropped.
pub fn parse_llm_output(text: &str) -> ParsedOutput {
    let (head, reasoning) = match text.find(REASONING_MARKER) {
        Some(i) => (
            &text[..i],
            Some(text[i + REASONING_MARKER.len()..].trim().to_string()),
        ),
        None => (text, None),
    };
    ParsedOutput {
        diagnoses: head
            .split(';')
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(String::from)
            .collect(),
        reasoning,
    }
}

/// Inverse of `parse_llm_output` for diagnoses without `;` and trimmed text.
pub fn format_llm_output(parsed: &ParsedOutput) -> String {
    let mut out = parsed.diagnoses.join("; ");
    if let Some(r) = &parsed.reasoning {
        out.push('\n');
        out.push_str(REASONING_MARKER);
        out.push(' ');
        out.push_str(r);
    }
    out
}

/// One row of `prompts.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub note_id: String,
    pub template: String,
    pub prompt: String,
}
