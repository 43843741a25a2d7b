//! The tag grammar spoken between policy and environment.
//!
//! An assistant turn is an optional `<think>…</think>` followed by exactly one
//! action element: `<search>`, `<select>`, `<bbox>` or `<answer>`. Only
//! whitespace may appear outside the elements. The full grammar is written
//! out in `assets/action_grammar.ebnf`.
//!
//! Parsing is total: every input yields either a typed action or a
//! `Malformed` action carrying a nonempty error list.

use serde::{Deserialize, Serialize};

use crate::perception::CroppedImage;
use crate::types::{Action, ActionRecord, BBox, PageImage, Turn};

pub const NO_RESULTS: &str = "No results found.";
pub const INVALID_FORMAT: &str = "Invalid action format.";
pub const NO_IMAGES: &str = "No images available for this action.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatErrorCode {
    UnclosedTag,
    MultipleActions,
    UnknownTag,
    BadPayload,
    MissingAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub code: FormatErrorCode,
    /// Character offsets `[start, end)` into the parsed text.
    pub span: (usize, usize),
    pub message: String,
}

impl FormatError {
    fn new(code: FormatErrorCode, span: (usize, usize), message: impl Into<String>) -> Self {
        Self {
            code,
            span,
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SerializeError {
    #[error("malformed actions have no canonical text")]
    Malformed,
    #[error("{0} payload cannot be written canonically: {1}")]
    Payload(&'static str, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagName {
    Think,
    Search,
    Select,
    Bbox,
    Answer,
}

impl TagName {
    fn from_str(s: &str) -> Option<Self> {
        Some(match s {
            "think" => TagName::Think,
            "search" => TagName::Search,
            "select" => TagName::Select,
            "bbox" => TagName::Bbox,
            "answer" => TagName::Answer,
            _ => return None,
        })
    }

    fn is_action(self) -> bool {
        self != TagName::Think
    }
}

#[derive(Debug)]
struct Tag {
    closing: bool,
    name: Result<TagName, String>,
    start: usize,
    end: usize,
}

/// Finds every `<name>` / `</name>` token, by character offset.
fn scan_tags(chars: &[char]) -> Vec<Tag> {
    let mut tags = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] != '<' {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        let closing = chars.get(j) == Some(&'/');
        if closing {
            j += 1;
        }
        let name_start = j;
        if chars.get(j).is_some_and(|c| c.is_ascii_alphabetic()) {
            j += 1;
            while chars
                .get(j)
                .is_some_and(|c| c.is_ascii_alphanumeric() || *c == '_')
            {
                j += 1;
            }
            if chars.get(j) == Some(&'>') {
                let name: String = chars[name_start..j].iter().collect();
                tags.push(Tag {
                    closing,
                    name: TagName::from_str(&name).ok_or(name),
                    start: i,
                    end: j + 1,
                });
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    tags
}

struct Element {
    name: TagName,
    content: (usize, usize),
    span: (usize, usize),
}

/// Result of parsing one assistant turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub thought: Option<String>,
    pub record: ActionRecord,
}

impl ParsedTurn {
    pub fn errors(&self) -> &[FormatError] {
        match &self.record.action {
            Action::Malformed { errors } => errors,
            _ => &[],
        }
    }
}

pub fn parse_turn(text: &str) -> ParsedTurn {
    let chars: Vec<char> = text.chars().collect();
    let slice = |a: usize, b: usize| chars[a..b].iter().collect::<String>();
    let tags = scan_tags(&chars);

    let mut errors = Vec::new();
    let mut elements: Vec<Element> = Vec::new();
    // spans of action tags that never became a complete element
    let mut dangling_actions: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<(TagName, usize, usize)> = None;
    let mut outside_from = 0;

    let check_outside = |from: usize, to: usize, errors: &mut Vec<FormatError>| {
        if from < to && chars[from..to].iter().any(|c| !c.is_whitespace()) {
            errors.push(FormatError::new(
                FormatErrorCode::BadPayload,
                (from, to),
                "text outside of tags",
            ));
        }
    };

    for tag in &tags {
        let name = match &tag.name {
            Ok(n) => *n,
            Err(unknown) => {
                errors.push(FormatError::new(
                    FormatErrorCode::UnknownTag,
                    (tag.start, tag.end),
                    format!(
                        "unknown tag <{}{}>",
                        if tag.closing { "/" } else { "" },
                        unknown
                    ),
                ));
                continue;
            }
        };
        if !tag.closing {
            if let Some((prev, start, _)) = open.take() {
                errors.push(FormatError::new(
                    FormatErrorCode::UnclosedTag,
                    (start, tag.start),
                    format!("<{}> not closed before the next tag", tag_text(prev)),
                ));
                if prev.is_action() {
                    dangling_actions.push((start, tag.start));
                }
            } else {
                check_outside(outside_from, tag.start, &mut errors);
            }
            open = Some((name, tag.start, tag.end));
            continue;
        }
        match open {
            Some((prev, start, content_start)) if prev == name => {
                elements.push(Element {
                    name,
                    content: (content_start, tag.start),
                    span: (start, tag.end),
                });
                open = None;
                outside_from = tag.end;
            }
            _ => {
                errors.push(FormatError::new(
                    FormatErrorCode::UnclosedTag,
                    (tag.start, tag.end),
                    format!("</{}> has no matching opening tag", tag_text(name)),
                ));
                if name.is_action() {
                    dangling_actions.push((tag.start, tag.end));
                }
            }
        }
    }
    match open {
        Some((name, start, _)) => {
            errors.push(FormatError::new(
                FormatErrorCode::UnclosedTag,
                (start, chars.len()),
                format!("<{}> is never closed", tag_text(name)),
            ));
            if name.is_action() {
                dangling_actions.push((start, chars.len()));
            }
        }
        None => check_outside(outside_from, chars.len(), &mut errors),
    }

    let mut action_spans: Vec<(usize, usize)> = elements
        .iter()
        .filter(|e| e.name.is_action())
        .map(|e| e.span)
        .chain(dangling_actions)
        .collect();
    action_spans.sort_unstable();
    if action_spans.len() >= 2 {
        errors.push(FormatError::new(
            FormatErrorCode::MultipleActions,
            (action_spans[1].0, action_spans[action_spans.len() - 1].1),
            format!("{} action tags in one turn", action_spans.len()),
        ));
    } else if action_spans.is_empty() {
        errors.push(FormatError::new(
            FormatErrorCode::MissingAction,
            (0, chars.len()),
            "no action tag",
        ));
    }

    let thinks: Vec<&Element> = elements
        .iter()
        .filter(|e| e.name == TagName::Think)
        .collect();
    if thinks.len() > 1 {
        errors.push(FormatError::new(
            FormatErrorCode::BadPayload,
            thinks[1].span,
            "more than one <think> segment",
        ));
    }
    let first_action = elements.iter().find(|e| e.name.is_action());
    if let (Some(think), Some(action)) = (thinks.first(), first_action) {
        if think.span.0 > action.span.0 {
            errors.push(FormatError::new(
                FormatErrorCode::BadPayload,
                think.span,
                "<think> must precede the action",
            ));
        }
    }
    let thought = thinks
        .first()
        .map(|e| slice(e.content.0, e.content.1).trim().to_owned());

    let action = match first_action {
        Some(el) if errors.is_empty() => {
            let payload = slice(el.content.0, el.content.1);
            match parse_payload(el.name, payload.trim()) {
                Ok(a) => a,
                Err(msg) => {
                    errors.push(FormatError::new(
                        FormatErrorCode::BadPayload,
                        el.content,
                        msg,
                    ));
                    Action::Malformed { errors: Vec::new() }
                }
            }
        }
        _ => Action::Malformed { errors: Vec::new() },
    };
    let action = match action {
        Action::Malformed { .. } => Action::Malformed { errors },
        a => a,
    };
    ParsedTurn {
        thought,
        record: ActionRecord {
            action,
            raw: text.to_owned(),
        },
    }
}

fn tag_text(name: TagName) -> &'static str {
    match name {
        TagName::Think => "think",
        TagName::Search => "search",
        TagName::Select => "select",
        TagName::Bbox => "bbox",
        TagName::Answer => "answer",
    }
}

fn parse_payload(name: TagName, payload: &str) -> Result<Action, String> {
    match name {
        TagName::Search if payload.is_empty() => Err("empty search query".into()),
        TagName::Search => Ok(Action::Search {
            query: payload.to_owned(),
        }),
        TagName::Answer if payload.is_empty() => Err("empty answer".into()),
        TagName::Answer => Ok(Action::Answer {
            text: payload.to_owned(),
        }),
        TagName::Select => {
            let indices = payload
                .split(',')
                .map(|part| parse_index(part.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Action::Select { indices })
        }
        TagName::Bbox => {
            let boxes = payload
                .split(';')
                .map(|part| parse_box(part.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Action::Crop { boxes })
        }
        TagName::Think => unreachable!("think is not an action"),
    }
}

fn parse_index(s: &str) -> Result<usize, String> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("select index {s:?} is not a non-negative integer"));
    }
    s.parse()
        .map_err(|_| format!("select index {s:?} is out of range"))
}

fn parse_coord(s: &str) -> Result<i64, String> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(if s.contains('.') {
            format!("fractional coordinate {s:?}; boxes use integer pixels")
        } else {
            format!("coordinate {s:?} is not an integer")
        });
    }
    s.parse()
        .map_err(|_| format!("coordinate {s:?} is out of range"))
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let coords = s
        .split(',')
        .map(|c| parse_coord(c.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let [x1, y1, x2, y2] = coords[..] else {
        return Err(format!("box {s:?} needs exactly four coordinates"));
    };
    BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())
}

fn check_text_payload(kind: &'static str, text: &str) -> Result<(), SerializeError> {
    if text.is_empty() {
        return Err(SerializeError::Payload(kind, "empty".into()));
    }
    if text.trim() != text {
        return Err(SerializeError::Payload(
            kind,
            "leading or trailing whitespace".into(),
        ));
    }
    let chars: Vec<char> = text.chars().collect();
    if !scan_tags(&chars).is_empty() {
        return Err(SerializeError::Payload(kind, "contains a tag".into()));
    }
    Ok(())
}

/// Canonical tag text for a well-formed action.
pub fn serialize_action(action: &Action) -> Result<String, SerializeError> {
    Ok(match action {
        Action::Malformed { .. } => return Err(SerializeError::Malformed),
        Action::Search { query } => {
            check_text_payload("search", query)?;
            format!("<search>{query}</search>")
        }
        Action::Answer { text } => {
            check_text_payload("answer", text)?;
            format!("<answer>{text}</answer>")
        }
        Action::Select { indices } => {
            if indices.is_empty() {
                return Err(SerializeError::Payload("select", "no indices".into()));
            }
            let parts: Vec<String> = indices.iter().map(usize::to_string).collect();
            format!("<select>{}</select>", parts.join(","))
        }
        Action::Crop { boxes } => {
            if boxes.is_empty() {
                return Err(SerializeError::Payload("bbox", "no boxes".into()));
            }
            let parts: Vec<String> = boxes.iter().map(BBox::to_string).collect();
            format!("<bbox>{}</bbox>", parts.join(";"))
        }
    })
}

/// Serializes an action preceded by a thought segment.
pub fn serialize_turn(thought: &str, action: &Action) -> Result<String, SerializeError> {
    let body = serialize_action(action)?;
    let chars: Vec<char> = thought.chars().collect();
    if !scan_tags(&chars).is_empty() {
        return Err(SerializeError::Payload("think", "contains a tag".into()));
    }
    Ok(format!("<think>{thought}</think>{body}"))
}

/// What the environment hands back after an action.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Retrieved pages in rank order.
    Candidates(Vec<PageImage>),
    /// Selected pages plus optional layout proposals for the first of them.
    Selected {
        images: Vec<PageImage>,
        regions: Vec<BBox>,
    },
    Cropped(Vec<CroppedImage>),
    Notice(String),
}

pub fn render_observation(obs: &Observation) -> Turn {
    match obs {
        Observation::Candidates(pages) if pages.is_empty() => Turn::user(NO_RESULTS),
        Observation::Candidates(pages) => {
            let lines: Vec<String> = pages
                .iter()
                .enumerate()
                .map(|(i, p)| format!("Image [{i}]: {}", p.doc_id))
                .collect();
            Turn::user_with_images(lines.join("\n"), pages.clone())
        }
        Observation::Selected { images, regions } => {
            let mut lines: Vec<String> = images
                .iter()
                .map(|p| format!("Selected image: {}", p.doc_id))
                .collect();
            if let (Some(first), false) = (images.first(), regions.is_empty()) {
                lines.push(format!("Candidate regions for {}:", first.doc_id));
                lines.extend(
                    regions
                        .iter()
                        .enumerate()
                        .map(|(i, b)| format!("Region [{i}]: {b}")),
                );
            }
            Turn::user_with_images(lines.join("\n"), images.clone())
        }
        Observation::Cropped(crops) => {
            let lines: Vec<String> = crops
                .iter()
                .map(|c| format!("Cropped region of {}", c.source_doc_id))
                .collect();
            let images = crops.iter().map(|c| c.image.clone()).collect();
            Turn::user_with_images(lines.join("\n"), images)
        }
        Observation::Notice(text) => Turn::user(text.clone()),
    }
}
