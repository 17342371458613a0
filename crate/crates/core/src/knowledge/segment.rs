//! Structural segmentation of maintenance documents.
//!
//! Sections start at Markdown headings (`## Title`) or numbered headings
//! (`3.2 Title`). Headings inside fenced code blocks are ignored. A section
//! over the token limit is bisected recursively, cutting at the paragraph,
//! line, whitespace or character boundary closest to its middle, in that
//! order of preference. Chunk contents are exact slices of the input, so
//! concatenating them reproduces the document.

use std::sync::OnceLock;

use regex::Regex;

use super::{DocumentChunk, KnowledgeError};
use crate::tokens;

pub const MIN_CHUNK_TOKENS: usize = 64;

fn markdown_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(#{1,6})[ \t]+(.+?)[ \t#]*$").expect("valid regex"))
}

fn numbered_heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d{1,2}(?:\.\d{1,2})*)\.?[ \t]+([A-Z][^\n]{0,78})$").expect("valid regex"))
}

/// `(level, title)` when `line` is a heading.
fn heading(line: &str) -> Option<(usize, String)> {
    let line = line.trim_end_matches(['\n', '\r']);
    if let Some(c) = markdown_heading().captures(line) {
        return Some((c[1].len(), c[2].trim().to_string()));
    }
    let c = numbered_heading().captures(line)?;
    let title = c[2].trim();
    // Sentences in numbered lists end with punctuation; headings do not.
    if title.ends_with(['.', ':', ';', ',', '?', '!']) {
        return None;
    }
    Some((c[1].split('.').count(), title.to_string()))
}

struct Section {
    start: usize,
    end: usize,
    path: Vec<String>,
}

fn sections(source: &str, doc: &str) -> Vec<Section> {
    let mut starts: Vec<(usize, Vec<String>)> = Vec::new();
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut in_fence = false;
    let mut offset = 0;
    for line in doc.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") || trimmed.starts_with("~~~") {
            in_fence = !in_fence;
        } else if !in_fence {
            if let Some((level, title)) = heading(line) {
                while stack.last().is_some_and(|(l, _)| *l >= level) {
                    stack.pop();
                }
                stack.push((level, title));
                starts.push((offset, stack.iter().map(|(_, t)| t.clone()).collect()));
            }
        }
        offset += line.len();
    }
    if starts.is_empty() {
        return Vec::new();
    }
    // Text before the first heading becomes its own section unless it is
    // only whitespace, in which case it is glued to the first section.
    if starts[0].0 > 0 {
        if doc[..starts[0].0].trim().is_empty() {
            starts[0].0 = 0;
        } else {
            starts.insert(0, (0, vec![source.to_string()]));
        }
    }
    let mut out = Vec::new();
    for (i, (start, path)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(doc.len(), |(s, _)| *s);
        out.push(Section {
            start: *start,
            end,
            path: path.clone(),
        });
    }
    out
}

fn floor_boundary(text: &str, mut i: usize) -> usize {
    while !text.is_char_boundary(i) {
        i -= 1;
    }
    i
}

/// Cut position strictly inside `text`, nearest to the middle, preferring
/// coarser separators. Candidates for the coarse separators must fall in the
/// middle half so that the recursion stays balanced.
fn cut_point(text: &str) -> usize {
    let len = text.len();
    let mid = floor_boundary(text, len / 2);
    let (lo, hi) = (len / 4, len - len / 4);
    let nearest = |positions: Vec<usize>| -> Option<usize> {
        positions
            .into_iter()
            .filter(|&p| p > 0 && p < len && p >= lo && p <= hi)
            .min_by_key(|&p| (p.abs_diff(mid), p))
    };
    let after = |pat: &str| -> Vec<usize> { text.match_indices(pat).map(|(i, m)| i + m.len()).collect() };
    if let Some(p) = nearest(after("\n\n")) {
        return p;
    }
    if let Some(p) = nearest(after("\n")) {
        return p;
    }
    let spaces: Vec<usize> = text
        .char_indices()
        .filter(|(_, c)| c.is_whitespace())
        .map(|(i, c)| i + c.len_utf8())
        .collect();
    if let Some(p) = nearest(spaces) {
        return p;
    }
    if mid > 0 {
        mid
    } else {
        // Single multi-byte character at the front: cut after it.
        text.char_indices().nth(1).map_or(len, |(i, _)| i)
    }
}

fn bisect(text: &str, base: usize, max_tokens: usize, out: &mut Vec<(usize, usize)>) {
    if tokens::estimate(text) <= max_tokens || text.chars().count() <= 1 {
        out.push((base, base + text.len()));
        return;
    }
    let cut = cut_point(text);
    bisect(&text[..cut], base, max_tokens, out);
    bisect(&text[cut..], base + cut, max_tokens, out);
}

fn fixed_windows(doc: &str, max_tokens: usize) -> Vec<(usize, usize)> {
    let budget = tokens::char_budget(max_tokens);
    let mut out = Vec::new();
    let mut start = 0;
    let mut count = 0;
    for (i, _) in doc.char_indices() {
        if count == budget {
            out.push((start, i));
            start = i;
            count = 0;
        }
        count += 1;
    }
    if start < doc.len() {
        out.push((start, doc.len()));
    }
    out
}

/// Splits `doc` into chunks of at most `max_chunk_tokens` estimated tokens.
pub fn segment_document(
    source: &str,
    doc: &str,
    max_chunk_tokens: usize,
) -> Result<Vec<DocumentChunk>, KnowledgeError> {
    if max_chunk_tokens < MIN_CHUNK_TOKENS {
        return Err(KnowledgeError::ChunkLimit(max_chunk_tokens));
    }
    if doc.trim().is_empty() {
        return Err(KnowledgeError::EmptyDocument(source.to_string()));
    }
    let mut pieces: Vec<(usize, usize, Vec<String>)> = Vec::new();
    let structured = sections(source, doc);
    let fixed = structured.is_empty();
    if fixed {
        for (s, e) in fixed_windows(doc, max_chunk_tokens) {
            pieces.push((s, e, vec![source.to_string()]));
        }
    } else {
        for section in structured {
            let mut spans = Vec::new();
            bisect(&doc[section.start..section.end], section.start, max_chunk_tokens, &mut spans);
            for (s, e) in spans {
                pieces.push((s, e, section.path.clone()));
            }
        }
    }
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(i, (s, e, path))| {
            let content = doc[s..e].to_string();
            DocumentChunk {
                id: format!("{source}#{i}"),
                source_document: source.to_string(),
                section_path: path,
                token_estimate: tokens::estimate(&content),
                content,
                summary: None,
                fixed_window: fixed,
            }
        })
        .collect())
}
