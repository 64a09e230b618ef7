//! Line-oriented text formats shared by the store and the CLI.
//!
//! * metadata rows: `id \t source \t text`, with `\\`, `\t`, `\n` and `\r`
//!   escaped inside every field;
//! * vector rows: whitespace- or comma-separated decimals, one vector per line;
//! * query rows: `id \t vector`.

use std::fmt::Write as _;

use crate::embedding::{normalize, Embedding};
use crate::error::{Error, Result};

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// One parsed metadata row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaRow {
    pub id: String,
    pub source: String,
    pub text: String,
}

pub fn format_meta_row(id: &str, source: &str, text: &str) -> String {
    format!(
        "{}\t{}\t{}\n",
        escape_field(id),
        escape_field(source),
        escape_field(text)
    )
}

pub fn parse_meta(content: &str) -> Result<Vec<MetaRow>> {
    content
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let parse_err = |reason: String| Error::Parse { line: i + 1, reason };
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(source), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err("expected 3 tab-separated fields: id, source, text".into()));
            };
            Ok(MetaRow {
                id: unescape_field(id).map_err(&parse_err)?,
                source: unescape_field(source).map_err(&parse_err)?,
                text: unescape_field(text).map_err(&parse_err)?,
            })
        })
        .collect()
}

fn parse_numbers(s: &str) -> std::result::Result<Vec<f32>, String> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f32>().map_err(|e| format!("bad number {t:?}: {e}")))
        .collect()
}

/// Parse one vector per non-blank line.
pub fn parse_vectors(content: &str) -> Result<Vec<Vec<f32>>> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_numbers(l).map_err(|reason| Error::Parse { line: i + 1, reason }))
        .collect()
}

pub fn format_vector(v: &[f32]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

/// Parse `id \t vector` rows, normalizing each vector.
pub fn parse_queries(content: &str) -> Result<Vec<(String, Embedding)>> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let line_no = i + 1;
            let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                reason: "expected `id<TAB>vector`".into(),
            })?;
            let id = unescape_field(id).map_err(|reason| Error::Parse { line: line_no, reason })?;
            let v = parse_numbers(rest).map_err(|reason| Error::Parse { line: line_no, reason })?;
            let e = normalize(&v).map_err(|e| Error::record(id.clone(), e))?;
            Ok((id, e))
        })
        .collect()
}

pub fn format_query(id: &str, v: &[f32]) -> String {
    format!("{}\t{}\n", escape_field(id), format_vector(v))
}
