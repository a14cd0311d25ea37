//! BIO chunk semantics.
//!
//! Suffix notation (`Answer-B`, `BDObject-I`) is the default; prefix notation
//! (`B-LOC`, `I-LOC`) and plain labels (every non-`O` token is its own
//! one-word chunk) are selectable per corpus.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ChunkScheme {
    #[default]
    Suffix,
    Prefix,
    Plain,
}

impl FromStr for ChunkScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suffix" => Ok(ChunkScheme::Suffix),
            "prefix" => Ok(ChunkScheme::Prefix),
            "plain" => Ok(ChunkScheme::Plain),
            other => Err(Error::config(format!("unknown chunk scheme {other:?}"))),
        }
    }
}

impl fmt::Display for ChunkScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChunkScheme::Suffix => "suffix",
            ChunkScheme::Prefix => "prefix",
            ChunkScheme::Plain => "plain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
    /// Plain-scheme label: a chunk of its own.
    Single(&'a str),
}

pub fn parse_tag(label: &str, scheme: ChunkScheme) -> Result<Tag<'_>> {
    if label == OUTSIDE {
        return Ok(Tag::Outside);
    }
    let malformed = || Error::data(format!("malformed {scheme} BIO label {label:?}"));
    let tag = match scheme {
        ChunkScheme::Plain => Tag::Single(label),
        ChunkScheme::Suffix => {
            let (concept, mark) = label.rsplit_once('-').ok_or_else(malformed)?;
            match mark {
                "B" => Tag::Begin(concept),
                "I" => Tag::Inside(concept),
                _ => return Err(malformed()),
            }
        }
        ChunkScheme::Prefix => {
            let (mark, concept) = label.split_once('-').ok_or_else(malformed)?;
            match mark {
                "B" => Tag::Begin(concept),
                "I" => Tag::Inside(concept),
                _ => return Err(malformed()),
            }
        }
    };
    match tag {
        Tag::Begin("") | Tag::Inside("") | Tag::Single("") => Err(malformed()),
        t => Ok(t),
    }
}

/// A labeled span, `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Chunk {
            label: label.into(),
            start,
            end,
        }
    }
}

/// Chunks plus the number of times an `I` without a matching open chunk
/// had to start a new chunk.
pub fn chunks_with_repairs<S: AsRef<str>>(labels: &[S], scheme: ChunkScheme) -> Result<(Vec<Chunk>, usize)> {
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut open: Option<usize> = None;
    let mut repairs = 0;
    for (i, label) in labels.iter().enumerate() {
        match parse_tag(label.as_ref(), scheme)? {
            Tag::Outside => open = None,
            Tag::Begin(c) | Tag::Single(c) => {
                chunks.push(Chunk::new(c, i, i));
                open = matches!(scheme, ChunkScheme::Suffix | ChunkScheme::Prefix).then_some(chunks.len() - 1);
            }
            Tag::Inside(c) => match open {
                Some(k) if chunks[k].label == c => chunks[k].end = i,
                _ => {
                    repairs += 1;
                    chunks.push(Chunk::new(c, i, i));
                    open = Some(chunks.len() - 1);
                }
            },
        }
    }
    Ok((chunks, repairs))
}

pub fn chunks_from_labels<S: AsRef<str>>(labels: &[S], scheme: ChunkScheme) -> Result<Vec<Chunk>> {
    chunks_with_repairs(labels, scheme).map(|(c, _)| c)
}

/// Counts `X-I` labels whose predecessor is not `X-B`/`X-I` (sentence start
/// counts as a non-`X` predecessor). Returns `(invalid, positions)`.
pub fn invalid_transitions<S: AsRef<str>>(labels: &[S], scheme: ChunkScheme) -> Result<(usize, usize)> {
    let mut invalid = 0;
    let mut prev: Option<String> = None;
    for label in labels {
        let tag = parse_tag(label.as_ref(), scheme)?;
        if let Tag::Inside(c) = tag {
            if prev.as_deref() != Some(c) {
                invalid += 1;
            }
        }
        prev = match tag {
            Tag::Begin(c) | Tag::Inside(c) => Some(c.to_string()),
            _ => None,
        };
    }
    Ok((invalid, labels.len()))
}
