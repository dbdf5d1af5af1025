//! Text instance format, interaction expansion, and streaming input.
//!
//! One instance per line:
//!
//! ```text
//! <label> |<namespace> <feature>[:<value>] ... |<namespace> ...
//! ```
//!
//! A missing value means 1.0. Namespace names follow `|` directly; a `|`
//! followed by whitespace opens the unnamed namespace `""`.

use std::collections::HashSet;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::hash::{hash_feature, hash_pair, MAX_BITS};
use crate::sparse::SparseVector;

#[derive(Debug, Clone, PartialEq)]
pub struct Namespace {
    pub name: String,
    pub features: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub label: f64,
    pub namespaces: Vec<Namespace>,
}

impl Instance {
    pub fn namespace(&self, name: &str) -> Option<&Namespace> {
        self.namespaces.iter().find(|ns| ns.name == name)
    }
}

/// Namespace pairs whose outer product is added as features.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionSpec {
    pairs: Vec<(String, String)>,
}

impl InteractionSpec {
    pub fn new<A: Into<String>, B: Into<String>>(pairs: impl IntoIterator<Item = (A, B)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (a, b) in pairs {
            let pair = (a.into(), b.into());
            if !seen.insert(pair.clone()) {
                return Err(Error::config(format!("duplicate interaction pair ({}, {})", pair.0, pair.1)));
            }
            out.push(pair);
        }
        Ok(InteractionSpec { pairs: out })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Whitespace-separated tokens with their byte offsets.
fn tokens(s: &str, base: usize) -> impl Iterator<Item = (usize, &str)> {
    s.split_ascii_whitespace().map(move |tok| {
        let off = tok.as_ptr() as usize - s.as_ptr() as usize;
        (base + off, tok)
    })
}

pub fn parse_instance(line: &str, id: u64) -> Result<Instance> {
    if line.trim().is_empty() {
        return Err(parse_err(0, "empty line"));
    }
    let mut sections = line.split('|');
    let head = sections.next().unwrap_or("");
    let mut head_tokens = tokens(head, 0);
    let (label_off, label_tok) =
        head_tokens.next().ok_or_else(|| parse_err(0, "missing label"))?;
    let label: f64 = label_tok
        .parse()
        .map_err(|_| parse_err(label_off, format!("malformed label {label_tok:?}")))?;
    if !label.is_finite() {
        return Err(parse_err(label_off, "label must be finite"));
    }
    if let Some((off, tok)) = head_tokens.next() {
        return Err(parse_err(off, format!("unexpected token {tok:?} before first namespace")));
    }

    let mut namespaces = Vec::new();
    let mut offset = head.len() + 1;
    for section in sections {
        let (name, rest, rest_off) = match section.find(|c: char| c.is_ascii_whitespace()) {
            Some(pos) => (&section[..pos], &section[pos..], offset + pos),
            None => (section, "", offset + section.len()),
        };
        let mut features = Vec::new();
        for (off, tok) in tokens(rest, rest_off) {
            let (fname, value) = match tok.rfind(':') {
                Some(pos) => {
                    let vstr = &tok[pos + 1..];
                    let v: f64 = vstr.parse().map_err(|_| {
                        parse_err(off + pos + 1, format!("non-numeric feature value {vstr:?}"))
                    })?;
                    if !v.is_finite() {
                        return Err(parse_err(off + pos + 1, "feature value must be finite"));
                    }
                    (&tok[..pos], v)
                }
                None => (tok, 1.0),
            };
            if fname.is_empty() {
                return Err(parse_err(off, "empty feature name"));
            }
            features.push((fname.to_string(), value));
        }
        namespaces.push(Namespace { name: name.to_string(), features });
        offset += section.len() + 1;
    }
    if namespaces.is_empty() {
        return Err(parse_err(line.len(), "expected at least one '|' namespace"));
    }
    Ok(Instance { id, label, namespaces })
}

/// Hashes base features and the requested cross features into one vector.
///
/// Colliding indices have their values summed. Pairs naming an absent
/// namespace contribute nothing.
pub fn expand_and_hash(inst: &Instance, q: &InteractionSpec, bits: u32) -> Result<SparseVector> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::config(format!("bits must be in 1..={MAX_BITS}, got {bits}")));
    }
    let mut raw = Vec::new();
    for ns in &inst.namespaces {
        for (name, v) in &ns.features {
            raw.push((hash_feature(&ns.name, name, bits), *v));
        }
    }
    for (a, b) in q.pairs() {
        let (Some(ns_a), Some(ns_b)) = (inst.namespace(a), inst.namespace(b)) else {
            continue;
        };
        for (fa, va) in &ns_a.features {
            for (fb, vb) in &ns_b.features {
                raw.push((hash_pair(a, fa, b, fb, bits), va * vb));
            }
        }
    }
    Ok(SparseVector::from_unsorted(raw))
}

/// Line-at-a-time instance reader. Ids start at 1; the iterator stops after
/// the first error.
pub struct InstanceStream<R> {
    reader: R,
    buf: String,
    next_id: u64,
    line_no: u64,
    done: bool,
}

impl<R: BufRead> InstanceStream<R> {
    pub fn new(reader: R) -> Self {
        InstanceStream { reader, buf: String::new(), next_id: 1, line_no: 0, done: false }
    }
}

impl<R: BufRead> Iterator for InstanceStream<R> {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.buf.clear();
        match self.reader.read_line(&mut self.buf) {
            Ok(0) => {
                self.done = true;
                None
            }
            Ok(_) => {
                self.line_no += 1;
                let line = self.buf.strip_suffix('\n').unwrap_or(&self.buf);
                match parse_instance(line, self.next_id) {
                    Ok(inst) => {
                        self.next_id += 1;
                        Some(Ok(inst))
                    }
                    Err(e) => {
                        self.done = true;
                        Some(Err(Error::Stream { line: self.line_no, source: Box::new(e) }))
                    }
                }
            }
            Err(e) => {
                self.done = true;
                Some(Err(Error::Io(e)))
            }
        }
    }
}

/// Opens a file, or stdin for `-`.
pub fn open_stream(path: &str) -> Result<InstanceStream<Box<dyn BufRead>>> {
    let reader: Box<dyn BufRead> = if path == "-" {
        Box::new(std::io::BufReader::new(std::io::stdin()))
    } else {
        Box::new(std::io::BufReader::new(std::fs::File::open(path)?))
    };
    Ok(InstanceStream::new(reader))
}
