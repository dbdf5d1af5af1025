//! Text model files.
//!
//! ```text
//! shardlearn-model v1 bits=<b>
//! <index> <value>      one line per weight whose bits are not all zero
//! end
//! ```
//!
//! Values use the shortest exponent form that parses back to the same
//! `f64`. The closing `end` line makes truncation detectable.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use shardlearn::topology::Topology;
use shardlearn::WeightModel;

pub const MODEL_MAGIC: &str = "shardlearn-model";
pub const TREE_MAGIC: &str = "shardlearn-tree";
pub const VERSION: &str = "v1";

pub fn model_to_string(m: &WeightModel) -> String {
    let mut s = format!("{MODEL_MAGIC} {VERSION} bits={}\n", m.bits());
    for (i, w) in m.weights().iter().enumerate() {
        if w.to_bits() != 0 {
            let _ = writeln!(s, "{i} {w:e}");
        }
    }
    s.push_str("end\n");
    s
}

pub fn model_from_str(text: &str) -> Result<WeightModel> {
    let mut lines = text.lines();
    let header = lines.next().context("empty model file")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MODEL_MAGIC) {
        bail!("not a model file: bad header {header:?}");
    }
    match parts.next() {
        Some(VERSION) => {}
        Some(v) => bail!("unsupported model version {v:?} (expected {VERSION})"),
        None => bail!("model header has no version"),
    }
    let bits: u32 = parts
        .next()
        .and_then(|b| b.strip_prefix("bits="))
        .context("model header has no bits= field")?
        .parse()
        .context("model header has a malformed bits= field")?;
    if parts.next().is_some() {
        bail!("trailing fields in model header {header:?}");
    }
    let mut model = WeightModel::new(bits)?;
    let mut last: Option<usize> = None;
    let mut ended = false;
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if ended {
            bail!("line {lineno}: data after end marker");
        }
        if line == "end" {
            ended = true;
            continue;
        }
        let (i, v) = line.split_once(' ').with_context(|| format!("line {lineno}: expected `index value`"))?;
        let i: usize = i.parse().with_context(|| format!("line {lineno}: bad index {i:?}"))?;
        let v: f64 = v.parse().with_context(|| format!("line {lineno}: bad value {v:?}"))?;
        if i >= model.len() {
            bail!("line {lineno}: index {i} out of range for bits={bits}");
        }
        if last.is_some_and(|l| l >= i) {
            bail!("line {lineno}: indices must increase");
        }
        last = Some(i);
        model.weights_mut()[i] = v;
    }
    if !ended {
        bail!("model file truncated: missing end marker");
    }
    Ok(model)
}

pub fn save_model(path: &Path, m: &WeightModel) -> Result<()> {
    fs::write(path, model_to_string(m)).with_context(|| format!("writing model {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<WeightModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    model_from_str(&text).with_context(|| format!("loading model {}", path.display()))
}

/// Path of node `id`'s weights next to a tree manifest.
pub fn node_path(path: &Path, id: usize) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{id}"));
    s.into()
}

/// Writes the topology to `path` and each node's weights to `path.<id>`.
pub fn save_tree(path: &Path, topo: &Topology, models: &[&WeightModel]) -> Result<()> {
    let manifest = format!("{TREE_MAGIC} {VERSION} nodes={}\n{}", models.len(), topo.to_text());
    fs::write(path, manifest).with_context(|| format!("writing {}", path.display()))?;
    for (id, m) in models.iter().enumerate() {
        save_model(&node_path(path, id), m)?;
    }
    Ok(())
}
