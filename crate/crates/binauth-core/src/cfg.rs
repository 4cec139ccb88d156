//! Program intermediate representation: control-flow graphs of opcode-level
//! basic blocks, loaded from the CFG-JSON interchange format, plus corpus
//! manifests.
//!
//! CFG-JSON is one binary per UTF-8 file:
//!
//! ```json
//! {"binary_id": "b1",
//!  "functions": [{"name": "f",
//!                 "blocks": [{"id": 0, "opcodes": ["mov", "add"]}],
//!                 "edges": [[0, 0]]}]}
//! ```
//!
//! Ingestion canonicalizes mnemonics (ASCII lower-case, trimmed), drops empty
//! padding blocks together with their edges, and deduplicates edges. Loading
//! is pure; a loaded [`Cfg`] is immutable and safe to share across threads.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CfgError {
    #[error("malformed input {path}: {reason}")]
    MalformedInput { path: String, reason: String },
    #[error("empty program {path}: no non-empty basic block survives ingestion")]
    EmptyProgram { path: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CfgError {
    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        CfgError::MalformedInput { path: path.display().to_string(), reason: reason.into() }
    }
}

/// A basic block: its id (unique within the function) and the canonicalized
/// opcode mnemonics it executes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: u64,
    pub opcodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<(u64, u64)>,
}

/// One disassembled binary as intra-procedural flow graphs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cfg {
    pub binary_id: String,
    pub functions: Vec<Function>,
}

impl Cfg {
    pub fn block_count(&self) -> usize {
        self.functions.iter().map(|f| f.blocks.len()).sum()
    }

    pub fn edge_count(&self) -> usize {
        self.functions.iter().map(|f| f.edges.len()).sum()
    }

    pub fn opcode_count(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| &f.blocks)
            .map(|b| b.opcodes.len())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("Cfg serialization cannot fail")
    }
}

/// Load and validate one CFG-JSON file.
///
/// Blocks that end up with no opcodes are dropped along with every edge that
/// touches them; edge and block order is otherwise preserved from the file.
pub fn load_cfg(path: &Path) -> Result<Cfg, CfgError> {
    if !path.exists() {
        return Err(CfgError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)
        .map_err(|source| CfgError::Io { path: path.display().to_string(), source })?;
    parse_cfg(&text, path)
}

/// Same as [`load_cfg`] but over an in-memory JSON document; `origin` is only
/// used in error messages.
pub fn parse_cfg(text: &str, origin: &Path) -> Result<Cfg, CfgError> {
    let raw: Cfg = serde_json::from_str(text)
        .map_err(|e| CfgError::malformed(origin, format!("schema violation: {e}")))?;

    let mut functions = Vec::with_capacity(raw.functions.len());
    for func in raw.functions {
        let mut seen = HashSet::new();
        for block in &func.blocks {
            if !seen.insert(block.id) {
                return Err(CfgError::malformed(
                    origin,
                    format!("duplicate block id {} in function {:?}", block.id, func.name),
                ));
            }
        }

        let mut blocks = Vec::with_capacity(func.blocks.len());
        let mut kept: HashSet<u64> = HashSet::new();
        for block in func.blocks {
            let mut opcodes = Vec::with_capacity(block.opcodes.len());
            for op in block.opcodes {
                let canon = op.trim().to_ascii_lowercase();
                if canon.is_empty() {
                    return Err(CfgError::malformed(
                        origin,
                        format!("blank mnemonic in block {} of {:?}", block.id, func.name),
                    ));
                }
                if !canon.is_ascii() {
                    return Err(CfgError::malformed(
                        origin,
                        format!("non-ASCII mnemonic {canon:?} in block {}", block.id),
                    ));
                }
                opcodes.push(canon);
            }
            if opcodes.is_empty() {
                continue; // padding/alignment block
            }
            kept.insert(block.id);
            blocks.push(BasicBlock { id: block.id, opcodes });
        }

        let mut edges = Vec::with_capacity(func.edges.len());
        let mut seen_edges = HashSet::new();
        for (src, dst) in func.edges {
            if !seen.contains(&src) || !seen.contains(&dst) {
                return Err(CfgError::malformed(
                    origin,
                    format!("edge ({src}, {dst}) references unknown block in {:?}", func.name),
                ));
            }
            if !(kept.contains(&src) && kept.contains(&dst)) {
                continue; // dangling after empty-block removal
            }
            if seen_edges.insert((src, dst)) {
                edges.push((src, dst));
            }
        }
        functions.push(Function { name: func.name, blocks, edges });
    }

    let cfg = Cfg { binary_id: raw.binary_id, functions };
    if cfg.block_count() == 0 {
        return Err(CfgError::EmptyProgram { path: origin.display().to_string() });
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Pretrain,
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthorSamples {
    pub author_id: String,
    pub samples: Vec<PathBuf>,
}

/// Per-role listing of authors and their CFG-JSON sample files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub role: CorpusRole,
    pub authors: Vec<AuthorSamples>,
}

impl CorpusManifest {
    pub fn author_ids(&self) -> Vec<&str> {
        self.authors.iter().map(|a| a.author_id.as_str()).collect()
    }
}

/// Load a manifest; relative sample paths are resolved against the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, CfgError> {
    if !path.exists() {
        return Err(CfgError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)
        .map_err(|source| CfgError::Io { path: path.display().to_string(), source })?;
    let mut manifest: CorpusManifest = serde_json::from_str(&text)
        .map_err(|e| CfgError::malformed(path, format!("schema violation: {e}")))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for author in &mut manifest.authors {
        for sample in &mut author.samples {
            if sample.is_relative() {
                *sample = base.join(&sample);
            }
        }
    }
    Ok(manifest)
}

/// Check a manifest and return the per-author sample counts. Zero-sample
/// authors are legal; they simply show up with a zero count.
pub fn validate_manifest(manifest: &CorpusManifest) -> Result<Vec<(String, usize)>, CfgError> {
    let mut seen = HashSet::new();
    let mut counts = Vec::with_capacity(manifest.authors.len());
    for author in &manifest.authors {
        if !seen.insert(author.author_id.as_str()) {
            return Err(CfgError::MalformedInput {
                path: "<manifest>".into(),
                reason: format!("duplicate author_id {:?}", author.author_id),
            });
        }
        for sample in &author.samples {
            if !sample.exists() {
                return Err(CfgError::MissingFile(sample.clone()));
            }
        }
        counts.push((author.author_id.clone(), author.samples.len()));
    }
    Ok(counts)
}
