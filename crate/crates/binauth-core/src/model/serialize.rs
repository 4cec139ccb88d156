//! Versioned checkpoint format.
//!
//! Layout: magic `BMLM1`, then seven little-endian u32 dims
//! (vocab, embed, hidden, encoders, authors, ngram, hop), then the parameter
//! blocks as little-endian f64 in fixed order: embedding, encoders 0..s-1
//! (w_ih, w_hh, bias each), per-author gates (w, b), per-author decoders
//! (w, b). A sidecar JSON next to the file (`<path>.json`) carries the author
//! order, the vocabulary token list in id order, and the gate mode.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Affine, LstmParams, Tensor2};
use crate::trace::Vocabulary;

use super::{GateMode, ModelDims, MosModel, PretrainModel};

const MAGIC: &[u8; 5] = b"BMLM1";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed model file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

impl ModelIoError {
    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        Self::Malformed { path: path.display().to_string(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub authors: Vec<String>,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub gate_mode: GateMode,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn write_u32s<W: Write>(w: &mut W, values: &[u32]) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serialize the parameter stream; the sidecar is written separately.
pub fn write_mos<W: Write>(w: &mut W, model: &MosModel) -> io::Result<()> {
    let d = &model.dims;
    w.write_all(MAGIC)?;
    write_u32s(
        w,
        &[
            d.vocab as u32,
            d.embed as u32,
            d.hidden as u32,
            d.encoders as u32,
            d.authors as u32,
            d.ngram as u32,
            d.hop as u32,
        ],
    )?;
    write_f64s(w, model.embedding.data())?;
    for enc in &model.encoders {
        write_f64s(w, enc.w_ih.data())?;
        write_f64s(w, enc.w_hh.data())?;
        write_f64s(w, &enc.bias)?;
    }
    for gate in &model.gates {
        write_f64s(w, gate.w.data())?;
        write_f64s(w, &gate.b)?;
    }
    for dec in &model.decoders {
        write_f64s(w, dec.w.data())?;
        write_f64s(w, &dec.b)?;
    }
    Ok(())
}

/// Deserialize a parameter stream; author order and gate mode come from the
/// sidecar.
pub fn read_mos<R: Read>(r: &mut R, sidecar: &Sidecar, origin: &Path) -> Result<MosModel, ModelIoError> {
    let wrap = |source: io::Error| ModelIoError::Io { path: origin.display().to_string(), source };
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(wrap)?;
    if &magic != MAGIC {
        return Err(ModelIoError::malformed(origin, "bad magic"));
    }
    let vocab = read_u32(r).map_err(wrap)? as usize;
    let embed = read_u32(r).map_err(wrap)? as usize;
    let hidden = read_u32(r).map_err(wrap)? as usize;
    let encoders = read_u32(r).map_err(wrap)? as usize;
    let authors = read_u32(r).map_err(wrap)? as usize;
    let ngram = read_u32(r).map_err(wrap)? as usize;
    let hop = read_u32(r).map_err(wrap)? as usize;
    let dims = ModelDims { vocab, embed, hidden, encoders, authors, ngram, hop };

    if sidecar.authors.len() != authors {
        return Err(ModelIoError::malformed(
            origin,
            format!("sidecar lists {} authors, header says {authors}", sidecar.authors.len()),
        ));
    }
    if sidecar.vocab.len() != vocab {
        return Err(ModelIoError::malformed(
            origin,
            format!("sidecar lists {} tokens, header says {vocab}", sidecar.vocab.len()),
        ));
    }

    let tensor = |r: &mut R, rows: usize, cols: usize| -> Result<Tensor2, ModelIoError> {
        let data = read_f64s(r, rows * cols).map_err(wrap)?;
        Tensor2::from_vec(rows, cols, data)
            .map_err(|e| ModelIoError::malformed(origin, e.to_string()))
    };

    let embedding = tensor(r, vocab, embed)?;
    let mut encs = Vec::with_capacity(encoders);
    for _ in 0..encoders {
        let w_ih = tensor(r, 4 * hidden, embed)?;
        let w_hh = tensor(r, 4 * hidden, hidden)?;
        let bias = read_f64s(r, 4 * hidden).map_err(wrap)?;
        encs.push(LstmParams { w_ih, w_hh, bias });
    }
    let gate_dim = sidecar.gate_mode.gate_dim(encoders, hidden);
    let mut gates = Vec::with_capacity(authors);
    for _ in 0..authors {
        let w = tensor(r, gate_dim, embed)?;
        let b = read_f64s(r, gate_dim).map_err(wrap)?;
        gates.push(Affine { w, b });
    }
    let mut decoders = Vec::with_capacity(authors);
    for _ in 0..authors {
        let w = tensor(r, vocab, hidden)?;
        let b = read_f64s(r, vocab).map_err(wrap)?;
        decoders.push(Affine { w, b });
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(wrap)? != 0 {
        return Err(ModelIoError::malformed(origin, "trailing bytes after parameter blocks"));
    }

    Ok(MosModel {
        dims,
        gate_mode: sidecar.gate_mode,
        embedding,
        encoders: encs,
        gates,
        decoders,
        author_ids: sidecar.authors.clone(),
    })
}

pub fn save_mos(path: &Path, model: &MosModel, vocab: &Vocabulary) -> Result<(), ModelIoError> {
    let wrap = |source: io::Error| ModelIoError::Io { path: path.display().to_string(), source };
    if vocab.size() != model.dims.vocab {
        return Err(ModelIoError::malformed(path, "vocabulary size does not match model"));
    }
    let mut bytes = Vec::new();
    write_mos(&mut bytes, model).map_err(wrap)?;
    fs::write(path, bytes).map_err(wrap)?;
    let sidecar = Sidecar {
        authors: model.author_ids.clone(),
        vocab: vocab.tokens().to_vec(),
        gate_mode: model.gate_mode,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialization");
    fs::write(sidecar_path(path), json).map_err(wrap)?;
    Ok(())
}

pub fn load_mos(path: &Path) -> Result<(MosModel, Vocabulary), ModelIoError> {
    let wrap = |source: io::Error| ModelIoError::Io { path: path.display().to_string(), source };
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path)
        .map_err(|source| ModelIoError::Io { path: side_path.display().to_string(), source })?;
    let sidecar: Sidecar = serde_json::from_str(&side_text)
        .map_err(|e| ModelIoError::malformed(&side_path, e.to_string()))?;
    let bytes = fs::read(path).map_err(wrap)?;
    let model = read_mos(&mut bytes.as_slice(), &sidecar, path)?;
    Ok((model, Vocabulary::from_tokens(sidecar.vocab)))
}

/// A pre-training model is stored as a one-encoder, one-author container with
/// a zeroed gate block.
fn pretrain_to_container(model: &PretrainModel) -> MosModel {
    let dims = ModelDims { encoders: 1, authors: 1, ..model.dims };
    MosModel {
        dims,
        gate_mode: GateMode::PerEncoder,
        embedding: model.embedding.clone(),
        encoders: vec![model.encoder.clone()],
        gates: vec![Affine::zeros(dims.embed, 1)],
        decoders: vec![model.decoder.clone()],
        author_ids: vec!["<pretrain>".to_string()],
    }
}

fn pretrain_from_container(container: MosModel, origin: &Path) -> Result<PretrainModel, ModelIoError> {
    if container.dims.encoders != 1 || container.dims.authors != 1 {
        return Err(ModelIoError::malformed(origin, "not a pre-training checkpoint"));
    }
    let MosModel { dims, embedding, mut encoders, mut decoders, .. } = container;
    Ok(PretrainModel {
        dims,
        embedding,
        encoder: encoders.remove(0),
        decoder: decoders.remove(0),
    })
}

pub fn write_pretrain<W: Write>(w: &mut W, model: &PretrainModel) -> io::Result<()> {
    write_mos(w, &pretrain_to_container(model))
}

pub fn read_pretrain<R: Read>(
    r: &mut R,
    sidecar: &Sidecar,
    origin: &Path,
) -> Result<PretrainModel, ModelIoError> {
    pretrain_from_container(read_mos(r, sidecar, origin)?, origin)
}

pub fn save_pretrain(
    path: &Path,
    model: &PretrainModel,
    vocab: &Vocabulary,
) -> Result<(), ModelIoError> {
    save_mos(path, &pretrain_to_container(model), vocab)
}

pub fn load_pretrain(path: &Path) -> Result<(PretrainModel, Vocabulary), ModelIoError> {
    let (container, vocab) = load_mos(path)?;
    Ok((pretrain_from_container(container, path)?, vocab))
}
