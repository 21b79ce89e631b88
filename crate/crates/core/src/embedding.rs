// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt embeddings, EOS deltas and delta sets.
//!
//! Embeddings are consumed pre-computed. A fixture is a JSON manifest
//!
//! ```json
//! {"d": 768, "prompts": [{"text": "a nurse", "seq_len": 77, "sos_index": 0,
//!   "eos_index": 3, "data_file": "a_nurse.f32", "eos_norm": 28.1}]}
//! ```
//!
//! where every `data_file` (resolved relative to the manifest) holds
//! `seq_len × d` little-endian `f32` values, row-major. The `sos_index` and
//! `eos_index` given in the manifest are used verbatim.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the optional `eos_norm` check on load.
const EOS_NORM_RTOL: f64 = 1e-4;

/// One prompt's token embeddings (`seq_len × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    prompt: String,
    tokens: DMatrix<f32>,
    sos_index: usize,
    eos_index: usize,
}

impl EmbeddingSequence {
    pub fn new(prompt: impl Into<String>, tokens: DMatrix<f32>, sos_index: usize, eos_index: usize) -> Result<Self> {
        let prompt = prompt.into();
        let seq_len = tokens.nrows();
        if !(sos_index < eos_index && eos_index < seq_len) {
            return Err(Error::InvalidFixture(format!(
                "prompt `{prompt}`: need sos_index < eos_index < seq_len, got {sos_index}, {eos_index}, {seq_len}"
            )));
        }
        if tokens.ncols() == 0 {
            return Err(Error::InvalidFixture(format!("prompt `{prompt}`: d = 0")));
        }
        if let Some(row) = tokens.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("prompt `{prompt}`, token row {row}")));
        }
        Ok(Self {
            prompt,
            tokens,
            sos_index,
            eos_index,
        })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn tokens(&self) -> &DMatrix<f32> {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn sos_index(&self) -> usize {
        self.sos_index
    }

    pub fn eos_index(&self) -> usize {
        self.eos_index
    }

    /// The EOS token embedding as a column vector.
    pub fn eos(&self) -> DVector<f32> {
        self.tokens.row(self.eos_index).transpose()
    }
}

/// `guidance_eos − source_eos`.
pub fn delta_eos(source: &EmbeddingSequence, guidance: &EmbeddingSequence) -> Result<DVector<f32>> {
    if source.d() != guidance.d() {
        return Err(Error::DimensionMismatch(format!(
            "source `{}` has d = {}, guidance `{}` has d = {}",
            source.prompt,
            source.d(),
            guidance.prompt,
            guidance.d()
        )));
    }
    Ok(guidance.eos() - source.eos())
}

/// Stacked EOS deltas, one column per guidance prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DeltaSetFile", into = "DeltaSetFile")]
pub struct DeltaSet {
    deltas: DMatrix<f32>,
    labels: Vec<String>,
    source_prompt: String,
}

impl DeltaSet {
    /// Builds a set directly from a `d × L` matrix.
    pub fn from_matrix(deltas: DMatrix<f32>, labels: Vec<String>, source_prompt: impl Into<String>) -> Result<Self> {
        if deltas.ncols() == 0 {
            return Err(Error::Empty("delta set needs at least one column".into()));
        }
        if deltas.nrows() == 0 {
            return Err(Error::DimensionMismatch("delta set has d = 0".into()));
        }
        if labels.len() != deltas.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} delta columns",
                labels.len(),
                deltas.ncols()
            )));
        }
        if let Some(col) = deltas.column_iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("delta column {col} (`{}`)", labels[col])));
        }
        Ok(Self {
            deltas,
            labels,
            source_prompt: source_prompt.into(),
        })
    }

    /// `d × L` matrix of deltas.
    pub fn deltas(&self) -> &DMatrix<f32> {
        &self.deltas
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.deltas.map(f64::from)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn source_prompt(&self) -> &str {
        &self.source_prompt
    }

    /// Number of guidances `L`.
    pub fn len(&self) -> usize {
        self.deltas.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.ncols() == 0
    }

    pub fn d(&self) -> usize {
        self.deltas.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.deltas.iter().all(|v| *v == 0.0)
    }

    /// `1 / L`.
    pub fn default_lambda(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Reads a delta-set JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Wire form of a [`DeltaSet`]: columns listed as arrays.
#[derive(Serialize, Deserialize)]
struct DeltaSetFile {
    source_prompt: String,
    labels: Vec<String>,
    d: usize,
    deltas: Vec<Vec<f32>>,
}

impl TryFrom<DeltaSetFile> for DeltaSet {
    type Error = Error;

    fn try_from(f: DeltaSetFile) -> Result<Self> {
        if let Some(bad) = f.deltas.iter().position(|c| c.len() != f.d) {
            return Err(Error::DimensionMismatch(format!(
                "delta column {bad} has {} entries, expected d = {}",
                f.deltas[bad].len(),
                f.d
            )));
        }
        let flat: Vec<f32> = f.deltas.concat();
        let matrix = DMatrix::from_column_slice(f.d, f.deltas.len(), &flat);
        DeltaSet::from_matrix(matrix, f.labels, f.source_prompt)
    }
}

impl From<DeltaSet> for DeltaSetFile {
    fn from(s: DeltaSet) -> Self {
        DeltaSetFile {
            d: s.d(),
            deltas: s.deltas.column_iter().map(|c| c.iter().copied().collect()).collect(),
            labels: s.labels,
            source_prompt: s.source_prompt,
        }
    }
}

/// Stacks `delta_eos(source, g)` for every guidance, in input order.
pub fn build_delta_set(source: &EmbeddingSequence, guidances: &[EmbeddingSequence]) -> Result<DeltaSet> {
    if guidances.is_empty() {
        return Err(Error::Empty(format!(
            "no guidance prompts for source `{}`",
            source.prompt
        )));
    }
    let mut deltas = DMatrix::zeros(source.d(), guidances.len());
    for (l, g) in guidances.iter().enumerate() {
        deltas.set_column(l, &delta_eos(source, g)?);
    }
    let labels = guidances.iter().map(|g| g.prompt.clone()).collect();
    DeltaSet::from_matrix(deltas, labels, source.prompt.clone())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub d: usize,
    pub prompts: Vec<FixturePrompt>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixturePrompt {
    pub text: String,
    pub seq_len: usize,
    pub sos_index: Option<usize>,
    pub eos_index: Option<usize>,
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_norm: Option<f64>,
}

/// Loads every sequence listed in an embedding fixture manifest.
pub fn load_embedding_fixture(path: impl AsRef<Path>) -> Result<Vec<EmbeddingSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: FixtureManifest = serde_json::from_str(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    sequences_from_manifest(&manifest, &base)
}

pub(crate) fn sequences_from_manifest(manifest: &FixtureManifest, base: &Path) -> Result<Vec<EmbeddingSequence>> {
    if manifest.d == 0 {
        return Err(Error::InvalidFixture("d must be positive".into()));
    }
    manifest
        .prompts
        .iter()
        .map(|p| {
            let eos_index = p
                .eos_index
                .ok_or_else(|| Error::InvalidFixture(format!("prompt `{}` has no eos_index", p.text)))?;
            let sos_index = p
                .sos_index
                .ok_or_else(|| Error::InvalidFixture(format!("prompt `{}` has no sos_index", p.text)))?;
            if eos_index >= p.seq_len {
                return Err(Error::InvalidFixture(format!(
                    "prompt `{}`: eos_index {eos_index} >= seq_len {}",
                    p.text, p.seq_len
                )));
            }
            let file: PathBuf = base.join(&p.data_file);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let expected = p.seq_len * manifest.d * 4;
            if bytes.len() != expected {
                return Err(Error::InvalidFixture(format!(
                    "prompt `{}`: {} holds {} bytes, expected {expected}",
                    p.text,
                    file.display(),
                    bytes.len()
                )));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tokens = DMatrix::from_row_slice(p.seq_len, manifest.d, &values);
            let seq = EmbeddingSequence::new(p.text.clone(), tokens, sos_index, eos_index)?;
            if let Some(norm) = p.eos_norm {
                let actual = f64::from(seq.eos().norm());
                if (actual - norm).abs() > EOS_NORM_RTOL * norm.abs().max(1.0) {
                    return Err(Error::InvalidFixture(format!(
                        "prompt `{}`: EOS norm {actual} disagrees with manifest eos_norm {norm}",
                        p.text
                    )));
                }
            }
            Ok(seq)
        })
        .collect()
}

/// Writes `sequences` as a fixture: `manifest_path` plus one blob per prompt
/// next to it. Records each EOS norm in the manifest.
pub fn write_embedding_fixture(manifest_path: impl AsRef<Path>, sequences: &[EmbeddingSequence]) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let Some(first) = sequences.first() else {
        return Err(Error::Empty("no sequences to write".into()));
    };
    let d = first.d();
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut prompts = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        if seq.d() != d {
            return Err(Error::DimensionMismatch(format!(
                "sequence {i} has d = {}, expected {d}",
                seq.d()
            )));
        }
        let data_file = format!("prompt_{i:04}.f32");
        let bytes: Vec<u8> = seq.tokens.transpose().iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = base.join(&data_file);
        fs::write(&file, bytes).map_err(|e| Error::io(&file, e))?;
        prompts.push(FixturePrompt {
            text: seq.prompt.clone(),
            seq_len: seq.seq_len(),
            sos_index: Some(seq.sos_index),
            eos_index: Some(seq.eos_index),
            data_file,
            eos_norm: Some(f64::from(seq.eos().norm())),
        });
    }
    let manifest = FixtureManifest { d, prompts };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}
