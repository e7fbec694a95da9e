//! Corpus storage: a JSON manifest plus flat little-endian `f32` shards.
//!
//! Each shard holds the waveforms of a run of dialogs back to back. The
//! manifest records, per dialog, the shard it lives in, its byte offset and
//! the sample count of every turn; transcripts and alignments live in the
//! manifest. Every shard carries its byte length and SHA-256 digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{validate_dialog, Dialog, Turn, WordAlignment};
use crate::error::{Result, SpectraError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardRecord {
    /// File name relative to the manifest's directory.
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub num_samples: usize,
    pub words: Vec<WordAlignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogRecord {
    pub dialog_id: String,
    pub shard: usize,
    pub offset: u64,
    pub turns: Vec<TurnRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub sample_rate: u32,
    pub max_turn_seconds: f64,
    pub shards: Vec<ShardRecord>,
    pub dialogs: Vec<DialogRecord>,
}

/// A fully loaded, read-only corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub dialogs: Vec<Dialog>,
}

const DIALOGS_PER_SHARD: usize = 64;

fn digest(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn shard_err(path: &Path, msg: impl Into<String>) -> SpectraError {
    SpectraError::Shard {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `dialogs` as shards next to `manifest_path` and then the manifest
/// itself.
pub fn write_shards(dialogs: &[Dialog], manifest_path: &Path, max_turn_seconds: f64) -> Result<CorpusManifest> {
    let sample_rate = dialogs
        .iter()
        .flat_map(|d| d.turns.first())
        .map(|t| t.sample_rate)
        .next()
        .unwrap_or(16_000);
    for d in dialogs {
        validate_dialog(d, max_turn_seconds)?;
        if let Some(t) = d.turns.iter().find(|t| t.sample_rate != sample_rate) {
            return Err(SpectraError::InvalidTurn {
                dialog_id: d.dialog_id.clone(),
                turn_index: t.turn_index,
                msg: format!("sample rate {} differs from corpus rate {sample_rate}", t.sample_rate),
            });
        }
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    fs::create_dir_all(dir).map_err(SpectraError::io(dir))?;

    let mut shards = Vec::new();
    let mut records = Vec::with_capacity(dialogs.len());
    for (shard_idx, chunk) in dialogs.chunks(DIALOGS_PER_SHARD).enumerate() {
        let mut bytes = Vec::new();
        for d in chunk {
            let offset = bytes.len() as u64;
            let mut turns = Vec::with_capacity(d.turns.len());
            for t in &d.turns {
                for v in t.waveform.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                turns.push(TurnRecord {
                    turn_index: t.turn_index,
                    num_samples: t.waveform.len(),
                    words: t.words.clone(),
                });
            }
            records.push(DialogRecord {
                dialog_id: d.dialog_id.clone(),
                shard: shard_idx,
                offset,
                turns,
            });
        }
        let file = format!("{stem}-{shard_idx:05}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(SpectraError::io(&path))?;
        shards.push(ShardRecord {
            file,
            bytes: bytes.len() as u64,
            sha256: digest(&bytes),
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        sample_rate,
        max_turn_seconds,
        shards,
        dialogs: records,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(SpectraError::json(manifest_path))?;
    fs::write(manifest_path, json).map_err(SpectraError::io(manifest_path))?;
    Ok(manifest)
}

/// Loads and verifies a corpus. Any version, length or checksum problem
/// fails the whole load; no partial corpus is returned.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let raw = fs::read(manifest_path).map_err(SpectraError::io(manifest_path))?;
    let header: serde_json::Value = serde_json::from_slice(&raw).map_err(SpectraError::json(manifest_path))?;
    let found = header.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != MANIFEST_VERSION {
        return Err(SpectraError::ManifestVersion {
            found,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: CorpusManifest = serde_json::from_value(header).map_err(SpectraError::json(manifest_path))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut shard_bytes: Vec<Vec<u8>> = Vec::with_capacity(manifest.shards.len());
    for rec in &manifest.shards {
        let path: PathBuf = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(SpectraError::io(&path))?;
        if bytes.len() as u64 != rec.bytes {
            return Err(shard_err(&path, format!("length {} does not match manifest {}", bytes.len(), rec.bytes)));
        }
        if digest(&bytes) != rec.sha256 {
            return Err(shard_err(&path, "checksum mismatch"));
        }
        shard_bytes.push(bytes);
    }

    let mut dialogs = Vec::with_capacity(manifest.dialogs.len());
    for rec in &manifest.dialogs {
        let bytes = shard_bytes
            .get(rec.shard)
            .ok_or_else(|| SpectraError::Invalid(format!("dialog {} references missing shard {}", rec.dialog_id, rec.shard)))?;
        let path = dir.join(&manifest.shards[rec.shard].file);
        let mut pos = rec.offset as usize;
        let mut turns = Vec::with_capacity(rec.turns.len());
        for t in &rec.turns {
            let end = pos + t.num_samples * 4;
            if end > bytes.len() {
                return Err(shard_err(&path, format!("dialog {} runs past the end of the shard", rec.dialog_id)));
            }
            let waveform: Vec<f32> = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos = end;
            turns.push(Turn {
                turn_index: t.turn_index,
                sample_rate: manifest.sample_rate,
                waveform: waveform.into(),
                words: t.words.clone(),
            });
        }
        let dialog = Dialog {
            dialog_id: rec.dialog_id.clone(),
            turns,
        };
        validate_dialog(&dialog, manifest.max_turn_seconds)?;
        dialogs.push(dialog);
    }
    Ok(Corpus { manifest, dialogs })
}
