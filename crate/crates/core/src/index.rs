//! Exact per-patient retrieval index.
//!
//! Entries are unit-normalized chunk embeddings stored as f32, grouped by
//! patient. Search is brute-force cosine (a dot product over unit
//! vectors) restricted to one patient's chunks that end at or before the
//! query cutoff, so a query can never see its own future. A manifest
//! records how the chunks were cut and which frozen encoder produced the
//! vectors so stale artifacts are detectable.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_history, materialize, ChunkDescriptor, ChunkParams, ChunkStrategy};
use crate::encoder::{retriever_encode, token_inputs, EmbeddingTables, SequenceEncoder};
use crate::error::{Error, Result};
use crate::timeline::{TimeDeltaScaler, TimelineEvent};

const MAGIC: &[u8; 4] = b"ERGP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub strategy: ChunkStrategy,
    pub chunk_size: usize,
    pub overlap: usize,
    pub window_minutes: i64,
    /// Digest of the frozen retriever checkpoint that embedded the chunks.
    pub encoder_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub descriptor: ChunkDescriptor,
    vector: Vec<f32>,
    /// 1/norm of `vector` in f64; folds load-time re-normalization into
    /// the score without rewriting the stored bytes.
    inv_norm: f64,
}

impl IndexEntry {
    fn new(descriptor: ChunkDescriptor, unit: &[f64]) -> Result<Self> {
        let vector: Vec<f32> = unit.iter().map(|&x| x as f32).collect();
        let inv_norm = renorm_factor(&vector)?;
        Ok(IndexEntry {
            descriptor,
            vector,
            inv_norm,
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

fn renorm_factor(vector: &[f32]) -> Result<f64> {
    let norm = vector.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm.is_finite() && (norm - 1.0).abs() < 1e-3) {
        return Err(Error::DimensionMismatch(format!(
            "index vector norm {norm} is not unit"
        )));
    }
    Ok(1.0 / norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit<'a> {
    pub descriptor: &'a ChunkDescriptor,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    d: usize,
    patients: BTreeMap<String, Vec<IndexEntry>>,
    manifest: IndexManifest,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub patients: usize,
    pub entries: usize,
    /// Chunks whose embedding had zero norm and were left out.
    pub skipped_degenerate: usize,
}

impl VectorIndex {
    pub fn new(d: usize, manifest: IndexManifest) -> Self {
        VectorIndex {
            d,
            patients: BTreeMap::new(),
            manifest,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    pub fn entry_count(&self) -> usize {
        self.patients.values().map(Vec::len).sum()
    }

    pub fn entries(&self, patient_id: &str) -> &[IndexEntry] {
        self.patients.get(patient_id).map_or(&[], Vec::as_slice)
    }

    pub fn insert(&mut self, descriptor: ChunkDescriptor, unit: &[f64]) -> Result<()> {
        if unit.len() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "vector width {} does not match index width {}",
                unit.len(),
                self.d
            )));
        }
        let patient = descriptor.patient_id.clone();
        let entry = IndexEntry::new(descriptor, unit)?;
        self.patients.entry(patient).or_default().push(entry);
        Ok(())
    }

    /// Top-`m` chunks of one patient ending at or before `cutoff_end`,
    /// by descending cosine score; exact ties resolve by ascending
    /// ordinal. An unknown patient yields no hits.
    pub fn search(
        &self,
        patient_id: &str,
        query_unit: &[f64],
        cutoff_end: usize,
        m: usize,
    ) -> Vec<SearchHit<'_>> {
        assert_eq!(query_unit.len(), self.d, "query width mismatch");
        let Some(entries) = self.patients.get(patient_id) else {
            return Vec::new();
        };
        let mut hits: Vec<SearchHit<'_>> = entries
            .iter()
            .filter(|e| e.descriptor.end <= cutoff_end)
            .map(|e| {
                let dot: f64 = e
                    .vector
                    .iter()
                    .zip(query_unit)
                    .map(|(&v, &q)| v as f64 * q)
                    .sum();
                SearchHit {
                    descriptor: &e.descriptor,
                    score: dot * e.inv_norm,
                }
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite scores")
                .then(a.descriptor.ordinal.cmp(&b.descriptor.ordinal))
        });
        hits.truncate(m);
        hits
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(self.patients.len() as u64).to_le_bytes())?;
        for (id, entries) in &self.patients {
            let id_bytes = id.as_bytes();
            w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
            w.write_all(id_bytes)?;
            w.write_all(&(entries.len() as u32).to_le_bytes())?;
            for e in entries {
                w.write_all(&[strategy_tag(e.descriptor.strategy)])?;
                w.write_all(&(e.descriptor.start as u32).to_le_bytes())?;
                w.write_all(&(e.descriptor.end as u32).to_le_bytes())?;
                w.write_all(&e.descriptor.ordinal.to_le_bytes())?;
                for &x in &e.vector {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let corrupt = |reason: String| Error::CorruptArtifact {
            path: display.clone(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, &display)?;
        if &magic != MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, &display)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let d = read_u32(&mut r, &display)? as usize;
        let n_patients = read_u64(&mut r, &display)? as usize;

        let mut patients = BTreeMap::new();
        let mut prev_id: Option<String> = None;
        for _ in 0..n_patients {
            let id_len = read_u16(&mut r, &display)? as usize;
            let mut id_bytes = vec![0u8; id_len];
            read_exact(&mut r, &mut id_bytes, &display)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| corrupt("patient id is not utf-8".into()))?;
            if prev_id.as_deref() >= Some(id.as_str()) {
                return Err(corrupt(format!("patient ids out of order at {id:?}")));
            }
            let n_entries = read_u32(&mut r, &display)? as usize;
            let mut entries = Vec::with_capacity(n_entries);
            for _ in 0..n_entries {
                let mut tag = [0u8; 1];
                read_exact(&mut r, &mut tag, &display)?;
                let strategy = strategy_from_tag(tag[0])
                    .ok_or_else(|| corrupt(format!("unknown strategy tag {}", tag[0])))?;
                let start = read_u32(&mut r, &display)? as usize;
                let end = read_u32(&mut r, &display)? as usize;
                let ordinal = read_u32(&mut r, &display)?;
                if start >= end {
                    return Err(corrupt(format!("empty chunk range [{start}, {end})")));
                }
                let mut vector = vec![0f32; d];
                for x in vector.iter_mut() {
                    let mut b = [0u8; 4];
                    read_exact(&mut r, &mut b, &display)?;
                    *x = f32::from_le_bytes(b);
                }
                let inv_norm = renorm_factor(&vector).map_err(|e| corrupt(e.to_string()))?;
                entries.push(IndexEntry {
                    descriptor: ChunkDescriptor {
                        patient_id: id.clone(),
                        strategy,
                        start,
                        end,
                        ordinal,
                    },
                    vector,
                    inv_norm,
                });
            }
            patients.insert(id.clone(), entries);
            prev_id = Some(id);
        }

        let manifest_len = read_u64(&mut r, &display)? as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        read_exact(&mut r, &mut manifest_bytes, &display)?;
        let manifest: IndexManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| corrupt(format!("manifest: {e}")))?;

        let mut trailing = [0u8; 1];
        match r.read(&mut trailing)? {
            0 => {}
            _ => return Err(corrupt("trailing bytes after manifest".into())),
        }

        Ok(VectorIndex {
            d,
            patients,
            manifest,
        })
    }
}

fn strategy_tag(s: ChunkStrategy) -> u8 {
    match s {
        ChunkStrategy::Event => 0,
        ChunkStrategy::Time => 1,
        ChunkStrategy::Visit => 2,
        ChunkStrategy::Stage => 3,
    }
}

fn strategy_from_tag(t: u8) -> Option<ChunkStrategy> {
    match t {
        0 => Some(ChunkStrategy::Event),
        1 => Some(ChunkStrategy::Time),
        2 => Some(ChunkStrategy::Visit),
        3 => Some(ChunkStrategy::Stage),
        _ => None,
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CorruptArtifact {
                path: path.to_string(),
                reason: "truncated file".into(),
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read, path: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

/// Chunk, embed, and index every patient history. Patients are processed
/// in parallel and merged in id order, so the result is independent of
/// thread scheduling. Chunks with degenerate (zero-norm) embeddings are
/// skipped and counted.
pub fn build_index(
    histories: &[(String, Vec<TimelineEvent>)],
    strategy: ChunkStrategy,
    params: &ChunkParams,
    tables: &EmbeddingTables,
    encoder: &SequenceEncoder,
    scaler: &TimeDeltaScaler,
    encoder_digest: &str,
) -> Result<(VectorIndex, BuildStats)> {
    params.validate()?;
    let per_patient: Vec<(String, Vec<IndexEntry>, usize)> = histories
        .par_iter()
        .map(|(id, events)| -> Result<(String, Vec<IndexEntry>, usize)> {
            let mut entries = Vec::new();
            let mut skipped = 0usize;
            if !events.is_empty() {
                for desc in chunk_history(id, events, strategy, params)? {
                    let chunk = materialize(&desc, events, params.size)?;
                    let tokens = token_inputs(&chunk.events, scaler);
                    match retriever_encode(tables, encoder, &tokens) {
                        Ok(unit) => entries.push(IndexEntry::new(desc, &unit)?),
                        Err(Error::DegenerateEmbedding(_)) => skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok((id.clone(), entries, skipped))
        })
        .collect::<Result<Vec<_>>>()?;

    let d = tables.d();
    let mut index = VectorIndex::new(
        d,
        IndexManifest {
            strategy,
            chunk_size: params.size,
            overlap: params.overlap,
            window_minutes: params.window_minutes,
            encoder_digest: encoder_digest.to_string(),
        },
    );
    let mut stats = BuildStats::default();
    for (id, entries, skipped) in per_patient {
        stats.patients += 1;
        stats.entries += entries.len();
        stats.skipped_degenerate += skipped;
        if index.patients.insert(id.clone(), entries).is_some() {
            return Err(Error::Config(format!("duplicate patient id {id:?}")));
        }
    }
    Ok((index, stats))
}
