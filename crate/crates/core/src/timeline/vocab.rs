//! Token vocabulary with fixed reserved ids.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const UNK: u32 = 3;

pub const GAP_WEEK_BASE: u32 = 4; // TIME-GAP//1-W .. 3-W
pub const GAP_MONTH_BASE: u32 = 7; // TIME-GAP//1-M .. 12-M
pub const GAP_YEAR: u32 = 19; // TIME-GAP//1-Y+

pub const OUTPATIENT_START: u32 = 20;
pub const OUTPATIENT_END: u32 = 21;
pub const EMERGENCY_START: u32 = 22;
pub const EMERGENCY_END: u32 = 23;
pub const ADMISSION_AT_HOSPITAL: u32 = 24;
pub const ADMISSION_AT_ICU: u32 = 25;
pub const DISCHARGE_FROM_HOSPITAL: u32 = 26;
pub const DISCHARGE_FROM_ICU: u32 = 27;
pub const MEDS_DEATH: u32 = 28;

pub const RESERVED_LEN: u32 = 29;

/// Reserved token strings, indexed by id.
pub fn reserved_tokens() -> Vec<String> {
    let mut t = vec![
        "PAD".to_string(),
        "MASK".to_string(),
        "CLS".to_string(),
        "UNK".to_string(),
    ];
    for w in 1..=3 {
        t.push(format!("TIME-GAP//{w}-W"));
    }
    for m in 1..=12 {
        t.push(format!("TIME-GAP//{m}-M"));
    }
    t.push("TIME-GAP//1-Y+".to_string());
    t.push("OUTPATIENT-START".to_string());
    t.push("OUTPATIENT-END".to_string());
    t.push("EMERGENCY-START".to_string());
    t.push("EMERGENCY-END".to_string());
    t.push("ADMISSION-AT-HOSPITAL".to_string());
    t.push("ADMISSION-AT-ICU".to_string());
    t.push("DISCHARGE-FROM-HOSPITAL".to_string());
    t.push("DISCHARGE-FROM-ICU".to_string());
    t.push("MEDS_DEATH".to_string());
    debug_assert_eq!(t.len() as u32, RESERVED_LEN);
    t
}

/// Bijective token <-> id map. Ids 0..RESERVED_LEN are fixed; the rest are
/// assigned in insertion order. A frozen vocabulary maps unseen tokens to UNK.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    frozen: bool,
}

impl Vocabulary {
    pub fn new() -> Self {
        let id_to_token = reserved_tokens();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Id for `token`, inserting it when the vocabulary is extendable.
    /// Frozen vocabularies return UNK for unseen tokens.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        if self.frozen {
            return UNK;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Write as "token<TAB>id" lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (id, token) in self.id_to_token.iter().enumerate() {
            writeln!(w, "{token}\t{id}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a vocabulary file. Ids must be dense and reserved tokens must sit
    /// at their fixed positions. The result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptArtifact {
            path: path.display().to_string(),
            reason,
        };
        let f = std::fs::File::open(path)?;
        let mut id_to_token: Vec<String> = Vec::new();
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, id_str) = line
                .rsplit_once('\t')
                .ok_or_else(|| corrupt(format!("line {}: missing tab", lineno + 1)))?;
            let id: u32 = id_str
                .parse()
                .map_err(|_| corrupt(format!("line {}: bad id {id_str:?}", lineno + 1)))?;
            if id as usize != id_to_token.len() {
                return Err(corrupt(format!(
                    "line {}: id {id} out of order (expected {})",
                    lineno + 1,
                    id_to_token.len()
                )));
            }
            id_to_token.push(token.to_string());
        }
        let reserved = reserved_tokens();
        if id_to_token.len() < reserved.len() {
            return Err(corrupt("missing reserved tokens".to_string()));
        }
        for (i, want) in reserved.iter().enumerate() {
            if &id_to_token[i] != want {
                return Err(corrupt(format!(
                    "reserved token at id {i} is {:?}, expected {want:?}",
                    id_to_token[i]
                )));
            }
        }
        let token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(corrupt("duplicate token".to_string()));
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            frozen: true,
        })
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}
