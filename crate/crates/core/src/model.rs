//! Full model state: embedding tables, sequence backbone, prototype bank,
//! fusion network, and the masked-prediction head, built from one seeded
//! stream so identical (config, seed) pairs produce identical parameters.
//!
//! The frozen retriever is a deep copy of (tables, backbone) taken at
//! fine-tune start; it never receives gradients.

use serde::{Deserialize, Serialize};

use crate::encoder::mlm::MlmHead;
use crate::encoder::{
    EmbeddingTables, EncoderKind, Pooling, SequenceEncoder, SequenceEncoderConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionNet, FusionPooling};
use crate::linalg::Mat;
use crate::prototypes::PrototypeBank;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub vocab_size: usize,
    /// Rows in the visit-position table; later visits clamp to the last row.
    pub v_max: usize,
    pub value_hidden: usize,
    pub encoder: SequenceEncoderConfig,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_pooling: FusionPooling,
    pub m_retrieved: usize,
    pub prototypes: usize,
    pub t_q: f64,
    pub t_h: f64,
    pub t_s: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.vocab_size == 0 || self.v_max == 0 || self.value_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.encoder.validate(self.d)?;
        if self.fusion_layers == 0 || self.fusion_heads == 0 || self.d % self.fusion_heads != 0 {
            return Err(Error::Config(format!(
                "fusion: {} layers, width {} vs {} heads",
                self.fusion_layers, self.d, self.fusion_heads
            )));
        }
        if self.prototypes == 0 {
            return Err(Error::Config("need at least one prototype".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub tables: EmbeddingTables,
    pub backbone: SequenceEncoder,
    pub bank: PrototypeBank,
    pub fusion: FusionNet,
    pub mlm: MlmHead,
}

/// Deep copy of the encoding half of the model; chunk and query vectors
/// for retrieval come from here and stay fixed during fine-tuning.
#[derive(Debug, Clone)]
pub struct RetrieverSnapshot {
    pub tables: EmbeddingTables,
    pub backbone: SequenceEncoder,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        // Fixed draw order; changing it changes every seeded artifact.
        let tables = EmbeddingTables::new(
            config.vocab_size,
            config.d,
            config.v_max,
            config.value_hidden,
            &mut rng,
        );
        let backbone = SequenceEncoder::new(config.encoder, config.d, &mut rng)?;
        let bank = PrototypeBank::new(
            config.prototypes,
            config.d,
            config.t_q,
            config.t_h,
            config.t_s,
            &mut rng,
        )?;
        let fusion = FusionNet::new(
            config.d,
            config.m_retrieved,
            config.fusion_layers,
            config.fusion_heads,
            config.fusion_pooling,
            &mut rng,
        )?;
        let mlm = MlmHead::new(config.vocab_size, config.d, &mut rng);
        Ok(ModelState {
            config,
            tables,
            backbone,
            bank,
            fusion,
            mlm,
        })
    }

    pub fn snapshot_retriever(&self) -> RetrieverSnapshot {
        RetrieverSnapshot {
            tables: self.tables.clone(),
            backbone: self.backbone.clone(),
        }
    }

    /// Zero-filled twin used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        ModelState {
            config: self.config,
            tables: self.tables.zeros_like(),
            backbone: self.backbone.zeros_like(),
            bank: self.bank.zeros_like(),
            fusion: self.fusion.zeros_like(),
            mlm: self.mlm.zeros_like(),
        }
    }

    /// Every tensor, in one fixed order shared by checkpoints, digests,
    /// and optimizer steps.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = self.tables.tensors();
        out.extend(self.backbone.tensors("backbone"));
        out.extend(self.bank.tensors());
        out.extend(self.fusion.tensors("fusion"));
        out.extend(self.mlm.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = self.tables.tensors_mut();
        out.extend(self.backbone.tensors_mut("backbone"));
        out.extend(self.bank.tensors_mut());
        out.extend(self.fusion.tensors_mut("fusion"));
        out.extend(self.mlm.tensors_mut());
        out
    }
}

const MAGIC: &[u8; 4] = b"RAGP";
const FORMAT_VERSION: u32 = 1;

fn encoder_kind_tag(k: EncoderKind) -> f64 {
    match k {
        EncoderKind::Bag => 0.0,
        EncoderKind::Attention => 1.0,
    }
}

fn pooling_tag(p: Pooling) -> f64 {
    match p {
        Pooling::Mean => 0.0,
        Pooling::Cls => 1.0,
    }
}

fn fusion_pooling_tag(p: FusionPooling) -> f64 {
    match p {
        FusionPooling::Mean => 0.0,
        FusionPooling::QuerySlot => 1.0,
    }
}

/// Config scalars stored alongside the tensors, each as a rank-1 [1]
/// record under "config/", so the file is a flat list of named tensors.
fn config_records(c: &ModelConfig) -> Vec<(String, f64)> {
    vec![
        ("config/d".into(), c.d as f64),
        ("config/vocab_size".into(), c.vocab_size as f64),
        ("config/v_max".into(), c.v_max as f64),
        ("config/value_hidden".into(), c.value_hidden as f64),
        ("config/encoder_kind".into(), encoder_kind_tag(c.encoder.kind)),
        ("config/encoder_layers".into(), c.encoder.layers as f64),
        ("config/encoder_heads".into(), c.encoder.heads as f64),
        ("config/encoder_pooling".into(), pooling_tag(c.encoder.pooling)),
        ("config/encoder_rotary".into(), f64::from(u8::from(c.encoder.rotary))),
        ("config/fusion_layers".into(), c.fusion_layers as f64),
        ("config/fusion_heads".into(), c.fusion_heads as f64),
        ("config/fusion_pooling".into(), fusion_pooling_tag(c.fusion_pooling)),
        ("config/m_retrieved".into(), c.m_retrieved as f64),
        ("config/prototypes".into(), c.prototypes as f64),
        ("config/t_q".into(), c.t_q),
        ("config/t_h".into(), c.t_h),
        ("config/t_s".into(), c.t_s),
    ]
}

fn read_scalar(map: &std::collections::BTreeMap<String, (Vec<u32>, Vec<f64>)>, name: &str) -> Result<f64> {
    let (dims, data) = map.get(name).ok_or_else(|| Error::CorruptArtifact {
        path: String::new(),
        reason: format!("missing record {name}"),
    })?;
    if dims != &[1] || data.len() != 1 {
        return Err(Error::CorruptArtifact {
            path: String::new(),
            reason: format!("{name} is not a scalar record"),
        });
    }
    Ok(data[0])
}

fn scalar_usize(v: f64, name: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::CorruptArtifact {
            path: String::new(),
            reason: format!("{name} = {v} is not a valid count"),
        });
    }
    Ok(v as usize)
}

fn config_from_records(
    map: &std::collections::BTreeMap<String, (Vec<u32>, Vec<f64>)>,
) -> Result<ModelConfig> {
    let tag = |name: &str, zero: &str, one: &str| -> Result<bool> {
        match read_scalar(map, name)? {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            v => Err(Error::CorruptArtifact {
                path: String::new(),
                reason: format!("{name} = {v}, expected 0 ({zero}) or 1 ({one})"),
            }),
        }
    };
    let encoder = SequenceEncoderConfig {
        kind: if tag("config/encoder_kind", "bag", "attention")? {
            EncoderKind::Attention
        } else {
            EncoderKind::Bag
        },
        layers: scalar_usize(read_scalar(map, "config/encoder_layers")?, "encoder_layers")?,
        heads: scalar_usize(read_scalar(map, "config/encoder_heads")?, "encoder_heads")?,
        pooling: if tag("config/encoder_pooling", "mean", "cls")? {
            Pooling::Cls
        } else {
            Pooling::Mean
        },
        rotary: tag("config/encoder_rotary", "off", "on")?,
    };
    Ok(ModelConfig {
        d: scalar_usize(read_scalar(map, "config/d")?, "d")?,
        vocab_size: scalar_usize(read_scalar(map, "config/vocab_size")?, "vocab_size")?,
        v_max: scalar_usize(read_scalar(map, "config/v_max")?, "v_max")?,
        value_hidden: scalar_usize(read_scalar(map, "config/value_hidden")?, "value_hidden")?,
        encoder,
        fusion_layers: scalar_usize(read_scalar(map, "config/fusion_layers")?, "fusion_layers")?,
        fusion_heads: scalar_usize(read_scalar(map, "config/fusion_heads")?, "fusion_heads")?,
        fusion_pooling: if tag("config/fusion_pooling", "mean", "query slot")? {
            FusionPooling::QuerySlot
        } else {
            FusionPooling::Mean
        },
        m_retrieved: scalar_usize(read_scalar(map, "config/m_retrieved")?, "m_retrieved")?,
        prototypes: scalar_usize(read_scalar(map, "config/prototypes")?, "prototypes")?,
        t_q: read_scalar(map, "config/t_q")?,
        t_h: read_scalar(map, "config/t_h")?,
        t_s: read_scalar(map, "config/t_s")?,
    })
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[u32], data: &[f64]) {
    let bytes = name.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize);
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the model: magic, format version, then named tensor records
/// (u16 name length, name, u8 rank, u32 dims, row-major f64 payload)
/// until end of file. Config scalars ride along as "config/" records.
pub fn save_model(state: &ModelState, path: &std::path::Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, value) in config_records(&state.config) {
        write_record(&mut out, &name, &[1], &[value]);
    }
    for (name, m) in state.tensors() {
        write_record(&mut out, &name, &[m.rows as u32, m.cols as u32], &m.data);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn corrupt(path: &std::path::Path, reason: impl Into<String>) -> Error {
    Error::CorruptArtifact {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn load_model(path: &std::path::Path) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(corrupt(path, "truncated file"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let mut map: std::collections::BTreeMap<String, (Vec<u32>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    while at < bytes.len() {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut at, name_len)?)
            .map_err(|_| corrupt(path, "record name is not utf-8"))?
            .to_string();
        let rank = take(&mut at, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
            count = count
                .checked_mul(d as usize)
                .ok_or_else(|| corrupt(path, "dimension overflow"))?;
            dims.push(d);
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
            data.push(v);
        }
        if map.insert(name.clone(), (dims, data)).is_some() {
            return Err(corrupt(path, format!("duplicate record {name}")));
        }
    }
    let config = config_from_records(&map).map_err(|e| match e {
        Error::CorruptArtifact { reason, .. } => corrupt(path, reason),
        other => other,
    })?;
    // Build a zero model of the right shapes, then fill from records.
    let mut state = ModelState::init(config, 0)?;
    let mut seen = 0usize;
    for (name, m) in state.tensors_mut() {
        let (dims, data) = map
            .get(&name)
            .ok_or_else(|| corrupt(path, format!("missing tensor {name}")))?;
        if dims.len() != 2 || dims[0] as usize != m.rows || dims[1] as usize != m.cols {
            return Err(corrupt(
                path,
                format!("tensor {name}: stored dims {dims:?} vs expected {}x{}", m.rows, m.cols),
            ));
        }
        m.data.copy_from_slice(data);
        seen += 1;
    }
    let expected = seen + config_records(&config).len();
    if map.len() != expected {
        return Err(corrupt(
            path,
            format!("{} records, expected {expected}", map.len()),
        ));
    }
    Ok(state)
}

/// Content digest of a saved model file.
pub fn model_digest(path: &std::path::Path) -> Result<String> {
    crate::digest::sha256_file(path)
}

/// A small config suitable for unit tests and toy pipelines.
pub fn toy_config(d: usize, vocab_size: usize, m_retrieved: usize, prototypes: usize) -> ModelConfig {
    ModelConfig {
        d,
        vocab_size,
        v_max: 64,
        value_hidden: 8,
        encoder: SequenceEncoderConfig::attention(1, 2),
        fusion_layers: 1,
        fusion_heads: 2,
        fusion_pooling: FusionPooling::Mean,
        m_retrieved,
        prototypes,
        t_q: 0.05,
        t_h: 0.2,
        t_s: 0.15,
    }
}
