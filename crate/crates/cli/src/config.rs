//! Run configuration: a flat key=value file with `[section]` headers for
//! grouping. Keys form one namespace; sections carry no meaning beyond
//! readability. Unknown or duplicate keys are errors so typos fail loudly
//! instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ragline::chunker::{ChunkParams, ChunkStrategy};
use ragline::encoder::{EncoderKind, Pooling, SequenceEncoderConfig};
use ragline::fusion::train::TrainConfig;
use ragline::fusion::FusionPooling;
use ragline::model::ModelConfig;
use ragline::tasks::{SyntheticConfig, TaskName, TaskSpec};

/// Default settings, also the authoritative list of known keys.
pub const DEFAULTS: &[(&str, &str)] = &[
    // data
    ("patients", "400"),
    ("visits_min", "3"),
    ("visits_max", "5"),
    ("events_min", "8"),
    ("events_max", "20"),
    ("signal_strength", "0.9"),
    ("noise_codes", "500"),
    // model
    ("d", "64"),
    ("value_hidden", "16"),
    ("v_max", "64"),
    ("encoder_kind", "ATTENTION"),
    ("encoder_layers", "2"),
    ("encoder_heads", "4"),
    ("encoder_pooling", "MEAN"),
    ("encoder_rotary", "true"),
    ("fusion_layers", "2"),
    ("fusion_heads", "4"),
    ("fusion_pooling", "MEAN"),
    ("prototypes", "128"),
    ("t_q", "0.05"),
    ("t_h", "0.2"),
    ("t_s", "0.15"),
    // retrieval
    ("chunk_strategy", "EVENT"),
    ("history_chunk_size", "256"),
    ("chunk_overlap", "32"),
    ("chunk_window_minutes", "360"),
    ("num_retrieved", "24"),
    // train
    ("task", "IHM_48H"),
    ("query_len", "64"),
    ("max_epochs", "75"),
    ("batch_size", "32"),
    ("lr", "0.05"),
    ("lambda_u", "0.005"),
    ("patience", "3"),
    ("train_frac", "0.7"),
    ("val_frac", "0.15"),
    ("test_frac", "0.15"),
    ("los7_inclusive", "false"),
    // mlm
    ("mlm_steps", "200"),
    ("mlm_batch_size", "8"),
    ("mlm_lr", "0.001"),
    ("mlm_weight_decay", "0.01"),
    // eval
    ("n_boot", "1000"),
    ("inspect_top_k", "5"),
    // time
    ("delta_max_minutes", "525600"),
];

pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
    let known: BTreeMap<&str, &str> = DEFAULTS.iter().copied().collect();
    let mut map: BTreeMap<String, String> = DEFAULTS
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut seen: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                bail!("config line {}: malformed section header {raw:?}", lineno + 1);
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value, got {raw:?}", lineno + 1);
        };
        let key = key.trim();
        let value = value.trim();
        if !known.contains_key(key) {
            bail!("config line {}: unknown key {key:?}", lineno + 1);
        }
        if seen.iter().any(|s| s == key) {
            bail!("config line {}: duplicate key {key:?}", lineno + 1);
        }
        seen.push(key.to_string());
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

/// Canonical rendering used to digest the effective configuration.
pub fn canonical(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
    /// Digest of the canonical effective settings.
    pub digest: String,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                parse_text(&text)?
            }
            None => parse_text("")?,
        };
        let digest = ragline::digest::sha256_hex(canonical(&map).as_bytes());
        let cfg = RunConfig { map, digest };
        // Fail on bad values at load time, not mid-pipeline.
        cfg.synthetic(0)?;
        cfg.model_config(29)?.validate()?;
        cfg.chunk_params()?;
        cfg.chunk_strategy()?;
        cfg.train_config(0)?;
        cfg.task_spec()?;
        cfg.usize_key("query_len")?;
        cfg.usize_key("n_boot")?;
        cfg.usize_key("inspect_top_k")?;
        cfg.usize_key("mlm_steps")?;
        cfg.fractions()?;
        Ok(cfg)
    }

    fn get(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or_default()
    }

    pub fn usize_key(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .with_context(|| format!("config {key} = {:?} is not a count", self.get(key)))
    }

    pub fn f64_key(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .with_context(|| format!("config {key} = {:?} is not a number", self.get(key)))
    }

    pub fn bool_key(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => bail!("config {key} = {v:?} must be true or false"),
        }
    }

    pub fn synthetic(&self, seed: u64) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            patients: self.usize_key("patients")?,
            visits_min: self.usize_key("visits_min")?,
            visits_max: self.usize_key("visits_max")?,
            events_min: self.usize_key("events_min")?,
            events_max: self.usize_key("events_max")?,
            signal_strength: self.f64_key("signal_strength")?,
            noise_codes: self.usize_key("noise_codes")?,
            seed,
            ..SyntheticConfig::default()
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let kind = match self.get("encoder_kind") {
            "BAG" => EncoderKind::Bag,
            "ATTENTION" => EncoderKind::Attention,
            v => bail!("config encoder_kind = {v:?}, expected BAG or ATTENTION"),
        };
        let pooling = match self.get("encoder_pooling") {
            "MEAN" => Pooling::Mean,
            "CLS" => Pooling::Cls,
            v => bail!("config encoder_pooling = {v:?}, expected MEAN or CLS"),
        };
        let fusion_pooling = match self.get("fusion_pooling") {
            "MEAN" => FusionPooling::Mean,
            "QUERY_SLOT" => FusionPooling::QuerySlot,
            v => bail!("config fusion_pooling = {v:?}, expected MEAN or QUERY_SLOT"),
        };
        Ok(ModelConfig {
            d: self.usize_key("d")?,
            vocab_size,
            v_max: self.usize_key("v_max")?,
            value_hidden: self.usize_key("value_hidden")?,
            encoder: SequenceEncoderConfig {
                kind,
                layers: self.usize_key("encoder_layers")?,
                heads: self.usize_key("encoder_heads")?,
                pooling,
                rotary: self.bool_key("encoder_rotary")?,
            },
            fusion_layers: self.usize_key("fusion_layers")?,
            fusion_heads: self.usize_key("fusion_heads")?,
            fusion_pooling,
            m_retrieved: self.usize_key("num_retrieved")?,
            prototypes: self.usize_key("prototypes")?,
            t_q: self.f64_key("t_q")?,
            t_h: self.f64_key("t_h")?,
            t_s: self.f64_key("t_s")?,
        })
    }

    pub fn chunk_params(&self) -> Result<ChunkParams> {
        Ok(ChunkParams {
            size: self.usize_key("history_chunk_size")?,
            overlap: self.usize_key("chunk_overlap")?,
            window_minutes: self
                .get("chunk_window_minutes")
                .parse()
                .with_context(|| "config chunk_window_minutes".to_string())?,
        })
    }

    pub fn chunk_strategy(&self) -> Result<ChunkStrategy> {
        Ok(match self.get("chunk_strategy") {
            "EVENT" => ChunkStrategy::Event,
            "TIME" => ChunkStrategy::Time,
            "VISIT" => ChunkStrategy::Visit,
            "STAGE" => ChunkStrategy::Stage,
            v => bail!("config chunk_strategy = {v:?}, expected EVENT, TIME, VISIT, or STAGE"),
        })
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let name = match self.get("task") {
            "IHM_48H" => TaskName::Ihm48h,
            "LOS7_24H" => TaskName::Los724h,
            "READMIT_30D" => TaskName::Readmit30d,
            "MORT_1Y" => TaskName::Mort1y,
            v => bail!("config task = {v:?} is not a known task"),
        };
        Ok(TaskSpec::new(name).with_inclusive_los7(self.bool_key("los7_inclusive")?))
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            max_epochs: self.usize_key("max_epochs")?,
            batch_size: self.usize_key("batch_size")?,
            lr: self.f64_key("lr")?,
            lambda_u: self.f64_key("lambda_u")?,
            patience: self.usize_key("patience")?,
            seed,
        })
    }

    pub fn fractions(&self) -> Result<(f64, f64, f64)> {
        Ok((
            self.f64_key("train_frac")?,
            self.f64_key("val_frac")?,
            self.f64_key("test_frac")?,
        ))
    }

    pub fn scaler(&self) -> Result<ragline::timeline::TimeDeltaScaler> {
        Ok(ragline::timeline::TimeDeltaScaler::new(
            self.get("delta_max_minutes")
                .parse()
                .with_context(|| "config delta_max_minutes".to_string())?,
        ))
    }
}
